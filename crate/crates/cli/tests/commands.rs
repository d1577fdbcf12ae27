use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "--dyad.payloads",
    "[0.0]",
    "--dyad.repetitions",
    "1",
    "--dyad.duration",
    "1.0",
    "--dyad.window.stride",
    "4",
];

fn comanip(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_comanip")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = comanip(args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn with<'a>(base: &[&'a str], extra: &[&'a str]) -> Vec<&'a str> {
    base.iter().chain(extra).copied().collect()
}

fn files(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn gen_data_is_byte_identical_across_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        ok(&with(
            &["gen-data", "--seed", "7", "--out", dir.to_str().unwrap()],
            TINY,
        ));
    }
    let listed = files(&a);
    assert_eq!(listed, files(&b));
    assert_eq!(listed.iter().filter(|p| p.starts_with("logs")).count(), 8);
    for rel in &listed {
        if rel != Path::new("config.toml") {
            assert_eq!(
                fs::read(a.join(rel)).unwrap(),
                fs::read(b.join(rel)).unwrap(),
                "{rel:?} differs"
            );
        }
    }
    let m = manifest(&a);
    assert_eq!(m["command"], "gen-data");
    assert_eq!(m["seed"], 7);
    assert_eq!(m["files"].as_array().unwrap().len(), listed.len() - 2);
}

#[test]
fn constant_offset_fixture_scores_a_tenth_of_a_metre() {
    let tmp = tempfile::tempdir().unwrap();
    let csv = tmp.path().join("fixture.csv");
    let mut text = String::from("t,hx,hy,hz,rx,ry,rz,f1x,f1y,f1z,f2x,f2y,f2z\n");
    for i in 0..=120 {
        let t = i as f64 / 10.0;
        let x = ((t - 1.0) / 10.0).clamp(0.0, 1.0);
        text += &format!("{t},{x},0,0,{x},0.1,0,1,0,0,0,2,0\n");
    }
    fs::write(&csv, text).unwrap();
    let out = tmp.path().join("m");
    let stdout = ok(&[
        "metrics",
        "--input",
        csv.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(stdout.contains("23.78") && stdout.contains("17.355"));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    let mean = &report["mean"];
    assert!((mean["trajectory_deviation"].as_f64().unwrap() - 0.1).abs() < 1e-12);
    assert!((mean["follower_force"].as_f64().unwrap() - 3.0).abs() < 1e-12);
    assert_eq!(mean["velocity_difference"].as_f64().unwrap(), 0.0);
}

#[test]
fn usage_and_config_errors_exit_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("never");
    let o = out.to_str().unwrap();
    for args in [
        vec!["fly"],
        vec!["gen-data", "--out", o, "--bogus"],
        vec!["gen-data", "--out", o, "--ppo.clipp", "0.1"],
        vec!["gen-data", "--out", o, "--ppo.clip"],
        vec!["gen-data", "--out", o, "--config", "/nonexistent.toml"],
    ] {
        let r = comanip(&args);
        assert_eq!(r.status.code(), Some(1), "{args:?}");
        assert!(!String::from_utf8_lossy(&r.stderr).is_empty());
    }
    let r = comanip(&["gen-data", "--out", o, "--ppo.clipp", "0.1"]);
    assert!(String::from_utf8_lossy(&r.stderr).contains("ppo.clipp"));
    assert!(!out.exists());
    assert_eq!(comanip(&["--help"]).status.code(), Some(0));
}

#[test]
fn runtime_failures_exit_with_two_and_roll_back() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let r = comanip(&[
        "infer",
        "--model",
        "/nonexistent.json",
        "--log",
        "x.jsonl",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(r.status.code(), Some(2));
    assert!(!out.exists(), "partial artifacts left behind");
}

#[test]
fn steps_chain_through_one_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("run");
    let d = dir.to_str().unwrap();
    let small_net: &[&str] = &[
        "--intent.net.width",
        "16",
        "--intent.net.blocks",
        "1",
        "--intent.epochs",
        "1",
    ];
    let small_ppo: &[&str] = &[
        "--ppo.num_envs",
        "4",
        "--ppo.rollout_len",
        "16",
        "--ppo.updates",
        "2",
        "--env.episode_steps",
        "20",
        "--ppo_eval.episodes",
        "3",
    ];
    ok(&with(&["gen-data", "--out", d], TINY));
    let data = dir.join("dataset.bin");
    ok(&with(
        &with(&["train-intent", "--out", d, "--data", data.to_str().unwrap()], TINY),
        small_net,
    ));
    let model = dir.join("intent.json");
    let log = fs::read_dir(dir.join("logs")).unwrap().next().unwrap().unwrap().path();
    let cmd = ok(&[
        "infer",
        "--out",
        d,
        "--model",
        model.to_str().unwrap(),
        "--log",
        log.to_str().unwrap(),
    ]);
    let v: serde_json::Value = serde_json::from_str(&cmd).unwrap();
    assert_eq!(v["command"].as_array().unwrap().len(), 3);
    ok(&[
        "rollout",
        "--out",
        d,
        "--model",
        model.to_str().unwrap(),
        "--primitive",
        "forward",
        "--rollout.duration",
        "1.0",
    ]);
    ok(&with(&["train-ppo", "--out", d], small_ppo));
    let table = ok(&with(&["eval-ppo", "--out", d], small_ppo));
    assert!(table.contains("Relative reduction"));
    let listed: Vec<String> = manifest(&dir)["files"]
        .as_array()
        .unwrap()
        .iter()
        .map(|f| f["path"].as_str().unwrap().to_string())
        .collect();
    for f in [
        "dataset.bin",
        "intent.json",
        "intent_curve.csv",
        "command.json",
        "rollout-forward-learned.jsonl",
        "ppo_adaptive.json",
        "ppo_baseline_curve.csv",
        "ppo_eval.md",
    ] {
        assert!(listed.iter().any(|p| p == f), "{f} missing from manifest");
    }

    // A dataset made under other generation settings is refused.
    let r = comanip(&["train-intent", "--out", d, "--data", data.to_str().unwrap()]);
    assert_eq!(r.status.code(), Some(2));
    // The learned follower needs a model.
    let r = comanip(&["rollout", "--out", d, "--primitive", "left"]);
    assert_eq!(r.status.code(), Some(1));
}
