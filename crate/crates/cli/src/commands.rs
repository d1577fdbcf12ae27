use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use comanip::checkpoint::{config_hash, Checkpoint};
use comanip::dyad::{
    direction_consistency, generate_dataset, generate_trials, read_dataset, read_log, simulate_dyad, window_dataset,
    wrench_window_at, write_dataset, write_log, Controller, DyadConfig, DyadLog, MotionPrimitive, PrimitiveKind,
    TrainingSample,
};
use comanip::intent::{
    self, evaluate_intent, examples_from_samples, infer_command, train_intent, IntentCommander, IntentEvaluation,
    IntentModel,
};
use comanip::metrics::{
    build_report, evaluate_trial, read_trial_csv, table_i_baselines, trial_from_log, Baseline, MetricsReport,
    TrialMetrics,
};
use comanip::ppo::{self, evaluate_policy, train_ppo, EvalReport, GaussianPolicy, TrainMode};
use comanip::rng::substream;
use rand::Rng;
use serde::Serialize;

use crate::artifacts::Artifacts;
use crate::config::ExperimentConfig;
use crate::error::CliError;
use crate::{Command, Follower, ModeArg};

pub const DATASET: &str = "dataset.bin";
pub const DATA_SUMMARY: &str = "data_summary.json";
pub const INTENT_MODEL: &str = "intent.json";
pub const INTENT_CURVE: &str = "intent_curve.csv";
pub const INTENT_EVAL: &str = "intent_eval.json";
pub const PPO_EVAL: &str = "ppo_eval.json";
pub const REPORT: &str = "report.json";

pub(crate) fn dispatch(command: &Command, cfg: &ExperimentConfig, art: &mut Artifacts) -> Result<(), CliError> {
    match command {
        Command::GenData => gen_data(cfg, art),
        Command::TrainIntent { data } => train_intent_cmd(cfg, art, data.as_deref()),
        Command::Infer { model, log, frame } => infer(cfg, art, model, log, *frame),
        Command::Rollout {
            model,
            primitive,
            payload,
            follower,
        } => rollout_cmd(cfg, art, model.as_deref(), *primitive, *payload, *follower),
        Command::TrainPpo { mode } => train_ppo_cmd(cfg, art, *mode).map(|_| ()),
        Command::EvalPpo { adaptive, baseline } => eval_ppo_cmd(cfg, art, adaptive.as_deref(), baseline.as_deref()),
        Command::Metrics { inputs, label } => metrics_cmd(cfg, art, inputs, label),
        Command::Reproduce => reproduce(cfg, art),
    }
}

fn json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("artifact serializes") + "\n"
}

fn csv_rows<T: Serialize>(rows: impl IntoIterator<Item = T>) -> Result<Vec<u8>, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| CliError::Runtime(format!("csv: {e}")))?;
    }
    w.into_inner().map_err(|e| CliError::Runtime(format!("csv: {e}")))
}

/// Hash of the generation settings stored in the dataset header.
fn data_hash(cfg: &ExperimentConfig) -> String {
    config_hash(&cfg.dyad).expect("config serializes")
}

fn mode_name(mode: TrainMode) -> &'static str {
    match mode {
        TrainMode::Adaptive => "adaptive",
        TrainMode::Baseline => "baseline",
    }
}

fn follower_name(f: Follower) -> &'static str {
    match f {
        Follower::Learned => "learned",
        Follower::Admittance => "admittance",
    }
}

#[derive(Serialize)]
struct DataSummary {
    trials: usize,
    samples: usize,
    translation_samples: usize,
    direction_consistency: f64,
}

fn summarize(trials: usize, samples: &[TrainingSample], min_speed: f64) -> DataSummary {
    let (translation_samples, direction_consistency) = direction_consistency(samples, min_speed);
    DataSummary {
        trials,
        samples: samples.len(),
        translation_samples,
        direction_consistency,
    }
}

fn gen_data(cfg: &ExperimentConfig, art: &mut Artifacts) -> Result<(), CliError> {
    let trials = generate_trials(&cfg.dyad, cfg.seed)?;
    let mut samples = Vec::new();
    for (i, trial) in trials.iter().enumerate() {
        let m = trial.meta;
        let name = format!("logs/{i:03}-{}-p{}-r{}.jsonl", m.primitive, m.payload, m.repetition);
        write_log(&art.path(&name)?, &trial.log)?;
        for mut s in window_dataset(&trial.log, &cfg.dyad.window)? {
            s.meta = Some(m);
            samples.push(s);
        }
    }
    write_dataset(&art.path(DATASET)?, &data_hash(cfg), &samples)?;
    let summary = summarize(trials.len(), &samples, cfg.intent.min_speed);
    art.write(DATA_SUMMARY, json(&summary))?;
    println!(
        "{} trials, {} windows, direction consistency {:.3} over {} translation windows",
        summary.trials, summary.samples, summary.direction_consistency, summary.translation_samples
    );
    Ok(())
}

fn split_holdout(samples: Vec<TrainingSample>, repetition: u32) -> (Vec<TrainingSample>, Vec<TrainingSample>) {
    samples
        .into_iter()
        .partition(|s| s.meta.is_none_or(|m| m.repetition != repetition))
}

#[derive(Serialize)]
struct CurveRow {
    epoch: usize,
    diff: f64,
    kl: f64,
    total: f64,
}

#[derive(Serialize)]
struct IntentReport {
    train_samples: usize,
    #[serde(flatten)]
    eval: IntentEvaluation,
    mse_ratio: f64,
}

/// Trains on everything but the held-out repetition and scores the rest.
fn intent_stage(
    cfg: &ExperimentConfig,
    art: &mut Artifacts,
    samples: Vec<TrainingSample>,
) -> Result<(IntentModel, Option<IntentEvaluation>), CliError> {
    let ic = &cfg.intent;
    let (train, test) = split_holdout(samples, ic.holdout_repetition);
    eprintln!(
        "training intent model on {} windows ({} held out)",
        train.len(),
        test.len()
    );
    let examples = examples_from_samples(&train, &ic.net, ic.filter)?;
    let outcome = train_intent(&examples, &ic.net, &ic.train_config(cfg.seed))?;
    art.write(INTENT_MODEL, outcome.model.to_checkpoint()?.to_json()?)?;
    let curve = outcome
        .epoch_means()
        .into_iter()
        .enumerate()
        .map(|(epoch, (diff, kl, total))| CurveRow { epoch, diff, kl, total });
    art.write(INTENT_CURVE, csv_rows(curve)?)?;
    if test.is_empty() {
        return Ok((outcome.model, None));
    }
    let eval = evaluate_intent(&outcome.model, &test, ic.min_speed, cfg.seed, ic.eval_batch)?;
    let report = IntentReport {
        train_samples: train.len(),
        eval,
        mse_ratio: eval.mse_ratio(),
    };
    art.write(INTENT_EVAL, json(&report))?;
    println!(
        "held-out MSE {:.3e} ({:.2}% of predicting zero), sign agreement {:.3} over {} translation windows",
        eval.mse,
        100.0 * eval.mse_ratio(),
        eval.sign_agreement,
        eval.translation_samples
    );
    Ok((outcome.model, Some(eval)))
}

fn train_intent_cmd(cfg: &ExperimentConfig, art: &mut Artifacts, data: Option<&Path>) -> Result<(), CliError> {
    let samples = match data {
        Some(path) => {
            let (hash, samples) = read_dataset(path)?;
            if hash != data_hash(cfg) {
                return Err(CliError::Runtime(format!(
                    "{} was generated with different dyad settings than the current config",
                    path.display()
                )));
            }
            samples
        }
        None => generate_dataset(&cfg.dyad, cfg.seed)?,
    };
    intent_stage(cfg, art, samples).map(|_| ())
}

fn load_intent(path: &Path) -> Result<IntentModel, CliError> {
    Ok(IntentModel::from_checkpoint(&Checkpoint::load(
        path,
        intent::CHECKPOINT_KIND,
    )?)?)
}

#[derive(Serialize)]
struct InferOutput {
    frame: usize,
    t: f64,
    /// `(v_x, v_y, ω_z)` in the follower frame.
    command: [f64; 3],
}

fn infer(
    cfg: &ExperimentConfig,
    art: &mut Artifacts,
    model: &Path,
    log: &Path,
    frame: Option<usize>,
) -> Result<(), CliError> {
    let model = load_intent(model)?;
    let log = read_log(log)?;
    let last = log
        .frames
        .len()
        .checked_sub(1)
        .ok_or_else(|| CliError::Runtime("log has no frames".into()))?;
    let j = frame.unwrap_or(last);
    if j > last {
        return Err(CliError::Runtime(format!("frame {j} past the last frame {last}")));
    }
    let t = log.frames[j].t;
    let need = model.config.window_len();
    let window = wrench_window_at(&log, t, need)
        .ok_or_else(|| CliError::Runtime(format!("fewer than {need} wrench samples before frame {j}")))?;
    // Same draw a learned follower seeded with `seed` uses at this frame.
    let seed = substream(cfg.seed, "rollout.command", j as u64).random();
    let out = InferOutput {
        frame: j,
        t,
        command: infer_command(&model, &window, seed)?,
    };
    let text = json(&out);
    art.write("command.json", &text)?;
    print!("{text}");
    Ok(())
}

/// Closed-loop trial of `kind` with the nominal amplitude. Index `k` selects
/// the simulator and command substreams so paired followers share noise.
fn rollout_log(
    cfg: &ExperimentConfig,
    model: Option<&IntentModel>,
    kind: PrimitiveKind,
    payload: f64,
    follower: Follower,
) -> Result<DyadLog, CliError> {
    let k = kind.index() as u64;
    let primitive = MotionPrimitive::new(kind, kind.default_amplitude(), cfg.rollout.duration)?;
    let dyad = DyadConfig {
        payload,
        ..cfg.dyad.dyad.clone()
    };
    let sim_seed = substream(cfg.seed, "rollout.sim", k).random();
    Ok(match (follower, model) {
        (Follower::Admittance, _) => simulate_dyad(&primitive, Controller::Admittance, &dyad, sim_seed)?,
        (Follower::Learned, Some(model)) => {
            let mut commander = IntentCommander::new(model, substream(cfg.seed, "rollout.intent", k).random());
            simulate_dyad(&primitive, Controller::Learned(&mut commander), &dyad, sim_seed)?
        }
        (Follower::Learned, None) => return Err(CliError::Usage("the learned follower needs --model\n".into())),
    })
}

#[derive(Clone, Debug, Serialize)]
struct TrialFailure {
    primitive: PrimitiveKind,
    follower: &'static str,
    error: String,
}

fn score_log(cfg: &ExperimentConfig, log: &DyadLog) -> Result<TrialMetrics, String> {
    trial_from_log(log, cfg.dyad.dyad.object_length)
        .and_then(|t| evaluate_trial(&t, &cfg.metrics))
        .map_err(|e| e.to_string())
}

fn rollout_cmd(
    cfg: &ExperimentConfig,
    art: &mut Artifacts,
    model: Option<&Path>,
    kind: PrimitiveKind,
    payload: Option<f64>,
    follower: Follower,
) -> Result<(), CliError> {
    let model = model.map(load_intent).transpose()?;
    let log = rollout_log(
        cfg,
        model.as_ref(),
        kind,
        payload.unwrap_or(cfg.rollout.payload),
        follower,
    )?;
    let stem = format!("rollout-{kind}-{}", follower_name(follower));
    write_log(&art.path(&format!("{stem}.jsonl"))?, &log)?;
    let scored = score_log(cfg, &log);
    match &scored {
        Ok(m) => println!(
            "T_c {:.2} s, Δ_traj {:.4} m, Δ_v {:.3} m/s, F̄ {:.3} N",
            m.values.completion_time,
            m.values.trajectory_deviation,
            m.values.velocity_difference,
            m.values.follower_force
        ),
        Err(e) => println!("metrics unavailable: {e}"),
    }
    let value = match scored {
        Ok(m) => serde_json::to_value(m).expect("metrics serialize"),
        Err(e) => serde_json::json!({ "error": e }),
    };
    art.write(&format!("{stem}-metrics.json"), json(&value))?;
    Ok(())
}

fn train_ppo_cmd(cfg: &ExperimentConfig, art: &mut Artifacts, mode: ModeArg) -> Result<Vec<GaussianPolicy>, CliError> {
    let modes: &[TrainMode] = match mode {
        ModeArg::Adaptive => &[TrainMode::Adaptive],
        ModeArg::Baseline => &[TrainMode::Baseline],
        ModeArg::Both => &[TrainMode::Adaptive, TrainMode::Baseline],
    };
    let mut out = Vec::new();
    for &m in modes {
        let name = mode_name(m);
        eprintln!("training {name} policy for {} updates", cfg.ppo.updates);
        let trained = train_ppo(&cfg.ppo, &cfg.env, &cfg.randomization, &cfg.policy, m, cfg.seed, |_| {})?;
        art.write(
            &format!("ppo_{name}.json"),
            trained.policy.to_checkpoint(&cfg.env)?.to_json()?,
        )?;
        art.write(&format!("ppo_{name}_curve.csv"), csv_rows(&trained.curves)?)?;
        if let Some(last) = trained.curves.last() {
            println!("{name}: final training tracking error {:.4} m/s", last.tracking_error);
        }
        out.push(trained.policy);
    }
    Ok(out)
}

#[derive(Clone, Debug, Serialize)]
struct PpoComparison {
    /// Held-out payload force [N].
    payload: f64,
    episodes: usize,
    adaptive: EvalReport,
    baseline: EvalReport,
    /// `1 − adaptive / baseline` of the mean tracking error.
    relative_reduction: f64,
}

impl PpoComparison {
    fn render(&self) -> String {
        let mut s = String::new();
        writeln!(
            s,
            "Tracking error at {} N payload over {} episodes",
            self.payload, self.episodes
        )
        .unwrap();
        writeln!(s).unwrap();
        writeln!(s, "| Policy | Mean tracking error (m/s) |").unwrap();
        writeln!(s, "|---|---|").unwrap();
        writeln!(s, "| Payload-randomized | {:.4} |", self.adaptive.mean_tracking_error).unwrap();
        writeln!(s, "| No randomization | {:.4} |", self.baseline.mean_tracking_error).unwrap();
        writeln!(s).unwrap();
        writeln!(s, "Relative reduction: {:.1}%", 100.0 * self.relative_reduction).unwrap();
        s
    }
}

fn compare_policies(
    cfg: &ExperimentConfig,
    art: &mut Artifacts,
    adaptive: (&GaussianPolicy, &ppo::EnvConfig),
    baseline: (&GaussianPolicy, &ppo::EnvConfig),
) -> Result<PpoComparison, CliError> {
    let rand = cfg.randomization.with_payload(cfg.ppo_eval.payload);
    let n = cfg.ppo_eval.episodes;
    let a = evaluate_policy(adaptive.0, adaptive.1, &rand, n, cfg.seed)?;
    let b = evaluate_policy(baseline.0, baseline.1, &rand, n, cfg.seed)?;
    let cmp = PpoComparison {
        payload: cfg.ppo_eval.payload,
        episodes: n,
        relative_reduction: 1.0 - a.mean_tracking_error / b.mean_tracking_error,
        adaptive: a,
        baseline: b,
    };
    art.write(PPO_EVAL, json(&cmp))?;
    art.write("ppo_eval.md", cmp.render())?;
    print!("{}", cmp.render());
    Ok(cmp)
}

fn eval_ppo_cmd(
    cfg: &ExperimentConfig,
    art: &mut Artifacts,
    adaptive: Option<&Path>,
    baseline: Option<&Path>,
) -> Result<(), CliError> {
    let load = |p: Option<&Path>, default: &str| -> Result<(GaussianPolicy, ppo::EnvConfig), CliError> {
        let path = p.map_or_else(|| art.root().join(default), PathBuf::from);
        Ok(GaussianPolicy::from_checkpoint(&Checkpoint::load(
            &path,
            ppo::CHECKPOINT_KIND,
        )?)?)
    };
    let a = load(adaptive, "ppo_adaptive.json")?;
    let b = load(baseline, "ppo_baseline.json")?;
    compare_policies(cfg, art, (&a.0, &a.1), (&b.0, &b.1)).map(|_| ())
}

fn write_report(art: &mut Artifacts, report: &MetricsReport) -> Result<(), CliError> {
    art.write(REPORT, json(report))?;
    art.write("report.md", report.render())?;
    print!("{}", report.render());
    Ok(())
}

fn metrics_cmd(cfg: &ExperimentConfig, art: &mut Artifacts, inputs: &[PathBuf], label: &str) -> Result<(), CliError> {
    let mut trials = Vec::new();
    for path in inputs {
        let trial = if path.extension().is_some_and(|e| e == "csv") {
            read_trial_csv(path)?
        } else {
            trial_from_log(&read_log(path)?, cfg.dyad.dyad.object_length)?
        };
        let m =
            evaluate_trial(&trial, &cfg.metrics).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
        trials.push(m);
    }
    write_report(art, &build_report(label, &trials, &table_i_baselines())?)
}

#[derive(Serialize)]
struct ReproduceReport {
    learned: MetricsReport,
    admittance: MetricsReport,
    failures: Vec<TrialFailure>,
    intent: Option<IntentEvaluation>,
    ppo: PpoComparison,
}

fn reproduce(cfg: &ExperimentConfig, art: &mut Artifacts) -> Result<(), CliError> {
    eprintln!("generating demonstrations");
    let samples = generate_dataset(&cfg.dyad, cfg.seed)?;
    let trials = PrimitiveKind::ALL.len() * cfg.dyad.payloads.len() * cfg.dyad.repetitions as usize;
    art.write(DATA_SUMMARY, json(&summarize(trials, &samples, cfg.intent.min_speed)))?;
    let (model, intent_eval) = intent_stage(cfg, art, samples)?;

    let policies = train_ppo_cmd(cfg, art, ModeArg::Both)?;
    let ppo = compare_policies(cfg, art, (&policies[0], &cfg.env), (&policies[1], &cfg.env))?;

    let mut learned = Vec::new();
    let mut admittance = Vec::new();
    let mut failures = Vec::new();
    for &kind in &cfg.rollout.primitives {
        for follower in [Follower::Learned, Follower::Admittance] {
            eprintln!("rollout {kind} with the {} follower", follower_name(follower));
            let log = rollout_log(cfg, Some(&model), kind, cfg.rollout.payload, follower)?;
            write_log(
                &art.path(&format!("rollouts/{kind}-{}.jsonl", follower_name(follower)))?,
                &log,
            )?;
            match score_log(cfg, &log) {
                Ok(m) if follower == Follower::Learned => learned.push(m),
                Ok(m) => admittance.push(m),
                Err(error) => failures.push(TrialFailure {
                    primitive: kind,
                    follower: follower_name(follower),
                    error,
                }),
            }
        }
    }
    for f in &failures {
        eprintln!(
            "no metrics for {} with the {} follower: {}",
            f.primitive, f.follower, f.error
        );
    }
    let admittance = build_report("Admittance follower", &admittance, &[])?;
    let mut columns = vec![Baseline {
        name: admittance.label.clone(),
        values: admittance.mean,
    }];
    columns.extend(table_i_baselines());
    let learned = build_report("Learned follower", &learned, &columns)?;
    write_report(art, &learned)?;
    let report = ReproduceReport {
        learned,
        admittance,
        failures,
        intent: intent_eval,
        ppo,
    };
    art.write("reproduce.json", json(&report))?;
    Ok(())
}
