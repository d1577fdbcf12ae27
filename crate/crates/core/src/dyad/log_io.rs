use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DyadError, DyadLog, Frame, Pose, Wrench, WrenchTick};

const FORMAT: &str = "comanip-dyad-log";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    t: f64,
    leader: Option<Pose>,
    follower: Option<Pose>,
    object: Option<Pose>,
    w1: Option<Wrench>,
    w2: Option<Wrench>,
}

/// JSON lines: a header, then one record per wrench tick. Pose fields are
/// filled on frame ticks and `null` otherwise; a frame falling between ticks
/// gets its own record with `null` wrenches.
pub fn write_log(path: &Path, log: &DyadLog) -> Result<(), DyadError> {
    let io = |source| DyadError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut out = BufWriter::new(fs::File::create(path).map_err(io)?);
    let header = Header {
        format: FORMAT.into(),
        version: VERSION,
    };
    writeln!(out, "{}", line(&header)).map_err(io)?;
    let mut frames = log.frames.iter().peekable();
    for tick in &log.wrench {
        while let Some(f) = frames.next_if(|f| f.t < tick.t) {
            writeln!(out, "{}", line(&frame_record(f, None))).map_err(io)?;
        }
        let rec = match frames.next_if(|f| f.t == tick.t) {
            Some(f) => frame_record(f, Some(tick)),
            None => Record {
                t: tick.t,
                leader: None,
                follower: None,
                object: None,
                w1: Some(tick.w1),
                w2: Some(tick.w2),
            },
        };
        writeln!(out, "{}", line(&rec)).map_err(io)?;
    }
    for f in frames {
        writeln!(out, "{}", line(&frame_record(f, None))).map_err(io)?;
    }
    out.flush().map_err(io)
}

fn line<T: Serialize>(r: &T) -> String {
    serde_json::to_string(r).expect("plain data serializes")
}

fn frame_record(f: &Frame, tick: Option<&WrenchTick>) -> Record {
    Record {
        t: f.t,
        leader: Some(f.leader),
        follower: Some(f.follower),
        object: Some(f.object),
        w1: tick.map(|t| t.w1),
        w2: tick.map(|t| t.w2),
    }
}

/// Reads a file written by [`write_log`]. Any malformed line fails the whole read.
pub fn read_log(path: &Path) -> Result<DyadLog, DyadError> {
    let text = fs::read_to_string(path).map_err(|source| DyadError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut lines = text.lines();
    let header: Header = lines
        .next()
        .and_then(|l| serde_json::from_str(l).ok())
        .ok_or_else(|| DyadError::Version("missing or unreadable header".into()))?;
    if header.format != FORMAT || header.version != VERSION {
        return Err(DyadError::Version(format!("{} v{}", header.format, header.version)));
    }
    if !text.is_empty() && !text.ends_with('\n') {
        return Err(DyadError::Truncated("last record is not newline-terminated".into()));
    }
    let mut log = DyadLog::default();
    for (i, l) in lines.enumerate() {
        let line = i + 2;
        let r: Record = serde_json::from_str(l).map_err(|e| DyadError::Malformed {
            line,
            detail: e.to_string(),
        })?;
        match (r.w1, r.w2) {
            (Some(w1), Some(w2)) => log.wrench.push(WrenchTick { t: r.t, w1, w2 }),
            (None, None) => {}
            _ => {
                return Err(DyadError::Malformed {
                    line,
                    detail: "only one wrist wrench present".into(),
                })
            }
        }
        match (r.leader, r.follower, r.object) {
            (Some(leader), Some(follower), Some(object)) => log.frames.push(Frame {
                t: r.t,
                leader,
                follower,
                object,
            }),
            (None, None, None) if r.w1.is_some() => {}
            _ => {
                return Err(DyadError::Malformed {
                    line,
                    detail: "record has neither a full wrench pair nor a full pose set".into(),
                })
            }
        }
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dyad::{simulate_dyad, Controller, DyadConfig, MotionPrimitive, PrimitiveKind};

    fn round_trip(log: &DyadLog) -> DyadLog {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.jsonl");
        write_log(&path, log).unwrap();
        read_log(&path).unwrap()
    }

    #[test]
    fn empty_log_round_trips() {
        assert_eq!(round_trip(&DyadLog::default()), DyadLog::default());
    }

    #[test]
    fn ten_second_seeded_log_is_bit_exact() {
        let c = DyadConfig {
            settle: 6.5,
            ..DyadConfig::default()
        };
        let p = MotionPrimitive::nominal(PrimitiveKind::FollowerRotCw);
        let log = simulate_dyad(&p, Controller::Admittance, &c, 5).unwrap();
        assert!(log.wrench.last().unwrap().t >= 10.0);
        let back = round_trip(&log);
        assert_eq!(back, log);
        let bits = |l: &DyadLog| -> Vec<u64> {
            l.wrench
                .iter()
                .flat_map(|t| t.w1.0.iter().chain(&t.w2.0).map(|v| v.to_bits()))
                .collect()
        };
        assert_eq!(bits(&back), bits(&log));
    }

    #[test]
    fn off_tick_frames_keep_their_own_records() {
        let log = DyadLog {
            wrench: vec![WrenchTick {
                t: 0.0,
                w1: Wrench([1.0; 6]),
                w2: Wrench([2.0; 6]),
            }],
            frames: vec![Frame {
                t: 0.5,
                leader: Pose::new(1.0, 2.0, 3.0),
                follower: Pose::default(),
                object: Pose::default(),
            }],
        };
        assert_eq!(round_trip(&log), log);
    }

    #[test]
    fn corrupt_header_and_truncation_are_typed_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.jsonl");
        let c = DyadConfig::default();
        let log = simulate_dyad(
            &MotionPrimitive::nominal(PrimitiveKind::Left),
            Controller::Admittance,
            &c,
            1,
        )
        .unwrap();
        write_log(&path, &log).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        fs::write(&path, text.replacen("\"version\":1", "\"version\":7", 1)).unwrap();
        assert!(matches!(read_log(&path), Err(DyadError::Version(_))));
        fs::write(&path, &text[..text.len() - 10]).unwrap();
        assert!(matches!(read_log(&path), Err(DyadError::Truncated(_))));
        fs::write(&path, "garbage\n").unwrap();
        assert!(matches!(read_log(&path), Err(DyadError::Version(_))));
    }
}
