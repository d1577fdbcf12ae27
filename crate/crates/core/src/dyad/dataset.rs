use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::intent::{VelocityWindow, WrenchWindow};
use crate::wavelet::ForceTorqueSequence;

use super::kinematics::PrimitiveKind;
use super::{wrap_angle, DyadError, DyadLog, Pose};

/// Backward differences `v(t) = (p(t) − p(t−Δt))/Δt` of a uniformly sampled
/// pose series, in the world frame. The angle difference is wrapped into
/// `(−π, π]`; the first sample copies the second.
pub fn finite_diff_velocity(times: &[f64], poses: &[Pose]) -> Result<Vec<[f64; 3]>, DyadError> {
    let n = poses.len();
    if n < 2 || times.len() != n {
        return Err(DyadError::TooFewSamples(n.min(times.len())));
    }
    let nominal = (times[n - 1] - times[0]) / (n - 1) as f64;
    let mut out = Vec::with_capacity(n);
    out.push([0.0; 3]);
    for i in 1..n {
        let dt = times[i] - times[i - 1];
        if !(dt > 0.0) || (dt - nominal).abs() > 0.01 * nominal {
            return Err(DyadError::NonUniformTime { dt, nominal });
        }
        let (a, b) = (poses[i - 1], poses[i]);
        out.push([(b.x - a.x) / dt, (b.y - a.y) / dt, wrap_angle(b.theta - a.theta) / dt]);
    }
    out[0] = out[1];
    Ok(out)
}

/// Window geometry: `window` wrench samples per input, `horizon` label frames,
/// and every `stride`-th eligible frame kept.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WindowSpec {
    pub horizon: usize,
    pub window: usize,
    pub stride: usize,
}

impl Default for WindowSpec {
    fn default() -> Self {
        Self {
            horizon: 6,
            window: 198,
            stride: 1,
        }
    }
}

/// Provenance of a generated sample.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub primitive: PrimitiveKind,
    pub payload: f64,
    pub repetition: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSample {
    /// Frame the window ends at.
    pub frame: u32,
    pub window: WrenchWindow,
    /// Follower velocities at frames `frame+1 ..= frame+H`, expressed in the
    /// follower frame at `frame`.
    pub label: VelocityWindow,
    pub meta: Option<SampleMeta>,
}

/// Pairs each eligible frame with its preceding wrench window and the
/// following `H` follower velocities. Logs too short for one window yield an
/// empty list.
pub fn window_dataset(log: &DyadLog, spec: &WindowSpec) -> Result<Vec<TrainingSample>, DyadError> {
    let nf = log.frames.len();
    if nf < spec.horizon + 1 || log.wrench.len() < spec.window || spec.window == 0 || spec.horizon == 0 {
        return Ok(Vec::new());
    }
    let times: Vec<f64> = log.frames.iter().map(|f| f.t).collect();
    let poses: Vec<Pose> = log.frames.iter().map(|f| f.follower).collect();
    let vel = finite_diff_velocity(&times, &poses)?;
    let nw = log.wrench.len();
    let tick_dt = if nw > 1 {
        (log.wrench[nw - 1].t - log.wrench[0].t) / (nw - 1) as f64
    } else {
        0.0
    };
    let mut out = Vec::new();
    let mut end = 0usize;
    let mut eligible = 0usize;
    for j in 0..nf - spec.horizon {
        let tj = log.frames[j].t;
        while end + 1 < log.wrench.len() && log.wrench[end + 1].t <= tj + 1e-9 {
            end += 1;
        }
        let te = log.wrench[end].t;
        // Frames past the end of the wrench stream would get a stale window.
        if te > tj + 1e-9 || tj - te > 1.5 * tick_dt + 1e-9 || end + 1 < spec.window {
            continue;
        }
        let keep = eligible % spec.stride.max(1) == 0;
        eligible += 1;
        if !keep {
            continue;
        }
        let ticks = &log.wrench[end + 1 - spec.window..=end];
        let group = |pick: fn(&super::Wrench) -> [f64; 3]| {
            ForceTorqueSequence::new(
                ticks
                    .iter()
                    .map(|t| {
                        let (a, b) = (pick(&t.w1), pick(&t.w2));
                        [a[0], a[1], a[2], b[0], b[1], b[2]]
                    })
                    .collect(),
            )
        };
        let heading = log.frames[j].follower;
        let rows = (1..=spec.horizon)
            .map(|k| {
                let v = vel[j + k];
                let local = heading.to_local([v[0], v[1]]);
                [local[0], local[1], v[2]]
            })
            .collect();
        out.push(TrainingSample {
            frame: j as u32,
            window: WrenchWindow {
                force: group(|w| w.force()),
                torque: group(|w| w.torque()),
            },
            label: VelocityWindow::new(rows),
            meta: None,
        });
    }
    Ok(out)
}

const MAGIC: &[u8; 4] = b"CMDS";
const VERSION: u32 = 1;

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> DyadError + '_ {
    move |source| DyadError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Binary dataset: magic, version, config hash, `(H, T, count)` header then
/// little-endian sample records.
pub fn write_dataset(path: &Path, config_hash: &str, samples: &[TrainingSample]) -> Result<(), DyadError> {
    let (h, t) = samples
        .first()
        .map_or((0, 0), |s| (s.label.horizon(), s.window.force.len()));
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(config_hash.len() as u32).to_le_bytes());
    buf.extend_from_slice(config_hash.as_bytes());
    buf.extend_from_slice(&(h as u32).to_le_bytes());
    buf.extend_from_slice(&(t as u32).to_le_bytes());
    buf.extend_from_slice(&(samples.len() as u64).to_le_bytes());
    for s in samples {
        if s.label.horizon() != h || s.window.force.len() != t || s.window.torque.len() != t {
            return Err(DyadError::Config("samples disagree on window or horizon size".into()));
        }
        buf.extend_from_slice(&s.frame.to_le_bytes());
        match s.meta {
            None => buf.push(0),
            Some(m) => {
                buf.push(1);
                buf.push(m.primitive.index());
                buf.extend_from_slice(&m.payload.to_le_bytes());
                buf.extend_from_slice(&m.repetition.to_le_bytes());
            }
        }
        for row in s.window.force.rows.iter().chain(&s.window.torque.rows) {
            for v in row {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        for v in s.label.flat() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(&buf).map_err(io_err(path))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DyadError> {
        if self.pos + n > self.bytes.len() {
            return Err(DyadError::Truncated(format!(
                "needed {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, DyadError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, DyadError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, DyadError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, DyadError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Reads a file written by [`write_dataset`], returning the config hash and samples.
pub fn read_dataset(path: &Path) -> Result<(String, Vec<TrainingSample>), DyadError> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(io_err(path))?;
    let mut c = Cursor { bytes: &bytes, pos: 0 };
    let magic = c.take(4).map_err(|_| DyadError::Version("missing header".into()))?;
    if magic != MAGIC {
        return Err(DyadError::Version("not a dataset file".into()));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(DyadError::Version(format!("dataset version {version}")));
    }
    let hash_len = c.u32()? as usize;
    let hash = String::from_utf8(c.take(hash_len)?.to_vec()).map_err(|_| DyadError::Malformed {
        line: 0,
        detail: "config hash is not UTF-8".into(),
    })?;
    let h = c.u32()? as usize;
    let t = c.u32()? as usize;
    let count = c.u64()? as usize;
    let per_sample = 4 + 1 + 2 * t * 6 * 8 + h * 3 * 8;
    if count.saturating_mul(per_sample) > bytes.len() {
        return Err(DyadError::Truncated(format!("{count} samples declared")));
    }
    let mut samples = Vec::with_capacity(count);
    for _ in 0..count {
        let frame = c.u32()?;
        let meta = match c.u8()? {
            0 => None,
            1 => {
                let idx = c.u8()?;
                let primitive = PrimitiveKind::from_index(idx).ok_or(DyadError::Malformed {
                    line: 0,
                    detail: format!("primitive index {idx}"),
                })?;
                Some(SampleMeta {
                    primitive,
                    payload: c.f64()?,
                    repetition: c.u32()?,
                })
            }
            other => {
                return Err(DyadError::Malformed {
                    line: 0,
                    detail: format!("meta flag {other}"),
                })
            }
        };
        let mut group = || -> Result<ForceTorqueSequence, DyadError> {
            let mut rows = Vec::with_capacity(t);
            for _ in 0..t {
                let mut r = [0.0; 6];
                for v in &mut r {
                    *v = c.f64()?;
                }
                rows.push(r);
            }
            Ok(ForceTorqueSequence::new(rows))
        };
        let force = group()?;
        let torque = group()?;
        let mut label = Vec::with_capacity(h * 3);
        for _ in 0..h * 3 {
            label.push(c.f64()?);
        }
        samples.push(TrainingSample {
            frame,
            window: WrenchWindow { force, torque },
            label: VelocityWindow::from_flat(&label),
            meta,
        });
    }
    if c.pos != bytes.len() {
        return Err(DyadError::Malformed {
            line: 0,
            detail: format!("{} trailing bytes", bytes.len() - c.pos),
        });
    }
    Ok((hash, samples))
}
