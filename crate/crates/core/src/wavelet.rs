//! Undecimated (à-trous) wavelet approximation pyramid for six-column
//! force/torque windows, and the block layout consumed by the intent model.

use serde::{Deserialize, Serialize};

/// Number of columns per channel group: three axes from each of two sensors.
pub const CHANNELS: usize = 6;

pub type Row = [f64; CHANNELS];

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum WaveletError {
    #[error("cannot transform an empty sequence")]
    Empty,
    #[error("level count must be at least 1")]
    NoLevels,
    #[error("{levels} levels need a padded length of at least 2^{levels}, got {len}")]
    LevelTooLarge { levels: usize, len: usize },
    #[error("padded length {0} is not a power of two")]
    NotPowerOfTwo(usize),
    #[error("sequence of {t} rows cannot be split into {h} blocks of {s}")]
    NotDivisible { t: usize, h: usize, s: usize },
    #[error("force and torque pyramids disagree: {0}")]
    PyramidMismatch(String),
}

/// Low-pass filter used by the à-trous recursion. Taps sum to one, so constants
/// pass through every level unchanged.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScalingFilter {
    #[default]
    Haar,
    Db4,
}

impl ScalingFilter {
    pub fn taps(self) -> Vec<f64> {
        match self {
            ScalingFilter::Haar => vec![0.5, 0.5],
            ScalingFilter::Db4 => {
                let r3 = 3f64.sqrt();
                vec![(1.0 + r3) / 8.0, (3.0 + r3) / 8.0, (3.0 - r3) / 8.0, (1.0 - r3) / 8.0]
            }
        }
    }
}

/// `T × 6` samples of one channel group (forces or torques).
#[derive(Clone, Debug, PartialEq)]
pub struct ForceTorqueSequence {
    pub rows: Vec<Row>,
}

impl ForceTorqueSequence {
    pub fn new(rows: Vec<Row>) -> Self {
        Self { rows }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Zero-padded sequence that remembers how many rows were real.
#[derive(Clone, Debug, PartialEq)]
pub struct PaddedSequence {
    pub rows: Vec<Row>,
    pub original_len: usize,
}

/// Approximation coefficients for levels `1..=L`, each trimmed to the input length.
#[derive(Clone, Debug, PartialEq)]
pub struct ApproxPyramid {
    pub levels: Vec<Vec<Row>>,
}

impl ApproxPyramid {
    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn len(&self) -> usize {
        self.levels.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Appends zero rows up to the next power of two. The most recent samples keep
/// their indices.
pub fn pad_pow2(seq: &ForceTorqueSequence) -> Result<PaddedSequence, WaveletError> {
    if seq.is_empty() {
        return Err(WaveletError::Empty);
    }
    let target = seq.len().next_power_of_two();
    let mut rows = seq.rows.clone();
    rows.resize(target, [0.0; CHANNELS]);
    Ok(PaddedSequence {
        rows,
        original_len: seq.len(),
    })
}

/// `L`-level stationary transform keeping only approximation coefficients:
/// `A_ℓ[n] = Σ_k h[k]·A_{ℓ−1}[n − k·2^{ℓ−1}]` with circular indexing and `A_0 = x`.
pub fn swt_approx(
    padded: &PaddedSequence,
    levels: usize,
    filter: ScalingFilter,
) -> Result<ApproxPyramid, WaveletError> {
    let n = padded.rows.len();
    if n == 0 {
        return Err(WaveletError::Empty);
    }
    if !n.is_power_of_two() {
        return Err(WaveletError::NotPowerOfTwo(n));
    }
    if levels == 0 {
        return Err(WaveletError::NoLevels);
    }
    if levels >= usize::BITS as usize || n < (1usize << levels) {
        return Err(WaveletError::LevelTooLarge { levels, len: n });
    }
    let taps = filter.taps();
    let mut current = padded.rows.clone();
    let mut out = Vec::with_capacity(levels);
    for level in 1..=levels {
        let dilation = 1usize << (level - 1);
        let mut next = vec![[0.0; CHANNELS]; n];
        for (i, row) in next.iter_mut().enumerate() {
            for (k, &h) in taps.iter().enumerate() {
                let src = &current[(i + n - (k * dilation) % n) % n];
                for c in 0..CHANNELS {
                    row[c] += h * src[c];
                }
            }
        }
        out.push(next[..padded.original_len].to_vec());
        current = next;
    }
    Ok(ApproxPyramid { levels: out })
}

/// Pyramid of one channel group laid out as `(H, S, L, D)` blocks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditioningStack {
    pub horizon: usize,
    pub block: usize,
    pub levels: usize,
    data: Vec<f64>,
}

impl ConditioningStack {
    pub fn from_data(horizon: usize, block: usize, levels: usize, data: Vec<f64>) -> Result<Self, WaveletError> {
        if data.len() != horizon * block * levels * CHANNELS {
            return Err(WaveletError::NotDivisible {
                t: data.len() / (levels * CHANNELS).max(1),
                h: horizon,
                s: block,
            });
        }
        Ok(Self {
            horizon,
            block,
            levels,
            data,
        })
    }

    pub fn get(&self, h: usize, s: usize, l: usize, d: usize) -> f64 {
        self.data[((h * self.block + s) * self.levels + l) * CHANNELS + d]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Inverse of the block layout: back to per-level `T × 6` rows.
    pub fn flatten(&self) -> ApproxPyramid {
        let t = self.horizon * self.block;
        let mut levels = vec![vec![[0.0; CHANNELS]; t]; self.levels];
        for h in 0..self.horizon {
            for s in 0..self.block {
                for (l, level) in levels.iter_mut().enumerate() {
                    for d in 0..CHANNELS {
                        level[h * self.block + s][d] = self.get(h, s, l, d);
                    }
                }
            }
        }
        ApproxPyramid { levels }
    }

    /// Rows `h·S..(h+1)·S` of level `l`, flattened row-major (`S × 6`).
    pub fn level_tokens(&self, l: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.horizon * self.block * CHANNELS);
        for h in 0..self.horizon {
            for s in 0..self.block {
                for d in 0..CHANNELS {
                    out.push(self.get(h, s, l, d));
                }
            }
        }
        out
    }
}

fn stack_one(p: &ApproxPyramid, horizon: usize, block: usize) -> Result<ConditioningStack, WaveletError> {
    let t = p.len();
    if horizon == 0 || block == 0 || t != horizon * block {
        return Err(WaveletError::NotDivisible {
            t,
            h: horizon,
            s: block,
        });
    }
    let levels = p.num_levels();
    let mut data = Vec::with_capacity(t * levels * CHANNELS);
    for row in 0..t {
        for level in &p.levels {
            data.extend_from_slice(&level[row]);
        }
    }
    ConditioningStack::from_data(horizon, block, levels, data)
}

/// Reshapes force and torque pyramids into `(H, S, L, D)` blocks with
/// `blocks[h,s,ℓ,d] = levels[ℓ][h·S + s][d]`.
pub fn stack_blocks(
    force: &ApproxPyramid,
    torque: &ApproxPyramid,
    horizon: usize,
    block: usize,
) -> Result<(ConditioningStack, ConditioningStack), WaveletError> {
    if force.num_levels() != torque.num_levels() || force.len() != torque.len() {
        return Err(WaveletError::PyramidMismatch(format!(
            "force {}x{} vs torque {}x{}",
            force.num_levels(),
            force.len(),
            torque.num_levels(),
            torque.len()
        )));
    }
    Ok((stack_one(force, horizon, block)?, stack_one(torque, horizon, block)?))
}

/// Full encoding of one wrench window: pad, transform, trim, block.
pub fn encode_window(
    force: &ForceTorqueSequence,
    torque: &ForceTorqueSequence,
    levels: usize,
    filter: ScalingFilter,
    horizon: usize,
    block: usize,
) -> Result<(ConditioningStack, ConditioningStack), WaveletError> {
    let pf = swt_approx(&pad_pow2(force)?, levels, filter)?;
    let pt = swt_approx(&pad_pow2(torque)?, levels, filter)?;
    stack_blocks(&pf, &pt, horizon, block)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn seq(rows: Vec<Row>) -> ForceTorqueSequence {
        ForceTorqueSequence::new(rows)
    }

    fn random_rows(n: usize, rng: &mut ChaCha8Rng) -> Vec<Row> {
        (0..n)
            .map(|_| std::array::from_fn(|_| rng.random_range(-5.0..5.0)))
            .collect()
    }

    #[test]
    fn padding_lengths() {
        let p = pad_pow2(&seq(vec![[1.0; 6]; 198])).unwrap();
        assert_eq!(p.rows.len(), 256);
        assert_eq!(p.original_len, 198);
        assert!(p.rows[198..].iter().all(|r| *r == [0.0; 6]));
        assert_eq!(pad_pow2(&seq(vec![[1.0; 6]; 256])).unwrap().rows.len(), 256);
        assert_eq!(pad_pow2(&seq(vec![[1.0; 6]; 1])).unwrap().rows.len(), 1);
        assert_eq!(pad_pow2(&seq(vec![])), Err(WaveletError::Empty));
    }

    #[test]
    fn constant_signal_is_preserved() {
        let padded = PaddedSequence {
            rows: vec![[2.5; 6]; 64],
            original_len: 64,
        };
        for filter in [ScalingFilter::Haar, ScalingFilter::Db4] {
            let p = swt_approx(&padded, 5, filter).unwrap();
            for level in &p.levels {
                for row in level {
                    for v in row {
                        assert!((v - 2.5).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn impulse_level_one() {
        let mut rows = vec![[0.0; 6]; 16];
        rows[4] = [1.0; 6];
        let p = swt_approx(&PaddedSequence { rows, original_len: 16 }, 1, ScalingFilter::Haar).unwrap();
        for (n, row) in p.levels[0].iter().enumerate() {
            let expect = if n == 4 || n == 5 { 0.5 } else { 0.0 };
            assert_eq!(row[0], expect, "n={n}");
        }
    }

    #[test]
    fn matches_direct_convolution() {
        // A_ℓ equals x circularly convolved with the dilated-filter cascade.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rows = random_rows(32, &mut rng);
        let x: Vec<f64> = rows.iter().map(|r| r[2]).collect();
        let p = swt_approx(&PaddedSequence { rows, original_len: 32 }, 3, ScalingFilter::Haar).unwrap();
        // Haar cascade to level 3 is a box average over 8 consecutive samples.
        for n in 0..32 {
            let direct: f64 = (0..8).map(|k| x[(n + 32 - k) % 32]).sum::<f64>() / 8.0;
            assert!((p.levels[2][n][2] - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn level_bounds() {
        let padded = PaddedSequence {
            rows: vec![[0.0; 6]; 8],
            original_len: 8,
        };
        assert!(swt_approx(&padded, 3, ScalingFilter::Haar).is_ok());
        assert_eq!(
            swt_approx(&padded, 4, ScalingFilter::Haar),
            Err(WaveletError::LevelTooLarge { levels: 4, len: 8 })
        );
        assert_eq!(swt_approx(&padded, 0, ScalingFilter::Haar), Err(WaveletError::NoLevels));
    }

    #[test]
    fn block_indexing() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let f = seq(random_rows(198, &mut rng));
        let t = seq(random_rows(198, &mut rng));
        let pf = swt_approx(&pad_pow2(&f).unwrap(), 4, ScalingFilter::Haar).unwrap();
        let pt = swt_approx(&pad_pow2(&t).unwrap(), 4, ScalingFilter::Haar).unwrap();
        let (sf, st) = stack_blocks(&pf, &pt, 6, 33).unwrap();
        for l in 0..4 {
            for d in 0..6 {
                assert_eq!(sf.get(0, 0, l, d), pf.levels[l][0][d]);
                assert_eq!(sf.get(5, 32, l, d), pf.levels[l][197][d]);
                assert_eq!(st.get(5, 32, l, d), pt.levels[l][197][d]);
            }
        }
        assert_eq!(sf.flatten(), pf);
        assert_eq!(st.flatten(), pt);
    }

    #[test]
    fn block_shape_errors() {
        let p = ApproxPyramid {
            levels: vec![vec![[0.0; 6]; 10]],
        };
        assert!(matches!(
            stack_blocks(&p, &p, 3, 3),
            Err(WaveletError::NotDivisible { t: 10, .. })
        ));
    }

    #[test]
    fn white_noise_variance_falls_with_level() {
        let levels = 5;
        // Zero-mean noise: the second moment is the variance without the
        // bias a sample-mean estimate picks up from correlated outputs.
        let var = |xs: &[Row], c: usize| xs.iter().map(|r| r[c] * r[c]).sum::<f64>() / xs.len() as f64;
        for filter in [ScalingFilter::Haar, ScalingFilter::Db4] {
            let mut mean = vec![0.0; levels + 1];
            let mut monotone = 0;
            let seeds = 200;
            for seed in 0..seeds {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let rows = random_rows(256, &mut rng);
                let p = swt_approx(&pad_pow2(&seq(rows.clone())).unwrap(), levels, filter).unwrap();
                let mut v = vec![var(&rows, 0)];
                v.extend(p.levels.iter().map(|l| var(l, 0)));
                monotone += v.windows(2).all(|w| w[1] < w[0]) as usize;
                for (m, x) in mean.iter_mut().zip(&v) {
                    *m += x / seeds as f64;
                }
            }
            assert!(monotone >= 190, "{filter:?}: {monotone}/200");
            assert!(mean.windows(2).all(|w| w[1] < w[0]));
            if filter == ScalingFilter::Haar {
                // Level ℓ averages 2^ℓ samples of U(−5, 5), variance 25/3.
                for (l, m) in mean.iter().enumerate() {
                    let expect = 25.0 / 3.0 / (1 << l) as f64;
                    assert!((m / expect - 1.0).abs() < 0.1, "level {l}: {m} vs {expect}");
                }
            }
        }
    }

    proptest! {
        #[test]
        fn linear_and_shape_preserving(
            seed in any::<u64>(),
            levels in 1usize..=4,
            a in -3.0f64..3.0,
            b in -3.0f64..3.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random_rows(50, &mut rng);
            let z = random_rows(50, &mut rng);
            let mix: Vec<Row> = x.iter().zip(&z)
                .map(|(p, q)| std::array::from_fn(|c| a * p[c] + b * q[c]))
                .collect();
            let run = |rows: Vec<Row>| swt_approx(&pad_pow2(&seq(rows)).unwrap(), levels, ScalingFilter::Haar).unwrap();
            let (px, pz, pm) = (run(x), run(z), run(mix));
            prop_assert_eq!(pm.num_levels(), levels);
            for l in 0..levels {
                prop_assert_eq!(pm.levels[l].len(), 50);
                for n in 0..50 {
                    for c in 0..6 {
                        let expect = a * px.levels[l][n][c] + b * pz.levels[l][n][c];
                        prop_assert!((pm.levels[l][n][c] - expect).abs() < 1e-12);
                    }
                }
            }
        }

        #[test]
        fn circular_shift_equivariance(seed in any::<u64>(), shift in 0usize..64, levels in 1usize..=4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random_rows(64, &mut rng);
            let shifted: Vec<Row> = (0..64).map(|n| x[(n + 64 - shift) % 64]).collect();
            let run = |rows: Vec<Row>| swt_approx(&PaddedSequence { rows, original_len: 64 }, levels, ScalingFilter::Haar).unwrap();
            let (p, q) = (run(x), run(shifted));
            for l in 0..levels {
                for n in 0..64 {
                    prop_assert_eq!(q.levels[l][n], p.levels[l][(n + 64 - shift) % 64]);
                }
            }
        }
    }
}
