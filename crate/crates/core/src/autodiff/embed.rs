use super::{GraphError, Tensor};

/// Sinusoidal embedding of a diffusion step: `[sin(t·f_0..), cos(t·f_0..)]`
/// with `d/2` frequencies spaced geometrically from 1 down to 1/10000.
pub fn sinusoidal_embed(t: f64, d: usize) -> Result<Tensor, GraphError> {
    if d == 0 || d % 2 != 0 {
        return Err(GraphError::OddEmbeddingWidth(d));
    }
    let half = d / 2;
    let freq = |k: usize| {
        if half == 1 {
            1.0
        } else {
            10000f64.powf(-(k as f64) / (half - 1) as f64)
        }
    };
    let mut data = Vec::with_capacity(d);
    data.extend((0..half).map(|k| (t * freq(k)).sin()));
    data.extend((0..half).map(|k| (t * freq(k)).cos()));
    Tensor::new(vec![d], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_step() {
        assert_eq!(sinusoidal_embed(0.0, 4).unwrap().data(), &[0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn unit_step_width_two() {
        let e = sinusoidal_embed(1.0, 2).unwrap();
        assert!((e.data()[0] - 0.8415).abs() < 1e-4);
        assert!((e.data()[1] - 0.5403).abs() < 1e-4);
    }

    #[test]
    fn odd_width_rejected() {
        assert_eq!(sinusoidal_embed(1.0, 5), Err(GraphError::OddEmbeddingWidth(5)));
    }

    #[test]
    fn frequency_endpoints() {
        // Last sine slot uses frequency 1/10000.
        let e = sinusoidal_embed(10000.0, 8).unwrap();
        assert!((e.data()[3] - 1f64.sin()).abs() < 1e-12);
        assert!((e.data()[0] - 10000f64.sin()).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn bounded(t in 0u32..100_000, half in 1usize..64) {
            let e = sinusoidal_embed(t as f64, 2 * half).unwrap();
            prop_assert!(e.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }
}
