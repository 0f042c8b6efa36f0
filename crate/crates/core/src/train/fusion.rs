//! Weighted late fusion of the two streams' class scores.

use crate::config::{FusionConfig, FusionSpace};
use crate::error::{Error, Result};

fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// `w·s_T + (1−w)·s_C`, in logit space or after a softmax on each stream.
pub fn late_fuse(transformer: &[f64], cnn: &[f64], cfg: FusionConfig) -> Result<Vec<f64>> {
    if transformer.len() != cnn.len() {
        return Err(Error::shape(format!(
            "cannot fuse {} transformer scores with {} CNN scores",
            transformer.len(),
            cnn.len()
        )));
    }
    let (t, c) = match cfg.space {
        FusionSpace::Logit => (transformer.to_vec(), cnn.to_vec()),
        FusionSpace::Probability => (softmax(transformer), softmax(cnn)),
    };
    let w = cfg.weight;
    Ok(t.iter().zip(&c).map(|(a, b)| w * a + (1.0 - w) * b).collect())
}

/// Fusion weights `0.0, 0.1, …, 1.0`.
pub fn sweep_weights() -> Vec<f64> {
    (0..=10).map(|i| i as f64 / 10.0).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::argmax;
    use proptest::prelude::*;

    fn cfg(w: f64) -> FusionConfig {
        FusionConfig::new(w, FusionSpace::Logit).unwrap()
    }

    #[test]
    fn endpoints_and_midpoint() {
        let (t, c) = ([0.3, -1.7, 2.5], [4.0, 0.1, -0.6]);
        assert_eq!(late_fuse(&t, &c, cfg(1.0)).unwrap(), t.to_vec());
        assert_eq!(late_fuse(&t, &c, cfg(0.0)).unwrap(), c.to_vec());
        assert_eq!(late_fuse(&[2.0, 0.0], &[0.0, 2.0], cfg(0.5)).unwrap(), vec![1.0, 1.0]);
        assert!(late_fuse(&[1.0], &[1.0, 2.0], cfg(0.5)).is_err());
    }

    #[test]
    fn probability_space_sums_to_one() {
        let f = late_fuse(&[1.0, 2.0, 3.0], &[0.0, 0.0, 5.0], FusionConfig::new(0.3, FusionSpace::Probability).unwrap())
            .unwrap();
        assert!((f.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sweep_grid() {
        let w = sweep_weights();
        assert_eq!(w.len(), 11);
        assert_eq!((w[0], w[10]), (0.0, 1.0));
    }

    proptest! {
        #[test]
        fn endpoint_argmax_matches_stream(t in proptest::collection::vec(-5.0f64..5.0, 2..6),
                                          c in proptest::collection::vec(-5.0f64..5.0, 2..6)) {
            let k = t.len().min(c.len());
            let (t, c) = (&t[..k], &c[..k]);
            prop_assert_eq!(argmax(&late_fuse(t, c, cfg(1.0)).unwrap()), argmax(t));
            prop_assert_eq!(argmax(&late_fuse(t, c, cfg(0.0)).unwrap()), argmax(c));
        }
    }
}
