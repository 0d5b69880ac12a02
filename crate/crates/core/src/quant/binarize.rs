use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// The two binary levels `c - r` and `c + r` of one layer, plus the split point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinaryLevels {
    /// Midpoint, the layer weight mean.
    pub c: f64,
    /// Radius, the population standard deviation of the layer weights.
    pub r: f64,
    /// Weights below this value map to the low level.
    pub threshold: f64,
}

impl BinaryLevels {
    pub fn low(&self) -> f64 {
        self.c - self.r
    }

    pub fn high(&self) -> f64 {
        self.c + self.r
    }

    pub fn apply(&self, w: f64) -> f64 {
        if w < self.threshold {
            self.low()
        } else {
            self.high()
        }
    }
}

/// Closed-form moment-matched levels: `c = mean(w)`, `r = std(w)`, split at the median.
pub fn binarize_levels(w: &Tensor) -> Result<BinaryLevels> {
    let data = w.data();
    if data.is_empty() {
        return Err(Error::InvalidArgument("cannot binarize an empty tensor".into()));
    }
    if !w.all_finite() {
        return Err(Error::NonFinite("binarize_levels input".into()));
    }
    let n = data.len() as f64;
    let c = data.iter().sum::<f64>() / n;
    let var = data.iter().map(|&v| (v - c) * (v - c)).sum::<f64>() / n;
    Ok(BinaryLevels {
        c,
        r: var.sqrt(),
        threshold: median(data),
    })
}

pub fn binarize_forward(w: &Tensor, levels: &BinaryLevels) -> Tensor {
    w.map(|v| levels.apply(v))
}

fn median(data: &[f64]) -> f64 {
    let mut buf = data.to_vec();
    let n = buf.len();
    let mid = n / 2;
    let (lower, upper_mid, _) = buf.select_nth_unstable_by(mid, f64::total_cmp);
    let upper_mid = *upper_mid;
    if n % 2 == 1 {
        upper_mid
    } else {
        let lower_mid = lower.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lower_mid + upper_mid)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(v: &[f64]) -> Tensor {
        Tensor::new(&[v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn symmetric_pair() {
        let l = binarize_levels(&t(&[-1.0, 1.0])).unwrap();
        assert_eq!((l.c, l.r), (0.0, 1.0));
        assert_eq!(binarize_forward(&t(&[-1.0, 1.0]), &l).data(), &[-1.0, 1.0]);
    }

    #[test]
    fn constant_weights_collapse() {
        let w = t(&[0.5, 0.5, 0.5]);
        let l = binarize_levels(&w).unwrap();
        assert_eq!((l.c, l.r), (0.5, 0.0));
        assert_eq!(binarize_forward(&w, &l).data(), &[0.5, 0.5, 0.5]);
    }

    #[test]
    fn four_point_example() {
        let w = t(&[0.1, 0.2, 0.3, 0.4]);
        let l = binarize_levels(&w).unwrap();
        // population std of {.1,.2,.3,.4}: sqrt(mean of {.0225,.0025,.0025,.0225}) = sqrt(0.0125)
        let r_oracle = 0.0125f64.sqrt();
        assert!((l.c - 0.25).abs() < 1e-15);
        assert!((l.r - r_oracle).abs() < 1e-15);
        assert!((l.r - 0.1118034).abs() < 1e-7);
        assert!((l.threshold - 0.25).abs() < 1e-15);
        let b = binarize_forward(&w, &l);
        let want = [0.1381966, 0.1381966, 0.3618034, 0.3618034];
        for (got, want) in b.data().iter().zip(want) {
            assert!((got - want).abs() < 1e-7, "{got} vs {want}");
        }
    }

    #[test]
    fn median_ties_go_high() {
        // odd count: median element itself maps to the high level
        let w = t(&[1.0, 2.0, 3.0]);
        let l = binarize_levels(&w).unwrap();
        assert_eq!(l.threshold, 2.0);
        let b = binarize_forward(&w, &l);
        assert_eq!(b.data()[0], l.low());
        assert_eq!(b.data()[1], l.high());
        assert_eq!(b.data()[2], l.high());
    }

    #[test]
    fn rejects_empty_and_non_finite() {
        assert!(binarize_levels(&t(&[1.0, f64::NAN])).is_err());
        assert!(binarize_levels(&t(&[f64::INFINITY])).is_err());
    }

    proptest! {
        #[test]
        fn moments_match_for_even_counts(
            half in 1usize..200,
            seed in any::<u64>(),
            offset in -2.0f64..2.0,
        ) {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut w = Tensor::randn(&[2 * half], 0.3, &mut rng);
            for v in w.data_mut() { *v += offset; }
            let l = binarize_levels(&w).unwrap();
            let b = binarize_forward(&w, &l);
            let n = b.numel() as f64;
            let mean = b.sum() / n;
            let var = b.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let scale = l.c.abs().max(l.r);
            prop_assert!((mean - l.c).abs() <= 1e-9 * scale);
            prop_assert!((var - l.r * l.r).abs() <= 1e-9 * l.r * l.r);
        }
    }
}
