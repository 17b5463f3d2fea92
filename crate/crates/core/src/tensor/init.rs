use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{check_shape, numel, Real, Tensor};
use crate::error::{Error, Result};

/// Zero-mean normal draw with variance `2 / fan_in`, deterministic in `seed`.
pub fn he_init<T: Real>(shape: Vec<usize>, fan_in: usize, seed: u64) -> Result<Tensor<T>> {
    check_shape(&shape)?;
    if fan_in == 0 {
        return Err(Error::InvalidShape("fan_in must be positive".into()));
    }
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).map_err(|e| Error::Validation(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..numel(&shape)).map(|_| T::of(normal.sample(&mut rng))).collect();
    Tensor::new(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic() {
        let a = he_init::<f32>(vec![3, 4], 12, 5).unwrap();
        let b = he_init::<f32>(vec![3, 4], 12, 5).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, he_init::<f32>(vec![3, 4], 12, 6).unwrap());
    }

    #[test]
    fn sample_variance_near_two_over_fan_in() {
        let t = he_init::<f64>(vec![100_000], 50, 11).unwrap();
        let n = t.len() as f64;
        let mean = t.data().iter().sum::<f64>() / n;
        let var = t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!((var - 0.04).abs() / 0.04 < 0.05, "variance {var}");
    }

    #[test]
    fn huge_fan_in_shrinks_values() {
        let t = he_init::<f64>(vec![1000], 100_000_000, 1).unwrap();
        let max = t.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(max < 1e-3, "{max}");
    }

    #[test]
    fn rejects_zero_extent_and_fan_in() {
        assert!(matches!(he_init::<f32>(vec![0, 3], 3, 0), Err(Error::InvalidShape(_))));
        assert!(matches!(he_init::<f32>(vec![3], 0, 0), Err(Error::InvalidShape(_))));
    }
}
