//! Gaussian noise at the split boundary.
//!
//! The user perturbs the hidden embeddings elementwise with N(0, sigma^2)
//! before sending them to the provider. Noise is drawn from a seeded stream
//! cipher RNG, so a (sigma, seed) pair always yields the same perturbation;
//! the seed stays on the user side and is never transmitted.

use crate::tensor::{Tensor, TensorError};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DefenseError {
    #[error("noise sigma must be a finite non-negative number, got {0}")]
    BadSigma(f32),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Noise level and the user-side seed for the perturbation draw.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub sigma: f32,
    pub seed: u64,
}

/// Returns `h + N(0, sigma^2)` elementwise. `sigma == 0` returns the input
/// bit-for-bit unchanged.
pub fn apply_noise(h: &Tensor, spec: &NoiseSpec) -> Result<Tensor, DefenseError> {
    if spec.sigma < 0.0 || !spec.sigma.is_finite() {
        return Err(DefenseError::BadSigma(spec.sigma));
    }
    if spec.sigma == 0.0 {
        return Ok(h.clone());
    }
    let mut rng = ChaCha12Rng::seed_from_u64(spec.seed);
    let normal = Normal::new(0.0f64, spec.sigma as f64).expect("validated sigma");
    let data: Vec<f32> = h
        .data
        .iter()
        .map(|&v| (v as f64 + normal.sample(&mut rng)) as f32)
        .collect();
    Ok(Tensor::new(h.shape.clone(), data)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_tensor() -> Tensor {
        Tensor::new(vec![4, 8], (0..32).map(|i| (i as f32) * 0.1 - 1.6).collect()).unwrap()
    }

    #[test]
    fn zero_sigma_is_identity() {
        let h = sample_tensor();
        let out = apply_noise(&h, &NoiseSpec { sigma: 0.0, seed: 3 }).unwrap();
        assert_eq!(out.data, h.data);
    }

    #[test]
    fn same_seed_same_noise_different_seed_different_noise() {
        let h = sample_tensor();
        let a = apply_noise(&h, &NoiseSpec { sigma: 1.0, seed: 5 }).unwrap();
        let b = apply_noise(&h, &NoiseSpec { sigma: 1.0, seed: 5 }).unwrap();
        let c = apply_noise(&h, &NoiseSpec { sigma: 1.0, seed: 6 }).unwrap();
        assert_eq!(a.data, b.data);
        assert_ne!(a.data, c.data);
    }

    #[test]
    fn negative_or_nan_sigma_rejected() {
        let h = sample_tensor();
        assert!(apply_noise(&h, &NoiseSpec { sigma: -0.1, seed: 0 }).is_err());
        assert!(apply_noise(&h, &NoiseSpec { sigma: f32::NAN, seed: 0 }).is_err());
    }

    #[test]
    fn large_sigma_produces_large_but_finite_values() {
        let h = sample_tensor();
        let out = apply_noise(&h, &NoiseSpec { sigma: 1e6, seed: 1 }).unwrap();
        assert!(out.data.iter().all(|v| v.is_finite()));
        let max = out.data.iter().fold(0.0f32, |m, &v| m.max(v.abs()));
        assert!(max > 1e4, "expected noise on the order of sigma, max {max}");
    }

    #[test]
    fn perturbation_is_approximately_standard_normal() {
        // Kolmogorov-Smirnov distance between the empirical distribution of
        // (noised - clean) / sigma and the standard normal CDF.
        let n = 200_000usize;
        let h = Tensor::new(vec![1, n], vec![0.25f32; n]).unwrap();
        let sigma = 2.5f32;
        let out = apply_noise(&h, &NoiseSpec { sigma, seed: 99 }).unwrap();
        let mut z: Vec<f64> = out
            .data
            .iter()
            .zip(&h.data)
            .map(|(&a, &b)| ((a - b) / sigma) as f64)
            .collect();
        z.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let normal = statrs::distribution::Normal::new(0.0, 1.0).unwrap();
        use statrs::distribution::ContinuousCDF;
        let mut ks = 0.0f64;
        for (i, &v) in z.iter().enumerate() {
            let cdf = normal.cdf(v);
            let emp_hi = (i + 1) as f64 / n as f64;
            let emp_lo = i as f64 / n as f64;
            ks = ks.max((cdf - emp_lo).abs()).max((emp_hi - cdf).abs());
        }
        assert!(ks < 0.01, "KS distance {ks} too large for {n} samples");
        // mean and variance sanity
        let mean: f64 = z.iter().sum::<f64>() / n as f64;
        let var: f64 = z.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "var {var}");
    }
}
