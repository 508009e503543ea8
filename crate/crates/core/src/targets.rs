//! Benchmark target distributions.

use crate::error::{Error, Result};
use ndarray::{Array1, Array2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Mixture of isotropic Gaussians with shared standard deviation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MixtureTarget {
    /// Component means, one per row.
    pub means: Array2<f64>,
    /// Shared isotropic standard deviation.
    pub sigma: f64,
    /// Component weights; nonnegative, summing to one.
    pub weights: Array1<f64>,
    /// Default sampling seed.
    pub seed: u64,
}

impl MixtureTarget {
    pub fn new(means: Array2<f64>, sigma: f64, weights: Array1<f64>, seed: u64) -> Result<Self> {
        if means.nrows() == 0 {
            return Err(Error::InvalidConfig(
                "mixture needs at least one component".into(),
            ));
        }
        if sigma <= 0.0 || !sigma.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "sigma must be positive, got {sigma}"
            )));
        }
        if weights.len() != means.nrows() {
            return Err(Error::DimensionMismatch {
                expected: means.nrows(),
                got: weights.len(),
                context: "mixture weights",
            });
        }
        if weights.iter().any(|&w| w < 0.0) {
            return Err(Error::InvalidConfig(
                "mixture weights must be nonnegative".into(),
            ));
        }
        let total: f64 = weights.sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!(
                "mixture weights must sum to 1, got {total}"
            )));
        }
        Ok(MixtureTarget {
            means,
            sigma,
            weights,
            seed,
        })
    }

    pub fn dim(&self) -> usize {
        self.means.ncols()
    }

    pub fn components(&self) -> usize {
        self.means.nrows()
    }

    /// Seeded sampler over this target (uses the stored default seed).
    pub fn sampler(&self) -> TargetSampler<'_> {
        self.sampler_with_seed(self.seed)
    }

    pub fn sampler_with_seed(&self, seed: u64) -> TargetSampler<'_> {
        TargetSampler {
            target: self,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Draw `n` points: pick a component by weight, then add isotropic
    /// Gaussian noise.
    pub fn sample(&self, n: usize, rng: &mut ChaCha8Rng) -> Result<Array2<f64>> {
        if n == 0 {
            return Err(Error::EmptyBatch("target sample"));
        }
        let d = self.dim();
        let k = self.components();
        // cumulative weights for inverse-cdf component choice
        let mut cum = Vec::with_capacity(k);
        let mut acc = 0.0;
        for &w in self.weights.iter() {
            acc += w;
            cum.push(acc);
        }
        let mut out = Array2::<f64>::zeros((n, d));
        for i in 0..n {
            let u: f64 = rng.gen_range(0.0..1.0);
            let comp = cum.iter().position(|&c| u < c).unwrap_or(k - 1);
            for j in 0..d {
                let g: f64 = StandardNormal.sample(rng);
                out[[i, j]] = self.means[[comp, j]] + self.sigma * g;
            }
        }
        Ok(out)
    }
}

/// Stateful seeded sampling stream over a target.
pub struct TargetSampler<'a> {
    target: &'a MixtureTarget,
    rng: ChaCha8Rng,
}

impl TargetSampler<'_> {
    pub fn sample(&mut self, n: usize) -> Result<Array2<f64>> {
        self.target.sample(n, &mut self.rng)
    }
}

/// Eight Gaussians equally spaced on a circle, uniform weights.
pub fn eight_gaussians(radius: f64, sigma: f64, seed: u64) -> Result<MixtureTarget> {
    if radius <= 0.0 || !radius.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "radius must be positive, got {radius}"
        )));
    }
    let k = 8;
    let mut means = Array2::<f64>::zeros((k, 2));
    for i in 0..k {
        let angle = 2.0 * std::f64::consts::PI * i as f64 / k as f64;
        means[[i, 0]] = radius * angle.cos();
        means[[i, 1]] = radius * angle.sin();
    }
    MixtureTarget::new(means, sigma, Array1::from_elem(k, 1.0 / k as f64), seed)
}
