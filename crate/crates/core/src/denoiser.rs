//! The denoiser abstraction shared by oracles, networks and bridged models.

use alloc::vec::Vec;

use crate::error::Result;

/// A model of the posterior mean `E[x₀ | x_t]` under Gaussian perturbation
/// `x_t = x₀ + σ ε`.
pub trait Denoiser {
    fn dim(&self) -> usize;

    fn denoise(&self, x_t: &[f64], sigma: f64) -> Result<Vec<f64>>;

    /// Denoises `n` row-major states, one level per row.
    fn denoise_batch(&self, xs: &[f64], sigmas: &[f64]) -> Result<Vec<f64>> {
        let d = self.dim();
        let mut out = Vec::with_capacity(xs.len());
        for (x, &s) in xs.chunks_exact(d).zip(sigmas) {
            out.extend_from_slice(&self.denoise(x, s)?);
        }
        Ok(out)
    }
}

impl<T: Denoiser + ?Sized> Denoiser for &T {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn denoise(&self, x_t: &[f64], sigma: f64) -> Result<Vec<f64>> {
        (**self).denoise(x_t, sigma)
    }

    fn denoise_batch(&self, xs: &[f64], sigmas: &[f64]) -> Result<Vec<f64>> {
        (**self).denoise_batch(xs, sigmas)
    }
}

/// Score from a denoised estimate: `(D − x_t) / σ²`.
pub fn score_from_denoised(denoised: &[f64], x_t: &[f64], sigma: f64) -> Vec<f64> {
    let inv = 1.0 / (sigma * sigma);
    denoised.iter().zip(x_t).map(|(d, x)| (d - x) * inv).collect()
}

/// Denoised estimate from a score: `x_t + σ² s`.
pub fn denoised_from_score(score: &[f64], x_t: &[f64], sigma: f64) -> Vec<f64> {
    let s2 = sigma * sigma;
    score.iter().zip(x_t).map(|(s, x)| x + s2 * s).collect()
}

/// Input scaling applied before a network sees a noisy state, assuming unit
/// data scale.
pub fn input_scale(sigma: f64) -> f64 {
    1.0 / libm::sqrt(1.0 + sigma * sigma)
}
