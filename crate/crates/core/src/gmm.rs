//! Closed-form Gaussian mixtures with diagonal covariances.
//!
//! Under `x_t = x₀ + σ ε` a mixture stays a mixture with every component
//! variance inflated by σ², so densities, scores and posterior means are
//! all available exactly. Responsibilities are computed in the log domain.

use alloc::vec;
use alloc::vec::Vec;
use rand::Rng;

use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::rng;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture {
    dim: usize,
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    /// Per-component diagonal variances.
    vars: Vec<Vec<f64>>,
}

impl GaussianMixture {
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, vars: Vec<Vec<f64>>) -> Result<Self> {
        let k = weights.len();
        if k == 0 || means.len() != k || vars.len() != k {
            return Err(Error::InvalidParameter("mixture needs matching non-empty lists".into()));
        }
        let dim = means[0].len();
        if dim == 0 {
            return Err(Error::InvalidParameter("zero-dimensional mixture".into()));
        }
        let total: f64 = weights.iter().sum();
        if weights.iter().any(|&w| !(w > 0.0)) || (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidParameter(alloc::format!(
                "weights must be positive and sum to 1 (sum = {total})"
            )));
        }
        for (j, (m, v)) in means.iter().zip(&vars).enumerate() {
            if m.len() != dim {
                return Err(Error::DimensionMismatch { expected: dim, got: m.len() });
            }
            if v.len() != dim {
                return Err(Error::DimensionMismatch { expected: dim, got: v.len() });
            }
            if v.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
                return Err(Error::NotPositiveDefinite(j));
            }
        }
        Ok(Self { dim, weights, means, vars })
    }

    /// Mixture with a shared isotropic variance per component.
    pub fn isotropic(weights: Vec<f64>, means: Vec<Vec<f64>>, vars: Vec<f64>) -> Result<Self> {
        let dim = means.first().map_or(0, Vec::len);
        let vars = vars.into_iter().map(|v| vec![v; dim]).collect();
        Self::new(weights, means, vars)
    }

    pub fn standard_normal(dim: usize) -> Self {
        Self::isotropic(vec![1.0], vec![vec![0.0; dim]], vec![1.0]).expect("valid")
    }

    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn vars(&self) -> &[Vec<f64>] {
        &self.vars
    }

    fn check(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, got: x.len() });
        }
        Ok(())
    }

    /// `log w_k + log N(x; μ_k, Σ_k + σ² I)` for every component.
    fn component_log_terms(&self, x: &[f64], sigma: f64) -> Vec<f64> {
        let s2 = sigma * sigma;
        self.weights
            .iter()
            .zip(&self.means)
            .zip(&self.vars)
            .map(|((&w, m), v)| {
                let mut acc = libm::log(w);
                for ((&xi, &mi), &vi) in x.iter().zip(m).zip(v) {
                    let var = vi + s2;
                    let r = xi - mi;
                    acc -= 0.5 * (LN_2PI + libm::log(var) + r * r / var);
                }
                acc
            })
            .collect()
    }

    pub fn log_density(&self, x: &[f64], sigma: f64) -> Result<f64> {
        self.check(x)?;
        if !(sigma >= 0.0) {
            return Err(Error::InvalidSigma(sigma));
        }
        Ok(log_sum_exp(&self.component_log_terms(x, sigma)))
    }

    pub fn marginal_density(&self, x: &[f64], sigma: f64) -> Result<f64> {
        Ok(libm::exp(self.log_density(x, sigma)?))
    }

    /// Normalized posterior component probabilities at `x_t`.
    pub fn responsibilities(&self, x_t: &[f64], sigma: f64) -> Result<Vec<f64>> {
        self.check(x_t)?;
        let terms = self.component_log_terms(x_t, sigma);
        let lse = log_sum_exp(&terms);
        if !lse.is_finite() {
            return Err(Error::PosteriorUnderflow);
        }
        let r: Vec<f64> = terms.iter().map(|t| libm::exp(t - lse)).collect();
        if !(r.iter().sum::<f64>() > 0.0) {
            return Err(Error::PosteriorUnderflow);
        }
        Ok(r)
    }

    pub fn posterior_mean(&self, x_t: &[f64], sigma: f64) -> Result<Vec<f64>> {
        if !(sigma > 0.0) {
            return Err(Error::InvalidSigma(sigma));
        }
        let resp = self.responsibilities(x_t, sigma)?;
        let s2 = sigma * sigma;
        let mut out = vec![0.0; self.dim];
        for ((r, m), v) in resp.iter().zip(&self.means).zip(&self.vars) {
            if *r == 0.0 {
                continue;
            }
            for (i, o) in out.iter_mut().enumerate() {
                *o += r * (m[i] + v[i] / (v[i] + s2) * (x_t[i] - m[i]));
            }
        }
        Ok(out)
    }

    /// `∇ log p_σ(x_t) = (E[x₀ | x_t] − x_t) / σ²`.
    pub fn score(&self, x_t: &[f64], sigma: f64) -> Result<Vec<f64>> {
        let pm = self.posterior_mean(x_t, sigma)?;
        Ok(crate::denoiser::score_from_denoised(&pm, x_t, sigma))
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let u = rng::uniform(rng);
        let mut acc = 0.0;
        let mut k = self.weights.len() - 1;
        for (j, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                k = j;
                break;
            }
        }
        self.means[k]
            .iter()
            .zip(&self.vars[k])
            .map(|(m, v)| m + libm::sqrt(*v) * rng::normal(rng))
            .collect()
    }

    /// Draw from the perturbed marginal `p_σ`.
    pub fn sample_noisy<R: Rng + ?Sized>(&self, sigma: f64, rng: &mut R) -> Vec<f64> {
        let mut x = self.sample(rng);
        for xi in x.iter_mut() {
            *xi += sigma * rng::normal(rng);
        }
        x
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for (w, m) in self.weights.iter().zip(&self.means) {
            for (o, mi) in out.iter_mut().zip(m) {
                *o += w * mi;
            }
        }
        out
    }
}

impl Denoiser for GaussianMixture {
    fn dim(&self) -> usize {
        self.dim
    }

    fn denoise(&self, x_t: &[f64], sigma: f64) -> Result<Vec<f64>> {
        self.posterior_mean(x_t, sigma)
    }
}

pub fn log_sum_exp(terms: &[f64]) -> f64 {
    let m = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + libm::log(terms.iter().map(|t| libm::exp(t - m)).sum::<f64>())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_mix() -> GaussianMixture {
        GaussianMixture::isotropic(vec![0.5, 0.5], vec![vec![-1.0], vec![1.0]], vec![1.0, 1.0])
            .unwrap()
    }

    #[test]
    fn densities() {
        let g = GaussianMixture::standard_normal(1);
        assert!((g.marginal_density(&[0.0], 0.0).unwrap() - 0.398_942_280_4).abs() < 1e-9);
        assert!((g.marginal_density(&[0.0], 1.0).unwrap() - 0.282_094_791_8).abs() < 1e-9);
        assert!((two_mix().marginal_density(&[0.0], 0.0).unwrap() - 0.241_970_724_5).abs() < 1e-9);
    }

    #[test]
    fn posterior_mean_examples() {
        let g = GaussianMixture::standard_normal(1);
        assert!((g.posterior_mean(&[2.0], 1.0).unwrap()[0] - 1.0).abs() < 1e-14);
        assert!((g.score(&[2.0], 1.0).unwrap()[0] + 1.0).abs() < 1e-14);
        assert!(two_mix().posterior_mean(&[0.0], 0.7).unwrap()[0].abs() < 1e-15);
        for s in [0.1, 1.0, 30.0] {
            assert_eq!(g.score(&[0.0], s).unwrap()[0], 0.0);
        }
    }

    #[test]
    fn posterior_concentrates_at_tiny_sigma() {
        let g = GaussianMixture::isotropic(
            vec![0.2, 0.3, 0.5],
            vec![vec![-2.0, 0.0], vec![1.0, 1.0], vec![0.5, -1.5]],
            vec![0.3, 0.5, 0.2],
        )
        .unwrap();
        let x0 = [0.37, -0.81];
        let pm = g.posterior_mean(&x0, 1e-8).unwrap();
        assert!((pm[0] - x0[0]).abs() < 1e-6 && (pm[1] - x0[1]).abs() < 1e-6);
    }

    #[test]
    fn far_away_point_does_not_underflow() {
        let g = two_mix();
        // individual densities underflow to zero here; log-sum-exp keeps the ratio
        let pm = g.posterior_mean(&[1e4], 1e-3).unwrap();
        assert!(pm[0].is_finite());
    }

    #[test]
    fn rejects_bad_mixtures() {
        assert!(GaussianMixture::isotropic(vec![0.5, 0.4], vec![vec![0.0], vec![1.0]], vec![1.0, 1.0]).is_err());
        assert_eq!(
            GaussianMixture::isotropic(vec![1.0], vec![vec![0.0]], vec![-1.0]),
            Err(Error::NotPositiveDefinite(0))
        );
    }
}
