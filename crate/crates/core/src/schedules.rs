//! Noise schedules, training-level distributions, loss weighting and the
//! bridge strength schedule.
//!
//! Time is measured by the noise level σ throughout: the sampling grid runs
//! from `sigma_max` (pure noise) down to `sigma_min`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSchedule {
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub n_steps: usize,
}

impl NoiseSchedule {
    pub fn new(sigma_min: f64, sigma_max: f64, n_steps: usize) -> Result<Self> {
        if !(sigma_min > 0.0 && sigma_min < sigma_max && sigma_max.is_finite()) {
            return Err(Error::InvalidParameter(alloc::format!(
                "need 0 < sigma_min < sigma_max, got {sigma_min}, {sigma_max}"
            )));
        }
        if n_steps < 2 {
            return Err(Error::InvalidParameter(alloc::format!(
                "n_steps must be at least 2, got {n_steps}"
            )));
        }
        Ok(Self { sigma_min, sigma_max, n_steps })
    }

    /// Log-linearly spaced level `i`; the endpoints are returned exactly.
    pub fn sigma(&self, i: usize) -> Result<f64> {
        sigma_grid(self, i)
    }

    pub fn grid(&self) -> alloc::vec::Vec<f64> {
        (0..self.n_steps).map(|i| sigma_grid(self, i).expect("in range")).collect()
    }
}

pub fn sigma_grid(sched: &NoiseSchedule, i: usize) -> Result<f64> {
    let n = sched.n_steps;
    if i >= n {
        return Err(Error::IndexOutOfGrid { index: i, len: n });
    }
    if i == 0 {
        return Ok(sched.sigma_max);
    }
    if i == n - 1 {
        return Ok(sched.sigma_min);
    }
    let frac = i as f64 / (n - 1) as f64;
    let (lo, hi) = (libm::log(sched.sigma_min), libm::log(sched.sigma_max));
    Ok(libm::exp(hi + frac * (lo - hi)))
}

/// Bridge strength `γ(σ) = κ (σ⁻² − σ_max⁻²)`.
///
/// Vanishes at `sigma_max` and diverges as σ → 0. `kappa = 0` disables the
/// bridge entirely.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GammaSchedule {
    pub kappa: f64,
    pub sigma_max: f64,
}

impl GammaSchedule {
    pub fn new(kappa: f64, sigma_max: f64) -> Result<Self> {
        if !(kappa >= 0.0 && kappa.is_finite()) || !(sigma_max > 0.0) {
            return Err(Error::InvalidParameter(alloc::format!(
                "gamma needs kappa >= 0 and sigma_max > 0, got {kappa}, {sigma_max}"
            )));
        }
        Ok(Self { kappa, sigma_max })
    }

    pub fn value(&self, sigma: f64) -> Result<f64> {
        gamma_value(self, sigma)
    }

    /// Same as [`value`](Self::value) but levels above `sigma_max` (reached
    /// by churn) are treated as `sigma_max`, where the bridge is off.
    pub fn value_clamped(&self, sigma: f64) -> Result<f64> {
        gamma_value(self, sigma.min(self.sigma_max))
    }

    pub fn derivative(&self, sigma: f64) -> f64 {
        -2.0 * self.kappa / (sigma * sigma * sigma)
    }
}

pub fn gamma_value(g: &GammaSchedule, sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidSigma(sigma));
    }
    if sigma > g.sigma_max {
        return Err(Error::GammaAboveMax { sigma, sigma_max: g.sigma_max });
    }
    if sigma == g.sigma_max {
        return Ok(0.0);
    }
    let inv_max = 1.0 / g.sigma_max;
    Ok(g.kappa * (1.0 / (sigma * sigma) - inv_max * inv_max))
}

/// Distribution of training noise levels (diffusion) or times (flow matching).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TrainTimeDist {
    /// σ = exp(U(log σ_min, log σ_max)).
    LogUniformSigma { sigma_min: f64, sigma_max: f64 },
    /// t = sigmoid(z), z ~ N(mu, sd²).
    LogitNormal { mu: f64, sd: f64 },
}

impl TrainTimeDist {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        sample_train_level(self, rng)
    }
}

pub fn sample_train_level<R: Rng + ?Sized>(d: &TrainTimeDist, rng: &mut R) -> f64 {
    match *d {
        TrainTimeDist::LogUniformSigma { sigma_min, sigma_max } => {
            let (lo, hi) = (libm::log(sigma_min), libm::log(sigma_max));
            libm::exp(lo + rng::uniform(rng) * (hi - lo))
        }
        TrainTimeDist::LogitNormal { mu, sd } => sigmoid(mu + sd * rng::normal(rng)),
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + libm::exp(-z))
    } else {
        let e = libm::exp(z);
        e / (1.0 + e)
    }
}

/// Denoiser-space loss weight λ(σ). Unit weight in denoiser space is the
/// same as weight σ⁴ on the score-space residual.
pub fn loss_weight(_sigma: f64) -> f64 {
    1.0
}

/// Choice of denoiser-space loss weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LossWeighting {
    /// [`loss_weight`], i.e. λ ≡ 1.
    #[default]
    Unit,
    /// λ = 1/σ²: unit weight on the residual `F` of `D = x + σ F`.
    InverseVariance,
}

impl LossWeighting {
    pub fn weight(self, sigma: f64) -> f64 {
        match self {
            LossWeighting::Unit => loss_weight(sigma),
            LossWeighting::InverseVariance => 1.0 / (sigma * sigma),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec::Vec;

    fn paper_sched(n: usize) -> NoiseSchedule {
        NoiseSchedule::new(3e-5, 80.0, n).unwrap()
    }

    #[test]
    fn grid_endpoints_and_midpoint() {
        let s = paper_sched(200);
        assert_eq!(s.sigma(0).unwrap(), 80.0);
        assert_eq!(s.sigma(199).unwrap(), 3e-5);
        let s3 = paper_sched(3);
        let mid = s3.sigma(1).unwrap();
        assert!((mid - libm::sqrt(80.0 * 3e-5)).abs() < 1e-12);
        assert!((mid - 0.0489898).abs() < 1e-7);
    }

    #[test]
    fn grid_out_of_range() {
        let s = paper_sched(200);
        assert_eq!(s.sigma(200), Err(Error::IndexOutOfGrid { index: 200, len: 200 }));
    }

    #[test]
    fn grid_strictly_decreasing() {
        for n in [2usize, 3, 10, 200, 1000] {
            let g = paper_sched(n).grid();
            assert!(g.windows(2).all(|w| w[1] < w[0]), "n = {n}");
        }
    }

    #[test]
    fn gamma_values() {
        let g = GammaSchedule::new(1.0, 80.0).unwrap();
        assert_eq!(g.value(80.0).unwrap(), 0.0);
        assert!((g.value(1.0).unwrap() - 0.99984375).abs() < 1e-15);
        let g2 = GammaSchedule::new(2.0, 80.0).unwrap();
        assert!((g2.value(0.5).unwrap() - 7.9996875).abs() < 1e-12);
    }

    #[test]
    fn gamma_domain_errors() {
        let g = GammaSchedule::new(1.0, 80.0).unwrap();
        assert_eq!(g.value(0.0), Err(Error::InvalidSigma(0.0)));
        assert_eq!(g.value(-1.0), Err(Error::InvalidSigma(-1.0)));
        assert!(matches!(g.value(81.0), Err(Error::GammaAboveMax { .. })));
        assert_eq!(g.value_clamped(84.0).unwrap(), 0.0);
    }

    #[test]
    fn gamma_limits_and_monotone() {
        for kappa in [0.05, 1.0, 3.0] {
            let g = GammaSchedule::new(kappa, 80.0).unwrap();
            assert_eq!(g.value(80.0).unwrap(), 0.0);
            let thresh = libm::sqrt(kappa / (1e6 + kappa / (80.0 * 80.0)));
            assert!(g.value(thresh * 0.999).unwrap() > 1e6);
            let levels: Vec<f64> = (0..50).map(|i| 80.0 * libm::pow(0.7, i as f64)).collect();
            let vals: Vec<f64> = levels.iter().map(|&s| g.value(s).unwrap()).collect();
            assert!(vals.windows(2).all(|w| w[1] > w[0]));
        }
    }

    #[test]
    fn gamma_derivative_matches_finite_difference() {
        let g = GammaSchedule::new(0.7, 80.0).unwrap();
        for s in [0.1, 1.0, 10.0] {
            let h = 1e-6 * s;
            let fd = (g.value(s + h).unwrap() - g.value(s - h).unwrap()) / (2.0 * h);
            let an = g.derivative(s);
            assert!(((fd - an) / an).abs() < 1e-4, "sigma {s}: {fd} vs {an}");
        }
    }

    #[test]
    fn unit_loss_weight() {
        for s in [80.0, 3e-5, 1.0] {
            assert_eq!(loss_weight(s), 1.0);
        }
    }

    #[test]
    fn degenerate_logit_normal() {
        let d = TrainTimeDist::LogitNormal { mu: 0.0, sd: 1e-300 };
        let mut r = rng::seeded(1);
        for _ in 0..10 {
            assert_eq!(d.sample(&mut r), 0.5);
        }
    }

    #[test]
    fn log_uniform_median() {
        let d = TrainTimeDist::LogUniformSigma { sigma_min: 3e-5, sigma_max: 80.0 };
        let mut r = rng::seeded(11);
        let mut xs: Vec<f64> = (0..100_000).map(|_| d.sample(&mut r)).collect();
        assert!(xs.iter().all(|&x| (3e-5..=80.0).contains(&x)));
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = xs[xs.len() / 2];
        let expect = libm::sqrt(80.0 * 3e-5);
        assert!((median / expect - 1.0).abs() < 0.10, "{median} vs {expect}");
    }
}
