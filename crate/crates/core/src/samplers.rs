//! Generation: the stochastic EDM sampler with churn for diffusion models,
//! the Euler ODE sampler for flow matching, and the controlled SDE sampler
//! after adjoint matching.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::adjoint::{controlled_sample, ControlNet, ScoreDrift, TimeGrid};
use crate::constraints::{loss_grad, ConstraintSpec};
use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::linalg::all_finite;
use crate::nnet::DenoiserNet;
use crate::objectives::{fm_endpoint_batch, fm_to_diffusion, BridgedModel, Mode};
use crate::rng;
use crate::schedules::NoiseSchedule;

/// Chains advanced together through one batched denoiser call.
pub const BLOCK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    DmBaseline,
    DmMpgd,
    DmMbm,
    DmMbmpp,
    FmBaseline,
    FmTfGuided,
    FmMbmpp,
    Am,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::DmBaseline,
        Method::DmMpgd,
        Method::DmMbm,
        Method::DmMbmpp,
        Method::FmBaseline,
        Method::FmTfGuided,
        Method::FmMbmpp,
        Method::Am,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::DmBaseline => "dm-baseline",
            Method::DmMpgd => "dm-mpgd",
            Method::DmMbm => "dm-mbm",
            Method::DmMbmpp => "dm-mbmpp",
            Method::FmBaseline => "fm-baseline",
            Method::FmTfGuided => "fm-tfguided",
            Method::FmMbmpp => "fm-mbmpp",
            Method::Am => "am",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidParameter(alloc::format!("unknown method `{s}`")))
    }

    pub fn is_flow_matching(self) -> bool {
        matches!(self, Method::FmBaseline | Method::FmTfGuided | Method::FmMbmpp)
    }

    fn guided(self) -> bool {
        matches!(self, Method::DmMpgd | Method::FmTfGuided)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Training-free guidance weight `r(σ) = ρ σ² / (σ² + 1)`.
pub fn guidance_weight(rho: f64, sigma: f64) -> f64 {
    let s2 = sigma * sigma;
    rho * s2 / (s2 + 1.0)
}

/// Denoiser with training-free guidance applied at its own output:
/// `D − r(σ) ∇ℓ(D)`.
pub struct Guided<'a> {
    pub base: &'a dyn Denoiser,
    pub constraint: &'a ConstraintSpec,
    pub rho: f64,
}

impl Denoiser for Guided<'_> {
    fn dim(&self) -> usize {
        self.base.dim()
    }

    fn denoise(&self, x_t: &[f64], sigma: f64) -> Result<Vec<f64>> {
        self.denoise_batch(x_t, &[sigma])
    }

    fn denoise_batch(&self, xs: &[f64], sigmas: &[f64]) -> Result<Vec<f64>> {
        let mut out = self.base.denoise_batch(xs, sigmas)?;
        let w: Vec<f64> = sigmas.iter().map(|&s| guidance_weight(self.rho, s)).collect();
        guide(self.constraint, &mut out, &w, self.dim())?;
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerSpec {
    pub method: Method,
    pub n_steps: usize,
    pub s_churn: f64,
    /// Scale `ρ` of the training-free guidance weight.
    pub rho: f64,
    pub seed: u64,
}

impl SamplerSpec {
    pub fn new(method: Method, n_steps: usize, s_churn: f64, rho: f64, seed: u64) -> Result<Self> {
        if n_steps < 2 {
            return Err(Error::InvalidParameter(alloc::format!("n_steps must be at least 2, got {n_steps}")));
        }
        if !(s_churn >= 0.0) || !s_churn.is_finite() {
            return Err(Error::InvalidParameter(alloc::format!("s_churn must be non-negative, got {s_churn}")));
        }
        if !rho.is_finite() {
            return Err(Error::InvalidParameter(String::from("guidance scale must be finite")));
        }
        Ok(Self { method, n_steps, s_churn, rho, seed })
    }

    /// Per-step churn `min(S_churn / N, √2 − 1)`.
    pub fn churn(&self) -> f64 {
        if self.s_churn > 0.0 {
            (self.s_churn / self.n_steps as f64).min(core::f64::consts::SQRT_2 - 1.0)
        } else {
            0.0
        }
    }
}

/// The model a sampler runs.
#[derive(Clone, Copy)]
pub enum ModelRef<'a> {
    Plain(&'a dyn Denoiser),
    Bridged(&'a BridgedModel),
    Controlled { net: &'a DenoiserNet, control: &'a ControlNet },
}

#[derive(Clone, Copy)]
pub struct ModelContext<'a> {
    pub model: ModelRef<'a>,
    /// Constraint used by training-free guidance.
    pub constraint: Option<&'a ConstraintSpec>,
    pub sigma_min: f64,
    pub sigma_max: f64,
}

impl<'a> ModelContext<'a> {
    pub fn plain(den: &'a dyn Denoiser, sigma_min: f64, sigma_max: f64) -> Self {
        Self { model: ModelRef::Plain(den), constraint: None, sigma_min, sigma_max }
    }

    pub fn bridged(m: &'a BridgedModel, sigma_min: f64, sigma_max: f64) -> Self {
        Self { model: ModelRef::Bridged(m), constraint: Some(&m.constraint), sigma_min, sigma_max }
    }

    pub fn with_constraint(mut self, c: &'a ConstraintSpec) -> Self {
        self.constraint = Some(c);
        self
    }

    pub fn dim(&self) -> usize {
        match self.model {
            ModelRef::Plain(d) => d.dim(),
            ModelRef::Bridged(m) => m.dim(),
            ModelRef::Controlled { net, .. } => net.dim(),
        }
    }

    fn check(&self, method: Method) -> Result<()> {
        let got = match self.model {
            ModelRef::Plain(_) => "plain",
            ModelRef::Bridged(m) => m.mode().name(),
            ModelRef::Controlled { .. } => "controlled",
        };
        let ok = match (method, self.model) {
            (Method::Am, ModelRef::Controlled { .. }) => true,
            (Method::DmMbm, ModelRef::Bridged(m)) => m.mode() == Mode::Mbm,
            (Method::DmMbmpp, ModelRef::Bridged(m)) => m.mode() == Mode::MbmppDm,
            (Method::FmMbmpp, ModelRef::Bridged(m)) => m.mode() == Mode::MbmppFm,
            (Method::DmBaseline | Method::DmMpgd | Method::FmBaseline | Method::FmTfGuided, ModelRef::Plain(_)) => true,
            (Method::DmBaseline | Method::DmMpgd | Method::FmBaseline | Method::FmTfGuided, ModelRef::Bridged(m)) => {
                m.mode() == Mode::Pretrain
            }
            _ => false,
        };
        if !ok {
            let expected = match method {
                Method::Am => "controlled",
                Method::DmMbm => "mbm",
                Method::DmMbmpp => "mbmpp-dm",
                Method::FmMbmpp => "mbmpp-fm",
                _ => "plain or pretrain",
            };
            return Err(Error::WrongMode { expected, got });
        }
        if method.guided() && self.constraint.is_none() {
            return Err(Error::InvalidParameter(String::from("guided sampling needs a constraint")));
        }
        Ok(())
    }

    fn denoiser(&self) -> &dyn Denoiser {
        match self.model {
            ModelRef::Plain(d) => d,
            ModelRef::Bridged(m) => m,
            ModelRef::Controlled { net, .. } => net,
        }
    }
}

/// `D − r ∇ℓ(D)` row by row, with `r` per row.
fn guide(c: &ConstraintSpec, den: &mut [f64], weights: &[f64], d: usize) -> Result<()> {
    for (row, &r) in den.chunks_exact_mut(d).zip(weights) {
        let g = loss_grad(c, row)?;
        for (v, gi) in row.iter_mut().zip(&g) {
            *v -= r * gi;
        }
    }
    Ok(())
}

fn rows(flat: Vec<f64>, d: usize) -> Vec<Vec<f64>> {
    flat.chunks_exact(d).map(<[f64]>::to_vec).collect()
}

/// Stochastic sampler with churn on the log-linear grid. Chain `k` uses the
/// stream `derive_index(seed, k)`; steps end at `σ_min`.
pub fn dm_sample(spec: &SamplerSpec, ctx: &ModelContext<'_>, n_samples: usize) -> Result<Vec<Vec<f64>>> {
    if spec.method.is_flow_matching() || spec.method == Method::Am {
        return Err(Error::WrongMode { expected: "a diffusion method", got: spec.method.name() });
    }
    ctx.check(spec.method)?;
    let sched = NoiseSchedule::new(ctx.sigma_min, ctx.sigma_max, spec.n_steps)?;
    let grid = sched.grid();
    let d = ctx.dim();
    let den = ctx.denoiser();
    let churn = spec.churn();
    let mut out = Vec::with_capacity(n_samples);
    let mut start = 0;
    while start < n_samples {
        let nb = BLOCK.min(n_samples - start);
        let mut rngs: Vec<_> = (start..start + nb).map(|k| rng::seeded(rng::derive_index(spec.seed, k as u64))).collect();
        let mut x = vec![0.0; nb * d];
        for (row, r) in x.chunks_exact_mut(d).zip(rngs.iter_mut()) {
            for v in row.iter_mut() {
                *v = grid[0] * rng::normal(r);
            }
        }
        let mut sigmas = vec![0.0; nb];
        for i in 0..grid.len() - 1 {
            let (s, s_next) = (grid[i], grid[i + 1]);
            let s_hat = s * (1.0 + churn);
            if churn > 0.0 {
                let add = libm::sqrt(s_hat * s_hat - s * s);
                for (row, r) in x.chunks_exact_mut(d).zip(rngs.iter_mut()) {
                    for v in row.iter_mut() {
                        *v += add * rng::normal(r);
                    }
                }
            }
            sigmas.iter_mut().for_each(|v| *v = s_hat);
            let mut dx = den.denoise_batch(&x, &sigmas)?;
            if spec.method == Method::DmMpgd {
                let c = ctx.constraint.expect("checked");
                guide(c, &mut dx, &vec![guidance_weight(spec.rho, s_hat); nb], d)?;
            }
            let h = s_next - s_hat;
            for (xv, dv) in x.iter_mut().zip(&dx) {
                *xv += h * (*xv - dv) / s_hat;
            }
            if !all_finite(&x) {
                return Err(Error::Diverged { step: i });
            }
        }
        out.extend(rows(x, d));
        start += nb;
    }
    Ok(out)
}

/// Euler integration of `v = (X̂₁ − x)/(1 − t)` over `n_steps` uniform steps
/// from `x ~ N(0, I)` at `t = 0`.
pub fn fm_sample(spec: &SamplerSpec, ctx: &ModelContext<'_>, n_samples: usize) -> Result<Vec<Vec<f64>>> {
    if !spec.method.is_flow_matching() {
        return Err(Error::WrongMode { expected: "a flow-matching method", got: spec.method.name() });
    }
    ctx.check(spec.method)?;
    let d = ctx.dim();
    let den = ctx.denoiser();
    let n = spec.n_steps;
    let dt = 1.0 / n as f64;
    let mut out = Vec::with_capacity(n_samples);
    let mut start = 0;
    while start < n_samples {
        let nb = BLOCK.min(n_samples - start);
        let mut x = vec![0.0; nb * d];
        for (k, row) in x.chunks_exact_mut(d).enumerate() {
            let mut r = rng::seeded(rng::derive_index(spec.seed, (start + k) as u64));
            rng::fill_normal(&mut r, row);
        }
        for i in 0..n {
            let t = (i as f64 * dt).min(1.0 - dt);
            let ts = vec![t; nb];
            let mut x1 = fm_endpoint_batch(den, &x, &ts, ctx.sigma_max)?;
            if spec.method == Method::FmTfGuided {
                let c = ctx.constraint.expect("checked");
                let (_, s_eff) = fm_to_diffusion(t, ctx.sigma_max);
                guide(c, &mut x1, &vec![guidance_weight(spec.rho, s_eff); nb], d)?;
            }
            let k = dt / (1.0 - t);
            for (xv, e) in x.iter_mut().zip(&x1) {
                *xv += k * (e - *xv);
            }
            if !all_finite(&x) {
                return Err(Error::Diverged { step: i });
            }
        }
        out.extend(rows(x, d));
        start += nb;
    }
    Ok(out)
}

/// Runs the sampler matching `spec.method`.
pub fn sample(spec: &SamplerSpec, ctx: &ModelContext<'_>, n_samples: usize) -> Result<Vec<Vec<f64>>> {
    match spec.method {
        Method::Am => {
            ctx.check(Method::Am)?;
            let ModelRef::Controlled { net, control } = ctx.model else { unreachable!() };
            let sched = NoiseSchedule::new(ctx.sigma_min, ctx.sigma_max, spec.n_steps)?;
            let grid = TimeGrid::from_noise(&sched);
            let drift = ScoreDrift { net };
            let flat = controlled_sample(&drift, &grid, control, ctx.sigma_max, n_samples, spec.seed)?;
            Ok(rows(flat, net.dim()))
        }
        m if m.is_flow_matching() => fm_sample(spec, ctx, n_samples),
        _ => dm_sample(spec, ctx, n_samples),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gmm::GaussianMixture;

    struct Fixed(Vec<f64>);

    impl Denoiser for Fixed {
        fn dim(&self) -> usize {
            self.0.len()
        }

        fn denoise(&self, _x: &[f64], _s: f64) -> Result<Vec<f64>> {
            Ok(self.0.clone())
        }
    }

    #[test]
    fn spec_validation() {
        assert!(SamplerSpec::new(Method::DmBaseline, 1, 0.0, 0.0, 0).is_err());
        assert!(SamplerSpec::new(Method::DmBaseline, 10, -1.0, 0.0, 0).is_err());
        let s = SamplerSpec::new(Method::DmBaseline, 200, 10.0, 0.0, 0).unwrap();
        assert!((s.churn() - 0.05).abs() < 1e-15);
        let s = SamplerSpec::new(Method::DmBaseline, 2, 10.0, 0.0, 0).unwrap();
        assert_eq!(s.churn(), core::f64::consts::SQRT_2 - 1.0);
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(Method::parse(m.name()).unwrap(), m);
        }
        assert!(Method::parse("nope").is_err());
    }

    #[test]
    fn constant_endpoint_reached() {
        let q = Fixed(vec![0.3, -2.0]);
        let ctx = ModelContext::plain(&q, 3e-5, 80.0);
        let spec = SamplerSpec::new(Method::FmBaseline, 50, 0.0, 0.0, 5).unwrap();
        for x in fm_sample(&spec, &ctx, 7).unwrap() {
            assert!((x[0] - 0.3).abs() < 1e-12 && (x[1] + 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_guidance_is_baseline() {
        let g = GaussianMixture::standard_normal(2);
        let c = ConstraintSpec::QuadraticToPoint { target: vec![1.0, 1.0] };
        let ctx = ModelContext::plain(&g, 3e-5, 80.0).with_constraint(&c);
        let base = SamplerSpec::new(Method::DmBaseline, 30, 10.0, 0.0, 11).unwrap();
        let mpgd = SamplerSpec { method: Method::DmMpgd, ..base };
        assert_eq!(dm_sample(&base, &ctx, 5).unwrap(), dm_sample(&mpgd, &ctx, 5).unwrap());
        let fb = SamplerSpec::new(Method::FmBaseline, 20, 0.0, 0.0, 11).unwrap();
        let ft = SamplerSpec { method: Method::FmTfGuided, ..fb };
        assert_eq!(fm_sample(&fb, &ctx, 5).unwrap(), fm_sample(&ft, &ctx, 5).unwrap());
    }

    #[test]
    fn wrong_model_for_method() {
        let g = GaussianMixture::standard_normal(2);
        let ctx = ModelContext::plain(&g, 3e-5, 80.0);
        let spec = SamplerSpec::new(Method::DmMbmpp, 10, 0.0, 0.0, 0).unwrap();
        assert!(matches!(dm_sample(&spec, &ctx, 1), Err(Error::WrongMode { .. })));
        let spec = SamplerSpec::new(Method::DmMpgd, 10, 0.0, 1.0, 0).unwrap();
        assert!(dm_sample(&spec, &ctx, 1).is_err());
    }

    #[test]
    fn divergence_names_step() {
        struct Blow;
        impl Denoiser for Blow {
            fn dim(&self) -> usize {
                1
            }
            fn denoise(&self, _x: &[f64], _s: f64) -> Result<Vec<f64>> {
                Ok(vec![f64::NAN])
            }
        }
        let ctx = ModelContext::plain(&Blow, 3e-5, 80.0);
        let spec = SamplerSpec::new(Method::DmBaseline, 10, 0.0, 0.0, 0).unwrap();
        assert_eq!(dm_sample(&spec, &ctx, 2), Err(Error::Diverged { step: 0 }));
    }

    #[test]
    fn block_size_does_not_change_chains() {
        let g = GaussianMixture::standard_normal(2);
        let ctx = ModelContext::plain(&g, 3e-5, 80.0);
        let spec = SamplerSpec::new(Method::DmBaseline, 20, 10.0, 0.0, 3).unwrap();
        let many = dm_sample(&spec, &ctx, BLOCK + 3).unwrap();
        let few = dm_sample(&spec, &ctx, 3).unwrap();
        assert_eq!(&many[..3], &few[..]);
    }
}
