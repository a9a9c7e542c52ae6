//! Adjoint-matching fine-tuning of a control head on top of a pretrained
//! reverse-time SDE.
//!
//! The base process is discretized as
//! `x_{i+1} = x_i + (b(x_i) + σ_i u(x_i)) Δ_i + σ_i √Δ_i ξ_i`, and the lean
//! adjoint runs backward as `a_i = a_{i+1} + Δ_i (a_{i+1}ᵀ ∇b(x_i) + ∇f(x_i))`
//! from `a_M = ∇g(x_M)`. The control regresses onto `−σ_i a_i`.

use alloc::vec;
use alloc::vec::Vec;
use rand::Rng;

use crate::constraints::{loss_grad, loss_value, ConstraintSpec};
use crate::denoiser::{input_scale, Denoiser};
use crate::error::{Error, Result};
use crate::linalg::all_finite;
use crate::nnet::{clip_grad_norm, AdamState, DenoiserNet, DenoiserTape, LevelEmbedding, Mlp, Tape};
use crate::rng;
use crate::schedules::NoiseSchedule;

/// A batched drift `b(x)` at a fixed step together with its vector-Jacobian
/// product.
pub trait Drift {
    fn dim(&self) -> usize;

    /// Drift of `n` row-major states at grid step `step` (noise level `level`).
    fn drift(&self, xs: &[f64], step: usize, level: f64) -> Result<Vec<f64>>;

    /// `aᵀ ∇_x b(x)` row by row.
    fn vjp(&self, xs: &[f64], step: usize, level: f64, a: &[f64]) -> Result<Vec<f64>>;

    /// Denoised estimate implied by the drift `b` at `xs`; the state itself
    /// when the drift has no such reading.
    fn estimate(&self, xs: &[f64], _b: &[f64], _level: f64) -> Vec<f64> {
        xs.to_vec()
    }
}

/// `b(x) = c x`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearDrift {
    pub dim: usize,
    pub coef: f64,
}

impl Drift for LinearDrift {
    fn dim(&self) -> usize {
        self.dim
    }

    fn drift(&self, xs: &[f64], _step: usize, _level: f64) -> Result<Vec<f64>> {
        Ok(xs.iter().map(|x| self.coef * x).collect())
    }

    fn vjp(&self, _xs: &[f64], _step: usize, _level: f64, a: &[f64]) -> Result<Vec<f64>> {
        Ok(a.iter().map(|v| self.coef * v).collect())
    }
}

/// Reverse-time drift of a variance-exploding model in `σ²`-time:
/// `b(x) = (D(x, σ) − x) / σ²`.
#[derive(Debug, Clone, Copy)]
pub struct ScoreDrift<'a> {
    pub net: &'a DenoiserNet,
}

impl Drift for ScoreDrift<'_> {
    fn dim(&self) -> usize {
        self.net.dim()
    }

    fn drift(&self, xs: &[f64], _step: usize, level: f64) -> Result<Vec<f64>> {
        let n = xs.len() / self.dim();
        let sigmas = vec![level; n];
        let den = self.net.denoise_batch_with(xs, &sigmas, None)?;
        let inv = 1.0 / (level * level);
        Ok(den.iter().zip(xs).map(|(d, x)| (d - x) * inv).collect())
    }

    fn vjp(&self, xs: &[f64], _step: usize, level: f64, a: &[f64]) -> Result<Vec<f64>> {
        let n = xs.len() / self.dim();
        let sigmas = vec![level; n];
        let mut tape = DenoiserTape::default();
        self.net.forward_tape(xs, &sigmas, None, &mut tape)?;
        let g = self.net.backward(&tape, a, None)?;
        let inv = 1.0 / (level * level);
        Ok(g.input.iter().zip(a).map(|(j, v)| (j - v) * inv).collect())
    }

    fn estimate(&self, xs: &[f64], b: &[f64], level: f64) -> Vec<f64> {
        let s2 = level * level;
        xs.iter().zip(b).map(|(x, b)| x + s2 * b).collect()
    }
}

/// Step sizes, diffusion coefficients and control levels of a rollout grid.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    pub dt: Vec<f64>,
    pub diffusion: Vec<f64>,
    /// Positive level fed to the drift and the control embedding at each step.
    pub levels: Vec<f64>,
}

impl TimeGrid {
    /// `M` uniform steps of size `horizon / M` with constant diffusion.
    pub fn uniform(m: usize, horizon: f64, diffusion: f64) -> Result<Self> {
        if m < 2 || !(horizon > 0.0) {
            return Err(Error::InvalidParameter("a rollout grid needs M >= 2 steps and a positive horizon".into()));
        }
        let dt = horizon / m as f64;
        let levels = (0..m).map(|i| horizon - i as f64 * dt).collect();
        Ok(Self { dt: vec![dt; m], diffusion: vec![diffusion; m], levels })
    }

    /// Reverse SDE of a variance-exploding model over a noise schedule:
    /// `Δ_i = σ_i² − σ_{i+1}²`, unit diffusion, levels `σ_i`.
    pub fn from_noise(sched: &NoiseSchedule) -> Self {
        let s = sched.grid();
        let m = s.len() - 1;
        let dt = (0..m).map(|i| s[i] * s[i] - s[i + 1] * s[i + 1]).collect();
        Self { dt, diffusion: vec![1.0; m], levels: s[..m].to_vec() }
    }

    pub fn n_steps(&self) -> usize {
        self.dt.len()
    }
}

/// Control head `u_φ(x, level) = e(level) · MLP([c_in(level) x; emb(level)])`
/// with the fixed envelope `e(level) = 1 / (1 + level²)`. The output layer
/// starts at zero, so a fresh head is the zero control.
///
/// A guided head reads `[∇g(x̂); c_in x; emb]`, where `∇g(x̂)` is the gradient
/// of the guide cost at the denoised estimate `x̂` supplied by the caller, and
/// carries a zero-initialised per-coordinate gain from `∇g(x̂)` to the output.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlNet {
    dim: usize,
    embed: LevelEmbedding,
    mlp: Mlp,
    guided: bool,
    guide: Option<ConstraintSpec>,
}

impl ControlNet {
    pub fn new<R: Rng + ?Sized>(dim: usize, embed: LevelEmbedding, hidden: &[usize], rng: &mut R) -> Result<Self> {
        let mut widths = vec![dim + embed.width()];
        widths.extend_from_slice(hidden);
        widths.push(dim);
        Ok(Self { dim, embed, mlp: Mlp::new(&widths, true, rng)?, guided: false, guide: None })
    }

    /// A head that also sees the gradient of `guide` at the denoised estimate.
    pub fn guided<R: Rng + ?Sized>(
        dim: usize,
        embed: LevelEmbedding,
        hidden: &[usize],
        guide: ConstraintSpec,
        rng: &mut R,
    ) -> Result<Self> {
        let mut widths = vec![2 * dim + embed.width()];
        widths.extend_from_slice(hidden);
        widths.push(dim);
        let mlp = Mlp::new(&widths, true, rng)?.with_diag_skip()?;
        Ok(Self { dim, embed, mlp, guided: true, guide: Some(guide) })
    }

    /// Rebuilds a head from its MLP; a guided head still needs
    /// [`ControlNet::with_guide`] before use.
    pub fn from_parts(dim: usize, embed: LevelEmbedding, mlp: Mlp) -> Result<Self> {
        let plain = dim + embed.width();
        let guided = mlp.in_dim() == plain + dim;
        if (mlp.in_dim() != plain && !guided) || mlp.out_dim() != dim {
            return Err(Error::DimensionMismatch { expected: plain, got: mlp.in_dim() });
        }
        Ok(Self { dim, embed, mlp, guided, guide: None })
    }

    pub fn with_guide(mut self, guide: ConstraintSpec) -> Self {
        if self.guided {
            self.guide = Some(guide);
        }
        self
    }

    pub fn is_guided(&self) -> bool {
        self.guided
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn embedding(&self) -> LevelEmbedding {
        self.embed
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn params(&self) -> &[f64] {
        self.mlp.params()
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        self.mlp.params_mut()
    }

    pub fn n_params(&self) -> usize {
        self.mlp.n_params()
    }

    fn input(&self, xs: &[f64], est: &[f64], level: f64) -> Result<Vec<f64>> {
        if xs.len() % self.dim != 0 {
            return Err(Error::DimensionMismatch { expected: self.dim, got: xs.len() % self.dim });
        }
        let guide = match (self.guided, &self.guide) {
            (false, _) => None,
            (true, Some(g)) => Some(g),
            (true, None) => return Err(Error::InvalidParameter("guided control head has no constraint attached".into())),
        };
        if guide.is_some() && est.len() != xs.len() {
            return Err(Error::DimensionMismatch { expected: xs.len(), got: est.len() });
        }
        let (d, e) = (self.dim, self.embed.width());
        let w = self.mlp.in_dim();
        let c = input_scale(level);
        // guided rows put the gradient first so the diagonal gain reads it
        let off = if guide.is_some() { d } else { 0 };
        let mut input = vec![0.0; xs.len() / d * w];
        for (k, (row, x)) in input.chunks_exact_mut(w).zip(xs.chunks_exact(d)).enumerate() {
            if let Some(g) = guide {
                row[..d].copy_from_slice(&loss_grad(g, &est[k * d..(k + 1) * d])?);
            }
            for (r, xi) in row[off..off + d].iter_mut().zip(x) {
                *r = c * xi;
            }
            self.embed.embed_into(level, &mut row[off + d..off + d + e]);
        }
        Ok(input)
    }

    /// Control at states `xs` with denoised estimates `est` (ignored by an
    /// unguided head).
    pub fn forward(&self, xs: &[f64], est: &[f64], level: f64) -> Result<Vec<f64>> {
        let input = self.input(xs, est, level)?;
        let mut u = self.mlp.forward(&input, xs.len() / self.dim, None)?;
        scale(&mut u, control_envelope(level));
        Ok(u)
    }

    pub fn forward_tape(&self, xs: &[f64], est: &[f64], level: f64, tape: &mut Tape) -> Result<Vec<f64>> {
        let input = self.input(xs, est, level)?;
        let mut u = self.mlp.forward_tape(&input, xs.len() / self.dim, None, tape)?;
        scale(&mut u, control_envelope(level));
        Ok(u)
    }

    /// Reverse pass for a `forward_tape` call made at the same `level`.
    pub fn backward(&self, tape: &Tape, level: f64, upstream: &[f64], param_grads: &mut [f64]) -> Result<()> {
        let mut up = upstream.to_vec();
        scale(&mut up, control_envelope(level));
        self.mlp.backward(tape, &up, Some(param_grads)).map(|_| ())
    }
}

/// Fixed output envelope of [`ControlNet`].
pub fn control_envelope(level: f64) -> f64 {
    1.0 / (1.0 + level * level)
}

fn scale(v: &mut [f64], k: f64) {
    v.iter_mut().for_each(|x| *x *= k);
}

/// Denoiser implied by a controlled reverse SDE: the control shifts the
/// drift by `u`, i.e. the denoised estimate by `σ² u`.
pub struct ControlledDenoiser<'a> {
    pub net: &'a DenoiserNet,
    pub control: &'a ControlNet,
}

impl Denoiser for ControlledDenoiser<'_> {
    fn dim(&self) -> usize {
        self.net.dim()
    }

    fn denoise(&self, x_t: &[f64], sigma: f64) -> Result<Vec<f64>> {
        self.denoise_batch(x_t, &[sigma])
    }

    fn denoise_batch(&self, xs: &[f64], sigmas: &[f64]) -> Result<Vec<f64>> {
        let d = self.dim();
        let mut out = self.net.denoise_batch_with(xs, sigmas, None)?;
        for ((o, x), &s) in out.chunks_exact_mut(d).zip(xs.chunks_exact(d)).zip(sigmas) {
            let u = self.control.forward(x, o, s)?;
            for (oi, ui) in o.iter_mut().zip(&u) {
                *oi += s * s * ui;
            }
        }
        Ok(out)
    }
}

/// Everything a rollout and its adjoint need.
pub struct ControlContext<'a> {
    pub drift: &'a dyn Drift,
    pub grid: TimeGrid,
    pub control: ControlNet,
    /// Terminal cost `g = terminal_weight · ℓ(x)`.
    pub terminal: ConstraintSpec,
    pub terminal_weight: f64,
    /// Running cost `f = w · ℓ_f(x)`; included in the adjoint only when set.
    pub running: Option<(f64, ConstraintSpec)>,
    /// Standard deviation of the isotropic Gaussian initial state.
    pub init_std: f64,
}

/// Stored rollout of `n` trajectories: `xs[i]` is the `n × d` state at step
/// `i` (`M + 1` entries), `noises[i]` and `controls[i]` the increments used
/// on step `i`, `estimates[i]` the denoised estimate the control saw.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub n: usize,
    pub xs: Vec<Vec<f64>>,
    pub noises: Vec<Vec<f64>>,
    pub controls: Vec<Vec<f64>>,
    pub estimates: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn terminal(&self) -> &[f64] {
        self.xs.last().map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn n_steps(&self) -> usize {
        self.noises.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseMode {
    Stochastic,
    /// All Brownian increments zeroed.
    Deterministic,
}

/// Euler–Maruyama rollout of `dx = (b + σu) dt + σ dw`; trajectory `k` draws
/// from its own stream `derive_index(seed, k)`.
pub fn rollout_with(
    drift: &dyn Drift,
    grid: &TimeGrid,
    control: Option<&ControlNet>,
    init_std: f64,
    n: usize,
    seed: u64,
    mode: NoiseMode,
) -> Result<Trajectory> {
    let d = drift.dim();
    let m = grid.n_steps();
    if m < 2 {
        return Err(Error::InvalidParameter("a rollout needs M >= 2 steps".into()));
    }
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    let mut rngs: Vec<_> = (0..n).map(|k| rng::seeded(rng::derive_index(seed, k as u64))).collect();
    let mut x = vec![0.0; n * d];
    for (row, r) in x.chunks_exact_mut(d).zip(rngs.iter_mut()) {
        for v in row.iter_mut() {
            *v = init_std * rng::normal(r);
        }
    }
    let mut traj = Trajectory {
        n,
        xs: Vec::with_capacity(m + 1),
        noises: Vec::with_capacity(m),
        controls: Vec::with_capacity(m),
        estimates: Vec::with_capacity(m),
    };
    for i in 0..m {
        let (dt, s, level) = (grid.dt[i], grid.diffusion[i], grid.levels[i]);
        let b = drift.drift(&x, i, level)?;
        let est = drift.estimate(&x, &b, level);
        let u = match control {
            Some(c) => c.forward(&x, &est, level)?,
            None => vec![0.0; n * d],
        };
        let mut xi = vec![0.0; n * d];
        if mode == NoiseMode::Stochastic {
            for (row, r) in xi.chunks_exact_mut(d).zip(rngs.iter_mut()) {
                rng::fill_normal(r, row);
            }
        }
        let sq = libm::sqrt(dt);
        let mut next = x.clone();
        for j in 0..n * d {
            next[j] += (b[j] + s * u[j]) * dt + s * sq * xi[j];
        }
        if !all_finite(&next) {
            return Err(Error::Diverged { step: i });
        }
        traj.xs.push(core::mem::replace(&mut x, next));
        traj.noises.push(xi);
        traj.controls.push(u);
        traj.estimates.push(est);
    }
    traj.xs.push(x);
    Ok(traj)
}

pub fn rollout(ctx: &ControlContext<'_>, n: usize, seed: u64) -> Result<Trajectory> {
    rollout_with(ctx.drift, &ctx.grid, Some(&ctx.control), ctx.init_std, n, seed, NoiseMode::Stochastic)
}

/// Uncontrolled Euler–Maruyama sampler; the reference for adjoint matching.
pub fn em_sample(drift: &dyn Drift, grid: &TimeGrid, init_std: f64, n: usize, seed: u64) -> Result<Vec<f64>> {
    let t = rollout_with(drift, grid, None, init_std, n, seed, NoiseMode::Stochastic)?;
    Ok(t.terminal().to_vec())
}

/// Terminal states of the controlled sampler.
pub fn controlled_sample(
    drift: &dyn Drift,
    grid: &TimeGrid,
    control: &ControlNet,
    init_std: f64,
    n: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let t = rollout_with(drift, grid, Some(control), init_std, n, seed, NoiseMode::Stochastic)?;
    Ok(t.terminal().to_vec())
}

fn cost_grad_rows(c: &ConstraintSpec, w: f64, xs: &[f64], d: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(xs.len());
    for x in xs.chunks_exact(d) {
        out.extend(loss_grad(c, x)?.into_iter().map(|g| w * g));
    }
    Ok(out)
}

/// Lean adjoint states `a_0 … a_M` (each `n × d`) along a stored rollout.
pub fn solve_lean_adjoint(ctx: &ControlContext<'_>, traj: &Trajectory) -> Result<Vec<Vec<f64>>> {
    let m = ctx.grid.n_steps();
    if traj.xs.len() != m + 1 || traj.n == 0 {
        return Err(Error::MissingTrajectory);
    }
    let d = ctx.drift.dim();
    let mut adj = vec![Vec::new(); m + 1];
    adj[m] = cost_grad_rows(&ctx.terminal, ctx.terminal_weight, &traj.xs[m], d)?;
    for i in (0..m).rev() {
        let dt = ctx.grid.dt[i];
        let a_next = &adj[i + 1];
        let jb = ctx.drift.vjp(&traj.xs[i], i, ctx.grid.levels[i], a_next)?;
        let mut a: Vec<f64> = a_next.iter().zip(&jb).map(|(a, j)| a + dt * j).collect();
        if let Some((w, f)) = &ctx.running {
            let gf = cost_grad_rows(f, *w, &traj.xs[i], d)?;
            a.iter_mut().zip(&gf).for_each(|(a, g)| *a += dt * g);
        }
        adj[i] = a;
    }
    Ok(adj)
}

/// `Σ_i ‖u_φ(x_i) + σ_i a_i‖²` averaged over trajectories, and its gradient
/// with respect to the control parameters.
pub fn am_loss(ctx: &ControlContext<'_>, traj: &Trajectory, adjoints: &[Vec<f64>]) -> Result<(f64, Vec<f64>)> {
    let m = traj.n_steps();
    if adjoints.len() != m + 1 || traj.xs.len() != m + 1 || traj.estimates.len() != m || ctx.grid.n_steps() != m {
        return Err(Error::DimensionMismatch { expected: m + 1, got: adjoints.len() });
    }
    let n = traj.n as f64;
    let mut loss = 0.0;
    let mut grads = vec![0.0; ctx.control.n_params()];
    let mut tape = Tape::new();
    for i in 0..m {
        let s = ctx.grid.diffusion[i];
        let u = ctx.control.forward_tape(&traj.xs[i], &traj.estimates[i], ctx.grid.levels[i], &mut tape)?;
        if adjoints[i].len() != u.len() {
            return Err(Error::DimensionMismatch { expected: u.len(), got: adjoints[i].len() });
        }
        let mut up = vec![0.0; u.len()];
        for j in 0..u.len() {
            let r = u[j] + s * adjoints[i][j];
            loss += r * r;
            up[j] = 2.0 * r / n;
        }
        ctx.control.backward(&tape, ctx.grid.levels[i], &up, &mut grads)?;
    }
    Ok((loss / n, grads))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AmConfig {
    pub n_outer: usize,
    pub batch: usize,
    pub lr: f64,
    pub max_grad_norm: Option<f64>,
    pub seed: u64,
}

/// Outer loop of rollout, adjoint solve and one Adam step, with fresh
/// trajectories every iteration. `on_step(iter, loss)` sees every loss.
pub fn am_finetune<F: FnMut(usize, f64)>(ctx: &mut ControlContext<'_>, cfg: AmConfig, mut on_step: F) -> Result<()> {
    let mut opt = AdamState::new(ctx.control.n_params(), cfg.lr);
    for it in 0..cfg.n_outer {
        let traj = rollout(ctx, cfg.batch, rng::derive_index(cfg.seed, it as u64))?;
        let adj = solve_lean_adjoint(ctx, &traj)?;
        let (loss, mut grads) = am_loss(ctx, &traj, &adj)?;
        if !loss.is_finite() {
            return Err(Error::Diverged { step: it });
        }
        on_step(it, loss);
        if let Some(mx) = cfg.max_grad_norm {
            clip_grad_norm(&mut grads, mx);
        }
        opt.step(ctx.control.params_mut(), &grads)?;
    }
    Ok(())
}

/// Mean terminal cost `ℓ(x_M)` over the rows of a terminal batch.
pub fn mean_terminal_cost(c: &ConstraintSpec, xs: &[f64], d: usize) -> Result<f64> {
    let mut s = 0.0;
    let mut n = 0usize;
    for x in xs.chunks_exact(d) {
        s += loss_value(c, x)?;
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    Ok(s / n as f64)
}

/// Optimal discrete linear-quadratic control for `b = 0`, unit diffusion and
/// terminal cost `½ c ‖x‖²` on a uniform grid: gains `k_i` with
/// `u_i = −k_i x_i`, and the per-coordinate terminal variance reached from
/// initial variance `v0`.
pub fn lq_oracle(c: f64, dt: f64, m: usize, v0: f64) -> (Vec<f64>, f64) {
    let mut p = c;
    let mut gains = vec![0.0; m];
    for i in (0..m).rev() {
        let k = p / (1.0 + p * dt);
        gains[i] = k;
        p = k;
    }
    let mut v = v0;
    for k in &gains {
        let a = 1.0 - k * dt;
        v = a * a * v + dt;
    }
    (gains, v)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quad(c: f64, d: usize) -> (ConstraintSpec, f64) {
        (ConstraintSpec::QuadraticToPoint { target: vec![0.0; d] }, c)
    }

    fn ctx<'a>(drift: &'a dyn Drift, grid: TimeGrid) -> ControlContext<'a> {
        let d = drift.dim();
        let (terminal, w) = quad(2.0, d);
        ControlContext {
            drift,
            grid,
            control: ControlNet::new(d, LevelEmbedding::default(), &[16], &mut rng::seeded(3)).unwrap(),
            terminal,
            terminal_weight: w,
            running: None,
            init_std: 1.0,
        }
    }

    #[test]
    fn constant_adjoint_without_drift() {
        let zero = LinearDrift { dim: 2, coef: 0.0 };
        let c = ctx(&zero, TimeGrid::uniform(10, 1.0, 1.0).unwrap());
        let mut traj = rollout(&c, 1, 0).unwrap();
        *traj.xs.last_mut().unwrap() = vec![1.0, -1.0];
        let adj = solve_lean_adjoint(&c, &traj).unwrap();
        for a in &adj {
            assert_eq!(a, &vec![2.0, -2.0]);
        }
        let (loss, _) = am_loss(&c, &traj, &adj).unwrap();
        assert_eq!(loss, 80.0);
    }

    #[test]
    fn zero_terminal_gradient() {
        let zero = LinearDrift { dim: 2, coef: 0.0 };
        let mut c = ctx(&zero, TimeGrid::uniform(10, 1.0, 1.0).unwrap());
        c.terminal = ConstraintSpec::HalfPlane { normal: vec![1.0, 0.0], offset: 100.0 };
        let traj = rollout(&c, 3, 1).unwrap();
        let adj = solve_lean_adjoint(&c, &traj).unwrap();
        assert!(adj.iter().flatten().all(|&v| v == 0.0));
        assert_eq!(am_loss(&c, &traj, &adj).unwrap().0, 0.0);
    }

    #[test]
    fn exponential_adjoint() {
        let lin = LinearDrift { dim: 2, coef: -1.0 };
        let c = ctx(&lin, TimeGrid::uniform(1000, 1.0, 1.0).unwrap());
        let mut traj = rollout(&c, 1, 0).unwrap();
        *traj.xs.last_mut().unwrap() = vec![1.0, -1.0];
        let adj = solve_lean_adjoint(&c, &traj).unwrap();
        let expect = 2.0 * libm::exp(-1.0);
        assert!((adj[0][0] - expect).abs() / expect < 0.01);
    }

    #[test]
    fn deterministic_decay() {
        let lin = LinearDrift { dim: 1, coef: -1.0 };
        let grid = TimeGrid::uniform(1000, 1.0, 1.0).unwrap();
        let mut traj = rollout_with(&lin, &grid, None, 1.0, 1, 4, NoiseMode::Deterministic).unwrap();
        let x0 = traj.xs[0][0];
        let xm = traj.xs.pop().unwrap()[0];
        assert!((xm - x0 * libm::exp(-1.0)).abs() < 1e-3 * x0.abs().max(1.0));
    }

    #[test]
    fn guided_head_needs_its_constraint() {
        let guide = ConstraintSpec::HalfPlane { normal: vec![1.0, 0.0], offset: 0.0 };
        let mut c = ControlNet::guided(2, LevelEmbedding::default(), &[4], guide.clone(), &mut rng::seeded(1)).unwrap();
        c.params_mut().iter_mut().for_each(|p| *p = 0.1);
        let x = [0.5, -0.5];
        let u = c.forward(&x, &[2.0, 0.0], 0.3).unwrap();
        assert_ne!(u, c.forward(&x, &[-2.0, 0.0], 0.3).unwrap());

        let bare = ControlNet::from_parts(2, c.embedding(), c.mlp().clone()).unwrap();
        assert!(bare.is_guided());
        assert!(bare.forward(&x, &[2.0, 0.0], 0.3).is_err());
        assert_eq!(bare.with_guide(guide).forward(&x, &[2.0, 0.0], 0.3).unwrap(), u);
    }

    #[test]
    fn zero_control_matches_uncontrolled() {
        let lin = LinearDrift { dim: 3, coef: -0.5 };
        let c = ctx(&lin, TimeGrid::uniform(20, 1.0, 1.0).unwrap());
        let a = rollout(&c, 5, 9).unwrap();
        let b = em_sample(&lin, &c.grid, 1.0, 5, 9).unwrap();
        assert_eq!(a.terminal(), &b[..]);
    }

    #[test]
    fn running_cost_changes_adjoint() {
        let zero = LinearDrift { dim: 2, coef: 0.0 };
        let mut c = ctx(&zero, TimeGrid::uniform(10, 1.0, 1.0).unwrap());
        let traj = rollout(&c, 2, 2).unwrap();
        let plain = solve_lean_adjoint(&c, &traj).unwrap();
        c.running = Some((1.0, ConstraintSpec::QuadraticToPoint { target: vec![0.0, 0.0] }));
        let with_f = solve_lean_adjoint(&c, &traj).unwrap();
        assert_ne!(plain[0], with_f[0]);
        assert_eq!(plain[10], with_f[10]);
    }

    #[test]
    fn mismatched_lengths() {
        let zero = LinearDrift { dim: 2, coef: 0.0 };
        let c = ctx(&zero, TimeGrid::uniform(10, 1.0, 1.0).unwrap());
        let traj = rollout(&c, 1, 0).unwrap();
        let adj = solve_lean_adjoint(&c, &traj).unwrap();
        assert!(am_loss(&c, &traj, &adj[1..]).is_err());
        let mut short = traj.clone();
        short.xs.pop();
        assert_eq!(solve_lean_adjoint(&c, &short), Err(Error::MissingTrajectory));
    }

    #[test]
    fn lq_oracle_shrinks_variance() {
        let (gains, v) = lq_oracle(2.0, 0.01, 100, 1.0);
        assert_eq!(gains.len(), 100);
        assert!(v < 2.0);
        let (_, v0) = lq_oracle(0.0, 0.01, 100, 1.0);
        assert!((v0 - 2.0).abs() < 1e-12);
    }
}
