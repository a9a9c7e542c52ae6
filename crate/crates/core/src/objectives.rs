//! Training objectives and the bridged denoiser.
//!
//! Every objective is a denoiser-space regression: diffusion models regress
//! `D(x₀ + σε, σ)` onto `x₀`; flow-matching models regress the endpoint
//! velocity `(X̂₁ − x_t)/(1 − t)` onto `x₁ − x₀`. Flow-matching states are
//! mapped onto the diffusion parameterization through
//! `x_t / t = x₁ + ((1 − t)/t) x₀`, so one denoiser network serves both.

use alloc::vec;
use alloc::vec::Vec;
use rand::Rng;

use crate::constraints::{loss_grad, ConstraintSpec};
use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::nnet::{clip_grad_norm, AdamState, BridgeNet, DenoiserNet, DenoiserTape, Tape};
use crate::rng;
use crate::schedules::{GammaSchedule, LossWeighting, TrainTimeDist};

/// Flow-matching times at or above this are redrawn.
pub const FM_T_MAX: f64 = 1.0 - 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Pretrain,
    /// Bridge `σ² γ(σ) ∇ℓ(x_t)` subtracted at the noisy state, whole model trainable.
    Mbm,
    /// Bridge at the detached denoised estimate, frozen backbone, trainable embedding.
    MbmppDm,
    MbmppFm,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Pretrain => "pretrain",
            Mode::Mbm => "mbm",
            Mode::MbmppDm => "mbmpp-dm",
            Mode::MbmppFm => "mbmpp-fm",
        }
    }

    pub fn is_mbmpp(self) -> bool {
        matches!(self, Mode::MbmppDm | Mode::MbmppFm)
    }
}

/// Maps a flow-matching time onto the equivalent diffusion state:
/// returns `(1/t_c, σ_eff)` with `σ_eff = (1 − t_c)/t_c`, where `t_c`
/// floors `t` at `1/(1 + σ_max)` so the level never exceeds `σ_max`.
pub fn fm_to_diffusion(t: f64, sigma_max: f64) -> (f64, f64) {
    let tc = t.max(1.0 / (1.0 + sigma_max));
    (1.0 / tc, (1.0 - tc) / tc)
}

/// Endpoint prediction `X̂₁(x_t, t)` of a flow-matching model expressed as a
/// denoiser.
pub fn fm_endpoint_batch<D: Denoiser + ?Sized>(den: &D, xs: &[f64], ts: &[f64], sigma_max: f64) -> Result<Vec<f64>> {
    let d = den.dim();
    let mut ys = Vec::with_capacity(xs.len());
    let mut sigmas = Vec::with_capacity(ts.len());
    for (x, &t) in xs.chunks_exact(d).zip(ts) {
        let (scale, s) = fm_to_diffusion(t, sigma_max);
        sigmas.push(s);
        ys.extend(x.iter().map(|v| v * scale));
    }
    den.denoise_batch(&ys, &sigmas)
}

/// Denoiser wrapper composed by [`BridgedModel`] according to its mode.
#[derive(Debug, Clone, PartialEq)]
pub struct BridgedModel {
    pub backbone: DenoiserNet,
    pub bridge: Option<BridgeNet>,
    pub constraint: ConstraintSpec,
    pub gamma: GammaSchedule,
    mode: Mode,
}

impl BridgedModel {
    pub fn pretrain(backbone: DenoiserNet, constraint: ConstraintSpec, gamma: GammaSchedule) -> Self {
        let mut backbone = backbone;
        backbone.frozen = false;
        Self { backbone, bridge: None, constraint, gamma, mode: Mode::Pretrain }
    }

    pub fn mbm(backbone: DenoiserNet, constraint: ConstraintSpec, gamma: GammaSchedule) -> Self {
        let mut backbone = backbone;
        backbone.frozen = false;
        Self { backbone, bridge: None, constraint, gamma, mode: Mode::Mbm }
    }

    pub fn mbmpp(
        backbone: DenoiserNet,
        bridge: BridgeNet,
        constraint: ConstraintSpec,
        gamma: GammaSchedule,
        flow_matching: bool,
    ) -> Result<Self> {
        if bridge.out_dim() != backbone.embed_width() || bridge.in_dim() != backbone.dim() {
            return Err(Error::DimensionMismatch { expected: backbone.embed_width(), got: bridge.out_dim() });
        }
        let mut backbone = backbone;
        backbone.frozen = true;
        let mode = if flow_matching { Mode::MbmppFm } else { Mode::MbmppDm };
        Ok(Self { backbone, bridge: Some(bridge), constraint, gamma, mode })
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn dim(&self) -> usize {
        self.backbone.dim()
    }

    /// Parameters updated by fine-tuning in this mode.
    pub fn trainable_params(&self) -> &[f64] {
        match (&self.bridge, self.mode.is_mbmpp()) {
            (Some(b), true) => b.params(),
            _ => self.backbone.params(),
        }
    }

    pub fn n_trainable(&self) -> usize {
        self.trainable_params().len()
    }

    pub fn apply_update(&mut self, opt: &mut AdamState, grads: &[f64]) -> Result<()> {
        if self.mode.is_mbmpp() {
            let bridge = self.bridge.as_mut().expect("mbmpp has a bridge");
            opt.step(bridge.params_mut(), grads)
        } else {
            self.backbone.apply_update(opt, grads)
        }
    }

    fn gammas(&self, sigmas: &[f64]) -> Result<Vec<f64>> {
        sigmas.iter().map(|&s| self.gamma.value_clamped(s)).collect()
    }

    fn constraint_grads(&self, xs: &[f64]) -> Result<Vec<f64>> {
        let d = self.dim();
        let mut g = Vec::with_capacity(xs.len());
        for x in xs.chunks_exact(d) {
            g.extend_from_slice(&loss_grad(&self.constraint, x)?);
        }
        Ok(g)
    }

    /// `D^Ω(x_t; σ) = D_θ(x_t; σ, extra = E_φ(g)) − γ(σ) g` with
    /// `g = ∇ℓ(sg(D_θ(x_t; σ)))`.
    pub fn bridged_denoise_batch(&self, xs: &[f64], sigmas: &[f64]) -> Result<Vec<f64>> {
        let bridge = match (&self.bridge, self.mode.is_mbmpp()) {
            (Some(b), true) => b,
            _ => return Err(Error::WrongMode { expected: "mbmpp-dm or mbmpp-fm", got: self.mode.name() }),
        };
        let n = sigmas.len();
        let d_hat = self.backbone.denoise_batch_with(xs, sigmas, None)?;
        let g = self.constraint_grads(&d_hat)?;
        let extra = bridge.forward(&g, n)?;
        let mut out = self.backbone.denoise_batch_with(xs, sigmas, Some(&extra))?;
        let gammas = self.gammas(sigmas)?;
        subtract_scaled_rows(&mut out, &g, &gammas, self.dim());
        Ok(out)
    }

    pub fn bridged_denoise(&self, x_t: &[f64], sigma: f64) -> Result<Vec<f64>> {
        self.bridged_denoise_batch(x_t, &[sigma])
    }

    /// Denoiser-space MBM bridge `σ² γ(σ) ∇ℓ(x)` evaluated at `x`.
    pub fn mbm_bridge_batch(&self, xs: &[f64], sigmas: &[f64]) -> Result<Vec<f64>> {
        let mut g = self.constraint_grads(xs)?;
        let gammas = self.gammas(sigmas)?;
        for ((row, &gm), &s) in g.chunks_exact_mut(self.dim()).zip(&gammas).zip(sigmas) {
            let k = s * s * gm;
            row.iter_mut().for_each(|v| *v *= k);
        }
        Ok(g)
    }
}

fn subtract_scaled_rows(out: &mut [f64], g: &[f64], scales: &[f64], d: usize) {
    for ((o, gr), &k) in out.chunks_exact_mut(d).zip(g.chunks_exact(d)).zip(scales) {
        for (oi, gi) in o.iter_mut().zip(gr) {
            *oi -= k * gi;
        }
    }
}

impl Denoiser for BridgedModel {
    fn dim(&self) -> usize {
        self.backbone.dim()
    }

    fn denoise(&self, x_t: &[f64], sigma: f64) -> Result<Vec<f64>> {
        self.denoise_batch(x_t, &[sigma])
    }

    fn denoise_batch(&self, xs: &[f64], sigmas: &[f64]) -> Result<Vec<f64>> {
        match self.mode {
            Mode::Pretrain => self.backbone.denoise_batch(xs, sigmas),
            Mode::Mbm => {
                let mut out = self.backbone.denoise_batch(xs, sigmas)?;
                let br = self.mbm_bridge_batch(xs, sigmas)?;
                out.iter_mut().zip(&br).for_each(|(o, b)| *o -= b);
                Ok(out)
            }
            Mode::MbmppDm | Mode::MbmppFm => self.bridged_denoise_batch(xs, sigmas),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    /// Gradient with respect to [`BridgedModel::trainable_params`].
    pub grads: Vec<f64>,
}

/// Inputs of one denoiser-space regression step: the network sees `inputs`
/// at `sigmas` and its prediction `D` enters the loss as
/// `Σ_rows w_i ‖(D_i − shift_i) − target_i‖²`, averaged over rows.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionDraws {
    pub inputs: Vec<f64>,
    pub sigmas: Vec<f64>,
    pub targets: Vec<f64>,
    /// Per-row scale applied to `D − offsets` before comparing to the target.
    pub scales: Vec<f64>,
    pub offsets: Vec<f64>,
    pub weights: Vec<f64>,
}

/// Draws `σ ~ dist`, `ε ~ N(0, I)` and forms `x_t = x₀ + σε` per row.
pub fn draw_dsm<R: Rng + ?Sized>(
    batch: &[Vec<f64>],
    dist: &TrainTimeDist,
    weighting: LossWeighting,
    rng: &mut R,
) -> Result<RegressionDraws> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let d = batch[0].len();
    let n = batch.len();
    let mut draws = RegressionDraws {
        inputs: Vec::with_capacity(n * d),
        sigmas: Vec::with_capacity(n),
        targets: Vec::with_capacity(n * d),
        scales: vec![1.0; n],
        offsets: vec![0.0; n * d],
        weights: Vec::with_capacity(n),
    };
    for x0 in batch {
        if x0.len() != d {
            return Err(Error::DimensionMismatch { expected: d, got: x0.len() });
        }
        let s = dist.sample(rng);
        draws.sigmas.push(s);
        draws.weights.push(weighting.weight(s));
        for &v in x0 {
            draws.inputs.push(v + s * rng::normal(rng));
        }
        draws.targets.extend_from_slice(x0);
    }
    Ok(draws)
}

/// Draws `t` (redrawn while `t ≥ 1 − 1e−6`), `x₀ ~ N(0, I)`, forms
/// `x_t = t x₁ + (1 − t) x₀`, and expresses the velocity regression
/// `‖(X̂₁ − x_t)/(1 − t) − (x₁ − x₀)‖²` in denoiser form.
pub fn draw_fm<R: Rng + ?Sized>(
    batch: &[Vec<f64>],
    dist: &TrainTimeDist,
    sigma_max: f64,
    rng: &mut R,
) -> Result<RegressionDraws> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let d = batch[0].len();
    let n = batch.len();
    let mut draws = RegressionDraws {
        inputs: Vec::with_capacity(n * d),
        sigmas: Vec::with_capacity(n),
        targets: Vec::with_capacity(n * d),
        scales: Vec::with_capacity(n),
        offsets: Vec::with_capacity(n * d),
        weights: vec![1.0; n],
    };
    for x1 in batch {
        if x1.len() != d {
            return Err(Error::DimensionMismatch { expected: d, got: x1.len() });
        }
        let t = loop {
            let t = dist.sample(rng);
            if t < FM_T_MAX {
                break t;
            }
        };
        let (scale, s) = fm_to_diffusion(t, sigma_max);
        draws.sigmas.push(s);
        draws.scales.push(1.0 / (1.0 - t));
        for &v in x1 {
            let x0 = rng::normal(rng);
            let xt = t * v + (1.0 - t) * x0;
            draws.inputs.push(scale * xt);
            draws.offsets.push(xt);
            draws.targets.push(v - x0);
        }
    }
    Ok(draws)
}

/// Loss and upstream gradient with respect to the predictions `D`.
fn regression_residual(pred: &[f64], draws: &RegressionDraws, d: usize) -> (f64, Vec<f64>) {
    let n = draws.sigmas.len() as f64;
    let mut loss = 0.0;
    let mut up = vec![0.0; pred.len()];
    for i in 0..draws.sigmas.len() {
        let (k, w) = (draws.scales[i], draws.weights[i]);
        let rows = i * d..(i + 1) * d;
        for j in rows {
            let r = k * (pred[j] - draws.offsets[j]) - draws.targets[j];
            loss += w * r * r;
            up[j] = 2.0 * w * k * r / n;
        }
    }
    (loss / n, up)
}

/// Regression loss of an arbitrary denoiser on fixed draws (no gradients).
pub fn regression_loss<D: Denoiser + ?Sized>(den: &D, draws: &RegressionDraws) -> Result<f64> {
    let pred = den.denoise_batch(&draws.inputs, &draws.sigmas)?;
    Ok(regression_residual(&pred, draws, den.dim()).0)
}

/// Loss and gradients of the model's trainable parameters on fixed draws.
pub fn regression_loss_grad(model: &BridgedModel, draws: &RegressionDraws) -> Result<LossGrad> {
    let d = model.dim();
    let n = draws.sigmas.len();
    let xs = &draws.inputs;
    let sigmas = &draws.sigmas;
    match model.mode() {
        Mode::Pretrain | Mode::Mbm => {
            let mut tape = DenoiserTape::default();
            let mut pred = model.backbone.forward_tape(xs, sigmas, None, &mut tape)?;
            if model.mode() == Mode::Mbm {
                let br = model.mbm_bridge_batch(xs, sigmas)?;
                pred.iter_mut().zip(&br).for_each(|(p, b)| *p -= b);
            }
            let (loss, up) = regression_residual(&pred, draws, d);
            let mut grads = vec![0.0; model.backbone.n_params()];
            model.backbone.backward(&tape, &up, Some(&mut grads))?;
            Ok(LossGrad { loss, grads })
        }
        Mode::MbmppDm | Mode::MbmppFm => {
            let bridge = model.bridge.as_ref().expect("mbmpp has a bridge");
            // detached denoised estimate: no tape, no gradient path
            let d_hat = model.backbone.denoise_batch_with(xs, sigmas, None)?;
            let g = model.constraint_grads(&d_hat)?;
            let mut btape = Tape::new();
            let extra = bridge.forward_tape(&g, n, &mut btape)?;
            let mut tape = DenoiserTape::default();
            let mut pred = model.backbone.forward_tape(xs, sigmas, Some(&extra), &mut tape)?;
            let gammas = model.gammas(sigmas)?;
            subtract_scaled_rows(&mut pred, &g, &gammas, d);
            let (loss, up) = regression_residual(&pred, draws, d);
            let back = model.backbone.backward(&tape, &up, None)?;
            let mut grads = vec![0.0; bridge.n_params()];
            bridge.backward(&btape, &back.extra, &mut grads)?;
            Ok(LossGrad { loss, grads })
        }
    }
}

/// Denoising score matching in denoiser space: mean of `λ(σ) ‖D(x_t, σ) − x₀‖²`.
pub fn dsm_loss<R: Rng + ?Sized>(
    model: &BridgedModel,
    batch: &[Vec<f64>],
    dist: &TrainTimeDist,
    weighting: LossWeighting,
    rng: &mut R,
) -> Result<LossGrad> {
    if model.mode() == Mode::MbmppFm {
        return Err(Error::WrongMode { expected: "pretrain, mbm or mbmpp-dm", got: model.mode().name() });
    }
    let draws = draw_dsm(batch, dist, weighting, rng)?;
    regression_loss_grad(model, &draws)
}

/// Flow matching with endpoint parameterization: mean of
/// `‖(X̂₁ − x_t)/(1 − t) − (x₁ − x₀)‖²`.
pub fn fm_loss<R: Rng + ?Sized>(
    model: &BridgedModel,
    batch: &[Vec<f64>],
    dist: &TrainTimeDist,
    sigma_max: f64,
    rng: &mut R,
) -> Result<LossGrad> {
    if matches!(model.mode(), Mode::MbmppDm | Mode::Mbm) {
        return Err(Error::WrongMode { expected: "pretrain or mbmpp-fm", got: model.mode().name() });
    }
    let draws = draw_fm(batch, dist, sigma_max, rng)?;
    regression_loss_grad(model, &draws)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Objective {
    Dsm { dist: TrainTimeDist, weighting: LossWeighting },
    FlowMatching { dist: TrainTimeDist, sigma_max: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub steps: usize,
    pub max_grad_norm: Option<f64>,
}

/// Adam on the model's trainable parameters with minibatches drawn with
/// replacement. `on_step(step, loss)` sees every loss; a non-finite loss
/// aborts with the step index.
pub fn train<F: FnMut(usize, f64)>(
    model: &mut BridgedModel,
    data: &[Vec<f64>],
    objective: Objective,
    cfg: TrainConfig,
    seed: u64,
    mut on_step: F,
) -> Result<()> {
    if data.is_empty() || cfg.batch_size == 0 {
        return Err(Error::EmptyBatch);
    }
    let mut r = rng::seeded(seed);
    let mut opt = AdamState::new(model.n_trainable(), cfg.lr);
    let mut batch = Vec::with_capacity(cfg.batch_size);
    for step in 0..cfg.steps {
        batch.clear();
        for _ in 0..cfg.batch_size {
            batch.push(data[r.random_range(0..data.len())].clone());
        }
        let mut lg = match objective {
            Objective::Dsm { dist, weighting } => dsm_loss(model, &batch, &dist, weighting, &mut r)?,
            Objective::FlowMatching { dist, sigma_max } => fm_loss(model, &batch, &dist, sigma_max, &mut r)?,
        };
        if !lg.loss.is_finite() {
            return Err(Error::Diverged { step });
        }
        on_step(step, lg.loss);
        if let Some(m) = cfg.max_grad_norm {
            clip_grad_norm(&mut lg.grads, m);
        }
        model.apply_update(&mut opt, &lg.grads)?;
    }
    Ok(())
}
