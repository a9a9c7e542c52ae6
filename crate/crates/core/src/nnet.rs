//! Small feed-forward networks with explicit reverse-mode gradients.
//!
//! Parameters of an [`Mlp`] live in one flat buffer (per layer: an
//! `in x out` row-major weight block followed by the bias), so optimizers,
//! checkpoints and the frozen-backbone checks all work on plain slices.
//! Activations are batched row-major: `n` samples of width `w` occupy
//! `n * w` contiguous values.

use alloc::vec;
use alloc::vec::Vec;
use rand::Rng;

use crate::denoiser::{input_scale, Denoiser};
use crate::error::{Error, Result};
use crate::linalg::gemm;
use crate::rng;

fn silu(z: f64) -> f64 {
    z * crate::schedules::sigmoid(z)
}

fn silu_grad(z: f64) -> f64 {
    let s = crate::schedules::sigmoid(z);
    s * (1.0 + z * (1.0 - s))
}

/// Fully connected network, SiLU on every hidden layer, identity output.
///
/// Optionally carries a diagonal shortcut: output `j` also receives
/// `s_j * input_j`. Its coefficients sit after the last bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    widths: Vec<usize>,
    offsets: Vec<usize>,
    params: Vec<f64>,
    skip: bool,
}

/// Activations cached by a forward pass for the matching backward pass.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    n: usize,
    inputs: Vec<Vec<f64>>,
    preacts: Vec<Vec<f64>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn batch_size(&self) -> usize {
        self.n
    }
}

/// Gradients returned by [`Mlp::backward`] besides the parameter gradients.
#[derive(Debug, Clone)]
pub struct InputGrads {
    /// `n x in` gradient with respect to the network input.
    pub input: Vec<f64>,
    /// `n x widths[1]` gradient with respect to the first pre-activation,
    /// which is also the gradient of any additive first-layer shift.
    pub first_preact: Vec<f64>,
}

impl Mlp {
    fn layout(widths: &[usize]) -> (Vec<usize>, usize) {
        let mut offsets = Vec::with_capacity(widths.len() - 1);
        let mut total = 0;
        for w in widths.windows(2) {
            offsets.push(total);
            total += w[0] * w[1] + w[1];
        }
        (offsets, total)
    }

    /// LeCun-normal weights, zero biases. With `zero_final` the output
    /// layer starts at exactly zero, so the network outputs zero everywhere.
    pub fn new<R: Rng + ?Sized>(widths: &[usize], zero_final: bool, rng: &mut R) -> Result<Self> {
        if widths.len() < 2 || widths.iter().any(|&w| w == 0) {
            return Err(Error::InvalidParameter(alloc::format!("bad layer widths {widths:?}")));
        }
        let (offsets, total) = Self::layout(widths);
        let mut params = vec![0.0; total];
        let n_layers = widths.len() - 1;
        for l in 0..n_layers {
            if zero_final && l == n_layers - 1 {
                continue;
            }
            let (fan_in, fan_out) = (widths[l], widths[l + 1]);
            let scale = 1.0 / libm::sqrt(fan_in as f64);
            for p in &mut params[offsets[l]..offsets[l] + fan_in * fan_out] {
                *p = scale * rng::normal(rng);
            }
        }
        Ok(Self { widths: widths.to_vec(), offsets, params, skip: false })
    }

    /// Adds a zero-initialised diagonal shortcut from the leading inputs.
    pub fn with_diag_skip(mut self) -> Result<Self> {
        if self.skip {
            return Ok(self);
        }
        if self.in_dim() < self.out_dim() {
            return Err(Error::InvalidParameter("diagonal shortcut needs in >= out".into()));
        }
        self.params.extend(core::iter::repeat(0.0).take(self.out_dim()));
        self.skip = true;
        Ok(self)
    }

    /// Rebuilds a network from its flat parameters; a trailing block of
    /// `out` values is read as the diagonal shortcut.
    pub fn from_params(widths: &[usize], params: Vec<f64>) -> Result<Self> {
        if widths.len() < 2 || widths.iter().any(|&w| w == 0) {
            return Err(Error::InvalidParameter(alloc::format!("bad layer widths {widths:?}")));
        }
        let (offsets, total) = Self::layout(widths);
        let out = widths[widths.len() - 1];
        let skip = params.len() == total + out && widths[0] >= out;
        if params.len() != total && !skip {
            return Err(Error::DimensionMismatch { expected: total, got: params.len() });
        }
        Ok(Self { widths: widths.to_vec(), offsets, params, skip })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn in_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn out_dim(&self) -> usize {
        *self.widths.last().expect("non-empty")
    }

    pub fn first_width(&self) -> usize {
        self.widths[1]
    }

    pub fn n_layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn has_skip(&self) -> bool {
        self.skip
    }

    fn skip_coefs(&self) -> &[f64] {
        &self.params[self.params.len() - self.out_dim()..]
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    fn weight(&self, l: usize) -> &[f64] {
        let o = self.offsets[l];
        &self.params[o..o + self.widths[l] * self.widths[l + 1]]
    }

    fn bias(&self, l: usize) -> &[f64] {
        let o = self.offsets[l] + self.widths[l] * self.widths[l + 1];
        &self.params[o..o + self.widths[l + 1]]
    }

    fn check_batch(&self, input: &[f64], n: usize, shift: Option<&[f64]>) -> Result<()> {
        if input.len() != n * self.in_dim() {
            return Err(Error::DimensionMismatch { expected: n * self.in_dim(), got: input.len() });
        }
        if let Some(s) = shift {
            if s.len() != n * self.first_width() {
                return Err(Error::DimensionMismatch {
                    expected: n * self.first_width(),
                    got: s.len(),
                });
            }
        }
        Ok(())
    }

    fn run(&self, input: &[f64], n: usize, shift: Option<&[f64]>, mut tape: Option<&mut Tape>) -> Vec<f64> {
        if let Some(t) = tape.as_deref_mut() {
            t.n = n;
            t.inputs.clear();
            t.preacts.clear();
        }
        let mut h = input.to_vec();
        let last = self.n_layers() - 1;
        for l in 0..=last {
            let (fan_in, fan_out) = (self.widths[l], self.widths[l + 1]);
            let bias = self.bias(l);
            let mut z = Vec::with_capacity(n * fan_out);
            for _ in 0..n {
                z.extend_from_slice(bias);
            }
            gemm(n, fan_in, fan_out, 1.0, &h, false, self.weight(l), false, 1.0, &mut z);
            if l == 0 {
                if let Some(s) = shift {
                    for (zi, si) in z.iter_mut().zip(s) {
                        *zi += si;
                    }
                }
            }
            if l == last && self.skip {
                let (w, s) = (self.in_dim(), self.skip_coefs());
                for (row, x) in z.chunks_exact_mut(fan_out).zip(input.chunks_exact(w)) {
                    for ((zi, si), xi) in row.iter_mut().zip(s).zip(x) {
                        *zi += si * xi;
                    }
                }
            }
            let next = if l < last { z.iter().map(|&v| silu(v)).collect() } else { z.clone() };
            if let Some(t) = tape.as_deref_mut() {
                t.inputs.push(core::mem::replace(&mut h, next));
                t.preacts.push(z);
            } else {
                h = next;
            }
        }
        h
    }

    /// Batched forward pass; `shift` (`n x widths[1]`) is added to the first
    /// pre-activation.
    pub fn forward(&self, input: &[f64], n: usize, shift: Option<&[f64]>) -> Result<Vec<f64>> {
        self.check_batch(input, n, shift)?;
        Ok(self.run(input, n, shift, None))
    }

    pub fn forward_tape(
        &self,
        input: &[f64],
        n: usize,
        shift: Option<&[f64]>,
        tape: &mut Tape,
    ) -> Result<Vec<f64>> {
        self.check_batch(input, n, shift)?;
        Ok(self.run(input, n, shift, Some(tape)))
    }

    /// Reverse pass for the forward pass recorded in `tape`. Parameter
    /// gradients are accumulated into `param_grads` when given.
    pub fn backward(
        &self,
        tape: &Tape,
        upstream: &[f64],
        param_grads: Option<&mut [f64]>,
    ) -> Result<InputGrads> {
        if tape.is_empty() {
            return Err(Error::NoForwardPass);
        }
        if tape.inputs.len() != self.n_layers() {
            return Err(Error::InvalidParameter("tape recorded by a different network".into()));
        }
        let n = tape.n;
        if upstream.len() != n * self.out_dim() {
            return Err(Error::DimensionMismatch { expected: n * self.out_dim(), got: upstream.len() });
        }
        let mut grads = param_grads;
        if let Some(g) = grads.as_deref() {
            if g.len() != self.params.len() {
                return Err(Error::DimensionMismatch { expected: self.params.len(), got: g.len() });
            }
        }
        let mut delta = upstream.to_vec();
        let mut first_preact = Vec::new();
        let (w, out) = (self.in_dim(), self.out_dim());
        if self.skip {
            if let Some(g) = grads.as_deref_mut() {
                let gs = &mut g[self.params.len() - out..];
                for (up, x) in upstream.chunks_exact(out).zip(tape.inputs[0].chunks_exact(w)) {
                    for ((gi, u), xi) in gs.iter_mut().zip(up).zip(x) {
                        *gi += u * xi;
                    }
                }
            }
        }
        for l in (0..self.n_layers()).rev() {
            let (fan_in, fan_out) = (self.widths[l], self.widths[l + 1]);
            if let Some(g) = grads.as_deref_mut() {
                let o = self.offsets[l];
                let (gw, gb) = g[o..o + fan_in * fan_out + fan_out].split_at_mut(fan_in * fan_out);
                gemm(fan_in, n, fan_out, 1.0, &tape.inputs[l], true, &delta, false, 1.0, gw);
                for row in delta.chunks_exact(fan_out) {
                    for (b, d) in gb.iter_mut().zip(row) {
                        *b += d;
                    }
                }
            }
            if l == 0 {
                first_preact = delta.clone();
            }
            let mut dh = vec![0.0; n * fan_in];
            gemm(n, fan_out, fan_in, 1.0, &delta, false, self.weight(l), true, 0.0, &mut dh);
            if l > 0 {
                for (d, &z) in dh.iter_mut().zip(&tape.preacts[l - 1]) {
                    *d *= silu_grad(z);
                }
            }
            delta = dh;
        }
        if self.skip {
            let s = self.skip_coefs();
            for (dx, up) in delta.chunks_exact_mut(w).zip(upstream.chunks_exact(out)) {
                for ((d, u), si) in dx.iter_mut().zip(up).zip(s) {
                    *d += u * si;
                }
            }
        }
        Ok(InputGrads { input: delta, first_preact })
    }
}

/// Sinusoidal features of `log σ` at geometric frequencies
/// `ω_j = base_freq * growth^j`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LevelEmbedding {
    pub n_freq: usize,
    pub base_freq: f64,
    pub growth: f64,
}

impl Default for LevelEmbedding {
    fn default() -> Self {
        Self { n_freq: 8, base_freq: 0.1, growth: 2.0 }
    }
}

impl LevelEmbedding {
    pub fn width(&self) -> usize {
        2 * self.n_freq
    }

    pub fn embed_into(&self, sigma: f64, out: &mut [f64]) {
        let ls = libm::log(sigma);
        let mut w = self.base_freq;
        for j in 0..self.n_freq {
            out[2 * j] = libm::sin(w * ls);
            out[2 * j + 1] = libm::cos(w * ls);
            w *= self.growth;
        }
    }
}

pub fn level_embed(sigma: f64, e: &LevelEmbedding) -> Vec<f64> {
    let mut out = vec![0.0; e.width()];
    e.embed_into(sigma, &mut out);
    out
}

/// The pretrained backbone `D_θ(x_t; σ) = x_t + σ F_θ(c_in(σ) x_t, emb(σ))`.
///
/// `F_θ` is an MLP plus a zero-initialised diagonal shortcut on the scaled
/// state, so the untrained network is exactly the identity.
///
/// An optional extra embedding (the bridge signal) is added to the first
/// hidden pre-activation.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserNet {
    dim: usize,
    embed: LevelEmbedding,
    mlp: Mlp,
    pub frozen: bool,
}

#[derive(Debug, Clone, Default)]
pub struct DenoiserTape {
    mlp: Tape,
    sigmas: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct DenoiserGrads {
    /// `n x d` gradient with respect to the noisy input.
    pub input: Vec<f64>,
    /// `n x embed_width` gradient with respect to the extra embedding.
    pub extra: Vec<f64>,
}

impl DenoiserNet {
    pub fn new<R: Rng + ?Sized>(
        dim: usize,
        embed: LevelEmbedding,
        hidden: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        if hidden.is_empty() {
            return Err(Error::InvalidParameter("denoiser needs at least one hidden layer".into()));
        }
        let mut widths = vec![dim + embed.width()];
        widths.extend_from_slice(hidden);
        widths.push(dim);
        let mlp = Mlp::new(&widths, true, rng)?.with_diag_skip()?;
        Ok(Self { dim, embed, mlp, frozen: false })
    }

    pub fn from_parts(dim: usize, embed: LevelEmbedding, mlp: Mlp) -> Result<Self> {
        if mlp.in_dim() != dim + embed.width() || mlp.out_dim() != dim {
            return Err(Error::DimensionMismatch { expected: dim + embed.width(), got: mlp.in_dim() });
        }
        Ok(Self { dim, embed, mlp, frozen: false })
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn embedding(&self) -> LevelEmbedding {
        self.embed
    }

    pub fn params(&self) -> &[f64] {
        self.mlp.params()
    }

    pub fn n_params(&self) -> usize {
        self.mlp.n_params()
    }

    /// Width of the first hidden layer, i.e. of the extra embedding.
    pub fn embed_width(&self) -> usize {
        self.mlp.first_width()
    }

    fn build_input(&self, xs: &[f64], sigmas: &[f64]) -> Result<Vec<f64>> {
        let n = sigmas.len();
        if xs.len() != n * self.dim {
            return Err(Error::DimensionMismatch { expected: n * self.dim, got: xs.len() });
        }
        let w = self.mlp.in_dim();
        let mut input = vec![0.0; n * w];
        for ((row, x), &s) in input.chunks_exact_mut(w).zip(xs.chunks_exact(self.dim)).zip(sigmas) {
            if !(s > 0.0) {
                return Err(Error::InvalidSigma(s));
            }
            let c = input_scale(s);
            for (r, xi) in row[..self.dim].iter_mut().zip(x) {
                *r = c * xi;
            }
            self.embed.embed_into(s, &mut row[self.dim..]);
        }
        Ok(input)
    }

    fn finish(&self, xs: &[f64], sigmas: &[f64], raw: Vec<f64>) -> Vec<f64> {
        let mut out = raw;
        for ((o, x), &s) in out.chunks_exact_mut(self.dim).zip(xs.chunks_exact(self.dim)).zip(sigmas) {
            for (oi, xi) in o.iter_mut().zip(x) {
                *oi = xi + s * *oi;
            }
        }
        out
    }

    pub fn denoise_batch_with(&self, xs: &[f64], sigmas: &[f64], extra: Option<&[f64]>) -> Result<Vec<f64>> {
        let input = self.build_input(xs, sigmas)?;
        let raw = self.mlp.forward(&input, sigmas.len(), extra)?;
        Ok(self.finish(xs, sigmas, raw))
    }

    pub fn denoise_with(&self, x_t: &[f64], sigma: f64, extra: Option<&[f64]>) -> Result<Vec<f64>> {
        if let Some(e) = extra {
            if e.len() != self.embed_width() {
                return Err(Error::DimensionMismatch { expected: self.embed_width(), got: e.len() });
            }
        }
        self.denoise_batch_with(x_t, &[sigma], extra)
    }

    pub fn forward_tape(
        &self,
        xs: &[f64],
        sigmas: &[f64],
        extra: Option<&[f64]>,
        tape: &mut DenoiserTape,
    ) -> Result<Vec<f64>> {
        let input = self.build_input(xs, sigmas)?;
        let raw = self.mlp.forward_tape(&input, sigmas.len(), extra, &mut tape.mlp)?;
        tape.sigmas.clear();
        tape.sigmas.extend_from_slice(sigmas);
        Ok(self.finish(xs, sigmas, raw))
    }

    /// Gradients of `Σ upstream · D` with respect to the inputs and the extra
    /// embedding; parameter gradients are accumulated into `param_grads`.
    pub fn backward(
        &self,
        tape: &DenoiserTape,
        upstream: &[f64],
        param_grads: Option<&mut [f64]>,
    ) -> Result<DenoiserGrads> {
        if tape.mlp.is_empty() {
            return Err(Error::NoForwardPass);
        }
        let d = self.dim;
        let mut raw_up = upstream.to_vec();
        for (row, &s) in raw_up.chunks_exact_mut(d).zip(&tape.sigmas) {
            for v in row.iter_mut() {
                *v *= s;
            }
        }
        let g = self.mlp.backward(&tape.mlp, &raw_up, param_grads)?;
        let w = self.mlp.in_dim();
        let mut input = upstream.to_vec();
        for ((row, gin), &s) in input.chunks_exact_mut(d).zip(g.input.chunks_exact(w)).zip(&tape.sigmas) {
            let c = input_scale(s);
            for (r, gi) in row.iter_mut().zip(&gin[..d]) {
                *r += c * gi;
            }
        }
        Ok(DenoiserGrads { input, extra: g.first_preact })
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        self.mlp.params_mut()
    }

    /// Applies an optimizer update unless the network is frozen.
    pub fn apply_update(&mut self, opt: &mut AdamState, grads: &[f64]) -> Result<()> {
        if self.frozen {
            return Ok(());
        }
        opt.step(self.mlp.params_mut(), grads)
    }
}

impl Denoiser for DenoiserNet {
    fn dim(&self) -> usize {
        self.dim
    }

    fn denoise(&self, x_t: &[f64], sigma: f64) -> Result<Vec<f64>> {
        self.denoise_with(x_t, sigma, None)
    }

    fn denoise_batch(&self, xs: &[f64], sigmas: &[f64]) -> Result<Vec<f64>> {
        self.denoise_batch_with(xs, sigmas, None)
    }
}

/// The trainable bridge embedding `E_φ`: maps a constraint gradient to an
/// additive first-layer embedding. The output layer starts at zero.
#[derive(Debug, Clone, PartialEq)]
pub struct BridgeNet {
    mlp: Mlp,
}

impl BridgeNet {
    pub fn new<R: Rng + ?Sized>(dim: usize, hidden: &[usize], embed_width: usize, rng: &mut R) -> Result<Self> {
        let mut widths = vec![dim];
        widths.extend_from_slice(hidden);
        widths.push(embed_width);
        Ok(Self { mlp: Mlp::new(&widths, true, rng)? })
    }

    pub fn from_mlp(mlp: Mlp) -> Self {
        Self { mlp }
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn in_dim(&self) -> usize {
        self.mlp.in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.mlp.out_dim()
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

    pub fn forward(&self, gs: &[f64], n: usize) -> Result<Vec<f64>> {
        self.mlp.forward(gs, n, None)
    }

    pub fn forward_tape(&self, gs: &[f64], n: usize, tape: &mut Tape) -> Result<Vec<f64>> {
        self.mlp.forward_tape(gs, n, None, tape)
    }

    pub fn backward(&self, tape: &Tape, upstream: &[f64], param_grads: &mut [f64]) -> Result<()> {
        self.mlp.backward(tape, upstream, Some(param_grads)).map(|_| ())
    }
}

/// Bias-corrected Adam.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(n_params: usize, lr: f64) -> Self {
        Self { step: 0, m: vec![0.0; n_params], v: vec![0.0; n_params], lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        adam_step(self, params, grads)
    }
}

pub fn adam_step(state: &mut AdamState, params: &mut [f64], grads: &[f64]) -> Result<()> {
    if params.len() != state.m.len() {
        return Err(Error::DimensionMismatch { expected: state.m.len(), got: params.len() });
    }
    if grads.len() != params.len() {
        return Err(Error::DimensionMismatch { expected: params.len(), got: grads.len() });
    }
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - libm::pow(state.beta1, t);
    let bc2 = 1.0 - libm::pow(state.beta2, t);
    let (b1, b2) = (state.beta1, state.beta2);
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(state.m.iter_mut()).zip(state.v.iter_mut()) {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let mhat = *m / bc1;
        let vhat = *v / bc2;
        *p -= state.lr * mhat / (libm::sqrt(vhat) + state.eps);
    }
    Ok(())
}

/// Rescales `grads` in place so its Euclidean norm is at most `max_norm`.
pub fn clip_grad_norm(grads: &mut [f64], max_norm: f64) -> f64 {
    let norm = crate::linalg::norm(grads);
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            *g *= s;
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn embedding_examples() {
        let e = LevelEmbedding { n_freq: 1, base_freq: 1.0, growth: 2.0 };
        assert_eq!(level_embed(1.0, &e), vec![0.0, 1.0]);
        let v = level_embed(core::f64::consts::E, &e);
        assert!((v[0] - 0.841_470_984_8).abs() < 1e-9 && (v[1] - 0.540_302_305_9).abs() < 1e-9);
        let e8 = LevelEmbedding::default();
        for s in [3e-5, 0.3, 80.0] {
            let n2: f64 = level_embed(s, &e8).iter().map(|x| x * x).sum();
            assert!((n2 - 8.0).abs() < 1e-12);
        }
    }

    #[test]
    fn untrained_denoiser_is_identity() {
        let mut r = rng::seeded(0);
        let net = DenoiserNet::new(3, LevelEmbedding::default(), &[16, 16], &mut r).unwrap();
        for s in [3e-5, 1.0, 80.0] {
            let x = [0.3, -1.2, 5.0];
            assert_eq!(net.denoise(&x, s).unwrap(), x.to_vec());
        }
    }

    #[test]
    fn zero_extra_is_bitwise_noop() {
        let mut r = rng::seeded(1);
        let mut net = DenoiserNet::new(3, LevelEmbedding::default(), &[16, 16], &mut r).unwrap();
        for p in net.params_mut().iter_mut() {
            *p += 0.01 * rng::normal(&mut r);
        }
        let x = [0.3, -1.2, 0.5];
        let a = net.denoise(&x, 0.7).unwrap();
        let b = net.denoise_with(&x, 0.7, Some(&[0.0; 16])).unwrap();
        assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn dimension_errors() {
        let mut r = rng::seeded(1);
        let net = DenoiserNet::new(3, LevelEmbedding::default(), &[8], &mut r).unwrap();
        assert!(matches!(net.denoise(&[1.0, 2.0], 1.0), Err(Error::DimensionMismatch { .. })));
        assert!(matches!(net.denoise_with(&[1.0, 2.0, 3.0], 1.0, Some(&[0.0; 3])), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn backward_without_forward_fails() {
        let mut r = rng::seeded(2);
        let mlp = Mlp::new(&[2, 4, 1], false, &mut r).unwrap();
        assert!(matches!(mlp.backward(&Tape::new(), &[1.0], None), Err(Error::NoForwardPass)));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut r = rng::seeded(3);
        let mlp = Mlp::new(&[3, 5, 5, 2], false, &mut r).unwrap();
        let mut tape = Tape::new();
        mlp.forward_tape(&[0.1, 0.2, 0.3, -0.4, 0.5, 0.6], 2, None, &mut tape).unwrap();
        let mut g = vec![0.0; mlp.n_params()];
        let ig = mlp.backward(&tape, &[0.0; 4], Some(&mut g)).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
        assert!(ig.input.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn adam_first_step() {
        let mut st = AdamState::new(1, 0.1);
        let mut p = [0.0];
        st.step(&mut p, &[1.0]).unwrap();
        assert!((p[0] + 0.1).abs() < 1e-8);
        let mut st = AdamState::new(3, 0.1);
        let mut p = [1.0, 2.0, 3.0];
        st.step(&mut p, &[0.0; 3]).unwrap();
        assert_eq!(p, [1.0, 2.0, 3.0]);
        assert!(st.step(&mut p, &[0.0; 2]).is_err());
    }

    #[test]
    fn frozen_net_ignores_updates() {
        let mut r = rng::seeded(4);
        let mut net = DenoiserNet::new(2, LevelEmbedding::default(), &[8], &mut r).unwrap();
        net.frozen = true;
        let before = net.params().to_vec();
        let mut opt = AdamState::new(net.n_params(), 0.1);
        let grads = vec![1.0; net.n_params()];
        for _ in 0..5 {
            net.apply_update(&mut opt, &grads).unwrap();
        }
        assert_eq!(before, net.params());
    }
}
