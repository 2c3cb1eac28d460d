//! The asymmetric pair of networks: a memoryless recognition network
//! `q(z|x)` (Q-net) and a generative network `p(x|z)` (P-net) whose
//! deterministic layers carry external memories, plus the densities and
//! bounds built on them.
//!
//! Layer `i = 1..I` is numbered from the data upwards in both networks, so
//! the Q-net feature `ĥ⁽ⁱ⁾` and the P-net activation `h⁽ⁱ⁾` share a width and
//! pair up in the local reconstruction penalty.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Distribution, Graph, ParamId, ParamStore, Real, RngStream, Tensor, Var};
use crate::error::{Error, Result};
use crate::layers::{
    activate, compose, dense_block, Activation, AttentionKind, BatchNorm, CompositionKind, Dense, MemoryBlock,
    MemoryLayer, Mode,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LikelihoodKind {
    Bernoulli,
    Gaussian,
}

fn default_true() -> bool {
    true
}

fn default_attention() -> AttentionKind {
    AttentionKind::Sigmoid
}

fn default_composition() -> CompositionKind {
    CompositionKind::ElementwiseMlp
}

/// Network architecture.
///
/// `widths[0]` is the layer nearest the data. `slots[i]` is the number of
/// memory slots of generative layer `i + 1`; zero means a plain layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub input_dim: usize,
    pub widths: Vec<usize>,
    pub latent_dim: usize,
    #[serde(default)]
    pub slots: Vec<usize>,
    pub likelihood: LikelihoodKind,
    #[serde(default = "default_attention")]
    pub attention: AttentionKind,
    #[serde(default = "default_composition")]
    pub composition: CompositionKind,
    #[serde(default = "default_true")]
    pub batchnorm: bool,
    /// Weights of the local reconstruction penalty, one per layer.
    #[serde(default)]
    pub lambda: Vec<f64>,
    /// Treat the Q-net features as constant targets in the penalty.
    #[serde(default = "default_true")]
    pub stop_gradient_targets: bool,
}

impl ArchConfig {
    fn two_layer(input_dim: usize, width: usize, latent_dim: usize, slots: [usize; 2], lambda: f64) -> Self {
        Self {
            input_dim,
            widths: vec![width, width],
            latent_dim,
            slots: slots.to_vec(),
            likelihood: LikelihoodKind::Bernoulli,
            attention: AttentionKind::Sigmoid,
            composition: CompositionKind::ElementwiseMlp,
            batchnorm: true,
            lambda: vec![lambda; 2],
            stop_gradient_targets: true,
        }
    }

    /// MNIST 500-500-100 with 70 + 30 memory slots.
    pub fn mnist_mem() -> Self {
        Self::two_layer(784, 500, 100, [70, 30], 0.1)
    }

    /// MNIST 500-500-100 without memory.
    pub fn mnist_vae() -> Self {
        Self::two_layer(784, 500, 100, [0, 0], 0.0)
    }

    /// The larger memoryless baseline, 530-530-100.
    pub fn mnist_vae_530() -> Self {
        Self::two_layer(784, 530, 100, [0, 0], 0.0)
    }

    /// Softmax attention with summation composition; slots decode to images.
    pub fn mnist_vis() -> Self {
        Self { attention: AttentionKind::Softmax, composition: CompositionKind::Summation, ..Self::mnist_mem() }
    }

    /// OCR-letters (16×8) 200-200-50 with 70 + 30 slots.
    pub fn ocr_mem() -> Self {
        Self::two_layer(128, 200, 50, [70, 30], 0.1)
    }

    pub fn ocr_vae() -> Self {
        Self::two_layer(128, 200, 50, [0, 0], 0.0)
    }

    /// Frey faces (28×20): one 200-unit layer, 10 latents, 20 slots, Gaussian pixels.
    pub fn frey_mem() -> Self {
        Self {
            input_dim: 560,
            widths: vec![200],
            latent_dim: 10,
            slots: vec![20],
            likelihood: LikelihoodKind::Gaussian,
            attention: AttentionKind::Sigmoid,
            composition: CompositionKind::ElementwiseMlp,
            batchnorm: true,
            lambda: vec![0.1],
            stop_gradient_targets: true,
        }
    }

    pub fn num_layers(&self) -> usize {
        self.widths.len()
    }

    pub fn slots_for(&self, layer: usize) -> usize {
        self.slots.get(layer).copied().unwrap_or(0)
    }

    pub fn lambda_for(&self, layer: usize) -> f64 {
        self.lambda.get(layer).copied().unwrap_or(0.0)
    }

    pub fn has_memory(&self) -> bool {
        self.slots.iter().any(|&s| s > 0)
    }

    /// The same architecture with every memory removed.
    pub fn without_memory(&self) -> Self {
        Self { slots: vec![0; self.widths.len()], ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::config("arch.input_dim", "must be positive"));
        }
        if self.latent_dim == 0 {
            return Err(Error::config("arch.latent_dim", "must be positive"));
        }
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::config("arch.widths", "needs at least one positive width"));
        }
        if !self.slots.is_empty() && self.slots.len() != self.widths.len() {
            return Err(Error::config(
                "arch.slots",
                format!("has {} entries for {} layers", self.slots.len(), self.widths.len()),
            ));
        }
        if !self.lambda.is_empty() && self.lambda.len() != self.widths.len() {
            return Err(Error::config(
                "arch.lambda",
                format!("has {} entries for {} layers", self.lambda.len(), self.widths.len()),
            ));
        }
        if let Some(bad) = self.lambda.iter().find(|l| !(l.is_finite() && **l >= 0.0)) {
            return Err(Error::config("arch.lambda", format!("weight {bad} must be finite and non-negative")));
        }
        Ok(())
    }
}

/// Q-net: plain dense layers, then linear heads for the mean and
/// log-variance of a diagonal Gaussian.
#[derive(Debug, Clone, PartialEq)]
pub struct RecognitionNet {
    pub layers: Vec<(Dense, Option<BatchNorm>)>,
    pub mean_head: Dense,
    pub logvar_head: Dense,
}

/// P-net: memory layers (index 0 nearest the data) and the output head.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerativeNet {
    pub layers: Vec<MemoryLayer>,
    pub output: Dense,
    /// Free per-pixel log-variance of the Gaussian likelihood.
    pub output_logvar: Option<ParamId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub arch: ArchConfig,
    pub recognition: RecognitionNet,
    pub generative: GenerativeNet,
}

/// A model layout together with its parameter values.
#[derive(Debug, Clone, PartialEq)]
pub struct Nets<T> {
    pub model: Model,
    pub params: ParamStore<T>,
}

impl<T: Real> Nets<T> {
    pub fn arch(&self) -> &ArchConfig {
        &self.model.arch
    }

    pub fn cast<U: Real>(&self) -> Nets<U> {
        Nets { model: self.model.clone(), params: self.params.cast() }
    }
}

impl Model {
    /// Allocates every parameter in `store` in its neutral state (zero
    /// weights, unit batch-norm scale, identity composition).
    pub fn build<T: Real>(arch: &ArchConfig, store: &mut ParamStore<T>) -> Result<Self> {
        arch.validate()?;
        let mut q_layers = Vec::new();
        let mut fan_in = arch.input_dim;
        for (i, &w) in arch.widths.iter().enumerate() {
            let name = format!("q.layer{}", i + 1);
            let dense = Dense::new(store, &format!("{name}.dense"), fan_in, w)?;
            let norm = if arch.batchnorm { Some(BatchNorm::new(store, &format!("{name}.bn"), w)?) } else { None };
            q_layers.push((dense, norm));
            fan_in = w;
        }
        let mean_head = Dense::new(store, "q.mean", fan_in, arch.latent_dim)?;
        let logvar_head = Dense::new(store, "q.logvar", fan_in, arch.latent_dim)?;

        let mut p_layers = Vec::new();
        for (i, &w) in arch.widths.iter().enumerate() {
            let name = format!("p.layer{}", i + 1);
            let input = arch.widths.get(i + 1).copied().unwrap_or(arch.latent_dim);
            let dense = Dense::new(store, &format!("{name}.dense"), input, w)?;
            let norm = if arch.batchnorm { Some(BatchNorm::new(store, &format!("{name}.bn"), w)?) } else { None };
            let memory = match arch.slots_for(i) {
                0 => None,
                s => Some(MemoryBlock::new(store, &format!("{name}.mem"), w, s, arch.attention, arch.composition)?),
            };
            p_layers.push(MemoryLayer { dense, norm, memory });
        }
        let output = Dense::new(store, "p.out", arch.widths[0], arch.input_dim)?;
        let output_logvar = match arch.likelihood {
            LikelihoodKind::Gaussian => Some(store.insert("p.out.logvar", Tensor::zeros(&[arch.input_dim]), true)?),
            LikelihoodKind::Bernoulli => None,
        };
        Ok(Self {
            arch: arch.clone(),
            recognition: RecognitionNet { layers: q_layers, mean_head, logvar_head },
            generative: GenerativeNet { layers: p_layers, output, output_logvar },
        })
    }
}

/// Parameter names owned by the Q-net and the P-net.
pub fn network_param_names<T: Real>(store: &ParamStore<T>) -> (Vec<String>, Vec<String>) {
    let names: Vec<String> = store.ids().map(|id| store.name(id).to_string()).collect();
    let (q, p): (Vec<_>, Vec<_>) = names.into_iter().partition(|n| n.starts_with("q."));
    (q, p)
}

#[derive(Debug, Clone)]
pub struct EncodeResult {
    pub mu: Var,
    pub logvar: Var,
    /// `ĥ⁽¹⁾, ĥ⁽²⁾, …` after batch normalization and ReLU.
    pub hidden: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct DecodeResult {
    pub logits: Var,
    /// Bernoulli probabilities or Gaussian means, in `(0, 1)`.
    pub mean: Var,
    pub logvar: Option<Var>,
    /// Layer outputs `h⁽ⁱ⁾`, index 0 nearest the data.
    pub hidden: Vec<Var>,
    /// Generative information `h_g⁽ⁱ⁾`, same indexing; the batch-normalized
    /// features matched by the reconstruction penalty.
    pub generative_info: Vec<Var>,
    /// Attention `h_a⁽ⁱ⁾`; `None` for plain or disabled layers.
    pub attention: Vec<Option<Var>>,
}

/// Reparameterized latent draws for `k` samples per datum.
#[derive(Debug, Clone)]
pub struct LatentSample {
    /// `[batch·k × latent]`; datum `b`, sample `j` is row `b·k + j`.
    pub z: Var,
    /// Posterior mean and log-variance repeated to the rows of `z`.
    pub mu: Var,
    pub logvar: Var,
    pub k: usize,
}

pub fn encode<T: Real>(g: &mut Graph<'_, T>, nets: &Model, x: Var, mode: Mode) -> Result<EncodeResult> {
    let q = &nets.recognition;
    if g.shape(x).len() != 2 || g.shape(x)[1] != nets.arch.input_dim {
        return Err(Error::shape("encode", format!("expected [batch × {}], got {:?}", nets.arch.input_dim, g.shape(x))));
    }
    let mut h = x;
    let mut hidden = Vec::with_capacity(q.layers.len());
    for (dense, norm) in &q.layers {
        h = dense_block(g, h, dense, norm.as_ref(), Activation::Relu, mode)?;
        hidden.push(h);
    }
    let mu = q.mean_head.linear(g, h)?;
    let logvar = q.logvar_head.linear(g, h)?;
    Ok(EncodeResult { mu, logvar, hidden })
}

/// `z = μ + exp(logvar / 2) ⊙ ε` with `ε ~ N(0, I)` drawn from `rng`.
pub fn sample_latent<T: Real>(g: &mut Graph<'_, T>, enc: &EncodeResult, rng: &mut RngStream, k: usize) -> Result<LatentSample> {
    if k == 0 {
        return Err(Error::invalid("sample count k must be at least 1"));
    }
    let (batch, latent) = (g.shape(enc.mu)[0], g.shape(enc.mu)[1]);
    let eps: Tensor<T> = rng.draw(Distribution::Gaussian, &[batch * k, latent])?;
    sample_latent_with(g, enc, eps, k)
}

/// Reparameterization with caller-supplied noise `[batch·k × latent]`.
pub fn sample_latent_with<T: Real>(g: &mut Graph<'_, T>, enc: &EncodeResult, eps: Tensor<T>, k: usize) -> Result<LatentSample> {
    let (mu, logvar) = if k == 1 { (enc.mu, enc.logvar) } else { (g.repeat_rows(enc.mu, k)?, g.repeat_rows(enc.logvar, k)?) };
    if eps.shape() != g.shape(mu) {
        return Err(Error::shape("sample_latent", format!("noise {:?} vs mean {:?}", eps.shape(), g.shape(mu))));
    }
    let half = g.scale(logvar, 0.5)?;
    let std = g.exp(half)?;
    let eps = g.constant(eps);
    let noise = g.mul(std, eps)?;
    let z = g.add(mu, noise)?;
    Ok(LatentSample { z, mu, logvar, k })
}

/// Top-down pass from `z`. `disabled` lists 1-based layer indices whose
/// memory is switched off.
pub fn decode<T: Real>(g: &mut Graph<'_, T>, nets: &Model, z: Var, mode: Mode, disabled: &[usize]) -> Result<DecodeResult> {
    if g.shape(z).len() != 2 || g.shape(z)[1] != nets.arch.latent_dim {
        return Err(Error::shape("decode", format!("expected [rows × {}], got {:?}", nets.arch.latent_dim, g.shape(z))));
    }
    decode_from(g, nets, nets.arch.num_layers(), z, mode, disabled, None)
}

/// Runs generative layers `top..=1` starting from input `h_in`, then the
/// output head. With `substitute = Some((h_g, h_m))`, layer `top` skips its
/// own computation and composes the given values instead.
pub(crate) fn decode_from<T: Real>(
    g: &mut Graph<'_, T>,
    nets: &Model,
    top: usize,
    h_in: Var,
    mode: Mode,
    disabled: &[usize],
    substitute: Option<(Var, Var)>,
) -> Result<DecodeResult> {
    let p = &nets.generative;
    let n = p.layers.len();
    let mut hidden = vec![None; n];
    let mut info = vec![None; n];
    let mut attention = vec![None; n];
    let mut h = h_in;
    for idx in (0..top).rev() {
        let layer = &p.layers[idx];
        if idx + 1 == top {
            if let Some((h_g, h_m)) = substitute {
                let block = layer.memory.as_ref().ok_or_else(|| Error::invalid(format!("layer {top} has no memory")))?;
                h = compose(g, h_g, h_m, block)?;
                hidden[idx] = Some(h);
                info[idx] = Some(h_g);
                continue;
            }
        }
        let out = layer.forward(g, h, mode, disabled.contains(&(idx + 1)))?;
        hidden[idx] = Some(out.h_out);
        info[idx] = Some(out.h_g);
        attention[idx] = out.h_a;
        h = out.h_out;
    }
    let logits = p.output.linear(g, h)?;
    let mean = activate(g, logits, Activation::Sigmoid)?;
    let logvar = p.output_logvar.map(|id| g.param(id));
    let keep = |v: Vec<Option<Var>>| v.into_iter().flatten().collect::<Vec<_>>();
    Ok(DecodeResult { logits, mean, logvar, hidden: keep(hidden), generative_info: keep(info), attention })
}

fn ln_2pi() -> f64 {
    (2.0 * PI).ln()
}

/// Standard-normal log-density summed over latent dimensions, one value per row.
pub fn log_p_z<T: Real>(g: &mut Graph<'_, T>, z: Var) -> Result<Var> {
    let sq = g.square(z)?;
    let t = g.offset(sq, ln_2pi())?;
    let t = g.scale(t, -0.5)?;
    g.sum_axis(t, 1)
}

/// Diagonal Gaussian log-density `Σ −½(ln 2π + logvar + (z − μ)² e^{−logvar})`
/// per row. `logvar` may be a full matrix or one row broadcast over rows.
pub fn gaussian_log_density<T: Real>(g: &mut Graph<'_, T>, x: Var, mean: Var, logvar: Var) -> Result<Var> {
    let diff = g.sub(x, mean)?;
    let sq = g.square(diff)?;
    let neg = g.scale(logvar, -1.0)?;
    let inv_var = g.exp(neg)?;
    let scaled = g.mul(sq, inv_var)?;
    let base = g.offset(logvar, ln_2pi())?;
    let t = if g.shape(base) == g.shape(scaled) { g.add(base, scaled)? } else { g.add(scaled, base)? };
    let t = g.scale(t, -0.5)?;
    g.sum_axis(t, 1)
}

pub fn log_q_z<T: Real>(g: &mut Graph<'_, T>, sample: &LatentSample) -> Result<Var> {
    gaussian_log_density(g, sample.z, sample.mu, sample.logvar)
}

/// Data log-likelihood per row. `x` must have one row per row of the decode.
pub fn log_p_x_given_z<T: Real>(g: &mut Graph<'_, T>, x: &Tensor<T>, dec: &DecodeResult, kind: LikelihoodKind) -> Result<Var> {
    match kind {
        LikelihoodKind::Bernoulli => {
            let lp = g.bernoulli_log_prob(dec.logits, x)?;
            g.sum_axis(lp, 1)
        }
        LikelihoodKind::Gaussian => {
            let logvar = dec.logvar.ok_or_else(|| Error::invalid("gaussian likelihood needs a log-variance"))?;
            let xv = g.constant(x.clone());
            gaussian_log_density(g, xv, dec.mean, logvar)
        }
    }
}

/// Repeats each row of `x` `k` times, matching the row order of latent samples.
pub fn repeat_data<T: Real>(x: &Tensor<T>, k: usize) -> Result<Tensor<T>> {
    if k == 1 {
        return Ok(x.clone());
    }
    let c = x.cols();
    let mut data = Vec::with_capacity(x.numel() * k);
    for r in 0..x.rows() {
        for _ in 0..k {
            data.extend_from_slice(x.row(r));
        }
    }
    Tensor::new(&[x.rows() * k, c], data)
}

/// Everything computed by one pass of the objective on a minibatch.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub enc: EncodeResult,
    pub sample: LatentSample,
    pub dec: DecodeResult,
    /// `log p(x, z) − log q(z|x)`, shape `[batch × k]`.
    pub log_weights: Var,
    /// Importance-weighted bound per datum, shape `[batch]`.
    pub bound: Var,
}

/// Encodes `x`, draws `k` latents per datum from `q`, decodes them and forms
/// the importance-weighted bound `logsumexp_k(log w) − ln k`.
pub fn forward_pass<T: Real>(
    g: &mut Graph<'_, T>,
    nets: &Model,
    x: &Tensor<T>,
    rng: &mut RngStream,
    k: usize,
    mode: Mode,
) -> Result<ForwardPass> {
    let xv = g.constant(x.clone());
    let enc = encode(g, nets, xv, mode)?;
    let sample = sample_latent(g, &enc, rng, k)?;
    forward_from_sample(g, nets, x, enc, sample, mode)
}

pub fn forward_from_sample<T: Real>(
    g: &mut Graph<'_, T>,
    nets: &Model,
    x: &Tensor<T>,
    enc: EncodeResult,
    sample: LatentSample,
    mode: Mode,
) -> Result<ForwardPass> {
    let k = sample.k;
    let batch = x.rows();
    let dec = decode(g, nets, sample.z, mode, &[])?;
    let xr = repeat_data(x, k)?;
    let lpx = log_p_x_given_z(g, &xr, &dec, nets.arch.likelihood)?;
    let lpz = log_p_z(g, sample.z)?;
    let lqz = log_q_z(g, &sample)?;
    let joint = g.add(lpx, lpz)?;
    let logw = g.sub(joint, lqz)?;
    let log_weights = g.reshape(logw, &[batch, k])?;
    let lse = g.logsumexp(log_weights, 1)?;
    let bound = g.offset(lse, -(k as f64).ln())?;
    Ok(ForwardPass { enc, sample, dec, log_weights, bound })
}

/// Importance-weighted bound per datum; `k = 1` is the variational bound.
pub fn iwae_bound<T: Real>(nets: &Nets<T>, x: &Tensor<T>, rng: &mut RngStream, k: usize, mode: Mode) -> Result<Tensor<T>> {
    let mut g = Graph::new(&nets.params);
    let pass = forward_pass(&mut g, &nets.model, x, rng, k, mode)?;
    Ok(g.value(pass.bound).clone())
}

/// Single-sample variational bound estimate `log p(x|z) + log p(z) − log q(z|x)`.
pub fn elbo<T: Real>(nets: &Nets<T>, x: &Tensor<T>, rng: &mut RngStream, mode: Mode) -> Result<Tensor<T>> {
    let mut g = Graph::new(&nets.params);
    let xv = g.constant(x.clone());
    let enc = encode(&mut g, &nets.model, xv, mode)?;
    let sample = sample_latent(&mut g, &enc, rng, 1)?;
    let dec = decode(&mut g, &nets.model, sample.z, mode, &[])?;
    let lpx = log_p_x_given_z(&mut g, x, &dec, nets.arch().likelihood)?;
    let lpz = log_p_z(&mut g, sample.z)?;
    let lqz = log_q_z(&mut g, &sample)?;
    let joint = g.add(lpx, lpz)?;
    let e = g.sub(joint, lqz)?;
    Ok(g.value(e).clone())
}

/// Mean over rows of `Σ_i λ⁽ⁱ⁾ ‖h⁽ⁱ⁾ − ĥ⁽ⁱ⁾‖²`.
///
/// `dec_hidden[i]` has `k` rows per row of `enc_hidden[i]`. With
/// `stop_gradient` the Q-net features act as constant targets.
pub fn recon_penalty<T: Real>(
    g: &mut Graph<'_, T>,
    dec_hidden: &[Var],
    enc_hidden: &[Var],
    lambda: &[f64],
    stop_gradient: bool,
) -> Result<Var> {
    if dec_hidden.len() != enc_hidden.len() || lambda.len() != dec_hidden.len() {
        return Err(Error::shape(
            "recon_penalty",
            format!("{} generative, {} recognition activations, {} weights", dec_hidden.len(), enc_hidden.len(), lambda.len()),
        ));
    }
    let mut total: Option<Var> = None;
    for ((&h, &h_hat), &lam) in dec_hidden.iter().zip(enc_hidden).zip(lambda) {
        let (rows, width) = (g.shape(h)[0], g.shape(h)[1]);
        let (target_rows, target_width) = (g.shape(h_hat)[0], g.shape(h_hat)[1]);
        if width != target_width || rows % target_rows != 0 {
            return Err(Error::shape("recon_penalty", format!("{:?} vs {:?}", g.shape(h), g.shape(h_hat))));
        }
        let target = if stop_gradient { g.detach(h_hat) } else { h_hat };
        let target = if rows == target_rows { target } else { g.repeat_rows(target, rows / target_rows)? };
        let diff = g.sub(h, target)?;
        let sq = g.square(diff)?;
        let s = g.sum_all(sq)?;
        let term = g.scale(s, lam / rows as f64)?;
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    match total {
        Some(t) => Ok(t),
        None => Ok(g.constant(Tensor::scalar(T::zero()))),
    }
}

#[derive(Debug, Clone)]
pub struct Objective {
    pub loss: Var,
    pub pass: ForwardPass,
    /// Minibatch mean of the bound.
    pub bound_mean: f64,
    pub penalty: f64,
}

/// Loss to minimize: `mean(−bound) + Σ_i λ⁽ⁱ⁾ ‖h_g⁽ⁱ⁾ − ĥ⁽ⁱ⁾‖²` (penalty averaged
/// over data and samples). The decoder runs on `z` drawn from `q`.
pub fn training_objective<T: Real>(
    g: &mut Graph<'_, T>,
    nets: &Model,
    x: &Tensor<T>,
    rng: &mut RngStream,
    k: usize,
    mode: Mode,
) -> Result<Objective> {
    let pass = forward_pass(g, nets, x, rng, k, mode)?;
    objective_from_pass(g, nets, pass)
}

pub fn objective_from_pass<T: Real>(g: &mut Graph<'_, T>, nets: &Model, pass: ForwardPass) -> Result<Objective> {
    let arch = &nets.arch;
    let mean_bound = g.mean_all(pass.bound)?;
    let neg = g.scale(mean_bound, -1.0)?;
    let lambda: Vec<f64> = (0..arch.num_layers()).map(|i| arch.lambda_for(i)).collect();
    let (loss, penalty) = if lambda.iter().any(|&l| l > 0.0) {
        let pen = recon_penalty(g, &pass.dec.generative_info, &pass.enc.hidden, &lambda, arch.stop_gradient_targets)?;
        (g.add(neg, pen)?, g.value(pen).item().as_f64())
    } else {
        (neg, 0.0)
    };
    let bound_mean = g.value(mean_bound).item().as_f64();
    Ok(Objective { loss, pass, bound_mean, penalty })
}

/// `n` images decoded from prior draws; returns likelihood means in `[0, 1]`.
pub fn generate<T: Real>(nets: &Nets<T>, n: usize, rng: &mut RngStream, disabled: &[usize]) -> Result<Tensor<T>> {
    let z: Tensor<T> = rng.draw(Distribution::Gaussian, &[n, nets.arch().latent_dim])?;
    decode_mean(nets, &z, disabled)
}

/// Eval-mode decode of given latents to likelihood means.
pub fn decode_mean<T: Real>(nets: &Nets<T>, z: &Tensor<T>, disabled: &[usize]) -> Result<Tensor<T>> {
    let mut g = Graph::new(&nets.params);
    let zv = g.constant(z.clone());
    let dec = decode(&mut g, &nets.model, zv, Mode::Eval, disabled)?;
    Ok(g.value(dec.mean).clone())
}
