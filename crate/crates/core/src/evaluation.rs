//! Test-time estimates: importance-sampled log-likelihood, masked-pixel
//! imputation, a linear probe on recognition features and parameter counts.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{ops, Graph, ParamStore, Real, RngStream, Tensor};
use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::model::{
    decode, encode, forward_from_sample, sample_latent, sample_latent_with, ArchConfig, EncodeResult, LikelihoodKind, Nets,
};
use crate::training::{adam_step, AdamState};

/// Eval-mode posterior parameters for every row of `data`.
fn posterior<T: Real>(nets: &Nets<T>, data: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let mut g = Graph::new(&nets.params);
    let x = g.constant(data.clone());
    let enc = encode(&mut g, &nets.model, x, Mode::Eval)?;
    Ok((g.value(enc.mu).clone(), g.value(enc.logvar).clone()))
}

/// Log importance weights for samples `start..start + count` of one datum.
///
/// Sample `j` of datum `i` always reads the same noise, taken from stream
/// `"{label}/{i}"` at a fixed offset, so any chunking gives identical draws.
fn log_weights_chunk<T: Real>(
    nets: &Nets<T>,
    x: &Tensor<T>,
    mu: &Tensor<T>,
    logvar: &Tensor<T>,
    noise: &RngStream,
    start: usize,
    count: usize,
) -> Result<Vec<f64>> {
    let latent = nets.arch().latent_dim;
    let words = 2 * latent.div_ceil(2) as u64;
    let mut eps = Vec::with_capacity(count * latent);
    for j in start..start + count {
        let mut r = RngStream::at(noise.state().seed, noise.label(), j as u64 * words);
        eps.extend(r.gaussians(latent).into_iter().map(T::of));
    }
    let eps = Tensor::new(&[count, latent], eps)?;
    let mut g = Graph::new(&nets.params);
    let enc = EncodeResult { mu: g.constant(mu.clone()), logvar: g.constant(logvar.clone()), hidden: Vec::new() };
    let sample = sample_latent_with(&mut g, &enc, eps, count)?;
    let pass = forward_from_sample(&mut g, &nets.model, x, enc, sample, Mode::Eval)?;
    Ok(g.value(pass.log_weights).data().iter().map(|v| v.as_f64()).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoglikReport {
    pub mean: f64,
    pub per_datum: Vec<f64>,
    pub k: usize,
}

/// Mean importance-weighted estimate of `log p(x)` with `k` samples per
/// datum, evaluated `chunk` samples at a time; chunk results merge by
/// log-add-exp.
pub fn test_loglik<T: Real>(data: &Tensor<T>, nets: &Nets<T>, seed: u64, k: usize, chunk: usize) -> Result<LoglikReport> {
    if k == 0 || chunk == 0 {
        return Err(Error::invalid("k and chunk size must be positive"));
    }
    let (mu, logvar) = posterior(nets, data)?;
    let mut per_datum = Vec::with_capacity(data.rows());
    for i in 0..data.rows() {
        let x = data.select_rows(&[i])?;
        let (m, lv) = (mu.select_rows(&[i])?, logvar.select_rows(&[i])?);
        let noise = RngStream::new(seed, format!("loglik/{i}"));
        let mut acc = f64::NEG_INFINITY;
        let mut start = 0;
        while start < k {
            let count = chunk.min(k - start);
            let w = log_weights_chunk(nets, &x, &m, &lv, &noise, start, count)?;
            acc = logaddexp(acc, ops::logsumexp_f64(w.iter().copied()));
            start += count;
        }
        per_datum.push(acc - (k as f64).ln());
    }
    let mean = per_datum.iter().sum::<f64>() / per_datum.len() as f64;
    Ok(LoglikReport { mean, per_datum, k })
}

fn logaddexp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskKind {
    /// Centered `s × s` square.
    Rect(usize),
    /// Each pixel independently with probability `p`.
    Rand(f64),
    /// Left half of the columns.
    Half,
}

impl FromStr for MaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase().replace(['-', '_'], "");
        if s == "half" {
            return Ok(MaskKind::Half);
        }
        if let Some(rest) = s.strip_prefix("rect") {
            return rest.parse().map(MaskKind::Rect).map_err(|_| Error::invalid(format!("bad rectangle size in `{s}`")));
        }
        if let Some(rest) = s.strip_prefix("rand") {
            let p: f64 = rest.parse().map_err(|_| Error::invalid(format!("bad probability in `{s}`")))?;
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::invalid(format!("probability {p} outside [0, 1]")));
            }
            return Ok(MaskKind::Rand(p));
        }
        Err(Error::invalid(format!("unknown noise kind `{s}` (expected rectN, randP or half)")))
    }
}

impl fmt::Display for MaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MaskKind::Rect(s) => write!(f, "rect{s}"),
            MaskKind::Rand(p) => write!(f, "rand{p}"),
            MaskKind::Half => write!(f, "half"),
        }
    }
}

/// Missing-pixel mask in row-major order; `true` marks a missing pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    pub kind: MaskKind,
    pub missing: Vec<bool>,
}

impl Mask {
    pub fn none(len: usize) -> Self {
        Self { kind: MaskKind::Rand(0.0), missing: vec![false; len] }
    }

    pub fn count(&self) -> usize {
        self.missing.iter().filter(|&&m| m).count()
    }
}

pub fn make_mask(kind: MaskKind, height: usize, width: usize, rng: &mut RngStream) -> Result<Mask> {
    let missing = match kind {
        MaskKind::Rect(s) => {
            if s > height.min(width) {
                return Err(Error::invalid(format!("rectangle {s} exceeds the {height}×{width} image")));
            }
            let (r0, c0) = ((height - s) / 2, (width - s) / 2);
            (0..height * width)
                .map(|i| {
                    let (r, c) = (i / width, i % width);
                    (r0..r0 + s).contains(&r) && (c0..c0 + s).contains(&c)
                })
                .collect()
        }
        MaskKind::Rand(p) => (0..height * width).map(|_| rng.uniform01() < p).collect(),
        MaskKind::Half => (0..height * width).map(|i| i % width < width / 2).collect(),
    };
    Ok(Mask { kind, missing })
}

/// Imputed images and per-image masked-pixel MSE for the initial guess and
/// after every step.
#[derive(Debug, Clone)]
pub struct ImputationTrace<T> {
    pub images: Vec<Tensor<T>>,
    /// `mse[step][image]`.
    pub mse: Vec<Vec<f64>>,
}

impl<T: Real> ImputationTrace<T> {
    pub fn mean_mse(&self, step: usize) -> f64 {
        let row = &self.mse[step];
        row.iter().sum::<f64>() / row.len() as f64
    }
}

fn masked_mse<T: Real>(x: &[T], truth: &[T], mask: &[bool]) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for ((a, b), &m) in x.iter().zip(truth).zip(mask) {
        if m {
            s += (a.as_f64() - b.as_f64()).powi(2);
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Markov-chain imputation: start missing pixels uniform on `[0, 1]`, then
/// `steps` times encode, draw `z ~ q(z|x)`, decode and overwrite the missing
/// pixels with the decoded mean (or a draw from it when `sample_pixels`).
pub fn impute<T: Real>(
    x_true: &Tensor<T>,
    masks: &[Mask],
    nets: &Nets<T>,
    rng: &mut RngStream,
    steps: usize,
    sample_pixels: bool,
) -> Result<ImputationTrace<T>> {
    let (n, d) = (x_true.rows(), x_true.cols());
    if masks.len() != n || masks.iter().any(|m| m.missing.len() != d) {
        return Err(Error::shape("impute", format!("{} masks for {n} images of {d} pixels", masks.len())));
    }
    let mut current = x_true.clone();
    for (r, mask) in masks.iter().enumerate() {
        let row = &mut current.data_mut()[r * d..(r + 1) * d];
        for (v, &m) in row.iter_mut().zip(&mask.missing) {
            if m {
                *v = T::of(rng.uniform01());
            }
        }
    }
    let record = |img: &Tensor<T>| -> Vec<f64> {
        (0..n).map(|r| masked_mse(img.row(r), x_true.row(r), &masks[r].missing)).collect()
    };
    let mut trace = ImputationTrace { images: vec![current.clone()], mse: vec![record(&current)] };
    for _ in 0..steps {
        let mean = {
            let mut g = Graph::new(&nets.params);
            let xv = g.constant(current.clone());
            let enc = encode(&mut g, &nets.model, xv, Mode::Eval)?;
            let s = sample_latent(&mut g, &enc, rng, 1)?;
            let dec = decode(&mut g, &nets.model, s.z, Mode::Eval, &[])?;
            g.value(dec.mean).clone()
        };
        let fill = if sample_pixels && nets.arch().likelihood == LikelihoodKind::Bernoulli { rng.bernoulli(&mean)? } else { mean };
        for (r, mask) in masks.iter().enumerate() {
            for c in 0..d {
                if mask.missing[c] {
                    current.data_mut()[r * d + c] = fill.data()[r * d + c];
                }
            }
        }
        trace.mse.push(record(&current));
        trace.images.push(current.clone());
    }
    Ok(trace)
}

/// Top deterministic-layer recognition features (eval mode).
pub fn recognition_features<T: Real>(nets: &Nets<T>, data: &Tensor<T>) -> Result<Tensor<f64>> {
    let mut g = Graph::new(&nets.params);
    let x = g.constant(data.clone());
    let enc = encode(&mut g, &nets.model, x, Mode::Eval)?;
    let top = *enc.hidden.last().ok_or_else(|| Error::invalid("model has no hidden layers"))?;
    Ok(g.value(top).cast())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeConfig {
    pub max_iterations: usize,
    pub learning_rate: f64,
    pub l2: f64,
    /// Stop once the loss improves by less than this between iterations.
    pub tolerance: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { max_iterations: 2000, learning_rate: 0.05, l2: 1e-4, tolerance: 1e-7 }
    }
}

/// Multinomial logistic regression on standardized features, trained by
/// full-batch Adam; reports train and test accuracy.
pub fn linear_probe(
    train_features: &Tensor<f64>,
    train_labels: &[u8],
    test_features: &Tensor<f64>,
    test_labels: &[u8],
    config: ProbeConfig,
) -> Result<ProbeReport> {
    let (n, f) = (train_features.rows(), train_features.cols());
    if train_labels.len() != n || test_labels.len() != test_features.rows() || test_features.cols() != f {
        return Err(Error::shape("linear_probe", "feature and label counts disagree"));
    }
    let classes = *train_labels.iter().chain(test_labels).max().ok_or_else(|| Error::invalid("no data"))? as usize + 1;
    let mut distinct = train_labels.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(Error::invalid("linear probe needs at least two classes in the training labels"));
    }
    let mut mean = vec![0.0; f];
    let mut std = vec![0.0; f];
    for r in 0..n {
        for (m, v) in mean.iter_mut().zip(train_features.row(r)) {
            *m += v / n as f64;
        }
    }
    for r in 0..n {
        for ((s, v), m) in std.iter_mut().zip(train_features.row(r)).zip(&mean) {
            *s += (v - m).powi(2) / n as f64;
        }
    }
    let std: Vec<f64> = std.into_iter().map(|v| if v > 1e-12 { v.sqrt() } else { 1.0 }).collect();
    let standardize = |t: &Tensor<f64>| -> Result<Tensor<f64>> {
        let data = t.data().chunks(f).flat_map(|row| row.iter().zip(&mean).zip(&std).map(|((v, m), s)| (v - m) / s)).collect();
        Tensor::new(&[t.rows(), f], data)
    };
    let xtr = standardize(train_features)?;
    let xte = standardize(test_features)?;
    let one_hot = Tensor::from_fn(&[n, classes], |i| if train_labels[i / classes] as usize == i % classes { 1.0 } else { 0.0 });

    let mut store = ParamStore::<f64>::new();
    let w = store.insert("probe.weight", Tensor::zeros(&[classes, f]), true)?;
    let b = store.insert("probe.bias", Tensor::zeros(&[classes]), true)?;
    let mut adam = AdamState::new(&store);
    let mut prev = f64::INFINITY;
    let mut iterations = 0;
    for _ in 0..config.max_iterations {
        iterations += 1;
        let (grads, loss) = {
            let mut g = Graph::new(&store);
            let x = g.constant(xtr.clone());
            let (wv, bv) = (g.param(w), g.param(b));
            let z = g.matmul_nt(x, wv)?;
            let logits = g.add(z, bv)?;
            let lse = g.logsumexp(logits, 1)?;
            let y = g.constant(one_hot.clone());
            let picked = g.mul(logits, y)?;
            let picked = g.sum_axis(picked, 1)?;
            let nll = g.sub(lse, picked)?;
            let nll = g.mean_all(nll)?;
            let sq = g.square(wv)?;
            let reg = g.sum_all(sq)?;
            let reg = g.scale(reg, config.l2)?;
            let loss = g.add(nll, reg)?;
            (g.backward(loss)?, g.value(loss).item())
        };
        adam_step(&mut store, grads.params(), &mut adam, config.learning_rate)?;
        if (prev - loss).abs() < config.tolerance {
            break;
        }
        prev = loss;
    }
    let accuracy = |x: &Tensor<f64>, labels: &[u8]| -> Result<f64> {
        let logits = ops::matmul(x, &transpose(store.get(w)))?;
        let bias = store.get(b).data();
        let correct = (0..x.rows())
            .filter(|&r| {
                let row = logits.row(r);
                let best = (0..classes)
                    .map(|c| (c, row[c] + bias[c]))
                    .fold((0, f64::NEG_INFINITY), |acc, (c, v)| if v > acc.1 { (c, v) } else { acc });
                best.0 == labels[r] as usize
            })
            .count();
        Ok(correct as f64 / x.rows() as f64)
    };
    Ok(ProbeReport { train_accuracy: accuracy(&xtr, train_labels)?, test_accuracy: accuracy(&xte, test_labels)?, iterations })
}

fn transpose(t: &Tensor<f64>) -> Tensor<f64> {
    let (r, c) = (t.rows(), t.cols());
    Tensor::from_fn(&[c, r], |i| t.data()[(i % r) * c + i / r])
}

/// Trainable scalars by component.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub recognition_dense: usize,
    pub recognition_heads: usize,
    pub generative_dense: usize,
    pub output_head: usize,
    pub batchnorm: usize,
    pub memory: usize,
    pub output_logvar: usize,
}

impl ParamCount {
    pub fn total(&self) -> usize {
        self.recognition_dense
            + self.recognition_heads
            + self.generative_dense
            + self.output_head
            + self.batchnorm
            + self.memory
            + self.output_logvar
    }
}

/// Closed-form trainable parameter count; running statistics excluded.
///
/// A memory layer of width `d` with `s` slots adds `2·d·s + s + 9·d`: the
/// memory matrix, the attention weights and bias, and nine composition
/// vectors.
pub fn count_params(arch: &ArchConfig) -> Result<ParamCount> {
    arch.validate()?;
    let dense = |i: usize, o: usize| i * o + o;
    let w = &arch.widths;
    let top = *w.last().unwrap();
    let mut c = ParamCount {
        recognition_dense: 0,
        recognition_heads: 2 * dense(top, arch.latent_dim),
        generative_dense: 0,
        output_head: dense(w[0], arch.input_dim),
        batchnorm: 0,
        memory: 0,
        output_logvar: if arch.likelihood == LikelihoodKind::Gaussian { arch.input_dim } else { 0 },
    };
    let mut fan_in = arch.input_dim;
    for (i, &d) in w.iter().enumerate() {
        c.recognition_dense += dense(fan_in, d);
        fan_in = d;
        c.generative_dense += dense(w.get(i + 1).copied().unwrap_or(arch.latent_dim), d);
        if arch.batchnorm {
            c.batchnorm += 2 * 2 * d;
        }
        let s = arch.slots_for(i);
        if s > 0 {
            c.memory += 2 * d * s + s + 9 * d;
        }
    }
    Ok(c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Model;
    use crate::training::init_model;

    fn neutral(arch: &ArchConfig) -> Nets<f64> {
        let mut params = ParamStore::new();
        let model = Model::build(arch, &mut params).unwrap();
        Nets { model, params }
    }

    #[test]
    fn constant_weight_oracle() {
        let nets = neutral(&ArchConfig { widths: vec![8, 6], slots: vec![0, 0], ..ArchConfig::mnist_vae() });
        let mut rng = RngStream::new(3, "data");
        let x: Tensor<f64> = rng.draw(crate::autodiff::Distribution::Bernoulli(0.4), &[3, 784]).unwrap();
        let want = 784.0 * 0.5f64.ln();
        assert!(((want + 543.427_7) / want).abs() < 1e-6);
        for k in [1, 5, 64] {
            let r = test_loglik(&x, &nets, 1, k, 16).unwrap();
            for v in r.per_datum {
                assert!(((v - want) / want).abs() < 1e-9, "k={k}: {v}");
            }
        }
    }

    #[test]
    fn chunking_is_exact() {
        let arch = ArchConfig {
            input_dim: 12,
            widths: vec![7, 5],
            latent_dim: 3,
            slots: vec![2, 2],
            ..ArchConfig::mnist_mem()
        };
        let nets: Nets<f64> = init_model(&arch, 4).unwrap();
        let x: Tensor<f64> = RngStream::new(1, "x").draw(crate::autodiff::Distribution::Bernoulli(0.5), &[2, 12]).unwrap();
        let whole = test_loglik(&x, &nets, 9, 40, 40).unwrap();
        let halves = test_loglik(&x, &nets, 9, 40, 20).unwrap();
        let odd = test_loglik(&x, &nets, 9, 40, 7).unwrap();
        for ((a, b), c) in whole.per_datum.iter().zip(&halves.per_datum).zip(&odd.per_datum) {
            assert!((a - b).abs() <= 1e-9 && (a - c).abs() <= 1e-9);
        }
    }

    #[test]
    fn masks() {
        let mut rng = RngStream::new(0, "mask");
        let rect = make_mask(MaskKind::Rect(12), 28, 28, &mut rng).unwrap();
        assert_eq!(rect.count(), 144);
        for (i, &m) in rect.missing.iter().enumerate() {
            let (r, c) = (i / 28, i % 28);
            assert_eq!(m, (8..=19).contains(&r) && (8..=19).contains(&c));
        }
        let half = make_mask(MaskKind::Half, 28, 28, &mut rng).unwrap();
        assert_eq!(half.count(), 392);
        assert!(half.missing[13] && !half.missing[14]);
        let rand = make_mask(MaskKind::Rand(0.6), 28, 28, &mut rng).unwrap();
        assert!((rand.count() as f64 - 470.4).abs() < 4.0 * 13.72);
        assert!(make_mask(MaskKind::Rect(29), 28, 28, &mut rng).is_err());
        assert_eq!("rect12".parse::<MaskKind>().unwrap(), MaskKind::Rect(12));
        assert_eq!("RAND-0.6".parse::<MaskKind>().unwrap(), MaskKind::Rand(0.6));
        assert_eq!("half".parse::<MaskKind>().unwrap(), MaskKind::Half);
        assert!("blur".parse::<MaskKind>().is_err());
    }

    #[test]
    fn imputation_contract() {
        let arch = ArchConfig { input_dim: 16, widths: vec![6], latent_dim: 2, slots: vec![2], lambda: vec![0.1], ..ArchConfig::mnist_mem() };
        let nets: Nets<f64> = init_model(&arch, 1).unwrap();
        let x: Tensor<f64> = RngStream::new(2, "x").draw(crate::autodiff::Distribution::Bernoulli(0.5), &[3, 16]).unwrap();
        let mut rng = RngStream::new(2, "impute");
        let masks: Vec<Mask> = (0..3).map(|_| make_mask(MaskKind::Rand(0.5), 4, 4, &mut rng).unwrap()).collect();
        let trace = impute(&x, &masks, &nets, &mut rng, 5, false).unwrap();
        assert_eq!((trace.images.len(), trace.mse.len()), (6, 6));
        for img in &trace.images {
            for (r, mask) in masks.iter().enumerate() {
                for c in 0..16 {
                    if !mask.missing[c] {
                        assert_eq!(img.row(r)[c], x.row(r)[c]);
                    }
                }
            }
        }
        let none: Vec<Mask> = (0..3).map(|_| Mask::none(16)).collect();
        let trace = impute(&x, &none, &nets, &mut rng, 3, false).unwrap();
        assert!(trace.mse.iter().flatten().all(|&m| m == 0.0));
        assert_eq!(trace.images[3], x);
    }

    #[test]
    fn probe_on_separable_and_shuffled_data() {
        let mut rng = RngStream::new(1, "probe");
        let n = 400;
        let mut feats = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let c = (i % 4) as u8;
            labels.push(c);
            for j in 0..4 {
                feats.push(if j == c as usize { 3.0 } else { 0.0 } + 0.3 * rng.gaussian_pair().0);
            }
        }
        let x = Tensor::new(&[n, 4], feats).unwrap();
        let r = linear_probe(&x, &labels, &x, &labels, ProbeConfig::default()).unwrap();
        assert_eq!((r.train_accuracy, r.test_accuracy), (1.0, 1.0));

        let noise: Tensor<f64> = rng.draw(crate::autodiff::Distribution::Gaussian, &[2000, 10]).unwrap();
        let y: Vec<u8> = (0..2000).map(|_| rng.below(4) as u8).collect();
        let (tr, te) = (noise.select_rows(&(0..1000).collect::<Vec<_>>()).unwrap(), noise.select_rows(&(1000..2000).collect::<Vec<_>>()).unwrap());
        let r = linear_probe(&tr, &y[..1000], &te, &y[1000..], ProbeConfig::default()).unwrap();
        assert!((r.test_accuracy - 0.25).abs() < 0.05, "{}", r.test_accuracy);
        assert!(linear_probe(&x, &vec![1; n], &x, &labels, ProbeConfig::default()).is_err());
    }

    #[test]
    fn closed_form_counts() {
        let total = |a: ArchConfig| count_params(&a).unwrap().total();
        assert_eq!(total(ArchConfig::mnist_vae()), 1_440_984);
        assert_eq!(total(ArchConfig::mnist_mem()), 1_550_084);
        assert_eq!(total(ArchConfig::mnist_vae_530()), 1_559_184);
        assert_eq!(total(ArchConfig::ocr_vae()), 163_828);
        assert_eq!(total(ArchConfig::ocr_mem()), 207_528);
        for arch in [ArchConfig::mnist_mem(), ArchConfig::ocr_vae(), ArchConfig::frey_mem(), ArchConfig::mnist_vis()] {
            let mut store = ParamStore::<f32>::new();
            Model::build(&arch, &mut store).unwrap();
            assert_eq!(store.trainable_count(), total(arch));
        }
    }
}
