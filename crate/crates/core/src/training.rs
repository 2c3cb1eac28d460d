//! Initialization, the learning-rate schedule, Adam and the epoch loop.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamStore, Real, RngState, RngStream, Tensor};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::model::{iwae_bound, training_objective, ArchConfig, Model, Nets};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-4;
/// Standard deviation of the memory-matrix entries at initialization.
pub const MEMORY_INIT_STD: f64 = 0.1;

/// Builds `arch` with Glorot-uniform dense weights, Gaussian memories and
/// the identity composition. Each tensor draws from its own stream keyed by
/// its name, so shared layers of two architectures start identical.
pub fn init_model<T: Real>(arch: &ArchConfig, seed: u64) -> Result<Nets<T>> {
    let mut params = ParamStore::new();
    let model = Model::build(arch, &mut params)?;
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let name = params.name(id).to_string();
        let shape = params.get(id).shape().to_vec();
        let mut rng = RngStream::new(seed, format!("init/{name}"));
        let value = if name.ends_with(".weight") || name.ends_with(".mem.attention") {
            let bound = glorot_bound(shape[1], shape[0]);
            let data: Vec<f64> = (0..shape[0] * shape[1]).map(|_| (2.0 * rng.uniform01() - 1.0) * bound).collect();
            Tensor::from_f64(&shape, &data)?
        } else if name.ends_with(".mem.memory") {
            let data: Vec<f64> = rng.gaussians(shape[0] * shape[1]).into_iter().map(|v| v * MEMORY_INIT_STD).collect();
            Tensor::from_f64(&shape, &data)?
        } else {
            continue;
        };
        params.set(id, value)?;
    }
    Ok(Nets { model, params })
}

/// `√(6 / (fan_in + fan_out))`.
pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

fn default_base_lr() -> f64 {
    1e-3
}
fn default_flat_epochs() -> usize {
    1000
}
fn default_anneal_epochs() -> usize {
    2000
}
fn default_anneal_factor() -> f64 {
    0.998
}
fn default_minibatch() -> usize {
    100
}
fn default_k() -> usize {
    1
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub arch: ArchConfig,
    #[serde(default = "default_base_lr")]
    pub base_lr: f64,
    #[serde(default = "default_flat_epochs")]
    pub flat_epochs: usize,
    #[serde(default = "default_anneal_epochs")]
    pub anneal_epochs: usize,
    #[serde(default = "default_anneal_factor")]
    pub anneal_factor: f64,
    #[serde(default = "default_minibatch")]
    pub minibatch: usize,
    #[serde(default = "default_k")]
    pub k_samples: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_true")]
    pub binarize_inputs: bool,
    /// Epochs to run; defaults to the full schedule.
    #[serde(default)]
    pub epochs: Option<usize>,
    /// Write a checkpoint every this many epochs (and at the end).
    #[serde(default)]
    pub checkpoint_every: Option<usize>,
    /// Samples for the per-epoch validation bound.
    #[serde(default = "default_k")]
    pub valid_k: usize,
}

impl TrainConfig {
    pub fn new(arch: ArchConfig) -> Self {
        Self {
            arch,
            base_lr: default_base_lr(),
            flat_epochs: default_flat_epochs(),
            anneal_epochs: default_anneal_epochs(),
            anneal_factor: default_anneal_factor(),
            minibatch: default_minibatch(),
            k_samples: 1,
            seed: 0,
            binarize_inputs: true,
            epochs: None,
            checkpoint_every: None,
            valid_k: 1,
        }
    }

    pub fn total_epochs(&self) -> usize {
        self.epochs.unwrap_or(self.flat_epochs + self.anneal_epochs)
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::config("train.base_lr", "must be positive"));
        }
        if !(self.anneal_factor > 0.0 && self.anneal_factor <= 1.0) {
            return Err(Error::config("train.anneal_factor", "must lie in (0, 1]"));
        }
        if self.minibatch == 0 {
            return Err(Error::config("train.minibatch", "must be positive"));
        }
        if self.arch.batchnorm && self.minibatch < 2 {
            return Err(Error::config("train.minibatch", "batch normalization needs at least 2 rows"));
        }
        if self.k_samples == 0 || self.valid_k == 0 {
            return Err(Error::config("train.k_samples", "must be at least 1"));
        }
        if self.checkpoint_every == Some(0) {
            return Err(Error::config("train.checkpoint_every", "must be positive"));
        }
        let total = self.flat_epochs + self.anneal_epochs;
        if self.total_epochs() == 0 || self.total_epochs() > total {
            return Err(Error::config("train.epochs", format!("must lie in 1..={total}")));
        }
        Ok(())
    }
}

/// Step size for a 0-based epoch: flat, then geometric decay from the first
/// annealed epoch.
pub fn lr_at(epoch: usize, config: &TrainConfig) -> Result<f64> {
    if epoch >= config.flat_epochs + config.anneal_epochs {
        return Err(Error::invalid(format!(
            "epoch {epoch} is outside the {}-epoch schedule",
            config.flat_epochs + config.anneal_epochs
        )));
    }
    if epoch < config.flat_epochs {
        return Ok(config.base_lr);
    }
    let annealed = (epoch + 1 - config.flat_epochs) as i32;
    Ok(config.base_lr * config.anneal_factor.powi(annealed))
}

/// First and second moments for every tensor in a store.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub t: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros: Vec<Tensor<T>> = params.ids().map(|id| Tensor::zeros(params.get(id).shape())).collect();
        Self { beta1: ADAM_BETA1, beta2: ADAM_BETA2, epsilon: ADAM_EPSILON, t: 0, m: zeros.clone(), v: zeros }
    }
}

/// One bias-corrected Adam update of every trainable tensor. Fails without
/// touching anything if a gradient is not finite.
pub fn adam_step<T: Real>(params: &mut ParamStore<T>, grads: &[Tensor<T>], state: &mut AdamState<T>, lr: f64) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::shape("adam_step", format!("{} gradients for {} parameters", grads.len(), params.len())));
    }
    for id in params.trainable_ids() {
        let g = &grads[id.index()];
        if g.shape() != params.get(id).shape() {
            return Err(Error::shape("adam_step", format!("gradient of `{}` is {:?}", params.name(id), g.shape())));
        }
        if !g.is_finite() {
            return Err(Error::Gradient(format!("non-finite gradient for `{}`", params.name(id))));
        }
    }
    state.t += 1;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.epsilon);
    let c1 = 1.0 - b1.powf(state.t as f64);
    let c2 = 1.0 - b2.powf(state.t as f64);
    let ids: Vec<_> = params.trainable_ids().collect();
    for id in ids {
        let i = id.index();
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let theta = params.get_mut(id).data_mut();
        for j in 0..theta.len() {
            let gj = g[j].as_f64();
            let mj = b1 * m[j].as_f64() + (1.0 - b1) * gj;
            let vj = b2 * v[j].as_f64() + (1.0 - b2) * gj * gj;
            m[j] = T::of(mj);
            v[j] = T::of(vj);
            let step = lr * (mj / c1) / ((vj / c2).sqrt() + eps);
            theta[j] = T::of(theta[j].as_f64() - step);
        }
    }
    Ok(())
}

/// The random streams consumed by training.
#[derive(Debug, Clone)]
pub struct TrainRngs {
    pub shuffle: RngStream,
    pub binarize: RngStream,
    pub reparam: RngStream,
}

impl TrainRngs {
    pub fn new(seed: u64) -> Self {
        Self {
            shuffle: RngStream::new(seed, "train/shuffle"),
            binarize: RngStream::new(seed, "train/binarize"),
            reparam: RngStream::new(seed, "train/reparam"),
        }
    }

    pub fn states(&self) -> Vec<RngState> {
        vec![self.shuffle.state(), self.binarize.state(), self.reparam.state()]
    }

    pub fn from_states(states: &[RngState]) -> Result<Self> {
        let find = |label: &str| {
            states
                .iter()
                .find(|s| s.label == label)
                .map(RngStream::from_state)
                .ok_or_else(|| Error::Checkpoint(format!("missing random stream `{label}`")))
        };
        Ok(Self { shuffle: find("train/shuffle")?, binarize: find("train/binarize")?, reparam: find("train/reparam")? })
    }
}

/// Everything needed to continue training.
#[derive(Debug, Clone)]
pub struct TrainingState<T> {
    pub nets: Nets<T>,
    pub adam: AdamState<T>,
    /// Completed epochs.
    pub epoch: usize,
    pub rngs: TrainRngs,
}

impl<T: Real> TrainingState<T> {
    pub fn new(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let nets = init_model(&config.arch, config.seed)?;
        let adam = AdamState::new(&nets.params);
        Ok(Self { nets, adam, epoch: 0, rngs: TrainRngs::new(config.seed) })
    }

    pub fn to_checkpoint(&self, config: &TrainConfig) -> Checkpoint<T> {
        Checkpoint {
            nets: self.nets.clone(),
            adam: Some(self.adam.clone()),
            epoch: self.epoch,
            config: Some(config.clone()),
            rng_states: self.rngs.states(),
        }
    }

    pub fn from_checkpoint(ckpt: Checkpoint<T>) -> Result<Self> {
        let adam = ckpt.adam.ok_or_else(|| Error::Checkpoint("no optimizer state; cannot resume".into()))?;
        let rngs = TrainRngs::from_states(&ckpt.rng_states)?;
        Ok(Self { nets: ckpt.nets, adam, epoch: ckpt.epoch, rngs })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub lr: f64,
    /// Mean minibatch loss.
    pub loss: f64,
    /// Mean minibatch bound.
    pub bound: f64,
    pub penalty: f64,
    pub batches: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub valid_bound: Option<f64>,
}

/// One pass over `data` (rows in `[0, 1]`): optional stochastic
/// binarization, a seeded shuffle, then an Adam step per minibatch.
pub fn train_epoch<T: Real>(data: &Tensor<T>, state: &mut TrainingState<T>, config: &TrainConfig) -> Result<EpochReport> {
    if data.ndim() != 2 || data.cols() != config.arch.input_dim {
        return Err(Error::shape("train_epoch", format!("data {:?} vs input_dim {}", data.shape(), config.arch.input_dim)));
    }
    let lr = lr_at(state.epoch, config)?;
    let input = if config.binarize_inputs { state.rngs.binarize.bernoulli(data)? } else { data.clone() };
    let order = state.rngs.shuffle.permutation(input.rows());
    let min_rows = if config.arch.batchnorm { 2 } else { 1 };
    let (mut loss_sum, mut bound_sum, mut pen_sum, mut batches) = (0.0, 0.0, 0.0, 0usize);
    for rows in order.chunks(config.minibatch) {
        if rows.len() < min_rows {
            continue;
        }
        let batch = input.select_rows(rows)?;
        let (grads, stats, loss, bound, penalty) = {
            let mut g = Graph::new(&state.nets.params);
            let obj = training_objective(&mut g, &state.nets.model, &batch, &mut state.rngs.reparam, config.k_samples, Mode::Train)?;
            let loss = g.value(obj.loss).item().as_f64();
            if !loss.is_finite() {
                return Err(Error::NonFinite { op: "training_objective" });
            }
            let grads = g.backward(obj.loss)?;
            (grads, g.take_stat_updates(), loss, obj.bound_mean, obj.penalty)
        };
        adam_step(&mut state.nets.params, grads.params(), &mut state.adam, lr)?;
        for (id, value) in stats {
            state.nets.params.set(id, value)?;
        }
        loss_sum += loss;
        bound_sum += bound;
        pen_sum += penalty;
        batches += 1;
    }
    if batches == 0 {
        return Err(Error::invalid("dataset too small for a single minibatch"));
    }
    let report = EpochReport {
        epoch: state.epoch,
        lr,
        loss: loss_sum / batches as f64,
        bound: bound_sum / batches as f64,
        penalty: pen_sum / batches as f64,
        batches,
        valid_bound: None,
    };
    state.epoch += 1;
    Ok(report)
}

/// Mean eval-mode bound over `data` in chunks of `chunk` rows.
pub fn mean_bound<T: Real>(nets: &Nets<T>, data: &Tensor<T>, rng: &mut RngStream, k: usize, chunk: usize) -> Result<f64> {
    let mut total = 0.0;
    let idx: Vec<usize> = (0..data.rows()).collect();
    for rows in idx.chunks(chunk.max(1)) {
        let b = iwae_bound(nets, &data.select_rows(rows)?, rng, k, Mode::Eval)?;
        total += b.data().iter().map(|v| v.as_f64()).sum::<f64>();
    }
    Ok(total / data.rows() as f64)
}

#[derive(Debug, Clone)]
pub struct FitOutcome<T> {
    pub state: TrainingState<T>,
    pub history: Vec<EpochReport>,
}

/// Runs epochs `state.epoch..config.total_epochs()`, starting fresh when
/// `resume` is `None`. Writes checkpoints to `checkpoint` when given.
pub fn fit<T: Real>(
    data: &Tensor<T>,
    valid: Option<&Tensor<T>>,
    config: &TrainConfig,
    resume: Option<TrainingState<T>>,
    checkpoint: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochReport),
) -> Result<FitOutcome<T>> {
    config.validate()?;
    let mut state = match resume {
        Some(s) => {
            if s.nets.model.arch != config.arch {
                return Err(Error::Checkpoint("checkpoint architecture differs from the configuration".into()));
            }
            s
        }
        None => TrainingState::new(config)?,
    };
    let mut history = Vec::new();
    while state.epoch < config.total_epochs() {
        let mut report = train_epoch(data, &mut state, config)?;
        if let Some(v) = valid {
            let mut rng = RngStream::new(config.seed, format!("valid/{}", report.epoch));
            report.valid_bound = Some(mean_bound(&state.nets, v, &mut rng, config.valid_k, 500)?);
        }
        on_epoch(&report);
        history.push(report);
        let done = state.epoch == config.total_epochs();
        if let Some(path) = checkpoint {
            if done || config.checkpoint_every.is_some_and(|n| state.epoch % n == 0) {
                state.to_checkpoint(config).save(path)?;
            }
        }
    }
    Ok(FitOutcome { state, history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{AttentionKind, CompositionKind};
    use crate::model::{decode_mean, LikelihoodKind};

    fn toy_arch(slots: usize) -> ArchConfig {
        ArchConfig {
            input_dim: 16,
            widths: vec![12, 8],
            latent_dim: 4,
            slots: vec![slots, slots],
            likelihood: LikelihoodKind::Bernoulli,
            attention: AttentionKind::Sigmoid,
            composition: CompositionKind::ElementwiseMlp,
            batchnorm: true,
            lambda: vec![0.1, 0.1],
            stop_gradient_targets: true,
        }
    }

    fn toy_data(n: usize, seed: u64) -> Tensor<f32> {
        // two prototype patterns with pixel noise
        let mut rng = RngStream::new(seed, "toy");
        let mut data = Vec::new();
        for i in 0..n {
            for j in 0..16 {
                let on = if i % 2 == 0 { j < 8 } else { j % 2 == 0 };
                let p = if on { 0.9 } else { 0.1 };
                data.push(if rng.uniform01() < p { 1.0 } else { 0.0 });
            }
        }
        Tensor::new(&[n, 16], data).unwrap()
    }

    #[test]
    fn schedule() {
        let c = TrainConfig::new(ArchConfig::mnist_mem());
        assert_eq!(lr_at(0, &c).unwrap(), 1e-3);
        assert_eq!(lr_at(999, &c).unwrap(), 1e-3);
        assert!((lr_at(1000, &c).unwrap() - 9.98e-4).abs() < 1e-15);
        let last = lr_at(2999, &c).unwrap();
        assert!((last - 1e-3 * 0.998f64.powi(2000)).abs() < 1e-18);
        assert!((last - 1.825e-5).abs() < 1e-8);
        assert!(lr_at(3000, &c).is_err());
        let mut prev = f64::INFINITY;
        for e in 0..3000 {
            let lr = lr_at(e, &c).unwrap();
            assert!(lr <= prev);
            prev = lr;
        }
    }

    fn scalar_store(v: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::from_f64(&[1], &[v]).unwrap(), true).unwrap();
        s
    }

    #[test]
    fn adam_first_steps() {
        for (g, want) in [(1.0, -1e-3 / (1.0 + 1e-4)), (-1.0, 1e-3 / (1.0 + 1e-4))] {
            let mut s = scalar_store(0.5);
            let mut st = AdamState::new(&s);
            adam_step(&mut s, &[Tensor::from_f64(&[1], &[g]).unwrap()], &mut st, 1e-3).unwrap();
            assert!((s.get(crate::autodiff::ParamId(0)).item() - 0.5 - want).abs() < 1e-15);
        }
        let mut s = scalar_store(0.5);
        let mut st = AdamState::new(&s);
        for _ in 0..3 {
            adam_step(&mut s, &[Tensor::zeros(&[1])], &mut st, 1e-3).unwrap();
        }
        assert_eq!(s.get(crate::autodiff::ParamId(0)).item(), 0.5);
        let err = adam_step(&mut s, &[Tensor::from_f64(&[1], &[f64::NAN]).unwrap()], &mut st, 1e-3);
        assert!(matches!(err, Err(Error::Gradient(_))));
        assert_eq!(st.t, 3);
    }

    #[test]
    fn adam_is_nearly_scale_invariant() {
        let grads = [0.3, -2.0, 0.01, 5.0];
        let run = |scale: f64| {
            let mut s = ParamStore::<f64>::new();
            s.insert("w", Tensor::zeros(&[4]), true).unwrap();
            let mut st = AdamState::new(&s);
            st.epsilon = 1e-12;
            let g: Vec<f64> = grads.iter().map(|x| x * scale).collect();
            adam_step(&mut s, &[Tensor::from_f64(&[4], &g).unwrap()], &mut st, 1e-3).unwrap();
            s.get(crate::autodiff::ParamId(0)).data().to_vec()
        };
        let (a, b) = (run(1.0), run(10.0));
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() / x.abs() < 1e-3);
        }
    }

    #[test]
    fn init_rules() {
        let nets: Nets<f32> = init_model(&ArchConfig::mnist_mem(), 7).unwrap();
        let p = &nets.params;
        let w = p.get(p.lookup("q.layer1.dense.weight").unwrap());
        let bound = glorot_bound(784, 500);
        assert!((bound - 0.068_36).abs() < 1e-5);
        assert!(w.data().iter().all(|&x| (x as f64).abs() <= bound));
        let max = w.data().iter().fold(0f32, |m, x| m.max(x.abs())) as f64;
        assert!(max > 0.99 * bound);
        for (name, fill) in [("p.layer1.mem.a3", 1.0), ("p.layer1.mem.c3", 1.0), ("p.layer1.mem.a1", 0.0), ("p.layer2.mem.b1", 0.0)] {
            let t = p.get(p.lookup(name).unwrap_or_else(|| panic!("{name}")));
            assert!(t.data().iter().all(|&x| x == fill as f32), "{name}");
        }
        let m = p.get(p.lookup("p.layer1.mem.memory").unwrap());
        let n = m.numel() as f64;
        let var = m.data().iter().map(|&x| (x as f64).powi(2)).sum::<f64>() / n;
        assert!((var.sqrt() - 0.1).abs() < 0.005);
        let again: Nets<f32> = init_model(&ArchConfig::mnist_mem(), 7).unwrap();
        assert_eq!(nets.params, again.params);
    }

    #[test]
    fn fresh_mem_and_vanilla_agree() {
        let arch = toy_arch(3);
        let mem: Nets<f64> = init_model(&arch, 11).unwrap();
        let plain: Nets<f64> = init_model(&arch.without_memory(), 11).unwrap();
        let z: Tensor<f64> = RngStream::new(1, "z").draw(crate::autodiff::Distribution::Gaussian, &[5, 4]).unwrap();
        assert_eq!(decode_mean(&mem, &z, &[]).unwrap(), decode_mean(&plain, &z, &[]).unwrap());
    }

    fn toy_config(epochs: usize) -> TrainConfig {
        TrainConfig { minibatch: 10, seed: 3, epochs: Some(epochs), base_lr: 3e-3, ..TrainConfig::new(toy_arch(3)) }
    }

    #[test]
    fn training_is_deterministic_and_learns() {
        let data = toy_data(100, 1);
        let cfg = toy_config(20);
        let a = fit(&data, None, &cfg, None, None, |_| {}).unwrap();
        let b = fit(&data, None, &cfg, None, None, |_| {}).unwrap();
        assert_eq!(a.state.nets.params, b.state.nets.params);
        assert_eq!(a.history.len(), 20);
        assert!(a.history[19].loss < a.history[0].loss, "{:?}", a.history);
    }

    #[test]
    fn resume_is_bit_exact() {
        let data = toy_data(40, 2);
        let full = fit(&data, None, &toy_config(4), None, None, |_| {}).unwrap();
        let half = fit(&data, None, &toy_config(2), None, None, |_| {}).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        half.state.to_checkpoint(&toy_config(2)).save(&path).unwrap();
        let loaded = TrainingState::from_checkpoint(Checkpoint::<f32>::load(&path).unwrap()).unwrap();
        let rest = fit(&data, None, &toy_config(4), Some(loaded), None, |_| {}).unwrap();
        assert_eq!(rest.history.len(), 2);
        assert_eq!(rest.history[1], full.history[3]);
        assert_eq!(rest.state.nets.params, full.state.nets.params);
        assert_eq!(rest.state.adam, full.state.adam);
    }

    #[test]
    fn plain_objective_is_negative_elbo() {
        let mut arch = toy_arch(0);
        arch.lambda = vec![0.0, 0.0];
        let cfg = TrainConfig { minibatch: 10, epochs: Some(1), binarize_inputs: false, ..TrainConfig::new(arch) };
        let data: Tensor<f64> = toy_data(30, 4).cast();
        let mut state = TrainingState::<f64>::new(&cfg).unwrap();
        let mut replay = state.clone();
        let order = replay.rngs.shuffle.permutation(30);
        let mut expected = 0.0;
        for rows in order.chunks(10) {
            let batch = data.select_rows(rows).unwrap();
            let mut twin = replay.rngs.reparam.clone();
            let elbo = crate::model::elbo(&replay.nets, &batch, &mut twin, Mode::Train).unwrap();
            expected -= elbo.data().iter().sum::<f64>() / 10.0;
            let (grads, stats) = {
                let mut g = Graph::new(&replay.nets.params);
                let obj = training_objective(&mut g, &replay.nets.model, &batch, &mut replay.rngs.reparam, 1, Mode::Train).unwrap();
                (g.backward(obj.loss).unwrap(), g.take_stat_updates())
            };
            adam_step(&mut replay.nets.params, grads.params(), &mut replay.adam, 1e-3).unwrap();
            for (id, v) in stats {
                replay.nets.params.set(id, v).unwrap();
            }
        }
        let report = train_epoch(&data, &mut state, &cfg).unwrap();
        assert!((report.loss - expected / 3.0).abs() < 1e-9, "{} vs {}", report.loss, expected / 3.0);
        assert_eq!(report.penalty, 0.0);
    }
}
