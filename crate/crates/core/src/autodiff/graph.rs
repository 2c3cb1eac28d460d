//! Reverse-mode differentiation tape.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s in execution
//! order, which is already a topological order. [`Graph::backward`] walks the
//! record in reverse and accumulates gradients by addition when a value fans
//! out. Parameters are read straight from a borrowed [`ParamStore`], so a
//! graph lives for one forward/backward pass.

use std::collections::HashMap;

use super::ops::{self, axis_layout, broadcast_mode, BinaryKind, Broadcast, Nonlinearity, ReduceKind};
use super::params::{ParamId, ParamStore};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Constant,
    Input,
    Param(ParamId),
    MatMul { a: Var, b: Var, trans_b: bool },
    Binary { kind: BinaryKind, a: Var, b: Var, bcast: Broadcast },
    Scale { a: Var, factor: T },
    Offset { a: Var },
    Unary { kind: Nonlinearity, a: Var },
    Square { a: Var },
    Softmax { a: Var, axis: usize },
    Reduce { kind: ReduceKind, a: Var, axis: usize },
    SumAll { a: Var },
    LogSumExp { a: Var, axis: usize },
    Reshape { a: Var },
    RepeatRows { a: Var, times: usize },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Tensor<T>, inv_std: Vec<T>, train: bool },
    BernoulliLogLik { logits: Var, target: Tensor<T> },
}

struct Node<T> {
    // `None` for parameter leaves, whose value lives in the store.
    value: Option<Tensor<T>>,
    op: Op<T>,
    tracked: bool,
}

/// Batch-norm statistic settings for one normalization site.
#[derive(Debug, Clone, Copy)]
pub struct BatchNormSite {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    pub eps: f64,
}

pub struct Graph<'p, T: Real> {
    store: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_nodes: HashMap<ParamId, Var>,
    stat_updates: Vec<(ParamId, Tensor<T>)>,
}

/// Result of [`Graph::backward`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    params: Vec<Tensor<T>>,
    inputs: HashMap<Var, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient for a parameter; zeros when the loss does not depend on it.
    pub fn param(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0]
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn into_params(self) -> Vec<Tensor<T>> {
        self.params
    }

    /// Gradient for a tracked input created with [`Graph::input`].
    pub fn input(&self, v: Var) -> Option<&Tensor<T>> {
        self.inputs.get(&v)
    }
}

impl<'p, T: Real> Graph<'p, T> {
    pub fn new(store: &'p ParamStore<T>) -> Self {
        Self { store, nodes: Vec::new(), param_nodes: HashMap::new(), stat_updates: Vec::new() }
    }

    pub fn store(&self) -> &'p ParamStore<T> {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.store.get(*id),
            (None, _) => unreachable!("only parameter nodes borrow their value"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Running-statistic updates produced by train-mode batch normalization.
    pub fn take_stat_updates(&mut self) -> Vec<(ParamId, Tensor<T>)> {
        std::mem::take(&mut self.stat_updates)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, tracked: bool) -> Var {
        self.nodes.push(Node { value: Some(value), op, tracked });
        Var(self.nodes.len() - 1)
    }

    /// Untracked value: gradients stop here.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// Tracked leaf whose gradient is reported by [`Gradients::input`].
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Input, true)
    }

    /// Leaf for a stored parameter. Trainable parameters are tracked.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        self.nodes.push(Node { value: None, op: Op::Param(id), tracked: self.store.is_trainable(id) });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes.insert(id, v);
        v
    }

    /// Copy of `a` that blocks gradient flow.
    pub fn detach(&mut self, a: Var) -> Var {
        let value = self.value(a).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::gemm(self.value(a), false, self.value(b), false)?;
        let tracked = self.is_tracked(a) || self.is_tracked(b);
        Ok(self.push(out, Op::MatMul { a, b, trans_b: false }, tracked))
    }

    /// `a · bᵀ`; the layout used by dense layers with `[out × in]` weights.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::gemm(self.value(a), false, self.value(b), true)?;
        let tracked = self.is_tracked(a) || self.is_tracked(b);
        Ok(self.push(out, Op::MatMul { a, b, trans_b: true }, tracked))
    }

    pub fn elementwise(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let bcast = broadcast_mode("elementwise", self.value(a), self.value(b))?;
        let out = ops::elementwise(kind, self.value(a), self.value(b))?;
        let tracked = self.is_tracked(a) || self.is_tracked(b);
        Ok(self.push(out, Op::Binary { kind, a, b, bcast }, tracked))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(BinaryKind::Mul, a, b)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let f = T::of(factor);
        let out = self.value(a).map(|x| x * f).ensure_finite("scale")?;
        let tracked = self.is_tracked(a);
        Ok(self.push(out, Op::Scale { a, factor: f }, tracked))
    }

    pub fn offset(&mut self, a: Var, shift: f64) -> Result<Var> {
        let s = T::of(shift);
        let out = self.value(a).map(|x| x + s).ensure_finite("offset")?;
        let tracked = self.is_tracked(a);
        Ok(self.push(out, Op::Offset { a }, tracked))
    }

    pub fn map(&mut self, kind: Nonlinearity, a: Var) -> Result<Var> {
        let out = ops::map_nonlinear(kind, self.value(a))?;
        let tracked = self.is_tracked(a);
        Ok(self.push(out, Op::Unary { kind, a }, tracked))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.map(Nonlinearity::Relu, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.map(Nonlinearity::Sigmoid, a)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.map(Nonlinearity::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.map(Nonlinearity::Log, a)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x * x).ensure_finite("square")?;
        let tracked = self.is_tracked(a);
        Ok(self.push(out, Op::Square { a }, tracked))
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let out = ops::softmax(self.value(a), axis)?;
        let tracked = self.is_tracked(a);
        Ok(self.push(out, Op::Softmax { a, axis }, tracked))
    }

    pub fn reduce(&mut self, kind: ReduceKind, a: Var, axis: usize) -> Result<Var> {
        let out = ops::reduce(kind, self.value(a), axis)?;
        let tracked = self.is_tracked(a);
        Ok(self.push(out, Op::Reduce { kind, a, axis }, tracked))
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce(ReduceKind::Sum, a, axis)
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce(ReduceKind::Mean, a, axis)
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let out = ops::sum_all(self.value(a))?;
        let tracked = self.is_tracked(a);
        Ok(self.push(out, Op::SumAll { a }, tracked))
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel() as f64;
        let s = self.sum_all(a)?;
        self.scale(s, 1.0 / n)
    }

    pub fn logsumexp(&mut self, a: Var, axis: usize) -> Result<Var> {
        let out = ops::logsumexp(self.value(a), axis)?;
        let tracked = self.is_tracked(a);
        Ok(self.push(out, Op::LogSumExp { a, axis }, tracked))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        let tracked = self.is_tracked(a);
        Ok(self.push(out, Op::Reshape { a }, tracked))
    }

    /// Repeats each row `times` times consecutively: row `r` lands at rows
    /// `r*times .. (r+1)*times`.
    pub fn repeat_rows(&mut self, a: Var, times: usize) -> Result<Var> {
        if times == 0 {
            return Err(Error::invalid("repeat_rows needs times >= 1"));
        }
        let src = self.value(a);
        let (r, c) = (src.rows(), src.cols());
        let mut data = Vec::with_capacity(r * c * times);
        for i in 0..r {
            for _ in 0..times {
                data.extend_from_slice(src.row(i));
            }
        }
        let out = Tensor::new(&[r * times, c], data)?;
        let tracked = self.is_tracked(a);
        Ok(self.push(out, Op::RepeatRows { a, times }, tracked))
    }

    /// Batch normalization of `x` (`[batch × d]`) followed by `gamma ⊙ x̂ + beta`.
    ///
    /// Train mode normalizes with the batch mean and biased variance and
    /// queues exponential-moving-average updates of the running statistics
    /// (unbiased variance); eval mode uses the running statistics.
    pub fn batchnorm(&mut self, x: Var, gamma: Var, beta: Var, site: BatchNormSite, train: bool) -> Result<Var> {
        let xv = self.value(x);
        let (n, d) = match xv.shape() {
            [n, d] => (*n, *d),
            s => return Err(Error::shape("batchnorm", format!("expected [batch × d], got {s:?}"))),
        };
        if self.value(gamma).numel() != d || self.value(beta).numel() != d {
            return Err(Error::shape("batchnorm", "gamma/beta width differs from input width"));
        }
        if train && n < 2 {
            return Err(Error::invalid("batchnorm in train mode needs a batch of at least 2"));
        }
        let (mean, var): (Vec<f64>, Vec<f64>) = if train {
            let mut mean = vec![0.0; d];
            for row in xv.data().chunks_exact(d) {
                for (m, &v) in mean.iter_mut().zip(row) {
                    *m += v.as_f64();
                }
            }
            mean.iter_mut().for_each(|m| *m /= n as f64);
            let mut var = vec![0.0; d];
            for row in xv.data().chunks_exact(d) {
                for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                    *s += (v.as_f64() - m).powi(2);
                }
            }
            var.iter_mut().for_each(|s| *s /= n as f64);
            (mean, var)
        } else {
            (
                self.store.get(site.running_mean).to_f64_vec(),
                self.store.get(site.running_var).to_f64_vec(),
            )
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + site.eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = Vec::with_capacity(n * d);
        let mut out = Vec::with_capacity(n * d);
        for row in xv.data().chunks_exact(d) {
            for j in 0..d {
                let h = T::of((row[j].as_f64() - mean[j]) * inv_std[j]);
                xhat.push(h);
                out.push(g[j] * h + b[j]);
            }
        }
        if train {
            let mom = site.momentum;
            let unbias = n as f64 / (n as f64 - 1.0);
            let rm = self.store.get(site.running_mean);
            let rv = self.store.get(site.running_var);
            let new_mean = Tensor::from_fn(rm.shape(), |j| T::of(mom * rm.data()[j].as_f64() + (1.0 - mom) * mean[j]));
            let new_var =
                Tensor::from_fn(rv.shape(), |j| T::of(mom * rv.data()[j].as_f64() + (1.0 - mom) * var[j] * unbias));
            self.stat_updates.push((site.running_mean, new_mean));
            self.stat_updates.push((site.running_var, new_var));
        }
        let out = Tensor::new(&[n, d], out)?.ensure_finite("batchnorm")?;
        let xhat = Tensor::new(&[n, d], xhat)?;
        let tracked = self.is_tracked(x) || self.is_tracked(gamma) || self.is_tracked(beta);
        let inv_std = inv_std.into_iter().map(T::of).collect();
        Ok(self.push(out, Op::BatchNorm { x, gamma, beta, xhat, inv_std, train }, tracked))
    }

    /// Element-wise Bernoulli log-probability `x·l − softplus(l)` of binary or
    /// fractional targets `x` under logits `l`.
    pub fn bernoulli_log_prob(&mut self, logits: Var, target: &Tensor<T>) -> Result<Var> {
        let l = self.value(logits);
        if l.shape() != target.shape() {
            return Err(Error::shape("bernoulli_log_prob", format!("{:?} vs {:?}", l.shape(), target.shape())));
        }
        let data = l
            .data()
            .iter()
            .zip(target.data())
            .map(|(&l, &x)| {
                let (l, x) = (l.as_f64(), x.as_f64());
                T::of(x * l - ops::softplus_scalar(l))
            })
            .collect();
        let out = Tensor::new(l.shape(), data)?.ensure_finite("bernoulli_log_prob")?;
        let tracked = self.is_tracked(logits);
        Ok(self.push(out, Op::BernoulliLogLik { logits, target: target.clone() }, tracked))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Gradient(format!("loss must be scalar, got shape {:?}", self.shape(loss))));
        }
        if !self.is_tracked(loss) {
            return Err(Error::Gradient("loss does not depend on any tracked value".into()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(self.shape(loss)));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].tracked {
                continue;
            }
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }

        let mut params: Vec<Tensor<T>> = self.store.ids().map(|id| Tensor::zeros(self.store.get(id).shape())).collect();
        let mut inputs = HashMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            match (&node.op, grads[i].take()) {
                (Op::Param(id), Some(g)) if node.tracked => params[id.0] = g,
                (Op::Input, Some(g)) => {
                    inputs.insert(Var(i), g);
                }
                (Op::Input, None) => {
                    inputs.insert(Var(i), Tensor::zeros(self.nodes[i].value.as_ref().unwrap().shape()));
                }
                _ => {}
            }
        }
        Ok(Gradients { params, inputs })
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let out = self.nodes[i].value.as_ref();
        match &self.nodes[i].op {
            Op::Constant | Op::Input | Op::Param(_) => {}
            Op::MatMul { a, b, trans_b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.is_tracked(*a) {
                    // out = a·b → ga = g·bᵀ ; out = a·bᵀ → ga = g·b
                    let ga = ops::gemm(g, false, bv, !trans_b)?;
                    self.accumulate(grads, *a, ga);
                }
                if self.is_tracked(*b) {
                    let gb = if *trans_b { ops::gemm(g, true, av, false)? } else { ops::gemm(av, true, g, false)? };
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Binary { kind, a, b, bcast } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.is_tracked(*a) {
                    let ga = match kind {
                        BinaryKind::Add | BinaryKind::Sub => g.clone(),
                        BinaryKind::Mul => ops::elementwise(BinaryKind::Mul, g, bv)?,
                    };
                    self.accumulate(grads, *a, ga);
                }
                if self.is_tracked(*b) {
                    let full = match kind {
                        BinaryKind::Add => g.clone(),
                        BinaryKind::Sub => g.map(|x| -x),
                        BinaryKind::Mul => zip_map(g, av, |g, a| g * a),
                    };
                    let gb = match bcast {
                        Broadcast::Same => full,
                        Broadcast::Rows => column_sums(&full).reshape(bv.shape())?,
                    };
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Scale { a, factor } => {
                let f = *factor;
                self.accumulate(grads, *a, g.map(|x| x * f));
            }
            Op::Offset { a } | Op::Reshape { a } => {
                let shape = self.shape(*a).to_vec();
                self.accumulate(grads, *a, g.reshape(&shape)?);
            }
            Op::Unary { kind, a } => {
                let x = self.value(*a);
                let y = out.unwrap();
                let ga = match kind {
                    Nonlinearity::Relu => zip_map(g, x, |g, x| if x > T::zero() { g } else { T::zero() }),
                    Nonlinearity::Sigmoid => zip_map(g, y, |g, y| g * y * (T::one() - y)),
                    Nonlinearity::Exp => zip_map(g, y, |g, y| g * y),
                    Nonlinearity::Log => zip_map(g, x, |g, x| g / x),
                };
                self.accumulate(grads, *a, ga);
            }
            Op::Square { a } => {
                let two = T::of(2.0);
                let ga = zip_map(g, self.value(*a), |g, x| two * x * g);
                self.accumulate(grads, *a, ga);
            }
            Op::Softmax { a, axis } => {
                let y = out.unwrap();
                let (outer, len, inner) = axis_layout("softmax", y.shape(), *axis)?;
                let mut ga = vec![T::zero(); y.numel()];
                for o in 0..outer {
                    for k in 0..inner {
                        let base = o * len * inner + k;
                        let dot: f64 =
                            (0..len).map(|j| (g.data()[base + j * inner] * y.data()[base + j * inner]).as_f64()).sum();
                        let dot = T::of(dot);
                        for j in 0..len {
                            let p = base + j * inner;
                            ga[p] = y.data()[p] * (g.data()[p] - dot);
                        }
                    }
                }
                self.accumulate(grads, *a, Tensor::new(y.shape(), ga)?);
            }
            Op::Reduce { kind, a, axis } => {
                let shape = self.shape(*a);
                let (outer, len, inner) = axis_layout("reduce", shape, *axis)?;
                let scale = match kind {
                    ReduceKind::Sum => T::one(),
                    ReduceKind::Mean => T::of(1.0 / len as f64),
                };
                let ga = Tensor::from_fn(shape, |p| {
                    let o = p / (len * inner);
                    let k = p % inner;
                    g.data()[o * inner + k] * scale
                });
                let _ = outer;
                self.accumulate(grads, *a, ga);
            }
            Op::SumAll { a } => {
                let gv = g.item();
                self.accumulate(grads, *a, Tensor::full(self.shape(*a), gv));
            }
            Op::LogSumExp { a, axis } => {
                let x = self.value(*a);
                let y = out.unwrap();
                let (_, len, inner) = axis_layout("logsumexp", x.shape(), *axis)?;
                let ga = Tensor::from_fn(x.shape(), |p| {
                    let o = p / (len * inner);
                    let k = p % inner;
                    let r = o * inner + k;
                    T::of(g.data()[r].as_f64() * (x.data()[p].as_f64() - y.data()[r].as_f64()).exp())
                });
                self.accumulate(grads, *a, ga);
            }
            Op::RepeatRows { a, times } => {
                let src = self.value(*a);
                let c = src.cols();
                let mut ga = vec![T::zero(); src.numel()];
                for (r, block) in g.data().chunks_exact(c * times).enumerate() {
                    let dst = &mut ga[r * c..(r + 1) * c];
                    for row in block.chunks_exact(c) {
                        for (d, &v) in dst.iter_mut().zip(row) {
                            *d = *d + v;
                        }
                    }
                }
                self.accumulate(grads, *a, Tensor::new(src.shape(), ga)?);
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
                let (n, d) = (xhat.rows(), xhat.cols());
                let gam = self.value(*gamma).data();
                let mut sum_g = vec![0.0f64; d];
                let mut sum_gx = vec![0.0f64; d];
                for (grow, hrow) in g.data().chunks_exact(d).zip(xhat.data().chunks_exact(d)) {
                    for j in 0..d {
                        sum_g[j] += grow[j].as_f64();
                        sum_gx[j] += (grow[j] * hrow[j]).as_f64();
                    }
                }
                if self.is_tracked(*gamma) {
                    let gg = Tensor::from_fn(self.shape(*gamma), |j| T::of(sum_gx[j]));
                    self.accumulate(grads, *gamma, gg);
                }
                if self.is_tracked(*beta) {
                    let gb = Tensor::from_fn(self.shape(*beta), |j| T::of(sum_g[j]));
                    self.accumulate(grads, *beta, gb);
                }
                if self.is_tracked(*x) {
                    let nf = n as f64;
                    let gx = Tensor::from_fn(&[n, d], |p| {
                        let j = p % d;
                        let scale = gam[j].as_f64() * inv_std[j].as_f64();
                        if *train {
                            // dx = γ/σ · (g − mean(g) − x̂ · mean(g·x̂))
                            T::of(scale * (g.data()[p].as_f64() - sum_g[j] / nf - xhat.data()[p].as_f64() * sum_gx[j] / nf))
                        } else {
                            T::of(scale * g.data()[p].as_f64())
                        }
                    });
                    self.accumulate(grads, *x, gx);
                }
            }
            Op::BernoulliLogLik { logits, target } => {
                let l = self.value(*logits);
                let data = g
                    .data()
                    .iter()
                    .zip(l.data())
                    .zip(target.data())
                    .map(|((&g, &l), &x)| T::of(g.as_f64() * (x.as_f64() - ops::sigmoid_scalar(l.as_f64()))))
                    .collect();
                self.accumulate(grads, *logits, Tensor::new(l.shape(), data)?);
            }
        }
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.is_tracked(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a = *a + b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }
}

fn zip_map<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    Tensor::from_fn(a.shape(), |i| f(a.data()[i], b.data()[i]))
}

fn column_sums<T: Real>(t: &Tensor<T>) -> Tensor<T> {
    let c = t.cols();
    let mut acc = vec![0.0f64; c];
    for row in t.data().chunks_exact(c) {
        for (s, &v) in acc.iter_mut().zip(row) {
            *s += v.as_f64();
        }
    }
    Tensor::from_fn(&[c], |j| T::of(acc[j]))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(values: &[(&str, &[usize], &[f64])]) -> (ParamStore<f64>, Vec<ParamId>) {
        let mut s = ParamStore::new();
        let ids = values
            .iter()
            .map(|(n, shape, v)| s.insert(*n, Tensor::from_f64(shape, v).unwrap(), true).unwrap())
            .collect();
        (s, ids)
    }

    #[test]
    fn dense_sum_gradient() {
        // loss = sum(W·x), x = [1, 2] → ∂/∂W = [1, 2] on every row
        let (store, ids) = store_with(&[("w", &[3, 2], &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6])]);
        let mut g = Graph::new(&store);
        let w = g.param(ids[0]);
        let x = g.constant(Tensor::from_f64(&[1, 2], &[1., 2.]).unwrap());
        let y = g.matmul_nt(x, w).unwrap();
        let loss = g.sum_all(y).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.param(ids[0]).data(), &[1., 2., 1., 2., 1., 2.]);
    }

    #[test]
    fn product_rule_through_sigmoid() {
        let (store, ids) = store_with(&[("w", &[1], &[0.0])]);
        let mut g = Graph::new(&store);
        let w = g.param(ids[0]);
        let s = g.sigmoid(w).unwrap();
        let loss = g.mul(s, w).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.param(ids[0]).data(), &[0.5]);
    }

    #[test]
    fn untouched_params_get_zeros_and_errors_surface() {
        let (store, ids) = store_with(&[("a", &[2], &[1., 2.]), ("b", &[2, 2], &[1., 2., 3., 4.])]);
        let mut g = Graph::new(&store);
        let a = g.param(ids[0]);
        let loss = g.sum_all(a).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.param(ids[1]).data(), &[0.; 4]);
        assert!(g.backward(a).is_err());
        let c = g.constant(Tensor::scalar(1.0));
        assert!(matches!(g.backward(c), Err(Error::Gradient(_))));
    }

    #[test]
    fn fan_out_accumulates() {
        let (store, ids) = store_with(&[("a", &[1], &[3.0])]);
        let mut g = Graph::new(&store);
        let a = g.param(ids[0]);
        let b = g.add(a, a).unwrap();
        let loss = g.mul(b, a).unwrap(); // 2a² → 4a
        assert_eq!(g.backward(loss).unwrap().param(ids[0]).data(), &[12.0]);
    }

    #[test]
    fn batchnorm_symmetric_pair() {
        let mut store = ParamStore::<f64>::new();
        let gamma = store.insert("g", Tensor::ones(&[1]), true).unwrap();
        let beta = store.insert("b", Tensor::zeros(&[1]), true).unwrap();
        let rm = store.insert("rm", Tensor::zeros(&[1]), false).unwrap();
        let rv = store.insert("rv", Tensor::ones(&[1]), false).unwrap();
        let site = BatchNormSite { running_mean: rm, running_var: rv, momentum: 0.9, eps: 1e-4 };
        let mut g = Graph::new(&store);
        let x = g.constant(Tensor::from_f64(&[2, 1], &[-1., 1.]).unwrap());
        let (gv, bv) = (g.param(gamma), g.param(beta));
        let y = g.batchnorm(x, gv, bv, site, true).unwrap();
        for (got, want) in g.value(y).data().iter().zip([-1.0, 1.0]) {
            assert!((got - want).abs() < 1e-4);
        }
        let updates = g.take_stat_updates();
        assert_eq!(updates.len(), 2);
        // var of {-1, 1} is 1 (biased) → 2 unbiased
        assert!((updates[1].1.item() - (0.9 + 0.1 * 2.0)).abs() < 1e-12);
        let one = g.constant(Tensor::from_f64(&[1, 1], &[1.]).unwrap());
        assert!(g.batchnorm(one, gv, bv, site, true).is_err());
    }
}
