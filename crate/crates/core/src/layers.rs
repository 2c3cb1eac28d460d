//! Dense layers, batch normalization and the deterministic layer with an
//! external memory.
//!
//! A memory layer first computes the generative information `h_g` exactly
//! like a plain layer, reads a soft-attention combination `h_m` of its
//! memory slots, then merges the two with a composition function:
//!
//! ```text
//! h_g = relu(BN(W_g h_in + b_g))
//! h_a = attention(A h_g + b_A)        sigmoid or softmax over slots
//! h_m = M h_a                         M: [width × slots], columns are slots
//! h   = compose(h_g, h_m)
//! ```
//!
//! Layer structs only hold [`ParamId`]s; the values live in a
//! [`ParamStore`] so the same layout serves both precisions.

use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchNormSite, Graph, ParamId, ParamStore, Real, Tensor, Var};
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-4;
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    Sigmoid,
    Exp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    Sigmoid,
    Softmax,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompositionKind {
    Summation,
    ElementwiseMlp,
}

pub fn activate<T: Real>(g: &mut Graph<'_, T>, x: Var, act: Activation) -> Result<Var> {
    match act {
        Activation::Identity => Ok(x),
        Activation::Relu => g.relu(x),
        Activation::Sigmoid => g.sigmoid(x),
        Activation::Exp => g.exp(x),
    }
}

/// `y = act(x Wᵀ + b)` with `W: [out × in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Dense {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        Ok(Self {
            weight: store.insert(format!("{name}.weight"), Tensor::zeros(&[out_dim, in_dim]), true)?,
            bias: store.insert(format!("{name}.bias"), Tensor::zeros(&[out_dim]), true)?,
            in_dim,
            out_dim,
        })
    }

    /// Pre-activation `x Wᵀ + b`.
    pub fn linear<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let width = *g.shape(x).last().unwrap_or(&0);
        if g.shape(x).len() != 2 || width != self.in_dim {
            return Err(Error::shape("dense", format!("expected [batch × {}], got {:?}", self.in_dim, g.shape(x))));
        }
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let xw = g.matmul_nt(x, w)?;
        g.add(xw, b)
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, act: Activation) -> Result<Var> {
        let pre = self.linear(g, x)?;
        activate(g, pre, act)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, width: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.insert(format!("{name}.gamma"), Tensor::ones(&[width]), true)?,
            beta: store.insert(format!("{name}.beta"), Tensor::zeros(&[width]), true)?,
            running_mean: store.insert(format!("{name}.running_mean"), Tensor::zeros(&[width]), false)?,
            running_var: store.insert(format!("{name}.running_var"), Tensor::ones(&[width]), false)?,
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, mode: Mode) -> Result<Var> {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        let site = BatchNormSite {
            running_mean: self.running_mean,
            running_var: self.running_var,
            momentum: self.momentum,
            eps: self.eps,
        };
        g.batchnorm(x, gamma, beta, site, mode == Mode::Train)
    }
}

/// Dense transform, optional batch normalization of the pre-activation, then
/// the activation.
pub fn dense_block<T: Real>(
    g: &mut Graph<'_, T>,
    x: Var,
    dense: &Dense,
    norm: Option<&BatchNorm>,
    act: Activation,
    mode: Mode,
) -> Result<Var> {
    let pre = dense.linear(g, x)?;
    let pre = match norm {
        Some(bn) => bn.forward(g, pre, mode)?,
        None => pre,
    };
    activate(g, pre, act)
}

/// Memory matrix, attention controller and composition vectors of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBlock {
    /// `M: [width × slots]`.
    pub memory: ParamId,
    /// `A: [slots × width]`.
    pub attention: ParamId,
    pub attention_bias: ParamId,
    /// `a1..a4` of the element-wise composition.
    pub a: [ParamId; 4],
    pub b1: ParamId,
    /// `c1..c4` of the element-wise composition.
    pub c: [ParamId; 4],
    pub width: usize,
    pub slots: usize,
    pub attention_kind: AttentionKind,
    pub composition_kind: CompositionKind,
    pub final_phi: Activation,
}

impl MemoryBlock {
    /// Allocates a block in the composition's neutral state: `a3 = c3 = 1`,
    /// every other composition vector zero, `M`, `A`, `b_A` zero.
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        width: usize,
        slots: usize,
        attention_kind: AttentionKind,
        composition_kind: CompositionKind,
    ) -> Result<Self> {
        if slots == 0 || width == 0 {
            return Err(Error::invalid("memory block needs at least one slot and a positive width"));
        }
        let mut vec = |suffix: &str, fill: f64| store.insert(format!("{name}.{suffix}"), Tensor::full(&[width], T::of(fill)), true);
        let a = [vec("a1", 0.0)?, vec("a2", 0.0)?, vec("a3", 1.0)?, vec("a4", 0.0)?];
        let b1 = vec("b1", 0.0)?;
        let c = [vec("c1", 0.0)?, vec("c2", 0.0)?, vec("c3", 1.0)?, vec("c4", 0.0)?];
        Ok(Self {
            memory: store.insert(format!("{name}.memory"), Tensor::zeros(&[width, slots]), true)?,
            attention: store.insert(format!("{name}.attention"), Tensor::zeros(&[slots, width]), true)?,
            attention_bias: store.insert(format!("{name}.attention_bias"), Tensor::zeros(&[slots]), true)?,
            a,
            b1,
            c,
            width,
            slots,
            attention_kind,
            composition_kind,
            final_phi: Activation::Relu,
        })
    }

    /// Trainable scalars in this block: `2·width·slots + slots + 9·width`.
    pub fn param_count(&self) -> usize {
        2 * self.width * self.slots + self.slots + 9 * self.width
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionOutput {
    /// Preference over slots, `[batch × slots]`.
    pub h_a: Var,
    /// Retrieved memory, `[batch × width]`.
    pub h_m: Var,
}

pub fn attention_read<T: Real>(g: &mut Graph<'_, T>, h_g: Var, block: &MemoryBlock) -> Result<AttentionOutput> {
    if g.shape(h_g).len() != 2 || g.shape(h_g)[1] != block.width {
        return Err(Error::shape("attention_read", format!("expected [batch × {}], got {:?}", block.width, g.shape(h_g))));
    }
    let a = g.param(block.attention);
    let b = g.param(block.attention_bias);
    let m = g.param(block.memory);
    let logits = g.matmul_nt(h_g, a)?;
    let logits = g.add(logits, b)?;
    let h_a = match block.attention_kind {
        AttentionKind::Sigmoid => g.sigmoid(logits)?,
        AttentionKind::Softmax => g.softmax(logits, 1)?,
    };
    // rows of h_a times Mᵀ: each output row is Σ_j h_a[j] · M[:, j]
    let h_m = g.matmul_nt(h_a, m)?;
    Ok(AttentionOutput { h_a, h_m })
}

fn same_shape<T: Real>(g: &Graph<'_, T>, op: &'static str, a: Var, b: Var) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::shape(op, format!("{:?} vs {:?}", g.shape(a), g.shape(b))));
    }
    Ok(())
}

/// `h_g + h_m`: the memory carries the residual.
pub fn compose_summation<T: Real>(g: &mut Graph<'_, T>, h_g: Var, h_m: Var) -> Result<Var> {
    same_shape(g, "compose_summation", h_g, h_m)?;
    g.add(h_g, h_m)
}

/// Element-wise MLP composition
///
/// ```text
/// a = a1 + a2⊙h_m + a3⊙h_g + a4⊙h_g⊙h_m
/// c = σ(c1 + c2⊙h_m + c3⊙h_g + c4⊙h_g⊙h_m)
/// h = φ(a + b1⊙c)
/// ```
pub fn compose_elementwise_mlp<T: Real>(
    g: &mut Graph<'_, T>,
    h_g: Var,
    h_m: Var,
    block: &MemoryBlock,
    final_phi: Activation,
) -> Result<Var> {
    same_shape(g, "compose_elementwise_mlp", h_g, h_m)?;
    if g.shape(h_g)[1] != block.width {
        return Err(Error::shape("compose_elementwise_mlp", "input width differs from block width"));
    }
    let cross = g.mul(h_g, h_m)?;
    let affine = |g: &mut Graph<'_, T>, w: &[ParamId; 4]| -> Result<Var> {
        let [w1, w2, w3, w4] = w.map(|id| g.param(id));
        let t = g.mul(h_m, w2)?;
        let t = g.add(t, w1)?;
        let u = g.mul(h_g, w3)?;
        let t = g.add(t, u)?;
        let v = g.mul(cross, w4)?;
        g.add(t, v)
    };
    let a = affine(g, &block.a)?;
    let c_pre = affine(g, &block.c)?;
    let c = g.sigmoid(c_pre)?;
    let b1 = g.param(block.b1);
    let gate = g.mul(c, b1)?;
    let sum = g.add(a, gate)?;
    activate(g, sum, final_phi)
}

pub fn compose<T: Real>(g: &mut Graph<'_, T>, h_g: Var, h_m: Var, block: &MemoryBlock) -> Result<Var> {
    match block.composition_kind {
        CompositionKind::Summation => compose_summation(g, h_g, h_m),
        CompositionKind::ElementwiseMlp => compose_elementwise_mlp(g, h_g, h_m, block, block.final_phi),
    }
}

/// One deterministic layer of the generative network, with or without memory.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryLayer {
    pub dense: Dense,
    pub norm: Option<BatchNorm>,
    pub memory: Option<MemoryBlock>,
}

#[derive(Debug, Clone, Copy)]
pub struct LayerOutput {
    pub h_out: Var,
    pub h_g: Var,
    /// `None` for memoryless layers and when memory is disabled.
    pub h_a: Option<Var>,
    pub h_m: Option<Var>,
}

impl MemoryLayer {
    pub fn width(&self) -> usize {
        self.dense.out_dim
    }

    /// Generative information `h_g = relu(BN(W_g h_in + b_g))`.
    pub fn generative_info<T: Real>(&self, g: &mut Graph<'_, T>, h_in: Var, mode: Mode) -> Result<Var> {
        dense_block(g, h_in, &self.dense, self.norm.as_ref(), Activation::Relu, mode)
    }

    /// Full layer. With `disable_memory`, `h_m` is replaced by the
    /// composition's neutral vector: ones for the element-wise MLP, zeros for
    /// summation.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, h_in: Var, mode: Mode, disable_memory: bool) -> Result<LayerOutput> {
        let h_g = self.generative_info(g, h_in, mode)?;
        let Some(block) = &self.memory else {
            return Ok(LayerOutput { h_out: h_g, h_g, h_a: None, h_m: None });
        };
        let (h_a, h_m) = if disable_memory {
            let shape = g.shape(h_g).to_vec();
            let fill = match block.composition_kind {
                CompositionKind::ElementwiseMlp => T::one(),
                CompositionKind::Summation => T::zero(),
            };
            (None, g.constant(Tensor::full(&shape, fill)))
        } else {
            let read = attention_read(g, h_g, block)?;
            (Some(read.h_a), read.h_m)
        };
        let h_out = compose(g, h_g, h_m, block)?;
        Ok(LayerOutput { h_out, h_g, h_a, h_m: Some(h_m) })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::check::check_gradients;
    use crate::autodiff::RngStream;

    fn set(store: &mut ParamStore<f64>, id: ParamId, v: &[f64]) {
        let shape = store.get(id).shape().to_vec();
        store.set(id, Tensor::from_f64(&shape, v).unwrap()).unwrap();
    }

    fn block(store: &mut ParamStore<f64>, width: usize, slots: usize, att: AttentionKind, comp: CompositionKind) -> MemoryBlock {
        MemoryBlock::new(store, "mem", width, slots, att, comp).unwrap()
    }

    #[test]
    fn dense_cases() {
        let mut store = ParamStore::<f64>::new();
        let d = Dense::new(&mut store, "d", 2, 2).unwrap();
        set(&mut store, d.weight, &[1., 1., 0., 1.]);
        let mut g = Graph::new(&store);
        let x = g.constant(Tensor::from_f64(&[1, 2], &[1., 2.]).unwrap());
        let y = d.forward(&mut g, x, Activation::Identity).unwrap();
        assert_eq!(g.value(y).data(), &[3., 2.]);

        set(&mut store, d.weight, &[1., 0., 0., 1.]);
        set(&mut store, d.bias, &[-2., 0.]);
        let mut g = Graph::new(&store);
        let x = g.constant(Tensor::from_f64(&[1, 2], &[1., 2.]).unwrap());
        let y = d.forward(&mut g, x, Activation::Relu).unwrap();
        assert_eq!(g.value(y).data(), &[0., 2.]);
        let bad = g.constant(Tensor::zeros(&[1, 3]));
        assert!(d.forward(&mut g, bad, Activation::Relu).is_err());
    }

    #[test]
    fn batchnorm_cases() {
        let mut store = ParamStore::<f64>::new();
        let bn = BatchNorm::new(&mut store, "bn", 1).unwrap();
        // eval with running stats (0, 1) leaves input unchanged up to eps
        let mut g = Graph::new(&store);
        let x = g.constant(Tensor::from_f64(&[2, 1], &[0.3, -1.2]).unwrap());
        let y = bn.forward(&mut g, x, Mode::Eval).unwrap();
        for (a, b) in g.value(y).data().iter().zip([0.3, -1.2]) {
            assert!((a - b).abs() < 1e-4);
        }
        // gamma = 2, beta = 3 on a normalized value of 1 → 5
        set(&mut store, bn.gamma, &[2.]);
        set(&mut store, bn.beta, &[3.]);
        set(&mut store, bn.running_var, &[1.0 - BN_EPS]);
        let mut g = Graph::new(&store);
        let x = g.constant(Tensor::from_f64(&[1, 1], &[1.]).unwrap());
        let y = bn.forward(&mut g, x, Mode::Eval).unwrap();
        assert!((g.value(y).item() - 5.0).abs() < 1e-12);
    }

    #[test]
    fn attention_zero_logits() {
        let mut store = ParamStore::<f64>::new();
        let b = block(&mut store, 2, 2, AttentionKind::Sigmoid, CompositionKind::ElementwiseMlp);
        set(&mut store, b.memory, &[1., 0., 0., 1.]);
        let mut g = Graph::new(&store);
        let h = g.constant(Tensor::from_f64(&[1, 2], &[0.7, -0.2]).unwrap());
        let out = attention_read(&mut g, h, &b).unwrap();
        assert_eq!(g.value(out.h_a).data(), &[0.5, 0.5]);
        assert_eq!(g.value(out.h_m).data(), &[0.5, 0.5]);
    }

    #[test]
    fn attention_scalar_recompute() {
        let mut store = ParamStore::<f64>::new();
        let b = block(&mut store, 2, 2, AttentionKind::Sigmoid, CompositionKind::ElementwiseMlp);
        set(&mut store, b.attention, &[1., 0., 0., 1.]);
        // columns [1,3] and [2,4]
        set(&mut store, b.memory, &[1., 2., 3., 4.]);
        let mut g = Graph::new(&store);
        let h = g.constant(Tensor::from_f64(&[1, 2], &[1., -1.]).unwrap());
        let out = attention_read(&mut g, h, &b).unwrap();
        let s1 = 1.0 / (1.0 + (-1f64).exp());
        let s2 = 1.0 / (1.0 + 1f64.exp());
        let ha = g.value(out.h_a).data();
        assert!((ha[0] - s1).abs() < 1e-12 && (ha[1] - s2).abs() < 1e-12);
        let hm = g.value(out.h_m).data();
        assert!((hm[0] - (s1 + 2.0 * s2)).abs() < 1e-12);
        assert!((hm[1] - (3.0 * s1 + 4.0 * s2)).abs() < 1e-12);
        assert!((hm[0] - 1.26894).abs() < 1e-5 && (hm[1] - 3.26894).abs() < 1e-5);
    }

    #[test]
    fn softmax_attention_equal_logits_averages_slots() {
        let mut store = ParamStore::<f64>::new();
        let b = block(&mut store, 2, 2, AttentionKind::Softmax, CompositionKind::Summation);
        set(&mut store, b.memory, &[1., 5., -2., 4.]);
        let mut g = Graph::new(&store);
        let h = g.constant(Tensor::from_f64(&[1, 2], &[0.3, 0.9]).unwrap());
        let out = attention_read(&mut g, h, &b).unwrap();
        assert_eq!(g.value(out.h_m).data(), &[3.0, 1.0]);
    }

    #[test]
    fn composition_cases() {
        let mut store = ParamStore::<f64>::new();
        let b = block(&mut store, 2, 1, AttentionKind::Sigmoid, CompositionKind::ElementwiseMlp);
        let mut g = Graph::new(&store);
        let hg = g.constant(Tensor::from_f64(&[1, 2], &[-1., 2.]).unwrap());
        let hm = g.constant(Tensor::from_f64(&[1, 2], &[5., -7.]).unwrap());
        let out = compose_elementwise_mlp(&mut g, hg, hm, &b, Activation::Relu).unwrap();
        assert_eq!(g.value(out).data(), &[0., 2.]);
        let zero = g.constant(Tensor::zeros(&[1, 2]));
        let s = compose_summation(&mut g, hg, zero).unwrap();
        assert_eq!(g.value(s).data(), g.value(hg).data());
        let s = compose_summation(&mut g, hg, hm).unwrap();
        assert_eq!(g.value(s).data(), &[4., -5.]);

        // a1 = 1 only → constant 1
        let mut store = ParamStore::<f64>::new();
        let b = block(&mut store, 1, 1, AttentionKind::Sigmoid, CompositionKind::ElementwiseMlp);
        set(&mut store, b.a[0], &[1.]);
        set(&mut store, b.a[2], &[0.]);
        set(&mut store, b.c[2], &[0.]);
        let mut g = Graph::new(&store);
        let hg = g.constant(Tensor::from_f64(&[1, 1], &[3.]).unwrap());
        let hm = g.constant(Tensor::from_f64(&[1, 1], &[2.]).unwrap());
        let out = compose_elementwise_mlp(&mut g, hg, hm, &b, Activation::Identity).unwrap();
        assert_eq!(g.value(out).data(), &[1.]);

        // a2 = 1, b1 = 1, c-vectors 0, h_m = 2 → 2 + σ(0) = 2.5
        set(&mut store, b.a[0], &[0.]);
        set(&mut store, b.a[1], &[1.]);
        set(&mut store, b.b1, &[1.]);
        let mut g = Graph::new(&store);
        let hg = g.constant(Tensor::from_f64(&[1, 1], &[3.]).unwrap());
        let hm = g.constant(Tensor::from_f64(&[1, 1], &[2.]).unwrap());
        let out = compose_elementwise_mlp(&mut g, hg, hm, &b, Activation::Identity).unwrap();
        assert_eq!(g.value(out).data(), &[2.5]);
        let bad = g.constant(Tensor::zeros(&[1, 2]));
        assert!(compose_summation(&mut g, hg, bad).is_err());
    }

    fn two_unit_layer(store: &mut ParamStore<f64>, comp: CompositionKind) -> MemoryLayer {
        let dense = Dense::new(store, "l", 2, 2).unwrap();
        let memory = Some(block(store, 2, 2, AttentionKind::Sigmoid, comp));
        MemoryLayer { dense, norm: None, memory }
    }

    #[test]
    fn init_identity_and_disabling() {
        let mut store = ParamStore::<f64>::new();
        let layer = two_unit_layer(&mut store, CompositionKind::ElementwiseMlp);
        set(&mut store, layer.dense.weight, &[0.5, -1.0, 2.0, 0.25]);
        set(&mut store, layer.dense.bias, &[0.1, -0.3]);
        let mb = layer.memory.as_ref().unwrap();
        set(&mut store, mb.memory, &[3., -1., 0.5, 2.]);
        set(&mut store, mb.attention, &[1., 2., -1., 0.5]);
        set(&mut store, mb.attention_bias, &[0.2, -0.4]);
        let mut g = Graph::new(&store);
        let x = g.constant(Tensor::from_f64(&[3, 2], &[1., 2., -1., 0.5, 0.3, -2.]).unwrap());
        let plain = layer.dense.forward(&mut g, x, Activation::Relu).unwrap();
        let out = layer.forward(&mut g, x, Mode::Train, false).unwrap();
        assert_eq!(g.value(out.h_out), g.value(plain));
        let off = layer.forward(&mut g, x, Mode::Train, true).unwrap();
        assert_eq!(g.value(off.h_out), g.value(plain));
        assert!(off.h_a.is_none());

        let mut store = ParamStore::<f64>::new();
        let layer = two_unit_layer(&mut store, CompositionKind::Summation);
        set(&mut store, layer.dense.weight, &[0.5, -1.0, 2.0, 0.25]);
        set(&mut store, layer.memory.as_ref().unwrap().memory, &[3., -1., 0.5, 2.]);
        let mut g = Graph::new(&store);
        let x = g.constant(Tensor::from_f64(&[1, 2], &[1., 2.]).unwrap());
        let plain = layer.dense.forward(&mut g, x, Activation::Relu).unwrap();
        let off = layer.forward(&mut g, x, Mode::Train, true).unwrap();
        assert_eq!(g.value(off.h_out), g.value(plain));
    }

    #[test]
    fn full_layer_matches_scalar_trace() {
        let mut store = ParamStore::<f64>::new();
        let layer = two_unit_layer(&mut store, CompositionKind::ElementwiseMlp);
        let w = [0.5, -1.0, 2.0, 0.25];
        let bg = [0.1, -0.3];
        let m = [3., -1., 0.5, 2.]; // row-major [width × slots]
        let a_mat = [1., 2., -1., 0.5];
        let ba = [0.2, -0.4];
        let av = [[0.1, 0.2], [0.3, -0.2], [0.9, 1.1], [0.05, -0.1]];
        let b1 = [0.4, -0.6];
        let cv = [[-0.1, 0.2], [0.3, 0.1], [1.0, 0.7], [0.2, 0.05]];
        set(&mut store, layer.dense.weight, &w);
        set(&mut store, layer.dense.bias, &bg);
        let mb = layer.memory.clone().unwrap();
        set(&mut store, mb.memory, &m);
        set(&mut store, mb.attention, &a_mat);
        set(&mut store, mb.attention_bias, &ba);
        for i in 0..4 {
            set(&mut store, mb.a[i], &av[i]);
            set(&mut store, mb.c[i], &cv[i]);
        }
        set(&mut store, mb.b1, &b1);
        let x = [1.0, 2.0];

        // scalar trace
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let hg: Vec<f64> = (0..2).map(|o| (w[o * 2] * x[0] + w[o * 2 + 1] * x[1] + bg[o]).max(0.0)).collect();
        let ha: Vec<f64> = (0..2).map(|s| sig(a_mat[s * 2] * hg[0] + a_mat[s * 2 + 1] * hg[1] + ba[s])).collect();
        let hm: Vec<f64> = (0..2).map(|d| m[d * 2] * ha[0] + m[d * 2 + 1] * ha[1]).collect();
        let expect: Vec<f64> = (0..2)
            .map(|d| {
                let a = av[0][d] + av[1][d] * hm[d] + av[2][d] * hg[d] + av[3][d] * hg[d] * hm[d];
                let c = sig(cv[0][d] + cv[1][d] * hm[d] + cv[2][d] * hg[d] + cv[3][d] * hg[d] * hm[d]);
                (a + b1[d] * c).max(0.0)
            })
            .collect();

        let mut g = Graph::new(&store);
        let xv = g.constant(Tensor::from_f64(&[1, 2], &x).unwrap());
        let out = layer.forward(&mut g, xv, Mode::Eval, false).unwrap();
        for (got, want) in g.value(out.h_out).data().iter().zip(&expect) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
        for (got, want) in g.value(out.h_a.unwrap()).data().iter().zip(&ha) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn memory_layer_gradients_match_finite_differences() {
        for comp in [CompositionKind::ElementwiseMlp, CompositionKind::Summation] {
            for att in [AttentionKind::Sigmoid, AttentionKind::Softmax] {
                let mut store = ParamStore::<f64>::new();
                let dense = Dense::new(&mut store, "l", 3, 4).unwrap();
                let norm = Some(BatchNorm::new(&mut store, "l.bn", 4).unwrap());
                let memory = Some(MemoryBlock::new(&mut store, "l.mem", 4, 3, att, comp).unwrap());
                let layer = MemoryLayer { dense, norm, memory };
                let mut rng = RngStream::new(11, "layer-fd");
                for id in store.trainable_ids().collect::<Vec<_>>() {
                    let shape = store.get(id).shape().to_vec();
                    let noise: Tensor<f64> = rng.draw(crate::autodiff::Distribution::Gaussian, &shape).unwrap();
                    let base = store.get(id).clone();
                    let v = Tensor::from_fn(&shape, |i| base.data()[i] + 0.5 * noise.data()[i]);
                    store.set(id, v).unwrap();
                }
                let x: Tensor<f64> = rng.draw(crate::autodiff::Distribution::Gaussian, &[5, 3]).unwrap();
                let weights: Tensor<f64> = rng.draw(crate::autodiff::Distribution::Gaussian, &[5, 4]).unwrap();
                let loss_of = |s: &ParamStore<f64>| -> Result<(f64, crate::autodiff::Gradients<f64>)> {
                    let mut g = Graph::new(s);
                    let xv = g.constant(x.clone());
                    let out = layer.forward(&mut g, xv, Mode::Train, false)?;
                    let wv = g.constant(weights.clone());
                    let prod = g.mul(out.h_out, wv)?;
                    let loss = g.sum_all(prod)?;
                    Ok((g.value(loss).item(), g.backward(loss)?))
                };
                let (_, grads) = loss_of(&store).unwrap();
                let report = check_gradients(
                    &store,
                    |s| loss_of(s).map(|(l, _)| l),
                    |id| grads.param(id).data().to_vec(),
                    1e-5,
                    1e-4,
                    1e-9,
                )
                .unwrap();
                assert!(report.passed(), "{comp:?}/{att:?}: {:?}", &report.mismatches[..report.mismatches.len().min(5)]);
            }
        }
    }
}
