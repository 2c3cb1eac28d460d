//! Counter-based random streams split by string label.
//!
//! Each stream is a ChaCha20 keystream keyed by the 64-bit seed, with the
//! ChaCha stream id derived from the label. The counter counts 64-bit words
//! consumed, so `(seed, label, counter)` pins the next draw exactly.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Serializable position of an [`RngStream`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub label: String,
    pub counter: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Distribution {
    Uniform01,
    Gaussian,
    Bernoulli(f64),
}

#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    label: String,
    counter: u64,
    core: ChaCha20Rng,
}

/// FNV-1a, used only to turn labels into ChaCha stream ids.
fn label_id(label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl RngStream {
    pub fn new(seed: u64, label: impl Into<String>) -> Self {
        Self::at(seed, label, 0)
    }

    pub fn at(seed: u64, label: impl Into<String>, counter: u64) -> Self {
        let label = label.into();
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&seed.to_le_bytes());
        let mut core = ChaCha20Rng::from_seed(key);
        core.set_stream(label_id(&label));
        core.set_word_pos(2 * counter as u128);
        Self { seed, label, counter, core }
    }

    pub fn from_state(state: &RngState) -> Self {
        Self::at(state.seed, state.label.clone(), state.counter)
    }

    pub fn state(&self) -> RngState {
        RngState { seed: self.seed, label: self.label.clone(), counter: self.counter }
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn counter(&self) -> u64 {
        self.counter
    }

    /// An independent child stream `"{label}/{suffix}"` starting at counter 0.
    pub fn fork(&self, suffix: impl std::fmt::Display) -> Self {
        Self::new(self.seed, format!("{}/{}", self.label, suffix))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter += 1;
        self.core.next_u64()
    }

    /// Uniform on `[0, 1)` with 53 random bits.
    pub fn uniform01(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        // multiply-shift; bias is below 2^-32 for the sizes used here
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// Box–Muller pair of standard normals.
    pub fn gaussian_pair(&mut self) -> (f64, f64) {
        let u1 = 1.0 - self.uniform01();
        let u2 = self.uniform01();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        (r * theta.cos(), r * theta.sin())
    }

    pub fn gaussians(&mut self, n: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(n + 1);
        while out.len() < n {
            let (a, b) = self.gaussian_pair();
            out.push(a);
            out.push(b);
        }
        out.truncate(n);
        out
    }

    pub fn draw<T: Real>(&mut self, dist: Distribution, shape: &[usize]) -> Result<Tensor<T>> {
        let numel: usize = shape.iter().product();
        let data: Vec<T> = match dist {
            Distribution::Uniform01 => (0..numel).map(|_| T::of(self.uniform01())).collect(),
            Distribution::Gaussian => self.gaussians(numel).into_iter().map(T::of).collect(),
            Distribution::Bernoulli(p) => {
                check_probability(p)?;
                (0..numel).map(|_| if self.uniform01() < p { T::one() } else { T::zero() }).collect()
            }
        };
        Tensor::new(shape, data)
    }

    /// One Bernoulli draw per element of `p`.
    pub fn bernoulli<T: Real>(&mut self, p: &Tensor<T>) -> Result<Tensor<T>> {
        let mut data = Vec::with_capacity(p.numel());
        for &pi in p.data() {
            let pi = pi.as_f64();
            check_probability(pi)?;
            data.push(if self.uniform01() < pi { T::one() } else { T::zero() });
        }
        Tensor::new(p.shape(), data)
    }

    /// Fisher–Yates permutation of `0..n`.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.below(i + 1);
            idx.swap(i, j);
        }
        idx
    }
}

fn check_probability(p: f64) -> Result<()> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::invalid(format!("bernoulli probability {p} outside [0, 1]")))
    }
}
