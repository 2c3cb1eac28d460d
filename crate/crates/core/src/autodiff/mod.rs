//! Tensors, the differentiation tape, parameter storage and seeded random
//! streams. Everything downstream is built from these.

pub mod check;
pub mod graph;
pub mod ops;
pub mod params;
pub mod rng;
pub mod tensor;

pub use graph::{BatchNormSite, Gradients, Graph, Var};
pub use ops::{BinaryKind, Nonlinearity, ReduceKind};
pub use params::{ParamId, ParamStore};
pub use rng::{Distribution, RngState, RngStream};
pub use tensor::{Precision, Real, Tensor};
