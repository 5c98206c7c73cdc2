//! Vector Neuron operators and layers.
//!
//! A VN feature is a `[.., C, 3]` tensor of `C` channel vectors. Rotations act
//! by right-multiplication, so every layer here satisfies `f(X·R) = f(X)·R`
//! (or `f(X·R) = f(X)` for the invariant outputs of [`VnInv`]).

pub mod layers;
pub mod ops;

pub use layers::{
    Invariant, MlpSpec, NormKind, VnBatchNorm, VnEdgeConv, VnInv, VnLinear, VnMaxPool, VnMlp, VnNorm, VnRelu,
};
