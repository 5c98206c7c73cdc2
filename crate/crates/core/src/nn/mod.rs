//! Parameter storage and conventional dense layers.

pub mod dense;
pub mod params;

pub use dense::{Dense, Mlp};
pub use params::{Binder, Initializer, ParamId, ParamStore};
