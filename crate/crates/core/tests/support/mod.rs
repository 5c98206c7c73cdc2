//! Helpers shared by the integration tests and the acceptance suite.
#![allow(dead_code)]

pub mod grads;
pub mod oracles;
pub mod zca;
