//! Missing-anchor position predictor.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{Binder, Initializer, Mlp, ParamStore};
use crate::scalar::Scalar;
use crate::vn::{ops, MlpSpec, VnInv, VnMlp};

use super::config::ModelConfig;

#[derive(Clone, Debug)]
pub struct Predictor {
    pub lift: VnMlp,
    pub inv: VnInv,
    /// Invariant regression `3·C_g → 3·M`.
    pub mlp: Mlp,
    missing: usize,
}

pub struct Prediction<'t, S: Scalar> {
    /// Missing anchor positions `[M, 3]`.
    pub positions: Var<'t, S>,
    /// Global feature `X_g: [C_g, 3]`.
    pub global: Var<'t, S>,
    /// Frame `T: [3, 3]` of the global feature.
    pub frame: Var<'t, S>,
    pub perturbed: usize,
}

impl Predictor {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, init: &mut Initializer, cfg: &ModelConfig) -> Result<Self> {
        let cg = cfg.global_channels;
        let spec = MlpSpec::new(&[cfg.channels, cg]).bias(cfg.vn_bias).norm(cfg.norm).activate_last(true);
        Ok(Self {
            lift: VnMlp::new(store, init, "predictor.lift", &spec)?,
            inv: VnInv::new(store, init, "predictor.inv", cg, true)?,
            mlp: Mlp::new(store, init, "predictor.mlp", &[3 * cg, cfg.hidden, cfg.hidden, 3 * cfg.missing]),
            missing: cfg.missing,
        })
    }

    /// Pools anchor features `[N, C, 3]` into `X_g`, regresses canonical
    /// coordinates from `VN-Inv(X_g)` and maps them back with `T`.
    pub fn forward<'t, S: Scalar>(&self, b: &Binder<'t, S>, features: Var<'t, S>) -> Result<Prediction<'t, S>> {
        if features.shape().first().is_none_or(|&n| n == 0) {
            return Err(Error::Empty("missing-position predictor needs anchors".into()));
        }
        let global = ops::vn_mean_pool(self.lift.forward(b, features)?, 0)?;
        let inv = self.inv.forward(b, global)?;
        let cg = global.shape()[0];
        let canonical = self.mlp.forward(b, inv.features.reshape(&[1, 3 * cg]))?.reshape(&[self.missing, 3]);
        Ok(Prediction {
            positions: ops::from_frame(canonical, inv.frame),
            global,
            frame: inv.frame,
            perturbed: inv.perturbed,
        })
    }

    /// Zeroes the final regression layer so every prediction sits at the origin.
    pub fn zero_output<S: Scalar>(&self, store: &mut ParamStore<S>) {
        if let Some(l) = self.mlp.last() {
            l.zero(store);
        }
    }
}
