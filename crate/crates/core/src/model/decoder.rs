//! Local rotation-invariant fine decoder.

use crate::autodiff::{concat, Var};
use crate::error::Result;
use crate::nn::{Binder, Initializer, Mlp, ParamStore};
use crate::scalar::Scalar;
use crate::vn::{ops, VnInv};

use super::backbone::AnchorSet;
use super::config::ModelConfig;

/// Per anchor: a shared VN-Inv gives an invariant feature and a frame `T`;
/// a coarse head emits seed offsets, a refinement head spreads each seed,
/// and the patch is mapped back by `T` around the anchor position.
#[derive(Clone, Debug)]
pub struct FineDecoder {
    pub inv: VnInv,
    pub coarse: Mlp,
    pub refine: Mlp,
    seeds: usize,
    spread: usize,
    channels: usize,
}

impl FineDecoder {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, init: &mut Initializer, cfg: &ModelConfig) -> Result<Self> {
        let c = cfg.channels;
        let spread = cfg.refine_spread();
        let seeds = cfg.points_per_anchor / spread;
        Ok(Self {
            inv: VnInv::new(store, init, "decoder.inv", c, true)?,
            coarse: Mlp::new(store, init, "decoder.coarse", &[3 * c, cfg.hidden, 3 * seeds]),
            refine: Mlp::new(store, init, "decoder.refine", &[3 * c + 3, cfg.hidden, 3 * spread]),
            seeds,
            spread,
            channels: c,
        })
    }

    pub fn points_per_anchor(&self) -> usize {
        self.seeds * self.spread
    }

    /// Dense points `[K·points_per_anchor, 3]`, patch by patch in anchor order.
    pub fn forward<'t, S: Scalar>(&self, b: &Binder<'t, S>, anchors: &AnchorSet<'t, S>) -> Result<(Var<'t, S>, usize)> {
        let (a, c, s, r) = (anchors.len(), self.channels, self.seeds, self.spread);
        let inv = self.inv.forward(b, anchors.features)?;
        let flat = inv.features.reshape(&[a, 3 * c]);
        let seeds = self.coarse.forward(b, flat)?.reshape(&[a, s, 3]);
        let cond = flat.reshape(&[a, 1, 3 * c]).broadcast_to(&[a, s, 3 * c]);
        let offsets = self.refine.forward(b, concat(&[cond, seeds], 2))?.reshape(&[a, s, r, 3]);
        let local = offsets.add(seeds.reshape(&[a, s, 1, 3])).reshape(&[a, s * r, 3]);
        let patches = ops::from_frame(local, inv.frame).add(anchors.positions.reshape(&[a, 1, 3]));
        Ok((patches.reshape(&[a * s * r, 3]), inv.perturbed))
    }

    /// Zeroes both heads so every patch collapses onto its anchor.
    pub fn zero_output<S: Scalar>(&self, store: &mut ParamStore<S>) {
        for mlp in [&self.coarse, &self.refine] {
            if let Some(l) = mlp.last() {
                l.zero(store);
            }
        }
    }
}
