//! The completion network: backbone, missing-anchor predictor, anchor
//! transformer and fine decoder.

pub mod attention;
pub mod backbone;
pub mod config;
pub mod decoder;
pub mod predictor;

pub use attention::{Block, CwsaHead, Matr, MultiHeadCwsa};
pub use backbone::{AnchorSet, Backbone, BackboneOutput, Rpe};
pub use config::{ModelConfig, StageConfig};
pub use decoder::FineDecoder;
pub use predictor::{Prediction, Predictor};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::nn::{Binder, Initializer, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Everything a forward pass produces, still on the tape.
pub struct Forward<'t, S: Scalar> {
    pub observed: AnchorSet<'t, S>,
    pub predicted: AnchorSet<'t, S>,
    pub global: Var<'t, S>,
    /// Frame of the global feature used to place the missing anchors.
    pub frame: Var<'t, S>,
    /// Dense completion `[(N + M)·points_per_anchor, 3]`.
    pub fine: Var<'t, S>,
    /// Input rows chosen as observed anchors.
    pub anchor_indices: Vec<usize>,
    /// Rank-deficient frames that were perturbed along the way.
    pub perturbed: usize,
}

impl<'t, S: Scalar> Forward<'t, S> {
    /// Observed followed by predicted anchors.
    pub fn anchors(&self) -> AnchorSet<'t, S> {
        self.observed.union(&self.predicted)
    }
}

/// Network parameters together with the module layout that reads them.
#[derive(Clone, Debug)]
pub struct Revnet<S: Scalar> {
    config: ModelConfig,
    store: ParamStore<S>,
    pub backbone: Backbone,
    pub predictor: Predictor,
    pub matr: Matr,
    pub decoder: FineDecoder,
}

impl<S: Scalar> Revnet<S> {
    /// Randomly initialised network; the same seed gives the same parameters.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut init = Initializer::new(seed);
        let backbone = Backbone::new(&mut store, &mut init, &config)?;
        let predictor = Predictor::new(&mut store, &mut init, &config)?;
        let matr = Matr::new(&mut store, &mut init, &config)?;
        let decoder = FineDecoder::new(&mut store, &mut init, &config)?;
        Ok(Self { config, store, backbone, predictor, matr, decoder })
    }

    /// Rebuilds the layout for `config` and installs the given parameters.
    pub fn from_params(config: ModelConfig, named: Vec<(String, Tensor<S>)>) -> Result<Self> {
        let mut net = Self::new(config, 0)?;
        net.store.load(named)?;
        Ok(net)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<S> {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.store
    }

    /// Forward pass over the valid points `[n, 3]` of an observed cloud.
    pub fn forward<'t>(&self, b: &Binder<'t, S>, points: Var<'t, S>) -> Result<Forward<'t, S>> {
        let n = points.shape()[0];
        if n < self.config.observed {
            return Err(Error::Precondition(format!(
                "cloud has {n} valid points but the model extracts {} anchors",
                self.config.observed
            )));
        }
        let base = self.backbone.forward(b, points)?;
        let observed = base.anchors;
        let pred = self.predictor.forward(b, observed.features)?;
        let features = self.matr.forward(b, observed.positions, observed.features, pred.positions, pred.global)?;
        let predicted = AnchorSet { positions: pred.positions, features };
        let (fine, decoded) = self.decoder.forward(b, &observed.union(&predicted))?;
        Ok(Forward {
            observed,
            predicted,
            global: pred.global,
            frame: pred.frame,
            fine,
            anchor_indices: base.indices,
            perturbed: pred.perturbed + decoded,
        })
    }

    /// Inference on a cloud; returns the dense completion.
    pub fn complete(&self, cloud: &PointCloud<S>) -> Result<PointCloud<S>> {
        Ok(self.complete_with_anchors(cloud)?.1)
    }

    /// Inference returning `(all anchor positions, dense completion)`.
    pub fn complete_with_anchors(&self, cloud: &PointCloud<S>) -> Result<(PointCloud<S>, PointCloud<S>)> {
        let tape = Tape::new();
        let b = Binder::frozen(&tape, &self.store);
        let out = self.forward(&b, tape.constant(cloud.valid_points()))?;
        let anchors = PointCloud::new(out.anchors().positions.value().as_ref().clone())?;
        let fine = PointCloud::new(out.fine.value().as_ref().clone())?;
        Ok((anchors, fine))
    }

    /// Zeroes the attention output projections and the last FFN layer of
    /// every transformer block, making each block an identity map.
    pub fn zero_output_projections(&mut self) {
        self.matr.zero_output_projections(&mut self.store);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::so3::Rotation;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud(n: usize, seed: u64) -> PointCloud<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PointCloud::new(Tensor::from_fn(&[n, 3], |_| rng.random_range(-1.0..1.0))).unwrap()
    }

    #[test]
    fn tiny_output_size() {
        let net = Revnet::<f64>::new(ModelConfig::tiny(), 1).unwrap();
        let out = net.complete(&cloud(64, 2)).unwrap();
        assert_eq!(out.points().shape(), &[32, 3]);
    }

    #[test]
    fn repeated_calls_bit_identical() {
        let net = Revnet::<f64>::new(ModelConfig::tiny(), 1).unwrap();
        let c = cloud(64, 3);
        assert_eq!(net.complete(&c).unwrap(), net.complete(&c).unwrap());
    }

    #[test]
    fn too_few_points() {
        let net = Revnet::<f64>::new(ModelConfig::tiny(), 1).unwrap();
        assert!(matches!(net.complete(&cloud(5, 3)), Err(Error::Precondition(_))));
    }

    #[test]
    fn rotation_replay() {
        let net = Revnet::<f64>::new(ModelConfig::tiny(), 4).unwrap();
        let c = cloud(64, 5);
        let r = Rotation::random(6);
        let (a, f) = net.complete_with_anchors(&c).unwrap();
        let (ar, fr) = net.complete_with_anchors(&c.rotated(&r)).unwrap();
        let rel = |x: &PointCloud<f64>, y: &PointCloud<f64>| {
            r.apply(x.points()).max_abs_diff(y.points()) / (x.points().max_abs() + 1e-12)
        };
        assert!(rel(&f, &fr) <= 1e-6, "fine {}", rel(&f, &fr));
        assert!(rel(&a, &ar) <= 1e-6, "anchors {}", rel(&a, &ar));
    }
}
