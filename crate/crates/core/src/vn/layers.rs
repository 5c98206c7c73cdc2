//! Parameterised Vector Neuron layers built from [`super::ops`].

use serde::{Deserialize, Serialize};

use crate::autodiff::{concat, Var};
use crate::error::{shape_err, Result};
use crate::geometry::knn_indices;
use crate::linalg::WHITENING_EPS;
use crate::nn::params::{Binder, Initializer, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::ops;

/// VN-Linear with the optional equivariant bias.
#[derive(Clone, Debug)]
pub struct VnLinear {
    pub weight: ParamId,
    /// `(W_B: [3, C], B: [C', 3])`
    pub bias: Option<(ParamId, ParamId)>,
    pub inputs: usize,
    pub outputs: usize,
}

impl VnLinear {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        init: &mut Initializer,
        name: &str,
        inputs: usize,
        outputs: usize,
        bias: bool,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), init.fan_in(&[outputs, inputs], inputs));
        let bias = bias.then(|| {
            let wb = store.add(format!("{name}.bias_map"), init.fan_in(&[3, inputs], inputs));
            let b = store.add(format!("{name}.bias"), Tensor::zeros(&[outputs, 3]));
            (wb, b)
        });
        Self { weight, bias, inputs, outputs }
    }

    pub fn forward<'t, S: Scalar>(&self, b: &Binder<'t, S>, x: Var<'t, S>) -> Result<Var<'t, S>> {
        ops::check_vn(&x.shape(), Some(self.inputs), "vn_linear")?;
        let y = ops::vn_linear(x, b.var(self.weight));
        Ok(match self.bias {
            Some((wb, bb)) => y.add(ops::vn_bias(x, b.var(wb), b.var(bb))),
            None => y,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.weight];
        if let Some((wb, bb)) = self.bias {
            ids.extend([wb, bb]);
        }
        ids
    }

    /// Sets `W` (and `B`) to zero so the layer maps everything to zero.
    pub fn zero<S: Scalar>(&self, store: &mut ParamStore<S>) {
        let mut ids = vec![self.weight];
        if let Some((_, bb)) = self.bias {
            ids.push(bb);
        }
        for id in ids {
            let t = store.get_mut(id);
            *t = Tensor::zeros(t.shape());
        }
    }
}

/// VN-ReLU whose per-channel directions come from a bias-free `C → C` VN-Linear.
#[derive(Clone, Debug)]
pub struct VnRelu {
    pub direction: VnLinear,
}

impl VnRelu {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, init: &mut Initializer, name: &str, channels: usize) -> Self {
        Self { direction: VnLinear::new(store, init, &format!("{name}.dir"), channels, channels, false) }
    }

    pub fn forward<'t, S: Scalar>(&self, b: &Binder<'t, S>, x: Var<'t, S>) -> Result<Var<'t, S>> {
        let k = self.direction.forward(b, x)?;
        Ok(ops::vn_relu(x, k))
    }
}

/// Which normalisation a VN-MLP stage applies.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    #[default]
    Zca,
    TwoNorm,
    Batch,
    None,
}

#[derive(Clone, Debug)]
pub enum VnNorm {
    Zca { alpha: ParamId },
    TwoNorm { scale: ParamId },
    Batch { gamma: ParamId },
}

impl VnNorm {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, kind: NormKind, channels: usize) -> Option<Self> {
        let ones = || Tensor::ones(&[channels, 1]);
        match kind {
            NormKind::Zca => Some(Self::Zca { alpha: store.add(format!("{name}.alpha"), ones()) }),
            NormKind::TwoNorm => Some(Self::TwoNorm { scale: store.add(format!("{name}.scale"), ones()) }),
            NormKind::Batch => Some(Self::Batch { gamma: store.add(format!("{name}.gamma"), ones()) }),
            NormKind::None => None,
        }
    }

    pub fn forward<'t, S: Scalar>(&self, b: &Binder<'t, S>, x: Var<'t, S>) -> Result<Var<'t, S>> {
        match *self {
            Self::Zca { alpha } => b.zca_layer_norm(x, b.var(alpha), S::lit(WHITENING_EPS)),
            Self::TwoNorm { scale } => ops::vn_layer_norm_2norm(x, b.var(scale)),
            Self::Batch { gamma } => ops::vn_batch_norm(x, b.var(gamma), None),
        }
    }
}

/// VN-BatchNorm with running statistics for evaluation.
#[derive(Clone, Debug)]
pub struct VnBatchNorm<S: Scalar> {
    pub gamma: ParamId,
    /// Running mean channel norm `[C, 1]`.
    pub running: Tensor<S>,
    pub momentum: S,
    seen: bool,
}

impl<S: Scalar> VnBatchNorm<S> {
    pub fn new(store: &mut ParamStore<S>, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[channels, 1])),
            running: Tensor::ones(&[channels, 1]),
            momentum: S::lit(0.1),
            seen: false,
        }
    }

    /// Training-mode step: normalises with batch statistics and updates the running mean.
    pub fn forward_train<'t>(&mut self, b: &Binder<'t, S>, x: Var<'t, S>) -> Result<Var<'t, S>> {
        let out = ops::vn_batch_norm(x, b.var(self.gamma), None)?;
        let stat = ops::batch_norm_statistic(&x.value());
        self.running = if self.seen {
            self.running.scale(S::one() - self.momentum).add(&stat.scale(self.momentum))
        } else {
            stat
        };
        self.seen = true;
        Ok(out)
    }

    pub fn forward_eval<'t>(&self, b: &Binder<'t, S>, x: Var<'t, S>) -> Result<Var<'t, S>> {
        ops::vn_batch_norm(x, b.var(self.gamma), Some(&self.running))
    }
}

/// Layout of a [`VnMlp`].
#[derive(Clone, Debug)]
pub struct MlpSpec {
    /// Channel counts, input first. A single entry is the identity.
    pub dims: Vec<usize>,
    pub bias: bool,
    pub norm: NormKind,
    /// Apply norm + ReLU after the final linear stage too.
    pub activate_last: bool,
    pub residual: bool,
}

impl MlpSpec {
    pub fn new(dims: &[usize]) -> Self {
        Self { dims: dims.to_vec(), bias: false, norm: NormKind::None, activate_last: false, residual: false }
    }

    pub fn bias(mut self, on: bool) -> Self {
        self.bias = on;
        self
    }

    pub fn norm(mut self, kind: NormKind) -> Self {
        self.norm = kind;
        self
    }

    pub fn activate_last(mut self, on: bool) -> Self {
        self.activate_last = on;
        self
    }

    pub fn residual(mut self, on: bool) -> Self {
        self.residual = on;
        self
    }
}

#[derive(Clone, Debug)]
pub struct VnStage {
    pub linear: VnLinear,
    pub norm: Option<VnNorm>,
    pub relu: Option<VnRelu>,
}

/// Sequence of (VN-Linear, normalisation, VN-ReLU) stages.
#[derive(Clone, Debug)]
pub struct VnMlp {
    pub stages: Vec<VnStage>,
    pub residual: bool,
    pub inputs: usize,
}

impl VnMlp {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, init: &mut Initializer, name: &str, spec: &MlpSpec) -> Result<Self> {
        if spec.dims.is_empty() {
            return shape_err("VN-MLP needs at least an input width");
        }
        let (first, last) = (spec.dims[0], *spec.dims.last().expect("non-empty"));
        if spec.residual && first != last {
            return shape_err(format!("residual VN-MLP needs equal widths, got {first} -> {last}"));
        }
        let n = spec.dims.len() - 1;
        let stages = spec
            .dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let stage = format!("{name}.{i}");
                let act = i + 1 < n || spec.activate_last;
                VnStage {
                    linear: VnLinear::new(store, init, &format!("{stage}.lin"), w[0], w[1], spec.bias),
                    norm: if act { VnNorm::new(store, &format!("{stage}.norm"), spec.norm, w[1]) } else { None },
                    relu: act.then(|| VnRelu::new(store, init, &format!("{stage}.relu"), w[1])),
                }
            })
            .collect();
        Ok(Self { stages, residual: spec.residual, inputs: first })
    }

    pub fn outputs(&self) -> usize {
        self.stages.last().map_or(self.inputs, |s| s.linear.outputs)
    }

    pub fn forward<'t, S: Scalar>(&self, b: &Binder<'t, S>, x: Var<'t, S>) -> Result<Var<'t, S>> {
        let mut h = x;
        for stage in &self.stages {
            h = stage.linear.forward(b, h)?;
            if let Some(norm) = &stage.norm {
                h = norm.forward(b, h)?;
            }
            if let Some(relu) = &stage.relu {
                h = relu.forward(b, h)?;
            }
        }
        Ok(if self.residual && !self.stages.is_empty() { h.add(x) } else { h })
    }

    /// Zeroes the final linear stage so the MLP (without residual) outputs zero.
    pub fn zero_output<S: Scalar>(&self, store: &mut ParamStore<S>) {
        if let Some(s) = self.stages.last() {
            s.linear.zero(store);
        }
    }
}

/// Output of [`VnInv::forward`].
pub struct Invariant<'t, S: Scalar> {
    /// `X·Tᵀ`, unchanged when the input rotates.
    pub features: Var<'t, S>,
    /// `T: [.., 3, 3]`, transforms as `T·R`.
    pub frame: Var<'t, S>,
    /// Count of frames perturbed because the raw transform was rank deficient.
    pub perturbed: usize,
}

/// VN-Inv: a VN-MLP `C → ... → 3` yields a frame `T`; features become `X·Tᵀ`.
#[derive(Clone, Debug)]
pub struct VnInv {
    pub mlp: VnMlp,
    pub orthonormalize: bool,
}

impl VnInv {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        init: &mut Initializer,
        name: &str,
        channels: usize,
        orthonormalize: bool,
    ) -> Result<Self> {
        let hidden = (channels / 2).max(3);
        let spec = MlpSpec::new(&[channels, hidden, 3]);
        Ok(Self { mlp: VnMlp::new(store, init, &format!("{name}.frame"), &spec)?, orthonormalize })
    }

    /// A VN-Inv whose frame network is the given MLP.
    pub fn with_mlp(mlp: VnMlp, orthonormalize: bool) -> Self {
        Self { mlp, orthonormalize }
    }

    pub fn forward<'t, S: Scalar>(&self, b: &Binder<'t, S>, x: Var<'t, S>) -> Result<Invariant<'t, S>> {
        ops::check_vn(&x.shape(), Some(self.mlp.inputs), "vn_invariant")?;
        if self.mlp.outputs() != 3 {
            return shape_err(format!("VN-Inv frame network must emit 3 channels, emits {}", self.mlp.outputs()));
        }
        let raw = self.mlp.forward(b, x)?;
        let (frame, perturbed) = if self.orthonormalize {
            let f = ops::gram_schmidt_frames(raw);
            (f.frames, f.perturbed)
        } else {
            (raw, 0)
        };
        Ok(Invariant { features: ops::to_frame(x, frame), frame, perturbed })
    }
}

/// Learned `C → C` direction map for VN-MaxPooling.
#[derive(Clone, Debug)]
pub struct VnMaxPool {
    pub direction: VnLinear,
}

impl VnMaxPool {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, init: &mut Initializer, name: &str, channels: usize) -> Self {
        Self { direction: VnLinear::new(store, init, &format!("{name}.dir"), channels, channels, false) }
    }

    pub fn forward<'t, S: Scalar>(&self, b: &Binder<'t, S>, xs: Var<'t, S>) -> Result<Var<'t, S>> {
        let dirs = self.direction.forward(b, xs)?;
        ops::vn_max_pool(xs, dirs)
    }
}

/// VN-EdgeConv: per query point, edge features `[center, neighbor − center]`
/// over its k nearest source points go through a shared VN-MLP and are
/// mean-pooled.
#[derive(Clone, Debug)]
pub struct VnEdgeConv {
    pub mlp: VnMlp,
    pub k: usize,
}

impl VnEdgeConv {
    /// `channels` is the per-point input width (1 for raw coordinates).
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        init: &mut Initializer,
        name: &str,
        channels: usize,
        spec_tail: &MlpSpec,
        k: usize,
    ) -> Result<Self> {
        let mut spec = spec_tail.clone();
        spec.dims.insert(0, 2 * channels);
        Ok(Self { mlp: VnMlp::new(store, init, &format!("{name}.mlp"), &spec)?, k })
    }

    /// Edge convolution with query and source sets given as point
    /// coordinates `[Q, 3]` / `[S, 3]` and optional features `[Q, C, 3]` /
    /// `[S, C, 3]`. Without features the coordinates act as 1-channel features.
    pub fn forward<'t, S: Scalar>(
        &self,
        b: &Binder<'t, S>,
        query_points: Var<'t, S>,
        source_points: Var<'t, S>,
        features: Option<(Var<'t, S>, Var<'t, S>)>,
    ) -> Result<Var<'t, S>> {
        let qp = query_points.value();
        let sp = source_points.value();
        if qp.ndim() != 2 || qp.shape()[1] != 3 || sp.ndim() != 2 || sp.shape()[1] != 3 {
            return shape_err(format!("edge conv needs [n, 3] points, got {:?} / {:?}", qp.shape(), sp.shape()));
        }
        let (q, s) = (qp.shape()[0], sp.shape()[0]);
        if s == 0 {
            return Err(crate::Error::Empty("edge conv with no source points".into()));
        }
        let k = self.k.clamp(1, s);
        let nbrs = knn_indices(&qp, &sp, s, k);
        let (qf, sf) = match features {
            Some((qf, sf)) => (qf, sf),
            None => (query_points.reshape(&[q, 1, 3]), source_points.reshape(&[s, 1, 3])),
        };
        let c = qf.shape()[1];
        if qf.shape() != [q, c, 3] || sf.shape() != [s, c, 3] {
            return shape_err(format!("edge conv feature shapes {:?} / {:?}", qf.shape(), sf.shape()));
        }
        let flat: Vec<usize> = nbrs.into_iter().flatten().collect();
        let neighbors = sf.index_select(&flat).reshape(&[q, k, c, 3]);
        let center = qf.reshape(&[q, 1, c, 3]).broadcast_to(&[q, k, c, 3]);
        let edges = concat(&[center, neighbors.sub(center)], 2);
        let h = self.mlp.forward(b, edges)?;
        ops::vn_mean_pool(h, 1)
    }
}
