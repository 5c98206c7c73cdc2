//! Hierarchical VN feature backbone: edge-conv embedding, set abstraction
//! stages with residual VN-MLP blocks, and multi-stage feature fusion.

use crate::autodiff::{concat, Var};
use crate::error::{Error, Result};
use crate::geometry::{fps_indices, knn_indices};
use crate::nn::{Binder, Initializer, ParamStore};
use crate::scalar::Scalar;
use crate::vn::{ops, MlpSpec, VnEdgeConv, VnMlp};

use super::config::ModelConfig;

/// Anchor positions `[K, 3]` with their VN features `[K, C, 3]`.
#[derive(Clone, Copy)]
pub struct AnchorSet<'t, S: Scalar> {
    pub positions: Var<'t, S>,
    pub features: Var<'t, S>,
}

impl<'t, S: Scalar> AnchorSet<'t, S> {
    pub fn len(&self) -> usize {
        self.positions.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Row-wise union `[self; other]`.
    pub fn union(&self, other: &Self) -> Self {
        Self {
            positions: concat(&[self.positions, other.positions], 0),
            features: concat(&[self.features, other.features], 0),
        }
    }
}

/// Relative position encoding `VN-MLP(p_i − p_j)`.
#[derive(Clone, Debug)]
pub struct Rpe {
    pub mlp: VnMlp,
}

impl Rpe {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, init: &mut Initializer, name: &str, channels: usize) -> Result<Self> {
        Self::with_spec(store, init, name, &MlpSpec::new(&[1, channels, channels]))
    }

    /// An RPE with an explicit layout; `spec.dims[0]` must be 1.
    pub fn with_spec<S: Scalar>(store: &mut ParamStore<S>, init: &mut Initializer, name: &str, spec: &MlpSpec) -> Result<Self> {
        if spec.dims.first() != Some(&1) {
            return Err(Error::Shape("RPE input must be a single vector channel".into()));
        }
        Ok(Self { mlp: VnMlp::new(store, init, &format!("{name}.rpe"), spec)? })
    }

    /// Encodes differences `[.., 3]` into `[.., C, 3]`.
    pub fn forward<'t, S: Scalar>(&self, b: &Binder<'t, S>, diff: Var<'t, S>) -> Result<Var<'t, S>> {
        let mut shape = diff.shape();
        shape.insert(shape.len() - 1, 1);
        self.mlp.forward(b, diff.reshape(&shape))
    }

    pub fn pair<'t, S: Scalar>(&self, b: &Binder<'t, S>, p_i: Var<'t, S>, p_j: Var<'t, S>) -> Result<Var<'t, S>> {
        self.forward(b, p_i.sub(p_j))
    }
}

/// Neighborhoods of `centers` within `points` as gathered rows.
struct Grouping {
    flat: Vec<usize>,
    queries: usize,
    k: usize,
}

impl Grouping {
    fn new<S: Scalar>(centers: &Var<'_, S>, points: &Var<'_, S>, k: usize) -> Self {
        let pts = points.value();
        let n = pts.shape()[0];
        let nbrs = knn_indices(&centers.value(), &pts, n, k);
        let k = k.min(n);
        Self { queries: nbrs.len(), flat: nbrs.into_iter().flatten().collect(), k }
    }

    /// Neighbor features `[Q, k, C, 3]` plus RPE of `center − neighbor`, mean-pooled over k.
    fn aggregate<'t, S: Scalar>(
        &self,
        b: &Binder<'t, S>,
        rpe: &Rpe,
        features: Var<'t, S>,
        centers: Var<'t, S>,
        points: Var<'t, S>,
    ) -> Result<Var<'t, S>> {
        let (q, k) = (self.queries, self.k);
        let c = features.shape()[1];
        let grouped = features.index_select(&self.flat).reshape(&[q, k, c, 3]);
        let nbr_pos = points.index_select(&self.flat).reshape(&[q, k, 3]);
        let diff = centers.reshape(&[q, 1, 3]).broadcast_to(&[q, k, 3]).sub(nbr_pos);
        let h = grouped.add(rpe.forward(b, diff)?);
        ops::vn_mean_pool(h, 1)
    }
}

#[derive(Clone, Debug)]
struct ResBlock {
    pre: VnMlp,
    rpe: Rpe,
    post: VnMlp,
}

#[derive(Clone, Debug)]
struct Stage {
    points: usize,
    pre: VnMlp,
    rpe: Rpe,
    blocks: Vec<ResBlock>,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    embed: VnEdgeConv,
    stages: Vec<Stage>,
    fuse: VnMlp,
    k: usize,
}

/// Output of [`Backbone::forward`].
pub struct BackboneOutput<'t, S: Scalar> {
    pub anchors: AnchorSet<'t, S>,
    /// Row of the input cloud each anchor sits on.
    pub indices: Vec<usize>,
}

impl Backbone {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, init: &mut Initializer, cfg: &ModelConfig) -> Result<Self> {
        let feature = |dims: &[usize]| MlpSpec::new(dims).bias(cfg.vn_bias).norm(cfg.norm);
        let embed = VnEdgeConv::new(store, init, "backbone.embed", 1, &feature(&[cfg.embed_channels]).activate_last(true), cfg.k0)?;
        let mut width = cfg.embed_channels;
        let mut fused = width;
        let mut stages = Vec::with_capacity(cfg.stages.len());
        for (s, sc) in cfg.stages.iter().enumerate() {
            let name = format!("backbone.stage{s}");
            let c = sc.channels;
            let blocks = (0..sc.resmlp)
                .map(|r| {
                    let bn = format!("{name}.res{r}");
                    Ok(ResBlock {
                        pre: VnMlp::new(store, init, &format!("{bn}.pre"), &feature(&[c, c]).activate_last(true))?,
                        rpe: Rpe::new(store, init, &bn, c)?,
                        post: VnMlp::new(store, init, &format!("{bn}.post"), &feature(&[c, c]))?,
                    })
                })
                .collect::<Result<_>>()?;
            stages.push(Stage {
                points: sc.points,
                pre: VnMlp::new(store, init, &format!("{name}.pre"), &feature(&[width, c]).activate_last(true))?,
                rpe: Rpe::new(store, init, &name, c)?,
                blocks,
            });
            width = c;
            fused += c;
        }
        let fuse = VnMlp::new(store, init, "backbone.fuse", &feature(&[fused, cfg.channels, cfg.channels]))?;
        Ok(Self { embed, stages, fuse, k: cfg.k_group })
    }

    /// Extracts anchors from the valid points `[n, 3]` of an observed cloud.
    pub fn forward<'t, S: Scalar>(&self, b: &Binder<'t, S>, points: Var<'t, S>) -> Result<BackboneOutput<'t, S>> {
        let n = points.shape()[0];
        let wanted = self.stages.last().map_or(0, |s| s.points);
        if n < wanted {
            return Err(Error::Precondition(format!("backbone needs at least {wanted} points, got {n}")));
        }
        let embedded = self.embed.forward(b, points, points, None)?;

        let mut prev_points = points;
        let mut prev_features = embedded;
        let mut levels = vec![embedded];
        let mut maps: Vec<Vec<usize>> = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            let n_prev = prev_points.shape()[0];
            let lifted = stage.pre.forward(b, prev_features)?;
            let picks = fps_indices(&prev_points.value(), n_prev, stage.points.min(n_prev));
            let centers = prev_points.index_select(&picks);
            let mut features = Grouping::new(&centers, &prev_points, self.k)
                .aggregate(b, &stage.rpe, lifted, centers, prev_points)?;
            let local = Grouping::new(&centers, &centers, self.k);
            for block in &stage.blocks {
                let h = local.aggregate(b, &block.rpe, block.pre.forward(b, features)?, centers, centers)?;
                features = features.add(block.post.forward(b, h)?);
            }
            levels.push(features);
            maps.push(picks);
            prev_points = centers;
            prev_features = features;
        }

        // Trace each final anchor back through the nested FPS subsets.
        let mut cursor: Vec<usize> = (0..prev_points.shape()[0]).collect();
        let mut parts = vec![prev_features];
        for (level, map) in levels[..levels.len() - 1].iter().rev().zip(maps.iter().rev()) {
            cursor = cursor.iter().map(|&i| map[i]).collect();
            parts.push(level.index_select(&cursor));
        }
        parts.reverse();
        let features = self.fuse.forward(b, concat(&parts, 1))?;
        Ok(BackboneOutput { anchors: AnchorSet { positions: points.index_select(&cursor), features }, indices: cursor })
    }
}
