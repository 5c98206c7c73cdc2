//! Point sets, sampling, neighborhoods and completion metrics.
//!
//! All searches are exact brute force. Distance ties always resolve to the
//! lowest index, which keeps every routine a deterministic function of the
//! input ordering.

use std::cmp::Ordering;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Var;
use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::so3::Rotation;
use crate::tensor::Tensor;

/// `N×3` coordinates; rows at or beyond `valid_count` are zero padding.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud<S: Scalar> {
    points: Tensor<S>,
    valid_count: usize,
}

impl<S: Scalar> PointCloud<S> {
    pub fn new(points: Tensor<S>) -> Result<Self> {
        let n = Self::check_shape(&points)?;
        Ok(Self { points, valid_count: n })
    }

    /// A cloud whose trailing `N − valid_count` rows are padding.
    pub fn padded(points: Tensor<S>, valid_count: usize) -> Result<Self> {
        let n = Self::check_shape(&points)?;
        if valid_count > n {
            return shape_err(format!("valid_count {valid_count} exceeds {n} rows"));
        }
        if points.data()[3 * valid_count..].iter().any(|&v| v != S::zero()) {
            return Err(Error::Precondition("padding rows must be exactly zero".into()));
        }
        Ok(Self { points, valid_count })
    }

    pub fn from_rows(rows: &[[S; 3]]) -> Self {
        Self { points: Tensor::from_rows(rows), valid_count: rows.len() }
    }

    fn check_shape(points: &Tensor<S>) -> Result<usize> {
        if points.ndim() != 2 || points.shape()[1] != 3 {
            return shape_err(format!("point cloud must be [N, 3], got {:?}", points.shape()));
        }
        Ok(points.shape()[0])
    }

    /// All rows, padding included.
    pub fn points(&self) -> &Tensor<S> {
        &self.points
    }

    pub fn valid_count(&self) -> usize {
        self.valid_count
    }

    pub fn rows(&self) -> usize {
        self.points.shape()[0]
    }

    pub fn point(&self, i: usize) -> [S; 3] {
        self.points.row3(i)
    }

    /// The valid rows only, as a `[valid_count, 3]` tensor.
    pub fn valid_points(&self) -> Tensor<S> {
        self.points.slice(0, 0, self.valid_count)
    }

    /// Drops the padding rows.
    pub fn trimmed(&self) -> Self {
        Self { points: self.valid_points(), valid_count: self.valid_count }
    }

    /// `P·R` (padding stays zero).
    pub fn rotated(&self, r: &Rotation<S>) -> Self {
        Self { points: r.apply(&self.points), valid_count: self.valid_count }
    }

    pub fn centroid(&self) -> [S; 3] {
        let n = S::from_count(self.valid_count.max(1));
        let mut c = [S::zero(); 3];
        for i in 0..self.valid_count {
            let p = self.point(i);
            for j in 0..3 {
                c[j] += p[j];
            }
        }
        c.map(|v| v / n)
    }

    fn require_points(&self, what: &str) -> Result<()> {
        if self.valid_count == 0 {
            return Err(Error::Empty(format!("{what}: point cloud has no valid points")));
        }
        Ok(())
    }
}

#[inline]
pub(crate) fn sq_dist<S: Scalar>(a: [S; 3], b: [S; 3]) -> S {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

/// Indices of the `k` nearest neighbors for a query row `[k]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NeighborIndex {
    pub k: usize,
    pub indices: Vec<Vec<usize>>,
}

/// Greedy farthest point sampling seeded at index 0.
pub fn farthest_point_sample<S: Scalar>(cloud: &PointCloud<S>, m: usize) -> Result<Vec<usize>> {
    let n = cloud.valid_count();
    if m == 0 || m > n {
        return Err(Error::Precondition(format!("cannot sample {m} of {n} valid points")));
    }
    Ok(fps_indices(cloud.points(), n, m))
}

/// FPS over the first `n` rows of an `[N, 3]` tensor.
pub(crate) fn fps_indices<S: Scalar>(points: &Tensor<S>, n: usize, m: usize) -> Vec<usize> {
    let mut selected = Vec::with_capacity(m);
    let mut dist = vec![S::infinity(); n];
    let mut current = 0usize;
    for _ in 0..m {
        selected.push(current);
        let c = points.row3(current);
        let mut best = S::neg_infinity();
        let mut next = 0;
        for (i, d) in dist.iter_mut().enumerate() {
            *d = d.min(sq_dist(points.row3(i), c));
            if *d > best {
                best = *d;
                next = i;
            }
        }
        current = next;
    }
    selected
}

/// k nearest rows among the first `valid` rows of `source` for every row of
/// `query`, nearest first. `k` is clamped to `valid`.
pub fn knn_indices<S: Scalar>(query: &Tensor<S>, source: &Tensor<S>, valid: usize, k: usize) -> Vec<Vec<usize>> {
    let k = k.min(valid);
    let nq = query.shape()[0];
    let mut order: Vec<(S, usize)> = Vec::with_capacity(valid);
    (0..nq)
        .map(|i| {
            let q = query.row3(i);
            order.clear();
            order.extend((0..valid).map(|j| (sq_dist(q, source.row3(j)), j)));
            let cmp = |a: &(S, usize), b: &(S, usize)| a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1));
            if k < valid {
                order.select_nth_unstable_by(k - 1, cmp);
                order.truncate(k);
            }
            order.sort_by(cmp);
            order.iter().map(|&(_, j)| j).collect()
        })
        .collect()
}

/// Euclidean k-nearest neighbors of every valid query point among the valid source points.
pub fn knn<S: Scalar>(query: &PointCloud<S>, source: &PointCloud<S>, k: usize) -> Result<NeighborIndex> {
    if k == 0 {
        return Err(Error::Precondition("knn needs k >= 1".into()));
    }
    source.require_points("knn")?;
    let k = k.min(source.valid_count());
    let indices = knn_indices(&query.valid_points(), source.points(), source.valid_count(), k);
    Ok(NeighborIndex { k, indices })
}

/// Nearest squared distance from every valid point of `a` to the valid points of `b`.
fn nearest_sq<S: Scalar>(a: &PointCloud<S>, b: &PointCloud<S>) -> Vec<S> {
    (0..a.valid_count())
        .map(|i| {
            let p = a.point(i);
            (0..b.valid_count()).map(|j| sq_dist(p, b.point(j))).fold(S::infinity(), S::min)
        })
        .collect()
}

fn mean<S: Scalar>(v: impl Iterator<Item = S>, n: usize) -> S {
    v.sum::<S>() / S::from_count(n)
}

/// CD-l1: mean nearest Euclidean distance in both directions, summed.
pub fn chamfer_l1<S: Scalar>(p1: &PointCloud<S>, p2: &PointCloud<S>) -> Result<S> {
    p1.require_points("chamfer_l1")?;
    p2.require_points("chamfer_l1")?;
    let a = nearest_sq(p1, p2);
    let b = nearest_sq(p2, p1);
    Ok(mean(a.iter().map(|d| d.sqrt()), a.len()) + mean(b.iter().map(|d| d.sqrt()), b.len()))
}

/// One-directional CD-l2: mean squared nearest distance from `p1` to `p2`.
pub fn chamfer_l2_directed<S: Scalar>(p1: &PointCloud<S>, p2: &PointCloud<S>) -> Result<S> {
    p1.require_points("chamfer_l2")?;
    p2.require_points("chamfer_l2")?;
    let a = nearest_sq(p1, p2);
    Ok(mean(a.iter().copied(), a.len()))
}

/// Symmetric CD-l2 (squared distances, summed over both directions).
pub fn chamfer_l2<S: Scalar>(p1: &PointCloud<S>, p2: &PointCloud<S>) -> Result<S> {
    Ok(chamfer_l2_directed(p1, p2)? + chamfer_l2_directed(p2, p1)?)
}

/// F-Score at threshold `tau`, as a percentage.
pub fn f_score<S: Scalar>(pred: &PointCloud<S>, gt: &PointCloud<S>, tau: S) -> Result<S> {
    if !(tau > S::zero()) {
        return Err(Error::Precondition("f_score needs tau > 0".into()));
    }
    pred.require_points("f_score")?;
    gt.require_points("f_score")?;
    let t2 = tau * tau;
    let within = |v: Vec<S>| v.iter().filter(|&&d| d.sqrt() < tau || d < t2).count();
    let precision = S::from_count(within(nearest_sq(pred, gt))) / S::from_count(pred.valid_count());
    let recall = S::from_count(within(nearest_sq(gt, pred))) / S::from_count(gt.valid_count());
    if precision + recall == S::zero() {
        return Ok(S::zero());
    }
    Ok(S::lit(2.0) * precision * recall / (precision + recall) * S::lit(100.0))
}

/// Result of [`consistency_score`].
#[derive(Clone, Debug)]
pub struct Consistency<S> {
    /// `max − min` of the per-trial CD-l1 values.
    pub score: S,
    pub per_trial: Vec<S>,
}

/// Rotation consistency: spread of `CD-l1(complete(P·Rᵢ), G·Rᵢ)` over
/// `trials` random rotations drawn from `seed`.
pub fn consistency_score<S, F>(mut complete: F, partial: &PointCloud<S>, gt: &PointCloud<S>, trials: usize, seed: u64) -> Result<Consistency<S>>
where
    S: Scalar,
    F: FnMut(&PointCloud<S>) -> Result<PointCloud<S>>,
{
    if trials < 2 {
        return Err(Error::Precondition(format!("consistency needs at least 2 trials, got {trials}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rotations: Vec<Rotation<S>> = (0..trials).map(|_| Rotation::<f64>::random_with(&mut rng).cast()).collect();
    let per_trial = rotations
        .iter()
        .map(|r| chamfer_l1(&complete(&partial.rotated(r))?, &gt.rotated(r)))
        .collect::<Result<Vec<S>>>()?;
    let hi = per_trial.iter().copied().fold(S::neg_infinity(), S::max);
    let lo = per_trial.iter().copied().fold(S::infinity(), S::min);
    Ok(Consistency { score: hi - lo, per_trial })
}

/// Fidelity distance: one-directional CD-l2 from the partial input to the prediction.
pub fn fidelity<S: Scalar>(pred: &PointCloud<S>, partial: &PointCloud<S>) -> Result<S> {
    chamfer_l2_directed(partial, pred)
}

/// Minimal matching distance: smallest symmetric CD-l2 to any reference shape.
pub fn minimal_matching<S: Scalar>(pred: &PointCloud<S>, references: &[PointCloud<S>]) -> Result<S> {
    if references.is_empty() {
        return Err(Error::Empty("MMD needs at least one reference shape".into()));
    }
    references.iter().try_fold(S::infinity(), |best, r| Ok(best.min(chamfer_l2(pred, r)?)))
}

/// `(FD, MMD)` for one prediction.
pub fn fidelity_mmd<S: Scalar>(pred: &PointCloud<S>, partial: &PointCloud<S>, references: &[PointCloud<S>]) -> Result<(S, S)> {
    Ok((fidelity(pred, partial)?, minimal_matching(pred, references)?))
}

/// Differentiable CD-l1 between two `[n, 3]` variables.
///
/// Each nearest-neighbor term routes its gradient to the lowest-index
/// minimiser; a zero distance contributes a zero subgradient.
pub fn chamfer_l1_var<'t, S: Scalar>(a: Var<'t, S>, b: Var<'t, S>) -> Var<'t, S> {
    a.nearest_sq_dist(b).sqrt().mean() + b.nearest_sq_dist(a).sqrt().mean()
}
