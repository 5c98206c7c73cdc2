//! Brute-force reference implementations of the geometry routines.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use revnet::geometry::{chamfer_l1, chamfer_l2, f_score, farthest_point_sample, knn};
use revnet::{PointCloud64, Tensor};

pub type Pts = Vec<[f64; 3]>;

pub fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

fn nearest(p: [f64; 3], set: &[[f64; 3]]) -> f64 {
    let mut best = f64::INFINITY;
    for &q in set {
        let d = dist(p, q);
        if d < best {
            best = d;
        }
    }
    best
}

pub fn chamfer_l1_oracle(a: &[[f64; 3]], b: &[[f64; 3]]) -> f64 {
    let ab: f64 = a.iter().map(|&p| nearest(p, b)).sum::<f64>() / a.len() as f64;
    let ba: f64 = b.iter().map(|&p| nearest(p, a)).sum::<f64>() / b.len() as f64;
    ab + ba
}

pub fn chamfer_l2_oracle(a: &[[f64; 3]], b: &[[f64; 3]]) -> f64 {
    let ab: f64 = a.iter().map(|&p| nearest(p, b).powi(2)).sum::<f64>() / a.len() as f64;
    let ba: f64 = b.iter().map(|&p| nearest(p, a).powi(2)).sum::<f64>() / b.len() as f64;
    ab + ba
}

pub fn f_score_oracle(pred: &[[f64; 3]], gt: &[[f64; 3]], tau: f64) -> f64 {
    let p = pred.iter().filter(|&&x| nearest(x, gt) < tau).count() as f64 / pred.len() as f64;
    let r = gt.iter().filter(|&&x| nearest(x, pred) < tau).count() as f64 / gt.len() as f64;
    if p + r == 0.0 {
        0.0
    } else {
        200.0 * p * r / (p + r)
    }
}

/// Full sort of all candidates by (distance, index).
pub fn knn_oracle(query: &[[f64; 3]], source: &[[f64; 3]], k: usize) -> Vec<Vec<usize>> {
    query
        .iter()
        .map(|&q| {
            let mut all: Vec<(f64, usize)> = source.iter().enumerate().map(|(j, &s)| (dist(q, s), j)).collect();
            all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            all.into_iter().take(k.min(source.len())).map(|(_, j)| j).collect()
        })
        .collect()
}

/// Recomputes the distance to the selected set from scratch each round.
pub fn fps_oracle(points: &[[f64; 3]], m: usize) -> Vec<usize> {
    let mut chosen = vec![0usize];
    while chosen.len() < m {
        let mut best = (-1.0, 0);
        for (i, &p) in points.iter().enumerate() {
            let d = chosen.iter().map(|&c| dist(p, points[c])).fold(f64::INFINITY, f64::min);
            if d > best.0 {
                best = (d, i);
            }
        }
        chosen.push(best.1);
    }
    chosen
}

/// Random points: continuous in a cube, or on a coarse grid to force ties.
pub fn random_points(rng: &mut ChaCha8Rng, n: usize) -> Pts {
    let grid = rng.random_bool(0.3);
    (0..n)
        .map(|_| {
            [0; 3].map(|_| {
                if grid {
                    rng.random_range(-2i32..=2) as f64 * 0.5
                } else {
                    rng.random_range(-1.0..1.0)
                }
            })
        })
        .collect()
}

/// Cloud with `pad` zero rows appended after the valid points.
pub fn cloud(points: &[[f64; 3]], pad: usize) -> PointCloud64 {
    let mut flat: Vec<f64> = points.iter().flatten().copied().collect();
    flat.extend(std::iter::repeat_n(0.0, 3 * pad));
    let t = Tensor::from_vec(&[points.len() + pad, 3], flat);
    PointCloud64::padded(t, points.len()).expect("valid padded cloud")
}

#[derive(Debug, Default)]
pub struct OracleReport {
    pub instances: usize,
    pub chamfer_l1: f64,
    pub chamfer_l2: f64,
    pub f_score: f64,
    pub knn_mismatches: usize,
    pub fps_mismatches: usize,
}

impl OracleReport {
    pub fn max_value_deviation(&self) -> f64 {
        self.chamfer_l1.max(self.chamfer_l2).max(self.f_score)
    }

    pub fn index_mismatches(&self) -> usize {
        self.knn_mismatches + self.fps_mismatches
    }
}

/// Runs every routine against its oracle over `instances` random clouds of
/// at most 64 points, some with zero padding.
pub fn oracle_suite(instances: usize, seed: u64) -> OracleReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rep = OracleReport { instances, ..Default::default() };
    for _ in 0..instances {
        let (na, nb) = (rng.random_range(1..=64), rng.random_range(1..=64));
        let a = random_points(&mut rng, na);
        let b = random_points(&mut rng, nb);
        let pad = if rng.random_bool(0.5) { rng.random_range(1..8) } else { 0 };
        let (ca, cb) = (cloud(&a, pad), cloud(&b, 0));

        let dev = |x: f64, y: f64| (x - y).abs();
        rep.chamfer_l1 = rep.chamfer_l1.max(dev(chamfer_l1(&ca, &cb).unwrap(), chamfer_l1_oracle(&a, &b)));
        rep.chamfer_l2 = rep.chamfer_l2.max(dev(chamfer_l2(&ca, &cb).unwrap(), chamfer_l2_oracle(&a, &b)));
        let tau = rng.random_range(0.05..0.6);
        rep.f_score = rep.f_score.max(dev(f_score(&ca, &cb, tau).unwrap(), f_score_oracle(&a, &b, tau)));

        let k = rng.random_range(1..=na + 2);
        if knn(&cb, &ca, k).unwrap().indices != knn_oracle(&b, &a, k) {
            rep.knn_mismatches += 1;
        }
        let m = rng.random_range(1..=na);
        if farthest_point_sample(&ca, m).unwrap() != fps_oracle(&a, m) {
            rep.fps_mismatches += 1;
        }
    }
    rep
}
