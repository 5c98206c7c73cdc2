//! Synthetic shapes and partial-view cropping.

use std::f64::consts::PI;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::scalar::Scalar;
use crate::so3::Rotation;
use crate::tensor::Tensor;

/// Fewest points a crop may leave before the plane is shifted.
pub const MIN_PARTIAL: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeFamily {
    Sphere,
    Cuboid,
    Cylinder,
}

impl ShapeFamily {
    pub const ALL: [ShapeFamily; 3] = [ShapeFamily::Sphere, ShapeFamily::Cuboid, ShapeFamily::Cylinder];

    /// Default extents: sphere radius; cuboid half-sizes; cylinder (radius, _, half-height).
    pub fn base_scale(self) -> [f64; 3] {
        match self {
            Self::Sphere => [1.0, 1.0, 1.0],
            Self::Cuboid => [0.8, 0.6, 0.4],
            Self::Cylinder => [0.6, 0.6, 0.8],
        }
    }
}

impl std::str::FromStr for ShapeFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sphere" => Ok(Self::Sphere),
            "cuboid" => Ok(Self::Cuboid),
            "cylinder" => Ok(Self::Cylinder),
            _ => Err(Error::Precondition(format!("unknown shape family {s:?} (sphere, cuboid, cylinder)"))),
        }
    }
}

/// One synthetic completion instance.
#[derive(Clone, Debug)]
pub struct SyntheticShapeSpec {
    pub family: ShapeFamily,
    pub scale: [f64; 3],
    pub partial_size: usize,
    pub gt_size: usize,
    /// Fraction of the ground-truth points cut away by the half-space.
    pub crop_fraction: f64,
    /// Applied to both clouds after cropping; `None` keeps the canonical pose.
    pub pose: Option<Rotation<f64>>,
}

impl SyntheticShapeSpec {
    pub fn new(family: ShapeFamily, partial_size: usize, gt_size: usize) -> Self {
        Self { family, scale: family.base_scale(), partial_size, gt_size, crop_fraction: 0.5, pose: None }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.crop_fraction > 0.0 && self.crop_fraction < 1.0) {
            return Err(Error::Precondition(format!("crop fraction {} outside (0, 1)", self.crop_fraction)));
        }
        if self.partial_size == 0 || self.gt_size < self.partial_size {
            return Err(Error::Precondition(format!(
                "need 0 < partial size ({}) <= gt size ({})",
                self.partial_size, self.gt_size
            )));
        }
        if self.scale.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Precondition(format!("scale {:?} must be positive", self.scale)));
        }
        Ok(())
    }
}

fn sample_surface(family: ShapeFamily, scale: [f64; 3], rng: &mut impl Rng) -> [f64; 3] {
    let mut uniform = |lo: f64, hi: f64| rng.random_range(lo..hi);
    match family {
        ShapeFamily::Sphere => loop {
            let g: [f64; 3] = std::array::from_fn(|_| rng.sample(StandardNormal));
            let n = (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt();
            if n > 1e-12 {
                break g.map(|v| scale[0] * v / n);
            }
        },
        ShapeFamily::Cuboid => {
            let [a, b, c] = scale;
            let areas = [b * c, a * c, a * b];
            let pick = uniform(0.0, areas.iter().sum());
            let axis = if pick < areas[0] { 0 } else if pick < areas[0] + areas[1] { 1 } else { 2 };
            let mut p: [f64; 3] = std::array::from_fn(|i| uniform(-scale[i], scale[i]));
            p[axis] = if uniform(0.0, 1.0) < 0.5 { -scale[axis] } else { scale[axis] };
            p
        }
        ShapeFamily::Cylinder => {
            let (r, h) = (scale[0], scale[2]);
            let lateral = 2.0 * PI * r * 2.0 * h;
            let caps = 2.0 * PI * r * r;
            let theta = uniform(0.0, 2.0 * PI);
            if uniform(0.0, lateral + caps) < lateral {
                [r * theta.cos(), r * theta.sin(), uniform(-h, h)]
            } else {
                let rho = r * uniform(0.0, 1.0).sqrt();
                let z = if uniform(0.0, 1.0) < 0.5 { -h } else { h };
                [rho * theta.cos(), rho * theta.sin(), z]
            }
        }
    }
}

fn to_cloud<S: Scalar>(rows: &[[f64; 3]], total: usize) -> PointCloud<S> {
    let mut data = vec![S::zero(); 3 * total];
    for (dst, src) in data.chunks_exact_mut(3).zip(rows) {
        for j in 0..3 {
            dst[j] = S::lit(src[j]);
        }
    }
    PointCloud::padded(Tensor::from_vec(&[total, 3], data), rows.len()).expect("padding rows are zero")
}

/// Ground truth sampled uniformly on the surface and a partial view: the
/// points beyond a random plane are cut away, the plane placed so that
/// `crop_fraction` of the points go (it moves outward if fewer than
/// [`MIN_PARTIAL`] would remain). The visible part is subsampled to
/// `partial_size`, or zero-padded when there are fewer points.
pub fn generate_pair<S: Scalar>(spec: &SyntheticShapeSpec, seed: u64) -> Result<(PointCloud<S>, PointCloud<S>)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gt: Vec<[f64; 3]> = (0..spec.gt_size).map(|_| sample_surface(spec.family, spec.scale, &mut rng)).collect();

    let dir = Rotation::<f64>::random_with(&mut rng).apply(&Tensor::from_rows(&[[0.0, 0.0, 1.0]]));
    let u = dir.row3(0);
    let mut order: Vec<(f64, usize)> = gt.iter().enumerate().map(|(i, p)| (p[0] * u[0] + p[1] * u[1] + p[2] * u[2], i)).collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let keep = ((1.0 - spec.crop_fraction) * spec.gt_size as f64).round() as usize;
    let keep = keep.max(MIN_PARTIAL.min(spec.gt_size));
    let mut visible: Vec<[f64; 3]> = order[..keep].iter().map(|&(_, i)| gt[i]).collect();
    if visible.len() > spec.partial_size {
        visible = index::sample(&mut rng, visible.len(), spec.partial_size).into_iter().map(|i| visible[i]).collect();
    }

    let mut partial = to_cloud::<S>(&visible, spec.partial_size);
    let mut full = to_cloud::<S>(&gt, spec.gt_size);
    if let Some(r) = &spec.pose {
        let r = r.cast();
        partial = partial.rotated(&r);
        full = full.rotated(&r);
    }
    Ok((partial, full))
}

/// Distribution of training shapes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataSpec {
    pub families: Vec<ShapeFamily>,
    /// Each extent is multiplied by a factor drawn from `[1 − j, 1 + j]`.
    pub scale_jitter: f64,
    pub partial_size: usize,
    pub gt_size: usize,
    pub crop_fraction: f64,
}

impl DataSpec {
    pub fn new(partial_size: usize, gt_size: usize) -> Self {
        Self { families: ShapeFamily::ALL.to_vec(), scale_jitter: 0.2, partial_size, gt_size, crop_fraction: 0.5 }
    }

    pub fn only(mut self, family: ShapeFamily) -> Self {
        self.families = vec![family];
        self
    }

    /// Draws a canonical-pose instance spec.
    pub fn draw(&self, rng: &mut impl Rng) -> Result<SyntheticShapeSpec> {
        if self.families.is_empty() {
            return Err(Error::Precondition("data spec lists no shape families".into()));
        }
        let family = self.families[rng.random_range(0..self.families.len())];
        let j = self.scale_jitter;
        let mut scale = family.base_scale();
        if j > 0.0 {
            let iso = family == ShapeFamily::Sphere;
            let shared = rng.random_range(1.0 - j..1.0 + j);
            for s in &mut scale {
                *s *= if iso { shared } else { rng.random_range(1.0 - j..1.0 + j) };
            }
            if family == ShapeFamily::Cylinder {
                scale[1] = scale[0];
            }
        }
        Ok(SyntheticShapeSpec {
            family,
            scale,
            partial_size: self.partial_size,
            gt_size: self.gt_size,
            crop_fraction: self.crop_fraction,
            pose: None,
        })
    }
}
