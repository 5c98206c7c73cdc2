//! Supervised training on synthetic shapes.

pub mod optim;
pub mod shapes;

pub use optim::{clip_global_norm, AdamW};
pub use shapes::{generate_pair, DataSpec, ShapeFamily, SyntheticShapeSpec};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::{chamfer_l1, chamfer_l1_var, PointCloud};
use crate::model::{Forward, ModelConfig, Revnet};
use crate::nn::Binder;
use crate::scalar::Scalar;
use crate::so3::Rotation;
use crate::tensor::Tensor;

/// Environment variable capping worker threads.
pub const THREADS_ENV: &str = "REVNET_THREADS";

/// The two Chamfer terms of the training objective.
pub struct Loss<'t, S: Scalar> {
    /// `anchor + fine`.
    pub total: Var<'t, S>,
    /// CD-l1 between all anchor positions and the ground truth.
    pub anchor: Var<'t, S>,
    /// CD-l1 between the dense prediction and the ground truth.
    pub fine: Var<'t, S>,
}

/// `CD-l1(anchors, gt) + CD-l1(fine, gt)` with gt given as `[G, 3]`.
pub fn revnet_loss<'t, S: Scalar>(out: &Forward<'t, S>, gt: Var<'t, S>) -> Result<Loss<'t, S>> {
    if gt.shape()[0] == 0 {
        return Err(Error::Empty("loss against an empty ground truth".into()));
    }
    let anchor = chamfer_l1_var(out.anchors().positions, gt);
    let fine = chamfer_l1_var(out.fine, gt);
    Ok(Loss { total: anchor.add(fine), anchor, fine })
}

/// The same objective on plain clouds.
pub fn revnet_loss_value<S: Scalar>(anchors: &PointCloud<S>, fine: &PointCloud<S>, gt: &PointCloud<S>) -> Result<S> {
    Ok(chamfer_l1(anchors, gt)? + chamfer_l1(fine, gt)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub steps_per_epoch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub decay_factor: f64,
    /// Epochs between learning-rate decays.
    pub decay_epochs: usize,
    pub clip_norm: f64,
    pub heldout: usize,
    pub data: DataSpec,
    /// Run samples sequentially. Results are identical either way; this only
    /// removes the thread pool.
    pub deterministic: bool,
}

impl TrainConfig {
    /// Regimen for [`ModelConfig::desk`].
    pub fn desk() -> Self {
        Self {
            epochs: 30,
            batch_size: 8,
            steps_per_epoch: 200,
            lr: 5e-4,
            weight_decay: 0.01,
            decay_factor: 0.7,
            decay_epochs: 20,
            clip_norm: 10.0,
            heldout: 20,
            data: DataSpec::new(256, 1024),
            deterministic: false,
        }
    }

    /// Small regimen for [`ModelConfig::tiny`], a few seconds per epoch.
    pub fn toy() -> Self {
        Self {
            epochs: 30,
            batch_size: 4,
            steps_per_epoch: 8,
            lr: 2e-3,
            decay_epochs: 10,
            heldout: 20,
            data: DataSpec::new(64, 256),
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.steps_per_epoch == 0 {
            return Err(Error::Precondition("batch size and steps per epoch must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.weight_decay >= 0.0 && self.clip_norm > 0.0) {
            return Err(Error::Precondition("lr and weight decay must be >= 0, clip norm > 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based epoch number.
    pub epoch: usize,
    /// Mean dense-prediction CD-l1 over the epoch's training samples.
    pub train_cd: f64,
    /// Mean dense-prediction CD-l1 on the held-out set after the epoch.
    pub heldout_cd: f64,
}

pub struct TrainOutcome<S: Scalar> {
    pub model: Revnet<S>,
    pub optimizer: AdamW<S>,
    pub curve: Vec<EpochRecord>,
    /// Held-out CD-l1 of the untrained model.
    pub initial_heldout_cd: f64,
}

/// Thread pool sized by `REVNET_THREADS` (unset or 0: one per core).
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let threads = match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .map_err(|_| Error::Precondition(format!("{THREADS_ENV}={v:?} is not a thread count")))?,
        Err(_) => 0,
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Precondition(format!("thread pool: {e}")))
}

/// Maps `f` over `items` in order, in parallel unless `pool` is `None`.
pub fn ordered_map<T, R, F>(pool: Option<&rayon::ThreadPool>, items: &[T], f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> Result<R> + Sync,
{
    match pool {
        Some(p) => p.install(|| items.par_iter().map(&f).collect()),
        None => items.iter().map(f).collect(),
    }
}

/// Fixed held-out pairs for a training seed, disjoint from the training stream.
pub fn heldout_set<S: Scalar>(data: &DataSpec, count: usize, seed: u64) -> Result<Vec<(PointCloud<S>, PointCloud<S>)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    (0..count)
        .map(|_| {
            let spec = data.draw(&mut rng)?;
            generate_pair(&spec, rng.random())
        })
        .collect()
}

/// Mean CD-l1 of the dense prediction over `pairs`. With `rotations`, each
/// pair is evaluated under its own random rotation drawn from that seed.
pub fn evaluate<S: Scalar>(
    model: &Revnet<S>,
    pairs: &[(PointCloud<S>, PointCloud<S>)],
    rotations: Option<u64>,
    pool: Option<&rayon::ThreadPool>,
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Empty("evaluation over no pairs".into()));
    }
    let posed: Vec<(PointCloud<S>, PointCloud<S>)> = match rotations {
        None => pairs.to_vec(),
        Some(seed) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            pairs
                .iter()
                .map(|(p, g)| {
                    let r: Rotation<S> = Rotation::<f64>::random_with(&mut rng).cast();
                    (p.rotated(&r), g.rotated(&r))
                })
                .collect()
        }
    };
    let cds = ordered_map(pool, &posed, |(p, g)| Ok(chamfer_l1(&model.complete(p)?, g)?.as_f64()))?;
    Ok(cds.iter().sum::<f64>() / cds.len() as f64)
}

struct SampleGrad<S: Scalar> {
    fine_cd: f64,
    grads: Vec<Tensor<S>>,
}

fn sample_gradient<S: Scalar>(model: &Revnet<S>, partial: &PointCloud<S>, gt: &PointCloud<S>) -> Result<SampleGrad<S>> {
    let tape = Tape::new();
    let b = Binder::new(&tape, model.params());
    let out = model.forward(&b, tape.constant(partial.valid_points()))?;
    let loss = revnet_loss(&out, tape.constant(gt.valid_points()))?;
    let grads = tape.backward(loss.total)?;
    Ok(SampleGrad { fine_cd: loss.fine.value().item().as_f64(), grads: b.param_grads(&grads) })
}

/// Trains a fresh model initialised from `seed`.
pub fn train<S: Scalar>(model_cfg: ModelConfig, cfg: &TrainConfig, seed: u64) -> Result<TrainOutcome<S>> {
    train_with(model_cfg, cfg, seed, |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_with<S: Scalar>(
    model_cfg: ModelConfig,
    cfg: &TrainConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome<S>> {
    cfg.validate()?;
    let mut model = Revnet::<S>::new(model_cfg, seed)?;
    let pool = if cfg.deterministic { None } else { Some(thread_pool()?) };
    let pool = pool.as_ref();
    let heldout = heldout_set::<S>(&cfg.data, cfg.heldout.max(1), seed)?;
    let initial_heldout_cd = evaluate(&model, &heldout, None, pool)?;

    let interval = (cfg.decay_epochs * cfg.steps_per_epoch) as u64;
    let mut optimizer =
        AdamW::new(model.params().tensors(), cfg.lr, cfg.weight_decay).with_schedule(cfg.decay_factor, interval);
    let mut data_rng = ChaCha8Rng::seed_from_u64(seed);
    data_rng.set_stream(1);
    let mut curve = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        let mut cd_sum = 0.0;
        for step in 0..cfg.steps_per_epoch {
            let diverged = |msg: String| Error::Diverged { epoch, step, msg };
            let pairs = (0..cfg.batch_size)
                .map(|_| {
                    let spec = cfg.data.draw(&mut data_rng)?;
                    generate_pair::<S>(&spec, data_rng.random())
                })
                .collect::<Result<Vec<_>>>()?;
            let samples = ordered_map(pool, &pairs, |(p, g)| sample_gradient(&model, p, g)).map_err(|e| match e {
                Error::NonFinite { op } => diverged(format!("non-finite value in {op}")),
                other => other,
            })?;

            let inv = S::one() / S::from_count(samples.len());
            let mut grads: Vec<Tensor<S>> = model.params().tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
            for s in &samples {
                if !s.fine_cd.is_finite() {
                    return Err(diverged(format!("training loss is {}", s.fine_cd)));
                }
                cd_sum += s.fine_cd;
                for (acc, g) in grads.iter_mut().zip(&s.grads) {
                    acc.add_assign(g);
                }
            }
            for g in &mut grads {
                *g = g.scale(inv);
            }
            let norm = clip_global_norm(&mut grads, cfg.clip_norm);
            if !norm.is_finite() {
                return Err(diverged(format!("gradient norm is {norm}")));
            }
            optimizer.step(model.params_mut().tensors_mut(), &grads)?;
        }
        let record = EpochRecord {
            epoch,
            train_cd: cd_sum / (cfg.steps_per_epoch * cfg.batch_size) as f64,
            heldout_cd: evaluate(&model, &heldout, None, pool)?,
        };
        if !record.heldout_cd.is_finite() {
            return Err(Error::Diverged { epoch, step: cfg.steps_per_epoch, msg: "held-out CD is not finite".into() });
        }
        on_epoch(&record);
        curve.push(record);
    }
    Ok(TrainOutcome { model, optimizer, curve, initial_heldout_cd })
}
