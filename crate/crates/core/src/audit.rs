//! Randomised equivariance and invariance checks.
//!
//! Every check draws fresh inputs, parameters and a rotation `R` per trial and
//! reports the largest deviation between `f(X·R)` and `f(X)·R` (or `f(X)`
//! for invariant outputs).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::model::{CwsaHead, ModelConfig, MultiHeadCwsa, Revnet};
use crate::nn::{Binder, Initializer, ParamStore};
use crate::so3::Rotation;
use crate::tensor::Tensor;
use crate::vn::{ops, MlpSpec, NormKind, VnEdgeConv, VnInv, VnLinear, VnMaxPool, VnMlp, VnRelu};
use crate::PointCloud;

/// Outcome of one check over all its trials.
#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub trials: usize,
    /// Largest absolute deviation seen (relative for the end-to-end check).
    pub max_deviation: f64,
}

impl Check {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_deviation <= tol
    }
}

type Rng64 = ChaCha8Rng;

fn random_tensor(rng: &mut Rng64, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Runs `op` on `x` and on `x·R` over `trials`, comparing with `out(x)·R`.
/// `build` creates fresh parameters and an input per trial.
fn equivariance<B, F>(name: &str, trials: usize, seed: u64, mut build: B) -> Result<Check>
where
    B: FnMut(&mut Rng64, &mut ParamStore<f64>, &mut Initializer) -> Result<(Tensor<f64>, F)>,
    F: for<'t> Fn(&Binder<'t, f64>, Var<'t, f64>) -> Result<Var<'t, f64>>,
{
    let mut rng = Rng64::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let mut store = ParamStore::new();
        let mut init = Initializer::new(rng.random());
        let (x, op) = build(&mut rng, &mut store, &mut init)?;
        let r = Rotation::<f64>::random_with(&mut rng);
        let run = |input: Tensor<f64>| -> Result<Tensor<f64>> {
            let tape = Tape::new();
            let b = Binder::frozen(&tape, &store);
            Ok(op(&b, tape.constant(input))?.value().as_ref().clone())
        };
        let y = run(x.clone())?;
        let yr = run(r.apply(&x))?;
        worst = worst.max(r.apply(&y).max_abs_diff(&yr));
    }
    Ok(Check { name: name.into(), trials, max_deviation: worst })
}

/// Pins a closure to the higher-ranked layer signature.
fn op<F>(f: F) -> F
where
    F: for<'t> Fn(&Binder<'t, f64>, Var<'t, f64>) -> Result<Var<'t, f64>>,
{
    f
}

/// Replaces the zero-initialised VN biases with random values so the bias
/// term is actually exercised.
fn randomize_biases(store: &mut ParamStore<f64>, init: &mut Initializer) {
    let ids: Vec<_> = store.ids().filter(|&id| store.name(id).ends_with(".bias")).collect();
    for id in ids {
        let shape = store.get(id).shape().to_vec();
        *store.get_mut(id) = init.normal(&shape, 1.0);
    }
}

fn dims(rng: &mut Rng64) -> (usize, usize, usize) {
    (rng.random_range(3..10), rng.random_range(2..7), rng.random_range(2..7))
}

/// Equivariance of every VN layer (`f(X·R) = f(X)·R`).
pub fn layer_equivariance(trials: usize, seed: u64) -> Result<Vec<Check>> {
    let s = |i: u64| seed.wrapping_add(i);
    let mut checks = vec![
        equivariance("vn_linear", trials, s(0), |rng, store, init| {
            let (n, c, c2) = dims(rng);
            let l = VnLinear::new(store, init, "l", c, c2, false);
            Ok((random_tensor(rng, &[n, c, 3]), op(move |b, x| l.forward(b, x))))
        })?,
        equivariance("vn_linear+bias", trials, s(1), |rng, store, init| {
            let (n, c, c2) = dims(rng);
            let l = VnLinear::new(store, init, "l", c, c2, true);
            randomize_biases(store, init);
            Ok((random_tensor(rng, &[n, c, 3]), op(move |b, x| l.forward(b, x))))
        })?,
        equivariance("vn_relu", trials, s(2), |rng, store, init| {
            let (n, c, _) = dims(rng);
            let l = VnRelu::new(store, init, "r", c);
            Ok((random_tensor(rng, &[n, c, 3]), op(move |b, x| l.forward(b, x))))
        })?,
        equivariance("vn_mean_pool", trials, s(3), |rng, _, _| {
            let (n, c, _) = dims(rng);
            Ok((random_tensor(rng, &[n, c, 3]), op(|_, x| ops::vn_mean_pool(x, 0))))
        })?,
        equivariance("vn_max_pool", trials, s(4), |rng, store, init| {
            let (n, c, _) = dims(rng);
            let l = VnMaxPool::new(store, init, "m", c);
            Ok((random_tensor(rng, &[n, c, 3]), op(move |b, x| l.forward(b, x))))
        })?,
    ];
    for (i, (name, kind)) in
        [("vn_batch_norm", NormKind::Batch), ("vn_layer_norm_2norm", NormKind::TwoNorm), ("vn_zca_layer_norm", NormKind::Zca)]
            .into_iter()
            .enumerate()
    {
        checks.push(equivariance(name, trials, s(5 + i as u64), move |rng, store, init| {
            let (n, c, _) = dims(rng);
            let norm = crate::vn::VnNorm::new(store, "n", kind, c).expect("a normalisation kind");
            if let Some(id) = store.ids().last() {
                *store.get_mut(id) = init.normal(&[c, 1], 1.0);
            }
            Ok((random_tensor(rng, &[n, c, 3]), op(move |b, x| norm.forward(b, x))))
        })?);
    }
    checks.push(equivariance("vn_mlp", trials, s(8), |rng, store, init| {
        let (n, c, c2) = dims(rng);
        let spec = MlpSpec::new(&[c, c2, c]).bias(true).norm(NormKind::Zca).activate_last(true);
        let m = VnMlp::new(store, init, "mlp", &spec)?;
        randomize_biases(store, init);
        Ok((random_tensor(rng, &[n, c, 3]), op(move |b, x| m.forward(b, x))))
    })?);
    checks.push(equivariance("vn_edge_conv", trials, s(9), |rng, store, init| {
        let n = rng.random_range(6..16);
        let k = rng.random_range(2..6);
        let spec = MlpSpec::new(&[4, 5]).bias(true).norm(NormKind::Zca);
        let e = VnEdgeConv::new(store, init, "e", 1, &spec, k)?;
        randomize_biases(store, init);
        Ok((random_tensor(rng, &[n, 3]), op(move |b, p| e.forward(b, p, p, None))))
    })?);
    checks.push(equivariance("cwsa_attend", trials, s(10), |rng, store, init| {
        let (m, n) = (rng.random_range(1..6), rng.random_range(1..8));
        let heads = rng.random_range(1..3);
        let c = heads * rng.random_range(3..5);
        let att = MultiHeadCwsa::new(store, init, "a", c, heads)?;
        randomize_biases(store, init);
        let rows = m + 2 * n;
        Ok((random_tensor(rng, &[rows, c, 3]), op(move |b, x| {
            att.attend(b, x.slice(0, 0, m), x.slice(0, m, n), x.slice(0, m + n, n))
        })))
    })?);
    Ok(checks)
}

/// Invariance of VN-Inv features, the `T → T·R` law of its frame, and of attention scores.
pub fn invariance(trials: usize, seed: u64) -> Result<Vec<Check>> {
    let mut rng = Rng64::seed_from_u64(seed);
    let (mut feat, mut frame, mut scores) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..trials {
        let (n, c, _) = dims(&mut rng);
        let c = c.max(3);
        let mut store = ParamStore::new();
        let mut init = Initializer::new(rng.random());
        let inv = VnInv::new(&mut store, &mut init, "inv", c, true)?;
        let head = CwsaHead::new(&mut store, &mut init, "h", c)?;
        randomize_biases(&mut store, &mut init);
        let x = random_tensor(&mut rng, &[n, c, 3]);
        let q = random_tensor(&mut rng, &[2, c, 3]);
        let r = Rotation::<f64>::random_with(&mut rng);
        let run = |x: &Tensor<f64>, q: &Tensor<f64>| -> Result<(Tensor<f64>, Tensor<f64>, Tensor<f64>)> {
            let tape = Tape::new();
            let b = Binder::frozen(&tape, &store);
            let out = inv.forward(&b, tape.constant(x.clone()))?;
            let s = head.scores(&b, tape.constant(q.clone()), tape.constant(x.clone()))?;
            Ok((out.features.value().as_ref().clone(), out.frame.value().as_ref().clone(), s.value().as_ref().clone()))
        };
        let (f0, t0, s0) = run(&x, &q)?;
        let (f1, t1, s1) = run(&r.apply(&x), &r.apply(&q))?;
        feat = feat.max(f0.max_abs_diff(&f1));
        frame = frame.max(r.apply(&t0).max_abs_diff(&t1));
        scores = scores.max(s0.max_abs_diff(&s1));
    }
    Ok(vec![
        Check { name: "vn_invariant.features".into(), trials, max_deviation: feat },
        Check { name: "vn_invariant.frame".into(), trials, max_deviation: frame },
        Check { name: "cwsa_scores".into(), trials, max_deviation: scores },
    ])
}

/// Equivariance of the VN bias term alone, on standard-normal weights.
pub fn bias_equivariance(trials: usize, seed: u64) -> Result<Check> {
    let mut rng = Rng64::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let (_, c, c2) = dims(&mut rng);
        let mut init = Initializer::new(rng.random());
        let wb: Tensor<f64> = init.normal(&[3, c], 1.0);
        let bias: Tensor<f64> = init.normal(&[c2, 3], 1.0);
        let x = random_tensor(&mut rng, &[c, 3]);
        let r = Rotation::<f64>::random_with(&mut rng);
        let run = |x: Tensor<f64>| {
            let tape = Tape::new();
            let out = ops::vn_bias(tape.constant(x), tape.constant(wb.clone()), tape.constant(bias.clone()));
            out.value().as_ref().clone()
        };
        let y = run(x.clone());
        worst = worst.max(r.apply(&y).max_abs_diff(&run(r.apply(&x))));
    }
    Ok(Check { name: "vn_bias".into(), trials, max_deviation: worst })
}

/// `max(‖f(P·R) − f(P)·R‖∞ / (‖f(P)‖∞ + 1e-12))` over fresh models, clouds and
/// rotations, taken over both the anchors and the dense output.
pub fn model_equivariance(cfg: &ModelConfig, cloud_size: usize, trials: usize, seed: u64) -> Result<Check> {
    let mut rng = Rng64::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut net = Revnet::<f64>::new(cfg.clone(), rng.random())?;
    for t in 0..trials {
        if t % 10 == 0 && t > 0 {
            net = Revnet::new(cfg.clone(), rng.random())?;
        }
        let cloud = PointCloud::new(random_tensor(&mut rng, &[cloud_size, 3]))?;
        let r = Rotation::<f64>::random_with(&mut rng);
        let (a, f) = net.complete_with_anchors(&cloud)?;
        let (ar, fr) = net.complete_with_anchors(&cloud.rotated(&r))?;
        for (x, xr) in [(&a, &ar), (&f, &fr)] {
            let dev = r.apply(x.points()).max_abs_diff(xr.points()) / (x.points().max_abs() + 1e-12);
            worst = worst.max(dev);
        }
    }
    Ok(Check { name: "revnet_forward".into(), trials, max_deviation: worst })
}

/// Every check above with `trials` trials each.
pub fn full_audit(cfg: &ModelConfig, cloud_size: usize, trials: usize, seed: u64) -> Result<Vec<Check>> {
    let mut checks = layer_equivariance(trials, seed)?;
    checks.extend(invariance(trials, seed ^ 0x9e37)?);
    checks.push(bias_equivariance(trials, seed ^ 0x7f4a)?);
    checks.push(model_equivariance(cfg, cloud_size, trials, seed ^ 0x3c6e)?);
    Ok(checks)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn audit_passes_small() {
        let checks = full_audit(&ModelConfig::tiny(), 48, 3, 1).unwrap();
        assert_eq!(checks.len(), 11 + 3 + 1 + 1);
        for c in &checks {
            assert!(c.passes(1e-6), "{c:?}");
        }
    }
}
