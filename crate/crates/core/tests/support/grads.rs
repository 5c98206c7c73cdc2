//! Finite-difference checks of every layer and of the training objective.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use revnet::geometry::chamfer_l1_var;
use revnet::gradcheck::DEFAULT_STEP;
use revnet::model::{CwsaHead, MultiHeadCwsa, Rpe, StageConfig};
use revnet::nn::{Binder, Initializer, Mlp, ParamStore};
use revnet::training::{generate_pair, revnet_loss, ShapeFamily, SyntheticShapeSpec};
use revnet::vn::{ops, MlpSpec, NormKind, VnEdgeConv, VnInv, VnLinear, VnMaxPool, VnMlp, VnRelu};
use revnet::{grad_check, grad_check_with, GradCheckReport, ModelConfig, Result, Revnet, Tape, Tensor, Var};

pub const TOL: f64 = 1e-4;

/// Finite-difference step for the whole-model objective. The kNN over
/// predicted anchors makes the loss piecewise continuous; the chance that a
/// central difference straddles a selection change grows with the step.
pub const LOSS_STEP: f64 = 1e-7;

pub fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn op<F>(f: F) -> F
where
    F: for<'t> Fn(&Binder<'t, f64>, Var<'t, f64>) -> Result<Var<'t, f64>>,
{
    f
}

/// Grad-checks `sum(op(x) ⊙ w)` for a random readout `w`, over every
/// parameter in `store` and the input `x`.
fn check_layer<F>(rng: &mut ChaCha8Rng, store: ParamStore<f64>, x: Tensor<f64>, f: F) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&Binder<'t, f64>, Var<'t, f64>) -> Result<Var<'t, f64>>,
{
    let shape = {
        let tape = Tape::new();
        let b = Binder::frozen(&tape, &store);
        f(&b, tape.constant(x.clone()))?.shape()
    };
    let w = random(rng, &shape);
    let n = store.len();
    let mut params = store.tensors().to_vec();
    params.push(x);
    grad_check_with(
        &store,
        |tape, store, vars| {
            let b = Binder::from_vars(tape, store, &vars[..n])?;
            Ok(f(&b, vars[n])?.mul(tape.constant(w.clone())).sum())
        },
        &params,
        DEFAULT_STEP,
        TOL,
    )
}

fn setup(seed: u64) -> (ParamStore<f64>, Initializer) {
    (ParamStore::new(), Initializer::new(seed))
}

/// One report per layer.
pub fn layer_checks(seed: u64) -> Result<Vec<(String, GradCheckReport)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let x = |rng: &mut ChaCha8Rng| random(rng, &[6, 4, 3]);

    let (mut s, mut i) = setup(rng.random());
    let l = VnLinear::new(&mut s, &mut i, "lin", 4, 5, false);
    let xi = x(&mut rng);
    out.push(("vn_linear".into(), check_layer(&mut rng, s, xi, op(move |b, x| l.forward(b, x)))?));

    let (mut s, mut i) = setup(rng.random());
    let l = VnLinear::new(&mut s, &mut i, "lin", 4, 5, true);
    let (_, bias) = l.bias.expect("bias");
    *s.get_mut(bias) = random(&mut rng, &[5, 3]);
    let xi = x(&mut rng);
    out.push(("vn_linear+bias".into(), check_layer(&mut rng, s, xi, op(move |b, x| l.forward(b, x)))?));

    let (mut s, mut i) = setup(rng.random());
    let l = VnRelu::new(&mut s, &mut i, "relu", 4);
    let xi = x(&mut rng);
    out.push(("vn_relu".into(), check_layer(&mut rng, s, xi, op(move |b, x| l.forward(b, x)))?));

    let xi = x(&mut rng);
    out.push(("vn_mean_pool".into(), check_layer(&mut rng, ParamStore::new(), xi, op(|_, x| ops::vn_mean_pool(x, 0)))?));

    let (mut s, mut i) = setup(rng.random());
    let l = VnMaxPool::new(&mut s, &mut i, "pool", 4);
    let xi = x(&mut rng);
    out.push(("vn_max_pool".into(), check_layer(&mut rng, s, xi, op(move |b, x| l.forward(b, x)))?));

    let mut s = ParamStore::new();
    let gamma = s.add("gamma", random(&mut rng, &[4, 1]));
    let xi = x(&mut rng);
    out.push(("vn_batch_norm".into(), check_layer(&mut rng, s, xi, op(move |b, x| ops::vn_batch_norm(x, b.var(gamma), None)))?));

    let mut s = ParamStore::new();
    let scale = s.add("scale", random(&mut rng, &[4, 1]));
    let xi = x(&mut rng);
    out.push((
        "vn_layer_norm_2norm".into(),
        check_layer(&mut rng, s, xi, op(move |b, x| ops::vn_layer_norm_2norm(x, b.var(scale))))?,
    ));

    // W_ZCA is a stop-gradient: the forward under test holds it at its value
    // for the unperturbed input.
    let mut s = ParamStore::new();
    let alpha = s.add("alpha", random(&mut rng, &[4, 1]));
    let xi = x(&mut rng);
    let w0 = ops::zca_matrix(&xi, 1e-5)?;
    out.push((
        "vn_zca_layer_norm".into(),
        check_layer(&mut rng, s, xi, op(move |b, x| Ok(ops::vn_whiten_with(x, b.var(alpha), &w0))))?,
    ));

    for (name, norm) in [("vn_mlp", NormKind::TwoNorm), ("vn_mlp_batch", NormKind::Batch)] {
        let (mut s, mut i) = setup(rng.random());
        let spec = MlpSpec::new(&[4, 6, 5]).bias(true).norm(norm).activate_last(true);
        let m = VnMlp::new(&mut s, &mut i, "mlp", &spec)?;
        randomize_biases(&mut s, &mut rng);
        let xi = x(&mut rng);
        out.push((name.into(), check_layer(&mut rng, s, xi, op(move |b, x| m.forward(b, x)))?));
    }

    let (mut s, mut i) = setup(rng.random());
    let inv = VnInv::new(&mut s, &mut i, "inv", 4, true)?;
    let xi = x(&mut rng);
    out.push((
        "vn_invariant".into(),
        check_layer(
            &mut rng,
            s,
            xi,
            op(move |b, x| {
                let r = inv.forward(b, x)?;
                Ok(flat_pair(r.features, r.frame))
            }),
        )?,
    ));

    let (mut s, mut i) = setup(rng.random());
    let ec = VnEdgeConv::new(&mut s, &mut i, "ec", 1, &MlpSpec::new(&[5]).activate_last(true), 4)?;
    let pts = random(&mut rng, &[10, 3]);
    out.push(("vn_edge_conv".into(), check_layer(&mut rng, s, pts, op(move |b, p| ec.forward(b, p, p, None)))?));

    let (mut s, mut i) = setup(rng.random());
    let head = CwsaHead::new(&mut s, &mut i, "head", 3)?;
    randomize_biases(&mut s, &mut rng);
    let xi = random(&mut rng, &[10, 3, 3]);
    out.push((
        "cwsa_attend".into(),
        check_layer(
            &mut rng,
            s,
            xi,
            op(move |b, x| head.attend(b, x.slice(0, 0, 4), x.slice(0, 4, 6), x.slice(0, 4, 6))),
        )?,
    ));

    let (mut s, mut i) = setup(rng.random());
    let mh = MultiHeadCwsa::new(&mut s, &mut i, "mh", 6, 2)?;
    randomize_biases(&mut s, &mut rng);
    let xi = random(&mut rng, &[7, 6, 3]);
    out.push((
        "multi_head_cwsa".into(),
        check_layer(&mut rng, s, xi, op(move |b, x| mh.attend(b, x.slice(0, 0, 3), x, x)))?,
    ));

    let (mut s, mut i) = setup(rng.random());
    let rpe = Rpe::new(&mut s, &mut i, "rpe", 4)?;
    let xi = random(&mut rng, &[6, 3]);
    out.push(("rpe".into(), check_layer(&mut rng, s, xi, op(move |b, d| rpe.forward(b, d)))?));

    let (mut s, mut i) = setup(rng.random());
    let mlp = Mlp::new(&mut s, &mut i, "dense", &[9, 7, 4]);
    randomize_biases(&mut s, &mut rng);
    let xi = random(&mut rng, &[5, 9]);
    out.push(("dense_mlp".into(), check_layer(&mut rng, s, xi, op(move |b, x| mlp.forward(b, x)))?));

    let a = random(&mut rng, &[7, 3]);
    let g = random(&mut rng, &[9, 3]);
    out.push(("chamfer_l1".into(), grad_check(|_, v| Ok(chamfer_l1_var(v[0], v[1])), &[a, g], DEFAULT_STEP, TOL)?));
    Ok(out)
}

/// Concatenation of two outputs flattened, for a single readout.
pub fn flat_pair<'t>(a: Var<'t, f64>, b: Var<'t, f64>) -> Var<'t, f64> {
    let (na, nb) = (a.value().numel(), b.value().numel());
    revnet::concat(&[a.reshape(&[na]), b.reshape(&[nb])], 0)
}

/// Zero-initialised biases (VN and dense) get random values so their
/// gradients are exercised in general position.
pub fn randomize_biases(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    for id in store.ids().collect::<Vec<_>>() {
        if store.name(id).ends_with(".bias") {
            let shape = store.get(id).shape().to_vec();
            *store.get_mut(id) = random(rng, &shape).scale(0.3);
        }
    }
}

/// Smallest config that still has every module (ZCA norms, bias, two
/// stages, encoder and decoder blocks, 4-way refinement).
pub fn micro_config() -> ModelConfig {
    ModelConfig {
        k0: 4,
        embed_channels: 3,
        stages: vec![StageConfig { points: 8, channels: 3, resmlp: 1 }, StageConfig { points: 4, channels: 6, resmlp: 1 }],
        k_group: 3,
        observed: 4,
        missing: 3,
        channels: 6,
        global_channels: 3,
        encoder_layers: 1,
        decoder_layers: 1,
        heads: 2,
        k_query: 2,
        points_per_anchor: 4,
        hidden: 8,
        norm: NormKind::Zca,
        vn_bias: true,
    }
}

pub fn training_pair(seed: u64, partial: usize, gt: usize) -> Result<(Tensor<f64>, Tensor<f64>)> {
    let spec = SyntheticShapeSpec::new(ShapeFamily::Cuboid, partial, gt);
    let (p, g) = generate_pair::<f64>(&spec, seed)?;
    Ok((p.valid_points(), g.valid_points()))
}

/// Grad-checks the composed objective `CD(anchors, gt) + CD(fine, gt)` of a
/// whole model with respect to its parameters.
///
/// ZCA matrices are recorded once at the unperturbed parameters and replayed
/// in every evaluation. With `extra = Some(k)`, one random coordinate of
/// every parameter tensor plus `k` more are checked instead of all of them.
pub fn loss_check(cfg: ModelConfig, seed: u64, extra: Option<usize>) -> Result<GradCheckReport> {
    loss_check_step(cfg, seed, extra, LOSS_STEP)
}

/// [`loss_check`] with finite-difference step `h`.
pub fn loss_check_step(cfg: ModelConfig, seed: u64, extra: Option<usize>, h: f64) -> Result<GradCheckReport> {
    let mut model = Revnet::<f64>::new(cfg.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x51);
    randomize_biases(model.params_mut(), &mut rng);
    let (partial, gt) = training_pair(seed, 2 * cfg.stages[0].points, 4 * cfg.output_points())?;
    let whitening = {
        let tape = Tape::new();
        let b = Binder::frozen(&tape, model.params()).recording();
        model.forward(&b, tape.constant(partial.clone()))?;
        b.recorded_whitening()
    };
    match extra {
        None => grad_check_with(
            &model,
            |tape, model, vars| {
                let b = Binder::from_vars(tape, model.params(), vars)?.replaying(whitening.clone());
                let out = model.forward(&b, tape.constant(partial.clone()))?;
                Ok(revnet_loss(&out, tape.constant(gt.clone()))?.total)
            },
            model.params().tensors(),
            h,
            TOL,
        ),
        Some(extra) => {
            // Parameters become base + d·E for a vector d of picked coordinates.
            let base = model.params().tensors().to_vec();
            let total: usize = base.iter().map(Tensor::numel).sum();
            let mut picks = Vec::with_capacity(base.len() + extra);
            let mut offset = 0;
            for t in &base {
                picks.push(offset + rng.random_range(0..t.numel()));
                offset += t.numel();
            }
            picks.extend((0..extra).map(|_| rng.random_range(0..total)));
            let k = picks.len();
            let selectors: Vec<Tensor<f64>> = {
                let mut offset = 0;
                base.iter()
                    .map(|t| {
                        let n = t.numel();
                        let sel = Tensor::from_fn(&[k, n], |idx| {
                            let (row, col) = (idx / n, idx % n);
                            if picks[row] == offset + col {
                                1.0
                            } else {
                                0.0
                            }
                        });
                        offset += n;
                        sel
                    })
                    .collect()
            };
            grad_check_with(
                &model,
                |tape, model, vars| {
                    let d = revnet::concat(vars, 0).reshape(&[1, k]);
                    let params: Vec<Var<'_, f64>> = base
                        .iter()
                        .zip(&selectors)
                        .map(|(t, sel)| tape.constant(t.clone()).add(d.matmul(tape.constant(sel.clone())).reshape(t.shape())))
                        .collect();
                    let b = Binder::from_vars(tape, model.params(), &params)?.replaying(whitening.clone());
                    let out = model.forward(&b, tape.constant(partial.clone()))?;
                    Ok(revnet_loss(&out, tape.constant(gt.clone()))?.total)
                },
                &vec![Tensor::zeros(&[1]); k],
                h,
                TOL,
            )
        }
    }
}
