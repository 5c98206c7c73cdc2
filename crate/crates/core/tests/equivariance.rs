mod support;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use revnet::geometry::{chamfer_l1, chamfer_l2, f_score};
use revnet::model::CwsaHead;
use revnet::nn::{Binder, Initializer, ParamStore};
use revnet::vn::{ops, MlpSpec, NormKind, VnEdgeConv, VnInv, VnLinear, VnMaxPool, VnMlp, VnRelu};
use revnet::{ModelConfig, PointCloud64, Result, Revnet, Rotation, Tape, Tensor, Var};
use support::grads::{random, randomize_biases};
use support::zca::zca_suite;

fn op<F>(f: F) -> F
where
    F: for<'t> Fn(&Binder<'t, f64>, Var<'t, f64>) -> Result<Var<'t, f64>>,
{
    f
}

fn run<F>(store: &ParamStore<f64>, x: &Tensor<f64>, f: &F) -> Tensor<f64>
where
    F: for<'t> Fn(&Binder<'t, f64>, Var<'t, f64>) -> Result<Var<'t, f64>>,
{
    let tape = Tape::new();
    let b = Binder::frozen(&tape, store);
    f(&b, tape.constant(x.clone())).unwrap().value().as_ref().clone()
}

/// `max |f(X·R) − f(X)·R|`.
fn equivariance<F>(store: &ParamStore<f64>, x: &Tensor<f64>, r: &Rotation<f64>, f: F) -> f64
where
    F: for<'t> Fn(&Binder<'t, f64>, Var<'t, f64>) -> Result<Var<'t, f64>>,
{
    r.apply(&run(store, x, &f)).max_abs_diff(&run(store, &r.apply(x), &f))
}

/// `max |f(X·R) − f(X)|`.
fn invariance<F>(store: &ParamStore<f64>, x: &Tensor<f64>, r: &Rotation<f64>, f: F) -> f64
where
    F: for<'t> Fn(&Binder<'t, f64>, Var<'t, f64>) -> Result<Var<'t, f64>>,
{
    run(store, x, &f).max_abs_diff(&run(store, &r.apply(x), &f))
}

struct Case {
    rng: ChaCha8Rng,
    store: ParamStore<f64>,
    init: Initializer,
    r: Rotation<f64>,
}

fn case(seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init = Initializer::new(rng.random());
    let r = Rotation::random_with(&mut rng);
    Case { rng, store: ParamStore::new(), init, r }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn vn_linear(seed: u64, n in 1usize..8, cin in 1usize..6, cout in 1usize..6) {
        let mut c = case(seed);
        let l = VnLinear::new(&mut c.store, &mut c.init, "l", cin, cout, false);
        let x = random(&mut c.rng, &[n, cin, 3]);
        prop_assert!(equivariance(&c.store, &x, &c.r, op(|b, x| l.forward(b, x))) <= 1e-12);
    }

    #[test]
    fn vn_bias(seed: u64, n in 1usize..8, cin in 1usize..6, cout in 1usize..6) {
        let mut c = case(seed);
        let l = VnLinear::new(&mut c.store, &mut c.init, "l", cin, cout, true);
        randomize_biases(&mut c.store, &mut c.rng);
        let x = random(&mut c.rng, &[n, cin, 3]);
        prop_assert!(equivariance(&c.store, &x, &c.r, op(|b, x| l.forward(b, x))) <= 1e-10);
    }

    #[test]
    fn vn_relu(seed: u64, n in 1usize..8, ch in 1usize..6) {
        let mut c = case(seed);
        let l = VnRelu::new(&mut c.store, &mut c.init, "r", ch);
        let x = random(&mut c.rng, &[n, ch, 3]);
        prop_assert!(equivariance(&c.store, &x, &c.r, op(|b, x| l.forward(b, x))) <= 1e-12);
    }

    #[test]
    fn pools(seed: u64, n in 1usize..10, ch in 1usize..6) {
        let mut c = case(seed);
        let p = VnMaxPool::new(&mut c.store, &mut c.init, "p", ch);
        let x = random(&mut c.rng, &[n, ch, 3]);
        prop_assert!(equivariance(&c.store, &x, &c.r, op(|b, x| p.forward(b, x))) <= 1e-12);
        prop_assert!(equivariance(&c.store, &x, &c.r, op(|_, x| ops::vn_mean_pool(x, 0))) <= 1e-12);
    }

    #[test]
    fn norms(seed: u64, n in 2usize..10, ch in 2usize..6) {
        let mut c = case(seed);
        let g = c.store.add("g", random(&mut c.rng, &[ch, 1]));
        let x = random(&mut c.rng, &[n, ch, 3]);
        prop_assert!(equivariance(&c.store, &x, &c.r, op(|b, x| ops::vn_batch_norm(x, b.var(g), None))) <= 1e-12);
        prop_assert!(equivariance(&c.store, &x, &c.r, op(|b, x| ops::vn_layer_norm_2norm(x, b.var(g)))) <= 1e-12);
        prop_assert!(equivariance(&c.store, &x, &c.r, op(|b, x| ops::vn_zca_layer_norm(x, b.var(g), 1e-5))) <= 1e-6);
    }

    #[test]
    fn vn_mlp(seed: u64, n in 2usize..8, norm in prop::sample::select(vec![NormKind::Zca, NormKind::TwoNorm, NormKind::Batch, NormKind::None])) {
        let mut c = case(seed);
        let spec = MlpSpec::new(&[3, 5, 4]).bias(true).norm(norm).activate_last(true);
        let m = VnMlp::new(&mut c.store, &mut c.init, "m", &spec).unwrap();
        randomize_biases(&mut c.store, &mut c.rng);
        let x = random(&mut c.rng, &[n, 3, 3]);
        prop_assert!(equivariance(&c.store, &x, &c.r, op(|b, x| m.forward(b, x))) <= 1e-8);
    }

    #[test]
    fn vn_edge_conv(seed: u64, n in 2usize..16, k in 1usize..6) {
        let mut c = case(seed);
        let spec = MlpSpec::new(&[6, 4]).activate_last(true);
        let e = VnEdgeConv::new(&mut c.store, &mut c.init, "e", 1, &spec, k).unwrap();
        let p = random(&mut c.rng, &[n, 3]);
        prop_assert!(equivariance(&c.store, &p, &c.r, op(|b, p| e.forward(b, p, p, None))) <= 1e-10);
    }

    #[test]
    fn vn_invariant(seed: u64, n in 1usize..8, ch in 3usize..6) {
        let mut c = case(seed);
        let inv = VnInv::new(&mut c.store, &mut c.init, "i", ch, true).unwrap();
        let x = random(&mut c.rng, &[n, ch, 3]);
        prop_assert!(invariance(&c.store, &x, &c.r, op(|b, x| Ok(inv.forward(b, x)?.features))) <= 1e-10);
        prop_assert!(equivariance(&c.store, &x, &c.r, op(|b, x| Ok(inv.forward(b, x)?.frame))) <= 1e-10);

        // Frames are proper rotations.
        let frames = run(&c.store, &x, &op(|b, x| Ok(inv.forward(b, x)?.frame)));
        for i in 0..n {
            let t = Tensor::from_vec(&[3, 3], frames.data()[9 * i..9 * i + 9].to_vec());
            prop_assert!(Rotation::from_matrix(t).is_ok());
        }
    }

    #[test]
    fn cwsa(seed: u64, m in 1usize..5, n in 1usize..6, ch in 3usize..5) {
        let mut c = case(seed);
        let head = CwsaHead::new(&mut c.store, &mut c.init, "h", ch).unwrap();
        randomize_biases(&mut c.store, &mut c.rng);
        let x = random(&mut c.rng, &[m + n, ch, 3]);
        let scores = op(|b, x| head.scores(b, x.slice(0, 0, m), x.slice(0, m, n)));
        prop_assert!(invariance(&c.store, &x, &c.r, scores) <= 1e-10);
        prop_assert!(equivariance(&c.store, &x, &c.r, op(|b, x| head.attend(b, x.slice(0, 0, m), x.slice(0, m, n), x.slice(0, m, n)))) <= 1e-10);

        // Each (query, channel) distribution over keys sums to 1.
        let s = run(&c.store, &x, &scores);
        for qi in 0..m {
            for ci in 0..ch {
                let total: f64 = (0..n).map(|ki| s.data()[(qi * n + ki) * ch + ci]).sum();
                prop_assert!((total - 1.0).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn metrics_are_rotation_invariant(seed: u64, na in 1usize..30, nb in 1usize..30) {
        let mut c = case(seed);
        let a = PointCloud64::new(random(&mut c.rng, &[na, 3])).unwrap();
        let b = PointCloud64::new(random(&mut c.rng, &[nb, 3])).unwrap();
        let (ar, br) = (a.rotated(&c.r), b.rotated(&c.r));
        prop_assert!((chamfer_l1(&a, &b).unwrap() - chamfer_l1(&ar, &br).unwrap()).abs() <= 1e-12);
        prop_assert!((chamfer_l2(&a, &b).unwrap() - chamfer_l2(&ar, &br).unwrap()).abs() <= 1e-12);
        prop_assert_eq!(f_score(&a, &a, 0.1).unwrap(), 100.0);
    }

    #[test]
    fn rotations_are_proper(seed: u64) {
        let r = Rotation::<f64>::random(seed);
        prop_assert!(Rotation::from_matrix(r.matrix().clone()).is_ok());
        let back = r.then(&r.inverse());
        prop_assert!(back.matrix().max_abs_diff(&Tensor::eye(3)) <= 1e-14);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn model_forward(seed: u64, extra in 0usize..24) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = Revnet::<f64>::new(ModelConfig::tiny(), rng.random()).unwrap();
        let cloud = PointCloud64::new(random(&mut rng, &[40 + extra, 3])).unwrap();
        let r = Rotation::random_with(&mut rng);
        let (a, f) = net.complete_with_anchors(&cloud).unwrap();
        let (ar, fr) = net.complete_with_anchors(&cloud.rotated(&r)).unwrap();
        for (x, xr) in [(&a, &ar), (&f, &fr)] {
            let rel = r.apply(x.points()).max_abs_diff(xr.points()) / x.points().max_abs();
            prop_assert!(rel <= 1e-6, "relative deviation {rel:e}");
        }
    }
}

#[test]
fn zca_whitening_and_conjugation() {
    let rep = zca_suite(200, 5);
    assert!(rep.covariance <= 1e-4, "{rep:?}");
    assert!(rep.conjugation <= 1e-7, "{rep:?}");
    assert!(rep.conjugation_trials >= 150, "{rep:?}");
}
