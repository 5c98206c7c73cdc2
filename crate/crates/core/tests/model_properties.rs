mod support;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use revnet::geometry::chamfer_l1_var;
use revnet::nn::Binder;
use revnet::{ModelConfig, PointCloud64, Revnet64, Rotation, Tape, Tensor};
use support::grads::{random, randomize_biases};

fn setup(cfg: ModelConfig, seed: u64) -> (Revnet64, Tensor<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = Revnet64::new(cfg, seed).unwrap();
    let points = random(&mut rng, &[48, 3]);
    (net, points)
}

#[test]
fn observed_anchors_are_input_rows() {
    let (net, points) = setup(ModelConfig::tiny(), 1);
    let tape = Tape::new();
    let b = Binder::frozen(&tape, net.params());
    let out = net.forward(&b, tape.constant(points.clone())).unwrap();
    let pos = out.observed.positions.value();
    assert_eq!(out.anchor_indices.len(), net.config().observed);
    assert_eq!(out.anchor_indices[0], 0);
    for (row, &i) in out.anchor_indices.iter().enumerate() {
        assert_eq!(&pos.data()[3 * row..3 * row + 3], &points.data()[3 * i..3 * i + 3]);
    }
}

#[test]
fn zeroed_blocks_pass_queries_through() {
    let (mut net, points) = setup(ModelConfig::tiny(), 2);
    net.zero_output_projections();
    let tape = Tape::new();
    let b = Binder::frozen(&tape, net.params());
    let out = net.forward(&b, tape.constant(points)).unwrap();
    let queries = net.matr.queries(&b, out.observed.positions, out.predicted.positions, out.global).unwrap();
    assert_eq!(out.predicted.features.value().as_ref(), queries.value().as_ref());
    for block in &net.matr.encoder {
        let y = block.forward(&b, out.observed.features, None).unwrap();
        assert_eq!(y.value().as_ref(), out.observed.features.value().as_ref());
    }
}

#[test]
fn zeroed_decoder_repeats_anchors() {
    let cfg = ModelConfig::toy();
    let ppa = cfg.points_per_anchor;
    let (mut net, points) = setup(cfg, 3);
    let decoder = net.decoder.clone();
    decoder.zero_output(net.params_mut());
    let (anchors, fine) = net.complete_with_anchors(&PointCloud64::new(points).unwrap()).unwrap();
    let (a, f) = (anchors.points(), fine.points());
    assert_eq!(f.shape()[0], a.shape()[0] * ppa);
    for i in 0..f.shape()[0] {
        let j = i / ppa;
        for d in 0..3 {
            assert!((f.data()[3 * i + d] - a.data()[3 * j + d]).abs() <= 1e-12);
        }
    }
}

#[test]
fn every_parameter_receives_gradient() {
    let (mut net, points) = setup(ModelConfig::tiny(), 4);
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    randomize_biases(net.params_mut(), &mut rng);
    let gt = random(&mut rng, &[32, 3]);
    let tape = Tape::new();
    let b = Binder::new(&tape, net.params());
    let out = net.forward(&b, tape.constant(points)).unwrap();
    let loss = chamfer_l1_var(out.fine, tape.constant(gt));
    let grads = b.param_grads(&tape.backward(loss).unwrap());
    let dead: Vec<&str> = net
        .params()
        .iter()
        .zip(&grads)
        .filter(|(_, g)| g.max_abs() == 0.0)
        .map(|((n, _), _)| n)
        .collect();
    assert!(dead.is_empty(), "no gradient reaches {dead:?}");
}

#[test]
fn without_encoder_blocks() {
    let cfg = ModelConfig { encoder_layers: 0, ..ModelConfig::tiny() };
    let (net, points) = setup(cfg, 5);
    let cloud = PointCloud64::new(points).unwrap();
    let r = Rotation::random(50);
    let f = net.complete(&cloud).unwrap();
    let fr = net.complete(&cloud.rotated(&r)).unwrap();
    assert!(r.apply(f.points()).max_abs_diff(fr.points()) / f.points().max_abs() <= 1e-6);
}

#[test]
fn concurrent_forwards_agree() {
    let (net, points) = setup(ModelConfig::tiny(), 6);
    let cloud = PointCloud64::new(points).unwrap();
    let expected = net.complete(&cloud).unwrap();
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..4).map(|_| s.spawn(|| net.complete(&cloud).unwrap())).collect();
        for h in handles {
            assert_eq!(h.join().unwrap(), expected);
        }
    });
}

#[test]
fn output_size_follows_config() {
    for cfg in [ModelConfig::tiny(), ModelConfig::toy()] {
        let want = cfg.output_points();
        let (net, points) = setup(cfg, 7);
        assert_eq!(net.complete(&PointCloud64::new(points).unwrap()).unwrap().valid_count(), want);
    }
}
