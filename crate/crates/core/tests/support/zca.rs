//! Whitening checks: output covariance and rotation conjugation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use revnet::linalg::{eig_sym3, whitening_matrix, WHITENING_EPS};
use revnet::vn::ops::{flat_moments, vn_zca_layer_norm};
use revnet::{Rotation, Tape, Tensor};

#[derive(Debug, Default)]
pub struct ZcaReport {
    /// max |cov(ZCA(X)) − I| over trials.
    pub covariance: f64,
    /// max |W(RᵀΣR) − RᵀW(Σ)R| over trials with eigen-gap ≥ 1e-3.
    pub conjugation: f64,
    pub conjugation_trials: usize,
}

fn mat(t: &Tensor<f64>) -> [[f64; 3]; 3] {
    let d = t.data();
    [[d[0], d[1], d[2]], [d[3], d[4], d[5]], [d[6], d[7], d[8]]]
}

fn tensor(m: &[[f64; 3]; 3]) -> Tensor<f64> {
    Tensor::from_vec(&[3, 3], m.iter().flatten().copied().collect())
}

pub fn zca_suite(trials: usize, seed: u64) -> ZcaReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rep = ZcaReport::default();
    for _ in 0..trials {
        let n = rng.random_range(10..40);
        let c = rng.random_range(3..8);
        let x = Tensor::from_fn(&[n, c, 3], |_| rng.sample::<f64, _>(StandardNormal));
        let tape = Tape::new();
        let y = vn_zca_layer_norm(tape.constant(x.clone()), tape.constant(Tensor::ones(&[c, 1])), WHITENING_EPS).unwrap();
        let (_, cov) = flat_moments(&y.value());
        let dev = tensor(&cov).max_abs_diff(&Tensor::eye(3));
        rep.covariance = rep.covariance.max(dev);

        let (_, sigma) = flat_moments(&x);
        let (_, l) = eig_sym3(&tensor(&sigma)).unwrap();
        if (l[0] - l[1]).min(l[1] - l[2]) < 1e-3 {
            continue;
        }
        let r = Rotation::<f64>::random_with(&mut rng);
        let lhs = tensor(&whitening_matrix(&mat(&r.conjugate(&tensor(&sigma))), WHITENING_EPS));
        let rhs = r.conjugate(&tensor(&whitening_matrix(&sigma, WHITENING_EPS)));
        rep.conjugation = rep.conjugation.max(lhs.max_abs_diff(&rhs));
        rep.conjugation_trials += 1;
    }
    rep
}
