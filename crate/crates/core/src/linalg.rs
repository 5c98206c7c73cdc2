//! Symmetric 3×3 eigendecomposition and the ZCA whitening matrix built on it.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::so3::{mat3_of, tensor_of, Mat3};
use crate::tensor::Tensor;

const MAX_SWEEPS: usize = 50;

/// Eigenvalue floor added before the inverse square root in whitening.
pub const WHITENING_EPS: f64 = 1e-5;

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
///
/// Returns `(U, λ)` with `S = U·diag(λ)·Uᵀ`, eigenvectors in the columns
/// of `U`, and `λ` sorted in descending order.
pub fn eig_sym3_mat<S: Scalar>(a: &Mat3<S>) -> (Mat3<S>, [S; 3]) {
    let mut a = *a;
    let mut v = [[S::zero(); 3]; 3];
    for (i, row) in v.iter_mut().enumerate() {
        row[i] = S::one();
    }
    let tol = S::lit(1e-12);
    for _ in 0..MAX_SWEEPS {
        let off = a[0][1].abs().max(a[0][2].abs()).max(a[1][2].abs());
        if off <= tol {
            break;
        }
        let mut rotated = false;
        for (p, q) in [(0, 1), (0, 2), (1, 2)] {
            let apq = a[p][q];
            if apq == S::zero() {
                continue;
            }
            // Entries that are negligible relative to the diagonal are dropped;
            // this also lets low-precision scalars terminate.
            if apq.abs() <= S::epsilon() * (a[p][p].abs() + a[q][q].abs()) * S::lit(0.5) {
                a[p][q] = S::zero();
                a[q][p] = S::zero();
                continue;
            }
            rotated = true;
            let theta = (a[q][q] - a[p][p]) / (S::lit(2.0) * apq);
            let t = theta.signum() / (theta.abs() + (theta * theta + S::one()).sqrt());
            let c = S::one() / (t * t + S::one()).sqrt();
            let s = t * c;
            for k in 0..3 {
                let akp = a[k][p];
                let akq = a[k][q];
                a[k][p] = c * akp - s * akq;
                a[k][q] = s * akp + c * akq;
            }
            for k in 0..3 {
                let apk = a[p][k];
                let aqk = a[q][k];
                a[p][k] = c * apk - s * aqk;
                a[q][k] = s * apk + c * aqk;
            }
            a[p][q] = S::zero();
            a[q][p] = S::zero();
            for row in v.iter_mut() {
                let vp = row[p];
                let vq = row[q];
                row[p] = c * vp - s * vq;
                row[q] = s * vp + c * vq;
            }
        }
        if !rotated {
            break;
        }
    }
    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| a[j][j].partial_cmp(&a[i][i]).unwrap_or(std::cmp::Ordering::Equal));
    let lambda = order.map(|i| a[i][i]);
    let mut u = [[S::zero(); 3]; 3];
    for (col, &src) in order.iter().enumerate() {
        for r in 0..3 {
            u[r][col] = v[r][src];
        }
    }
    (u, lambda)
}

/// Tensor front end for [`eig_sym3_mat`]; rejects non-symmetric input.
pub fn eig_sym3<S: Scalar>(s: &Tensor<S>) -> Result<(Tensor<S>, [S; 3])> {
    if s.shape() != [3, 3] {
        return Err(Error::Shape(format!("eig_sym3 needs 3x3, got {:?}", s.shape())));
    }
    let m = mat3_of(s);
    let scale = s.max_abs().max(S::one());
    for i in 0..3 {
        for j in i + 1..3 {
            if (m[i][j] - m[j][i]).abs() > S::lit(1e-9) * scale {
                return Err(Error::Precondition(format!("matrix not symmetric at ({i},{j})")));
            }
        }
    }
    let mut sym = m;
    for i in 0..3 {
        for j in i + 1..3 {
            let avg = (m[i][j] + m[j][i]) * S::lit(0.5);
            sym[i][j] = avg;
            sym[j][i] = avg;
        }
    }
    let (u, l) = eig_sym3_mat(&sym);
    Ok((tensor_of(&u), l))
}

/// `U·(Λ + εI)^{-1/2}·Uᵀ` for a symmetric positive semi-definite `sigma`.
pub fn whitening_matrix<S: Scalar>(sigma: &Mat3<S>, eps: S) -> Mat3<S> {
    let (u, l) = eig_sym3_mat(sigma);
    let inv: [S; 3] = l.map(|x| S::one() / (x.max(S::zero()) + eps).sqrt());
    let mut w = [[S::zero(); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            w[i][j] = (0..3).map(|k| u[i][k] * inv[k] * u[j][k]).sum();
        }
    }
    w
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::so3::Rotation;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn reconstruct(u: &Tensor<f64>, l: [f64; 3]) -> Tensor<f64> {
        let d = Tensor::from_f64(&[3, 3], &[l[0], 0., 0., 0., l[1], 0., 0., 0., l[2]]);
        u.matmul(&d).matmul(&u.transpose())
    }

    fn random_sym(rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let a = Tensor::from_fn(&[3, 3], |_| rng.random_range(-2.0..2.0));
        a.add(&a.transpose()).scale(0.5)
    }

    #[test]
    fn identity_spectrum() {
        let (u, l) = eig_sym3(&Tensor::<f64>::eye(3)).unwrap();
        assert_eq!(l, [1.0, 1.0, 1.0]);
        assert!(u.transpose().matmul(&u).max_abs_diff(&Tensor::eye(3)) < 1e-15);
    }

    #[test]
    fn diagonal_gives_signed_permutation() {
        let s = Tensor::<f64>::from_f64(&[3, 3], &[0., 0., 0., 0., 4., 0., 0., 0., 1.]);
        let (u, l) = eig_sym3(&s).unwrap();
        assert_eq!(l, [4.0, 1.0, 0.0]);
        for &x in u.data() {
            assert!(x == 0.0 || x.abs() == 1.0, "{u:?}");
        }
    }

    #[test]
    fn random_reconstruction() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..500 {
            let s = random_sym(&mut rng);
            let (u, l) = eig_sym3(&s).unwrap();
            assert!(reconstruct(&u, l).max_abs_diff(&s) <= 1e-9);
            assert!(u.transpose().matmul(&u).max_abs_diff(&Tensor::eye(3)) < 1e-12);
            assert!(l[0] >= l[1] && l[1] >= l[2]);
        }
    }

    #[test]
    fn non_symmetric_rejected() {
        let s = Tensor::<f64>::from_f64(&[3, 3], &[1., 2., 0., 0., 1., 0., 0., 0., 1.]);
        assert!(matches!(eig_sym3(&s), Err(Error::Precondition(_))));
    }

    #[test]
    fn whitening_conjugates_with_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut checked = 0;
        while checked < 200 {
            let a = Tensor::<f64>::from_fn(&[3, 3], |_| rng.random_range(-1.0..1.0));
            let s = a.transpose().matmul(&a);
            let (_, l) = eig_sym3(&s).unwrap();
            if (l[0] - l[1]).min(l[1] - l[2]) < 1e-3 {
                continue;
            }
            let r = Rotation::<f64>::random(rng.random());
            let w = tensor_of(&whitening_matrix(&mat3_of(&s), 1e-5));
            let wr = tensor_of(&whitening_matrix(&mat3_of(&r.conjugate(&s)), 1e-5));
            assert!(wr.max_abs_diff(&r.conjugate(&w)) <= 1e-7);
            checked += 1;
        }
    }

    #[test]
    fn f32_converges() {
        let s = Tensor::<f32>::from_f64(&[3, 3], &[2., 1., 0., 1., 2., 1., 0., 1., 2.]);
        let (u, l) = eig_sym3(&s).unwrap();
        let d = Tensor::from_vec(&[3, 3], vec![l[0], 0., 0., 0., l[1], 0., 0., 0., l[2]]);
        assert!(u.matmul(&d).matmul(&u.transpose()).max_abs_diff(&s) < 1e-5);
    }
}
