//! Rotations acting on row vectors by right multiplication (`X·R`).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// An element of SO(3) stored as a 3×3 matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Rotation<S: Scalar> {
    matrix: Tensor<S>,
}

pub(crate) type Mat3<S> = [[S; 3]; 3];

pub(crate) fn det3<S: Scalar>(m: &Mat3<S>) -> S {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

pub(crate) fn mat3_of<S: Scalar>(t: &Tensor<S>) -> Mat3<S> {
    assert_eq!(t.shape(), &[3, 3], "expected a 3x3 matrix");
    let d = t.data();
    [[d[0], d[1], d[2]], [d[3], d[4], d[5]], [d[6], d[7], d[8]]]
}

pub(crate) fn tensor_of<S: Scalar>(m: &Mat3<S>) -> Tensor<S> {
    Tensor::from_vec(&[3, 3], m.iter().flatten().copied().collect())
}

impl<S: Scalar> Rotation<S> {
    pub fn identity() -> Self {
        Self { matrix: Tensor::eye(3) }
    }

    /// Validates that `matrix` is orthonormal with unit determinant (1e-10).
    pub fn from_matrix(matrix: Tensor<S>) -> Result<Self> {
        if matrix.shape() != [3, 3] {
            return Err(Error::Shape(format!("rotation must be 3x3, got {:?}", matrix.shape())));
        }
        let tol = S::lit(1e-10).max(S::epsilon() * S::lit(64.0));
        let rtr = matrix.transpose().matmul(&matrix);
        if rtr.max_abs_diff(&Tensor::eye(3)) > tol {
            return Err(Error::Precondition("rotation matrix is not orthonormal".into()));
        }
        if (det3(&mat3_of(&matrix)) - S::one()).abs() > tol {
            return Err(Error::Precondition("rotation matrix has determinant != +1".into()));
        }
        Ok(Self { matrix })
    }

    /// Haar-uniform rotation from a unit quaternion with Gaussian components.
    pub fn random(seed: u64) -> Self {
        Self::random_with(&mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn random_with<R: rand::Rng + ?Sized>(rng: &mut R) -> Self {
        let mut q = [0f64; 4];
        let n = loop {
            for c in q.iter_mut() {
                *c = StandardNormal.sample(rng);
            }
            let n = q.iter().map(|c| c * c).sum::<f64>().sqrt();
            if n > 1e-6 {
                break n;
            }
        };
        let [w, x, y, z] = q.map(|c| c / n);
        // Row-vector convention: v' = v·R, so R is the transpose of the usual
        // column-vector quaternion matrix.
        let m = [
            [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y + w * z), 2.0 * (x * z - w * y)],
            [2.0 * (x * y - w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z + w * x)],
            [2.0 * (x * z + w * y), 2.0 * (y * z - w * x), 1.0 - 2.0 * (x * x + y * y)],
        ];
        Self { matrix: Tensor::from_f64(&[3, 3], &m.concat()) }
    }

    pub fn matrix(&self) -> &Tensor<S> {
        &self.matrix
    }

    pub fn inverse(&self) -> Self {
        Self { matrix: self.matrix.transpose() }
    }

    /// `self` followed by `other`: `X·self·other`.
    pub fn then(&self, other: &Self) -> Self {
        Self { matrix: self.matrix.matmul(&other.matrix) }
    }

    /// Right-multiplies every trailing 3-vector of `x` by the rotation.
    pub fn apply(&self, x: &Tensor<S>) -> Tensor<S> {
        assert_eq!(x.shape().last(), Some(&3), "rotation needs trailing dimension 3");
        if x.ndim() == 1 {
            return x.reshape(&[1, 3]).matmul(&self.matrix).into_shape(&[3]);
        }
        x.matmul(&self.matrix)
    }

    /// `Rᵀ·M·R` for a 3×3 matrix `M`.
    pub fn conjugate(&self, m: &Tensor<S>) -> Tensor<S> {
        self.matrix.transpose().matmul(m).matmul(&self.matrix)
    }

    pub fn cast<T: Scalar>(&self) -> Rotation<T> {
        Rotation { matrix: self.matrix.cast() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_is_deterministic_and_proper() {
        for seed in 0..50 {
            let r = Rotation::<f64>::random(seed);
            assert_eq!(r, Rotation::random(seed));
            assert!(Rotation::from_matrix(r.matrix().clone()).is_ok());
        }
    }

    #[test]
    fn haar_mean_of_entry_is_zero() {
        let n = 10_000;
        let mean: f64 = (0..n).map(|s| Rotation::<f64>::random(s).matrix().at(&[0, 0])).sum::<f64>() / n as f64;
        // The entry is uniform on [-1, 1] under Haar measure (std 1/sqrt(3)).
        assert!(mean.abs() < 0.05, "mean {mean}");
    }

    #[test]
    fn rejects_reflection() {
        let m = Tensor::<f64>::from_f64(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., -1.]);
        assert!(Rotation::from_matrix(m).is_err());
    }

    #[test]
    fn apply_matches_row_vector_product() {
        let r = Rotation::<f64>::random(3);
        let v = Tensor::from_f64(&[3], &[1., 2., 3.]);
        let out = r.apply(&v);
        let m = r.matrix();
        for j in 0..3 {
            let want: f64 = (0..3).map(|i| v.data()[i] * m.at(&[i, j])).sum();
            assert!((out.data()[j] - want).abs() < 1e-15);
        }
    }
}
