//! Functional Vector Neuron operations on tape variables.
//!
//! A VN feature with `C` channels is a `[.., C, 3]` tensor; leading axes
//! index independent features (points, neighbors, batch). A rotation `R`
//! acts on every feature by right multiplication.

use crate::autodiff::Var;
use crate::error::{shape_err, Error, Result};
use crate::linalg::whitening_matrix;
use crate::scalar::Scalar;
use crate::so3::det3;
use crate::tensor::Tensor;

/// Bias directions are dropped when `‖W_B·X‖_F` falls below this.
pub const BIAS_FLOOR: f64 = 1e-8;
/// Direction norms below this make VN-ReLU a pass-through for the channel.
pub const DIRECTION_FLOOR: f64 = 1e-12;
/// Floor on norm statistics in the 2-norm normalizations.
pub const NORM_FLOOR: f64 = 1e-12;
/// Diagonal perturbation applied to rank-deficient frames.
pub const FRAME_PERTURBATION: f64 = 1e-8;

pub(crate) fn check_vn(x: &[usize], channels: Option<usize>, what: &str) -> Result<()> {
    let nd = x.len();
    if nd < 2 || x[nd - 1] != 3 {
        return shape_err(format!("{what}: expected [.., C, 3] VN feature, got {x:?}"));
    }
    if let Some(c) = channels {
        if x[nd - 2] != c {
            return shape_err(format!("{what}: expected {c} channels, got {x:?}"));
        }
    }
    Ok(())
}

fn mask_like<S: Scalar>(t: &Tensor<S>, pred: impl Fn(S) -> bool) -> Tensor<S> {
    t.map(|x| if pred(x) { S::one() } else { S::zero() })
}

/// `W·X` for `W: [C', C]`.
pub fn vn_linear<'t, S: Scalar>(x: Var<'t, S>, w: Var<'t, S>) -> Var<'t, S> {
    w.matmul(x)
}

/// The equivariant bias `B·(W_B·X)/‖W_B·X‖_F`, zero when the norm is below [`BIAS_FLOOR`].
pub fn vn_bias<'t, S: Scalar>(x: Var<'t, S>, wb: Var<'t, S>, b: Var<'t, S>) -> Var<'t, S> {
    let m = wb.matmul(x);
    let n2 = m.square().sum_axis(-1, true).sum_axis(-2, true);
    let floor2 = S::lit(BIAS_FLOOR * BIAS_FLOOR);
    let keep = mask_like(&n2.value(), |v| v >= floor2);
    let pad = keep.map(|k| S::one() - k);
    let tape = x.tape();
    let norm = n2.add(tape.constant(pad)).sqrt();
    let dir = m.div(norm).mul(tape.constant(keep));
    b.matmul(dir)
}

/// VN-ReLU against per-channel directions `k` of the same shape as `x`.
///
/// Channels with `⟨x,k⟩ > 0` pass unchanged; the rest are projected onto
/// the plane orthogonal to `k`.
pub fn vn_relu<'t, S: Scalar>(x: Var<'t, S>, k: Var<'t, S>) -> Var<'t, S> {
    let tape = x.tape();
    let dot = x.mul(k).sum_axis(-1, true);
    let kk = k.square().sum_axis(-1, true);
    let floor2 = S::lit(DIRECTION_FLOOR * DIRECTION_FLOOR);
    let dv = dot.value();
    let kv = kk.value();
    let pass = dv.zip_map(&kv, |d, n| if d > S::zero() || n < floor2 { S::one() } else { S::zero() });
    let project = pass.map(|p| S::one() - p);
    let coef = dot.div(kk.add(tape.constant(pass))).mul(tape.constant(project));
    x.sub(coef.mul(k))
}

/// Channel-wise mean over `axis`.
pub fn vn_mean_pool<'t, S: Scalar>(x: Var<'t, S>, axis: isize) -> Result<Var<'t, S>> {
    let shape = x.shape();
    check_vn(&shape, None, "vn_mean_pool")?;
    let nd = shape.len() as isize;
    let a = if axis < 0 { nd + axis } else { axis };
    if a < 0 || a >= nd - 2 {
        return shape_err(format!("vn_mean_pool: axis {axis} is not a list axis of {shape:?}"));
    }
    if shape[a as usize] == 0 {
        return Err(Error::Empty("vn_mean_pool over an empty list".into()));
    }
    Ok(x.mean_axis(axis, false))
}

/// One-hot selection mask for [`vn_max_pool`]: per channel the list entry
/// with the largest `⟨x, d⟩`, ties to the lowest index.
pub fn max_pool_selection<S: Scalar>(xs: &Tensor<S>, dirs: &Tensor<S>) -> Tensor<S> {
    let (l, c) = (xs.shape()[0], xs.shape()[1]);
    let mut mask = Tensor::zeros(&[l, c, 1]);
    for ch in 0..c {
        let mut best = S::neg_infinity();
        let mut bi = 0;
        for i in 0..l {
            let o = (i * c + ch) * 3;
            let s = (0..3).map(|j| xs.data()[o + j] * dirs.data()[o + j]).sum::<S>();
            if s > best {
                best = s;
                bi = i;
            }
        }
        mask.data_mut()[bi * c + ch] = S::one();
    }
    mask
}

/// VN-MaxPooling of a list `[L, C, 3]` given directions of the same shape.
pub fn vn_max_pool<'t, S: Scalar>(xs: Var<'t, S>, dirs: Var<'t, S>) -> Result<Var<'t, S>> {
    let shape = xs.shape();
    if shape.len() != 3 || shape[2] != 3 {
        return shape_err(format!("vn_max_pool expects [L, C, 3], got {shape:?}"));
    }
    if shape[0] == 0 {
        return Err(Error::Empty("vn_max_pool over an empty list".into()));
    }
    let mask = max_pool_selection(&xs.value(), &dirs.value());
    Ok(xs.mul(xs.tape().constant(mask)).sum_axis(0, false))
}

/// Per-channel vector norms `[.., C, 1]`.
fn channel_norms<'t, S: Scalar>(x: Var<'t, S>) -> Var<'t, S> {
    x.square().sum_axis(-1, true).sqrt()
}

fn floored<'t, S: Scalar>(v: Var<'t, S>, floor: S) -> Var<'t, S> {
    let bump = v.value().map(|x| if x < floor { floor } else { S::zero() });
    v.add(v.tape().constant(bump))
}

/// Batch statistic used by [`vn_batch_norm`]: mean channel norm over all
/// leading axes, shape `[C, 1]`.
pub fn batch_norm_statistic<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let shape = x.shape();
    let c = shape[shape.len() - 2];
    let rows = x.numel() / (3 * c);
    let mut acc = vec![S::zero(); c];
    for r in 0..rows {
        for (ch, a) in acc.iter_mut().enumerate() {
            let o = (r * c + ch) * 3;
            *a += (0..3).map(|j| x.data()[o + j].powi(2)).sum::<S>().sqrt();
        }
    }
    let n = S::from_count(rows);
    Tensor::from_vec(&[c, 1], acc.into_iter().map(|a| a / n).collect())
}

/// VN-BatchNorm: each channel vector is divided by the mean norm of that
/// channel over the batch (all leading axes), then scaled by `gamma: [C, 1]`.
///
/// With `stat` given, that `[C, 1]` statistic replaces the batch one
/// (evaluation with running statistics).
pub fn vn_batch_norm<'t, S: Scalar>(x: Var<'t, S>, gamma: Var<'t, S>, stat: Option<&Tensor<S>>) -> Result<Var<'t, S>> {
    let shape = x.shape();
    check_vn(&shape, None, "vn_batch_norm")?;
    let c = shape[shape.len() - 2];
    let lead: usize = shape[..shape.len() - 2].iter().product();
    if lead == 0 {
        return Err(Error::Empty("vn_batch_norm over an empty batch".into()));
    }
    let flat = x.reshape(&[lead, c, 3]);
    let mean = match stat {
        Some(s) => x.tape().constant(s.clone()),
        None => channel_norms(flat).mean_axis(0, false),
    };
    let mean = floored(mean, S::lit(NORM_FLOOR));
    Ok(flat.div(mean).mul(gamma).reshape(&shape))
}

/// 2-norm VN-LayerNorm: every feature is divided by the RMS of its channel
/// norms, then scaled by `scale: [C, 1]`.
pub fn vn_layer_norm_2norm<'t, S: Scalar>(x: Var<'t, S>, scale: Var<'t, S>) -> Result<Var<'t, S>> {
    check_vn(&x.shape(), None, "vn_layer_norm_2norm")?;
    let ms = x.square().sum_axis(-1, true).mean_axis(-2, true);
    let rms = floored(ms, S::lit(NORM_FLOOR * NORM_FLOOR)).sqrt();
    Ok(x.div(rms).mul(scale))
}

/// Mean `[1, 3]` and covariance of the flattened `[N·C, 3]` vector list.
pub fn flat_moments<S: Scalar>(x: &Tensor<S>) -> ([S; 3], [[S; 3]; 3]) {
    let rows = x.numel() / 3;
    let n = S::from_count(rows);
    let mut mu = [S::zero(); 3];
    for r in 0..rows {
        for j in 0..3 {
            mu[j] += x.data()[3 * r + j];
        }
    }
    mu = mu.map(|m| m / n);
    let mut cov = [[S::zero(); 3]; 3];
    for r in 0..rows {
        let d = [0, 1, 2].map(|j| x.data()[3 * r + j] - mu[j]);
        for i in 0..3 {
            for j in 0..3 {
                cov[i][j] += d[i] * d[j];
            }
        }
    }
    for row in cov.iter_mut() {
        for v in row.iter_mut() {
            *v /= n;
        }
    }
    (mu, cov)
}

/// The ZCA whitening matrix `U(Λ+εI)^{-1/2}Uᵀ` of a VN feature list.
pub fn zca_matrix<S: Scalar>(x: &Tensor<S>, eps: S) -> Result<Tensor<S>> {
    check_vn(x.shape(), None, "zca_matrix")?;
    if x.numel() / 3 < 3 {
        return Err(Error::Precondition(format!(
            "ZCA normalisation needs at least 3 vectors, got {}",
            x.numel() / 3
        )));
    }
    let (_, cov) = flat_moments(x);
    let w = whitening_matrix(&cov, eps);
    Ok(Tensor::from_vec(&[3, 3], w.iter().flatten().copied().collect()))
}

/// `(X − μ)·W ⊙ α` with a caller-supplied whitening matrix `W` held constant.
pub fn vn_whiten_with<'t, S: Scalar>(x: Var<'t, S>, alpha: Var<'t, S>, w: &Tensor<S>) -> Var<'t, S> {
    let shape = x.shape();
    let rows = x.value().numel() / 3;
    let flat = x.reshape(&[rows, 3]);
    let mu = flat.mean_axis(0, true);
    let white = flat.sub(mu).matmul(x.tape().constant(w.clone()));
    white.reshape(&shape).mul(alpha)
}

/// VN-ZCALayerNorm over a VN feature list `[.., C, 3]`.
///
/// Statistics are taken over every vector in the list; `alpha: [C, 1]`.
/// The eigendecomposition is a stop-gradient: `W_ZCA` is a constant in
/// backward while the mean stays differentiable.
pub fn vn_zca_layer_norm<'t, S: Scalar>(x: Var<'t, S>, alpha: Var<'t, S>, eps: S) -> Result<Var<'t, S>> {
    let w = zca_matrix(&x.value(), eps)?;
    Ok(vn_whiten_with(x, alpha, &w))
}

/// Frame produced by [`gram_schmidt_frames`].
pub struct Frames<'t, S: Scalar> {
    pub frames: Var<'t, S>,
    /// Number of `3×3` blocks that were rank deficient and got perturbed.
    pub perturbed: usize,
}

/// Row-wise Gram–Schmidt of every `3×3` block of `t: [.., 3, 3]`, with the
/// third row flipped where needed so each frame has determinant +1.
pub fn gram_schmidt_frames<'t, S: Scalar>(t: Var<'t, S>) -> Frames<'t, S> {
    let tape = t.tape();
    let shape = t.shape();
    let tv = t.value();
    let blocks = tv.numel() / 9;
    let mut perturb = Tensor::zeros(&shape);
    let mut perturbed = 0;
    for bi in 0..blocks {
        let d = &tv.data()[9 * bi..9 * bi + 9];
        let m = [[d[0], d[1], d[2]], [d[3], d[4], d[5]], [d[6], d[7], d[8]]];
        let fro2: S = d.iter().map(|&v| v * v).sum();
        let det = det3(&m);
        if det.abs() <= S::lit(1e-12) * fro2 * fro2.sqrt() || !(det.abs() > S::zero()) {
            perturbed += 1;
            for i in 0..3 {
                perturb.data_mut()[9 * bi + 4 * i] = S::lit(FRAME_PERTURBATION);
            }
        }
    }
    let t = if perturbed > 0 { t.add(tape.constant(perturb)) } else { t };

    let dot = |a: Var<'t, S>, b: Var<'t, S>| a.mul(b).sum_axis(-1, true);
    let unit = |a: Var<'t, S>| a.div(a.square().sum_axis(-1, true).sqrt());
    let t0 = t.slice(-2, 0, 1);
    let t1 = t.slice(-2, 1, 1);
    let t2 = t.slice(-2, 2, 1);
    let r0 = unit(t0);
    let r1 = unit(t1.sub(dot(t1, r0).mul(r0)));
    let r2 = unit(t2.sub(dot(t2, r0).mul(r0)).sub(dot(t2, r1).mul(r1)));

    // Determinant sign of the orthonormal rows: sign(r2 · (r0 × r1)).
    let (a, b, c) = (r0.value(), r1.value(), r2.value());
    let mut sign_shape = shape.clone();
    let nd = sign_shape.len();
    sign_shape[nd - 2] = 1;
    sign_shape[nd - 1] = 1;
    let signs = Tensor::from_fn(&sign_shape, |i| {
        let (x, y, z) = (&a.data()[3 * i..3 * i + 3], &b.data()[3 * i..3 * i + 3], &c.data()[3 * i..3 * i + 3]);
        let cross = [x[1] * y[2] - x[2] * y[1], x[2] * y[0] - x[0] * y[2], x[0] * y[1] - x[1] * y[0]];
        let s = cross[0] * z[0] + cross[1] * z[1] + cross[2] * z[2];
        if s < S::zero() {
            -S::one()
        } else {
            S::one()
        }
    });
    let r2 = r2.mul(tape.constant(signs));
    Frames { frames: crate::autodiff::concat(&[r0, r1, r2], nd - 2), perturbed }
}

/// `X·Tᵀ` with matching leading axes (or a single shared frame).
pub fn to_frame<'t, S: Scalar>(x: Var<'t, S>, frame: Var<'t, S>) -> Var<'t, S> {
    x.matmul(frame.transpose())
}

/// Inverse of [`to_frame`] for orthonormal frames: `X_inv·T`.
pub fn from_frame<'t, S: Scalar>(x_inv: Var<'t, S>, frame: Var<'t, S>) -> Var<'t, S> {
    x_inv.matmul(frame)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    fn rows(v: &[[f64; 3]]) -> Tensor<f64> {
        Tensor::from_rows(v)
    }

    #[test]
    fn relu_cases() {
        let tape = Tape::new();
        let x = tape.constant(rows(&[[1., 2., 3.], [0., 0., 1.], [1., 0., 0.]]));
        let k = tape.constant(rows(&[[1., 2., 3.], [0., 0., -2.], [0., 1., 0.]]));
        let out = vn_relu(x, k).value();
        // aligned: unchanged; anti-aligned unit: zero; orthogonal: unchanged
        assert_eq!(out.data(), &[1., 2., 3., 0., 0., 0., 1., 0., 0.]);
    }

    #[test]
    fn relu_zero_direction_passes_through() {
        let tape = Tape::new();
        let x = tape.constant(rows(&[[-1., 2., 3.]]));
        let k = tape.constant(rows(&[[0., 0., 0.]]));
        assert_eq!(vn_relu(x, k).value().data(), &[-1., 2., 3.]);
    }

    #[test]
    fn bias_vanishes_on_zero_input() {
        let tape = Tape::<f64>::new();
        let x = tape.param(Tensor::zeros(&[4, 3]));
        let wb = tape.constant(Tensor::ones(&[3, 4]));
        let b = tape.constant(Tensor::ones(&[2, 3]));
        let out = vn_bias(x, wb, b);
        assert_eq!(out.value().max_abs(), 0.0);
        let g = tape.backward(out.sum()).unwrap();
        assert!(g.wrt(x).is_finite());
    }

    #[test]
    fn max_pool_prefers_aligned() {
        let tape = Tape::<f64>::new();
        let xs = tape.constant(Tensor::from_f64(&[2, 1, 3], &[0., 0., -1., 0., 0., 1.]));
        let dirs = tape.constant(Tensor::from_f64(&[2, 1, 3], &[0., 0., 1., 0., 0., 1.]));
        assert_eq!(vn_max_pool(xs, dirs).unwrap().value().data(), &[0., 0., 1.]);
    }

    #[test]
    fn max_pool_ties_take_lowest_index() {
        let xs = Tensor::<f64>::from_f64(&[2, 1, 3], &[1., 0., 0., 0., 1., 0.]);
        let d = Tensor::<f64>::from_f64(&[2, 1, 3], &[1., 0., 0., 0., 1., 0.]);
        assert_eq!(max_pool_selection(&xs, &d).data(), &[1., 0.]);
    }

    #[test]
    fn empty_lists_rejected() {
        let tape = Tape::<f64>::new();
        let xs = tape.constant(Tensor::zeros(&[0, 2, 3]));
        assert!(matches!(vn_mean_pool(xs, 0), Err(Error::Empty(_))));
        assert!(matches!(vn_max_pool(xs, xs), Err(Error::Empty(_))));
    }

    #[test]
    fn zca_too_few_vectors() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::ones(&[1, 2, 3]));
        let a = tape.constant(Tensor::ones(&[2, 1]));
        assert!(matches!(vn_zca_layer_norm(x, a, 1e-5), Err(Error::Precondition(_))));
    }

    #[test]
    fn zero_frame_is_perturbed_to_identity() {
        let tape = Tape::<f64>::new();
        let f = gram_schmidt_frames(tape.constant(Tensor::zeros(&[3, 3])));
        assert_eq!(f.perturbed, 1);
        assert!(f.frames.value().max_abs_diff(&Tensor::eye(3)) < 1e-12);
    }

    #[test]
    fn frames_are_proper() {
        let tape = Tape::<f64>::new();
        let t = Tensor::from_f64(&[3, 3], &[1., 0.2, 0., 0., 1., 0.3, 0.1, 0., -1.]);
        let f = gram_schmidt_frames(tape.constant(t)).frames.value();
        let ftf = f.matmul(&f.transpose());
        assert!(ftf.max_abs_diff(&Tensor::eye(3)) < 1e-12);
        let m = crate::so3::mat3_of(&(*f).clone());
        assert!((det3(&m) - 1.0).abs() < 1e-12);
    }
}
