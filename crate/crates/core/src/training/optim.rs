use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// AdamW with a step-decay learning-rate schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<S: Scalar> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Learning rate is multiplied by this every `decay_interval` steps.
    pub decay_factor: f64,
    /// Steps between decays; 0 disables the schedule.
    pub decay_interval: u64,
    pub step: u64,
    pub m: Vec<Tensor<S>>,
    pub v: Vec<Tensor<S>>,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(params: &[Tensor<S>], lr: f64, weight_decay: f64) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect::<Vec<_>>();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            decay_factor: 0.7,
            decay_interval: 0,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn with_schedule(mut self, factor: f64, interval: u64) -> Self {
        self.decay_factor = factor;
        self.decay_interval = interval;
        self
    }

    /// Learning rate the next step will use.
    pub fn current_lr(&self) -> f64 {
        match self.decay_interval {
            0 => self.lr,
            n => self.lr * self.decay_factor.powi((self.step / n) as i32),
        }
    }

    /// One decoupled-weight-decay Adam update. Gradients are checked for
    /// finiteness before any parameter is touched.
    pub fn step(&mut self, params: &mut [Tensor<S>], grads: &[Tensor<S>]) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return shape_err(format!(
                "optimizer has {} slots, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.m[i].shape() {
                return shape_err(format!("parameter {i}: shape {:?} vs gradient {:?}", p.shape(), g.shape()));
            }
            if !g.is_finite() {
                return Err(Error::NonFinite { op: "optimizer gradient".into() });
            }
        }
        let lr = S::lit(self.current_lr());
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (S::lit(self.beta1), S::lit(self.beta2));
        let c1 = S::one() - b1.powi(t);
        let c2 = S::one() - b2.powi(t);
        let (eps, decay) = (S::lit(self.eps), S::one() - lr * S::lit(self.weight_decay));
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let (p, g, m, v) = (p.data_mut(), g.data(), m.data_mut(), v.data_mut());
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (S::one() - b1) * g[i];
                v[i] = b2 * v[i] + (S::one() - b2) * g[i] * g[i];
                let update = (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                p[i] = p[i] * decay - lr * update;
            }
        }
        Ok(())
    }
}

/// Scales `grads` in place so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm<S: Scalar>(grads: &mut [Tensor<S>], max_norm: f64) -> S {
    let norm = grads.iter().map(|g| g.data().iter().map(|&v| v * v).sum::<S>()).sum::<S>().sqrt();
    let max = S::lit(max_norm);
    if norm > max {
        let s = max / norm;
        for g in grads.iter_mut() {
            *g = g.scale(s);
        }
    }
    norm
}
