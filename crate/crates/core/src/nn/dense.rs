//! Conventional (rotation-variant) layers used on invariant features.

use crate::autodiff::Var;
use crate::error::{shape_err, Result};
use crate::nn::params::{Binder, Initializer, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Affine map on the last axis: `x·W + b`.
#[derive(Clone, Debug)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Dense {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        init: &mut Initializer,
        name: &str,
        inputs: usize,
        outputs: usize,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), init.fan_in(&[inputs, outputs], inputs));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[outputs]));
        Self { weight, bias, inputs, outputs }
    }

    pub fn forward<'t, S: Scalar>(&self, b: &Binder<'t, S>, x: Var<'t, S>) -> Result<Var<'t, S>> {
        let shape = x.shape();
        if shape.last() != Some(&self.inputs) {
            return shape_err(format!("dense layer expects {} inputs, got {shape:?}", self.inputs));
        }
        let rows: usize = shape[..shape.len() - 1].iter().product();
        let flat = x.reshape(&[rows, self.inputs]);
        let y = flat.matmul(b.var(self.weight)).add(b.var(self.bias));
        let mut out = shape;
        *out.last_mut().expect("non-empty shape") = self.outputs;
        Ok(y.reshape(&out))
    }

    /// Zeroes weight and bias so the layer outputs exactly zero.
    pub fn zero<S: Scalar>(&self, store: &mut ParamStore<S>) {
        for id in [self.weight, self.bias] {
            let t = store.get_mut(id);
            *t = Tensor::zeros(t.shape());
        }
    }
}

/// Stack of dense layers with ReLU between them (none after the last).
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

impl Mlp {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, init: &mut Initializer, name: &str, dims: &[usize]) -> Self {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Dense::new(store, init, &format!("{name}.{i}"), w[0], w[1]))
            .collect();
        Self { layers }
    }

    pub fn forward<'t, S: Scalar>(&self, b: &Binder<'t, S>, mut x: Var<'t, S>) -> Result<Var<'t, S>> {
        let n = self.layers.len();
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(b, x)?;
            if i + 1 < n {
                x = x.relu();
            }
        }
        Ok(x)
    }

    pub fn last(&self) -> Option<&Dense> {
        self.layers.last()
    }

    pub fn outputs(&self) -> usize {
        self.layers.last().map_or(0, |l| l.outputs)
    }
}
