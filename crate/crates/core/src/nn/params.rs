use std::cell::RefCell;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Gradients, Tape, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::vn::ops as vn_ops;

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Named, ordered collection of learnable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<S: Scalar> {
    names: Vec<String>,
    tensors: Vec<Tensor<S>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self { names: Vec::new(), tensors: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<S>) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor<S>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<S>] {
        &mut self.tensors
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Replaces every tensor, checking names and shapes line up.
    pub fn load(&mut self, named: Vec<(String, Tensor<S>)>) -> crate::Result<()> {
        if named.len() != self.tensors.len() {
            return Err(crate::Error::Shape(format!(
                "expected {} parameters, got {}",
                self.tensors.len(),
                named.len()
            )));
        }
        for (i, (name, t)) in named.into_iter().enumerate() {
            if name != self.names[i] || t.shape() != self.tensors[i].shape() {
                return Err(crate::Error::Shape(format!(
                    "parameter {i}: expected {} {:?}, got {name} {:?}",
                    self.names[i],
                    self.tensors[i].shape(),
                    t.shape()
                )));
            }
            self.tensors[i] = t;
        }
        Ok(())
    }
}

/// How ZCA normalisation obtains its whitening matrices.
enum Whitening<S: Scalar> {
    Live,
    Record(Vec<Tensor<S>>),
    Replay(Vec<Tensor<S>>, usize),
}

/// Binds parameters of a store onto a tape, creating each leaf on first use.
pub struct Binder<'t, S: Scalar> {
    tape: &'t Tape<S>,
    store: &'t ParamStore<S>,
    bound: RefCell<Vec<Option<Var<'t, S>>>>,
    trainable: bool,
    whitening: RefCell<Whitening<S>>,
}

impl<'t, S: Scalar> Binder<'t, S> {
    /// Parameters become gradient-tracked leaves.
    pub fn new(tape: &'t Tape<S>, store: &'t ParamStore<S>) -> Self {
        Self {
            tape,
            store,
            bound: RefCell::new(vec![None; store.len()]),
            trainable: true,
            whitening: RefCell::new(Whitening::Live),
        }
    }

    /// Parameters become constants (inference only).
    pub fn frozen(tape: &'t Tape<S>, store: &'t ParamStore<S>) -> Self {
        Self { trainable: false, ..Self::new(tape, store) }
    }

    /// Uses the given variables, one per parameter in store order, in place
    /// of the store's values (shapes must match).
    pub fn from_vars(tape: &'t Tape<S>, store: &'t ParamStore<S>, vars: &[Var<'t, S>]) -> crate::Result<Self> {
        if vars.len() != store.len() || store.ids().zip(vars).any(|(id, v)| v.shape() != store.get(id).shape()) {
            return Err(crate::Error::Shape("variables do not match the parameter store".into()));
        }
        let b = Self::new(tape, store);
        *b.bound.borrow_mut() = vars.iter().copied().map(Some).collect();
        Ok(b)
    }

    /// Keeps every whitening matrix computed during the forward pass.
    pub fn recording(self) -> Self {
        *self.whitening.borrow_mut() = Whitening::Record(Vec::new());
        self
    }

    /// Uses previously recorded whitening matrices, in order, instead of
    /// recomputing them. Makes the forward pass match its stop-gradient backward.
    pub fn replaying(self, matrices: Vec<Tensor<S>>) -> Self {
        *self.whitening.borrow_mut() = Whitening::Replay(matrices, 0);
        self
    }

    /// Matrices recorded so far (empty unless [`Binder::recording`]).
    pub fn recorded_whitening(&self) -> Vec<Tensor<S>> {
        match &*self.whitening.borrow() {
            Whitening::Record(m) => m.clone(),
            _ => Vec::new(),
        }
    }

    /// VN-ZCALayerNorm honoring the record/replay mode.
    pub fn zca_layer_norm(&self, x: Var<'t, S>, alpha: Var<'t, S>, eps: S) -> crate::Result<Var<'t, S>> {
        let mut mode = self.whitening.borrow_mut();
        let w = match &mut *mode {
            Whitening::Live => return vn_ops::vn_zca_layer_norm(x, alpha, eps),
            Whitening::Record(log) => {
                let w = vn_ops::zca_matrix(&x.value(), eps)?;
                log.push(w.clone());
                w
            }
            Whitening::Replay(log, next) => {
                let w = log.get(*next).cloned().ok_or_else(|| {
                    crate::Error::Precondition(format!("whitening replay exhausted after {next} matrices"))
                })?;
                *next += 1;
                w
            }
        };
        Ok(vn_ops::vn_whiten_with(x, alpha, &w))
    }

    pub fn tape(&self) -> &'t Tape<S> {
        self.tape
    }

    pub fn store(&self) -> &'t ParamStore<S> {
        self.store
    }

    pub fn var(&self, id: ParamId) -> Var<'t, S> {
        if let Some(v) = self.bound.borrow()[id.0] {
            return v;
        }
        let value = self.store.get(id).clone();
        let v = if self.trainable { self.tape.param(value) } else { self.tape.constant(value) };
        self.bound.borrow_mut()[id.0] = Some(v);
        v
    }

    pub fn constant(&self, t: Tensor<S>) -> Var<'t, S> {
        self.tape.constant(t)
    }

    /// Gradients aligned with the store; unused parameters get zeros.
    pub fn param_grads(&self, grads: &Gradients<S>) -> Vec<Tensor<S>> {
        let bound = self.bound.borrow();
        self.store
            .ids()
            .map(|id| match bound[id.0] {
                Some(v) => grads.wrt(v),
                None => Tensor::zeros(self.store.get(id).shape()),
            })
            .collect()
    }
}

/// Seeded source of initial parameter values.
pub struct Initializer {
    rng: ChaCha8Rng,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn normal<S: Scalar>(&mut self, shape: &[usize], std: f64) -> Tensor<S> {
        let rng = &mut self.rng;
        Tensor::from_fn(shape, |_| {
            let z: f64 = StandardNormal.sample(rng);
            S::lit(z * std)
        })
    }

    /// Weight matrix with entries drawn from N(0, 1/fan_in).
    pub fn fan_in<S: Scalar>(&mut self, shape: &[usize], fan_in: usize) -> Tensor<S> {
        self.normal(shape, 1.0 / (fan_in.max(1) as f64).sqrt())
    }
}
