//! Channel-wise subtraction attention and the missing-anchor transformer.

use crate::autodiff::{concat, Var};
use crate::error::{shape_err, Error, Result};
use crate::nn::{Binder, Initializer, Mlp, ParamStore};
use crate::scalar::Scalar;
use crate::vn::{MlpSpec, VnEdgeConv, VnInv, VnLinear, VnMlp};

use super::config::ModelConfig;

/// One attention head: an invariant relation `VN-Inv(Q_j − K_i)` scored by a
/// dense MLP into one weight per channel.
#[derive(Clone, Debug)]
pub struct CwsaHead {
    pub inv: VnInv,
    pub score: Mlp,
    pub channels: usize,
}

impl CwsaHead {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, init: &mut Initializer, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            inv: VnInv::new(store, init, &format!("{name}.inv"), channels, true)?,
            score: Mlp::new(store, init, &format!("{name}.score"), &[3 * channels, 2 * channels, channels]),
            channels,
        })
    }

    /// Scores `[M, N, C]` of queries `[M, C, 3]` against keys `[N, C, 3]`,
    /// softmax-normalised over the key axis per channel.
    pub fn scores<'t, S: Scalar>(&self, b: &Binder<'t, S>, q: Var<'t, S>, k: Var<'t, S>) -> Result<Var<'t, S>> {
        let (qs, ks) = (q.shape(), k.shape());
        let c = self.channels;
        if qs.len() != 3 || ks.len() != 3 || qs[1..] != [c, 3] || ks[1..] != [c, 3] {
            return shape_err(format!("attention head of width {c} got queries {qs:?}, keys {ks:?}"));
        }
        let (m, n) = (qs[0], ks[0]);
        if n == 0 {
            return Err(Error::Empty("attention over no keys".into()));
        }
        let full = [m, n, c, 3];
        let diff = q.reshape(&[m, 1, c, 3]).broadcast_to(&full).sub(k.reshape(&[1, n, c, 3]).broadcast_to(&full));
        let relation = self.inv.forward(b, diff)?.features.reshape(&[m, n, 3 * c]);
        Ok(self.score.forward(b, relation)?.softmax(1))
    }

    /// `Σ_i Att[i] ⊙ V_i` per query: `[M, C, 3]`.
    pub fn attend<'t, S: Scalar>(&self, b: &Binder<'t, S>, q: Var<'t, S>, k: Var<'t, S>, v: Var<'t, S>) -> Result<Var<'t, S>> {
        if k.shape() != v.shape() {
            return shape_err(format!("keys {:?} and values {:?} differ", k.shape(), v.shape()));
        }
        let att = self.scores(b, q, k)?;
        let (m, n, c) = (att.shape()[0], att.shape()[1], self.channels);
        let weighted = att.reshape(&[m, n, c, 1]).mul(v.reshape(&[1, n, c, 3]));
        Ok(weighted.sum_axis(1, false))
    }
}

/// Heads over disjoint channel slices, concatenated and mixed by a bias-free
/// VN-Linear output projection.
#[derive(Clone, Debug)]
pub struct MultiHeadCwsa {
    pub heads: Vec<CwsaHead>,
    pub out: VnLinear,
}

impl MultiHeadCwsa {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, init: &mut Initializer, name: &str, channels: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !channels.is_multiple_of(heads) {
            return Err(Error::Precondition(format!("{heads} heads do not divide {channels} channels")));
        }
        let width = channels / heads;
        let heads = (0..heads)
            .map(|h| CwsaHead::new(store, init, &format!("{name}.head{h}"), width))
            .collect::<Result<_>>()?;
        Ok(Self { heads, out: VnLinear::new(store, init, &format!("{name}.out"), channels, channels, false) })
    }

    pub fn attend<'t, S: Scalar>(&self, b: &Binder<'t, S>, q: Var<'t, S>, k: Var<'t, S>, v: Var<'t, S>) -> Result<Var<'t, S>> {
        let w = self.heads[0].channels;
        let outs = self
            .heads
            .iter()
            .enumerate()
            .map(|(h, head)| head.attend(b, q.slice(1, h * w, w), k.slice(1, h * w, w), v.slice(1, h * w, w)))
            .collect::<Result<Vec<_>>>()?;
        self.out.forward(b, concat(&outs, 1))
    }
}

/// Attention + residual, VN-MLP + residual.
#[derive(Clone, Debug)]
pub struct Block {
    pub attn: MultiHeadCwsa,
    pub ffn: VnMlp,
}

impl Block {
    fn new<S: Scalar>(store: &mut ParamStore<S>, init: &mut Initializer, name: &str, cfg: &ModelConfig) -> Result<Self> {
        let c = cfg.channels;
        let ffn = MlpSpec::new(&[c, 2 * c, c]).bias(cfg.vn_bias).norm(cfg.norm);
        Ok(Self {
            attn: MultiHeadCwsa::new(store, init, &format!("{name}.attn"), c, cfg.heads)?,
            ffn: VnMlp::new(store, init, &format!("{name}.ffn"), &ffn)?,
        })
    }

    /// Self-attention when `memory` is `None`, cross-attention otherwise.
    pub fn forward<'t, S: Scalar>(&self, b: &Binder<'t, S>, x: Var<'t, S>, memory: Option<Var<'t, S>>) -> Result<Var<'t, S>> {
        let kv = memory.unwrap_or(x);
        let x = x.add(self.attn.attend(b, x, kv, kv)?);
        Ok(x.add(self.ffn.forward(b, x)?))
    }

    fn zero_output<S: Scalar>(&self, store: &mut ParamStore<S>) {
        self.attn.out.zero(store);
        self.ffn.zero_output(store);
    }
}

/// Missing-anchor transformer: query embedding, encoder over observed
/// anchors, decoder from queries into the encoded memory.
#[derive(Clone, Debug)]
pub struct Matr {
    pub query_embed: VnEdgeConv,
    pub query_mlp: VnMlp,
    pub encoder: Vec<Block>,
    pub decoder: Vec<Block>,
}

impl Matr {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, init: &mut Initializer, cfg: &ModelConfig) -> Result<Self> {
        let c = cfg.channels;
        let embed = MlpSpec::new(&[c]).bias(cfg.vn_bias).norm(cfg.norm).activate_last(true);
        let query = MlpSpec::new(&[cfg.global_channels + c, c, c]).bias(cfg.vn_bias).norm(cfg.norm);
        Ok(Self {
            query_embed: VnEdgeConv::new(store, init, "matr.query_embed", 1, &embed, cfg.k_query)?,
            query_mlp: VnMlp::new(store, init, "matr.query", &query)?,
            encoder: (0..cfg.encoder_layers)
                .map(|i| Block::new(store, init, &format!("matr.enc{i}"), cfg))
                .collect::<Result<_>>()?,
            decoder: (0..cfg.decoder_layers)
                .map(|i| Block::new(store, init, &format!("matr.dec{i}"), cfg))
                .collect::<Result<_>>()?,
        })
    }

    /// Query embeddings `VN-MLP([X_g, EdgeConv(p̂_j; P_A)])`, `[M, C, 3]`.
    pub fn queries<'t, S: Scalar>(
        &self,
        b: &Binder<'t, S>,
        observed_positions: Var<'t, S>,
        predicted_positions: Var<'t, S>,
        global: Var<'t, S>,
    ) -> Result<Var<'t, S>> {
        let m = predicted_positions.shape()[0];
        let emb = self.query_embed.forward(b, predicted_positions, observed_positions, None)?;
        let gs = global.shape();
        let g = global.reshape(&[1, gs[0], 3]).broadcast_to(&[m, gs[0], 3]);
        self.query_mlp.forward(b, concat(&[g, emb], 1))
    }

    /// Predicted features `[M, C, 3]` for the missing anchors.
    pub fn forward<'t, S: Scalar>(
        &self,
        b: &Binder<'t, S>,
        observed_positions: Var<'t, S>,
        observed_features: Var<'t, S>,
        predicted_positions: Var<'t, S>,
        global: Var<'t, S>,
    ) -> Result<Var<'t, S>> {
        let mut memory = observed_features;
        for block in &self.encoder {
            memory = block.forward(b, memory, None)?;
        }
        let mut x = self.queries(b, observed_positions, predicted_positions, global)?;
        for block in &self.decoder {
            x = block.forward(b, x, Some(memory))?;
        }
        Ok(x)
    }

    /// Turns every encoder and decoder block into the identity.
    pub fn zero_output_projections<S: Scalar>(&self, store: &mut ParamStore<S>) {
        for block in self.encoder.iter().chain(&self.decoder) {
            block.zero_output(store);
        }
    }
}
