use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{Dense, LayerNorm};
use super::{join, Ctx};
use crate::error::{Error, Result};
use crate::tensor::{ParameterStore, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub dim: usize,
    pub heads: usize,
    /// Widths of the MLP dense layers; the last must equal `dim`.
    pub mlp: Vec<usize>,
    pub dropout: f64,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "latent dim {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if self.mlp.last() != Some(&self.dim) {
            return Err(Error::InvalidArgument(format!(
                "last MLP width must equal latent dim {}, got {:?}",
                self.dim, self.mlp
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidArgument(format!("dropout rate {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Scaled dot-product attention over `[B, T, D]` tokens with `heads` heads.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    heads: usize,
    dim: usize,
    q: Dense,
    k: Dense,
    v: Dense,
    out: Dense,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParameterStore, rng: &mut impl Rng, path: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::InvalidArgument(format!("latent dim {dim} is not divisible by {heads} heads")));
        }
        Ok(MultiHeadAttention {
            heads,
            dim,
            q: Dense::new(store, rng, &join(path, "query"), dim, dim)?,
            k: Dense::new(store, rng, &join(path, "key"), dim, dim)?,
            v: Dense::new(store, rng, &join(path, "value"), dim, dim)?,
            out: Dense::new(store, rng, &join(path, "out"), dim, dim)?,
        })
    }

    fn split_heads(&self, x: &Tensor) -> Result<Tensor> {
        let (b, t) = (x.shape()[0], x.shape()[1]);
        let dh = self.dim / self.heads;
        x.reshape(&[b, t, self.heads, dh])?.permute(&[0, 2, 1, 3])?.reshape(&[b * self.heads, t, dh])
    }

    /// Returns the attended tokens and the `[B * heads, T, T]` attention weights.
    pub fn forward_with_weights(&self, store: &ParameterStore, x: &Tensor) -> Result<(Tensor, Tensor)> {
        if x.rank() != 3 || x.shape()[2] != self.dim {
            return Err(Error::invalid_shape(
                "multi_head_attention",
                format!("expected [B, T, {}] tokens, got {:?}", self.dim, x.shape()),
            ));
        }
        let (b, t) = (x.shape()[0], x.shape()[1]);
        let dh = self.dim / self.heads;
        let q = self.split_heads(&self.q.forward(store, x)?)?;
        let k = self.split_heads(&self.k.forward(store, x)?)?;
        let v = self.split_heads(&self.v.forward(store, x)?)?;
        let scores = q.bmm(&k, true)?.scale(1.0 / (dh as f64).sqrt());
        let weights = scores.softmax(2)?;
        let ctx = weights
            .bmm(&v, false)?
            .reshape(&[b, self.heads, t, dh])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[b, t, self.dim])?;
        Ok((self.out.forward(store, &ctx)?, weights))
    }

    pub fn forward(&self, store: &ParameterStore, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_with_weights(store, x)?.0)
    }
}

/// Pre-norm transformer encoder block:
/// `t1 = x + MHA(LN(x))`, `out = t1 + MLP(LN(t1))`.
#[derive(Debug, Clone)]
pub struct EncoderBlock {
    path: String,
    dropout: f64,
    ln1: LayerNorm,
    attn: MultiHeadAttention,
    ln2: LayerNorm,
    mlp: Vec<Dense>,
}

impl EncoderBlock {
    pub fn new(store: &mut ParameterStore, rng: &mut impl Rng, path: &str, cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let mut mlp = Vec::with_capacity(cfg.mlp.len());
        let mut din = cfg.dim;
        for (i, &w) in cfg.mlp.iter().enumerate() {
            mlp.push(Dense::new(store, rng, &join(path, &format!("mlp{i}")), din, w)?);
            din = w;
        }
        Ok(EncoderBlock {
            path: path.to_string(),
            dropout: cfg.dropout,
            ln1: LayerNorm::new(store, &join(path, "ln1"), cfg.dim)?,
            attn: MultiHeadAttention::new(store, rng, &join(path, "attn"), cfg.dim, cfg.heads)?,
            ln2: LayerNorm::new(store, &join(path, "ln2"), cfg.dim)?,
            mlp,
        })
    }

    pub fn forward(&self, store: &ParameterStore, ctx: &Ctx, x: &Tensor) -> Result<Tensor> {
        let t1 = x.add(&self.attn.forward(store, &self.ln1.forward(store, x)?)?)?;
        let mut h = self.ln2.forward(store, &t1)?;
        for (i, layer) in self.mlp.iter().enumerate() {
            let key = ctx.dropout_key(&join(&self.path, &format!("mlp{i}")));
            h = layer.forward(store, &h)?.gelu().dropout(self.dropout, key)?;
        }
        t1.add(&h)
    }
}
