use rand::Rng;

use crate::config::{DiscriminatorConfig, GanConfig};
use crate::error::{Error, Result};
use crate::nn::{join, Conv, Ctx, Dense, EncoderBlock, LayerNorm};
use crate::tensor::{init, Padding, ParameterStore, Tensor};

pub const FINE_PREFIX: &str = "vt_fine";
pub const COARSE_PREFIX: &str = "vt_coarse";

/// Splits an NHWC batch into non-overlapping `patch x patch` tiles in
/// row-major order: `[B, H, W, C] -> [B, (H/p)(W/p), p*p*C]`.
pub fn patchify(x: &Tensor, patch: usize) -> Result<Tensor> {
    if x.rank() != 4 {
        return Err(Error::invalid_shape("patchify", format!("expected NHWC, got {:?}", x.shape())));
    }
    let (b, h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::invalid_shape("patchify", format!("{h}x{w} is not divisible by patch {patch}")));
    }
    let (gh, gw) = (h / patch, w / patch);
    x.reshape(&[b, gh, patch, gw, patch, c])?
        .permute(&[0, 1, 3, 2, 4, 5])?
        .reshape(&[b, gh * gw, patch * patch * c])
}

/// Inverse of [`patchify`] for an `h x w x c` image.
pub fn unpatchify(tokens: &Tensor, patch: usize, h: usize, w: usize, c: usize) -> Result<Tensor> {
    if tokens.rank() != 3 || h % patch != 0 || w % patch != 0 || tokens.shape()[1] != (h / patch) * (w / patch) {
        return Err(Error::invalid_shape("unpatchify", format!("{:?} to {h}x{w}x{c}", tokens.shape())));
    }
    let b = tokens.shape()[0];
    let (gh, gw) = (h / patch, w / patch);
    tokens
        .reshape(&[b, gh, gw, patch, patch, c])?
        .permute(&[0, 1, 3, 2, 4, 5])?
        .reshape(&[b, h, w, c])
}

/// Adds a `[T, D]` table to every batch entry of `[B, T, D]` tokens.
fn add_positions(tokens: &Tensor, table: &Tensor) -> Result<Tensor> {
    if tokens.rank() != 3 || tokens.shape()[1..] != *table.shape() {
        return Err(Error::shape("embed", tokens.shape(), table.shape()));
    }
    let row = table.reshape(&[1, table.shape()[0], table.shape()[1]])?;
    let tiled = Tensor::concat(&vec![row; tokens.shape()[0]], 0)?;
    tokens.add(&tiled)
}

/// Linear patch projection plus position table: `[B, T, P] -> [B, T, D]`.
pub fn embed(patches: &Tensor, projection: &Tensor, positions: &Tensor) -> Result<Tensor> {
    add_positions(&patches.matmul(projection)?, positions)
}

#[derive(Debug, Clone)]
pub struct VtOutput {
    /// Patch-level adversarial map `[B, T, D]` in `[-1, 1]`.
    pub adv_map: Tensor,
    pub class_logits: Tensor,
    /// Softmax of the logits; index 0 is Abnormal, 1 is Normal.
    pub class_probs: Tensor,
}

/// Vision-transformer discriminator over concatenated fundus/angiogram pairs.
#[derive(Debug, Clone)]
pub struct VisionTransformer {
    prefix: String,
    size: usize,
    patch: usize,
    tokens: usize,
    dim: usize,
    blocks: Vec<EncoderBlock>,
    final_ln: LayerNorm,
    adv_head: Conv,
    cls_hidden: Dense,
    cls_out: Dense,
}

impl VisionTransformer {
    pub fn new(store: &mut ParameterStore, rng: &mut impl Rng, prefix: &str, size: usize, patch: usize, cfg: &DiscriminatorConfig) -> Result<Self> {
        cfg.encoder.validate()?;
        if patch == 0 || size % patch != 0 {
            return Err(Error::InvalidArgument(format!("image size {size} is not divisible by patch {patch}")));
        }
        let tokens = (size / patch) * (size / patch);
        let dim = cfg.encoder.dim;
        let pin = patch * patch * 4;
        store.insert_parameter(&join(prefix, "embed.projection"), init::glorot_uniform(&[pin, dim], rng), &[pin, dim])?;
        store.insert_parameter(&join(prefix, "embed.positions"), init::normal(&[tokens, dim], 0.02, rng), &[tokens, dim])?;
        let blocks = (0..cfg.blocks)
            .map(|i| EncoderBlock::new(store, rng, &join(prefix, &format!("enc{i}")), &cfg.encoder))
            .collect::<Result<_>>()?;
        Ok(VisionTransformer {
            prefix: prefix.to_string(),
            size,
            patch,
            tokens,
            dim,
            blocks,
            final_ln: LayerNorm::new(store, &join(prefix, "final_ln"), dim)?,
            adv_head: Conv::new(store, rng, &join(prefix, "adv_head"), 1, 1, 3, 1, Padding::Same, true)?,
            cls_hidden: Dense::new(store, rng, &join(prefix, "cls_hidden"), dim, dim)?,
            cls_out: Dense::new(store, rng, &join(prefix, "cls_out"), dim, 2)?,
        })
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Concatenated pair as `[B, T, patch*patch*4]` raw patches.
    pub fn patches(&self, fundus: &Tensor, angio: &Tensor) -> Result<Tensor> {
        let ok = |t: &Tensor, c: usize| t.rank() == 4 && t.shape()[1] == self.size && t.shape()[2] == self.size && t.shape()[3] == c;
        if !ok(fundus, 3) || !ok(angio, 1) || fundus.shape()[0] != angio.shape()[0] {
            return Err(Error::shape("vt_forward", fundus.shape(), angio.shape()));
        }
        patchify(&Tensor::concat(&[fundus.clone(), angio.clone()], 3)?, self.patch)
    }

    /// Post-embedding tokens followed by the output of every encoder block.
    pub fn embedding_features(&self, store: &ParameterStore, ctx: &Ctx, fundus: &Tensor, angio: &Tensor) -> Result<Vec<Tensor>> {
        let patches = self.patches(fundus, angio)?;
        let proj = store.get(&join(&self.prefix, "embed.projection"))?;
        let pos = store.get(&join(&self.prefix, "embed.positions"))?;
        let mut feats = Vec::with_capacity(self.blocks.len() + 1);
        let mut t = embed(&patches, &proj, &pos)?;
        feats.push(t.clone());
        for block in &self.blocks {
            t = block.forward(store, ctx, &t)?;
            feats.push(t.clone());
        }
        Ok(feats)
    }

    /// Both heads on top of the final encoder output.
    pub fn heads(&self, store: &ParameterStore, last: &Tensor) -> Result<VtOutput> {
        let b = last.shape()[0];
        let t = self.final_ln.forward(store, last)?;
        let plane = t.reshape(&[b, self.tokens, self.dim, 1])?;
        let adv_map = self.adv_head.forward(store, &plane)?.tanh().reshape(&[b, self.tokens, self.dim])?;
        let pooled = t.mean_axis(1)?;
        let hidden = self.cls_hidden.forward(store, &pooled)?.gelu();
        let class_logits = self.cls_out.forward(store, &hidden)?;
        let class_probs = class_logits.softmax(1)?;
        Ok(VtOutput {
            adv_map,
            class_logits,
            class_probs,
        })
    }

    pub fn forward_with_features(&self, store: &ParameterStore, ctx: &Ctx, fundus: &Tensor, angio: &Tensor) -> Result<(VtOutput, Vec<Tensor>)> {
        let feats = self.embedding_features(store, ctx, fundus, angio)?;
        let out = self.heads(store, feats.last().expect("at least the embedding"))?;
        Ok((out, feats))
    }

    pub fn forward(&self, store: &ParameterStore, ctx: &Ctx, fundus: &Tensor, angio: &Tensor) -> Result<VtOutput> {
        Ok(self.forward_with_features(store, ctx, fundus, angio)?.0)
    }
}

/// The fine- and coarse-scale discriminators.
#[derive(Debug, Clone)]
pub struct DiscriminatorPair {
    pub fine: VisionTransformer,
    pub coarse: VisionTransformer,
}

impl DiscriminatorPair {
    pub fn new(store: &mut ParameterStore, rng: &mut impl Rng, cfg: &GanConfig) -> Result<Self> {
        Ok(DiscriminatorPair {
            fine: VisionTransformer::new(store, rng, FINE_PREFIX, cfg.fine_size, cfg.vt.patch_fine, &cfg.vt)?,
            coarse: VisionTransformer::new(store, rng, COARSE_PREFIX, cfg.coarse_size, cfg.vt.patch_coarse, &cfg.vt)?,
        })
    }
}
