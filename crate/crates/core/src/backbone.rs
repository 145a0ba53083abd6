//! Plain vision-transformer encoder.
//!
//! Images are cut into non-overlapping patches, linearly embedded by a
//! strided convolution, combined with learned positional embeddings and a
//! prepended CLS token, then pushed through pre-norm transformer blocks. The
//! blocks are partitioned into contiguous groups so a caller can interleave
//! its own computation between groups; `forward` is exactly the fold of
//! `encode_group` over all groups.
//!
//! The backbone is designed to run frozen: `set_frozen(true)` drops every
//! backbone parameter from the trainable set, after which backward passes
//! never touch them.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use ndarray::Array3;
use thiserror::Error;

use crate::autograd::Var;
use crate::nn::{Attention, Conv2d, Ctx, Init, LayerNorm, Mlp, ParamBuilder, ParamId, ParamStore};
use crate::ops;

/// Side of the token grid the positional table is allocated for (a 512 px
/// input at patch size 16). Other grids interpolate from this table.
pub const POS_GRID: usize = 32;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    pub interaction_groups: usize,
}

impl ViTConfig {
    fn preset(embed_dim: usize, depth: usize, num_heads: usize) -> Self {
        Self {
            image_size: 512,
            patch_size: 16,
            embed_dim,
            depth,
            num_heads,
            interaction_groups: 4,
        }
    }

    pub fn tiny() -> Self {
        Self::preset(192, 12, 3)
    }

    pub fn small() -> Self {
        Self::preset(384, 12, 6)
    }

    pub fn base() -> Self {
        Self::preset(768, 12, 12)
    }

    pub fn large() -> Self {
        Self::preset(1024, 24, 16)
    }

    pub fn with_image_size(mut self, px: usize) -> Self {
        self.image_size = px;
        self
    }

    pub fn validate(&self) -> Result<(), BackboneError> {
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(BackboneError::IndivisibleImage {
                image: self.image_size,
                patch: self.patch_size,
            });
        }
        if self.interaction_groups == 0 || self.depth % self.interaction_groups != 0 {
            return Err(BackboneError::IndivisibleDepth {
                depth: self.depth,
                groups: self.interaction_groups,
            });
        }
        if self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return Err(BackboneError::IndivisibleDim {
                dim: self.embed_dim,
                heads: self.num_heads,
            });
        }
        Ok(())
    }

    /// Patch-grid side length.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Number of spatial (non-CLS) tokens.
    pub fn patch_tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Total token count including CLS.
    pub fn token_count(&self) -> usize {
        1 + self.patch_tokens()
    }

    pub fn layers_per_group(&self) -> usize {
        self.depth / self.interaction_groups
    }
}

#[derive(Error, Debug, Clone, PartialEq)]
pub enum BackboneError {
    #[error("image size {image} is not divisible by patch size {patch}")]
    IndivisibleImage { image: usize, patch: usize },
    #[error("depth {depth} is not divisible by interaction group count {groups}")]
    IndivisibleDepth { depth: usize, groups: usize },
    #[error("embed dim {dim} is not divisible by head count {heads}")]
    IndivisibleDim { dim: usize, heads: usize },
    #[error("expected a 3x{expected}x{expected} input, got {c}x{h}x{w}")]
    InputSize {
        expected: usize,
        c: usize,
        h: usize,
        w: usize,
    },
    #[error("group index {index} out of range, config has {groups} groups")]
    GroupOutOfRange { index: usize, groups: usize },
}

/// An embedded token matrix `[1 + grid_h*grid_w, D]` on the tape. Row 0 is
/// the CLS token; the rest are patch positions in row-major order.
#[derive(Clone, Copy, Debug)]
pub struct TokenSequence {
    pub tokens: Var,
    pub grid_h: usize,
    pub grid_w: usize,
}

struct Block {
    norm1: LayerNorm,
    attn: Attention,
    norm2: LayerNorm,
    mlp: Mlp,
}

pub struct Backbone {
    pub cfg: ViTConfig,
    prefix: String,
    patch: Conv2d,
    pos: ParamId,
    cls: ParamId,
    blocks: Vec<Block>,
}

impl Backbone {
    /// Registers all encoder parameters under the builder's current scope
    /// and returns the forward-pass handle.
    pub fn register(pb: &mut ParamBuilder, cfg: ViTConfig) -> Result<Self, BackboneError> {
        cfg.validate()?;
        let d = cfg.embed_dim;
        let prefix = pb.prefix().to_string();
        let patch = Conv2d::new(pb, "patch_embed", 3, d, cfg.patch_size, cfg.patch_size, 0);
        let pos = pb.add("pos_embed", &[POS_GRID * POS_GRID, d], Init::Normal(0.02));
        let cls = pb.add("cls_token", &[1, d], Init::Normal(0.02));
        let mut blocks = Vec::with_capacity(cfg.depth);
        for i in 0..cfg.depth {
            let name = alloc::format!("blocks.{i}");
            let mut bp = pb.scope(&name);
            blocks.push(Block {
                norm1: LayerNorm::new(&mut bp, "norm1", d),
                attn: Attention::new(&mut bp, "attn", d, d, d, d, cfg.num_heads),
                norm2: LayerNorm::new(&mut bp, "norm2", d),
                mlp: Mlp::new(&mut bp, "mlp", d, 4 * d),
            });
        }
        Ok(Self {
            cfg,
            prefix,
            patch,
            pos,
            cls,
            blocks,
        })
    }

    /// Dotted name prefix all backbone parameters live under.
    pub fn param_prefix(&self) -> &str {
        &self.prefix
    }

    /// Includes or excludes every backbone parameter from optimization.
    /// Returns the number of parameters touched. Values are never modified.
    pub fn set_frozen(&self, store: &mut ParamStore, frozen: bool) -> usize {
        store.set_trainable_prefix(&self.prefix, !frozen)
    }

    /// Positional embeddings for a `gh x gw` grid, bilinearly interpolated
    /// from the canonical table when the grid differs from it.
    fn positional(&self, cx: &Ctx, gh: usize, gw: usize) -> Var {
        let g = cx.g;
        let d = self.cfg.embed_dim;
        let pos = cx.p(self.pos);
        if gh == POS_GRID && gw == POS_GRID {
            return pos;
        }
        let grid = ops::reshape(g, pos, &[POS_GRID, POS_GRID, d]);
        let chw = ops::permute(g, grid, &[2, 0, 1]);
        let resized = ops::bilinear_resize(g, chw, gh, gw);
        let hwc = ops::permute(g, resized, &[1, 2, 0]);
        ops::reshape(g, hwc, &[gh * gw, d])
    }

    /// Embeds a channel-normalized `[3, S, S]` image (S = configured image
    /// size) into the token sequence: strided-conv patch embedding, learned
    /// positional embeddings on the patch tokens, CLS prepended.
    pub fn patch_embed(
        &self,
        cx: &Ctx,
        image: &Array3<f32>,
    ) -> Result<TokenSequence, BackboneError> {
        let (c, h, w) = image.dim();
        let s = self.cfg.image_size;
        if c != 3 || h != s || w != s {
            return Err(BackboneError::InputSize {
                expected: s,
                c,
                h,
                w,
            });
        }
        let g = cx.g;
        let d = self.cfg.embed_dim;
        let (gh, gw) = (h / self.cfg.patch_size, w / self.cfg.patch_size);
        let x = g.constant(image.clone().into_dyn());
        let feat = ops::conv2d(
            g,
            x,
            cx.p(self.patch.w),
            Some(cx.p(self.patch.b)),
            self.cfg.patch_size,
            0,
        );
        let flat = ops::reshape(g, feat, &[d, gh * gw]);
        let tokens = ops::permute(g, flat, &[1, 0]);
        let pos = self.positional(cx, gh, gw);
        let with_pos = ops::add(g, tokens, pos);
        let seq = ops::concat(g, 0, &[cx.p(self.cls), with_pos]);
        Ok(TokenSequence {
            tokens: seq,
            grid_h: gh,
            grid_w: gw,
        })
    }

    fn block_forward(&self, cx: &Ctx, x: Var, index: usize) -> Var {
        let g = cx.g;
        let blk = &self.blocks[index];
        let n1 = blk.norm1.forward(cx, x);
        let x = ops::add(g, x, blk.attn.forward(cx, n1, n1));
        let n2 = blk.norm2.forward(cx, x);
        ops::add(g, x, blk.mlp.forward(cx, n2))
    }

    /// Applies the blocks of one contiguous group,
    /// `[group * L/N, (group+1) * L/N)`.
    pub fn encode_group(
        &self,
        cx: &Ctx,
        seq: &TokenSequence,
        group: usize,
    ) -> Result<TokenSequence, BackboneError> {
        let n = self.cfg.interaction_groups;
        if group >= n {
            return Err(BackboneError::GroupOutOfRange {
                index: group,
                groups: n,
            });
        }
        let per = self.cfg.layers_per_group();
        let mut x = seq.tokens;
        for i in group * per..(group + 1) * per {
            x = self.block_forward(cx, x, i);
        }
        Ok(TokenSequence {
            tokens: x,
            grid_h: seq.grid_h,
            grid_w: seq.grid_w,
        })
    }

    /// Full encoder: patch embedding followed by every group in order.
    pub fn forward(&self, cx: &Ctx, image: &Array3<f32>) -> Result<TokenSequence, BackboneError> {
        let mut seq = self.patch_embed(cx, image)?;
        for group in 0..self.cfg.interaction_groups {
            seq = self.encode_group(cx, &seq, group)?;
        }
        Ok(seq)
    }
}
