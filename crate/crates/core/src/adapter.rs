//! The trainable parallel branch beside the frozen encoder.
//!
//! A small convolutional stem extracts multi-stride local features from the
//! raw image and flattens them into one token sequence. That sequence then
//! exchanges information with the encoder once per encoder group: an
//! *injector* writes adapter tokens into the encoder's patch tokens through
//! gated cross-attention (the gate starts at 0, so a fresh adapter is an
//! exact no-op on the encoder), and an *extractor* reads the updated patch
//! tokens back into the adapter sequence. After the last exchange the
//! adapter tokens are reassembled into stride-8/16/32 maps and completed
//! with a learned 2x upsampling to stride 4, forming the feature pyramid the
//! detection head consumes.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use ndarray::Array3;
use thiserror::Error;

use crate::autograd::Var;
use crate::backbone::{Backbone, BackboneError, TokenSequence, ViTConfig};
use crate::nn::{
    Attention, Conv2d, ConvTranspose2d, Ctx, GroupNorm, Init, LayerNorm, Mlp, ParamBuilder,
    ParamId, ParamStore,
};
use crate::ops;

/// Channel-group count for the stem's normalization layers.
const STEM_NORM_GROUPS: usize = 8;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AdapterConfig {
    /// Width of the adapter tokens and of every pyramid level.
    pub channels: usize,
    /// Heads used by the injector/extractor cross-attention.
    pub num_heads: usize,
    /// Expansion factor of the extractor's feed-forward sublayer.
    pub ffn_ratio: usize,
    /// Whether the stride-16 level is fused with the final encoder tokens.
    pub fuse_backbone: bool,
}

impl AdapterConfig {
    /// Default sizing for a given encoder: a quarter of the embedding width,
    /// which keeps every preset under the parameter budget while scaling
    /// with the encoder.
    pub fn for_backbone(vit: &ViTConfig) -> Self {
        let channels = (vit.embed_dim / 4).max(16);
        Self {
            channels,
            num_heads: (channels / 16).max(1),
            ffn_ratio: 2,
            fuse_backbone: true,
        }
    }

    pub fn validate(&self) -> Result<(), AdapterError> {
        let c = self.channels;
        if c < 2 || self.num_heads == 0 || c % self.num_heads != 0 {
            return Err(AdapterError::BadChannels {
                channels: c,
                heads: self.num_heads,
            });
        }
        if c % STEM_NORM_GROUPS != 0 || (c / 2) % STEM_NORM_GROUPS != 0 {
            return Err(AdapterError::UngroupableChannels { channels: c });
        }
        if self.ffn_ratio == 0 {
            return Err(AdapterError::BadChannels {
                channels: c,
                heads: self.num_heads,
            });
        }
        Ok(())
    }
}

#[derive(Error, Debug, Clone, PartialEq)]
pub enum AdapterError {
    #[error("input {h}x{w} must be divisible by 32")]
    IndivisibleInput { h: usize, w: usize },
    #[error("adapter channels {channels} not divisible by {heads} heads")]
    BadChannels { channels: usize, heads: usize },
    #[error("adapter channels {channels} not divisible into {STEM_NORM_GROUPS} norm groups")]
    UngroupableChannels { channels: usize },
    #[error(transparent)]
    Backbone(#[from] BackboneError),
}

/// Multi-stride local features from the convolutional stem, plus their
/// flattened token form.
#[derive(Debug)]
pub struct SpatialPriorFeatures {
    pub f8: Var,
    pub f16: Var,
    pub f32: Var,
    /// All three maps flattened row-major and stacked: `[n8+n16+n32, C]`.
    pub tokens: Var,
    pub dims8: (usize, usize),
    pub dims16: (usize, usize),
    pub dims32: (usize, usize),
}

impl SpatialPriorFeatures {
    pub fn token_count(&self) -> usize {
        let (h8, w8) = self.dims8;
        let (h16, w16) = self.dims16;
        let (h32, w32) = self.dims32;
        h8 * w8 + h16 * w16 + h32 * w32
    }
}

/// The four-level feature pyramid the detection head consumes.
pub struct FeaturePyramid {
    pub p4: Var,
    pub p8: Var,
    pub p16: Var,
    pub p32: Var,
}

/// Result of running the full adapter/encoder interaction.
pub struct InteractionOutput {
    pub pyramid: FeaturePyramid,
    /// Final encoder tokens after all groups (CLS included). With all gates
    /// at zero these are bitwise-identical to an adapter-free forward.
    pub final_tokens: TokenSequence,
}

struct ConvUnit {
    conv: Conv2d,
    norm: GroupNorm,
}

impl ConvUnit {
    fn new(pb: &mut ParamBuilder, name: &str, cin: usize, cout: usize, stride: usize) -> Self {
        let mut pb = pb.scope(name);
        Self {
            conv: Conv2d::new(&mut pb, "conv", cin, cout, 3, stride, 1),
            norm: GroupNorm::new(&mut pb, "norm", cout, STEM_NORM_GROUPS),
        }
    }

    fn forward(&self, cx: &Ctx, x: Var) -> Var {
        let y = self.conv.forward(cx, x);
        let y = self.norm.forward(cx, y);
        ops::relu(cx.g, y)
    }
}

/// Convolutional stem: three stride-2 units down to stride 8, then two more
/// for strides 16 and 32.
struct SpatialPrior {
    units: [ConvUnit; 5],
}

impl SpatialPrior {
    fn register(pb: &mut ParamBuilder, channels: usize) -> Self {
        let mut pb = pb.scope("spatial_prior");
        let half = channels / 2;
        Self {
            units: [
                ConvUnit::new(&mut pb, "down2", 3, half, 2),
                ConvUnit::new(&mut pb, "down4", half, channels, 2),
                ConvUnit::new(&mut pb, "down8", channels, channels, 2),
                ConvUnit::new(&mut pb, "down16", channels, channels, 2),
                ConvUnit::new(&mut pb, "down32", channels, channels, 2),
            ],
        }
    }
}

/// Gated cross-attention writing adapter tokens into encoder patch tokens.
/// The CLS row bypasses the block entirely.
struct Injector {
    q_norm: LayerNorm,
    kv_norm: LayerNorm,
    attn: Attention,
    gate: ParamId,
}

impl Injector {
    fn register(pb: &mut ParamBuilder, d: usize, c: usize, heads: usize) -> Self {
        let mut pb = pb.scope("injector");
        Self {
            q_norm: LayerNorm::new(&mut pb, "q_norm", d),
            kv_norm: LayerNorm::new(&mut pb, "kv_norm", c),
            attn: Attention::new(&mut pb, "attn", d, c, c, d, heads),
            gate: pb.add("gate", &[1], Init::Zeros),
        }
    }

    fn forward(&self, cx: &Ctx, vit: &TokenSequence, adapter_tokens: Var) -> TokenSequence {
        let g = cx.g;
        let t = cx.g.shape(vit.tokens)[0];
        let cls = ops::narrow(g, vit.tokens, 0, 0, 1);
        let spatial = ops::narrow(g, vit.tokens, 0, 1, t - 1);
        let q = self.q_norm.forward(cx, spatial);
        let kv = self.kv_norm.forward(cx, adapter_tokens);
        let attended = self.attn.forward(cx, q, kv);
        let gated = ops::scale_by(g, attended, cx.p(self.gate));
        let updated = ops::add(g, spatial, gated);
        TokenSequence {
            tokens: ops::concat(g, 0, &[cls, updated]),
            grid_h: vit.grid_h,
            grid_w: vit.grid_w,
        }
    }
}

/// Cross-attention reading encoder patch tokens back into the adapter
/// sequence, followed by a feed-forward sublayer; both with residuals.
struct Extractor {
    q_norm: LayerNorm,
    kv_norm: LayerNorm,
    attn: Attention,
    ffn_norm: LayerNorm,
    ffn: Mlp,
}

impl Extractor {
    fn register(pb: &mut ParamBuilder, d: usize, c: usize, heads: usize, ffn_ratio: usize) -> Self {
        let mut pb = pb.scope("extractor");
        Self {
            q_norm: LayerNorm::new(&mut pb, "q_norm", c),
            kv_norm: LayerNorm::new(&mut pb, "kv_norm", d),
            attn: Attention::new(&mut pb, "attn", c, d, c, c, heads),
            ffn_norm: LayerNorm::new(&mut pb, "ffn_norm", c),
            ffn: Mlp::new(&mut pb, "ffn", c, c * ffn_ratio),
        }
    }

    fn forward(&self, cx: &Ctx, adapter_tokens: Var, vit_spatial: Var) -> Var {
        let g = cx.g;
        let q = self.q_norm.forward(cx, adapter_tokens);
        let kv = self.kv_norm.forward(cx, vit_spatial);
        let attended = self.attn.forward(cx, q, kv);
        let x = ops::add(g, adapter_tokens, attended);
        let f = self.ffn.forward(cx, self.ffn_norm.forward(cx, x));
        ops::add(g, x, f)
    }
}

struct InteractionBlock {
    injector: Injector,
    extractor: Extractor,
}

pub struct Adapter {
    pub cfg: AdapterConfig,
    prefix: String,
    stem: SpatialPrior,
    level_embed: ParamId,
    blocks: Vec<InteractionBlock>,
    up4: ConvTranspose2d,
    up4_norm: GroupNorm,
    fuse16: Option<Conv2d>,
}

impl Adapter {
    /// Registers all adapter parameters under the builder's current scope.
    /// One interaction block is created per encoder group.
    pub fn register(
        pb: &mut ParamBuilder,
        cfg: AdapterConfig,
        vit: &ViTConfig,
    ) -> Result<Self, AdapterError> {
        cfg.validate()?;
        vit.validate()?;
        let (d, c) = (vit.embed_dim, cfg.channels);
        let prefix = pb.prefix().to_string();
        let stem = SpatialPrior::register(pb, c);
        let level_embed = pb.add("level_embed", &[3, c], Init::Normal(0.02));
        let mut blocks = Vec::with_capacity(vit.interaction_groups);
        for i in 0..vit.interaction_groups {
            let name = alloc::format!("blocks.{i}");
            let mut bp = pb.scope(&name);
            blocks.push(InteractionBlock {
                injector: Injector::register(&mut bp, d, c, cfg.num_heads),
                extractor: Extractor::register(&mut bp, d, c, cfg.num_heads, cfg.ffn_ratio),
            });
        }
        let mut up = pb.scope("up4");
        let up4 = ConvTranspose2d::new(&mut up, "deconv", c, c, 2);
        let up4_norm = GroupNorm::new(&mut up, "norm", c, STEM_NORM_GROUPS);
        let fuse16 = if cfg.fuse_backbone {
            Some(Conv2d::new(pb, "fuse16", d, c, 1, 1, 0))
        } else {
            None
        };
        Ok(Self {
            cfg,
            prefix,
            stem,
            level_embed,
            blocks,
            up4,
            up4_norm,
            fuse16,
        })
    }

    /// Dotted name prefix all adapter parameters live under.
    pub fn param_prefix(&self) -> &str {
        &self.prefix
    }

    fn level_row(&self, cx: &Ctx, level: usize) -> Var {
        let g = cx.g;
        let row = ops::narrow(g, cx.p(self.level_embed), 0, level, 1);
        ops::reshape(g, row, &[self.cfg.channels])
    }

    fn flatten_map(&self, cx: &Ctx, map: Var, level: usize) -> Var {
        let g = cx.g;
        let shape = g.shape(map);
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let flat = ops::reshape(g, map, &[c, h * w]);
        let tokens = ops::permute(g, flat, &[1, 0]);
        ops::add_row(g, tokens, self.level_row(cx, level))
    }

    fn tokens_to_map(&self, cx: &Ctx, tokens: Var, h: usize, w: usize) -> Var {
        let g = cx.g;
        let c = self.cfg.channels;
        let t = ops::permute(g, tokens, &[1, 0]);
        ops::reshape(g, t, &[c, h, w])
    }

    /// Runs the convolutional stem on a channel-normalized `[3, H, W]` image
    /// (H, W divisible by 32) and flattens the three maps into the adapter
    /// token sequence, tagged with per-level embeddings.
    pub fn spatial_prior(
        &self,
        cx: &Ctx,
        image: &Array3<f32>,
    ) -> Result<SpatialPriorFeatures, AdapterError> {
        let (_, h, w) = image.dim();
        if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
            return Err(AdapterError::IndivisibleInput { h, w });
        }
        let g = cx.g;
        let x = g.constant(image.clone().into_dyn());
        let d2 = self.stem.units[0].forward(cx, x);
        let d4 = self.stem.units[1].forward(cx, d2);
        let f8 = self.stem.units[2].forward(cx, d4);
        let f16 = self.stem.units[3].forward(cx, f8);
        let f32v = self.stem.units[4].forward(cx, f16);
        let t8 = self.flatten_map(cx, f8, 0);
        let t16 = self.flatten_map(cx, f16, 1);
        let t32 = self.flatten_map(cx, f32v, 2);
        let tokens = ops::concat(g, 0, &[t8, t16, t32]);
        Ok(SpatialPriorFeatures {
            f8,
            f16,
            f32: f32v,
            tokens,
            dims8: (h / 8, w / 8),
            dims16: (h / 16, w / 16),
            dims32: (h / 32, w / 32),
        })
    }

    /// Full adapt-phase forward: patch-embeds the image, alternates
    /// inject / encode-group / extract over all groups, then reassembles the
    /// adapter tokens into the pyramid (with optional stride-16 fusion of
    /// the final encoder tokens and a learned 2x upsampling for stride 4).
    pub fn run_interactions(
        &self,
        cx: &Ctx,
        image: &Array3<f32>,
        backbone: &Backbone,
    ) -> Result<InteractionOutput, AdapterError> {
        let g = cx.g;
        let sp = self.spatial_prior(cx, image)?;
        let mut seq = backbone.patch_embed(cx, image)?;
        let mut c_tokens = sp.tokens;
        for (group, block) in self.blocks.iter().enumerate() {
            seq = block.injector.forward(cx, &seq, c_tokens);
            seq = backbone.encode_group(cx, &seq, group)?;
            let t = g.shape(seq.tokens)[0];
            let spatial = ops::narrow(g, seq.tokens, 0, 1, t - 1);
            c_tokens = block.extractor.forward(cx, c_tokens, spatial);
        }

        let (h8, w8) = sp.dims8;
        let (h16, w16) = sp.dims16;
        let (h32, w32) = sp.dims32;
        let n8 = h8 * w8;
        let n16 = h16 * w16;
        let n32 = h32 * w32;
        let t8 = ops::narrow(g, c_tokens, 0, 0, n8);
        let t16 = ops::narrow(g, c_tokens, 0, n8, n16);
        let t32 = ops::narrow(g, c_tokens, 0, n8 + n16, n32);
        let m8 = self.tokens_to_map(cx, t8, h8, w8);
        let mut m16 = self.tokens_to_map(cx, t16, h16, w16);
        let m32 = self.tokens_to_map(cx, t32, h32, w32);

        if let Some(fuse) = &self.fuse16 {
            let t = g.shape(seq.tokens)[0];
            let spatial = ops::narrow(g, seq.tokens, 0, 1, t - 1);
            let vit_map = {
                let d = backbone.cfg.embed_dim;
                let tr = ops::permute(g, spatial, &[1, 0]);
                ops::reshape(g, tr, &[d, seq.grid_h, seq.grid_w])
            };
            debug_assert_eq!((seq.grid_h, seq.grid_w), (h16, w16));
            m16 = ops::add(g, m16, fuse.forward(cx, vit_map));
        }

        let p4 = self.up4_norm.forward(cx, self.up4.forward(cx, m8));
        Ok(InteractionOutput {
            pyramid: FeaturePyramid {
                p4,
                p8: m8,
                p16: m16,
                p32: m32,
            },
            final_tokens: seq,
        })
    }
}

/// Fraction of trainable parameters under `adapter_prefix` relative to all
/// parameters under `backbone_prefix`.
pub fn trainable_ratio(store: &ParamStore, adapter_prefix: &str, backbone_prefix: &str) -> f64 {
    let adapter = store.trainable_element_count_prefix(adapter_prefix);
    let backbone = store.element_count_prefix(backbone_prefix);
    if backbone == 0 {
        return 0.0;
    }
    adapter as f64 / backbone as f64
}
