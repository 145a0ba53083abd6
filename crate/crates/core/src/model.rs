//! Assembly of encoder, adapter and head into one trainable model.
//!
//! Parameters live in three named groups: `backbone.` (frozen by default),
//! `adapter.` and `head.`. The model joins the pieces into the two entry
//! points the pipeline needs: a training forward that ends in the weighted
//! BCE+IoU loss on the tape, and an inference forward that ends in a
//! full-resolution probability map.

use alloc::string::String;

use ndarray::{Array2, Array3};
use thiserror::Error;

use crate::adapter::{Adapter, AdapterConfig, AdapterError};
use crate::archive::BACKBONE_PREFIX;
use crate::autograd::Var;
use crate::backbone::{Backbone, BackboneError, ViTConfig};
use crate::head::{Head, HeadConfig, HeadError, HeadKind, PredictionMap};
use crate::loss::{LossConfig, LossError};
use crate::nn::{Ctx, ParamBuilder, ParamStore};
use crate::ops;
use crate::rng::SeedRng;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub vit: ViTConfig,
    pub adapter: AdapterConfig,
    pub head: HeadConfig,
    pub loss: LossConfig,
}

impl ModelConfig {
    /// Standard-scale configuration: 512-pixel inputs into a small encoder.
    pub fn small() -> Self {
        let vit = ViTConfig::small();
        Self::from_vit(vit)
    }

    /// Desk-scale profile: 64-pixel inputs, tiny encoder, narrow head. The
    /// whole multitask protocol runs on one CPU core in minutes with it.
    pub fn tiny_desk() -> Self {
        let vit = ViTConfig::tiny().with_image_size(64);
        let mut cfg = Self::from_vit(vit);
        cfg.head.fpn_channels = 64;
        cfg
    }

    pub fn from_vit(vit: ViTConfig) -> Self {
        let adapter = AdapterConfig::for_backbone(&vit);
        Self {
            vit,
            adapter,
            head: HeadConfig::default(),
            loss: LossConfig::default(),
        }
    }

    /// Stable textual form: one `key=value` per field, fixed order. Equal
    /// configurations produce equal strings.
    pub fn canonical_string(&self) -> String {
        let mut s = String::new();
        let kind = match self.head.head_kind {
            HeadKind::UperNet => "upernet",
            HeadKind::FpnPlain => "fpn_plain",
        };
        let mut scales = String::new();
        for (i, sc) in self.head.ppm_scales.iter().enumerate() {
            if i > 0 {
                scales.push(',');
            }
            scales.push_str(&alloc::format!("{sc}"));
        }
        let parts: [(&str, String); 14] = [
            ("image_size", alloc::format!("{}", self.vit.image_size)),
            ("patch_size", alloc::format!("{}", self.vit.patch_size)),
            ("embed_dim", alloc::format!("{}", self.vit.embed_dim)),
            ("depth", alloc::format!("{}", self.vit.depth)),
            ("num_heads", alloc::format!("{}", self.vit.num_heads)),
            (
                "interaction_groups",
                alloc::format!("{}", self.vit.interaction_groups),
            ),
            (
                "adapter_channels",
                alloc::format!("{}", self.adapter.channels),
            ),
            (
                "adapter_heads",
                alloc::format!("{}", self.adapter.num_heads),
            ),
            (
                "adapter_ffn_ratio",
                alloc::format!("{}", self.adapter.ffn_ratio),
            ),
            (
                "adapter_fuse",
                alloc::format!("{}", self.adapter.fuse_backbone),
            ),
            ("ppm_scales", scales),
            ("fpn_channels", alloc::format!("{}", self.head.fpn_channels)),
            ("head_kind", alloc::format!("{kind}")),
            (
                "loss",
                alloc::format!(
                    "gain={};window={};eps={}",
                    self.loss.weight_gain,
                    self.loss.weight_window,
                    self.loss.eps
                ),
            ),
        ];
        for (k, v) in parts {
            s.push_str(k);
            s.push('=');
            s.push_str(&v);
            s.push('\n');
        }
        s
    }

    /// FNV-1a hash of the canonical string; checkpoint archives carry it so
    /// a load into a differently-shaped model can be flagged.
    pub fn hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in self.canonical_string().as_bytes() {
            h ^= *b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h
    }
}

#[derive(Error, Debug, Clone, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Adapter(#[from] AdapterError),
    #[error(transparent)]
    Head(#[from] HeadError),
    #[error(transparent)]
    Loss(#[from] LossError),
}

pub struct CodModel {
    pub cfg: ModelConfig,
    pub backbone: Backbone,
    pub adapter: Adapter,
    pub head: Head,
}

impl CodModel {
    /// Creates the parameter store and registers all three groups with a
    /// seeded initialization. The encoder is left trainable; apply the
    /// freeze policy afterwards via [`CodModel::set_backbone_frozen`].
    pub fn build(cfg: ModelConfig, seed: u64) -> Result<(ParamStore, Self), ModelError> {
        let mut store = ParamStore::new();
        let mut rng = SeedRng::new(seed);
        let mut pb = ParamBuilder::new(&mut store, &mut rng);
        let backbone = {
            let mut scope = pb.scope("backbone");
            Backbone::register(&mut scope, cfg.vit.clone())?
        };
        let adapter = {
            let mut scope = pb.scope("adapter");
            Adapter::register(&mut scope, cfg.adapter.clone(), &cfg.vit)?
        };
        let head = {
            let mut scope = pb.scope("head");
            Head::register(&mut scope, cfg.head.clone(), cfg.adapter.channels)?
        };
        Ok((
            store,
            Self {
                cfg,
                backbone,
                adapter,
                head,
            },
        ))
    }

    /// Applies or lifts the freeze on the encoder group; returns how many
    /// parameters were touched.
    pub fn set_backbone_frozen(&self, store: &mut ParamStore, frozen: bool) -> usize {
        self.backbone.set_frozen(store, frozen)
    }

    /// Fraction of trainable adapter parameters relative to the encoder.
    pub fn trainable_ratio(&self, store: &ParamStore) -> f64 {
        crate::adapter::trainable_ratio(store, "adapter.", BACKBONE_PREFIX)
    }

    /// Training forward: image to pyramid to logits at the ground-truth
    /// resolution, ending in the scalar weighted BCE+IoU loss on the tape.
    pub fn forward_train(
        &self,
        cx: &Ctx,
        image: &Array3<f32>,
        gt: &Array2<f32>,
    ) -> Result<Var, ModelError> {
        let out = self.adapter.run_interactions(cx, image, &self.backbone)?;
        let (h, w) = gt.dim();
        let logits = self.head.logits(cx, &out.pyramid, h, w);
        let flat = ops::reshape(cx.g, logits, &[h, w]);
        Ok(crate::loss::total_loss_on_tape(
            cx.g,
            flat,
            gt,
            &self.cfg.loss,
        )?)
    }

    /// Inference forward: probability map at the sample's original size.
    pub fn predict(
        &self,
        cx: &Ctx,
        image: &Array3<f32>,
        original_size: (usize, usize),
    ) -> Result<PredictionMap, ModelError> {
        let out = self.adapter.run_interactions(cx, image, &self.backbone)?;
        Ok(self.head.predict(cx, &out.pyramid, original_size)?)
    }

    /// Names of the parameter groups a lightweight checkpoint carries.
    pub fn transfer_group_prefixes() -> [&'static str; 2] {
        ["adapter.", "head."]
    }

    /// Count of trainable parameters, the set an optimizer would update.
    pub fn trainable_element_count(&self, store: &ParamStore) -> usize {
        store.trainable_element_count_prefix("")
    }
}

/// Convenience used by tests and the training pipeline: per-group element
/// counts as (backbone, adapter, head).
pub fn group_element_counts(store: &ParamStore) -> (usize, usize, usize) {
    (
        store.element_count_prefix("backbone."),
        store.element_count_prefix("adapter."),
        store.element_count_prefix("head."),
    )
}
