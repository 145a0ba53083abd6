//! The detection head: pyramid pooling over the coarsest feature, top-down
//! fusion with lateral connections, and a single-channel full-resolution
//! probability prediction.
//!
//! Two variants share one contract (pyramid in, prediction out): the default
//! head pools the stride-32 level at several bin counts for a global prior
//! before the top-down pass, while the plain variant starts the top-down
//! pass from a simple lateral projection of the stride-32 level.

use alloc::vec::Vec;

use ndarray::Array2;
use thiserror::Error;

use crate::adapter::FeaturePyramid;
use crate::autograd::Var;
use crate::fmath;
use crate::nn::{Conv2d, Ctx, GroupNorm, ParamBuilder};
use crate::ops;

/// Channel-group count for the head's normalization layers.
const NORM_GROUPS: usize = 8;

/// Logits are clamped to this magnitude before the final sigmoid so the
/// reported probabilities stay strictly inside (0, 1) in f64.
const LOGIT_CLAMP: f64 = 36.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadKind {
    UperNet,
    FpnPlain,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HeadConfig {
    /// Bin counts for the pooling branches on the coarsest level.
    pub ppm_scales: Vec<usize>,
    /// Working width of the fusion pathway.
    pub fpn_channels: usize,
    pub head_kind: HeadKind,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            ppm_scales: alloc::vec![1, 2, 3, 6],
            fpn_channels: 256,
            head_kind: HeadKind::UperNet,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<(), HeadError> {
        if self.ppm_scales.is_empty() {
            return Err(HeadError::EmptyScales);
        }
        if self.ppm_scales[0] == 0 {
            return Err(HeadError::NonIncreasingScales { prev: 0, next: 0 });
        }
        for pair in self.ppm_scales.windows(2) {
            if pair[1] <= pair[0] {
                return Err(HeadError::NonIncreasingScales {
                    prev: pair[0],
                    next: pair[1],
                });
            }
        }
        if self.fpn_channels == 0 || self.fpn_channels % NORM_GROUPS != 0 {
            return Err(HeadError::BadChannels {
                channels: self.fpn_channels,
            });
        }
        Ok(())
    }
}

#[derive(Error, Debug, Clone, PartialEq, Eq)]
pub enum HeadError {
    #[error("pooling scales must be nonempty")]
    EmptyScales,
    #[error("pooling scales must be strictly increasing, got {prev} then {next}")]
    NonIncreasingScales { prev: usize, next: usize },
    #[error("fusion width {channels} must be a positive multiple of {NORM_GROUPS}")]
    BadChannels { channels: usize },
    #[error("prediction size {h}x{w} must be positive")]
    BadOriginalSize { h: usize, w: usize },
}

/// A dense probability map at the sample's original resolution. Values are
/// strictly inside (0, 1).
#[derive(Debug, Clone)]
pub struct PredictionMap {
    pub probabilities: Array2<f64>,
}

impl PredictionMap {
    /// 8-bit form used when predictions are written to image files.
    pub fn quantized(&self) -> Array2<u8> {
        self.probabilities.map(|&p| fmath::round(255.0 * p) as u8)
    }
}

struct ConvUnit {
    conv: Conv2d,
    norm: GroupNorm,
}

impl ConvUnit {
    fn new(pb: &mut ParamBuilder, name: &str, cin: usize, cout: usize, k: usize) -> Self {
        let mut pb = pb.scope(name);
        Self {
            conv: Conv2d::new(&mut pb, "conv", cin, cout, k, 1, k / 2),
            norm: GroupNorm::new(&mut pb, "norm", cout, NORM_GROUPS),
        }
    }

    fn forward(&self, cx: &Ctx, x: Var) -> Var {
        let y = self.conv.forward(cx, x);
        let y = self.norm.forward(cx, y);
        ops::relu(cx.g, y)
    }
}

pub struct Head {
    pub cfg: HeadConfig,
    /// Pooling branches over the coarsest level (default variant only).
    ppm_proj: Vec<ConvUnit>,
    ppm_fuse: Option<ConvUnit>,
    /// Lateral projection of the coarsest level (plain variant only).
    lateral32: Option<ConvUnit>,
    lateral4: ConvUnit,
    lateral8: ConvUnit,
    lateral16: ConvUnit,
    smooth4: ConvUnit,
    smooth8: ConvUnit,
    smooth16: ConvUnit,
    bottleneck: ConvUnit,
    out: Conv2d,
}

impl Head {
    /// Registers all head parameters under the builder's current scope.
    /// `in_channels` is the channel width of every pyramid level.
    pub fn register(
        pb: &mut ParamBuilder,
        cfg: HeadConfig,
        in_channels: usize,
    ) -> Result<Self, HeadError> {
        cfg.validate()?;
        let (c, f) = (in_channels, cfg.fpn_channels);
        let mut ppm_proj = Vec::new();
        let mut ppm_fuse = None;
        let mut lateral32 = None;
        match cfg.head_kind {
            HeadKind::UperNet => {
                let mut ppm = pb.scope("ppm");
                for (i, _) in cfg.ppm_scales.iter().enumerate() {
                    let name = alloc::format!("branches.{i}");
                    ppm_proj.push(ConvUnit::new(&mut ppm, &name, c, f, 1));
                }
                let concat_width = c + cfg.ppm_scales.len() * f;
                ppm_fuse = Some(ConvUnit::new(&mut ppm, "fuse", concat_width, f, 3));
            }
            HeadKind::FpnPlain => {
                lateral32 = Some(ConvUnit::new(pb, "lateral32", c, f, 1));
            }
        }
        Ok(Self {
            ppm_proj,
            ppm_fuse,
            lateral32,
            lateral4: ConvUnit::new(pb, "lateral4", c, f, 1),
            lateral8: ConvUnit::new(pb, "lateral8", c, f, 1),
            lateral16: ConvUnit::new(pb, "lateral16", c, f, 1),
            smooth4: ConvUnit::new(pb, "smooth4", f, f, 3),
            smooth8: ConvUnit::new(pb, "smooth8", f, f, 3),
            smooth16: ConvUnit::new(pb, "smooth16", f, f, 3),
            bottleneck: ConvUnit::new(pb, "bottleneck", 4 * f, f, 3),
            out: Conv2d::new(pb, "out", f, 1, 1, 1, 0),
            cfg,
        })
    }

    fn ppm_branch(&self, cx: &Ctx, p32: Var, index: usize) -> Var {
        let g = cx.g;
        let shape = g.shape(p32);
        let (h, w) = (shape[1], shape[2]);
        let s = self.cfg.ppm_scales[index];
        let pooled = ops::adaptive_avg_pool(g, p32, s, s);
        let projected = self.ppm_proj[index].forward(cx, pooled);
        ops::bilinear_resize(g, projected, h, w)
    }

    /// Pyramid pooling over the coarsest level: pool at each bin count,
    /// project, upsample back, concatenate with the input and fuse. Spatial
    /// size is preserved.
    pub fn ppm(&self, cx: &Ctx, p32: Var) -> Var {
        let g = cx.g;
        let mut parts = alloc::vec![p32];
        for i in 0..self.cfg.ppm_scales.len() {
            parts.push(self.ppm_branch(cx, p32, i));
        }
        let stacked = ops::concat(g, 0, &parts);
        self.ppm_fuse
            .as_ref()
            .expect("pooling branches exist only on the default head variant")
            .forward(cx, stacked)
    }

    /// Top-down fusion: lateral projections, 2x upsampling additions from
    /// the coarsest level down to stride 4, per-level smoothing, then all
    /// levels resized to stride 4, concatenated and fused.
    pub fn fpn_fuse(&self, cx: &Ctx, pyramid: &FeaturePyramid) -> Var {
        let g = cx.g;
        let top = match self.cfg.head_kind {
            HeadKind::UperNet => self.ppm(cx, pyramid.p32),
            HeadKind::FpnPlain => self
                .lateral32
                .as_ref()
                .expect("plain variant always has a stride-32 lateral")
                .forward(cx, pyramid.p32),
        };
        let l16 = self.lateral16.forward(cx, pyramid.p16);
        let l8 = self.lateral8.forward(cx, pyramid.p8);
        let l4 = self.lateral4.forward(cx, pyramid.p4);

        let up = |x: Var, like: Var| {
            let s = g.shape(like);
            ops::bilinear_resize(g, x, s[1], s[2])
        };
        let t16 = ops::add(g, l16, up(top, l16));
        let t8 = ops::add(g, l8, up(t16, l8));
        let t4 = ops::add(g, l4, up(t8, l4));

        let s4 = self.smooth4.forward(cx, t4);
        let s8 = self.smooth8.forward(cx, t8);
        let s16 = self.smooth16.forward(cx, t16);

        let target = g.shape(s4);
        let (h, w) = (target[1], target[2]);
        let stacked = ops::concat(
            g,
            0,
            &[
                s4,
                ops::bilinear_resize(g, s8, h, w),
                ops::bilinear_resize(g, s16, h, w),
                ops::bilinear_resize(g, top, h, w),
            ],
        );
        self.bottleneck.forward(cx, stacked)
    }

    /// Single-channel logit map at the requested resolution; this is what
    /// training losses consume.
    pub fn logits(&self, cx: &Ctx, pyramid: &FeaturePyramid, h: usize, w: usize) -> Var {
        let fused = self.fpn_fuse(cx, pyramid);
        let logit = self.out.forward(cx, fused);
        ops::bilinear_resize(cx.g, logit, h, w)
    }

    /// Full prediction: logits resized to the sample's original size, then
    /// squashed to probabilities.
    pub fn predict(
        &self,
        cx: &Ctx,
        pyramid: &FeaturePyramid,
        original_size: (usize, usize),
    ) -> Result<PredictionMap, HeadError> {
        let (h, w) = original_size;
        if h == 0 || w == 0 {
            return Err(HeadError::BadOriginalSize { h, w });
        }
        let logit = self.logits(cx, pyramid, h, w);
        Ok(probabilities_from_logits(cx, logit))
    }
}

/// Converts a `[1, H, W]` logit map into a strictly-(0,1) probability map.
fn probabilities_from_logits(cx: &Ctx, logit: Var) -> PredictionMap {
    let g = cx.g;
    let shape = g.shape(logit);
    let (h, w) = (shape[1], shape[2]);
    let values = g.value(logit);
    let mut probabilities = Array2::zeros((h, w));
    for (i, &z) in values.iter().enumerate() {
        let z = (z as f64).clamp(-LOGIT_CLAMP, LOGIT_CLAMP);
        probabilities[[i / w, i % w]] = fmath::sigmoid(z);
    }
    PredictionMap { probabilities }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Graph;
    use crate::nn::ParamStore;
    use crate::rng::SeedRng;
    use ndarray::{Array3, ArrayD};

    const C: usize = 16;
    const F: usize = 24;

    fn test_config(kind: HeadKind) -> HeadConfig {
        HeadConfig {
            ppm_scales: alloc::vec![1, 2, 3, 6],
            fpn_channels: F,
            head_kind: kind,
        }
    }

    fn build(kind: HeadKind, seed: u64) -> (ParamStore, Head) {
        let mut store = ParamStore::new();
        let mut rng = SeedRng::new(seed);
        let mut pb = ParamBuilder::new(&mut store, &mut rng);
        let head = {
            let mut scope = pb.scope("head");
            Head::register(&mut scope, test_config(kind), C).unwrap()
        };
        (store, head)
    }

    fn random_map(g: &Graph, c: usize, h: usize, w: usize, seed: u64) -> crate::autograd::Var {
        let mut rng = SeedRng::new(seed);
        g.constant(Array3::from_shape_simple_fn((c, h, w), || rng.normal()).into_dyn())
    }

    fn random_pyramid(g: &Graph, side: usize, seed: u64) -> FeaturePyramid {
        FeaturePyramid {
            p4: random_map(g, C, side / 4, side / 4, seed),
            p8: random_map(g, C, side / 8, side / 8, seed + 1),
            p16: random_map(g, C, side / 16, side / 16, seed + 2),
            p32: random_map(g, C, side / 32, side / 32, seed + 3),
        }
    }

    #[test]
    fn config_validation() {
        assert!(HeadConfig::default().validate().is_ok());
        let mut cfg = HeadConfig::default();
        cfg.ppm_scales.clear();
        assert_eq!(cfg.validate().unwrap_err(), HeadError::EmptyScales);
        let mut cfg = HeadConfig::default();
        cfg.ppm_scales = alloc::vec![1, 3, 3];
        assert_eq!(
            cfg.validate().unwrap_err(),
            HeadError::NonIncreasingScales { prev: 3, next: 3 }
        );
        let mut cfg = HeadConfig::default();
        cfg.fpn_channels = 20;
        assert_eq!(
            cfg.validate().unwrap_err(),
            HeadError::BadChannels { channels: 20 }
        );
    }

    #[test]
    fn ppm_preserves_spatial_size() {
        let (store, head) = build(HeadKind::UperNet, 1);
        let g = Graph::new();
        let cx = Ctx::new(&g, &store);
        let p32 = random_map(&g, C, 16, 16, 2);
        let fused = head.ppm(&cx, p32);
        assert_eq!(g.shape(fused), &[F, 16, 16]);
    }

    #[test]
    fn ppm_branches_of_constant_input_are_constant() {
        let (store, head) = build(HeadKind::UperNet, 3);
        let g = Graph::new();
        let cx = Ctx::new(&g, &store);
        // 0.75 is dyadic, so every pooling bin averages to it exactly and
        // the branch stays spatially uniform up to interpolation rounding.
        let p32 = g.constant(ArrayD::from_elem(ndarray::IxDyn(&[C, 8, 8]), 0.75));
        for i in 0..head.cfg.ppm_scales.len() {
            let branch = head.ppm_branch(&cx, p32, i);
            let v = g.value(branch);
            for ch in 0..F {
                let first = v[[ch, 0, 0]];
                for r in 0..8 {
                    for c in 0..8 {
                        let x = v[[ch, r, c]];
                        assert!(
                            (x - first).abs() <= 1e-6,
                            "branch {i} channel {ch}: {x} vs {first}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn scale_one_branch_is_spatially_flat_for_any_input() {
        let (store, head) = build(HeadKind::UperNet, 4);
        assert_eq!(head.cfg.ppm_scales[0], 1);
        let g = Graph::new();
        let cx = Ctx::new(&g, &store);
        let p32 = random_map(&g, C, 8, 8, 5);
        let branch = head.ppm_branch(&cx, p32, 0);
        let v = g.value(branch);
        for ch in 0..F {
            let first = v[[ch, 0, 0]];
            assert!(v
                .index_axis(ndarray::Axis(0), ch)
                .iter()
                .all(|&x| x == first));
        }
    }

    #[test]
    fn fused_map_sits_at_stride_four() {
        for kind in [HeadKind::UperNet, HeadKind::FpnPlain] {
            let (store, head) = build(kind, 6);
            let g = Graph::new();
            let cx = Ctx::new(&g, &store);
            let pyramid = random_pyramid(&g, 64, 7);
            let fused = head.fpn_fuse(&cx, &pyramid);
            assert_eq!(g.shape(fused), &[F, 16, 16], "{kind:?}");
        }
    }

    #[test]
    fn zeroed_laterals_make_the_output_depend_on_p32_only() {
        let (mut store, head) = build(HeadKind::UperNet, 8);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let name = store.name(id);
            if ["head.lateral4.", "head.lateral8.", "head.lateral16."]
                .iter()
                .any(|p| name.starts_with(p))
            {
                let shape = store.value(id).shape().to_vec();
                store.set_value(id, ArrayD::zeros(ndarray::IxDyn(&shape)));
            }
        }
        let g = Graph::new();
        let cx = Ctx::new(&g, &store);
        let a = random_pyramid(&g, 64, 9);
        let b = FeaturePyramid {
            p4: random_map(&g, C, 16, 16, 100),
            p8: random_map(&g, C, 8, 8, 101),
            p16: random_map(&g, C, 4, 4, 102),
            p32: a.p32,
        };
        let fa = g.value(head.fpn_fuse(&cx, &a));
        let fb = g.value(head.fpn_fuse(&cx, &b));
        assert_eq!(fa.as_slice(), fb.as_slice());
    }

    #[test]
    fn zero_pyramid_with_zero_biases_fuses_to_zero() {
        let (store, head) = build(HeadKind::UperNet, 10);
        let g = Graph::new();
        let cx = Ctx::new(&g, &store);
        let zero = |h: usize, w: usize| g.constant(ArrayD::zeros(ndarray::IxDyn(&[C, h, w])));
        let pyramid = FeaturePyramid {
            p4: zero(16, 16),
            p8: zero(8, 8),
            p16: zero(4, 4),
            p32: zero(2, 2),
        };
        let fused = head.fpn_fuse(&cx, &pyramid);
        assert!(g.value(fused).iter().all(|&x| x == 0.0));
        let prediction = head.predict(&cx, &pyramid, (20, 30)).unwrap();
        assert!(prediction.probabilities.iter().all(|&p| p == 0.5));
    }

    #[test]
    fn prediction_matches_requested_resolution_and_stays_open() {
        for kind in [HeadKind::UperNet, HeadKind::FpnPlain] {
            let (store, head) = build(kind, 11);
            let g = Graph::new();
            let cx = Ctx::new(&g, &store);
            let pyramid = random_pyramid(&g, 64, 12);
            let prediction = head.predict(&cx, &pyramid, (373, 500)).unwrap();
            assert_eq!(prediction.probabilities.dim(), (373, 500));
            assert!(prediction
                .probabilities
                .iter()
                .all(|&p| p > 0.0 && p < 1.0));
        }
    }

    #[test]
    fn saturated_logits_stay_strictly_inside_the_unit_interval() {
        let (store, _) = build(HeadKind::UperNet, 13);
        let g = Graph::new();
        let cx = Ctx::new(&g, &store);
        for (level, check) in [
            (20.0_f32, &(|p: f64| p >= 1.0 - 1e-8 && p < 1.0) as &dyn Fn(f64) -> bool),
            (-20.0_f32, &|p: f64| p <= 1e-8 && p > 0.0),
            (1e9_f32, &|p: f64| p < 1.0),
            (-1e9_f32, &|p: f64| p > 0.0),
        ] {
            let logit = g.constant(ArrayD::from_elem(ndarray::IxDyn(&[1, 4, 5]), level));
            let map = probabilities_from_logits(&cx, logit);
            assert!(map.probabilities.iter().all(|&p| check(p)), "level {level}");
        }
    }

    #[test]
    fn nonpositive_prediction_size_is_rejected() {
        let (store, head) = build(HeadKind::UperNet, 14);
        let g = Graph::new();
        let cx = Ctx::new(&g, &store);
        let pyramid = random_pyramid(&g, 64, 15);
        assert_eq!(
            head.predict(&cx, &pyramid, (0, 64)).unwrap_err(),
            HeadError::BadOriginalSize { h: 0, w: 64 }
        );
    }

    #[test]
    fn quantized_prediction_rounds_to_bytes() {
        let map = PredictionMap {
            probabilities: ndarray::array![[0.0013, 0.5], [0.998, 0.25]],
        };
        let q = map.quantized();
        assert_eq!(q, ndarray::array![[0u8, 128], [254, 64]]);
    }

    #[test]
    fn every_head_group_is_gradient_reachable() {
        let (mut store, head) = build(HeadKind::UperNet, 16);
        let g = Graph::new();
        let cx = Ctx::new(&g, &store);
        let pyramid = random_pyramid(&g, 64, 17);
        let logit = head.logits(&cx, &pyramid, 64, 64);
        let loss = ops::sum_all(&g, logit);
        let mut grads = g.backward(loss);
        for (id, grad) in cx.take_param_grads(&mut grads) {
            store.accumulate_grad(id, grad);
        }
        for group in [
            "head.ppm.",
            "head.lateral4.",
            "head.lateral8.",
            "head.lateral16.",
            "head.smooth4.",
            "head.smooth8.",
            "head.smooth16.",
            "head.bottleneck.",
            "head.out.",
        ] {
            assert!(
                store.grad_norm_prefix(group) > 0.0,
                "no gradient reached {group}"
            );
        }
    }
}
