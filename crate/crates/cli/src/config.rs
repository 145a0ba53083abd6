//! Flat key=value run configuration files.
//!
//! One setting per line, `key = value`, with `#` comments and blank lines
//! ignored. Unknown or repeated keys are errors, so typos fail fast. The
//! full schema (defaults in parentheses):
//!
//! ```text
//! # encoder
//! model.preset              tiny | small | base | large   (tiny)
//! model.image_size          pixels, kept equal to train.input_size
//! model.patch_size          (16)
//! model.embed_dim           (preset)
//! model.depth               (preset)
//! model.num_heads           (preset)
//! model.interaction_groups  (4)
//! # adapter
//! adapter.channels          (embed_dim/4, at least 16)
//! adapter.num_heads         (channels/16, at least 1)
//! adapter.ffn_ratio         (2)
//! adapter.fuse_backbone     true|false (true)
//! # decode head
//! head.kind                 upernet | fpn-plain (upernet)
//! head.fpn_channels         (256)
//! head.ppm_scales           comma list (1,2,3,6)
//! # loss
//! loss.weight_gain          (5)
//! loss.weight_window        (31)
//! loss.eps                  (1)
//! # optimization
//! train.lr                  (6e-5)
//! train.weight_decay        (0.05)
//! train.batch_size          (2)
//! train.epochs              (200)
//! train.input_size          (512)
//! train.freeze_backbone     (true)
//! train.seed                (0)
//! train.shuffle             (true)
//! train.cosine_schedule     (false)
//! # study protocol
//! protocol.source_epochs    (train.epochs)
//! protocol.target_epochs    (train.epochs)
//! protocol.model_seed       (derived from train.seed)
//! # data
//! data.mode                 synthetic | disk (synthetic)
//! data.tasks                comma-separated task names (required)
//! data.train_per_task       synthetic only (8)
//! data.test_per_task        synthetic only (4)
//! data.side                 synthetic image side (train.input_size)
//! data.seed                 synthetic corpus seed (train.seed)
//! data.root                 disk mode root directory (required for disk)
//! ```
//!
//! Disk mode expects `<root>/<task>/train/{Imgs,GT}` and
//! `<root>/<task>/test/{Imgs,GT}` for every listed task.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use camopad_core::backbone::ViTConfig;
use camopad_core::head::HeadKind;
use camopad_core::model::ModelConfig;
use camopad_core::multitask::ProtocolConfig;
use camopad_core::rng::derive_seed;
use camopad_core::train::TrainConfig;
use thiserror::Error;

#[derive(Error, Debug)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got {text:?}")]
    Malformed { line: usize, text: String },
    #[error("line {line}: unknown key {key:?}")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: key {key:?} was already set")]
    DuplicateKey { line: usize, key: String },
    #[error("line {line}: {key} = {value:?} is not a valid {expected}")]
    BadValue {
        line: usize,
        key: String,
        value: String,
        expected: &'static str,
    },
    #[error("model.image_size ({model}) and train.input_size ({train}) disagree")]
    SizeConflict { model: usize, train: usize },
    #[error("data.tasks is required")]
    MissingTasks,
    #[error("data.root is required when data.mode = disk")]
    MissingRoot,
    #[error("data.side must be at least 32 and divisible by 4, got {side}")]
    BadSide { side: usize },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

/// Where the task registry comes from.
#[derive(Clone, Debug, PartialEq)]
pub enum DataSpec {
    Synthetic {
        tasks: Vec<String>,
        train_per_task: usize,
        test_per_task: usize,
        side: usize,
        seed: u64,
    },
    Disk { tasks: Vec<String>, root: PathBuf },
}

impl DataSpec {
    #[cfg(test)]
    pub fn tasks(&self) -> &[String] {
        match self {
            DataSpec::Synthetic { tasks, .. } | DataSpec::Disk { tasks, .. } => tasks,
        }
    }
}

/// A fully resolved run description.
#[derive(Clone, Debug)]
pub struct RunSpec {
    pub protocol: ProtocolConfig,
    pub data: DataSpec,
}

const KEYS: &[&str] = &[
    "model.preset",
    "model.image_size",
    "model.patch_size",
    "model.embed_dim",
    "model.depth",
    "model.num_heads",
    "model.interaction_groups",
    "adapter.channels",
    "adapter.num_heads",
    "adapter.ffn_ratio",
    "adapter.fuse_backbone",
    "head.kind",
    "head.fpn_channels",
    "head.ppm_scales",
    "loss.weight_gain",
    "loss.weight_window",
    "loss.eps",
    "train.lr",
    "train.weight_decay",
    "train.batch_size",
    "train.epochs",
    "train.input_size",
    "train.freeze_backbone",
    "train.seed",
    "train.shuffle",
    "train.cosine_schedule",
    "protocol.source_epochs",
    "protocol.target_epochs",
    "protocol.model_seed",
    "data.mode",
    "data.tasks",
    "data.train_per_task",
    "data.test_per_task",
    "data.side",
    "data.seed",
    "data.root",
];

struct Entry {
    value: String,
    line: usize,
}

struct Raw {
    map: BTreeMap<String, Entry>,
}

impl Raw {
    fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut map = BTreeMap::new();
        for (i, raw_line) in text.lines().enumerate() {
            let line = i + 1;
            let trimmed = raw_line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let Some((key, value)) = trimmed.split_once('=') else {
                return Err(ConfigError::Malformed {
                    line,
                    text: trimmed.to_string(),
                });
            };
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if !KEYS.contains(&key.as_str()) {
                return Err(ConfigError::UnknownKey { line, key });
            }
            if map
                .insert(key.clone(), Entry { value, line })
                .is_some()
            {
                return Err(ConfigError::DuplicateKey { line, key });
            }
        }
        Ok(Self { map })
    }

    fn take<T: std::str::FromStr>(
        &self,
        key: &str,
        expected: &'static str,
    ) -> Result<Option<T>, ConfigError> {
        match self.map.get(key) {
            None => Ok(None),
            Some(entry) => entry.value.parse::<T>().map(Some).map_err(|_| {
                ConfigError::BadValue {
                    line: entry.line,
                    key: key.to_string(),
                    value: entry.value.clone(),
                    expected,
                }
            }),
        }
    }

    fn take_bool(&self, key: &str) -> Result<Option<bool>, ConfigError> {
        self.take::<bool>(key, "boolean (true/false)")
    }

    fn take_list(&self, key: &str) -> Option<Vec<String>> {
        self.map.get(key).map(|e| {
            e.value
                .split(',')
                .map(|s| s.trim().to_string())
                .filter(|s| !s.is_empty())
                .collect()
        })
    }

    fn entry(&self, key: &str) -> Option<&Entry> {
        self.map.get(key)
    }
}

fn preset_vit(raw: &Raw) -> Result<ViTConfig, ConfigError> {
    match raw.entry("model.preset") {
        None => Ok(ViTConfig::tiny()),
        Some(e) => match e.value.as_str() {
            "tiny" => Ok(ViTConfig::tiny()),
            "small" => Ok(ViTConfig::small()),
            "base" => Ok(ViTConfig::base()),
            "large" => Ok(ViTConfig::large()),
            _ => Err(ConfigError::BadValue {
                line: e.line,
                key: "model.preset".into(),
                value: e.value.clone(),
                expected: "one of tiny/small/base/large",
            }),
        },
    }
}

fn head_kind(raw: &Raw) -> Result<Option<HeadKind>, ConfigError> {
    match raw.entry("head.kind") {
        None => Ok(None),
        Some(e) => match e.value.as_str() {
            "upernet" => Ok(Some(HeadKind::UperNet)),
            "fpn-plain" => Ok(Some(HeadKind::FpnPlain)),
            _ => Err(ConfigError::BadValue {
                line: e.line,
                key: "head.kind".into(),
                value: e.value.clone(),
                expected: "upernet or fpn-plain",
            }),
        },
    }
}

fn ppm_scales(raw: &Raw) -> Result<Option<Vec<usize>>, ConfigError> {
    let Some(e) = raw.entry("head.ppm_scales") else {
        return Ok(None);
    };
    let mut scales = Vec::new();
    for part in e.value.split(',') {
        let part = part.trim();
        match part.parse::<usize>() {
            Ok(v) => scales.push(v),
            Err(_) => {
                return Err(ConfigError::BadValue {
                    line: e.line,
                    key: "head.ppm_scales".into(),
                    value: e.value.clone(),
                    expected: "comma-separated positive integers",
                })
            }
        }
    }
    Ok(Some(scales))
}

impl RunSpec {
    pub fn from_path(path: &Path) -> Result<Self, anyhow::Error> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| anyhow::anyhow!("reading {}: {e}", path.display()))?;
        let spec = Self::from_str(&text)
            .map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?;
        Ok(spec)
    }

    pub fn from_str(text: &str) -> Result<Self, ConfigError> {
        let raw = Raw::parse(text)?;

        // Encoder: preset, then field overrides, then size resolution.
        let mut vit = preset_vit(&raw)?;
        if let Some(v) = raw.take::<usize>("model.patch_size", "positive integer")? {
            vit.patch_size = v;
        }
        if let Some(v) = raw.take::<usize>("model.embed_dim", "positive integer")? {
            vit.embed_dim = v;
        }
        if let Some(v) = raw.take::<usize>("model.depth", "positive integer")? {
            vit.depth = v;
        }
        if let Some(v) = raw.take::<usize>("model.num_heads", "positive integer")? {
            vit.num_heads = v;
        }
        if let Some(v) = raw.take::<usize>("model.interaction_groups", "positive integer")? {
            vit.interaction_groups = v;
        }

        let model_size = raw.take::<usize>("model.image_size", "positive integer")?;
        let train_size = raw.take::<usize>("train.input_size", "positive integer")?;
        let input_size = match (model_size, train_size) {
            (Some(m), Some(t)) if m != t => {
                return Err(ConfigError::SizeConflict { model: m, train: t })
            }
            (Some(m), _) => m,
            (None, Some(t)) => t,
            (None, None) => 512,
        };
        vit.image_size = input_size;

        let mut model = ModelConfig::from_vit(vit);
        if let Some(v) = raw.take::<usize>("adapter.channels", "positive integer")? {
            model.adapter.channels = v;
            // A hand-set width re-derives the default head count unless the
            // file also pins it.
            model.adapter.num_heads = (v / 16).max(1);
        }
        if let Some(v) = raw.take::<usize>("adapter.num_heads", "positive integer")? {
            model.adapter.num_heads = v;
        }
        if let Some(v) = raw.take::<usize>("adapter.ffn_ratio", "positive integer")? {
            model.adapter.ffn_ratio = v;
        }
        if let Some(v) = raw.take_bool("adapter.fuse_backbone")? {
            model.adapter.fuse_backbone = v;
        }
        if let Some(kind) = head_kind(&raw)? {
            model.head.head_kind = kind;
        }
        if let Some(v) = raw.take::<usize>("head.fpn_channels", "positive integer")? {
            model.head.fpn_channels = v;
        }
        if let Some(scales) = ppm_scales(&raw)? {
            model.head.ppm_scales = scales;
        }
        if let Some(v) = raw.take::<f64>("loss.weight_gain", "number")? {
            model.loss.weight_gain = v;
        }
        if let Some(v) = raw.take::<usize>("loss.weight_window", "odd positive integer")? {
            model.loss.weight_window = v;
        }
        if let Some(v) = raw.take::<f64>("loss.eps", "number")? {
            model.loss.eps = v;
        }

        let mut train = TrainConfig {
            seed: 0,
            ..TrainConfig::default()
        };
        train.input_size = input_size;
        if let Some(v) = raw.take::<f32>("train.lr", "number")? {
            train.lr = v;
        }
        if let Some(v) = raw.take::<f32>("train.weight_decay", "number")? {
            train.weight_decay = v;
        }
        if let Some(v) = raw.take::<usize>("train.batch_size", "positive integer")? {
            train.batch_size = v;
        }
        if let Some(v) = raw.take::<usize>("train.epochs", "integer")? {
            train.epochs = v;
        }
        if let Some(v) = raw.take_bool("train.freeze_backbone")? {
            train.freeze_backbone = v;
        }
        if let Some(v) = raw.take::<u64>("train.seed", "integer")? {
            train.seed = v;
        }
        if let Some(v) = raw.take_bool("train.shuffle")? {
            train.shuffle = v;
        }
        if let Some(v) = raw.take_bool("train.cosine_schedule")? {
            train.cosine_schedule = v;
        }

        let source_epochs = raw
            .take::<usize>("protocol.source_epochs", "integer")?
            .unwrap_or(train.epochs);
        let target_epochs = raw
            .take::<usize>("protocol.target_epochs", "integer")?
            .unwrap_or(train.epochs);
        let model_seed = raw
            .take::<u64>("protocol.model_seed", "integer")?
            .unwrap_or_else(|| derive_seed(train.seed, 0x6d6f_6465));

        let tasks = raw.take_list("data.tasks").ok_or(ConfigError::MissingTasks)?;
        if tasks.is_empty() {
            return Err(ConfigError::MissingTasks);
        }
        let mode = match raw.entry("data.mode") {
            None => "synthetic",
            Some(e) => match e.value.as_str() {
                "synthetic" | "disk" => e.value.as_str(),
                _ => {
                    return Err(ConfigError::BadValue {
                        line: e.line,
                        key: "data.mode".into(),
                        value: e.value.clone(),
                        expected: "synthetic or disk",
                    })
                }
            },
        };
        let data = if mode == "disk" {
            let root = raw
                .entry("data.root")
                .map(|e| PathBuf::from(&e.value))
                .ok_or(ConfigError::MissingRoot)?;
            DataSpec::Disk { tasks, root }
        } else {
            let side = raw
                .take::<usize>("data.side", "positive integer")?
                .unwrap_or(train.input_size);
            if side < 32 || side % 4 != 0 {
                return Err(ConfigError::BadSide { side });
            }
            DataSpec::Synthetic {
                tasks,
                train_per_task: raw
                    .take::<usize>("data.train_per_task", "positive integer")?
                    .unwrap_or(8),
                test_per_task: raw
                    .take::<usize>("data.test_per_task", "positive integer")?
                    .unwrap_or(4),
                side,
                seed: raw.take::<u64>("data.seed", "integer")?.unwrap_or(train.seed),
            }
        };

        // Surface structural problems at parse time rather than mid-run.
        model
            .vit
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        model
            .adapter
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        model
            .head
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        train
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;

        Ok(Self {
            protocol: ProtocolConfig {
                model,
                train,
                source_epochs,
                target_epochs,
                model_seed,
            },
            data,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const DESK: &str = "\
# desk profile
model.preset = tiny
train.input_size = 64
train.lr = 2e-3
train.epochs = 12
train.batch_size = 4
train.seed = 9
data.tasks = Amphibian, Bird
data.train_per_task = 4
data.test_per_task = 2
";

    #[test]
    fn desk_profile_parses_and_propagates_the_input_size() {
        let spec = RunSpec::from_str(DESK).unwrap();
        assert_eq!(spec.protocol.model.vit.image_size, 64);
        assert_eq!(spec.protocol.train.input_size, 64);
        assert_eq!(spec.protocol.train.epochs, 12);
        assert_eq!(spec.protocol.source_epochs, 12);
        assert_eq!(spec.data.tasks(), ["Amphibian", "Bird"]);
        match &spec.data {
            DataSpec::Synthetic { side, seed, .. } => {
                assert_eq!(*side, 64);
                assert_eq!(*seed, 9);
            }
            other => panic!("expected synthetic data, got {other:?}"),
        }
    }

    #[test]
    fn defaults_match_the_standard_recipe() {
        let spec = RunSpec::from_str("data.tasks = Amphibian\n").unwrap();
        let t = &spec.protocol.train;
        assert_eq!(t.lr, 6e-5);
        assert_eq!(t.weight_decay, 0.05);
        assert_eq!(t.batch_size, 2);
        assert_eq!(t.epochs, 200);
        assert_eq!(t.input_size, 512);
        assert!(t.freeze_backbone);
        assert_eq!(spec.protocol.model.vit.embed_dim, 192);
        assert_eq!(spec.protocol.model.head.ppm_scales, [1, 2, 3, 6]);
    }

    #[test]
    fn unknown_duplicate_and_malformed_keys_are_rejected_with_lines() {
        let err = RunSpec::from_str("data.tasks = A\nmodle.preset = tiny\n").unwrap_err();
        assert!(matches!(err, ConfigError::UnknownKey { line: 2, ref key } if key == "modle.preset"));

        let err = RunSpec::from_str("train.seed = 1\ntrain.seed = 2\ndata.tasks = A\n")
            .unwrap_err();
        assert!(matches!(err, ConfigError::DuplicateKey { line: 2, .. }));

        let err = RunSpec::from_str("just words\n").unwrap_err();
        assert!(matches!(err, ConfigError::Malformed { line: 1, .. }));

        let err = RunSpec::from_str("train.lr = fast\ndata.tasks = A\n").unwrap_err();
        assert!(matches!(err, ConfigError::BadValue { line: 1, .. }));
    }

    #[test]
    fn conflicting_sizes_and_missing_tasks_are_errors() {
        let err = RunSpec::from_str(
            "model.image_size = 64\ntrain.input_size = 128\ndata.tasks = A\n",
        )
        .unwrap_err();
        assert!(matches!(
            err,
            ConfigError::SizeConflict {
                model: 64,
                train: 128
            }
        ));

        let err = RunSpec::from_str("train.seed = 1\n").unwrap_err();
        assert!(matches!(err, ConfigError::MissingTasks));

        let err = RunSpec::from_str("data.mode = disk\ndata.tasks = A\n").unwrap_err();
        assert!(matches!(err, ConfigError::MissingRoot));
    }

    #[test]
    fn structural_validation_runs_at_parse_time() {
        // 100 is not divisible by 32, which the training loop requires.
        let err =
            RunSpec::from_str("train.input_size = 100\ndata.tasks = A\n").unwrap_err();
        assert!(matches!(err, ConfigError::Invalid(_)));
    }

    #[test]
    fn head_and_adapter_overrides_apply() {
        let spec = RunSpec::from_str(
            "data.tasks = A\nhead.kind = fpn-plain\nhead.fpn_channels = 64\n\
             adapter.channels = 32\nhead.ppm_scales = 1,3\ntrain.input_size = 64\n",
        )
        .unwrap();
        assert_eq!(spec.protocol.model.head.head_kind, HeadKind::FpnPlain);
        assert_eq!(spec.protocol.model.head.fpn_channels, 64);
        assert_eq!(spec.protocol.model.head.ppm_scales, [1, 3]);
        assert_eq!(spec.protocol.model.adapter.channels, 32);
        assert_eq!(spec.protocol.model.adapter.num_heads, 2);
    }
}
