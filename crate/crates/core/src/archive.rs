//! Named parameter snapshots.
//!
//! An archive is a plain name-to-tensor map tagged with the hash of the
//! model configuration that produced it. Capturing supports two scopes:
//! everything, or only the lightweight groups (everything outside the
//! encoder), which is what transfer between tasks ships around. The on-disk
//! encoding lives in the companion crate; this module only defines the data
//! and the capture/restore semantics.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use ndarray::ArrayD;
use thiserror::Error;

use crate::nn::ParamStore;

/// Name prefix of the frozen encoder group, excluded from
/// [`ArchiveKind::AdapterOnly`] captures.
pub const BACKBONE_PREFIX: &str = "backbone.";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ArchiveKind {
    /// Adapter and head groups only; the usual transfer artifact.
    AdapterOnly,
    /// Every parameter, encoder included.
    Full,
}

#[derive(Clone, Debug)]
pub struct ParamArchive {
    pub kind: ArchiveKind,
    /// Hash of the canonical model-configuration string at capture time.
    pub config_hash: u64,
    pub entries: BTreeMap<String, ArrayD<f32>>,
}

/// What a restore touched and what it could not match.
#[derive(Debug, Default)]
pub struct LoadReport {
    /// Store parameters overwritten from the archive.
    pub restored: Vec<String>,
    /// Store parameters the archive had no entry for.
    pub missing: Vec<String>,
    /// Archive entries naming no store parameter.
    pub unmatched: Vec<String>,
    /// False when the archive came from a different configuration; callers
    /// surface this as a warning, not an error.
    pub config_hash_matches: bool,
}

#[derive(Error, Debug, Clone, PartialEq, Eq)]
pub enum ArchiveError {
    #[error("archived {name} has shape {found:?}, model expects {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
}

impl ParamArchive {
    /// Snapshots the store. `AdapterOnly` keeps every parameter whose name
    /// does not start with [`BACKBONE_PREFIX`].
    pub fn capture(store: &ParamStore, kind: ArchiveKind, config_hash: u64) -> Self {
        let mut entries = BTreeMap::new();
        for id in store.ids() {
            let name = store.name(id);
            if kind == ArchiveKind::AdapterOnly && name.starts_with(BACKBONE_PREFIX) {
                continue;
            }
            entries.insert(name.to_string(), (**store.value(id)).clone());
        }
        Self {
            kind,
            config_hash,
            entries,
        }
    }

    /// Writes matching entries back into the store. Every store parameter
    /// ends up in exactly one of `restored`/`missing`; archive entries that
    /// name nothing land in `unmatched`. A shape conflict aborts before
    /// anything is written.
    pub fn restore(
        &self,
        store: &mut ParamStore,
        expected_hash: u64,
    ) -> Result<LoadReport, ArchiveError> {
        for (name, value) in &self.entries {
            if let Some(id) = store.id(name) {
                let expected = store.value(id).shape();
                if expected != value.shape() {
                    return Err(ArchiveError::ShapeMismatch {
                        name: name.clone(),
                        expected: expected.to_vec(),
                        found: value.shape().to_vec(),
                    });
                }
            }
        }
        let mut report = LoadReport {
            config_hash_matches: self.config_hash == expected_hash,
            ..LoadReport::default()
        };
        for id in store.ids().collect::<Vec<_>>() {
            let name = store.name(id).to_string();
            if let Some(value) = self.entries.get(&name) {
                store.set_value(id, value.clone());
                report.restored.push(name);
            } else {
                report.missing.push(name);
            }
        }
        for name in self.entries.keys() {
            if store.id(name).is_none() {
                report.unmatched.push(name.clone());
            }
        }
        Ok(report)
    }
}
