//! Task groups, training regimes, and transfer protocols.
//!
//! The corpus is organized into named tasks, each with its own train and
//! test split. On top of that partition this module defines four training
//! regimes — single-task, joint multi-task, and their checkpoint-seeded
//! transfer variants — plus two study protocols: a zero-shot transfer
//! matrix (train on one task, score on all of them without further tuning)
//! and a cross-task comparison that pre-trains jointly on a source group
//! before adapting to each held-out target. Everything is driven by seeds,
//! so a fixed configuration reproduces identical score reports.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use ndarray::Array2;
use thiserror::Error;

use crate::archive::{ArchiveError, ParamArchive};
use crate::data::ImageSample;
use crate::metrics::MetricReport;
use crate::model::{CodModel, ModelConfig, ModelError};
use crate::nn::ParamStore;
use crate::rng::derive_seed;
use crate::train::{evaluate_model, train_loop, EvalError, TrainConfig, TrainError};

/// The nine task categories of the standard benchmark split, in canonical
/// order. Tie-breaking rules elsewhere refer to positions in this order.
pub const TASK_NAMES: [&str; 9] = [
    "Amphibian",
    "Arthropoda",
    "Artificial",
    "Bird",
    "Insect",
    "Mammal",
    "Reptile",
    "Underwater1",
    "Underwater2",
];

#[derive(Error, Debug)]
pub enum MultitaskError {
    #[error("sample category {category:?} maps to no registered task")]
    UnmappedCategory { category: String },
    #[error("duplicate sample id {id:?} in the task partition")]
    DuplicateSample { id: String },
    #[error("unknown task {name:?}")]
    UnknownTask { name: String },
    #[error("task {name:?} listed more than once")]
    DuplicateTask { name: String },
    #[error("{kind} regime requires exactly one target task, got {got}")]
    SingleTargetRequired { kind: &'static str, got: usize },
    #[error("{kind} regime takes no source tasks")]
    SourcesNotAllowed { kind: &'static str },
    #[error("regime has no target tasks")]
    NoTargets,
    #[error("{kind} regime requires a source checkpoint")]
    MissingSourceCheckpoint { kind: &'static str },
    #[error("{kind} regime takes no source checkpoint")]
    UnexpectedSourceCheckpoint { kind: &'static str },
    #[error("registry has no tasks")]
    EmptyRegistry,
    #[error("{role} task list is empty")]
    EmptyTaskList { role: &'static str },
    #[error("source and target task sets overlap: {}", .overlap.join(", "))]
    OverlappingTasks { overlap: Vec<String> },
    #[error("group size {k} must be between 1 and the number of sources ({sources})")]
    GroupSizeOutOfRange { k: usize, sources: usize },
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Archive(#[from] ArchiveError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// One named task: its train and test splits.
#[derive(Clone, Debug)]
pub struct TaskData {
    pub name: String,
    pub train: Vec<ImageSample>,
    pub test: Vec<ImageSample>,
}

/// An ordered collection of tasks whose sample ids are pairwise disjoint.
#[derive(Clone, Debug)]
pub struct TaskRegistry {
    tasks: Vec<TaskData>,
}

impl TaskRegistry {
    /// Builds a registry, rejecting any sample id that appears twice across
    /// all splits of all tasks.
    pub fn from_tasks(tasks: Vec<TaskData>) -> Result<Self, MultitaskError> {
        let mut seen = BTreeSet::new();
        for task in &tasks {
            for sample in task.train.iter().chain(task.test.iter()) {
                if !seen.insert(sample.id.clone()) {
                    return Err(MultitaskError::DuplicateSample {
                        id: sample.id.clone(),
                    });
                }
            }
        }
        Ok(Self { tasks })
    }

    /// A deterministic synthetic registry: one corpus per task name, split
    /// into `n_train` train and `n_test` test samples.
    pub fn synthetic(
        names: &[&str],
        n_train: usize,
        n_test: usize,
        side: usize,
        seed: u64,
    ) -> Self {
        let tasks = names
            .iter()
            .enumerate()
            .map(|(idx, name)| {
                let mut corpus =
                    crate::data::synthetic_corpus(name, n_train + n_test, side, derive_seed(seed, idx as u64));
                let test = corpus.split_off(n_train);
                TaskData {
                    name: (*name).to_string(),
                    train: corpus,
                    test,
                }
            })
            .collect();
        // Ids carry the task name plus a per-task index, so they cannot
        // collide across tasks or splits.
        Self { tasks }
    }

    pub fn tasks(&self) -> &[TaskData] {
        &self.tasks
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn names(&self) -> Vec<&str> {
        self.tasks.iter().map(|t| t.name.as_str()).collect()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.tasks.iter().position(|t| t.name == name)
    }

    pub fn task(&self, name: &str) -> Option<&TaskData> {
        self.index_of(name).map(|i| &self.tasks[i])
    }
}

/// Per-task sample counts produced by [`partition_dataset`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskCount {
    pub name: String,
    pub train: usize,
    pub test: usize,
}

#[derive(Clone, Debug, Default)]
pub struct PartitionReport {
    pub counts: Vec<TaskCount>,
}

impl PartitionReport {
    pub fn total(&self) -> usize {
        self.counts.iter().map(|c| c.train + c.test).sum()
    }
}

/// Assigns every sample to the task named by its category label. A label
/// outside `names` or a repeated sample id is an error, so the resulting
/// splits are pairwise disjoint and cover the input exactly.
pub fn partition_dataset(
    train_pool: Vec<ImageSample>,
    test_pool: Vec<ImageSample>,
    names: &[&str],
) -> Result<(TaskRegistry, PartitionReport), MultitaskError> {
    let mut tasks: Vec<TaskData> = names
        .iter()
        .map(|n| TaskData {
            name: (*n).to_string(),
            train: Vec::new(),
            test: Vec::new(),
        })
        .collect();
    let index_of = |label: &str| names.iter().position(|n| *n == label);
    let category_of = |sample: &ImageSample| -> Result<usize, MultitaskError> {
        let label = sample.task.as_deref().unwrap_or("(unlabeled)");
        index_of(label).ok_or_else(|| MultitaskError::UnmappedCategory {
            category: label.to_string(),
        })
    };
    for sample in train_pool {
        let idx = category_of(&sample)?;
        tasks[idx].train.push(sample);
    }
    for sample in test_pool {
        let idx = category_of(&sample)?;
        tasks[idx].test.push(sample);
    }
    let counts = tasks
        .iter()
        .map(|t| TaskCount {
            name: t.name.clone(),
            train: t.train.len(),
            test: t.test.len(),
        })
        .collect();
    let registry = TaskRegistry::from_tasks(tasks)?;
    Ok((registry, PartitionReport { counts }))
}

/// The four ways of fitting the lightweight groups.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RegimeKind {
    /// Fresh adapter and head on one task.
    SingleTask,
    /// One shared adapter and head fit jointly on several tasks.
    MultiTask,
    /// Start from a source checkpoint, then tune on one target task.
    TransferSingle,
    /// Start from a source checkpoint, then tune jointly on a task group.
    TransferMulti,
}

impl RegimeKind {
    pub fn label(self) -> &'static str {
        match self {
            RegimeKind::SingleTask => "st",
            RegimeKind::MultiTask => "mt",
            RegimeKind::TransferSingle => "ms-st",
            RegimeKind::TransferMulti => "ms-mt",
        }
    }

    pub fn needs_source_checkpoint(self) -> bool {
        matches!(self, RegimeKind::TransferSingle | RegimeKind::TransferMulti)
    }

    fn single_target(self) -> bool {
        matches!(self, RegimeKind::SingleTask | RegimeKind::TransferSingle)
    }
}

/// A training run description: which regime, over which tasks.
#[derive(Clone, Debug)]
pub struct Regime {
    pub kind: RegimeKind,
    /// Provenance of the source checkpoint for the transfer kinds; must be
    /// empty for the from-scratch kinds.
    pub source_tasks: Vec<String>,
    pub target_tasks: Vec<String>,
    /// When true, a transfer run keeps only the adapter from the source
    /// checkpoint and re-initializes the head. Default: head travels with
    /// the adapter.
    pub reinit_head: bool,
}

impl Regime {
    pub fn single(target: &str) -> Self {
        Self {
            kind: RegimeKind::SingleTask,
            source_tasks: Vec::new(),
            target_tasks: alloc::vec![target.to_string()],
            reinit_head: false,
        }
    }

    pub fn multi(targets: &[&str]) -> Self {
        Self {
            kind: RegimeKind::MultiTask,
            source_tasks: Vec::new(),
            target_tasks: targets.iter().map(|t| (*t).to_string()).collect(),
            reinit_head: false,
        }
    }

    pub fn transfer_single(sources: &[&str], target: &str) -> Self {
        Self {
            kind: RegimeKind::TransferSingle,
            source_tasks: sources.iter().map(|t| (*t).to_string()).collect(),
            target_tasks: alloc::vec![target.to_string()],
            reinit_head: false,
        }
    }

    pub fn transfer_multi(sources: &[&str], targets: &[&str]) -> Self {
        Self {
            kind: RegimeKind::TransferMulti,
            source_tasks: sources.iter().map(|t| (*t).to_string()).collect(),
            target_tasks: targets.iter().map(|t| (*t).to_string()).collect(),
            reinit_head: false,
        }
    }

    /// Checks task-name sanity against a registry: targets exist, are not
    /// repeated, single-target kinds get exactly one, and from-scratch kinds
    /// carry no source list.
    pub fn validate(&self, registry: &TaskRegistry) -> Result<(), MultitaskError> {
        if self.target_tasks.is_empty() {
            return Err(MultitaskError::NoTargets);
        }
        if self.kind.single_target() && self.target_tasks.len() != 1 {
            return Err(MultitaskError::SingleTargetRequired {
                kind: self.kind.label(),
                got: self.target_tasks.len(),
            });
        }
        if !self.kind.needs_source_checkpoint() && !self.source_tasks.is_empty() {
            return Err(MultitaskError::SourcesNotAllowed {
                kind: self.kind.label(),
            });
        }
        check_known_and_distinct(&self.target_tasks, registry)?;
        check_known_and_distinct(&self.source_tasks, registry)?;
        Ok(())
    }
}

fn check_known_and_distinct(
    names: &[String],
    registry: &TaskRegistry,
) -> Result<(), MultitaskError> {
    let mut seen = BTreeSet::new();
    for name in names {
        if registry.index_of(name).is_none() {
            return Err(MultitaskError::UnknownTask { name: name.clone() });
        }
        if !seen.insert(name.as_str()) {
            return Err(MultitaskError::DuplicateTask { name: name.clone() });
        }
    }
    Ok(())
}

/// Everything a study needs: the model shape, the optimization settings,
/// and the epoch budgets of the two protocol stages.
#[derive(Clone, Debug)]
pub struct ProtocolConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Epochs for protocol source stages (zero-shot training, joint
    /// pre-training in the cross-task comparison).
    pub source_epochs: usize,
    /// Epochs for per-target adaptation stages.
    pub target_epochs: usize,
    /// Seed for model initialization. Kept apart from the optimization seed
    /// so every run of a study starts from the same weights.
    pub model_seed: u64,
}

impl ProtocolConfig {
    /// A configuration small enough for a workstation: tiny encoder,
    /// 64-pixel inputs.
    pub fn desk(seed: u64) -> Self {
        let train = TrainConfig::desk(seed);
        Self {
            model: ModelConfig::tiny_desk(),
            train,
            source_epochs: 8,
            target_epochs: 8,
            model_seed: derive_seed(seed, 0x6d6f_6465),
        }
    }

    fn build_model(&self) -> Result<(ParamStore, CodModel), ModelError> {
        CodModel::build(self.model.clone(), self.model_seed)
    }
}

/// Score report for one task's test split.
#[derive(Clone, Debug)]
pub struct TaskReport {
    pub task: String,
    pub report: MetricReport,
}

/// Result of one regime run: the tuned lightweight weights, the loss curve,
/// and one score report per target task.
#[derive(Debug)]
pub struct RegimeOutcome {
    pub regime: Regime,
    pub checkpoint: ParamArchive,
    pub loss_curve: Vec<f64>,
    pub reports: Vec<TaskReport>,
    /// Whether the source checkpoint's configuration hash matched ours;
    /// `None` for from-scratch regimes. A mismatch is reported, not fatal.
    pub source_hash_matched: Option<bool>,
}

/// Keeps only the adapter entries of an archive, for transfer runs that
/// re-initialize the head.
fn adapter_entries_only(archive: &ParamArchive) -> ParamArchive {
    let mut filtered = archive.clone();
    filtered.entries.retain(|name, _| name.starts_with("adapter."));
    filtered
}

/// Runs one training regime end to end: seed the weights (from scratch or
/// from a source checkpoint), fit the trainable groups on the regime's
/// train split(s), then score every target task's test split.
pub fn train_regime(
    regime: &Regime,
    registry: &TaskRegistry,
    cfg: &ProtocolConfig,
    source: Option<&ParamArchive>,
) -> Result<RegimeOutcome, MultitaskError> {
    regime.validate(registry)?;
    if regime.kind.needs_source_checkpoint() && source.is_none() {
        return Err(MultitaskError::MissingSourceCheckpoint {
            kind: regime.kind.label(),
        });
    }
    if !regime.kind.needs_source_checkpoint() && source.is_some() {
        return Err(MultitaskError::UnexpectedSourceCheckpoint {
            kind: regime.kind.label(),
        });
    }

    let (mut store, model) = cfg.build_model()?;
    let mut source_hash_matched = None;
    if let Some(archive) = source {
        let archive = if regime.reinit_head {
            adapter_entries_only(archive)
        } else {
            archive.clone()
        };
        let report = archive.restore(&mut store, model.cfg.hash())?;
        source_hash_matched = Some(report.config_hash_matches);
    }

    // Joint kinds train on the plain concatenation of the target splits;
    // the loop reshuffles the combined pool uniformly every epoch, so no
    // extra balancing step is needed here.
    let mut train_samples: Vec<ImageSample> = Vec::new();
    for name in &regime.target_tasks {
        let task = registry.task(name).expect("validated above");
        train_samples.extend(task.train.iter().cloned());
    }

    let result = train_loop(&model, &mut store, &train_samples, &cfg.train)?;

    let mut reports = Vec::with_capacity(regime.target_tasks.len());
    for name in &regime.target_tasks {
        let task = registry.task(name).expect("validated above");
        let report = evaluate_model(&model, &store, &task.test, cfg.train.input_size)?;
        reports.push(TaskReport {
            task: name.clone(),
            report,
        });
    }

    Ok(RegimeOutcome {
        regime: regime.clone(),
        checkpoint: result.final_archive,
        loss_curve: result.loss_curve,
        reports,
        source_hash_matched,
    })
}

/// A failed transfer-matrix cell and why it failed.
#[derive(Clone, Debug)]
pub struct FailedCell {
    pub source: usize,
    pub target: usize,
    pub reason: String,
}

/// Pairwise zero-shot transfer scores. Row `s` holds the scores a model
/// trained only on task `s` achieves on every task's test split, with no
/// further tuning. `normalized` rescales each column by its best source, so
/// the strongest source for each target reads exactly 1.
#[derive(Clone, Debug)]
pub struct TransferMatrix {
    pub tasks: Vec<String>,
    pub raw: Array2<f64>,
    pub normalized: Array2<f64>,
    pub failed: Vec<FailedCell>,
}

impl TransferMatrix {
    /// Builds the matrix from raw scores, normalizing each column by its
    /// largest finite entry. The maximal cell becomes exactly 1 because it
    /// is divided by itself.
    pub fn from_raw(tasks: Vec<String>, raw: Array2<f64>, failed: Vec<FailedCell>) -> Self {
        let (n_sources, n_targets) = raw.dim();
        let mut normalized = raw.clone();
        for t in 0..n_targets {
            let mut col_max = f64::NEG_INFINITY;
            for s in 0..n_sources {
                let v = raw[[s, t]];
                if v.is_finite() && v > col_max {
                    col_max = v;
                }
            }
            if col_max.is_finite() && col_max != 0.0 {
                for s in 0..n_sources {
                    normalized[[s, t]] = raw[[s, t]] / col_max;
                }
            }
        }
        Self {
            tasks,
            raw,
            normalized,
            failed,
        }
    }

    /// True when every cell was produced.
    pub fn is_complete(&self) -> bool {
        self.failed.is_empty()
    }

    /// The strongest source for a target column; ties go to the lower
    /// source index.
    pub fn best_source(&self, target: usize) -> usize {
        let n = self.raw.nrows();
        let mut best = 0usize;
        let mut best_score = f64::NEG_INFINITY;
        for s in 0..n {
            let v = self.raw[[s, target]];
            if v.is_finite() && v > best_score {
                best_score = v;
                best = s;
            }
        }
        best
    }
}

/// Trains one model per source task and scores each on every task's test
/// split without any target-side tuning — the head stays exactly as the
/// source training left it. A failed source training marks that source's
/// whole row as failed cells rather than aborting the study.
pub fn zero_shot_matrix(
    registry: &TaskRegistry,
    cfg: &ProtocolConfig,
) -> Result<TransferMatrix, MultitaskError> {
    let n = registry.len();
    if n == 0 {
        return Err(MultitaskError::EmptyRegistry);
    }
    let mut raw = Array2::<f64>::from_elem((n, n), f64::NAN);
    let mut failed = Vec::new();

    for s in 0..n {
        let mut tc = cfg.train.clone();
        tc.epochs = cfg.source_epochs;
        // Give each source its own optimization stream while keeping the
        // model initialization shared across sources.
        tc.seed = derive_seed(cfg.train.seed, s as u64);
        let (mut store, model) = cfg.build_model()?;
        let trained = train_loop(&model, &mut store, &registry.tasks()[s].train, &tc);
        if let Err(err) = trained {
            let reason = format!("source training failed: {err}");
            for t in 0..n {
                failed.push(FailedCell {
                    source: s,
                    target: t,
                    reason: reason.clone(),
                });
            }
            continue;
        }
        for t in 0..n {
            match evaluate_model(&model, &store, &registry.tasks()[t].test, tc.input_size) {
                Ok(report) => raw[[s, t]] = report.score,
                Err(err) => failed.push(FailedCell {
                    source: s,
                    target: t,
                    reason: format!("evaluation failed: {err}"),
                }),
            }
        }
    }

    let tasks = registry.names().iter().map(|n| n.to_string()).collect();
    Ok(TransferMatrix::from_raw(tasks, raw, failed))
}

/// The sources recommended for one target, strongest first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskGroup {
    pub target: String,
    pub sources: Vec<String>,
}

/// For every target column, the `k` strongest sources in descending score
/// order; equal scores rank the lower task index first. `k` must not exceed
/// the number of sources; `k` equal to it simply returns all of them.
pub fn top_k_groups(
    matrix: &TransferMatrix,
    k: usize,
) -> Result<Vec<TaskGroup>, MultitaskError> {
    let n = matrix.raw.nrows();
    if k == 0 || k > n {
        return Err(MultitaskError::GroupSizeOutOfRange { k, sources: n });
    }
    let mut groups = Vec::with_capacity(matrix.raw.ncols());
    for t in 0..matrix.raw.ncols() {
        let mut order: Vec<usize> = (0..n).collect();
        // Raw and normalized scores rank sources identically whenever the
        // column's best score is positive; ranking on raw also stays
        // correct for degenerate columns, and failed cells sort last.
        let score = |s: usize| {
            let v = matrix.raw[[s, t]];
            if v.is_finite() {
                v
            } else {
                f64::NEG_INFINITY
            }
        };
        // Stable sort on descending score keeps equal scores in ascending
        // index order.
        order.sort_by(|&a, &b| score(b).partial_cmp(&score(a)).expect("finite keys"));
        groups.push(TaskGroup {
            target: matrix.tasks[t].clone(),
            sources: order[..k]
                .iter()
                .map(|&s| matrix.tasks[s].clone())
                .collect(),
        });
    }
    Ok(groups)
}

/// One target's outcome in the cross-task comparison.
#[derive(Clone, Debug)]
pub struct CrossTaskRow {
    pub target: String,
    /// Adapted from the jointly pre-trained source checkpoint.
    pub adapted: MetricReport,
    /// Trained from scratch on the target alone, same seed and budget.
    pub baseline: MetricReport,
}

#[derive(Clone, Debug)]
pub struct CrossTaskReport {
    pub sources: Vec<String>,
    pub rows: Vec<CrossTaskRow>,
}

/// Pre-trains jointly on the source group, then adapts to each target and
/// compares against a from-scratch single-task run with the same seed and
/// epoch budget. Sources and targets must be disjoint.
pub fn cross_task_protocol(
    source_names: &[&str],
    target_names: &[&str],
    registry: &TaskRegistry,
    cfg: &ProtocolConfig,
) -> Result<CrossTaskReport, MultitaskError> {
    if source_names.is_empty() {
        return Err(MultitaskError::EmptyTaskList { role: "source" });
    }
    if target_names.is_empty() {
        return Err(MultitaskError::EmptyTaskList { role: "target" });
    }
    let overlap: Vec<String> = source_names
        .iter()
        .filter(|s| target_names.contains(s))
        .map(|s| (*s).to_string())
        .collect();
    if !overlap.is_empty() {
        return Err(MultitaskError::OverlappingTasks { overlap });
    }

    let mut stage1 = cfg.clone();
    stage1.train.epochs = cfg.source_epochs;
    stage1.train.seed = derive_seed(cfg.train.seed, 0x736f_7572);
    let joint = train_regime(&Regime::multi(source_names), registry, &stage1, None)?;

    let mut rows = Vec::with_capacity(target_names.len());
    for (i, target) in target_names.iter().enumerate() {
        let mut stage2 = cfg.clone();
        stage2.train.epochs = cfg.target_epochs;
        // Adapted and baseline share one seed so the comparison is matched.
        stage2.train.seed = derive_seed(cfg.train.seed, 0x7461_7267 ^ i as u64);
        let adapted = train_regime(
            &Regime::transfer_single(source_names, target),
            registry,
            &stage2,
            Some(&joint.checkpoint),
        )?;
        let baseline = train_regime(&Regime::single(target), registry, &stage2, None)?;
        rows.push(CrossTaskRow {
            target: (*target).to_string(),
            adapted: adapted.reports[0].report.clone(),
            baseline: baseline.reports[0].report.clone(),
        });
    }

    Ok(CrossTaskReport {
        sources: source_names.iter().map(|s| (*s).to_string()).collect(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_corpus;
    use ndarray::array;

    fn desk_cfg(seed: u64, epochs: usize) -> ProtocolConfig {
        let mut cfg = ProtocolConfig::desk(seed);
        cfg.train.epochs = epochs;
        cfg.source_epochs = epochs;
        cfg.target_epochs = epochs;
        cfg
    }

    fn tiny_registry(names: &[&str], seed: u64) -> TaskRegistry {
        TaskRegistry::synthetic(names, 4, 2, 64, seed)
    }

    fn archive_max_diff(a: &ParamArchive, b: &ParamArchive) -> f64 {
        assert_eq!(
            a.entries.keys().collect::<Vec<_>>(),
            b.entries.keys().collect::<Vec<_>>()
        );
        let mut worst = 0.0f64;
        for (name, va) in &a.entries {
            let vb = &b.entries[name];
            for (x, y) in va.iter().zip(vb.iter()) {
                worst = worst.max((*x as f64 - *y as f64).abs());
            }
        }
        worst
    }

    #[test]
    fn the_benchmark_task_list_is_fixed_and_distinct() {
        assert_eq!(TASK_NAMES.len(), 9);
        let set: BTreeSet<_> = TASK_NAMES.iter().collect();
        assert_eq!(set.len(), 9);
        assert_eq!(TASK_NAMES[0], "Amphibian");
        assert_eq!(TASK_NAMES[8], "Underwater2");
    }

    #[test]
    fn partition_assigns_samples_by_category_and_counts_them() {
        let names = ["Amphibian", "Bird", "Mammal"];
        let mut train_pool = Vec::new();
        let mut test_pool = Vec::new();
        for (i, name) in names.iter().enumerate() {
            let mut corpus = synthetic_corpus(name, 3 + i, 32, 7);
            test_pool.extend(corpus.split_off(2 + i));
            train_pool.extend(corpus);
        }
        let (registry, report) = partition_dataset(train_pool, test_pool, &names).unwrap();
        assert_eq!(registry.names(), ["Amphibian", "Bird", "Mammal"]);
        assert_eq!(
            report.counts,
            [
                TaskCount {
                    name: "Amphibian".into(),
                    train: 2,
                    test: 1
                },
                TaskCount {
                    name: "Bird".into(),
                    train: 3,
                    test: 1
                },
                TaskCount {
                    name: "Mammal".into(),
                    train: 4,
                    test: 1
                },
            ]
        );
        assert_eq!(report.total(), 12);
    }

    #[test]
    fn partition_rejects_an_unmapped_category_by_name() {
        let stray = synthetic_corpus("Fungus", 1, 32, 7);
        let err = partition_dataset(stray, Vec::new(), &["Amphibian"]).unwrap_err();
        assert!(matches!(
            &err,
            MultitaskError::UnmappedCategory { category } if category == "Fungus"
        ));
        assert!(format!("{err}").contains("Fungus"));
    }

    #[test]
    fn partition_rejects_duplicate_sample_ids() {
        let mut pool = synthetic_corpus("Amphibian", 2, 32, 7);
        let dup = pool[0].id.clone();
        pool[1].id = dup;
        let err = partition_dataset(pool, Vec::new(), &["Amphibian"]).unwrap_err();
        assert!(matches!(err, MultitaskError::DuplicateSample { id } if id == "Amphibian-0000"));
    }

    #[test]
    fn regimes_reject_malformed_task_lists() {
        let registry = tiny_registry(&["Amphibian", "Bird"], 3);
        let err = Regime::multi(&[]).validate(&registry).unwrap_err();
        assert!(matches!(err, MultitaskError::NoTargets));

        let mut two_targets = Regime::single("Amphibian");
        two_targets.target_tasks.push("Bird".into());
        let err = two_targets.validate(&registry).unwrap_err();
        assert!(matches!(
            err,
            MultitaskError::SingleTargetRequired { kind: "st", got: 2 }
        ));

        let err = Regime::single("Lichen").validate(&registry).unwrap_err();
        assert!(matches!(err, MultitaskError::UnknownTask { name } if name == "Lichen"));

        let err = Regime::multi(&["Bird", "Bird"])
            .validate(&registry)
            .unwrap_err();
        assert!(matches!(err, MultitaskError::DuplicateTask { name } if name == "Bird"));

        let mut stray_sources = Regime::single("Amphibian");
        stray_sources.source_tasks.push("Bird".into());
        let err = stray_sources.validate(&registry).unwrap_err();
        assert!(matches!(err, MultitaskError::SourcesNotAllowed { kind: "st" }));
    }

    #[test]
    fn checkpoint_presence_must_match_the_regime_kind() {
        let registry = tiny_registry(&["Amphibian", "Bird"], 3);
        let cfg = desk_cfg(5, 0);
        let err = train_regime(
            &Regime::transfer_single(&["Amphibian"], "Bird"),
            &registry,
            &cfg,
            None,
        )
        .unwrap_err();
        assert!(matches!(
            err,
            MultitaskError::MissingSourceCheckpoint { kind: "ms-st" }
        ));

        let scratch = train_regime(&Regime::single("Amphibian"), &registry, &cfg, None).unwrap();
        let err = train_regime(
            &Regime::single("Bird"),
            &registry,
            &cfg,
            Some(&scratch.checkpoint),
        )
        .unwrap_err();
        assert!(matches!(
            err,
            MultitaskError::UnexpectedSourceCheckpoint { kind: "st" }
        ));
    }

    #[test]
    fn joint_training_on_one_task_matches_the_single_task_run() {
        let registry = tiny_registry(&["Amphibian", "Bird"], 11);
        let cfg = desk_cfg(11, 2);
        let single = train_regime(&Regime::single("Amphibian"), &registry, &cfg, None).unwrap();
        let joint = train_regime(&Regime::multi(&["Amphibian"]), &registry, &cfg, None).unwrap();
        let diff = archive_max_diff(&single.checkpoint, &joint.checkpoint);
        assert!(diff <= 1e-6, "parameter divergence {diff}");
        assert_eq!(
            single.reports[0].report.score,
            joint.reports[0].report.score
        );
    }

    #[test]
    fn transfer_runs_start_exactly_at_the_source_checkpoint() {
        let registry = tiny_registry(&["Amphibian", "Bird"], 13);
        let mut cfg = desk_cfg(13, 1);
        let source = train_regime(&Regime::single("Amphibian"), &registry, &cfg, None).unwrap();

        // Zero target epochs: the outcome checkpoint is the starting point.
        cfg.train.epochs = 0;
        let start = train_regime(
            &Regime::transfer_single(&["Amphibian"], "Bird"),
            &registry,
            &cfg,
            Some(&source.checkpoint),
        )
        .unwrap();
        assert_eq!(start.source_hash_matched, Some(true));
        assert_eq!(archive_max_diff(&source.checkpoint, &start.checkpoint), 0.0);
    }

    #[test]
    fn head_reinit_keeps_the_adapter_and_drops_the_head() {
        let registry = tiny_registry(&["Amphibian", "Bird"], 17);
        let mut cfg = desk_cfg(17, 1);
        let source = train_regime(&Regime::single("Amphibian"), &registry, &cfg, None).unwrap();

        cfg.train.epochs = 0;
        let mut regime = Regime::transfer_single(&["Amphibian"], "Bird");
        regime.reinit_head = true;
        let start = train_regime(&regime, &registry, &cfg, Some(&source.checkpoint)).unwrap();

        let mut adapter_diff = 0.0f64;
        let mut head_diff = 0.0f64;
        for (name, va) in &source.checkpoint.entries {
            let vb = &start.checkpoint.entries[name];
            let worst = va
                .iter()
                .zip(vb.iter())
                .map(|(x, y)| (*x as f64 - *y as f64).abs())
                .fold(0.0f64, f64::max);
            if name.starts_with("adapter.") {
                adapter_diff = adapter_diff.max(worst);
            } else {
                head_diff = head_diff.max(worst);
            }
        }
        assert_eq!(adapter_diff, 0.0);
        assert!(head_diff > 0.0, "head should have been re-initialized");
    }

    #[test]
    fn zero_shot_matrix_scores_every_pair_and_scales_by_the_best_source() {
        let registry = tiny_registry(&["Amphibian", "Bird", "Mammal"], 19);
        let cfg = desk_cfg(19, 1);
        let matrix = zero_shot_matrix(&registry, &cfg).unwrap();
        assert!(matrix.is_complete());
        assert_eq!(matrix.raw.dim(), (3, 3));
        for t in 0..3 {
            let best = matrix.best_source(t);
            let col_max = matrix.raw[[best, t]];
            assert!(col_max.is_finite());
            // The best source divides by itself: exactly one.
            assert_eq!(matrix.normalized[[best, t]], 1.0);
            let ones = (0..3)
                .filter(|&s| matrix.normalized[[s, t]] == 1.0)
                .count();
            assert_eq!(ones, 1, "column {t} should have a unique best source");
            for s in 0..3 {
                let expect = matrix.raw[[s, t]] / col_max;
                assert!((matrix.normalized[[s, t]] - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn column_normalization_matches_hand_computed_ratios() {
        let tasks: Vec<String> = ["A", "B", "C"].iter().map(|s| s.to_string()).collect();
        let raw = array![[2.6], [2.4], [2.0]]
            .into_shape_with_order((3, 1))
            .unwrap();
        let matrix = TransferMatrix::from_raw(tasks, raw, Vec::new());
        assert_eq!(matrix.normalized[[0, 0]], 1.0);
        assert!((matrix.normalized[[1, 0]] - 0.923_076_923_076_923).abs() < 1e-12);
        assert!((matrix.normalized[[2, 0]] - 0.769_230_769_230_769).abs() < 1e-12);
    }

    #[test]
    fn top_k_ranks_sources_and_breaks_ties_toward_lower_index() {
        let tasks: Vec<String> = ["A", "B", "C", "D"].iter().map(|s| s.to_string()).collect();
        let mut raw = Array2::<f64>::zeros((4, 4));
        // Target column 0 carries the interesting scores.
        raw[[0, 0]] = 0.9;
        raw[[1, 0]] = 1.0;
        raw[[2, 0]] = 0.8;
        raw[[3, 0]] = 0.5;
        let matrix = TransferMatrix::from_raw(tasks.clone(), raw.clone(), Vec::new());
        let groups = top_k_groups(&matrix, 3).unwrap();
        assert_eq!(groups[0].target, "A");
        assert_eq!(groups[0].sources, ["B", "A", "C"]);

        // A tie between A and C ranks A first because its index is lower.
        raw[[2, 0]] = 0.9;
        let tied = TransferMatrix::from_raw(tasks, raw, Vec::new());
        let groups = top_k_groups(&tied, 3).unwrap();
        assert_eq!(groups[0].sources, ["B", "A", "C"]);

        let all = top_k_groups(&tied, 4).unwrap();
        assert_eq!(all[0].sources.len(), 4);
        let err = top_k_groups(&tied, 5).unwrap_err();
        assert!(matches!(
            err,
            MultitaskError::GroupSizeOutOfRange { k: 5, sources: 4 }
        ));
        let err = top_k_groups(&tied, 0).unwrap_err();
        assert!(matches!(err, MultitaskError::GroupSizeOutOfRange { k: 0, .. }));
    }

    #[test]
    fn cross_task_rejects_overlapping_source_and_target_sets() {
        let registry = tiny_registry(&["Amphibian", "Bird", "Mammal"], 23);
        let cfg = desk_cfg(23, 1);
        let err = cross_task_protocol(
            &["Amphibian", "Bird"],
            &["Bird", "Mammal"],
            &registry,
            &cfg,
        )
        .unwrap_err();
        assert!(matches!(&err, MultitaskError::OverlappingTasks { overlap } if overlap == &["Bird"]));
        assert!(format!("{err}").contains("Bird"));

        let err = cross_task_protocol(&[], &["Bird"], &registry, &cfg).unwrap_err();
        assert!(matches!(err, MultitaskError::EmptyTaskList { role: "source" }));
    }

    #[test]
    fn cross_task_protocol_is_deterministic() {
        let registry = TaskRegistry::synthetic(&["Amphibian", "Bird", "Mammal"], 2, 1, 64, 29);
        let cfg = desk_cfg(29, 1);
        let run = |cfg: &ProtocolConfig| {
            cross_task_protocol(&["Amphibian", "Bird"], &["Mammal"], &registry, cfg).unwrap()
        };
        let first = run(&cfg);
        let second = run(&cfg);
        assert_eq!(first.rows.len(), 1);
        assert_eq!(first.rows[0].target, "Mammal");
        assert!(first.rows[0].adapted.score.is_finite());
        assert!(first.rows[0].baseline.score.is_finite());
        assert_eq!(first.rows[0].adapted.score, second.rows[0].adapted.score);
        assert_eq!(first.rows[0].baseline.score, second.rows[0].baseline.score);
    }
}
