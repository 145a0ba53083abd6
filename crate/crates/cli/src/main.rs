//! `camopad` — train, evaluate, and study camouflaged-object segmentation
//! models built around a frozen encoder with a lightweight adapter.
//!
//! Subcommands:
//! - `train`           run one training regime and write its artifacts
//! - `eval`            score a directory of prediction maps against masks
//! - `transfer-matrix` compute the zero-shot task-transfer score matrix
//! - `group`           pick the top-k source tasks per target from a matrix
//! - `report`          collect run directories into a score grid
//! - `synth`           generate a synthetic task dataset on disk

mod checkpoint;
mod config;
mod dataset;
mod report;

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use camopad_core::data::preprocess;
use camopad_core::metrics;
use camopad_core::model::CodModel;
use camopad_core::multitask::{
    top_k_groups, train_regime, zero_shot_matrix, Regime, RegimeKind, RegimeOutcome,
    TaskRegistry, TransferMatrix,
};
use camopad_core::autograd::Graph;
use camopad_core::nn::Ctx;
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::RunSpec;
use crate::report::{EvalIssue, EvalReport, ScoreGrid, ScoreRow};

#[derive(Parser)]
#[command(name = "camopad", version, about = "Camouflaged-object detection with adapter-tuned frozen encoders")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train one regime on the configured task registry.
    Train(TrainArgs),
    /// Score saved prediction maps against ground-truth masks.
    Eval(EvalArgs),
    /// Train one model per task and score all task pairs zero-shot.
    TransferMatrix(MatrixArgs),
    /// Derive the strongest source groups from a transfer matrix.
    Group(GroupArgs),
    /// Summarize run directories into a per-task score grid.
    Report(ReportArgs),
    /// Write a synthetic task dataset as image/mask directories.
    Synth(SynthArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum RegimeArg {
    /// Fresh adapter and head on one task.
    St,
    /// One shared adapter and head fit jointly on the listed tasks.
    Mt,
    /// Start from a source checkpoint, tune on one task.
    MsSt,
    /// Start from a source checkpoint, tune jointly on the listed tasks.
    MsMt,
}

impl RegimeArg {
    fn kind(self) -> RegimeKind {
        match self {
            RegimeArg::St => RegimeKind::SingleTask,
            RegimeArg::Mt => RegimeKind::MultiTask,
            RegimeArg::MsSt => RegimeKind::TransferSingle,
            RegimeArg::MsMt => RegimeKind::TransferMulti,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Run configuration file (flat key = value lines).
    #[arg(long)]
    config: PathBuf,
    /// Training regime.
    #[arg(long, value_enum)]
    regime: RegimeArg,
    /// Target task names, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    tasks: Vec<String>,
    /// Source checkpoint for the ms-st / ms-mt regimes.
    #[arg(long)]
    source_ckpt: Option<PathBuf>,
    /// Re-initialize the head instead of loading it from the checkpoint.
    #[arg(long, default_value_t = false)]
    reinit_head: bool,
    /// Output directory (default: runs/<regime>-<tasks>).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory of grayscale prediction maps.
    #[arg(long)]
    pred: PathBuf,
    /// Directory of ground-truth masks.
    #[arg(long)]
    gt: PathBuf,
    /// Report destination (JSON; a .csv sibling is written too).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MatrixArgs {
    /// Run configuration file; its task list defines rows and columns.
    #[arg(long)]
    config: PathBuf,
    /// Matrix destination (CSV; .normalized.csv and .png siblings are
    /// written too).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GroupArgs {
    /// Transfer matrix CSV produced by transfer-matrix.
    #[arg(long)]
    matrix: PathBuf,
    /// Number of source tasks to keep per target.
    #[arg(long)]
    k: usize,
    /// Groups destination (JSON).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Directory containing run directories (each with an eval.json).
    #[arg(long)]
    runs: PathBuf,
    /// Grid CSV destination (default: <runs>/score_grid.csv).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    /// Task names, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    tasks: Vec<String>,
    #[arg(long, default_value_t = 8)]
    train_per_task: usize,
    #[arg(long, default_value_t = 4)]
    test_per_task: usize,
    /// Square image side in pixels (at least 32, divisible by 4).
    #[arg(long, default_value_t = 64)]
    side: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Dataset root to create.
    #[arg(long)]
    out: PathBuf,
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Train(args) => cmd_train(args),
        Cmd::Eval(args) => cmd_eval(args),
        Cmd::TransferMatrix(args) => cmd_matrix(args),
        Cmd::Group(args) => cmd_group(args),
        Cmd::Report(args) => cmd_report(args),
        Cmd::Synth(args) => cmd_synth(args),
    };
    if let Err(err) = result {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let spec = RunSpec::from_path(&args.config)?;
    let registry = dataset::build_registry(&spec)?;
    let regime = Regime {
        kind: args.regime.kind(),
        source_tasks: Vec::new(),
        target_tasks: args.tasks.clone(),
        reinit_head: args.reinit_head,
    };
    let source = match &args.source_ckpt {
        Some(path) => Some(checkpoint::load(path)?),
        None => None,
    };

    let out = args.out.unwrap_or_else(|| {
        PathBuf::from("runs").join(format!(
            "{}-{}",
            regime.kind.label(),
            args.tasks.join("-").to_lowercase()
        ))
    });
    std::fs::create_dir_all(&out)
        .with_context(|| format!("creating {}", out.display()))?;

    let outcome = train_regime(&regime, &registry, &spec.protocol, source.as_ref())?;
    if outcome.source_hash_matched == Some(false) {
        eprintln!(
            "warning: source checkpoint was produced by a different model \
             configuration; matching parameters were loaded anyway"
        );
    }

    write_run_artifacts(&out, &spec, &registry, &outcome)?;

    for report in &outcome.reports {
        println!(
            "{}: S={:.4} E={:.4} Fw={:.4} MAE={:.4} Score={:.4} (n={})",
            report.task,
            report.report.s_alpha,
            report.report.e_phi,
            report.report.f_w_beta,
            report.report.mae,
            report.report.score,
            report.report.n_samples
        );
    }
    println!("artifacts written to {}", out.display());
    Ok(())
}

/// Writes everything a finished run leaves behind: checkpoint, loss curve,
/// per-task metrics, and prediction maps for every target test sample.
fn write_run_artifacts(
    out: &Path,
    spec: &RunSpec,
    registry: &TaskRegistry,
    outcome: &RegimeOutcome,
) -> Result<()> {
    checkpoint::save(&out.join("checkpoint.cpad"), &outcome.checkpoint)?;

    let mut curve = String::from("epoch,loss\n");
    for (i, v) in outcome.loss_curve.iter().enumerate() {
        curve.push_str(&format!("{i},{v}\n"));
    }
    std::fs::write(out.join("loss_curve.csv"), curve)?;

    let rows: Vec<ScoreRow> = outcome
        .reports
        .iter()
        .map(|r| ScoreRow::new(&r.task, &r.report))
        .collect();
    report::write_json(&out.join("eval.json"), &rows)?;
    report::write_score_csv(&out.join("eval.csv"), &rows)?;

    // Rebuild the model from the same seed, load the tuned weights, and
    // save one prediction map per target test sample.
    let (mut store, model) = CodModel::build(
        spec.protocol.model.clone(),
        spec.protocol.model_seed,
    )?;
    outcome.checkpoint.restore(&mut store, model.cfg.hash())?;
    for task_name in &outcome.regime.target_tasks {
        let task = registry
            .task(task_name)
            .context("trained task vanished from the registry")?;
        let dir = out.join("predictions").join(task_name);
        for sample in &task.test {
            let input = preprocess(sample, spec.protocol.train.input_size);
            let g = Graph::new();
            let cx = Ctx::new(&g, &store);
            let map = model.predict(&cx, &input.image, sample.original_size)?;
            let path = dir.join(format!("{}.png", sample.id));
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent)?;
            }
            dataset::save_gray(&path, &map.quantized())?;
        }
    }
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    if !args.gt.is_dir() {
        bail!("{} is not a directory", args.gt.display());
    }
    if !args.pred.is_dir() {
        bail!("{} is not a directory", args.pred.display());
    }
    let mut stems: Vec<String> = std::fs::read_dir(&args.gt)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .map(|e| ["png", "jpg", "jpeg"].contains(&e.to_ascii_lowercase().as_str()))
                .unwrap_or(false)
        })
        .filter_map(|p| p.file_stem().map(|s| s.to_string_lossy().into_owned()))
        .collect();
    stems.sort();
    if stems.is_empty() {
        bail!("{} contains no mask images", args.gt.display());
    }

    let mut pairs = Vec::new();
    let mut issues: Vec<EvalIssue> = Vec::new();
    for stem in &stems {
        let gt_path = find_in(&args.gt, stem).expect("stem came from this directory");
        let Some(pred_path) = find_in(&args.pred, stem) else {
            issues.push(EvalIssue {
                stem: stem.clone(),
                reason: "no prediction map".into(),
            });
            continue;
        };
        let gt = dataset::binarize_mask(&dataset::load_gray(&gt_path)?);
        let pred = dataset::load_gray(&pred_path)?;
        if pred.dim() != gt.dim() {
            issues.push(EvalIssue {
                stem: stem.clone(),
                reason: format!(
                    "prediction is {}x{} but mask is {}x{}",
                    pred.dim().0,
                    pred.dim().1,
                    gt.dim().0,
                    gt.dim().1
                ),
            });
            continue;
        }
        pairs.push((pred, gt.map(|&v| v as f64)));
    }
    if pairs.is_empty() {
        bail!(
            "no valid prediction/mask pairs ({} issues, e.g. {})",
            issues.len(),
            issues
                .first()
                .map(|i| format!("{}: {}", i.stem, i.reason))
                .unwrap_or_default()
        );
    }

    let metrics = metrics::evaluate_samples(&pairs)?;
    let eval = EvalReport {
        s_alpha: metrics.s_alpha,
        e_phi: metrics.e_phi,
        f_w_beta: metrics.f_w_beta,
        mae: metrics.mae,
        score: metrics.score,
        n_samples: metrics.n_samples,
        issues,
    };
    report::write_json(&args.out, &eval)?;
    let csv_path = args.out.with_extension("csv");
    report::write_score_csv(
        &csv_path,
        &[ScoreRow {
            task: "all".into(),
            s_alpha: eval.s_alpha,
            e_phi: eval.e_phi,
            f_w_beta: eval.f_w_beta,
            mae: eval.mae,
            score: eval.score,
            n_samples: eval.n_samples,
        }],
    )?;
    println!(
        "S={:.4} E={:.4} Fw={:.4} MAE={:.4} Score={:.4} over {} pairs ({} skipped)",
        eval.s_alpha,
        eval.e_phi,
        eval.f_w_beta,
        eval.mae,
        eval.score,
        eval.n_samples,
        eval.issues.len()
    );
    Ok(())
}

fn find_in(dir: &Path, stem: &str) -> Option<PathBuf> {
    ["png", "jpg", "jpeg"]
        .iter()
        .map(|ext| dir.join(format!("{stem}.{ext}")))
        .find(|p| p.is_file())
}

fn cmd_matrix(args: MatrixArgs) -> Result<()> {
    let spec = RunSpec::from_path(&args.config)?;
    let registry = dataset::build_registry(&spec)?;
    let matrix = zero_shot_matrix(&registry, &spec.protocol)?;
    write_matrix_files(&args.out, &matrix)?;
    if !matrix.is_complete() {
        for cell in &matrix.failed {
            eprintln!(
                "warning: cell {} -> {} failed: {}",
                matrix.tasks[cell.source], matrix.tasks[cell.target], cell.reason
            );
        }
        eprintln!(
            "warning: matrix is incomplete ({} failed cells)",
            matrix.failed.len()
        );
    }
    println!("matrix written to {}", args.out.display());
    Ok(())
}

fn write_matrix_files(out: &Path, matrix: &TransferMatrix) -> Result<()> {
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    report::write_matrix_csv(out, &matrix.tasks, &matrix.raw)?;
    let stem = out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "matrix".into());
    let sibling = |suffix: &str| out.with_file_name(format!("{stem}{suffix}"));
    report::write_matrix_csv(&sibling(".normalized.csv"), &matrix.tasks, &matrix.normalized)?;
    report::write_matrix_heatmap(&sibling(".png"), &matrix.normalized)?;
    if !matrix.is_complete() {
        report::write_failed_cells_csv(&sibling(".failed.csv"), &matrix.tasks, &matrix.failed)?;
    }
    Ok(())
}

fn cmd_group(args: GroupArgs) -> Result<()> {
    let (tasks, raw) = report::read_matrix_csv(&args.matrix)?;
    let matrix = TransferMatrix::from_raw(tasks, raw, Vec::new());
    let groups = top_k_groups(&matrix, args.k)?;
    report::write_groups_json(&args.out, &groups)?;
    for group in &groups {
        println!("{}: {}", group.target, group.sources.join(", "));
    }
    Ok(())
}

fn cmd_report(args: ReportArgs) -> Result<()> {
    let grid = ScoreGrid::from_runs_dir(&args.runs)?;
    if grid.runs.is_empty() {
        bail!(
            "{} contains no run directories with an eval.json",
            args.runs.display()
        );
    }
    print!("{}", grid.render_text());
    let out = args
        .out
        .unwrap_or_else(|| args.runs.join("score_grid.csv"));
    grid.write_csv(&out)?;
    println!("grid written to {}", out.display());
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    if args.side < 32 || args.side % 4 != 0 {
        bail!(
            "--side must be at least 32 and divisible by 4, got {}",
            args.side
        );
    }
    let names: Vec<&str> = args.tasks.iter().map(|s| s.as_str()).collect();
    let registry = TaskRegistry::synthetic(
        &names,
        args.train_per_task,
        args.test_per_task,
        args.side,
        args.seed,
    );
    for task in registry.tasks() {
        let dir = args.out.join(&task.name);
        dataset::write_split(&dir.join("train"), &task.train)?;
        dataset::write_split(&dir.join("test"), &task.test)?;
        println!(
            "{}: {} train / {} test samples under {}",
            task.name,
            task.train.len(),
            task.test.len(),
            dir.display()
        );
    }
    Ok(())
}
