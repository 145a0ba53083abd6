//! Result files: evaluation reports, transfer matrices, task groups, and
//! the cross-run score grid.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use camopad_core::metrics::MetricReport;
use camopad_core::multitask::{FailedCell, TaskGroup};
use image::RgbImage;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

/// One task's metrics, as serialized into `eval.json` / `eval.csv`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScoreRow {
    pub task: String,
    pub s_alpha: f64,
    pub e_phi: f64,
    pub f_w_beta: f64,
    pub mae: f64,
    pub score: f64,
    pub n_samples: usize,
}

impl ScoreRow {
    pub fn new(task: &str, report: &MetricReport) -> Self {
        Self {
            task: task.to_string(),
            s_alpha: report.s_alpha,
            e_phi: report.e_phi,
            f_w_beta: report.f_w_beta,
            mae: report.mae,
            score: report.score,
            n_samples: report.n_samples,
        }
    }
}

/// A prediction/mask pair the `eval` command had to skip, and why.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalIssue {
    pub stem: String,
    pub reason: String,
}

/// Output of the `eval` command: aggregate metrics over the valid pairs
/// plus everything that could not be scored.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub s_alpha: f64,
    pub e_phi: f64,
    pub f_w_beta: f64,
    pub mae: f64,
    pub score: f64,
    pub n_samples: usize,
    pub issues: Vec<EvalIssue>,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn read_score_rows(path: &Path) -> Result<Vec<ScoreRow>> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_str(&text)
        .with_context(|| format!("parsing {}", path.display()))?)
}

const SCORE_HEADER: &str = "task,s_alpha,e_phi,f_w_beta,mae,score,n_samples";

pub fn write_score_csv(path: &Path, rows: &[ScoreRow]) -> Result<()> {
    let mut text = String::from(SCORE_HEADER);
    text.push('\n');
    for r in rows {
        text.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.task, r.s_alpha, r.e_phi, r.f_w_beta, r.mae, r.score, r.n_samples
        ));
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Writes a score matrix as CSV: header row of target names, one row per
/// source, first column the source name. Missing cells print as NaN.
pub fn write_matrix_csv(path: &Path, tasks: &[String], matrix: &Array2<f64>) -> Result<()> {
    let mut text = String::from("task");
    for t in tasks {
        text.push(',');
        text.push_str(t);
    }
    text.push('\n');
    for (s, name) in tasks.iter().enumerate() {
        text.push_str(name);
        for t in 0..tasks.len() {
            text.push(',');
            text.push_str(&format!("{}", matrix[[s, t]]));
        }
        text.push('\n');
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Reads a matrix written by [`write_matrix_csv`].
pub fn read_matrix_csv(path: &Path) -> Result<(Vec<String>, Array2<f64>)> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = text.lines().enumerate();
    let Some((_, header)) = lines.next() else {
        bail!("{}: empty matrix file", path.display());
    };
    let tasks: Vec<String> = header.split(',').skip(1).map(|s| s.to_string()).collect();
    if tasks.is_empty() {
        bail!("{}: header row has no task names", path.display());
    }
    let n = tasks.len();
    let mut matrix = Array2::<f64>::from_elem((n, n), f64::NAN);
    let mut row = 0usize;
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        if row >= n {
            bail!("{}: more rows than header tasks", path.display());
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != n + 1 {
            bail!(
                "{} line {}: expected {} cells, found {}",
                path.display(),
                i + 1,
                n + 1,
                cells.len()
            );
        }
        if cells[0] != tasks[row] {
            bail!(
                "{} line {}: row name {:?} does not match header order ({:?})",
                path.display(),
                i + 1,
                cells[0],
                tasks[row]
            );
        }
        for (t, cell) in cells[1..].iter().enumerate() {
            matrix[[row, t]] = cell.parse::<f64>().with_context(|| {
                format!("{} line {}: bad number {:?}", path.display(), i + 1, cell)
            })?;
        }
        row += 1;
    }
    if row != n {
        bail!(
            "{}: expected {} rows, found {}",
            path.display(),
            n,
            row
        );
    }
    Ok((tasks, matrix))
}

pub fn write_failed_cells_csv(
    path: &Path,
    tasks: &[String],
    failed: &[FailedCell],
) -> Result<()> {
    let mut text = String::from("source,target,reason\n");
    for cell in failed {
        text.push_str(&format!(
            "{},{},{}\n",
            tasks[cell.source],
            tasks[cell.target],
            cell.reason.replace(',', ";").replace('\n', " ")
        ));
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Maps a normalized score to a dark-blue → teal → yellow ramp; cells that
/// were never produced render gray.
fn heat_color(v: f64) -> [u8; 3] {
    if !v.is_finite() {
        return [128, 128, 128];
    }
    let v = v.clamp(0.0, 1.0);
    let lerp = |a: f64, b: f64, t: f64| (a + (b - a) * t).round() as u8;
    if v < 0.5 {
        let t = v / 0.5;
        [lerp(48.0, 33.0, t), lerp(18.0, 145.0, t), lerp(59.0, 140.0, t)]
    } else {
        let t = (v - 0.5) / 0.5;
        [
            lerp(33.0, 253.0, t),
            lerp(145.0, 231.0, t),
            lerp(140.0, 37.0, t),
        ]
    }
}

/// Renders the normalized matrix as a cell-per-pair heatmap image.
pub fn write_matrix_heatmap(path: &Path, matrix: &Array2<f64>) -> Result<()> {
    const CELL: u32 = 48;
    let (rows, cols) = matrix.dim();
    let img = RgbImage::from_fn(cols as u32 * CELL, rows as u32 * CELL, |x, y| {
        let (s, t) = ((y / CELL) as usize, (x / CELL) as usize);
        image::Rgb(heat_color(matrix[[s, t]]))
    });
    img.save(path)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Serializes task groups as a JSON object mapping each target to its
/// recommended sources, strongest first.
pub fn write_groups_json(path: &Path, groups: &[TaskGroup]) -> Result<()> {
    let map: BTreeMap<&str, &[String]> = groups
        .iter()
        .map(|g| (g.target.as_str(), g.sources.as_slice()))
        .collect();
    write_json(path, &map)
}

/// Scores collected from several run directories: rows are runs, columns
/// are tasks, cells are the combined score.
#[derive(Debug, Default)]
pub struct ScoreGrid {
    pub tasks: Vec<String>,
    /// (run name, task → score)
    pub runs: Vec<(String, BTreeMap<String, f64>)>,
}

impl ScoreGrid {
    pub fn from_runs_dir(dir: &Path) -> Result<Self> {
        let mut grid = ScoreGrid::default();
        let mut names: Vec<_> = fs::read_dir(dir)
            .with_context(|| format!("listing {}", dir.display()))?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().join("eval.json").is_file())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .collect();
        names.sort();
        let mut tasks: Vec<String> = Vec::new();
        for name in names {
            let rows = read_score_rows(&dir.join(&name).join("eval.json"))?;
            let mut scores = BTreeMap::new();
            for row in rows {
                if !tasks.contains(&row.task) {
                    tasks.push(row.task.clone());
                }
                scores.insert(row.task, row.score);
            }
            grid.runs.push((name, scores));
        }
        tasks.sort();
        grid.tasks = tasks;
        Ok(grid)
    }

    /// Fixed-width text table with one row per run and a trailing mean
    /// column over that run's present tasks.
    pub fn render_text(&self) -> String {
        let name_w = self
            .runs
            .iter()
            .map(|(n, _)| n.len())
            .chain(["run".len()])
            .max()
            .unwrap_or(3);
        let col_w = self
            .tasks
            .iter()
            .map(|t| t.len().max(6))
            .collect::<Vec<_>>();
        let mut out = format!("{:<name_w$}", "run");
        for (t, w) in self.tasks.iter().zip(&col_w) {
            out.push_str(&format!("  {t:>w$}"));
        }
        out.push_str("    mean\n");
        for (name, scores) in &self.runs {
            out.push_str(&format!("{name:<name_w$}"));
            let mut present = Vec::new();
            for (t, w) in self.tasks.iter().zip(&col_w) {
                match scores.get(t) {
                    Some(v) => {
                        present.push(*v);
                        out.push_str(&format!("  {:>w$.4}", v));
                    }
                    None => out.push_str(&format!("  {:>w$}", "-")),
                }
            }
            if present.is_empty() {
                out.push_str("       -\n");
            } else {
                let mean = present.iter().sum::<f64>() / present.len() as f64;
                out.push_str(&format!("  {mean:>6.4}\n"));
            }
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut text = String::from("run");
        for t in &self.tasks {
            text.push(',');
            text.push_str(t);
        }
        text.push_str(",mean\n");
        for (name, scores) in &self.runs {
            text.push_str(name);
            let mut present = Vec::new();
            for t in &self.tasks {
                text.push(',');
                if let Some(v) = scores.get(t) {
                    present.push(*v);
                    text.push_str(&format!("{v}"));
                }
            }
            text.push(',');
            if !present.is_empty() {
                let mean = present.iter().sum::<f64>() / present.len() as f64;
                text.push_str(&format!("{mean}"));
            }
            text.push('\n');
        }
        fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn matrix_csv_round_trips_including_missing_cells() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let tasks: Vec<String> = ["A", "B", "C"].iter().map(|s| s.to_string()).collect();
        let mut m = Array2::<f64>::zeros((3, 3));
        m[[0, 0]] = 2.5999999999999996;
        m[[1, 2]] = -0.125;
        m[[2, 1]] = f64::NAN;
        write_matrix_csv(&path, &tasks, &m).unwrap();
        let (tasks2, m2) = read_matrix_csv(&path).unwrap();
        assert_eq!(tasks2, tasks);
        // Shortest round-trip float formatting is lossless.
        assert_eq!(m2[[0, 0]], 2.5999999999999996);
        assert_eq!(m2[[1, 2]], -0.125);
        assert!(m2[[2, 1]].is_nan());
        assert_eq!(m2[[2, 2]], 0.0);
    }

    #[test]
    fn malformed_matrix_files_are_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.csv");
        fs::write(&path, "task,A,B\nA,1.0,2.0\nB,oops,0.5\n").unwrap();
        let err = read_matrix_csv(&path).unwrap_err();
        assert!(format!("{err:#}").contains("bad number"));

        fs::write(&path, "task,A,B\nB,1.0,2.0\nA,0.1,0.5\n").unwrap();
        let err = read_matrix_csv(&path).unwrap_err();
        assert!(format!("{err}").contains("does not match header order"));

        fs::write(&path, "task,A,B\nA,1.0,2.0\n").unwrap();
        let err = read_matrix_csv(&path).unwrap_err();
        assert!(format!("{err}").contains("expected 2 rows"));
    }

    #[test]
    fn score_rows_round_trip_through_json() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("eval.json");
        let rows = vec![ScoreRow {
            task: "Bird".into(),
            s_alpha: 0.883,
            e_phi: 0.943,
            f_w_beta: 0.836,
            mae: 0.016,
            score: 2.646,
            n_samples: 4,
        }];
        write_json(&path, &rows).unwrap();
        let back = read_score_rows(&path).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].task, "Bird");
        assert_eq!(back[0].score, 2.646);
        assert_eq!(back[0].n_samples, 4);
    }

    #[test]
    fn score_grid_collects_runs_and_renders() {
        let dir = tempdir().unwrap();
        for (run, task, score) in [
            ("st-bird", "Bird", 2.1),
            ("mt-all", "Bird", 2.2),
            ("mt-all", "Mammal", 2.0),
        ] {
            let run_dir = dir.path().join(run);
            fs::create_dir_all(&run_dir).unwrap();
            let path = run_dir.join("eval.json");
            let mut rows = if path.is_file() {
                read_score_rows(&path).unwrap()
            } else {
                Vec::new()
            };
            rows.push(ScoreRow {
                task: task.into(),
                s_alpha: 0.0,
                e_phi: 0.0,
                f_w_beta: 0.0,
                mae: 0.0,
                score,
                n_samples: 1,
            });
            write_json(&path, &rows).unwrap();
        }
        let grid = ScoreGrid::from_runs_dir(dir.path()).unwrap();
        assert_eq!(grid.tasks, ["Bird", "Mammal"]);
        assert_eq!(grid.runs.len(), 2);
        let text = grid.render_text();
        assert!(text.contains("st-bird"));
        assert!(text.contains("2.1000"));
        // st-bird has no Mammal entry.
        assert!(text.contains('-'));

        let csv = dir.path().join("grid.csv");
        grid.write_csv(&csv).unwrap();
        let text = fs::read_to_string(csv).unwrap();
        assert!(text.starts_with("run,Bird,Mammal,mean\n"));
        assert!(text.contains("st-bird,2.1,,2.1"));
    }

    #[test]
    fn heatmap_covers_the_full_ramp_and_marks_missing_cells() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.png");
        let mut m = Array2::<f64>::zeros((2, 2));
        m[[0, 0]] = 1.0;
        m[[0, 1]] = 0.5;
        m[[1, 0]] = f64::NAN;
        write_matrix_heatmap(&path, &m).unwrap();
        let img = image::open(&path).unwrap().to_rgb8();
        assert_eq!(img.dimensions(), (96, 96));
        assert_eq!(img.get_pixel(24, 24).0, [253, 231, 37]); // 1.0 → yellow
        assert_eq!(img.get_pixel(72, 24).0, [33, 145, 140]); // 0.5 → teal
        assert_eq!(img.get_pixel(24, 72).0, [128, 128, 128]); // missing → gray
        assert_eq!(img.get_pixel(72, 72).0, [48, 18, 59]); // 0.0 → dark
    }

    #[test]
    fn groups_serialize_as_target_to_sources() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("groups.json");
        let groups = vec![
            TaskGroup {
                target: "Bird".into(),
                sources: vec!["Mammal".into(), "Bird".into()],
            },
            TaskGroup {
                target: "Mammal".into(),
                sources: vec!["Mammal".into(), "Amphibian".into()],
            },
        ];
        write_groups_json(&path, &groups).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let parsed: BTreeMap<String, Vec<String>> = serde_json::from_str(&text).unwrap();
        assert_eq!(parsed["Bird"], ["Mammal", "Bird"]);
        assert_eq!(parsed["Mammal"], ["Mammal", "Amphibian"]);
    }
}
