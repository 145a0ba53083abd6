//! Image/mask datasets on disk.
//!
//! A split directory holds `Imgs/` and `GT/` with same-stem files: the
//! image may be PNG or JPEG, the mask is an 8-bit grayscale image that is
//! binarized at half its maximum stored value (soft-edged masks come out
//! crisp). A task dataset is `<root>/<task>/{train,test}/` in that layout.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use camopad_core::data::ImageSample;
use camopad_core::multitask::{TaskData, TaskRegistry};
use image::{GrayImage, RgbImage};
use ndarray::{Array2, Array3};

use crate::config::{DataSpec, RunSpec};

/// What a directory scan found and what it had to skip.
#[derive(Debug, Default)]
pub struct LoadReport {
    pub loaded: usize,
    /// Image stems with no matching mask; the samples were skipped.
    pub missing_mask: Vec<String>,
}

const IMAGE_EXTS: &[&str] = &["png", "jpg", "jpeg"];

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| IMAGE_EXTS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

fn find_with_any_ext(dir: &Path, stem: &str) -> Option<PathBuf> {
    IMAGE_EXTS
        .iter()
        .map(|ext| dir.join(format!("{stem}.{ext}")))
        .find(|p| p.is_file())
}

/// Loads an RGB image into an `(H, W, 3)` array of values in `[0, 1]`.
pub fn load_rgb(path: &Path) -> Result<Array3<f32>> {
    let img = image::open(path)
        .with_context(|| format!("reading image {}", path.display()))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let mut out = Array3::<f32>::zeros((h as usize, w as usize, 3));
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            out[[y as usize, x as usize, c]] = px[c] as f32 / 255.0;
        }
    }
    Ok(out)
}

/// Loads a grayscale image into values in `[0, 1]`.
pub fn load_gray(path: &Path) -> Result<Array2<f64>> {
    let img = image::open(path)
        .with_context(|| format!("reading image {}", path.display()))?
        .to_luma8();
    let (w, h) = img.dimensions();
    let mut out = Array2::<f64>::zeros((h as usize, w as usize));
    for (x, y, px) in img.enumerate_pixels() {
        out[[y as usize, x as usize]] = px[0] as f64 / 255.0;
    }
    Ok(out)
}

/// Thresholds a stored mask at half of its maximum value; an all-black
/// mask stays empty. A mid-gray 200/255 pixel therefore counts as
/// foreground.
pub fn binarize_mask(gray: &Array2<f64>) -> Array2<f32> {
    let max = gray.iter().cloned().fold(0.0f64, f64::max);
    if max <= 0.0 {
        return Array2::zeros(gray.dim());
    }
    let threshold = 0.5 * max;
    gray.map(|&v| if v >= threshold { 1.0f32 } else { 0.0 })
}

/// Saves an 8-bit grayscale map.
pub fn save_gray(path: &Path, map: &Array2<u8>) -> Result<()> {
    let (h, w) = map.dim();
    let img = GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([map[[y as usize, x as usize]]])
    });
    img.save(path)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn save_rgb(path: &Path, image: &Array3<f32>) -> Result<()> {
    let (h, w, _) = image.dim();
    let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| {
            (image[[y as usize, x as usize, c]].clamp(0.0, 1.0) * 255.0).round() as u8
        };
        image::Rgb([px(0), px(1), px(2)])
    });
    img.save(path)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Loads every image/mask pair under `root` (expects `Imgs/` and `GT/`).
/// Images without a mask are reported and skipped; an unreadable file is a
/// hard error naming it. Samples come back sorted by stem.
pub fn load_split(root: &Path) -> Result<(Vec<ImageSample>, LoadReport)> {
    let imgs = root.join("Imgs");
    let gts = root.join("GT");
    if !imgs.is_dir() {
        bail!("{} is missing an Imgs/ directory", root.display());
    }
    if !gts.is_dir() {
        bail!("{} is missing a GT/ directory", root.display());
    }

    let mut stems: Vec<(String, PathBuf)> = Vec::new();
    for entry in fs::read_dir(&imgs).with_context(|| format!("listing {}", imgs.display()))? {
        let path = entry?.path();
        if !is_image(&path) {
            continue;
        }
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .map(|s| s.to_string())
            .with_context(|| format!("non-unicode file name {}", path.display()))?;
        stems.push((stem, path));
    }
    stems.sort();

    let mut samples = Vec::new();
    let mut report = LoadReport::default();
    for (stem, img_path) in stems {
        let Some(gt_path) = find_with_any_ext(&gts, &stem) else {
            report.missing_mask.push(stem);
            continue;
        };
        let image = load_rgb(&img_path)?;
        let gt = binarize_mask(&load_gray(&gt_path)?);
        if image.dim().0 != gt.dim().0 || image.dim().1 != gt.dim().1 {
            bail!(
                "{}: image is {}x{} but its mask is {}x{}",
                img_path.display(),
                image.dim().0,
                image.dim().1,
                gt.dim().0,
                gt.dim().1
            );
        }
        let original_size = (image.dim().0, image.dim().1);
        samples.push(ImageSample {
            id: stem,
            image,
            gt,
            task: None,
            original_size,
        });
    }
    report.loaded = samples.len();
    Ok((samples, report))
}

/// Writes samples as a split directory (`Imgs/` + `GT/`).
pub fn write_split(dir: &Path, samples: &[ImageSample]) -> Result<()> {
    let imgs = dir.join("Imgs");
    let gts = dir.join("GT");
    fs::create_dir_all(&imgs)?;
    fs::create_dir_all(&gts)?;
    for sample in samples {
        save_rgb(&imgs.join(format!("{}.png", sample.id)), &sample.image)?;
        let mask = sample.gt.map(|&v| if v >= 0.5 { 255u8 } else { 0 });
        save_gray(&gts.join(format!("{}.png", sample.id)), &mask)?;
    }
    Ok(())
}

/// Builds the task registry a run spec describes: generated corpora for
/// synthetic mode, per-task `train/`+`test/` directories for disk mode.
pub fn build_registry(spec: &RunSpec) -> Result<TaskRegistry> {
    match &spec.data {
        DataSpec::Synthetic {
            tasks,
            train_per_task,
            test_per_task,
            side,
            seed,
        } => {
            let names: Vec<&str> = tasks.iter().map(|s| s.as_str()).collect();
            Ok(TaskRegistry::synthetic(
                &names,
                *train_per_task,
                *test_per_task,
                *side,
                *seed,
            ))
        }
        DataSpec::Disk { tasks, root } => {
            let mut data = Vec::with_capacity(tasks.len());
            for task in tasks {
                let mut splits = Vec::with_capacity(2);
                for split in ["train", "test"] {
                    let dir = root.join(task).join(split);
                    let (mut samples, report) = load_split(&dir)
                        .with_context(|| format!("loading task {task:?} ({split})"))?;
                    for s in &mut samples {
                        s.task = Some(task.clone());
                        // Stems are only unique within one directory.
                        s.id = format!("{task}/{split}/{}", s.id);
                    }
                    for stem in &report.missing_mask {
                        eprintln!(
                            "warning: {}: no mask for image stem {stem:?}, skipped",
                            dir.display()
                        );
                    }
                    splits.push(samples);
                }
                let train = splits.remove(0);
                let test = splits.remove(0);
                data.push(TaskData {
                    name: task.clone(),
                    train,
                    test,
                });
            }
            Ok(TaskRegistry::from_tasks(data)?)
        }
    }
}
