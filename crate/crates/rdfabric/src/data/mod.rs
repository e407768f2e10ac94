//! Dataset discovery, tiling, splits and image loading.
//!
//! Datasets follow the MVTEC folder layout:
//!
//! ```text
//! <root>/<class>/train/good/*.png
//! <root>/<class>/test/good/*.png
//! <root>/<class>/test/<defect_type>/*.png
//! <root>/<class>/ground_truth/<defect_type>/<stem>_mask.png
//! ```
//!
//! Training is unsupervised, so train records are always defect-free; test
//! records carry their defect type and, when present, a pixel mask.

pub mod synthetic;

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use ndarray::{Array2, Array3, Array4, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::teacher::NormStats;

pub const IMAGE_EXTENSIONS: [&str; 4] = ["png", "jpg", "jpeg", "bmp"];
pub const DEFAULT_MASK_SUFFIX: &str = "_mask";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Good,
    Defective,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub image_path: PathBuf,
    pub class_name: String,
    pub split: Split,
    pub label: Label,
    /// Defect subfolder name; empty for good samples.
    #[serde(default)]
    pub defect_type: String,
    #[serde(default)]
    pub mask_path: Option<PathBuf>,
}

fn is_image_file(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

/// Image files directly inside `dir`, sorted by file name.
fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_image_file(p))
        .collect();
    out.sort();
    Ok(out)
}

fn sorted_subdirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    out.sort();
    Ok(out)
}

/// Discover one class of an MVTEC-layout dataset rooted at `root`.
pub fn scan_mvtec_layout(root: &Path, class_name: &str) -> Result<Vec<SampleRecord>> {
    scan_mvtec_layout_with(root, class_name, DEFAULT_MASK_SUFFIX)
}

/// As [`scan_mvtec_layout`], with a non-standard ground-truth mask suffix.
pub fn scan_mvtec_layout_with(
    root: &Path,
    class_name: &str,
    mask_suffix: &str,
) -> Result<Vec<SampleRecord>> {
    let class_dir = root.join(class_name);
    let train_good = class_dir.join("train").join("good");
    if !train_good.is_dir() {
        return Err(Error::Dataset(format!(
            "{} does not contain a train/good directory",
            class_dir.display()
        )));
    }

    let mut records = Vec::new();
    for image_path in list_images(&train_good)? {
        records.push(SampleRecord {
            image_path,
            class_name: class_name.to_string(),
            split: Split::Train,
            label: Label::Good,
            defect_type: String::new(),
            mask_path: None,
        });
    }

    let test_dir = class_dir.join("test");
    if test_dir.is_dir() {
        for sub in sorted_subdirs(&test_dir)? {
            let kind = sub.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
            let good = kind == "good";
            for image_path in list_images(&sub)? {
                let mask_path = if good {
                    None
                } else {
                    let stem =
                        image_path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
                    let candidate = class_dir
                        .join("ground_truth")
                        .join(&kind)
                        .join(format!("{stem}{mask_suffix}.png"));
                    if candidate.is_file() {
                        Some(candidate)
                    } else {
                        eprintln!(
                            "warning: no ground-truth mask for {} (looked at {}); pixel metrics will skip it",
                            image_path.display(),
                            candidate.display()
                        );
                        None
                    }
                };
                records.push(SampleRecord {
                    image_path,
                    class_name: class_name.to_string(),
                    split: Split::Test,
                    label: if good { Label::Good } else { Label::Defective },
                    defect_type: if good { String::new() } else { kind.clone() },
                    mask_path,
                });
            }
        }
    }
    Ok(records)
}

/// Non-overlapping floor tiling of a source image into square patches.
/// Remainder margins on the right and bottom are discarded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub source_width: usize,
    pub source_height: usize,
    pub patch_size: usize,
    pub rows: usize,
    pub cols: usize,
    /// `(x, y)` top-left corners, row-major.
    pub offsets: Vec<(usize, usize)>,
}

impl PatchGrid {
    pub fn n_patches(&self) -> usize {
        self.rows * self.cols
    }
}

pub fn extract_patches(
    image_width: usize,
    image_height: usize,
    patch_size: usize,
) -> Result<PatchGrid> {
    if patch_size == 0 {
        return Err(Error::Config("patch size must be positive".into()));
    }
    if image_width < patch_size || image_height < patch_size {
        return Err(Error::Shape {
            op: "extract_patches",
            message: format!(
                "image {image_width}x{image_height} is smaller than the {patch_size}px patch"
            ),
        });
    }
    let cols = image_width / patch_size;
    let rows = image_height / patch_size;
    let mut offsets = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            offsets.push((c * patch_size, r * patch_size));
        }
    }
    Ok(PatchGrid { source_width: image_width, source_height: image_height, patch_size, rows, cols, offsets })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig { train_fraction: 0.70, seed: 0 }
    }
}

/// Shuffle-and-cut split of training records into train and validation.
pub fn split_train_val(
    records: &[SampleRecord],
    cfg: &SplitConfig,
) -> Result<(Vec<SampleRecord>, Vec<SampleRecord>)> {
    if !(cfg.train_fraction > 0.0 && cfg.train_fraction <= 1.0) {
        return Err(Error::Config(format!(
            "train_fraction must be in (0, 1]: {}",
            cfg.train_fraction
        )));
    }
    if records.is_empty() {
        return Err(Error::Dataset("cannot split an empty record list".into()));
    }
    if let Some(r) = records.iter().find(|r| r.split != Split::Train) {
        return Err(Error::Dataset(format!(
            "split_train_val expects training records only; {} is a test record",
            r.image_path.display()
        )));
    }
    let mut shuffled: Vec<SampleRecord> = records.to_vec();
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    shuffled.shuffle(&mut rng);
    let n_train = ((cfg.train_fraction * records.len() as f64).round() as usize)
        .clamp(1, records.len());
    let val = shuffled.split_off(n_train);
    if val.is_empty() {
        eprintln!(
            "warning: validation split is empty ({} records at fraction {}); validation will reuse training samples",
            records.len(),
            cfg.train_fraction
        );
    }
    Ok((shuffled, val))
}

/// Pool the training records of several classes for domain-generalized
/// training. Evaluation stays per-class; only train records are merged.
pub fn build_dg_corpus(roots: &[(PathBuf, String)]) -> Result<Vec<SampleRecord>> {
    if roots.len() < 2 {
        return Err(Error::Dataset(format!(
            "domain-generalized training needs at least 2 classes, got {}",
            roots.len()
        )));
    }
    let mut seen = BTreeSet::new();
    let mut pooled = Vec::new();
    for (root, class_name) in roots {
        if !seen.insert((root.clone(), class_name.clone())) {
            return Err(Error::Dataset(format!(
                "duplicate corpus entry {} / {class_name}",
                root.display()
            )));
        }
        let records = scan_mvtec_layout(root, class_name)?;
        pooled.extend(records.into_iter().filter(|r| r.split == Split::Train));
    }
    Ok(pooled)
}

/// Decode, resize and normalize an image to a `[3, size, size]` tensor.
/// Grayscale sources are replicated across channels so the pretrained
/// backbone statistics still apply.
pub fn load_image(path: &Path, target_size: usize, norm: &NormStats) -> Result<Array3<f32>> {
    let img = image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })?;
    let rgb = img.to_rgb8();
    let resized = if rgb.dimensions() == (target_size as u32, target_size as u32) {
        rgb
    } else {
        image::imageops::resize(&rgb, target_size as u32, target_size as u32, FilterType::Triangle)
    };
    let mut out = Array3::<f32>::zeros((3, target_size, target_size));
    for (x, y, pixel) in resized.enumerate_pixels() {
        for c in 0..3 {
            let v = pixel.0[c] as f32 / 255.0;
            out[[c, y as usize, x as usize]] = (v - norm.mean[c] as f32) / norm.std[c] as f32;
        }
    }
    Ok(out)
}

/// Load a ground-truth mask; nonzero pixels mark the defect. Resizing uses
/// nearest-neighbor so the mask stays binary.
pub fn load_mask(path: &Path, target_size: usize) -> Result<Array2<bool>> {
    let img = image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })?;
    let gray = img.to_luma8();
    let resized = if gray.dimensions() == (target_size as u32, target_size as u32) {
        gray
    } else {
        image::imageops::resize(&gray, target_size as u32, target_size as u32, FilterType::Nearest)
    };
    let mut out = Array2::<bool>::from_elem((target_size, target_size), false);
    for (x, y, pixel) in resized.enumerate_pixels() {
        out[[y as usize, x as usize]] = pixel.0[0] != 0;
    }
    Ok(out)
}

/// Stack per-image tensors into a `[batch, 3, s, s]` batch.
pub fn stack_batch(images: &[Array3<f32>]) -> Result<Array4<f32>> {
    if images.is_empty() {
        return Err(Error::Dataset("cannot stack an empty batch".into()));
    }
    let views: Vec<_> = images.iter().map(|x| x.view().insert_axis(Axis(0))).collect();
    ndarray::concatenate(Axis(0), &views)
        .map_err(|e| Error::Shape { op: "stack_batch", message: e.to_string() })
}

/// Write records as JSON lines, one record per line.
pub fn write_records(path: &Path, records: &[SampleRecord]) -> Result<()> {
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for r in records {
        let line = serde_json::to_string(r).expect("record serializes");
        writeln!(file, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<SampleRecord>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|e| {
            Error::Dataset(format!("{}:{}: bad record: {e}", path.display(), i + 1))
        })?;
        out.push(record);
    }
    Ok(out)
}
