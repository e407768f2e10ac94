//! Evaluation metrics: image/pixel AUROC, coverage at full precision and
//! recall, and the inference throughput benchmark.
//!
//! Coverage formalizes the reject option: every sample scoring strictly
//! above all goods (plus tolerance) is called defective, every sample
//! strictly below all defects (minus tolerance) is called good, and the
//! ambiguous band in between defers to a human. Auto-classified samples are
//! then correct by construction, so coverage is the fraction handled
//! automatically while precision and recall both stay at 100%.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array2, Array4};
use serde::{Deserialize, Serialize};

use crate::data::{load_image, load_mask, stack_batch, Label, SampleRecord, Split};
use crate::error::{Error, Result};
use crate::model::RdModel;
use crate::nn::Init;
use crate::scoring::{anomaly_maps, image_score};
use crate::teacher::Teacher;

/// Average 1-based ranks; ties share the mean of their rank range.
fn average_ranks(scores: &[f64]) -> Vec<f64> {
    let n = scores.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j + 2) as f64 / 2.0; // mean of 1-based ranks i+1 ..= j+1
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn check_scores(scores: &[f64], labels: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::Eval(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::Eval(format!("scores must be finite, found {s}")));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Eval(
            "metric needs both good and defective samples".into(),
        ));
    }
    Ok((n_pos, n_neg))
}

/// Probability that a random defective sample outscores a random good one,
/// ties counting one half (Mann-Whitney rank formulation).
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (n_pos, n_neg) = check_scores(scores, labels)?;
    let ranks = average_ranks(scores);
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l).map(|(r, _)| r).sum();
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Pixel-level AUROC pooled over all pixels of all images. A `None` mask
/// means a good image: every pixel is a negative. Callers skip defective
/// images that lack ground truth before calling.
pub fn pixel_auroc(items: &[(&Array2<f32>, Option<&Array2<bool>>)]) -> Result<f64> {
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for (map, mask) in items {
        if let Some(mask) = mask {
            if mask.dim() != map.dim() {
                return Err(Error::Eval(format!(
                    "mask {:?} does not match map {:?}",
                    mask.dim(),
                    map.dim()
                )));
            }
        }
        for ((y, x), &v) in map.indexed_iter() {
            scores.push(v as f64);
            labels.push(mask.map(|m| m[[y, x]]).unwrap_or(false));
        }
    }
    if !labels.iter().any(|&l| l) {
        return Err(Error::Eval("pixel metric needs at least one defective pixel".into()));
    }
    auroc(&scores, &labels)
}

/// Fraction of samples auto-classified with zero errors under the
/// two-threshold reject rule; see the module docs.
pub fn coverage_at_full_precision_recall(
    scores: &[f64],
    labels: &[bool],
    tolerance: f64,
) -> Result<f64> {
    if !(tolerance >= 0.0) || !tolerance.is_finite() {
        return Err(Error::Eval(format!("tolerance must be non-negative: {tolerance}")));
    }
    check_scores(scores, labels)?;
    let min_defect = scores
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l)
        .map(|(s, _)| *s)
        .fold(f64::INFINITY, f64::min);
    let max_good = scores
        .iter()
        .zip(labels)
        .filter(|(_, &l)| !l)
        .map(|(s, _)| *s)
        .fold(f64::NEG_INFINITY, f64::max);
    let lo = min_defect - tolerance;
    let hi = max_good + tolerance;
    if lo > hi {
        return Ok(1.0);
    }
    let outside = scores.iter().filter(|&&s| s < lo || s > hi).count();
    Ok(outside as f64 / scores.len() as f64)
}

/// Min-max normalize scores to `[0, 1]` so coverage tolerances are
/// comparable across models; a constant score list maps to all zeros.
pub fn normalize_scores(scores: &[f64]) -> Vec<f64> {
    let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![0.0; scores.len()];
    }
    scores.iter().map(|s| (s - lo) / (hi - lo)).collect()
}

pub const COVERAGE_TOLERANCES: [f64; 3] = [0.0, 0.02, 0.05];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageBand {
    #[serde(rename = "tol_0")]
    pub tol_0: f64,
    #[serde(rename = "tol_0.02")]
    pub tol_0_02: f64,
    #[serde(rename = "tol_0.05")]
    pub tol_0_05: f64,
}

impl CoverageBand {
    /// Coverage at the three standard tolerances over min-max normalized
    /// scores.
    pub fn compute(scores: &[f64], labels: &[bool]) -> Result<Self> {
        let normalized = normalize_scores(scores);
        let mut vals = [0.0; 3];
        for (v, tol) in vals.iter_mut().zip(COVERAGE_TOLERANCES) {
            *v = coverage_at_full_precision_recall(&normalized, labels, tol)?;
        }
        Ok(CoverageBand { tol_0: vals[0], tol_0_02: vals[1], tol_0_05: vals[2] })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub class_name: String,
    pub image_auroc: f64,
    /// Absent when no defective test image carries a ground-truth mask.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub pixel_auroc: Option<f64>,
    pub coverage: CoverageBand,
    pub n_good: usize,
    pub n_defective: usize,
}

pub fn write_eval_json(path: &Path, report: &EvalReport) -> Result<()> {
    let json = serde_json::to_string_pretty(report).expect("report serializes");
    fs::write(path, json).map_err(|e| Error::io(path, e))
}

/// Aggregate CSV, one row per class.
pub fn write_eval_csv(path: &Path, reports: &[EvalReport]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| Error::Eval(e.to_string()))?;
    writer
        .write_record([
            "class",
            "image_auroc",
            "pixel_auroc",
            "coverage_0",
            "coverage_002",
            "coverage_005",
            "n_good",
            "n_def",
        ])
        .map_err(|e| Error::Eval(e.to_string()))?;
    for r in reports {
        writer
            .write_record([
                r.class_name.clone(),
                format!("{:.6}", r.image_auroc),
                r.pixel_auroc.map(|v| format!("{v:.6}")).unwrap_or_default(),
                format!("{:.6}", r.coverage.tol_0),
                format!("{:.6}", r.coverage.tol_0_02),
                format!("{:.6}", r.coverage.tol_0_05),
                r.n_good.to_string(),
                r.n_defective.to_string(),
            ])
            .map_err(|e| Error::Eval(e.to_string()))?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

/// Per-image outcome of a class evaluation, kept for score CSVs and
/// localization auditing.
#[derive(Debug, Clone)]
pub struct ImageEval {
    pub record: SampleRecord,
    pub score: f64,
    /// `(row, col)` of the anomaly-map maximum at input resolution.
    pub argmax: (usize, usize),
}

#[derive(Debug, Clone)]
pub struct ClassEvaluation {
    pub report: EvalReport,
    pub images: Vec<ImageEval>,
}

/// Score one class's test split and assemble its [`EvalReport`].
///
/// Pixel AUROC pools every pixel of every test image; good images are
/// all-negative, defective images need their ground-truth mask — those
/// without one are left out with a warning, and if no positive pixel remains
/// the pixel metric is reported absent rather than failing the evaluation.
pub fn evaluate_class(
    teacher: &Teacher,
    model: &RdModel<f32>,
    class_name: &str,
    records: &[SampleRecord],
    sigma: f64,
    batch_size: usize,
    with_pixel: bool,
) -> Result<ClassEvaluation> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    let test: Vec<&SampleRecord> = records
        .iter()
        .filter(|r| r.split == Split::Test && r.class_name == class_name)
        .collect();
    if test.is_empty() {
        return Err(Error::Eval(format!("no test samples for class {class_name}")));
    }
    let size = teacher.spec().input_size;
    let norm = &teacher.spec().normalization;

    let mut images = Vec::with_capacity(test.len());
    let mut pixel_items: Vec<(Array2<f32>, Option<Array2<bool>>)> = Vec::new();
    for chunk in test.chunks(batch_size) {
        let loaded: Vec<_> = chunk
            .iter()
            .map(|r| load_image(&r.image_path, size, norm))
            .collect::<Result<_>>()?;
        let batch = stack_batch(&loaded)?;
        let maps = anomaly_maps(teacher, model, &batch, sigma)?;
        for (record, map) in chunk.iter().zip(maps) {
            let s = image_score(&map);
            images.push(ImageEval {
                record: (*record).clone(),
                score: s.score as f64,
                argmax: s.argmax_location,
            });
            if with_pixel {
                match (record.label, &record.mask_path) {
                    (Label::Good, _) => pixel_items.push((map.map, None)),
                    (Label::Defective, Some(mask)) => {
                        pixel_items.push((map.map, Some(load_mask(mask, size)?)));
                    }
                    (Label::Defective, None) => {
                        eprintln!(
                            "warning: {} has no ground-truth mask, excluded from pixel AUROC",
                            record.image_path.display()
                        );
                    }
                }
            }
        }
    }

    let scores: Vec<f64> = images.iter().map(|i| i.score).collect();
    let labels: Vec<bool> = images.iter().map(|i| i.record.label == Label::Defective).collect();
    let image_auroc = auroc(&scores, &labels)?;
    let coverage = CoverageBand::compute(&scores, &labels)?;

    let pixel = if with_pixel {
        let any_positive =
            pixel_items.iter().any(|(_, m)| m.as_ref().is_some_and(|m| m.iter().any(|&v| v)));
        if any_positive {
            let refs: Vec<(&Array2<f32>, Option<&Array2<bool>>)> =
                pixel_items.iter().map(|(m, k)| (m, k.as_ref())).collect();
            Some(pixel_auroc(&refs)?)
        } else {
            eprintln!("warning: no defective pixels in {class_name}, pixel AUROC omitted");
            None
        }
    } else {
        None
    };

    let n_defective = labels.iter().filter(|&&l| l).count();
    let report = EvalReport {
        class_name: class_name.to_string(),
        image_auroc,
        pixel_auroc: pixel,
        coverage,
        n_good: labels.len() - n_defective,
        n_defective,
    };
    Ok(ClassEvaluation { report, images })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThroughputReport {
    pub batch_size: usize,
    pub ms_per_patch: f64,
    pub patches_per_second: f64,
    /// Wall-clock time to process all `n_patches` (one high-res image).
    pub whole_image_ms: f64,
    pub n_batches: usize,
    pub hardware: String,
}

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub n_patches: usize,
    pub batch_size: usize,
    pub warmup_batches: usize,
    /// Explicit lock file location; `None` falls back to
    /// `RDFABRIC_BENCH_LOCK` or the system temp directory.
    pub lock_path: Option<PathBuf>,
}

impl BenchConfig {
    pub fn new(n_patches: usize, batch_size: usize, warmup_batches: usize) -> Self {
        BenchConfig { n_patches, batch_size, warmup_batches, lock_path: None }
    }
}

/// The benchmark is only meaningful without co-tenant compute, so a lock
/// file serializes runs.
fn bench_lock_path(cfg: &BenchConfig) -> PathBuf {
    cfg.lock_path.clone().unwrap_or_else(|| {
        std::env::var_os("RDFABRIC_BENCH_LOCK")
            .map(PathBuf::from)
            .unwrap_or_else(|| std::env::temp_dir().join("rdfabric-bench.lock"))
    })
}

struct BenchLock {
    path: PathBuf,
}

impl BenchLock {
    fn acquire(path: PathBuf) -> Result<Self> {
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(BenchLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Busy(format!(
                "benchmark lock {} is held; remove it if no other run is active",
                path.display()
            ))),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for BenchLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

pub fn hardware_descriptor() -> String {
    let model = fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|text| {
            text.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split(':').nth(1))
                .map(|s| s.trim().to_string())
        })
        .unwrap_or_else(|| "unknown cpu".into());
    let threads = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    format!("{model} ({threads} threads)")
}

/// Time an arbitrary per-batch workload. Factored out so the scheduling
/// arithmetic is testable without a real model.
pub fn benchmark_with(
    cfg: &BenchConfig,
    hardware: String,
    mut run_batch: impl FnMut(usize) -> Result<()>,
) -> Result<ThroughputReport> {
    if cfg.batch_size == 0 || cfg.n_patches < cfg.batch_size {
        return Err(Error::Config(format!(
            "benchmark needs n_patches >= batch_size >= 1, got {} / {}",
            cfg.n_patches, cfg.batch_size
        )));
    }
    let _lock = BenchLock::acquire(bench_lock_path(cfg))?;
    let n_batches = cfg.n_patches.div_ceil(cfg.batch_size);

    for _ in 0..cfg.warmup_batches {
        run_batch(cfg.batch_size)?;
    }
    let start = Instant::now();
    let mut remaining = cfg.n_patches;
    for _ in 0..n_batches {
        let b = remaining.min(cfg.batch_size);
        run_batch(b)?;
        remaining -= b;
    }
    let whole_image_ms = start.elapsed().as_secs_f64() * 1000.0;
    Ok(ThroughputReport {
        batch_size: cfg.batch_size,
        ms_per_patch: whole_image_ms / cfg.n_patches as f64,
        patches_per_second: cfg.n_patches as f64 / (whole_image_ms / 1000.0),
        whole_image_ms,
        n_batches,
        hardware,
    })
}

/// Benchmark the full teacher + student inference path on synthetic input.
pub fn benchmark_throughput(
    teacher: &Teacher,
    model: &RdModel<f32>,
    cfg: &BenchConfig,
) -> Result<ThroughputReport> {
    let s = teacher.spec().input_size;
    let full: Array4<f32> = Init::seeded(99)
        .normal::<f32>(&[cfg.batch_size.max(1), 3, s, s], 0.5)
        .into_dimensionality()
        .expect("4d batch");
    benchmark_with(cfg, hardware_descriptor(), |b| {
        let batch = full.slice(ndarray::s![..b, .., .., ..]).to_owned();
        let pyramid = teacher.extract_features(&batch)?;
        let _ = model.forward_eval(&pyramid)?;
        Ok(())
    })
}
