//! Declarative run configuration. One TOML file (sections `[dataset]`,
//! `[model]`, `[loss]`, `[train]`, `[split]`, `[teacher]`, `[output]`) drives
//! the train and eval commands; CLI flags override individual keys, and the
//! fully resolved result is written next to the outputs for provenance.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::archive;
use crate::checkpoint::CheckpointMeta;
use crate::data::SplitConfig;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelMode};
use crate::objective::LossWeights;
use crate::scoring::DEFAULT_SIGMA;
use crate::teacher::{BackboneSpec, Teacher, TeacherWeights, DEFAULT_TEACHER_SEED};
use crate::trainer::TrainConfig;

/// Archive kind tag for standalone teacher-weight files.
pub const TEACHER_WEIGHTS_KIND: &str = "teacher_weights";

/// Directory searched for a cached `resnet34.tensors` teacher-weight archive
/// when the config does not name one explicitly.
pub const WEIGHTS_DIR_ENV: &str = "RDFABRIC_WEIGHTS_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    /// Root directory holding one subdirectory per class in the
    /// `train/good`, `test/<defect>`, `ground_truth/<defect>` layout.
    pub root: PathBuf,
    pub classes: Vec<String>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig { root: PathBuf::from("data"), classes: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub mode: ModelMode,
    /// Teacher taps that feed residual links. Unset means the mode's
    /// default: `[0, 1]` in standard mode, none in domain-generalized mode.
    pub link_taps: Option<BTreeSet<usize>>,
    pub attention_reduction: usize,
    pub sspcab_reduction: usize,
    /// Side length images are resized to before feature extraction.
    pub input_size: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let base = ModelConfig::default();
        ModelSection {
            mode: base.mode,
            link_taps: None,
            attention_reduction: base.attention_reduction,
            sspcab_reduction: base.sspcab_reduction,
            input_size: BackboneSpec::resnet34_256().input_size,
        }
    }
}

impl ModelSection {
    pub fn model_config(&self) -> ModelConfig {
        let link_taps = self.link_taps.clone().unwrap_or_else(|| match self.mode {
            ModelMode::Standard => ModelConfig::default().link_taps,
            ModelMode::DomainGeneralized => BTreeSet::new(),
        });
        ModelConfig {
            mode: self.mode,
            link_taps,
            attention_reduction: self.attention_reduction,
            sspcab_reduction: self.sspcab_reduction,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherSection {
    /// Seed for synthetic teacher weights when no archive is available.
    pub seed: u64,
    /// Explicit teacher-weight archive; takes precedence over the cache
    /// directory and the seed.
    pub weights_path: Option<PathBuf>,
}

impl Default for TeacherSection {
    fn default() -> Self {
        TeacherSection { seed: DEFAULT_TEACHER_SEED, weights_path: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection { dir: PathBuf::from("runs") }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed. When set it overrides `train.seed` and seeds student
    /// initialization; otherwise `train.seed` plays both roles.
    pub seed: Option<u64>,
    /// Gaussian smoothing applied to anomaly maps.
    pub sigma: f64,
    pub dataset: DatasetConfig,
    pub model: ModelSection,
    pub loss: LossWeights,
    pub train: TrainConfig,
    pub split: SplitConfig,
    pub teacher: TeacherSection,
    pub output: OutputSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: None,
            sigma: DEFAULT_SIGMA,
            dataset: DatasetConfig::default(),
            model: ModelSection::default(),
            loss: LossWeights::default(),
            train: TrainConfig::default(),
            split: SplitConfig::default(),
            teacher: TeacherSection::default(),
            output: OutputSection::default(),
        }
    }
}

/// CLI flag values that take precedence over config-file keys.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub root: Option<PathBuf>,
    pub classes: Option<Vec<String>>,
    pub mode: Option<ModelMode>,
    pub input_size: Option<usize>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub sigma: Option<f64>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Load `path` (or defaults when absent), apply flag overrides, resolve
    /// the master seed, and validate.
    pub fn resolve(path: Option<&Path>, ov: &Overrides) -> Result<RunConfig> {
        let mut cfg = match path {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(v) = &ov.root {
            cfg.dataset.root = v.clone();
        }
        if let Some(v) = &ov.classes {
            cfg.dataset.classes = v.clone();
        }
        if let Some(v) = ov.mode {
            cfg.model.mode = v;
        }
        if let Some(v) = ov.input_size {
            cfg.model.input_size = v;
        }
        if let Some(v) = &ov.out {
            cfg.output.dir = v.clone();
        }
        if let Some(v) = ov.seed {
            cfg.seed = Some(v);
        }
        if let Some(v) = ov.epochs {
            cfg.train.epochs = v;
        }
        if let Some(v) = ov.batch_size {
            cfg.train.batch_size = v;
        }
        if let Some(v) = ov.learning_rate {
            cfg.train.learning_rate = v;
        }
        if let Some(v) = ov.sigma {
            cfg.sigma = v;
        }
        if let Some(seed) = cfg.seed {
            cfg.train.seed = seed;
        } else {
            cfg.seed = Some(cfg.train.seed);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.model.input_size < 64 || self.model.input_size % 32 != 0 {
            return Err(Error::Config(format!(
                "model.input_size must be a multiple of 32 and at least 64, got {}",
                self.model.input_size
            )));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::Config(format!("sigma must be positive, got {}", self.sigma)));
        }
        self.model.model_config().validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        Ok(())
    }

    /// The commands that read a dataset insist on at least one class.
    pub fn require_classes(&self) -> Result<()> {
        if self.dataset.classes.is_empty() {
            return Err(Error::Config(
                "dataset.classes is empty; name at least one class directory".into(),
            ));
        }
        let mut sorted = self.dataset.classes.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != self.dataset.classes.len() {
            return Err(Error::Config("dataset.classes contains duplicates".into()));
        }
        Ok(())
    }

    pub fn backbone(&self) -> BackboneSpec {
        let mut spec = BackboneSpec::resnet34_256();
        spec.input_size = self.model.input_size;
        spec
    }

    /// Snapshot the fully resolved configuration next to the outputs.
    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join("config_resolved.toml");
        let text = toml::to_string_pretty(self).expect("config serializes");
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

/// Load a standalone teacher-weight archive.
pub fn load_teacher_weights(path: &Path) -> Result<TeacherWeights> {
    let archive = archive::read_expect_kind(path, TEACHER_WEIGHTS_KIND)?;
    TeacherWeights::from_tensors(archive.tensors)
}

/// Build the frozen teacher for a run. Precedence: explicit archive path,
/// then a `resnet34.tensors` archive in the cache directory named by
/// `RDFABRIC_WEIGHTS_DIR`, then weights synthesized from `teacher.seed`.
/// Returns the teacher plus its provenance string for checkpoint metadata.
pub fn build_teacher(cfg: &RunConfig) -> Result<(Teacher, String)> {
    let backbone = cfg.backbone();
    if let Some(path) = &cfg.teacher.weights_path {
        let weights = load_teacher_weights(path)?;
        let teacher = Teacher::new(backbone, weights)?;
        return Ok((teacher, path.display().to_string()));
    }
    if let Some(dir) = std::env::var_os(WEIGHTS_DIR_ENV) {
        let cached = PathBuf::from(dir).join("resnet34.tensors");
        if cached.is_file() {
            let weights = load_teacher_weights(&cached)?;
            let teacher = Teacher::new(backbone, weights)?;
            return Ok((teacher, cached.display().to_string()));
        }
    }
    let teacher = Teacher::seeded(backbone, cfg.teacher.seed)?;
    Ok((teacher, format!("seeded:{}", cfg.teacher.seed)))
}

/// Reconstruct the frozen teacher a checkpoint was trained against and
/// verify it is bit-identical via the stored checksum.
pub fn teacher_from_meta(meta: &CheckpointMeta) -> Result<Teacher> {
    let teacher = match meta.weight_source.strip_prefix("seeded:") {
        Some(seed) => {
            let seed: u64 = seed.parse().map_err(|_| {
                Error::Config(format!("bad weight_source {:?} in checkpoint", meta.weight_source))
            })?;
            Teacher::seeded(meta.backbone.clone(), seed)?
        }
        None => {
            let weights = load_teacher_weights(Path::new(&meta.weight_source))?;
            Teacher::new(meta.backbone.clone(), weights)?
        }
    };
    if teacher.checksum() != meta.teacher_checksum {
        return Err(Error::Checksum {
            what: "teacher weights for checkpoint".into(),
            expected: meta.teacher_checksum.clone(),
            actual: teacher.checksum().to_string(),
        });
    }
    Ok(teacher)
}
