//! Optimization loop: Adam over the student-side parameters, plateau-halved
//! learning rate, early stopping, and best-validation-weight restoration.
//! The teacher is audited (by checksum) every epoch — it must never move.

use std::fs;
use std::path::Path;

use ndarray::{Array3, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::RdModel;
use crate::nn::{load_state_vector, state_vector, zero_grads, Adam};
use crate::objective::{objective_value, objective_with_grads, LossBreakdown, LossWeights};
use crate::teacher::{FeaturePyramid, Teacher};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlateauConfig {
    /// Multiplier applied to the learning rate after `patience` stagnant epochs.
    pub factor: f64,
    pub patience: usize,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        PlateauConfig { factor: 0.5, patience: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Reduce-on-plateau schedule, monitored on validation loss.
    pub plateau: PlateauConfig,
    /// Stop after this many epochs without a new best validation loss.
    pub early_stop_patience: usize,
    pub seed: u64,
    /// Run the frozen teacher once per image up front instead of once per
    /// epoch. Costs memory proportional to the dataset, saves most of the
    /// wall clock.
    pub cache_teacher_features: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.005,
            epochs: 100,
            batch_size: 4,
            plateau: PlateauConfig::default(),
            early_stop_patience: 20,
            seed: 0,
            cache_teacher_features: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        self.check_structure()
    }

    /// Everything except learning-rate positivity. `fit` itself accepts a
    /// zero learning rate (a frozen dry run that touches nothing); the
    /// config file contract does not.
    fn check_structure(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.plateau.patience == 0 || self.early_stop_patience == 0 {
            return Err(Error::Config("patience values must be at least 1".into()));
        }
        if !(self.plateau.factor > 0.0 && self.plateau.factor < 1.0) {
            return Err(Error::Config(format!(
                "plateau.factor must lie in (0, 1), got {}",
                self.plateau.factor
            )));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!(
                "learning_rate must be non-negative, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// One line of the per-epoch training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

/// One line of the per-step loss log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub per_layer: [f64; 4],
    pub distill_total: f64,
    pub sspcab: f64,
    pub grand_total: f64,
}

#[derive(Debug, Clone)]
pub struct FitReport {
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub epochs_run: usize,
    pub stopped_early: bool,
    pub final_lr: f64,
    pub epoch_log: Vec<EpochRecord>,
    pub step_log: Vec<StepRecord>,
}

impl FitReport {
    pub fn first_val_loss(&self) -> f64 {
        self.epoch_log.first().map(|e| e.val_loss).unwrap_or(f64::NAN)
    }
}

/// Teacher features for each image individually (batch dimension 1), ready
/// to be gathered into shuffled batches.
pub fn precompute_pyramids(
    teacher: &Teacher,
    images: &[Array3<f32>],
) -> Result<Vec<FeaturePyramid<f32>>> {
    images
        .iter()
        .map(|img| teacher.extract_features(&img.clone().insert_axis(Axis(0))))
        .collect()
}

fn gather_pyramids(cache: &[FeaturePyramid<f32>], idxs: &[usize]) -> Result<FeaturePyramid<f32>> {
    let n_taps = cache[0].taps.len();
    let mut taps = Vec::with_capacity(n_taps);
    for l in 0..n_taps {
        let views: Vec<_> = idxs.iter().map(|&i| cache[i].taps[l].view()).collect();
        taps.push(
            ndarray::concatenate(Axis(0), &views).map_err(|e| Error::Train(e.to_string()))?,
        );
    }
    FeaturePyramid::new(taps)
}

fn batch_pyramid(
    teacher: &Teacher,
    images: &[Array3<f32>],
    cache: Option<&[FeaturePyramid<f32>]>,
    idxs: &[usize],
) -> Result<FeaturePyramid<f32>> {
    match cache {
        Some(cache) => gather_pyramids(cache, idxs),
        None => {
            let views: Vec<_> = idxs.iter().map(|&i| images[i].view()).collect();
            let batch =
                ndarray::stack(Axis(0), &views).map_err(|e| Error::Train(e.to_string()))?;
            teacher.extract_features(&batch)
        }
    }
}

/// One optimizer step on one batch: forward, loss, backward, Adam update.
/// Divergence (non-finite loss) aborts before the weights are poisoned.
pub fn train_step(
    model: &mut RdModel<f32>,
    pyr: &FeaturePyramid<f32>,
    weights: &LossWeights,
    opt: &mut Adam<f32>,
) -> Result<LossBreakdown> {
    zero_grads(model);
    let (out, cache) = model.forward_train(pyr)?;
    let (breakdown, grads) = objective_with_grads(pyr, &out, weights)?;
    if !breakdown.total.is_finite() {
        return Err(Error::Train(format!(
            "training diverged: grand_total = {}",
            breakdown.total
        )));
    }
    model.backward(pyr, &cache, &grads.d_student, &grads.d_sspcab_out, &grads.d_fused);
    opt.step(model);
    Ok(breakdown)
}

/// Mean grand_total over the validation set in evaluation mode, weighted by
/// batch size so the value equals the per-sample mean regardless of how the
/// set tiles into batches.
pub fn validate(
    val: &[Array3<f32>],
    model: &RdModel<f32>,
    teacher: &Teacher,
    weights: &LossWeights,
    batch_size: usize,
    cache: Option<&[FeaturePyramid<f32>]>,
) -> Result<f64> {
    if val.is_empty() {
        return Err(Error::Train("validation set is empty".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    let idxs: Vec<usize> = (0..val.len()).collect();
    let mut sum = 0.0;
    for chunk in idxs.chunks(batch_size) {
        let pyr = batch_pyramid(teacher, val, cache, chunk)?;
        let out = model.forward_eval(&pyr)?;
        let breakdown = objective_value(&pyr, &out, weights)?;
        sum += breakdown.total * chunk.len() as f64;
    }
    Ok(sum / val.len() as f64)
}

/// Train `model` against the frozen `teacher`, returning the loss history.
/// On return the model holds the weights of the best validation epoch.
pub fn fit(
    train: &[Array3<f32>],
    val: &[Array3<f32>],
    model: &mut RdModel<f32>,
    teacher: &Teacher,
    weights: &LossWeights,
    config: &TrainConfig,
) -> Result<FitReport> {
    if train.is_empty() {
        return Err(Error::Train("training set is empty".into()));
    }
    if val.is_empty() {
        return Err(Error::Train("validation set is empty".into()));
    }
    weights.validate()?;
    config.check_structure()?;
    let frozen = config.learning_rate == 0.0;

    let checksum_before = teacher.checksum().to_string();
    teacher.verify_unchanged()?;

    let (train_cache, val_cache) = if config.cache_teacher_features {
        (Some(precompute_pyramids(teacher, train)?), Some(precompute_pyramids(teacher, val)?))
    } else {
        (None, None)
    };

    let mut opt = Adam::new(config.learning_rate);
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0;
    let mut best_state: Option<Vec<ndarray::ArrayD<f32>>> = None;
    let mut stagnant = 0usize;
    let mut plateau_stagnant = 0usize;
    let mut stopped_early = false;
    let mut epoch_log = Vec::new();
    let mut step_log = Vec::new();
    let mut step = 0u64;

    for epoch in 1..=config.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut rng = ChaCha20Rng::seed_from_u64(config.seed.wrapping_add(epoch as u64));
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let pyr = batch_pyramid(teacher, train, train_cache.as_deref(), chunk)?;
            let breakdown = if frozen {
                // Zero learning rate means "touch nothing": evaluate the loss
                // without updating weights or batch-norm running statistics.
                let out = model.forward_eval(&pyr)?;
                objective_value(&pyr, &out, weights)?
            } else {
                train_step(model, &pyr, weights, &mut opt)?
            };
            step += 1;
            step_log.push(StepRecord {
                step,
                per_layer: breakdown.per_layer,
                distill_total: breakdown.distill,
                sspcab: breakdown.aux,
                grand_total: breakdown.total,
            });
            loss_sum += breakdown.total * chunk.len() as f64;
        }
        let train_loss = loss_sum / train.len() as f64;
        let val_loss =
            validate(val, model, teacher, weights, config.batch_size, val_cache.as_deref())?;
        if !val_loss.is_finite() {
            return Err(Error::Train(format!(
                "validation diverged at epoch {epoch}: val_loss = {val_loss}"
            )));
        }
        epoch_log.push(EpochRecord { epoch, train_loss, val_loss, lr: opt.lr() });
        teacher.verify_unchanged()?;

        if val_loss < best_val {
            best_val = val_loss;
            best_epoch = epoch;
            best_state = Some(state_vector(model));
            stagnant = 0;
            plateau_stagnant = 0;
        } else {
            stagnant += 1;
            plateau_stagnant += 1;
        }
        if plateau_stagnant >= config.plateau.patience {
            opt.set_lr(opt.lr() * config.plateau.factor);
            plateau_stagnant = 0;
        }
        if stagnant >= config.early_stop_patience {
            stopped_early = true;
            break;
        }
    }

    if let Some(state) = &best_state {
        load_state_vector(model, state);
    }
    teacher.verify_unchanged()?;
    debug_assert_eq!(teacher.checksum(), checksum_before);

    Ok(FitReport {
        best_epoch,
        best_val_loss: best_val,
        epochs_run: epoch_log.len(),
        stopped_early,
        final_lr: opt.lr(),
        epoch_log,
        step_log,
    })
}

/// Write serializable rows as JSON lines.
pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut text = String::new();
    for row in rows {
        text.push_str(&serde_json::to_string(row).expect("log row serializes"));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
