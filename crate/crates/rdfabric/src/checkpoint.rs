//! Checkpoints: the trained model's full state plus the context needed to
//! rebuild and audit it — architecture config, backbone identity, training
//! recipe, and the teacher checksum the weights were distilled against.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::archive::{self, Archive};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, RdModel};
use crate::nn::{named_state, Module};
use crate::teacher::{ArchPlan, BackboneSpec};
use crate::trainer::TrainConfig;

pub const CHECKPOINT_KIND: &str = "checkpoint";

/// Everything about a trained model except the tensors themselves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model_config: ModelConfig,
    /// Tap/bottleneck geometry; self-contained so loading never has to
    /// guess the architecture from the input size.
    pub plan: ArchPlan,
    pub backbone: BackboneSpec,
    pub train_config: TrainConfig,
    /// Epoch the stored weights come from (the best validation epoch).
    pub epoch: usize,
    pub val_loss: f64,
    pub teacher_checksum: String,
    /// Provenance of the teacher weights, e.g. `"seeded:17"` or a file path.
    pub weight_source: String,
}

pub fn save_checkpoint(
    path: &Path,
    model: &mut RdModel<f32>,
    meta: &CheckpointMeta,
) -> Result<()> {
    let archive = Archive {
        kind: CHECKPOINT_KIND.into(),
        meta: serde_json::to_value(meta).expect("checkpoint meta serializes"),
        tensors: named_state(model),
    };
    archive::write(path, &archive)
}

pub fn load_checkpoint(path: &Path) -> Result<(RdModel<f32>, CheckpointMeta)> {
    let archive = archive::read_expect_kind(path, CHECKPOINT_KIND)?;
    let meta: CheckpointMeta = serde_json::from_value(archive.meta)
        .map_err(|e| Error::Archive(format!("bad checkpoint metadata: {e}")))?;
    meta.backbone.validate()?;
    meta.model_config.validate()?;
    meta.plan.validate()?;
    if meta.plan.input_size != meta.backbone.input_size {
        return Err(Error::Archive(format!(
            "plan input size {} does not match backbone input size {}",
            meta.plan.input_size, meta.backbone.input_size
        )));
    }

    // Seed value is irrelevant: every parameter and buffer is overwritten.
    let mut model = RdModel::<f32>::seeded(&meta.plan, &meta.model_config, 0)?;

    let mut tensors: HashMap<String, ndarray::ArrayD<f32>> =
        archive.tensors.into_iter().collect();
    let mut problems: Vec<String> = Vec::new();
    let mut restore = |name: &str, dst: &mut ndarray::ArrayD<f32>| match tensors.remove(name) {
        Some(t) if t.shape() == dst.shape() => dst.assign(&t),
        Some(t) => problems.push(format!(
            "{name}: stored shape {:?} does not fit {:?}",
            t.shape(),
            dst.shape()
        )),
        None => problems.push(format!("{name}: missing from checkpoint")),
    };
    model.visit_params("", &mut |name, p| restore(name, &mut p.value));
    model.visit_buffers("", &mut |name, b| restore(name, b));
    for name in tensors.keys() {
        problems.push(format!("{name}: not part of this architecture"));
    }
    if !problems.is_empty() {
        problems.sort();
        return Err(Error::Archive(format!("checkpoint mismatch: {}", problems.join("; "))));
    }
    Ok((model, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Adam, Init};
    use crate::objective::LossWeights;
    use crate::teacher::FeaturePyramid;
    use crate::trainer::train_step;

    fn tiny_pyramid(seed: u64) -> FeaturePyramid<f32> {
        let plan = ArchPlan::tiny();
        let mut init = Init::seeded(seed);
        let taps = (0..4)
            .map(|l| {
                let (h, w) = plan.tap_hw[l];
                init.normal::<f32>(&[2, plan.tap_channels[l], h, w], 1.0)
                    .into_dimensionality()
                    .unwrap()
            })
            .collect();
        FeaturePyramid::new(taps).unwrap()
    }

    fn tiny_backbone() -> BackboneSpec {
        // The tiny plan is not a real backbone; checkpoints only consult
        // input_size here, so borrow the resnet spec with the test size.
        let mut spec = BackboneSpec::resnet34_256();
        spec.input_size = ArchPlan::tiny().input_size;
        spec
    }

    fn sample_meta() -> CheckpointMeta {
        CheckpointMeta {
            model_config: ModelConfig::default(),
            plan: ArchPlan::tiny(),
            backbone: tiny_backbone(),
            train_config: TrainConfig::default(),
            epoch: 17,
            val_loss: 0.25,
            teacher_checksum: "cafe".into(),
            weight_source: "seeded:17".into(),
        }
    }

    #[test]
    fn round_trip_preserves_outputs_bit_for_bit() {
        let dir = tempfile::TempDir::new().unwrap();
        let path = dir.path().join("model.ckpt");
        let plan = ArchPlan::tiny();
        let mut model = RdModel::<f32>::seeded(&plan, &ModelConfig::default(), 3).unwrap();

        // Take a few optimizer steps so batch-norm buffers and Adam-touched
        // weights all differ from initialization.
        let pyr = tiny_pyramid(8);
        let mut opt = Adam::new(0.01);
        for _ in 0..3 {
            train_step(&mut model, &pyr, &LossWeights::default(), &mut opt).unwrap();
        }

        let meta = sample_meta();
        save_checkpoint(&path, &mut model, &meta).unwrap();
        let (mut loaded, loaded_meta) = load_checkpoint(&path).unwrap();
        assert_eq!(loaded_meta, meta);

        let probe = tiny_pyramid(9);
        let want = model.forward_eval(&probe).unwrap();
        let got = loaded.forward_eval(&probe).unwrap();
        for l in 0..4 {
            assert_eq!(want.student[l], got.student[l], "student output {l}");
        }
        assert_eq!(want.fused, got.fused);
        assert_eq!(want.sspcab_out, got.sspcab_out);
        assert_eq!(crate::nn::state_vector(&mut model), crate::nn::state_vector(&mut loaded));
    }

    #[test]
    fn corrupt_and_mislabeled_files_are_rejected() {
        let dir = tempfile::TempDir::new().unwrap();
        let path = dir.path().join("model.ckpt");
        let plan = ArchPlan::tiny();
        let mut model = RdModel::<f32>::seeded(&plan, &ModelConfig::default(), 3).unwrap();
        save_checkpoint(&path, &mut model, &sample_meta()).unwrap();

        // Flip one byte in the middle: the integrity hash must catch it.
        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        std::fs::write(&path, &bytes).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(
            matches!(&err, Error::Archive(msg) if msg.contains("corrupt")),
            "got {err:?}"
        );

        // A valid archive of the wrong kind is a version/kind error.
        let other = dir.path().join("other.bin");
        let archive = Archive {
            kind: "not-a-checkpoint".into(),
            meta: serde_json::Value::Null,
            tensors: vec![],
        };
        archive::write(&other, &archive).unwrap();
        assert!(load_checkpoint(&other).is_err());
    }

    #[test]
    fn structural_drift_is_reported_by_tensor_name() {
        let dir = tempfile::TempDir::new().unwrap();
        let plan = ArchPlan::tiny();
        let mut model = RdModel::<f32>::seeded(&plan, &ModelConfig::default(), 3).unwrap();

        let mut base = Archive {
            kind: CHECKPOINT_KIND.into(),
            meta: serde_json::to_value(sample_meta()).unwrap(),
            tensors: named_state(&mut model),
        };

        // Remove one tensor.
        let removed = base.tensors.remove(0).0;
        let path = dir.path().join("missing.ckpt");
        archive::write(&path, &base).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains(&removed), "{err}");

        // Add a stray one.
        base.tensors = named_state(&mut model);
        base.tensors.push(("leftover.weight".into(), ndarray::ArrayD::zeros(vec![1])));
        let path = dir.path().join("extra.ckpt");
        archive::write(&path, &base).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("leftover.weight"), "{err}");
    }
}
