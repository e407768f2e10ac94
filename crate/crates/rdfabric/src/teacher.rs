//! Frozen feature-extraction backbone (ResNet-34 up to its third stage).
//!
//! The teacher is frozen structurally: weights are folded into plain
//! convolution arrays with no gradient storage at all, every entry point
//! takes `&self`, and nothing here implements the trainable-module trait.
//! Batch-norm layers are permanently in evaluation mode — their affine
//! transforms are folded into the preceding convolutions at construction.

use ndarray::{Array1, Array4, ArrayD};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::conv::conv2d_forward;
use crate::nn::ops::{max_pool_3x3_s2_p1, relu};
use crate::nn::{Init, Scalar};

const BN_EPS: f64 = 1e-5;

/// Per-channel input normalization statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl NormStats {
    /// The ImageNet statistics the backbone was trained with.
    pub fn imagenet() -> Self {
        NormStats { mean: [0.485, 0.456, 0.406], std: [0.229, 0.224, 0.225] }
    }
}

/// Which backbone to build and where to read features from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub architecture: String,
    /// In depth order: the post-stem features and the first three stages.
    pub tap_names: Vec<String>,
    pub input_size: usize,
    pub normalization: NormStats,
}

impl BackboneSpec {
    pub fn resnet34_256() -> Self {
        BackboneSpec {
            architecture: "resnet34".into(),
            tap_names: vec!["pre_block".into(), "stage1".into(), "stage2".into(), "stage3".into()],
            input_size: 256,
            normalization: NormStats::imagenet(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.architecture != "resnet34" {
            return Err(Error::Config(format!(
                "unsupported backbone architecture {:?} (only resnet34 is built in)",
                self.architecture
            )));
        }
        if self.tap_names.len() != 4 {
            return Err(Error::Config(format!(
                "expected 4 tap names, got {}",
                self.tap_names.len()
            )));
        }
        if self.input_size % 64 != 0 || self.input_size == 0 {
            return Err(Error::Config(format!(
                "input size {} must be a positive multiple of 64",
                self.input_size
            )));
        }
        for (i, s) in self.normalization.std.iter().enumerate() {
            if *s <= 0.0 {
                return Err(Error::Config(format!("normalization std[{i}] must be positive")));
            }
        }
        Ok(())
    }
}

impl Default for BackboneSpec {
    fn default() -> Self {
        BackboneSpec::resnet34_256()
    }
}

/// Channel/spatial layout shared by the teacher taps, the fusion bottleneck
/// and the student decoder. All the wiring reads sizes from here.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchPlan {
    pub input_size: usize,
    pub tap_channels: [usize; 4],
    pub tap_hw: [(usize, usize); 4],
    /// Channels each tap is projected to before concatenation.
    pub proj_channels: usize,
    /// Spatial size everything is pooled to before concatenation.
    pub fused_hw: (usize, usize),
    pub embed_channels: usize,
}

impl ArchPlan {
    /// The production plan for a 256px ResNet-34 teacher.
    pub fn standard() -> Self {
        ArchPlan::for_input(256)
    }

    pub fn for_input(input_size: usize) -> Self {
        let q = input_size / 4;
        ArchPlan {
            input_size,
            tap_channels: [64, 64, 128, 256],
            tap_hw: [(q, q), (q, q), (q / 2, q / 2), (q / 4, q / 4)],
            proj_channels: 256,
            fused_hw: (q / 8, q / 8),
            embed_channels: 512,
        }
    }

    /// Small plan for f64 gradient verification and other diagnostics —
    /// same topology, a fraction of the arithmetic.
    pub fn tiny() -> Self {
        ArchPlan {
            input_size: 64,
            tap_channels: [4, 4, 8, 16],
            tap_hw: [(16, 16), (16, 16), (8, 8), (4, 4)],
            proj_channels: 4,
            fused_hw: (2, 2),
            embed_channels: 8,
        }
    }

    pub fn fused_channels(&self) -> usize {
        self.proj_channels * 4
    }

    pub fn embed_hw(&self) -> (usize, usize) {
        (self.fused_hw.0 / 2, self.fused_hw.1 / 2)
    }

    /// Integer pooling factor that takes tap `l` down to the fused size.
    pub fn pool_factor(&self, tap: usize) -> usize {
        self.tap_hw[tap].0 / self.fused_hw.0
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.tap_channels[0] != self.tap_channels[1] {
            return err("plan requires equal channels on the first two taps".into());
        }
        if self.fused_hw.0 < 2 || self.fused_hw.0 != self.fused_hw.1 {
            return err(format!("fused size {:?} must be square and at least 2", self.fused_hw));
        }
        for l in 0..4 {
            let (h, w) = self.tap_hw[l];
            if h != w {
                return err(format!("tap {l} is not square: {h}x{w}"));
            }
            if h % self.fused_hw.0 != 0 {
                return err(format!("tap {l} size {h} is not a multiple of fused size {}", self.fused_hw.0));
            }
        }
        if self.tap_hw[0] != self.tap_hw[1]
            || self.tap_hw[1].0 != 2 * self.tap_hw[2].0
            || self.tap_hw[2].0 != 2 * self.tap_hw[3].0
        {
            return err("tap sizes must follow the s, s, s/2, s/4 ladder".into());
        }
        if self.tap_hw[3].0 != 2 * self.fused_hw.0 {
            return err("fused size must be half the deepest tap".into());
        }
        Ok(())
    }
}

/// The four teacher feature maps for one batch, shallowest first.
#[derive(Debug, Clone)]
pub struct FeaturePyramid<F> {
    pub taps: Vec<Array4<F>>,
}

impl<F: Scalar> FeaturePyramid<F> {
    pub fn new(taps: Vec<Array4<F>>) -> Result<Self> {
        if taps.len() != 4 {
            return Err(Error::Shape {
                op: "feature_pyramid",
                message: format!("expected 4 taps, got {}", taps.len()),
            });
        }
        let b = taps[0].dim().0;
        for (l, t) in taps.iter().enumerate() {
            if t.dim().0 != b {
                return Err(Error::Shape {
                    op: "feature_pyramid",
                    message: format!("tap {l} batch {} != tap 0 batch {b}", t.dim().0),
                });
            }
        }
        Ok(FeaturePyramid { taps })
    }

    pub fn batch(&self) -> usize {
        self.taps[0].dim().0
    }

    pub fn validate_for(&self, plan: &ArchPlan) -> Result<()> {
        let b = self.batch();
        for l in 0..4 {
            let got = self.taps[l].dim();
            let want = (b, plan.tap_channels[l], plan.tap_hw[l].0, plan.tap_hw[l].1);
            if got != want {
                return Err(Error::Shape {
                    op: "feature_pyramid",
                    message: format!("tap {l}: got {got:?}, plan requires {want:?}"),
                });
            }
        }
        Ok(())
    }
}

/// (stage name, in channels, out channels, block count, first-block stride)
const STAGES: [(&str, usize, usize, usize, usize); 3] =
    [("layer1", 64, 64, 3, 1), ("layer2", 64, 128, 4, 2), ("layer3", 128, 256, 6, 2)];

/// The raw backbone tensors in canonical (state-dict) order. Checksums are
/// computed over this ordering, so they identify the weight set regardless
/// of the order a file happened to store it in.
#[derive(Debug, Clone)]
pub struct TeacherWeights {
    tensors: Vec<(String, ArrayD<f32>)>,
}

impl TeacherWeights {
    /// Names and shapes of every tensor a ResNet-34 feature extractor needs,
    /// in canonical order.
    pub fn expected() -> Vec<(String, Vec<usize>)> {
        let mut out: Vec<(String, Vec<usize>)> = Vec::new();
        let bn = |out: &mut Vec<(String, Vec<usize>)>, name: &str, c: usize| {
            for leaf in ["weight", "bias", "running_mean", "running_var"] {
                out.push((format!("{name}.{leaf}"), vec![c]));
            }
        };
        out.push(("conv1.weight".into(), vec![64, 3, 7, 7]));
        bn(&mut out, "bn1", 64);
        for (stage, c_in, c_out, blocks, stride) in STAGES {
            for i in 0..blocks {
                let b_in = if i == 0 { c_in } else { c_out };
                out.push((format!("{stage}.{i}.conv1.weight"), vec![c_out, b_in, 3, 3]));
                bn(&mut out, &format!("{stage}.{i}.bn1"), c_out);
                out.push((format!("{stage}.{i}.conv2.weight"), vec![c_out, c_out, 3, 3]));
                bn(&mut out, &format!("{stage}.{i}.bn2"), c_out);
                if i == 0 && (stride != 1 || c_in != c_out) {
                    out.push((format!("{stage}.{i}.downsample.0.weight"), vec![c_out, c_in, 1, 1]));
                    bn(&mut out, &format!("{stage}.{i}.downsample.1"), c_out);
                }
            }
        }
        out
    }

    /// Deterministic stand-in weights: He-initialized convolutions with
    /// identity batch-norm statistics. Useful where pretrained weights are
    /// unavailable; the random projections still yield a serviceable
    /// texture descriptor.
    pub fn seeded(seed: u64) -> Self {
        let mut init = Init::seeded(seed);
        let tensors = TeacherWeights::expected()
            .into_iter()
            .map(|(name, shape)| {
                let t = if name.ends_with("conv1.weight")
                    || name.ends_with("conv2.weight")
                    || name.ends_with("downsample.0.weight")
                {
                    init.he_conv::<f32>(shape[0], shape[1], shape[2])
                } else if name.ends_with(".weight") || name.ends_with("running_var") {
                    ArrayD::from_elem(ndarray::IxDyn(&shape), 1.0f32)
                } else {
                    ArrayD::zeros(ndarray::IxDyn(&shape))
                };
                (name, t)
            })
            .collect();
        TeacherWeights { tensors }
    }

    /// Validate a loose tensor collection and put it in canonical order.
    pub fn from_tensors(mut tensors: Vec<(String, ArrayD<f32>)>) -> Result<Self> {
        let mut canonical = Vec::with_capacity(tensors.len());
        for (name, shape) in TeacherWeights::expected() {
            let pos = tensors.iter().position(|(n, _)| *n == name).ok_or_else(|| {
                Error::Archive(format!("teacher weights: missing tensor {name}"))
            })?;
            let (name, t) = tensors.swap_remove(pos);
            if t.shape() != shape.as_slice() {
                return Err(Error::Archive(format!(
                    "teacher weights: {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            canonical.push((name, t));
        }
        if let Some((stray, _)) = tensors.first() {
            return Err(Error::Archive(format!(
                "teacher weights: unexpected tensor {stray} (and {} more)",
                tensors.len() - 1
            )));
        }
        Ok(TeacherWeights { tensors: canonical })
    }

    pub fn tensors(&self) -> &[(String, ArrayD<f32>)] {
        &self.tensors
    }

    fn get(&self, name: &str) -> &ArrayD<f32> {
        &self
            .tensors
            .iter()
            .find(|(n, _)| n == name)
            .unwrap_or_else(|| panic!("validated weights are missing {name}"))
            .1
    }

    /// SHA-256 over names, shapes and little-endian data in canonical order.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.tensors {
            h.update(name.as_bytes());
            h.update([0u8]);
            h.update((t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &v in t.iter() {
                h.update(v.to_le_bytes());
            }
        }
        hex(&h.finalize())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

/// A convolution with its successor batch-norm folded in. Weights only —
/// there is no gradient side to this struct.
struct FoldedConv {
    weight: Array4<f32>,
    bias: Array1<f32>,
    stride: usize,
    padding: usize,
}

impl FoldedConv {
    fn fold(w: &TeacherWeights, conv: &str, bn: &str, stride: usize, padding: usize) -> Self {
        let cw = w.get(&format!("{conv}.weight"));
        let gamma = w.get(&format!("{bn}.weight"));
        let beta = w.get(&format!("{bn}.bias"));
        let rm = w.get(&format!("{bn}.running_mean"));
        let rv = w.get(&format!("{bn}.running_var"));
        let c_out = cw.shape()[0];
        let mut weight: Array4<f32> = cw.view().into_dimensionality().unwrap().to_owned();
        let mut bias = Array1::<f32>::zeros(c_out);
        for co in 0..c_out {
            let a = gamma[co] as f64 / ((rv[co] as f64) + BN_EPS).sqrt();
            weight.index_axis_mut(ndarray::Axis(0), co).mapv_inplace(|v| (v as f64 * a) as f32);
            bias[co] = (beta[co] as f64 - a * rm[co] as f64) as f32;
        }
        FoldedConv { weight, bias, stride, padding }
    }

    fn forward(&self, x: &Array4<f32>) -> Array4<f32> {
        conv2d_forward(
            &self.weight.view(),
            Some(&self.bias.view()),
            self.stride,
            self.padding,
            x,
        )
    }
}

struct TeacherBlock {
    conv1: FoldedConv,
    conv2: FoldedConv,
    down: Option<FoldedConv>,
}

impl TeacherBlock {
    fn forward(&self, x: &Array4<f32>) -> Array4<f32> {
        let mut h = relu(&self.conv1.forward(x));
        h = self.conv2.forward(&h);
        match &self.down {
            Some(d) => h += &d.forward(x),
            None => h += x,
        }
        relu(&h)
    }
}

/// Seed for the default reproducible teacher weights when no weight file is
/// supplied. Every artifact records the resulting checksum, so two machines
/// disagreeing about the teacher is detectable, not silent.
pub const DEFAULT_TEACHER_SEED: u64 = 17;

/// The frozen feature extractor.
pub struct Teacher {
    spec: BackboneSpec,
    weights: TeacherWeights,
    checksum: String,
    stem: FoldedConv,
    stages: Vec<Vec<TeacherBlock>>,
}

impl Teacher {
    pub fn new(spec: BackboneSpec, weights: TeacherWeights) -> Result<Self> {
        spec.validate()?;
        let stem = FoldedConv::fold(&weights, "conv1", "bn1", 2, 3);
        let mut stages = Vec::new();
        for (stage, c_in, c_out, blocks, stride) in STAGES {
            let mut bs = Vec::new();
            for i in 0..blocks {
                let s = if i == 0 { stride } else { 1 };
                let down = (i == 0 && (stride != 1 || c_in != c_out)).then(|| {
                    FoldedConv::fold(
                        &weights,
                        &format!("{stage}.{i}.downsample.0"),
                        &format!("{stage}.{i}.downsample.1"),
                        s,
                        0,
                    )
                });
                bs.push(TeacherBlock {
                    conv1: FoldedConv::fold(
                        &weights,
                        &format!("{stage}.{i}.conv1"),
                        &format!("{stage}.{i}.bn1"),
                        s,
                        1,
                    ),
                    conv2: FoldedConv::fold(
                        &weights,
                        &format!("{stage}.{i}.conv2"),
                        &format!("{stage}.{i}.bn2"),
                        1,
                        1,
                    ),
                    down,
                });
            }
            stages.push(bs);
        }
        let checksum = weights.checksum();
        Ok(Teacher { spec, weights, checksum, stem, stages })
    }

    pub fn seeded(spec: BackboneSpec, seed: u64) -> Result<Self> {
        Teacher::new(spec, TeacherWeights::seeded(seed))
    }

    pub fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    pub fn plan(&self) -> ArchPlan {
        ArchPlan::for_input(self.spec.input_size)
    }

    pub fn weights(&self) -> &TeacherWeights {
        &self.weights
    }

    /// Checksum computed at construction time.
    pub fn checksum(&self) -> &str {
        &self.checksum
    }

    /// The teacher is frozen by construction; nothing here can be handed to
    /// an optimizer. Kept as an explicit, testable statement of that fact.
    pub fn trainable_param_count(&self) -> usize {
        0
    }

    /// Re-hash the stored tensors and compare with the construction-time
    /// checksum. Called by the trainer to audit teacher immutability.
    pub fn verify_unchanged(&self) -> Result<()> {
        let now = self.weights.checksum();
        if now != self.checksum {
            return Err(Error::Checksum {
                what: "teacher weights".into(),
                expected: self.checksum.clone(),
                actual: now,
            });
        }
        Ok(())
    }

    /// Run the backbone on a normalized batch `[b, 3, s, s]` and return the
    /// four tap feature maps.
    pub fn extract_features(&self, x: &Array4<f32>) -> Result<FeaturePyramid<f32>> {
        let (_, c, h, w) = x.dim();
        let s = self.spec.input_size;
        if c != 3 || h != s || w != s {
            return Err(Error::Shape {
                op: "extract_features",
                message: format!(
                    "input must be [batch, 3, {s}, {s}], got {:?}",
                    x.shape()
                ),
            });
        }
        let mut h = relu(&self.stem.forward(x));
        h = max_pool_3x3_s2_p1(&h);
        let mut taps = Vec::with_capacity(4);
        taps.push(h.clone());
        for stage in &self.stages {
            for block in stage {
                h = block.forward(&h);
            }
            taps.push(h.clone());
        }
        FeaturePyramid::new(taps)
    }
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::BatchNorm2d;

    #[test]
    fn plan_standard_matches_pinned_layout() {
        let p = ArchPlan::standard();
        p.validate().unwrap();
        assert_eq!(p.tap_channels, [64, 64, 128, 256]);
        assert_eq!(p.tap_hw, [(64, 64), (64, 64), (32, 32), (16, 16)]);
        assert_eq!(p.fused_channels(), 1024);
        assert_eq!(p.fused_hw, (8, 8));
        assert_eq!(p.embed_channels, 512);
        assert_eq!(p.embed_hw(), (4, 4));
        assert_eq!(
            [p.pool_factor(0), p.pool_factor(1), p.pool_factor(2), p.pool_factor(3)],
            [8, 8, 4, 2]
        );
        ArchPlan::tiny().validate().unwrap();
    }

    #[test]
    fn expected_tensor_table_is_resnet34_sized() {
        let table = TeacherWeights::expected();
        // 1 stem conv + 1 stem bn(4) + 13 blocks * (2 conv + 2 bn(4)) + 2 downsample pairs
        let params: usize = table
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum();
        // conv-only parameter count of resnet34 through stage3, plus bn tensors
        assert_eq!(table.len(), 1 + 4 + 13 * (2 + 8) + 2 * (1 + 4));
        assert!(params > 8_000_000 && params < 9_000_000, "{params}");
    }

    #[test]
    fn seeded_weights_are_deterministic() {
        let a = TeacherWeights::seeded(9).checksum();
        let b = TeacherWeights::seeded(9).checksum();
        let c = TeacherWeights::seeded(10).checksum();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.len(), 64);
    }

    #[test]
    fn from_tensors_validates_the_set() {
        let good = TeacherWeights::seeded(1);
        let reordered: Vec<_> = good.tensors().iter().rev().cloned().collect();
        let back = TeacherWeights::from_tensors(reordered).unwrap();
        assert_eq!(back.checksum(), good.checksum(), "canonical order fixes the checksum");

        let mut missing: Vec<_> = good.tensors().to_vec();
        missing.remove(3);
        assert!(TeacherWeights::from_tensors(missing).unwrap_err().to_string().contains("missing"));

        let mut extra: Vec<_> = good.tensors().to_vec();
        extra.push(("layer9.0.conv1.weight".into(), ArrayD::zeros(ndarray::IxDyn(&[1]))));
        assert!(TeacherWeights::from_tensors(extra).unwrap_err().to_string().contains("unexpected"));

        let mut bad_shape: Vec<_> = good.tensors().to_vec();
        bad_shape[0].1 = ArrayD::zeros(ndarray::IxDyn(&[64, 3, 3, 3]));
        assert!(TeacherWeights::from_tensors(bad_shape).unwrap_err().to_string().contains("shape"));
    }

    #[test]
    fn folding_matches_conv_then_eval_batchnorm() {
        let w = TeacherWeights::seeded(4);
        // Give the stem bn non-trivial statistics, then fold.
        let mut tensors = w.tensors().to_vec();
        let mut init = Init::seeded(5);
        for (name, t) in tensors.iter_mut() {
            if name.starts_with("bn1.") {
                *t = init.normal::<f32>(&[64], 0.4);
                if name.ends_with("running_var") {
                    t.mapv_inplace(|v| v * v + 0.5); // keep positive
                }
            }
        }
        let w = TeacherWeights::from_tensors(tensors).unwrap();
        let folded = FoldedConv::fold(&w, "conv1", "bn1", 2, 3);

        let x: Array4<f32> = Init::seeded(6)
            .normal::<f32>(&[1, 3, 32, 32], 1.0)
            .into_dimensionality()
            .unwrap();
        let got = folded.forward(&x);

        let cw: Array4<f32> = w.get("conv1.weight").view().into_dimensionality().unwrap().to_owned();
        let pre = conv2d_forward(&cw.view(), None, 2, 3, &x);
        let mut bn = BatchNorm2d::<f32>::new(64);
        bn.eps = BN_EPS;
        bn.gamma.value.assign(w.get("bn1.weight"));
        bn.beta.value.assign(w.get("bn1.bias"));
        bn.running_mean.assign(w.get("bn1.running_mean"));
        bn.running_var.assign(w.get("bn1.running_var"));
        let want = bn.forward_eval(&pre);

        for (a, b) in got.iter().zip(want.iter()) {
            assert!((a - b).abs() <= 1e-4 * b.abs().max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn features_have_the_pinned_shapes() {
        let t = Teacher::seeded(BackboneSpec::resnet34_256(), 11).unwrap();
        let x: Array4<f32> = Init::seeded(12)
            .normal::<f32>(&[2, 3, 256, 256], 1.0)
            .into_dimensionality()
            .unwrap();
        let pyr = t.extract_features(&x).unwrap();
        pyr.validate_for(&t.plan()).unwrap();
        assert_eq!(pyr.taps[0].dim(), (2, 64, 64, 64));
        assert_eq!(pyr.taps[1].dim(), (2, 64, 64, 64));
        assert_eq!(pyr.taps[2].dim(), (2, 128, 32, 32));
        assert_eq!(pyr.taps[3].dim(), (2, 256, 16, 16));
        assert_eq!(t.trainable_param_count(), 0);
        t.verify_unchanged().unwrap();
    }

    #[test]
    fn identical_samples_get_identical_features() {
        let t = Teacher::seeded(BackboneSpec::resnet34_256(), 13).unwrap();
        let one: Array4<f32> = Init::seeded(14)
            .normal::<f32>(&[1, 3, 256, 256], 1.0)
            .into_dimensionality()
            .unwrap();
        let mut two = Array4::<f32>::zeros((2, 3, 256, 256));
        two.index_axis_mut(ndarray::Axis(0), 0).assign(&one.index_axis(ndarray::Axis(0), 0));
        two.index_axis_mut(ndarray::Axis(0), 1).assign(&one.index_axis(ndarray::Axis(0), 0));
        let pyr = t.extract_features(&two).unwrap();
        for tap in &pyr.taps {
            let a = tap.index_axis(ndarray::Axis(0), 0);
            let b = tap.index_axis(ndarray::Axis(0), 1);
            assert_eq!(a, b);
        }
    }

    #[test]
    fn shallow_taps_are_local() {
        // A far-away pixel edit must not reach tap0 at the opposite corner:
        // the stem + pool receptive field is 11px around a stride-4 grid.
        let t = Teacher::seeded(BackboneSpec::resnet34_256(), 15).unwrap();
        let x: Array4<f32> = Init::seeded(16)
            .normal::<f32>(&[1, 3, 256, 256], 1.0)
            .into_dimensionality()
            .unwrap();
        let mut y = x.clone();
        y[[0, 1, 250, 250]] += 7.5;
        let pa = t.extract_features(&x).unwrap();
        let pb = t.extract_features(&y).unwrap();
        assert_eq!(
            pa.taps[0].slice(ndarray::s![0, .., 0..8, 0..8]),
            pb.taps[0].slice(ndarray::s![0, .., 0..8, 0..8])
        );
        // ...but it must reach the tap somewhere near the edit.
        let diff = (&pb.taps[0] - &pa.taps[0]).mapv(f32::abs).sum();
        assert!(diff > 0.0);
    }

    #[test]
    fn wrong_input_size_is_rejected() {
        let t = Teacher::seeded(BackboneSpec::resnet34_256(), 17).unwrap();
        let x = Array4::<f32>::zeros((1, 3, 128, 128));
        let err = t.extract_features(&x).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }), "{err}");
    }
}
