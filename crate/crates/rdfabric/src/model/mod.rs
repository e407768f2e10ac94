//! The trainable side of the detector: residual links, fusion bottleneck and
//! reversed decoder, assembled behind one forward/backward pair.
//!
//! Data flow for a feature pyramid `t0..t3` coming from the frozen teacher:
//!
//! ```text
//! t0..t3 --pool+project+concat--> fused --sspcab+compress--> embedding
//!   |                                                            |
//!   +--attention/pool/project links--+                       decoder
//!                                    v                           |
//!                           injected into stage inputs <---------+
//!                                                                v
//!                                                   s0..s3 (student taps)
//! ```
//!
//! In `domain_generalized` mode the links are dropped entirely; everything
//! else is identical, so a standard model whose link weights are zero
//! produces bit-identical outputs to a link-free model from the same seed.

pub mod attention;
pub mod bottleneck;
pub mod link;
pub mod sspcab;
pub mod student;

use std::collections::BTreeSet;

use ndarray::{Array4, ArrayD};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{join, Init, Module, Param, Scalar};
use crate::teacher::{ArchPlan, FeaturePyramid};

pub use attention::AttentionBlock;
pub use bottleneck::{Bottleneck, BottleneckCache, FuseCache};
pub use link::{LinkCache, ResidualLink};
pub use sspcab::Sspcab;
pub use student::{StudentCache, StudentDecoder};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelMode {
    /// Single-fabric training with residual links.
    Standard,
    /// Multi-fabric training; residual links are removed so the bottleneck
    /// cannot shortcut around the shared embedding.
    DomainGeneralized,
}

impl ModelMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelMode::Standard => "standard",
            ModelMode::DomainGeneralized => "domain_generalized",
        }
    }
}

fn default_link_taps() -> BTreeSet<usize> {
    BTreeSet::from([0, 1])
}

fn default_reduction() -> usize {
    8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub mode: ModelMode,
    /// Teacher taps that feed residual links (shallow taps by default; the
    /// coarse taps rarely help and slow convergence).
    pub link_taps: BTreeSet<usize>,
    pub attention_reduction: usize,
    pub sspcab_reduction: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            mode: ModelMode::Standard,
            link_taps: default_link_taps(),
            attention_reduction: default_reduction(),
            sspcab_reduction: default_reduction(),
        }
    }
}

impl ModelConfig {
    pub fn domain_generalized() -> Self {
        ModelConfig {
            mode: ModelMode::DomainGeneralized,
            link_taps: BTreeSet::new(),
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(&l) = self.link_taps.iter().find(|&&l| l > 3) {
            return Err(Error::Config(format!("link tap {l} does not exist; taps are 0..=3")));
        }
        if self.attention_reduction == 0 || self.sspcab_reduction == 0 {
            return Err(Error::Config("attention reductions must be at least 1".into()));
        }
        if self.mode == ModelMode::DomainGeneralized && !self.link_taps.is_empty() {
            return Err(Error::Config(
                "domain_generalized mode removes residual links; set link_taps = []".into(),
            ));
        }
        Ok(())
    }
}

/// Channels of the injection produced for tap `l` — the channel count of the
/// decoder stage input it is added to.
fn injection_channels(plan: &ArchPlan, l: usize) -> usize {
    if l == 3 {
        plan.embed_channels
    } else {
        plan.tap_channels[l + 1]
    }
}

fn injection_hw(plan: &ArchPlan, l: usize) -> (usize, usize) {
    if l == 3 {
        plan.fused_hw
    } else {
        plan.tap_hw[l + 1]
    }
}

fn link_pool(plan: &ArchPlan, l: usize) -> usize {
    plan.tap_hw[l].0 / injection_hw(plan, l).0
}

/// Everything the loss needs from one forward pass. `student[l]` mirrors
/// teacher tap `l`; `fused` is the pooled/projected teacher stack that the
/// sspcab block must reconstruct from masked context.
#[derive(Debug)]
pub struct ModelOut<F> {
    pub student: Vec<Array4<F>>,
    pub fused: Array4<F>,
    pub sspcab_out: Array4<F>,
}

#[derive(Debug)]
pub struct ModelCache<F> {
    fuse: FuseCache<F>,
    links: Vec<(usize, LinkCache<F>)>,
    bottleneck: BottleneckCache<F>,
    student: StudentCache<F>,
}

#[derive(Debug, Clone)]
pub struct RdModel<F> {
    pub config: ModelConfig,
    pub plan: ArchPlan,
    pub bottleneck: Bottleneck<F>,
    pub student: StudentDecoder<F>,
    links: Vec<(usize, ResidualLink<F>)>,
}

impl<F: Scalar> RdModel<F> {
    /// Parameter draw order is bottleneck, student, then links, so that
    /// models differing only in `link_taps` share every common weight.
    pub fn new(plan: &ArchPlan, config: &ModelConfig, init: &mut Init) -> Result<Self> {
        plan.validate()?;
        config.validate()?;
        let bottleneck = Bottleneck::new(plan, config.sspcab_reduction, init);
        let student = StudentDecoder::new(plan, init);
        let links = config
            .link_taps
            .iter()
            .map(|&l| {
                let link = ResidualLink::new(
                    plan.tap_channels[l],
                    injection_channels(plan, l),
                    link_pool(plan, l),
                    config.attention_reduction,
                    init,
                );
                (l, link)
            })
            .collect();
        Ok(RdModel { config: config.clone(), plan: plan.clone(), bottleneck, student, links })
    }

    pub fn seeded(plan: &ArchPlan, config: &ModelConfig, seed: u64) -> Result<Self> {
        RdModel::new(plan, config, &mut Init::seeded(seed))
    }

    fn injections_train(
        &self,
        pyr: &FeaturePyramid<F>,
    ) -> Result<([Option<Array4<F>>; 4], Vec<(usize, LinkCache<F>)>)> {
        let mut injections: [Option<Array4<F>>; 4] = [None, None, None, None];
        let mut caches = Vec::with_capacity(self.links.len());
        for (l, link) in &self.links {
            let (inj, cache) = link.forward(&pyr.taps[*l])?;
            injections[*l] = Some(inj);
            caches.push((*l, cache));
        }
        Ok((injections, caches))
    }

    pub fn forward_train(
        &mut self,
        pyr: &FeaturePyramid<F>,
    ) -> Result<(ModelOut<F>, ModelCache<F>)> {
        let (fused, fuse) = self.bottleneck.fuse(pyr)?;
        let (injections, links) = self.injections_train(pyr)?;
        let (embedding, sspcab_out, bottleneck) = self.bottleneck.forward_train(&fused)?;
        let (student_outs, student) = self.student.forward_train(&embedding, &injections)?;
        let out = ModelOut { student: student_outs, fused, sspcab_out };
        Ok((out, ModelCache { fuse, links, bottleneck, student }))
    }

    pub fn forward_eval(&self, pyr: &FeaturePyramid<F>) -> Result<ModelOut<F>> {
        let (fused, _) = self.bottleneck.fuse(pyr)?;
        let mut injections: [Option<Array4<F>>; 4] = [None, None, None, None];
        for (l, link) in &self.links {
            injections[*l] = Some(link.forward_eval(&pyr.taps[*l])?);
        }
        let (embedding, sspcab_out) = self.bottleneck.forward_eval(&fused)?;
        let student = self.student.forward_eval(&embedding, &injections)?;
        Ok(ModelOut { student, fused, sspcab_out })
    }

    /// Accumulates parameter gradients for one sample batch.
    ///
    /// `d_student[l]` is the loss gradient at student output `l`,
    /// `d_sspcab_out` the auxiliary gradient at the sspcab output, and
    /// `d_fused` the auxiliary gradient at the fused tensor (the
    /// reconstruction target is not detached, so its side of the MSE also
    /// propagates — into the projection convolutions).
    pub fn backward(
        &mut self,
        pyr: &FeaturePyramid<F>,
        cache: &ModelCache<F>,
        d_student: &[Array4<F>; 4],
        d_sspcab_out: &Array4<F>,
        d_fused: &Array4<F>,
    ) {
        let (g_seed, g_inj) = self.student.backward(&cache.student, d_student);
        let g_fused = self.bottleneck.backward(&cache.bottleneck, &g_seed, d_sspcab_out);
        let g_fused = g_fused + d_fused;
        self.bottleneck.fuse_backward(&cache.fuse, &g_fused);
        for ((l, link), (cl, lc)) in self.links.iter_mut().zip(&cache.links) {
            debug_assert_eq!(*l, *cl, "link cache order must match link order");
            let _ = link.backward(&pyr.taps[*l], lc, &g_inj[*l]);
        }
    }

    pub fn mode(&self) -> ModelMode {
        self.config.mode
    }
}

impl<F: Scalar> Module<F> for RdModel<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        self.bottleneck.visit_params(&join(prefix, "bottleneck"), f);
        self.student.visit_params(&join(prefix, "student"), f);
        for (l, link) in &mut self.links {
            link.visit_params(&join(prefix, &format!("link{l}")), f);
        }
    }

    fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ArrayD<F>)) {
        self.bottleneck.visit_buffers(&join(prefix, "bottleneck"), f);
        self.student.visit_buffers(&join(prefix, "student"), f);
    }
}
