//! Fusion bottleneck: pool + project each teacher tap to a common grid,
//! concatenate, run the predictive attention block, then compress to the
//! decoder seed embedding (1x1 conv, ReLU, batch-norm, stride-2 1x1 conv).

use ndarray::{concatenate, Array4, ArrayD, Axis};

use crate::error::{Error, Result};
use crate::nn::ops::{avg_pool, relu, relu_backward};
use crate::nn::{join, BatchNorm2d, BnCache, Conv2d, Init, Module, Param, Scalar};
use crate::teacher::{ArchPlan, FeaturePyramid};

use super::sspcab::{Sspcab, SspcabCache};

#[derive(Debug, Clone)]
pub struct Bottleneck<F> {
    plan: ArchPlan,
    pub proj: Vec<Conv2d<F>>,
    pub sspcab: Sspcab<F>,
    pub inner: Conv2d<F>,
    pub bn: BatchNorm2d<F>,
    pub reduce: Conv2d<F>,
}

#[derive(Debug)]
pub struct FuseCache<F> {
    pooled: Vec<Array4<F>>,
}

#[derive(Debug)]
pub struct BottleneckCache<F> {
    fused: Array4<F>,
    sspcab_cache: SspcabCache<F>,
    sspcab_out: Array4<F>,
    inner_out: Array4<F>,
    bn_cache: BnCache<F>,
    bn_out: Array4<F>,
}

impl<F: Scalar> Bottleneck<F> {
    pub fn new(plan: &ArchPlan, se_reduction: usize, init: &mut Init) -> Self {
        let proj = (0..4)
            .map(|l| Conv2d::new(plan.tap_channels[l], plan.proj_channels, 1, 1, 0, true, init))
            .collect();
        let fused_c = plan.fused_channels();
        Bottleneck {
            plan: plan.clone(),
            proj,
            sspcab: Sspcab::new(fused_c, se_reduction, init),
            inner: Conv2d::new(fused_c, plan.embed_channels, 1, 1, 0, true, init),
            bn: BatchNorm2d::new(plan.embed_channels),
            reduce: Conv2d::new(plan.embed_channels, plan.embed_channels, 1, 2, 0, true, init),
        }
    }

    /// Pool, project and concatenate the four taps onto the fused grid.
    pub fn fuse(&self, pyr: &FeaturePyramid<F>) -> Result<(Array4<F>, FuseCache<F>)> {
        pyr.validate_for(&self.plan)?;
        let mut pooled = Vec::with_capacity(4);
        let mut projected = Vec::with_capacity(4);
        for l in 0..4 {
            let p = avg_pool(&pyr.taps[l], self.plan.pool_factor(l));
            projected.push(self.proj[l].forward(&p));
            pooled.push(p);
        }
        let views: Vec<_> = projected.iter().map(|t| t.view()).collect();
        let fused = concatenate(Axis(1), &views).expect("tap blocks share batch and grid");
        Ok((fused, FuseCache { pooled }))
    }

    /// Accumulate projection gradients from a fused-tensor gradient. The
    /// taps themselves are frozen teacher features, so their gradient is
    /// intentionally not produced.
    pub fn fuse_backward(&mut self, cache: &FuseCache<F>, g_fused: &Array4<F>) {
        let pc = self.plan.proj_channels;
        for l in 0..4 {
            let g = g_fused.slice(ndarray::s![.., l * pc..(l + 1) * pc, .., ..]).to_owned();
            let _ = self.proj[l].backward(&cache.pooled[l], &g);
        }
    }

    fn check_fused(&self, fused: &Array4<F>) -> Result<()> {
        let (_, c, h, w) = fused.dim();
        let want = (self.plan.fused_channels(), self.plan.fused_hw.0, self.plan.fused_hw.1);
        if (c, h, w) != want {
            return Err(Error::Shape {
                op: "bottleneck_forward",
                message: format!("fused input is {:?} per sample, plan requires {want:?}", (c, h, w)),
            });
        }
        Ok(())
    }

    /// Returns `(embedding, sspcab_out, cache)`.
    pub fn forward_train(
        &mut self,
        fused: &Array4<F>,
    ) -> Result<(Array4<F>, Array4<F>, BottleneckCache<F>)> {
        self.check_fused(fused)?;
        let (sspcab_out, sspcab_cache) = self.sspcab.forward(fused);
        let inner_out = self.inner.forward(&sspcab_out);
        let relu_out = relu(&inner_out);
        let (bn_out, bn_cache) = self.bn.forward_train(&relu_out);
        let embedding = self.reduce.forward(&bn_out);
        let cache = BottleneckCache {
            fused: fused.clone(),
            sspcab_cache,
            sspcab_out: sspcab_out.clone(),
            inner_out,
            bn_cache,
            bn_out,
        };
        Ok((embedding, sspcab_out, cache))
    }

    pub fn forward_eval(&self, fused: &Array4<F>) -> Result<(Array4<F>, Array4<F>)> {
        self.check_fused(fused)?;
        let sspcab_out = self.sspcab.forward_eval(fused);
        let bn_out = self.bn.forward_eval(&relu(&self.inner.forward(&sspcab_out)));
        Ok((self.reduce.forward(&bn_out), sspcab_out))
    }

    /// `g_sspcab_extra` is the auxiliary-loss gradient flowing directly into
    /// the block output, added to whatever comes back through the embedding
    /// path. Returns the gradient w.r.t. the fused tensor.
    pub fn backward(
        &mut self,
        cache: &BottleneckCache<F>,
        g_embedding: &Array4<F>,
        g_sspcab_extra: &Array4<F>,
    ) -> Array4<F> {
        let g_bn_out = self.reduce.backward(&cache.bn_out, g_embedding);
        let g_relu_out = self.bn.backward(&cache.bn_cache, &g_bn_out);
        let g_inner_out = relu_backward(&cache.inner_out, &g_relu_out);
        let mut g_sspcab_out = self.inner.backward(&cache.sspcab_out, &g_inner_out);
        g_sspcab_out += g_sspcab_extra;
        self.sspcab.backward(&cache.fused, &cache.sspcab_cache, &g_sspcab_out)
    }
}

impl<F: Scalar> Module<F> for Bottleneck<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        for (l, p) in self.proj.iter_mut().enumerate() {
            p.visit_params(&join(prefix, &format!("proj{l}")), f);
        }
        self.sspcab.visit_params(&join(prefix, "sspcab"), f);
        self.inner.visit_params(&join(prefix, "inner"), f);
        self.bn.visit_params(&join(prefix, "bn"), f);
        self.reduce.visit_params(&join(prefix, "reduce"), f);
    }

    fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ArrayD<F>)) {
        self.bn.visit_buffers(&join(prefix, "bn"), f);
    }
}
