//! Residual skip connections from shallow teacher taps into the decoder:
//! attention gate, average-pool to the destination resolution, then a 1x1
//! projection to the destination width. Only standard (single-class) mode
//! builds these.

use ndarray::Array4;

use crate::error::Result;
use crate::nn::ops::{avg_pool, avg_pool_backward};
use crate::nn::{join, Conv2d, Init, Module, Param, Scalar};

use super::attention::{AttentionBlock, AttnCache};

#[derive(Debug, Clone)]
pub struct ResidualLink<F> {
    pub attn: AttentionBlock<F>,
    pub pool: usize,
    pub proj: Conv2d<F>,
}

#[derive(Debug)]
pub struct LinkCache<F> {
    attn_cache: AttnCache<F>,
    pooled: Array4<F>,
}

impl<F: Scalar> ResidualLink<F> {
    pub fn new(
        tap_channels: usize,
        out_channels: usize,
        pool: usize,
        attention_reduction: usize,
        init: &mut Init,
    ) -> Self {
        ResidualLink {
            attn: AttentionBlock::new(tap_channels, attention_reduction, init),
            pool,
            proj: Conv2d::new(tap_channels, out_channels, 1, 1, 0, true, init),
        }
    }

    pub fn forward(&self, tap: &Array4<F>) -> Result<(Array4<F>, LinkCache<F>)> {
        let (attn_out, attn_cache) = self.attn.forward(tap)?;
        let pooled = avg_pool(&attn_out, self.pool);
        let y = self.proj.forward(&pooled);
        Ok((y, LinkCache { attn_cache, pooled }))
    }

    pub fn forward_eval(&self, tap: &Array4<F>) -> Result<Array4<F>> {
        Ok(self.forward(tap)?.0)
    }

    /// Accumulates parameter gradients. The returned tap gradient exists for
    /// verification; in training the tap is a frozen teacher output and the
    /// caller drops it.
    pub fn backward(&mut self, tap: &Array4<F>, cache: &LinkCache<F>, gy: &Array4<F>) -> Array4<F> {
        let g_pooled = self.proj.backward(&cache.pooled, gy);
        let g_attn_out = avg_pool_backward(&g_pooled, self.pool);
        self.attn.backward(tap, &cache.attn_cache, &g_attn_out)
    }
}

impl<F: Scalar> Module<F> for ResidualLink<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        self.attn.visit_params(&join(prefix, "attn"), f);
        self.proj.visit_params(&join(prefix, "proj"), f);
    }
}
