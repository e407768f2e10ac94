//! Self-supervised predictive convolutional attention block. A masked
//! convolution predicts each position from the four corners of its dilated
//! 3x3 neighbourhood — never from the position itself — and a
//! squeeze-excitation gate reweights the predicted channels. The block's
//! auxiliary objective (reconstructing its own input) is wired up in the
//! loss module.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, Array4, Axis};

use crate::nn::ops::{global_avg_pool, global_avg_pool_backward};
use crate::nn::conv::Linear;
use crate::nn::{join, Init, Module, Param, Scalar};

/// Corner offsets (di, dj) read by the masked kernel: the four corners of
/// the 3x3 neighbourhood at dilation 1. The centre is structurally absent.
pub const CORNER_OFFSETS: [(isize, isize); 4] = [(-1, -1), (-1, 1), (1, -1), (1, 1)];

#[derive(Debug, Clone)]
pub struct Sspcab<F> {
    /// `[4, c, c]` — one 1x1 kernel per corner.
    pub corner_w: Param<F>,
    /// `[c]`
    pub corner_b: Param<F>,
    pub fc1: Linear<F>,
    pub fc2: Linear<F>,
}

#[derive(Debug)]
pub struct SspcabCache<F> {
    pre: Array4<F>,
    g: Array2<F>,
    a1: Array2<F>,
    r1: Array2<F>,
    z: Array2<F>,
}

impl<F: Scalar> Sspcab<F> {
    pub fn new(channels: usize, se_reduction: usize, init: &mut Init) -> Self {
        let mid = (channels / se_reduction).max(1);
        // The masked kernel reads 4*c inputs per output position.
        let std = (2.0 / (4 * channels) as f64).sqrt();
        Sspcab {
            corner_w: Param::new(init.normal::<F>(&[4, channels, channels], std)),
            corner_b: Param::zeros(&[channels]),
            fc1: Linear::new(channels, mid, init),
            fc2: Linear::new(mid, channels, init),
        }
    }

    pub fn channels(&self) -> usize {
        self.corner_w.value.shape()[1]
    }

    /// The masked-convolution response alone, before channel attention.
    /// Public so the structural center-mask property stays testable.
    pub fn masked_conv(&self, x: &Array4<F>) -> Array4<F> {
        let (b, c, h, w) = x.dim();
        assert_eq!(c, self.channels(), "sspcab channel mismatch");
        let mut pre = Array4::<F>::zeros((b, c, h, w));
        for (k, &(di, dj)) in CORNER_OFFSETS.iter().enumerate() {
            let shifted = shift(x, di, dj);
            let wk = self
                .corner_w
                .value
                .index_axis(Axis(0), k)
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap();
            for bi in 0..b {
                let xs = shifted
                    .index_axis(Axis(0), bi)
                    .into_shape_with_order((c, h * w))
                    .unwrap();
                let mut ps = pre
                    .index_axis_mut(Axis(0), bi)
                    .into_shape_with_order((c, h * w))
                    .unwrap();
                general_mat_mul(F::one(), &wk, &xs, F::one(), &mut ps);
            }
        }
        let bias = self.corner_b.value.view().into_shape_with_order(c).unwrap();
        for ci in 0..c {
            let mut lane = pre.slice_mut(ndarray::s![.., ci, .., ..]);
            lane += bias[ci];
        }
        pre
    }

    pub fn forward(&self, x: &Array4<F>) -> (Array4<F>, SspcabCache<F>) {
        let (_, _, h, w) = x.dim();
        let pre = self.masked_conv(x);
        let g = global_avg_pool(&pre);
        let a1 = self.fc1.forward(&g);
        let r1 = a1.mapv(|v| if v > F::zero() { v } else { F::zero() });
        let z = self.fc2.forward(&r1).mapv(|v| F::one() / (F::one() + (-v).exp()));
        let mut out = pre.clone();
        scale_channels(&mut out, &z, h, w);
        (out, SspcabCache { pre, g, a1, r1, z })
    }

    pub fn forward_eval(&self, x: &Array4<F>) -> Array4<F> {
        self.forward(x).0
    }

    pub fn backward(&mut self, x: &Array4<F>, cache: &SspcabCache<F>, gy: &Array4<F>) -> Array4<F> {
        let (b, c, h, w) = x.dim();

        // Through the excitation product out = pre * z.
        let mut dz = Array2::<F>::zeros((b, c));
        for bi in 0..b {
            for ci in 0..c {
                dz[[bi, ci]] = (&gy.slice(ndarray::s![bi, ci, .., ..])
                    * &cache.pre.slice(ndarray::s![bi, ci, .., ..]))
                    .sum();
            }
        }
        let mut dpre = gy.clone();
        scale_channels(&mut dpre, &cache.z, h, w);

        // Through the squeeze-excitation MLP.
        let da2 = {
            let mut d = dz;
            ndarray::Zip::from(&mut d).and(&cache.z).for_each(|v, &z| *v = *v * z * (F::one() - z));
            d
        };
        let dr1 = self.fc2.backward(&cache.r1, &da2);
        let mut da1 = dr1;
        ndarray::Zip::from(&mut da1).and(&cache.a1).for_each(|v, &a| {
            if a <= F::zero() {
                *v = F::zero();
            }
        });
        let dg = self.fc1.backward(&cache.g, &da1);
        dpre += &global_avg_pool_backward(&dg, h, w);

        // Through the masked convolution.
        let mut gb = self.corner_b.grad.view_mut().into_shape_with_order(c).unwrap();
        for ci in 0..c {
            gb[ci] += dpre.slice(ndarray::s![.., ci, .., ..]).sum();
        }
        let mut gx = Array4::<F>::zeros((b, c, h, w));
        let mut t = Array4::<F>::zeros((b, c, h, w));
        for (k, &(di, dj)) in CORNER_OFFSETS.iter().enumerate() {
            let shifted = shift(x, di, dj);
            let wk = self
                .corner_w
                .value
                .index_axis(Axis(0), k)
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap();
            let mut gwk = self
                .corner_w
                .grad
                .index_axis_mut(Axis(0), k)
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap();
            for bi in 0..b {
                let xs = shifted
                    .index_axis(Axis(0), bi)
                    .into_shape_with_order((c, h * w))
                    .unwrap();
                let ds = dpre
                    .index_axis(Axis(0), bi)
                    .into_shape_with_order((c, h * w))
                    .unwrap();
                general_mat_mul(F::one(), &ds, &xs.t(), F::one(), &mut gwk);
                let mut ts = t
                    .index_axis_mut(Axis(0), bi)
                    .into_shape_with_order((c, h * w))
                    .unwrap();
                general_mat_mul(F::one(), &wk.t(), &ds, F::zero(), &mut ts);
            }
            gx += &shift(&t, -di, -dj);
        }
        gx
    }
}

impl<F: Scalar> Module<F> for Sspcab<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        f(&join(prefix, "corner_w"), &mut self.corner_w);
        f(&join(prefix, "corner_b"), &mut self.corner_b);
        self.fc1.visit_params(&join(prefix, "fc1"), f);
        self.fc2.visit_params(&join(prefix, "fc2"), f);
    }
}

/// `out[b,c,i,j] = x[b,c,i+di,j+dj]`, zero where the source falls outside.
fn shift<F: Scalar>(x: &Array4<F>, di: isize, dj: isize) -> Array4<F> {
    let (_, _, h, w) = x.dim();
    let mut out = Array4::<F>::zeros(x.raw_dim());
    let i0 = (-di).max(0) as usize;
    let i1 = ((h as isize - di).min(h as isize)).max(0) as usize;
    let j0 = (-dj).max(0) as usize;
    let j1 = ((w as isize - dj).min(w as isize)).max(0) as usize;
    if i0 >= i1 || j0 >= j1 {
        return out;
    }
    out.slice_mut(ndarray::s![.., .., i0..i1, j0..j1]).assign(&x.slice(ndarray::s![
        ..,
        ..,
        (i0 as isize + di) as usize..(i1 as isize + di) as usize,
        (j0 as isize + dj) as usize..(j1 as isize + dj) as usize
    ]));
    out
}

/// Multiply each `[h, w]` lane by its `[b, c]` gate in place.
fn scale_channels<F: Scalar>(x: &mut Array4<F>, z: &Array2<F>, _h: usize, _w: usize) {
    let (b, c) = z.dim();
    for bi in 0..b {
        for ci in 0..c {
            let g = z[[bi, ci]];
            x.slice_mut(ndarray::s![bi, ci, .., ..]).mapv_inplace(|v| v * g);
        }
    }
}
