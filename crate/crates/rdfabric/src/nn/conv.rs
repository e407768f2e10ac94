//! 2-D convolution and fully connected layers, im2col + GEMM based.
//! Layout is `[batch, channels, height, width]` throughout.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, Array4, ArrayView1, ArrayView3, ArrayView4, ArrayViewMut3, Axis};

use super::{join, Init, Module, Param, Scalar};

/// Convolution forward as a free function over plain views, so frozen
/// (gradient-free) weight holders can share the exact kernel the trainable
/// layer uses. `weight` is `[c_out, c_in, k, k]`, `x` is `[b, c_in, h, w]`.
pub fn conv2d_forward<F: Scalar>(
    weight: &ArrayView4<'_, F>,
    bias: Option<&ArrayView1<'_, F>>,
    stride: usize,
    padding: usize,
    x: &Array4<F>,
) -> Array4<F> {
    let (b, c_in, h, w) = x.dim();
    let (c_out, c_in_w, k, _) = weight.dim();
    assert_eq!(c_in, c_in_w, "conv input channel mismatch");
    assert!(h + 2 * padding >= k && w + 2 * padding >= k, "conv input too small");
    let oh = (h + 2 * padding - k) / stride + 1;
    let ow = (w + 2 * padding - k) / stride + 1;
    let ckk = c_in * k * k;
    let w2 = weight.to_shape((c_out, ckk)).expect("conv weight is contiguous");

    let mut y = Array4::<F>::zeros((b, c_out, oh, ow));
    if k == 1 && stride == 1 && padding == 0 {
        for bi in 0..b {
            let xs = x
                .index_axis(Axis(0), bi)
                .into_shape_with_order((c_in, h * w))
                .expect("standard layout input");
            let mut ys = y
                .index_axis_mut(Axis(0), bi)
                .into_shape_with_order((c_out, oh * ow))
                .unwrap();
            general_mat_mul(F::one(), &w2, &xs, F::zero(), &mut ys);
        }
    } else {
        let mut col = Array2::<F>::zeros((ckk, oh * ow));
        for bi in 0..b {
            im2col_into(&x.index_axis(Axis(0), bi), k, stride, padding, oh, ow, &mut col);
            let mut ys = y
                .index_axis_mut(Axis(0), bi)
                .into_shape_with_order((c_out, oh * ow))
                .unwrap();
            general_mat_mul(F::one(), &w2, &col, F::zero(), &mut ys);
        }
    }
    if let Some(bv) = bias {
        for co in 0..c_out {
            let mut lane = y.slice_mut(s![.., co, .., ..]);
            lane += bv[co];
        }
    }
    y
}

/// Square-kernel 2-D convolution with zero padding.
#[derive(Debug, Clone)]
pub struct Conv2d<F> {
    /// `[c_out, c_in, k, k]`
    pub weight: Param<F>,
    /// `[c_out]`
    pub bias: Option<Param<F>>,
    pub stride: usize,
    pub padding: usize,
}

impl<F: Scalar> Conv2d<F> {
    pub fn new(
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        padding: usize,
        with_bias: bool,
        init: &mut Init,
    ) -> Self {
        assert!(k >= 1 && stride >= 1);
        let weight = Param::new(init.he_conv::<F>(c_out, c_in, k));
        let bias = with_bias.then(|| Param::zeros(&[c_out]));
        Conv2d { weight, bias, stride, padding }
    }

    pub fn from_parts(
        weight: Array4<F>,
        bias: Option<Array1<F>>,
        stride: usize,
        padding: usize,
    ) -> Self {
        Conv2d {
            weight: Param::new(weight.into_dyn()),
            bias: bias.map(|b| Param::new(b.into_dyn())),
            stride,
            padding,
        }
    }

    pub fn c_out(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn c_in(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn k(&self) -> usize {
        self.weight.value.shape()[2]
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.k();
        assert!(h + 2 * self.padding >= k && w + 2 * self.padding >= k, "conv input too small");
        (
            (h + 2 * self.padding - k) / self.stride + 1,
            (w + 2 * self.padding - k) / self.stride + 1,
        )
    }

    fn is_pointwise(&self) -> bool {
        self.k() == 1 && self.stride == 1 && self.padding == 0
    }

    pub fn forward(&self, x: &Array4<F>) -> Array4<F> {
        let w4 = self.weight.value.view().into_dimensionality().expect("conv weight is 4-d");
        let bias = self
            .bias
            .as_ref()
            .map(|b| b.value.view().into_shape_with_order(self.c_out()).unwrap());
        conv2d_forward(&w4, bias.as_ref(), self.stride, self.padding, x)
    }

    /// Accumulates weight/bias gradients and returns the input gradient.
    /// `x` must be the tensor the matching `forward` saw.
    pub fn backward(&mut self, x: &Array4<F>, gy: &Array4<F>) -> Array4<F> {
        let (b, c_in, h, w) = x.dim();
        let (oh, ow) = self.out_hw(h, w);
        let (c_out, k, stride, padding) = (self.c_out(), self.k(), self.stride, self.padding);
        let ckk = c_in * k * k;
        assert_eq!(gy.dim(), (b, c_out, oh, ow), "conv output gradient shape");

        let pointwise = self.is_pointwise();
        let Param { value, grad } = &mut self.weight;
        let w2 = value.view().into_shape_with_order((c_out, ckk)).unwrap();
        let mut gw2 = grad.view_mut().into_shape_with_order((c_out, ckk)).unwrap();

        let mut gx = Array4::<F>::zeros((b, c_in, h, w));
        if pointwise {
            for bi in 0..b {
                let xs = x
                    .index_axis(Axis(0), bi)
                    .into_shape_with_order((c_in, h * w))
                    .expect("standard layout input");
                let gys = gy
                    .index_axis(Axis(0), bi)
                    .into_shape_with_order((c_out, oh * ow))
                    .expect("standard layout gradient");
                general_mat_mul(F::one(), &gys, &xs.t(), F::one(), &mut gw2);
                let mut gxs = gx
                    .index_axis_mut(Axis(0), bi)
                    .into_shape_with_order((c_in, h * w))
                    .unwrap();
                general_mat_mul(F::one(), &w2.t(), &gys, F::zero(), &mut gxs);
            }
        } else {
            let mut col = Array2::<F>::zeros((ckk, oh * ow));
            let mut dcol = Array2::<F>::zeros((ckk, oh * ow));
            for bi in 0..b {
                im2col_into(&x.index_axis(Axis(0), bi), k, stride, padding, oh, ow, &mut col);
                let gys = gy
                    .index_axis(Axis(0), bi)
                    .into_shape_with_order((c_out, oh * ow))
                    .expect("standard layout gradient");
                general_mat_mul(F::one(), &gys, &col.t(), F::one(), &mut gw2);
                general_mat_mul(F::one(), &w2.t(), &gys, F::zero(), &mut dcol);
                col2im_add(&dcol, k, stride, padding, oh, ow, &mut gx.index_axis_mut(Axis(0), bi));
            }
        }
        if let Some(bias) = &mut self.bias {
            let mut gb = bias.grad.view_mut().into_shape_with_order(c_out).unwrap();
            for co in 0..c_out {
                gb[co] += gy.slice(s![.., co, .., ..]).sum();
            }
        }
        gx
    }
}

impl<F: Scalar> Module<F> for Conv2d<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        if let Some(bias) = &mut self.bias {
            f(&join(prefix, "bias"), bias);
        }
    }
}

/// Unfold one sample `[c_in, h, w]` into `col[c_in*k*k, oh*ow]` where row
/// `ci*k*k + ki*k + kj` holds the input value each output position sees at
/// kernel offset `(ki, kj)`, zero where the offset falls outside the image.
fn im2col_into<F: Scalar>(
    x: &ArrayView3<'_, F>,
    k: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
    col: &mut Array2<F>,
) {
    let (c_in, h, w) = x.dim();
    debug_assert_eq!(col.dim(), (c_in * k * k, oh * ow));
    let zero = F::zero();
    for ci in 0..c_in {
        for ki in 0..k {
            for kj in 0..k {
                let row = ci * k * k + ki * k + kj;
                let dst = col.row_mut(row).into_slice().expect("col is contiguous");
                for ohi in 0..oh {
                    let seg = &mut dst[ohi * ow..(ohi + 1) * ow];
                    let ih = (ohi * stride + ki) as isize - padding as isize;
                    if ih < 0 || ih >= h as isize {
                        seg.fill(zero);
                        continue;
                    }
                    let src = x
                        .slice(s![ci, ih as usize, ..])
                        .to_slice()
                        .expect("input rows are contiguous");
                    if stride == 1 {
                        // iw = j + kj - padding; valid j where 0 <= iw < w
                        let j0 = padding.saturating_sub(kj).min(ow);
                        let j1 = (w + padding - kj).min(ow).max(j0);
                        seg[..j0].fill(zero);
                        seg[j0..j1].copy_from_slice(&src[j0 + kj - padding..j1 + kj - padding]);
                        seg[j1..].fill(zero);
                    } else {
                        for (j, out) in seg.iter_mut().enumerate() {
                            let iw = (j * stride + kj) as isize - padding as isize;
                            *out = if iw >= 0 && (iw as usize) < w { src[iw as usize] } else { zero };
                        }
                    }
                }
            }
        }
    }
}

/// Fold `dcol` back onto the input gradient (scatter-add; the adjoint of
/// `im2col_into`).
fn col2im_add<F: Scalar>(
    dcol: &Array2<F>,
    k: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
    gx: &mut ArrayViewMut3<'_, F>,
) {
    let (c_in, h, w) = gx.dim();
    debug_assert_eq!(dcol.dim(), (c_in * k * k, oh * ow));
    for ci in 0..c_in {
        for ki in 0..k {
            for kj in 0..k {
                let row = ci * k * k + ki * k + kj;
                let src = dcol.row(row).to_slice().expect("dcol is contiguous");
                for ohi in 0..oh {
                    let ih = (ohi * stride + ki) as isize - padding as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let seg = &src[ohi * ow..(ohi + 1) * ow];
                    let dst = gx
                        .slice_mut(s![ci, ih as usize, ..])
                        .into_slice()
                        .expect("gradient rows are contiguous");
                    if stride == 1 {
                        let j0 = padding.saturating_sub(kj).min(ow);
                        let j1 = (w + padding - kj).min(ow).max(j0);
                        for j in j0..j1 {
                            dst[j + kj - padding] += seg[j];
                        }
                    } else {
                        for (j, &g) in seg.iter().enumerate() {
                            let iw = (j * stride + kj) as isize - padding as isize;
                            if iw >= 0 && (iw as usize) < w {
                                dst[iw as usize] += g;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Fully connected layer `y = x Wᵀ + b` over `[batch, features]`.
#[derive(Debug, Clone)]
pub struct Linear<F> {
    /// `[out, inp]`
    pub weight: Param<F>,
    /// `[out]`
    pub bias: Param<F>,
}

impl<F: Scalar> Linear<F> {
    pub fn new(inp: usize, out: usize, init: &mut Init) -> Self {
        Linear {
            weight: Param::new(init.he_linear::<F>(out, inp)),
            bias: Param::zeros(&[out]),
        }
    }

    pub fn forward(&self, x: &Array2<F>) -> Array2<F> {
        let (b, inp) = x.dim();
        let (out, w_in) = (self.weight.value.shape()[0], self.weight.value.shape()[1]);
        assert_eq!(inp, w_in, "linear input width");
        let w2 = self.weight.value.view().into_shape_with_order((out, w_in)).unwrap();
        let bv = self.bias.value.view().into_shape_with_order(out).unwrap();
        let mut y = Array2::<F>::zeros((b, out));
        general_mat_mul(F::one(), x, &w2.t(), F::zero(), &mut y);
        for mut row in y.rows_mut() {
            row += &bv;
        }
        y
    }

    pub fn backward(&mut self, x: &Array2<F>, gy: &Array2<F>) -> Array2<F> {
        let (out, inp) = (self.weight.value.shape()[0], self.weight.value.shape()[1]);
        let w2 = self.weight.value.view().into_shape_with_order((out, inp)).unwrap();
        let mut gw = self.weight.grad.view_mut().into_shape_with_order((out, inp)).unwrap();
        general_mat_mul(F::one(), &gy.t(), x, F::one(), &mut gw);
        let mut gb = self.bias.grad.view_mut().into_shape_with_order(out).unwrap();
        gb += &gy.sum_axis(Axis(0));
        let mut gx = Array2::<F>::zeros(x.raw_dim());
        general_mat_mul(F::one(), gy, &w2, F::zero(), &mut gx);
        gx
    }
}

impl<F: Scalar> Module<F> for Linear<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}
