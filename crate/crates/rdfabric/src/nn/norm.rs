//! Batch normalization over `[batch, channels, height, width]`.

use ndarray::{Array1, Array4, ArrayD, Axis};

use super::{join, Module, Param, Scalar};

/// What the backward pass needs from a training-mode forward.
#[derive(Debug)]
pub struct BnCache<F> {
    xhat: Array4<F>,
    inv_std: Array1<F>,
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d<F> {
    pub gamma: Param<F>,
    pub beta: Param<F>,
    pub running_mean: ArrayD<F>,
    pub running_var: ArrayD<F>,
    pub eps: f64,
    pub momentum: f64,
}

impl<F: Scalar> BatchNorm2d<F> {
    pub fn new(channels: usize) -> Self {
        let mut gamma = Param::zeros(&[channels]);
        gamma.value.fill(F::one());
        let mut running_var = ArrayD::zeros(ndarray::IxDyn(&[channels]));
        running_var.fill(F::one());
        BatchNorm2d {
            gamma,
            beta: Param::zeros(&[channels]),
            running_mean: ArrayD::zeros(ndarray::IxDyn(&[channels])),
            running_var,
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.value.len()
    }

    /// Training-mode forward: normalizes with batch statistics and updates
    /// the running estimates (unbiased variance, matching the usual
    /// framework convention).
    pub fn forward_train(&mut self, x: &Array4<F>) -> (Array4<F>, BnCache<F>) {
        let (b, c, h, w) = x.dim();
        assert_eq!(c, self.channels(), "batchnorm channel mismatch");
        let n = (b * h * w) as f64;
        assert!(n >= 1.0);

        let mut xhat = x.clone();
        let mut inv_std = Array1::<F>::zeros(c);
        for ci in 0..c {
            let lane = x.index_axis(Axis(1), ci);
            let mut sum = 0.0f64;
            let mut sum_sq = 0.0f64;
            for &v in lane.iter() {
                let v = v.dbl();
                sum += v;
                sum_sq += v * v;
            }
            let mean = sum / n;
            let var = (sum_sq / n - mean * mean).max(0.0);
            let istd = 1.0 / (var + self.eps).sqrt();
            inv_std[ci] = F::fl(istd);

            let mut out = xhat.index_axis_mut(Axis(1), ci);
            let (mf, sf) = (F::fl(mean), F::fl(istd));
            out.mapv_inplace(|v| (v - mf) * sf);

            let unbiased = if n > 1.0 { var * n / (n - 1.0) } else { var };
            let m = self.momentum;
            let rm = self.running_mean[ci].dbl();
            let rv = self.running_var[ci].dbl();
            self.running_mean[ci] = F::fl((1.0 - m) * rm + m * mean);
            self.running_var[ci] = F::fl((1.0 - m) * rv + m * unbiased);
        }

        let y = self.affine(&xhat);
        (y, BnCache { xhat, inv_std })
    }

    /// Evaluation-mode forward using the running statistics.
    pub fn forward_eval(&self, x: &Array4<F>) -> Array4<F> {
        let c = self.channels();
        assert_eq!(x.dim().1, c, "batchnorm channel mismatch");
        let mut y = x.clone();
        let gamma = self.gamma.value.view().into_shape_with_order(c).unwrap();
        let beta = self.beta.value.view().into_shape_with_order(c).unwrap();
        for ci in 0..c {
            let a = gamma[ci].dbl() / (self.running_var[ci].dbl() + self.eps).sqrt();
            let b = beta[ci].dbl() - a * self.running_mean[ci].dbl();
            let (af, bf) = (F::fl(a), F::fl(b));
            y.index_axis_mut(Axis(1), ci).mapv_inplace(|v| v * af + bf);
        }
        y
    }

    fn affine(&self, xhat: &Array4<F>) -> Array4<F> {
        let c = self.channels();
        let gamma = self.gamma.value.view().into_shape_with_order(c).unwrap();
        let beta = self.beta.value.view().into_shape_with_order(c).unwrap();
        let mut y = xhat.clone();
        for ci in 0..c {
            let (g, b) = (gamma[ci], beta[ci]);
            y.index_axis_mut(Axis(1), ci).mapv_inplace(|v| v * g + b);
        }
        y
    }

    /// Accumulates gamma/beta gradients and returns the input gradient.
    pub fn backward(&mut self, cache: &BnCache<F>, gy: &Array4<F>) -> Array4<F> {
        let (b, c, h, w) = gy.dim();
        assert_eq!(cache.xhat.dim(), (b, c, h, w), "batchnorm cache shape");
        let n = F::fl((b * h * w) as f64);
        let gamma = self.gamma.value.view().into_shape_with_order(c).unwrap();

        let mut gx = Array4::<F>::zeros((b, c, h, w));
        let mut gg = self.gamma.grad.view_mut().into_shape_with_order(c).unwrap();
        let mut gb = self.beta.grad.view_mut().into_shape_with_order(c).unwrap();
        for ci in 0..c {
            let gy_l = gy.index_axis(Axis(1), ci);
            let xh_l = cache.xhat.index_axis(Axis(1), ci);
            let mut sum_gy = F::zero();
            let mut sum_gy_xh = F::zero();
            for (&g, &xh) in gy_l.iter().zip(xh_l.iter()) {
                sum_gy += g;
                sum_gy_xh += g * xh;
            }
            gg[ci] += sum_gy_xh;
            gb[ci] += sum_gy;

            // dx = gamma * inv_std / n * (n*gy - sum(gy) - xhat * sum(gy*xhat))
            let scale = gamma[ci] * cache.inv_std[ci] / n;
            let mut gx_l = gx.index_axis_mut(Axis(1), ci);
            ndarray::Zip::from(&mut gx_l).and(&gy_l).and(&xh_l).for_each(|o, &g, &xh| {
                *o = scale * (n * g - sum_gy - xh * sum_gy_xh);
            });
        }
        gx
    }
}

impl<F: Scalar> Module<F> for BatchNorm2d<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
    }

    fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ArrayD<F>)) {
        f(&join(prefix, "running_mean"), &mut self.running_mean);
        f(&join(prefix, "running_var"), &mut self.running_var);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{self, GradCheckCfg};
    use crate::nn::{zero_grads, Init};
    use approx::assert_abs_diff_eq;

    fn rand4(shape: (usize, usize, usize, usize), seed: u64) -> Array4<f64> {
        Init::seeded(seed)
            .normal::<f64>(&[shape.0, shape.1, shape.2, shape.3], 1.0)
            .into_dimensionality()
            .unwrap()
    }

    #[test]
    fn train_forward_normalizes_each_channel() {
        let mut bn = BatchNorm2d::<f64>::new(3);
        bn.gamma.value.fill(1.0);
        bn.beta.value.fill(0.0);
        let x = rand4((4, 3, 5, 5), 1);
        let (y, _) = bn.forward_train(&x);
        for ci in 0..3 {
            let lane = y.index_axis(Axis(1), ci);
            let n = lane.len() as f64;
            let mean = lane.sum() / n;
            let var = lane.mapv(|v| (v - mean) * (v - mean)).sum() / n;
            assert_abs_diff_eq!(mean, 0.0, epsilon = 1e-10);
            assert_abs_diff_eq!(var, 1.0, epsilon = 1e-3); // eps in denominator skews slightly
        }
    }

    #[test]
    fn eval_forward_is_running_affine() {
        let mut bn = BatchNorm2d::<f64>::new(2);
        bn.running_mean[0] = 0.5;
        bn.running_mean[1] = -1.0;
        bn.running_var[0] = 4.0;
        bn.running_var[1] = 0.25;
        bn.gamma.value.as_slice_mut().unwrap().copy_from_slice(&[2.0, 3.0]);
        bn.beta.value.as_slice_mut().unwrap().copy_from_slice(&[0.1, -0.2]);
        let x = rand4((2, 2, 3, 3), 2);
        let y = bn.forward_eval(&x);
        let expect = |v: f64, ci: usize| {
            let (rm, rv) = (bn.running_mean[ci], bn.running_var[ci]);
            let g = bn.gamma.value.as_slice().unwrap()[ci];
            let b = bn.beta.value.as_slice().unwrap()[ci];
            g * (v - rm) / (rv + bn.eps).sqrt() + b
        };
        assert_abs_diff_eq!(y[[0, 0, 1, 2]], expect(x[[0, 0, 1, 2]], 0), epsilon = 1e-12);
        assert_abs_diff_eq!(y[[1, 1, 0, 0]], expect(x[[1, 1, 0, 0]], 1), epsilon = 1e-12);
    }

    #[test]
    fn running_stats_blend_with_momentum() {
        let mut bn = BatchNorm2d::<f64>::new(1);
        bn.momentum = 0.5;
        let x = Array4::from_shape_fn((1, 1, 2, 2), |(_, _, i, j)| (i * 2 + j) as f64); // 0,1,2,3
        let _ = bn.forward_train(&x);
        // batch mean 1.5; biased var 1.25 -> unbiased 1.25 * 4/3
        assert_abs_diff_eq!(bn.running_mean[0], 0.5 * 0.0 + 0.5 * 1.5, epsilon = 1e-12);
        assert_abs_diff_eq!(bn.running_var[0], 0.5 * 1.0 + 0.5 * (1.25 * 4.0 / 3.0), epsilon = 1e-12);
    }

    #[test]
    fn param_gradients_match_finite_difference() {
        let mut bn = BatchNorm2d::<f64>::new(3);
        bn.gamma.value = Init::seeded(3).normal::<f64>(&[3], 0.3);
        bn.gamma.value.mapv_inplace(|v| v + 1.0);
        bn.beta.value = Init::seeded(4).normal::<f64>(&[3], 0.3);
        let x = rand4((2, 3, 4, 4), 5);
        let r = rand4((2, 3, 4, 4), 6);
        let report = gradcheck::check(
            &mut bn,
            |m| {
                let (y, cache) = m.forward_train(&x);
                m.backward(&cache, &r);
                (&y * &r).sum()
            },
            |m| (&m.forward_train(&x).0 * &r).sum(),
            &GradCheckCfg::default(),
        );
        assert!(report.max_rel_err <= 1e-6, "{:?}", report);
    }

    #[test]
    fn input_gradient_matches_finite_difference() {
        let mut bn = BatchNorm2d::<f64>::new(2);
        bn.gamma.value.as_slice_mut().unwrap().copy_from_slice(&[1.3, 0.7]);
        bn.beta.value.as_slice_mut().unwrap().copy_from_slice(&[0.2, -0.4]);
        let mut x = rand4((2, 2, 3, 3), 7);
        let r = rand4((2, 2, 3, 3), 8);
        zero_grads(&mut bn);
        let (_, cache) = bn.forward_train(&x);
        let gx = bn.backward(&cache, &r);

        let h = 1e-6;
        for &idx in &[(0usize, 0usize, 0usize, 0usize), (1, 1, 2, 2), (0, 1, 1, 0)] {
            let v0 = x[[idx.0, idx.1, idx.2, idx.3]];
            x[[idx.0, idx.1, idx.2, idx.3]] = v0 + h;
            let up = (&bn.forward_train(&x).0 * &r).sum();
            x[[idx.0, idx.1, idx.2, idx.3]] = v0 - h;
            let down = (&bn.forward_train(&x).0 * &r).sum();
            x[[idx.0, idx.1, idx.2, idx.3]] = v0;
            let fd = (up - down) / (2.0 * h);
            let a = gx[[idx.0, idx.1, idx.2, idx.3]];
            assert!(
                (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8) < 1e-5,
                "a={a} fd={fd}"
            );
        }
    }
}
