//! Channel-gating attention: `y = x * sigmoid(conv2(relu(conv1(x))))` with
//! 1x1 convolutions through a reduced middle width.

use ndarray::Array4;

use crate::error::{Error, Result};
use crate::nn::ops::{relu, relu_backward, sigmoid, sigmoid_backward};
use crate::nn::{join, Conv2d, Init, Module, Param, Scalar};

#[derive(Debug, Clone)]
pub struct AttentionBlock<F> {
    pub conv1: Conv2d<F>,
    /// Zero-initialized bias, so gates start at 0.5 and the block begins as
    /// a mild attenuator rather than a hard mask.
    pub conv2: Conv2d<F>,
}

#[derive(Debug)]
pub struct AttnCache<F> {
    a1: Array4<F>,
    r1: Array4<F>,
    gate: Array4<F>,
}

impl<F: Scalar> AttentionBlock<F> {
    pub fn new(channels: usize, reduction: usize, init: &mut Init) -> Self {
        let mid = (channels / reduction).max(1);
        AttentionBlock {
            conv1: Conv2d::new(channels, mid, 1, 1, 0, true, init),
            conv2: Conv2d::new(mid, channels, 1, 1, 0, true, init),
        }
    }

    pub fn channels(&self) -> usize {
        self.conv1.c_in()
    }

    fn check(&self, x: &Array4<F>) -> Result<()> {
        if x.dim().1 != self.channels() {
            return Err(Error::Shape {
                op: "attention_forward",
                message: format!(
                    "input has {} channels, block expects {}",
                    x.dim().1,
                    self.channels()
                ),
            });
        }
        Ok(())
    }

    pub fn forward(&self, x: &Array4<F>) -> Result<(Array4<F>, AttnCache<F>)> {
        self.check(x)?;
        let a1 = self.conv1.forward(x);
        let r1 = relu(&a1);
        let gate = sigmoid(&self.conv2.forward(&r1));
        let y = x * &gate;
        Ok((y, AttnCache { a1, r1, gate }))
    }

    pub fn forward_eval(&self, x: &Array4<F>) -> Result<Array4<F>> {
        Ok(self.forward(x)?.0)
    }

    pub fn backward(&mut self, x: &Array4<F>, cache: &AttnCache<F>, gy: &Array4<F>) -> Array4<F> {
        let gx_direct = gy * &cache.gate;
        let dgate = gy * x;
        let da2 = sigmoid_backward(&cache.gate, &dgate);
        let dr1 = self.conv2.backward(&cache.r1, &da2);
        let da1 = relu_backward(&cache.a1, &dr1);
        let gx_gate = self.conv1.backward(x, &da1);
        gx_direct + gx_gate
    }
}

impl<F: Scalar> Module<F> for AttentionBlock<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        self.conv1.visit_params(&join(prefix, "conv1"), f);
        self.conv2.visit_params(&join(prefix, "conv2"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{self, GradCheckCfg};
    use approx::assert_abs_diff_eq;

    fn rand4(shape: (usize, usize, usize, usize), seed: u64) -> Array4<f64> {
        Init::seeded(seed)
            .normal::<f64>(&[shape.0, shape.1, shape.2, shape.3], 1.0)
            .into_dimensionality()
            .unwrap()
    }

    #[test]
    fn matches_composed_primitives() {
        let mut init = Init::seeded(1);
        let block = AttentionBlock::<f64>::new(16, 8, &mut init);
        let x = rand4((2, 16, 5, 5), 2);
        let (y, _) = block.forward(&x).unwrap();
        let want = &x * &sigmoid(&block.conv2.forward(&relu(&block.conv1.forward(&x))));
        for (a, b) in y.iter().zip(want.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
        assert_eq!(y.dim(), x.dim());
    }

    #[test]
    fn zero_input_passes_through_as_zero() {
        let mut init = Init::seeded(3);
        let block = AttentionBlock::<f64>::new(8, 8, &mut init);
        let x = Array4::<f64>::zeros((1, 8, 4, 4));
        let (y, cache) = block.forward(&x).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
        // ...because the freshly initialized gate sits at exactly 0.5
        // (both conv biases start at zero), not because the gate is closed.
        assert!(cache.gate.iter().all(|&g| g == 0.5));
    }

    #[test]
    fn channel_mismatch_is_an_error() {
        let mut init = Init::seeded(4);
        let block = AttentionBlock::<f64>::new(8, 8, &mut init);
        let x = Array4::<f64>::zeros((1, 4, 4, 4));
        assert!(matches!(block.forward(&x), Err(Error::Shape { .. })));
    }

    #[test]
    fn gradients_match_finite_difference() {
        let mut init = Init::seeded(5);
        let mut block = AttentionBlock::<f64>::new(12, 4, &mut init);
        let x = rand4((2, 12, 4, 4), 6);
        let r = rand4((2, 12, 4, 4), 7);
        let report = gradcheck::check(
            &mut block,
            |m| {
                let (y, cache) = m.forward(&x).unwrap();
                m.backward(&x, &cache, &r);
                (&y * &r).sum()
            },
            |m| (&m.forward(&x).unwrap().0 * &r).sum(),
            &GradCheckCfg::default(),
        );
        assert!(report.max_rel_err <= 1e-4, "{:?}", report);
    }

    #[test]
    fn input_gradient_matches_finite_difference() {
        let mut init = Init::seeded(8);
        let mut block = AttentionBlock::<f64>::new(6, 2, &mut init);
        let mut x = rand4((1, 6, 3, 3), 9);
        let r = rand4((1, 6, 3, 3), 10);
        crate::nn::zero_grads(&mut block);
        let (_, cache) = block.forward(&x).unwrap();
        let gx = block.backward(&x, &cache, &r);
        let h = 1e-6;
        for &idx in &[(0usize, 0usize, 0usize, 0usize), (0, 5, 2, 2), (0, 3, 1, 0)] {
            let v0 = x[[idx.0, idx.1, idx.2, idx.3]];
            x[[idx.0, idx.1, idx.2, idx.3]] = v0 + h;
            let up = (&block.forward(&x).unwrap().0 * &r).sum();
            x[[idx.0, idx.1, idx.2, idx.3]] = v0 - h;
            let down = (&block.forward(&x).unwrap().0 * &r).sum();
            x[[idx.0, idx.1, idx.2, idx.3]] = v0;
            let fd = (up - down) / (2.0 * h);
            let a = gx[[idx.0, idx.1, idx.2, idx.3]];
            assert!((a - fd).abs() / a.abs().max(fd.abs()).max(1e-8) < 1e-5, "a={a} fd={fd}");
        }
    }
}
