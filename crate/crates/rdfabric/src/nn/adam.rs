//! Adam optimizer over the `Module` parameter tree.

use ndarray::{ArrayD, Zip};

use super::{Module, Param, Scalar};

#[derive(Debug, Clone)]
pub struct Adam<F> {
    lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    slots: Vec<(ArrayD<F>, ArrayD<F>)>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, slots: Vec::new() }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One update from the gradients currently accumulated in `model`.
    pub fn step<M: Module<F> + ?Sized>(&mut self, model: &mut M) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2) = (F::fl(self.beta1), F::fl(self.beta2));
        let (nb1, nb2) = (F::fl(1.0 - self.beta1), F::fl(1.0 - self.beta2));
        let step_scale = F::fl(self.lr / bc1);
        let vh_scale = F::fl(1.0 / bc2);
        let eps = F::fl(self.eps);

        let slots = &mut self.slots;
        let mut idx = 0usize;
        let first = slots.is_empty();
        model.visit_params("", &mut |_name, p: &mut Param<F>| {
            if first {
                slots.push((ArrayD::zeros(p.value.raw_dim()), ArrayD::zeros(p.value.raw_dim())));
            }
            let (m, v) = slots
                .get_mut(idx)
                .expect("optimizer state drifted from the parameter tree");
            assert_eq!(m.shape(), p.value.shape(), "optimizer slot shape");
            Zip::from(&mut p.value)
                .and(m)
                .and(v)
                .and(&p.grad)
                .for_each(|w, m, v, &g| {
                    *m = b1 * *m + nb1 * g;
                    *v = b2 * *v + nb2 * g * g;
                    let vh = (*v * vh_scale).sqrt() + eps;
                    *w = *w - step_scale * *m / vh;
                });
            idx += 1;
        });
        assert_eq!(idx, slots.len(), "optimizer state drifted from the parameter tree");
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{zero_grads, Module, Param};
    use ndarray::IxDyn;

    struct Bowl {
        w: Param<f64>,
    }

    impl Module<f64> for Bowl {
        fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<f64>)) {
            f(&crate::nn::join(prefix, "w"), &mut self.w);
        }
    }

    #[test]
    fn first_step_magnitude_is_lr() {
        // With bias correction the very first update is lr * sign(g).
        let mut m = Bowl { w: Param::new(ndarray::ArrayD::from_elem(IxDyn(&[3]), 5.0)) };
        let mut opt = Adam::new(0.01);
        m.w.grad.fill(123.456);
        opt.step(&mut m);
        for &w in m.w.value.iter() {
            assert!((w - (5.0 - 0.01)).abs() < 1e-6, "w = {w}");
        }
    }

    #[test]
    fn converges_on_quadratic() {
        let mut m = Bowl { w: Param::new(ndarray::ArrayD::from_elem(IxDyn(&[4]), 3.0)) };
        let mut opt = Adam::new(0.05);
        for _ in 0..2000 {
            zero_grads(&mut m);
            let g = m.w.value.mapv(|w| 2.0 * w);
            m.w.grad.assign(&g);
            opt.step(&mut m);
        }
        for &w in m.w.value.iter() {
            assert!(w.abs() < 1e-3, "w = {w}");
        }
    }

    #[test]
    fn lr_change_takes_effect() {
        let mut opt = Adam::<f64>::new(0.05);
        opt.set_lr(0.025);
        assert_eq!(opt.lr(), 0.025);
    }
}
