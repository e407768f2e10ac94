//! Reversed shallow decoder. Five stages of one residual basic block each
//! walk the seed embedding back up the teacher's resolution ladder; the four
//! shallowest stage outputs are the student counterparts of the teacher taps.

use ndarray::{Array4, ArrayD};

use crate::error::{Error, Result};
use crate::nn::ops::{relu, relu_backward, upsample_nearest_2x, upsample_nearest_2x_backward};
use crate::nn::{join, BatchNorm2d, BnCache, Conv2d, Init, Module, Param, Scalar};
use crate::teacher::ArchPlan;

/// Pre-activation inputs and batch-norm caches for one block's backward pass.
#[derive(Debug)]
pub struct BlockCache<F> {
    x: Array4<F>,
    b1: Array4<F>,
    r1: Array4<F>,
    s: Array4<F>,
    c1: BnCache<F>,
    c2: BnCache<F>,
    cd: Option<BnCache<F>>,
}

/// Standard two-conv residual block with an optional 1x1 projection on the
/// skip path when the channel count changes.
#[derive(Debug, Clone)]
pub struct BasicBlock<F> {
    conv1: Conv2d<F>,
    bn1: BatchNorm2d<F>,
    conv2: Conv2d<F>,
    bn2: BatchNorm2d<F>,
    down: Option<(Conv2d<F>, BatchNorm2d<F>)>,
}

impl<F: Scalar> BasicBlock<F> {
    pub fn new(c_in: usize, c_out: usize, init: &mut Init) -> Self {
        let down = (c_in != c_out)
            .then(|| (Conv2d::new(c_in, c_out, 1, 1, 0, false, init), BatchNorm2d::new(c_out)));
        BasicBlock {
            conv1: Conv2d::new(c_in, c_out, 3, 1, 1, false, init),
            bn1: BatchNorm2d::new(c_out),
            conv2: Conv2d::new(c_out, c_out, 3, 1, 1, false, init),
            bn2: BatchNorm2d::new(c_out),
            down,
        }
    }

    pub fn forward_train(&mut self, x: &Array4<F>) -> (Array4<F>, BlockCache<F>) {
        let h1 = self.conv1.forward(x);
        let (b1, c1) = self.bn1.forward_train(&h1);
        let r1 = relu(&b1);
        let h2 = self.conv2.forward(&r1);
        let (b2, c2) = self.bn2.forward_train(&h2);
        let (skip, cd) = match &mut self.down {
            Some((dc, dbn)) => {
                let (sd, cd) = dbn.forward_train(&dc.forward(x));
                (sd, Some(cd))
            }
            None => (x.clone(), None),
        };
        let s = b2 + skip;
        let y = relu(&s);
        (y, BlockCache { x: x.clone(), b1, r1, s, c1, c2, cd })
    }

    pub fn forward_eval(&self, x: &Array4<F>) -> Array4<F> {
        let r1 = relu(&self.bn1.forward_eval(&self.conv1.forward(x)));
        let b2 = self.bn2.forward_eval(&self.conv2.forward(&r1));
        let skip = match &self.down {
            Some((dc, dbn)) => dbn.forward_eval(&dc.forward(x)),
            None => x.clone(),
        };
        relu(&(b2 + skip))
    }

    pub fn backward(&mut self, cache: &BlockCache<F>, gy: &Array4<F>) -> Array4<F> {
        let gs = relu_backward(&cache.s, gy);
        let gh2 = self.bn2.backward(&cache.c2, &gs);
        let gr1 = self.conv2.backward(&cache.r1, &gh2);
        let gb1 = relu_backward(&cache.b1, &gr1);
        let gh1 = self.bn1.backward(&cache.c1, &gb1);
        let mut gx = self.conv1.backward(&cache.x, &gh1);
        match (&mut self.down, &cache.cd) {
            (Some((dc, dbn)), Some(cd)) => {
                let gd = dbn.backward(cd, &gs);
                gx += &dc.backward(&cache.x, &gd);
            }
            (None, None) => gx += &gs,
            _ => unreachable!("cache produced by a differently shaped block"),
        }
        gx
    }
}

impl<F: Scalar> Module<F> for BasicBlock<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        self.conv1.visit_params(&join(prefix, "conv1"), f);
        self.bn1.visit_params(&join(prefix, "bn1"), f);
        self.conv2.visit_params(&join(prefix, "conv2"), f);
        self.bn2.visit_params(&join(prefix, "bn2"), f);
        if let Some((dc, dbn)) = &mut self.down {
            dc.visit_params(&join(prefix, "down.conv"), f);
            dbn.visit_params(&join(prefix, "down.bn"), f);
        }
    }

    fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ArrayD<F>)) {
        self.bn1.visit_buffers(&join(prefix, "bn1"), f);
        self.bn2.visit_buffers(&join(prefix, "bn2"), f);
        if let Some((_, dbn)) = &mut self.down {
            dbn.visit_buffers(&join(prefix, "down.bn"), f);
        }
    }
}

#[derive(Debug, Clone)]
struct DecoderStage<F> {
    up: bool,
    block: BasicBlock<F>,
}

#[derive(Debug)]
pub struct StageCache<F> {
    up: bool,
    block: BlockCache<F>,
}

/// Decoder outputs are indexed like teacher taps: `outputs[l]` mirrors tap
/// `l`. Injections use the same indexing; an injection is added to the input
/// of the stage that produces the matching output.
#[derive(Debug, Clone)]
pub struct StudentDecoder<F> {
    plan: ArchPlan,
    stages: Vec<DecoderStage<F>>,
}

#[derive(Debug)]
pub struct StudentCache<F> {
    stages: Vec<StageCache<F>>,
}

impl<F: Scalar> StudentDecoder<F> {
    pub fn new(plan: &ArchPlan, init: &mut Init) -> Self {
        let e = plan.embed_channels;
        let t = &plan.tap_channels;
        let chans = [(e, e), (e, t[3]), (t[3], t[2]), (t[2], t[1]), (t[1], t[0])];
        let ups = [true, true, true, true, false];
        let stages = chans
            .iter()
            .zip(ups)
            .map(|(&(ci, co), up)| DecoderStage { up, block: BasicBlock::new(ci, co, init) })
            .collect();
        StudentDecoder { plan: plan.clone(), stages }
    }

    fn check_seed(&self, seed: &Array4<F>) -> Result<()> {
        let (_, c, h, w) = seed.dim();
        let want = (self.plan.embed_channels, self.plan.embed_hw().0, self.plan.embed_hw().1);
        if (c, h, w) != want {
            return Err(Error::Shape {
                op: "student_forward",
                message: format!("seed is {:?} per sample, plan requires {want:?}", (c, h, w)),
            });
        }
        Ok(())
    }

    /// Add the injection feeding the stage that produces output `l`, if any.
    fn inject(
        h: Array4<F>,
        l: usize,
        injections: &[Option<Array4<F>>; 4],
    ) -> Result<Array4<F>> {
        match &injections[l] {
            None => Ok(h),
            Some(inj) => {
                if inj.dim() != h.dim() {
                    return Err(Error::Shape {
                        op: "student_forward",
                        message: format!(
                            "injection for output {l} is {:?}, stage input is {:?}",
                            inj.dim(),
                            h.dim()
                        ),
                    });
                }
                Ok(h + inj)
            }
        }
    }

    /// Returns `(outputs, cache)` with `outputs[l]` mirroring teacher tap `l`.
    pub fn forward_train(
        &mut self,
        seed: &Array4<F>,
        injections: &[Option<Array4<F>>; 4],
    ) -> Result<(Vec<Array4<F>>, StudentCache<F>)> {
        self.check_seed(seed)?;
        let mut caches = Vec::with_capacity(5);
        let mut h = seed.clone();
        let mut outputs_deep_first = Vec::with_capacity(4);
        for (i, stage) in self.stages.iter_mut().enumerate() {
            let x = if i == 0 { h } else { Self::inject(h, 4 - i, injections)? };
            let pre = if stage.up { upsample_nearest_2x(&x) } else { x };
            let (y, block) = stage.block.forward_train(&pre);
            caches.push(StageCache { up: stage.up, block });
            if i > 0 {
                outputs_deep_first.push(y.clone());
            }
            h = y;
        }
        outputs_deep_first.reverse();
        Ok((outputs_deep_first, StudentCache { stages: caches }))
    }

    pub fn forward_eval(
        &self,
        seed: &Array4<F>,
        injections: &[Option<Array4<F>>; 4],
    ) -> Result<Vec<Array4<F>>> {
        self.check_seed(seed)?;
        let mut h = seed.clone();
        let mut outputs_deep_first = Vec::with_capacity(4);
        for (i, stage) in self.stages.iter().enumerate() {
            let x = if i == 0 { h } else { Self::inject(h, 4 - i, injections)? };
            let pre = if stage.up { upsample_nearest_2x(&x) } else { x };
            let y = stage.block.forward_eval(&pre);
            if i > 0 {
                outputs_deep_first.push(y.clone());
            }
            h = y;
        }
        outputs_deep_first.reverse();
        Ok(outputs_deep_first)
    }

    /// `d_outputs[l]` is the loss gradient at output `l`. Returns the seed
    /// gradient and the gradient at each injection site (tap indexing).
    pub fn backward(
        &mut self,
        cache: &StudentCache<F>,
        d_outputs: &[Array4<F>; 4],
    ) -> (Array4<F>, Vec<Array4<F>>) {
        let mut g_inj: Vec<Option<Array4<F>>> = vec![None, None, None, None];
        let mut g = d_outputs[0].clone();
        for i in (1..5).rev() {
            let sc = &cache.stages[i];
            let g_pre = self.stages[i].block.backward(&sc.block, &g);
            let g_in = if sc.up { upsample_nearest_2x_backward(&g_pre) } else { g_pre };
            let l = 4 - i;
            g_inj[l] = Some(g_in.clone());
            g = g_in;
            if l < 3 {
                g += &d_outputs[l + 1];
            }
        }
        let sc = &cache.stages[0];
        let g_pre = self.stages[0].block.backward(&sc.block, &g);
        let g_seed = if sc.up { upsample_nearest_2x_backward(&g_pre) } else { g_pre };
        (g_seed, g_inj.into_iter().map(|g| g.unwrap()).collect())
    }
}

impl<F: Scalar> Module<F> for StudentDecoder<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        for (i, s) in self.stages.iter_mut().enumerate() {
            s.block.visit_params(&join(prefix, &format!("stage{i}")), f);
        }
    }

    fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ArrayD<F>)) {
        for (i, s) in self.stages.iter_mut().enumerate() {
            s.block.visit_buffers(&join(prefix, &format!("stage{i}")), f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{self, GradCheckCfg};

    fn seed_for(plan: &ArchPlan, b: usize, seed: u64) -> Array4<f64> {
        let (eh, ew) = plan.embed_hw();
        Init::seeded(seed)
            .normal::<f64>(&[b, plan.embed_channels, eh, ew], 1.0)
            .into_dimensionality()
            .unwrap()
    }

    fn rand_like(dim: (usize, usize, usize, usize), seed: u64) -> Array4<f64> {
        Init::seeded(seed)
            .normal::<f64>(&[dim.0, dim.1, dim.2, dim.3], 1.0)
            .into_dimensionality()
            .unwrap()
    }

    #[test]
    fn outputs_mirror_the_teacher_tap_shapes() {
        let plan = ArchPlan::standard();
        let mut dec = StudentDecoder::<f32>::new(&plan, &mut Init::seeded(1));
        let seed: Array4<f32> = Array4::zeros((1, 512, 4, 4));
        let (outs, _) = dec.forward_train(&seed, &[None, None, None, None]).unwrap();
        let dims: Vec<_> = outs.iter().map(|o| o.dim()).collect();
        assert_eq!(
            dims,
            vec![(1, 64, 64, 64), (1, 64, 64, 64), (1, 128, 32, 32), (1, 256, 16, 16)]
        );
    }

    #[test]
    fn bad_seed_and_bad_injection_are_rejected() {
        let plan = ArchPlan::tiny();
        let mut dec = StudentDecoder::<f64>::new(&plan, &mut Init::seeded(2));
        let bad_seed = Array4::<f64>::zeros((1, 3, 2, 2));
        assert!(matches!(
            dec.forward_train(&bad_seed, &[None, None, None, None]),
            Err(Error::Shape { .. })
        ));
        let seed = seed_for(&plan, 1, 3);
        let bad_inj = Some(Array4::<f64>::zeros((1, 1, 1, 1)));
        assert!(matches!(
            dec.forward_train(&seed, &[bad_inj, None, None, None]),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn injection_touches_only_its_stage_and_shallower() {
        let plan = ArchPlan::tiny();
        let mut dec = StudentDecoder::<f64>::new(&plan, &mut Init::seeded(4));
        let seed = seed_for(&plan, 1, 5);
        let (base, _) = dec.forward_train(&seed, &[None, None, None, None]).unwrap();

        // An injection at site 1 is added to the input of the stage that
        // produces output 1 — an array shaped like output 2. It must change
        // outputs 1 and 0 but leave the deeper outputs 2 and 3 bit-identical.
        let inj = rand_like(base[2].dim(), 6);
        let (out, _) = dec.forward_train(&seed, &[None, Some(inj), None, None]).unwrap();
        assert_eq!(out[3], base[3]);
        assert_eq!(out[2], base[2]);
        assert_ne!(out[1], base[1]);
        assert_ne!(out[0], base[0]);
    }

    #[test]
    fn gradients_match_finite_difference() {
        let plan = ArchPlan::tiny();
        let mut dec = StudentDecoder::<f64>::new(&plan, &mut Init::seeded(7));
        let seed = seed_for(&plan, 2, 8);
        let probe: Vec<Array4<f64>> = {
            let (outs, _) = dec.forward_train(&seed, &[None, None, None, None]).unwrap();
            outs.iter().enumerate().map(|(l, o)| rand_like(o.dim(), 20 + l as u64)).collect()
        };
        let inj = {
            let (outs, _) = dec.forward_train(&seed, &[None, None, None, None]).unwrap();
            [None, Some(rand_like(outs[2].dim(), 30)), Some(rand_like(outs[3].dim(), 31)), None]
        };
        let loss = |m: &mut StudentDecoder<f64>| {
            let (outs, _) = m.forward_train(&seed, &inj).unwrap();
            outs.iter().zip(&probe).map(|(o, p)| (o * p).sum()).sum()
        };
        let report = gradcheck::check(
            &mut dec,
            |m| {
                let (outs, cache) = m.forward_train(&seed, &inj).unwrap();
                let d: [Array4<f64>; 4] = std::array::from_fn(|l| probe[l].clone());
                let _ = m.backward(&cache, &d);
                outs.iter().zip(&probe).map(|(o, p)| (o * p).sum()).sum()
            },
            loss,
            &GradCheckCfg { max_per_param: 8, ..Default::default() },
        );
        assert!(report.max_rel_err <= 1e-4, "{:?}", report);
    }

    #[test]
    fn injection_gradient_matches_finite_difference() {
        let plan = ArchPlan::tiny();
        let mut dec = StudentDecoder::<f64>::new(&plan, &mut Init::seeded(9));
        let seed = seed_for(&plan, 1, 10);
        let (outs, _) = dec.forward_train(&seed, &[None, None, None, None]).unwrap();
        let probe: Vec<Array4<f64>> =
            outs.iter().enumerate().map(|(l, o)| rand_like(o.dim(), 40 + l as u64)).collect();
        let inj1 = rand_like(outs[2].dim(), 50);

        let run = |m: &mut StudentDecoder<f64>, inj1: &Array4<f64>| {
            let injections = [None, Some(inj1.clone()), None, None];
            let (outs, cache) = m.forward_train(&seed, &injections).unwrap();
            let loss: f64 = outs.iter().zip(&probe).map(|(o, p)| (o * p).sum()).sum();
            (loss, cache)
        };
        let (_, cache) = run(&mut dec, &inj1);
        let d: [Array4<f64>; 4] = std::array::from_fn(|l| probe[l].clone());
        let (g_seed, g_inj) = dec.backward(&cache, &d);
        assert_eq!(g_seed.dim(), seed.dim());

        let h = 1e-5;
        for &(idx, j) in &[(0usize, 0usize), (1, 3), (0, 5)] {
            let mut plus = inj1.clone();
            let mut minus = inj1.clone();
            let flat = idx * inj1.shape()[3] + j; // arbitrary but reproducible positions
            let pos = {
                let (_, c, hh, ww) = inj1.dim();
                let lin = flat % (c * hh * ww);
                (0, lin / (hh * ww), (lin / ww) % hh, lin % ww)
            };
            plus[pos] += h;
            minus[pos] -= h;
            let (lp, _) = run(&mut dec, &plus);
            let (lm, _) = run(&mut dec, &minus);
            let fd = (lp - lm) / (2.0 * h);
            let an = g_inj[1][pos];
            assert!(
                (an - fd).abs() / an.abs().max(fd.abs()).max(1e-8) < 1e-4,
                "pos {pos:?}: analytic {an} vs fd {fd}"
            );
        }
    }
}
