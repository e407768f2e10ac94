//! Central-difference gradient verification for `Module` trees.
//!
//! Run models at `f64` here: the perturbation size that keeps truncation
//! error small is below what `f32` arithmetic can resolve.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use super::{zero_grads, Module, Scalar};

#[derive(Debug, Clone)]
pub struct GradCheckCfg {
    /// Relative perturbation; absolute step is `step * max(1, |w|)`.
    pub step: f64,
    /// Components checked per parameter tensor (sampled without replacement).
    pub max_per_param: usize,
    pub seed: u64,
    /// Disagreements above this are re-estimated at smaller steps before
    /// they count. When the perturbation window straddles a ReLU kink the
    /// central difference is off by O(1) no matter how small the step is,
    /// but shrinking the step moves the window off the kink; a genuinely
    /// wrong gradient keeps disagreeing at every step size.
    pub refine_threshold: f64,
}

impl Default for GradCheckCfg {
    fn default() -> Self {
        GradCheckCfg { step: 1e-5, max_per_param: 24, seed: 0, refine_threshold: 1e-4 }
    }
}

#[derive(Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// `param.name[flat_index]` of the worst component.
    pub worst: String,
}

/// Compare analytic gradients against central differences.
///
/// `forward_backward` must zero nothing itself: it runs the full forward and
/// backward pass, accumulating into `.grad` (grads are cleared here first).
/// `loss` runs the forward pass only and returns the scalar objective; it is
/// called twice per checked component.
pub fn check<F, M>(
    model: &mut M,
    mut forward_backward: impl FnMut(&mut M) -> f64,
    mut loss: impl FnMut(&mut M) -> f64,
    cfg: &GradCheckCfg,
) -> GradCheckReport
where
    F: Scalar,
    M: Module<F> + ?Sized,
{
    zero_grads(model);
    forward_backward(model);

    let mut analytic: Vec<(String, Vec<f64>)> = Vec::new();
    model.visit_params("", &mut |name, p| {
        analytic.push((name.to_string(), p.grad.iter().map(|g| g.dbl()).collect()));
    });

    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let mut report = GradCheckReport { checked: 0, max_rel_err: 0.0, worst: String::new() };

    for (pi, (name, grads)) in analytic.iter().enumerate() {
        let n = grads.len();
        let picks: Vec<usize> = if n <= cfg.max_per_param {
            (0..n).collect()
        } else {
            let mut seen = std::collections::BTreeSet::new();
            while seen.len() < cfg.max_per_param {
                seen.insert(rng.random_range(0..n));
            }
            seen.into_iter().collect()
        };

        for idx in picks {
            let w0 = read_param(model, pi, idx);
            let base_h = cfg.step * w0.abs().max(1.0);
            let a = grads[idx];

            let mut central = |h: f64| {
                write_param(model, pi, idx, w0 + h);
                let up = loss(model);
                write_param(model, pi, idx, w0 - h);
                let down = loss(model);
                write_param(model, pi, idx, w0);
                (up - down) / (2.0 * h)
            };
            let rel_err = |fd: f64| (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);

            let mut fd = central(base_h);
            if a.abs() < 1e-10 && fd.abs() < 1e-10 {
                report.checked += 1;
                continue;
            }
            let mut rel = rel_err(fd);
            for shrink in [16.0, 64.0] {
                if rel <= cfg.refine_threshold {
                    break;
                }
                let fd2 = central(base_h / shrink);
                let rel2 = rel_err(fd2);
                if rel2 < rel {
                    rel = rel2;
                    fd = fd2;
                }
            }

            report.checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = format!("{name}[{idx}] analytic={a:.6e} fd={fd:.6e}");
            }
        }
    }
    report
}

fn read_param<F: Scalar, M: Module<F> + ?Sized>(model: &mut M, pi: usize, idx: usize) -> f64 {
    let mut i = 0usize;
    let mut out = 0.0;
    model.visit_params("", &mut |_, p| {
        if i == pi {
            out = p.value.as_slice_mut().expect("standard layout param")[idx].dbl();
        }
        i += 1;
    });
    out
}

fn write_param<F: Scalar, M: Module<F> + ?Sized>(model: &mut M, pi: usize, idx: usize, v: f64) {
    let mut i = 0usize;
    model.visit_params("", &mut |_, p| {
        if i == pi {
            p.value.as_slice_mut().expect("standard layout param")[idx] = F::fl(v);
        }
        i += 1;
    });
}
