//! Training objective: per-layer cosine feature distance between teacher and
//! student pyramids, plus the auxiliary self-reconstruction term that trains
//! the masked bottleneck block.
//!
//! At every spatial position the channel vectors of teacher and student are
//! l2-normalized and compared with `d = ||t_hat - s_hat||^2 / 2`, which equals
//! `1 - cos(t, s)`. The same map drives both the loss (averaged) and the
//! anomaly score (upsampled and blended) so train and inference cannot drift
//! apart.

use ndarray::{Array3, Array4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelOut;
use crate::nn::Scalar;
use crate::teacher::FeaturePyramid;

/// Norms at or below this are treated as exactly zero vectors.
const NORM_EPS: f64 = 1e-12;

fn default_alpha() -> [f64; 4] {
    [0.4, 0.3, 0.2, 0.1]
}

fn default_lambda() -> f64 {
    0.1
}

/// Per-layer blend weights and the auxiliary term's weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// One weight per pyramid layer, shallow to deep.
    pub alpha: [f64; 4],
    /// Weight of the masked-block reconstruction term.
    pub lambda: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { alpha: default_alpha(), lambda: default_lambda() }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.alpha.iter().any(|&a| !a.is_finite() || a < 0.0) {
            return Err(Error::Config(format!("loss alpha must be non-negative: {:?}", self.alpha)));
        }
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(Error::Config(format!("loss lambda must be non-negative: {}", self.lambda)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// Mean cosine distance per layer, unweighted.
    pub per_layer: [f64; 4],
    /// Alpha-weighted sum of the per-layer means.
    pub distill: f64,
    /// Mean squared error of the masked block's reconstruction.
    pub aux: f64,
    /// `distill + lambda * aux`.
    pub total: f64,
}

/// Gradients of [`LossBreakdown::total`] at each model output.
#[derive(Debug)]
pub struct LossGrads<F> {
    pub d_student: [Array4<F>; 4],
    pub d_sspcab_out: Array4<F>,
    pub d_fused: Array4<F>,
}

fn check_same_shape<F: Scalar>(op: &'static str, t: &Array4<F>, s: &Array4<F>) -> Result<()> {
    if t.dim() != s.dim() {
        return Err(Error::Shape {
            op,
            message: format!("teacher {:?} vs student {:?}", t.dim(), s.dim()),
        });
    }
    if t.is_empty() {
        return Err(Error::Shape { op, message: "empty feature map".into() });
    }
    Ok(())
}

/// Per-position cosine distance `1 - cos(t, s)` over the channel axis,
/// returned as a `[batch, h, w]` map in `[0, 2]`.
///
/// Zero vectors make the cosine undefined; two zeros agree perfectly (0),
/// one zero is maximal uncertainty (1).
pub fn pixel_distance_map<F: Scalar>(t: &Array4<F>, s: &Array4<F>) -> Result<Array3<F>> {
    let (map, _) = distance_impl(t, s, false)?;
    Ok(map)
}

/// The distance map together with the gradient of its *sum* w.r.t. the
/// student features. The teacher side is frozen and gets no gradient.
pub fn pixel_distance_grad<F: Scalar>(
    t: &Array4<F>,
    s: &Array4<F>,
) -> Result<(Array3<F>, Array4<F>)> {
    let (map, grad) = distance_impl(t, s, true)?;
    Ok((map, grad.expect("requested gradient")))
}

fn distance_impl<F: Scalar>(
    t: &Array4<F>,
    s: &Array4<F>,
    want_grad: bool,
) -> Result<(Array3<F>, Option<Array4<F>>)> {
    check_same_shape("pixel_distance", t, s)?;
    let (b, c, h, w) = t.dim();
    let mut map = Array3::<F>::zeros((b, h, w));
    let mut grad = want_grad.then(|| Array4::<F>::zeros((b, c, h, w)));

    for bi in 0..b {
        for hi in 0..h {
            for wi in 0..w {
                let mut tt = 0.0f64;
                let mut ss = 0.0f64;
                let mut ts = 0.0f64;
                for ci in 0..c {
                    let tv = t[[bi, ci, hi, wi]].dbl();
                    let sv = s[[bi, ci, hi, wi]].dbl();
                    tt += tv * tv;
                    ss += sv * sv;
                    ts += tv * sv;
                }
                let tn = tt.sqrt();
                let sn = ss.sqrt();
                let t_zero = tn <= NORM_EPS;
                let s_zero = sn <= NORM_EPS;
                let d = match (t_zero, s_zero) {
                    (true, true) => 0.0,
                    (true, false) | (false, true) => 1.0,
                    (false, false) => (1.0 - ts / (tn * sn)).clamp(0.0, 2.0),
                };
                map[[bi, hi, wi]] = F::fl(d);
                if let Some(g) = grad.as_mut() {
                    if !t_zero && !s_zero {
                        // d = 1 - (t.s)/(|t||s|); dd/ds = -(t_hat - cos * s_hat)/|s|
                        let cos = ts / (tn * sn);
                        for ci in 0..c {
                            let t_hat = t[[bi, ci, hi, wi]].dbl() / tn;
                            let s_hat = s[[bi, ci, hi, wi]].dbl() / sn;
                            g[[bi, ci, hi, wi]] = F::fl(-(t_hat - cos * s_hat) / sn);
                        }
                    }
                }
            }
        }
    }
    Ok((map, grad))
}

/// Mean squared error and its two-sided gradients. The reconstruction target
/// is a function of trainable projections, so both sides propagate.
fn mse_with_grads<F: Scalar>(
    out: &Array4<F>,
    target: &Array4<F>,
) -> Result<(f64, Array4<F>, Array4<F>)> {
    check_same_shape("reconstruction_mse", target, out)?;
    let n = out.len() as f64;
    let mut sum = 0.0f64;
    let mut d_out = Array4::<F>::zeros(out.raw_dim());
    for (i, (o, t)) in out.iter().zip(target.iter()).enumerate() {
        let diff = o.dbl() - t.dbl();
        sum += diff * diff;
        let flat = d_out.as_slice_mut().expect("standard layout");
        flat[i] = F::fl(2.0 * diff / n);
    }
    let d_target = d_out.mapv(|v| -v);
    Ok((sum / n, d_out, d_target))
}

/// Full training objective with gradients at every model output.
pub fn objective_with_grads<F: Scalar>(
    teacher: &FeaturePyramid<F>,
    out: &ModelOut<F>,
    weights: &LossWeights,
) -> Result<(LossBreakdown, LossGrads<F>)> {
    weights.validate()?;
    if out.student.len() != 4 {
        return Err(Error::Train(format!("expected 4 student outputs, got {}", out.student.len())));
    }
    let mut per_layer = [0.0f64; 4];
    let mut d_student: Vec<Array4<F>> = Vec::with_capacity(4);
    for l in 0..4 {
        let t = &teacher.taps[l];
        let s = &out.student[l];
        let (map, mut g) = pixel_distance_grad(t, s)?;
        let n = map.len() as f64;
        per_layer[l] = map.iter().map(|d| d.dbl()).sum::<f64>() / n;
        let scale = F::fl(weights.alpha[l] / n);
        g *= scale;
        d_student.push(g);
    }
    let (aux, mut d_sspcab_out, mut d_fused) = mse_with_grads(&out.sspcab_out, &out.fused)?;
    let lambda = F::fl(weights.lambda);
    d_sspcab_out *= lambda;
    d_fused *= lambda;

    let distill: f64 = (0..4).map(|l| weights.alpha[l] * per_layer[l]).sum();
    let breakdown = LossBreakdown { per_layer, distill, aux, total: distill + weights.lambda * aux };
    let grads = LossGrads {
        d_student: d_student.try_into().expect("exactly four layers"),
        d_sspcab_out,
        d_fused,
    };
    Ok((breakdown, grads))
}

/// Loss values only, for validation passes.
pub fn objective_value<F: Scalar>(
    teacher: &FeaturePyramid<F>,
    out: &ModelOut<F>,
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    weights.validate()?;
    if out.student.len() != 4 {
        return Err(Error::Train(format!("expected 4 student outputs, got {}", out.student.len())));
    }
    let mut per_layer = [0.0f64; 4];
    for l in 0..4 {
        let map = pixel_distance_map(&teacher.taps[l], &out.student[l])?;
        per_layer[l] = map.iter().map(|d| d.dbl()).sum::<f64>() / map.len() as f64;
    }
    check_same_shape("reconstruction_mse", &out.fused, &out.sspcab_out)?;
    let n = out.sspcab_out.len() as f64;
    let aux = out
        .sspcab_out
        .iter()
        .zip(out.fused.iter())
        .map(|(o, t)| {
            let d = o.dbl() - t.dbl();
            d * d
        })
        .sum::<f64>()
        / n;
    let distill: f64 = (0..4).map(|l| weights.alpha[l] * per_layer[l]).sum();
    Ok(LossBreakdown { per_layer, distill, aux, total: distill + weights.lambda * aux })
}
