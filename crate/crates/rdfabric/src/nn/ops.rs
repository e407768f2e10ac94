//! Parameter-free tensor ops and their adjoints.

use ndarray::{s, Array2, Array4, Zip};

use super::Scalar;

pub fn relu<F: Scalar>(x: &Array4<F>) -> Array4<F> {
    x.mapv(|v| if v > F::zero() { v } else { F::zero() })
}

/// `x` is the input the forward pass saw (mask source).
pub fn relu_backward<F: Scalar>(x: &Array4<F>, gy: &Array4<F>) -> Array4<F> {
    let mut gx = gy.clone();
    Zip::from(&mut gx).and(x).for_each(|g, &v| {
        if v <= F::zero() {
            *g = F::zero();
        }
    });
    gx
}

pub fn sigmoid<F: Scalar>(x: &Array4<F>) -> Array4<F> {
    x.mapv(|v| F::one() / (F::one() + (-v).exp()))
}

/// `y` is the forward output.
pub fn sigmoid_backward<F: Scalar>(y: &Array4<F>, gy: &Array4<F>) -> Array4<F> {
    let mut gx = gy.clone();
    Zip::from(&mut gx).and(y).for_each(|g, &s| *g = *g * s * (F::one() - s));
    gx
}

/// Non-overlapping `f x f` average pooling; spatial dims must divide evenly.
pub fn avg_pool<F: Scalar>(x: &Array4<F>, f: usize) -> Array4<F> {
    if f == 1 {
        return x.clone();
    }
    let (b, c, h, w) = x.dim();
    assert!(h % f == 0 && w % f == 0, "avg_pool: {h}x{w} not divisible by {f}");
    let (oh, ow) = (h / f, w / f);
    let inv = F::fl(1.0 / (f * f) as f64);
    let mut y = Array4::<F>::zeros((b, c, oh, ow));
    for bi in 0..b {
        for ci in 0..c {
            for oi in 0..oh {
                for oj in 0..ow {
                    let win = x.slice(s![bi, ci, oi * f..(oi + 1) * f, oj * f..(oj + 1) * f]);
                    y[[bi, ci, oi, oj]] = win.sum() * inv;
                }
            }
        }
    }
    y
}

pub fn avg_pool_backward<F: Scalar>(gy: &Array4<F>, f: usize) -> Array4<F> {
    if f == 1 {
        return gy.clone();
    }
    let (b, c, oh, ow) = gy.dim();
    let inv = F::fl(1.0 / (f * f) as f64);
    let mut gx = Array4::<F>::zeros((b, c, oh * f, ow * f));
    for bi in 0..b {
        for ci in 0..c {
            for oi in 0..oh {
                for oj in 0..ow {
                    let g = gy[[bi, ci, oi, oj]] * inv;
                    gx.slice_mut(s![bi, ci, oi * f..(oi + 1) * f, oj * f..(oj + 1) * f]).fill(g);
                }
            }
        }
    }
    gx
}

/// 3x3 max pooling, stride 2, padding 1 — the backbone's stem pool.
/// Forward-only: the teacher is never trained.
pub fn max_pool_3x3_s2_p1<F: Scalar>(x: &Array4<F>) -> Array4<F> {
    let (b, c, h, w) = x.dim();
    let (oh, ow) = ((h + 2 - 3) / 2 + 1, (w + 2 - 3) / 2 + 1);
    let mut y = Array4::<F>::zeros((b, c, oh, ow));
    for bi in 0..b {
        for ci in 0..c {
            for oi in 0..oh {
                for oj in 0..ow {
                    let mut m = F::neg_infinity();
                    for ki in 0..3usize {
                        let ih = (oi * 2 + ki) as isize - 1;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        for kj in 0..3usize {
                            let iw = (oj * 2 + kj) as isize - 1;
                            if iw < 0 || iw >= w as isize {
                                continue;
                            }
                            let v = x[[bi, ci, ih as usize, iw as usize]];
                            if v > m {
                                m = v;
                            }
                        }
                    }
                    y[[bi, ci, oi, oj]] = m;
                }
            }
        }
    }
    y
}

/// Nearest-neighbour x2 upsampling.
pub fn upsample_nearest_2x<F: Scalar>(x: &Array4<F>) -> Array4<F> {
    let (b, c, h, w) = x.dim();
    let mut y = Array4::<F>::zeros((b, c, h * 2, w * 2));
    for bi in 0..b {
        for ci in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let v = x[[bi, ci, i, j]];
                    y[[bi, ci, 2 * i, 2 * j]] = v;
                    y[[bi, ci, 2 * i, 2 * j + 1]] = v;
                    y[[bi, ci, 2 * i + 1, 2 * j]] = v;
                    y[[bi, ci, 2 * i + 1, 2 * j + 1]] = v;
                }
            }
        }
    }
    y
}

pub fn upsample_nearest_2x_backward<F: Scalar>(gy: &Array4<F>) -> Array4<F> {
    let (b, c, h2, w2) = gy.dim();
    assert!(h2 % 2 == 0 && w2 % 2 == 0);
    let (h, w) = (h2 / 2, w2 / 2);
    let mut gx = Array4::<F>::zeros((b, c, h, w));
    for bi in 0..b {
        for ci in 0..c {
            for i in 0..h {
                for j in 0..w {
                    gx[[bi, ci, i, j]] = gy[[bi, ci, 2 * i, 2 * j]]
                        + gy[[bi, ci, 2 * i, 2 * j + 1]]
                        + gy[[bi, ci, 2 * i + 1, 2 * j]]
                        + gy[[bi, ci, 2 * i + 1, 2 * j + 1]];
                }
            }
        }
    }
    gx
}

/// Global average pooling `[b, c, h, w] -> [b, c]`.
pub fn global_avg_pool<F: Scalar>(x: &Array4<F>) -> Array2<F> {
    let (b, c, h, w) = x.dim();
    let inv = F::fl(1.0 / (h * w) as f64);
    let mut y = Array2::<F>::zeros((b, c));
    for bi in 0..b {
        for ci in 0..c {
            y[[bi, ci]] = x.slice(s![bi, ci, .., ..]).sum() * inv;
        }
    }
    y
}

pub fn global_avg_pool_backward<F: Scalar>(gy: &Array2<F>, h: usize, w: usize) -> Array4<F> {
    let (b, c) = gy.dim();
    let inv = F::fl(1.0 / (h * w) as f64);
    let mut gx = Array4::<F>::zeros((b, c, h, w));
    for bi in 0..b {
        for ci in 0..c {
            gx.slice_mut(s![bi, ci, .., ..]).fill(gy[[bi, ci]] * inv);
        }
    }
    gx
}
