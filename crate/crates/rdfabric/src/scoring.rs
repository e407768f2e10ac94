//! Localization maps and image scores.
//!
//! Per-layer feature distances are bilinearly upsampled to the input
//! resolution, summed, and smoothed with a reflective-border Gaussian. The
//! image score is the map's maximum — a single defective region should not
//! be averaged away by a large clean background.
//!
//! High-resolution sources are handled patch-wise: each tile of a
//! [`PatchGrid`] is scored independently, maps are stitched back at their
//! offsets, and the whole-image score is the max over patch scores.

use std::fs;
use std::io::Write;
use std::path::Path;

use image::imageops::FilterType;
use ndarray::{Array2, Array4, Axis};
use serde::Serialize;

use crate::data::{extract_patches, stack_batch, PatchGrid};
use crate::error::{Error, Result};
use crate::model::{ModelOut, RdModel};
use crate::objective::pixel_distance_map;
use crate::teacher::{NormStats, Teacher};

pub const DEFAULT_SIGMA: f64 = 4.0;

#[derive(Debug, Clone)]
pub struct AnomalyMap {
    /// Smoothed localization map at input resolution; non-negative.
    pub map: Array2<f32>,
    /// The constituent per-layer maps, upsampled but not smoothed.
    pub per_layer_maps: Vec<Array2<f32>>,
    pub sigma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ImageScore {
    pub score: f32,
    /// `(row, col)` of the maximum; ties resolve to the first in row-major
    /// order.
    pub argmax_location: (usize, usize),
}

/// Normalized 1-D Gaussian taps with radius `ceil(4 * sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Result<Vec<f64>> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::Config(format!("gaussian sigma must be positive: {sigma}")));
    }
    let radius = (4.0 * sigma).ceil() as usize;
    let mut taps: Vec<f64> = (-(radius as i64)..=radius as i64)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= total);
    Ok(taps)
}

fn reflect(mut i: i64, n: i64) -> usize {
    // Mirror without repeating the edge sample: -1 -> 1, n -> n-2.
    loop {
        if i < 0 {
            i = -i;
        } else if i >= n {
            i = 2 * (n - 1) - i;
        } else {
            return i as usize;
        }
        if n == 1 {
            return 0;
        }
    }
}

/// Separable Gaussian smoothing with mirrored borders. A constant map is a
/// fixed point: the kernel is normalized and reflection reuses real samples.
pub fn smooth_reflect(map: &Array2<f32>, sigma: f64) -> Result<Array2<f32>> {
    let taps = gaussian_kernel(sigma)?;
    let radius = (taps.len() / 2) as i64;
    let (h, w) = map.dim();
    let mut rows = Array2::<f32>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0f64;
            for (k, t) in taps.iter().enumerate() {
                let sx = reflect(x as i64 + k as i64 - radius, w as i64);
                acc += t * map[[y, sx]] as f64;
            }
            rows[[y, x]] = acc as f32;
        }
    }
    let mut out = Array2::<f32>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0f64;
            for (k, t) in taps.iter().enumerate() {
                let sy = reflect(y as i64 + k as i64 - radius, h as i64);
                acc += t * rows[[sy, x]] as f64;
            }
            out[[y, x]] = acc as f32;
        }
    }
    Ok(out)
}

/// Bilinear resize with half-pixel sample centers.
pub fn bilinear_upsample(map: &Array2<f32>, out_h: usize, out_w: usize) -> Array2<f32> {
    let (h, w) = map.dim();
    let mut out = Array2::<f32>::zeros((out_h, out_w));
    let scale_y = h as f64 / out_h as f64;
    let scale_x = w as f64 / out_w as f64;
    for oy in 0..out_h {
        let sy = ((oy as f64 + 0.5) * scale_y - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let fy = sy - y0 as f64;
        for ox in 0..out_w {
            let sx = ((ox as f64 + 0.5) * scale_x - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let fx = sx - x0 as f64;
            let top = map[[y0, x0]] as f64 * (1.0 - fx) + map[[y0, x1]] as f64 * fx;
            let bottom = map[[y1, x0]] as f64 * (1.0 - fx) + map[[y1, x1]] as f64 * fx;
            out[[oy, ox]] = (top * (1.0 - fy) + bottom * fy) as f32;
        }
    }
    out
}

/// Upsample each layer map to `target_size`, sum them, and smooth.
pub fn build_localization_map(
    per_layer_maps: &[Array2<f32>],
    target_size: usize,
    sigma: f64,
) -> Result<AnomalyMap> {
    if per_layer_maps.is_empty() {
        return Err(Error::Eval("localization needs at least one layer map".into()));
    }
    if let Some(v) = per_layer_maps.iter().flat_map(|m| m.iter()).find(|v| !v.is_finite() || **v < 0.0)
    {
        return Err(Error::Eval(format!("layer maps must be non-negative and finite, found {v}")));
    }
    let mut sum = Array2::<f32>::zeros((target_size, target_size));
    let mut upsampled = Vec::with_capacity(per_layer_maps.len());
    for m in per_layer_maps {
        let up = bilinear_upsample(m, target_size, target_size);
        sum += &up;
        upsampled.push(up);
    }
    let map = smooth_reflect(&sum, sigma)?;
    Ok(AnomalyMap { map, per_layer_maps: upsampled, sigma })
}

/// Maximum map value and its first row-major location.
pub fn image_score(map: &AnomalyMap) -> ImageScore {
    let mut best = f32::NEG_INFINITY;
    let mut loc = (0usize, 0usize);
    for ((y, x), &v) in map.map.indexed_iter() {
        if v > best {
            best = v;
            loc = (y, x);
        }
    }
    ImageScore { score: best, argmax_location: loc }
}

/// Run teacher and student on a normalized batch and build one localization
/// map per sample.
pub fn anomaly_maps(
    teacher: &Teacher,
    model: &RdModel<f32>,
    batch: &Array4<f32>,
    sigma: f64,
) -> Result<Vec<AnomalyMap>> {
    let pyramid = teacher.extract_features(batch)?;
    let out: ModelOut<f32> = model.forward_eval(&pyramid)?;
    let b = batch.dim().0;
    let target = teacher.spec().input_size;
    let mut layer_maps: Vec<Vec<Array2<f32>>> = vec![Vec::with_capacity(4); b];
    for l in 0..4 {
        let d = pixel_distance_map(&pyramid.taps[l], &out.student[l])?;
        for (bi, maps) in layer_maps.iter_mut().enumerate() {
            maps.push(d.index_axis(Axis(0), bi).to_owned());
        }
    }
    layer_maps.iter().map(|maps| build_localization_map(maps, target, sigma)).collect()
}

/// Patch-wise scores for one high-resolution image.
#[derive(Debug, Clone)]
pub struct WholeImageScore {
    pub grid: PatchGrid,
    pub patch_scores: Vec<f32>,
    /// Patch maps placed at their grid offsets; covers `rows*P x cols*P`
    /// pixels (floor-tiling margins are not scored).
    pub stitched: Array2<f32>,
    pub score: f32,
    /// Index into `grid.offsets` of the highest-scoring patch.
    pub argmax_patch: usize,
}

/// Place per-patch maps at their offsets and take the max patch score.
pub fn stitch_maps(grid: &PatchGrid, maps: &[AnomalyMap]) -> Result<WholeImageScore> {
    if maps.len() != grid.n_patches() {
        return Err(Error::Eval(format!(
            "{} patch maps for a grid of {} patches",
            maps.len(),
            grid.n_patches()
        )));
    }
    let p = grid.patch_size;
    let mut stitched = Array2::<f32>::zeros((grid.rows * p, grid.cols * p));
    let mut patch_scores = Vec::with_capacity(maps.len());
    for (map, &(x, y)) in maps.iter().zip(&grid.offsets) {
        let scaled = if map.map.dim() == (p, p) {
            map.map.clone()
        } else {
            bilinear_upsample(&map.map, p, p)
        };
        stitched.slice_mut(ndarray::s![y..y + p, x..x + p]).assign(&scaled);
        patch_scores.push(image_score(map).score);
    }
    let (argmax_patch, &score) = patch_scores
        .iter()
        .enumerate()
        .max_by(|(_, a), (_, b)| a.partial_cmp(b).expect("scores are finite"))
        .expect("at least one patch");
    Ok(WholeImageScore { grid: grid.clone(), patch_scores, stitched, score, argmax_patch })
}

/// Tile a high-resolution image, score every patch, and stitch the result.
/// Patches are resized to the teacher's input size when the grid uses a
/// different patch size.
pub fn score_whole_image(
    teacher: &Teacher,
    model: &RdModel<f32>,
    image: &image::RgbImage,
    patch_size: usize,
    norm: &NormStats,
    sigma: f64,
    batch_size: usize,
) -> Result<WholeImageScore> {
    let (w, h) = image.dimensions();
    let grid = extract_patches(w as usize, h as usize, patch_size)?;
    let input = teacher.spec().input_size;
    let mut patches = Vec::with_capacity(grid.n_patches());
    for &(x, y) in &grid.offsets {
        let view =
            image::imageops::crop_imm(image, x as u32, y as u32, patch_size as u32, patch_size as u32)
                .to_image();
        let sized = if patch_size == input {
            view
        } else {
            image::imageops::resize(&view, input as u32, input as u32, FilterType::Triangle)
        };
        let mut tensor = ndarray::Array3::<f32>::zeros((3, input, input));
        for (px, py, pixel) in sized.enumerate_pixels() {
            for c in 0..3 {
                let v = pixel.0[c] as f32 / 255.0;
                tensor[[c, py as usize, px as usize]] = (v - norm.mean[c] as f32) / norm.std[c] as f32;
            }
        }
        patches.push(tensor);
    }

    let chunk = batch_size.max(1);
    let mut maps = Vec::with_capacity(patches.len());
    for group in patches.chunks(chunk) {
        let batch = stack_batch(group)?;
        maps.extend(anomaly_maps(teacher, model, &batch, sigma)?);
    }
    stitch_maps(&grid, &maps)
}

/// Minimal NPY (format version 1.0) export of a 2-D f32 map.
pub fn write_npy(path: &Path, map: &Array2<f32>) -> Result<()> {
    let (h, w) = map.dim();
    let descr = format!("{{'descr': '<f4', 'fortran_order': False, 'shape': ({h}, {w}), }}");
    // Magic (8) + header-len field (2) + header must be a multiple of 64.
    let unpadded = 10 + descr.len() + 1;
    let padding = (64 - unpadded % 64) % 64;
    let header = format!("{descr}{}\n", " ".repeat(padding));

    let mut bytes = Vec::with_capacity(10 + header.len() + map.len() * 4);
    bytes.extend_from_slice(b"\x93NUMPY\x01\x00");
    bytes.extend_from_slice(&(header.len() as u16).to_le_bytes());
    bytes.extend_from_slice(header.as_bytes());
    for v in map.iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(path, e))
}

/// Min-max bounds used for 8-bit visualization.
pub fn normalization_bounds(map: &Array2<f32>) -> (f32, f32) {
    let mut lo = f32::INFINITY;
    let mut hi = f32::NEG_INFINITY;
    for &v in map.iter() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    (lo, hi)
}

/// 8-bit grayscale heatmap, min-max normalized per image.
pub fn write_heatmap_png(path: &Path, map: &Array2<f32>) -> Result<()> {
    let (lo, hi) = normalization_bounds(map);
    let span = (hi - lo).max(f32::MIN_POSITIVE);
    let (h, w) = map.dim();
    let img = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
        let v = (map[[y as usize, x as usize]] - lo) / span;
        image::Luma([(v.clamp(0.0, 1.0) * 255.0).round() as u8])
    });
    img.save(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

#[derive(Debug, Serialize)]
struct Sidecar<'a> {
    score: f32,
    argmax_location: (usize, usize),
    normalization_bounds: (f32, f32),
    #[serde(skip_serializing_if = "Option::is_none")]
    patch_scores: Option<&'a [f32]>,
}

/// JSON sidecar for an exported map; `patch_scores` is present for stitched
/// high-resolution results.
pub fn write_score_sidecar(
    path: &Path,
    score: &ImageScore,
    bounds: (f32, f32),
    patch_scores: Option<&[f32]>,
) -> Result<()> {
    let sidecar = Sidecar {
        score: score.score,
        argmax_location: score.argmax_location,
        normalization_bounds: bounds,
        patch_scores,
    };
    let json = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
    fs::write(path, json).map_err(|e| Error::io(path, e))
}
