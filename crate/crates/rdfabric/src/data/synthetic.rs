//! Synthetic fabric textures for desk-scale testing: repeating base patterns
//! with Gaussian pixel noise and optional localized defects.
//!
//! The defect is applied on top of a defect-free twin generated from the same
//! seed, and the returned mask marks exactly the pixels that actually
//! changed. Base texture and defect geometry draw from independent RNG
//! streams, so the twin of a defective image is bit-identical to the image
//! generated with `defect = none`.

use std::fs;
use std::path::Path;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Init;

/// RNG stream ids; keeping them apart makes defect placement independent of
/// the base-noise draw count.
const STREAM_BASE: u64 = 0;
const STREAM_DEFECT: u64 = 1;

/// Blend target for defective pixels — a dark stain clearly off any base
/// tone, so a nonzero blend always changes the pixel.
const DEFECT_COLOR: [f32; 3] = [0.08, 0.05, 0.12];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pattern {
    Plain,
    Stripes,
    Checker,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefectKind {
    None,
    Rectangle,
    Blob,
    LineCut,
}

impl DefectKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DefectKind::None => "none",
            DefectKind::Rectangle => "rectangle",
            DefectKind::Blob => "blob",
            DefectKind::LineCut => "line_cut",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticTextureSpec {
    pub pattern: Pattern,
    pub base_color: [f32; 3],
    pub noise_std: f32,
    pub defect: DefectKind,
    /// Blend strength toward the defect color, in `[0, 1]`; 0 leaves the
    /// texture untouched (chance-level fixture).
    pub defect_magnitude: f32,
    pub size: usize,
}

impl Default for SyntheticTextureSpec {
    fn default() -> Self {
        SyntheticTextureSpec {
            pattern: Pattern::Plain,
            base_color: [0.55, 0.50, 0.45],
            noise_std: 0.03,
            defect: DefectKind::None,
            defect_magnitude: 0.35,
            size: 256,
        }
    }
}

impl SyntheticTextureSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size < 64 {
            return Err(Error::Config(format!("synthetic size must be at least 64: {}", self.size)));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Config(format!("noise_std must be non-negative: {}", self.noise_std)));
        }
        if !(0.0..=1.0).contains(&self.defect_magnitude) {
            return Err(Error::Config(format!(
                "defect_magnitude must be in [0, 1]: {}",
                self.defect_magnitude
            )));
        }
        Ok(())
    }
}

/// Generate one texture. Returns a `[3, size, size]` image in `[0, 1]` and a
/// `[size, size]` mask with 1 where the image differs from its defect-free
/// twin.
pub fn generate_synthetic(
    spec: &SyntheticTextureSpec,
    seed: u64,
) -> Result<(Array3<f32>, Array2<u8>)> {
    spec.validate()?;
    let clean = base_texture(spec, seed);
    let mut image = clean.clone();
    apply_defect(spec, seed, &mut image);

    let s = spec.size;
    let mut mask = Array2::<u8>::zeros((s, s));
    for y in 0..s {
        for x in 0..s {
            let changed = (0..3).any(|c| image[[c, y, x]] != clean[[c, y, x]]);
            mask[[y, x]] = changed as u8;
        }
    }
    Ok((image, mask))
}

fn base_texture(spec: &SyntheticTextureSpec, seed: u64) -> Array3<f32> {
    let s = spec.size;
    let cell = (s / 16).max(1);
    let mut noise = Init::seeded_stream(seed, STREAM_BASE);
    let mut img = Array3::<f32>::zeros((3, s, s));
    for y in 0..s {
        for x in 0..s {
            let factor = match spec.pattern {
                Pattern::Plain => 1.0,
                Pattern::Stripes => {
                    if (x / cell) % 2 == 0 {
                        1.0
                    } else {
                        0.8
                    }
                }
                Pattern::Checker => {
                    if (x / cell + y / cell) % 2 == 0 {
                        1.0
                    } else {
                        0.8
                    }
                }
            };
            for c in 0..3 {
                let n = noise.standard_normal() as f32 * spec.noise_std;
                img[[c, y, x]] = (spec.base_color[c] * factor + n).clamp(0.0, 1.0);
            }
        }
    }
    img
}

fn apply_defect(spec: &SyntheticTextureSpec, seed: u64, img: &mut Array3<f32>) {
    let s = spec.size;
    let m = spec.defect_magnitude;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(STREAM_DEFECT);
    let blend = |img: &mut Array3<f32>, y: usize, x: usize| {
        for c in 0..3 {
            let v = img[[c, y, x]] * (1.0 - m) + m * DEFECT_COLOR[c];
            img[[c, y, x]] = v.clamp(0.0, 1.0);
        }
    };
    match spec.defect {
        DefectKind::None => {}
        DefectKind::Rectangle => {
            let side = s / 8;
            let x0 = rng.random_range(0..=s - side);
            let y0 = rng.random_range(0..=s - side);
            for y in y0..y0 + side {
                for x in x0..x0 + side {
                    blend(img, y, x);
                }
            }
        }
        DefectKind::Blob => {
            let r = (s / 12).max(2) as i64;
            let cx = rng.random_range(r..s as i64 - r);
            let cy = rng.random_range(r..s as i64 - r);
            for y in (cy - r)..=(cy + r) {
                for x in (cx - r)..=(cx + r) {
                    if (x - cx).pow(2) + (y - cy).pow(2) <= r * r {
                        blend(img, y as usize, x as usize);
                    }
                }
            }
        }
        DefectKind::LineCut => {
            let width = (s / 64).max(2);
            let vertical = rng.random_bool(0.5);
            let pos = rng.random_range(0..=s - width);
            for along in 0..s {
                for across in pos..pos + width {
                    let (y, x) = if vertical { (along, across) } else { (across, along) };
                    blend(img, y, x);
                }
            }
        }
    }
}

pub fn save_rgb(path: &Path, img: &Array3<f32>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let (_, h, w) = img.dim();
    let buffer = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| {
            (img[[c, y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8
        };
        image::Rgb([px(0), px(1), px(2)])
    });
    buffer.save(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

fn save_mask(path: &Path, mask: &Array2<u8>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let (h, w) = mask.dim();
    let buffer = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([mask[[y as usize, x as usize]] * 255])
    });
    buffer.save(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

/// One synthetic fabric class written out in the MVTEC folder layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticClassSpec {
    pub class_name: String,
    /// Texture template; its `defect` field is ignored (goods are generated
    /// defect-free, defective samples cycle through `defects`).
    pub texture: SyntheticTextureSpec,
    pub n_train: usize,
    pub n_test_good: usize,
    pub n_test_defective: usize,
    pub defects: Vec<DefectKind>,
    pub seed: u64,
}

impl SyntheticClassSpec {
    pub fn validate(&self) -> Result<()> {
        self.texture.validate()?;
        if self.class_name.is_empty() {
            return Err(Error::Config("synthetic class_name must not be empty".into()));
        }
        if self.n_train == 0 {
            return Err(Error::Config("a synthetic class needs at least one training image".into()));
        }
        if self.n_test_defective > 0
            && (self.defects.is_empty() || self.defects.contains(&DefectKind::None))
        {
            return Err(Error::Config(
                "defective samples need a non-empty defect list without `none`".into(),
            ));
        }
        Ok(())
    }
}

/// Seed offsets keeping the three sample groups on disjoint seeds.
const TEST_GOOD_SEED_OFFSET: u64 = 1 << 20;
const TEST_DEFECT_SEED_OFFSET: u64 = 1 << 21;

/// Generate and write a full class under `root` in the MVTEC layout;
/// [`scan_mvtec_layout`](super::scan_mvtec_layout) on the result sees the
/// usual train/test/ground-truth structure.
pub fn write_synthetic_corpus(root: &Path, spec: &SyntheticClassSpec) -> Result<()> {
    spec.validate()?;
    let class_dir = root.join(&spec.class_name);
    let mut good = spec.texture.clone();
    good.defect = DefectKind::None;

    for i in 0..spec.n_train {
        let (img, _) = generate_synthetic(&good, spec.seed + i as u64)?;
        save_rgb(&class_dir.join(format!("train/good/{i:04}.png")), &img)?;
    }
    for i in 0..spec.n_test_good {
        let (img, _) = generate_synthetic(&good, spec.seed + TEST_GOOD_SEED_OFFSET + i as u64)?;
        save_rgb(&class_dir.join(format!("test/good/{i:04}.png")), &img)?;
    }
    for i in 0..spec.n_test_defective {
        let mut defective = spec.texture.clone();
        defective.defect = spec.defects[i % spec.defects.len()];
        let kind = defective.defect.as_str();
        let (img, mask) =
            generate_synthetic(&defective, spec.seed + TEST_DEFECT_SEED_OFFSET + i as u64)?;
        save_rgb(&class_dir.join(format!("test/{kind}/{i:04}.png")), &img)?;
        save_mask(&class_dir.join(format!("ground_truth/{kind}/{i:04}_mask.png")), &mask)?;
    }
    Ok(())
}
