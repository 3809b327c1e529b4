//! Procedural slides with known ground truth: a white background, a tissue
//! region filled with a sparse pink texture, and a malignant subregion
//! filled with a dense purple one.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::image::{write_pgm, Mask, RgbImage};
use super::slide::PyramidalSlide;
use crate::error::{Error, Result};

/// Downsample factors of generated pyramids.
pub const SYNTH_DOWNSAMPLES: [usize; 3] = [1, 4, 16];
pub const TISSUE_TRUTH_FILE: &str = "tissue_mask_level0.pgm";

/// A level-0 region; membership is tested at pixel centers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum Region {
    /// Half-open `[x0, x1) × [y0, y1)`.
    Rect { x0: usize, y0: usize, x1: usize, y1: usize },
    Ellipse { cx: f64, cy: f64, rx: f64, ry: f64 },
}

impl Region {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        match *self {
            Region::Rect { x0, y0, x1, y1 } => (x0..x1).contains(&x) && (y0..y1).contains(&y),
            Region::Ellipse { cx, cy, rx, ry } => {
                let dx = (x as f64 + 0.5 - cx) / rx;
                let dy = (y as f64 + 0.5 - cy) / ry;
                dx * dx + dy * dy <= 1.0
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Texture {
    pub base: [u8; 3],
    pub nucleus: [u8; 3],
    /// Expected nuclei per pixel.
    pub nuclei_density: f64,
    pub nucleus_radius: f64,
    /// Per-channel uniform jitter amplitude.
    pub noise: u8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub slide_id: String,
    pub width: usize,
    pub height: usize,
    pub seed: u64,
    pub background: [u8; 3],
    pub tissue: Region,
    pub malignant: Option<Region>,
    pub benign_texture: Texture,
    pub malignant_texture: Texture,
}

impl Default for SynthSpec {
    /// 448×448 with tissue in `[32, 416)²` and its left half malignant.
    fn default() -> Self {
        Self {
            slide_id: "synthetic".into(),
            width: 448,
            height: 448,
            seed: 0,
            background: [255, 255, 255],
            tissue: Region::Rect {
                x0: 32,
                y0: 32,
                x1: 416,
                y1: 416,
            },
            malignant: Some(Region::Rect {
                x0: 32,
                y0: 32,
                x1: 224,
                y1: 416,
            }),
            benign_texture: Texture {
                base: [232, 172, 206],
                nucleus: [150, 92, 182],
                nuclei_density: 0.004,
                nucleus_radius: 2.5,
                noise: 10,
            },
            malignant_texture: Texture {
                base: [176, 106, 190],
                nucleus: [86, 42, 136],
                nuclei_density: 0.02,
                nucleus_radius: 3.5,
                noise: 10,
            },
        }
    }
}

impl SynthSpec {
    pub fn with_id_and_seed(id: &str, seed: u64) -> Self {
        Self {
            slide_id: id.to_owned(),
            seed,
            ..Self::default()
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Spec(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data")
    }

    pub fn validate(&self) -> Result<()> {
        let coarsest = SYNTH_DOWNSAMPLES[SYNTH_DOWNSAMPLES.len() - 1];
        if self.width < coarsest || self.height < coarsest {
            return Err(Error::Spec(format!(
                "extents {}x{} too small for a {coarsest}x downsampled level",
                self.width, self.height
            )));
        }
        if self.slide_id.is_empty() || self.slide_id.contains([',', '/', '\n']) {
            return Err(Error::Spec(format!("unusable slide id {:?}", self.slide_id)));
        }
        for t in [&self.benign_texture, &self.malignant_texture] {
            if !(t.nuclei_density >= 0.0 && t.nucleus_radius >= 0.0) {
                return Err(Error::Spec("texture density and radius must be non-negative".into()));
            }
        }
        let mut tissue_pixels = 0;
        for y in 0..self.height {
            for x in 0..self.width {
                let tissue = self.tissue.contains(x, y);
                tissue_pixels += usize::from(tissue);
                if !tissue && self.malignant.as_ref().is_some_and(|m| m.contains(x, y)) {
                    return Err(Error::Spec(format!("malignant region leaves the tissue region at ({x}, {y})")));
                }
            }
        }
        if tissue_pixels == 0 {
            return Err(Error::Spec("tissue region covers no pixel".into()));
        }
        Ok(())
    }
}

/// A generated slide with the masks it was drawn from.
#[derive(Clone, Debug)]
pub struct SyntheticSlide {
    pub slide: PyramidalSlide,
    pub tissue_truth: Mask,
    pub malignancy_truth: Mask,
}

impl SyntheticSlide {
    /// Writes the slide directory plus the level-0 tissue ground truth.
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.slide.save(dir)?;
        write_pgm(&dir.join(TISSUE_TRUTH_FILE), &self.tissue_truth.to_gray())
    }
}

fn jitter(rng: &mut ChaCha8Rng, rgb: [u8; 3], noise: u8) -> [u8; 3] {
    let n = i16::from(noise);
    rgb.map(|c| (i16::from(c) + rng.random_range(-n..=n)).clamp(0, 255) as u8)
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Class {
    Background,
    Benign,
    Malignant,
}

pub fn generate_synthetic_slide(spec: &SynthSpec) -> Result<SyntheticSlide> {
    spec.validate()?;
    let (w, h) = (spec.width, spec.height);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let tissue_truth = Mask::from_fn(w, h, |x, y| spec.tissue.contains(x, y));
    let malignancy_truth = Mask::from_fn(w, h, |x, y| spec.malignant.as_ref().is_some_and(|m| m.contains(x, y)));
    let class = |x: usize, y: usize| {
        if malignancy_truth.get(x, y) {
            Class::Malignant
        } else if tissue_truth.get(x, y) {
            Class::Benign
        } else {
            Class::Background
        }
    };
    let mut img = RgbImage::filled(w, h, spec.background);
    for y in 0..h {
        for x in 0..w {
            let tex = match class(x, y) {
                Class::Background => continue,
                Class::Benign => &spec.benign_texture,
                Class::Malignant => &spec.malignant_texture,
            };
            img.set_pixel(x, y, jitter(&mut rng, tex.base, tex.noise));
        }
    }
    for (cls, tex) in [
        (Class::Benign, &spec.benign_texture),
        (Class::Malignant, &spec.malignant_texture),
    ] {
        let count = (tex.nuclei_density * (w * h) as f64).round() as usize;
        for _ in 0..count {
            let cx = rng.random_range(0.0..w as f64);
            let cy = rng.random_range(0.0..h as f64);
            let r = tex.nucleus_radius * rng.random_range(0.75..1.25);
            let (xa, xb) = ((cx - r).floor().max(0.0) as usize, ((cx + r).ceil() as usize).min(w));
            let (ya, yb) = ((cy - r).floor().max(0.0) as usize, ((cy + r).ceil() as usize).min(h));
            for y in ya..yb {
                for x in xa..xb {
                    let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                    if dx * dx + dy * dy <= r * r && class(x, y) == cls {
                        img.set_pixel(x, y, jitter(&mut rng, tex.nucleus, tex.noise));
                    }
                }
            }
        }
    }
    let mut levels = vec![(1, img)];
    for pair in SYNTH_DOWNSAMPLES.windows(2) {
        let mut next = levels.last().expect("level 0 present").1.clone();
        let mut d = pair[0];
        while d < pair[1] {
            next = next.mean_pool2();
            d *= 2;
        }
        levels.push((pair[1], next));
    }
    let malignancy = spec.malignant.is_some().then(|| malignancy_truth.clone());
    Ok(SyntheticSlide {
        slide: PyramidalSlide::from_levels(&spec.slide_id, levels, malignancy)?,
        tissue_truth,
        malignancy_truth,
    })
}

/// Reads a spec file, or returns the default spec when `path` is `None`.
pub fn load_synth_spec(path: Option<&Path>) -> Result<SynthSpec> {
    match path {
        None => Ok(SynthSpec::default()),
        Some(p) => SynthSpec::from_json(&fs::read_to_string(p)?),
    }
}
