//! Class-balanced tile sampling by rejection: draws alternate between
//! malignant and benign, and a tile's label is decided by its center pixel.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::manifest::{DatasetManifest, TileRecord, DEFAULT_TILE_SIDE};
use super::slide::PyramidalSlide;
use super::tissue::{choose_working_level, tissue_mask, TissueMask};
use crate::error::{Error, Result};
use crate::model::{BENIGN, MALIGNANT};

pub const DEFAULT_ATTEMPTS: usize = 10_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SamplerConfig {
    pub tile_side: usize,
    /// Candidate tiles tried per accepted tile.
    pub max_attempts: usize,
    /// Level used for tissue detection; chosen per slide when `None`.
    pub working_level: Option<usize>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            tile_side: DEFAULT_TILE_SIDE,
            max_attempts: DEFAULT_ATTEMPTS,
            working_level: None,
        }
    }
}

/// `n` tiles, alternating malignant and benign starting with malignant,
/// using default attempts and per-slide working levels.
pub fn sample_balanced_tiles(
    slides: &[PyramidalSlide],
    n: usize,
    tile_side: usize,
    seed: u64,
) -> Result<DatasetManifest> {
    let cfg = SamplerConfig {
        tile_side,
        ..SamplerConfig::default()
    };
    sample_balanced_tiles_with(slides, n, &cfg, seed)
}

pub fn sample_balanced_tiles_with(
    slides: &[PyramidalSlide],
    n: usize,
    cfg: &SamplerConfig,
    seed: u64,
) -> Result<DatasetManifest> {
    if !n.is_multiple_of(2) {
        return Err(Error::Config(format!("tile count must be even, got {n}")));
    }
    let mut manifest = DatasetManifest {
        records: Vec::with_capacity(n),
        seed: Some(seed),
        config: format!(
            "n={n};side={};attempts={};slides={}",
            cfg.tile_side,
            cfg.max_attempts,
            slides.iter().map(PyramidalSlide::id).collect::<Vec<_>>().join("+")
        ),
    };
    if n == 0 {
        return Ok(manifest);
    }
    if cfg.tile_side == 0 {
        return Err(Error::Config("tile side must be positive".into()));
    }
    let usable: Vec<&PyramidalSlide> = slides
        .iter()
        .filter(|s| {
            let (w, h) = s.extents();
            w >= cfg.tile_side && h >= cfg.tile_side
        })
        .collect();
    let malignant: Vec<usize> = (0..usable.len()).filter(|&i| usable[i].has_malignancy()).collect();
    if malignant.is_empty() {
        return Err(Error::SamplingExhausted {
            attempts: 0,
            label: "malignant",
        });
    }
    let masks: Vec<TissueMask> = usable
        .iter()
        .map(|s| tissue_mask(s, cfg.working_level.unwrap_or_else(|| choose_working_level(s))))
        .collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..n {
        let want = if i % 2 == 0 { MALIGNANT } else { BENIGN };
        let mut accepted = None;
        for _ in 0..cfg.max_attempts {
            let si = if want == MALIGNANT {
                malignant[rng.random_range(0..malignant.len())]
            } else {
                rng.random_range(0..usable.len())
            };
            let slide = usable[si];
            let (w, h) = slide.extents();
            let x = rng.random_range(0..=w - cfg.tile_side);
            let y = rng.random_range(0..=h - cfg.tile_side);
            let rec = TileRecord::new(slide.id(), x, y, cfg.tile_side, want);
            let (cx, cy) = rec.center();
            let ok = if want == MALIGNANT {
                slide.is_malignant_at(cx, cy)
            } else {
                masks[si].contains_level0(cx, cy) && !slide.is_malignant_at(cx, cy)
            };
            if ok {
                accepted = Some(rec);
                break;
            }
        }
        let Some(rec) = accepted else {
            return Err(Error::SamplingExhausted {
                attempts: cfg.max_attempts,
                label: if want == MALIGNANT { "malignant" } else { "benign" },
            });
        };
        manifest.records.push(rec);
    }
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wsi::synth::{generate_synthetic_slide, SynthSpec};

    #[test]
    fn ten_tiles_on_default_slide() {
        let s = generate_synthetic_slide(&SynthSpec::default()).unwrap();
        let m = sample_balanced_tiles(std::slice::from_ref(&s.slide), 10, 32, 3).unwrap();
        assert_eq!(m.label_counts(None), (5, 5));
        for r in &m.records {
            let (cx, cy) = r.center();
            if r.label == MALIGNANT {
                assert!((32..224).contains(&cx));
            } else {
                assert!((224..416).contains(&cx) && (32..416).contains(&cy));
            }
        }
    }

    #[test]
    fn zero_odd_and_hopeless() {
        let s = generate_synthetic_slide(&SynthSpec::default()).unwrap();
        let slides = std::slice::from_ref(&s.slide);
        assert!(sample_balanced_tiles(slides, 0, 32, 0).unwrap().is_empty());
        assert!(matches!(sample_balanced_tiles(slides, 3, 32, 0), Err(Error::Config(_))));
        let clean = generate_synthetic_slide(&SynthSpec {
            malignant: None,
            ..SynthSpec::default()
        })
        .unwrap();
        assert!(matches!(
            sample_balanced_tiles(std::slice::from_ref(&clean.slide), 2, 32, 0),
            Err(Error::SamplingExhausted { .. })
        ));
    }
}
