//! Slide pipeline against the synthetic generator's known ground truth.

use std::sync::OnceLock;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use triresnet_core::verify::synthetic_slides;
use triresnet_core::wsi::{
    choose_working_level, generate_synthetic_slide, hsv_to_rgb, load_slide, resize_tile, rgb_to_hsv,
    sample_balanced_tiles, tile_tensor, tissue_mask, PyramidalSlide, RgbImage, SynthSpec,
};
use triresnet_core::MALIGNANT;

fn default_slide() -> PyramidalSlide {
    generate_synthetic_slide(&SynthSpec::with_id_and_seed("s", 5)).unwrap().slide
}

#[test]
fn pyramid_levels_are_mean_pool_chains() {
    let slide = default_slide();
    let l0 = slide.read_level(0).unwrap();
    let l1 = slide.read_level(1).unwrap();
    let l2 = slide.read_level(2).unwrap();
    assert_eq!((l1.width(), l1.height()), (448 / 4, 448 / 4));
    assert_eq!((l2.width(), l2.height()), (448 / 16, 448 / 16));
    assert_eq!(l1, l0.mean_pool2().mean_pool2());
    assert_eq!(l2, l1.mean_pool2().mean_pool2());
}

#[test]
fn same_seed_same_slide() {
    let a = default_slide();
    let b = default_slide();
    for l in 0..3 {
        assert_eq!(a.read_level(l).unwrap(), b.read_level(l).unwrap());
    }
}

#[test]
fn file_backed_regions_match_full_decode() {
    let dir = tempfile::tempdir().unwrap();
    generate_synthetic_slide(&SynthSpec::with_id_and_seed("s", 5))
        .unwrap()
        .save(dir.path())
        .unwrap();
    let slide = load_slide(dir.path()).unwrap();
    let full = slide.read_level(2).unwrap();
    for (x, y, w, h) in [(0, 0, 28, 28), (3, 5, 10, 7), (27, 27, 1, 1)] {
        assert_eq!(slide.read_region(2, x, y, w, h).unwrap(), full.crop(x, y, w, h).unwrap());
    }
    assert!(slide.read_region(2, 20, 20, 10, 1).is_err());
}

#[test]
fn tile_at_origin_is_background() {
    let t = tile_tensor::<f64>(&default_slide(), 0, 0, 2, None).unwrap();
    assert_eq!(t.shape(), &[1, 3, 2, 2]);
    assert!(t.data().iter().all(|&v| v == 1.0));
    assert!(tile_tensor::<f64>(&default_slide(), 440, 0, 16, None).is_err());
}

#[test]
fn resize_identity_and_constants() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let data: Vec<u8> = (0..20 * 20 * 3).map(|_| rng.random()).collect();
    let img = RgbImage::new(20, 20, data).unwrap();
    assert_eq!(resize_tile(&img, 20), img);
    let flat = RgbImage::filled(50, 50, [12, 200, 77]);
    assert_eq!(resize_tile(&flat, 197), RgbImage::filled(197, 197, [12, 200, 77]));
}

#[test]
fn tissue_mask_tracks_ground_truth() {
    let synth = generate_synthetic_slide(&SynthSpec::with_id_and_seed("s", 9)).unwrap();
    let level = choose_working_level(&synth.slide);
    let tissue = tissue_mask(&synth.slide, level).unwrap();
    let (w, h) = synth.slide.extents();
    let agree = (0..h)
        .flat_map(|y| (0..w).map(move |x| (x, y)))
        .filter(|&(x, y)| tissue.contains_level0(x, y) == synth.tissue_truth.get(x, y))
        .count();
    assert!(agree as f64 / (w * h) as f64 >= 0.99, "agreement {agree} of {}", w * h);
}

fn mean_rgb(slide: &PyramidalSlide, x: usize, y: usize, side: usize) -> [f64; 3] {
    let img = slide.read_region(0, x, y, side, side).unwrap();
    let mut acc = [0.0; 3];
    for px in img.data().chunks(3) {
        for c in 0..3 {
            acc[c] += f64::from(px[c]);
        }
    }
    acc.map(|v| v / (side * side) as f64)
}

#[test]
fn textures_are_nearest_neighbor_separable() {
    let slides: Vec<PyramidalSlide> = synthetic_slides(4).unwrap().into_iter().map(|s| s.slide).collect();
    let manifest = sample_balanced_tiles(&slides, 100, 32, 4).unwrap();
    let points: Vec<([f64; 3], usize)> = manifest
        .records
        .iter()
        .map(|r| {
            let slide = slides.iter().find(|s| s.id() == r.slide_id).unwrap();
            (mean_rgb(slide, r.x, r.y, r.side), r.label)
        })
        .collect();
    let mut correct = 0;
    for (i, (p, label)) in points.iter().enumerate() {
        let mut dists: Vec<(f64, usize)> = points
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(_, (q, l))| ((0..3).map(|c| (p[c] - q[c]).powi(2)).sum(), *l))
            .collect();
        dists.sort_by(|a, b| a.0.total_cmp(&b.0));
        let votes = dists[..3].iter().filter(|(_, l)| *l == MALIGNANT).count();
        if (votes >= 2) == (*label == MALIGNANT) {
            correct += 1;
        }
    }
    assert!(correct >= 90, "3-NN leave-one-out accuracy {correct}/100");
}

#[test]
fn malignant_draws_cover_the_region() {
    let slide = generate_synthetic_slide(&SynthSpec::with_id_and_seed("a", 2)).unwrap().slide;
    let manifest = sample_balanced_tiles(std::slice::from_ref(&slide), 2000, 32, 2).unwrap();
    // malignant region [32, 224) × [32, 416) on an 8×8 grid
    let mut seen = [[false; 8]; 8];
    for r in manifest.records.iter().filter(|r| r.label == MALIGNANT) {
        let (cx, cy) = r.center();
        assert!((32..224).contains(&cx) && (32..416).contains(&cy));
        seen[(cy - 32) * 8 / 384][(cx - 32) * 8 / 192] = true;
    }
    let covered = seen.iter().flatten().filter(|&&b| b).count();
    assert!(covered >= 58, "{covered} of 64 cells");
}

#[test]
fn sampler_is_deterministic_and_handles_zero() {
    let slides: Vec<PyramidalSlide> = synthetic_slides(8).unwrap().into_iter().map(|s| s.slide).collect();
    let a = sample_balanced_tiles(&slides, 50 * 2, 32, 8).unwrap();
    let b = sample_balanced_tiles(&slides, 50 * 2, 32, 8).unwrap();
    assert_eq!(a, b);
    assert!(sample_balanced_tiles(&slides, 0, 32, 8).unwrap().is_empty());
    assert!(sample_balanced_tiles(&slides, 3, 32, 8).is_err());
}

proptest! {
    #[test]
    fn hsv_round_trip_within_one(r in any::<u8>(), g in any::<u8>(), b in any::<u8>()) {
        let (h, s, v) = rgb_to_hsv([r, g, b]);
        let back = hsv_to_rgb(h, s, v);
        for (x, y) in [r, g, b].into_iter().zip(back) {
            prop_assert!(x.abs_diff(y) <= 1);
        }
    }

    #[test]
    fn coords_round_trip_through_coarse_level(x in 0usize..448, y in 0usize..448) {
        static SLIDE: OnceLock<PyramidalSlide> = OnceLock::new();
        let slide = SLIDE.get_or_init(default_slide);
        let (cx, cy) = slide.map_coords((x, y), 0, 2).unwrap();
        let (bx, by) = slide.map_coords((cx, cy), 2, 0).unwrap();
        prop_assert!(x.abs_diff(bx) < 16 && y.abs_diff(by) < 16);
    }
}
