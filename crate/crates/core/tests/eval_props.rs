use proptest::prelude::*;

use triresnet_core::eval::{
    assemble_heatmap, comparison_table, compute_metrics, evaluate, export_heatmap_image, read_heatmap_image,
    split_manifest, ConfusionMatrix, ConstantPredictor, GroundTruthOracle,
};
use triresnet_core::verify::synthetic_slides;
use triresnet_core::wsi::{sample_balanced_tiles, DatasetManifest, PyramidalSlide, Split, TileRecord};
use triresnet_core::MALIGNANT;

fn slides() -> Vec<PyramidalSlide> {
    synthetic_slides(6).unwrap().into_iter().map(|s| s.slide).collect()
}

#[test]
fn oracle_predictor_scores_perfectly() {
    let slides = slides();
    let manifest = sample_balanced_tiles(&slides, 40, 32, 6).unwrap();
    let (cm, report) = evaluate(&GroundTruthOracle, &manifest, Split::Train, &slides, 0.5).unwrap();
    assert_eq!((cm.tp, cm.tn, cm.fp, cm.fn_), (20, 20, 0, 0));
    assert_eq!(report.accuracy, 1.0);
    assert!(evaluate(&GroundTruthOracle, &manifest, Split::Test, &slides, 0.5).is_err());
}

#[test]
fn constant_predictor_gives_constant_tissue_heatmap() {
    let slides = synthetic_slides(6).unwrap();
    let s = &slides[0];
    let h = assemble_heatmap(&ConstantPredictor(0.3), &s.slide, 32, 32).unwrap();
    assert_eq!((h.rows, h.cols), (14, 14));
    for r in 0..h.rows {
        for c in 0..h.cols {
            let (x, y) = h.origin(r, c);
            let want = if s.tissue_truth.get(x + 16, y + 16) { 0.3 } else { 0.0 };
            assert_eq!(h.get(r, c), want);
        }
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("h.pgm");
    export_heatmap_image(&h, &path).unwrap();
    let (rows, cols, values) = read_heatmap_image(&path).unwrap();
    assert_eq!((rows, cols), (14, 14));
    for (a, b) in values.iter().zip(&h.values) {
        assert!((a - b).abs() <= 1.0 / 255.0);
    }
}

#[test]
fn comparison_table_has_three_metric_columns() {
    let a = compute_metrics(&ConfusionMatrix { tp: 5, fp: 1, tn: 3, fn_: 1 }).unwrap();
    let b = compute_metrics(&ConfusionMatrix { tp: 0, fp: 0, tn: 4, fn_: 0 }).unwrap();
    let table = comparison_table(&[("triresnet".into(), a), ("single_stream".into(), b)]);
    let lines: Vec<&str> = table.lines().filter(|l| !l.trim().is_empty()).collect();
    assert!(lines[0].contains("accuracy") && lines[0].contains("sensitivity") && lines[0].contains("specificity"));
    assert!(lines.iter().any(|l| l.contains("single_stream") && l.contains("n/a")));
}

fn manifest_over(slide_count: usize, per_slide: usize) -> DatasetManifest {
    let mut records = Vec::new();
    for s in 0..slide_count {
        for k in 0..per_slide {
            records.push(TileRecord::new(&format!("slide{s}"), k, k, 8, k % 2));
        }
    }
    DatasetManifest {
        records,
        seed: None,
        config: String::new(),
    }
}

proptest! {
    #[test]
    fn raising_threshold_is_monotone(
        probs in prop::collection::vec(0.0f64..=1.0, 1..60),
        t1 in 0.0f64..=1.0,
        t2 in 0.0f64..=1.0,
    ) {
        let labels: Vec<usize> = (0..probs.len()).map(|i| usize::from(i % 3 == 0)).collect();
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let a = ConfusionMatrix::from_predictions(&probs, &labels, lo);
        let b = ConfusionMatrix::from_predictions(&probs, &labels, hi);
        prop_assert!(b.tp <= a.tp);
        prop_assert!(b.tn >= a.tn);
        prop_assert_eq!(a.total(), probs.len() as u64);
    }

    #[test]
    fn metric_identity(tp in 0u64..1000, fp in 0u64..1000, tn in 0u64..1000, fn_ in 0u64..1000) {
        prop_assume!(tp + fp + tn + fn_ > 0);
        let m = compute_metrics(&ConfusionMatrix { tp, fp, tn, fn_ }).unwrap();
        let rhs = m.sensitivity.unwrap_or(0.0) * (tp + fn_) as f64 + m.specificity.unwrap_or(0.0) * (tn + fp) as f64;
        let lhs = m.accuracy * (tp + fp + tn + fn_) as f64;
        prop_assert!((lhs - rhs).abs() <= 1e-9 * lhs.max(1.0));
    }

    #[test]
    fn by_slide_splits_are_disjoint(slides in 3usize..12, per in 1usize..6, seed in any::<u64>()) {
        let m = split_manifest(&manifest_over(slides, per), &[0.6, 0.2, 0.2], true, seed).unwrap();
        for s in 0..slides {
            let id = format!("slide{s}");
            let splits: std::collections::BTreeSet<_> =
                m.records.iter().filter(|r| r.slide_id == id).map(|r| r.split.name()).collect();
            prop_assert_eq!(splits.len(), 1);
        }
        for split in Split::ALL {
            prop_assert!(m.split(split).next().is_some());
        }
    }

    #[test]
    fn by_tile_splits_stay_balanced(pairs in 5usize..60, seed in any::<u64>()) {
        let m = split_manifest(&manifest_over(1, pairs * 2), &[0.8, 0.2], false, seed).unwrap();
        for split in [Split::Train, Split::Val] {
            let (b, mal) = m.label_counts(Some(split));
            prop_assert!(b.abs_diff(mal) <= 1, "{split}: {b}/{mal}");
        }
        prop_assert_eq!(m.records.iter().filter(|r| r.label == MALIGNANT).count(), pairs);
    }
}
