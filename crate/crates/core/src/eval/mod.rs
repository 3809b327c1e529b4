//! Metrics, dataset splitting, tile scoring and heatmaps.

mod baseline;
mod heatmap;
mod metrics;
mod predict;
mod split;

pub use baseline::{single_stream_baseline, SingleStreamModel};
pub use heatmap::{
    assemble_heatmap, assemble_heatmap_with, export_heatmap_image, grid_extent, read_heatmap_image,
    write_heatmap_sidecar, Heatmap,
};
pub use metrics::{comparison_table, compute_metrics, ConfusionMatrix, MetricsReport, DEFAULT_THRESHOLD};
pub use predict::{evaluate, ConstantPredictor, GroundTruthOracle, MalignancyPredictor, ModelPredictor};
pub use split::{apportion, split_manifest};
