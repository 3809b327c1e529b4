//! Slide handling: pyramid storage, tissue detection, coordinate mapping,
//! balanced tile sampling and synthetic fixtures.

mod hsv;
mod image;
mod manifest;
mod otsu;
mod sampler;
mod slide;
mod synth;
mod tissue;

pub use hsv::{hsv_to_rgb, quantize_hsv, rgb_image_to_hsv, rgb_to_hsv, HsvImage};
pub use image::{
    read_pgm, read_pnm_header, read_pnm_region, read_ppm, write_pgm, write_ppm, GrayImage, Mask, PnmHeader, PnmKind,
    RgbImage,
};
pub use manifest::{DatasetManifest, Split, TileRecord, DEFAULT_TILE_SIDE};
pub use otsu::{histogram, otsu_threshold, otsu_threshold_from_histogram, MAX_HISTOGRAM_TOTAL};
pub use sampler::{sample_balanced_tiles, sample_balanced_tiles_with, SamplerConfig, DEFAULT_ATTEMPTS};
pub use slide::{
    extract_tile, level_file, load_slide, load_slide_dir, resize_tile, rgb_to_tensor, tile_tensor, LevelInfo, PyramidalSlide,
    SlideMeta, MASK_FILE, META_FILE,
};
pub use synth::{
    generate_synthetic_slide, load_synth_spec, Region, SynthSpec, SyntheticSlide, Texture, SYNTH_DOWNSAMPLES,
    TISSUE_TRUTH_FILE,
};
pub use tissue::{choose_working_level, tissue_mask, tissue_mask_from_image, TissueMask, WORKING_EXTENT};
