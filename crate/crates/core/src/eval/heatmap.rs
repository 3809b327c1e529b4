use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::predict::MalignancyPredictor;
use crate::error::{Error, Result};
use crate::wsi::{choose_working_level, read_pgm, tissue_mask, write_pgm, GrayImage, PyramidalSlide, TissueMask};

/// Malignancy probabilities on a regular level-0 tile grid. Cell `(r, c)`
/// covers the tile with top-left `(c·stride, r·stride)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub rows: usize,
    pub cols: usize,
    pub side: usize,
    pub stride: usize,
    pub values: Vec<f64>,
}

impl Heatmap {
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols + col]
    }

    pub fn origin(&self, row: usize, col: usize) -> (usize, usize) {
        (col * self.stride, row * self.stride)
    }
}

/// Tiles of width `side` stepping by `stride` that fit in `extent`.
pub fn grid_extent(extent: usize, side: usize, stride: usize) -> Result<usize> {
    if side == 0 || stride == 0 || side > extent {
        return Err(Error::Config(format!(
            "tile side {side} / stride {stride} do not fit extent {extent}"
        )));
    }
    Ok((extent - side) / stride + 1)
}

/// Tissue is detected at the slide's default working level.
pub fn assemble_heatmap(
    predictor: &dyn MalignancyPredictor,
    slide: &PyramidalSlide,
    side: usize,
    stride: usize,
) -> Result<Heatmap> {
    let tissue = tissue_mask(slide, choose_working_level(slide))?;
    assemble_heatmap_with(predictor, slide, side, stride, &tissue)
}

/// Cells whose tile center lies off tissue are 0 and never reach the
/// predictor.
pub fn assemble_heatmap_with(
    predictor: &dyn MalignancyPredictor,
    slide: &PyramidalSlide,
    side: usize,
    stride: usize,
    tissue: &TissueMask,
) -> Result<Heatmap> {
    let (w, h) = slide.extents();
    let cols = grid_extent(w, side, stride)?;
    let rows = grid_extent(h, side, stride)?;
    let mut values = vec![0.0; rows * cols];
    let mut cells = Vec::new();
    let mut origins = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            let (x, y) = (c * stride, r * stride);
            if tissue.contains_level0(x + side / 2, y + side / 2) {
                cells.push(r * cols + c);
                origins.push((x, y));
            }
        }
    }
    let probs = predictor.predict_tiles(slide, &origins, side)?;
    for (cell, p) in cells.into_iter().zip(probs) {
        values[cell] = p.clamp(0.0, 1.0);
    }
    Ok(Heatmap {
        rows,
        cols,
        side,
        stride,
        values,
    })
}

/// One pixel per cell, `round(255·p)`.
pub fn export_heatmap_image(h: &Heatmap, path: &Path) -> Result<()> {
    let data = h.values.iter().map(|p| (p * 255.0).round() as u8).collect();
    write_pgm(path, &GrayImage::new(h.cols, h.rows, data)?)
}

/// Probabilities back from an exported image, `v / 255`.
pub fn read_heatmap_image(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let img = read_pgm(path)?;
    Ok((
        img.height(),
        img.width(),
        img.data().iter().map(|&v| f64::from(v) / 255.0).collect(),
    ))
}

/// JSON description of the grid geometry next to an exported image.
pub fn write_heatmap_sidecar(h: &Heatmap, slide_id: &str, path: &Path) -> Result<()> {
    let v = serde_json::json!({
        "slide_id": slide_id,
        "rows": h.rows,
        "cols": h.cols,
        "side": h.side,
        "stride": h.stride,
        "origin_level": 0,
        "cell_origin": "x = col * stride, y = row * stride",
    });
    fs::write(path, serde_json::to_string_pretty(&v).expect("plain json") + "\n")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::ConstantPredictor;
    use crate::wsi::{generate_synthetic_slide, SynthSpec};

    #[test]
    fn grid_formula() {
        assert_eq!(grid_extent(448, 224, 224).unwrap(), 2);
        assert_eq!(grid_extent(448, 224, 100).unwrap(), 3);
        assert_eq!(grid_extent(10, 10, 3).unwrap(), 1);
        assert!(grid_extent(9, 10, 1).is_err());
    }

    #[test]
    fn constant_predictor_fills_tissue_cells() {
        let s = generate_synthetic_slide(&SynthSpec::default()).unwrap();
        let h = assemble_heatmap(&ConstantPredictor(0.25), &s.slide, 224, 224).unwrap();
        assert_eq!((h.rows, h.cols), (2, 2));
        assert!(h.values.iter().all(|&v| v == 0.25));
    }

    #[test]
    fn image_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let h = Heatmap {
            rows: 1,
            cols: 3,
            side: 1,
            stride: 1,
            values: vec![0.0, 1.0, 0.3],
        };
        let p = dir.path().join("h.pgm");
        export_heatmap_image(&h, &p).unwrap();
        let (rows, cols, v) = read_heatmap_image(&p).unwrap();
        assert_eq!((rows, cols), (1, 3));
        assert_eq!(&v[..2], &[0.0, 1.0]);
        assert!((v[2] - 0.3).abs() <= 1.0 / 255.0);
    }
}
