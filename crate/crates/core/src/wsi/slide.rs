//! Multi-resolution slides stored as a directory: `meta.json`, one `P6`
//! pixmap per level (`level_<i>.ppm`), and optionally the level-0
//! malignancy annotation `malignancy_mask_level0.pgm` (0 / 255).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::image::{read_pgm, read_pnm_header, read_pnm_region, write_pgm, write_ppm, Mask, PnmKind, RgbImage};
use super::manifest::TileRecord;
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub const META_FILE: &str = "meta.json";
pub const MASK_FILE: &str = "malignancy_mask_level0.pgm";

pub fn level_file(level: usize) -> String {
    format!("level_{level}.ppm")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelInfo {
    pub downsample: usize,
    pub width: usize,
    pub height: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlideMeta {
    pub slide_id: String,
    pub level_count: usize,
    pub levels: Vec<LevelInfo>,
    #[serde(default)]
    pub malignancy_mask: Option<String>,
}

#[derive(Clone, Debug)]
enum LevelSource {
    File { path: PathBuf, data_offset: u64 },
    Memory(RgbImage),
}

/// A slide whose levels are read on demand (directory-backed) or held in
/// memory (freshly generated).
#[derive(Clone, Debug)]
pub struct PyramidalSlide {
    id: String,
    levels: Vec<LevelInfo>,
    sources: Vec<LevelSource>,
    malignancy: Option<Mask>,
}

fn check_levels(levels: &[LevelInfo]) -> Result<()> {
    let Some(first) = levels.first() else {
        return Err(Error::Format("slide has no levels".into()));
    };
    if first.downsample != 1 {
        return Err(Error::Format("level 0 must have downsample 1".into()));
    }
    for (i, pair) in levels.windows(2).enumerate() {
        if pair[1].downsample <= pair[0].downsample {
            return Err(Error::Format(format!("downsample of level {} does not increase", i + 1)));
        }
    }
    for (i, l) in levels.iter().enumerate() {
        let (ew, eh) = (first.width / l.downsample, first.height / l.downsample);
        if l.width == 0 || l.height == 0 || l.width.abs_diff(ew) > 1 || l.height.abs_diff(eh) > 1 {
            return Err(Error::Format(format!(
                "level {i} extents {}x{} disagree with downsample {}",
                l.width, l.height, l.downsample
            )));
        }
    }
    Ok(())
}

impl PyramidalSlide {
    /// In-memory slide from per-level images and their downsample factors.
    pub fn from_levels(id: &str, images: Vec<(usize, RgbImage)>, malignancy: Option<Mask>) -> Result<Self> {
        let levels: Vec<LevelInfo> = images
            .iter()
            .map(|(d, img)| LevelInfo {
                downsample: *d,
                width: img.width(),
                height: img.height(),
            })
            .collect();
        check_levels(&levels)?;
        if let Some(m) = &malignancy {
            if (m.width(), m.height()) != (levels[0].width, levels[0].height) {
                return Err(Error::Format("malignancy mask must match level 0".into()));
            }
        }
        Ok(Self {
            id: id.to_owned(),
            levels,
            sources: images.into_iter().map(|(_, img)| LevelSource::Memory(img)).collect(),
            malignancy,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn level_count(&self) -> usize {
        self.levels.len()
    }

    pub fn levels(&self) -> &[LevelInfo] {
        &self.levels
    }

    pub fn level(&self, level: usize) -> Result<&LevelInfo> {
        self.levels
            .get(level)
            .ok_or_else(|| Error::Format(format!("slide {} has no level {level}", self.id)))
    }

    pub fn extents(&self) -> (usize, usize) {
        (self.levels[0].width, self.levels[0].height)
    }

    pub fn malignancy_mask(&self) -> Option<&Mask> {
        self.malignancy.as_ref()
    }

    pub fn has_malignancy(&self) -> bool {
        self.malignancy.as_ref().is_some_and(|m| !m.is_empty())
    }

    /// Level-0 pixel lies in the annotated malignant region.
    pub fn is_malignant_at(&self, x: usize, y: usize) -> bool {
        self.malignancy.as_ref().is_some_and(|m| m.get(x, y))
    }

    /// Pixels of one rectangle of one level; directory-backed slides read
    /// only the covered rows and columns.
    pub fn read_region(&self, level: usize, x: usize, y: usize, w: usize, h: usize) -> Result<RgbImage> {
        let info = *self.level(level)?;
        if x + w > info.width || y + h > info.height {
            return Err(Error::Bounds(format!(
                "region {w}x{h} at ({x}, {y}) outside level {level} ({}x{})",
                info.width, info.height
            )));
        }
        match &self.sources[level] {
            LevelSource::Memory(img) => img.crop(x, y, w, h),
            LevelSource::File { path, data_offset } => {
                let header = super::image::PnmHeader {
                    kind: PnmKind::Rgb,
                    width: info.width,
                    height: info.height,
                    data_offset: *data_offset,
                };
                RgbImage::new(w, h, read_pnm_region(path, &header, x, y, w, h)?)
            }
        }
    }

    pub fn read_level(&self, level: usize) -> Result<RgbImage> {
        let info = *self.level(level)?;
        self.read_region(level, 0, 0, info.width, info.height)
    }

    /// Scales a point by `d_from / d_to`, rounding down.
    pub fn map_coords(&self, pt: (usize, usize), from_level: usize, to_level: usize) -> Result<(usize, usize)> {
        let from = self.level(from_level)?.downsample;
        let to = *self.level(to_level)?;
        let map = |v: usize| v * from / to.downsample;
        let out = (map(pt.0), map(pt.1));
        if out.0 >= to.width || out.1 >= to.height {
            return Err(Error::Bounds(format!(
                "({}, {}) maps to ({}, {}) outside level {to_level}",
                pt.0, pt.1, out.0, out.1
            )));
        }
        Ok(out)
    }

    pub fn meta(&self) -> SlideMeta {
        SlideMeta {
            slide_id: self.id.clone(),
            level_count: self.levels.len(),
            levels: self.levels.clone(),
            malignancy_mask: self.malignancy.as_ref().map(|_| MASK_FILE.to_owned()),
        }
    }

    /// Writes the slide directory, creating it if needed.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for level in 0..self.levels.len() {
            write_ppm(&dir.join(level_file(level)), &self.read_level(level)?)?;
        }
        if let Some(m) = &self.malignancy {
            write_pgm(&dir.join(MASK_FILE), &m.to_gray())?;
        }
        let meta = serde_json::to_string_pretty(&self.meta()).map_err(|e| Error::Format(e.to_string()))?;
        fs::write(dir.join(META_FILE), meta + "\n")?;
        Ok(())
    }
}

/// Opens a slide directory. Level pixels stay on disk until requested.
pub fn load_slide(dir: &Path) -> Result<PyramidalSlide> {
    let text = fs::read_to_string(dir.join(META_FILE))
        .map_err(|e| Error::Format(format!("{}: {e}", dir.join(META_FILE).display())))?;
    let meta: SlideMeta = serde_json::from_str(&text).map_err(|e| Error::Format(format!("{META_FILE}: {e}")))?;
    if meta.level_count != meta.levels.len() {
        return Err(Error::Format(format!(
            "level_count {} but {} levels listed",
            meta.level_count,
            meta.levels.len()
        )));
    }
    check_levels(&meta.levels)?;
    let mut sources = Vec::with_capacity(meta.levels.len());
    for (i, info) in meta.levels.iter().enumerate() {
        let path = dir.join(level_file(i));
        if !path.exists() {
            return Err(Error::Format(format!("missing level file {}", path.display())));
        }
        let h = read_pnm_header(&path)?;
        if h.kind != PnmKind::Rgb || (h.width, h.height) != (info.width, info.height) {
            return Err(Error::Format(format!("{} does not match meta.json", path.display())));
        }
        sources.push(LevelSource::File {
            path,
            data_offset: h.data_offset,
        });
    }
    let malignancy = match &meta.malignancy_mask {
        Some(name) => {
            let m = Mask::from_gray(&read_pgm(&dir.join(name))?);
            if (m.width(), m.height()) != (meta.levels[0].width, meta.levels[0].height) {
                return Err(Error::Format("malignancy mask must match level 0".into()));
            }
            Some(m)
        }
        None => None,
    };
    Ok(PyramidalSlide {
        id: meta.slide_id,
        levels: meta.levels,
        sources,
        malignancy,
    })
}

/// Every immediate subdirectory holding a `meta.json`, sorted by path.
pub fn load_slide_dir(root: &Path) -> Result<Vec<PyramidalSlide>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(META_FILE).is_file())
        .collect();
    dirs.sort();
    dirs.iter().map(|d| load_slide(d)).collect()
}

pub fn rgb_to_tensor<T: Element>(img: &RgbImage) -> Tensor<T> {
    let (w, h) = (img.width(), img.height());
    let mut data = vec![T::zero(); 3 * w * h];
    let scale = T::from_f64_lossy(255.0);
    for (i, px) in img.data().chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * w * h + i] = T::from_f64_lossy(f64::from(px[c])) / scale;
        }
    }
    Tensor::from_vec([1, 3, h, w], data).expect("extents match")
}

/// Level-0 crop of `record` as `[1, 3, side, side]` with values in `[0, 1]`.
pub fn extract_tile<T: Element>(slide: &PyramidalSlide, record: &TileRecord) -> Result<Tensor<T>> {
    Ok(rgb_to_tensor(&slide.read_region(0, record.x, record.y, record.side, record.side)?))
}

/// Level-0 tile at `(x, y)` as a `[1, 3, s, s]` tensor, resampled to
/// `resize × resize` first when given.
pub fn tile_tensor<T: Element>(
    slide: &PyramidalSlide,
    x: usize,
    y: usize,
    side: usize,
    resize: Option<usize>,
) -> Result<Tensor<T>> {
    let img = slide.read_region(0, x, y, side, side)?;
    Ok(match resize {
        Some(t) if t != side => rgb_to_tensor(&resize_tile(&img, t)),
        _ => rgb_to_tensor(&img),
    })
}

/// Bilinear resampling of a square tile to `target × target`, sampling at
/// pixel centers and clamping at the border.
pub fn resize_tile(tile: &RgbImage, target: usize) -> RgbImage {
    let (sw, sh) = (tile.width(), tile.height());
    assert!(target >= 1 && sw >= 1 && sh >= 1, "resize needs non-empty extents");
    let axis = |src: usize, i: usize| -> (usize, usize, f64) {
        let pos = ((i as f64 + 0.5) * src as f64 / target as f64 - 0.5).max(0.0);
        let i0 = (pos.floor() as usize).min(src - 1);
        let i1 = (i0 + 1).min(src - 1);
        (i0, i1, pos - i0 as f64)
    };
    let mut out = RgbImage::filled(target, target, [0; 3]);
    for y in 0..target {
        let (y0, y1, fy) = axis(sh, y);
        for x in 0..target {
            let (x0, x1, fx) = axis(sw, x);
            let (a, b, c, d) = (tile.pixel(x0, y0), tile.pixel(x1, y0), tile.pixel(x0, y1), tile.pixel(x1, y1));
            let mut px = [0u8; 3];
            for ch in 0..3 {
                let top = f64::from(a[ch]) * (1.0 - fx) + f64::from(b[ch]) * fx;
                let bottom = f64::from(c[ch]) * (1.0 - fx) + f64::from(d[ch]) * fx;
                px[ch] = (top * (1.0 - fy) + bottom * fy).round().clamp(0.0, 255.0) as u8;
            }
            out.set_pixel(x, y, px);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> PyramidalSlide {
        let l0 = RgbImage::new(8, 8, (0..192).map(|v| v as u8).collect()).unwrap();
        let l1 = l0.mean_pool2().mean_pool2();
        PyramidalSlide::from_levels("toy", vec![(1, l0), (4, l1)], None).unwrap()
    }

    #[test]
    fn coordinate_mapping() {
        let s = toy();
        assert_eq!(s.map_coords((1, 1), 1, 0).unwrap(), (4, 4));
        assert_eq!(s.map_coords((7, 5), 0, 1).unwrap(), (1, 1));
        assert_eq!(s.map_coords((3, 2), 0, 0).unwrap(), (3, 2));
        assert!(matches!(s.map_coords((2, 0), 1, 0), Err(Error::Bounds(_))));
        assert!(matches!(s.level(2), Err(Error::Format(_))));
    }

    #[test]
    fn bad_pyramids_rejected() {
        let img = RgbImage::filled(8, 8, [1, 2, 3]);
        let small = RgbImage::filled(2, 2, [1, 2, 3]);
        assert!(PyramidalSlide::from_levels("a", vec![(2, img.clone())], None).is_err());
        assert!(PyramidalSlide::from_levels("a", vec![(1, img.clone()), (1, small.clone())], None).is_err());
        assert!(PyramidalSlide::from_levels("a", vec![(1, img), (2, small)], None).is_err());
    }

    #[test]
    fn resize_identity_constant_and_extents() {
        let tile = RgbImage::new(5, 5, (0..75).map(|v| (v * 3) as u8).collect()).unwrap();
        assert_eq!(resize_tile(&tile, 5), tile);
        let flat = RgbImage::filled(50, 50, [200, 100, 150]);
        let big = resize_tile(&flat, 197);
        assert_eq!((big.width(), big.height()), (197, 197));
        assert!(big.data().chunks(3).all(|p| p == [200, 100, 150]));
    }

    #[test]
    fn tile_tensor_layout() {
        let s = toy();
        let rec = TileRecord::new("toy", 0, 0, 2, 0);
        let t: Tensor<f64> = extract_tile(&s, &rec).unwrap();
        assert_eq!(t.shape(), &[1, 3, 2, 2]);
        // red channel of pixel (1, 0) is byte 3
        assert_eq!(t.data()[1], 3.0 / 255.0);
        assert_eq!(t.data()[4], 1.0 / 255.0);
        let far = TileRecord::new("toy", 7, 7, 2, 0);
        assert!(matches!(extract_tile::<f64>(&s, &far), Err(Error::Bounds(_))));
    }
}
