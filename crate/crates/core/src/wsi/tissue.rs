use super::hsv::rgb_image_to_hsv;
use super::image::{Mask, RgbImage};
use super::otsu::otsu_threshold;
use super::slide::PyramidalSlide;
use crate::error::{Error, Result};

/// Largest working resolution considered for tissue detection, as
/// (short side, long side).
pub const WORKING_EXTENT: (usize, usize) = (3072, 7168);

/// Tissue membership at one pyramid level.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TissueMask {
    pub level: usize,
    pub downsample: usize,
    pub mask: Mask,
}

impl TissueMask {
    /// Whether the level-0 point falls on tissue, compared at this mask's
    /// resolution.
    pub fn contains_level0(&self, x: usize, y: usize) -> bool {
        let (mx, my) = (x / self.downsample, y / self.downsample);
        mx < self.mask.width() && my < self.mask.height() && self.mask.get(mx, my)
    }
}

/// The finest level whose extents fit [`WORKING_EXTENT`] in either
/// orientation; the coarsest level when none does.
pub fn choose_working_level(slide: &PyramidalSlide) -> usize {
    let (short, long) = WORKING_EXTENT;
    slide
        .levels()
        .iter()
        .position(|l| l.width.min(l.height) <= short && l.width.max(l.height) <= long)
        .unwrap_or(slide.level_count() - 1)
}

fn foreground(channel: &[u8], width: usize, height: usize) -> Result<Mask> {
    let t = otsu_threshold(channel)?;
    Mask::new(width, height, channel.iter().map(|&v| v > t).collect())
}

/// Otsu foreground of the hue plane OR Otsu foreground of the saturation
/// plane. A plane with a single value is skipped; if both are, the image
/// holds no detectable tissue.
pub fn tissue_mask_from_image(img: &RgbImage) -> Result<Mask> {
    let hsv = rgb_image_to_hsv(img);
    let (w, h) = (img.width(), img.height());
    let hue = foreground(&hsv.h, w, h);
    let sat = foreground(&hsv.s, w, h);
    match (hue, sat) {
        (Ok(a), Ok(b)) => a.union(&b),
        (Ok(m), Err(Error::DegenerateHistogram)) | (Err(Error::DegenerateHistogram), Ok(m)) => Ok(m),
        (Err(Error::DegenerateHistogram), Err(Error::DegenerateHistogram)) => Err(Error::EmptyMask),
        (Err(e), _) | (_, Err(e)) => Err(e),
    }
}

pub fn tissue_mask(slide: &PyramidalSlide, working_level: usize) -> Result<TissueMask> {
    let downsample = slide.level(working_level)?.downsample;
    let img = slide.read_level(working_level)?;
    Ok(TissueMask {
        level: working_level,
        downsample,
        mask: tissue_mask_from_image(&img)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn white_is_empty() {
        let img = RgbImage::filled(16, 16, [255, 255, 255]);
        assert!(matches!(tissue_mask_from_image(&img), Err(Error::EmptyMask)));
    }

    #[test]
    fn saturated_blob_on_white() {
        let mut img = RgbImage::filled(10, 10, [255, 255, 255]);
        for y in 2..6 {
            for x in 3..8 {
                img.set_pixel(x, y, [200, 90, 170]);
            }
        }
        let m = tissue_mask_from_image(&img).unwrap();
        assert_eq!(m.count(), 20);
        assert!(m.get(3, 2) && !m.get(2, 2));
    }
}
