//! Hexcone RGB/HSV conversion.

use super::image::RgbImage;

/// `H` in degrees `[0, 360)`, `S` and `V` in `[0, 1]`. Grays get `H = 0`.
pub fn rgb_to_hsv(rgb: [u8; 3]) -> (f64, f64, f64) {
    let [r, g, b] = rgb.map(|c| f64::from(c) / 255.0);
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let v = max;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        60.0 * ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / delta + 2.0)
    } else {
        60.0 * ((r - g) / delta + 4.0)
    };
    (if h >= 360.0 { h - 360.0 } else { h }, s, v)
}

/// Inverse of [`rgb_to_hsv`], rounding to the nearest 8-bit value.
pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [u8; 3] {
    let c = v * s;
    let hp = h.rem_euclid(360.0) / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r, g, b].map(|ch| ((ch + m) * 255.0).round().clamp(0.0, 255.0) as u8)
}

/// Channel planes quantized to 8 bits: `H·256/360` floored, `S` and `V`
/// scaled by 255 and rounded.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HsvImage {
    pub width: usize,
    pub height: usize,
    pub h: Vec<u8>,
    pub s: Vec<u8>,
    pub v: Vec<u8>,
}

pub fn quantize_hsv(h: f64, s: f64, v: f64) -> [u8; 3] {
    [
        ((h * 256.0 / 360.0) as usize).min(255) as u8,
        (s * 255.0).round() as u8,
        (v * 255.0).round() as u8,
    ]
}

pub fn rgb_image_to_hsv(img: &RgbImage) -> HsvImage {
    let n = img.width() * img.height();
    let (mut h, mut s, mut v) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for px in img.data().chunks_exact(3) {
        let (hh, ss, vv) = rgb_to_hsv([px[0], px[1], px[2]]);
        let q = quantize_hsv(hh, ss, vv);
        h.push(q[0]);
        s.push(q[1]);
        v.push(q[2]);
    }
    HsvImage {
        width: img.width(),
        height: img.height(),
        h,
        s,
        v,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn primaries_and_gray() {
        assert_eq!(rgb_to_hsv([255, 0, 0]), (0.0, 1.0, 1.0));
        let (h, s, v) = rgb_to_hsv([0, 0, 255]);
        assert_eq!((h, s, v), (240.0, 1.0, 1.0));
        let (_, s, v) = rgb_to_hsv([128, 128, 128]);
        assert_eq!(s, 0.0);
        assert_eq!(v, 128.0 / 255.0);
        assert_eq!(quantize_hsv(359.9, 1.0, 1.0), [255, 255, 255]);
    }

    #[test]
    fn magenta_side_hue() {
        let (h, _, _) = rgb_to_hsv([255, 0, 128]);
        assert!(h > 300.0 && h < 360.0);
    }
}
