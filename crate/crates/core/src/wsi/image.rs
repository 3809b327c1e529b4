//! 8-bit raster images, binary masks, and binary portable any-map
//! (`P5` graymap / `P6` pixmap) files with region-level random access.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::Shape(format!(
                "{width}x{height} RGB image needs {} bytes, got {}",
                width * height * 3,
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let data = rgb.iter().copied().cycle().take(width * height * 3).collect();
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Interleaved `RGBRGB..` bytes, row-major.
    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn crop(&self, x: usize, y: usize, w: usize, h: usize) -> Result<RgbImage> {
        if x + w > self.width || y + h > self.height {
            return Err(Error::Bounds(format!(
                "crop {w}x{h} at ({x}, {y}) exceeds {}x{}",
                self.width, self.height
            )));
        }
        let mut data = Vec::with_capacity(w * h * 3);
        for row in y..y + h {
            let start = (row * self.width + x) * 3;
            data.extend_from_slice(&self.data[start..start + w * 3]);
        }
        Ok(RgbImage { width: w, height: h, data })
    }

    /// Halves both extents (rounding down), each output pixel being the
    /// rounded mean of a 2×2 block.
    pub fn mean_pool2(&self) -> RgbImage {
        let (w, h) = (self.width / 2, self.height / 2);
        let mut out = RgbImage::filled(w, h, [0; 3]);
        for y in 0..h {
            for x in 0..w {
                let mut px = [0u8; 3];
                for (c, v) in px.iter_mut().enumerate() {
                    let s: u32 = [(0, 0), (1, 0), (0, 1), (1, 1)]
                        .iter()
                        .map(|(dx, dy)| u32::from(self.data[((2 * y + dy) * self.width + 2 * x + dx) * 3 + c]))
                        .sum();
                    *v = ((s + 2) / 4) as u8;
                }
                out.set_pixel(x, y, px);
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Shape(format!(
                "{width}x{height} gray image needs {} bytes, got {}",
                width * height,
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }
}

/// A binary image; `true` marks membership.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width * height {
            return Err(Error::Shape(format!("{width}x{height} mask needs {} bits", width * height)));
        }
        Ok(Self { width, height, bits })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let bits = (0..height).flat_map(|y| (0..width).map(move |x| (x, y))).map(|(x, y)| f(x, y)).collect();
        Self { width, height, bits }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, on: bool) {
        self.bits[y * self.width + x] = on;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.contains(&true)
    }

    pub fn union(&self, other: &Mask) -> Result<Mask> {
        if (self.width, self.height) != (other.width, other.height) {
            return Err(Error::Shape("mask extents differ".into()));
        }
        let bits = self.bits.iter().zip(&other.bits).map(|(&a, &b)| a || b).collect();
        Ok(Mask {
            width: self.width,
            height: self.height,
            bits,
        })
    }

    /// 0 / 255 graymap.
    pub fn to_gray(&self) -> GrayImage {
        GrayImage {
            width: self.width,
            height: self.height,
            data: self.bits.iter().map(|&b| if b { 255 } else { 0 }).collect(),
        }
    }

    /// Nonzero pixels are members.
    pub fn from_gray(img: &GrayImage) -> Mask {
        Mask {
            width: img.width,
            height: img.height,
            bits: img.data.iter().map(|&v| v != 0).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PnmKind {
    Gray,
    Rgb,
}

impl PnmKind {
    fn channels(self) -> usize {
        match self {
            PnmKind::Gray => 1,
            PnmKind::Rgb => 3,
        }
    }
}

/// Parsed header of a binary any-map with maximum value 255.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PnmHeader {
    pub kind: PnmKind,
    pub width: usize,
    pub height: usize,
    /// Byte offset of the first pixel.
    pub data_offset: u64,
}

fn fmt_err(path: &Path, msg: &str) -> Error {
    Error::Format(format!("{}: {msg}", path.display()))
}

pub fn read_pnm_header(path: &Path) -> Result<PnmHeader> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 2];
    r.read_exact(&mut magic).map_err(|_| fmt_err(path, "truncated header"))?;
    let kind = match &magic {
        b"P5" => PnmKind::Gray,
        b"P6" => PnmKind::Rgb,
        _ => return Err(fmt_err(path, "not a binary P5/P6 file")),
    };
    let mut offset = 2u64;
    let mut fields = [0usize; 3];
    let mut byte = [0u8; 1];
    for field in &mut fields {
        // skip whitespace and comments
        let first = loop {
            r.read_exact(&mut byte).map_err(|_| fmt_err(path, "truncated header"))?;
            offset += 1;
            match byte[0] {
                b'#' => loop {
                    r.read_exact(&mut byte).map_err(|_| fmt_err(path, "truncated header"))?;
                    offset += 1;
                    if byte[0] == b'\n' {
                        break;
                    }
                },
                b if b.is_ascii_whitespace() => {}
                b => break b,
            }
        };
        if !first.is_ascii_digit() {
            return Err(fmt_err(path, "malformed header number"));
        }
        let mut value = usize::from(first - b'0');
        loop {
            r.read_exact(&mut byte).map_err(|_| fmt_err(path, "truncated header"))?;
            offset += 1;
            match byte[0] {
                d @ b'0'..=b'9' => {
                    value = value
                        .checked_mul(10)
                        .and_then(|v| v.checked_add(usize::from(d - b'0')))
                        .ok_or_else(|| fmt_err(path, "header number overflows"))?;
                }
                w if w.is_ascii_whitespace() => break,
                _ => return Err(fmt_err(path, "malformed header number")),
            }
        }
        *field = value;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(fmt_err(path, "only 8-bit files (maxval 255) are supported"));
    }
    if width == 0 || height == 0 {
        return Err(fmt_err(path, "zero extent"));
    }
    let expected = offset + (width * height * kind.channels()) as u64;
    if std::fs::metadata(path)?.len() < expected {
        return Err(fmt_err(path, "pixel data truncated"));
    }
    Ok(PnmHeader {
        kind,
        width,
        height,
        data_offset: offset,
    })
}

fn write_pnm(path: &Path, magic: &str, width: usize, height: usize, data: &[u8]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "{magic}\n{width} {height}\n255\n")?;
    w.write_all(data)?;
    w.flush()?;
    Ok(())
}

pub fn write_ppm(path: &Path, img: &RgbImage) -> Result<()> {
    write_pnm(path, "P6", img.width, img.height, &img.data)
}

pub fn write_pgm(path: &Path, img: &GrayImage) -> Result<()> {
    write_pnm(path, "P5", img.width, img.height, &img.data)
}

/// Reads rows `y..y+h`, columns `x..x+w` only, seeking past the rest.
pub fn read_pnm_region(path: &Path, header: &PnmHeader, x: usize, y: usize, w: usize, h: usize) -> Result<Vec<u8>> {
    if x + w > header.width || y + h > header.height {
        return Err(Error::Bounds(format!(
            "region {w}x{h} at ({x}, {y}) exceeds {}x{}",
            header.width, header.height
        )));
    }
    let ch = header.kind.channels();
    let mut f = File::open(path)?;
    let mut out = vec![0u8; w * h * ch];
    for (row, dst) in out.chunks_mut((w * ch).max(1)).enumerate().take(h) {
        let pos = header.data_offset + (((y + row) * header.width + x) * ch) as u64;
        f.seek(SeekFrom::Start(pos))?;
        f.read_exact(dst).map_err(|_| fmt_err(path, "pixel data truncated"))?;
    }
    Ok(out)
}

pub fn read_ppm(path: &Path) -> Result<RgbImage> {
    let h = read_pnm_header(path)?;
    if h.kind != PnmKind::Rgb {
        return Err(fmt_err(path, "expected a P6 pixmap"));
    }
    RgbImage::new(h.width, h.height, read_pnm_region(path, &h, 0, 0, h.width, h.height)?)
}

pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    let h = read_pnm_header(path)?;
    if h.kind != PnmKind::Gray {
        return Err(fmt_err(path, "expected a P5 graymap"));
    }
    GrayImage::new(h.width, h.height, read_pnm_region(path, &h, 0, 0, h.width, h.height)?)
}
