//! Pixel-exact tile augmentation: the eight flip/quarter-turn symmetries of
//! the square plus a global brightness shift.

use rand::Rng;

use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentConfig {
    pub horizontal_flip: bool,
    pub vertical_flip: bool,
    pub rotation: bool,
    /// Half-width of the uniform brightness delta; 0 disables it.
    pub brightness: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            horizontal_flip: true,
            vertical_flip: true,
            rotation: true,
            brightness: 0.1,
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        Self {
            horizontal_flip: false,
            vertical_flip: false,
            rotation: false,
            brightness: 0.0,
        }
    }
}

fn square_side<T: Element>(tile: &Tensor<T>) -> usize {
    let s = tile.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    assert_eq!(h, w, "augmentation needs a square tile, got {s:?}");
    h
}

/// Applies `f(row, col) -> source index within plane` to every plane.
fn remap<T: Element>(tile: &Tensor<T>, f: impl Fn(usize, usize, usize) -> usize) -> Tensor<T> {
    let s = square_side(tile);
    let plane = s * s;
    let mut out = tile.clone();
    for (dst, src) in out.data_mut().chunks_mut(plane).zip(tile.data().chunks(plane)) {
        for r in 0..s {
            for c in 0..s {
                dst[r * s + c] = src[f(r, c, s)];
            }
        }
    }
    out
}

/// Mirror left-right.
pub fn flip_horizontal<T: Element>(tile: &Tensor<T>) -> Tensor<T> {
    remap(tile, |r, c, s| r * s + (s - 1 - c))
}

/// Mirror top-bottom.
pub fn flip_vertical<T: Element>(tile: &Tensor<T>) -> Tensor<T> {
    remap(tile, |r, c, s| (s - 1 - r) * s + c)
}

/// Counter-clockwise rotation by `k` quarter turns.
pub fn rotate_quarter<T: Element>(tile: &Tensor<T>, k: usize) -> Tensor<T> {
    match k % 4 {
        0 => tile.clone(),
        1 => remap(tile, |r, c, s| c * s + (s - 1 - r)),
        2 => remap(tile, |r, c, s| (s - 1 - r) * s + (s - 1 - c)),
        _ => remap(tile, |r, c, s| (s - 1 - c) * s + r),
    }
}

/// Adds `delta` to every value and clamps to `[0, 1]`.
pub fn shift_brightness<T: Element>(tile: &Tensor<T>, delta: f64) -> Tensor<T> {
    let d = T::from_f64_lossy(delta);
    tile.map(|v| (v + d).max(T::zero()).min(T::one()))
}

/// Random augmentation of a `[.., s, s]` tile. Each enabled transform
/// draws from `rng` in the fixed order flip-h, flip-v, rotation, brightness.
pub fn augment_tile<T: Element>(tile: &Tensor<T>, config: &AugmentConfig, rng: &mut impl Rng) -> Tensor<T> {
    let mut out = tile.clone();
    if config.horizontal_flip && rng.random_bool(0.5) {
        out = flip_horizontal(&out);
    }
    if config.vertical_flip && rng.random_bool(0.5) {
        out = flip_vertical(&out);
    }
    if config.rotation {
        out = rotate_quarter(&out, rng.random_range(0..4));
    }
    if config.brightness > 0.0 {
        let delta = rng.random_range(-config.brightness..=config.brightness);
        out = shift_brightness(&out, delta);
    }
    out
}
