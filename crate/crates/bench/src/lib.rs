//! Deterministic inputs shared by the benchmarks.

use triresnet_core::Tensor;

/// Smooth, non-constant values in roughly `[-1, 1]`; cheap to build and
/// identical on every run.
pub fn wave(shape: &[usize]) -> Tensor<f32> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|i| ((i as f32) * 0.618_034).sin()).collect();
    Tensor::from_vec(shape.to_vec(), data).expect("length matches shape")
}

/// A bimodal 8-bit channel of `len` pixels.
pub fn bimodal_channel(len: usize) -> Vec<u8> {
    (0..len)
        .map(|i| {
            let jitter = ((i * 7919) % 31) as u8;
            if (i / 97) % 3 == 0 {
                40 + jitter
            } else {
                190 + jitter
            }
        })
        .collect()
}
