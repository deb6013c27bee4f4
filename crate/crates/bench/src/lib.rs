//! Shared fixtures for the benchmarks.

use downscale_core::Tensor;

/// Smooth deterministic field `[c, h, w]`.
pub fn field(c: usize, h: usize, w: usize) -> Tensor<f32> {
    Tensor::from_fn(&[c, h, w], |i| {
        let (y, x) = ((i / w) % h, i % w);
        ((x as f32 * 0.31).sin() + (y as f32 * 0.17).cos()) * 0.5 + (i / (h * w)) as f32 * 0.1
    })
}
