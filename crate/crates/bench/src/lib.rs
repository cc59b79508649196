//! Deterministic inputs shared by the benchmarks.

use liconv::{Shape4, Tensor4};

/// Smooth, data-independent test pattern in `[0, 1]` with some negative
/// pre-activations once shifted, so ReLU has work to do.
pub fn pattern(shape: Shape4) -> Tensor4<f32> {
    Tensor4::from_fn(shape, |n, c, y, x| {
        let v = ((x * 7 + y * 13 + c * 5 + n * 3) % 17) as f32 / 16.0;
        v - 0.25
    })
}

/// Small filter weights of the given shape.
pub fn weights(shape: Shape4) -> Tensor4<f32> {
    Tensor4::from_fn(shape, |o, i, y, x| (((o + 2 * i + 3 * y + 5 * x) % 7) as f32 - 3.0) * 0.05)
}
