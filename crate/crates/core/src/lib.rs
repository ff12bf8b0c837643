//! From-scratch 3D Kolmogorov-Arnold convolution networks with adaptive
//! B-spline grids, a DenseNet-style backbone, and a hyperspectral
//! patch-classification pipeline.

pub mod bspline;
pub mod checkpoint;
pub mod config;
pub mod conv3d;
pub mod error;
pub mod experiments;
pub mod gradcheck;
pub mod hsi;
pub mod kan_linear;
pub mod model;
pub mod norm;
pub mod tensor;
pub mod train;

pub use error::{KanetError, Result};
pub use tensor::Tensor;

/// Builds the global rayon pool, capped by the `KANET_THREADS` env var.
/// Call once at process start; later calls are no-ops.
pub fn init_threads() {
    let cap = std::env::var("KANET_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0);
    if let Some(n) = cap {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}
