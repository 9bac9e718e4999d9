//! Feed-forward Gaussian splatting for surround-view camera rigs.
//!
//! The pipeline: a depth network and a pose network learn metrically scaled
//! depth and ego-motion from multi-camera photometric consistency alone, a
//! Gaussian network predicts per-pixel primitive parameters, and a
//! differentiable splat rasterizer renders the aggregated primitives to novel
//! views. Everything trains end-to-end on CPU at desk scale.
//!
//! Data-parallel inner loops (rasterization, warping, ray casting, conv
//! layers) run on rayon when the default `parallel` feature is enabled and
//! fall back to plain sequential iteration without it. Results are bitwise
//! identical either way: parallel work is always gather-style over disjoint
//! output slots, and reductions happen in a fixed order.

pub mod autodiff;
pub mod dataio;
pub mod geometry;
pub mod img;
pub mod losses;
pub mod metrics;
pub mod networks;
pub mod parallel;
pub mod primitives;
pub mod renderer;
pub mod trainer;
pub mod warp;

use nalgebra::RealField;

/// Scalar type for all numeric paths: `f32` for training, `f64` for
/// gradient checks and geometry oracles.
pub trait Real:
    RealField + Copy + Default + num_traits::Float + num_traits::FromPrimitive + Send + Sync + 'static
{
    fn lit(x: f64) -> Self {
        num_traits::FromPrimitive::from_f64(x).expect("literal conversion")
    }
    fn to_f64(self) -> f64;
}

impl Real for f32 {
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn to_f64(self) -> f64 {
        self
    }
}
