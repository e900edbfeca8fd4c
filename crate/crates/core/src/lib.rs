//! Differentiable complex-valued Gaussian splatting for radio-frequency scenes.
//!
//! A scene is a set of anisotropic 3D Gaussians, each carrying a complex
//! transmittance and a directional complex radiance expressed in a
//! Fourier-Legendre basis. Rays leave a small sphere around the receiver,
//! Gaussians are splatted onto the azimuth/elevation grid, and every ray
//! accumulates complex contributions front to back. Gradients of all
//! primitive attributes are derived by hand in [`grad`].
//!
//! Module map:
//!
//! * [`scene`] primitives, covariance assembly, cube initialization
//! * [`fle`] Fourier-Legendre radiance basis
//! * [`splat`] orthographic projection, tiling, 64-bit depth keys
//! * [`render`] ray/ellipsoid intersection and complex ray tracing
//! * [`grad`] analytic backward pass
//! * [`loss`] spectrum and single-antenna losses, evaluation metrics
//! * [`train`] SGD, learning-rate schedule, densification and pruning
//! * [`oracle`] multipath simulator, naive renderer, finite differences
//! * [`io`] dataset manifests, payloads and checkpoints

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod fle;
pub mod grad;
pub mod io;
pub mod loss;
pub mod oracle;
pub mod render;
pub mod scene;
pub mod sort;
pub mod splat;
pub mod train;

pub use error::{Error, Result};
pub use num_complex::Complex64 as Complex;

pub type Vec3 = nalgebra::Vector3<f64>;
pub type Mat3 = nalgebra::Matrix3<f64>;
