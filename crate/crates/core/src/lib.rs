//! Watermark vaccines.
//!
//! Generates small L∞-bounded perturbations ("vaccines") for host images
//! that make blind watermark-removal networks fail once a visible watermark
//! is applied. Two kinds are supported: a disrupting vaccine (DWV) that
//! ruins the removal output, and an inerasable vaccine (IWV) that keeps the
//! network from detecting and erasing the watermark.
//!
//! The crate also contains everything needed to evaluate them end to end:
//! a small reverse-mode autodiff engine, procedural host and watermark
//! generators, trainable removal networks, image-quality metrics, JPEG and
//! blur transforms, and deterministic experiment drivers.

pub mod autodiff;
pub mod compositor;
pub mod error;
pub mod harness;
pub mod imaging;
pub mod metrics;
pub mod ops;
pub mod optim;
pub mod real;
pub mod removal;
pub mod rng;
pub mod tensor;
pub mod transforms;
pub mod vaccine;

pub use error::{Error, Result};
pub use real::Real;
pub use tensor::Tensor;
