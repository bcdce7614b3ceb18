//! Image-processing attacks applied to protected images before removal.

mod blur;
mod jpeg;

pub use blur::{gaussian_blur, gaussian_taps};
pub use jpeg::{encode_jpeg, jpeg_roundtrip, quality_tables};
