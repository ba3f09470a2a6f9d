//! DETRack: an encoder-decoder visual tracker with a deformable transformer
//! head, quality-focal one-to-many label assignment, denoising training, an
//! analytic FLOPs/parameter model, and a synthetic training harness.

pub mod autodiff;
pub mod error;
pub mod geometry;
pub mod tensor;

pub use error::Error;
