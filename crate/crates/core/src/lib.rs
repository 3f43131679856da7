//! Granular multimodal attention for grounded visual dialog.
//!
//! The crate is organised bottom-up: [`tensor`] and [`autodiff`] provide the
//! numeric core, [`sketch`] and [`fft`] the compact bilinear kernel,
//! [`attention`] the models, [`saliency`] the black-box importance
//! estimators, [`metrics`] evaluation, and [`harness`] the experiment driver.

pub mod attention;
pub mod autodiff;
pub mod encoder;
pub mod error;
pub mod fft;
pub mod gmat;
pub mod harness;
pub mod metrics;
pub mod params;
pub mod rng;
pub mod saliency;
pub mod sketch;
pub mod tensor;

pub use error::{GmaError, Result};
pub use tensor::Tensor;
