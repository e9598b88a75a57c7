//! Detection, box attention and segmentation on small synthetic scenes.
//!
//! A single-shot detector produces a feature pyramid and class-labeled
//! boxes. Each class's boxes gate the pyramid to a class-specific copy, a
//! shared decoder turns it into image-resolution features, and either a
//! semantic head or a position-sensitive instance head produces masks.

#![allow(clippy::needless_range_loop)]

pub mod attention;
pub mod autodiff;
pub mod data;
pub mod decoder;
pub mod detector;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod instance;
mod kernels;
pub mod model;
pub mod params;
pub mod tensor;

pub use error::{Error, Result};
pub use geometry::BBox;
pub use params::ParamStore;
pub use tensor::Tensor;
