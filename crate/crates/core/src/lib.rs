//! Recurrent stereo super-resolution with high-resolution disparity
//! feedback, built on a small reverse-mode differentiation engine.

pub mod attention;
pub mod autodiff;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod feedback;
pub mod gradcheck;
pub mod hr_disparity;
pub mod io;
pub mod linalg;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod nn;
pub mod parallel;
pub mod ssim;
pub mod synthetic;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Real, Shape, Tensor};
