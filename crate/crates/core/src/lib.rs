//! Anatomy-guided wavelet U-Net for coronary artery segmentation.
//!
//! The crate is layered bottom-up: [`tensor`] and [`autodiff`] provide a
//! small CPU tensor engine, [`wavelet`] the 3D Haar filter bank, [`nn`] the
//! network, [`anatomy`] the myocardial prior pipeline, [`phantom`] synthetic
//! training data, [`train`] optimization and metrics, and [`io`] file formats.

pub mod anatomy;
pub mod autodiff;
pub mod error;
pub mod io;
pub mod nn;
pub mod phantom;
pub mod tensor;
pub mod train;
pub mod wavelet;

pub use error::{Error, Result};
pub use tensor::Tensor;
