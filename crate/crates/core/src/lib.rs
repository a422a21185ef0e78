//! Chunk-wise selective state-space image deblurring.
//!
//! The network, its losses and its training loop run on a small reverse-mode
//! autodiff tape over `f64` tensors. The guide in `book/` walks through each
//! part with runnable examples.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod gradcheck;
pub mod linalg;
pub mod losses;
pub mod memvssm;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod ssm;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{FeatureMap, Tensor};

/// The guide's chapters, compiled so that their code blocks run as doc-tests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/scan.md")]
    mod scan {}
    #[doc = include_str!("../../../book/src/memvssm.md")]
    mod memvssm {}
    #[doc = include_str!("../../../book/src/losses.md")]
    mod losses {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/diagnostics.md")]
    mod diagnostics {}
    #[doc = include_str!("../../../book/src/formats.md")]
    mod formats {}
}
