//! Mask-free person-to-person virtual try-on on a procedural toy world.
//!
//! The crate covers the whole pipeline: a synthetic people-and-garments
//! generator, pseudo-triplet construction, a small flow-matching diffusion
//! transformer over a three-panel canvas, the focus attention loss,
//! training, inference and evaluation metrics.

pub mod dataprep;
pub mod dit;
pub mod error;
pub mod focus_loss;
pub mod infer;
pub mod metrics;
pub mod panels;
pub mod raster;
pub mod seeds;
pub mod synthworld;
pub mod tensor;
pub mod train;

pub use error::{Error, ErrorCategory, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/canvas.md")]
    mod canvas {}
    #[doc = include_str!("../../../book/src/dataset.md")]
    mod dataset {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/focus-loss.md")]
    mod focus_loss {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
