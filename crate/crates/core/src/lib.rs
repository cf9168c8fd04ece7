//! Zero-shot voice conversion with a vector-quantized content encoder,
//! contrastive predictive coding on the codes and noise augmentation of the
//! speaker path. The guide in `book/` walks through each piece.

pub mod augment;
pub mod blocks;
pub mod config;
pub mod convert;
pub mod error;
pub mod eval;
pub mod features;
pub mod model;
pub mod nn;
pub mod synth;
pub mod tensor_file;
pub mod trainer;

pub use error::{Error, Result};

// The guide's chapters compile and run as doctests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/overview.md")]
    mod overview {}
    #[doc = include_str!("../../../book/src/features.md")]
    mod features {}
    #[doc = include_str!("../../../book/src/synthetic.md")]
    mod synthetic {}
    #[doc = include_str!("../../../book/src/quantization.md")]
    mod quantization {}
    #[doc = include_str!("../../../book/src/instance_norm.md")]
    mod instance_norm {}
    #[doc = include_str!("../../../book/src/cpc.md")]
    mod cpc {}
    #[doc = include_str!("../../../book/src/augmentation.md")]
    mod augmentation {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/conversion.md")]
    mod conversion {}
    #[doc = include_str!("../../../book/src/configuration.md")]
    mod configuration {}
}
