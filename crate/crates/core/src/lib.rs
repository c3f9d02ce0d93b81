//! Retinex-style low-light enhancement: decomposition into reflectance and
//! illumination, reflectance restoration, illumination adjustment by a ratio.

pub mod checkpoint;
pub mod dataset;
pub mod degradation;
pub mod error;
pub mod gradcheck;
pub mod imaging;
pub mod losses;
pub mod metrics;
pub mod networks;
pub mod nn;
pub mod pipeline;
pub mod trainer;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/overview.md")]
    mod overview {}
    #[doc = include_str!("../../../book/src/enhancing.md")]
    mod enhancing {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/service.md")]
    mod service {}
}
