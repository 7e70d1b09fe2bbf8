//! Learned rate control for neural video codecs.
//!
//! A log-domain PI controller tracks a per-frame rate target set by a
//! mini-GOP budget allocator. A dual-branch GRU controller adds a bounded
//! residual to the PI output in the log-λ domain. Everything runs against a
//! [`plant::CodecPlant`], either a synthetic RD model or a pre-encoded trace.

pub mod budget;
pub mod controller;
pub mod error;
pub mod features;
pub mod metrics;
pub mod pi;
pub mod pipeline;
pub mod plant;
pub mod train;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    struct Introduction;
    #[doc = include_str!("../../../book/src/plant.md")]
    struct Plant;
    #[doc = include_str!("../../../book/src/pi.md")]
    struct Pi;
    #[doc = include_str!("../../../book/src/budget.md")]
    struct Budget;
    #[doc = include_str!("../../../book/src/controller.md")]
    struct Controller;
    #[doc = include_str!("../../../book/src/pipeline.md")]
    struct Pipeline;
    #[doc = include_str!("../../../book/src/training.md")]
    struct Training;
    #[doc = include_str!("../../../book/src/metrics.md")]
    struct Metrics;
    #[doc = include_str!("../../../book/src/cli.md")]
    struct Cli;
}
