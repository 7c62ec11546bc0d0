//! Two-frame multi-camera metric depth estimation by plane sweeping.

mod error;

pub mod config;
pub mod depth_map;
pub mod geometry;
pub mod hypotheses;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod mff;
pub mod numerics;
pub mod pipeline;
pub mod refine;
pub mod runner;
pub mod stf;
pub mod synthetic;
pub mod volumes;

pub use depth_map::DepthMap;
pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/frames.md")]
    mod frames {}
    #[doc = include_str!("../../../book/src/hypotheses.md")]
    mod hypotheses {}
    #[doc = include_str!("../../../book/src/volumes.md")]
    mod volumes {}
    #[doc = include_str!("../../../book/src/features.md")]
    mod features {}
    #[doc = include_str!("../../../book/src/losses.md")]
    mod losses {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/synthetic.md")]
    mod synthetic {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
