//! Light field segmentation by constrained prompting of a promptable 2D segmenter.
//!
//! A source segmentation of the middle subview is carried to every other
//! subview by disparity, filtered by feature similarity and refined by
//! prompting the segmenter again in each view.

pub mod backend;
pub mod cli;
pub mod disparity;
pub mod features;
pub mod io;
pub mod lf;
pub mod metrics;
pub mod pipeline;
pub mod synthgen;
