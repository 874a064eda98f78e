//! Two-phase CBCT dental segmentation toolkit.
//!
//! Everything around an external segmenter: preprocessing, label-space
//! consolidation, multi-label STAPLE fusion of per-fold predictions,
//! connected-component cleanup, mandible-anchored Phase-2 cropping and
//! merge-back, and per-class Dice reporting.

pub mod error;
pub mod fusion;
pub mod grid;
pub mod labels;
pub mod metrics;
pub mod nifti;
pub mod phantom;
pub mod pipeline;
pub mod postprocess;
pub mod preprocess;
pub mod roi;

pub use error::{Error, Result};
pub use grid::{Geometry, Grid, ImageGrid, LabelGrid, VoxelBox};
