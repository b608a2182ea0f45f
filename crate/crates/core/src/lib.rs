//! User-guided domain adaptation for extreme-point driven 3D segmentation.
//!
//! A heatmap network predicts extreme-point heatmaps, a segmentation network
//! turns image plus heatmaps into a mask, and a discriminator aligns the
//! joint (mask, heatmap) output of the target domain with the source domain.
//! Target studies with user-clicked extreme points anchor the adaptation.

pub mod benchmark;
pub mod corpus;
pub mod device;
pub mod error;
pub mod extreme;
pub mod heatmap;
pub mod losses;
pub mod metrics;
pub mod networks;
pub mod nifti_io;
pub mod nn;
pub mod phantom;
pub mod rle;
pub mod service;
pub mod trainer;
pub mod volume;

pub use error::{Error, Result};
