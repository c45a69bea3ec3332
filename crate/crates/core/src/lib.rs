//! Evaluation engine for MRI muscle segmentation.
//!
//! The crate covers the quantitative procedures around a segmentation
//! model rather than the model itself:
//!
//! * [`nifti`] / [`volume`]: strict NIFTI-1 I/O and voxel-grid types.
//! * [`preprocess`]: slice extraction, per-slice min-max normalisation,
//!   resizing to model space and back-projection of predictions.
//! * [`curation`]: sequence / body-location keyword classifiers, cohort
//!   frequency tables, Test-A/Test-B split construction and pairing checks.
//! * [`metrics`]: confusion counts, DSC / sensitivity / specificity / HSS
//!   and subgroup summaries.
//! * [`analysis`]: probability-map ensembling, skeletal muscle volume and
//!   index, Pearson correlation and the Wilcoxon signed-rank test.
//! * [`phantom`]: deterministic synthetic volumes with ground-truth masks.
//! * [`cli`]: the `muscle-eval` command-line front end.

pub mod analysis;
pub mod cli;
pub mod curation;
pub mod metrics;
pub mod nifti;
pub mod phantom;
pub mod preprocess;
pub mod report;
pub mod rng;
pub mod volume;

pub use nifti::{read_nifti, write_nifti, NiftiError};
pub use volume::{BinaryMask, ProbabilityVolume, ScalarVolume, VolumeError, VolumeGeometry, VoxelGrid};
