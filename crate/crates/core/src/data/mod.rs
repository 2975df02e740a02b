//! Image I/O, resampling, distortions and dataset construction.

pub mod dataset;
pub mod distort;
pub mod image;
pub mod resample;

pub use dataset::{
    balance_classes, balance_plan, extract_crops, quadrant_crops, CropEntry, Dihedral, FundusAngioPair, Label, Manifest,
    ManifestDataset, PairSet, PrepareConfig, SourceRecord, Split,
};
pub use distort::{distort, DistortionDefaults, DistortionKind, DistortionSpec};
pub use image::{from_batch, to_batch, Image};
pub use resample::{lanczos_downscale, lanczos_resize};
