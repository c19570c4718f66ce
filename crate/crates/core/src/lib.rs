pub mod error;
pub mod nifti;
pub mod volume;

pub use error::{Error, Result};
pub use volume::{trilinear_sample, Geometry, Mask, Volume, IMPUTE_HU};
pub mod field;
pub mod transform;
pub mod phantom;
pub mod preprocess;
pub mod corrfield;
pub mod affinereg;
pub mod atlas;
pub mod manifest;
pub mod pipeline;
pub mod qa;
pub mod cohort;
