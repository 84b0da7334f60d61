//! Spatial preprocessing: registration, bias-field correction, tissue
//! segmentation, masking, and smoothing.
//!
//! The stages compose into [`normalize_to_template`], which takes a raw
//! volume onto a template grid and reports the recovered transform and
//! the per-voxel displacement field.

mod affine;
mod bias;
mod normalize;
mod register;
mod segment;
mod smooth;

pub use affine::{apply_transform, AffineTransform, DeformationField};
pub use bias::{correct_bias, estimate_bias, BiasField};
pub use normalize::{normalize_to_template, NormalizeResult};
pub use register::{register, RegistrationConfig, RegistrationMode, RegistrationResult};
pub use segment::{
    apply_mask, gray_matter_mask, segment_tissues, GmmFit, TissueClass, TissueMap,
};
pub use smooth::smooth_gaussian;

use std::fmt;

/// Errors produced by the preprocessing stages.
#[derive(Debug)]
pub enum PreprocessError {
    /// Input carries no usable signal (constant volume, empty mask, or a
    /// rank-deficient fit).
    DegenerateInput(String),
    /// Transform matrix is not invertible.
    SingularTransform,
    /// Log-domain bias fitting needs strictly positive intensities inside
    /// the mask.
    NonPositiveIntensities { count: usize },
    /// Two volumes that must share a grid do not.
    DimMismatch { left: [usize; 3], right: [usize; 3] },
    /// Polynomial order outside the supported 0..=3 range.
    InvalidOrder(usize),
    /// Component count outside the supported 2..=5 range.
    InvalidK(usize),
    /// Smoothing kernel width must be non-negative.
    InvalidFwhm(f32),
    /// A deformation displacement exceeded the volume diagonal.
    UnboundedDeformation { magnitude_mm: f64, diagonal_mm: f64 },
}

impl fmt::Display for PreprocessError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PreprocessError::DegenerateInput(detail) => {
                write!(f, "degenerate input: {detail}")
            }
            PreprocessError::SingularTransform => write!(f, "transform is singular"),
            PreprocessError::NonPositiveIntensities { count } => write!(
                f,
                "{count} masked voxels are non-positive; log-domain bias fit is undefined"
            ),
            PreprocessError::DimMismatch { left, right } => {
                write!(f, "volume dimensions differ: {left:?} vs {right:?}")
            }
            PreprocessError::InvalidOrder(order) => {
                write!(f, "polynomial order {order} outside supported range 0..=3")
            }
            PreprocessError::InvalidK(k) => {
                write!(f, "component count {k} outside supported range 2..=5")
            }
            PreprocessError::InvalidFwhm(v) => write!(f, "fwhm must be >= 0, got {v}"),
            PreprocessError::UnboundedDeformation { magnitude_mm, diagonal_mm } => write!(
                f,
                "displacement of {magnitude_mm:.2} mm exceeds the volume diagonal {diagonal_mm:.2} mm"
            ),
        }
    }
}

impl std::error::Error for PreprocessError {}
