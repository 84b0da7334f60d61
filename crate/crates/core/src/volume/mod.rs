//! Volumetric data structures and file I/O.
//!
//! The centerpiece is [`Volume3D`], a dense scalar volume with voxel
//! spacing and a world-space origin. Volumes are stored x-fastest
//! (`data[x + nx*(y + ny*z)]`), matching the on-disk NIfTI-1 layout so
//! reads and writes are straight copies.

mod manifest;
mod nifti;
mod resample;
mod slices;

pub use manifest::{ClassLabel, DatasetManifest, ManifestEntry, Provenance, CLASS_ORDER};
pub use nifti::{read_nifti, write_nifti};
pub use resample::resample;
pub use slices::{extract_slices, slice_stack_from_volume, slice_stack_to_volume, SliceAxis};
pub(crate) use slices::{plane_from_channel, stack_from_planes, Plane};

use std::fmt;
use std::io;

/// Errors produced by volume construction, I/O, and resampling.
#[derive(Debug)]
pub enum VolumeError {
    /// Header is structurally invalid (wrong size field, bad magic, bad dims).
    MalformedHeader(String),
    /// Header datatype code is not one of the supported scalar types.
    UnsupportedDatatype(i16),
    /// Data payload is shorter than the header-implied voxel count.
    TruncatedData { expected: usize, got: usize },
    /// Loaded or constructed data contains NaN or infinity.
    NonFiniteData,
    /// Dimensions are zero or inconsistent with the data length.
    InvalidDimensions(String),
    /// Voxel spacing is zero, negative, or non-finite.
    InvalidSpacing(String),
    /// A manifest row does not have the expected column count.
    MalformedRow { line: usize, detail: String },
    /// A manifest label string is not a known class.
    UnknownLabel(String),
    /// Two manifest rows point at the same file.
    DuplicatePath(String),
    /// A slice index lies outside the valid interior range.
    IndexOutOfRange { index: usize, len: usize },
    /// Underlying filesystem failure.
    IoFailure(io::Error),
}

impl fmt::Display for VolumeError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VolumeError::MalformedHeader(detail) => write!(f, "malformed header: {detail}"),
            VolumeError::UnsupportedDatatype(code) => {
                write!(f, "unsupported datatype code {code} (expected 4 or 16)")
            }
            VolumeError::TruncatedData { expected, got } => {
                write!(f, "truncated data: expected {expected} bytes, got {got}")
            }
            VolumeError::NonFiniteData => write!(f, "volume contains NaN or infinite values"),
            VolumeError::InvalidDimensions(detail) => write!(f, "invalid dimensions: {detail}"),
            VolumeError::InvalidSpacing(detail) => write!(f, "invalid spacing: {detail}"),
            VolumeError::MalformedRow { line, detail } => {
                write!(f, "malformed manifest row at line {line}: {detail}")
            }
            VolumeError::UnknownLabel(label) => write!(f, "unknown class label {label:?}"),
            VolumeError::DuplicatePath(path) => write!(f, "duplicate manifest path {path:?}"),
            VolumeError::IndexOutOfRange { index, len } => {
                write!(f, "slice index {index} outside valid interior of axis length {len}")
            }
            VolumeError::IoFailure(err) => write!(f, "i/o failure: {err}"),
        }
    }
}

impl std::error::Error for VolumeError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            VolumeError::IoFailure(err) => Some(err),
            _ => None,
        }
    }
}

impl From<io::Error> for VolumeError {
    fn from(err: io::Error) -> Self {
        VolumeError::IoFailure(err)
    }
}

/// A dense 3D scalar volume with physical voxel spacing and origin.
///
/// Data is stored x-fastest; intensities are 32-bit floats and are kept
/// finite by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3D {
    dims: [usize; 3],
    spacing: [f32; 3],
    origin: [f32; 3],
    data: Vec<f32>,
}

impl Volume3D {
    /// Builds a volume, validating dimensions, spacing, and finiteness.
    pub fn new(
        dims: [usize; 3],
        spacing: [f32; 3],
        origin: [f32; 3],
        data: Vec<f32>,
    ) -> Result<Self, VolumeError> {
        if dims.iter().any(|&d| d == 0) {
            return Err(VolumeError::InvalidDimensions(format!("{dims:?}")));
        }
        let n = dims[0] * dims[1] * dims[2];
        if data.len() != n {
            return Err(VolumeError::InvalidDimensions(format!(
                "data length {} does not match dims {:?} (expected {})",
                data.len(),
                dims,
                n
            )));
        }
        if spacing.iter().any(|s| !s.is_finite() || *s <= 0.0) {
            return Err(VolumeError::InvalidSpacing(format!("{spacing:?}")));
        }
        if origin.iter().any(|o| !o.is_finite()) {
            return Err(VolumeError::NonFiniteData);
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(VolumeError::NonFiniteData);
        }
        Ok(Volume3D { dims, spacing, origin, data })
    }

    /// Builds a volume filled with a constant value.
    pub fn filled(
        dims: [usize; 3],
        spacing: [f32; 3],
        origin: [f32; 3],
        value: f32,
    ) -> Result<Self, VolumeError> {
        let n = dims[0] * dims[1] * dims[2];
        Volume3D::new(dims, spacing, origin, vec![value; n])
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn origin(&self) -> [f32; 3] {
        self.origin
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Mutable access to the raw intensities. Callers are responsible for
    /// keeping values finite.
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn voxel_count(&self) -> usize {
        self.data.len()
    }

    /// Flat index of voxel (x, y, z).
    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.index(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, value: f32) {
        let i = self.index(x, y, z);
        self.data[i] = value;
    }

    /// World-space (mm) position of a voxel center.
    pub fn voxel_center_mm(&self, x: usize, y: usize, z: usize) -> [f64; 3] {
        [
            f64::from(self.origin[0]) + x as f64 * f64::from(self.spacing[0]),
            f64::from(self.origin[1]) + y as f64 * f64::from(self.spacing[1]),
            f64::from(self.origin[2]) + z as f64 * f64::from(self.spacing[2]),
        ]
    }

    /// Converts a world-space point to continuous voxel coordinates.
    pub fn mm_to_voxel(&self, p: [f64; 3]) -> [f64; 3] {
        [
            (p[0] - f64::from(self.origin[0])) / f64::from(self.spacing[0]),
            (p[1] - f64::from(self.origin[1])) / f64::from(self.spacing[1]),
            (p[2] - f64::from(self.origin[2])) / f64::from(self.spacing[2]),
        ]
    }

    /// Physical extent (mm) along each axis, defined as `dims * spacing`.
    pub fn extent_mm(&self) -> [f64; 3] {
        [
            self.dims[0] as f64 * f64::from(self.spacing[0]),
            self.dims[1] as f64 * f64::from(self.spacing[1]),
            self.dims[2] as f64 * f64::from(self.spacing[2]),
        ]
    }

    /// Trilinear sample at continuous voxel coordinates; points outside the
    /// grid read as zero.
    pub fn sample_trilinear_voxel(&self, u: f64, v: f64, w: f64) -> f64 {
        let [nx, ny, nz] = self.dims;
        // Entirely outside the voxel-center hull (with the outermost half
        // voxel treated as clamped support) reads as zero.
        if u <= -1.0 || v <= -1.0 || w <= -1.0 {
            return 0.0;
        }
        if u >= nx as f64 || v >= ny as f64 || w >= nz as f64 {
            return 0.0;
        }

        let x0 = u.floor();
        let y0 = v.floor();
        let z0 = w.floor();
        let fx = u - x0;
        let fy = v - y0;
        let fz = w - z0;
        let x0 = x0 as isize;
        let y0 = y0 as isize;
        let z0 = z0 as isize;

        let fetch = |x: isize, y: isize, z: isize| -> f64 {
            if x < 0 || y < 0 || z < 0 {
                return 0.0;
            }
            let (x, y, z) = (x as usize, y as usize, z as usize);
            if x >= nx || y >= ny || z >= nz {
                return 0.0;
            }
            f64::from(self.data[self.index(x, y, z)])
        };

        let c000 = fetch(x0, y0, z0);
        let c100 = fetch(x0 + 1, y0, z0);
        let c010 = fetch(x0, y0 + 1, z0);
        let c110 = fetch(x0 + 1, y0 + 1, z0);
        let c001 = fetch(x0, y0, z0 + 1);
        let c101 = fetch(x0 + 1, y0, z0 + 1);
        let c011 = fetch(x0, y0 + 1, z0 + 1);
        let c111 = fetch(x0 + 1, y0 + 1, z0 + 1);

        let wx0 = 1.0 - fx;
        let wy0 = 1.0 - fy;
        let wz0 = 1.0 - fz;
        c000 * wx0 * wy0 * wz0
            + c100 * fx * wy0 * wz0
            + c010 * wx0 * fy * wz0
            + c110 * fx * fy * wz0
            + c001 * wx0 * wy0 * fz
            + c101 * fx * wy0 * fz
            + c011 * wx0 * fy * fz
            + c111 * fx * fy * fz
    }

    /// Trilinear sample at a world-space (mm) point; zero outside.
    pub fn sample_trilinear_mm(&self, p: [f64; 3]) -> f64 {
        let [u, v, w] = self.mm_to_voxel(p);
        self.sample_trilinear_voxel(u, v, w)
    }
}

/// A three-channel 2D image: three adjacent volume slices stacked along
/// the channel axis. Stored row-major with the channel index fastest
/// (`data[(row * width + col) * 3 + channel]`), which is also the layout
/// the network engine consumes.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceStack {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl SliceStack {
    pub const CHANNELS: usize = 3;

    /// Builds a stack, validating shape and finiteness.
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self, VolumeError> {
        if height == 0 || width == 0 {
            return Err(VolumeError::InvalidDimensions(format!("{height}x{width}")));
        }
        if data.len() != height * width * Self::CHANNELS {
            return Err(VolumeError::InvalidDimensions(format!(
                "data length {} does not match {}x{}x{}",
                data.len(),
                height,
                width,
                Self::CHANNELS
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(VolumeError::NonFiniteData);
        }
        Ok(SliceStack { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        SliceStack {
            height,
            width,
            data: vec![0.0; height * width * Self::CHANNELS],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize, channel: usize) -> f32 {
        self.data[(row * self.width + col) * Self::CHANNELS + channel]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, channel: usize, value: f32) {
        self.data[(row * self.width + col) * Self::CHANNELS + channel] = value;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_zero_dims_and_length_mismatch() {
        assert!(matches!(
            Volume3D::new([0, 2, 2], [1.0; 3], [0.0; 3], vec![]),
            Err(VolumeError::InvalidDimensions(_))
        ));
        assert!(matches!(
            Volume3D::new([2, 2, 2], [1.0; 3], [0.0; 3], vec![0.0; 7]),
            Err(VolumeError::InvalidDimensions(_))
        ));
    }

    #[test]
    fn rejects_bad_spacing_and_nonfinite_values() {
        assert!(matches!(
            Volume3D::new([1, 1, 1], [0.0, 1.0, 1.0], [0.0; 3], vec![1.0]),
            Err(VolumeError::InvalidSpacing(_))
        ));
        assert!(matches!(
            Volume3D::new([1, 1, 1], [1.0; 3], [0.0; 3], vec![f32::NAN]),
            Err(VolumeError::NonFiniteData)
        ));
    }

    #[test]
    fn indexing_is_x_fastest() {
        let mut v = Volume3D::filled([2, 3, 4], [1.0; 3], [0.0; 3], 0.0).unwrap();
        v.set(1, 2, 3, 9.0);
        assert_eq!(v.data()[1 + 2 * (2 + 3 * 3)], 9.0);
        assert_eq!(v.at(1, 2, 3), 9.0);
    }

    #[test]
    fn trilinear_interpolates_between_centers_and_zeros_outside() {
        let v = Volume3D::new([2, 1, 1], [1.0; 3], [0.0; 3], vec![0.0, 10.0]).unwrap();
        assert_eq!(v.sample_trilinear_voxel(0.5, 0.0, 0.0), 5.0);
        assert_eq!(v.sample_trilinear_voxel(0.0, 0.0, 0.0), 0.0);
        assert_eq!(v.sample_trilinear_voxel(1.0, 0.0, 0.0), 10.0);
        assert_eq!(v.sample_trilinear_voxel(-2.0, 0.0, 0.0), 0.0);
        assert_eq!(v.sample_trilinear_voxel(5.0, 0.0, 0.0), 0.0);
        // Half a voxel past the last center blends toward the zero exterior.
        assert_eq!(v.sample_trilinear_voxel(1.5, 0.0, 0.0), 5.0);
    }

    #[test]
    fn world_coordinates_respect_origin_and_spacing() {
        let v = Volume3D::filled([4, 4, 4], [1.5, 2.0, 2.5], [10.0, -5.0, 0.0], 1.0).unwrap();
        assert_eq!(v.voxel_center_mm(1, 1, 1), [11.5, -3.0, 2.5]);
        let back = v.mm_to_voxel([11.5, -3.0, 2.5]);
        assert!((back[0] - 1.0).abs() < 1e-12);
        assert!((back[1] - 1.0).abs() < 1e-12);
        assert!((back[2] - 1.0).abs() < 1e-12);
    }
}
