//! Affine transforms in world (mm) space, volume resampling under a
//! transform, and dense displacement fields.

use std::path::{Path, PathBuf};

use crate::volume::{read_nifti, write_nifti, Volume3D, VolumeError};

use super::PreprocessError;

/// An affine map `T(x) = M x + t` on world coordinates (millimeters).
///
/// Registration returns transforms in the resampling convention: for each
/// point `x` on the *reference* grid, the moving volume is sampled at
/// `T(x)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineTransform {
    pub matrix: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl AffineTransform {
    pub fn identity() -> Self {
        AffineTransform {
            matrix: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
        }
    }

    /// Pure translation.
    pub fn translate(t: [f64; 3]) -> Self {
        AffineTransform { translation: t, ..AffineTransform::identity() }
    }

    /// Rigid transform from Euler angles (radians, applied as
    /// `Rz * Ry * Rx`) rotating about `center`, followed by a translation.
    pub fn rigid(angles: [f64; 3], translation: [f64; 3], center: [f64; 3]) -> Self {
        let r = euler_matrix(angles);
        // T(x) = R (x - c) + c + t  =  R x + (c + t - R c)
        let rc = mat_vec(&r, center);
        AffineTransform {
            matrix: r,
            translation: [
                center[0] + translation[0] - rc[0],
                center[1] + translation[1] - rc[1],
                center[2] + translation[2] - rc[2],
            ],
        }
    }

    #[inline]
    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let m = &self.matrix;
        [
            m[0][0] * p[0] + m[0][1] * p[1] + m[0][2] * p[2] + self.translation[0],
            m[1][0] * p[0] + m[1][1] * p[1] + m[1][2] * p[2] + self.translation[1],
            m[2][0] * p[0] + m[2][1] * p[1] + m[2][2] * p[2] + self.translation[2],
        ]
    }

    /// Composition `self . other`: applies `other` first.
    pub fn compose(&self, other: &AffineTransform) -> AffineTransform {
        let mut matrix = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                matrix[i][j] = (0..3).map(|k| self.matrix[i][k] * other.matrix[k][j]).sum();
            }
        }
        let shifted = mat_vec(&self.matrix, other.translation);
        AffineTransform {
            matrix,
            translation: [
                shifted[0] + self.translation[0],
                shifted[1] + self.translation[1],
                shifted[2] + self.translation[2],
            ],
        }
    }

    pub fn determinant(&self) -> f64 {
        let m = &self.matrix;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    pub fn inverse(&self) -> Result<AffineTransform, PreprocessError> {
        let det = self.determinant();
        if !det.is_finite() || det.abs() < 1e-12 {
            return Err(PreprocessError::SingularTransform);
        }
        let m = &self.matrix;
        let inv = [
            [
                (m[1][1] * m[2][2] - m[1][2] * m[2][1]) / det,
                (m[0][2] * m[2][1] - m[0][1] * m[2][2]) / det,
                (m[0][1] * m[1][2] - m[0][2] * m[1][1]) / det,
            ],
            [
                (m[1][2] * m[2][0] - m[1][0] * m[2][2]) / det,
                (m[0][0] * m[2][2] - m[0][2] * m[2][0]) / det,
                (m[0][2] * m[1][0] - m[0][0] * m[1][2]) / det,
            ],
            [
                (m[1][0] * m[2][1] - m[1][1] * m[2][0]) / det,
                (m[0][1] * m[2][0] - m[0][0] * m[2][1]) / det,
                (m[0][0] * m[1][1] - m[0][1] * m[1][0]) / det,
            ],
        ];
        let it = mat_vec(&inv, self.translation);
        Ok(AffineTransform {
            matrix: inv,
            translation: [-it[0], -it[1], -it[2]],
        })
    }

    /// Total rotation angle in degrees, assuming an orthonormal matrix.
    /// Meaningful for rigid transforms only.
    pub fn rotation_angle_deg(&self) -> f64 {
        let m = &self.matrix;
        let trace = m[0][0] + m[1][1] + m[2][2];
        let c = ((trace - 1.0) / 2.0).clamp(-1.0, 1.0);
        c.acos().to_degrees()
    }
}

fn mat_vec(m: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

/// Rotation matrix `Rz(rz) * Ry(ry) * Rx(rx)`.
pub(crate) fn euler_matrix(angles: [f64; 3]) -> [[f64; 3]; 3] {
    let (sx, cx) = angles[0].sin_cos();
    let (sy, cy) = angles[1].sin_cos();
    let (sz, cz) = angles[2].sin_cos();
    [
        [cz * cy, cz * sy * sx - sz * cx, cz * sy * cx + sz * sx],
        [sz * cy, sz * sy * sx + cz * cx, sz * sy * cx - cz * sx],
        [-sy, cy * sx, cy * cx],
    ]
}

/// Resamples `vol` under `transform` onto the grid of `reference`.
///
/// For every reference voxel center `x`, the output takes
/// `vol(transform(x))` by trilinear interpolation, with zero fill where
/// the sample point leaves the volume.
pub fn apply_transform(
    vol: &Volume3D,
    transform: &AffineTransform,
    reference: &Volume3D,
) -> Volume3D {
    let dims = reference.dims();
    let mut data = Vec::with_capacity(dims[0] * dims[1] * dims[2]);
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let p = reference.voxel_center_mm(x, y, z);
                data.push(vol.sample_trilinear_mm(transform.apply(p)) as f32);
            }
        }
    }
    Volume3D::new(dims, reference.spacing(), reference.origin(), data)
        .expect("resampled data is finite and matches the reference grid")
}

/// A dense per-voxel displacement field (mm), stored as three scalar
/// components on a reference grid.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformationField {
    dims: [usize; 3],
    spacing: [f32; 3],
    origin: [f32; 3],
    dx: Vec<f32>,
    dy: Vec<f32>,
    dz: Vec<f32>,
}

impl DeformationField {
    /// Builds the field, checking every displacement is finite and no
    /// larger than the grid diagonal.
    pub fn new(
        dims: [usize; 3],
        spacing: [f32; 3],
        origin: [f32; 3],
        dx: Vec<f32>,
        dy: Vec<f32>,
        dz: Vec<f32>,
    ) -> Result<Self, PreprocessError> {
        let n = dims[0] * dims[1] * dims[2];
        if dx.len() != n || dy.len() != n || dz.len() != n {
            return Err(PreprocessError::DimMismatch { left: dims, right: dims });
        }
        let diagonal = {
            let e = [
                dims[0] as f64 * f64::from(spacing[0]),
                dims[1] as f64 * f64::from(spacing[1]),
                dims[2] as f64 * f64::from(spacing[2]),
            ];
            (e[0] * e[0] + e[1] * e[1] + e[2] * e[2]).sqrt()
        };
        for i in 0..n {
            let m = (f64::from(dx[i]).powi(2)
                + f64::from(dy[i]).powi(2)
                + f64::from(dz[i]).powi(2))
            .sqrt();
            if !m.is_finite() || m > diagonal {
                return Err(PreprocessError::UnboundedDeformation {
                    magnitude_mm: m,
                    diagonal_mm: diagonal,
                });
            }
        }
        Ok(DeformationField { dims, spacing, origin, dx, dy, dz })
    }

    /// Materializes an affine transform as displacements on the reference
    /// grid: `displacement(v) = T(v) - v` at each voxel center `v`.
    pub fn from_affine(
        transform: &AffineTransform,
        reference: &Volume3D,
    ) -> Result<Self, PreprocessError> {
        let dims = reference.dims();
        let n = dims[0] * dims[1] * dims[2];
        let mut dx = Vec::with_capacity(n);
        let mut dy = Vec::with_capacity(n);
        let mut dz = Vec::with_capacity(n);
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    let p = reference.voxel_center_mm(x, y, z);
                    let q = transform.apply(p);
                    dx.push((q[0] - p[0]) as f32);
                    dy.push((q[1] - p[1]) as f32);
                    dz.push((q[2] - p[2]) as f32);
                }
            }
        }
        DeformationField::new(dims, reference.spacing(), reference.origin(), dx, dy, dz)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn components(&self) -> (&[f32], &[f32], &[f32]) {
        (&self.dx, &self.dy, &self.dz)
    }

    /// Displacement vector at a voxel (by flat index).
    pub fn at(&self, idx: usize) -> [f32; 3] {
        [self.dx[idx], self.dy[idx], self.dz[idx]]
    }

    /// Largest displacement magnitude (mm).
    pub fn max_magnitude(&self) -> f64 {
        (0..self.dx.len())
            .map(|i| {
                (f64::from(self.dx[i]).powi(2)
                    + f64::from(self.dy[i]).powi(2)
                    + f64::from(self.dz[i]).powi(2))
                .sqrt()
            })
            .fold(0.0, f64::max)
    }

    /// Persists the field as three scalar volumes `<stem>_dx.nii`,
    /// `<stem>_dy.nii`, `<stem>_dz.nii` and returns their paths.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<[PathBuf; 3], VolumeError> {
        let mut paths = Vec::with_capacity(3);
        for (suffix, data) in [("dx", &self.dx), ("dy", &self.dy), ("dz", &self.dz)] {
            let vol = Volume3D::new(self.dims, self.spacing, self.origin, data.clone())?;
            let path = dir.join(format!("{stem}_{suffix}.nii"));
            write_nifti(&path, &vol)?;
            paths.push(path);
        }
        Ok([paths.remove(0), paths.remove(0), paths.remove(0)])
    }

    /// Loads a field previously written by [`DeformationField::save`].
    pub fn load(dir: &Path, stem: &str) -> Result<Self, VolumeError> {
        let dx = read_nifti(&dir.join(format!("{stem}_dx.nii")))?;
        let dy = read_nifti(&dir.join(format!("{stem}_dy.nii")))?;
        let dz = read_nifti(&dir.join(format!("{stem}_dz.nii")))?;
        DeformationField::new(
            dx.dims(),
            dx.spacing(),
            dx.origin(),
            dx.data().to_vec(),
            dy.data().to_vec(),
            dz.data().to_vec(),
        )
        .map_err(|e| VolumeError::InvalidDimensions(e.to_string()))
    }
}
