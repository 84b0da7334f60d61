//! Trilinear resampling onto a new grid size.

use super::{Volume3D, VolumeError};

/// Maps output index `i` (of `n_out`) to a continuous input index so that
/// corner voxel centers coincide; a single output sample lands on the
/// input center.
pub(crate) fn center_aligned_coord(i: usize, n_out: usize, n_in: usize) -> f64 {
    if n_out > 1 {
        i as f64 * (n_in as f64 - 1.0) / (n_out as f64 - 1.0)
    } else {
        (n_in as f64 - 1.0) / 2.0
    }
}

/// Resamples a volume to `new_dims` with trilinear interpolation.
///
/// Corner voxel centers map to corner voxel centers, and the output
/// spacing is rescaled so the physical extent (`dims * spacing`) is
/// preserved. The origin is kept.
pub fn resample(vol: &Volume3D, new_dims: [usize; 3]) -> Result<Volume3D, VolumeError> {
    if new_dims.iter().any(|&d| d == 0) {
        return Err(VolumeError::InvalidDimensions(format!("{new_dims:?}")));
    }
    let old_dims = vol.dims();
    let old_spacing = vol.spacing();
    let mut spacing = [0f32; 3];
    for a in 0..3 {
        spacing[a] =
            (old_dims[a] as f64 * f64::from(old_spacing[a]) / new_dims[a] as f64) as f32;
    }

    let mut data = Vec::with_capacity(new_dims[0] * new_dims[1] * new_dims[2]);
    for k in 0..new_dims[2] {
        let w = center_aligned_coord(k, new_dims[2], old_dims[2]);
        for j in 0..new_dims[1] {
            let v = center_aligned_coord(j, new_dims[1], old_dims[1]);
            for i in 0..new_dims[0] {
                let u = center_aligned_coord(i, new_dims[0], old_dims[0]);
                data.push(vol.sample_trilinear_voxel(u, v, w) as f32);
            }
        }
    }
    Volume3D::new(new_dims, spacing, vol.origin(), data)
}
