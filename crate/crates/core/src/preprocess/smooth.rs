//! Separable Gaussian smoothing with a kernel width given as FWHM in
//! millimeters.

use crate::volume::Volume3D;

use super::PreprocessError;

/// FWHM-to-sigma conversion factor, `2 sqrt(2 ln 2)`.
const FWHM_TO_SIGMA: f64 = 2.354_820_045_030_949_4;

/// One-dimensional Gaussian taps for a given sigma (in voxels), truncated
/// at four sigma and normalized to sum to one.
fn kernel_1d(sigma_vox: f64) -> Vec<f64> {
    let radius = (4.0 * sigma_vox).ceil() as usize;
    let mut taps = Vec::with_capacity(2 * radius + 1);
    let denom = 2.0 * sigma_vox * sigma_vox;
    for j in -(radius as isize)..=(radius as isize) {
        taps.push((-((j * j) as f64) / denom).exp());
    }
    let total: f64 = taps.iter().sum();
    for t in &mut taps {
        *t /= total;
    }
    taps
}

/// Applies one separable pass along `axis`, renormalizing by the
/// in-bounds kernel mass at the borders so constant volumes pass through
/// unchanged and interior-supported content conserves total intensity.
fn smooth_axis(vol: &Volume3D, axis: usize, taps: &[f64]) -> Volume3D {
    let dims = vol.dims();
    let radius = (taps.len() - 1) / 2;
    let len = dims[axis];
    let mut out = vec![0.0f32; vol.voxel_count()];

    let stride = match axis {
        0 => 1,
        1 => dims[0],
        _ => dims[0] * dims[1],
    };
    // Iterate over all lines along `axis`.
    let (n_a, n_b) = match axis {
        0 => (dims[1], dims[2]),
        1 => (dims[0], dims[2]),
        _ => (dims[0], dims[1]),
    };
    let line_base = |a: usize, b: usize| -> usize {
        match axis {
            0 => dims[0] * (a + dims[1] * b),
            1 => a + dims[0] * dims[1] * b,
            _ => a + dims[0] * b,
        }
    };

    let data = vol.data();
    for b in 0..n_b {
        for a in 0..n_a {
            let base = line_base(a, b);
            for i in 0..len {
                let lo = i.saturating_sub(radius);
                let hi = (i + radius).min(len - 1);
                let mut acc = 0.0f64;
                let mut mass = 0.0f64;
                for j in lo..=hi {
                    let w = taps[j + radius - i];
                    acc += w * f64::from(data[base + j * stride]);
                    mass += w;
                }
                out[base + i * stride] = (acc / mass) as f32;
            }
        }
    }
    Volume3D::new(dims, vol.spacing(), vol.origin(), out)
        .expect("smoothing preserves grid shape and finiteness")
}

/// Gaussian-smooths a volume with the given FWHM in millimeters.
///
/// The kernel is separable; each axis uses `sigma = fwhm / 2.3548 /
/// spacing` voxels, truncated at four sigma. A zero FWHM is an exact
/// identity.
pub fn smooth_gaussian(vol: &Volume3D, fwhm_mm: f32) -> Result<Volume3D, PreprocessError> {
    if !fwhm_mm.is_finite() || fwhm_mm < 0.0 {
        return Err(PreprocessError::InvalidFwhm(fwhm_mm));
    }
    if fwhm_mm == 0.0 {
        return Ok(vol.clone());
    }
    let sigma_mm = f64::from(fwhm_mm) / FWHM_TO_SIGMA;
    let mut out = vol.clone();
    for axis in 0..3 {
        let sigma_vox = sigma_mm / f64::from(vol.spacing()[axis]);
        let taps = kernel_1d(sigma_vox);
        if taps.len() > 1 {
            out = smooth_axis(&out, axis, &taps);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_fwhm_is_bitwise_identity() {
        let data: Vec<f32> = (0..27).map(|i| i as f32 * 0.77).collect();
        let vol = Volume3D::new([3, 3, 3], [1.0; 3], [0.0; 3], data).unwrap();
        let out = smooth_gaussian(&vol, 0.0).unwrap();
        assert_eq!(out.data(), vol.data());
    }

    #[test]
    fn negative_fwhm_is_rejected() {
        let vol = Volume3D::filled([2, 2, 2], [1.0; 3], [0.0; 3], 1.0).unwrap();
        assert!(matches!(
            smooth_gaussian(&vol, -1.0),
            Err(PreprocessError::InvalidFwhm(_))
        ));
    }

    #[test]
    fn constant_volume_is_unchanged() {
        let vol = Volume3D::filled([9, 9, 9], [1.5; 3], [0.0; 3], 42.0).unwrap();
        let out = smooth_gaussian(&vol, 8.0).unwrap();
        for &v in out.data() {
            assert!((v - 42.0).abs() < 1e-4);
        }
    }

    #[test]
    fn impulse_center_weight_matches_kernel_product() {
        // 8 mm FWHM at 1.5 mm spacing; impulse far from every border.
        let dims = [31, 31, 31];
        let mut vol = Volume3D::filled(dims, [1.5; 3], [0.0; 3], 0.0).unwrap();
        vol.set(15, 15, 15, 1.0);
        let out = smooth_gaussian(&vol, 8.0).unwrap();

        let sigma_vox = 8.0 / FWHM_TO_SIGMA / 1.5;
        let taps = kernel_1d(sigma_vox);
        let center_tap = taps[(taps.len() - 1) / 2];
        let expected = center_tap.powi(3);
        let got = f64::from(out.at(15, 15, 15));
        assert!(
            (got - expected).abs() < 1e-9,
            "center weight {got} vs separable product {expected}"
        );
    }

    #[test]
    fn interior_supported_mass_is_conserved() {
        let dims = [31, 31, 31];
        let mut vol = Volume3D::filled(dims, [1.5; 3], [0.0; 3], 0.0).unwrap();
        // A small blob well inside the border.
        for z in 13..18 {
            for y in 13..18 {
                for x in 13..18 {
                    vol.set(x, y, z, 2.5);
                }
            }
        }
        let before: f64 = vol.data().iter().map(|&v| f64::from(v)).sum();
        let out = smooth_gaussian(&vol, 8.0).unwrap();
        let after: f64 = out.data().iter().map(|&v| f64::from(v)).sum();
        assert!(
            ((after - before) / before).abs() < 1e-4,
            "total intensity {before} -> {after}"
        );
    }

    #[test]
    fn smoothing_commutes_with_scalar_scaling() {
        let data: Vec<f32> = (0..125).map(|i| ((i * 37) % 11) as f32).collect();
        let vol = Volume3D::new([5, 5, 5], [2.0; 3], [0.0; 3], data.clone()).unwrap();
        let scaled = Volume3D::new(
            [5, 5, 5],
            [2.0; 3],
            [0.0; 3],
            data.iter().map(|v| v * 3.0).collect(),
        )
        .unwrap();
        let a = smooth_gaussian(&vol, 6.0).unwrap();
        let b = smooth_gaussian(&scaled, 6.0).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x * 3.0 - y).abs() < 1e-4);
        }
    }
}
