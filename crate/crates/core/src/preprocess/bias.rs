//! Polynomial bias-field estimation in the log domain.
//!
//! Smooth multiplicative intensity inhomogeneity is modeled as
//! `exp(P(x))` for a low-order 3D polynomial `P` fit by least squares to
//! the log intensities inside a mask, then normalized to unit mean over
//! that mask.

use crate::volume::Volume3D;

use super::PreprocessError;

/// Exponent clamp keeping extrapolated field values comfortably inside
/// f32 range.
const EXARG_LIMIT: f64 = 20.0;

/// A smooth, strictly positive multiplicative field over a volume domain.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasField {
    order: usize,
    /// Coefficients over the monomial basis, in the order produced by
    /// [`monomials`].
    coeffs: Vec<f64>,
    /// Domain mapping: world point -> normalized [-1, 1]^3 coordinates.
    center: [f64; 3],
    half_extent: [f64; 3],
}

/// Exponent triples (i, j, k) with `i + j + k <= order`, in a fixed
/// deterministic order.
fn monomials(order: usize) -> Vec<(u32, u32, u32)> {
    let mut out = Vec::new();
    for total in 0..=order as u32 {
        for i in 0..=total {
            for j in 0..=(total - i) {
                out.push((i, j, total - i - j));
            }
        }
    }
    out
}

impl BiasField {
    pub fn order(&self) -> usize {
        self.order
    }

    fn normalized(&self, p: [f64; 3]) -> [f64; 3] {
        [
            (p[0] - self.center[0]) / self.half_extent[0],
            (p[1] - self.center[1]) / self.half_extent[1],
            (p[2] - self.center[2]) / self.half_extent[2],
        ]
    }

    /// Field value at a world-space point; strictly positive.
    pub fn evaluate(&self, p: [f64; 3]) -> f64 {
        let [u, v, w] = self.normalized(p);
        let mut arg = 0.0;
        for (c, (i, j, k)) in self.coeffs.iter().zip(monomials(self.order)) {
            arg += c * u.powi(i as i32) * v.powi(j as i32) * w.powi(k as i32);
        }
        arg.clamp(-EXARG_LIMIT, EXARG_LIMIT).exp()
    }
}

fn domain_of(vol: &Volume3D) -> ([f64; 3], [f64; 3]) {
    let dims = vol.dims();
    let mut center = [0.0; 3];
    let mut half = [0.0; 3];
    for a in 0..3 {
        let lo = f64::from(vol.origin()[a]);
        let hi = lo + (dims[a] as f64 - 1.0) * f64::from(vol.spacing()[a]);
        center[a] = (lo + hi) / 2.0;
        // Guard against single-voxel axes.
        half[a] = ((hi - lo) / 2.0).max(1e-6);
    }
    (center, half)
}

/// Solves the dense symmetric system `A x = b` by Gaussian elimination
/// with partial pivoting. Only used for the tiny normal-equation systems
/// (at most 20 unknowns).
fn solve_dense(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let pivot_row = (col..n)
            .max_by(|&p, &q| a[p][col].abs().total_cmp(&a[q][col].abs()))
            .unwrap();
        if a[pivot_row][col].abs() < 1e-12 {
            return None;
        }
        a.swap(col, pivot_row);
        b.swap(col, pivot_row);
        for row in col + 1..n {
            let factor = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= factor * a[col][k];
            }
            b[row] -= factor * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let mut acc = b[row];
        for k in row + 1..n {
            acc -= a[row][k] * x[k];
        }
        x[row] = acc / a[row][row];
    }
    Some(x)
}

/// Fits a degree-`order` polynomial bias field to the log intensities of
/// `vol` inside `mask` (nonzero voxels; `None` means every voxel).
///
/// All participating intensities must be strictly positive. The returned
/// field has unit mean over the mask.
pub fn estimate_bias(
    vol: &Volume3D,
    order: usize,
    mask: Option<&Volume3D>,
) -> Result<BiasField, PreprocessError> {
    if order > 3 {
        return Err(PreprocessError::InvalidOrder(order));
    }
    if let Some(m) = mask {
        if m.dims() != vol.dims() {
            return Err(PreprocessError::DimMismatch { left: vol.dims(), right: m.dims() });
        }
    }

    let dims = vol.dims();
    let (center, half_extent) = domain_of(vol);
    let basis = monomials(order);
    let nb = basis.len();

    // Gather masked samples; reject non-positive intensities up front.
    let mut rows: Vec<([f64; 3], f64)> = Vec::new();
    let mut bad = 0usize;
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                if let Some(m) = mask {
                    if m.at(x, y, z) == 0.0 {
                        continue;
                    }
                }
                let v = f64::from(vol.at(x, y, z));
                if v <= 0.0 {
                    bad += 1;
                    continue;
                }
                let p = vol.voxel_center_mm(x, y, z);
                rows.push((
                    [
                        (p[0] - center[0]) / half_extent[0],
                        (p[1] - center[1]) / half_extent[1],
                        (p[2] - center[2]) / half_extent[2],
                    ],
                    v.ln(),
                ));
            }
        }
    }
    if bad > 0 {
        return Err(PreprocessError::NonPositiveIntensities { count: bad });
    }
    if rows.len() < nb {
        return Err(PreprocessError::DegenerateInput(format!(
            "{} masked voxels cannot constrain {} coefficients",
            rows.len(),
            nb
        )));
    }

    // Normal equations, accumulated in f64.
    let mut ata = vec![vec![0.0f64; nb]; nb];
    let mut atb = vec![0.0f64; nb];
    let mut phi = vec![0.0f64; nb];
    for ([u, v, w], logval) in &rows {
        for (b, (i, j, k)) in basis.iter().enumerate() {
            phi[b] = u.powi(*i as i32) * v.powi(*j as i32) * w.powi(*k as i32);
        }
        for r in 0..nb {
            for c in r..nb {
                ata[r][c] += phi[r] * phi[c];
            }
            atb[r] += phi[r] * logval;
        }
    }
    for r in 0..nb {
        for c in 0..r {
            ata[r][c] = ata[c][r];
        }
    }

    let mut coeffs = solve_dense(ata, atb).ok_or_else(|| {
        PreprocessError::DegenerateInput("bias normal equations are singular".to_string())
    })?;

    // Normalize to unit mean over the masked voxels. The basis starts
    // with the constant monomial, so shifting coeff 0 rescales the field.
    let mut mean = 0.0;
    for ([u, v, w], _) in &rows {
        let mut arg = 0.0;
        for (c, (i, j, k)) in coeffs.iter().zip(&basis) {
            arg += c * u.powi(*i as i32) * v.powi(*j as i32) * w.powi(*k as i32);
        }
        mean += arg.clamp(-EXARG_LIMIT, EXARG_LIMIT).exp();
    }
    mean /= rows.len() as f64;
    coeffs[0] -= mean.ln();
    Ok(BiasField { order, coeffs, center, half_extent })
}

/// Divides a volume by a bias field, voxel by voxel.
pub fn correct_bias(vol: &Volume3D, field: &BiasField) -> Result<Volume3D, PreprocessError> {
    let dims = vol.dims();
    let mut data = Vec::with_capacity(vol.voxel_count());
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let f = field.evaluate(vol.voxel_center_mm(x, y, z));
                data.push((f64::from(vol.at(x, y, z)) / f) as f32);
            }
        }
    }
    Volume3D::new(dims, vol.spacing(), vol.origin(), data).map_err(|_| {
        PreprocessError::DegenerateInput("bias correction produced non-finite values".into())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform(dims: [usize; 3], value: f32) -> Volume3D {
        Volume3D::filled(dims, [1.0; 3], [0.0; 3], value).unwrap()
    }

    #[test]
    fn monomial_counts_match_order() {
        assert_eq!(monomials(0).len(), 1);
        assert_eq!(monomials(1).len(), 4);
        assert_eq!(monomials(2).len(), 10);
        assert_eq!(monomials(3).len(), 20);
    }

    #[test]
    fn uniform_volume_yields_unit_field() {
        let vol = uniform([8, 8, 8], 140.0);
        let field = estimate_bias(&vol, 2, None).unwrap();
        let dims = vol.dims();
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    let v = field.evaluate(vol.voxel_center_mm(x, y, z));
                    assert!((v - 1.0).abs() < 1e-9, "field at ({x},{y},{z}) = {v}");
                }
            }
        }
    }

    #[test]
    fn order_zero_is_constant_one_after_normalization() {
        let data: Vec<f32> = (0..512).map(|i| 50.0 + (i % 9) as f32).collect();
        let vol = Volume3D::new([8, 8, 8], [1.0; 3], [0.0; 3], data).unwrap();
        let field = estimate_bias(&vol, 0, None).unwrap();
        let v = field.evaluate([3.0, 3.0, 3.0]);
        assert!((v - 1.0).abs() < 1e-12);
    }

    #[test]
    fn recovers_a_linear_ramp_within_two_percent_rms() {
        // Uniform tissue at 100, multiplied by a ramp 0.8 -> 1.2 along x.
        let dims = [24, 12, 12];
        let mut data = Vec::new();
        for _z in 0..dims[2] {
            for _y in 0..dims[1] {
                for x in 0..dims[0] {
                    let ramp = 0.8 + 0.4 * x as f32 / (dims[0] - 1) as f32;
                    data.push(100.0 * ramp);
                }
            }
        }
        let vol = Volume3D::new(dims, [1.0; 3], [0.0; 3], data).unwrap();
        let field = estimate_bias(&vol, 1, None).unwrap();
        let corrected = correct_bias(&vol, &field).unwrap();

        // The unit-mean constraint leaves a global scale; compare shapes
        // by normalizing both to their means.
        let mean: f64 = corrected.data().iter().map(|&v| f64::from(v)).sum::<f64>()
            / corrected.voxel_count() as f64;
        let mut sq = 0.0f64;
        for &v in corrected.data() {
            let rel = f64::from(v) / mean - 1.0;
            sq += rel * rel;
        }
        let rms = (sq / corrected.voxel_count() as f64).sqrt();
        assert!(rms < 0.02, "residual after correction: {rms:.4} RMS");
    }

    #[test]
    fn unit_mean_holds_over_the_mask() {
        let dims = [10, 10, 10];
        let mut data = Vec::new();
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    data.push(80.0 + x as f32 * 2.0 + y as f32 - z as f32 * 0.5);
                }
            }
        }
        let vol = Volume3D::new(dims, [1.0; 3], [0.0; 3], data).unwrap();
        let mut mask = Volume3D::filled(dims, [1.0; 3], [0.0; 3], 0.0).unwrap();
        for z in 2..8 {
            for y in 2..8 {
                for x in 2..8 {
                    mask.set(x, y, z, 1.0);
                }
            }
        }
        let field = estimate_bias(&vol, 2, Some(&mask)).unwrap();
        let mut mean = 0.0;
        let mut n = 0usize;
        for z in 2..8 {
            for y in 2..8 {
                for x in 2..8 {
                    mean += field.evaluate(vol.voxel_center_mm(x, y, z));
                    n += 1;
                }
            }
        }
        mean /= n as f64;
        assert!((mean - 1.0).abs() < 1e-6, "mask mean {mean}");
    }

    #[test]
    fn non_positive_masked_intensities_are_rejected() {
        let vol = uniform([4, 4, 4], 0.0);
        assert!(matches!(
            estimate_bias(&vol, 1, None),
            Err(PreprocessError::NonPositiveIntensities { count: 64 })
        ));
    }

    #[test]
    fn order_above_three_is_rejected() {
        let vol = uniform([4, 4, 4], 1.0);
        assert!(matches!(
            estimate_bias(&vol, 4, None),
            Err(PreprocessError::InvalidOrder(4))
        ));
    }

    #[test]
    fn field_is_strictly_positive_everywhere() {
        let dims = [9, 9, 9];
        let mut data = Vec::new();
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    data.push(60.0 + (x * y) as f32 * 0.8 + z as f32);
                }
            }
        }
        let vol = Volume3D::new(dims, [2.0; 3], [-9.0; 3], data).unwrap();
        let field = estimate_bias(&vol, 3, None).unwrap();
        // Probe inside and far outside the fitted domain.
        for p in [[-9.0, -9.0, -9.0], [0.0, 0.0, 0.0], [400.0, -300.0, 250.0]] {
            assert!(field.evaluate(p) > 0.0);
        }
    }
}
