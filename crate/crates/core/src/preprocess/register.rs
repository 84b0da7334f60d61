//! Intensity-based rigid and affine registration.
//!
//! Minimizes the mean squared intensity difference over the fixed grid
//! with steepest descent and a backtracking line search, run through a
//! coarse-to-fine resolution pyramid. Rotations (and matrix entries) are
//! rescaled so one optimization step moves boundaries by comparable
//! millimeter amounts along every parameter.

use crate::volume::{resample, Volume3D};

use super::affine::{euler_matrix, AffineTransform};
use super::smooth::smooth_gaussian;
use super::PreprocessError;

/// Transform family to fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegistrationMode {
    /// Three rotations plus three translations.
    Rigid,
    /// Full 3x3 matrix plus three translations.
    Affine,
}

/// Optimization settings; the defaults are what the pipeline uses.
#[derive(Debug, Clone)]
pub struct RegistrationConfig {
    /// Pyramid depth; level `i` downsamples by `2^(levels-1-i)`.
    pub levels: usize,
    /// Iteration cap per pyramid level.
    pub max_iterations: usize,
    /// Relative cost-decrease threshold that ends a level.
    pub tolerance: f64,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        RegistrationConfig { levels: 3, max_iterations: 200, tolerance: 1e-6 }
    }
}

/// Fitted transform plus optimization diagnostics.
#[derive(Debug, Clone)]
pub struct RegistrationResult {
    /// Maps fixed-grid world points into the moving volume's space.
    pub transform: AffineTransform,
    /// False when some level hit its iteration cap while the cost was
    /// still falling faster than the tolerance; a warning, not an error.
    pub converged: bool,
    /// Accepted cost values per pyramid level; nonincreasing within each
    /// level by construction of the line search.
    pub cost_history: Vec<Vec<f64>>,
}

fn variance(vol: &Volume3D) -> f64 {
    let n = vol.voxel_count() as f64;
    let mean = vol.data().iter().map(|&v| f64::from(v)).sum::<f64>() / n;
    vol.data()
        .iter()
        .map(|&v| (f64::from(v) - mean).powi(2))
        .sum::<f64>()
        / n
}

/// Central-difference gradient volumes in intensity-per-millimeter units.
fn gradient_volumes(vol: &Volume3D) -> [Volume3D; 3] {
    let dims = vol.dims();
    let spacing = vol.spacing();
    let mut out = Vec::with_capacity(3);
    for axis in 0..3 {
        let mut data = vec![0.0f32; vol.voxel_count()];
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    let mut lo = [x, y, z];
                    let mut hi = [x, y, z];
                    let i = [x, y, z][axis];
                    lo[axis] = i.saturating_sub(1);
                    hi[axis] = (i + 1).min(dims[axis] - 1);
                    let span = (hi[axis] - lo[axis]) as f32 * spacing[axis];
                    let d = if span > 0.0 {
                        (vol.at(hi[0], hi[1], hi[2]) - vol.at(lo[0], lo[1], lo[2])) / span
                    } else {
                        0.0
                    };
                    data[vol.index(x, y, z)] = d;
                }
            }
        }
        out.push(
            Volume3D::new(dims, spacing, vol.origin(), data)
                .expect("gradient volume matches source grid"),
        );
    }
    let gz = out.pop().unwrap();
    let gy = out.pop().unwrap();
    let gx = out.pop().unwrap();
    [gx, gy, gz]
}

/// Smooth-then-subsample for one pyramid level. The result's spacing is
/// adjusted so that voxel `i` sits exactly where its sample was taken,
/// keeping coarse-level geometry faithful to the original.
fn pyramid_level(vol: &Volume3D, factor: usize) -> Result<Volume3D, PreprocessError> {
    if factor <= 1 {
        return Ok(vol.clone());
    }
    let dims = vol.dims();
    let spacing = vol.spacing();
    let max_spacing = spacing.iter().cloned().fold(0.0f32, f32::max);
    let smoothed = smooth_gaussian(vol, 1.2 * factor as f32 * max_spacing)?;
    let new_dims = [
        (dims[0] / factor).max(2),
        (dims[1] / factor).max(2),
        (dims[2] / factor).max(2),
    ];
    let coarse = resample(&smoothed, new_dims)
        .expect("pyramid dims are positive");
    let mut corrected_spacing = [0.0f32; 3];
    for a in 0..3 {
        corrected_spacing[a] = if new_dims[a] > 1 {
            spacing[a] * (dims[a] as f32 - 1.0) / (new_dims[a] as f32 - 1.0)
        } else {
            spacing[a]
        };
    }
    Ok(Volume3D::new(new_dims, corrected_spacing, vol.origin(), coarse.data().to_vec())
        .expect("corrected pyramid grid is valid"))
}

fn param_count(mode: RegistrationMode) -> usize {
    match mode {
        RegistrationMode::Rigid => 6,
        RegistrationMode::Affine => 12,
    }
}

fn initial_params(mode: RegistrationMode) -> Vec<f64> {
    match mode {
        RegistrationMode::Rigid => vec![0.0; 6],
        RegistrationMode::Affine => {
            let mut p = vec![0.0; 12];
            p[0] = 1.0; // A row-major identity
            p[4] = 1.0;
            p[8] = 1.0;
            p
        }
    }
}

fn transform_from_params(
    mode: RegistrationMode,
    p: &[f64],
    center: [f64; 3],
) -> AffineTransform {
    let (matrix, t) = match mode {
        RegistrationMode::Rigid => {
            (euler_matrix([p[0], p[1], p[2]]), [p[3], p[4], p[5]])
        }
        RegistrationMode::Affine => (
            [
                [p[0], p[1], p[2]],
                [p[3], p[4], p[5]],
                [p[6], p[7], p[8]],
            ],
            [p[9], p[10], p[11]],
        ),
    };
    // T(x) = M (x - c) + c + t, baked to matrix + translation form.
    let mc = [
        matrix[0][0] * center[0] + matrix[0][1] * center[1] + matrix[0][2] * center[2],
        matrix[1][0] * center[0] + matrix[1][1] * center[1] + matrix[1][2] * center[2],
        matrix[2][0] * center[0] + matrix[2][1] * center[1] + matrix[2][2] * center[2],
    ];
    AffineTransform {
        matrix,
        translation: [
            center[0] + t[0] - mc[0],
            center[1] + t[1] - mc[1],
            center[2] + t[2] - mc[2],
        ],
    }
}

/// Derivative of the Euler rotation matrix with respect to each angle.
fn euler_derivatives(angles: [f64; 3]) -> [[[f64; 3]; 3]; 3] {
    let (sx, cx) = angles[0].sin_cos();
    let (sy, cy) = angles[1].sin_cos();
    let (sz, cz) = angles[2].sin_cos();
    let rx = [[1.0, 0.0, 0.0], [0.0, cx, -sx], [0.0, sx, cx]];
    let ry = [[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]];
    let rz = [[cz, -sz, 0.0], [sz, cz, 0.0], [0.0, 0.0, 1.0]];
    let dx = [[0.0, 0.0, 0.0], [0.0, -sx, -cx], [0.0, cx, -sx]];
    let dy = [[-sy, 0.0, cy], [0.0, 0.0, 0.0], [-cy, 0.0, -sy]];
    let dz = [[-sz, -cz, 0.0], [cz, -sz, 0.0], [0.0, 0.0, 0.0]];
    let mul = |a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]| {
        let mut m = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                m[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
            }
        }
        m
    };
    [
        mul(&mul(&rz, &ry), &dx), // d/d rx
        mul(&mul(&rz, &dy), &rx), // d/d ry
        mul(&mul(&dz, &ry), &rx), // d/d rz
    ]
}

struct LevelProblem<'a> {
    mode: RegistrationMode,
    center: [f64; 3],
    moving: &'a Volume3D,
    fixed: &'a Volume3D,
    grads: &'a [Volume3D; 3],
}

impl LevelProblem<'_> {
    fn cost(&self, p: &[f64]) -> f64 {
        let t = transform_from_params(self.mode, p, self.center);
        let dims = self.fixed.dims();
        let mut acc = 0.0f64;
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    let q = t.apply(self.fixed.voxel_center_mm(x, y, z));
                    let r = self.moving.sample_trilinear_mm(q)
                        - f64::from(self.fixed.at(x, y, z));
                    acc += r * r;
                }
            }
        }
        acc / self.fixed.voxel_count() as f64
    }

    fn cost_and_grad(&self, p: &[f64]) -> (f64, Vec<f64>) {
        let t = transform_from_params(self.mode, p, self.center);
        let n_params = param_count(self.mode);
        let deriv = match self.mode {
            RegistrationMode::Rigid => Some(euler_derivatives([p[0], p[1], p[2]])),
            RegistrationMode::Affine => None,
        };
        let dims = self.fixed.dims();
        let mut cost = 0.0f64;
        let mut grad = vec![0.0f64; n_params];
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    let xc = self.fixed.voxel_center_mm(x, y, z);
                    let q = t.apply(xc);
                    let m = self.moving.sample_trilinear_mm(q);
                    let r = m - f64::from(self.fixed.at(x, y, z));
                    cost += r * r;
                    if r == 0.0 {
                        continue;
                    }
                    let g = [
                        self.grads[0].sample_trilinear_mm(q),
                        self.grads[1].sample_trilinear_mm(q),
                        self.grads[2].sample_trilinear_mm(q),
                    ];
                    let rel = [
                        xc[0] - self.center[0],
                        xc[1] - self.center[1],
                        xc[2] - self.center[2],
                    ];
                    match self.mode {
                        RegistrationMode::Rigid => {
                            let deriv = deriv.as_ref().unwrap();
                            for a in 0..3 {
                                let d = &deriv[a];
                                let dq = [
                                    d[0][0] * rel[0] + d[0][1] * rel[1] + d[0][2] * rel[2],
                                    d[1][0] * rel[0] + d[1][1] * rel[1] + d[1][2] * rel[2],
                                    d[2][0] * rel[0] + d[2][1] * rel[1] + d[2][2] * rel[2],
                                ];
                                grad[a] += 2.0 * r * (g[0] * dq[0] + g[1] * dq[1] + g[2] * dq[2]);
                            }
                            for a in 0..3 {
                                grad[3 + a] += 2.0 * r * g[a];
                            }
                        }
                        RegistrationMode::Affine => {
                            for i in 0..3 {
                                for j in 0..3 {
                                    grad[3 * i + j] += 2.0 * r * g[i] * rel[j];
                                }
                            }
                            for a in 0..3 {
                                grad[9 + a] += 2.0 * r * g[a];
                            }
                        }
                    }
                }
            }
        }
        let n = self.fixed.voxel_count() as f64;
        cost /= n;
        for g in &mut grad {
            *g /= n;
        }
        (cost, grad)
    }
}

/// Registers `moving` onto `fixed`, returning the transform that maps
/// fixed-grid points into the moving volume (ready for
/// [`super::apply_transform`]).
pub fn register(
    moving: &Volume3D,
    fixed: &Volume3D,
    mode: RegistrationMode,
    config: &RegistrationConfig,
) -> Result<RegistrationResult, PreprocessError> {
    if variance(moving) == 0.0 {
        return Err(PreprocessError::DegenerateInput(
            "moving volume is constant".to_string(),
        ));
    }
    if variance(fixed) == 0.0 {
        return Err(PreprocessError::DegenerateInput(
            "fixed volume is constant".to_string(),
        ));
    }
    let levels = config.levels.max(1);

    // Rotation center: the fixed volume's physical center. Constant
    // across pyramid levels because coarse grids keep the same span.
    let center = {
        let d = fixed.dims();
        let lo = fixed.voxel_center_mm(0, 0, 0);
        let hi = fixed.voxel_center_mm(d[0] - 1, d[1] - 1, d[2] - 1);
        [(lo[0] + hi[0]) / 2.0, (lo[1] + hi[1]) / 2.0, (lo[2] + hi[2]) / 2.0]
    };
    // Lever arm converting rotations / matrix entries to boundary motion.
    let r_ref = {
        let e = fixed.extent_mm();
        0.5 * (e[0] * e[0] + e[1] * e[1] + e[2] * e[2]).sqrt()
    };
    let n_params = param_count(mode);
    let scales: Vec<f64> = (0..n_params)
        .map(|i| {
            let is_translation = i >= n_params - 3;
            if is_translation {
                1.0
            } else {
                1.0 / r_ref
            }
        })
        .collect();

    let mut p = initial_params(mode);
    let mut cost_history = Vec::with_capacity(levels);
    let mut converged = true;

    for level in 0..levels {
        let factor = 1usize << (levels - 1 - level);
        let moving_l = pyramid_level(moving, factor)?;
        let fixed_l = pyramid_level(fixed, factor)?;
        let grads = gradient_volumes(&moving_l);
        let problem = LevelProblem {
            mode,
            center,
            moving: &moving_l,
            fixed: &fixed_l,
            grads: &grads,
        };

        let mut history = Vec::new();
        let mut cost = problem.cost(&p);
        history.push(cost);
        let mut step = 1.0f64; // in scaled units, roughly mm of boundary motion
        let mut level_converged = false;

        for _iter in 0..config.max_iterations {
            let (c0, grad) = problem.cost_and_grad(&p);
            // Direction: negative gradient in the scaled parameterization.
            let mut dir: Vec<f64> = grad
                .iter()
                .zip(&scales)
                .map(|(g, s)| -g * s * s)
                .collect();
            let dir_norm = dir
                .iter()
                .zip(&scales)
                .map(|(d, s)| (d / s).powi(2))
                .sum::<f64>()
                .sqrt();
            if dir_norm < 1e-14 {
                level_converged = true;
                break;
            }
            for d in &mut dir {
                *d /= dir_norm;
            }
            // Directional derivative along the normalized direction.
            let slope: f64 = grad.iter().zip(&dir).map(|(g, d)| g * d).sum();

            let mut alpha = step;
            let mut accepted = false;
            for _ in 0..30 {
                let trial: Vec<f64> =
                    p.iter().zip(&dir).map(|(v, d)| v + alpha * d).collect();
                let c_try = problem.cost(&trial);
                if c_try <= c0 + 1e-4 * alpha * slope {
                    p = trial;
                    cost = c_try;
                    step = (alpha * 2.0).min(4.0 * r_ref);
                    accepted = true;
                    break;
                }
                alpha *= 0.5;
            }
            if !accepted {
                level_converged = true;
                break;
            }
            let prev = *history.last().unwrap();
            history.push(cost);
            if prev - cost <= config.tolerance * prev.max(1e-30) {
                level_converged = true;
                break;
            }
        }
        if !level_converged {
            converged = false;
        }
        cost_history.push(history);
    }

    Ok(RegistrationResult {
        transform: transform_from_params(mode, &p, center),
        converged,
        cost_history,
    })
}
