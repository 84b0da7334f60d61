//! Intensity-based tissue segmentation with a 1D Gaussian mixture fit by
//! expectation-maximization.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::volume::Volume3D;

use super::PreprocessError;

/// Relative variance floor: components are never allowed below
/// `1e-6 * range^2`, which keeps perfectly separable inputs from
/// collapsing to zero-variance deltas.
const VARIANCE_FLOOR_REL: f64 = 1e-6;

/// Convergence threshold on the change in mean log-likelihood per voxel.
const LL_TOLERANCE: f64 = 1e-6;

const MAX_EM_ITERATIONS: usize = 200;

/// Tissue identity of a mixture component.
///
/// Components are ranked by ascending mean intensity and named by the
/// fixed intensity ordering of the synthetic phantoms: background and
/// fluid darkest, then gray matter, then white matter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TissueClass {
    Background,
    Csf,
    GrayMatter,
    WhiteMatter,
    Skull,
    SoftTissue,
}

/// Identity assignment for each supported component count, darkest first.
fn identities_for(k: usize) -> Vec<TissueClass> {
    match k {
        2 => vec![TissueClass::Csf, TissueClass::WhiteMatter],
        3 => vec![TissueClass::Csf, TissueClass::GrayMatter, TissueClass::WhiteMatter],
        4 => vec![
            TissueClass::Background,
            TissueClass::Csf,
            TissueClass::GrayMatter,
            TissueClass::WhiteMatter,
        ],
        5 => vec![
            TissueClass::Background,
            TissueClass::Csf,
            TissueClass::GrayMatter,
            TissueClass::WhiteMatter,
            TissueClass::SoftTissue,
        ],
        _ => unreachable!("k validated before identity assignment"),
    }
}

/// Per-voxel class posteriors over `k` mixture components, plus the
/// tissue identity of each component.
#[derive(Debug, Clone)]
pub struct TissueMap {
    dims: [usize; 3],
    spacing: [f32; 3],
    origin: [f32; 3],
    k: usize,
    identities: Vec<TissueClass>,
    /// Voxel-major, component-fastest: `posteriors[v * k + c]`.
    posteriors: Vec<f32>,
}

impl TissueMap {
    /// Builds a map from raw posteriors; rows must be normalized.
    pub fn new(
        dims: [usize; 3],
        spacing: [f32; 3],
        origin: [f32; 3],
        identities: Vec<TissueClass>,
        posteriors: Vec<f32>,
    ) -> Result<Self, PreprocessError> {
        let k = identities.len();
        let n = dims[0] * dims[1] * dims[2];
        if k == 0 || posteriors.len() != n * k {
            return Err(PreprocessError::DimMismatch { left: dims, right: dims });
        }
        Ok(TissueMap { dims, spacing, origin, k, identities, posteriors })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn identities(&self) -> &[TissueClass] {
        &self.identities
    }

    pub fn voxel_count(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    /// Posterior of component `c` at flat voxel index `v`.
    #[inline]
    pub fn posterior(&self, v: usize, c: usize) -> f32 {
        self.posteriors[v * self.k + c]
    }

    /// Component with the largest posterior at flat voxel index `v`.
    pub fn argmax_component(&self, v: usize) -> usize {
        let row = &self.posteriors[v * self.k..(v + 1) * self.k];
        let mut best = 0;
        for c in 1..self.k {
            if row[c] > row[best] {
                best = c;
            }
        }
        best
    }

    /// Summed posterior of all components with the given identity.
    pub fn class_posterior(&self, v: usize, class: TissueClass) -> f32 {
        let mut total = 0.0;
        for (c, id) in self.identities.iter().enumerate() {
            if *id == class {
                total += self.posterior(v, c);
            }
        }
        total
    }
}

/// Mixture parameters and the log-likelihood trace of an EM fit,
/// components sorted by ascending mean.
#[derive(Debug, Clone)]
pub struct GmmFit {
    pub means: Vec<f64>,
    pub variances: Vec<f64>,
    pub weights: Vec<f64>,
    /// Mean log-likelihood per voxel after each EM iteration;
    /// nondecreasing by construction of the algorithm.
    pub log_likelihood: Vec<f64>,
}

/// k-means++ seeding on scalar intensities.
fn kmeanspp_init(values: &[f64], k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = values.len();
    let mut centers = Vec::with_capacity(k);
    centers.push(values[rng.random_range(0..n)]);
    let mut d2: Vec<f64> = values
        .iter()
        .map(|v| (v - centers[0]) * (v - centers[0]))
        .collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total <= 0.0 {
            // All mass on existing centers; any point works.
            values[rng.random_range(0..n)]
        } else {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                target -= d;
                if target <= 0.0 {
                    chosen = i;
                    break;
                }
            }
            values[chosen]
        };
        centers.push(next);
        for (i, v) in values.iter().enumerate() {
            let cand = (v - next) * (v - next);
            if cand < d2[i] {
                d2[i] = cand;
            }
        }
    }
    centers
}

/// Fits a `k`-component Gaussian mixture to the volume's intensities and
/// returns per-voxel posteriors with components relabeled by ascending
/// mean.
///
/// Initialization is k-means++ from the seed; EM runs until the mean
/// log-likelihood changes by less than `1e-6` or 200 iterations. Any
/// component collapsing onto a single value is held at a small variance
/// floor rather than failing.
pub fn segment_tissues(
    vol: &Volume3D,
    k: usize,
    seed: u64,
) -> Result<(TissueMap, GmmFit), PreprocessError> {
    if !(2..=5).contains(&k) {
        return Err(PreprocessError::InvalidK(k));
    }
    let values: Vec<f64> = vol.data().iter().map(|&v| f64::from(v)).collect();
    let n = values.len();
    let (min, max) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = max - min;
    if range <= 0.0 {
        return Err(PreprocessError::DegenerateInput(
            "constant volume has no intensity structure to segment".to_string(),
        ));
    }
    let var_floor = VARIANCE_FLOOR_REL * range * range;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut means = kmeanspp_init(&values, k, &mut rng);
    means.sort_by(f64::total_cmp);
    let mut variances = vec![(range / (2.0 * k as f64)).powi(2).max(var_floor); k];
    let mut weights = vec![1.0 / k as f64; k];

    let mut resp = vec![0.0f64; n * k];
    let mut ll_history = Vec::new();
    let mut prev_ll = f64::NEG_INFINITY;

    for _iter in 0..MAX_EM_ITERATIONS {
        // E-step in the log domain.
        let mut ll = 0.0f64;
        let log_norm: Vec<f64> = (0..k)
            .map(|c| weights[c].ln() - 0.5 * (2.0 * std::f64::consts::PI * variances[c]).ln())
            .collect();
        for (i, &x) in values.iter().enumerate() {
            let row = &mut resp[i * k..(i + 1) * k];
            let mut max_lp = f64::NEG_INFINITY;
            for c in 0..k {
                let d = x - means[c];
                row[c] = log_norm[c] - d * d / (2.0 * variances[c]);
                if row[c] > max_lp {
                    max_lp = row[c];
                }
            }
            let mut total = 0.0;
            for r in row.iter_mut() {
                *r = (*r - max_lp).exp();
                total += *r;
            }
            for r in row.iter_mut() {
                *r /= total;
            }
            ll += max_lp + total.ln();
        }
        ll /= n as f64;
        ll_history.push(ll);

        // M-step.
        for c in 0..k {
            let mut nk = 0.0f64;
            let mut sum = 0.0f64;
            for i in 0..n {
                let r = resp[i * k + c];
                nk += r;
                sum += r * values[i];
            }
            let nk_safe = nk.max(1e-12);
            let mu = sum / nk_safe;
            let mut var = 0.0f64;
            for i in 0..n {
                let d = values[i] - mu;
                var += resp[i * k + c] * d * d;
            }
            means[c] = mu;
            variances[c] = (var / nk_safe).max(var_floor);
            weights[c] = (nk / n as f64).max(1e-12);
        }
        let wsum: f64 = weights.iter().sum();
        for w in &mut weights {
            *w /= wsum;
        }

        if (ll - prev_ll).abs() < LL_TOLERANCE {
            break;
        }
        prev_ll = ll;
    }

    // Relabel components by ascending mean.
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| means[a].total_cmp(&means[b]));
    let sorted = |src: &[f64]| order.iter().map(|&c| src[c]).collect::<Vec<f64>>();
    let fit = GmmFit {
        means: sorted(&means),
        variances: sorted(&variances),
        weights: sorted(&weights),
        log_likelihood: ll_history,
    };

    let mut posteriors = vec![0.0f32; n * k];
    for i in 0..n {
        for (new_c, &old_c) in order.iter().enumerate() {
            posteriors[i * k + new_c] = resp[i * k + old_c] as f32;
        }
    }
    let map = TissueMap::new(
        vol.dims(),
        vol.spacing(),
        vol.origin(),
        identities_for(k),
        posteriors,
    )?;
    Ok((map, fit))
}

/// Thresholds the gray-matter posterior into a binary mask volume
/// (1 inside, 0 outside).
pub fn gray_matter_mask(tissue: &TissueMap, threshold: f32) -> Volume3D {
    let n = tissue.voxel_count();
    let mut data = Vec::with_capacity(n);
    for v in 0..n {
        let p = tissue.class_posterior(v, TissueClass::GrayMatter);
        data.push(if p >= threshold { 1.0 } else { 0.0 });
    }
    Volume3D::new(tissue.dims, tissue.spacing, tissue.origin, data)
        .expect("mask values are finite by construction")
}

/// Voxelwise product of a volume and a mask on the same grid.
pub fn apply_mask(vol: &Volume3D, mask: &Volume3D) -> Result<Volume3D, PreprocessError> {
    if vol.dims() != mask.dims() {
        return Err(PreprocessError::DimMismatch { left: vol.dims(), right: mask.dims() });
    }
    let data: Vec<f32> = vol
        .data()
        .iter()
        .zip(mask.data())
        .map(|(&v, &m)| v * m)
        .collect();
    Volume3D::new(vol.dims(), vol.spacing(), vol.origin(), data).map_err(|_| {
        PreprocessError::DegenerateInput("masking produced non-finite values".into())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::derive_seed;

    /// Seeded normal sample via Box-Muller.
    fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
        let u1: f64 = 1.0 - rng.random::<f64>();
        let u2: f64 = rng.random::<f64>();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    fn two_class_volume(n_side: usize, seed: u64) -> (Volume3D, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = n_side * n_side * n_side;
        let mut data = Vec::with_capacity(n);
        let mut truth = Vec::with_capacity(n);
        for i in 0..n {
            let class = (i % 2 == 0) as usize; // deterministic half/half
            let mean = if class == 1 { 200.0 } else { 30.0 };
            data.push((mean + 5.0 * gaussian(&mut rng)) as f32);
            truth.push(class);
        }
        (
            Volume3D::new([n_side, n_side, n_side], [1.0; 3], [0.0; 3], data).unwrap(),
            truth,
        )
    }

    #[test]
    fn separable_two_class_volume_matches_bayes_labels() {
        let (vol, _) = two_class_volume(16, 11);
        let (map, fit) = segment_tissues(&vol, 2, 99).unwrap();

        // Bayes-optimal labels from the true generative parameters:
        // equal priors and variances put the boundary at the midpoint.
        let mut agree = 0usize;
        for (v, &x) in vol.data().iter().enumerate() {
            let oracle = usize::from(f64::from(x) > 115.0);
            if map.argmax_component(v) == oracle {
                agree += 1;
            }
        }
        let frac = agree as f64 / vol.voxel_count() as f64;
        assert!(frac >= 0.99, "agreement with Bayes labels: {frac:.4}");
        assert!((fit.means[0] - 30.0).abs() < 2.0);
        assert!((fit.means[1] - 200.0).abs() < 2.0);
    }

    #[test]
    fn log_likelihood_is_nondecreasing() {
        for trial in 0..5 {
            let (vol, _) = two_class_volume(12, derive_seed(7, trial));
            let (_, fit) = segment_tissues(&vol, 3, derive_seed(8, trial)).unwrap();
            for w in fit.log_likelihood.windows(2) {
                assert!(
                    w[1] >= w[0] - 1e-9 * w[0].abs().max(1.0),
                    "log-likelihood dropped: {} -> {}",
                    w[0],
                    w[1]
                );
            }
        }
    }

    #[test]
    fn constant_volume_is_degenerate() {
        let vol = Volume3D::filled([8, 8, 8], [1.0; 3], [0.0; 3], 55.0).unwrap();
        assert!(matches!(
            segment_tissues(&vol, 2, 0),
            Err(PreprocessError::DegenerateInput(_))
        ));
    }

    #[test]
    fn k_outside_supported_range_is_rejected() {
        let (vol, _) = two_class_volume(6, 3);
        assert!(matches!(segment_tissues(&vol, 1, 0), Err(PreprocessError::InvalidK(1))));
        assert!(matches!(segment_tissues(&vol, 6, 0), Err(PreprocessError::InvalidK(6))));
    }

    #[test]
    fn perfectly_bimodal_volume_recovers_exact_means() {
        let n_side = 8;
        let n = n_side * n_side * n_side;
        let data: Vec<f32> = (0..n).map(|i| if i % 2 == 0 { 0.0 } else { 100.0 }).collect();
        let vol = Volume3D::new([n_side, n_side, n_side], [1.0; 3], [0.0; 3], data).unwrap();
        let (map, fit) = segment_tissues(&vol, 2, 5).unwrap();
        assert!((fit.means[0] - 0.0).abs() < 1e-3, "low mean {}", fit.means[0]);
        assert!((fit.means[1] - 100.0).abs() < 1e-3, "high mean {}", fit.means[1]);
        // Posteriors are effectively one-hot.
        for v in 0..vol.voxel_count() {
            let c = map.argmax_component(v);
            assert!(map.posterior(v, c) > 0.999);
        }
    }

    #[test]
    fn posterior_rows_sum_to_one() {
        let (vol, _) = two_class_volume(10, 21);
        let (map, _) = segment_tissues(&vol, 4, 1).unwrap();
        for v in 0..map.voxel_count() {
            let total: f32 = (0..map.k()).map(|c| map.posterior(v, c)).sum();
            assert!((total - 1.0).abs() < 1e-5, "voxel {v} sums to {total}");
        }
    }

    #[test]
    fn identities_follow_ascending_intensity() {
        let (vol, _) = two_class_volume(8, 2);
        let (map, _) = segment_tissues(&vol, 3, 4).unwrap();
        assert_eq!(
            map.identities(),
            &[TissueClass::Csf, TissueClass::GrayMatter, TissueClass::WhiteMatter]
        );
    }

    #[test]
    fn threshold_edges_give_full_or_empty_masks() {
        let (vol, _) = two_class_volume(6, 9);
        let (map, _) = segment_tissues(&vol, 3, 9).unwrap();
        let full = gray_matter_mask(&map, 0.0);
        assert!(full.data().iter().all(|&v| v == 1.0));
        let empty = gray_matter_mask(&map, 1.1);
        assert!(empty.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn all_ones_mask_is_identity_and_dims_must_match() {
        let (vol, _) = two_class_volume(6, 13);
        let ones = Volume3D::filled(vol.dims(), [1.0; 3], [0.0; 3], 1.0).unwrap();
        let out = apply_mask(&vol, &ones).unwrap();
        assert_eq!(out.data(), vol.data());

        let small = Volume3D::filled([2, 2, 2], [1.0; 3], [0.0; 3], 1.0).unwrap();
        assert!(matches!(
            apply_mask(&vol, &small),
            Err(PreprocessError::DimMismatch { .. })
        ));
    }

    #[test]
    fn segmentation_is_deterministic_for_a_fixed_seed() {
        let (vol, _) = two_class_volume(8, 17);
        let (a, _) = segment_tissues(&vol, 3, 42).unwrap();
        let (b, _) = segment_tissues(&vol, 3, 42).unwrap();
        assert_eq!(a.posteriors, b.posteriors);
    }

    #[test]
    fn gray_mask_matches_phantom_ground_truth() {
        use crate::phantom::{generate_phantom, PhantomSpec};
        use crate::volume::ClassLabel;

        let spec = PhantomSpec {
            jitter: false,
            ..PhantomSpec::new(ClassLabel::Cn, 31)
        };
        let (vol, truth) = generate_phantom(&spec).unwrap();
        let (tissue, _) = segment_tissues(&vol, 4, 31).unwrap();
        let mask = gray_matter_mask(&tissue, 0.5);

        // Ground-truth shell: voxels whose one-hot component is gray.
        let gray_component = truth
            .identities()
            .iter()
            .position(|&c| c == TissueClass::GrayMatter)
            .unwrap();
        let mut overlap = 0usize;
        let mut mask_count = 0usize;
        let mut truth_count = 0usize;
        for v in 0..vol.voxel_count() {
            let in_mask = mask.data()[v] == 1.0;
            let in_truth = truth.posterior(v, gray_component) == 1.0;
            mask_count += usize::from(in_mask);
            truth_count += usize::from(in_truth);
            overlap += usize::from(in_mask && in_truth);
        }
        let dice = 2.0 * overlap as f64 / (mask_count + truth_count) as f64;
        assert!(dice >= 0.95, "gray-matter Dice {dice}");
    }
}
