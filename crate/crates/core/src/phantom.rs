//! Synthetic brain-like volumes with class-dependent gray-matter atrophy.
//!
//! Each phantom is a set of concentric ellipsoids — white-matter core,
//! gray-matter shell, CSF layer, empty background — where the gray shell
//! thins with disease severity. Every voxel is evaluated analytically
//! (the pose jitter is applied to sample coordinates, not by resampling),
//! so noiseless phantoms contain exactly the four nominal intensities
//! and the ground-truth tissue map is one-hot.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::preprocess::{AffineTransform, TissueClass, TissueMap};
use crate::util::{derive_seed, derive_seed2, worker_pool};
use crate::volume::{
    write_nifti, ClassLabel, DatasetManifest, ManifestEntry, Provenance, Volume3D, VolumeError,
    CLASS_ORDER,
};

/// Nominal tissue intensities, ordered background < CSF < gray < white.
pub const INTENSITY_BACKGROUND: f32 = 0.0;
pub const INTENSITY_CSF: f32 = 30.0;
pub const INTENSITY_GRAY: f32 = 120.0;
pub const INTENSITY_WHITE: f32 = 200.0;

/// Full intensity span; the noise fraction in [`PhantomSpec`] scales this.
pub const INTENSITY_RANGE: f32 = 200.0;

// Ellipsoid semi-axes as fractions of the volume extent. The three
// fractions differ so the head is triaxial even in a cubic volume;
// a spherical phantom would make rotation recovery ill-posed. Shell
// thicknesses are fractions of the smallest extent.
const OUTER_FRACTIONS: [f64; 3] = [0.44, 0.38, 0.33];
const CSF_THICKNESS_FRACTION: f64 = 0.05;
const THICKNESS_FRACTION: f64 = 0.05;

/// Gray-shell thickness multiplier per class; strictly decreasing with
/// disease severity so gray-matter volume separates the classes.
pub fn class_factor(label: ClassLabel) -> f64 {
    match label {
        ClassLabel::Cn => 1.0,
        ClassLabel::Smci => 0.85,
        ClassLabel::Pmci => 0.7,
        ClassLabel::Ad => 0.55,
    }
}

/// Recipe for one phantom volume.
#[derive(Debug, Clone)]
pub struct PhantomSpec {
    pub class: ClassLabel,
    pub dims: [usize; 3],
    pub spacing: [f32; 3],
    /// Additive Gaussian noise sigma as a fraction of [`INTENSITY_RANGE`].
    pub noise_sigma: f32,
    /// Apply a small seeded rigid pose offset (<= 2 mm, <= 3 degrees).
    pub jitter: bool,
    pub seed: u64,
}

impl PhantomSpec {
    /// Test-scale phantom: 64^3 voxels at 1.5 mm with mild noise.
    pub fn new(class: ClassLabel, seed: u64) -> Self {
        PhantomSpec {
            class,
            dims: [64, 64, 64],
            spacing: [1.5, 1.5, 1.5],
            noise_sigma: 0.02,
            jitter: true,
            seed,
        }
    }

    /// Full-pipeline scale: 107^3 voxels covering the same 160 mm span.
    pub fn full_scale(class: ClassLabel, seed: u64) -> Self {
        PhantomSpec { dims: [107, 107, 107], ..PhantomSpec::new(class, seed) }
    }
}

/// Ellipsoid semi-axes (mm) for the three tissue boundaries of a spec:
/// outer CSF boundary, gray-shell outer boundary, white-core boundary.
fn semi_axes(spec: &PhantomSpec) -> ([f64; 3], [f64; 3], [f64; 3]) {
    let extent: Vec<f64> = (0..3)
        .map(|a| spec.dims[a] as f64 * f64::from(spec.spacing[a]))
        .collect();
    let min_extent = extent.iter().cloned().fold(f64::INFINITY, f64::min);
    let csf_thickness = CSF_THICKNESS_FRACTION * min_extent;
    let gray_thickness = class_factor(spec.class) * THICKNESS_FRACTION * min_extent;
    let mut outer = [0.0; 3];
    let mut gray = [0.0; 3];
    let mut white = [0.0; 3];
    for a in 0..3 {
        outer[a] = OUTER_FRACTIONS[a] * extent[a];
        gray[a] = outer[a] - csf_thickness;
        white[a] = gray[a] - gray_thickness;
    }
    (outer, gray, white)
}

/// Analytic gray-shell volume in mm^3 for a spec (ellipsoid difference).
pub fn analytic_gray_shell_volume(spec: &PhantomSpec) -> f64 {
    let (_, gray, white) = semi_axes(spec);
    let ell = |r: [f64; 3]| 4.0 / 3.0 * std::f64::consts::PI * r[0] * r[1] * r[2];
    ell(gray) - ell(white)
}

fn inside(p: [f64; 3], semi: [f64; 3]) -> bool {
    let mut s = 0.0;
    for a in 0..3 {
        let q = p[a] / semi[a];
        s += q * q;
    }
    s <= 1.0
}

/// Seeded standard-normal sampler (Box-Muller with a cached spare).
struct Gaussian {
    rng: ChaCha8Rng,
    spare: Option<f64>,
}

impl Gaussian {
    fn new(seed: u64) -> Self {
        Gaussian { rng: ChaCha8Rng::seed_from_u64(seed), spare: None }
    }

    fn next(&mut self) -> f64 {
        if let Some(v) = self.spare.take() {
            return v;
        }
        let u1: f64 = 1.0 - self.rng.random::<f64>(); // (0, 1]
        let u2: f64 = self.rng.random::<f64>();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(r * theta.sin());
        r * theta.cos()
    }
}

const TISSUE_IDENTITIES: [TissueClass; 4] = [
    TissueClass::Background,
    TissueClass::Csf,
    TissueClass::GrayMatter,
    TissueClass::WhiteMatter,
];

/// Generates one phantom plus its exact pre-noise tissue map.
///
/// Panics if the spec's dims or spacing are unusable or the noise
/// fraction is negative; these are caller contract violations rather
/// than data-dependent failures.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<(Volume3D, TissueMap), VolumeError> {
    assert!(
        spec.noise_sigma >= 0.0 && spec.noise_sigma.is_finite(),
        "noise sigma must be a nonnegative fraction"
    );
    let dims = spec.dims;
    let n = dims[0] * dims[1] * dims[2];
    let mut origin = [0.0f32; 3];
    for a in 0..3 {
        origin[a] = -((dims[a] as f32 - 1.0) * spec.spacing[a]) / 2.0;
    }
    let (outer, gray, white) = semi_axes(spec);

    // Pose jitter: evaluate the shape at T^-1(x) so the phantom appears
    // moved by T without any interpolation.
    let sample_map = if spec.jitter {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, 0xA1));
        let mut draw = |scale: f64| (rng.random::<f64>() * 2.0 - 1.0) * scale;
        let angles = [
            draw(3f64.to_radians()),
            draw(3f64.to_radians()),
            draw(3f64.to_radians()),
        ];
        let translation = [draw(2.0), draw(2.0), draw(2.0)];
        let pose = AffineTransform::rigid(angles, translation, [0.0; 3]);
        Some(pose.inverse().expect("rigid transforms are invertible"))
    } else {
        None
    };

    let mut data = vec![0.0f32; n];
    let mut posteriors = vec![0.0f32; n * 4];
    let mut idx = 0usize;
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let p = [
                    f64::from(origin[0]) + x as f64 * f64::from(spec.spacing[0]),
                    f64::from(origin[1]) + y as f64 * f64::from(spec.spacing[1]),
                    f64::from(origin[2]) + z as f64 * f64::from(spec.spacing[2]),
                ];
                let q = match &sample_map {
                    Some(t) => t.apply(p),
                    None => p,
                };
                let (value, component) = if inside(q, white) {
                    (INTENSITY_WHITE, 3)
                } else if inside(q, gray) {
                    (INTENSITY_GRAY, 2)
                } else if inside(q, outer) {
                    (INTENSITY_CSF, 1)
                } else {
                    (INTENSITY_BACKGROUND, 0)
                };
                data[idx] = value;
                posteriors[idx * 4 + component] = 1.0;
                idx += 1;
            }
        }
    }

    if spec.noise_sigma > 0.0 {
        let sigma = f64::from(spec.noise_sigma) * f64::from(INTENSITY_RANGE);
        let mut noise = Gaussian::new(derive_seed(spec.seed, 0xB2));
        for v in &mut data {
            *v = (f64::from(*v) + sigma * noise.next()) as f32;
        }
    }

    let volume = Volume3D::new(dims, spec.spacing, origin, data)?;
    let tissue = TissueMap::new(dims, spec.spacing, origin, TISSUE_IDENTITIES.to_vec(), posteriors)
        .expect("one-hot posteriors match the grid");
    Ok((volume, tissue))
}

/// Path of the ground-truth companion written next to a phantom image.
pub fn ground_truth_path(image: &Path) -> PathBuf {
    let stem = image.file_stem().and_then(|s| s.to_str()).unwrap_or("volume");
    image.with_file_name(format!("{stem}_gt.nii"))
}

/// Recipe for a labeled phantom dataset.
#[derive(Debug, Clone)]
pub struct DatasetSpec {
    /// Subjects per class, in [`CLASS_ORDER`] order (CN, pMCI, sMCI, AD).
    pub counts: [usize; 4],
    pub dims: [usize; 3],
    pub spacing: [f32; 3],
    pub noise_sigma: f32,
    pub jitter: bool,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn new(counts: [usize; 4], seed: u64) -> Self {
        DatasetSpec {
            counts,
            dims: [64, 64, 64],
            spacing: [1.5, 1.5, 1.5],
            noise_sigma: 0.02,
            jitter: true,
            seed,
        }
    }
}

/// Writes one volume per subject (plus a `_gt` label companion holding
/// the tissue-map argmax) into `out_dir`, along with `manifest.csv`.
///
/// Per-subject seeds derive from the master seed, so regenerating with
/// the same spec reproduces every file byte-for-byte.
pub fn generate_dataset(
    spec: &DatasetSpec,
    out_dir: &Path,
) -> Result<DatasetManifest, VolumeError> {
    std::fs::create_dir_all(out_dir)?;

    let mut jobs = Vec::new();
    for (class_idx, label) in CLASS_ORDER.iter().enumerate() {
        for i in 0..spec.counts[class_idx] {
            jobs.push((class_idx, *label, i));
        }
    }

    let entries: Vec<Result<ManifestEntry, VolumeError>> = worker_pool().install(|| {
        jobs.par_iter()
            .map(|&(class_idx, label, i)| {
                let phantom_spec = PhantomSpec {
                    class: label,
                    dims: spec.dims,
                    spacing: spec.spacing,
                    noise_sigma: spec.noise_sigma,
                    jitter: spec.jitter,
                    seed: derive_seed2(spec.seed, class_idx as u64, i as u64),
                };
                let (volume, tissue) = generate_phantom(&phantom_spec)?;

                let file_name = format!("{}_{:03}.nii", label.as_str(), i + 1);
                let image_path = out_dir.join(&file_name);
                write_nifti(&image_path, &volume)?;

                // Ground truth: component argmax as a label volume.
                let labels: Vec<f32> = (0..tissue.voxel_count())
                    .map(|v| tissue.argmax_component(v) as f32)
                    .collect();
                let gt = Volume3D::new(volume.dims(), volume.spacing(), volume.origin(), labels)?;
                write_nifti(&ground_truth_path(&image_path), &gt)?;

                Ok(ManifestEntry {
                    path: file_name,
                    label,
                    subject_id: format!("{}{:03}", label.as_str(), i + 1),
                    provenance: Provenance::Original,
                    ops: String::new(),
                })
            })
            .collect()
    });

    let manifest = DatasetManifest::new(entries.into_iter().collect::<Result<Vec<_>, _>>()?)?;
    manifest.write_csv(&out_dir.join("manifest.csv"))?;
    Ok(manifest)
}
