//! Staged experiment runner: a config in, a metrics report out.
//!
//! A run directory accumulates one artifact per stage — phantom cohort,
//! preprocessed slice stacks, the split plan, model checkpoints, ROC
//! curves, and finally `report.json`. Each stage is skipped when its
//! artifact already exists, so an interrupted run resumes where it
//! stopped, and a finished run is fully deterministic: rerunning the
//! same config produces a byte-identical report.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::augment_to_target;
use crate::eval::{
    auc, confusion, emit_roc, macro_average, one_vs_rest, roc_curve, ConfusionCounts, RocCurve,
    RocFormat,
};
use crate::models::{build, load_checkpoint, save_checkpoint, ModelKind, NetworkSpec, TrainedModel};
use crate::nn::LayerSpec;
use crate::phantom::{generate_dataset, generate_phantom, DatasetSpec, PhantomSpec};
use crate::pipeline::ensemble::majority_vote;
use crate::pipeline::split::{kfold, split_dataset, FoldPlan, SplitPlan};
use crate::pipeline::train::{predict, train, Hyperparams, Prediction, SampleSet, TrainHistory};
use crate::pipeline::{staged, PipelineError};
use crate::preprocess::normalize_to_template;
use crate::util::{derive_seed, derive_seed2, fnv1a64, worker_pool};
use crate::volume::{
    extract_slices, read_nifti, slice_stack_from_volume, slice_stack_to_volume, write_nifti,
    ClassLabel, DatasetManifest, ManifestEntry, Provenance, SliceAxis, SliceStack, Volume3D,
};

/// Classification task an experiment runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    AdVsCn,
    PmciVsSmci,
    FourClass,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::AdVsCn, Task::PmciVsSmci, Task::FourClass];

    /// Classes the task discriminates, in canonical class order. Class
    /// indices used by the networks are positions in this slice.
    pub fn classes(self) -> &'static [ClassLabel] {
        match self {
            Task::AdVsCn => &[ClassLabel::Cn, ClassLabel::Ad],
            Task::PmciVsSmci => &[ClassLabel::Pmci, ClassLabel::Smci],
            Task::FourClass => &[
                ClassLabel::Cn,
                ClassLabel::Pmci,
                ClassLabel::Smci,
                ClassLabel::Ad,
            ],
        }
    }

    /// The class treated as "positive" in binary metrics and ROC curves.
    pub fn positive(self) -> Option<ClassLabel> {
        match self {
            Task::AdVsCn => Some(ClassLabel::Ad),
            Task::PmciVsSmci => Some(ClassLabel::Pmci),
            Task::FourClass => None,
        }
    }

    /// Position of the positive class within [`Task::classes`].
    fn positive_position(self) -> Option<usize> {
        let positive = self.positive()?;
        self.classes().iter().position(|&c| c == positive)
    }

    pub fn num_classes(self) -> usize {
        self.classes().len()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Task::AdVsCn => "ad_vs_cn",
            Task::PmciVsSmci => "pmci_vs_smci",
            Task::FourClass => "four_class",
        }
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Task::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| PipelineError::InvalidConfig(format!("unknown task `{s}`")))
    }
}

/// Everything a run needs, with defaults matching the reference study
/// scaled down to synthetic data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: Task,
    /// Committee members, trained independently and ensembled by
    /// majority vote. Binary tasks require an odd count.
    pub models: Vec<ModelKind>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Overrides every dropout rate in the architectures when set.
    pub dropout: Option<f32>,
    pub width_multiplier: f64,
    /// Network input as [height, width] for all models except AlexNet.
    pub input_size: [usize; 2],
    /// AlexNet needs at least 96x96 to survive its stride-4 stem.
    pub alexnet_input_size: [usize; 2],
    pub subjects_per_class: usize,
    pub phantom_dims: [usize; 3],
    pub phantom_spacing: [f32; 3],
    /// Additive noise sigma as a fraction of the phantom intensity range.
    pub noise_sigma: f32,
    /// Random rigid pose offset per subject (<= 2 mm, <= 3 degrees).
    pub jitter: bool,
    /// Training-set size multiplier applied through augmentation; every
    /// class is topped up to `ceil(largest class count * factor)`.
    pub augment_factor: f64,
    /// `None` runs a 60/20/20 subject split; `Some(k)` runs k-fold
    /// cross-validation with predictions pooled over the folds.
    pub folds: Option<usize>,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            task: Task::AdVsCn,
            models: vec![ModelKind::Vgg16, ModelKind::Alexnet, ModelKind::CustomCnn],
            epochs: 30,
            batch_size: 32,
            learning_rate: 1e-3,
            dropout: None,
            width_multiplier: 0.125,
            input_size: [44, 52],
            alexnet_input_size: [176, 208],
            subjects_per_class: 40,
            phantom_dims: [64, 64, 64],
            phantom_spacing: [1.5, 1.5, 1.5],
            noise_sigma: 0.02,
            jitter: true,
            augment_factor: 1.5,
            folds: None,
            seed: 42,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let fail = |msg: String| Err(PipelineError::InvalidConfig(msg));
        if self.models.is_empty() {
            return fail("at least one model is required".into());
        }
        if self.task.positive().is_some() && self.models.len() % 2 == 0 {
            return fail(format!(
                "binary tasks need an odd committee, got {} models",
                self.models.len()
            ));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = self.models.iter().find(|m| !seen.insert(**m)) {
            return fail(format!("model {dup} listed twice"));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return fail(format!("learning_rate {} is not usable", self.learning_rate));
        }
        if !(self.augment_factor.is_finite() && self.augment_factor >= 1.0) {
            return fail(format!(
                "augment_factor must be >= 1, got {}",
                self.augment_factor
            ));
        }
        if self.subjects_per_class == 0 {
            return fail("subjects_per_class must be at least 1".into());
        }
        let total = self.subjects_per_class * self.task.num_classes();
        match self.folds {
            None => {
                if total < 5 {
                    return fail(format!(
                        "{total} subjects cannot fill a 60/20/20 split; need at least 5"
                    ));
                }
            }
            Some(k) => {
                if k < 2 || total < k {
                    return Err(PipelineError::TooFewSubjects { subjects: total, k });
                }
            }
        }
        if self.phantom_dims.iter().any(|&d| d < 16) {
            return fail(format!(
                "phantom_dims {:?} too small; each axis needs >= 16 voxels",
                self.phantom_dims
            ));
        }
        if self.phantom_spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return fail(format!("phantom_spacing {:?} is not usable", self.phantom_spacing));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return fail(format!("noise_sigma {} is not usable", self.noise_sigma));
        }
        for kind in &self.models {
            let [h, w] = self.input_for(*kind);
            if h == 0 || w == 0 {
                return fail(format!("input size {h}x{w} for {kind} is degenerate"));
            }
        }
        if let Some(rate) = self.dropout {
            if !(rate.is_finite() && (0.0..1.0).contains(&rate)) {
                return fail(format!("dropout {rate} must lie in [0, 1)"));
            }
        }
        Ok(())
    }

    /// Network input size for one committee member.
    pub fn input_for(&self, kind: ModelKind) -> [usize; 2] {
        match kind {
            ModelKind::Alexnet => self.alexnet_input_size,
            _ => self.input_size,
        }
    }

    /// The serialized form that is stored in the run directory and
    /// hashed for provenance: pretty JSON with a trailing newline.
    pub fn canonical_bytes(&self) -> Result<Vec<u8>, PipelineError> {
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        Ok(bytes)
    }
}

/// One line of the final report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    /// Committee member name, or `ensemble` for the voted row.
    pub model: String,
    pub task: String,
    /// Number of evaluated samples.
    pub n: usize,
    pub accuracy: Option<f64>,
    /// Positive-class precision for binary tasks, macro-averaged
    /// otherwise; `None` when the denominator vanishes.
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    /// Area under the ROC curve; absent for the four-class task.
    pub auc: Option<f64>,
    pub seed: u64,
}

/// Final evaluation summary written to `report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub task: String,
    pub seed: u64,
    pub rows: Vec<MetricsRow>,
}

/// Identity of a finished run, written to `provenance.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunProvenance {
    /// Crate version that produced the run.
    pub version: String,
    /// FNV-1a hash (hex) of the stored `config.json` bytes.
    pub config_hash: String,
    pub seed: u64,
}

/// Reads a run directory's provenance record and recomputes the config
/// hash from the stored `config.json`, returning both so callers can
/// tell whether the directory has been tampered with.
pub fn read_provenance(run_dir: &Path) -> Result<(RunProvenance, String), PipelineError> {
    let prov_path = run_dir.join("provenance.json");
    let config_path = run_dir.join("config.json");
    if !prov_path.is_file() || !config_path.is_file() {
        return Err(PipelineError::NotARunDirectory(run_dir.to_path_buf()));
    }
    let recorded: RunProvenance = serde_json::from_slice(&fs::read(&prov_path)?)?;
    let computed = format!("{:016x}", fnv1a64(&fs::read(&config_path)?));
    Ok((recorded, computed))
}

fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    let tmp = path.with_extension("json.tmp");
    fs::write(&tmp, &bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, PipelineError> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}

// ---------------------------------------------------------------------------
// Stage 1+2: cohort and preprocessing

fn cohort_manifest(
    config: &ExperimentConfig,
    phantom_dir: &Path,
    log: &mut dyn FnMut(&str),
) -> Result<DatasetManifest, PipelineError> {
    let manifest_path = phantom_dir.join("manifest.csv");
    if manifest_path.is_file() {
        let manifest = DatasetManifest::read_csv(&manifest_path)?;
        log(&format!("phantom: reusing {} subjects", manifest.len()));
        return Ok(manifest);
    }
    let mut counts = [0usize; 4];
    for &class in config.task.classes() {
        counts[class.index()] = config.subjects_per_class;
    }
    let spec = DatasetSpec {
        counts,
        dims: config.phantom_dims,
        spacing: config.phantom_spacing,
        noise_sigma: config.noise_sigma,
        jitter: config.jitter,
        seed: derive_seed(config.seed, 0x9A),
    };
    let manifest = generate_dataset(&spec, phantom_dir)?;
    log(&format!("phantom: generated {} subjects", manifest.len()));
    Ok(manifest)
}

/// The registration target: a clean, centred, noise-free control
/// phantom. Deterministic in the seed, so it never needs to be stored.
pub fn control_template(
    dims: [usize; 3],
    spacing: [f32; 3],
    seed: u64,
) -> Result<Volume3D, PipelineError> {
    let spec = PhantomSpec {
        class: ClassLabel::Cn,
        dims,
        spacing,
        noise_sigma: 0.0,
        jitter: false,
        seed,
    };
    Ok(generate_phantom(&spec)?.0)
}

fn make_template(config: &ExperimentConfig) -> Result<Volume3D, PipelineError> {
    control_template(
        config.phantom_dims,
        config.phantom_spacing,
        derive_seed(config.seed, 0x7E),
    )
}

fn size_dir(run_dir: &Path, size: [usize; 2]) -> PathBuf {
    run_dir
        .join("preprocessed")
        .join(format!("{}x{}", size[0], size[1]))
}

/// Normalizes every cohort volume onto the template grid and extracts
/// three axial slice stacks per subject, resized to `size` and scaled
/// so each sample's peak magnitude is 1. Volumes are read from
/// `phantom_dir` (where the cohort manifest's paths point), stacks and
/// a sample manifest are written to `out_dir`.
pub fn preprocess_dataset(
    cohort: &DatasetManifest,
    phantom_dir: &Path,
    out_dir: &Path,
    template: &Volume3D,
    size: [usize; 2],
    log: &mut dyn FnMut(&str),
) -> Result<(), PipelineError> {
    fs::create_dir_all(out_dir)?;
    let per_subject: Vec<Result<Vec<ManifestEntry>, PipelineError>> =
        worker_pool().install(|| {
            cohort
                .entries()
                .par_iter()
                .map(|entry| {
                    let vol = read_nifti(&phantom_dir.join(&entry.path))?;
                    let normalized = normalize_to_template(&vol, template)?;
                    sample_rows(&normalized.volume, entry, out_dir, size)
                })
                .collect()
        });
    write_sample_manifest(per_subject, out_dir, size, log)
}

/// Warps every cohort volume onto the template once, writing the
/// results (and a manifest) into `out_dir`. Registration dominates
/// preprocessing and does not depend on the sample size, so the
/// experiment runner shares this stage across input sizes.
pub fn normalize_cohort(
    cohort: &DatasetManifest,
    src_dir: &Path,
    out_dir: &Path,
    template: &Volume3D,
    log: &mut dyn FnMut(&str),
) -> Result<(), PipelineError> {
    fs::create_dir_all(out_dir)?;
    let rows: Vec<Result<ManifestEntry, PipelineError>> = worker_pool().install(|| {
        cohort
            .entries()
            .par_iter()
            .map(|entry| {
                let vol = read_nifti(&src_dir.join(&entry.path))?;
                let normalized = normalize_to_template(&vol, template)?;
                let name = format!("{}.nii", entry.subject_id);
                write_nifti(&out_dir.join(&name), &normalized.volume)?;
                Ok(ManifestEntry {
                    path: name,
                    label: entry.label,
                    subject_id: entry.subject_id.clone(),
                    provenance: Provenance::Original,
                    ops: "normalized".to_string(),
                })
            })
            .collect()
    });
    let mut entries = Vec::with_capacity(rows.len());
    for row in rows {
        entries.push(row?);
    }
    let manifest = DatasetManifest::new(entries)?;
    manifest.write_csv(&out_dir.join("manifest.csv"))?;
    log(&format!("normalize: {} volumes onto the template", manifest.len()));
    Ok(())
}

/// Cuts fixed-size samples from already normalized volumes.
pub fn slice_normalized(
    normalized: &DatasetManifest,
    norm_dir: &Path,
    out_dir: &Path,
    size: [usize; 2],
    log: &mut dyn FnMut(&str),
) -> Result<(), PipelineError> {
    fs::create_dir_all(out_dir)?;
    let per_subject: Vec<Result<Vec<ManifestEntry>, PipelineError>> =
        worker_pool().install(|| {
            normalized
                .entries()
                .par_iter()
                .map(|entry| {
                    let vol = read_nifti(&norm_dir.join(&entry.path))?;
                    sample_rows(&vol, entry, out_dir, size)
                })
                .collect()
        });
    write_sample_manifest(per_subject, out_dir, size, log)
}

/// Writes the three slice-stack samples of one normalized volume:
/// offsets -2/0/+2 around the axial midplane, each peak-normalized.
fn sample_rows(
    vol: &Volume3D,
    entry: &ManifestEntry,
    out_dir: &Path,
    size: [usize; 2],
) -> Result<Vec<ManifestEntry>, PipelineError> {
    let offsets: [i64; 3] = [-2, 0, 2];
    let dims = vol.dims();
    let mut rows = Vec::with_capacity(offsets.len());
    for (k, &off) in offsets.iter().enumerate() {
        let center = (dims[2] as i64 / 2 + off) as usize;
        let mut stack = extract_slices(vol, SliceAxis::Z, center, size[0], size[1])?;
        let peak = stack.data().iter().fold(0.0f32, |m, &v| m.max(v.abs()));
        if peak > 0.0 {
            for v in stack.data_mut() {
                *v /= peak;
            }
        }
        let name = format!("{}_s{k}.nii", entry.subject_id);
        write_nifti(&out_dir.join(&name), &slice_stack_to_volume(&stack))?;
        rows.push(ManifestEntry {
            path: name,
            label: entry.label,
            subject_id: entry.subject_id.clone(),
            provenance: Provenance::Original,
            ops: format!("slice:z:{center}"),
        });
    }
    Ok(rows)
}

fn write_sample_manifest(
    per_subject: Vec<Result<Vec<ManifestEntry>, PipelineError>>,
    out_dir: &Path,
    size: [usize; 2],
    log: &mut dyn FnMut(&str),
) -> Result<(), PipelineError> {
    let mut entries = Vec::new();
    for rows in per_subject {
        entries.extend(rows?);
    }
    let manifest = DatasetManifest::new(entries)?;
    manifest.write_csv(&out_dir.join("manifest.csv"))?;
    log(&format!(
        "preprocess: {} samples at {}x{}",
        manifest.len(),
        size[0],
        size[1]
    ));
    Ok(())
}

// ---------------------------------------------------------------------------
// Stage 4: sample loading and augmentation

/// One preprocessed slice stack held in memory.
struct LoadedSample {
    subject: String,
    /// Class index within the task (position in `task.classes()`).
    class_pos: usize,
    /// Unique sample name, e.g. `AD012_s1`.
    base: String,
    stack: SliceStack,
}

fn load_size(dir: &Path, task: Task) -> Result<Vec<LoadedSample>, PipelineError> {
    let manifest = DatasetManifest::read_csv(&dir.join("manifest.csv"))?;
    let loaded: Vec<Result<Option<LoadedSample>, PipelineError>> = worker_pool().install(|| {
        manifest
            .entries()
            .par_iter()
            .map(|entry| {
                let Some(class_pos) =
                    task.classes().iter().position(|&c| c == entry.label)
                else {
                    return Ok(None);
                };
                let stack = slice_stack_from_volume(&read_nifti(&dir.join(&entry.path))?)?;
                let base = Path::new(&entry.path)
                    .file_stem()
                    .and_then(|s| s.to_str())
                    .unwrap_or(entry.path.as_str())
                    .to_string();
                Ok(Some(LoadedSample {
                    subject: entry.subject_id.clone(),
                    class_pos,
                    base,
                    stack,
                }))
            })
            .collect()
    });
    let mut out = Vec::new();
    for sample in loaded {
        if let Some(s) = sample? {
            out.push(s);
        }
    }
    Ok(out)
}

fn subjects_of_rows(manifest: &DatasetManifest, rows: &[usize]) -> HashSet<String> {
    rows.iter()
        .map(|&i| manifest.entries()[i].subject_id.clone())
        .collect()
}

fn eval_set(
    loaded: &[LoadedSample],
    subjects: &HashSet<String>,
    size: [usize; 2],
) -> Result<SampleSet, PipelineError> {
    let mut set = SampleSet::new(size[0], size[1]);
    for sample in loaded.iter().filter(|s| subjects.contains(&s.subject)) {
        set.push(sample.base.clone(), sample.class_pos, &sample.stack)?;
    }
    Ok(set)
}

/// Builds the training set: originals of the training subjects plus
/// augmentation replicas topping every class up to
/// `ceil(largest class count * factor)` samples.
fn train_set_with_augmentation(
    loaded: &[LoadedSample],
    subjects: &HashSet<String>,
    task: Task,
    factor: f64,
    seed: u64,
    size: [usize; 2],
) -> Result<SampleSet, PipelineError> {
    let mut per_class: Vec<Vec<&LoadedSample>> = vec![Vec::new(); task.num_classes()];
    for sample in loaded.iter().filter(|s| subjects.contains(&s.subject)) {
        per_class[sample.class_pos].push(sample);
    }
    let largest = per_class.iter().map(Vec::len).max().unwrap_or(0);
    if largest == 0 {
        return Err(PipelineError::InvalidConfig(
            "training partition is empty".into(),
        ));
    }
    let target = (largest as f64 * factor).ceil() as usize;

    let mut set = SampleSet::new(size[0], size[1]);
    for (pos, members) in per_class.iter().enumerate() {
        if members.is_empty() {
            continue;
        }
        let stacks: Vec<SliceStack> = members.iter().map(|s| s.stack.clone()).collect();
        let class_tag = task.classes()[pos].index() as u64;
        let roster = augment_to_target(
            &stacks,
            target.max(stacks.len()),
            derive_seed2(seed, class_tag, 0xA6),
        )?;
        for (j, sample) in roster.iter().enumerate() {
            let base = &members[sample.source_index].base;
            let id = if sample.ops.is_empty() {
                base.clone()
            } else {
                format!("{base}_a{j:03}")
            };
            set.push(id, pos, &sample.stack)?;
        }
    }
    Ok(set)
}

// ---------------------------------------------------------------------------
// Stage 5+6: training and evaluation

fn model_spec(
    config: &ExperimentConfig,
    kind: ModelKind,
) -> Result<NetworkSpec, PipelineError> {
    let [h, w] = config.input_for(kind);
    let mut spec = build(
        kind,
        [h, w, 3],
        config.task.num_classes(),
        config.width_multiplier,
    )?;
    if let Some(rate) = config.dropout {
        for layer in &mut spec.layers {
            if let LayerSpec::Dropout { rate: r } = layer {
                *r = rate;
            }
        }
    }
    Ok(spec)
}

/// Trains one committee member or reloads its checkpoint if present.
fn train_or_load(
    config: &ExperimentConfig,
    spec: NetworkSpec,
    sets: &PartitionSets,
    ckpt: &Path,
    train_seed: u64,
    log: &mut dyn FnMut(&str),
) -> Result<TrainedModel, PipelineError> {
    let name = ckpt
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("model")
        .to_string();
    if ckpt.is_file() {
        let model = load_checkpoint(ckpt)?;
        log(&format!("train: {name} loaded from checkpoint"));
        return Ok(model);
    }
    let hp = Hyperparams {
        learning_rate: config.learning_rate,
        batch_size: config.batch_size,
        epochs: config.epochs,
    };
    let (model, history) = train(&spec, &sets.train, &sets.val, &hp, train_seed)?;
    save_checkpoint(&model, ckpt)?;
    write_json_atomic::<TrainHistory>(&ckpt.with_file_name(format!("{name}_history.json")), &history)?;
    let last = history.last();
    log(&format!(
        "train: {name} finished {} epochs (train acc {})",
        history.len(),
        last.map_or("n/a".into(), |e| format!("{:.3}", e.train_accuracy)),
    ));
    Ok(model)
}

/// The three sample sets one committee member trains and tests on. The
/// training set carries augmentation replicas; validation and test hold
/// originals only.
pub struct PartitionSets {
    pub train: SampleSet,
    pub val: SampleSet,
    pub test: SampleSet,
}

fn partition_sets(
    cohort: &DatasetManifest,
    plan: &SplitPlan,
    loaded: &[LoadedSample],
    task: Task,
    augment_factor: f64,
    seed: u64,
    size: [usize; 2],
) -> Result<PartitionSets, PipelineError> {
    let train_subjects = subjects_of_rows(cohort, &plan.train);
    let val_subjects = subjects_of_rows(cohort, &plan.val);
    let test_subjects = subjects_of_rows(cohort, &plan.test);
    Ok(PartitionSets {
        train: train_set_with_augmentation(
            loaded,
            &train_subjects,
            task,
            augment_factor,
            seed,
            size,
        )?,
        val: eval_set(loaded, &val_subjects, size)?,
        test: eval_set(loaded, &test_subjects, size)?,
    })
}

/// Loads a preprocessed sample directory and partitions it per `plan`,
/// augmenting the training side. `plan` rows index into `cohort`; the
/// partition boundary is the subject, so every slice of a subject lands
/// on one side.
pub fn assemble_sets(
    data_dir: &Path,
    cohort: &DatasetManifest,
    plan: &SplitPlan,
    task: Task,
    augment_factor: f64,
    seed: u64,
    size: [usize; 2],
) -> Result<PartitionSets, PipelineError> {
    let loaded = load_size(data_dir, task)?;
    partition_sets(cohort, plan, &loaded, task, augment_factor, seed, size)
}

/// Metrics row plus, for binary tasks, the ROC curve behind the AUC.
///
/// `predicted` and `actual` are class positions within the task.
/// Binary tasks must pass the positive-class probability per sample in
/// `positive_scores`; the four-class task ignores it and reports
/// macro-averaged precision and recall with no AUC.
pub fn evaluate_predictions(
    task: Task,
    model_name: &str,
    predicted: &[usize],
    actual: &[usize],
    positive_scores: Option<&[f64]>,
    seed: u64,
) -> Result<(MetricsRow, Option<RocCurve>), PipelineError> {
    let n = actual.len();
    let row;
    let curve;
    match task.positive_position() {
        Some(pos) => {
            let counts = confusion(predicted, actual, &pos)?;
            let roc = roc_curve(
                positive_scores.expect("binary evaluation carries scores"),
                actual,
                &pos,
            )?;
            row = MetricsRow {
                model: model_name.to_string(),
                task: task.as_str().to_string(),
                n,
                accuracy: counts.accuracy(),
                precision: counts.precision(),
                recall: counts.recall(),
                auc: Some(auc(&roc)),
                seed,
            };
            curve = Some(roc);
        }
        None => {
            let positions: Vec<usize> = (0..task.num_classes()).collect();
            let per_class: Vec<ConfusionCounts> = one_vs_rest(predicted, actual, &positions)?
                .into_iter()
                .map(|(_, counts)| counts)
                .collect();
            let hits = predicted.iter().zip(actual).filter(|(p, a)| p == a).count();
            row = MetricsRow {
                model: model_name.to_string(),
                task: task.as_str().to_string(),
                n,
                accuracy: Some(hits as f64 / n as f64),
                precision: macro_average(&per_class, ConfusionCounts::precision),
                recall: macro_average(&per_class, ConfusionCounts::recall),
                auc: None,
                seed,
            };
            curve = None;
        }
    }
    Ok((row, curve))
}

fn emit_curve(run_dir: &Path, name: &str, curve: &RocCurve) -> Result<(), PipelineError> {
    let roc_dir = run_dir.join("roc");
    fs::create_dir_all(&roc_dir)?;
    emit_roc(curve, &roc_dir.join(format!("{name}.csv")), RocFormat::Csv)?;
    emit_roc(curve, &roc_dir.join(format!("{name}.svg")), RocFormat::Svg)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// The runner

/// Runs (or resumes) an experiment in `run_dir` and returns the report.
///
/// Progress lines go to `log`. Artifacts land in the run directory:
/// `config.json`, `provenance.json`, `phantom/`, `preprocessed/<HxW>/`,
/// `split.json` (or `folds.json`), `checkpoints/`, `roc/`, and
/// `report.json`. A populated run directory created from a different
/// config is refused rather than overwritten.
pub fn run_experiment(
    config: &ExperimentConfig,
    run_dir: &Path,
    log: &mut dyn FnMut(&str),
) -> Result<Report, PipelineError> {
    config.validate()?;
    fs::create_dir_all(run_dir)?;

    let canonical = config.canonical_bytes()?;
    let config_path = run_dir.join("config.json");
    if config_path.is_file() {
        if fs::read(&config_path)? != canonical {
            return Err(PipelineError::InvalidConfig(format!(
                "{} holds a different config; use a fresh run directory",
                config_path.display()
            )));
        }
    } else {
        fs::write(&config_path, &canonical)?;
    }
    let prov_path = run_dir.join("provenance.json");
    if !prov_path.is_file() {
        write_json_atomic(
            &prov_path,
            &RunProvenance {
                version: env!("CARGO_PKG_VERSION").to_string(),
                config_hash: format!("{:016x}", fnv1a64(&canonical)),
                seed: config.seed,
            },
        )?;
    }

    let task = config.task;
    let phantom_dir = run_dir.join("phantom");
    let cohort = staged("phantom", cohort_manifest(config, &phantom_dir, log))?;

    // preprocess once per distinct input size
    let mut sizes: Vec<[usize; 2]> = Vec::new();
    for &kind in &config.models {
        let size = config.input_for(kind);
        if !sizes.contains(&size) {
            sizes.push(size);
        }
    }
    staged("preprocess", {
        let todo: Vec<[usize; 2]> = sizes
            .iter()
            .copied()
            .filter(|&s| !size_dir(run_dir, s).join("manifest.csv").is_file())
            .collect();
        for &size in sizes.iter().filter(|s| !todo.contains(s)) {
            log(&format!("preprocess: reusing {}x{}", size[0], size[1]));
        }
        let mut result = Ok(());
        if !todo.is_empty() {
            // Registration is size-independent, so normalize once and
            // cut every sample size from the shared result.
            let norm_dir = run_dir.join("normalized");
            let have_normalized = norm_dir.join("manifest.csv").is_file();
            if have_normalized {
                log("normalize: reusing the normalized cohort");
            }
            result = (|| {
                if !have_normalized {
                    let template = make_template(config)?;
                    normalize_cohort(&cohort, &phantom_dir, &norm_dir, &template, log)?;
                }
                let normalized = DatasetManifest::read_csv(&norm_dir.join("manifest.csv"))?;
                for &size in &todo {
                    slice_normalized(&normalized, &norm_dir, &size_dir(run_dir, size), size, log)?;
                }
                Ok(())
            })();
        }
        result
    })?;

    let ckpt_dir = run_dir.join("checkpoints");
    fs::create_dir_all(&ckpt_dir)?;

    // split (or fold) plan, then train every committee member
    let mut predictions: Vec<Prediction> = Vec::new();
    match config.folds {
        None => {
            let plan_path = run_dir.join("split.json");
            let plan: SplitPlan = staged(
                "split",
                if plan_path.is_file() {
                    read_json(&plan_path)
                } else {
                    let plan =
                        split_dataset(&cohort, (0.6, 0.2, 0.2), derive_seed(config.seed, 0x5B))?;
                    write_json_atomic(&plan_path, &plan)?;
                    Ok(plan)
                },
            )?;
            log(&format!(
                "split: {} train / {} val / {} test subjects",
                plan.train.len(),
                plan.val.len(),
                plan.test.len()
            ));

            let mut sets_by_size: HashMap<[usize; 2], PartitionSets> = HashMap::new();
            for (mi, &kind) in config.models.iter().enumerate() {
                let size = config.input_for(kind);
                if !sets_by_size.contains_key(&size) {
                    let loaded = staged("load", load_size(&size_dir(run_dir, size), task))?;
                    let sets = staged(
                        "augment",
                        partition_sets(
                            &cohort,
                            &plan,
                            &loaded,
                            task,
                            config.augment_factor,
                            config.seed,
                            size,
                        ),
                    )?;
                    sets_by_size.insert(size, sets);
                }
                let sets = &sets_by_size[&size];
                let model = staged(
                    "train",
                    model_spec(config, kind).and_then(|spec| {
                        train_or_load(
                            config,
                            spec,
                            sets,
                            &ckpt_dir.join(format!("{kind}.ckpt")),
                            derive_seed2(config.seed, mi as u64, 0x73),
                            log,
                        )
                    }),
                )?;
                predictions.push(staged("evaluate", predict(&model, &sets.test))?);
            }
        }
        Some(k) => {
            let plan_path = run_dir.join("folds.json");
            let plan: FoldPlan = staged(
                "split",
                if plan_path.is_file() {
                    read_json(&plan_path)
                } else {
                    let plan = kfold(&cohort, k, derive_seed(config.seed, 0x5B))?;
                    write_json_atomic(&plan_path, &plan)?;
                    Ok(plan)
                },
            )?;
            log(&format!("split: {k} folds over {} subjects", cohort.len()));

            // pooled predictions: every subject is predicted exactly once,
            // by the committee trained without it
            predictions = config
                .models
                .iter()
                .map(|kind| Prediction {
                    model: kind.to_string(),
                    sample_ids: Vec::new(),
                    probs: Vec::new(),
                    labels: Vec::new(),
                })
                .collect();
            let mut loaded_by_size: HashMap<[usize; 2], Vec<LoadedSample>> = HashMap::new();
            for &size in &sizes {
                loaded_by_size.insert(
                    size,
                    staged("load", load_size(&size_dir(run_dir, size), task))?,
                );
            }
            for fold in 0..plan.k() {
                let fold_plan = plan.split_for_fold(
                    &cohort,
                    fold,
                    0.2,
                    derive_seed2(config.seed, fold as u64, 0xCF),
                )?;
                let mut sets_by_size: HashMap<[usize; 2], PartitionSets> = HashMap::new();
                for (mi, &kind) in config.models.iter().enumerate() {
                    let size = config.input_for(kind);
                    if !sets_by_size.contains_key(&size) {
                        let sets = staged(
                            "augment",
                            partition_sets(
                                &cohort,
                                &fold_plan,
                                &loaded_by_size[&size],
                                task,
                                config.augment_factor,
                                config.seed,
                                size,
                            ),
                        )?;
                        sets_by_size.insert(size, sets);
                    }
                    let sets = &sets_by_size[&size];
                    let model = staged(
                        "train",
                        model_spec(config, kind).and_then(|spec| {
                            train_or_load(
                                config,
                                spec,
                                sets,
                                &ckpt_dir.join(format!("{kind}_fold{fold}.ckpt")),
                                derive_seed2(
                                    config.seed,
                                    (fold * config.models.len() + mi) as u64,
                                    0x73,
                                ),
                                log,
                            )
                        }),
                    )?;
                    let pred = staged("evaluate", predict(&model, &sets.test))?;
                    let pooled = &mut predictions[mi];
                    pooled.sample_ids.extend(pred.sample_ids);
                    pooled.probs.extend(pred.probs);
                    pooled.labels.extend(pred.labels);
                }
            }
        }
    }

    // evaluation: per-model rows, then the voted ensemble row
    let report = staged(
        "evaluate",
        (|| {
            let actual = test_labels(run_dir, config, &predictions[0].sample_ids)?;
            let pos = task.positive_position();
            let mut rows = Vec::new();
            for pred in &predictions {
                let scores: Option<Vec<f64>> =
                    pos.map(|p| pred.probs.iter().map(|row| row[p]).collect());
                let (row, curve) = evaluate_predictions(
                    task,
                    &pred.model,
                    &pred.labels,
                    &actual,
                    scores.as_deref(),
                    config.seed,
                )?;
                if let Some(curve) = &curve {
                    emit_curve(run_dir, &pred.model, curve)?;
                }
                log(&format!(
                    "evaluate: {} accuracy {}",
                    row.model,
                    row.accuracy.map_or("n/a".into(), |a| format!("{a:.3}")),
                ));
                rows.push(row);
            }

            let voted = majority_vote(&predictions)?;
            let ensemble_scores: Option<Vec<f64>> = pos.map(|p| {
                (0..voted.len())
                    .map(|i| {
                        predictions.iter().map(|m| m.probs[i][p]).sum::<f64>()
                            / predictions.len() as f64
                    })
                    .collect()
            });
            let (row, curve) = evaluate_predictions(
                task,
                "ensemble",
                &voted,
                &actual,
                ensemble_scores.as_deref(),
                config.seed,
            )?;
            if let Some(curve) = &curve {
                emit_curve(run_dir, "ensemble", curve)?;
            }
            log(&format!(
                "evaluate: ensemble accuracy {}",
                row.accuracy.map_or("n/a".into(), |a| format!("{a:.3}")),
            ));
            rows.push(row);

            Ok(Report {
                task: task.as_str().to_string(),
                seed: config.seed,
                rows,
            })
        })(),
    )?;

    staged("report", write_json_atomic(&run_dir.join("report.json"), &report))?;
    log("report: written");
    Ok(report)
}

/// True class positions for named samples, looked up in a manifest by
/// file stem so they align with prediction order.
pub fn labels_for_samples(
    manifest: &DatasetManifest,
    task: Task,
    sample_ids: &[String],
) -> Result<Vec<usize>, PipelineError> {
    let mut by_base: HashMap<String, usize> = HashMap::new();
    for entry in manifest.entries() {
        let base = Path::new(&entry.path)
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or(entry.path.as_str())
            .to_string();
        if let Some(pos) = task.classes().iter().position(|&c| c == entry.label) {
            by_base.insert(base, pos);
        }
    }
    sample_ids
        .iter()
        .map(|id| {
            by_base.get(id).copied().ok_or_else(|| {
                PipelineError::SampleMismatch(format!("no manifest row for sample {id}"))
            })
        })
        .collect()
}

/// True labels for the evaluated samples, recovered from a preprocessed
/// manifest of the run directory (any input size carries the same
/// sample-to-label mapping).
fn test_labels(
    run_dir: &Path,
    config: &ExperimentConfig,
    sample_ids: &[String],
) -> Result<Vec<usize>, PipelineError> {
    let size = config.input_for(config.models[0]);
    let manifest = DatasetManifest::read_csv(&size_dir(run_dir, size).join("manifest.csv"))?;
    labels_for_samples(&manifest, config.task, sample_ids)
}
