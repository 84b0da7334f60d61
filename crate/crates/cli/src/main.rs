//! `neuroens` — drive the phantom-to-report pipeline from the shell.
//!
//! Every subcommand wraps one pipeline stage; `run` executes all of
//! them from a config file. Exit codes: 0 on success, 1 on runtime
//! failure (one JSON line on stderr: `{"error": ..., "message": ...}`),
//! 2 on usage errors. Set `NEUROENS_THREADS` to cap the worker pool.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use neuroens_core::augment::{augment_to_target, chain_string};
use neuroens_core::eval::{emit_roc, roc_curve, RocFormat};
use neuroens_core::models::{
    build, infer_shapes, load_checkpoint, save_checkpoint, ModelError, ModelKind,
};
use neuroens_core::nn::LayerSpec;
use neuroens_core::phantom::{generate_dataset, DatasetSpec};
use neuroens_core::pipeline::{
    assemble_sets, control_template, evaluate_predictions, labels_for_samples, majority_vote,
    predict, preprocess_dataset, read_provenance, run_experiment, split_dataset, train,
    ExperimentConfig, Hyperparams, PipelineError, Prediction, SampleSet, SplitPlan, Task,
};
use neuroens_core::util::{derive_seed, derive_seed2};
use neuroens_core::volume::{
    read_nifti, slice_stack_from_volume, slice_stack_to_volume, write_nifti, ClassLabel,
    DatasetManifest, ManifestEntry, Provenance, SliceStack, VolumeError, CLASS_ORDER,
};

#[derive(Parser)]
#[command(
    name = "neuroens",
    version,
    about = "Synthetic brain-MRI phantoms, CNN committees, and majority-vote evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labeled synthetic phantom cohort
    Phantom(PhantomArgs),
    /// Normalize a cohort to a template and extract slice-stack samples
    Preprocess(PreprocessArgs),
    /// Top up every class of a sample set with augmentation replicas
    Augment(AugmentArgs),
    /// Print the layer-by-layer shape trace of an architecture
    InferShapes(InferShapesArgs),
    /// Train one committee member on preprocessed samples
    Train(TrainArgs),
    /// Evaluate a checkpoint on the test partition
    Evaluate(EvaluateArgs),
    /// Majority-vote prediction files into ensemble labels
    Ensemble(EnsembleArgs),
    /// Emit ROC curve files for a prediction file
    Roc(RocArgs),
    /// Run a full experiment from a config file
    Run(RunArgs),
    /// Show and verify a run directory's provenance record
    Provenance(ProvenanceArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let line = serde_json::json!({
                "error": error_category(&err),
                "message": error_message(&err),
            });
            eprintln!("{line}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Phantom(args) => cmd_phantom(args),
        Command::Preprocess(args) => cmd_preprocess(args),
        Command::Augment(args) => cmd_augment(args),
        Command::InferShapes(args) => cmd_infer_shapes(args),
        Command::Train(args) => cmd_train(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Ensemble(args) => cmd_ensemble(args),
        Command::Roc(args) => cmd_roc(args),
        Command::Run(args) => cmd_run(args),
        Command::Provenance(args) => cmd_provenance(args),
    }
}

// ---------------------------------------------------------------------------
// Error reporting

/// CLI-level failure with an explicit category for the JSON error line.
#[derive(Debug)]
struct CliError {
    category: &'static str,
    message: String,
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

fn cli_err(category: &'static str, message: String) -> anyhow::Error {
    anyhow::Error::new(CliError { category, message })
}

/// Joins the cause chain, skipping causes the outer message already
/// spells out (the library errors render their sources themselves).
fn error_message(err: &anyhow::Error) -> String {
    let mut message = err.to_string();
    for cause in err.chain().skip(1) {
        let text = cause.to_string();
        if !message.contains(&text) {
            message.push_str(": ");
            message.push_str(&text);
        }
    }
    message
}

fn error_category(err: &anyhow::Error) -> &'static str {
    for cause in err.chain() {
        if let Some(cli) = cause.downcast_ref::<CliError>() {
            return cli.category;
        }
        if let Some(p) = cause.downcast_ref::<PipelineError>() {
            return pipeline_category(p);
        }
        if let Some(m) = cause.downcast_ref::<ModelError>() {
            return model_category(m);
        }
        if let Some(v) = cause.downcast_ref::<VolumeError>() {
            return volume_category(v);
        }
        if let Some(io) = cause.downcast_ref::<std::io::Error>() {
            return io_category(io);
        }
    }
    "Runtime"
}

fn io_category(err: &std::io::Error) -> &'static str {
    match err.kind() {
        std::io::ErrorKind::NotFound => "FileNotFound",
        std::io::ErrorKind::PermissionDenied => "PermissionDenied",
        std::io::ErrorKind::AlreadyExists => "AlreadyExists",
        _ => "Io",
    }
}

fn pipeline_category(err: &PipelineError) -> &'static str {
    match err {
        PipelineError::Stage { source, .. } => pipeline_category(source),
        PipelineError::EmptyManifest => "EmptyManifest",
        PipelineError::InvalidRatios { .. } => "InvalidRatios",
        PipelineError::TooFewSubjects { .. } => "TooFewSubjects",
        PipelineError::NonFiniteLoss { .. } => "NonFiniteLoss",
        PipelineError::SampleMismatch(_) => "SampleMismatch",
        PipelineError::InvalidConfig(_) => "InvalidConfig",
        PipelineError::NotARunDirectory(_) => "NotARunDirectory",
        PipelineError::Volume(v) => volume_category(v),
        PipelineError::Preprocess(_) => "Preprocess",
        PipelineError::Augment(_) => "Augment",
        PipelineError::Model(m) => model_category(m),
        PipelineError::Engine(_) => "Engine",
        PipelineError::Eval(_) => "Eval",
        PipelineError::Encode(_) => "Encode",
        PipelineError::IoFailure(io) => io_category(io),
    }
}

fn model_category(err: &ModelError) -> &'static str {
    match err {
        ModelError::IncompatibleInput { .. } => "IncompatibleInput",
        ModelError::InvalidSpec(_) => "InvalidSpec",
        ModelError::ShapeFlowBroken { .. } => "ShapeFlow",
        ModelError::VersionMismatch { .. } => "CheckpointVersion",
        ModelError::PayloadLengthMismatch { .. } => "CheckpointPayload",
        ModelError::IoFailure(io) => io_category(io),
        ModelError::Engine(_) => "Engine",
    }
}

fn volume_category(err: &VolumeError) -> &'static str {
    if let VolumeError::IoFailure(io) = err {
        io_category(io)
    } else {
        "Volume"
    }
}

// ---------------------------------------------------------------------------
// Shared helpers

/// Refuses to clobber an existing artifact unless `--overwrite` was given.
fn guard_overwrite(path: &Path, overwrite: bool) -> Result<()> {
    if path.exists() && !overwrite {
        return Err(cli_err(
            "AlreadyExists",
            format!("{} exists; pass --overwrite to replace it", path.display()),
        ));
    }
    Ok(())
}

fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    DatasetManifest::read_csv(path)
        .with_context(|| format!("reading manifest {}", path.display()))
}

fn parse_class(s: &str) -> Result<ClassLabel> {
    ClassLabel::from_str(s).map_err(anyhow::Error::new)
}

fn triple<T: Copy>(values: &[T], what: &str) -> Result<[T; 3]> {
    match values {
        [a, b, c] => Ok([*a, *b, *c]),
        other => Err(cli_err(
            "InvalidConfig",
            format!("{what} needs exactly 3 comma-separated values, got {}", other.len()),
        )),
    }
}

fn file_stem(path: &str) -> String {
    Path::new(path)
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or(path)
        .to_string()
}

/// Reads one sample to learn the stack dimensions of a data directory.
fn stack_size(dir: &Path, manifest: &DatasetManifest) -> Result<[usize; 2]> {
    let first = manifest
        .entries()
        .first()
        .ok_or_else(|| cli_err("EmptyManifest", "manifest has no rows".into()))?;
    let stack = slice_stack_from_volume(&read_nifti(&dir.join(&first.path))?)?;
    Ok([stack.height(), stack.width()])
}

fn to_stdout<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

// ---------------------------------------------------------------------------
// phantom

#[derive(Args)]
struct PhantomArgs {
    /// Output directory for volumes, ground truth, and manifest.csv
    #[arg(long)]
    out: PathBuf,
    /// Subjects generated per class
    #[arg(long, default_value_t = 40)]
    per_class: usize,
    /// Classes to generate (comma-separated: CN,pMCI,sMCI,AD); all four by default
    #[arg(long, value_delimiter = ',')]
    classes: Vec<String>,
    /// Volume dimensions in voxels
    #[arg(long, value_delimiter = ',', default_value = "64,64,64")]
    dims: Vec<usize>,
    /// Voxel spacing in millimetres
    #[arg(long, value_delimiter = ',', default_value = "1.5,1.5,1.5")]
    spacing: Vec<f32>,
    /// Additive noise sigma as a fraction of the intensity range
    #[arg(long, default_value_t = 0.02)]
    noise_sigma: f32,
    /// Disable the per-subject rigid pose jitter
    #[arg(long)]
    no_jitter: bool,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Replace an existing dataset at --out
    #[arg(long)]
    overwrite: bool,
}

fn cmd_phantom(args: PhantomArgs) -> Result<()> {
    guard_overwrite(&args.out.join("manifest.csv"), args.overwrite)?;
    let classes: Vec<ClassLabel> = if args.classes.is_empty() {
        CLASS_ORDER.to_vec()
    } else {
        args.classes
            .iter()
            .map(|s| parse_class(s))
            .collect::<Result<_>>()?
    };
    let mut counts = [0usize; 4];
    for class in classes {
        counts[class.index()] = args.per_class;
    }
    let spec = DatasetSpec {
        counts,
        dims: triple(&args.dims, "--dims")?,
        spacing: triple(&args.spacing, "--spacing")?,
        noise_sigma: args.noise_sigma,
        jitter: !args.no_jitter,
        seed: args.seed,
    };
    let manifest = generate_dataset(&spec, &args.out)?;
    to_stdout(&serde_json::json!({
        "subjects": manifest.len(),
        "manifest": args.out.join("manifest.csv"),
    }))
}

// ---------------------------------------------------------------------------
// preprocess

#[derive(Args)]
struct PreprocessArgs {
    /// Cohort manifest; volumes are resolved relative to it
    #[arg(long)]
    manifest: PathBuf,
    /// Output directory for slice stacks and their manifest
    #[arg(long)]
    out: PathBuf,
    /// Sample height in pixels
    #[arg(long)]
    height: usize,
    /// Sample width in pixels
    #[arg(long)]
    width: usize,
    /// Registration template volume; a clean control phantom matching
    /// the first cohort volume is generated when omitted
    #[arg(long)]
    template: Option<PathBuf>,
    /// Seed for the generated template (ignored with --template)
    #[arg(long, default_value_t = 0)]
    template_seed: u64,
    #[arg(long)]
    overwrite: bool,
}

fn cmd_preprocess(args: PreprocessArgs) -> Result<()> {
    guard_overwrite(&args.out.join("manifest.csv"), args.overwrite)?;
    let cohort = read_manifest(&args.manifest)?;
    let src_dir = args
        .manifest
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let template = match &args.template {
        Some(path) => read_nifti(path).with_context(|| format!("reading {}", path.display()))?,
        None => {
            let first = cohort
                .entries()
                .first()
                .ok_or_else(|| cli_err("EmptyManifest", "cohort manifest has no rows".into()))?;
            let probe = read_nifti(&src_dir.join(&first.path))?;
            control_template(probe.dims(), probe.spacing(), args.template_seed)?
        }
    };
    preprocess_dataset(
        &cohort,
        &src_dir,
        &args.out,
        &template,
        [args.height, args.width],
        &mut |line| eprintln!("{line}"),
    )?;
    to_stdout(&serde_json::json!({
        "samples": cohort.len() * 3,
        "manifest": args.out.join("manifest.csv"),
    }))
}

// ---------------------------------------------------------------------------
// augment

#[derive(Args)]
struct AugmentArgs {
    /// Sample manifest to augment; stacks are resolved relative to it
    #[arg(long)]
    manifest: PathBuf,
    /// Samples per class after augmentation
    #[arg(long)]
    target: usize,
    /// Output directory for the complete augmented sample set
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long)]
    overwrite: bool,
}

fn cmd_augment(args: AugmentArgs) -> Result<()> {
    guard_overwrite(&args.out.join("manifest.csv"), args.overwrite)?;
    let manifest = read_manifest(&args.manifest)?;
    let src_dir = args
        .manifest
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&args.out)?;

    let mut rows: Vec<ManifestEntry> = Vec::new();
    let mut per_class: BTreeMap<&'static str, usize> = BTreeMap::new();
    for label in CLASS_ORDER {
        let members: Vec<&ManifestEntry> = manifest
            .entries()
            .iter()
            .filter(|e| e.label == label)
            .collect();
        if members.is_empty() {
            continue;
        }
        let stacks: Vec<SliceStack> = members
            .iter()
            .map(|e| Ok(slice_stack_from_volume(&read_nifti(&src_dir.join(&e.path))?)?))
            .collect::<Result<_>>()?;
        let roster = augment_to_target(
            &stacks,
            args.target,
            derive_seed2(args.seed, label.index() as u64, 0xA6),
        )?;
        for (j, sample) in roster.iter().enumerate() {
            let source = members[sample.source_index];
            let stem = file_stem(&source.path);
            if sample.ops.is_empty() {
                let name = format!("{stem}.nii");
                let from = src_dir.join(&source.path);
                let to = args.out.join(&name);
                if from.canonicalize().ok() != to.canonicalize().ok() {
                    fs::copy(&from, &to)
                        .with_context(|| format!("copying {}", from.display()))?;
                }
                rows.push(ManifestEntry {
                    path: name,
                    label,
                    subject_id: source.subject_id.clone(),
                    provenance: Provenance::Original,
                    ops: String::new(),
                });
            } else {
                let name = format!("{stem}_a{j:04}.nii");
                write_nifti(&args.out.join(&name), &slice_stack_to_volume(&sample.stack))?;
                rows.push(ManifestEntry {
                    path: name,
                    label,
                    subject_id: source.subject_id.clone(),
                    provenance: Provenance::Augmented,
                    ops: chain_string(&sample.ops),
                });
            }
        }
        per_class.insert(label.as_str(), roster.len());
    }
    let total = rows.len();
    DatasetManifest::new(rows)?.write_csv(&args.out.join("manifest.csv"))?;
    to_stdout(&serde_json::json!({ "samples": total, "per_class": per_class }))
}

// ---------------------------------------------------------------------------
// infer-shapes

#[derive(Args)]
struct InferShapesArgs {
    /// Architecture: vgg16, alexnet, or custom_cnn
    #[arg(long)]
    model: ModelKind,
    #[arg(long, default_value_t = 176)]
    height: usize,
    #[arg(long, default_value_t = 208)]
    width: usize,
    #[arg(long, default_value_t = 2)]
    classes: usize,
    #[arg(long, default_value_t = 1.0)]
    width_multiplier: f64,
}

fn cmd_infer_shapes(args: InferShapesArgs) -> Result<()> {
    let spec = build(
        args.model,
        [args.height, args.width, 3],
        args.classes,
        args.width_multiplier,
    )?;
    let rows = infer_shapes(&spec)?;
    let fmt_shape = |s: &[usize]| {
        s.iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join("x")
    };
    println!("{:<12} {:>14} {:>14}", "layer", "input", "output");
    for row in &rows {
        println!(
            "{:<12} {:>14} {:>14}",
            row.kind.to_string(),
            fmt_shape(&row.input),
            fmt_shape(&row.output)
        );
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// train

#[derive(Args)]
struct TrainArgs {
    /// Preprocessed sample directory (with manifest.csv)
    #[arg(long)]
    data: PathBuf,
    /// Subject manifest the split plan indexes into; defaults to the
    /// data manifest itself
    #[arg(long)]
    cohort: Option<PathBuf>,
    /// Split plan JSON; a fresh 60/20/20 split is drawn when omitted
    #[arg(long)]
    split: Option<PathBuf>,
    /// Write the (possibly freshly drawn) split plan here
    #[arg(long)]
    split_out: Option<PathBuf>,
    #[arg(long)]
    model: ModelKind,
    #[arg(long, value_parser = parse_task_arg)]
    task: Task,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    learning_rate: f64,
    #[arg(long, default_value_t = 0.125)]
    width_multiplier: f64,
    /// Override every dropout rate in the architecture
    #[arg(long)]
    dropout: Option<f32>,
    /// Training-set multiplier applied through augmentation
    #[arg(long, default_value_t = 1.5)]
    augment_factor: f64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Checkpoint path to write
    #[arg(long)]
    out: PathBuf,
    /// Write the per-epoch history JSON here
    #[arg(long)]
    history_out: Option<PathBuf>,
    #[arg(long)]
    overwrite: bool,
}

fn parse_task_arg(s: &str) -> Result<Task, String> {
    Task::from_str(s).map_err(|e| e.to_string())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    guard_overwrite(&args.out, args.overwrite)?;
    if let Some(path) = &args.history_out {
        guard_overwrite(path, args.overwrite)?;
    }
    let data_manifest = read_manifest(&args.data.join("manifest.csv"))?;
    let cohort = match &args.cohort {
        Some(path) => read_manifest(path)?,
        None => data_manifest.clone(),
    };
    let plan: SplitPlan = match &args.split {
        Some(path) => serde_json::from_slice(
            &fs::read(path).with_context(|| format!("reading {}", path.display()))?,
        )?,
        None => split_dataset(&cohort, (0.6, 0.2, 0.2), derive_seed(args.seed, 0x5B))?,
    };
    if let Some(path) = &args.split_out {
        guard_overwrite(path, args.overwrite)?;
        let mut bytes = serde_json::to_vec_pretty(&plan)?;
        bytes.push(b'\n');
        fs::write(path, bytes)?;
    }

    let size = stack_size(&args.data, &data_manifest)?;
    let sets = assemble_sets(
        &args.data,
        &cohort,
        &plan,
        args.task,
        args.augment_factor,
        args.seed,
        size,
    )?;
    let mut spec = build(
        args.model,
        [size[0], size[1], 3],
        args.task.num_classes(),
        args.width_multiplier,
    )?;
    if let Some(rate) = args.dropout {
        for layer in &mut spec.layers {
            if let LayerSpec::Dropout { rate: r } = layer {
                *r = rate;
            }
        }
    }
    let hp = Hyperparams {
        learning_rate: args.learning_rate,
        batch_size: args.batch_size,
        epochs: args.epochs,
    };
    eprintln!(
        "training {} on {} samples ({} val, {} test held out)",
        args.model,
        sets.train.len(),
        sets.val.len(),
        sets.test.len()
    );
    let (model, history) = train(&spec, &sets.train, &sets.val, &hp, args.seed)?;
    save_checkpoint(&model, &args.out)?;
    if let Some(path) = &args.history_out {
        let mut bytes = serde_json::to_vec_pretty(&history)?;
        bytes.push(b'\n');
        fs::write(path, bytes)?;
    }
    to_stdout(&model.meta)
}

// ---------------------------------------------------------------------------
// evaluate

#[derive(Args)]
struct EvaluateArgs {
    /// Preprocessed sample directory (with manifest.csv)
    #[arg(long)]
    data: PathBuf,
    /// Subject manifest the split plan indexes into; defaults to the
    /// data manifest itself
    #[arg(long)]
    cohort: Option<PathBuf>,
    /// Split plan JSON naming the test partition
    #[arg(long)]
    split: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_parser = parse_task_arg)]
    task: Task,
    /// Write the per-sample predictions JSON here
    #[arg(long)]
    predictions_out: Option<PathBuf>,
    #[arg(long)]
    overwrite: bool,
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    if let Some(path) = &args.predictions_out {
        guard_overwrite(path, args.overwrite)?;
    }
    let model = load_checkpoint(&args.checkpoint)?;
    let data_manifest = read_manifest(&args.data.join("manifest.csv"))?;
    let cohort = match &args.cohort {
        Some(path) => read_manifest(path)?,
        None => data_manifest.clone(),
    };
    let plan: SplitPlan = serde_json::from_slice(
        &fs::read(&args.split).with_context(|| format!("reading {}", args.split.display()))?,
    )?;
    let test_subjects: HashSet<&str> = plan
        .test
        .iter()
        .map(|&i| {
            cohort
                .entries()
                .get(i)
                .map(|e| e.subject_id.as_str())
                .ok_or_else(|| {
                    cli_err(
                        "InvalidConfig",
                        format!("split row {i} is out of range for the cohort manifest"),
                    )
                })
        })
        .collect::<Result<_>>()?;

    let size = stack_size(&args.data, &data_manifest)?;
    let mut set = SampleSet::new(size[0], size[1]);
    for entry in data_manifest.entries() {
        let Some(pos) = args.task.classes().iter().position(|&c| c == entry.label) else {
            continue;
        };
        if !test_subjects.contains(entry.subject_id.as_str()) {
            continue;
        }
        let stack = slice_stack_from_volume(&read_nifti(&args.data.join(&entry.path))?)?;
        set.push(file_stem(&entry.path), pos, &stack)?;
    }

    let pred = predict(&model, &set)?;
    let actual = set.labels().to_vec();
    let scores: Option<Vec<f64>> = args
        .task
        .positive()
        .map(|p| {
            let pos = args.task.classes().iter().position(|&c| c == p).unwrap();
            pred.probs.iter().map(|row| row[pos]).collect()
        });
    let (row, _) = evaluate_predictions(
        args.task,
        &pred.model,
        &pred.labels,
        &actual,
        scores.as_deref(),
        model.meta.seed,
    )?;
    if let Some(path) = &args.predictions_out {
        let mut bytes = serde_json::to_vec_pretty(&pred)?;
        bytes.push(b'\n');
        fs::write(path, bytes)?;
    }
    to_stdout(&row)
}

// ---------------------------------------------------------------------------
// ensemble

#[derive(Args)]
struct EnsembleArgs {
    /// Prediction JSON files, one per committee member
    #[arg(long, required = true, num_args = 1..)]
    predictions: Vec<PathBuf>,
    /// Write the voted labels here instead of stdout
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    overwrite: bool,
}

fn cmd_ensemble(args: EnsembleArgs) -> Result<()> {
    let members: Vec<Prediction> = args
        .predictions
        .iter()
        .map(|path| {
            let bytes =
                fs::read(path).with_context(|| format!("reading {}", path.display()))?;
            Ok(serde_json::from_slice(&bytes)?)
        })
        .collect::<Result<_>>()?;
    let labels = majority_vote(&members)?;
    let voted = serde_json::json!({
        "models": members.iter().map(|m| m.model.as_str()).collect::<Vec<_>>(),
        "sample_ids": members[0].sample_ids,
        "labels": labels,
    });
    match &args.out {
        Some(path) => {
            guard_overwrite(path, args.overwrite)?;
            let mut bytes = serde_json::to_vec_pretty(&voted)?;
            bytes.push(b'\n');
            fs::write(path, bytes)?;
            Ok(())
        }
        None => to_stdout(&voted),
    }
}

// ---------------------------------------------------------------------------
// roc

#[derive(Args)]
struct RocArgs {
    /// Prediction JSON produced by `evaluate --predictions-out`
    #[arg(long)]
    predictions: PathBuf,
    /// Sample manifest carrying the true labels
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, value_parser = parse_task_arg)]
    task: Task,
    #[arg(long)]
    out_csv: Option<PathBuf>,
    #[arg(long)]
    out_svg: Option<PathBuf>,
    #[arg(long)]
    overwrite: bool,
}

fn cmd_roc(args: RocArgs) -> Result<()> {
    let positive = args.task.positive().ok_or_else(|| {
        cli_err(
            "InvalidConfig",
            format!("task {} has no ROC curve; pick a binary task", args.task),
        )
    })?;
    let pred: Prediction = serde_json::from_slice(
        &fs::read(&args.predictions)
            .with_context(|| format!("reading {}", args.predictions.display()))?,
    )?;
    let manifest = read_manifest(&args.manifest)?;
    let actual = labels_for_samples(&manifest, args.task, &pred.sample_ids)?;
    let pos = args
        .task
        .classes()
        .iter()
        .position(|&c| c == positive)
        .unwrap();
    let scores: Vec<f64> = pred.probs.iter().map(|row| row[pos]).collect();
    let curve = roc_curve(&scores, &actual, &pos)?;
    if let Some(path) = &args.out_csv {
        guard_overwrite(path, args.overwrite)?;
        emit_roc(&curve, path, RocFormat::Csv)?;
    }
    if let Some(path) = &args.out_svg {
        guard_overwrite(path, args.overwrite)?;
        emit_roc(&curve, path, RocFormat::Svg)?;
    }
    to_stdout(&serde_json::json!({
        "model": pred.model,
        "auc": neuroens_core::eval::auc(&curve),
        "points": curve.points().len(),
    }))
}

// ---------------------------------------------------------------------------
// run

#[derive(Args)]
struct RunArgs {
    /// Experiment config JSON; missing fields take their defaults
    #[arg(long)]
    config: PathBuf,
    /// Run directory for artifacts; an existing one resumes
    #[arg(long)]
    run: PathBuf,
    /// Discard an existing run directory first
    #[arg(long)]
    overwrite: bool,
}

fn cmd_run(args: RunArgs) -> Result<()> {
    let bytes = fs::read(&args.config)
        .with_context(|| format!("reading {}", args.config.display()))?;
    let config: ExperimentConfig = serde_json::from_slice(&bytes)
        .with_context(|| format!("parsing {}", args.config.display()))?;
    if args.overwrite && args.run.exists() {
        fs::remove_dir_all(&args.run)
            .with_context(|| format!("clearing {}", args.run.display()))?;
    }
    let report = run_experiment(&config, &args.run, &mut |line| eprintln!("{line}"))?;
    to_stdout(&report)
}

// ---------------------------------------------------------------------------
// provenance

#[derive(Args)]
struct ProvenanceArgs {
    /// Run directory to inspect
    #[arg(long)]
    run: PathBuf,
}

fn cmd_provenance(args: ProvenanceArgs) -> Result<()> {
    let (recorded, computed) = read_provenance(&args.run)?;
    let matches = recorded.config_hash == computed;
    to_stdout(&serde_json::json!({
        "version": recorded.version,
        "seed": recorded.seed,
        "config_hash": recorded.config_hash,
        "computed_hash": computed,
        "matches": matches,
    }))?;
    if !matches {
        return Err(cli_err(
            "ProvenanceMismatch",
            format!(
                "config.json hashes to {computed} but provenance records {}",
                recorded.config_hash
            ),
        ));
    }
    Ok(())
}
