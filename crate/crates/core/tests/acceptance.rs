//! Acceptance gate: one test per shipping criterion, each printing a
//! PASS/FAIL line (visible with `--nocapture`) with its tolerances
//! pinned in the code right where they are asserted. Time budgets are
//! noted per test; criterion 9 is the long pole and runs a complete
//! two-committee experiment twice.

use std::panic::AssertUnwindSafe;
use std::time::Instant;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use tempfile::tempdir;

use neuroens_core::augment::{augment_to_target, mirror, pad, rotate, MirrorAxis};
use neuroens_core::eval::{auc, confusion, roc_curve, ConfusionCounts, EvalError};
use neuroens_core::models::{
    build, infer_shapes, load_checkpoint, save_checkpoint, ModelKind, NetworkSpec, RowKind,
    TrainedModel,
};
use neuroens_core::nn::{
    grad_check, GradCheckConfig, LayerSpec, LossKind, Mode, Network, NnError, Padding, Tensor,
};
use neuroens_core::phantom::{generate_phantom, PhantomSpec};
use neuroens_core::pipeline::{
    assemble_sets, kfold, labels_for_samples, majority_vote, predict, run_experiment,
    split_dataset, ExperimentConfig, Prediction, SplitPlan, Task,
};
use neuroens_core::preprocess::{
    apply_transform, correct_bias, estimate_bias, register, segment_tissues, AffineTransform,
    RegistrationConfig, RegistrationMode, TissueClass,
};
use neuroens_core::util::{derive_seed2, worker_pool};
use neuroens_core::volume::{
    read_nifti, write_nifti, ClassLabel, DatasetManifest, ManifestEntry, Provenance, SliceStack,
    Volume3D,
};

/// Runs one criterion body and prints its verdict line.
fn criterion<F: FnOnce()>(id: usize, name: &str, body: F) {
    let started = Instant::now();
    match std::panic::catch_unwind(AssertUnwindSafe(body)) {
        Ok(()) => println!(
            "criterion {id:02} ({name}): PASS ({:.1}s)",
            started.elapsed().as_secs_f64()
        ),
        Err(cause) => {
            println!("criterion {id:02} ({name}): FAIL");
            std::panic::resume_unwind(cause);
        }
    }
}

fn bits(data: &[f32]) -> Vec<u32> {
    data.iter().map(|v| v.to_bits()).collect()
}

/// Standard normal draw (Box-Muller).
fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

// ---------------------------------------------------------------------------
// 1. The reference architecture traces to the published table. (< 1 s)

#[test]
fn criterion_01_published_shape_trace() {
    criterion(1, "published shape trace", || {
        let spec = build(ModelKind::CustomCnn, [176, 208, 3], 4, 1.0).unwrap();
        let rows = infer_shapes(&spec).unwrap();
        let expected: [(RowKind, &[usize]); 18] = [
            (RowKind::Input, &[176, 208, 3]),
            (RowKind::Conv, &[176, 208, 16]),
            (RowKind::Conv, &[176, 208, 16]),
            (RowKind::MaxPool, &[88, 104, 16]),
            (RowKind::Sequential, &[44, 52, 32]),
            (RowKind::Sequential, &[22, 26, 64]),
            (RowKind::Sequential, &[11, 13, 128]),
            (RowKind::Dropout, &[11, 13, 128]),
            (RowKind::Conv, &[11, 13, 256]),
            (RowKind::Conv, &[11, 13, 256]),
            (RowKind::MaxPool, &[5, 6, 256]),
            (RowKind::Dropout, &[5, 6, 256]),
            (RowKind::Flatten, &[7680]),
            (RowKind::Sequential, &[512]),
            (RowKind::Sequential, &[128]),
            (RowKind::Sequential, &[64]),
            (RowKind::Sequential, &[32]),
            (RowKind::Dense, &[4]),
        ];
        assert_eq!(rows.len(), expected.len(), "row count");
        for (i, (row, (kind, output))) in rows.iter().zip(&expected).enumerate() {
            assert_eq!(row.kind, *kind, "row {i} kind");
            assert_eq!(row.output, *output, "row {i} output shape");
        }
        for pair in rows.windows(2) {
            assert_eq!(pair[1].input, pair[0].output, "shapes must chain");
        }
    });
}

// ---------------------------------------------------------------------------
// 2. Analytic gradients agree with 64-bit central differences for every
//    layer kind and for each full architecture at multiplier 1/8;
//    dropout networks are checked in eval mode. (< 60 s)

const GRAD_TOL: f64 = 1e-4;

fn patterned_input(shape: &[usize]) -> Tensor<f32> {
    let numel: usize = shape.iter().product();
    let data = (0..numel)
        .map(|i| ((i * 37 + 11) % 29) as f32 * 0.05 - 0.7)
        .collect();
    Tensor::from_vec(shape, data).unwrap()
}

fn check_layers(
    name: &str,
    input: [usize; 3],
    layers: Vec<LayerSpec>,
    loss: LossKind,
    labels: &[usize],
) {
    let net = Network::<f32>::new(input, layers, 17).unwrap();
    let x = patterned_input(&[labels.len(), input[0], input[1], input[2]]);
    let worst = grad_check(&net, &x, labels, loss, Mode::Eval, &GradCheckConfig::default())
        .unwrap();
    assert!(worst < GRAD_TOL, "{name}: worst relative error {worst}");
}

#[test]
fn criterion_02_analytic_gradients() {
    criterion(2, "analytic gradients", || {
        // One micro network per layer kind.
        check_layers(
            "conv same + relu",
            [5, 6, 2],
            vec![
                LayerSpec::Conv2d {
                    out_channels: 3,
                    kernel_h: 3,
                    kernel_w: 3,
                    stride: 1,
                    padding: Padding::Same,
                },
                LayerSpec::Relu,
                LayerSpec::Flatten,
                LayerSpec::Dense { out_units: 2 },
                LayerSpec::Softmax,
            ],
            LossKind::CrossEntropy,
            &[0, 1],
        );
        check_layers(
            "conv valid stride 2",
            [7, 7, 2],
            vec![
                LayerSpec::Conv2d {
                    out_channels: 2,
                    kernel_h: 3,
                    kernel_w: 3,
                    stride: 2,
                    padding: Padding::Valid,
                },
                LayerSpec::Flatten,
                LayerSpec::Dense { out_units: 2 },
                LayerSpec::Softmax,
            ],
            LossKind::CrossEntropy,
            &[1, 0],
        );
        check_layers(
            "max pool",
            [6, 6, 2],
            vec![
                LayerSpec::Conv2d {
                    out_channels: 2,
                    kernel_h: 3,
                    kernel_w: 3,
                    stride: 1,
                    padding: Padding::Same,
                },
                LayerSpec::MaxPool2d { pool: 2, stride: 2 },
                LayerSpec::Flatten,
                LayerSpec::Dense { out_units: 2 },
                LayerSpec::Softmax,
            ],
            LossKind::CrossEntropy,
            &[0, 1],
        );
        check_layers(
            "sigmoid head",
            [1, 1, 4],
            vec![
                LayerSpec::Flatten,
                LayerSpec::Dense { out_units: 4 },
                LayerSpec::Relu,
                LayerSpec::Dense { out_units: 2 },
                LayerSpec::Sigmoid,
            ],
            LossKind::BinaryCrossEntropy,
            &[1, 0],
        );
        check_layers(
            "dropout (eval) + dense",
            [1, 1, 6],
            vec![
                LayerSpec::Flatten,
                LayerSpec::Dropout { rate: 0.5 },
                LayerSpec::Dense { out_units: 3 },
                LayerSpec::Softmax,
            ],
            LossKind::CrossEntropy,
            &[2, 0],
        );

        // Checking dropout in train mode must be refused, not fudged.
        let dropout_net = Network::<f32>::new(
            [1, 1, 4],
            vec![
                LayerSpec::Flatten,
                LayerSpec::Dropout { rate: 0.5 },
                LayerSpec::Dense { out_units: 2 },
                LayerSpec::Softmax,
            ],
            3,
        )
        .unwrap();
        let err = grad_check(
            &dropout_net,
            &patterned_input(&[1, 1, 1, 4]),
            &[0],
            LossKind::CrossEntropy,
            Mode::Train,
            &GradCheckConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, NnError::CheckRequiresEvalMode));

        // Every full architecture at the desk-scale width multiplier.
        for (kind, input) in [
            (ModelKind::CustomCnn, [44, 52, 3]),
            (ModelKind::Vgg16, [44, 52, 3]),
            (ModelKind::Alexnet, [176, 208, 3]),
        ] {
            let spec = build(kind, input, 2, 0.125).unwrap();
            let net = spec.build(11).unwrap();
            let x = patterned_input(&[1, input[0], input[1], input[2]]);
            let worst = grad_check(
                &net,
                &x,
                &[1],
                spec.loss(),
                Mode::Eval,
                &GradCheckConfig { samples_per_tensor: 6, ..GradCheckConfig::default() },
            )
            .unwrap();
            assert!(worst < GRAD_TOL, "{kind}: worst relative error {worst}");
        }
    });
}

// ---------------------------------------------------------------------------
// 3. Trapezoidal AUC equals the rank-pair count on random instances with
//    ties; degenerate score patterns hit 0.5 and 1.0 exactly. (< 10 s)

const AUC_TOL: f64 = 1e-12;

fn pair_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &li) in labels.iter().enumerate() {
        if li != 1 {
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj == 1 {
                continue;
            }
            pairs += 1.0;
            if scores[i] > scores[j] {
                wins += 1.0;
            } else if scores[i] == scores[j] {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

#[test]
fn criterion_03_auc_equals_pair_counting() {
    criterion(3, "AUC equals pair counting", || {
        let mut rng = ChaCha8Rng::seed_from_u64(0xA0C);
        for trial in 0..500 {
            let n = rng.random_range(2..=200);
            let mut labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2) as u8).collect();
            labels[0] = 1;
            labels[1] = 0;
            labels.shuffle(&mut rng);
            // Two thirds of the instances draw scores from an 11-point
            // grid so tie groups are common.
            let coarse = trial % 3 != 0;
            let scores: Vec<f64> = (0..n)
                .map(|_| {
                    if coarse {
                        rng.random_range(0..=10) as f64 / 10.0
                    } else {
                        rng.random()
                    }
                })
                .collect();
            let a = auc(&roc_curve(&scores, &labels, &1).unwrap());
            let b = pair_auc(&scores, &labels);
            assert!(
                (a - b).abs() <= AUC_TOL,
                "trial {trial}: trapezoid {a} vs pairs {b}"
            );
        }

        // All-equal scores: exactly chance.
        let labels = [1u8, 0, 1, 0, 1, 0, 0];
        let flat = [0.7f64; 7];
        assert_eq!(auc(&roc_curve(&flat, &labels, &1).unwrap()), 0.5);

        // Perfect separation: exactly one.
        let separated = [0.9, 0.1, 0.8, 0.2, 0.95, 0.3, 0.4];
        assert_eq!(auc(&roc_curve(&separated, &labels, &1).unwrap()), 1.0);
    });
}

// ---------------------------------------------------------------------------
// 4. Confusion-derived metrics match their formulas over an exhaustive
//    sweep of small matrices; zero denominators are undefined. (< 5 s)

const METRIC_TOL: f64 = 1e-12;

#[test]
fn criterion_04_metric_formulas() {
    criterion(4, "metric formulas", || {
        for tp in 0usize..=6 {
            for tn in 0usize..=6 {
                for fp in 0usize..=6 {
                    for fun in 0usize..=6 {
                        let total = tp + tn + fp + fun;
                        let mut predicted = Vec::with_capacity(total);
                        let mut actual = Vec::with_capacity(total);
                        for _ in 0..tp {
                            predicted.push(1u8);
                            actual.push(1u8);
                        }
                        for _ in 0..fp {
                            predicted.push(1);
                            actual.push(0);
                        }
                        for _ in 0..fun {
                            predicted.push(0);
                            actual.push(1);
                        }
                        for _ in 0..tn {
                            predicted.push(0);
                            actual.push(0);
                        }
                        if total == 0 {
                            assert!(matches!(
                                confusion(&predicted, &actual, &1),
                                Err(EvalError::Empty)
                            ));
                            continue;
                        }
                        let c = confusion(&predicted, &actual, &1).unwrap();
                        assert_eq!(c, ConfusionCounts::new(tp, tn, fp, fun));

                        let acc = c.accuracy().unwrap();
                        assert!(
                            (acc - (tp + tn) as f64 / total as f64).abs() <= METRIC_TOL,
                            "accuracy at {tp}/{tn}/{fp}/{fun}"
                        );
                        match c.precision() {
                            None => assert_eq!(tp + fp, 0, "precision must be undefined"),
                            Some(p) => assert!(
                                (p - tp as f64 / (tp + fp) as f64).abs() <= METRIC_TOL,
                                "precision at {tp}/{tn}/{fp}/{fun}"
                            ),
                        }
                        match c.recall() {
                            None => assert_eq!(tp + fun, 0, "recall must be undefined"),
                            Some(r) => assert!(
                                (r - tp as f64 / (tp + fun) as f64).abs() <= METRIC_TOL,
                                "recall at {tp}/{tn}/{fp}/{fun}"
                            ),
                        }
                    }
                }
            }
        }
    });
}

// ---------------------------------------------------------------------------
// 5. Majority voting: equals the median voter on random binary
//    3-committees, preserves unanimity for 1/3/5 members, and the
//    mean-probability tie-break picks the agreed winner. (< 5 s)

fn prediction_from_probs(model: &str, rows: &[Vec<f64>]) -> Prediction {
    let labels = rows
        .iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0
        })
        .collect();
    Prediction {
        model: model.to_string(),
        sample_ids: (0..rows.len()).map(|i| format!("s{i}")).collect(),
        probs: rows.to_vec(),
        labels,
    }
}

#[test]
fn criterion_05_committee_voting() {
    criterion(5, "committee voting", || {
        let mut rng = ChaCha8Rng::seed_from_u64(0x505);

        // Binary three-member committees match the per-sample median.
        for trial in 0..10_000 {
            let n = rng.random_range(1..=12);
            let members: Vec<Prediction> = (0..3)
                .map(|m| {
                    let rows: Vec<Vec<f64>> = (0..n)
                        .map(|_| {
                            let p: f64 = rng.random();
                            vec![1.0 - p, p]
                        })
                        .collect();
                    prediction_from_probs(&format!("m{m}"), &rows)
                })
                .collect();
            let voted = majority_vote(&members).unwrap();
            for i in 0..n {
                let mut votes: Vec<usize> =
                    members.iter().map(|p| p.labels[i]).collect();
                votes.sort_unstable();
                assert_eq!(voted[i], votes[1], "trial {trial} sample {i}: not the median");
            }
        }

        // Unanimity survives any committee size used here.
        for trial in 0..10_000 {
            let m = *[1usize, 3, 5].choose(&mut rng).unwrap();
            let n = rng.random_range(1..=10);
            let classes = rng.random_range(2..=4);
            let wanted: Vec<usize> =
                (0..n).map(|_| rng.random_range(0..classes)).collect();
            let members: Vec<Prediction> = (0..m)
                .map(|k| {
                    let rows: Vec<Vec<f64>> = wanted
                        .iter()
                        .map(|&label| {
                            let confident: f64 = rng.random_range(0.5..0.99);
                            let rest = (1.0 - confident) / (classes - 1) as f64;
                            (0..classes)
                                .map(|c| if c == label { confident } else { rest })
                                .collect()
                        })
                        .collect();
                    prediction_from_probs(&format!("m{k}"), &rows)
                })
                .collect();
            assert_eq!(
                majority_vote(&members).unwrap(),
                wanted,
                "trial {trial}: unanimity broken for {m} members"
            );
        }

        // Vote tie between three classes: the highest mean probability
        // across the committee decides (class 3 here: 0.45 beats 0.40
        // and 0.38).
        let members = vec![
            prediction_from_probs("a", &[vec![0.70, 0.10, 0.10, 0.10]]),
            prediction_from_probs("b", &[vec![0.20, 0.10, 0.10, 0.60]]),
            prediction_from_probs("c", &[vec![0.30, 0.94, 0.05, 0.65]]),
        ];
        assert_eq!(members[2].labels, vec![1], "third voter backs class 1");
        assert_eq!(majority_vote(&members).unwrap(), vec![3]);
    });
}

// ---------------------------------------------------------------------------
// 6. Rigid registration recovers a known (3.0, -1.5, 1.5) mm shift plus
//    a 5 degree rotation within half a voxel and one degree on twenty
//    seeded 64^3 phantoms. (< 2 min on 4 cores)

const TRANS_TOL_MM: f64 = 0.75; // half of the 1.5 mm voxel pitch
const ROT_TOL_DEG: f64 = 1.0;

#[test]
fn criterion_06_rigid_recovery() {
    criterion(6, "rigid recovery", || {
        let trials: Vec<u64> = (0..20).collect();
        let failures: Vec<String> = worker_pool().install(|| {
            trials
                .par_iter()
                .filter_map(|&trial| {
                    let spec = PhantomSpec {
                        noise_sigma: 0.02,
                        jitter: false,
                        ..PhantomSpec::new(ClassLabel::Cn, 1000 + trial)
                    };
                    let fixed = generate_phantom(&spec).unwrap().0;
                    let d = fixed.dims();
                    let lo = fixed.voxel_center_mm(0, 0, 0);
                    let hi = fixed.voxel_center_mm(d[0] - 1, d[1] - 1, d[2] - 1);
                    let center = [
                        (lo[0] + hi[0]) / 2.0,
                        (lo[1] + hi[1]) / 2.0,
                        (lo[2] + hi[2]) / 2.0,
                    ];
                    let true_t = AffineTransform::rigid(
                        [0.0, 0.0, 5f64.to_radians()],
                        [3.0, -1.5, 1.5],
                        center,
                    );
                    let moving = apply_transform(&fixed, &true_t, &fixed);
                    let result = register(
                        &moving,
                        &fixed,
                        RegistrationMode::Rigid,
                        &RegistrationConfig::default(),
                    )
                    .unwrap();
                    // Perfect recovery inverts the applied motion, so the
                    // composition should be the identity.
                    let residual = result.transform.compose(&true_t);
                    let moved = residual.apply(center);
                    let trans = ((moved[0] - center[0]).powi(2)
                        + (moved[1] - center[1]).powi(2)
                        + (moved[2] - center[2]).powi(2))
                    .sqrt();
                    let rot = residual.rotation_angle_deg();
                    (trans > TRANS_TOL_MM || rot > ROT_TOL_DEG)
                        .then(|| format!("trial {trial}: {trans:.3} mm, {rot:.3} deg"))
                })
                .collect()
        });
        assert!(failures.is_empty(), "recovery out of tolerance: {failures:?}");
    });
}

// ---------------------------------------------------------------------------
// 7. A two-component mixture fit on a 30/200 (sigma 5) blend agrees with
//    the true-parameter Bayes labeling on at least 99% of voxels, and
//    the EM log-likelihood never decreases. (< 1 min)

const SEG_AGREEMENT: f64 = 0.99;
const LL_SLACK: f64 = 1e-9;

#[test]
fn criterion_07_mixture_segmentation() {
    criterion(7, "mixture segmentation", || {
        let mut rng = ChaCha8Rng::seed_from_u64(0x6E);
        let n = 40usize;
        let voxels = n * n * n;
        let mut data = Vec::with_capacity(voxels);
        let mut oracle = Vec::with_capacity(voxels);
        for _ in 0..voxels {
            let low = rng.random::<bool>();
            let mean = if low { 30.0 } else { 200.0 };
            let v = mean + 5.0 * normal(&mut rng);
            data.push(v as f32);
            // Equal weights and variances: the Bayes rule is the
            // midpoint threshold.
            oracle.push(usize::from(v >= 115.0));
        }
        let vol = Volume3D::new([n, n, n], [1.0; 3], [0.0; 3], data).unwrap();
        let (tissue, fit) = segment_tissues(&vol, 2, 9).unwrap();

        let agree = (0..voxels)
            .filter(|&v| tissue.argmax_component(v) == oracle[v])
            .count() as f64
            / voxels as f64;
        assert!(
            agree >= SEG_AGREEMENT,
            "only {agree:.4} agreement with the Bayes labeling"
        );

        assert!(fit.log_likelihood.len() >= 2, "EM should iterate");
        for (i, w) in fit.log_likelihood.windows(2).enumerate() {
            assert!(
                w[1] >= w[0] - LL_SLACK,
                "log-likelihood fell at iteration {}: {} -> {}",
                i + 1,
                w[0],
                w[1]
            );
        }
    });
}

// ---------------------------------------------------------------------------
// 8. A 0.8 -> 1.2 multiplicative intensity ramp is estimated on a single
//    tissue class (white matter, so within-mask log variation is the ramp
//    alone) and divided out of the whole head, restoring the clean phantom
//    to within 2% relative RMS. The field is unit-mean over its estimation
//    mask, which leaves an arbitrary global scale; shapes are compared
//    after normalizing both volumes to their head means. (< 30 s)

const BIAS_RMS_TOL: f64 = 0.02;

#[test]
fn criterion_08_bias_ramp_correction() {
    criterion(8, "bias ramp correction", || {
        let spec = PhantomSpec {
            dims: [48, 48, 48],
            noise_sigma: 0.0,
            jitter: false,
            ..PhantomSpec::new(ClassLabel::Cn, 21)
        };
        let (clean, tissue) = generate_phantom(&spec).unwrap();
        let dims = clean.dims();

        let ramp = |x: usize| 0.8 + 0.4 * x as f64 / (dims[0] - 1) as f64;
        let mut biased = Vec::with_capacity(clean.voxel_count());
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    biased.push((f64::from(clean.at(x, y, z)) * ramp(x)) as f32);
                }
            }
        }
        let biased =
            Volume3D::new(dims, clean.spacing(), clean.origin(), biased).unwrap();
        let wm: Vec<f32> = (0..clean.voxel_count())
            .map(|v| {
                if tissue.class_posterior(v, TissueClass::WhiteMatter) >= 0.5 {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        let mask = Volume3D::new(dims, clean.spacing(), clean.origin(), wm).unwrap();

        // Order 1: log of a linear ramp is nearly linear over [0.8, 1.2];
        // the residual curvature is what the 2% budget absorbs.
        let field = estimate_bias(&biased, 1, Some(&mask)).unwrap();
        let corrected = correct_bias(&biased, &field).unwrap();

        let head: Vec<usize> = clean
            .data()
            .iter()
            .enumerate()
            .filter(|&(_, &v)| v > 0.0)
            .map(|(i, _)| i)
            .collect();
        let mean_of = |vol: &Volume3D| {
            head.iter().map(|&i| f64::from(vol.data()[i])).sum::<f64>()
                / head.len() as f64
        };
        let scale = mean_of(&corrected) / mean_of(&clean);

        let mut sum_sq = 0.0f64;
        for &i in &head {
            let truth = f64::from(clean.data()[i]);
            let rel = f64::from(corrected.data()[i]) / (scale * truth) - 1.0;
            sum_sq += rel * rel;
        }
        let rms = (sum_sq / head.len() as f64).sqrt();
        assert!(rms <= BIAS_RMS_TOL, "relative RMS after correction: {rms:.4}");
    });
}

// ---------------------------------------------------------------------------
// 9. A complete CN-vs-AD experiment (40 subjects per class, three
//    committee members at width 1/8) gets every member to at least 90%
//    test accuracy, obeys the voting invariants on the test set, and a
//    rerun in a fresh directory reproduces report.json byte for byte.
//    (<= 30 min on 4 cores)

const MIN_MODEL_ACCURACY: f64 = 0.90;

fn acceptance_experiment_config() -> ExperimentConfig {
    ExperimentConfig {
        task: Task::AdVsCn,
        models: vec![ModelKind::CustomCnn, ModelKind::Vgg16, ModelKind::Alexnet],
        epochs: 12,
        batch_size: 16,
        // The default 0.5 dropout is sized for full-width networks; at
        // width 1/8 it pins the custom CNN (32-float bottleneck) to
        // chance, so the committee trains with a lighter rate.
        dropout: Some(0.1),
        subjects_per_class: 40,
        width_multiplier: 0.125,
        input_size: [44, 52],
        alexnet_input_size: [176, 208],
        seed: 4242,
        ..ExperimentConfig::default()
    }
}

#[test]
fn criterion_09_end_to_end_ensemble() {
    criterion(9, "end-to-end ensemble", || {
        let config = acceptance_experiment_config();
        let dir = tempdir().unwrap();
        let run_a = dir.path().join("a");
        let mut log = |line: &str| eprintln!("[e2e] {line}");
        let report = run_experiment(&config, &run_a, &mut log).unwrap();

        // 16 test subjects (20% of 80), three slices each.
        for row in &report.rows {
            assert_eq!(row.n, 48, "{}: unexpected test-set size", row.model);
        }
        assert_eq!(report.rows.len(), config.models.len() + 1);
        assert!(report.rows.iter().any(|r| r.model == "ensemble"));
        for row in report.rows.iter().filter(|r| r.model != "ensemble") {
            let acc = row.accuracy.expect("test accuracy is defined");
            assert!(
                acc >= MIN_MODEL_ACCURACY,
                "{} reached only {acc:.3} test accuracy",
                row.model
            );
        }

        // Reload the checkpoints and re-predict the test partition to
        // check the committee invariants sample by sample.
        let cohort =
            DatasetManifest::read_csv(&run_a.join("phantom/manifest.csv")).unwrap();
        let plan: SplitPlan = serde_json::from_slice(
            &std::fs::read(run_a.join("split.json")).unwrap(),
        )
        .unwrap();
        let mut members: Vec<Prediction> = Vec::new();
        for &kind in &config.models {
            let size = config.input_for(kind);
            let data_dir = run_a.join(format!("preprocessed/{}x{}", size[0], size[1]));
            let sets = assemble_sets(
                &data_dir,
                &cohort,
                &plan,
                config.task,
                config.augment_factor,
                config.seed,
                size,
            )
            .unwrap();
            let model =
                load_checkpoint(&run_a.join(format!("checkpoints/{kind}.ckpt"))).unwrap();
            members.push(predict(&model, &sets.test).unwrap());
        }
        let ensemble = majority_vote(&members).unwrap();
        let first_size = config.input_for(config.models[0]);
        let sample_manifest = DatasetManifest::read_csv(
            &run_a.join(format!("preprocessed/{}x{}/manifest.csv", first_size[0], first_size[1])),
        )
        .unwrap();
        let actual =
            labels_for_samples(&sample_manifest, config.task, &members[0].sample_ids)
                .unwrap();
        for i in 0..ensemble.len() {
            let votes: Vec<usize> = members.iter().map(|p| p.labels[i]).collect();
            if votes.iter().all(|&v| v == votes[0]) {
                assert_eq!(
                    ensemble[i], votes[0],
                    "sample {i}: unanimous committee overruled"
                );
            }
            if ensemble[i] != actual[i] {
                let wrong = votes.iter().filter(|&&v| v != actual[i]).count();
                assert!(
                    wrong >= 2,
                    "sample {i}: ensemble error without a wrong majority"
                );
            }
        }

        // A fresh directory must reproduce the report byte for byte.
        let bytes_a = std::fs::read(run_a.join("report.json")).unwrap();
        let run_b = dir.path().join("b");
        let report_b = run_experiment(&config, &run_b, &mut log).unwrap();
        let bytes_b = std::fs::read(run_b.join("report.json")).unwrap();
        assert_eq!(report.rows.len(), report_b.rows.len());
        assert_eq!(bytes_a, bytes_b, "rerun changed report.json");
    });
}

// ---------------------------------------------------------------------------
// 10. Augmenting class counts (96, 89, 87, 91) to 8352 yields exactly
//     8352 samples per class, spreads replicas evenly (per-original
//     counts within one of each other), and passes originals through
//     bit-exact. (< 1 min)

const CLASS_COUNTS: [usize; 4] = [96, 89, 87, 91];
const AUGMENT_TARGET: usize = 8352;

fn patterned_stack(class: usize, index: usize) -> SliceStack {
    let (h, w) = (8usize, 9usize);
    let data = (0..h * w * SliceStack::CHANNELS)
        .map(|i| ((i * 31 + index * 7 + class * 3) % 17) as f32 / 16.0)
        .collect();
    SliceStack::new(h, w, data).unwrap()
}

#[test]
fn criterion_10_augmentation_balance() {
    criterion(10, "augmentation balance", || {
        // The op identities the roster relies on: a double mirror, a zero
        // rotation, and a zero pad each return the input bit for bit.
        let probe = patterned_stack(0, 7);
        for axis in [MirrorAxis::H, MirrorAxis::V] {
            let twice = mirror(&mirror(&probe, axis), axis);
            assert_eq!(bits(twice.data()), bits(probe.data()), "double mirror");
        }
        let zero_rot = rotate(&probe, 0.0).unwrap();
        assert_eq!(bits(zero_rot.data()), bits(probe.data()), "rotate(0)");
        let zero_pad = pad(&probe, (0, 0, 0, 0), 0.0);
        assert_eq!(bits(zero_pad.data()), bits(probe.data()), "pad(0)");

        for (class, &count) in CLASS_COUNTS.iter().enumerate() {
            let originals: Vec<SliceStack> =
                (0..count).map(|i| patterned_stack(class, i)).collect();
            let roster = augment_to_target(
                &originals,
                AUGMENT_TARGET,
                derive_seed2(33, class as u64, 0xA6),
            )
            .unwrap();
            assert_eq!(roster.len(), AUGMENT_TARGET, "class {class} roster size");

            // The originals lead the roster, untouched.
            let identities = roster.iter().filter(|s| s.ops.is_empty()).count();
            assert_eq!(identities, count, "class {class}: identity count");
            for (i, sample) in roster.iter().take(count).enumerate() {
                assert!(sample.ops.is_empty(), "class {class} original {i} has ops");
                assert_eq!(sample.source_index, i);
                assert_eq!(
                    bits(sample.stack.data()),
                    bits(originals[i].data()),
                    "class {class} original {i} not bit-exact"
                );
            }

            // Replica load differs by at most one across originals.
            let mut per_source = vec![0usize; count];
            for sample in roster.iter().skip(count) {
                assert!(!sample.ops.is_empty(), "replica without ops");
                per_source[sample.source_index] += 1;
            }
            let lo = *per_source.iter().min().unwrap();
            let hi = *per_source.iter().max().unwrap();
            assert!(
                hi - lo <= 1,
                "class {class}: replica spread {lo}..{hi} exceeds one"
            );
        }
    });
}

// ---------------------------------------------------------------------------
// 11. Volume and checkpoint files roundtrip bit-exact across 200
//     randomized trials each, and split/fold plans never divide a
//     subject across partitions over a thousand random manifests. (< 30 s)

#[test]
fn criterion_11_roundtrips_and_atomicity() {
    criterion(11, "roundtrips and split atomicity", || {
        let dir = tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0x11);

        // Volume files: dims, spacing, origin, and every voxel bit.
        for trial in 0..200 {
            let dims = [
                rng.random_range(1..=10),
                rng.random_range(1..=10),
                rng.random_range(1..=10),
            ];
            let spacing = [
                rng.random_range(0.3f32..3.0),
                rng.random_range(0.3f32..3.0),
                rng.random_range(0.3f32..3.0),
            ];
            let origin = [
                rng.random_range(-50.0f32..50.0),
                rng.random_range(-50.0f32..50.0),
                rng.random_range(-50.0f32..50.0),
            ];
            let voxels = dims[0] * dims[1] * dims[2];
            let data: Vec<f32> = (0..voxels)
                .map(|i| match i % 7 {
                    0 => 0.0,
                    1 => -0.0,
                    2 => f32::MIN_POSITIVE,
                    _ => rng.random_range(-1e3f32..1e3),
                })
                .collect();
            let vol = Volume3D::new(dims, spacing, origin, data).unwrap();
            let path = dir.path().join(format!("vol{trial}.nii"));
            write_nifti(&path, &vol).unwrap();
            let back = read_nifti(&path).unwrap();
            assert_eq!(back.dims(), vol.dims(), "trial {trial} dims");
            assert_eq!(bits(&back.spacing()), bits(&vol.spacing()), "trial {trial} spacing");
            assert_eq!(bits(&back.origin()), bits(&vol.origin()), "trial {trial} origin");
            assert_eq!(bits(back.data()), bits(vol.data()), "trial {trial} data");
        }

        // Checkpoints: spec, metadata, and every parameter bit.
        for trial in 0..200u64 {
            let features = rng.random_range(1..=6);
            let hidden = rng.random_range(1..=8);
            let classes = rng.random_range(2..=4);
            let spec = NetworkSpec {
                name: ModelKind::CustomCnn,
                input: [1, 1, features],
                num_classes: classes,
                width_multiplier: 1.0,
                layers: vec![
                    LayerSpec::Flatten,
                    LayerSpec::Dense { out_units: hidden },
                    LayerSpec::Relu,
                    LayerSpec::Dense { out_units: classes },
                    LayerSpec::Softmax,
                ],
            };
            let mut model = TrainedModel::fresh(spec, trial).unwrap();
            model.meta.epochs = rng.random_range(0..100);
            model.meta.metrics.insert("loss".to_string(), rng.random());
            model
                .meta
                .metrics
                .insert("accuracy".to_string(), rng.random());
            let path = dir.path().join(format!("ckpt{trial}.ckpt"));
            save_checkpoint(&model, &path).unwrap();
            let back = load_checkpoint(&path).unwrap();
            assert_eq!(back.spec, model.spec, "trial {trial} spec");
            assert_eq!(back.meta, model.meta, "trial {trial} meta");
            assert_eq!(
                bits(&back.network.flatten_params()),
                bits(&model.network.flatten_params()),
                "trial {trial} parameters"
            );
        }

        // The real architectures roundtrip too.
        for (kind, input) in [
            (ModelKind::CustomCnn, [44, 52, 3]),
            (ModelKind::Vgg16, [44, 52, 3]),
            (ModelKind::Alexnet, [176, 208, 3]),
        ] {
            let spec = build(kind, input, 2, 0.125).unwrap();
            let model = TrainedModel::fresh(spec, 5).unwrap();
            let path = dir.path().join(format!("{kind}.ckpt"));
            save_checkpoint(&model, &path).unwrap();
            let back = load_checkpoint(&path).unwrap();
            assert_eq!(
                bits(&back.network.flatten_params()),
                bits(&model.network.flatten_params()),
                "{kind} parameters"
            );
        }

        // Split and fold plans keep each subject in exactly one bucket.
        for trial in 0..1000u64 {
            let subjects = rng.random_range(5..=40);
            let mut entries = Vec::new();
            for s in 0..subjects {
                let label = match rng.random_range(0..4) {
                    0 => ClassLabel::Cn,
                    1 => ClassLabel::Pmci,
                    2 => ClassLabel::Smci,
                    _ => ClassLabel::Ad,
                };
                for r in 0..rng.random_range(1..=4) {
                    entries.push(ManifestEntry {
                        path: format!("s{s}_r{r}.nii"),
                        label,
                        subject_id: format!("subj{s}"),
                        provenance: Provenance::Original,
                        ops: String::new(),
                    });
                }
            }
            let manifest = DatasetManifest::new(entries).unwrap();
            let rows = manifest.len();
            let subject_of = |i: usize| manifest.entries()[i].subject_id.clone();

            let plan = split_dataset(&manifest, (0.6, 0.2, 0.2), trial).unwrap();
            let mut seen = vec![false; rows];
            for part in [&plan.train, &plan.val, &plan.test] {
                for &i in part {
                    assert!(!seen[i], "trial {trial}: row {i} in two partitions");
                    seen[i] = true;
                }
            }
            assert!(seen.iter().all(|&s| s), "trial {trial}: dropped rows");
            let subj_sets: Vec<std::collections::HashSet<String>> =
                [&plan.train, &plan.val, &plan.test]
                    .iter()
                    .map(|part| part.iter().map(|&i| subject_of(i)).collect())
                    .collect();
            for a in 0..3 {
                for b in a + 1..3 {
                    assert!(
                        subj_sets[a].is_disjoint(&subj_sets[b]),
                        "trial {trial}: subject split across partitions"
                    );
                }
            }

            let k = rng.random_range(2..=subjects.min(8));
            let folds = kfold(&manifest, k, trial).unwrap();
            let mut seen = vec![false; rows];
            for fold in &folds.folds {
                for &i in fold {
                    assert!(!seen[i], "trial {trial}: row {i} in two folds");
                    seen[i] = true;
                }
            }
            assert!(seen.iter().all(|&s| s), "trial {trial}: rows missing from folds");
            let fold_subjects: Vec<std::collections::HashSet<String>> = folds
                .folds
                .iter()
                .map(|fold| fold.iter().map(|&i| subject_of(i)).collect())
                .collect();
            for a in 0..fold_subjects.len() {
                for b in a + 1..fold_subjects.len() {
                    assert!(
                        fold_subjects[a].is_disjoint(&fold_subjects[b]),
                        "trial {trial}: subject split across folds {a} and {b}"
                    );
                }
            }
        }
    });
}
