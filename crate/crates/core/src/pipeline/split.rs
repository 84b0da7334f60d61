//! Subject-level dataset partitioning.
//!
//! Splits operate on subjects, never on rows: every row sharing a
//! `subject_id` lands in the same partition, so augmented copies and
//! multiple slices of one scan can never leak between train and test.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::pipeline::PipelineError;
use crate::volume::DatasetManifest;

/// Row indices of one train/validation/test partition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
}

/// Row indices of `k` subject-disjoint folds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub folds: Vec<Vec<usize>>,
    pub seed: u64,
}

/// Distinct subjects in first-appearance order.
fn subject_order(manifest: &DatasetManifest) -> Vec<String> {
    let mut seen = std::collections::HashSet::new();
    let mut subjects = Vec::new();
    for entry in manifest.entries() {
        if seen.insert(entry.subject_id.clone()) {
            subjects.push(entry.subject_id.clone());
        }
    }
    subjects
}

/// Row indices belonging to any subject in `subjects`, in manifest order.
fn rows_of(manifest: &DatasetManifest, subjects: &[String]) -> Vec<usize> {
    let set: std::collections::HashSet<&str> = subjects.iter().map(String::as_str).collect();
    manifest
        .entries()
        .iter()
        .enumerate()
        .filter(|(_, e)| set.contains(e.subject_id.as_str()))
        .map(|(i, _)| i)
        .collect()
}

/// Partitions a manifest into train/validation/test by subject.
///
/// Subjects are shuffled once with a seeded generator, then the first
/// `floor(test_ratio * S)` become the test set, the next
/// `floor(val_ratio * S)` the validation set, and the remainder train.
/// Ratios are `(train, val, test)` and must sum to 1.
pub fn split_dataset(
    manifest: &DatasetManifest,
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<SplitPlan, PipelineError> {
    let (train_r, val_r, test_r) = ratios;
    let sum = train_r + val_r + test_r;
    if (sum - 1.0).abs() > 1e-9 || train_r <= 0.0 || val_r < 0.0 || test_r < 0.0 {
        return Err(PipelineError::InvalidRatios { sum });
    }
    if manifest.is_empty() {
        return Err(PipelineError::EmptyManifest);
    }

    let mut subjects = subject_order(manifest);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    subjects.shuffle(&mut rng);

    let s = subjects.len();
    let n_test = (test_r * s as f64).floor() as usize;
    let n_val = (val_r * s as f64).floor() as usize;
    let (test_subj, rest) = subjects.split_at(n_test);
    let (val_subj, train_subj) = rest.split_at(n_val);

    Ok(SplitPlan {
        train: rows_of(manifest, train_subj),
        val: rows_of(manifest, val_subj),
        test: rows_of(manifest, test_subj),
        seed,
    })
}

/// Partitions a manifest into `k` subject-disjoint folds.
///
/// Subjects are shuffled once, then dealt into contiguous folds; the
/// first `S mod k` folds receive one extra subject so sizes differ by
/// at most one.
pub fn kfold(manifest: &DatasetManifest, k: usize, seed: u64) -> Result<FoldPlan, PipelineError> {
    if manifest.is_empty() {
        return Err(PipelineError::EmptyManifest);
    }
    let mut subjects = subject_order(manifest);
    if k < 2 || subjects.len() < k {
        return Err(PipelineError::TooFewSubjects {
            subjects: subjects.len(),
            k,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    subjects.shuffle(&mut rng);

    let s = subjects.len();
    let base = s / k;
    let extra = s % k;
    let mut folds = Vec::with_capacity(k);
    let mut at = 0;
    for f in 0..k {
        let take = base + usize::from(f < extra);
        folds.push(rows_of(manifest, &subjects[at..at + take]));
        at += take;
    }
    Ok(FoldPlan { folds, seed })
}

impl FoldPlan {
    pub fn k(&self) -> usize {
        self.folds.len()
    }

    /// Rows outside fold `test_fold`, in manifest order.
    pub fn complement(&self, test_fold: usize) -> Vec<usize> {
        let mut rows: Vec<usize> = self
            .folds
            .iter()
            .enumerate()
            .filter(|(f, _)| *f != test_fold)
            .flat_map(|(_, rows)| rows.iter().copied())
            .collect();
        rows.sort_unstable();
        rows
    }

    /// Turns one fold into a train/val/test plan: the fold itself is the
    /// test set and `val_ratio` of the complement's subjects are carved
    /// off for validation.
    pub fn split_for_fold(
        &self,
        manifest: &DatasetManifest,
        test_fold: usize,
        val_ratio: f64,
        seed: u64,
    ) -> Result<SplitPlan, PipelineError> {
        if test_fold >= self.folds.len() {
            return Err(PipelineError::InvalidConfig(format!(
                "fold {test_fold} out of range for k={}",
                self.folds.len()
            )));
        }
        let complement = self.complement(test_fold);
        let mut subjects = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for &row in &complement {
            let id = &manifest.entries()[row].subject_id;
            if seen.insert(id.clone()) {
                subjects.push(id.clone());
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        subjects.shuffle(&mut rng);
        let n_val = (val_ratio * subjects.len() as f64).floor() as usize;
        let (val_subj, train_subj) = subjects.split_at(n_val);
        Ok(SplitPlan {
            train: rows_of(manifest, train_subj),
            val: rows_of(manifest, val_subj),
            test: self.folds[test_fold].clone(),
            seed,
        })
    }
}
