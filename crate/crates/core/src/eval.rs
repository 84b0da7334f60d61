//! Classifier evaluation: confusion counts, the derived rates, ROC
//! curves with trapezoidal AUC, and plot/data emission.
//!
//! Metrics with a zero denominator come back as `None` — averaging a
//! silent 0.0 into a report is worse than making the caller decide.

use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::Path;

#[derive(Debug)]
pub enum EvalError {
    LengthMismatch { left: usize, right: usize },
    Empty,
    /// ROC needs at least one positive and one negative sample.
    OneClassOnly,
    /// Score at this index is NaN or infinite.
    NonFiniteScore(usize),
    IoFailure(io::Error),
}

impl fmt::Display for EvalError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EvalError::LengthMismatch { left, right } => {
                write!(f, "{left} predictions against {right} actual labels")
            }
            EvalError::Empty => write!(f, "no samples to evaluate"),
            EvalError::OneClassOnly => {
                write!(f, "ROC needs both classes present in the actual labels")
            }
            EvalError::NonFiniteScore(i) => write!(f, "score {i} is not finite"),
            EvalError::IoFailure(e) => write!(f, "could not write evaluation output: {e}"),
        }
    }
}

impl std::error::Error for EvalError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            EvalError::IoFailure(e) => Some(e),
            _ => None,
        }
    }
}

impl From<io::Error> for EvalError {
    fn from(e: io::Error) -> Self {
        EvalError::IoFailure(e)
    }
}

/// The four cells of a binary confusion matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ConfusionCounts {
    pub true_pos: usize,
    pub true_neg: usize,
    pub false_pos: usize,
    pub false_neg: usize,
}

impl ConfusionCounts {
    pub fn new(true_pos: usize, true_neg: usize, false_pos: usize, false_neg: usize) -> Self {
        ConfusionCounts { true_pos, true_neg, false_pos, false_neg }
    }

    pub fn total(&self) -> usize {
        self.true_pos + self.true_neg + self.false_pos + self.false_neg
    }

    /// (TP + TN) / total, `None` on an empty matrix.
    pub fn accuracy(&self) -> Option<f64> {
        ratio(self.true_pos + self.true_neg, self.total())
    }

    /// TP / (TP + FP), `None` when nothing was predicted positive.
    pub fn precision(&self) -> Option<f64> {
        ratio(self.true_pos, self.true_pos + self.false_pos)
    }

    /// TP / (TP + FN), `None` when no actual positives exist.
    pub fn recall(&self) -> Option<f64> {
        ratio(self.true_pos, self.true_pos + self.false_neg)
    }
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    if den == 0 {
        None
    } else {
        Some(num as f64 / den as f64)
    }
}

/// Tallies predictions against actual labels, with `positive` defining
/// the positive class and everything else negative.
pub fn confusion<L: PartialEq>(
    predicted: &[L],
    actual: &[L],
    positive: &L,
) -> Result<ConfusionCounts, EvalError> {
    if predicted.len() != actual.len() {
        return Err(EvalError::LengthMismatch { left: predicted.len(), right: actual.len() });
    }
    if predicted.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut c = ConfusionCounts::default();
    for (p, a) in predicted.iter().zip(actual) {
        match (p == positive, a == positive) {
            (true, true) => c.true_pos += 1,
            (true, false) => c.false_pos += 1,
            (false, true) => c.false_neg += 1,
            (false, false) => c.true_neg += 1,
        }
    }
    Ok(c)
}

/// One confusion matrix per class, one-vs-rest.
pub fn one_vs_rest<L: PartialEq + Clone>(
    predicted: &[L],
    actual: &[L],
    classes: &[L],
) -> Result<Vec<(L, ConfusionCounts)>, EvalError> {
    classes
        .iter()
        .map(|c| Ok((c.clone(), confusion(predicted, actual, c)?)))
        .collect()
}

/// Unweighted mean of a per-class metric, skipping classes where it is
/// undefined; `None` if it is undefined everywhere.
pub fn macro_average(
    rows: &[ConfusionCounts],
    metric: impl Fn(&ConfusionCounts) -> Option<f64>,
) -> Option<f64> {
    let defined: Vec<f64> = rows.iter().filter_map(metric).collect();
    if defined.is_empty() {
        None
    } else {
        Some(defined.iter().sum::<f64>() / defined.len() as f64)
    }
}

/// ROC points from (0,0) to (1,1), ordered by descending score
/// threshold. Samples with equal scores move together.
#[derive(Debug, Clone, PartialEq)]
pub struct RocCurve {
    points: Vec<(f64, f64)>,
}

impl RocCurve {
    /// (false-positive-rate, true-positive-rate) pairs, nondecreasing
    /// in both coordinates.
    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    pub fn from_points(points: Vec<(f64, f64)>) -> Self {
        RocCurve { points }
    }
}

/// Sweeps a threshold over every distinct score (classify positive
/// when score >= threshold) and records the resulting rate pairs.
pub fn roc_curve<L: PartialEq>(
    scores: &[f64],
    actual: &[L],
    positive: &L,
) -> Result<RocCurve, EvalError> {
    if scores.len() != actual.len() {
        return Err(EvalError::LengthMismatch { left: scores.len(), right: actual.len() });
    }
    if scores.is_empty() {
        return Err(EvalError::Empty);
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(EvalError::NonFiniteScore(i));
    }
    let pos_total = actual.iter().filter(|a| *a == positive).count();
    let neg_total = actual.len() - pos_total;
    if pos_total == 0 || neg_total == 0 {
        return Err(EvalError::OneClassOnly);
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());

    let mut points = vec![(0.0, 0.0)];
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut i = 0;
    while i < order.len() {
        // Consume the whole tie group before emitting a point.
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if actual[order[i]] == *positive {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((fp as f64 / neg_total as f64, tp as f64 / pos_total as f64));
    }
    Ok(RocCurve { points })
}

/// Area under the curve by trapezoidal integration.
pub fn auc(curve: &RocCurve) -> f64 {
    curve
        .points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RocFormat {
    Csv,
    Svg,
}

/// Writes the curve as `fpr,tpr` CSV rows or as a standalone SVG plot
/// with the chance diagonal for reference.
pub fn emit_roc(curve: &RocCurve, path: &Path, format: RocFormat) -> Result<(), EvalError> {
    let mut out = Vec::new();
    match format {
        RocFormat::Csv => {
            writeln!(out, "fpr,tpr")?;
            for (fpr, tpr) in &curve.points {
                writeln!(out, "{fpr},{tpr}")?;
            }
        }
        RocFormat::Svg => {
            const SIZE: f64 = 480.0;
            const MARGIN: f64 = 40.0;
            let span = SIZE - 2.0 * MARGIN;
            let x = |fpr: f64| MARGIN + fpr * span;
            let y = |tpr: f64| MARGIN + (1.0 - tpr) * span;
            writeln!(out, r#"<?xml version="1.0" encoding="UTF-8"?>"#)?;
            writeln!(
                out,
                r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">"#
            )?;
            writeln!(
                out,
                r#"<rect x="{MARGIN}" y="{MARGIN}" width="{span}" height="{span}" fill="none" stroke="black"/>"#
            )?;
            writeln!(
                out,
                r#"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="gray" stroke-dasharray="4 4"/>"#,
                x(0.0),
                y(0.0),
                x(1.0),
                y(1.0)
            )?;
            let pts: Vec<String> = curve
                .points
                .iter()
                .map(|(fpr, tpr)| format!("{:.3},{:.3}", x(*fpr), y(*tpr)))
                .collect();
            writeln!(
                out,
                r#"<polyline points="{}" fill="none" stroke="crimson" stroke-width="2"/>"#,
                pts.join(" ")
            )?;
            writeln!(
                out,
                r#"<text x="{}" y="{}" text-anchor="middle" font-size="14">false positive rate</text>"#,
                SIZE / 2.0,
                SIZE - 10.0
            )?;
            writeln!(
                out,
                r#"<text x="14" y="{}" text-anchor="middle" font-size="14" transform="rotate(-90 14 {})">true positive rate</text>"#,
                SIZE / 2.0,
                SIZE / 2.0
            )?;
            writeln!(out, "</svg>")?;
        }
    }
    fs::write(path, out)?;
    Ok(())
}
