//! Majority voting over a committee of classifiers.

use crate::pipeline::train::Prediction;
use crate::pipeline::PipelineError;

/// Per-sample hard majority vote across models.
///
/// Each model contributes its argmax label. The class with the most
/// votes wins; a vote tie is broken in favour of the tied class with
/// the highest mean probability across models, and an exact mean tie
/// falls back to the lowest class index. All predictions must describe
/// the same samples in the same order.
pub fn majority_vote(predictions: &[Prediction]) -> Result<Vec<usize>, PipelineError> {
    let first = predictions
        .first()
        .ok_or_else(|| PipelineError::SampleMismatch("no predictions to vote over".into()))?;
    let n = first.sample_ids.len();
    let classes = first.probs.first().map_or(0, Vec::len);
    if classes == 0 {
        return Err(PipelineError::SampleMismatch(
            "predictions carry no class probabilities".into(),
        ));
    }
    for p in predictions {
        if p.sample_ids != first.sample_ids {
            return Err(PipelineError::SampleMismatch(format!(
                "model {} predicted different samples than model {}",
                p.model, first.model
            )));
        }
        if p.labels.len() != n || p.probs.len() != n {
            return Err(PipelineError::SampleMismatch(format!(
                "model {} has {} rows for {} samples",
                p.model,
                p.probs.len(),
                n
            )));
        }
        if p.probs.iter().any(|row| row.len() != classes) {
            return Err(PipelineError::SampleMismatch(format!(
                "model {} disagrees on the number of classes",
                p.model
            )));
        }
    }

    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut votes = vec![0usize; classes];
        for p in predictions {
            votes[p.labels[i]] += 1;
        }
        let top = *votes.iter().max().unwrap();
        let mut winner = None;
        let mut winner_mean = f64::NEG_INFINITY;
        for c in 0..classes {
            if votes[c] != top {
                continue;
            }
            let mean: f64 =
                predictions.iter().map(|p| p.probs[i][c]).sum::<f64>() / predictions.len() as f64;
            // strictly greater keeps the lowest class index on exact ties
            if mean > winner_mean {
                winner_mean = mean;
                winner = Some(c);
            }
        }
        out.push(winner.unwrap());
    }
    Ok(out)
}
