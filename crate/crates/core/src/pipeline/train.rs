//! Minibatch training loop and batched inference.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::models::{NetworkSpec, TrainedModel};
use crate::nn::{accuracy, Adam, Mode, Optimizer, Tensor};
use crate::pipeline::PipelineError;
use crate::util::derive_seed2;
use crate::volume::SliceStack;

/// Knobs for one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            learning_rate: 1e-3,
            batch_size: 32,
            epochs: 30,
        }
    }
}

/// Loss and accuracy recorded after one pass over the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: Option<f64>,
    pub val_accuracy: Option<f64>,
}

/// Per-epoch statistics in epoch order.
pub type TrainHistory = Vec<EpochStats>;

/// A flat, batched view of labelled image samples.
///
/// Pixel data is stored sample-major in `[height, width, 3]` row-major
/// order, so a contiguous range of `height * width * 3` floats is one
/// sample and any index list can be gathered into a training batch.
#[derive(Debug, Clone)]
pub struct SampleSet {
    height: usize,
    width: usize,
    ids: Vec<String>,
    labels: Vec<usize>,
    data: Vec<f32>,
}

impl SampleSet {
    pub fn new(height: usize, width: usize) -> Self {
        SampleSet {
            height,
            width,
            ids: Vec::new(),
            labels: Vec::new(),
            data: Vec::new(),
        }
    }

    /// Appends one sample; the stack must match the set's dimensions.
    pub fn push(
        &mut self,
        id: impl Into<String>,
        label: usize,
        stack: &SliceStack,
    ) -> Result<(), PipelineError> {
        if stack.height() != self.height || stack.width() != self.width {
            return Err(PipelineError::SampleMismatch(format!(
                "stack {}x{} pushed into {}x{} sample set",
                stack.height(),
                stack.width(),
                self.height,
                self.width
            )));
        }
        self.ids.push(id.into());
        self.labels.push(label);
        self.data.extend_from_slice(stack.data());
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn ids(&self) -> &[String] {
        self.ids.as_slice()
    }

    pub fn labels(&self) -> &[usize] {
        self.labels.as_slice()
    }

    /// Gathers the given samples into an `[n, height, width, 3]` batch.
    pub fn batch(&self, indices: &[usize]) -> Tensor<f32> {
        let sample = self.height * self.width * 3;
        let mut data = Vec::with_capacity(indices.len() * sample);
        for &i in indices {
            data.extend_from_slice(&self.data[i * sample..(i + 1) * sample]);
        }
        Tensor::from_vec(&[indices.len(), self.height, self.width, 3], data)
            .expect("gathered batch is consistent by construction")
    }

    pub fn labels_of(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }
}

/// Eval-mode loss and accuracy over a whole set, in batches.
fn evaluate_set(
    model_spec: &NetworkSpec,
    network: &crate::nn::Network<f32>,
    set: &SampleSet,
    batch_size: usize,
) -> Result<(f64, f64), PipelineError> {
    let loss_kind = model_spec.loss();
    let indices: Vec<usize> = (0..set.len()).collect();
    let mut loss_sum = 0.0;
    let mut hit_sum = 0.0;
    for chunk in indices.chunks(batch_size) {
        let x = set.batch(chunk);
        let labels = set.labels_of(chunk);
        let probs = network.predict(&x)?;
        let (loss, _) = loss_kind.compute(&probs, &labels)?;
        loss_sum += loss * chunk.len() as f64;
        hit_sum += accuracy(&probs, &labels)? * chunk.len() as f64;
    }
    let n = set.len() as f64;
    Ok((loss_sum / n, hit_sum / n))
}

/// Trains a fresh network described by `spec` on `train_set`.
///
/// Sample order is reshuffled every epoch from a seed derived from
/// `(seed, epoch)`, so a (spec, data, hyperparams, seed) tuple always
/// produces bit-identical weights and history regardless of thread
/// count. After the final epoch the parameters are rolled back to the
/// epoch with the best validation accuracy (earliest epoch wins ties);
/// with an empty validation set the final parameters stand. Zero epochs
/// returns the freshly initialised weights and an empty history.
pub fn train(
    spec: &NetworkSpec,
    train_set: &SampleSet,
    val_set: &SampleSet,
    hp: &Hyperparams,
    seed: u64,
) -> Result<(TrainedModel, TrainHistory), PipelineError> {
    if train_set.is_empty() {
        return Err(PipelineError::InvalidConfig(
            "training set has no samples".into(),
        ));
    }
    let expect = [train_set.height(), train_set.width(), 3];
    if spec.input != expect {
        return Err(PipelineError::SampleMismatch(format!(
            "network expects input {:?} but samples are {:?}",
            spec.input, expect
        )));
    }
    if hp.batch_size == 0 {
        return Err(PipelineError::InvalidConfig("batch size must be > 0".into()));
    }

    let mut model = TrainedModel::fresh(spec.clone(), seed)?;
    let loss_kind = spec.loss();
    let mut optimizer = Adam::new(hp.learning_rate);
    let mut history = TrainHistory::new();
    let mut best: Option<(f64, Vec<f32>)> = None;

    let n_batches = train_set.len().div_ceil(hp.batch_size);
    for epoch in 0..hp.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed2(seed, epoch as u64, 0x5E));
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        let mut hit_sum = 0.0;
        for (b, chunk) in order.chunks(hp.batch_size).enumerate() {
            let x = train_set.batch(chunk);
            let labels = train_set.labels_of(chunk);
            let step_seed = derive_seed2(seed, (epoch * n_batches + b) as u64, 0x57);

            let trace = model.network.forward(&x, Mode::Train, step_seed)?;
            let (loss, grad_out) = loss_kind.compute(trace.output(), &labels)?;
            if !loss.is_finite() {
                return Err(PipelineError::NonFiniteLoss {
                    epoch,
                    batch: b,
                    value: loss,
                });
            }
            loss_sum += loss * chunk.len() as f64;
            hit_sum += accuracy(trace.output(), &labels)? * chunk.len() as f64;

            let grads = model.network.backward(&trace, &grad_out)?;
            let grad_tensors = grads.tensors();
            let mut params = model.network.parameters_mut();
            optimizer.step(&mut params, &grad_tensors)?;
        }

        let n = train_set.len() as f64;
        let (val_loss, val_accuracy) = if val_set.is_empty() {
            (None, None)
        } else {
            let (l, a) = evaluate_set(spec, &model.network, val_set, hp.batch_size)?;
            (Some(l), Some(a))
        };
        if let Some(acc) = val_accuracy {
            let improved = match &best {
                Some((best_acc, _)) => acc > *best_acc,
                None => true,
            };
            if improved {
                best = Some((acc, model.network.flatten_params()));
            }
        }
        history.push(EpochStats {
            epoch,
            train_loss: loss_sum / n,
            train_accuracy: hit_sum / n,
            val_loss,
            val_accuracy,
        });
    }

    if let Some((best_acc, params)) = best {
        model.network.load_flat(&params)?;
        model.meta.metrics.insert("best_val_accuracy".into(), best_acc);
    }
    model.meta.epochs = hp.epochs;
    if let Some(last) = history.last() {
        model.meta.metrics.insert("final_train_loss".into(), last.train_loss);
        model
            .meta
            .metrics
            .insert("final_train_accuracy".into(), last.train_accuracy);
    }
    Ok((model, history))
}

/// Class probabilities and hard labels a model assigned to a sample set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    /// Which model produced these predictions.
    pub model: String,
    pub sample_ids: Vec<String>,
    /// One row per sample, one probability per class.
    pub probs: Vec<Vec<f64>>,
    /// Argmax of each row (first index wins ties).
    pub labels: Vec<usize>,
}

/// Runs eval-mode inference over a whole set in batches of 32.
pub fn predict(model: &TrainedModel, set: &SampleSet) -> Result<Prediction, PipelineError> {
    let expect = [set.height(), set.width(), 3];
    if model.spec.input != expect {
        return Err(PipelineError::SampleMismatch(format!(
            "network expects input {:?} but samples are {:?}",
            model.spec.input, expect
        )));
    }
    let classes = model.spec.num_classes;
    let mut probs = Vec::with_capacity(set.len());
    let mut labels = Vec::with_capacity(set.len());
    let indices: Vec<usize> = (0..set.len()).collect();
    for chunk in indices.chunks(32) {
        let out = model.network.predict(&set.batch(chunk))?;
        for row in out.data().chunks_exact(classes) {
            let row: Vec<f64> = row.iter().map(|&p| p as f64).collect();
            let mut arg = 0;
            for (c, &p) in row.iter().enumerate() {
                if p > row[arg] {
                    arg = c;
                }
            }
            probs.push(row);
            labels.push(arg);
        }
    }
    Ok(Prediction {
        model: model.spec.name.to_string(),
        sample_ids: set.ids().to_vec(),
        probs,
        labels,
    })
}
