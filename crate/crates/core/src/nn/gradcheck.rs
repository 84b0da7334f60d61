//! Numerical verification of the backward pass.
//!
//! The network is lifted to f64, a central difference is taken through
//! the full forward + loss for a sample of parameters, and the worst
//! relative disagreement with the analytic gradient is returned.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::losses::LossKind;
use super::network::{Mode, Network};
use super::tensor::{Elem, Tensor};
use super::NnError;

pub struct GradCheckConfig {
    /// Perturbation is `step_scale * max(1, |param|)`.
    pub step_scale: f64,
    /// How many entries of each parameter tensor to probe.
    pub samples_per_tensor: usize,
    /// Seed for choosing which entries are probed.
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig { step_scale: 1e-5, samples_per_tensor: 16, seed: 0 }
    }
}

fn loss_of<F: Elem>(
    net: &Network<F>,
    x: &Tensor<F>,
    labels: &[usize],
    loss: LossKind,
    mode: Mode,
) -> Result<f64, NnError> {
    let trace = net.forward(x, mode, 0)?;
    Ok(loss.compute(trace.output(), labels)?.0)
}

/// Compares analytic and central-difference gradients, returning the
/// worst relative error over the probed parameters.
///
/// Checking a dropout network in train mode is refused: the loss would
/// not be a deterministic function of the parameters being perturbed.
pub fn grad_check<F: Elem>(
    network: &Network<F>,
    x: &Tensor<F>,
    labels: &[usize],
    loss: LossKind,
    mode: Mode,
    cfg: &GradCheckConfig,
) -> Result<f64, NnError> {
    if mode == Mode::Train && network.has_dropout() {
        return Err(NnError::CheckRequiresEvalMode);
    }
    let mut net = network.cast::<f64>();
    let x = x.cast::<f64>();

    let trace = net.forward(&x, mode, 0)?;
    let (_, grad_probs) = loss.compute(trace.output(), labels)?;
    let grads = net.backward(&trace, &grad_probs)?;
    let analytic: Vec<Tensor<f64>> = grads.tensors().into_iter().cloned().collect();
    drop(trace);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut worst = 0.0f64;
    for (ti, a_tensor) in analytic.iter().enumerate() {
        let numel = a_tensor.numel();
        let probes: Vec<usize> = if numel <= cfg.samples_per_tensor {
            (0..numel).collect()
        } else {
            let mut seen = HashSet::new();
            let mut picks = Vec::with_capacity(cfg.samples_per_tensor);
            while picks.len() < cfg.samples_per_tensor {
                let idx = rng.random_range(0..numel);
                if seen.insert(idx) {
                    picks.push(idx);
                }
            }
            picks
        };
        for ei in probes {
            let orig = net.parameters()[ti].data()[ei];
            let h = cfg.step_scale * orig.abs().max(1.0);

            net.parameters_mut()[ti].data_mut()[ei] = orig + h;
            let up = loss_of(&net, &x, labels, loss, mode)?;
            net.parameters_mut()[ti].data_mut()[ei] = orig - h;
            let down = loss_of(&net, &x, labels, loss, mode)?;
            net.parameters_mut()[ti].data_mut()[ei] = orig;

            let numeric = (up - down) / (2.0 * h);
            let a = a_tensor.data()[ei];
            let rel = (numeric - a).abs() / (numeric.abs() + a.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
