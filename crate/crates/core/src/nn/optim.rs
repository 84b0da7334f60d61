//! Parameter update rules. Optimizer state is kept at 64-bit regardless
//! of the parameter precision so momentum statistics don't drift.

use super::tensor::{Elem, Tensor};
use super::NnError;

/// A stateful update rule over an ordered list of parameter tensors.
/// The list must have the same length and shapes on every call.
pub trait Optimizer<F: Elem> {
    fn step(&mut self, params: &mut [&mut Tensor<F>], grads: &[&Tensor<F>]) -> Result<(), NnError>;
}

fn check_aligned<F: Elem>(
    params: &[&mut Tensor<F>],
    grads: &[&Tensor<F>],
) -> Result<(), NnError> {
    if params.len() != grads.len() {
        return Err(NnError::ShapeMismatch(format!(
            "{} parameter tensors, {} gradient tensors",
            params.len(),
            grads.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(NnError::ShapeMismatch(format!(
                "parameter shape {:?} vs gradient shape {:?}",
                p.shape(),
                g.shape()
            )));
        }
    }
    Ok(())
}

/// Stochastic gradient descent with classical momentum:
/// `v = momentum * v + g; p -= lr * v`.
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Sgd { lr, momentum, velocity: Vec::new() }
    }
}

impl<F: Elem> Optimizer<F> for Sgd {
    fn step(&mut self, params: &mut [&mut Tensor<F>], grads: &[&Tensor<F>]) -> Result<(), NnError> {
        check_aligned(params, grads)?;
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        }
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            for ((pv, gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
                *vv = self.momentum * *vv + gv.to_f64();
                *pv = F::from_f64(pv.to_f64() - self.lr * *vv);
            }
        }
        Ok(())
    }
}

/// Adam with bias correction. Defaults: lr 1e-3, beta1 0.9, beta2 0.999,
/// epsilon 1e-8.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    t: u32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }
}

impl Default for Adam {
    fn default() -> Self {
        Adam::new(1e-3)
    }
}

impl<F: Elem> Optimizer<F> for Adam {
    fn step(&mut self, params: &mut [&mut Tensor<F>], grads: &[&Tensor<F>]) -> Result<(), NnError> {
        check_aligned(params, grads)?;
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((pv, gv), mv), vv) in
                p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut())
            {
                let g = gv.to_f64();
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * g;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * g * g;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv = F::from_f64(pv.to_f64() - self.lr * mhat / (vhat.sqrt() + self.epsilon));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(v: f32) -> Tensor<f32> {
        Tensor::from_vec(&[1], vec![v]).unwrap()
    }

    #[test]
    fn plain_sgd_update_arithmetic() {
        let mut p = single(1.0);
        let g = single(0.5);
        let mut opt = Sgd::new(0.1, 0.0);
        opt.step(&mut [&mut p], &[&g]).unwrap();
        assert!((p.data()[0] - 0.95).abs() < 1e-7);
    }

    #[test]
    fn momentum_accumulates_across_steps() {
        let mut p = single(0.0);
        let g = single(1.0);
        let mut opt = Sgd::new(0.1, 0.9);
        opt.step(&mut [&mut p], &[&g]).unwrap(); // v = 1.0, p = -0.1
        opt.step(&mut [&mut p], &[&g]).unwrap(); // v = 1.9, p = -0.29
        assert!((p.data()[0] + 0.29).abs() < 1e-6, "p = {}", p.data()[0]);
    }

    #[test]
    fn zero_gradient_leaves_parameters_alone() {
        let mut p = single(0.75);
        let g = single(0.0);
        let mut sgd = Sgd::new(0.1, 0.9);
        sgd.step(&mut [&mut p], &[&g]).unwrap();
        assert_eq!(p.data()[0], 0.75);

        let mut adam = Adam::new(1e-3);
        adam.step(&mut [&mut p], &[&g]).unwrap();
        assert_eq!(p.data()[0], 0.75);
    }

    #[test]
    fn adam_first_step_magnitude_is_about_the_learning_rate() {
        // Bias correction makes the first update ~lr regardless of the
        // gradient's scale.
        for g0 in [1e-3f32, 1.0, 1e3] {
            let mut p = single(0.0);
            let g = single(g0);
            let mut opt = Adam::new(1e-3);
            opt.step(&mut [&mut p], &[&g]).unwrap();
            let step = f64::from(p.data()[0]).abs();
            assert!(
                (step - 1e-3).abs() < 1e-5,
                "first step {step} for gradient {g0}"
            );
        }
    }

    #[test]
    fn mismatched_shapes_are_rejected() {
        let mut p = single(1.0);
        let g = Tensor::from_vec(&[2], vec![1.0f32, 2.0]).unwrap();
        let mut opt = Sgd::new(0.1, 0.0);
        assert!(matches!(
            opt.step(&mut [&mut p], &[&g]),
            Err(NnError::ShapeMismatch(_))
        ));
    }
}
