//! Minimal from-scratch neural-network engine: tensors, the layer
//! forward/backward passes, losses, optimizers, and a finite-difference
//! gradient checker.
//!
//! Values are stored in 32-bit floats by default but every reduction
//! accumulates in 64-bit; the whole engine is also generic over the
//! scalar so the gradient checker can run entirely at 64-bit.

mod gradcheck;
mod layers;
mod losses;
mod network;
mod optim;
mod tensor;

pub use gradcheck::{grad_check, GradCheckConfig};
pub use layers::{
    conv2d_backward, conv2d_forward, dense_backward, dense_forward, dropout_mask,
    maxpool2d_backward, maxpool2d_forward, output_shape, LayerSpec, Padding,
};
pub use losses::{accuracy, binary_cross_entropy, cross_entropy, LossKind};
pub use network::{Gradients, ForwardTrace, Mode, Network};
pub use optim::{Adam, Optimizer, Sgd};
pub use tensor::{Elem, Tensor};

use std::fmt;

#[derive(Debug)]
pub enum NnError {
    /// Operand shapes do not line up for an operation.
    ShapeMismatch(String),
    /// Shape propagation failed at a specific layer.
    ShapeFlow { layer: usize, detail: String },
    /// A layer's own settings are unusable (zero stride, bad rate, ...).
    InvalidLayer { layer: usize, detail: String },
    /// Gradient checking is only defined with dropout inactive.
    CheckRequiresEvalMode,
}

impl fmt::Display for NnError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NnError::ShapeMismatch(detail) => write!(f, "shape mismatch: {detail}"),
            NnError::ShapeFlow { layer, detail } => {
                write!(f, "shape flow broken at layer {layer}: {detail}")
            }
            NnError::InvalidLayer { layer, detail } => {
                write!(f, "invalid layer {layer}: {detail}")
            }
            NnError::CheckRequiresEvalMode => {
                write!(f, "gradient check requires eval mode when dropout is present")
            }
        }
    }
}

impl std::error::Error for NnError {}
