//! A network is an ordered list of layers plus their parameters.
//!
//! Parameters are initialized from a seed: He-uniform fan-in limits for
//! weights feeding a relu, Glorot-uniform otherwise, zero biases. Each
//! layer draws from its own generator, so inserting a layer does not
//! shift the weights of the others.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::util::derive_seed2;

use super::layers::{
    conv2d_backward, conv2d_forward, dense_backward, dense_forward, dropout_mask,
    maxpool2d_backward, maxpool2d_forward, output_shape, relu_backward, relu_forward,
    sigmoid_backward, sigmoid_forward, softmax_backward, softmax_forward, LayerSpec,
};
use super::tensor::{Elem, Tensor};
use super::NnError;

/// Whether a forward pass applies the stochastic training behavior
/// (dropout) or runs deterministically.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug)]
struct LayerParams<F: Elem> {
    w: Tensor<F>,
    b: Tensor<F>,
}

/// Per-layer bookkeeping captured during a forward pass so the backward
/// pass can reuse it.
enum Aux<F: Elem> {
    None,
    PoolArgmax(Vec<usize>),
    DropoutMask(Vec<F>),
}

/// Everything the backward pass needs: the value flowing into each
/// layer (plus the final output) and per-layer auxiliary state.
pub struct ForwardTrace<F: Elem = f32> {
    vals: Vec<Tensor<F>>,
    aux: Vec<Aux<F>>,
}

impl<F: Elem> ForwardTrace<F> {
    /// The network output (after the last layer).
    pub fn output(&self) -> &Tensor<F> {
        self.vals.last().expect("trace always holds the input")
    }

    /// Consumes the trace, keeping only the output tensor.
    pub fn into_output(mut self) -> Tensor<F> {
        self.vals.pop().expect("trace always holds the input")
    }
}

/// Parameter gradients in layer order, aligned with
/// [`Network::parameters`].
pub struct Gradients<F: Elem = f32> {
    per_layer: Vec<Option<(Tensor<F>, Tensor<F>)>>,
}

impl<F: Elem> Gradients<F> {
    /// Flat view (weights then bias per parameterized layer), matching
    /// the order of [`Network::parameters_mut`].
    pub fn tensors(&self) -> Vec<&Tensor<F>> {
        let mut out = Vec::new();
        for entry in self.per_layer.iter().flatten() {
            out.push(&entry.0);
            out.push(&entry.1);
        }
        out
    }

    /// Largest absolute gradient entry; useful for divergence checks.
    pub fn max_abs(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.data().iter())
            .map(|v| v.to_f64().abs())
            .fold(0.0, f64::max)
    }
}

#[derive(Debug)]
pub struct Network<F: Elem = f32> {
    input_shape: [usize; 3],
    layers: Vec<LayerSpec>,
    params: Vec<Option<LayerParams<F>>>,
    shapes: Vec<Vec<usize>>,
    seed: u64,
}

impl<F: Elem> Network<F> {
    /// Builds and initializes a network. Fails if any layer is
    /// malformed or the shapes don't flow.
    pub fn new(
        input_shape: [usize; 3],
        layers: Vec<LayerSpec>,
        seed: u64,
    ) -> Result<Network<F>, NnError> {
        if layers.is_empty() {
            return Err(NnError::InvalidLayer {
                layer: 0,
                detail: "network needs at least one layer".to_string(),
            });
        }
        if input_shape.contains(&0) {
            return Err(NnError::ShapeMismatch(format!(
                "input shape {input_shape:?} has a zero dimension"
            )));
        }
        for (i, layer) in layers.iter().enumerate() {
            validate_layer(i, layer)?;
        }

        // Shape inference with a placeholder batch of 1.
        let mut shapes = Vec::with_capacity(layers.len() + 1);
        shapes.push(vec![1, input_shape[0], input_shape[1], input_shape[2]]);
        for (i, layer) in layers.iter().enumerate() {
            let next = output_shape(layer, shapes.last().unwrap())
                .map_err(|detail| NnError::ShapeFlow { layer: i, detail })?;
            shapes.push(next);
        }

        let mut params = Vec::with_capacity(layers.len());
        for (i, layer) in layers.iter().enumerate() {
            params.push(init_layer(layer, &shapes[i], relu_next(&layers, i), seed, i));
        }
        Ok(Network { input_shape, layers, params, shapes, seed })
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Output shape of each layer for a batch of 1 (index 0 is the
    /// input shape itself).
    pub fn layer_shapes(&self) -> &[Vec<usize>] {
        &self.shapes
    }

    pub fn num_outputs(&self) -> usize {
        *self.shapes.last().unwrap().last().unwrap()
    }

    pub fn has_dropout(&self) -> bool {
        self.layers.iter().any(|l| matches!(l, LayerSpec::Dropout { .. }))
    }

    /// Flat parameter list: weights then bias for each parameterized
    /// layer, in layer order.
    pub fn parameters(&self) -> Vec<&Tensor<F>> {
        let mut out = Vec::new();
        for p in self.params.iter().flatten() {
            out.push(&p.w);
            out.push(&p.b);
        }
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor<F>> {
        let mut out = Vec::new();
        for p in self.params.iter_mut().flatten() {
            out.push(&mut p.w);
            out.push(&mut p.b);
        }
        out
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.parameters().iter().map(|t| t.numel()).sum()
    }

    /// All parameters as one contiguous vector, in [`Self::parameters`]
    /// order.
    pub fn flatten_params(&self) -> Vec<F> {
        let mut out = Vec::with_capacity(self.param_count());
        for t in self.parameters() {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Overwrites every parameter from a flat vector laid out like
    /// [`Self::flatten_params`].
    pub fn load_flat(&mut self, flat: &[F]) -> Result<(), NnError> {
        if flat.len() != self.param_count() {
            return Err(NnError::ShapeMismatch(format!(
                "{} values for {} parameters",
                flat.len(),
                self.param_count()
            )));
        }
        let mut offset = 0;
        for t in self.parameters_mut() {
            let n = t.numel();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Re-creates this network at a different precision, keeping the
    /// exact parameter values (up to the cast).
    pub fn cast<G: Elem>(&self) -> Network<G> {
        Network {
            input_shape: self.input_shape,
            layers: self.layers.clone(),
            params: self
                .params
                .iter()
                .map(|p| p.as_ref().map(|p| LayerParams { w: p.w.cast(), b: p.b.cast() }))
                .collect(),
            shapes: self.shapes.clone(),
            seed: self.seed,
        }
    }

    /// Runs the network over a `[n, h, w, c]` batch. `step_seed`
    /// determines the dropout masks when `mode` is `Train`; it is
    /// ignored in `Eval`.
    pub fn forward(
        &self,
        x: &Tensor<F>,
        mode: Mode,
        step_seed: u64,
    ) -> Result<ForwardTrace<F>, NnError> {
        let expect = [self.input_shape[0], self.input_shape[1], self.input_shape[2]];
        if x.shape().len() != 4 || x.shape()[1..] != expect {
            return Err(NnError::ShapeMismatch(format!(
                "batch shape {:?} does not match input {expect:?}",
                x.shape()
            )));
        }
        let mut vals = Vec::with_capacity(self.layers.len() + 1);
        let mut aux = Vec::with_capacity(self.layers.len());
        vals.push(x.clone());
        for (i, layer) in self.layers.iter().enumerate() {
            let cur = vals.last().unwrap();
            let (next, a) = match (layer, &self.params[i]) {
                (LayerSpec::Conv2d { stride, padding, .. }, Some(p)) => {
                    (conv2d_forward(cur, &p.w, &p.b, *stride, *padding)?, Aux::None)
                }
                (LayerSpec::MaxPool2d { pool, stride }, _) => {
                    let (y, argmax) = maxpool2d_forward(cur, *pool, *stride)?;
                    (y, Aux::PoolArgmax(argmax))
                }
                (LayerSpec::Relu, _) => (relu_forward(cur), Aux::None),
                (LayerSpec::Sigmoid, _) => (sigmoid_forward(cur), Aux::None),
                (LayerSpec::Softmax, _) => (softmax_forward(cur), Aux::None),
                (LayerSpec::Dropout { rate }, _) => match mode {
                    Mode::Eval => (cur.clone(), Aux::None),
                    Mode::Train => {
                        let mask: Vec<F> =
                            dropout_mask(cur.numel(), *rate, derive_seed2(step_seed, i as u64, 0xD0));
                        let data = cur
                            .data()
                            .iter()
                            .zip(&mask)
                            .map(|(&v, &m)| F::from_f64(v.to_f64() * m.to_f64()))
                            .collect();
                        (Tensor::from_vec(cur.shape(), data)?, Aux::DropoutMask(mask))
                    }
                },
                (LayerSpec::Flatten, _) => {
                    let n = cur.shape()[0];
                    let rest: usize = cur.shape()[1..].iter().product();
                    (cur.reshaped(&[n, rest])?, Aux::None)
                }
                (LayerSpec::Dense { .. }, Some(p)) => {
                    (dense_forward(cur, &p.w, &p.b)?, Aux::None)
                }
                _ => unreachable!("parameterized layer without parameters"),
            };
            vals.push(next);
            aux.push(a);
        }
        Ok(ForwardTrace { vals, aux })
    }

    /// Backpropagates a gradient with respect to the network output
    /// through the captured trace.
    pub fn backward(
        &self,
        trace: &ForwardTrace<F>,
        grad_out: &Tensor<F>,
    ) -> Result<Gradients<F>, NnError> {
        if grad_out.shape() != trace.output().shape() {
            return Err(NnError::ShapeMismatch(format!(
                "gradient shape {:?} vs output shape {:?}",
                grad_out.shape(),
                trace.output().shape()
            )));
        }
        let mut per_layer: Vec<Option<(Tensor<F>, Tensor<F>)>> =
            (0..self.layers.len()).map(|_| None).collect();
        let mut g = grad_out.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let input = &trace.vals[i];
            let output = &trace.vals[i + 1];
            g = match (layer, &self.params[i]) {
                (LayerSpec::Conv2d { stride, padding, .. }, Some(p)) => {
                    let (gx, gw, gb) = conv2d_backward(input, &p.w, &g, *stride, *padding)?;
                    per_layer[i] = Some((gw, gb));
                    gx
                }
                (LayerSpec::MaxPool2d { .. }, _) => {
                    let Aux::PoolArgmax(argmax) = &trace.aux[i] else {
                        unreachable!("pool layer without argmax aux");
                    };
                    maxpool2d_backward(input.shape(), argmax, &g)?
                }
                (LayerSpec::Relu, _) => relu_backward(input, &g),
                (LayerSpec::Sigmoid, _) => sigmoid_backward(output, &g),
                (LayerSpec::Softmax, _) => softmax_backward(output, &g),
                (LayerSpec::Dropout { .. }, _) => match &trace.aux[i] {
                    Aux::DropoutMask(mask) => {
                        let data = g
                            .data()
                            .iter()
                            .zip(mask)
                            .map(|(&v, &m)| F::from_f64(v.to_f64() * m.to_f64()))
                            .collect();
                        Tensor::from_vec(g.shape(), data)?
                    }
                    _ => g,
                },
                (LayerSpec::Flatten, _) => g.reshaped(input.shape())?,
                (LayerSpec::Dense { .. }, Some(p)) => {
                    let (gx, gw, gb) = dense_backward(input, &p.w, &g)?;
                    per_layer[i] = Some((gw, gb));
                    gx
                }
                _ => unreachable!("parameterized layer without parameters"),
            };
        }
        Ok(Gradients { per_layer })
    }

    /// Deterministic inference: forward in eval mode, returning only
    /// the output.
    pub fn predict(&self, x: &Tensor<F>) -> Result<Tensor<F>, NnError> {
        Ok(self.forward(x, Mode::Eval, 0)?.into_output())
    }
}

fn validate_layer(i: usize, layer: &LayerSpec) -> Result<(), NnError> {
    let detail = match *layer {
        LayerSpec::Conv2d { out_channels, kernel_h, kernel_w, stride, .. } => {
            if out_channels == 0 || kernel_h == 0 || kernel_w == 0 || stride == 0 {
                Some("conv2d needs positive kernel, stride, and channels".to_string())
            } else {
                None
            }
        }
        LayerSpec::MaxPool2d { pool, stride } => {
            if pool == 0 || stride == 0 {
                Some("maxpool2d needs positive pool and stride".to_string())
            } else {
                None
            }
        }
        LayerSpec::Dropout { rate } => {
            if !rate.is_finite() || !(0.0..1.0).contains(&rate) {
                Some(format!("dropout rate {rate} not in [0, 1)"))
            } else {
                None
            }
        }
        LayerSpec::Dense { out_units } => {
            if out_units == 0 {
                Some("dense needs positive width".to_string())
            } else {
                None
            }
        }
        _ => None,
    };
    match detail {
        Some(detail) => Err(NnError::InvalidLayer { layer: i, detail }),
        None => Ok(()),
    }
}

/// Is the first activation after layer `i` a relu? Pool, dropout, and
/// flatten are transparent; hitting another parameterized layer or the
/// end means no relu.
fn relu_next(layers: &[LayerSpec], i: usize) -> bool {
    for layer in &layers[i + 1..] {
        match layer {
            LayerSpec::Relu => return true,
            LayerSpec::Sigmoid | LayerSpec::Softmax => return false,
            LayerSpec::Conv2d { .. } | LayerSpec::Dense { .. } => return false,
            _ => {}
        }
    }
    false
}

fn init_layer<F: Elem>(
    layer: &LayerSpec,
    in_shape: &[usize],
    relu_after: bool,
    seed: u64,
    index: usize,
) -> Option<LayerParams<F>> {
    let (w_shape, fan_in, fan_out) = match *layer {
        LayerSpec::Conv2d { out_channels, kernel_h, kernel_w, .. } => {
            let cin = in_shape[3];
            (
                vec![kernel_h, kernel_w, cin, out_channels],
                kernel_h * kernel_w * cin,
                kernel_h * kernel_w * out_channels,
            )
        }
        LayerSpec::Dense { out_units } => {
            let d = in_shape[1];
            (vec![d, out_units], d, out_units)
        }
        _ => return None,
    };
    let limit = if relu_after {
        (6.0 / fan_in as f64).sqrt()
    } else {
        (6.0 / (fan_in + fan_out) as f64).sqrt()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed2(seed, index as u64, 0x11));
    let n: usize = w_shape.iter().product();
    let data: Vec<F> = (0..n)
        .map(|_| F::from_f64((rng.random::<f64>() * 2.0 - 1.0) * limit))
        .collect();
    let b_len = *w_shape.last().unwrap();
    Some(LayerParams {
        w: Tensor::from_vec(&w_shape, data).expect("init shape is positive"),
        b: Tensor::zeros(&[b_len]),
    })
}
