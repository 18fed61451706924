//! Layered feed-forward networks with reverse-mode gradients.
//!
//! A [`LayeredModel`] is an ordered stack of layers over f64 tensors. The
//! forward pass can record a [`Tape`]; [`LayeredModel::backward`] replays it
//! in reverse to produce parameter gradients and the gradient with respect to
//! the model input. Models can be cut at any interior boundary with
//! [`split_model`] and glued back with [`concat_models`], which is what the
//! split-learning protocol builds on.

mod checkpoint;
mod layers;
mod loss;

pub use checkpoint::{load_model, save_model};
pub use layers::{LayerTape, BN_EPS, BN_MOMENTUM};
pub use loss::{argmax_row, softmax_cross_entropy, softmax_rows};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

fn default_pool_size() -> usize {
    2
}

/// Architecture description of a single layer; no weights.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum LayerSpec {
    Dense {
        out: usize,
    },
    Relu,
    Conv2dSmall {
        out_channels: usize,
        kernel: usize,
        /// Defaults to kernel / 2, which preserves spatial size for odd kernels.
        padding: Option<usize>,
    },
    MaxPool {
        #[serde(default = "default_pool_size")]
        size: usize,
    },
    BatchNorm,
}

/// Architecture description of a whole model: per-sample input shape plus an
/// ordered list of layer specs. Weights are created by [`ModelSpec::build`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    /// Per-sample shape, e.g. `[1, 8, 8]` for one-channel images or `[2]`
    /// for planar points. The batch axis is prepended at run time.
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

impl ModelSpec {
    /// Per-sample activation shapes: entry 0 is the input shape, entry s is
    /// the shape after layer s. Fails if any layer cannot accept its input.
    pub fn activation_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shapes = vec![self.input_shape.clone()];
        let mut cur = self.input_shape.clone();
        for (idx, spec) in self.layers.iter().enumerate() {
            cur = layer_out_shape_spec(spec, &cur).map_err(|e| {
                Error::InvalidArgument(format!("layer {} of spec: {e}", idx + 1))
            })?;
            shapes.push(cur.clone());
        }
        Ok(shapes)
    }

    /// Number of elements crossing the boundary after layer s, per sample.
    pub fn boundary_elems(&self, s: usize) -> Result<usize> {
        let shapes = self.activation_shapes()?;
        if s >= shapes.len() {
            return Err(Error::OutOfRange { what: "split point", got: s, lo: 1, hi: shapes.len() - 1 });
        }
        Ok(shapes[s].iter().product())
    }

    /// Spec for layers 1..=s with the same input shape.
    pub fn prefix(&self, s: usize) -> Result<ModelSpec> {
        if s == 0 || s > self.layers.len() {
            return Err(Error::OutOfRange { what: "prefix length", got: s, lo: 1, hi: self.layers.len() });
        }
        Ok(ModelSpec {
            input_shape: self.input_shape.clone(),
            layers: self.layers[..s].to_vec(),
        })
    }

    /// Instantiates weights. Dense and convolution weights and biases draw
    /// uniformly from [-1/sqrt(fan_in), +1/sqrt(fan_in)].
    pub fn build(&self, rng: &mut RngStream) -> Result<LayeredModel> {
        let shapes = self.activation_shapes()?;
        if self.layers.is_empty() {
            return Err(Error::InvalidArgument("model spec has no layers".into()));
        }
        let mut built = Vec::with_capacity(self.layers.len());
        for (idx, spec) in self.layers.iter().enumerate() {
            let in_shape = &shapes[idx];
            built.push(match spec {
                LayerSpec::Dense { out } => {
                    let fan_in: usize = in_shape.iter().product();
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    let weight = rand_tensor(&[*out, fan_in], bound, rng);
                    let bias = rand_tensor(&[*out], bound, rng);
                    Layer::Dense { weight, bias }
                }
                LayerSpec::Relu => Layer::Relu,
                LayerSpec::Conv2dSmall { out_channels, kernel, padding } => {
                    let ci = in_shape[0];
                    let fan_in = ci * kernel * kernel;
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    let weight = rand_tensor(&[*out_channels, ci, *kernel, *kernel], bound, rng);
                    let bias = rand_tensor(&[*out_channels], bound, rng);
                    Layer::Conv2d {
                        weight,
                        bias,
                        padding: padding.unwrap_or(kernel / 2),
                    }
                }
                LayerSpec::MaxPool { size } => Layer::MaxPool { size: *size },
                LayerSpec::BatchNorm => {
                    let c = in_shape[0];
                    Layer::BatchNorm {
                        gamma: Tensor::filled(&[c], 1.0),
                        beta: Tensor::zeros(&[c]),
                        running_mean: Tensor::zeros(&[c]),
                        running_var: Tensor::filled(&[c], 1.0),
                    }
                }
            });
        }
        Ok(LayeredModel {
            input_shape: self.input_shape.clone(),
            layers: built,
        })
    }
}

fn rand_tensor(shape: &[usize], bound: f64, rng: &mut RngStream) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor {
        shape: shape.to_vec(),
        data: (0..n).map(|_| rng.uniform_in(-bound, bound)).collect(),
    }
}

/// One layer with its weights.
#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Dense {
        /// Row-major `[out, in]`.
        weight: Tensor,
        bias: Tensor,
    },
    Relu,
    Conv2d {
        /// `[out_channels, in_channels, k, k]`, stride 1.
        weight: Tensor,
        bias: Tensor,
        padding: usize,
    },
    MaxPool {
        size: usize,
    },
    BatchNorm {
        gamma: Tensor,
        beta: Tensor,
        /// Running statistics travel with the layer: they are serialized,
        /// averaged during aggregation, and frozen during evaluation, but
        /// they receive no gradient updates.
        running_mean: Tensor,
        running_var: Tensor,
    },
}

impl Layer {
    /// Tensors updated by gradient descent, in the order their gradients
    /// appear in a [`GradientPacket`].
    pub fn trainable(&self) -> Vec<&Tensor> {
        match self {
            Layer::Dense { weight, bias } | Layer::Conv2d { weight, bias, .. } => vec![weight, bias],
            Layer::BatchNorm { gamma, beta, .. } => vec![gamma, beta],
            Layer::Relu | Layer::MaxPool { .. } => vec![],
        }
    }

    fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Layer::Dense { weight, bias } | Layer::Conv2d { weight, bias, .. } => vec![weight, bias],
            Layer::BatchNorm { gamma, beta, .. } => vec![gamma, beta],
            Layer::Relu | Layer::MaxPool { .. } => vec![],
        }
    }

    /// All stateful tensors, including batch-norm running statistics. This is
    /// what aggregation averages and what checkpoints persist.
    pub fn state(&self) -> Vec<&Tensor> {
        match self {
            Layer::Dense { weight, bias } | Layer::Conv2d { weight, bias, .. } => vec![weight, bias],
            Layer::BatchNorm { gamma, beta, running_mean, running_var } => {
                vec![gamma, beta, running_mean, running_var]
            }
            Layer::Relu | Layer::MaxPool { .. } => vec![],
        }
    }

    pub fn state_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Layer::Dense { weight, bias } | Layer::Conv2d { weight, bias, .. } => vec![weight, bias],
            Layer::BatchNorm { gamma, beta, running_mean, running_var } => {
                vec![gamma, beta, running_mean, running_var]
            }
            Layer::Relu | Layer::MaxPool { .. } => vec![],
        }
    }
}

/// Whether a forward pass uses batch statistics (training) or the stored
/// running statistics (evaluation).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

/// Values recorded during a taped forward pass, consumed by `backward`.
#[derive(Clone, Debug)]
pub struct Tape {
    steps: Vec<LayerTape>,
}

/// Gradients from one backward pass: the gradient at the model input (what a
/// server sends back across the split boundary) plus per-layer parameter
/// gradients, and the scalar loss the pass came from.
#[derive(Clone, Debug)]
pub struct GradientPacket {
    pub boundary_grad: Tensor,
    /// One entry per layer, matching `Layer::trainable` order.
    pub param_grads: Vec<Vec<Tensor>>,
    pub loss_value: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayeredModel {
    /// Per-sample input shape this model expects.
    pub input_shape: Vec<usize>,
    pub layers: Vec<Layer>,
}

impl LayeredModel {
    pub fn k(&self) -> usize {
        self.layers.len()
    }

    /// Per-sample output shape of layer `idx` given this model's input shape.
    pub fn shape_after(&self, idx: usize) -> Result<Vec<usize>> {
        let mut cur = self.input_shape.clone();
        for layer in &self.layers[..idx] {
            cur = layer_out_shape(layer, &cur)?;
        }
        Ok(cur)
    }

    /// Forward pass. `phase` selects batch-norm statistics; training-phase
    /// passes update the running statistics in place. Returns the output and,
    /// when `record` is set, the tape for a later backward pass.
    pub fn forward(&mut self, x: &Tensor, phase: Phase, record: bool) -> Result<(Tensor, Option<Tape>)> {
        self.check_input(x)?;
        let mut cur = x.clone();
        let mut steps = record.then(|| Vec::with_capacity(self.layers.len()));
        for layer in &mut self.layers {
            let (y, tape) = forward_layer(layer, &cur, phase)?;
            if !y.is_finite() {
                return Err(Error::NonFinite("layer forward output"));
            }
            cur = y;
            if let Some(steps) = steps.as_mut() {
                steps.push(tape);
            }
        }
        Ok((cur, steps.map(|steps| Tape { steps })))
    }

    /// Evaluation-phase forward without tape or side effects.
    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut cur = x.clone();
        for layer in &self.layers {
            let (y, _) = forward_layer_pure(layer, &cur, Phase::Eval)?;
            if !y.is_finite() {
                return Err(Error::NonFinite("layer forward output"));
            }
            cur = y;
        }
        Ok(cur)
    }

    /// Replays `tape` in reverse. `upstream` is the loss gradient at this
    /// model's output; the result carries the gradient at its input.
    pub fn backward(&self, tape: &Tape, upstream: &Tensor) -> Result<GradientPacket> {
        if tape.steps.len() != self.layers.len() {
            return Err(Error::State(format!(
                "tape has {} steps for a {}-layer model",
                tape.steps.len(),
                self.layers.len()
            )));
        }
        let mut grad = upstream.clone();
        let mut param_grads = vec![Vec::new(); self.layers.len()];
        for (idx, layer) in self.layers.iter().enumerate().rev() {
            let (dx, grads) = backward_layer(layer, &tape.steps[idx], &grad)?;
            if !dx.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite("layer backward output"));
            }
            grad = dx;
            param_grads[idx] = grads;
        }
        Ok(GradientPacket {
            boundary_grad: grad,
            param_grads,
            loss_value: 0.0,
        })
    }

    /// One SGD step with L2 coupling: p <- p - lr * (g + l2 * p).
    pub fn sgd_step(&mut self, grads: &GradientPacket, lr: f64, l2: f64) -> Result<()> {
        if grads.param_grads.len() != self.layers.len() {
            return Err(Error::State(format!(
                "gradient packet covers {} layers, model has {}",
                grads.param_grads.len(),
                self.layers.len()
            )));
        }
        if !lr.is_finite() || !l2.is_finite() {
            return Err(Error::NonFinite("sgd hyperparameter"));
        }
        for (layer, layer_grads) in self.layers.iter_mut().zip(&grads.param_grads) {
            let params = layer.trainable_mut();
            if params.len() != layer_grads.len() {
                return Err(Error::State("gradient packet does not match layer parameters".into()));
            }
            for (p, g) in params.into_iter().zip(layer_grads) {
                if p.shape != g.shape {
                    return Err(Error::shape("sgd_step", format!("{:?}", p.shape), format!("{:?}", g.shape)));
                }
                if !g.is_finite() {
                    return Err(Error::NonFinite("parameter gradient"));
                }
                for (pv, gv) in p.data.iter_mut().zip(&g.data) {
                    *pv -= lr * (gv + l2 * *pv);
                }
            }
        }
        Ok(())
    }

    /// Total trainable parameter count.
    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.trainable().iter().map(|t| t.numel()).sum::<usize>())
            .sum()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape.len() < 2 || x.shape[1..] != self.input_shape[..] {
            return Err(Error::shape(
                "model forward",
                format!("[batch, {:?}]", self.input_shape),
                format!("{:?}", x.shape),
            ));
        }
        Ok(())
    }
}

/// Cuts a model after layer `s`, returning (layers 1..=s, layers s+1..=k).
/// Both halves keep working copies of the weights.
pub fn split_model(m: &LayeredModel, s: usize) -> Result<(LayeredModel, LayeredModel)> {
    let k = m.k();
    if s < 1 || s >= k {
        return Err(Error::OutOfRange { what: "split point", got: s, lo: 1, hi: k.saturating_sub(1) });
    }
    let boundary = m.shape_after(s)?;
    Ok((
        LayeredModel {
            input_shape: m.input_shape.clone(),
            layers: m.layers[..s].to_vec(),
        },
        LayeredModel {
            input_shape: boundary,
            layers: m.layers[s..].to_vec(),
        },
    ))
}

/// Glues two stacks back together. The first may be empty, in which case the
/// result is the second. Fails when the seam shapes disagree.
pub fn concat_models(a: &LayeredModel, b: &LayeredModel) -> Result<LayeredModel> {
    if a.layers.is_empty() {
        return Ok(b.clone());
    }
    let seam = a.shape_after(a.k())?;
    if !b.layers.is_empty() && seam != b.input_shape {
        return Err(Error::shape("concat_models", format!("{seam:?}"), format!("{:?}", b.input_shape)));
    }
    let mut layers = a.layers.clone();
    layers.extend(b.layers.iter().cloned());
    Ok(LayeredModel {
        input_shape: a.input_shape.clone(),
        layers,
    })
}

fn layer_out_shape(layer: &Layer, in_shape: &[usize]) -> Result<Vec<usize>> {
    match layer {
        Layer::Dense { weight, .. } => {
            let flat: usize = in_shape.iter().product();
            if flat != weight.shape[1] {
                return Err(Error::shape("dense", format!("{} inputs", weight.shape[1]), format!("{flat}")));
            }
            Ok(vec![weight.shape[0]])
        }
        Layer::Relu => Ok(in_shape.to_vec()),
        Layer::Conv2d { weight, padding, .. } => {
            if in_shape.len() != 3 || in_shape[0] != weight.shape[1] {
                return Err(Error::shape(
                    "conv",
                    format!("[{}, h, w]", weight.shape[1]),
                    format!("{in_shape:?}"),
                ));
            }
            let (ho, wo) = layers::conv_out_hw(in_shape[1], in_shape[2], weight.shape[2], *padding)?;
            Ok(vec![weight.shape[0], ho, wo])
        }
        Layer::MaxPool { size } => {
            if in_shape.len() != 3 {
                return Err(Error::shape("max-pool", "[c, h, w]", format!("{in_shape:?}")));
            }
            let (ho, wo) = (in_shape[1] / size, in_shape[2] / size);
            if ho == 0 || wo == 0 {
                return Err(Error::InvalidArgument(format!(
                    "pool window {size} does not fit {in_shape:?}"
                )));
            }
            Ok(vec![in_shape[0], ho, wo])
        }
        Layer::BatchNorm { gamma, .. } => {
            if in_shape.is_empty() || in_shape[0] != gamma.numel() {
                return Err(Error::shape(
                    "batch-norm",
                    format!("{} channels", gamma.numel()),
                    format!("{in_shape:?}"),
                ));
            }
            Ok(in_shape.to_vec())
        }
    }
}

fn layer_out_shape_spec(spec: &LayerSpec, in_shape: &[usize]) -> Result<Vec<usize>> {
    match spec {
        LayerSpec::Dense { out } => {
            if in_shape.iter().product::<usize>() == 0 {
                return Err(Error::InvalidArgument("dense layer on empty input".into()));
            }
            Ok(vec![*out])
        }
        LayerSpec::Relu | LayerSpec::BatchNorm => {
            if in_shape.is_empty() {
                return Err(Error::InvalidArgument("layer on rank-0 input".into()));
            }
            Ok(in_shape.to_vec())
        }
        LayerSpec::Conv2dSmall { out_channels, kernel, padding } => {
            if in_shape.len() != 3 {
                return Err(Error::shape("conv spec", "[c, h, w]", format!("{in_shape:?}")));
            }
            let pad = padding.unwrap_or(kernel / 2);
            let (ho, wo) = layers::conv_out_hw(in_shape[1], in_shape[2], *kernel, pad)?;
            Ok(vec![*out_channels, ho, wo])
        }
        LayerSpec::MaxPool { size } => {
            if in_shape.len() != 3 || in_shape[1] / size == 0 || in_shape[2] / size == 0 {
                return Err(Error::InvalidArgument(format!(
                    "pool window {size} does not fit {in_shape:?}"
                )));
            }
            Ok(vec![in_shape[0], in_shape[1] / size, in_shape[2] / size])
        }
    }
}

fn forward_layer(layer: &mut Layer, x: &Tensor, phase: Phase) -> Result<(Tensor, LayerTape)> {
    match layer {
        Layer::BatchNorm { gamma, beta, running_mean, running_var } => {
            let (y, tape, update) = layers::batchnorm_forward(
                x,
                gamma,
                beta,
                running_mean,
                running_var,
                phase == Phase::Train,
            )?;
            if let Some(u) = update {
                running_mean.data = u.running_mean;
                running_var.data = u.running_var;
            }
            Ok((y, tape))
        }
        other => forward_layer_pure(other, x, phase),
    }
}

fn forward_layer_pure(layer: &Layer, x: &Tensor, phase: Phase) -> Result<(Tensor, LayerTape)> {
    match layer {
        Layer::Dense { weight, bias } => layers::dense_forward(x, weight, bias),
        Layer::Relu => Ok(layers::relu_forward(x)),
        Layer::Conv2d { weight, bias, padding } => layers::conv2d_forward(x, weight, bias, *padding),
        Layer::MaxPool { size } => layers::maxpool_forward(x, *size),
        Layer::BatchNorm { gamma, beta, running_mean, running_var } => {
            let (y, tape, _) = layers::batchnorm_forward(
                x,
                gamma,
                beta,
                running_mean,
                running_var,
                phase == Phase::Train,
            )?;
            Ok((y, tape))
        }
    }
}

fn backward_layer(layer: &Layer, tape: &LayerTape, dy: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
    match layer {
        Layer::Dense { weight, .. } => layers::dense_backward(weight, tape, dy),
        Layer::Relu => layers::relu_backward(tape, dy),
        Layer::Conv2d { weight, padding, .. } => layers::conv2d_backward(weight, tape, dy, *padding),
        Layer::MaxPool { .. } => layers::maxpool_backward(tape, dy),
        Layer::BatchNorm { gamma, .. } => layers::batchnorm_backward(gamma, tape, dy),
    }
}
