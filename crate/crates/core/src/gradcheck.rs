//! Finite-difference verification of analytic gradients.
//!
//! The checker scores a model against central differences of a smooth probe
//! loss L(y) = sum(y^2) / 2, whose upstream gradient is the output itself.
//! That exercises every layer's backward path without needing labels, so it
//! works for any output shape.

use crate::error::Result;
use crate::nn::{LayeredModel, Phase};
use crate::tensor::Tensor;

/// Probe loss on a training-phase forward pass. The model is cloned so
/// batch-norm running statistics are untouched.
pub fn probe_loss(model: &LayeredModel, x: &Tensor) -> Result<f64> {
    let mut m = model.clone();
    let (y, _) = m.forward(x, Phase::Train, false)?;
    Ok(y.data.iter().map(|&v| v * v).sum::<f64>() / 2.0)
}

/// Largest relative disagreement between analytic and central-difference
/// gradients over every trainable parameter and the model input.
///
/// Relative error of a pair (a, f) is |a - f| / max(|a|, |f|, 1).
pub fn max_rel_error(model: &LayeredModel, x: &Tensor, eps: f64) -> Result<f64> {
    let mut m = model.clone();
    let (y, tape) = m.forward(x, Phase::Train, true)?;
    let tape = tape.expect("tape requested");
    let packet = m.backward(&tape, &y)?;

    let mut worst: f64 = 0.0;
    let rel = |a: f64, f: f64| (a - f).abs() / a.abs().max(f.abs()).max(1.0);

    for (li, layer_grads) in packet.param_grads.iter().enumerate() {
        for (pi, grads) in layer_grads.iter().enumerate() {
            for ei in 0..grads.numel() {
                let fd = {
                    let mut plus = model.clone();
                    nudge(&mut plus, li, pi, ei, eps);
                    let lp = probe_loss(&plus, x)?;
                    let mut minus = model.clone();
                    nudge(&mut minus, li, pi, ei, -eps);
                    let lm = probe_loss(&minus, x)?;
                    (lp - lm) / (2.0 * eps)
                };
                worst = worst.max(rel(grads.data[ei], fd));
            }
        }
    }

    for ei in 0..x.numel() {
        let fd = {
            let mut xp = x.clone();
            xp.data[ei] += eps;
            let lp = probe_loss(model, &xp)?;
            let mut xm = x.clone();
            xm.data[ei] -= eps;
            let lm = probe_loss(model, &xm)?;
            (lp - lm) / (2.0 * eps)
        };
        worst = worst.max(rel(packet.boundary_grad.data[ei], fd));
    }
    Ok(worst)
}

fn nudge(model: &mut LayeredModel, layer: usize, param: usize, elem: usize, delta: f64) {
    let mut params = match &mut model.layers[layer] {
        crate::nn::Layer::Dense { weight, bias } => vec![weight, bias],
        crate::nn::Layer::Conv2d { weight, bias, .. } => vec![weight, bias],
        crate::nn::Layer::BatchNorm { gamma, beta, .. } => vec![gamma, beta],
        crate::nn::Layer::Relu | crate::nn::Layer::MaxPool { .. } => vec![],
    };
    params[param].data[elem] += delta;
}
