//! Input reconstruction from an intercepted boundary representation.
//!
//! The attacker holds a surrogate copy of the client prefix (its own random
//! initialization when only the architecture leaked, the real weights in the
//! worst case) and alternates gradient descent on the surrogate parameters
//! and on an input estimate until the surrogate reproduces the intercepted
//! representation. A small total-variation penalty keeps pixel estimates
//! piecewise smooth. Everything is deterministic given the surrogate.

use crate::error::{Error, Result};
use crate::nn::{LayeredModel, Phase};
use crate::rng::RngStream;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct AttackBudget {
    /// Alternating rounds; each runs the model steps then the input steps.
    pub outer_iters: usize,
    pub input_steps: usize,
    /// Zero freezes the surrogate weights (known-weights attack).
    pub model_steps: usize,
    pub lr_input: f64,
    pub lr_model: f64,
    pub tv_weight: f64,
    /// Clamp the estimate into [0, 1] after every step (pixel data).
    pub clip_unit: bool,
    /// Match loss at or below this counts as converged.
    pub tol: f64,
    /// Independent descents from jittered starts; the best result wins.
    /// Extra starts help past dead rectifier regions.
    pub restarts: usize,
}

impl Default for AttackBudget {
    fn default() -> Self {
        AttackBudget {
            outer_iters: 60,
            input_steps: 8,
            model_steps: 4,
            lr_input: 0.1,
            lr_model: 0.05,
            tv_weight: 1e-3,
            clip_unit: true,
            tol: 1e-4,
            restarts: 2,
        }
    }
}

impl AttackBudget {
    /// Recipe for leakage profiling. The surrogate keeps the real prefix
    /// weights (worst-case attacker, nothing left to fit), and the unit-box
    /// projection is off: on small images clipping doubles as a denoiser,
    /// flattening exactly the noise response the leakage table measures.
    /// The match tolerance is zero so every cell spends the same budget;
    /// an absolute tolerance would declare victory instantly on cells whose
    /// representation is mostly zeros (dead rectifier units) and score them
    /// with an untouched starting point instead of a real reconstruction.
    pub fn profiling() -> Self {
        AttackBudget { model_steps: 0, clip_unit: false, tol: 0.0, ..AttackBudget::default() }
    }
}

#[derive(Clone, Debug)]
pub struct ReconstructionResult {
    /// Best input estimate seen, `[batch, ...input shape]`.
    pub recovered: Tensor,
    /// Match loss of that estimate: mean squared error over representation
    /// elements, total-variation excluded.
    pub objective: f64,
    pub converged: bool,
    pub iters_run: usize,
}

/// Runs the alternating attack against `target`, the intercepted
/// representation `[batch, ...boundary shape]`. The surrogate is consumed as
/// the attacker's working copy. Fully deterministic: restart jitter comes
/// from a fixed internal stream.
pub fn unsplit_reconstruct(
    surrogate: LayeredModel,
    target: &Tensor,
    budget: &AttackBudget,
) -> Result<ReconstructionResult> {
    validate_budget(budget)?;
    if target.shape.len() < 2 {
        return Err(Error::shape("reconstruction target", "[batch, ...]", format!("{:?}", target.shape)));
    }
    if !target.is_finite() {
        return Err(Error::NonFinite("reconstruction target"));
    }
    let batch = target.shape[0];
    let mut x_shape = vec![batch];
    x_shape.extend_from_slice(&surrogate.input_shape);
    let jitter_rng = RngStream::from_seed(0x5EED_A77A).child("restart");

    let mut best: Option<ReconstructionResult> = None;
    for restart in 0..budget.restarts.max(1) {
        // The first start sits at the center of the pixel box (or at the
        // origin when unconstrained, keeping plain least-squares descent in
        // the row space); later starts jitter around it.
        let mut x0 = if budget.clip_unit {
            Tensor::filled(&x_shape, 0.5)
        } else {
            Tensor::zeros(&x_shape)
        };
        if restart > 0 {
            let mut rng = jitter_rng.child_idx(restart as u64);
            for v in &mut x0.data {
                *v += 0.25 * rng.uniform_in(-1.0, 1.0);
                if budget.clip_unit {
                    *v = v.clamp(0.0, 1.0);
                }
            }
        }
        let run = descend(surrogate.clone(), x0, target, budget)?;
        best = match best {
            Some(b) if b.objective <= run.objective => Some(b),
            _ => Some(run),
        };
        if best.as_ref().expect("just set").converged {
            break;
        }
    }
    Ok(best.expect("at least one restart"))
}

/// One descent: interleaved SGD on the surrogate and monotone projected
/// gradient descent with a backtracking step size on the input. The match
/// loss (not the total-variation term) is what `objective` and the
/// convergence flag report.
fn descend(
    mut surrogate: LayeredModel,
    mut x: Tensor,
    target: &Tensor,
    budget: &AttackBudget,
) -> Result<ReconstructionResult> {
    let total = |model: &mut LayeredModel, x: &Tensor| -> Result<(f64, f64)> {
        let m = match_loss(model, x, target)?;
        Ok((m + budget.tv_weight * tv_value(x), m))
    };
    let (mut obj, mut matched) = total(&mut surrogate, &x)?;
    let mut best = ReconstructionResult {
        recovered: x.clone(),
        objective: matched,
        converged: false,
        iters_run: 0,
    };
    let mut best_obj = obj;
    let mut lr = budget.lr_input;
    for iter in 1..=budget.outer_iters {
        if budget.model_steps > 0 {
            for _ in 0..budget.model_steps {
                let (packet, _) = match_grad(&mut surrogate, &x, target)?;
                surrogate.sgd_step(&packet, budget.lr_model, 0.0)?;
            }
            // The landscape moved under the iterate.
            (obj, matched) = total(&mut surrogate, &x)?;
        }
        for _ in 0..budget.input_steps {
            let (packet, _) = match_grad(&mut surrogate, &x, target)?;
            let mut grad = packet.boundary_grad;
            if budget.tv_weight > 0.0 {
                let tv = tv_grad(&x);
                for (g, tg) in grad.data.iter_mut().zip(&tv.data) {
                    *g += budget.tv_weight * tg;
                }
            }
            let mut accepted = false;
            for _ in 0..6 {
                let mut trial = x.clone();
                for (v, g) in trial.data.iter_mut().zip(&grad.data) {
                    *v -= lr * g;
                    if budget.clip_unit {
                        *v = v.clamp(0.0, 1.0);
                    }
                }
                let (trial_obj, trial_match) = total(&mut surrogate, &trial)?;
                if trial_obj < obj {
                    x = trial;
                    obj = trial_obj;
                    matched = trial_match;
                    lr = (lr * 1.3).min(budget.lr_input * 1024.0);
                    accepted = true;
                    break;
                }
                lr *= 0.5;
            }
            if obj < best_obj {
                best_obj = obj;
                best.objective = matched;
                best.recovered = x.clone();
            }
            if !accepted {
                break;
            }
        }
        best.iters_run = iter;
        if best.objective <= budget.tol {
            break;
        }
    }
    best.converged = best.objective <= budget.tol;
    Ok(best)
}

/// Smoothing half-width of the total-variation kinks. Differences well above
/// it are penalized like plain absolute values; the rounding keeps the
/// objective differentiable so line-searched descent cannot wedge on a kink.
const TV_EPS: f64 = 1e-3;

fn charbonnier(d: f64) -> f64 {
    (d * d + TV_EPS * TV_EPS).sqrt() - TV_EPS
}

fn charbonnier_grad(d: f64) -> f64 {
    d / (d * d + TV_EPS * TV_EPS).sqrt()
}

/// Smoothed anisotropic total variation, averaged over the difference terms
/// so the regularization weight is comparable across image sizes;
/// [`tv_grad`] is its exact gradient.
fn tv_value(x: &Tensor) -> f64 {
    let (h, w, planes) = tv_dims(x);
    let plane = h * w;
    let mut acc = 0.0;
    for p in 0..planes {
        let base = p * plane;
        for r in 0..h {
            for c in 0..w {
                let i = base + r * w + c;
                if c + 1 < w {
                    acc += charbonnier(x.data[i + 1] - x.data[i]);
                }
                if r + 1 < h {
                    acc += charbonnier(x.data[i + w] - x.data[i]);
                }
            }
        }
    }
    acc / tv_terms(h, w, planes)
}

fn tv_dims(x: &Tensor) -> (usize, usize, usize) {
    let nd = x.shape.len();
    let (h, w) = if nd >= 3 {
        (x.shape[nd - 2], x.shape[nd - 1])
    } else {
        (1, x.shape[nd - 1])
    };
    (h, w, x.numel() / (h * w))
}

fn tv_terms(h: usize, w: usize, planes: usize) -> f64 {
    (planes * (h * (w - 1) + (h - 1) * w)).max(1) as f64
}

fn validate_budget(b: &AttackBudget) -> Result<()> {
    for (what, v) in [("lr_input", b.lr_input), ("lr_model", b.lr_model), ("tv_weight", b.tv_weight), ("tol", b.tol)] {
        if !v.is_finite() || v < 0.0 {
            return Err(Error::InvalidArgument(format!("attack budget {what} = {v} must be finite and >= 0")));
        }
    }
    if b.outer_iters == 0 || b.input_steps == 0 {
        return Err(Error::InvalidArgument("attack budget needs outer_iters and input_steps >= 1".into()));
    }
    Ok(())
}

fn match_loss(model: &mut LayeredModel, x: &Tensor, target: &Tensor) -> Result<f64> {
    let y = model.infer(x)?;
    y.mse(target)
}

/// Gradient packet of the match loss at `x`, running the surrogate with
/// frozen normalization statistics so the attack inverts the same function
/// that produced the representation.
fn match_grad(
    model: &mut LayeredModel,
    x: &Tensor,
    target: &Tensor,
) -> Result<(crate::nn::GradientPacket, f64)> {
    let (y, tape) = model.forward(x, Phase::Eval, true)?;
    let loss = y.mse(target)?;
    let scale = 2.0 / y.numel() as f64;
    let dy = Tensor {
        shape: y.shape.clone(),
        data: y.data.iter().zip(&target.data).map(|(a, b)| scale * (a - b)).collect(),
    };
    let packet = model.backward(&tape.expect("tape requested"), &dy)?;
    Ok((packet, loss))
}

/// Gradient of [`tv_value`]. Images (3-D and up) vary over the trailing two
/// axes; flat feature vectors over their single axis.
fn tv_grad(x: &Tensor) -> Tensor {
    let mut grad = Tensor::zeros(&x.shape);
    let (h, w, planes) = tv_dims(x);
    let plane = h * w;
    for p in 0..planes {
        let base = p * plane;
        for r in 0..h {
            for c in 0..w {
                let i = base + r * w + c;
                if c + 1 < w {
                    let d = charbonnier_grad(x.data[i + 1] - x.data[i]);
                    grad.data[i] -= d;
                    grad.data[i + 1] += d;
                }
                if r + 1 < h {
                    let d = charbonnier_grad(x.data[i + w] - x.data[i]);
                    grad.data[i] -= d;
                    grad.data[i + w] += d;
                }
            }
        }
    }
    let n = tv_terms(h, w, planes);
    for g in &mut grad.data {
        *g /= n;
    }
    grad
}
