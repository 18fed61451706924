//! Forward and backward math for the individual layer kinds.
//!
//! Inputs carry a leading batch axis. Dense layers flatten whatever trails
//! the batch axis; convolution and pooling expect `[batch, channels, h, w]`;
//! batch normalization treats axis 1 as the channel axis, which covers both
//! feature vectors `[batch, f]` and image stacks `[batch, c, h, w]`.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-layer values recorded during a taped forward pass.
#[derive(Clone, Debug)]
pub enum LayerTape {
    Dense {
        /// Input flattened to `[batch, in]`.
        input2d: Tensor,
        input_shape: Vec<usize>,
    },
    Relu {
        mask: Vec<bool>,
        shape: Vec<usize>,
    },
    Conv2d {
        input: Tensor,
    },
    MaxPool {
        input_shape: Vec<usize>,
        /// Flat input index of the (first) maximum per output element.
        argmax: Vec<usize>,
    },
    BatchNorm {
        xhat: Tensor,
        inv_std: Vec<f64>,
        /// Elements reduced per channel when the stats were taken.
        count: usize,
        /// True when batch statistics were used (training phase).
        batch_stats: bool,
    },
}

/// Updated running statistics produced by a training-phase batch-norm pass.
pub struct BnStatsUpdate {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

fn batch_of(x: &Tensor, ctx: &'static str) -> Result<usize> {
    if x.shape.is_empty() || x.shape[0] == 0 {
        return Err(Error::shape(ctx, "non-empty batch axis", format!("{:?}", x.shape)));
    }
    Ok(x.shape[0])
}

// ---- dense ----------------------------------------------------------------

pub fn dense_forward(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<(Tensor, LayerTape)> {
    let b = batch_of(x, "dense forward")?;
    let (out_dim, in_dim) = (weight.shape[0], weight.shape[1]);
    let flat: usize = x.shape[1..].iter().product();
    if flat != in_dim {
        return Err(Error::shape("dense forward", format!("{in_dim} inputs"), format!("{flat} ({:?})", x.shape)));
    }
    let input2d = x.reshaped(&[b, in_dim])?;
    let mut y = Tensor::zeros(&[b, out_dim]);
    for bi in 0..b {
        let row = &input2d.data[bi * in_dim..(bi + 1) * in_dim];
        for o in 0..out_dim {
            let w_row = &weight.data[o * in_dim..(o + 1) * in_dim];
            let mut acc = bias.data[o];
            for i in 0..in_dim {
                acc += row[i] * w_row[i];
            }
            y.data[bi * out_dim + o] = acc;
        }
    }
    let tape = LayerTape::Dense {
        input2d,
        input_shape: x.shape.clone(),
    };
    Ok((y, tape))
}

pub fn dense_backward(
    weight: &Tensor,
    tape: &LayerTape,
    dy: &Tensor,
) -> Result<(Tensor, Vec<Tensor>)> {
    let LayerTape::Dense { input2d, input_shape } = tape else {
        return Err(Error::State("tape kind does not match dense layer".into()));
    };
    let (out_dim, in_dim) = (weight.shape[0], weight.shape[1]);
    let b = input2d.shape[0];
    if dy.shape != [b, out_dim] {
        return Err(Error::shape("dense backward", format!("[{b}, {out_dim}]"), format!("{:?}", dy.shape)));
    }
    let mut dw = Tensor::zeros(&weight.shape);
    let mut db = Tensor::zeros(&[out_dim]);
    let mut dx = Tensor::zeros(&[b, in_dim]);
    for bi in 0..b {
        let x_row = &input2d.data[bi * in_dim..(bi + 1) * in_dim];
        for o in 0..out_dim {
            let g = dy.data[bi * out_dim + o];
            db.data[o] += g;
            let w_row = &weight.data[o * in_dim..(o + 1) * in_dim];
            let dw_row = &mut dw.data[o * in_dim..(o + 1) * in_dim];
            let dx_row = &mut dx.data[bi * in_dim..(bi + 1) * in_dim];
            for i in 0..in_dim {
                dw_row[i] += g * x_row[i];
                dx_row[i] += g * w_row[i];
            }
        }
    }
    Ok((dx.reshaped(input_shape)?, vec![dw, db]))
}

// ---- relu -----------------------------------------------------------------

pub fn relu_forward(x: &Tensor) -> (Tensor, LayerTape) {
    let mask: Vec<bool> = x.data.iter().map(|&v| v > 0.0).collect();
    let y = x.map(|v| if v > 0.0 { v } else { 0.0 });
    let tape = LayerTape::Relu {
        mask,
        shape: x.shape.clone(),
    };
    (y, tape)
}

pub fn relu_backward(tape: &LayerTape, dy: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
    let LayerTape::Relu { mask, shape } = tape else {
        return Err(Error::State("tape kind does not match relu layer".into()));
    };
    if &dy.shape != shape {
        return Err(Error::shape("relu backward", format!("{shape:?}"), format!("{:?}", dy.shape)));
    }
    let data = dy
        .data
        .iter()
        .zip(mask)
        .map(|(&g, &m)| if m { g } else { 0.0 })
        .collect();
    Ok((Tensor { shape: shape.clone(), data }, vec![]))
}

// ---- conv2d ---------------------------------------------------------------

pub fn conv_out_hw(h: usize, w: usize, k: usize, pad: usize) -> Result<(usize, usize)> {
    let ho = (h + 2 * pad).checked_sub(k - 1).unwrap_or(0);
    let wo = (w + 2 * pad).checked_sub(k - 1).unwrap_or(0);
    if ho == 0 || wo == 0 {
        return Err(Error::InvalidArgument(format!(
            "conv kernel {k} with padding {pad} does not fit a {h}x{w} input"
        )));
    }
    Ok((ho, wo))
}

pub fn conv2d_forward(
    x: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    pad: usize,
) -> Result<(Tensor, LayerTape)> {
    let b = batch_of(x, "conv forward")?;
    if x.shape.len() != 4 {
        return Err(Error::shape("conv forward", "[batch, c, h, w]", format!("{:?}", x.shape)));
    }
    let (ci, h, w) = (x.shape[1], x.shape[2], x.shape[3]);
    let (co, wci, k) = (weight.shape[0], weight.shape[1], weight.shape[2]);
    if wci != ci {
        return Err(Error::shape("conv forward", format!("{wci} input channels"), format!("{ci}")));
    }
    let (ho, wo) = conv_out_hw(h, w, k, pad)?;
    let mut y = Tensor::zeros(&[b, co, ho, wo]);
    for bi in 0..b {
        for oc in 0..co {
            for i in 0..ho {
                for j in 0..wo {
                    let mut acc = bias.data[oc];
                    for ic in 0..ci {
                        for u in 0..k {
                            let hi = (i + u) as isize - pad as isize;
                            if hi < 0 || hi >= h as isize {
                                continue;
                            }
                            for v in 0..k {
                                let wj = (j + v) as isize - pad as isize;
                                if wj < 0 || wj >= w as isize {
                                    continue;
                                }
                                let xi = ((bi * ci + ic) * h + hi as usize) * w + wj as usize;
                                let wi = ((oc * ci + ic) * k + u) * k + v;
                                acc += x.data[xi] * weight.data[wi];
                            }
                        }
                    }
                    y.data[((bi * co + oc) * ho + i) * wo + j] = acc;
                }
            }
        }
    }
    Ok((y, LayerTape::Conv2d { input: x.clone() }))
}

pub fn conv2d_backward(
    weight: &Tensor,
    tape: &LayerTape,
    dy: &Tensor,
    pad: usize,
) -> Result<(Tensor, Vec<Tensor>)> {
    let LayerTape::Conv2d { input: x } = tape else {
        return Err(Error::State("tape kind does not match conv layer".into()));
    };
    let (b, ci, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let (co, k) = (weight.shape[0], weight.shape[2]);
    let (ho, wo) = conv_out_hw(h, w, k, pad)?;
    if dy.shape != [b, co, ho, wo] {
        return Err(Error::shape("conv backward", format!("[{b}, {co}, {ho}, {wo}]"), format!("{:?}", dy.shape)));
    }
    let mut dw = Tensor::zeros(&weight.shape);
    let mut db = Tensor::zeros(&[co]);
    let mut dx = Tensor::zeros(&x.shape);
    for bi in 0..b {
        for oc in 0..co {
            for i in 0..ho {
                for j in 0..wo {
                    let g = dy.data[((bi * co + oc) * ho + i) * wo + j];
                    db.data[oc] += g;
                    for ic in 0..ci {
                        for u in 0..k {
                            let hi = (i + u) as isize - pad as isize;
                            if hi < 0 || hi >= h as isize {
                                continue;
                            }
                            for v in 0..k {
                                let wj = (j + v) as isize - pad as isize;
                                if wj < 0 || wj >= w as isize {
                                    continue;
                                }
                                let xi = ((bi * ci + ic) * h + hi as usize) * w + wj as usize;
                                let wi = ((oc * ci + ic) * k + u) * k + v;
                                dw.data[wi] += g * x.data[xi];
                                dx.data[xi] += g * weight.data[wi];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((dx, vec![dw, db]))
}

// ---- max-pool -------------------------------------------------------------

pub fn maxpool_forward(x: &Tensor, size: usize) -> Result<(Tensor, LayerTape)> {
    let b = batch_of(x, "max-pool forward")?;
    if x.shape.len() != 4 {
        return Err(Error::shape("max-pool forward", "[batch, c, h, w]", format!("{:?}", x.shape)));
    }
    let (c, h, w) = (x.shape[1], x.shape[2], x.shape[3]);
    let (ho, wo) = (h / size, w / size);
    if ho == 0 || wo == 0 {
        return Err(Error::InvalidArgument(format!(
            "pool window {size} does not fit a {h}x{w} input"
        )));
    }
    let mut y = Tensor::zeros(&[b, c, ho, wo]);
    let mut argmax = vec![0usize; y.numel()];
    for bi in 0..b {
        for ci in 0..c {
            for i in 0..ho {
                for j in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0usize;
                    for u in 0..size {
                        for v in 0..size {
                            let xi = ((bi * c + ci) * h + i * size + u) * w + j * size + v;
                            // Strict comparison: ties go to the first maximum.
                            if x.data[xi] > best {
                                best = x.data[xi];
                                best_idx = xi;
                            }
                        }
                    }
                    let yi = ((bi * c + ci) * ho + i) * wo + j;
                    y.data[yi] = best;
                    argmax[yi] = best_idx;
                }
            }
        }
    }
    let tape = LayerTape::MaxPool {
        input_shape: x.shape.clone(),
        argmax,
    };
    Ok((y, tape))
}

pub fn maxpool_backward(tape: &LayerTape, dy: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
    let LayerTape::MaxPool { input_shape, argmax } = tape else {
        return Err(Error::State("tape kind does not match max-pool layer".into()));
    };
    if dy.numel() != argmax.len() {
        return Err(Error::shape("max-pool backward", format!("{} grads", argmax.len()), format!("{}", dy.numel())));
    }
    let mut dx = Tensor::zeros(input_shape);
    for (g, &xi) in dy.data.iter().zip(argmax) {
        dx.data[xi] += g;
    }
    Ok((dx, vec![]))
}

// ---- batch-norm -----------------------------------------------------------

fn channel_layout(x: &Tensor, channels: usize) -> Result<(usize, usize)> {
    if x.shape.len() < 2 || x.shape[1] != channels {
        return Err(Error::shape(
            "batch-norm",
            format!("axis 1 of size {channels}"),
            format!("{:?}", x.shape),
        ));
    }
    let inner: usize = x.shape[2..].iter().product();
    let count = x.shape[0] * inner;
    Ok((inner, count))
}

#[inline]
fn bn_channel(idx: usize, inner: usize, channels: usize) -> usize {
    (idx / inner) % channels
}

/// Training phase normalizes with the current batch statistics and reports
/// updated running statistics; evaluation normalizes with the stored ones.
#[allow(clippy::too_many_arguments)]
pub fn batchnorm_forward(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running_mean: &Tensor,
    running_var: &Tensor,
    train: bool,
) -> Result<(Tensor, LayerTape, Option<BnStatsUpdate>)> {
    batch_of(x, "batch-norm forward")?;
    let channels = gamma.numel();
    let (inner, count) = channel_layout(x, channels)?;
    let (mean, var) = if train {
        let mut mean = vec![0.0; channels];
        let mut var = vec![0.0; channels];
        for (i, &v) in x.data.iter().enumerate() {
            mean[bn_channel(i, inner, channels)] += v;
        }
        for m in &mut mean {
            *m /= count as f64;
        }
        for (i, &v) in x.data.iter().enumerate() {
            let c = bn_channel(i, inner, channels);
            var[c] += (v - mean[c]) * (v - mean[c]);
        }
        for v in &mut var {
            *v /= count as f64;
        }
        (mean, var)
    } else {
        (running_mean.data.clone(), running_var.data.clone())
    };
    let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let mut xhat = Tensor::zeros(&x.shape);
    let mut y = Tensor::zeros(&x.shape);
    for (i, &v) in x.data.iter().enumerate() {
        let c = bn_channel(i, inner, channels);
        let xh = (v - mean[c]) * inv_std[c];
        xhat.data[i] = xh;
        y.data[i] = gamma.data[c] * xh + beta.data[c];
    }
    let update = train.then(|| BnStatsUpdate {
        running_mean: running_mean
            .data
            .iter()
            .zip(&mean)
            .map(|(&r, &m)| (1.0 - BN_MOMENTUM) * r + BN_MOMENTUM * m)
            .collect(),
        running_var: running_var
            .data
            .iter()
            .zip(&var)
            .map(|(&r, &v)| (1.0 - BN_MOMENTUM) * r + BN_MOMENTUM * v)
            .collect(),
    });
    let tape = LayerTape::BatchNorm {
        xhat,
        inv_std,
        count,
        batch_stats: train,
    };
    Ok((y, tape, update))
}

pub fn batchnorm_backward(
    gamma: &Tensor,
    tape: &LayerTape,
    dy: &Tensor,
) -> Result<(Tensor, Vec<Tensor>)> {
    let LayerTape::BatchNorm { xhat, inv_std, count, batch_stats } = tape else {
        return Err(Error::State("tape kind does not match batch-norm layer".into()));
    };
    if dy.shape != xhat.shape {
        return Err(Error::shape("batch-norm backward", format!("{:?}", xhat.shape), format!("{:?}", dy.shape)));
    }
    let channels = gamma.numel();
    let inner: usize = xhat.shape[2..].iter().product();
    let mut sum_dy = vec![0.0; channels];
    let mut sum_dy_xhat = vec![0.0; channels];
    for (i, &g) in dy.data.iter().enumerate() {
        let c = bn_channel(i, inner, channels);
        sum_dy[c] += g;
        sum_dy_xhat[c] += g * xhat.data[i];
    }
    let mut dx = Tensor::zeros(&xhat.shape);
    let m = *count as f64;
    for (i, &g) in dy.data.iter().enumerate() {
        let c = bn_channel(i, inner, channels);
        dx.data[i] = if *batch_stats {
            // Gradient through the batch statistics themselves.
            gamma.data[c] * inv_std[c] * (g - sum_dy[c] / m - xhat.data[i] * sum_dy_xhat[c] / m)
        } else {
            gamma.data[c] * inv_std[c] * g
        };
    }
    let dgamma = Tensor::from_vec(&[channels], sum_dy_xhat)?;
    let dbeta = Tensor::from_vec(&[channels], sum_dy)?;
    Ok((dx, vec![dgamma, dbeta]))
}
