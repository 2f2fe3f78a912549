//! The two convolutional networks of the update rule and the learned error
//! propagation between layers.

use std::f64::consts::PI;

use super::{ConvVars, NormVars, UpdateRuleVars};
use crate::base_model::BN_EPS;
use crate::error::TensorError;
use crate::meta_objective::NORM_EPS_SQ;
use crate::tensor::{Tape, Tensor, Var};

/// Convolution along `axis` (0 = batch, 1 = unit) plus a channel bias.
fn conv_block(tape: &Tape, x: Var, axis: usize, conv: &ConvVars) -> Result<Var, TensorError> {
    let y = tape.conv1d_axis(x, axis, conv.kernel)?;
    let c = tape.shape(y)[2];
    let bias = tape.reshape(conv.bias, vec![1, 1, c])?;
    tape.add(y, bias)
}

/// Batch norm over batch and unit axes with per-channel affine parameters.
fn norm_block(tape: &Tape, x: Var, norm: &NormVars) -> Result<Var, TensorError> {
    let c = tape.shape(x)[2];
    let scale = tape.reshape(norm.scale, vec![1, 1, c])?;
    let offset = tape.reshape(norm.offset, vec![1, 1, c])?;
    tape.batch_norm(x, &[0, 1], scale, offset, BN_EPS)
}

fn check_batch(op: &'static str, got: usize, want: usize) -> Result<(), TensorError> {
    if got != want {
        return Err(TensorError::ShapeMismatch {
            op,
            detail: format!("batch size {} but the update rule is built for {}", got, want),
        });
    }
    Ok(())
}

/// Top-down error source: maps the embedding [B, N] to a per-neuron error
/// vector [B, N, deltadims] through a stack of batch- and unit-axis
/// convolutions. The unit convolutions output `b_fixed` channels, which
/// pins the batch size the rule can consume.
pub fn top_d(tape: &Tape, theta: &UpdateRuleVars, xl: Var) -> Result<Var, TensorError> {
    let shape = tape.shape(xl);
    if shape.len() != 2 {
        return Err(TensorError::ShapeMismatch {
            op: "top_d",
            detail: format!("expected [B, N], got {:?}", shape),
        });
    }
    check_batch("top_d", shape[0], theta.cfg.b_fixed)?;
    let (b, n) = (shape[0], shape[1]);
    let mut m = tape.reshape(xl, vec![b, n, 1])?;
    let axes = [0usize, 1, 1, 0, 0, 0];
    for (i, (conv, axis)) in theta.topd_convs.iter().zip(axes).enumerate() {
        m = conv_block(tape, m, axis, conv)?;
        if i < theta.topd_norms.len() {
            m = tape.relu(norm_block(tape, m, &theta.topd_norms[i])?)?;
        }
    }
    Ok(m)
}

/// sin/cos positional embedding values for a layer of `n` units:
/// (sin(2*j*pi/n), cos(2*j*pi/n)) for unit index j.
pub fn positional_embeddings(n: usize) -> (Vec<f64>, Vec<f64>) {
    let sin = (0..n).map(|j| (2.0 * j as f64 * PI / n as f64).sin()).collect();
    let cos = (0..n).map(|j| (2.0 * j as f64 * PI / n as f64).cos()).collect();
    (sin, cos)
}

/// The four per-column statistics of `w` over `axis` (mean |w|, RMS, mean,
/// population std), tiled to [b, n, 4].
fn stats_tile(tape: &Tape, w: Var, axis: usize, b: usize, n: usize) -> Result<Var, TensorError> {
    let stats = tape.reduce_stats(w, axis)?;
    let parts = [stats.l1_mean, stats.rms, stats.mean, stats.std]
        .into_iter()
        .map(|v| tape.reshape(v, vec![1, n, 1]))
        .collect::<Result<Vec<_>, _>>()?;
    let stacked = tape.concat(&parts, 2)?;
    tape.broadcast_to(stacked, &[b, n, 4])
}

/// Per-neuron hidden states [B, N, hdims] for one layer, from the layer's
/// activations, its error signal, and statistics of the surrounding weights.
#[allow(clippy::too_many_arguments)]
pub fn compute_h(
    tape: &Tape,
    theta: &UpdateRuleVars,
    d: Var,
    x: Var,
    z: Var,
    w: Var,
    w_above: Var,
    b_vec: Var,
) -> Result<Var, TensorError> {
    let shape = tape.shape(x);
    if shape.len() != 2 {
        return Err(TensorError::ShapeMismatch {
            op: "compute_h",
            detail: format!("expected x as [B, N], got {:?}", shape),
        });
    }
    check_batch("compute_h", shape[0], theta.cfg.b_fixed)?;
    let (b, n) = (shape[0], shape[1]);

    let (sin, cos) = positional_embeddings(n);
    let p0 = tape.constant(Tensor::new(vec![1, n, 1], sin)?);
    let p1 = tape.constant(Tensor::new(vec![1, n, 1], cos)?);
    let p0 = tape.broadcast_to(p0, &[b, n, 1])?;
    let p1 = tape.broadcast_to(p1, &[b, n, 1])?;
    let x3 = tape.reshape(x, vec![b, n, 1])?;
    let z3 = tape.reshape(z, vec![b, n, 1])?;
    let m0 = tape.concat(&[x3, z3, p0, p1], 2)?;
    let m1 = tape.concat(&[m0, d], 2)?;

    let s_below = stats_tile(tape, w, 0, b, n)?;
    let s_above = stats_tile(tape, w_above, 1, b, n)?;
    let m2 = norm_block(tape, m1, &theta.h_input_norm)?;
    let bias3 = tape.reshape(b_vec, vec![1, n, 1])?;
    let bias3 = tape.broadcast_to(bias3, &[b, n, 1])?;
    let mut m = tape.concat(&[s_below, s_above, m2, bias3], 2)?;

    let axes = [0usize, 1, 0, 1];
    for (conv, (norm, axis)) in theta.h_convs.iter().zip(theta.h_norms.iter().zip(axes)) {
        m = conv_block(tape, m, axis, conv)?;
        m = tape.relu(norm_block(tape, m, norm)?)?;
    }
    Ok(m)
}

/// Per-layer error signal: delta = d * sigmoid(z) + h W_ep + b_ep, with z
/// broadcast over the feature index.
pub fn error_propagate(
    tape: &Tape,
    theta: &UpdateRuleVars,
    d: Var,
    h: Var,
    z: Var,
) -> Result<Var, TensorError> {
    let dshape = tape.shape(d);
    let (b, n, dd) = (dshape[0], dshape[1], dshape[2]);
    let hdims = tape.shape(h)[2];
    let z3 = tape.reshape(z, vec![b, n, 1])?;
    let gate = tape.mul(d, tape.sigmoid(z3)?)?;
    let h2 = tape.reshape(h, vec![b * n, hdims])?;
    let mixed = tape.matmul(h2, theta.error_prop_w)?;
    let mixed = tape.reshape(mixed, vec![b, n, dd])?;
    let bias = tape.reshape(theta.error_prop_b, vec![1, 1, dd])?;
    tape.add(tape.add(gate, mixed)?, bias)
}

/// Move the error one layer down through the backward weights and fix its
/// second moment: d_below[i,m,:] = RMS-normalized sum_j delta[i,j,:] V[m,j].
pub fn propagate_down(tape: &Tape, delta: Var, v: Var) -> Result<Var, TensorError> {
    let tilde = tape.matmul_left_batched(v, delta)?;
    let ms = tape.reduce_mean(tape.square(tilde)?, 2, true)?;
    let denom = tape.sqrt(tape.add_scalar(ms, NORM_EPS_SQ)?)?;
    tape.div(tilde, denom)
}
