//! One full application of the learned rule: error signals top-down, hidden
//! states per layer, then forward-weight, backward-weight and bias deltas,
//! applied as an exponential moving average.

use super::nets::{compute_h, error_propagate, propagate_down, top_d};
use super::planes::{bias_delta, merge_and_constrain, weight_planes, LayerReadouts};
use super::UpdateRuleVars;
use crate::base_model::{BaseVars, ForwardTrace, LayerVars};
use crate::error::TensorError;
use crate::tensor::{Tape, Tensor, Var};

/// Per-layer parameter deltas, aligned with `BaseVars::layers`.
pub struct Deltas {
    pub dw: Vec<Var>,
    pub dv: Vec<Var>,
    pub db: Vec<Var>,
}

/// Compute every parameter delta for one minibatch trace. Consumes only the
/// unlabeled activations; differentiable with respect to both the rule
/// parameters and the base parameters.
pub fn compute_delta_weight(
    tape: &Tape,
    trace: &ForwardTrace,
    phi: &BaseVars,
    theta: &UpdateRuleVars,
) -> Result<Deltas, TensorError> {
    let depth = phi.layers.len();
    debug_assert_eq!(trace.xs.len(), depth + 1);
    let b = tape.shape(trace.xs[0])[0];

    // top-down pass: d[depth] from the embedding, then h and d downward
    let mut d: Vec<Option<Var>> = vec![None; depth + 1];
    let mut h: Vec<Option<Var>> = vec![None; depth + 1];
    d[depth] = Some(top_d(tape, theta, trace.xs[depth])?);
    for l in (1..=depth).rev() {
        let n_l = tape.shape(trace.xs[l])[1];
        let w_above = if l < depth {
            phi.layers[l].w
        } else {
            tape.constant(Tensor::zeros(&[n_l, 1]))
        };
        let layer = &phi.layers[l - 1];
        let h_l = compute_h(
            tape,
            theta,
            d[l].unwrap(),
            trace.xs[l],
            trace.zs[l - 1],
            layer.w,
            w_above,
            layer.b,
        )?;
        let delta = error_propagate(tape, theta, d[l].unwrap(), h_l, trace.zs[l - 1])?;
        d[l - 1] = Some(propagate_down(tape, delta, layer.v)?);
        h[l] = Some(h_l);
    }
    // input layer: no z, weights or bias below it
    let n0 = tape.shape(trace.xs[0])[1];
    let z0 = tape.constant(Tensor::zeros(&[b, n0]));
    let w0 = tape.constant(Tensor::zeros(&[1, n0]));
    let b0 = tape.constant(Tensor::zeros(&[n0]));
    h[0] = Some(compute_h(
        tape,
        theta,
        d[0].unwrap(),
        trace.xs[0],
        z0,
        w0,
        phi.layers[0].w,
        b0,
    )?);

    let mut deltas = Deltas { dw: Vec::new(), dv: Vec::new(), db: Vec::new() };
    for l in 1..=depth {
        let layer = &phi.layers[l - 1];
        let ro = LayerReadouts::compute(tape, theta, h[l - 1].unwrap(), h[l].unwrap())?;
        let planes_w =
            weight_planes(tape, layer.w, trace.xs[l - 1], trace.xs[l], &ro)?;
        deltas.dw.push(merge_and_constrain(tape, &planes_w, layer.w, theta.merge_w)?);
        let planes_v =
            weight_planes(tape, layer.v, trace.xs[l - 1], trace.xs[l], &ro)?;
        deltas.dv.push(merge_and_constrain(tape, &planes_v, layer.v, theta.merge_w)?);
        deltas.db.push(bias_delta(tape, h[l].unwrap(), theta.bias_readout)?);
    }
    Ok(deltas)
}

/// Blend the deltas into the parameters: p' = p (1 - lr) + delta * lr.
/// Batch-norm affine parameters are carried over untouched.
pub fn apply_update(
    tape: &Tape,
    phi: &BaseVars,
    deltas: &Deltas,
    lr: f64,
) -> Result<BaseVars, TensorError> {
    let blend = |p: Var, dp: Var| -> Result<Var, TensorError> {
        tape.add(tape.scale(p, 1.0 - lr)?, tape.scale(dp, lr)?)
    };
    let mut layers = Vec::with_capacity(phi.layers.len());
    for (i, layer) in phi.layers.iter().enumerate() {
        layers.push(LayerVars {
            w: blend(layer.w, deltas.dw[i])?,
            v: blend(layer.v, deltas.dv[i])?,
            b: blend(layer.b, deltas.db[i])?,
            bn_scale: layer.bn_scale,
            bn_offset: layer.bn_offset,
        });
    }
    Ok(BaseVars { layers })
}
