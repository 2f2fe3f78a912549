//! The learned neuron-local update rule: a top-down signal network, learned
//! error propagation through backward weights, per-neuron hidden states, and
//! low-rank readouts that produce normalized weight and bias updates.

mod driver;
mod nets;
mod planes;
#[cfg(test)]
mod tests;

pub use driver::{apply_update, compute_delta_weight, Deltas};
pub use nets::{compute_h, error_propagate, positional_embeddings, propagate_down, top_d};
pub use planes::{
    bias_delta, low_rank_readout, merge_and_constrain, weight_planes, LayerReadouts,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::TensorError;
use crate::tensor::{Tape, Tensor, Var};

/// Size constants of the update rule. Fixed for the lifetime of a parameter
/// set; the batch size is baked into the unit-convolution channel counts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UpdateRuleConfig {
    /// Feature width of the per-neuron hidden states h.
    pub hdims: usize,
    /// Feature width of the error signals d and delta.
    pub deltadims: usize,
    /// Rank of each low-rank readout (per batch element).
    pub gradc: usize,
    /// Hidden channels of the top-down signal network.
    pub topdeltasize: usize,
    /// Hidden channels of the per-neuron state network.
    pub computehsize: usize,
    /// EMA coefficient of the inner-loop parameter update.
    pub inner_lr: f64,
    /// Batch size the update networks are built for.
    pub b_fixed: usize,
}

impl UpdateRuleConfig {
    /// Full-scale profile.
    pub fn full() -> Self {
        UpdateRuleConfig {
            hdims: 64,
            deltadims: 32,
            gradc: 4,
            topdeltasize: 64,
            computehsize: 64,
            inner_lr: 3e-4,
            b_fixed: 8,
        }
    }

    /// Shrunk profile for single-machine runs.
    pub fn desk() -> Self {
        UpdateRuleConfig {
            hdims: 16,
            deltadims: 8,
            gradc: 4,
            topdeltasize: 16,
            computehsize: 16,
            inner_lr: 3e-4,
            b_fixed: 8,
        }
    }

    pub fn validate(&self) -> Result<(), TensorError> {
        if self.b_fixed < 2 {
            return Err(TensorError::Invalid("b_fixed must be >= 2".into()));
        }
        if self.hdims == 0
            || self.deltadims == 0
            || self.gradc == 0
            || self.topdeltasize == 0
            || self.computehsize == 0
        {
            return Err(TensorError::Invalid("update rule dims must be >= 1".into()));
        }
        if !(self.inner_lr > 0.0 && self.inner_lr < 1.0) {
            return Err(TensorError::Invalid("inner_lr must be in (0, 1)".into()));
        }
        Ok(())
    }

    /// Channels entering the state network's input batch norm: x, z and two
    /// positional embeddings, plus the deltadims error features.
    pub fn h_raw_channels(&self) -> usize {
        4 + self.deltadims
    }

    /// Channels after the weight statistics and bias are appended.
    pub fn h_stacked_channels(&self) -> usize {
        4 + 4 + self.h_raw_channels() + 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvParams {
    /// [K, C_in, C_out]
    pub kernel: Tensor,
    /// [C_out]
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormParams {
    pub scale: Tensor,
    pub offset: Tensor,
}

/// One low-rank readout head: projections for each side of the pairing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReadoutPair {
    /// [hdims, gradc], applied to the pre-synaptic (row) states.
    pub pa: Tensor,
    /// [hdims, gradc], applied to the post-synaptic (column) states.
    pub pb: Tensor,
}

/// Names of the seven readout heads, in canonical order: three local terms
/// (state-only, radial-basis gate, weight-linear gate) and four decorrelation
/// scratch heads (linear/saturating, acting below/above the weight matrix).
pub const READOUT_NAMES: [&str; 7] =
    ["state", "rbf_gate", "weight_gate", "below_lin", "below_sat", "above_lin", "above_sat"];

/// Index constants into the readout array.
pub const RO_STATE: usize = 0;
pub const RO_RBF: usize = 1;
pub const RO_WEIGHT: usize = 2;
pub const RO_BELOW_LIN: usize = 3;
pub const RO_BELOW_SAT: usize = 4;
pub const RO_ABOVE_LIN: usize = 5;
pub const RO_ABOVE_SAT: usize = 6;

/// All learned parameters of the update rule. Shared across every layer of
/// any base model the rule is applied to; shapes depend only on the config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateRuleParams {
    pub cfg: UpdateRuleConfig,
    /// Six convolutions of the top-down network (axes batch, unit, unit,
    /// batch, batch, batch), with batch norms after the first five.
    pub topd_convs: Vec<ConvParams>,
    pub topd_norms: Vec<NormParams>,
    /// Batch norm applied to the stacked raw inputs of the state network.
    pub h_input_norm: NormParams,
    /// Four convolutions of the state network (axes batch, unit, batch,
    /// unit), each followed by a batch norm.
    pub h_convs: Vec<ConvParams>,
    pub h_norms: Vec<NormParams>,
    /// [hdims, deltadims]: per-feature mixing of h into the error signal.
    pub error_prop_w: Tensor,
    /// [deltadims]
    pub error_prop_b: Tensor,
    /// Seven low-rank readout heads, ordered as READOUT_NAMES.
    pub readouts: Vec<ReadoutPair>,
    /// [10]: merge coefficients over the update planes.
    pub merge_w: Tensor,
    /// [hdims]: readout vector for the bias update.
    pub bias_readout: Tensor,
}

impl UpdateRuleParams {
    /// Conv and readout weights ~ Normal(0, 1/sqrt(fan_in)); biases 0;
    /// norm scale 1, offset 0; merge coefficients ~ Normal(0, 0.1).
    pub fn init(cfg: &UpdateRuleConfig, seed: u64) -> Result<Self, TensorError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let conv = |k: usize, cin: usize, cout: usize, rng: &mut ChaCha8Rng| ConvParams {
            kernel: Tensor::randn(&[k, cin, cout], 1.0 / ((k * cin) as f64).sqrt(), rng),
            bias: Tensor::zeros(&[cout]),
        };
        let norm = |c: usize| NormParams {
            scale: Tensor::filled(&[c], 1.0),
            offset: Tensor::zeros(&[c]),
        };
        let (t, b, d) = (cfg.topdeltasize, cfg.b_fixed, cfg.deltadims);
        let topd_convs = vec![
            conv(5, 1, t, &mut rng),
            conv(3, t, b, &mut rng),
            conv(3, b, b, &mut rng),
            conv(3, b, t, &mut rng),
            conv(3, t, t, &mut rng),
            conv(3, t, d, &mut rng),
        ];
        let topd_norms = vec![norm(t), norm(b), norm(b), norm(t), norm(t)];
        let (c, h) = (cfg.computehsize, cfg.hdims);
        let raw = cfg.h_raw_channels();
        let stacked = cfg.h_stacked_channels();
        let h_input_norm = norm(raw);
        let h_convs = vec![
            conv(3, stacked, c, &mut rng),
            conv(3, c, c, &mut rng),
            conv(3, c, c, &mut rng),
            conv(3, c, h, &mut rng),
        ];
        let h_norms = vec![norm(c), norm(c), norm(c), norm(h)];
        let error_prop_w = Tensor::randn(&[h, d], 1.0 / (h as f64).sqrt(), &mut rng);
        let error_prop_b = Tensor::zeros(&[d]);
        let g = cfg.gradc;
        let readouts = (0..READOUT_NAMES.len())
            .map(|_| ReadoutPair {
                pa: Tensor::randn(&[h, g], 1.0 / (h as f64).sqrt(), &mut rng),
                pb: Tensor::randn(&[h, g], 1.0 / (h as f64).sqrt(), &mut rng),
            })
            .collect();
        let merge_w = Tensor::randn(&[10], 0.1, &mut rng);
        let bias_readout = Tensor::randn(&[h], 1.0 / (h as f64).sqrt(), &mut rng);
        Ok(UpdateRuleParams {
            cfg: *cfg,
            topd_convs,
            topd_norms,
            h_input_norm,
            h_convs,
            h_norms,
            error_prop_w,
            error_prop_b,
            readouts,
            merge_w,
            bias_readout,
        })
    }

    pub fn is_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.is_finite())
    }

    /// Canonical (name, tensor) listing; the order is the flattening used by
    /// the meta-optimizer and the checkpoint format.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = Vec::new();
        for (i, c) in self.topd_convs.iter().enumerate() {
            out.push((format!("theta/topd/conv{}/kernel", i), &c.kernel));
            out.push((format!("theta/topd/conv{}/bias", i), &c.bias));
        }
        for (i, n) in self.topd_norms.iter().enumerate() {
            out.push((format!("theta/topd/norm{}/scale", i), &n.scale));
            out.push((format!("theta/topd/norm{}/offset", i), &n.offset));
        }
        out.push(("theta/state/input_norm/scale".into(), &self.h_input_norm.scale));
        out.push(("theta/state/input_norm/offset".into(), &self.h_input_norm.offset));
        for (i, c) in self.h_convs.iter().enumerate() {
            out.push((format!("theta/state/conv{}/kernel", i), &c.kernel));
            out.push((format!("theta/state/conv{}/bias", i), &c.bias));
        }
        for (i, n) in self.h_norms.iter().enumerate() {
            out.push((format!("theta/state/norm{}/scale", i), &n.scale));
            out.push((format!("theta/state/norm{}/offset", i), &n.offset));
        }
        out.push(("theta/error_prop/W".into(), &self.error_prop_w));
        out.push(("theta/error_prop/b".into(), &self.error_prop_b));
        for (name, r) in READOUT_NAMES.iter().zip(&self.readouts) {
            out.push((format!("theta/readout/{}/Pa", name), &r.pa));
            out.push((format!("theta/readout/{}/Pb", name), &r.pb));
        }
        out.push(("theta/merge_w".into(), &self.merge_w));
        out.push(("theta/bias_readout".into(), &self.bias_readout));
        out
    }

    /// Mutable tensors in the same order as `named()`.
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        for c in &mut self.topd_convs {
            out.push(&mut c.kernel);
            out.push(&mut c.bias);
        }
        for n in &mut self.topd_norms {
            out.push(&mut n.scale);
            out.push(&mut n.offset);
        }
        out.push(&mut self.h_input_norm.scale);
        out.push(&mut self.h_input_norm.offset);
        for c in &mut self.h_convs {
            out.push(&mut c.kernel);
            out.push(&mut c.bias);
        }
        for n in &mut self.h_norms {
            out.push(&mut n.scale);
            out.push(&mut n.offset);
        }
        out.push(&mut self.error_prop_w);
        out.push(&mut self.error_prop_b);
        for r in &mut self.readouts {
            out.push(&mut r.pa);
            out.push(&mut r.pb);
        }
        out.push(&mut self.merge_w);
        out.push(&mut self.bias_readout);
        out
    }

    pub fn lift(&self, tape: &Tape, trainable: bool) -> UpdateRuleVars {
        let put = |t: &Tensor| {
            if trainable {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        UpdateRuleVars {
            cfg: self.cfg,
            topd_convs: self
                .topd_convs
                .iter()
                .map(|c| ConvVars { kernel: put(&c.kernel), bias: put(&c.bias) })
                .collect(),
            topd_norms: self
                .topd_norms
                .iter()
                .map(|n| NormVars { scale: put(&n.scale), offset: put(&n.offset) })
                .collect(),
            h_input_norm: NormVars {
                scale: put(&self.h_input_norm.scale),
                offset: put(&self.h_input_norm.offset),
            },
            h_convs: self
                .h_convs
                .iter()
                .map(|c| ConvVars { kernel: put(&c.kernel), bias: put(&c.bias) })
                .collect(),
            h_norms: self
                .h_norms
                .iter()
                .map(|n| NormVars { scale: put(&n.scale), offset: put(&n.offset) })
                .collect(),
            error_prop_w: put(&self.error_prop_w),
            error_prop_b: put(&self.error_prop_b),
            readouts: self
                .readouts
                .iter()
                .map(|r| ReadoutVars { pa: put(&r.pa), pb: put(&r.pb) })
                .collect(),
            merge_w: put(&self.merge_w),
            bias_readout: put(&self.bias_readout),
        }
    }
}

pub struct ConvVars {
    pub kernel: Var,
    pub bias: Var,
}

pub struct NormVars {
    pub scale: Var,
    pub offset: Var,
}

pub struct ReadoutVars {
    pub pa: Var,
    pub pb: Var,
}

/// The update rule lifted onto a tape.
pub struct UpdateRuleVars {
    pub cfg: UpdateRuleConfig,
    pub topd_convs: Vec<ConvVars>,
    pub topd_norms: Vec<NormVars>,
    pub h_input_norm: NormVars,
    pub h_convs: Vec<ConvVars>,
    pub h_norms: Vec<NormVars>,
    pub error_prop_w: Var,
    pub error_prop_b: Var,
    pub readouts: Vec<ReadoutVars>,
    pub merge_w: Var,
    pub bias_readout: Var,
}

impl UpdateRuleVars {
    /// Vars in the same order as `UpdateRuleParams::named()`.
    pub fn leaves(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for c in &self.topd_convs {
            out.push(c.kernel);
            out.push(c.bias);
        }
        for n in &self.topd_norms {
            out.push(n.scale);
            out.push(n.offset);
        }
        out.push(self.h_input_norm.scale);
        out.push(self.h_input_norm.offset);
        for c in &self.h_convs {
            out.push(c.kernel);
            out.push(c.bias);
        }
        for n in &self.h_norms {
            out.push(n.scale);
            out.push(n.offset);
        }
        out.push(self.error_prop_w);
        out.push(self.error_prop_b);
        for r in &self.readouts {
            out.push(r.pa);
            out.push(r.pb);
        }
        out.push(self.merge_w);
        out.push(self.bias_readout);
        out
    }
}
