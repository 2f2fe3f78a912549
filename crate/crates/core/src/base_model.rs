//! The MLP base model f(x; phi): forward weights W, biases b, and learned
//! backward weights V, with batch norm between matmul and bias.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::TensorError;
use crate::tensor::{Tape, Tensor, Var};

pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    LeakyRelu,
    Swish,
    Tanh,
    Step,
}

impl Activation {
    pub fn name(&self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::LeakyRelu => "leaky_relu",
            Activation::Swish => "swish",
            Activation::Tanh => "tanh",
            Activation::Step => "step",
        }
    }

    /// Apply on the tape. `step` is 1 for z > 0 else 0 and carries no
    /// gradient; the update rule never asks for activation derivatives.
    pub fn apply(&self, tape: &Tape, z: Var) -> Result<Var, TensorError> {
        match self {
            Activation::Relu => tape.relu(z),
            Activation::LeakyRelu => {
                // relu(z) - 0.01 relu(-z)
                let pos = tape.relu(z)?;
                let nz = tape.neg(z)?;
                let negpart = tape.relu(nz)?;
                let scaled = tape.scale(negpart, 0.01)?;
                tape.sub(pos, scaled)
            }
            Activation::Swish => {
                let s = tape.sigmoid(z)?;
                tape.mul(z, s)
            }
            Activation::Tanh => {
                // tanh(z) = 2 sigmoid(2z) - 1
                let z2 = tape.scale(z, 2.0)?;
                let s = tape.sigmoid(z2)?;
                tape.affine(s, 2.0, -1.0)
            }
            Activation::Step => {
                let s = tape.sign(z)?;
                tape.relu(s)
            }
        }
    }
}

/// Layer sizes N^0..N^L plus the activation. N^0 is the input dimension and
/// N^L the embedding size (32 unless overridden).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
}

impl ArchSpec {
    pub fn new(layer_sizes: Vec<usize>, activation: Activation) -> Result<Self, TensorError> {
        if layer_sizes.len() < 2 {
            return Err(TensorError::Invalid("ArchSpec needs at least input + one layer".into()));
        }
        if layer_sizes.iter().any(|&s| s == 0) {
            return Err(TensorError::Invalid("ArchSpec layer sizes must be >= 1".into()));
        }
        Ok(ArchSpec { layer_sizes, activation })
    }

    pub fn depth(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn embed_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    /// Sample hidden depth uniformly in `layers` and hidden sizes
    /// log-uniformly in `sizes`; the output layer stays at `embed_dim`.
    pub fn sample<R: Rng>(
        input_dim: usize,
        embed_dim: usize,
        layers: (usize, usize),
        sizes: (usize, usize),
        rng: &mut R,
    ) -> Self {
        let depth = rng.gen_range(layers.0..=layers.1);
        let mut layer_sizes = vec![input_dim];
        let (lo, hi) = (sizes.0 as f64, sizes.1 as f64);
        for _ in 0..depth.saturating_sub(1) {
            let u: f64 = rng.gen_range(lo.ln()..=hi.ln());
            layer_sizes.push(u.exp().round() as usize);
        }
        layer_sizes.push(embed_dim);
        ArchSpec { layer_sizes, activation: Activation::Relu }
    }
}

/// One layer of phi: W, V in [N_prev, N], b in [N], frozen batch-norm affine.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub w: Tensor,
    pub v: Tensor,
    pub b: Tensor,
    pub bn_scale: Tensor,
    pub bn_offset: Tensor,
}

/// The base model parameters phi. Batch-norm affine parameters live here but
/// are never touched by the learned rule; they stay at init.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseParams {
    pub arch: ArchSpec,
    pub layers: Vec<LayerParams>,
}

impl BaseParams {
    /// W, V ~ Normal(0, 1/sqrt(fan_in)); b = 0; bn scale 1, offset 0.
    pub fn init(arch: &ArchSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(arch.depth());
        for l in 1..arch.layer_sizes.len() {
            let n_prev = arch.layer_sizes[l - 1];
            let n = arch.layer_sizes[l];
            let std = 1.0 / (n_prev as f64).sqrt();
            layers.push(LayerParams {
                w: Tensor::randn(&[n_prev, n], std, &mut rng),
                v: Tensor::randn(&[n_prev, n], std, &mut rng),
                b: Tensor::zeros(&[n]),
                bn_scale: Tensor::filled(&[n], 1.0),
                bn_offset: Tensor::zeros(&[n]),
            });
        }
        BaseParams { arch: arch.clone(), layers }
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| {
            l.w.is_finite() && l.v.is_finite() && l.b.is_finite()
        })
    }

    /// Canonical (name, tensor) listing for checkpointing and fd sweeps.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("phi/layer{}/W", i), &l.w));
            out.push((format!("phi/layer{}/V", i), &l.v));
            out.push((format!("phi/layer{}/b", i), &l.b));
            out.push((format!("phi/layer{}/bn_scale", i), &l.bn_scale));
            out.push((format!("phi/layer{}/bn_offset", i), &l.bn_offset));
        }
        out
    }
}

/// phi lifted onto a tape. W, V, b are leaves when `trainable`; the batch
/// norm affine is always constant.
#[derive(Clone)]
pub struct BaseVars {
    pub layers: Vec<LayerVars>,
}

#[derive(Clone, Copy)]
pub struct LayerVars {
    pub w: Var,
    pub v: Var,
    pub b: Var,
    pub bn_scale: Var,
    pub bn_offset: Var,
}

impl BaseParams {
    pub fn lift(&self, tape: &Tape, trainable: bool) -> BaseVars {
        let put = |t: &Tensor| if trainable { tape.leaf(t.clone()) } else { tape.constant(t.clone()) };
        BaseVars {
            layers: self
                .layers
                .iter()
                .map(|l| LayerVars {
                    w: put(&l.w),
                    v: put(&l.v),
                    b: put(&l.b),
                    bn_scale: tape.constant(l.bn_scale.clone()),
                    bn_offset: tape.constant(l.bn_offset.clone()),
                })
                .collect(),
        }
    }
}

impl BaseVars {
    /// Read the current values back into owned parameters.
    pub fn materialize(&self, tape: &Tape, arch: &ArchSpec) -> BaseParams {
        BaseParams {
            arch: arch.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    w: tape.value(l.w),
                    v: tape.value(l.v),
                    b: tape.value(l.b),
                    bn_scale: tape.value(l.bn_scale),
                    bn_offset: tape.value(l.bn_offset),
                })
                .collect(),
        }
    }
}

/// Pre- and post-activations for one minibatch: xs[0] is the input,
/// xs[l] = activation(zs[l-1]) ... indices follow the layer count.
pub struct ForwardTrace {
    pub xs: Vec<Var>,
    pub zs: Vec<Var>,
}

impl ForwardTrace {
    pub fn embedding(&self) -> Var {
        *self.xs.last().unwrap()
    }
}

/// z^l = BatchNorm(x^{l-1} W^l) + b^l; x^l = activation(z^l).
pub fn forward(
    tape: &Tape,
    x0: Var,
    phi: &BaseVars,
    arch: &ArchSpec,
) -> Result<ForwardTrace, TensorError> {
    let shape = tape.shape(x0);
    if shape.len() != 2 {
        return Err(TensorError::ShapeMismatch {
            op: "forward",
            detail: format!("input must be [B, N0], got {:?}", shape),
        });
    }
    if shape[0] < 2 {
        return Err(TensorError::Invalid(format!(
            "forward needs batch size >= 2 for batch statistics, got {}",
            shape[0]
        )));
    }
    if shape[1] != arch.input_dim() {
        return Err(TensorError::ShapeMismatch {
            op: "forward",
            detail: format!("input dim {} != arch N0 {}", shape[1], arch.input_dim()),
        });
    }
    let mut xs = vec![x0];
    let mut zs = Vec::with_capacity(phi.layers.len());
    for (l, layer) in phi.layers.iter().enumerate() {
        let n = arch.layer_sizes[l + 1];
        let prod = tape.matmul(xs[l], layer.w)?;
        let scale = tape.reshape(layer.bn_scale, vec![1, n])?;
        let offset = tape.reshape(layer.bn_offset, vec![1, n])?;
        let bn = tape.batch_norm(prod, &[0], scale, offset, BN_EPS)?;
        let bias = tape.reshape(layer.b, vec![1, n])?;
        let z = tape.add(bn, bias)?;
        let x = arch.activation.apply(tape, z)?;
        zs.push(z);
        xs.push(x);
    }
    Ok(ForwardTrace { xs, zs })
}

/// Convenience projection: the final hidden state x^L.
pub fn embed(tape: &Tape, x0: Var, phi: &BaseVars, arch: &ArchSpec) -> Result<Var, TensorError> {
    Ok(forward(tape, x0, phi, arch)?.embedding())
}
