//! Per-block learners: multi-head attention over the feature axis, a
//! frequency-domain attention variant, position-wise feed-forward, and the
//! two-branch learnable gate.
//!
//! Parameters live outside any graph as plain [`Tensor`]s. A forward pass
//! binds them into a [`Graph`] as leaves (so their gradients are recoverable)
//! and records the resulting ids; every `*Bound` struct keeps those ids in a
//! fixed order matching `visit`/`visit_mut` on its parameter struct.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{Graph, Result, Tensor, TensorError, TensorId};

/// Uniform ±1/√fan_in weight of shape (fan_in, fan_out).
fn init_weight<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::new(
        vec![fan_in, fan_out],
        (0..fan_in * fan_out)
            .map(|_| rng.gen_range(-bound..bound))
            .collect(),
    )
    .expect("sized above")
}

/// One affine map y = x·W + b over the trailing axis.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinearParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LinearParams {
    pub fn init<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Self {
        LinearParams {
            weight: init_weight(rng, fan_in, fan_out),
            bias: Tensor::zeros(&[fan_out]),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        LinearParams {
            weight: Tensor::zeros(&[fan_in, fan_out]),
            bias: Tensor::zeros(&[fan_out]),
        }
    }

    pub fn in_width(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_width(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn visit(&self, f: &mut dyn FnMut(&Tensor)) {
        f(&self.weight);
        f(&self.bias);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }

    pub fn bind(&self, g: &mut Graph) -> LinearBound {
        LinearBound {
            weight: g.leaf(self.weight.clone()),
            bias: g.leaf(self.bias.clone()),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LinearBound {
    pub weight: TensorId,
    pub bias: TensorId,
}

impl LinearBound {
    pub fn forward(&self, g: &mut Graph, x: TensorId) -> Result<TensorId> {
        g.linear(x, self.weight, self.bias)
    }

    pub fn ids(&self, out: &mut Vec<TensorId>) {
        out.push(self.weight);
        out.push(self.bias);
    }
}

/// Scaled dot-product multi-head attention whose tokens are the D features.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttentionParams {
    pub query: LinearParams,
    pub key: LinearParams,
    pub value: LinearParams,
    pub output: LinearParams,
    pub heads: usize,
    pub dropout: f64,
}

impl AttentionParams {
    pub fn init<R: Rng>(rng: &mut R, embed: usize, heads: usize, dropout: f64) -> Result<Self> {
        if heads == 0 || embed % heads != 0 {
            return Err(TensorError::Invalid(format!(
                "head count {heads} must divide embedding width {embed}"
            )));
        }
        Ok(AttentionParams {
            query: LinearParams::init(rng, embed, embed),
            key: LinearParams::init(rng, embed, embed),
            value: LinearParams::init(rng, embed, embed),
            output: LinearParams::init(rng, embed, embed),
            heads,
            dropout,
        })
    }

    pub fn visit(&self, f: &mut dyn FnMut(&Tensor)) {
        self.query.visit(f);
        self.key.visit(f);
        self.value.visit(f);
        self.output.visit(f);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        self.query.visit_mut(f);
        self.key.visit_mut(f);
        self.value.visit_mut(f);
        self.output.visit_mut(f);
    }

    pub fn bind(&self, g: &mut Graph) -> AttentionBound {
        AttentionBound {
            query: self.query.bind(g),
            key: self.key.bind(g),
            value: self.value.bind(g),
            output: self.output.bind(g),
            heads: self.heads,
            dropout: self.dropout,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionBound {
    pub query: LinearBound,
    pub key: LinearBound,
    pub value: LinearBound,
    pub output: LinearBound,
    pub heads: usize,
    pub dropout: f64,
}

impl AttentionBound {
    /// x: B×D×E → B×D×E. Scores are D×D per head with scale 1/√(E/h);
    /// dropout is applied to the attention weights in training mode.
    pub fn forward(&self, g: &mut Graph, x: TensorId) -> Result<TensorId> {
        let shape = g.value(x).shape().to_vec();
        let (b, d, e) = (shape[0], shape[1], shape[2]);
        let h = self.heads;
        let hd = e / h;

        let split = |g: &mut Graph, t: TensorId| -> Result<TensorId> {
            let r = g.reshape(t, vec![b, d, h, hd])?;
            g.swap_axes(r, 1, 2) // B×h×D×hd
        };
        let q0 = self.query.forward(g, x)?;
        let k0 = self.key.forward(g, x)?;
        let v0 = self.value.forward(g, x)?;
        let q = split(g, q0)?;
        let k = split(g, k0)?;
        let v = split(g, v0)?;

        let kt = g.swap_axes(k, 2, 3)?;
        let scores = g.matmul(q, kt)?;
        let scores = g.scale(scores, 1.0 / (hd as f64).sqrt());
        let weights = g.softmax(scores, 3)?;
        let weights = g.dropout(weights, self.dropout)?;
        let ctx = g.matmul(weights, v)?;
        let merged = g.swap_axes(ctx, 1, 2)?;
        let merged = g.reshape(merged, vec![b, d, e])?;
        self.output.forward(g, merged)
    }

    pub fn ids(&self, out: &mut Vec<TensorId>) {
        self.query.ids(out);
        self.key.ids(out);
        self.value.ids(out);
        self.output.ids(out);
    }
}

/// Attention computed on the real FFT of the embedding axis. The `E`-point
/// spectrum is kept as stacked (real, imaginary) coefficients of width
/// `2·(E/2+1)`; Q/K/V are learned maps on that stacked representation and
/// the inverse transform is a fixed linear map back to `E` real values.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FreqAttentionParams {
    pub query: LinearParams,
    pub key: LinearParams,
    pub value: LinearParams,
    pub embed: usize,
}

impl FreqAttentionParams {
    pub fn init<R: Rng>(rng: &mut R, embed: usize) -> Self {
        let w = 2 * (embed / 2 + 1);
        FreqAttentionParams {
            query: LinearParams::init(rng, w, w),
            key: LinearParams::init(rng, w, w),
            value: LinearParams::init(rng, w, w),
            embed,
        }
    }

    pub fn visit(&self, f: &mut dyn FnMut(&Tensor)) {
        self.query.visit(f);
        self.key.visit(f);
        self.value.visit(f);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        self.query.visit_mut(f);
        self.key.visit_mut(f);
        self.value.visit_mut(f);
    }

    pub fn bind(&self, g: &mut Graph) -> FreqAttentionBound {
        let (fwd, inv) = dft_matrices(self.embed);
        FreqAttentionBound {
            query: self.query.bind(g),
            key: self.key.bind(g),
            value: self.value.bind(g),
            forward_dft: g.leaf(fwd),
            inverse_dft: g.leaf(inv),
        }
    }
}

/// Constant matrices realizing the forward real DFT (E → stacked 2·nf) and
/// its inverse (stacked 2·nf → E). Gradients flow through them as through
/// any matmul, which keeps the whole learner exactly real.
fn dft_matrices(e: usize) -> (Tensor, Tensor) {
    let nf = e / 2 + 1;
    let tau = std::f64::consts::TAU;
    let mut fwd = vec![0.0; e * 2 * nf];
    for j in 0..e {
        for k in 0..nf {
            let ang = tau * (j * k) as f64 / e as f64;
            fwd[j * 2 * nf + k] = ang.cos();
            fwd[j * 2 * nf + nf + k] = -ang.sin();
        }
    }
    let mut inv = vec![0.0; 2 * nf * e];
    for k in 0..nf {
        // Hermitian symmetry folds bin E−k onto bin k, doubling every bin
        // except DC and (for even E) Nyquist.
        let w = if k == 0 || (e % 2 == 0 && k == e / 2) {
            1.0
        } else {
            2.0
        };
        for j in 0..e {
            let ang = tau * (j * k) as f64 / e as f64;
            inv[k * e + j] = w * ang.cos() / e as f64;
            inv[(nf + k) * e + j] = -w * ang.sin() / e as f64;
        }
    }
    (
        Tensor::new(vec![e, 2 * nf], fwd).expect("sized above"),
        Tensor::new(vec![2 * nf, e], inv).expect("sized above"),
    )
}

#[derive(Debug, Clone, Copy)]
pub struct FreqAttentionBound {
    pub query: LinearBound,
    pub key: LinearBound,
    pub value: LinearBound,
    forward_dft: TensorId,
    inverse_dft: TensorId,
}

impl FreqAttentionBound {
    /// x: B×D×E → B×D×E, exactly real by construction.
    pub fn forward(&self, g: &mut Graph, x: TensorId) -> Result<TensorId> {
        let spec = g.matmul(x, self.forward_dft)?; // B×D×2nf
        let q = self.query.forward(g, spec)?;
        let k = self.key.forward(g, spec)?;
        let v = self.value.forward(g, spec)?;
        let w = g.value(q).shape()[2] as f64;
        let kt = g.swap_axes(k, 1, 2)?;
        let scores = g.matmul(q, kt)?;
        let scores = g.scale(scores, 1.0 / w.sqrt());
        let weights = g.softmax(scores, 2)?;
        let ctx = g.matmul(weights, v)?;
        g.matmul(ctx, self.inverse_dft)
    }

    pub fn ids(&self, out: &mut Vec<TensorId>) {
        self.query.ids(out);
        self.key.ids(out);
        self.value.ids(out);
    }
}

/// Position-wise two-layer feed-forward with GELU.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeedForwardParams {
    pub up: LinearParams,
    pub down: LinearParams,
    pub dropout: f64,
}

impl FeedForwardParams {
    pub fn init<R: Rng>(rng: &mut R, embed: usize, hidden: usize, dropout: f64) -> Self {
        FeedForwardParams {
            up: LinearParams::init(rng, embed, hidden),
            down: LinearParams::init(rng, hidden, embed),
            dropout,
        }
    }

    pub fn visit(&self, f: &mut dyn FnMut(&Tensor)) {
        self.up.visit(f);
        self.down.visit(f);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        self.up.visit_mut(f);
        self.down.visit_mut(f);
    }

    pub fn bind(&self, g: &mut Graph) -> FeedForwardBound {
        FeedForwardBound {
            up: self.up.bind(g),
            down: self.down.bind(g),
            dropout: self.dropout,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FeedForwardBound {
    pub up: LinearBound,
    pub down: LinearBound,
    pub dropout: f64,
}

impl FeedForwardBound {
    pub fn forward(&self, g: &mut Graph, x: TensorId) -> Result<TensorId> {
        let h = self.up.forward(g, x)?;
        let h = g.gelu(h);
        let h = g.dropout(h, self.dropout)?;
        self.down.forward(g, h)
    }

    pub fn ids(&self, out: &mut Vec<TensorId>) {
        self.up.ids(out);
        self.down.ids(out);
    }
}

/// Two-branch gate: sigmoid(gate_branch(v)) ⊙ value_branch(v). Both branches
/// share the input width and agree on the output width.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GateParams {
    pub gate_branch: LinearParams,
    pub value_branch: LinearParams,
}

impl GateParams {
    pub fn init<R: Rng>(rng: &mut R, in_width: usize, out_width: usize) -> Self {
        GateParams {
            gate_branch: LinearParams::init(rng, in_width, out_width),
            value_branch: LinearParams::init(rng, in_width, out_width),
        }
    }

    pub fn visit(&self, f: &mut dyn FnMut(&Tensor)) {
        self.gate_branch.visit(f);
        self.value_branch.visit(f);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        self.gate_branch.visit_mut(f);
        self.value_branch.visit_mut(f);
    }

    pub fn bind(&self, g: &mut Graph) -> GateBound {
        GateBound {
            gate_branch: self.gate_branch.bind(g),
            value_branch: self.value_branch.bind(g),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GateBound {
    pub gate_branch: LinearBound,
    pub value_branch: LinearBound,
}

impl GateBound {
    pub fn forward(&self, g: &mut Graph, v: TensorId) -> Result<TensorId> {
        let gate = self.gate_branch.forward(g, v)?;
        let gate = g.sigmoid(gate);
        let val = self.value_branch.forward(g, v)?;
        g.mul(gate, val)
    }

    pub fn ids(&self, out: &mut Vec<TensorId>) {
        self.gate_branch.ids(out);
        self.value_branch.ids(out);
    }
}
