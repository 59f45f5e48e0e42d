//! The computation record: append-only operation nodes, reverse replay for
//! gradients.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::ops;
use super::{Result, Tensor, TensorError};

/// Handle to a node in a [`Graph`]. Only valid for the graph that created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Scale(TensorId, f64),
    Sigmoid(TensorId),
    Relu(TensorId),
    Gelu(TensorId),
    Exp(TensorId),
    Log(TensorId),
    MatMul(TensorId, TensorId),
    SwapAxes(TensorId, usize, usize),
    Reshape(TensorId),
    Concat(Vec<TensorId>, usize),
    Softmax(TensorId, usize),
    /// Non-affine layer norm; `inv_std` is saved per lane at forward time.
    LayerNorm {
        x: TensorId,
        axis: usize,
        inv_std: Vec<f64>,
    },
    SumAxis(TensorId, usize),
    MeanAxis(TensorId, usize),
    MeanAll(TensorId),
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    op: Op,
}

/// A single forward/backward record. Nodes are appended in execution order,
/// so reverse index order is a valid backward topological order.
pub struct Graph {
    nodes: Vec<Node>,
    training: bool,
    rng: ChaCha8Rng,
}

impl Graph {
    /// `training` enables dropout; `seed` fixes its mask stream.
    pub fn new(training: bool, seed: u64) -> Self {
        Graph {
            nodes: Vec::new(),
            training,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn inference() -> Self {
        Graph::new(false, 0)
    }

    pub fn training(&self) -> bool {
        self.training
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: TensorId) -> Option<&Tensor> {
        self.nodes[id.0].grad.as_ref()
    }

    fn push(&mut self, value: Tensor, op: Op) -> TensorId {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
        });
        TensorId(self.nodes.len() - 1)
    }

    /// Insert a tensor as a leaf (parameter or constant input).
    pub fn leaf(&mut self, value: Tensor) -> TensorId {
        self.push(value, Op::Leaf)
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let v = ops::add(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let v = ops::sub(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let v = ops::mul(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> TensorId {
        let v = ops::scale(self.value(a), c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn sigmoid(&mut self, a: TensorId) -> TensorId {
        let v = ops::map(self.value(a), ops::sigmoid_scalar);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: TensorId) -> TensorId {
        let v = ops::map(self.value(a), |x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn gelu(&mut self, a: TensorId) -> TensorId {
        let v = ops::map(self.value(a), ops::gelu_scalar);
        self.push(v, Op::Gelu(a))
    }

    pub fn exp(&mut self, a: TensorId) -> TensorId {
        let v = ops::map(self.value(a), f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn log(&mut self, a: TensorId) -> TensorId {
        let v = ops::map(self.value(a), f64::ln);
        self.push(v, Op::Log(a))
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let v = ops::matmul(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    /// x·W + bias, with W shaped (in, out) applied over the last axis.
    pub fn linear(&mut self, x: TensorId, w: TensorId, bias: TensorId) -> Result<TensorId> {
        let xw = self.matmul(x, w)?;
        self.add(xw, bias)
    }

    pub fn swap_axes(&mut self, a: TensorId, ax1: usize, ax2: usize) -> Result<TensorId> {
        let v = ops::swap_axes(self.value(a), ax1, ax2)?;
        Ok(self.push(v, Op::SwapAxes(a, ax1, ax2)))
    }

    pub fn reshape(&mut self, a: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        let v = ops::reshape(self.value(a), shape)?;
        Ok(self.push(v, Op::Reshape(a)))
    }

    pub fn concat(&mut self, parts: &[TensorId], axis: usize) -> Result<TensorId> {
        let values: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let v = ops::concat(&values, axis)?;
        Ok(self.push(v, Op::Concat(parts.to_vec(), axis)))
    }

    pub fn softmax(&mut self, a: TensorId, axis: usize) -> Result<TensorId> {
        let v = ops::softmax(self.value(a), axis)?;
        Ok(self.push(v, Op::Softmax(a, axis)))
    }

    /// Layer normalization without scale/shift; compose with `mul`/`add` of
    /// parameter tensors for the affine form.
    pub fn layernorm(&mut self, a: TensorId, axis: usize, eps: f64) -> Result<TensorId> {
        let (v, inv_std) = ops::layernorm_raw(self.value(a), axis, eps)?;
        Ok(self.push(v, Op::LayerNorm { x: a, axis, inv_std }))
    }

    pub fn sum_axis(&mut self, a: TensorId, axis: usize) -> Result<TensorId> {
        let v = ops::sum_axis(self.value(a), axis)?;
        Ok(self.push(v, Op::SumAxis(a, axis)))
    }

    pub fn mean_axis(&mut self, a: TensorId, axis: usize) -> Result<TensorId> {
        let v = ops::mean_axis(self.value(a), axis)?;
        Ok(self.push(v, Op::MeanAxis(a, axis)))
    }

    pub fn mean_all(&mut self, a: TensorId) -> TensorId {
        let v = ops::mean_all(self.value(a));
        self.push(v, Op::MeanAll(a))
    }

    /// Inverted dropout: in training mode keeps each element with
    /// probability 1−p and rescales by 1/(1−p); identity in eval mode or at
    /// p = 0. The mask enters the record as a constant, so gradients flow
    /// through the kept elements only.
    pub fn dropout(&mut self, a: TensorId, p: f64) -> Result<TensorId> {
        if !self.training || p == 0.0 {
            return Ok(a);
        }
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::Invalid(format!(
                "dropout rate {p} outside [0, 1)"
            )));
        }
        let keep = 1.0 - p;
        let shape = self.value(a).shape().to_vec();
        let n: usize = shape.iter().product();
        let mask: Vec<f64> = (0..n)
            .map(|_| {
                if self.rng.gen::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        let mask = self.leaf(Tensor::new(shape, mask)?);
        self.mul(a, mask)
    }

    fn accumulate(&mut self, id: TensorId, g: Tensor) -> Result<()> {
        let g = ops::reduce_to_shape(&g, &self.nodes[id.0].value.shape().to_vec())?;
        match &mut self.nodes[id.0].grad {
            Some(existing) => {
                for (e, v) in existing.data_mut().iter_mut().zip(g.data()) {
                    *e += v;
                }
            }
            None => self.nodes[id.0].grad = Some(g),
        }
        Ok(())
    }

    /// Reverse pass from a scalar root. Populates `grad` on every node that
    /// contributed to the root; grad(root) = 1.
    pub fn backward(&mut self, root: TensorId) -> Result<()> {
        if self.nodes[root.0].value.len() != 1 {
            return Err(TensorError::NotScalar {
                shape: self.nodes[root.0].value.shape().to_vec(),
            });
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[root.0].grad = Some(Tensor::scalar(1.0));
        for i in (0..=root.0).rev() {
            let Some(g) = self.nodes[i].grad.clone() else {
                continue;
            };
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    self.accumulate(a, g.clone())?;
                    self.accumulate(b, g)?;
                }
                Op::Sub(a, b) => {
                    self.accumulate(a, g.clone())?;
                    self.accumulate(b, ops::scale(&g, -1.0))?;
                }
                Op::Mul(a, b) => {
                    let ga = ops::mul(&g, self.value(b))?;
                    let gb = ops::mul(&g, self.value(a))?;
                    self.accumulate(a, ga)?;
                    self.accumulate(b, gb)?;
                }
                Op::Scale(a, c) => self.accumulate(a, ops::scale(&g, c))?,
                Op::Sigmoid(a) => {
                    let y = &self.nodes[i].value;
                    let gx = Tensor::new(
                        y.shape().to_vec(),
                        y.data()
                            .iter()
                            .zip(g.data())
                            .map(|(&y, &g)| g * y * (1.0 - y))
                            .collect(),
                    )?;
                    self.accumulate(a, gx)?;
                }
                Op::Relu(a) => {
                    let x = self.value(a);
                    let gx = Tensor::new(
                        x.shape().to_vec(),
                        x.data()
                            .iter()
                            .zip(g.data())
                            .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
                            .collect(),
                    )?;
                    self.accumulate(a, gx)?;
                }
                Op::Gelu(a) => {
                    let x = self.value(a);
                    let gx = Tensor::new(
                        x.shape().to_vec(),
                        x.data()
                            .iter()
                            .zip(g.data())
                            .map(|(&x, &g)| g * ops::gelu_grad_scalar(x))
                            .collect(),
                    )?;
                    self.accumulate(a, gx)?;
                }
                Op::Exp(a) => {
                    let gx = ops::mul(&g, &self.nodes[i].value)?;
                    self.accumulate(a, gx)?;
                }
                Op::Log(a) => {
                    let x = self.value(a);
                    let gx = Tensor::new(
                        x.shape().to_vec(),
                        x.data()
                            .iter()
                            .zip(g.data())
                            .map(|(&x, &g)| g / x)
                            .collect(),
                    )?;
                    self.accumulate(a, gx)?;
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(a).clone(), self.value(b).clone());
                    let ar = av.rank();
                    let br = bv.rank();
                    let bt = ops::swap_axes(&bv, br - 2, br - 1)?;
                    let ga = ops::matmul(&g, &bt)?;
                    let at = ops::swap_axes(&av, ar - 2, ar - 1)?;
                    let gb_full = ops::matmul(&at, &g)?;
                    // Shared rank-2 weight: sum the batch contribution.
                    let gb = ops::reduce_to_shape(&gb_full, bv.shape())?;
                    self.accumulate(a, ga)?;
                    self.accumulate(b, gb)?;
                }
                Op::SwapAxes(a, ax1, ax2) => {
                    self.accumulate(a, ops::swap_axes(&g, ax1, ax2)?)?;
                }
                Op::Reshape(a) => {
                    let shape = self.value(a).shape().to_vec();
                    self.accumulate(a, ops::reshape(&g, shape)?)?;
                }
                Op::Concat(parts, axis) => {
                    let grads = split_like(
                        &g,
                        &parts
                            .iter()
                            .map(|&p| self.value(p).shape()[axis])
                            .collect::<Vec<_>>(),
                        axis,
                    )?;
                    for (p, gp) in parts.into_iter().zip(grads) {
                        self.accumulate(p, gp)?;
                    }
                }
                Op::Softmax(a, axis) => {
                    // dx = y * (g − sum(g*y, axis, keepdim))
                    let y = self.nodes[i].value.clone();
                    let gy = ops::mul(&g, &y)?;
                    let gx = lanewise_center(&y, &g, &gy, axis);
                    self.accumulate(a, gx)?;
                }
                Op::LayerNorm { x, axis, inv_std } => {
                    // dx = inv_std * (g − mean(g) − y·mean(g*y)) per lane
                    let y = self.nodes[i].value.clone();
                    let gx = layernorm_backward(&y, &g, axis, &inv_std);
                    self.accumulate(x, gx)?;
                }
                Op::SumAxis(a, axis) => {
                    let gx = spread_axis(&g, self.value(a).shape(), axis, 1.0);
                    self.accumulate(a, gx)?;
                }
                Op::MeanAxis(a, axis) => {
                    let n = self.value(a).shape()[axis] as f64;
                    let gx = spread_axis(&g, self.value(a).shape(), axis, 1.0 / n);
                    self.accumulate(a, gx)?;
                }
                Op::MeanAll(a) => {
                    let shape = self.value(a).shape().to_vec();
                    let n: usize = shape.iter().product();
                    let gv = g.item()? / n as f64;
                    self.accumulate(a, Tensor::full(&shape, gv))?;
                }
            }
        }
        Ok(())
    }
}

fn split_like(g: &Tensor, extents: &[usize], axis: usize) -> Result<Vec<Tensor>> {
    let (outer, _, inner) = super::ops::lanes(g.shape(), axis);
    let total: usize = extents.iter().sum();
    let mut out = Vec::with_capacity(extents.len());
    let mut start = 0usize;
    for &ext in extents {
        let mut shape = g.shape().to_vec();
        shape[axis] = ext;
        let mut data = Vec::with_capacity(outer * ext * inner);
        for o in 0..outer {
            let base = o * total * inner + start * inner;
            data.extend_from_slice(&g.data()[base..base + ext * inner]);
        }
        out.push(Tensor::new(shape, data)?);
        start += ext;
    }
    Ok(out)
}

/// y * (g − lane_sum(gy)) along `axis` — the softmax Jacobian product.
fn lanewise_center(y: &Tensor, g: &Tensor, gy: &Tensor, axis: usize) -> Tensor {
    let (outer, n, inner) = super::ops::lanes(y.shape(), axis);
    let mut data = vec![0.0; y.len()];
    for o in 0..outer {
        for r in 0..inner {
            let base = o * n * inner + r;
            let mut s = 0.0;
            for i in 0..n {
                s += gy.data()[base + i * inner];
            }
            for i in 0..n {
                let k = base + i * inner;
                data[k] = y.data()[k] * (g.data()[k] - s);
            }
        }
    }
    Tensor::new(y.shape().to_vec(), data).expect("shape preserved")
}

fn layernorm_backward(y: &Tensor, g: &Tensor, axis: usize, inv_std: &[f64]) -> Tensor {
    let (outer, n, inner) = super::ops::lanes(y.shape(), axis);
    let nf = n as f64;
    let mut data = vec![0.0; y.len()];
    let mut lane_no = 0;
    for o in 0..outer {
        for r in 0..inner {
            let base = o * n * inner + r;
            let mut mean_g = 0.0;
            let mut mean_gy = 0.0;
            for i in 0..n {
                let k = base + i * inner;
                mean_g += g.data()[k];
                mean_gy += g.data()[k] * y.data()[k];
            }
            mean_g /= nf;
            mean_gy /= nf;
            let is = inv_std[lane_no];
            for i in 0..n {
                let k = base + i * inner;
                data[k] = is * (g.data()[k] - mean_g - y.data()[k] * mean_gy);
            }
            lane_no += 1;
        }
    }
    Tensor::new(y.shape().to_vec(), data).expect("shape preserved")
}

/// Broadcast a reduced gradient back over the removed axis, scaled by `c`.
fn spread_axis(g: &Tensor, target: &[usize], axis: usize, c: f64) -> Tensor {
    let (outer, n, inner) = super::ops::lanes(target, axis);
    let mut data = vec![0.0; outer * n * inner];
    for o in 0..outer {
        for i in 0..n {
            for r in 0..inner {
                data[o * n * inner + i * inner + r] = g.data()[o * inner + r] * c;
            }
        }
    }
    Tensor::new(target.to_vec(), data).expect("shape preserved")
}
