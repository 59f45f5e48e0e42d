//! Value-level kernels shared by the forward pass and the backward rules.

use super::{Result, Tensor, TensorError};

/// Right-aligned broadcast shape of two operand shapes, per trailing-axis
/// alignment. Each aligned pair of extents must match or one must be 1.
pub fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        if da != db && da != 1 && db != 1 {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: a.to_vec(),
                rhs: b.to_vec(),
            });
        }
        out[i] = da.max(db);
    }
    Ok(out)
}

fn strides_for(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![0usize; shape.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        s[i] = acc;
        acc *= shape[i];
    }
    s
}

/// Strides of `shape` right-aligned into `out_rank` dims, with stride 0 on
/// broadcast (extent-1 or missing) axes.
fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let base = strides_for(shape);
    let pad = out_shape.len() - shape.len();
    let mut s = vec![0usize; out_shape.len()];
    for i in 0..shape.len() {
        s[pad + i] = if shape[i] == 1 { 0 } else { base[i] };
    }
    s
}

fn binary(op: &'static str, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape() == b.shape() {
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        return Tensor::new(a.shape().to_vec(), data);
    }
    // b a suffix of a's shape: tight inner loop covers the bias-add case.
    if b.rank() <= a.rank() && a.shape()[a.rank() - b.rank()..] == *b.shape() {
        let bn = b.len();
        if bn > 0 && a.len() % bn == 0 {
            let mut data = Vec::with_capacity(a.len());
            for chunk in a.data().chunks_exact(bn) {
                data.extend(chunk.iter().zip(b.data()).map(|(&x, &y)| f(x, y)));
            }
            return Tensor::new(a.shape().to_vec(), data);
        }
    }
    // General strided broadcast.
    let out_shape = broadcast_shape(op, a.shape(), b.shape())?;
    let n: usize = out_shape.iter().product();
    let sa = broadcast_strides(a.shape(), &out_shape);
    let sb = broadcast_strides(b.shape(), &out_shape);
    let mut idx = vec![0usize; out_shape.len()];
    let mut data = Vec::with_capacity(n);
    let (mut oa, mut ob) = (0usize, 0usize);
    for _ in 0..n {
        data.push(f(a.data()[oa], b.data()[ob]));
        for ax in (0..out_shape.len()).rev() {
            idx[ax] += 1;
            oa += sa[ax];
            ob += sb[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
            oa -= sa[ax] * out_shape[ax];
            ob -= sb[ax] * out_shape[ax];
        }
    }
    Tensor::new(out_shape, data)
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary("add", a, b, |x, y| x + y)
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary("sub", a, b, |x, y| x - y)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary("mul", a, b, |x, y| x * y)
}

pub fn scale(a: &Tensor, c: f64) -> Tensor {
    let data = a.data().iter().map(|&x| x * c).collect();
    Tensor::new(a.shape().to_vec(), data).expect("shape preserved")
}

pub fn map(a: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    let data = a.data().iter().map(|&x| f(x)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("shape preserved")
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// tanh-form GELU; `gelu_grad_scalar` is its exact derivative.
pub fn gelu_scalar(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad_scalar(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Sum `grad` down to `target` shape, inverting a trailing-axis broadcast.
pub fn reduce_to_shape(grad: &Tensor, target: &[usize]) -> Result<Tensor> {
    if grad.shape() == target {
        return Ok(grad.clone());
    }
    let tn: usize = target.iter().product();
    let mut out = vec![0.0; tn];
    // Fast path: target is a suffix of grad's shape.
    if target.len() <= grad.rank() && grad.shape()[grad.rank() - target.len()..] == *target {
        for chunk in grad.data().chunks_exact(tn.max(1)) {
            for (o, &g) in out.iter_mut().zip(chunk) {
                *o += g;
            }
        }
        return Tensor::new(target.to_vec(), out);
    }
    let st = broadcast_strides(target, grad.shape());
    let mut idx = vec![0usize; grad.rank()];
    let mut ot = 0usize;
    for &g in grad.data() {
        out[ot] += g;
        for ax in (0..grad.rank()).rev() {
            idx[ax] += 1;
            ot += st[ax];
            if idx[ax] < grad.shape()[ax] {
                break;
            }
            idx[ax] = 0;
            ot -= st[ax] * grad.shape()[ax];
        }
    }
    Tensor::new(target.to_vec(), out)
}

/// Batched matrix product over the last two axes. Leading axes must match
/// exactly, or `b` may be rank 2 (a shared weight applied to every batch).
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mismatch = || TensorError::ShapeMismatch {
        op: "matmul",
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    };
    if a.rank() < 2 || b.rank() < 2 {
        return Err(mismatch());
    }
    let (m, k) = (a.shape()[a.rank() - 2], a.shape()[a.rank() - 1]);
    let (kb, n) = (b.shape()[b.rank() - 2], b.shape()[b.rank() - 1]);
    if k != kb {
        return Err(mismatch());
    }
    let batch: usize = a.shape()[..a.rank() - 2].iter().product();
    let shared_b = b.rank() == 2;
    if !shared_b && a.shape()[..a.rank() - 2] != b.shape()[..b.rank() - 2] {
        return Err(mismatch());
    }
    let mut out_shape = a.shape()[..a.rank() - 2].to_vec();
    out_shape.push(m);
    out_shape.push(n);
    let mut out = vec![0.0; batch * m * n];
    for bi in 0..batch {
        let ab = &a.data()[bi * m * k..(bi + 1) * m * k];
        let bb = if shared_b {
            b.data()
        } else {
            &b.data()[bi * k * n..(bi + 1) * k * n]
        };
        let cb = &mut out[bi * m * n..(bi + 1) * m * n];
        for i in 0..m {
            let arow = &ab[i * k..(i + 1) * k];
            let crow = &mut cb[i * n..(i + 1) * n];
            for (kk, &av) in arow.iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                let brow = &bb[kk * n..(kk + 1) * n];
                for (c, &bv) in crow.iter_mut().zip(brow) {
                    *c += av * bv;
                }
            }
        }
    }
    Tensor::new(out_shape, out)
}

/// Swap two axes.
pub fn swap_axes(a: &Tensor, ax1: usize, ax2: usize) -> Result<Tensor> {
    a.check_axis(ax1)?;
    a.check_axis(ax2)?;
    if ax1 == ax2 {
        return Ok(a.clone());
    }
    let mut out_shape = a.shape().to_vec();
    out_shape.swap(ax1, ax2);
    let src_strides = strides_for(a.shape());
    let mut perm_strides: Vec<usize> = src_strides.clone();
    perm_strides.swap(ax1, ax2);
    let n = a.len();
    let mut data = Vec::with_capacity(n);
    let mut idx = vec![0usize; out_shape.len()];
    let mut off = 0usize;
    for _ in 0..n {
        data.push(a.data()[off]);
        for ax in (0..out_shape.len()).rev() {
            idx[ax] += 1;
            off += perm_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
            off -= perm_strides[ax] * out_shape[ax];
        }
    }
    Tensor::new(out_shape, data)
}

pub fn reshape(a: &Tensor, shape: Vec<usize>) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    if n != a.len() {
        return Err(TensorError::InvalidShape {
            shape,
            len: a.len(),
        });
    }
    Tensor::new(shape, a.data().to_vec())
}

pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = parts.first().ok_or_else(|| {
        TensorError::Invalid("concat requires at least one tensor".into())
    })?;
    first.check_axis(axis)?;
    let rank = first.rank();
    let mut axis_total = 0;
    for p in parts {
        if p.rank() != rank
            || p.shape()[..axis] != first.shape()[..axis]
            || p.shape()[axis + 1..] != first.shape()[axis + 1..]
        {
            return Err(TensorError::ShapeMismatch {
                op: "concat",
                lhs: first.shape().to_vec(),
                rhs: p.shape().to_vec(),
            });
        }
        axis_total += p.shape()[axis];
    }
    let mut out_shape = first.shape().to_vec();
    out_shape[axis] = axis_total;
    let inner: usize = first.shape()[axis + 1..].iter().product();
    let outer: usize = first.shape()[..axis].iter().product();
    let mut data = Vec::with_capacity(outer * axis_total * inner);
    for o in 0..outer {
        for p in parts {
            let block = p.shape()[axis] * inner;
            data.extend_from_slice(&p.data()[o * block..(o + 1) * block]);
        }
    }
    Tensor::new(out_shape, data)
}

/// (outer, extent, inner) lane decomposition for an axis.
pub(crate) fn lanes(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let n = shape[axis];
    let inner = shape[axis + 1..].iter().product();
    (outer, n, inner)
}

/// Apply `f` to every lane along `axis`. The lane is gathered into a scratch
/// buffer, transformed in place, and scattered back.
fn map_lanes(a: &Tensor, axis: usize, mut f: impl FnMut(usize, &mut [f64])) -> Tensor {
    let (outer, n, inner) = lanes(a.shape(), axis);
    let mut data = a.data().to_vec();
    let mut lane = vec![0.0; n];
    let mut lane_no = 0;
    for o in 0..outer {
        for r in 0..inner {
            let base = o * n * inner + r;
            for i in 0..n {
                lane[i] = data[base + i * inner];
            }
            f(lane_no, &mut lane);
            for i in 0..n {
                data[base + i * inner] = lane[i];
            }
            lane_no += 1;
        }
    }
    Tensor::new(a.shape().to_vec(), data).expect("shape preserved")
}

pub fn softmax(a: &Tensor, axis: usize) -> Result<Tensor> {
    a.check_axis(axis)?;
    Ok(map_lanes(a, axis, |_, lane| {
        let max = lane.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let mut sum = 0.0;
        for v in lane.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in lane.iter_mut() {
            *v /= sum;
        }
    }))
}

/// Normalized output plus the per-lane 1/sqrt(var + eps), which the backward
/// rule reuses.
pub fn layernorm_raw(a: &Tensor, axis: usize, eps: f64) -> Result<(Tensor, Vec<f64>)> {
    a.check_axis(axis)?;
    let (outer, _, inner) = lanes(a.shape(), axis);
    let mut inv_std = vec![0.0; outer * inner];
    let y = map_lanes(a, axis, |lane_no, lane| {
        let n = lane.len() as f64;
        let mean = lane.iter().sum::<f64>() / n;
        let var = lane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let is = 1.0 / (var + eps).sqrt();
        inv_std[lane_no] = is;
        for v in lane.iter_mut() {
            *v = (*v - mean) * is;
        }
    });
    Ok((y, inv_std))
}

pub fn sum_axis(a: &Tensor, axis: usize) -> Result<Tensor> {
    a.check_axis(axis)?;
    let (outer, n, inner) = lanes(a.shape(), axis);
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        for i in 0..n {
            let base = o * n * inner + i * inner;
            for r in 0..inner {
                out[o * inner + r] += a.data()[base + r];
            }
        }
    }
    let mut shape = a.shape().to_vec();
    shape.remove(axis);
    if shape.is_empty() {
        shape.push(1);
    }
    Tensor::new(shape, out)
}

pub fn mean_axis(a: &Tensor, axis: usize) -> Result<Tensor> {
    let n = a.shape()[a.check_axis(axis).map(|_| axis)?];
    Ok(scale(&sum_axis(a, axis)?, 1.0 / n as f64))
}

pub fn mean_all(a: &Tensor) -> Tensor {
    let n = a.len().max(1);
    Tensor::scalar(a.data().iter().sum::<f64>() / n as f64)
}
