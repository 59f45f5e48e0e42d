//! Real-input FFT along one tensor axis.
//!
//! `rfft` keeps the `n/2 + 1` non-redundant bins of the spectrum of a real
//! signal; `irfft` rebuilds the full Hermitian spectrum and inverts it. The
//! pair round-trips to within a few ulps for the lengths used here.

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use super::ops::lanes;
use super::{Result, Tensor, TensorError};

/// Real and imaginary parts stored as two tensors of identical shape.
#[derive(Debug, Clone)]
pub struct ComplexTensor {
    pub re: Tensor,
    pub im: Tensor,
}

/// Forward real FFT along `axis`. The output axis has `n/2 + 1` bins, where
/// `n` is the input extent along `axis`.
pub fn rfft(x: &Tensor, axis: usize) -> Result<ComplexTensor> {
    x.check_axis(axis)?;
    let (outer, n, inner) = lanes(x.shape(), axis);
    if n == 0 {
        return Err(TensorError::Invalid(
            "cannot transform along an empty axis".into(),
        ));
    }
    let nf = n / 2 + 1;
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(n);

    let mut shape = x.shape().to_vec();
    shape[axis] = nf;
    let mut re = vec![0.0; outer * nf * inner];
    let mut im = vec![0.0; outer * nf * inner];
    let mut buf = vec![Complex64::default(); n];
    for o in 0..outer {
        for r in 0..inner {
            let base = o * n * inner + r;
            for i in 0..n {
                buf[i] = Complex64::new(x.data()[base + i * inner], 0.0);
            }
            fft.process(&mut buf);
            let out_base = o * nf * inner + r;
            for k in 0..nf {
                re[out_base + k * inner] = buf[k].re;
                im[out_base + k * inner] = buf[k].im;
            }
        }
    }
    Ok(ComplexTensor {
        re: Tensor::new(shape.clone(), re)?,
        im: Tensor::new(shape, im)?,
    })
}

/// Inverse of [`rfft`]: rebuild a length-`n` real signal along `axis` from
/// its `n/2 + 1` retained bins. `n` must be stated explicitly because both
/// `n = 2(nf − 1)` and `n = 2nf − 1` produce `nf` bins.
pub fn irfft(f: &ComplexTensor, axis: usize, n: usize) -> Result<Tensor> {
    f.re.check_axis(axis)?;
    if f.re.shape() != f.im.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "irfft",
            lhs: f.re.shape().to_vec(),
            rhs: f.im.shape().to_vec(),
        });
    }
    let (outer, nf, inner) = lanes(f.re.shape(), axis);
    if n / 2 + 1 != nf {
        return Err(TensorError::Invalid(format!(
            "output length {n} needs {} bins, spectrum has {nf}",
            n / 2 + 1
        )));
    }
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_inverse(n);

    let mut shape = f.re.shape().to_vec();
    shape[axis] = n;
    let mut out = vec![0.0; outer * n * inner];
    let mut buf = vec![Complex64::default(); n];
    for o in 0..outer {
        for r in 0..inner {
            let base = o * nf * inner + r;
            for k in 0..nf {
                buf[k] = Complex64::new(
                    f.re.data()[base + k * inner],
                    f.im.data()[base + k * inner],
                );
            }
            // Hermitian extension: bin n−k is the conjugate of bin k.
            for k in nf..n {
                buf[k] = buf[n - k].conj();
            }
            fft.process(&mut buf);
            let out_base = o * n * inner + r;
            for i in 0..n {
                out[out_base + i * inner] = buf[i].re / n as f64;
            }
        }
    }
    Tensor::new(shape, out)
}
