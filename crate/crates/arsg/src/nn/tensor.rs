//! Dense row-major tensors and the numeric kernels shared by the autodiff
//! graph and the forward-only inference paths.

use crate::error::{Error, Result};

/// Scalar element type. Tests and their tolerances assume the default
/// 64-bit build; the `f32` feature trades precision for training speed.
#[cfg(feature = "f32")]
pub type Real = f32;
#[cfg(not(feature = "f32"))]
pub type Real = f64;

/// Dense tensor, row-major, rank 1 or 2 in practice.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<Real>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<Real>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape {
                op: "from_vec",
                detail: format!("shape {:?} needs {} values, got {}", shape, n, data.len()),
            });
        }
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::Shape {
                op: "from_vec",
                detail: format!("extents must be positive, got {:?}", shape),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn vector(data: Vec<Real>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<Real>) -> Result<Self> {
        Tensor::from_vec(&[rows, cols], data)
    }

    /// Scalar as a one-element tensor.
    pub fn scalar(v: Real) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn one_hot(len: usize, index: usize) -> Self {
        let mut t = Tensor::zeros(&[len]);
        t.data[index] = 1.0;
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[Real] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Real] {
        &mut self.data
    }

    /// Number of rows of a rank-2 tensor (1 for vectors).
    pub fn rows(&self) -> usize {
        if self.shape.len() == 2 {
            self.shape[0]
        } else {
            1
        }
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&0)
    }

    pub fn row(&self, i: usize) -> &[Real] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> Real {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

// ---------------------------------------------------------------------------
// Kernels. These are the single source of numeric truth: the graph engine and
// the inference paths both call into them.
// ---------------------------------------------------------------------------

pub(crate) fn check_matvec(op: &'static str, w: &Tensor, x: &Tensor) -> Result<()> {
    if w.shape().len() != 2 {
        return Err(Error::Shape {
            op,
            detail: format!("W must be a matrix, got shape {:?}", w.shape()),
        });
    }
    if w.cols() != x.len() {
        return Err(Error::Shape {
            op,
            detail: format!(
                "W is {}x{} but x has length {}",
                w.rows(),
                w.cols(),
                x.len()
            ),
        });
    }
    Ok(())
}

pub(crate) fn matvec_into(out: &mut [Real], w: &Tensor, x: &[Real]) {
    let cols = w.cols();
    for (i, o) in out.iter_mut().enumerate() {
        let row = &w.data[i * cols..(i + 1) * cols];
        *o = row.iter().zip(x).map(|(a, b)| a * b).sum();
    }
}

/// y = W x
pub fn matvec(w: &Tensor, x: &Tensor) -> Result<Tensor> {
    check_matvec("matvec", w, x)?;
    let mut out = Tensor::zeros(&[w.rows()]);
    matvec_into(&mut out.data, w, x.data());
    Ok(out)
}

/// y = W x + b
pub fn affine(w: &Tensor, x: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_matvec("affine", w, x)?;
    if b.len() != w.rows() {
        return Err(Error::Shape {
            op: "affine",
            detail: format!("W has {} rows but b has length {}", w.rows(), b.len()),
        });
    }
    let mut out = matvec(w, x)?;
    for (o, bv) in out.data.iter_mut().zip(b.data()) {
        *o += bv;
    }
    Ok(out)
}

/// dx += W^T dy
pub(crate) fn matvec_t_accum(dx: &mut [Real], w: &Tensor, dy: &[Real]) {
    let cols = w.cols();
    for (i, g) in dy.iter().enumerate() {
        let row = &w.data[i * cols..(i + 1) * cols];
        for (d, wv) in dx.iter_mut().zip(row) {
            *d += wv * g;
        }
    }
}

/// dW += dy x^T
pub(crate) fn outer_accum(dw: &mut [Real], dy: &[Real], x: &[Real]) {
    let cols = x.len();
    for (i, g) in dy.iter().enumerate() {
        let row = &mut dw[i * cols..(i + 1) * cols];
        for (d, xv) in row.iter_mut().zip(x) {
            *d += g * xv;
        }
    }
}

/// Numerically stable logistic function.
pub fn sigmoid_scalar(x: Real) -> Real {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn tanh_map(x: &Tensor) -> Tensor {
    let data = x.data.iter().map(|v| v.tanh()).collect();
    Tensor {
        shape: x.shape.clone(),
        data,
    }
}

pub fn sigmoid_map(x: &Tensor) -> Tensor {
    let data = x.data.iter().map(|&v| sigmoid_scalar(v)).collect();
    Tensor {
        shape: x.shape.clone(),
        data,
    }
}

/// Max-subtracted softmax over a slice, in place.
pub(crate) fn softmax_slice(v: &mut [Real]) {
    let m = v.iter().cloned().fold(Real::NEG_INFINITY, Real::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - m).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

pub fn softmax(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    softmax_slice(&mut out.data);
    out
}

pub(crate) fn log_softmax_slice(v: &mut [Real]) {
    let m = v.iter().cloned().fold(Real::NEG_INFINITY, Real::max);
    let lse = m + v.iter().map(|x| (x - m).exp()).sum::<Real>().ln();
    for x in v.iter_mut() {
        *x -= lse;
    }
}

pub fn log_softmax(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    log_softmax_slice(&mut out.data);
    out
}

pub fn dot(a: &Tensor, b: &Tensor) -> Result<Real> {
    if a.len() != b.len() {
        return Err(Error::Shape {
            op: "dot",
            detail: format!("lengths {} and {} differ", a.len(), b.len()),
        });
    }
    Ok(a.data.iter().zip(&b.data).map(|(x, y)| x * y).sum())
}

pub(crate) fn check_conv1d(q: &Tensor, signal: &Tensor) -> Result<(usize, usize, usize)> {
    if q.shape().len() != 2 {
        return Err(Error::Shape {
            op: "conv1d",
            detail: format!("kernel must be k x f, got shape {:?}", q.shape()),
        });
    }
    let (k, f) = (q.shape()[0], q.shape()[1]);
    if k % 2 == 0 {
        return Err(Error::Shape {
            op: "conv1d",
            detail: format!("kernel width {} must be odd (centered filter)", k),
        });
    }
    if signal.shape().len() != 1 {
        return Err(Error::Shape {
            op: "conv1d",
            detail: format!("signal must be a vector, got shape {:?}", signal.shape()),
        });
    }
    Ok((k, f, signal.len()))
}

/// Centered zero-padded "same" convolution of a length-L signal with each of
/// the f filter columns of a k x f kernel. Output is L x f.
pub fn conv1d(q: &Tensor, signal: &Tensor) -> Result<Tensor> {
    let (k, f, l) = check_conv1d(q, signal)?;
    let half = (k - 1) / 2;
    let mut out = Tensor::zeros(&[l, f]);
    for pos in 0..l {
        for j in 0..k {
            // signal index for filter tap j at output position pos
            let s = pos + j;
            if s < half || s - half >= l {
                continue;
            }
            let sv = signal.data[s - half];
            let qrow = &q.data[j * f..(j + 1) * f];
            let orow = &mut out.data[pos * f..(pos + 1) * f];
            for (o, qv) in orow.iter_mut().zip(qrow) {
                *o += qv * sv;
            }
        }
    }
    Ok(out)
}

/// dQ += dF convolved against the signal.
pub(crate) fn conv1d_accum_q(dq: &mut [Real], dout: &Tensor, signal: &[Real], k: usize, f: usize) {
    let half = (k - 1) / 2;
    let l = signal.len();
    for pos in 0..l {
        let drow = dout.row(pos);
        for j in 0..k {
            let s = pos + j;
            if s < half || s - half >= l {
                continue;
            }
            let sv = signal[s - half];
            let qrow = &mut dq[j * f..(j + 1) * f];
            for (d, g) in qrow.iter_mut().zip(drow) {
                *d += g * sv;
            }
        }
    }
}

/// dsignal += dF convolved against the kernel.
pub(crate) fn conv1d_accum_signal(ds: &mut [Real], dout: &Tensor, q: &Tensor, k: usize, f: usize) {
    let half = (k - 1) / 2;
    let l = ds.len();
    for pos in 0..l {
        let drow = dout.row(pos);
        for j in 0..k {
            let s = pos + j;
            if s < half || s - half >= l {
                continue;
            }
            let qrow = &q.data[j * f..(j + 1) * f];
            let acc: Real = drow.iter().zip(qrow).map(|(g, qv)| g * qv).sum();
            ds[s - half] += acc;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(a: Real, b: Real, tol: Real) {
        assert!((a - b).abs() <= tol, "{} vs {} (tol {})", a, b, tol);
    }

    #[test]
    fn affine_identity() {
        let x = Tensor::vector(vec![1.0, 2.0]);
        let w = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = Tensor::zeros(&[2]);
        let y = affine(&w, &x, &b).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0]);
    }

    #[test]
    fn affine_arithmetic() {
        let x = Tensor::vector(vec![1.0, 1.0]);
        let w = Tensor::matrix(1, 2, vec![1.0, 1.0]).unwrap();
        let b = Tensor::vector(vec![-2.0]);
        let y = affine(&w, &x, &b).unwrap();
        assert_eq!(y.data(), &[0.0]);
    }

    #[test]
    fn affine_matches_triple_loop_oracle() {
        // Independent naive oracle: explicit index loops, no shared kernel.
        let mut rng = 12345u64;
        let mut next = || {
            rng = rng.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((rng >> 33) as Real) / (u32::MAX as Real) - 0.5
        };
        let (n, m) = (3, 4);
        let w = Tensor::matrix(n, m, (0..n * m).map(|_| next()).collect()).unwrap();
        let x = Tensor::vector((0..m).map(|_| next()).collect());
        let b = Tensor::vector((0..n).map(|_| next()).collect());
        let y = affine(&w, &x, &b).unwrap();
        for i in 0..n {
            let mut acc = 0.0;
            for j in 0..m {
                acc += w.data()[i * m + j] * x.data()[j];
            }
            acc += b.data()[i];
            assert_close(y.data()[i], acc, 1e-12);
        }
    }

    #[test]
    fn affine_shape_error_names_operand() {
        let x = Tensor::vector(vec![1.0; 3]);
        let w = Tensor::matrix(2, 2, vec![0.0; 4]).unwrap();
        let b = Tensor::zeros(&[2]);
        let err = affine(&w, &x, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("affine"), "{}", msg);
        assert!(msg.contains('x'), "{}", msg);
    }

    #[test]
    fn activations_zero_and_saturation() {
        let z = Tensor::vector(vec![0.0]);
        assert_eq!(tanh_map(&z).data()[0], 0.0);
        assert_eq!(sigmoid_map(&z).data()[0], 0.5);
        let big = sigmoid_scalar(40.0);
        assert!((big - 1.0).abs() < 1e-15);
        assert!(big.is_finite());
        assert!(sigmoid_scalar(-40.0).is_finite());
    }

    #[test]
    fn tanh_is_odd() {
        for i in 0..20 {
            let x = (i as Real) * 0.37 - 3.0;
            let t = Tensor::vector(vec![x, -x]);
            let y = tanh_map(&t);
            assert_close(y.data()[0] + y.data()[1], 0.0, 1e-15);
        }
    }

    #[test]
    fn softmax_uniform_and_ratio() {
        let y = softmax(&Tensor::vector(vec![0.0; 4]));
        for v in y.data() {
            assert_close(*v, 0.25, 1e-15);
        }
        for c in [-5.0, 0.0, 123.0] {
            let y = softmax(&Tensor::vector(vec![c, c + (3.0 as Real).ln()]));
            assert_close(y.data()[0], 0.25, 1e-12);
            assert_close(y.data()[1], 0.75, 1e-12);
        }
    }

    #[test]
    fn softmax_large_inputs_stable() {
        let y = softmax(&Tensor::vector(vec![1000.0, 1001.0]));
        let r = softmax(&Tensor::vector(vec![0.0, 1.0]));
        assert!(y.all_finite());
        assert_close(y.data()[0], r.data()[0], 1e-15);
        assert_close(y.data()[1], r.data()[1], 1e-15);
    }

    #[test]
    fn conv1d_delta_kernel_is_identity() {
        let q = Tensor::matrix(3, 1, vec![0.0, 1.0, 0.0]).unwrap();
        let s = Tensor::vector(vec![0.3, -1.0, 2.0, 0.5]);
        let f = conv1d(&q, &s).unwrap();
        assert_eq!(f.shape(), &[4, 1]);
        for (i, v) in s.data().iter().enumerate() {
            assert_close(f.data()[i], *v, 1e-15);
        }
    }

    #[test]
    fn conv1d_box_kernel_padding() {
        let q = Tensor::matrix(3, 1, vec![1.0, 1.0, 1.0]).unwrap();
        let s = Tensor::vector(vec![1.0; 5]);
        let f = conv1d(&q, &s).unwrap();
        assert_close(f.data()[2], 3.0, 1e-15);
        assert_close(f.data()[0], 2.0, 1e-15);
        assert_close(f.data()[4], 2.0, 1e-15);
    }

    #[test]
    fn conv1d_matches_sliding_window_oracle() {
        let mut state = 7u64;
        let mut next = || {
            state = state.wrapping_mul(2862933555777941757).wrapping_add(3037000493);
            ((state >> 33) as Real) / (u32::MAX as Real) - 0.5
        };
        let (k, fch, l) = (5, 2, 9);
        let q = Tensor::matrix(k, fch, (0..k * fch).map(|_| next()).collect()).unwrap();
        let s = Tensor::vector((0..l).map(|_| next()).collect());
        let f = conv1d(&q, &s).unwrap();
        let half = (k - 1) as isize / 2;
        for pos in 0..l as isize {
            for c in 0..fch {
                let mut acc = 0.0;
                for j in 0..k as isize {
                    let idx = pos + j - half;
                    if idx >= 0 && (idx as usize) < l {
                        acc += q.data()[j as usize * fch + c] * s.data()[idx as usize];
                    }
                }
                assert_close(f.data()[pos as usize * fch + c], acc, 1e-12);
            }
        }
    }

    #[test]
    fn conv1d_rejects_even_kernel() {
        let q = Tensor::matrix(4, 1, vec![0.0; 4]).unwrap();
        let s = Tensor::vector(vec![1.0; 3]);
        assert!(conv1d(&q, &s).is_err());
    }

    #[test]
    fn conv1d_is_linear() {
        let q = Tensor::matrix(3, 2, vec![0.2, -0.4, 1.0, 0.3, -0.7, 0.1]).unwrap();
        let x = Tensor::vector(vec![1.0, -2.0, 0.5, 3.0]);
        let y = Tensor::vector(vec![0.4, 0.4, -1.0, 2.0]);
        let (a, b) = (1.7, -0.3);
        let mixed = Tensor::vector(
            x.data()
                .iter()
                .zip(y.data())
                .map(|(xv, yv)| a * xv + b * yv)
                .collect(),
        );
        let fm = conv1d(&q, &mixed).unwrap();
        let fx = conv1d(&q, &x).unwrap();
        let fy = conv1d(&q, &y).unwrap();
        for i in 0..fm.len() {
            assert_close(fm.data()[i], a * fx.data()[i] + b * fy.data()[i], 1e-12);
        }
    }
}
