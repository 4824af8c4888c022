//! Forward and backward passes for the layer set used by the networks.
//!
//! Backward functions accumulate parameter gradients into caller-owned
//! buffers (`+=`), so gradients from several samples can be summed without
//! intermediate allocations. Input gradients are returned fresh.

use crate::error::{Error, Result};
use crate::numerics::tensor::{Real, Tensor};

/// Output extent of a valid (unpadded) window sweep.
pub fn valid_extent(input: usize, window: usize, stride: usize) -> Option<usize> {
    if window == 0 || stride == 0 || input < window {
        None
    } else {
        Some((input - window) / stride + 1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    f: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }
}

fn conv_geom<T: Real>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    bias: &Tensor<T>,
    stride: (usize, usize),
) -> Result<ConvGeom> {
    let &[c, h, w] = input.dims() else {
        return Err(Error::shape(
            "conv2d",
            format!("input must be [C,H,W], got {:?}", input.dims()),
        ));
    };
    let &[f, kc, kh, kw] = kernels.dims() else {
        return Err(Error::shape(
            "conv2d",
            format!("kernels must be [F,C,kh,kw], got {:?}", kernels.dims()),
        ));
    };
    if kc != c {
        return Err(Error::shape(
            "conv2d",
            format!("input channels: input has {c}, kernels expect {kc}"),
        ));
    }
    if bias.dims() != [f] {
        return Err(Error::shape(
            "conv2d",
            format!("bias must be [{f}], got {:?}", bias.dims()),
        ));
    }
    let (sh, sw) = stride;
    let oh = valid_extent(h, kh, sh).ok_or_else(|| {
        Error::shape(
            "conv2d",
            format!("height: input {h} vs kernel {kh} with stride {sh}"),
        )
    })?;
    let ow = valid_extent(w, kw, sw).ok_or_else(|| {
        Error::shape(
            "conv2d",
            format!("width: input {w} vs kernel {kw} with stride {sw}"),
        )
    })?;
    Ok(ConvGeom {
        c,
        h,
        w,
        f,
        kh,
        kw,
        sh,
        sw,
        oh,
        ow,
    })
}

/// Unfold input patches into a `[C*kh*kw, OH*OW]` column matrix.
fn im2col<T: Real>(x: &[T], g: &ConvGeom, cols: &mut Vec<T>) {
    let p = g.positions();
    cols.clear();
    cols.resize(g.patch() * p, T::zero());
    let mut row = 0;
    for ci in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let src = &x[(ci * g.h + oy * g.sh + ki) * g.w + kj..];
                    let out = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if g.sw == 1 {
                        out.copy_from_slice(&src[..g.ow]);
                    } else {
                        for (ox, o) in out.iter_mut().enumerate() {
                            *o = src[ox * g.sw];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Fold a column-gradient matrix back onto the input, summing overlaps.
fn col2im<T: Real>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let p = g.positions();
    let mut row = 0;
    for ci in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let base = (ci * g.h + oy * g.sh + ki) * g.w + kj;
                    for ox in 0..g.ow {
                        dx[base + ox * g.sw] += src[oy * g.ow + ox];
                    }
                }
                row += 1;
            }
        }
    }
}

/// Valid cross-correlation of `input [C,H,W]` with `kernels [F,C,kh,kw]`.
pub fn conv2d<T: Real>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    bias: &Tensor<T>,
    stride: (usize, usize),
) -> Result<Tensor<T>> {
    let g = conv_geom(input, kernels, bias, stride)?;
    let mut cols = Vec::new();
    im2col(input.data(), &g, &mut cols);
    let p = g.positions();
    let mut out = Vec::with_capacity(g.f * p);
    for &b in bias.data() {
        out.extend(std::iter::repeat_n(b, p));
    }
    T::gemm(
        g.f,
        g.patch(),
        p,
        T::one(),
        kernels.data(),
        (g.patch(), 1),
        &cols,
        (p, 1),
        T::one(),
        &mut out,
        (p, 1),
    );
    Tensor::new(&[g.f, g.oh, g.ow], out)
}

/// Backward pass of [`conv2d`].
///
/// Accumulates into `grad_kernels` and `grad_bias`; returns the input
/// gradient when `need_input` is set.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    stride: (usize, usize),
    grad_out: &Tensor<T>,
    grad_kernels: &mut Tensor<T>,
    grad_bias: &mut Tensor<T>,
    need_input: bool,
) -> Result<Option<Tensor<T>>> {
    let g = conv_geom(input, kernels, grad_bias, stride)?;
    if grad_out.dims() != [g.f, g.oh, g.ow] {
        return Err(Error::shape(
            "conv2d_backward",
            format!(
                "output gradient is {:?}, expected {:?}",
                grad_out.dims(),
                [g.f, g.oh, g.ow]
            ),
        ));
    }
    if grad_kernels.dims() != kernels.dims() {
        return Err(Error::shape(
            "conv2d_backward",
            "kernel gradient buffer does not match kernels",
        ));
    }
    let p = g.positions();
    let k = g.patch();
    for (fi, gb) in grad_bias.data_mut().iter_mut().enumerate() {
        *gb += grad_out.data()[fi * p..(fi + 1) * p].iter().copied().sum::<T>();
    }
    let mut cols = Vec::new();
    im2col(input.data(), &g, &mut cols);
    // dW[F,K] += dY[F,P] * cols^T[P,K]
    T::gemm(
        g.f,
        p,
        k,
        T::one(),
        grad_out.data(),
        (p, 1),
        &cols,
        (1, p),
        T::one(),
        grad_kernels.data_mut(),
        (k, 1),
    );
    if !need_input {
        return Ok(None);
    }
    // dcols[K,P] = W^T[K,F] * dY[F,P]
    T::gemm(
        k,
        g.f,
        p,
        T::one(),
        kernels.data(),
        (1, k),
        grad_out.data(),
        (p, 1),
        T::zero(),
        &mut cols,
        (p, 1),
    );
    let mut dx = vec![T::zero(); g.c * g.h * g.w];
    col2im(&cols, &g, &mut dx);
    Ok(Some(Tensor::new(input.dims(), dx)?))
}

/// Max pooling output together with the flat input index of each maximum.
#[derive(Clone, Debug)]
pub struct Pooled<T> {
    pub output: Tensor<T>,
    pub argmax: Vec<usize>,
}

pub fn maxpool2d<T: Real>(
    input: &Tensor<T>,
    window: (usize, usize),
    stride: (usize, usize),
) -> Result<Tensor<T>> {
    maxpool2d_indexed(input, window, stride).map(|p| p.output)
}

/// Max pooling that also records where each maximum came from. Ties go to
/// the first element in row-major window order.
pub fn maxpool2d_indexed<T: Real>(
    input: &Tensor<T>,
    window: (usize, usize),
    stride: (usize, usize),
) -> Result<Pooled<T>> {
    let &[c, h, w] = input.dims() else {
        return Err(Error::shape(
            "maxpool2d",
            format!("input must be [C,H,W], got {:?}", input.dims()),
        ));
    };
    let (ph, pw) = window;
    let oh = valid_extent(h, ph, stride.0).ok_or_else(|| {
        Error::shape("maxpool2d", format!("window height {ph} exceeds input height {h}"))
    })?;
    let ow = valid_extent(w, pw, stride.1).ok_or_else(|| {
        Error::shape("maxpool2d", format!("window width {pw} exceeds input width {w}"))
    })?;
    let x = input.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut argmax = Vec::with_capacity(c * oh * ow);
    for ci in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = (ci * h + oy * stride.0) * w + ox * stride.1;
                for ki in 0..ph {
                    for kj in 0..pw {
                        let idx = (ci * h + oy * stride.0 + ki) * w + ox * stride.1 + kj;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                out.push(x[best]);
                argmax.push(best);
            }
        }
    }
    Ok(Pooled {
        output: Tensor::new(&[c, oh, ow], out)?,
        argmax,
    })
}

pub fn maxpool2d_backward<T: Real>(
    input_dims: &[usize],
    argmax: &[usize],
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    if argmax.len() != grad_out.len() {
        return Err(Error::shape(
            "maxpool2d_backward",
            format!("{} indices for {} gradients", argmax.len(), grad_out.len()),
        ));
    }
    let mut dx = Tensor::zeros(input_dims);
    let d = dx.data_mut();
    for (&i, &g) in argmax.iter().zip(grad_out.data()) {
        d[i] += g;
    }
    Ok(dx)
}

fn dense_dims<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<(usize, usize, usize)> {
    let &[m, n] = weight.dims() else {
        return Err(Error::shape(
            "dense",
            format!("weight must be [m,n], got {:?}", weight.dims()),
        ));
    };
    if bias.dims() != [m] {
        return Err(Error::shape(
            "dense",
            format!("bias must be [{m}], got {:?}", bias.dims()),
        ));
    }
    let rows = match input.dims() {
        &[len] if len == n => 1,
        &[b, len] if len == n => b,
        other => {
            return Err(Error::shape(
                "dense",
                format!("input {other:?} does not end in weight width {n}"),
            ))
        }
    };
    Ok((rows, m, n))
}

/// Affine map `weight * input + bias`. Accepts a vector `[n]` or a batch of
/// row vectors `[B,n]`; the output keeps the input's rank.
pub fn dense<T: Real>(input: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (rows, m, n) = dense_dims(input, weight, bias)?;
    let mut out = Vec::with_capacity(rows * m);
    for _ in 0..rows {
        out.extend_from_slice(bias.data());
    }
    // Y[B,m] += X[B,n] * W^T[n,m]
    T::gemm(
        rows,
        n,
        m,
        T::one(),
        input.data(),
        (n, 1),
        weight.data(),
        (1, n),
        T::one(),
        &mut out,
        (m, 1),
    );
    let dims: Vec<usize> = if input.rank() == 1 { vec![m] } else { vec![rows, m] };
    Tensor::new(&dims, out)
}

/// Backward pass of [`dense`]: accumulates parameter gradients and returns
/// the input gradient.
pub fn dense_backward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    grad_weight: &mut Tensor<T>,
    grad_bias: &mut Tensor<T>,
) -> Result<Tensor<T>> {
    let (rows, m, n) = dense_dims(input, weight, grad_bias)?;
    if grad_out.len() != rows * m {
        return Err(Error::shape(
            "dense_backward",
            format!("output gradient has {} values, expected {}", grad_out.len(), rows * m),
        ));
    }
    let gy = grad_out.data();
    for r in 0..rows {
        for (gb, &g) in grad_bias.data_mut().iter_mut().zip(&gy[r * m..(r + 1) * m]) {
            *gb += g;
        }
    }
    // dW[m,n] += dY^T[m,B] * X[B,n]
    T::gemm(
        m,
        rows,
        n,
        T::one(),
        gy,
        (1, m),
        input.data(),
        (n, 1),
        T::one(),
        grad_weight.data_mut(),
        (n, 1),
    );
    // dX[B,n] = dY[B,m] * W[m,n]
    let mut dx = vec![T::zero(); rows * n];
    T::gemm(
        rows,
        m,
        n,
        T::one(),
        gy,
        (m, 1),
        weight.data(),
        (n, 1),
        T::zero(),
        &mut dx,
        (n, 1),
    );
    Tensor::new(input.dims(), dx)
}

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Gradient of ReLU given its *output*.
pub fn relu_backward<T: Real>(output: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let data = output
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&y, &g)| if y > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::new(output.dims(), data).expect("same dims")
}

/// A batch of probability rows, kept in 64-bit.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbBatch {
    rows: usize,
    dim: usize,
    data: Vec<f64>,
}

impl ProbBatch {
    /// Wrap rows that are already distributions. Each row must be
    /// nonnegative and sum to 1 within `1e-6`.
    pub fn new(rows: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || dim == 0 || data.len() != rows * dim {
            return Err(Error::shape(
                "prob_batch",
                format!("{rows}x{dim} needs {} values, got {}", rows * dim, data.len()),
            ));
        }
        for (i, row) in data.chunks(dim).enumerate() {
            let sum: f64 = row.iter().sum();
            if row.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) || (sum - 1.0).abs() > 1e-6 {
                return Err(Error::Invalid(format!(
                    "row {i} is not a probability distribution (sum {sum})"
                )));
            }
        }
        Ok(ProbBatch { rows, dim, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::shape("prob_batch", "ragged rows"));
        }
        Self::new(rows.len(), dim, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.dim)
    }

    /// Rows `start..end` as a new batch.
    pub fn slice(&self, start: usize, end: usize) -> ProbBatch {
        ProbBatch {
            rows: end - start,
            dim: self.dim,
            data: self.data[start * self.dim..end * self.dim].to_vec(),
        }
    }
}

/// Row-wise softmax with max subtraction. A rank-1 input is one row.
pub fn softmax_rows<T: Real>(logits: &Tensor<T>) -> Result<ProbBatch> {
    let (rows, dim) = match logits.dims() {
        &[d] => (1, d),
        &[b, d] => (b, d),
        other => {
            return Err(Error::shape(
                "softmax_rows",
                format!("expected [B,D] logits, got {other:?}"),
            ))
        }
    };
    if !logits.is_finite() {
        return Err(Error::NonFinite("softmax_rows logits".into()));
    }
    let mut data = Vec::with_capacity(rows * dim);
    for row in logits.data().chunks(dim) {
        let max = row.iter().map(|v| v.f64()).fold(f64::NEG_INFINITY, f64::max);
        let start = data.len();
        data.extend(row.iter().map(|v| (v.f64() - max).exp()));
        let sum: f64 = data[start..].iter().sum();
        for p in &mut data[start..] {
            *p /= sum;
        }
    }
    Ok(ProbBatch { rows, dim, data })
}

/// Map a gradient with respect to softmax outputs onto the logits:
/// `p * (g - <g, p>)` per row.
pub fn softmax_backward(probs: &ProbBatch, grad: &[f64]) -> Vec<f64> {
    assert_eq!(grad.len(), probs.data.len(), "softmax gradient length");
    let mut out = Vec::with_capacity(grad.len());
    for (p, g) in probs.iter_rows().zip(grad.chunks(probs.dim)) {
        let dot: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
        out.extend(p.iter().zip(g).map(|(pi, gi)| pi * (gi - dot)));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(dims: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(dims, data.to_vec()).unwrap()
    }

    #[test]
    fn conv_shape_table_one_first_layer() {
        let x = Tensor::<f32>::zeros(&[3, 114, 500]);
        let k = Tensor::<f32>::zeros(&[32, 3, 15, 23]);
        let b = Tensor::<f32>::zeros(&[32]);
        let y = conv2d(&x, &k, &b, (9, 9)).unwrap();
        assert_eq!(y.dims(), &[32, 12, 54]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_identity_kernel() {
        let x = t(&[1, 2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let y = conv2d(&x, &t(&[1, 1, 1, 1], &[1.0]), &t(&[1], &[0.0]), (1, 1)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv_matches_direct_sum() {
        // 2 channels, 4x5 input, 3 filters of 2x3, stride (2,1)
        let x: Vec<f64> = (0..40).map(|v| ((v * 7) % 11) as f64 - 5.0).collect();
        let k: Vec<f64> = (0..36).map(|v| ((v * 5) % 7) as f64 * 0.25 - 0.5).collect();
        let b = [0.1, -0.2, 0.3];
        let y = conv2d(&t(&[2, 4, 5], &x), &t(&[3, 2, 2, 3], &k), &t(&[3], &b), (2, 1)).unwrap();
        assert_eq!(y.dims(), &[3, 2, 3]);
        for f in 0..3 {
            for oy in 0..2 {
                for ox in 0..3 {
                    let mut want = b[f];
                    for c in 0..2 {
                        for i in 0..2 {
                            for j in 0..3 {
                                want += x[(c * 4 + oy * 2 + i) * 5 + ox + j]
                                    * k[((f * 2 + c) * 2 + i) * 3 + j];
                            }
                        }
                    }
                    let got = y.data()[(f * 2 + oy) * 3 + ox];
                    assert!((got - want).abs() < 1e-12, "{got} vs {want}");
                }
            }
        }
    }

    #[test]
    fn conv_errors_name_dimension() {
        let x = Tensor::<f32>::zeros(&[3, 10, 10]);
        let k = Tensor::<f32>::zeros(&[4, 2, 3, 3]);
        let err = conv2d(&x, &k, &Tensor::zeros(&[4]), (1, 1)).unwrap_err();
        assert!(err.to_string().contains("channels"), "{err}");
        let k = Tensor::<f32>::zeros(&[4, 3, 11, 3]);
        let err = conv2d(&x, &k, &Tensor::zeros(&[4]), (1, 1)).unwrap_err();
        assert!(err.to_string().contains("height"), "{err}");
    }

    #[test]
    fn maxpool_examples() {
        let y = maxpool2d(&t(&[1, 1, 4], &[1.0, 3.0, 2.0, 4.0]), (1, 2), (1, 2)).unwrap();
        assert_eq!(y.data(), &[3.0, 4.0]);
        let y = maxpool2d(&Tensor::<f32>::full(&[32, 10, 48], 2.5), (1, 2), (1, 2)).unwrap();
        assert_eq!(y.dims(), &[32, 10, 24]);
        assert!(y.data().iter().all(|&v| v == 2.5));
        assert!(maxpool2d(&Tensor::<f32>::zeros(&[1, 1, 1]), (1, 2), (1, 2)).is_err());
    }

    #[test]
    fn dense_examples() {
        let y = dense(&t(&[2], &[3.0, 4.0]), &t(&[1, 2], &[1.0, 2.0]), &t(&[1], &[0.0])).unwrap();
        assert_eq!(y.data(), &[11.0]);
        let eye = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let x = t(&[2], &[-1.5, 7.0]);
        assert_eq!(dense(&x, &eye, &t(&[2], &[0.0, 0.0])).unwrap(), x);
        let y = dense(&x, &Tensor::zeros(&[2, 2]), &t(&[2], &[0.5, -2.0])).unwrap();
        assert_eq!(y.data(), &[0.5, -2.0]);
        assert!(dense(&t(&[3], &[0.0; 3]), &eye, &t(&[2], &[0.0; 2])).is_err());
    }

    #[test]
    fn softmax_examples() {
        let p = softmax_rows(&t(&[1, 2], &[0.0, 0.0])).unwrap();
        assert_eq!(p.row(0), &[0.5, 0.5]);
        let p = softmax_rows(&t(&[1, 4], &[3.0; 4])).unwrap();
        assert!(p.row(0).iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let p = softmax_rows(&t(&[2], &[1.0, 0.0])).unwrap();
        // 1/(1+e^-1)
        assert!((p.row(0)[0] - 0.731_058_578_630_005).abs() < 1e-12);
        assert!((p.row(0)[1] - 0.268_941_421_369_995).abs() < 1e-12);
        let p = softmax_rows(&t(&[1, 3], &[1000.0, 0.0, -1000.0])).unwrap();
        assert!(p.row(0)[0] > 0.999_999);
    }

    #[test]
    fn prob_batch_validates_rows() {
        assert!(ProbBatch::from_rows(&[vec![0.5, 0.5], vec![0.2, 0.8]]).is_ok());
        assert!(ProbBatch::from_rows(&[vec![0.5, 0.6]]).is_err());
        assert!(ProbBatch::from_rows(&[vec![1.5, -0.5]]).is_err());
    }
}
