//! Dense row-major `f64` tensors and the forward/adjoint kernels used by the tape.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Argument(format!(
                "tensor dimensions must be positive, got {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::dim("tensor", &shape, &[data.len()]));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Argument("ragged rows".into()));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data.clone())
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Gathers rows (slices along the leading axis) into a new tensor.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        let n = self.shape[0];
        let row_len = self.data.len() / n;
        let mut data = Vec::with_capacity(rows.len() * row_len);
        for &r in rows {
            if r >= n {
                return Err(Error::Argument(format!("row {r} out of range for {n} rows")));
            }
            data.extend_from_slice(&self.data[r * row_len..(r + 1) * row_len]);
        }
        let mut shape = self.shape.clone();
        shape[0] = rows.len();
        Self::new(shape, data)
    }

    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (m, k) = as_matrix(self, "matmul")?;
        let (k2, n) = as_matrix(rhs, "matmul")?;
        if k != k2 {
            return Err(Error::dim("matmul", &self.shape, &rhs.shape));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(&self.data, &rhs.data, &mut out, m, k, n);
        Tensor::new(vec![m, n], out)
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = as_matrix(self, "transpose")?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor::new(vec![n, m], out)
    }

    pub fn relu(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| v.max(0.0)).collect(),
        }
    }

    /// Index of the largest entry in each row of a matrix; ties go to the lowest index.
    pub fn argmax_rows(&self) -> Result<Vec<usize>> {
        let (_, cols) = as_matrix(self, "argmax_rows")?;
        Ok(self
            .data
            .chunks(cols)
            .map(|row| {
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect())
    }
}

fn as_matrix(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match t.shape.as_slice() {
        &[m, n] => Ok((m, n)),
        other => Err(Error::dim(op, other, &[0, 0])),
    }
}

/// `out += a[m×k] · b[k×n]`
pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out += aᵀ · b` with `a: [m×k]`, `b: [m×n]`, `out: [k×n]`.
pub(crate) fn matmul_at_b_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out += a · bᵀ` with `a: [m×n]`, `b: [k×n]`, `out: [m×k]`.
pub(crate) fn matmul_a_bt_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let dot: f64 = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
            out[i * k + p] += dot;
        }
    }
}

/// Geometry of a 3×3, stride 1, zero-padding 1 convolution.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvDims {
    pub batch: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub height: usize,
    pub width: usize,
}

impl ConvDims {
    pub fn check(x: &Tensor, kernel: &Tensor, bias: &Tensor) -> Result<Self> {
        let &[batch, in_ch, height, width] = x.shape() else {
            return Err(Error::dim("conv2d", x.shape(), kernel.shape()));
        };
        let &[out_ch, k_in, 3, 3] = kernel.shape() else {
            return Err(Error::dim("conv2d", x.shape(), kernel.shape()));
        };
        if k_in != in_ch {
            return Err(Error::dim("conv2d", x.shape(), kernel.shape()));
        }
        if bias.shape() != [out_ch] {
            return Err(Error::dim("conv2d bias", kernel.shape(), bias.shape()));
        }
        Ok(ConvDims {
            batch,
            in_ch,
            out_ch,
            height,
            width,
        })
    }
}

/// Valid output range `[lo, hi)` along one axis for a kernel tap offset `k ∈ {0,1,2}`.
#[inline]
fn tap_range(k: usize, len: usize) -> (usize, usize) {
    match k {
        0 => (1, len),
        1 => (0, len),
        _ => (0, len - 1),
    }
}

pub(crate) fn conv2d_forward(x: &[f64], kernel: &[f64], bias: &[f64], d: ConvDims) -> Vec<f64> {
    let ConvDims {
        batch,
        in_ch,
        out_ch,
        height: h,
        width: w,
    } = d;
    let plane = h * w;
    let mut out = vec![0.0; batch * out_ch * plane];
    for b in 0..batch {
        for f in 0..out_ch {
            let dst = &mut out[(b * out_ch + f) * plane..(b * out_ch + f + 1) * plane];
            dst.iter_mut().for_each(|v| *v = bias[f]);
            for c in 0..in_ch {
                let src = &x[(b * in_ch + c) * plane..(b * in_ch + c + 1) * plane];
                let kbase = (f * in_ch + c) * 9;
                for ky in 0..3 {
                    let (y0, y1) = tap_range(ky, h);
                    for kx in 0..3 {
                        let wv = kernel[kbase + ky * 3 + kx];
                        let (x0, x1) = tap_range(kx, w);
                        for oy in y0..y1 {
                            let iy = oy + ky - 1;
                            let drow = &mut dst[oy * w + x0..oy * w + x1];
                            let srow = &src[iy * w + x0 + kx - 1..iy * w + x1 + kx - 1];
                            for (o, &s) in drow.iter_mut().zip(srow) {
                                *o += wv * s;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Accumulates adjoints of the convolution inputs given the output adjoint `dy`.
pub(crate) fn conv2d_backward(
    x: &[f64],
    kernel: &[f64],
    dy: &[f64],
    d: ConvDims,
    dx: &mut [f64],
    dk: &mut [f64],
    db: &mut [f64],
) {
    let ConvDims {
        batch,
        in_ch,
        out_ch,
        height: h,
        width: w,
    } = d;
    let plane = h * w;
    for b in 0..batch {
        for f in 0..out_ch {
            let g = &dy[(b * out_ch + f) * plane..(b * out_ch + f + 1) * plane];
            db[f] += g.iter().sum::<f64>();
            for c in 0..in_ch {
                let xoff = (b * in_ch + c) * plane;
                let kbase = (f * in_ch + c) * 9;
                for ky in 0..3 {
                    let (y0, y1) = tap_range(ky, h);
                    for kx in 0..3 {
                        let wv = kernel[kbase + ky * 3 + kx];
                        let (x0, x1) = tap_range(kx, w);
                        let mut acc = 0.0;
                        for oy in y0..y1 {
                            let iy = oy + ky - 1;
                            let grow = &g[oy * w + x0..oy * w + x1];
                            let start = xoff + iy * w + x0 + kx - 1;
                            let xrow = &x[start..start + (x1 - x0)];
                            let dxrow = &mut dx[start..start + (x1 - x0)];
                            for ((&gv, &xv), dxv) in grow.iter().zip(xrow).zip(dxrow.iter_mut()) {
                                acc += gv * xv;
                                *dxv += gv * wv;
                            }
                        }
                        dk[kbase + ky * 3 + kx] += acc;
                    }
                }
            }
        }
    }
}

/// Non-overlapping 2×2 max pooling. Returns the pooled values and, per output
/// element, the flat input index that won. Ties go to the first element in
/// row-major window order.
pub(crate) fn maxpool2_forward(x: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let &[b, c, h, w] = x.shape() else {
        return Err(Error::dim("maxpool2", x.shape(), &[0, 0, 2, 2]));
    };
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::dim("maxpool2", x.shape(), &[b, c, h / 2 * 2, w / 2 * 2]));
    }
    let (oh, ow) = (h / 2, w / 2);
    let data = x.data();
    let mut out = Vec::with_capacity(b * c * oh * ow);
    let mut winners = Vec::with_capacity(b * c * oh * ow);
    for plane in 0..b * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let top = base + 2 * oy * w + 2 * ox;
                let candidates = [top, top + 1, top + w, top + w + 1];
                let mut best = candidates[0];
                for &i in &candidates[1..] {
                    if data[i] > data[best] {
                        best = i;
                    }
                }
                out.push(data[best]);
                winners.push(best);
            }
        }
    }
    Ok((Tensor::new(vec![b, c, oh, ow], out)?, winners))
}

/// Mean softmax cross-entropy over the batch. Also returns the softmax
/// probabilities, which the adjoint needs.
pub(crate) fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Vec<f64>)> {
    let &[batch, classes] = logits.shape() else {
        return Err(Error::dim("softmax_cross_entropy", logits.shape(), &[labels.len()]));
    };
    if labels.len() != batch {
        return Err(Error::dim("softmax_cross_entropy", logits.shape(), &[labels.len()]));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Argument(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    let mut probs = Vec::with_capacity(batch * classes);
    let mut total = 0.0;
    for (row, &label) in logits.data().chunks(classes).zip(labels) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
        let log_sum = sum.ln();
        total += log_sum - (row[label] - max);
        probs.extend(row.iter().map(|&v| (v - max).exp() / sum));
    }
    Ok((total / batch as f64, probs))
}

/// Uniform He initialization: entries i.i.d. on `(-√(6/fan_in), √(6/fan_in))`.
pub fn he_uniform_init<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Result<Tensor> {
    if fan_in == 0 {
        return Err(Error::Argument("fan_in must be at least 1".into()));
    }
    let bound = (6.0 / fan_in as f64).sqrt();
    let len = shape.iter().product();
    let data = (0..len)
        .map(|_| {
            // reject the closed endpoint so samples stay in the open interval
            loop {
                let v = rng.gen_range(-bound..bound);
                if v != -bound {
                    break v;
                }
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data)
}
