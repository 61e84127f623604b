//! Forward rules for the differentiable primitives.
//!
//! Binary elementwise primitives require identical shapes. The only
//! broadcasting available is [`Tape::expand`], which stretches a size-1 axis.

use crate::error::{AutodiffError, Result};
use crate::gemm::{gemm, MatRef};
use crate::tape::{Op, Tape, Var};
use crate::tensor::{numel_of, Tensor};

pub(crate) const LAYER_NORM_EPS: f64 = 1e-5;

/// `(outer, extent, inner)` decomposition of a shape around `axis`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel_of(&shape[..axis]);
    let inner = numel_of(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn last_axis(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    match shape.last() {
        Some(&n) => Ok((numel_of(shape) / n, n)),
        None => Err(AutodiffError::invalid(op, "needs at least one axis")),
    }
}

/// Row-major im2col for a 3x3, stride 1, zero-padded convolution over an
/// NHWC input. Output rows are pixels, columns are `(ky, kx, channel)`.
pub(crate) fn im2col3x3(x: &[f64], b: usize, h: usize, w: usize, c: usize) -> Vec<f64> {
    let k = 9 * c;
    let mut cols = vec![0.0; b * h * w * k];
    for n in 0..b {
        for y in 0..h {
            for xx in 0..w {
                let row = ((n * h + y) * w + xx) * k;
                for ky in 0..3 {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let sx = xx as isize + kx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let src = ((n * h + sy as usize) * w + sx as usize) * c;
                        let dst = row + (ky * 3 + kx) * c;
                        cols[dst..dst + c].copy_from_slice(&x[src..src + c]);
                    }
                }
            }
        }
    }
    cols
}

impl Tape {
    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let value = self.value(a).zip_map(self.value(b), name, f)?;
        self.push(name, value, op, &[a, b])
    }

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        self.check(a)?;
        let value = self.value(a).map(f);
        self.push(name, value, op, &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `scale * a`.
    pub fn scale(&mut self, a: Var, scale: f64) -> Result<Var> {
        self.affine(a, scale, 0.0)
    }

    /// `scale * a + shift`, elementwise.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Result<Var> {
        if !scale.is_finite() || !shift.is_finite() {
            return Err(AutodiffError::NonFinite { op: "affine" });
        }
        self.unary("affine", a, |x| scale * x + shift, Op::Affine(a, scale))
    }

    /// `[n, k] x [k, m] -> [n, m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(AutodiffError::mismatch("matmul", sa, sb));
        }
        let (n, k, m) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; n * m];
        gemm(
            n,
            k,
            m,
            MatRef::new(self.value(a).data(), k),
            MatRef::new(self.value(b).data(), m),
            0.0,
            &mut out,
        );
        self.push("matmul", Tensor::from_parts(vec![n, m], out), Op::MatMul(a, b), &[a, b])
    }

    /// `[B, n, k] x [B, k, m] -> [B, n, m]`.
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(AutodiffError::mismatch("batch_matmul", sa, sb));
        }
        let (bs, n, k, m) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; bs * n * m];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for i in 0..bs {
            gemm(
                n,
                k,
                m,
                MatRef::new(&da[i * n * k..(i + 1) * n * k], k),
                MatRef::new(&db[i * k * m..(i + 1) * k * m], m),
                0.0,
                &mut out[i * n * m..(i + 1) * n * m],
            );
        }
        self.push(
            "batch_matmul",
            Tensor::from_parts(vec![bs, n, m], out),
            Op::BatchMatMul(a, b),
            &[a, b],
        )
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let v = Tensor::scalar(self.value(a).sum());
        self.push("sum", v, Op::Sum(a), &[a])
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let v = Tensor::scalar(self.value(a).mean());
        self.push("mean", v, Op::Mean(a), &[a])
    }

    /// Sums out `axis`, removing it from the shape.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check(a)?;
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(AutodiffError::invalid(
                "sum_axis",
                format!("axis {axis} out of range for {shape:?}"),
            ));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let x = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let src = &x[(o * n + j) * inner..(o * n + j + 1) * inner];
                for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        self.push(
            "sum_axis",
            Tensor::from_parts(out_shape, out),
            Op::SumAxis { input: a, axis },
            &[a],
        )
    }

    /// Mean over `axis`, removing it from the shape.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let n = *self
            .shape(a)
            .get(axis)
            .ok_or_else(|| AutodiffError::invalid("mean_axis", format!("axis {axis} out of range")))?;
        let s = self.sum_axis(a, axis)?;
        self.scale(s, 1.0 / n as f64)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary("square", a, |x| x * x, Op::Square(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary("log", a, f64::ln, Op::Log(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary("tanh", a, f64::tanh, Op::Tanh(a))
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&mut self, a: Var) -> Result<Var> {
        self.unary("silu", a, |x| x * sigmoid(x), Op::Silu(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, |x| x.max(0.0), Op::Relu(a))
    }

    /// Elementwise map with a caller-supplied derivative.
    pub fn custom_unary(&mut self, a: Var, f: fn(f64) -> f64, deriv: fn(f64) -> f64) -> Result<Var> {
        self.unary("custom", a, f, Op::Custom { input: a, deriv })
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| AutodiffError::invalid("concat", "no inputs"))?;
        for &v in inputs {
            self.check(v)?;
        }
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(AutodiffError::invalid(
                "concat",
                format!("axis {axis} out of range for {base:?}"),
            ));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let agree = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !agree {
                return Err(AutodiffError::mismatch("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let n = self.shape(v)[axis];
                let d = self.value(v).data();
                out.extend_from_slice(&d[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        self.push(
            "concat",
            Tensor::from_parts(shape, out),
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        )
    }

    /// Elements `[start, start + len)` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check(a)?;
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(AutodiffError::invalid(
                "slice",
                format!("range {start}..{} on axis {axis} of {shape:?}", start + len),
            ));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&x[(o * n + start) * inner..(o * n + start + len) * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        self.push(
            "slice",
            Tensor::from_parts(out_shape, out),
            Op::Slice { input: a, axis, start },
            &[a],
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.check(a)?;
        let v = self.value(a).clone().reshape(shape.to_vec())?;
        self.push("reshape", v, Op::Reshape(a), &[a])
    }

    /// Stretches a size-1 `axis` to extent `n` by repetition.
    pub fn expand(&mut self, a: Var, axis: usize, n: usize) -> Result<Var> {
        self.check(a)?;
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || shape[axis] != 1 || n == 0 {
            return Err(AutodiffError::invalid(
                "expand",
                format!("axis {axis} of {shape:?} must have extent 1"),
            ));
        }
        let (outer, _, inner) = split_axis(&shape, axis);
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(outer * n * inner);
        for o in 0..outer {
            let block = &x[o * inner..(o + 1) * inner];
            for _ in 0..n {
                out.extend_from_slice(block);
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = n;
        self.push(
            "expand",
            Tensor::from_parts(out_shape, out),
            Op::Expand { input: a, axis },
            &[a],
        )
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let shape = self.shape(a).to_vec();
        if shape.len() < 2 {
            return Err(AutodiffError::invalid("transpose", "needs at least two axes"));
        }
        let r = shape.len();
        let (rows, cols) = (shape[r - 2], shape[r - 1]);
        let out = transpose_blocks(self.value(a).data(), rows, cols);
        let mut out_shape = shape;
        out_shape.swap(r - 2, r - 1);
        self.push("transpose", Tensor::from_parts(out_shape, out), Op::Transpose(a), &[a])
    }

    /// Normalizes each row over the last axis to zero mean and unit variance.
    pub fn layer_norm(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let (rows, n) = last_axis("layer_norm", self.shape(a))?;
        let x = self.value(a).data();
        let mut out = vec![0.0; rows * n];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &x[r * n..(r + 1) * n];
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let s = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = s;
            for (o, v) in out[r * n..(r + 1) * n].iter_mut().zip(row) {
                *o = (v - mu) * s;
            }
        }
        let shape = self.shape(a).to_vec();
        self.push(
            "layer_norm",
            Tensor::from_parts(shape, out),
            Op::LayerNorm { input: a, rstd },
            &[a],
        )
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let (rows, n) = last_axis("softmax", self.shape(a))?;
        let x = self.value(a).data();
        let mut out = vec![0.0; rows * n];
        for r in 0..rows {
            let row = &x[r * n..(r + 1) * n];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (o, v) in out[r * n..(r + 1) * n].iter_mut().zip(row) {
                *o = (v - mx).exp();
                z += *o;
            }
            for o in &mut out[r * n..(r + 1) * n] {
                *o /= z;
            }
        }
        let shape = self.shape(a).to_vec();
        self.push("softmax", Tensor::from_parts(shape, out), Op::Softmax(a), &[a])
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let (rows, n) = last_axis("log_softmax", self.shape(a))?;
        let x = self.value(a).data();
        let mut out = vec![0.0; rows * n];
        for r in 0..rows {
            let row = &x[r * n..(r + 1) * n];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            for (o, v) in out[r * n..(r + 1) * n].iter_mut().zip(row) {
                *o = v - lse;
            }
        }
        let shape = self.shape(a).to_vec();
        self.push("log_softmax", Tensor::from_parts(shape, out), Op::LogSoftmax(a), &[a])
    }

    /// 3x3 convolution, stride 1, zero padding 1, over an NHWC input
    /// `[B, H, W, C]` with weights `[9 * C, O]` laid out as `(ky, kx, c)` rows.
    pub fn conv3x3(&mut self, input: Var, weight: Var) -> Result<Var> {
        self.check(input)?;
        self.check(weight)?;
        let (si, sw) = (self.shape(input), self.shape(weight));
        if si.len() != 4 || sw.len() != 2 || sw[0] != 9 * si[3] {
            return Err(AutodiffError::mismatch("conv3x3", si, sw));
        }
        let (b, h, w, c, o) = (si[0], si[1], si[2], si[3], sw[1]);
        let cols = im2col3x3(self.value(input).data(), b, h, w, c);
        let rows = b * h * w;
        let mut out = vec![0.0; rows * o];
        gemm(
            rows,
            9 * c,
            o,
            MatRef::new(&cols, 9 * c),
            MatRef::new(self.value(weight).data(), o),
            0.0,
            &mut out,
        );
        self.push(
            "conv3x3",
            Tensor::from_parts(vec![b, h, w, o], out),
            Op::Conv3x3 { input, weight, cols },
            &[input, weight],
        )
    }
}

/// Transposes each trailing `rows x cols` block.
pub(crate) fn transpose_blocks(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let block = rows * cols;
    let mut out = vec![0.0; x.len()];
    for (src, dst) in x.chunks_exact(block).zip(out.chunks_exact_mut(block)) {
        for i in 0..rows {
            for j in 0..cols {
                dst[j * rows + i] = src[i * cols + j];
            }
        }
    }
    out
}
