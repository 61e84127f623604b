//! Vector-Jacobian products, one per primitive.

use crate::error::Result;
use crate::gemm::{gemm, MatRef};
use crate::ops::{sigmoid, split_axis, transpose_blocks};
use crate::tape::{Node, Op, Var};
use crate::tensor::Tensor;

fn like(t: &Tensor, data: Vec<f64>) -> Tensor {
    Tensor::from_parts(t.shape().to_vec(), data)
}

fn zip(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

/// Gradient contributions of node `i` to its inputs, given upstream `g`.
pub(crate) fn vjp(nodes: &[Node], i: usize, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
    let val = |v: Var| &nodes[v.0].value;
    let out = &nodes[i].value;
    let gd = g.data();
    let res = match &nodes[i].op {
        Op::Leaf => Vec::new(),
        Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
        Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|x| -x))],
        Op::Mul(a, b) => vec![
            (*a, like(g, zip(gd, val(*b).data(), |x, y| x * y))),
            (*b, like(g, zip(gd, val(*a).data(), |x, y| x * y))),
        ],
        Op::Affine(a, s) => vec![(*a, g.map(|x| x * s))],
        Op::MatMul(a, b) => {
            let (sa, sb) = (val(*a).shape(), val(*b).shape());
            let (n, k, m) = (sa[0], sa[1], sb[1]);
            let mut ga = vec![0.0; n * k];
            gemm(
                n,
                m,
                k,
                MatRef::new(gd, m),
                MatRef::transposed(val(*b).data(), m),
                0.0,
                &mut ga,
            );
            let mut gb = vec![0.0; k * m];
            gemm(
                k,
                n,
                m,
                MatRef::transposed(val(*a).data(), k),
                MatRef::new(gd, m),
                0.0,
                &mut gb,
            );
            vec![
                (*a, Tensor::from_parts(vec![n, k], ga)),
                (*b, Tensor::from_parts(vec![k, m], gb)),
            ]
        }
        Op::BatchMatMul(a, b) => {
            let (sa, sb) = (val(*a).shape(), val(*b).shape());
            let (bs, n, k, m) = (sa[0], sa[1], sa[2], sb[2]);
            let (da, db) = (val(*a).data(), val(*b).data());
            let mut ga = vec![0.0; bs * n * k];
            let mut gb = vec![0.0; bs * k * m];
            for t in 0..bs {
                let gt = &gd[t * n * m..(t + 1) * n * m];
                gemm(
                    n,
                    m,
                    k,
                    MatRef::new(gt, m),
                    MatRef::transposed(&db[t * k * m..(t + 1) * k * m], m),
                    0.0,
                    &mut ga[t * n * k..(t + 1) * n * k],
                );
                gemm(
                    k,
                    n,
                    m,
                    MatRef::transposed(&da[t * n * k..(t + 1) * n * k], k),
                    MatRef::new(gt, m),
                    0.0,
                    &mut gb[t * k * m..(t + 1) * k * m],
                );
            }
            vec![
                (*a, Tensor::from_parts(sa.to_vec(), ga)),
                (*b, Tensor::from_parts(sb.to_vec(), gb)),
            ]
        }
        Op::Sum(a) => vec![(*a, Tensor::full(val(*a).shape().to_vec(), gd[0]))],
        Op::Mean(a) => {
            let x = val(*a);
            vec![(*a, Tensor::full(x.shape().to_vec(), gd[0] / x.numel() as f64))]
        }
        Op::SumAxis { input, axis } => {
            let shape = val(*input).shape();
            let (outer, n, inner) = split_axis(shape, *axis);
            let mut gi = Vec::with_capacity(outer * n * inner);
            for o in 0..outer {
                for _ in 0..n {
                    gi.extend_from_slice(&gd[o * inner..(o + 1) * inner]);
                }
            }
            vec![(*input, Tensor::from_parts(shape.to_vec(), gi))]
        }
        Op::Square(a) => vec![(*a, like(g, zip(gd, val(*a).data(), |g, x| 2.0 * x * g)))],
        Op::Exp(a) => vec![(*a, like(g, zip(gd, out.data(), |g, y| g * y)))],
        Op::Log(a) => vec![(*a, like(g, zip(gd, val(*a).data(), |g, x| g / x)))],
        Op::Tanh(a) => vec![(*a, like(g, zip(gd, out.data(), |g, y| g * (1.0 - y * y))))],
        Op::Silu(a) => vec![(
            *a,
            like(
                g,
                zip(gd, val(*a).data(), |g, x| {
                    let s = sigmoid(x);
                    g * (s + x * s * (1.0 - s))
                }),
            ),
        )],
        Op::Relu(a) => vec![(
            *a,
            like(g, zip(gd, val(*a).data(), |g, x| if x > 0.0 { g } else { 0.0 })),
        )],
        Op::Custom { input, deriv } => vec![(*input, like(g, zip(gd, val(*input).data(), |g, x| g * deriv(x))))],
        Op::Concat { inputs, axis } => {
            let shape = out.shape();
            let (outer, total, inner) = split_axis(shape, *axis);
            let mut res = Vec::with_capacity(inputs.len());
            let mut offset = 0;
            for &v in inputs {
                let vs = val(v).shape();
                let n = vs[*axis];
                let mut gi = Vec::with_capacity(outer * n * inner);
                for o in 0..outer {
                    let base = (o * total + offset) * inner;
                    gi.extend_from_slice(&gd[base..base + n * inner]);
                }
                res.push((v, Tensor::from_parts(vs.to_vec(), gi)));
                offset += n;
            }
            res
        }
        Op::Slice { input, axis, start } => {
            let shape = val(*input).shape();
            let (outer, n, inner) = split_axis(shape, *axis);
            let len = out.shape()[*axis];
            let mut gi = vec![0.0; outer * n * inner];
            for o in 0..outer {
                let dst = (o * n + start) * inner;
                gi[dst..dst + len * inner].copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
            }
            vec![(*input, Tensor::from_parts(shape.to_vec(), gi))]
        }
        Op::Reshape(a) => vec![(*a, Tensor::from_parts(val(*a).shape().to_vec(), gd.to_vec()))],
        Op::Expand { input, axis } => {
            let shape = out.shape();
            let (outer, n, inner) = split_axis(shape, *axis);
            let mut gi = vec![0.0; outer * inner];
            for o in 0..outer {
                for j in 0..n {
                    let src = &gd[(o * n + j) * inner..(o * n + j + 1) * inner];
                    for (d, s) in gi[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
            vec![(*input, Tensor::from_parts(val(*input).shape().to_vec(), gi))]
        }
        Op::Transpose(a) => {
            let s = out.shape();
            let r = s.len();
            let gi = transpose_blocks(gd, s[r - 2], s[r - 1]);
            vec![(*a, Tensor::from_parts(val(*a).shape().to_vec(), gi))]
        }
        Op::LayerNorm { input, rstd } => {
            let n = *out.shape().last().unwrap_or(&1);
            let y = out.data();
            let mut gi = vec![0.0; y.len()];
            for (r, &s) in rstd.iter().enumerate() {
                let (yr, gr) = (&y[r * n..(r + 1) * n], &gd[r * n..(r + 1) * n]);
                let mg = gr.iter().sum::<f64>() / n as f64;
                let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                for j in 0..n {
                    gi[r * n + j] = s * (gr[j] - mg - yr[j] * mgy);
                }
            }
            vec![(*input, like(out, gi))]
        }
        Op::Softmax(a) => {
            let n = *out.shape().last().unwrap_or(&1);
            let y = out.data();
            let mut gi = vec![0.0; y.len()];
            for r in 0..y.len() / n {
                let (yr, gr) = (&y[r * n..(r + 1) * n], &gd[r * n..(r + 1) * n]);
                let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for j in 0..n {
                    gi[r * n + j] = yr[j] * (gr[j] - dot);
                }
            }
            vec![(*a, like(out, gi))]
        }
        Op::LogSoftmax(a) => {
            let n = *out.shape().last().unwrap_or(&1);
            let y = out.data();
            let mut gi = vec![0.0; y.len()];
            for r in 0..y.len() / n {
                let (yr, gr) = (&y[r * n..(r + 1) * n], &gd[r * n..(r + 1) * n]);
                let total: f64 = gr.iter().sum();
                for j in 0..n {
                    gi[r * n + j] = gr[j] - yr[j].exp() * total;
                }
            }
            vec![(*a, like(out, gi))]
        }
        Op::Conv3x3 { input, weight, cols } => {
            let si = val(*input).shape();
            let (b, h, w, c) = (si[0], si[1], si[2], si[3]);
            let o = val(*weight).shape()[1];
            let rows = b * h * w;
            let k = 9 * c;
            let mut gw = vec![0.0; k * o];
            gemm(
                k,
                rows,
                o,
                MatRef::transposed(cols, k),
                MatRef::new(gd, o),
                0.0,
                &mut gw,
            );
            let mut gcols = vec![0.0; rows * k];
            gemm(
                rows,
                o,
                k,
                MatRef::new(gd, o),
                MatRef::transposed(val(*weight).data(), o),
                0.0,
                &mut gcols,
            );
            let mut gi = vec![0.0; b * h * w * c];
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
                                let dst = ((n * h + sy as usize) * w + sx as usize) * c;
                                let src = row + (ky * 3 + kx) * c;
                                for ch in 0..c {
                                    gi[dst + ch] += gcols[src + ch];
                                }
                            }
                        }
                    }
                }
            }
            vec![
                (*input, Tensor::from_parts(si.to_vec(), gi)),
                (*weight, Tensor::from_parts(vec![k, o], gw)),
            ]
        }
    };
    Ok(res)
}
