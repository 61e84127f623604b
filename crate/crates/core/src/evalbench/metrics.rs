use ladd_autodiff::Tensor;
use rand::Rng;

use crate::data::ToySpec;
use crate::error::{invalid, Result};
use crate::rng::normal;

fn as_rows(x: &Tensor) -> Result<(usize, usize)> {
    let s = x.shape();
    if s.is_empty() {
        return Err(invalid("sample set", "scalar is not a sample set"));
    }
    Ok((s[0], x.numel() / s[0]))
}

fn check_pair(a: &Tensor, b: &Tensor) -> Result<usize> {
    let (_, da) = as_rows(a)?;
    let (_, db) = as_rows(b)?;
    if da != db {
        return Err(invalid("sample set", format!("dimension {da} vs {db}")));
    }
    Ok(da)
}

/// Squared 1-D Wasserstein-2 distance between two sorted empirical samples,
/// integrating the squared gap of their quantile functions exactly.
fn w2_sorted(a: &[f64], b: &[f64]) -> f64 {
    let (n, m) = (a.len(), b.len());
    if n == m {
        return a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / n as f64;
    }
    let (mut i, mut j) = (0, 0);
    let mut pos = 0.0;
    let mut total = 0.0;
    while i < n && j < m {
        let next_a = (i + 1) as f64 / n as f64;
        let next_b = (j + 1) as f64 / m as f64;
        let next = next_a.min(next_b);
        total += (next - pos) * (a[i] - b[j]).powi(2);
        pos = next;
        if next_a <= next {
            i += 1;
        }
        if next_b <= next {
            j += 1;
        }
    }
    total
}

/// Square root of the mean, over `n_proj` random unit directions, of the
/// squared 1-D Wasserstein-2 distance between the projected sets.
pub fn sliced_w2<R: Rng + ?Sized>(a: &Tensor, b: &Tensor, n_proj: usize, rng: &mut R) -> Result<f64> {
    let d = check_pair(a, b)?;
    if n_proj == 0 {
        return Err(invalid("sliced_w2", "n_proj must be >= 1"));
    }
    let (na, nb) = (a.shape()[0], b.shape()[0]);
    let mut pa = vec![0.0; na];
    let mut pb = vec![0.0; nb];
    let mut acc = 0.0;
    for _ in 0..n_proj {
        let mut dir: Vec<f64> = (0..d).map(|_| normal(rng)).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            dir[0] = 1.0;
        } else {
            dir.iter_mut().for_each(|v| *v /= norm);
        }
        project(a.data(), &dir, &mut pa);
        project(b.data(), &dir, &mut pb);
        pa.sort_by(f64::total_cmp);
        pb.sort_by(f64::total_cmp);
        acc += w2_sorted(&pa, &pb);
    }
    Ok((acc / n_proj as f64).sqrt())
}

fn project(x: &[f64], dir: &[f64], out: &mut [f64]) {
    let d = dir.len();
    for (o, row) in out.iter_mut().zip(x.chunks(d)) {
        *o = row.iter().zip(dir).map(|(a, b)| a * b).sum();
    }
}

fn mean_kernel(a: &Tensor, b: &Tensor, d: usize, inv: f64) -> f64 {
    let mut total = 0.0;
    for x in a.data().chunks(d) {
        for y in b.data().chunks(d) {
            let sq: f64 = x.iter().zip(y).map(|(p, q)| (p - q).powi(2)).sum();
            total += (-sq * inv).exp();
        }
    }
    total / (a.shape()[0] * b.shape()[0]) as f64
}

/// Biased (V-statistic) squared MMD with kernel `exp(-|x - y|^2 / (2 h^2))`.
pub fn mmd_rbf(a: &Tensor, b: &Tensor, bandwidth: f64) -> Result<f64> {
    let d = check_pair(a, b)?;
    if !(bandwidth.is_finite() && bandwidth > 0.0) {
        return Err(invalid("mmd", format!("bandwidth {bandwidth} must be > 0")));
    }
    let inv = 1.0 / (2.0 * bandwidth * bandwidth);
    let v = mean_kernel(a, a, d, inv) + mean_kernel(b, b, d, inv) - 2.0 * mean_kernel(a, b, d, inv);
    Ok(v.max(0.0))
}

/// Median pairwise Euclidean distance over the first 1000 rows.
pub fn median_bandwidth(x: &Tensor) -> Result<f64> {
    let (n, d) = as_rows(x)?;
    let n = n.min(1000);
    if n < 2 {
        return Err(invalid("bandwidth", "need at least two samples"));
    }
    let rows: Vec<&[f64]> = x.data().chunks(d).take(n).collect();
    let mut dists = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            dists.push(
                rows[i]
                    .iter()
                    .zip(rows[j])
                    .map(|(p, q)| (p - q).powi(2))
                    .sum::<f64>()
                    .sqrt(),
            );
        }
    }
    dists.sort_by(f64::total_cmp);
    let mid = dists.len() / 2;
    let med = if dists.len() % 2 == 0 {
        0.5 * (dists[mid - 1] + dists[mid])
    } else {
        dists[mid]
    };
    if med > 0.0 {
        Ok(med)
    } else {
        Err(invalid("bandwidth", "all samples coincide"))
    }
}

/// Number of gmm2d modes with at least 2% of samples within 3 mode-std.
pub fn modes_covered(samples: &Tensor, spec: &ToySpec) -> Result<usize> {
    let ToySpec::Gmm2d { mode_std, .. } = *spec else {
        return Err(invalid("modes_covered", "spec is not gmm2d"));
    };
    let centers = spec.mode_centers()?;
    let (n, d) = as_rows(samples)?;
    if d != 2 {
        return Err(invalid("modes_covered", format!("samples have dimension {d}")));
    }
    let r2 = (3.0 * mode_std).powi(2);
    let covered = centers
        .iter()
        .filter(|c| {
            let hits = samples
                .data()
                .chunks(2)
                .filter(|p| (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2) <= r2)
                .count();
            hits * 50 >= n
        })
        .count();
    Ok(covered)
}

/// Mean squared error over cells where `mask` is 1.
pub fn visible_mse(pred: &Tensor, x0: &Tensor, mask: &Tensor) -> Result<f64> {
    region_mse(pred, x0, mask, 1.0)
}

pub(crate) fn region_mse(pred: &Tensor, x0: &Tensor, mask: &Tensor, keep: f64) -> Result<f64> {
    let s = x0.shape();
    if pred.shape() != s || s.len() != 4 || mask.shape() != [s[0], 1, s[2], s[3]] {
        return Err(invalid("region mse", "shapes do not line up"));
    }
    let plane = s[2] * s[3];
    let (mut total, mut count) = (0.0, 0usize);
    for (idx, (p, x)) in pred.data().iter().zip(x0.data()).enumerate() {
        let n = idx / (s[1] * plane);
        if mask.data()[n * plane + idx % plane] == keep {
            total += (p - x).powi(2);
            count += 1;
        }
    }
    if count == 0 {
        return Err(invalid("region mse", "empty region"));
    }
    Ok(total / count as f64)
}

/// Values at masked cells, one row per sample: `[B, c * masked cells]`.
/// All samples must share the same mask.
pub fn masked_region(x: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 4 || mask.shape() != [s[0], 1, s[2], s[3]] {
        return Err(invalid("masked region", "shapes do not line up"));
    }
    let plane = s[2] * s[3];
    let first = &mask.data()[..plane];
    if mask.data().chunks(plane).any(|m| m != first) {
        return Err(invalid("masked region", "samples use different masks"));
    }
    let cells: Vec<usize> = (0..plane).filter(|&c| first[c] == 0.0).collect();
    if cells.is_empty() {
        return Err(invalid("masked region", "mask hides nothing"));
    }
    let mut data = Vec::with_capacity(s[0] * s[1] * cells.len());
    for n in 0..s[0] {
        for c in 0..s[1] {
            let base = (n * s[1] + c) * plane;
            data.extend(cells.iter().map(|&cell| x.data()[base + cell]));
        }
    }
    Ok(Tensor::new(vec![s[0], s[1] * cells.len()], data)?)
}
