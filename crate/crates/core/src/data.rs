//! Toy latent distributions with labels, and inpainting masks.

use std::f64::consts::PI;

use ladd_autodiff::Tensor;
use rand::Rng;

use crate::error::{invalid, Result};
use crate::flow::Conditioning;
use crate::rng::normal;

/// A toy data distribution standing in for latents.
#[derive(Clone, Debug, PartialEq)]
pub enum ToySpec {
    /// `N(0, c^2 I)` in `dim` dimensions.
    Gaussian { dim: usize, c: f64 },
    /// `modes` isotropic Gaussians on a circle; the label is the mode index,
    /// replaced by a uniformly random label with probability `label_noise`.
    Gmm2d {
        modes: usize,
        radius: f64,
        mode_std: f64,
        label_noise: f64,
    },
    /// Uniform density on the dark squares of a `cells x cells` board
    /// spanning `[-extent, extent]^2`.
    Checkerboard { cells: usize, extent: f64 },
    /// Oriented sinusoidal gratings on a `channels x height x width` grid;
    /// class `k` has orientation `k pi / classes`, with random phase and
    /// amplitude plus white noise of std `noise`.
    GridPattern {
        channels: usize,
        height: usize,
        width: usize,
        classes: usize,
        noise: f64,
    },
}

impl ToySpec {
    pub fn gmm2d(modes: usize, radius: f64, mode_std: f64) -> Self {
        ToySpec::Gmm2d {
            modes,
            radius,
            mode_std,
            label_noise: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |r: String| Err(invalid("data spec", r));
        match *self {
            ToySpec::Gaussian { dim, c } => {
                if dim == 0 || !(c.is_finite() && c > 0.0) {
                    return bad(format!("gaussian needs dim >= 1 and c > 0, got dim={dim} c={c}"));
                }
            }
            ToySpec::Gmm2d {
                modes,
                radius,
                mode_std,
                label_noise,
            } => {
                if modes == 0 {
                    return bad("gmm2d needs at least one mode".into());
                }
                if !(mode_std.is_finite() && mode_std > 0.0) || !radius.is_finite() {
                    return bad(format!("gmm2d needs mode_std > 0, got {mode_std}"));
                }
                if !(0.0..=1.0).contains(&label_noise) {
                    return bad(format!("label_noise {label_noise} outside [0, 1]"));
                }
            }
            ToySpec::Checkerboard { cells, extent } => {
                if cells == 0 || !(extent.is_finite() && extent > 0.0) {
                    return bad("checkerboard needs cells >= 1 and extent > 0".into());
                }
            }
            ToySpec::GridPattern {
                channels,
                height,
                width,
                classes,
                noise,
            } => {
                if channels == 0 || height == 0 || width == 0 || classes == 0 {
                    return bad("gridpattern extents and classes must be >= 1".into());
                }
                if !(noise.is_finite() && noise >= 0.0) {
                    return bad(format!("gridpattern noise {noise} must be >= 0"));
                }
            }
        }
        Ok(())
    }

    pub fn n_classes(&self) -> usize {
        match *self {
            ToySpec::Gmm2d { modes, .. } => modes,
            ToySpec::GridPattern { classes, .. } => classes,
            _ => 1,
        }
    }

    /// Per-sample data shape.
    pub fn data_shape(&self) -> Vec<usize> {
        match *self {
            ToySpec::Gaussian { dim, .. } => vec![dim],
            ToySpec::Gmm2d { .. } | ToySpec::Checkerboard { .. } => vec![2],
            ToySpec::GridPattern {
                channels,
                height,
                width,
                ..
            } => vec![channels, height, width],
        }
    }

    /// Mode centers of a `gmm2d` spec.
    pub fn mode_centers(&self) -> Result<Vec<[f64; 2]>> {
        match *self {
            ToySpec::Gmm2d { modes, radius, .. } => Ok((0..modes)
                .map(|k| {
                    let a = 2.0 * PI * k as f64 / modes as f64;
                    [radius * a.cos(), radius * a.sin()]
                })
                .collect()),
            _ => Err(invalid("data spec", "mode centers exist only for gmm2d")),
        }
    }

    /// Draws `n` i.i.d. labeled samples.
    pub fn sample_real<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<LatentBatch> {
        self.validate()?;
        if n == 0 {
            return Err(invalid("sample count", "n must be >= 1"));
        }
        let shape = self.data_shape();
        let per: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n * per);
        let mut cond = Vec::with_capacity(n);
        match *self {
            ToySpec::Gaussian { dim, c } => {
                data.extend((0..n * dim).map(|_| c * normal(rng)));
                cond.resize(n, 0);
            }
            ToySpec::Gmm2d {
                modes,
                mode_std,
                label_noise,
                ..
            } => {
                let centers = self.mode_centers()?;
                for _ in 0..n {
                    let k = rng.random_range(0..modes);
                    data.push(centers[k][0] + mode_std * normal(rng));
                    data.push(centers[k][1] + mode_std * normal(rng));
                    let flip = label_noise > 0.0 && rng.random::<f64>() < label_noise;
                    cond.push(if flip { rng.random_range(0..modes) } else { k });
                }
            }
            ToySpec::Checkerboard { cells, extent } => {
                let side = 2.0 * extent / cells as f64;
                let dark: Vec<(usize, usize)> = (0..cells)
                    .flat_map(|i| (0..cells).map(move |j| (i, j)))
                    .filter(|(i, j)| (i + j) % 2 == 0)
                    .collect();
                for _ in 0..n {
                    let (i, j) = dark[rng.random_range(0..dark.len())];
                    data.push(-extent + (j as f64 + rng.random::<f64>()) * side);
                    data.push(-extent + (i as f64 + rng.random::<f64>()) * side);
                    cond.push(0);
                }
            }
            ToySpec::GridPattern {
                channels,
                height,
                width,
                classes,
                noise,
            } => {
                let scale = height.max(width) as f64;
                for _ in 0..n {
                    let k = rng.random_range(0..classes);
                    let theta = PI * k as f64 / classes as f64;
                    let phase = rng.random::<f64>() * 2.0 * PI;
                    let amp = rng.random_range(0.7..1.3);
                    for ch in 0..channels {
                        for i in 0..height {
                            for j in 0..width {
                                let u = (i as f64 * theta.cos() + j as f64 * theta.sin()) / scale;
                                let v = amp * (2.0 * PI * u + phase + ch as f64 * PI / 2.0).sin();
                                data.push(v + noise * normal(rng));
                            }
                        }
                    }
                    cond.push(k);
                }
            }
        }
        let mut full = vec![n];
        full.extend(shape);
        LatentBatch::new(Tensor::new(full, data)?, cond)
    }
}

/// A batch of clean latents with labels and optional inpainting inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentBatch {
    pub x0: Tensor,
    pub cond: Vec<usize>,
    pub mask: Option<Tensor>,
    pub masked_input: Option<Tensor>,
}

impl LatentBatch {
    pub fn new(x0: Tensor, cond: Vec<usize>) -> Result<Self> {
        let n = x0.shape().first().copied().unwrap_or(0);
        if n != cond.len() {
            return Err(invalid("batch", format!("{n} samples with {} labels", cond.len())));
        }
        Ok(LatentBatch {
            x0,
            cond,
            mask: None,
            masked_input: None,
        })
    }

    pub fn len(&self) -> usize {
        self.cond.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cond.is_empty()
    }

    /// Rows by index, carrying masks along.
    pub fn select(&self, idx: &[usize]) -> Result<LatentBatch> {
        Ok(LatentBatch {
            x0: self.x0.select_rows(idx)?,
            cond: idx.iter().map(|&i| self.cond[i]).collect(),
            mask: self.mask.as_ref().map(|m| m.select_rows(idx)).transpose()?,
            masked_input: self.masked_input.as_ref().map(|m| m.select_rows(idx)).transpose()?,
        })
    }

    /// Network conditioning: labels plus, for inpainting batches, the image
    /// channels `[masked_input ++ mask]` concatenated on the channel axis.
    pub fn conditioning(&self) -> Result<Conditioning> {
        match (&self.masked_input, &self.mask) {
            (Some(mi), Some(m)) => Ok(Conditioning::with_image(self.cond.clone(), concat_channels(mi, m)?)),
            _ => Ok(Conditioning::labels(self.cond.clone())),
        }
    }
}

/// Concatenates two `[B, c, h, w]` tensors along the channel axis.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 4 || sb.len() != 4 || sa[0] != sb[0] || sa[2..] != sb[2..] {
        return Err(invalid("channels", format!("cannot concatenate {sa:?} and {sb:?}")));
    }
    let (n, plane) = (sa[0], sa[2] * sa[3]);
    let (ca, cb) = (sa[1] * plane, sb[1] * plane);
    let mut data = Vec::with_capacity(n * (ca + cb));
    for i in 0..n {
        data.extend_from_slice(&a.data()[i * ca..(i + 1) * ca]);
        data.extend_from_slice(&b.data()[i * cb..(i + 1) * cb]);
    }
    Ok(Tensor::new(vec![n, sa[1] + sb[1], sa[2], sa[3]], data)?)
}

/// Inpainting mask families. Fractions refer to the share of masked cells.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MaskKind {
    /// Random-walk brush strokes one cell wide.
    Stroke { lo: f64, hi: f64 },
    /// A round cutout, clipped at the grid border.
    Circle { lo: f64, hi: f64 },
    /// An axis-aligned rectangular cutout.
    Rect { lo: f64, hi: f64 },
    /// A visible ring `border` cells wide around a masked interior.
    Outpaint { border: usize },
    /// One of the four families with default ranges, chosen per mask.
    Mixed,
}

impl MaskKind {
    pub fn stroke() -> Self {
        MaskKind::Stroke { lo: 0.05, hi: 0.3 }
    }

    pub fn circle() -> Self {
        MaskKind::Circle { lo: 0.1, hi: 0.5 }
    }

    pub fn rect() -> Self {
        MaskKind::Rect { lo: 0.1, hi: 0.5 }
    }

    fn range(&self) -> Result<(f64, f64)> {
        let (lo, hi) = match *self {
            MaskKind::Stroke { lo, hi } | MaskKind::Circle { lo, hi } | MaskKind::Rect { lo, hi } => (lo, hi),
            _ => return Ok((0.0, 1.0)),
        };
        if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
            return Err(invalid(
                "mask",
                format!("fraction range [{lo}, {hi}] is not inside [0, 1]"),
            ));
        }
        Ok((lo, hi))
    }
}

/// Masked-cell counts allowed by a fraction range on `total` cells.
fn count_range(lo: f64, hi: f64, total: usize) -> Result<(usize, usize)> {
    let t = total as f64;
    let min = (lo * t - 1e-9).ceil().max(0.0) as usize;
    let max = ((hi * t + 1e-9).floor() as usize).min(total);
    if min > max {
        return Err(invalid(
            "mask",
            format!("no whole cell count of {total} has a masked fraction in [{lo}, {hi}]"),
        ));
    }
    Ok((min, max))
}

/// A `[1, h, w]` mask for per-sample data shape `[c, h, w]`; 1 = visible.
pub fn make_mask<R: Rng + ?Sized>(kind: MaskKind, shape: &[usize], rng: &mut R) -> Result<Tensor> {
    if shape.len() != 3 {
        return Err(invalid("mask", format!("masks need grid data, got shape {shape:?}")));
    }
    let (h, w) = (shape[1], shape[2]);
    let total = h * w;
    let mut masked = vec![false; total];
    match kind {
        MaskKind::Mixed => {
            let pick = match rng.random_range(0..4) {
                0 => MaskKind::stroke(),
                1 => MaskKind::circle(),
                2 => MaskKind::rect(),
                _ => MaskKind::Outpaint {
                    border: (h.min(w) / 4).max(1),
                },
            };
            return make_mask(pick, shape, rng);
        }
        MaskKind::Outpaint { border } => {
            if 2 * border >= h.min(w) {
                return Err(invalid(
                    "mask",
                    format!("border {border} leaves no interior on a {h}x{w} grid"),
                ));
            }
            for i in border..h - border {
                for j in border..w - border {
                    masked[i * w + j] = true;
                }
            }
        }
        MaskKind::Rect { .. } => {
            let (lo, hi) = kind.range()?;
            let (min, max) = count_range(lo, hi, total)?;
            let sizes: Vec<(usize, usize)> = (0..=h)
                .flat_map(|a| (0..=w).map(move |b| (a, b)))
                .filter(|&(a, b)| (min..=max).contains(&(a * b)))
                .collect();
            if sizes.is_empty() {
                return Err(invalid("mask", format!("no rectangle fits [{lo}, {hi}] on {h}x{w}")));
            }
            let (rh, rw) = sizes[rng.random_range(0..sizes.len())];
            if rh > 0 && rw > 0 {
                let y = rng.random_range(0..=h - rh);
                let x = rng.random_range(0..=w - rw);
                for i in y..y + rh {
                    for j in x..x + rw {
                        masked[i * w + j] = true;
                    }
                }
            }
        }
        MaskKind::Circle { .. } => {
            let (lo, hi) = kind.range()?;
            let (min, max) = count_range(lo, hi, total)?;
            let m = rng.random_range(min..=max);
            let cy = rng.random::<f64>() * h as f64;
            let cx = rng.random::<f64>() * w as f64;
            let mut cells: Vec<(f64, usize)> = (0..total)
                .map(|c| {
                    let (i, j) = ((c / w) as f64 + 0.5, (c % w) as f64 + 0.5);
                    ((i - cy).powi(2) + (j - cx).powi(2), c)
                })
                .collect();
            cells.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            for &(_, c) in cells.iter().take(m) {
                masked[c] = true;
            }
        }
        MaskKind::Stroke { .. } => {
            let (lo, hi) = kind.range()?;
            let (min, max) = count_range(lo, hi, total)?;
            let m = rng.random_range(min..=max);
            let (mut y, mut x) = (rng.random_range(0..h) as isize, rng.random_range(0..w) as isize);
            let dirs = [
                (0isize, 1isize),
                (1, 0),
                (0, -1),
                (-1, 0),
                (1, 1),
                (-1, -1),
                (1, -1),
                (-1, 1),
            ];
            let mut dir = dirs[rng.random_range(0..dirs.len())];
            let mut count = 0;
            while count < m {
                let c = y as usize * w + x as usize;
                if !masked[c] {
                    masked[c] = true;
                    count += 1;
                }
                if rng.random::<f64>() < 0.3 {
                    dir = dirs[rng.random_range(0..dirs.len())];
                }
                let (ny, nx) = (y + dir.0, x + dir.1);
                if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                    dir = dirs[rng.random_range(0..dirs.len())];
                } else {
                    (y, x) = (ny, nx);
                }
            }
        }
    }
    let data = masked.iter().map(|&m| if m { 0.0 } else { 1.0 }).collect();
    Ok(Tensor::new(vec![1, h, w], data)?)
}

/// Attaches one mask per sample and `masked_input = x0 * mask`.
pub fn build_inpaint_batch<R: Rng + ?Sized>(batch: LatentBatch, kind: MaskKind, rng: &mut R) -> Result<LatentBatch> {
    let shape = batch.x0.shape()[1..].to_vec();
    let masks = (0..batch.len())
        .map(|_| make_mask(kind, &shape, rng))
        .collect::<Result<Vec<_>>>()?;
    let mut stacked = Vec::with_capacity(masks.len() * shape[1] * shape[2]);
    for m in &masks {
        stacked.extend_from_slice(m.data());
    }
    let mask = Tensor::new(vec![batch.len(), 1, shape[1], shape[2]], stacked)?;
    apply_mask(batch, mask)
}

/// Attaches a given `[B, 1, h, w]` mask.
pub fn apply_mask(mut batch: LatentBatch, mask: Tensor) -> Result<LatentBatch> {
    let s = batch.x0.shape().to_vec();
    if s.len() != 4 || mask.shape() != [s[0], 1, s[2], s[3]] {
        return Err(invalid(
            "mask",
            format!("mask {:?} does not fit data {s:?}", mask.shape()),
        ));
    }
    if mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(invalid("mask", "values must be 0 or 1"));
    }
    let plane = s[2] * s[3];
    let mut mi = batch.x0.clone();
    for (idx, v) in mi.data_mut().iter_mut().enumerate() {
        let n = idx / (s[1] * plane);
        *v *= mask.data()[n * plane + idx % plane];
    }
    batch.masked_input = Some(mi);
    batch.mask = Some(mask);
    Ok(batch)
}
