use ladd_autodiff::{Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use super::params::{fourier_features, linear, normal_init, one_hot, Bound, ParamStore};
use crate::error::{invalid, Result};
use crate::flow::{Conditioning, VelocityModel};
use crate::rng::rng_for;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArchKind {
    VectorMlp,
    TokenTransformer,
}

/// Shape and size of a velocity network.
///
/// Vector MLPs take data of shape `[d]`; token transformers take `[c, h, w]`
/// grids and treat each cell as a token. `cond_channels` extra input
/// channels carry image conditioning (masked input and mask for inpainting).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserArch {
    pub kind: ArchKind,
    pub width: usize,
    pub depth: usize,
    pub data_shape: Vec<usize>,
    pub n_classes: usize,
    pub time_embed_dim: usize,
    #[serde(default)]
    pub cond_channels: usize,
}

impl DenoiserArch {
    pub fn vector(dim: usize, width: usize, depth: usize, n_classes: usize) -> Self {
        DenoiserArch {
            kind: ArchKind::VectorMlp,
            width,
            depth,
            data_shape: vec![dim],
            n_classes,
            time_embed_dim: 16,
            cond_channels: 0,
        }
    }

    pub fn tokens(shape: [usize; 3], width: usize, depth: usize, n_classes: usize) -> Self {
        DenoiserArch {
            kind: ArchKind::TokenTransformer,
            width,
            depth,
            data_shape: shape.to_vec(),
            n_classes,
            time_embed_dim: 16,
            cond_channels: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 1 {
            return Err(invalid("architecture", "depth must be >= 1"));
        }
        if self.width < 4 {
            return Err(invalid("architecture", format!("width {} < 4", self.width)));
        }
        if self.n_classes < 1 {
            return Err(invalid("architecture", "need at least one class"));
        }
        if self.time_embed_dim < 2 || !self.time_embed_dim.is_multiple_of(2) {
            return Err(invalid(
                "architecture",
                format!("time_embed_dim {} must be even and >= 2", self.time_embed_dim),
            ));
        }
        let ok = match self.kind {
            ArchKind::VectorMlp => self.data_shape.len() == 1,
            ArchKind::TokenTransformer => self.data_shape.len() == 3,
        };
        if !ok || self.data_shape.contains(&0) {
            return Err(invalid(
                "architecture",
                format!("data shape {:?} does not suit {:?}", self.data_shape, self.kind),
            ));
        }
        Ok(())
    }

    /// Index of the reserved null-condition embedding.
    pub fn null_class(&self) -> usize {
        self.n_classes
    }

    /// Spatial layout of the grid variant.
    pub fn grid(&self) -> Option<(usize, usize, usize)> {
        match self.kind {
            ArchKind::TokenTransformer => Some((self.data_shape[0], self.data_shape[1], self.data_shape[2])),
            ArchKind::VectorMlp => None,
        }
    }

    /// Closed-form parameter count.
    ///
    /// With width `w`, depth `L`, time features `T`, `K` classes and input
    /// channels `d_in = d + cond_channels`:
    ///
    /// * vector MLP: `T w + w + (K + 1) w + d_in w + w + L (3 w^2 + 2 w) + w d + d`
    /// * token transformer on `c x h x w` (`N = h w` tokens):
    ///   `T w + w + (K + 1) w + (c + e) w + w + N w + L (7 w^2 + 2 w) + w c + c`
    pub fn param_count(&self) -> usize {
        let w = self.width;
        let t = self.time_embed_dim;
        let k = self.n_classes;
        let l = self.depth;
        match self.kind {
            ArchKind::VectorMlp => {
                let d = self.data_shape[0];
                let d_in = d + self.cond_channels;
                t * w + w + (k + 1) * w + d_in * w + w + l * (3 * w * w + 2 * w) + w * d + d
            }
            ArchKind::TokenTransformer => {
                let (c, h, gw) = (self.data_shape[0], self.data_shape[1], self.data_shape[2]);
                let n = h * gw;
                let c_in = c + self.cond_channels;
                t * w + w + (k + 1) * w + c_in * w + w + n * w + l * (7 * w * w + 2 * w) + w * c + c
            }
        }
    }
}

/// Where feature taps live in space.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureLayout {
    /// One `[B, w]` vector per sample.
    Vector,
    /// Token sequences `[B, h * w, width]` in row-major cell order.
    Grid { h: usize, w: usize },
}

/// Per-block activations of one forward pass.
#[derive(Clone, Debug)]
pub struct FeatureStack {
    pub feats: Vec<Var>,
    pub layout: FeatureLayout,
}

impl FeatureStack {
    pub fn len(&self) -> usize {
        self.feats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.feats.is_empty()
    }

    pub fn values(&self, tape: &Tape) -> Vec<Tensor> {
        self.feats.iter().map(|&v| tape.value(v).clone()).collect()
    }
}

/// Token sequence `[B, h w, c]` viewed as an NHWC grid `[B, h, w, c]`.
pub fn tokens_to_spatial(tape: &mut Tape, x: Var, h: usize, w: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 3 || s[1] != h * w {
        return Err(invalid("tokens", format!("shape {s:?} is not a {h}x{w} token grid")));
    }
    Ok(tape.reshape(x, &[s[0], h, w, s[2]])?)
}

pub fn spatial_to_tokens(tape: &mut Tape, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 4 {
        return Err(invalid("tokens", format!("shape {s:?} is not NHWC")));
    }
    Ok(tape.reshape(x, &[s[0], s[1] * s[2], s[3]])?)
}

/// Weights of a velocity network `F_theta`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserParams {
    pub arch: DenoiserArch,
    pub params: ParamStore,
    pub frozen: bool,
}

impl DenoiserParams {
    pub fn init(arch: &DenoiserArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = rng_for(seed, "denoiser-init");
        let (w, t, k) = (arch.width, arch.time_embed_dim, arch.n_classes);
        let fan = |n: usize| 1.0 / (n as f64).sqrt();
        let mut p = ParamStore::new();
        p.push("time.w", normal_init(vec![t, w], fan(t), &mut rng));
        p.push("time.b", Tensor::zeros(vec![1, w]));
        p.push("class.embed", normal_init(vec![k + 1, w], 1.0, &mut rng));
        let (d_in, d_out) = match arch.kind {
            ArchKind::VectorMlp => (arch.data_shape[0] + arch.cond_channels, arch.data_shape[0]),
            ArchKind::TokenTransformer => (arch.data_shape[0] + arch.cond_channels, arch.data_shape[0]),
        };
        p.push("in.w", normal_init(vec![d_in, w], fan(d_in), &mut rng));
        p.push("in.b", Tensor::zeros(vec![1, w]));
        if let Some((_, h, gw)) = arch.grid() {
            p.push("pos", normal_init(vec![h * gw, w], 0.5, &mut rng));
        }
        for i in 0..arch.depth {
            if arch.kind == ArchKind::TokenTransformer {
                for name in ["q", "k", "v", "o"] {
                    p.push(
                        format!("block{i}.attn.{name}"),
                        normal_init(vec![w, w], fan(w), &mut rng),
                    );
                }
            }
            p.push(format!("block{i}.w1"), normal_init(vec![w, w], fan(w), &mut rng));
            p.push(format!("block{i}.b1"), Tensor::zeros(vec![1, w]));
            p.push(format!("block{i}.wc"), normal_init(vec![w, w], fan(w), &mut rng));
            p.push(format!("block{i}.w2"), normal_init(vec![w, w], fan(w), &mut rng));
            p.push(format!("block{i}.b2"), Tensor::zeros(vec![1, w]));
        }
        p.push("out.w", normal_init(vec![w, d_out], fan(w), &mut rng));
        p.push("out.b", Tensor::zeros(vec![1, d_out]));
        Ok(DenoiserParams {
            arch: arch.clone(),
            params: p,
            frozen: false,
        })
    }

    /// Labels after validation, with the null index when `drop_cond` is set.
    pub fn resolve_labels(&self, cond: &Conditioning, drop_cond: bool) -> Result<Vec<usize>> {
        if let Some(&bad) = cond.labels.iter().find(|&&l| l >= self.arch.n_classes) {
            return Err(invalid(
                "condition",
                format!("label {bad} out of range for {} classes", self.arch.n_classes),
            ));
        }
        Ok(if drop_cond {
            vec![self.arch.null_class(); cond.labels.len()]
        } else {
            cond.labels.clone()
        })
    }

    /// Forward pass with the weights recorded on `tape` (trainable unless frozen).
    pub fn forward(
        &self,
        tape: &mut Tape,
        x_t: Var,
        t: &[f64],
        cond: &Conditioning,
        drop_cond: bool,
    ) -> Result<(Var, FeatureStack)> {
        let labels = self.resolve_labels(cond, drop_cond)?;
        let image = cond.image.as_ref().map(|img| tape.constant(img.clone()));
        let bound = self.params.bind(tape, !self.frozen);
        self.forward_bound(tape, &bound, x_t, t, &labels, image)
    }

    /// Forward pass with externally bound weights. `labels` may contain the
    /// null index.
    pub fn forward_bound(
        &self,
        tape: &mut Tape,
        p: &Bound,
        x_t: Var,
        t: &[f64],
        labels: &[usize],
        image: Option<Var>,
    ) -> Result<(Var, FeatureStack)> {
        let arch = &self.arch;
        let xs = tape.shape(x_t).to_vec();
        if xs.len() != arch.data_shape.len() + 1 || xs[1..] != arch.data_shape[..] {
            return Err(invalid(
                "denoiser input",
                format!("shape {xs:?} does not match data shape {:?}", arch.data_shape),
            ));
        }
        let b = xs[0];
        if t.len() != b || labels.len() != b {
            return Err(invalid(
                "denoiser input",
                format!("batch {b} with {} times and {} labels", t.len(), labels.len()),
            ));
        }
        if let Some(&bad) = t.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(invalid("denoiser input", format!("time {bad} outside [0, 1]")));
        }
        if labels.iter().any(|&l| l > arch.null_class()) {
            return Err(invalid("condition", "label out of range"));
        }
        match (arch.cond_channels, image) {
            (0, None) => {}
            (0, Some(_)) => return Err(invalid("condition", "architecture takes no image conditioning")),
            (_, None) => return Err(invalid("condition", "architecture needs image conditioning")),
            (e, Some(img)) => {
                let mut want = xs.clone();
                want[1] = e;
                if tape.shape(img) != want.as_slice() {
                    return Err(invalid(
                        "condition",
                        format!("image shape {:?} expected {want:?}", tape.shape(img)),
                    ));
                }
            }
        }

        let feats = tape.constant(fourier_features(t, arch.time_embed_dim));
        let temb = linear(tape, feats, p.get("time.w")?, Some(p.get("time.b")?))?;
        let temb = tape.silu(temb)?;
        let onehot = tape.constant(one_hot(labels, arch.n_classes + 1));
        let cemb = tape.matmul(onehot, p.get("class.embed")?)?;
        let cvec = tape.add(temb, cemb)?;
        match arch.kind {
            ArchKind::VectorMlp => self.vector_body(tape, p, x_t, image, cvec),
            ArchKind::TokenTransformer => self.token_body(tape, p, x_t, image, cvec),
        }
    }

    fn vector_body(
        &self,
        tape: &mut Tape,
        p: &Bound,
        x: Var,
        image: Option<Var>,
        cvec: Var,
    ) -> Result<(Var, FeatureStack)> {
        let input = match image {
            Some(img) => tape.concat(&[x, img], 1)?,
            None => x,
        };
        let h0 = linear(tape, input, p.get("in.w")?, Some(p.get("in.b")?))?;
        let mut h = tape.add(h0, cvec)?;
        let mut taps = Vec::with_capacity(self.arch.depth);
        for i in 0..self.arch.depth {
            let u = tape.layer_norm(h)?;
            let u = linear(
                tape,
                u,
                p.get(&format!("block{i}.w1"))?,
                Some(p.get(&format!("block{i}.b1"))?),
            )?;
            let c = tape.matmul(cvec, p.get(&format!("block{i}.wc"))?)?;
            let u = tape.add(u, c)?;
            let u = tape.silu(u)?;
            let u = linear(
                tape,
                u,
                p.get(&format!("block{i}.w2"))?,
                Some(p.get(&format!("block{i}.b2"))?),
            )?;
            h = tape.add(h, u)?;
            taps.push(h);
        }
        let out = tape.layer_norm(h)?;
        let f = linear(tape, out, p.get("out.w")?, Some(p.get("out.b")?))?;
        Ok((
            f,
            FeatureStack {
                feats: taps,
                layout: FeatureLayout::Vector,
            },
        ))
    }

    fn token_body(
        &self,
        tape: &mut Tape,
        p: &Bound,
        x: Var,
        image: Option<Var>,
        cvec: Var,
    ) -> Result<(Var, FeatureStack)> {
        let (c, gh, gw) = self.arch.grid().expect("token arch has a grid");
        let (w, n) = (self.arch.width, gh * gw);
        let b = tape.shape(x)[0];
        let input = match image {
            Some(img) => tape.concat(&[x, img], 1)?,
            None => x,
        };
        let c_in = tape.shape(input)[1];
        let seq = tape.reshape(input, &[b, c_in, n])?;
        let seq = tape.transpose(seq)?;
        let seq = tape.reshape(seq, &[b * n, c_in])?;
        let h0 = linear(tape, seq, p.get("in.w")?, Some(p.get("in.b")?))?;
        let h0 = tape.reshape(h0, &[b, n, w])?;
        let pos = tape.reshape(p.get("pos")?, &[1, n, w])?;
        let pos = tape.expand(pos, 0, b)?;
        let h0 = tape.add(h0, pos)?;
        let ctok = tape.reshape(cvec, &[b, 1, w])?;
        let ctok = tape.expand(ctok, 1, n)?;
        let mut h = tape.add(h0, ctok)?;
        let scale = 1.0 / (w as f64).sqrt();
        let mut taps = Vec::with_capacity(self.arch.depth);
        for i in 0..self.arch.depth {
            let u = tape.layer_norm(h)?;
            let u = tape.reshape(u, &[b * n, w])?;
            let mut qkv = Vec::with_capacity(3);
            for name in ["q", "k", "v"] {
                let y = tape.matmul(u, p.get(&format!("block{i}.attn.{name}"))?)?;
                qkv.push(tape.reshape(y, &[b, n, w])?);
            }
            let kt = tape.transpose(qkv[1])?;
            let scores = tape.batch_matmul(qkv[0], kt)?;
            let scores = tape.scale(scores, scale)?;
            let att = tape.softmax(scores)?;
            let a = tape.batch_matmul(att, qkv[2])?;
            let a = tape.reshape(a, &[b * n, w])?;
            let a = tape.matmul(a, p.get(&format!("block{i}.attn.o"))?)?;
            let a = tape.reshape(a, &[b, n, w])?;
            h = tape.add(h, a)?;

            let u = tape.layer_norm(h)?;
            let u = tape.reshape(u, &[b * n, w])?;
            let u = linear(
                tape,
                u,
                p.get(&format!("block{i}.w1"))?,
                Some(p.get(&format!("block{i}.b1"))?),
            )?;
            let cc = tape.matmul(cvec, p.get(&format!("block{i}.wc"))?)?;
            let cc = tape.reshape(cc, &[b, 1, w])?;
            let cc = tape.expand(cc, 1, n)?;
            let cc = tape.reshape(cc, &[b * n, w])?;
            let u = tape.add(u, cc)?;
            let u = tape.silu(u)?;
            let u = linear(
                tape,
                u,
                p.get(&format!("block{i}.w2"))?,
                Some(p.get(&format!("block{i}.b2"))?),
            )?;
            let u = tape.reshape(u, &[b, n, w])?;
            h = tape.add(h, u)?;
            taps.push(h);
        }
        let out = tape.layer_norm(h)?;
        let out = tape.reshape(out, &[b * n, w])?;
        let f = linear(tape, out, p.get("out.w")?, Some(p.get("out.b")?))?;
        let f = tape.reshape(f, &[b, n, c])?;
        let f = tape.transpose(f)?;
        let f = tape.reshape(f, &[b, c, gh, gw])?;
        Ok((
            f,
            FeatureStack {
                feats: taps,
                layout: FeatureLayout::Grid { h: gh, w: gw },
            },
        ))
    }
}

impl VelocityModel for DenoiserParams {
    fn velocity(&self, x_t: &Tensor, t: f64, cond: &Conditioning, drop_cond: bool) -> Result<Tensor> {
        let mut tape = Tape::new();
        let labels = self.resolve_labels(cond, drop_cond)?;
        let image = cond.image.as_ref().map(|img| tape.constant(img.clone()));
        let bound = self.params.bind(&mut tape, false);
        let x = tape.constant(x_t.clone());
        let ts = vec![t; x_t.shape().first().copied().unwrap_or(0)];
        let (f, _) = self.forward_bound(&mut tape, &bound, x, &ts, &labels, image)?;
        Ok(tape.value(f).clone())
    }

    fn sample_shape(&self) -> Vec<usize> {
        self.arch.data_shape.clone()
    }
}
