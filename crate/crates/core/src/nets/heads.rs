use ladd_autodiff::{Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use super::denoiser::{tokens_to_spatial, DenoiserArch, FeatureLayout, FeatureStack};
use super::params::{add_bias, fourier_features, linear, normal_init, one_hot, Bound, ParamStore};
use crate::error::{invalid, Result};
use crate::rng::rng_for;

/// Width settings shared by every head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    pub hidden: usize,
    pub class_dim: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            hidden: 32,
            class_dim: 16,
        }
    }
}

/// Independent discriminator heads, one per teacher feature tap.
///
/// Each head applies two silu layers (dense for vector taps, 3x3 convolutions
/// for grid taps) and a linear per-location logit. Conditioning enters by
/// projection: the inner product of the pooled head features with a
/// per-head projection of `fourier(t_hat) ++ class_embedding`. The logit
/// layer and the projection start at zero.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscHeadSet {
    pub feature_width: usize,
    pub count: usize,
    pub layout: FeatureLayout,
    pub time_embed_dim: usize,
    pub n_classes: usize,
    pub config: HeadConfig,
    pub params: ParamStore,
}

impl DiscHeadSet {
    pub fn init(teacher: &DenoiserArch, config: &HeadConfig, seed: u64) -> Result<Self> {
        teacher.validate()?;
        if config.hidden < 1 || config.class_dim < 1 {
            return Err(invalid("heads", "hidden and class_dim must be >= 1"));
        }
        let layout = match teacher.grid() {
            Some((_, h, w)) => FeatureLayout::Grid { h, w },
            None => FeatureLayout::Vector,
        };
        let mut rng = rng_for(seed, "head-init");
        let (w, hd) = (teacher.width, config.hidden);
        let mut p = ParamStore::new();
        p.push(
            "class.embed",
            normal_init(vec![teacher.n_classes, config.class_dim], 1.0, &mut rng),
        );
        let kernel = match layout {
            FeatureLayout::Vector => 1,
            FeatureLayout::Grid { .. } => 9,
        };
        for k in 0..teacher.depth {
            let fan1 = (kernel * w) as f64;
            let fan2 = (kernel * hd) as f64;
            p.push(
                format!("head{k}.w1"),
                normal_init(vec![kernel * w, hd], 1.0 / fan1.sqrt(), &mut rng),
            );
            p.push(format!("head{k}.b1"), Tensor::zeros(vec![1, hd]));
            p.push(
                format!("head{k}.w2"),
                normal_init(vec![kernel * hd, hd], 1.0 / fan2.sqrt(), &mut rng),
            );
            p.push(format!("head{k}.b2"), Tensor::zeros(vec![1, hd]));
            p.push(format!("head{k}.out.w"), Tensor::zeros(vec![hd, 1]));
            p.push(format!("head{k}.out.b"), Tensor::zeros(vec![1, 1]));
            p.push(
                format!("head{k}.proj"),
                Tensor::zeros(vec![teacher.time_embed_dim + config.class_dim, hd]),
            );
        }
        Ok(DiscHeadSet {
            feature_width: w,
            count: teacher.depth,
            layout,
            time_embed_dim: teacher.time_embed_dim,
            n_classes: teacher.n_classes,
            config: config.clone(),
            params: p,
        })
    }

    /// Logits per head: `[B, 1]` for vector taps, `[B, h w]` for grid taps.
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        feats: &FeatureStack,
        t_hat: &[f64],
        labels: &[usize],
    ) -> Result<Vec<Var>> {
        if feats.len() != self.count {
            return Err(invalid(
                "heads",
                format!("{} feature taps for {} heads", feats.len(), self.count),
            ));
        }
        if feats.layout != self.layout {
            return Err(invalid("heads", "feature layout does not match the heads"));
        }
        let b = labels.len();
        if t_hat.len() != b {
            return Err(invalid("heads", format!("{} noise levels for batch {b}", t_hat.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= self.n_classes) {
            return Err(invalid("heads", format!("label {bad} out of range")));
        }
        let temb = fourier_features(t_hat, self.time_embed_dim);
        let temb = tape.constant(temb);
        let onehot = tape.constant(one_hot(labels, self.n_classes));
        let cemb = tape.matmul(onehot, p.get("class.embed")?)?;
        let embed = tape.concat(&[temb, cemb], 1)?;

        let mut logits = Vec::with_capacity(self.count);
        for (k, &f) in feats.feats.iter().enumerate() {
            let name = |s: &str| format!("head{k}.{s}");
            let (phi, pooled, locs) = match self.layout {
                FeatureLayout::Vector => {
                    let shape = tape.shape(f).to_vec();
                    if shape != [b, self.feature_width] {
                        return Err(invalid("heads", format!("tap {k} has shape {shape:?}")));
                    }
                    let u = linear(tape, f, p.get(&name("w1"))?, Some(p.get(&name("b1"))?))?;
                    let u = tape.silu(u)?;
                    let u = linear(tape, u, p.get(&name("w2"))?, Some(p.get(&name("b2"))?))?;
                    let phi = tape.silu(u)?;
                    (phi, phi, 1)
                }
                FeatureLayout::Grid { h, w } => {
                    let shape = tape.shape(f).to_vec();
                    if shape != [b, h * w, self.feature_width] {
                        return Err(invalid("heads", format!("tap {k} has shape {shape:?}")));
                    }
                    let hd = self.config.hidden;
                    let x = tokens_to_spatial(tape, f, h, w)?;
                    let u = tape.conv3x3(x, p.get(&name("w1"))?)?;
                    let u = tape.reshape(u, &[b * h * w, hd])?;
                    let u = add_bias(tape, u, p.get(&name("b1"))?)?;
                    let u = tape.silu(u)?;
                    let u = tape.reshape(u, &[b, h, w, hd])?;
                    let u = tape.conv3x3(u, p.get(&name("w2"))?)?;
                    let u = tape.reshape(u, &[b * h * w, hd])?;
                    let u = add_bias(tape, u, p.get(&name("b2"))?)?;
                    let phi = tape.silu(u)?;
                    let grouped = tape.reshape(phi, &[b, h * w, hd])?;
                    let pooled = tape.mean_axis(grouped, 1)?;
                    (phi, pooled, h * w)
                }
            };
            let loc = linear(tape, phi, p.get(&name("out.w"))?, Some(p.get(&name("out.b"))?))?;
            let loc = tape.reshape(loc, &[b, locs])?;
            let pe = tape.matmul(embed, p.get(&name("proj"))?)?;
            let inner = tape.mul(pooled, pe)?;
            let inner = tape.sum_axis(inner, 1)?;
            let inner = tape.reshape(inner, &[b, 1])?;
            let inner = if locs > 1 { tape.expand(inner, 1, locs)? } else { inner };
            logits.push(tape.add(loc, inner)?);
        }
        Ok(logits)
    }
}
