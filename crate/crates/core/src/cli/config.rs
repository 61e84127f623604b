//! TOML run configuration: one section per component, documented defaults,
//! unknown keys rejected, `key=value` overrides applied after parsing.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{MaskKind, ToySpec};
use crate::distill::{DataSource, DistillConfig, WarmupSchedule};
use crate::error::{LaddError, Result};
use crate::evalbench::{digest, AxisValue, ExperimentSetup, SweepAxis, SweepSpec};
use crate::flow::{DiscreteTimeGrid, LogitNormal};
use crate::nets::{ArchKind, DenoiserArch, HeadConfig};
use crate::teacher::TeacherTrainConfig;

fn config_err(msg: impl Into<String>) -> LaddError {
    LaddError::Config(msg.into())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
#[derive(Default)]
pub struct RunConfig {
    pub run: RunSection,
    pub data: DataSection,
    pub model: ModelSection,
    pub teacher: TeacherSection,
    pub synthetic: SyntheticSection,
    pub distill: DistillSection,
    pub inpaint: InpaintSection,
    pub eval: EvalSection,
    pub sweep: SweepSection,
}

/// Paths and bookkeeping.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub seed: u64,
    /// Parent of all run directories.
    pub out_dir: String,
    /// Teacher weights (from `train-teacher`).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub teacher: Option<String>,
    /// Synthetic dataset (from `generate-synthetic`).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset: Option<String>,
    /// Student weights for `sample` and `eval`; initial weights for `distill`
    /// (the teacher when unset).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub student: Option<String>,
    /// Training-state checkpoint to resume from.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub resume: Option<String>,
    /// Write a training-state checkpoint every this many iterations (0: only at the end).
    pub checkpoint_every: u64,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            seed: 0,
            out_dir: "runs".into(),
            teacher: None,
            dataset: None,
            student: None,
            resume: None,
            checkpoint_every: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataKind {
    Gaussian,
    Gmm2d,
    Checkerboard,
    GridPattern,
}

/// The toy distribution; only the keys of the chosen `kind` matter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub kind: DataKind,
    pub dim: usize,
    pub c: f64,
    pub modes: usize,
    pub radius: f64,
    pub mode_std: f64,
    pub label_noise: f64,
    pub cells: usize,
    pub extent: f64,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub noise: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            kind: DataKind::Gmm2d,
            dim: 2,
            c: 1.0,
            modes: 8,
            radius: 4.0,
            mode_std: 0.1,
            label_noise: 0.0,
            cells: 4,
            extent: 2.0,
            channels: 1,
            height: 8,
            width: 8,
            classes: 4,
            noise: 0.05,
        }
    }
}

impl DataSection {
    pub fn spec(&self) -> ToySpec {
        match self.kind {
            DataKind::Gaussian => ToySpec::Gaussian {
                dim: self.dim,
                c: self.c,
            },
            DataKind::Gmm2d => ToySpec::Gmm2d {
                modes: self.modes,
                radius: self.radius,
                mode_std: self.mode_std,
                label_noise: self.label_noise,
            },
            DataKind::Checkerboard => ToySpec::Checkerboard {
                cells: self.cells,
                extent: self.extent,
            },
            DataKind::GridPattern => ToySpec::GridPattern {
                channels: self.channels,
                height: self.height,
                width: self.width,
                classes: self.classes,
                noise: self.noise,
            },
        }
    }
}

/// Denoiser architecture shared by teacher and student.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub kind: ArchKind,
    pub width: usize,
    pub depth: usize,
    pub time_embed_dim: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            kind: ArchKind::VectorMlp,
            width: 64,
            depth: 3,
            time_embed_dim: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherSection {
    pub iters: u64,
    pub batch: usize,
    pub lr: f64,
    pub cond_dropout_prob: f64,
    /// Logit-normal training-time distribution.
    pub time_m: f64,
    pub time_s: f64,
}

impl Default for TeacherSection {
    fn default() -> Self {
        TeacherSection {
            iters: 5000,
            batch: 256,
            lr: 1e-3,
            cond_dropout_prob: 0.1,
            time_m: 0.0,
            time_s: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSection {
    pub n_samples: usize,
    /// Constant guidance weight of the generating teacher.
    pub cfg_w: f64,
    pub n_steps: usize,
}

impl Default for SyntheticSection {
    fn default() -> Self {
        SyntheticSection {
            n_samples: 50_000,
            cfg_w: 2.0,
            n_steps: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillSection {
    pub times: Vec<f64>,
    pub probs_before: Vec<f64>,
    pub probs_after: Vec<f64>,
    pub switch_iter: u64,
    pub t_hat_m: f64,
    pub t_hat_s: f64,
    pub lambda_adv: f64,
    pub lambda_distill: f64,
    pub r1_gamma: f64,
    pub d_steps_per_g_step: usize,
    pub lr_g: f64,
    pub lr_d: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub iters: u64,
    pub batch: usize,
    pub data_source: DataSourceName,
    pub head_hidden: usize,
    pub head_class_dim: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSourceName {
    Synthetic,
    Real,
}

impl Default for DistillSection {
    fn default() -> Self {
        let d = DistillConfig::default();
        DistillSection {
            times: d.grid.times,
            probs_before: d.warmup.probs_before,
            probs_after: d.warmup.probs_after,
            switch_iter: d.warmup.switch_iter,
            t_hat_m: d.t_hat.m,
            t_hat_s: d.t_hat.s,
            lambda_adv: d.lambda_adv,
            lambda_distill: d.lambda_distill,
            r1_gamma: d.r1_gamma,
            d_steps_per_g_step: d.d_steps_per_g_step,
            lr_g: d.lr_g,
            lr_d: d.lr_d,
            beta1: d.adam_betas.0,
            beta2: d.adam_betas.1,
            iters: d.iters,
            batch: d.batch,
            data_source: DataSourceName::Synthetic,
            head_hidden: d.heads.hidden,
            head_class_dim: d.heads.class_dim,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskName {
    Stroke,
    Circle,
    Rect,
    Outpaint,
    Mixed,
}

/// Inpainting: masks during teacher pretraining and `distill-inpaint`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InpaintSection {
    pub enabled: bool,
    pub mask: MaskName,
    pub outpaint_border: usize,
    /// Real samples drawn as the distillation set.
    pub train_samples: usize,
    /// Held-out samples for inpainting metrics.
    pub eval_samples: usize,
    /// Euler steps of the teacher baseline.
    pub teacher_steps: usize,
}

impl Default for InpaintSection {
    fn default() -> Self {
        InpaintSection {
            enabled: false,
            mask: MaskName::Mixed,
            outpaint_border: 1,
            train_samples: 8192,
            eval_samples: 1000,
            teacher_steps: 50,
        }
    }
}

impl InpaintSection {
    pub fn mask_kind(&self) -> MaskKind {
        match self.mask {
            MaskName::Stroke => MaskKind::stroke(),
            MaskName::Circle => MaskKind::circle(),
            MaskName::Rect => MaskKind::rect(),
            MaskName::Outpaint => MaskKind::Outpaint {
                border: self.outpaint_border,
            },
            MaskName::Mixed => MaskKind::Mixed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub n_samples: usize,
    pub n_proj: usize,
    pub seed: u64,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            n_samples: 4000,
            n_proj: 512,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub axis: SweepAxis,
    pub values: Vec<AxisValue>,
    pub seeds: Vec<u64>,
    pub plots: bool,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            axis: SweepAxis::THatM,
            values: vec![AxisValue::Num(1.0), AxisValue::Num(-2.0)],
            seeds: vec![0, 1, 2],
            plots: true,
        }
    }
}

impl RunConfig {
    /// Parses TOML text and applies `key=value` overrides. Keys are
    /// `section.key`, or a bare key that names exactly one section field.
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table =
            toml::from_str(text).map_err(|e| config_err(format!("parse error: {}", e.message())))?;
        let keys = key_table();
        for ov in overrides {
            let (key, raw) = ov
                .split_once('=')
                .ok_or_else(|| config_err(format!("override `{ov}` is not key=value")))?;
            let key = key.trim();
            let (section, field) = match key.split_once('.') {
                Some((s, f)) => (s.to_string(), f.to_string()),
                None => {
                    let owners: Vec<&String> = keys
                        .iter()
                        .filter(|(_, v)| v.as_table().is_some_and(|t| t.contains_key(key)))
                        .map(|(k, _)| k)
                        .collect();
                    match owners.as_slice() {
                        [one] => ((*one).clone(), key.to_string()),
                        [] => return Err(config_err(format!("unknown key `{key}`"))),
                        _ => return Err(config_err(format!("ambiguous key `{key}`; use section.{key}"))),
                    }
                }
            };
            let value = parse_value(raw.trim());
            let entry = table
                .entry(section.clone())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            let t = entry
                .as_table_mut()
                .ok_or_else(|| config_err(format!("`{section}` is not a section")))?;
            t.insert(field, value);
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| config_err(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        Self::parse(&text, overrides)
    }

    /// Fully resolved TOML, every key present.
    pub fn canonical(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Digest of the canonical form without bookkeeping keys (`out_dir`,
    /// `resume`, `checkpoint_every`), so a resumed run keeps its hash.
    pub fn config_hash(&self) -> String {
        let mut c = self.clone();
        c.run.out_dir = RunSection::default().out_dir;
        c.run.resume = None;
        c.run.checkpoint_every = 0;
        digest(&c.canonical())
    }

    /// Checks every derived library config.
    pub fn validate(&self) -> Result<()> {
        let to_cfg = |e: LaddError| config_err(e.to_string());
        self.data.spec().validate().map_err(to_cfg)?;
        self.teacher_config().validate().map_err(to_cfg)?;
        self.distill_config().and_then(|d| d.validate()).map_err(to_cfg)?;
        if self.synthetic.n_samples < 1
            || self.synthetic.n_steps < 1
            || self.synthetic.cfg_w.is_nan()
            || self.synthetic.cfg_w < 0.0
        {
            return Err(config_err("synthetic: n_samples, n_steps >= 1 and cfg_w >= 0 required"));
        }
        if self.eval.n_samples < 2 || self.eval.n_proj < 1 {
            return Err(config_err("eval: n_samples >= 2 and n_proj >= 1 required"));
        }
        if self.sweep.values.is_empty() || self.sweep.seeds.is_empty() {
            return Err(config_err("sweep: values and seeds must be non-empty"));
        }
        Ok(())
    }

    pub fn arch(&self) -> DenoiserArch {
        let spec = self.data.spec();
        let shape = spec.data_shape();
        let mut arch = match self.model.kind {
            ArchKind::VectorMlp => DenoiserArch::vector(
                shape.iter().product(),
                self.model.width,
                self.model.depth,
                spec.n_classes(),
            ),
            ArchKind::TokenTransformer => {
                let s: [usize; 3] = match shape.as_slice() {
                    &[c, h, w] => [c, h, w],
                    _ => [shape[0], 1, 1],
                };
                DenoiserArch::tokens(s, self.model.width, self.model.depth, spec.n_classes())
            }
        };
        arch.time_embed_dim = self.model.time_embed_dim;
        if self.inpaint.enabled {
            arch.cond_channels = shape[0] + 1;
        }
        arch
    }

    pub fn teacher_config(&self) -> TeacherTrainConfig {
        let mut cfg = TeacherTrainConfig::new(self.data.spec(), self.arch());
        cfg.iters = self.teacher.iters;
        cfg.batch = self.teacher.batch;
        cfg.lr = self.teacher.lr;
        cfg.cond_dropout_prob = self.teacher.cond_dropout_prob;
        cfg.time_dist = LogitNormal {
            m: self.teacher.time_m,
            s: self.teacher.time_s,
        };
        cfg.seed = self.run.seed;
        cfg.mask = self.inpaint.enabled.then(|| self.inpaint.mask_kind());
        cfg
    }

    pub fn distill_config(&self) -> Result<DistillConfig> {
        let d = &self.distill;
        Ok(DistillConfig {
            grid: DiscreteTimeGrid::new(d.times.clone(), d.probs_after.clone())?,
            warmup: WarmupSchedule {
                probs_before: d.probs_before.clone(),
                probs_after: d.probs_after.clone(),
                switch_iter: d.switch_iter,
            },
            t_hat: LogitNormal::new(d.t_hat_m, d.t_hat_s)?,
            lambda_adv: d.lambda_adv,
            lambda_distill: d.lambda_distill,
            r1_gamma: d.r1_gamma,
            d_steps_per_g_step: d.d_steps_per_g_step,
            lr_g: d.lr_g,
            lr_d: d.lr_d,
            adam_betas: (d.beta1, d.beta2),
            iters: d.iters,
            batch: d.batch,
            seed: self.run.seed,
            data_source: match d.data_source {
                DataSourceName::Synthetic => DataSource::Synthetic,
                DataSourceName::Real => DataSource::Real,
            },
            heads: HeadConfig {
                hidden: d.head_hidden,
                class_dim: d.head_class_dim,
            },
        })
    }

    pub fn experiment(&self) -> ExperimentSetup {
        ExperimentSetup {
            spec: self.data.spec(),
            width: self.model.width,
            depth: self.model.depth,
            pretrain_iters: self.teacher.iters,
            pretrain_batch: self.teacher.batch,
            pretrain_lr: self.teacher.lr,
            pretrain_seed: self.run.seed,
            synthetic_samples: self.synthetic.n_samples,
            synthetic_cfg_w: self.synthetic.cfg_w,
            synthetic_steps: self.synthetic.n_steps,
            eval_samples: self.eval.n_samples,
            eval_proj: self.eval.n_proj,
            eval_seed: self.eval.seed,
        }
    }

    pub fn sweep_spec(&self) -> Result<SweepSpec> {
        Ok(SweepSpec {
            axis: self.sweep.axis,
            values: self.sweep.values.clone(),
            seeds: self.sweep.seeds.clone(),
            base: self.distill_config()?,
            setup: self.experiment(),
        })
    }
}

/// Every section and key, optional paths included.
fn key_table() -> toml::Table {
    let mut full = RunConfig::default();
    full.run.teacher = Some(String::new());
    full.run.dataset = Some(String::new());
    full.run.student = Some(String::new());
    full.run.resume = Some(String::new());
    toml::Table::try_from(full).expect("config serializes")
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}
