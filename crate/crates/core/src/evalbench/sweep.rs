use std::collections::HashMap;
use std::fmt;

use ladd_autodiff::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use super::classifier::{alignment_score, ReferenceClassifier};
use super::metrics::{median_bandwidth, mmd_rbf, modes_covered, sliced_w2};
use crate::data::{LatentBatch, ToySpec};
use crate::distill::{DataProvider, DataSource, DistillConfig, Distiller};
use crate::error::{invalid, LaddError, Result};
use crate::flow::{consistency_multistep, euler_sample, Conditioning, DiscreteTimeGrid, LogitNormal};
use crate::nets::{DenoiserArch, DenoiserParams};
use crate::rng::{rng_for, split_seed};
use crate::teacher::{generate_synthetic, train_teacher, TeacherTrainConfig};

/// Inference step counts reported for every distilled student.
pub const EVAL_STEPS: [usize; 3] = [1, 2, 4];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    SlicedW2,
    Mmd,
    Alignment,
    ModesCovered,
    VisibleMse,
    MaskedSlicedW2,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::SlicedW2 => "sliced_w2",
            Metric::Mmd => "mmd",
            Metric::Alignment => "alignment",
            Metric::ModesCovered => "modes_covered",
            Metric::VisibleMse => "visible_mse",
            Metric::MaskedSlicedW2 => "masked_sliced_w2",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        [
            Metric::SlicedW2,
            Metric::Mmd,
            Metric::Alignment,
            Metric::ModesCovered,
            Metric::VisibleMse,
            Metric::MaskedSlicedW2,
        ]
        .into_iter()
        .find(|m| m.name() == s)
        .ok_or_else(|| invalid("metric", format!("unknown metric `{s}`")))
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One evaluated quantity of one run.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub run_id: String,
    pub config_hash: String,
    pub metric: Metric,
    pub value: f64,
    pub seed: u64,
    /// Number of inference steps used to draw the samples.
    pub step: usize,
    pub n_samples: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    THatM,
    DataSource,
    StudentDepth,
    TeacherDepth,
    DatagenDepth,
    Steps,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::THatM => "t_hat_m",
            SweepAxis::DataSource => "data_source",
            SweepAxis::StudentDepth => "student_depth",
            SweepAxis::TeacherDepth => "teacher_depth",
            SweepAxis::DatagenDepth => "datagen_depth",
            SweepAxis::Steps => "steps",
        }
    }
}

/// A sweep coordinate: numbers for numeric axes, names for `data_source`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AxisValue {
    Num(f64),
    Name(String),
}

impl fmt::Display for AxisValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AxisValue::Num(v) => write!(f, "{v}"),
            AxisValue::Name(s) => f.write_str(s),
        }
    }
}

/// Fixed ingredients shared by every run of a sweep: the data, the
/// pretraining recipe for all denoisers, dataset sizes and evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentSetup {
    pub spec: ToySpec,
    pub width: usize,
    /// Depth of the teacher, the student and the data generator unless an
    /// axis overrides one of them.
    pub depth: usize,
    pub pretrain_iters: u64,
    pub pretrain_batch: usize,
    pub pretrain_lr: f64,
    pub pretrain_seed: u64,
    pub synthetic_samples: usize,
    pub synthetic_cfg_w: f64,
    pub synthetic_steps: usize,
    pub eval_samples: usize,
    pub eval_proj: usize,
    pub eval_seed: u64,
}

impl ExperimentSetup {
    pub fn new(spec: ToySpec) -> Self {
        ExperimentSetup {
            spec,
            width: 64,
            depth: 3,
            pretrain_iters: 5000,
            pretrain_batch: 256,
            pretrain_lr: 1e-3,
            pretrain_seed: 0,
            synthetic_samples: 8192,
            synthetic_cfg_w: 2.0,
            synthetic_steps: 50,
            eval_samples: 4000,
            eval_proj: 512,
            eval_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        if self.spec.data_shape().len() != 1 {
            return Err(invalid("experiment", "sweeps run on vector data"));
        }
        if self.width < 1 || self.depth < 1 || self.pretrain_iters < 1 || self.pretrain_batch < 1 {
            return Err(invalid("experiment", "width, depth and pretraining sizes must be >= 1"));
        }
        if self.synthetic_samples < 1 || self.synthetic_steps < 1 || self.eval_proj < 1 {
            return Err(invalid("experiment", "dataset and evaluation sizes must be >= 1"));
        }
        if self.eval_samples < 2 {
            return Err(invalid("experiment", "eval_samples must be >= 2"));
        }
        Ok(())
    }

    pub fn arch(&self, depth: usize) -> DenoiserArch {
        DenoiserArch::vector(self.spec.data_shape()[0], self.width, depth, self.spec.n_classes())
    }

    pub fn pretrain_config(&self, depth: usize) -> TeacherTrainConfig {
        let mut cfg = TeacherTrainConfig::new(self.spec.clone(), self.arch(depth));
        cfg.iters = self.pretrain_iters;
        cfg.batch = self.pretrain_batch;
        cfg.lr = self.pretrain_lr;
        cfg.seed = self.pretrain_seed;
        cfg
    }
}

/// Depths of the three model roles of one run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Roles {
    pub student: usize,
    pub teacher: usize,
    pub datagen: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    pub values: Vec<AxisValue>,
    pub seeds: Vec<u64>,
    pub base: DistillConfig,
    pub setup: ExperimentSetup,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() || self.seeds.is_empty() {
            return Err(invalid("sweep", "values and seeds must be non-empty"));
        }
        self.setup.validate()?;
        self.base.validate()?;
        for v in &self.values {
            self.resolve(v)?;
        }
        Ok(())
    }

    /// Distillation config and model roles for one axis value.
    pub fn resolve(&self, value: &AxisValue) -> Result<(DistillConfig, Roles)> {
        let d = self.setup.depth;
        let mut roles = Roles {
            student: d,
            teacher: d,
            datagen: d,
        };
        let mut cfg = self.base.clone();
        let num = |v: &AxisValue| match v {
            AxisValue::Num(x) if x.is_finite() => Ok(*x),
            other => Err(invalid(
                "sweep",
                format!("axis {} needs a number, got `{other}`", self.axis.name()),
            )),
        };
        let depth = |v: &AxisValue| -> Result<usize> {
            let x = num(v)?;
            if x >= 1.0 && x.fract() == 0.0 {
                Ok(x as usize)
            } else {
                Err(invalid("sweep", format!("depth {x} must be a positive integer")))
            }
        };
        match self.axis {
            SweepAxis::THatM => cfg.t_hat = LogitNormal::new(num(value)?, cfg.t_hat.s)?,
            SweepAxis::DataSource => {
                cfg.data_source = match value {
                    AxisValue::Name(s) if s == "synthetic" => DataSource::Synthetic,
                    AxisValue::Name(s) if s == "real" => DataSource::Real,
                    other => return Err(invalid("sweep", format!("data source `{other}`"))),
                }
            }
            SweepAxis::StudentDepth => roles.student = depth(value)?,
            SweepAxis::TeacherDepth => roles.teacher = depth(value)?,
            SweepAxis::DatagenDepth => roles.datagen = depth(value)?,
            SweepAxis::Steps => {
                let s = depth(value)?;
                if !EVAL_STEPS.contains(&s) {
                    return Err(invalid("sweep", format!("steps {s} not in {EVAL_STEPS:?}")));
                }
            }
        }
        Ok((cfg, roles))
    }
}

/// First 16 hex digits of the SHA-256 of `text`.
pub fn digest(text: &str) -> String {
    let hash = Sha256::digest(text.as_bytes());
    hash.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// Fixed real samples and their labels, shared by every evaluation.
#[derive(Clone, Debug)]
pub struct Reference {
    pub data: LatentBatch,
    pub bandwidth: f64,
}

/// Cache of pretrained denoisers, datasets, the reference classifier and
/// finished runs, so runs shared between sweeps are trained once.
#[derive(Debug)]
pub struct Zoo {
    pub setup: ExperimentSetup,
    models: HashMap<usize, DenoiserParams>,
    synthetic: HashMap<usize, LatentBatch>,
    real: Option<LatentBatch>,
    classifier: Option<ReferenceClassifier>,
    reference: Option<Reference>,
    runs: HashMap<String, Vec<MetricsRow>>,
}

impl Zoo {
    pub fn new(setup: ExperimentSetup) -> Result<Self> {
        setup.validate()?;
        Ok(Zoo {
            setup,
            models: HashMap::new(),
            synthetic: HashMap::new(),
            real: None,
            classifier: None,
            reference: None,
            runs: HashMap::new(),
        })
    }

    /// Pretrained (frozen) denoiser of the given depth.
    pub fn model(&mut self, depth: usize) -> Result<&DenoiserParams> {
        if !self.models.contains_key(&depth) {
            let (p, _) = train_teacher(&self.setup.pretrain_config(depth))?;
            self.models.insert(depth, p);
        }
        Ok(&self.models[&depth])
    }

    /// Teacher samples at the configured guidance weight, labels drawn
    /// uniformly, from the generator of the given depth.
    pub fn synthetic(&mut self, depth: usize) -> Result<&LatentBatch> {
        if !self.synthetic.contains_key(&depth) {
            let s = self.setup.clone();
            let mut rng = rng_for(split_seed(s.pretrain_seed, "synthetic"), &depth.to_string());
            let k = s.spec.n_classes();
            let labels: Vec<usize> = (0..s.synthetic_samples).map(|_| rng.random_range(0..k)).collect();
            let model = self.model(depth)?;
            let data = generate_synthetic(model, &labels, s.synthetic_cfg_w, s.synthetic_steps, &mut rng)?;
            self.synthetic.insert(depth, data);
        }
        Ok(&self.synthetic[&depth])
    }

    /// Draws from the data distribution, as many as the synthetic set.
    pub fn real(&mut self) -> Result<&LatentBatch> {
        if self.real.is_none() {
            let mut rng = rng_for(split_seed(self.setup.pretrain_seed, "real"), "train");
            self.real = Some(self.setup.spec.sample_real(self.setup.synthetic_samples, &mut rng)?);
        }
        Ok(self.real.as_ref().expect("filled above"))
    }

    pub fn classifier(&mut self) -> Result<&ReferenceClassifier> {
        if self.classifier.is_none() {
            self.classifier = Some(ReferenceClassifier::train(&self.setup.spec, self.setup.eval_seed)?);
        }
        Ok(self.classifier.as_ref().expect("filled above"))
    }

    pub fn reference(&mut self) -> Result<&Reference> {
        if self.reference.is_none() {
            let mut rng = rng_for(split_seed(self.setup.eval_seed, "reference"), "data");
            let data = self.setup.spec.sample_real(self.setup.eval_samples, &mut rng)?;
            let bandwidth = median_bandwidth(&data.x0)?;
            self.reference = Some(Reference { data, bandwidth });
        }
        Ok(self.reference.as_ref().expect("filled above"))
    }

    /// Scores samples drawn for the reference labels against the reference set.
    pub fn score(
        &mut self,
        samples: &Tensor,
        run_id: &str,
        config_hash: &str,
        seed: u64,
        step: usize,
    ) -> Result<Vec<MetricsRow>> {
        let spec = self.setup.spec.clone();
        let (n_proj, eval_seed) = (self.setup.eval_proj, self.setup.eval_seed);
        let reference = self.reference()?.clone();
        let labels = &reference.data.cond;
        let align = alignment_score(self.classifier()?, samples, labels)?;
        let mut proj_rng = rng_for(split_seed(eval_seed, "projections"), "sliced");
        let n = samples.shape()[0];
        let mut values = vec![
            (
                Metric::SlicedW2,
                sliced_w2(samples, &reference.data.x0, n_proj, &mut proj_rng)?,
            ),
            (Metric::Mmd, mmd_rbf(samples, &reference.data.x0, reference.bandwidth)?),
            (Metric::Alignment, align),
        ];
        if matches!(spec, ToySpec::Gmm2d { .. }) {
            values.push((Metric::ModesCovered, modes_covered(samples, &spec)? as f64));
        }
        Ok(values
            .into_iter()
            .map(|(metric, value)| MetricsRow {
                run_id: run_id.to_string(),
                config_hash: config_hash.to_string(),
                metric,
                value,
                seed,
                step,
                n_samples: n,
            })
            .collect())
    }

    /// Student samples for the reference labels with the few-step sampler.
    /// Sampling noise depends only on the evaluation seed and step count.
    pub fn student_samples(&mut self, student: &DenoiserParams, steps: usize) -> Result<Tensor> {
        let grid = DiscreteTimeGrid::for_steps(steps)?;
        let cond = Conditioning::labels(self.reference()?.data.cond.clone());
        let mut rng = rng_for(split_seed(self.setup.eval_seed, "student-noise"), &steps.to_string());
        consistency_multistep(student, &cond, &grid.times, &mut rng)
    }

    /// Metrics of a denoiser sampled with guided Euler integration.
    pub fn euler_rows(
        &mut self,
        model: &DenoiserParams,
        n_steps: usize,
        cfg_w: f64,
        run_id: &str,
    ) -> Result<Vec<MetricsRow>> {
        let cond = Conditioning::labels(self.reference()?.data.cond.clone());
        let mut rng = rng_for(split_seed(self.setup.eval_seed, "euler-noise"), &n_steps.to_string());
        let x = euler_sample(model, &cond, n_steps, cfg_w, &mut rng)?;
        let hash = digest(&format!("{:?}", (&self.setup, n_steps, cfg_w.to_bits(), run_id)));
        self.score(&x, run_id, &hash, self.setup.eval_seed, n_steps)
    }

    /// Rows for all [`EVAL_STEPS`] of a distilled student.
    pub fn evaluate_student(
        &mut self,
        student: &DenoiserParams,
        run_id: &str,
        config_hash: &str,
        seed: u64,
    ) -> Result<Vec<MetricsRow>> {
        let mut rows = Vec::new();
        for steps in EVAL_STEPS {
            let x = self.student_samples(student, steps)?;
            rows.extend(self.score(&x, run_id, config_hash, seed, steps)?);
        }
        Ok(rows)
    }

    /// Distills one student (or returns the cached rows of an identical run).
    pub fn run(&mut self, cfg: &DistillConfig, roles: Roles, seed: u64) -> Result<Vec<MetricsRow>> {
        let mut cfg = cfg.clone();
        cfg.seed = seed;
        let key = format!("{:?}", (&self.setup, &cfg, roles));
        let hash = digest(&key);
        if let Some(rows) = self.runs.get(&key) {
            return Ok(rows.clone());
        }
        let run_id = format!(
            "s{}-t{}-g{}-{}-seed{seed}",
            roles.student, roles.teacher, roles.datagen, hash
        );
        let wrap = |e: LaddError| LaddError::Run {
            run: format!("{run_id} {cfg:?} {roles:?}"),
            source: Box::new(e),
        };
        let student = self.distill(&cfg, roles).map_err(wrap)?;
        let rows = self.evaluate_student(&student, &run_id, &hash, seed).map_err(wrap)?;
        self.runs.insert(key, rows.clone());
        Ok(rows)
    }

    /// Trains a student for the given roles; no evaluation, no caching.
    pub fn distill(&mut self, cfg: &DistillConfig, roles: Roles) -> Result<DenoiserParams> {
        let teacher = self.model(roles.teacher)?.clone();
        let student = self.model(roles.student)?.clone();
        let data = match cfg.data_source {
            DataSource::Synthetic => self.synthetic(roles.datagen)?.clone(),
            DataSource::Real => self.real()?.clone(),
        };
        let provider = DataProvider::new(data, None)?;
        let mut d = Distiller::new(cfg.clone(), teacher, student)?;
        d.run_until(&provider, cfg.iters, |_| {})?;
        let mut student = d.student;
        student.frozen = true;
        Ok(student)
    }
}

/// Runs one distillation per (value, seed) and evaluates every student at
/// 1, 2 and 4 steps. `run_id`s carry the axis coordinate.
pub fn run_sweep(spec: &SweepSpec) -> Result<Vec<MetricsRow>> {
    let mut zoo = Zoo::new(spec.setup.clone())?;
    run_sweep_in(&mut zoo, spec)
}

/// As [`run_sweep`], sharing models and finished runs through `zoo`.
pub fn run_sweep_in(zoo: &mut Zoo, spec: &SweepSpec) -> Result<Vec<MetricsRow>> {
    spec.validate()?;
    if zoo.setup != spec.setup {
        return Err(invalid("sweep", "zoo was built for a different experiment setup"));
    }
    let mut rows = Vec::new();
    for value in &spec.values {
        let (cfg, roles) = spec.resolve(value)?;
        for &seed in &spec.seeds {
            let prefix = format!("{}={value}/", spec.axis.name());
            rows.extend(zoo.run(&cfg, roles, seed)?.into_iter().map(|mut r| {
                r.run_id = format!("{prefix}{}", r.run_id);
                r
            }));
        }
    }
    Ok(rows)
}

/// The axis coordinate encoded in a sweep `run_id`, if any.
pub fn axis_value_of(run_id: &str) -> Option<&str> {
    let (head, _) = run_id.split_once('/')?;
    head.split_once('=').map(|(_, v)| v)
}

/// Median; `None` when empty.
pub fn median(values: &[f64]) -> Option<f64> {
    let mut v: Vec<f64> = values.to_vec();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    Some(if v.len().is_multiple_of(2) {
        0.5 * (v[mid - 1] + v[mid])
    } else {
        v[mid]
    })
}

/// Chi-square goodness of fit of `samples` to a logit-normal law over
/// `bins` equiprobable bins; returns the p-value.
pub fn chi_square_gof(samples: &[f64], dist: &LogitNormal, bins: usize) -> Result<f64> {
    dist.validate()?;
    if bins < 2 || samples.len() < 5 * bins {
        return Err(invalid("chi-square", "need >= 2 bins and >= 5 expected counts per bin"));
    }
    let edges: Vec<f64> = (1..bins).map(|i| dist.quantile(i as f64 / bins as f64)).collect();
    let mut counts = vec![0usize; bins];
    for &x in samples {
        counts[edges.partition_point(|&e| e < x)] += 1;
    }
    let expected = samples.len() as f64 / bins as f64;
    let stat: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let chi = ChiSquared::new((bins - 1) as f64).map_err(|e| invalid("chi-square", e.to_string()))?;
    Ok(1.0 - chi.cdf(stat))
}
