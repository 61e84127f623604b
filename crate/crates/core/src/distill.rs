//! Latent adversarial diffusion distillation.
//!
//! A student denoiser predicts `x0` from a grid time `t`; its prediction and
//! a clean sample are renoised at `t_hat`, passed through the frozen
//! teacher, and per-block discriminator heads judge the teacher features.

use ladd_autodiff::{AdamState, Tape, Tensor, Var};
use rand::Rng;

use crate::data::{build_inpaint_batch, LatentBatch, MaskKind};
use crate::error::{invalid, LaddError, Result};
use crate::flow::{denoise_rows, forward_diffuse_rows, row_scale, DiscreteTimeGrid, LogitNormal};
use crate::nets::{Bound, DenoiserParams, DiscHeadSet, FeatureLayout, FeatureStack, HeadConfig};
use crate::rng::{rng_for, split_seed, LaddRng};

/// Where the clean samples of the real branch come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataSource {
    /// Teacher samples generated at a constant guidance weight.
    Synthetic,
    /// Draws from the toy distribution itself.
    Real,
}

/// Grid sampling weights before and after `switch_iter`.
#[derive(Clone, Debug, PartialEq)]
pub struct WarmupSchedule {
    pub probs_before: Vec<f64>,
    pub probs_after: Vec<f64>,
    pub switch_iter: u64,
}

impl Default for WarmupSchedule {
    fn default() -> Self {
        WarmupSchedule {
            probs_before: vec![0.0, 0.0, 0.5, 0.5],
            probs_after: vec![0.7, 0.1, 0.1, 0.1],
            switch_iter: 500,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistillConfig {
    pub grid: DiscreteTimeGrid,
    pub warmup: WarmupSchedule,
    pub t_hat: LogitNormal,
    pub lambda_adv: f64,
    pub lambda_distill: f64,
    pub r1_gamma: f64,
    pub d_steps_per_g_step: usize,
    pub lr_g: f64,
    pub lr_d: f64,
    /// Adam moment decay rates shared by the student and head optimizers.
    pub adam_betas: (f64, f64),
    pub iters: u64,
    pub batch: usize,
    pub seed: u64,
    pub data_source: DataSource,
    pub heads: HeadConfig,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            grid: DiscreteTimeGrid::default(),
            warmup: WarmupSchedule::default(),
            t_hat: LogitNormal { m: 1.0, s: 1.0 },
            lambda_adv: 1.0,
            lambda_distill: 0.0,
            r1_gamma: 1e-4,
            d_steps_per_g_step: 1,
            lr_g: 1e-4,
            lr_d: 1e-4,
            adam_betas: (0.9, 0.999),
            iters: 4000,
            batch: 128,
            seed: 0,
            data_source: DataSource::Synthetic,
            heads: HeadConfig::default(),
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        self.t_hat.validate()?;
        let n = self.grid.times.len();
        for probs in [&self.warmup.probs_before, &self.warmup.probs_after] {
            DiscreteTimeGrid::new(self.grid.times.clone(), probs.clone())
                .map_err(|e| invalid("warmup", format!("{e} (need {n} weights summing to 1)")))?;
        }
        let nonneg = [
            ("lambda_adv", self.lambda_adv),
            ("lambda_distill", self.lambda_distill),
            ("r1_gamma", self.r1_gamma),
            ("lr_g", self.lr_g),
            ("lr_d", self.lr_d),
        ];
        for (name, v) in nonneg {
            if !(v.is_finite() && v >= 0.0) {
                return Err(invalid(
                    "distill config",
                    format!("{name} = {v} must be finite and >= 0"),
                ));
            }
        }
        let (b1, b2) = self.adam_betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return Err(invalid("distill config", "adam betas must lie in [0, 1)"));
        }
        if self.d_steps_per_g_step < 1 || self.batch < 1 || self.iters < 1 {
            return Err(invalid(
                "distill config",
                "d_steps_per_g_step, batch and iters must be >= 1",
            ));
        }
        Ok(())
    }
}

/// Grid weights in force at `iter`; index 0 is the full-noise time.
pub fn warmup_probs(cfg: &DistillConfig, iter: u64) -> Vec<f64> {
    if iter < cfg.warmup.switch_iter {
        cfg.warmup.probs_before.clone()
    } else {
        cfg.warmup.probs_after.clone()
    }
}

fn check_heads(real: &[Tensor], fake: &[Tensor]) -> Result<()> {
    if real.len() != fake.len() || real.is_empty() {
        return Err(invalid(
            "hinge loss",
            format!("{} real and {} fake logit tensors", real.len(), fake.len()),
        ));
    }
    Ok(())
}

/// `mean(relu(1 - l_real)) + mean(relu(1 + l_fake))`, averaged over heads.
pub fn hinge_d_loss(real: &[Tensor], fake: &[Tensor]) -> Result<f64> {
    check_heads(real, fake)?;
    let h = real.len() as f64;
    let r: f64 = real.iter().map(|l| l.map(|v| (1.0 - v).max(0.0)).mean()).sum();
    let f: f64 = fake.iter().map(|l| l.map(|v| (1.0 + v).max(0.0)).mean()).sum();
    Ok((r + f) / h)
}

/// `-mean(l_fake)`, averaged over heads.
pub fn hinge_g_loss(fake: &[Tensor]) -> Result<f64> {
    if fake.is_empty() {
        return Err(invalid("hinge loss", "no logit tensors"));
    }
    Ok(-fake.iter().map(Tensor::mean).sum::<f64>() / fake.len() as f64)
}

fn sum_vars(tape: &mut Tape, vars: &[Var]) -> Result<Var> {
    let mut acc = vars[0];
    for &v in &vars[1..] {
        acc = tape.add(acc, v)?;
    }
    Ok(acc)
}

fn hinge_d_on_tape(tape: &mut Tape, real: &[Var], fake: &[Var]) -> Result<Var> {
    let mut terms = Vec::with_capacity(2 * real.len());
    for &l in real {
        let m = tape.affine(l, -1.0, 1.0)?;
        let r = tape.relu(m)?;
        terms.push(tape.mean(r)?);
    }
    for &l in fake {
        let m = tape.affine(l, 1.0, 1.0)?;
        let r = tape.relu(m)?;
        terms.push(tape.mean(r)?);
    }
    let total = sum_vars(tape, &terms)?;
    Ok(tape.scale(total, 1.0 / real.len() as f64)?)
}

fn hinge_g_on_tape(tape: &mut Tape, fake: &[Var]) -> Result<Var> {
    let means = fake
        .iter()
        .map(|&l| tape.mean(l))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let total = sum_vars(tape, &means)?;
    Ok(tape.scale(total, -1.0 / fake.len() as f64)?)
}

/// Mean squared difference of two predictions.
pub fn distill_loss(student_x0: &Tensor, teacher_x0: &Tensor) -> Result<f64> {
    let d = student_x0.zip_map(teacher_x0, "distill_loss", |a, b| (a - b).powi(2))?;
    Ok(d.mean())
}

/// Critic: records per-sample scores on a tape from feature leaves and
/// returns `S = sum_i score_i` (any per-sample reduction of the logits).
pub type Critic<'a> = dyn Fn(&mut Tape, &[Var]) -> Result<Var> + 'a;

/// Gradient penalty `(gamma / 2) E_i |dS/dfeats_i|^2` and its gradient with
/// respect to the critic's parameters.
///
/// The critic binds its own parameters; `param_grads` maps a finished tape
/// to those gradients. The parameter gradient of the penalty is a
/// Hessian-vector product, taken as a central difference of parameter
/// gradients along the feature gradient.
pub fn r1_from_critic(
    critic: &Critic<'_>,
    param_grads: &dyn Fn(&Tape) -> Vec<Tensor>,
    feats: &[Tensor],
    batch: usize,
    gamma: f64,
) -> Result<(f64, Option<Vec<Tensor>>)> {
    if gamma == 0.0 {
        return Ok((0.0, None));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = feats.iter().map(|f| tape.param(f.clone())).collect();
    let s = critic(&mut tape, &vars)?;
    tape.backward(s)?;
    let g: Vec<Tensor> = vars.iter().map(|&v| tape.grad_or_zeros(v)).collect();
    let sq: f64 = g.iter().map(|t| t.data().iter().map(|v| v * v).sum::<f64>()).sum();
    let penalty = 0.5 * gamma * sq / batch as f64;
    let gmax = g
        .iter()
        .flat_map(|t| t.data().iter())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    if gmax == 0.0 {
        return Ok((penalty, None));
    }
    let h = 1e-4 / gmax;
    let shifted = |sign: f64| -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let vars = feats
            .iter()
            .zip(&g)
            .map(|(f, d)| Ok(tape.constant(f.zip_map(d, "r1", |a, b| a + sign * h * b)?)))
            .collect::<Result<Vec<_>>>()?;
        let s = critic(&mut tape, &vars)?;
        tape.backward(s)?;
        Ok(param_grads(&tape))
    };
    let plus = shifted(1.0)?;
    let minus = shifted(-1.0)?;
    let scale = gamma / batch as f64 / (2.0 * h);
    let grads = plus
        .iter()
        .zip(&minus)
        .map(|(p, m)| p.zip_map(m, "r1", |a, b| scale * (a - b)))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok((penalty, Some(grads)))
}

/// R1 penalty of the heads on the given (real-branch) features.
pub fn r1_penalty(
    heads: &DiscHeadSet,
    feats: &[Tensor],
    layout: FeatureLayout,
    t_hat: &[f64],
    labels: &[usize],
    gamma: f64,
) -> Result<(f64, Option<Vec<Tensor>>)> {
    let bound_vars = std::cell::RefCell::new(Vec::new());
    let critic = |tape: &mut Tape, vars: &[Var]| -> Result<Var> {
        let bound = heads.params.bind(tape, true);
        *bound_vars.borrow_mut() = bound.vars().to_vec();
        let stack = FeatureStack {
            feats: vars.to_vec(),
            layout,
        };
        let logits = heads.forward(tape, &bound, &stack, t_hat, labels)?;
        let per_head = logits
            .iter()
            .map(|&l| {
                let locs = tape.shape(l)[1] as f64;
                let s = tape.sum(l)?;
                Ok(tape.scale(s, 1.0 / locs)?)
            })
            .collect::<Result<Vec<_>>>()?;
        sum_vars(tape, &per_head)
    };
    let grads = |tape: &Tape| bound_vars.borrow().iter().map(|&v| tape.grad_or_zeros(v)).collect();
    r1_from_critic(&critic, &grads, feats, t_hat.len(), gamma)
}

/// Minibatches drawn uniformly with replacement from a fixed dataset;
/// with a mask kind, fresh inpainting masks are attached to every batch.
#[derive(Clone, Debug)]
pub struct DataProvider {
    pub data: LatentBatch,
    pub mask: Option<MaskKind>,
}

impl DataProvider {
    pub fn new(data: LatentBatch, mask: Option<MaskKind>) -> Result<Self> {
        if data.is_empty() {
            return Err(invalid("data provider", "empty dataset"));
        }
        Ok(DataProvider { data, mask })
    }

    pub fn draw<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<LatentBatch> {
        let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..self.data.len())).collect();
        let batch = self.data.select(&idx)?;
        match self.mask {
            Some(kind) => build_inpaint_batch(batch, kind, rng),
            None => Ok(batch),
        }
    }
}

/// Losses and noise levels of one distillation step.
#[derive(Clone, Debug, PartialEq)]
pub struct LossRecord {
    pub iter: u64,
    pub l_d: f64,
    pub l_g_adv: f64,
    /// Zero when `lambda_distill` is zero (the target is not computed).
    pub l_distill: f64,
    pub r1: f64,
    pub t: Vec<f64>,
    pub t_hat: Vec<f64>,
}

impl LossRecord {
    pub fn mean_t(&self) -> f64 {
        self.t.iter().sum::<f64>() / self.t.len() as f64
    }

    pub fn mean_t_hat(&self) -> f64 {
        self.t_hat.iter().sum::<f64>() / self.t_hat.len() as f64
    }
}

/// All mutable state of a distillation run.
#[derive(Clone, Debug)]
pub struct Distiller {
    pub cfg: DistillConfig,
    pub student: DenoiserParams,
    pub teacher: DenoiserParams,
    pub heads: DiscHeadSet,
    pub adam_g: AdamState,
    pub adam_d: AdamState,
    pub rng: LaddRng,
    pub iter: u64,
}

fn logits_values(tape: &Tape, logits: &[Var]) -> Vec<Tensor> {
    logits.iter().map(|&l| tape.value(l).clone()).collect()
}

impl Distiller {
    /// Starts from `student_init` (a pretrained denoiser of the student
    /// architecture) and a frozen teacher.
    pub fn new(cfg: DistillConfig, teacher: DenoiserParams, student_init: DenoiserParams) -> Result<Self> {
        cfg.validate()?;
        if !teacher.frozen {
            return Err(invalid("teacher", "teacher weights must be frozen"));
        }
        let (ta, sa) = (&teacher.arch, &student_init.arch);
        if ta.data_shape != sa.data_shape || ta.n_classes != sa.n_classes || ta.cond_channels != sa.cond_channels {
            return Err(invalid(
                "student",
                "student and teacher disagree on data or conditioning",
            ));
        }
        let heads = DiscHeadSet::init(ta, &cfg.heads, split_seed(cfg.seed, "heads"))?;
        let mut student = student_init;
        student.frozen = false;
        let mut adam_g = AdamState::with_lr(cfg.lr_g, student.params.tensors());
        let mut adam_d = AdamState::with_lr(cfg.lr_d, heads.params.tensors());
        for adam in [&mut adam_g, &mut adam_d] {
            (adam.beta1, adam.beta2) = cfg.adam_betas;
        }
        let rng = rng_for(cfg.seed, "distill");
        Ok(Distiller {
            cfg,
            student,
            teacher,
            heads,
            adam_g,
            adam_d,
            rng,
            iter: 0,
        })
    }

    /// One generator step and `d_steps_per_g_step` discriminator steps.
    ///
    /// Generator gradients are taken against the heads as they were at the
    /// start of the step; the heads are then updated, then the student.
    pub fn step(&mut self, source: &DataProvider) -> Result<LossRecord> {
        let iter = self.iter;
        let cfg = self.cfg.clone();
        let b = cfg.batch;
        let batch = source.draw(b, &mut self.rng)?;
        let cond = batch.conditioning()?;
        let labels = self.student.resolve_labels(&cond, false)?;

        let probs = warmup_probs(&cfg, iter);
        let ts = (0..b)
            .map(|_| Ok(cfg.grid.times[cfg.grid.sample_index(&probs, &mut self.rng)?]))
            .collect::<Result<Vec<f64>>>()?;
        let eps = Tensor::randn(batch.x0.shape().to_vec(), &mut self.rng);
        let x_t = forward_diffuse_rows(&batch.x0, &eps, &ts)?;
        let t_hat = cfg.t_hat.sample_n(b, &mut self.rng);
        let eps1 = Tensor::randn(batch.x0.shape().to_vec(), &mut self.rng);
        let eps2 = Tensor::randn(batch.x0.shape().to_vec(), &mut self.rng);
        let z_real = forward_diffuse_rows(&batch.x0, &eps1, &t_hat)?;

        let abort = |reason: String, rec: &LossRecord| LaddError::DistillAbort {
            iter,
            reason,
            record: format!("{rec:?}"),
        };
        let mut record = LossRecord {
            iter,
            l_d: f64::NAN,
            l_g_adv: f64::NAN,
            l_distill: f64::NAN,
            r1: f64::NAN,
            t: ts.clone(),
            t_hat: t_hat.clone(),
        };
        let wrap = |e: LaddError, rec: &LossRecord| match e {
            LaddError::Autodiff(inner) => abort(inner.to_string(), rec),
            other => other,
        };

        // Generator side.
        let teacher_x0 = if cfg.lambda_distill > 0.0 {
            let mut tape = Tape::new();
            let tb = self.teacher.params.bind(&mut tape, false);
            let xv = tape.constant(x_t.clone());
            let img = cond.image.as_ref().map(|i| tape.constant(i.clone()));
            let (f, _) = self
                .teacher
                .forward_bound(&mut tape, &tb, xv, &ts, &labels, img)
                .map_err(|e| wrap(e, &record))?;
            Some(denoise_rows(tape.value(f), &x_t, &ts)?)
        } else {
            None
        };
        let mut gt = Tape::new();
        let sb = self.student.params.bind(&mut gt, true);
        let (g_loss, _, fake_feats, fake_logits, distill) = self
            .generator_graph(
                &mut gt,
                &sb,
                &x_t,
                &ts,
                &labels,
                cond.image.as_ref(),
                &t_hat,
                &eps2,
                teacher_x0.as_ref(),
            )
            .map_err(|e| wrap(e, &record))?;
        record.l_g_adv = hinge_g_loss(&logits_values(&gt, &fake_logits))?;
        record.l_distill = match distill {
            Some(v) => gt.value(v).item()?,
            None => 0.0,
        };
        if !gt.value(g_loss).item()?.is_finite() {
            return Err(abort("non-finite generator loss".into(), &record));
        }
        gt.backward(g_loss)?;
        let student_grads = sb.grads(&gt);
        let fake_values: Vec<Tensor> = fake_feats.feats.iter().map(|&v| gt.value(v).clone()).collect();
        let layout = fake_feats.layout;

        // Real-branch teacher features.
        let real_values = {
            let mut tape = Tape::new();
            let tb = self.teacher.params.bind(&mut tape, false);
            let zv = tape.constant(z_real);
            let img = cond.image.as_ref().map(|i| tape.constant(i.clone()));
            let (_, feats) = self
                .teacher
                .forward_bound(&mut tape, &tb, zv, &t_hat, &labels, img)
                .map_err(|e| wrap(e, &record))?;
            feats.values(&tape)
        };

        // Discriminator steps on the same features.
        for d_step in 0..cfg.d_steps_per_g_step {
            let mut dt = Tape::new();
            let hb = self.heads.params.bind(&mut dt, true);
            let stack = |tape: &mut Tape, vals: &[Tensor]| FeatureStack {
                feats: vals.iter().map(|v| tape.constant(v.clone())).collect(),
                layout,
            };
            let real_stack = stack(&mut dt, &real_values);
            let fake_stack = stack(&mut dt, &fake_values);
            let real_logits = self.heads.forward(&mut dt, &hb, &real_stack, &t_hat, &labels)?;
            let fake_logits = self.heads.forward(&mut dt, &hb, &fake_stack, &t_hat, &labels)?;
            let d_loss = hinge_d_on_tape(&mut dt, &real_logits, &fake_logits)?;
            let l_d = dt.value(d_loss).item()?;
            dt.backward(d_loss)?;
            let mut grads = hb.grads(&dt);
            let (r1, r1_grads) = r1_penalty(&self.heads, &real_values, layout, &t_hat, &labels, cfg.r1_gamma)
                .map_err(|e| wrap(e, &record))?;
            if d_step == 0 {
                record.l_d = l_d;
                record.r1 = r1;
            }
            if !(l_d.is_finite() && r1.is_finite()) {
                return Err(abort("non-finite discriminator loss".into(), &record));
            }
            if let Some(rg) = r1_grads {
                for (g, r) in grads.iter_mut().zip(&rg) {
                    *g = g.zip_map(r, "r1", |a, b| a + b)?;
                }
            }
            self.adam_d
                .step(self.heads.params.tensors_mut(), &grads)
                .map_err(|e| abort(e.to_string(), &record))?;
        }

        self.adam_g
            .step(self.student.params.tensors_mut(), &student_grads)
            .map_err(|e| abort(e.to_string(), &record))?;
        self.iter += 1;
        Ok(record)
    }

    #[allow(clippy::too_many_arguments, clippy::type_complexity)]
    fn generator_graph(
        &self,
        tape: &mut Tape,
        sb: &Bound,
        x_t: &Tensor,
        ts: &[f64],
        labels: &[usize],
        image: Option<&Tensor>,
        t_hat: &[f64],
        eps2: &Tensor,
        teacher_x0: Option<&Tensor>,
    ) -> Result<(Var, Var, FeatureStack, Vec<Var>, Option<Var>)> {
        let cfg = &self.cfg;
        let xv = tape.constant(x_t.clone());
        let img = image.map(|i| tape.constant(i.clone()));
        let (f, _) = self.student.forward_bound(tape, sb, xv, ts, labels, img)?;
        let tscale = tape.constant(Tensor::new(x_t.shape().to_vec(), row_scale(x_t, ts)?)?);
        let tf = tape.mul(tscale, f)?;
        let xhat = tape.sub(xv, tf)?;

        let th = row_scale(x_t, t_hat)?;
        let keep = tape.constant(Tensor::new(x_t.shape().to_vec(), th.iter().map(|t| 1.0 - t).collect())?);
        let noise = tape.constant(eps2.zip_map(&Tensor::new(x_t.shape().to_vec(), th)?, "renoise", |e, t| t * e)?);
        let kept = tape.mul(keep, xhat)?;
        let z_fake = tape.add(kept, noise)?;

        let tb = self.teacher.params.bind(tape, false);
        let (_, feats) = self.teacher.forward_bound(tape, &tb, z_fake, t_hat, labels, img)?;
        let hb = self.heads.params.bind(tape, false);
        let logits = self.heads.forward(tape, &hb, &feats, t_hat, labels)?;
        let adv = hinge_g_on_tape(tape, &logits)?;

        let mut loss = tape.scale(adv, cfg.lambda_adv)?;
        let mut distill = None;
        if let Some(target) = teacher_x0 {
            let target = tape.constant(target.clone());
            let diff = tape.sub(xhat, target)?;
            let sq = tape.square(diff)?;
            let mse = tape.mean(sq)?;
            let d = tape.scale(mse, cfg.lambda_distill)?;
            loss = tape.add(loss, d)?;
            distill = Some(mse);
        }
        Ok((loss, xhat, feats, logits, distill))
    }

    /// Generator loss as a function of the student weights, recorded on
    /// `tape`, for gradient checks. Noise and times are supplied explicitly;
    /// `teacher_x0` is the distillation target, used when its weight is nonzero.
    #[allow(clippy::too_many_arguments)]
    pub fn generator_loss_on_tape(
        &self,
        tape: &mut Tape,
        student: &Bound,
        x_t: &Tensor,
        ts: &[f64],
        labels: &[usize],
        image: Option<&Tensor>,
        t_hat: &[f64],
        eps2: &Tensor,
        teacher_x0: Option<&Tensor>,
    ) -> Result<Var> {
        Ok(self
            .generator_graph(tape, student, x_t, ts, labels, image, t_hat, eps2, teacher_x0)?
            .0)
    }

    /// Runs steps until `iters` have been taken, passing each record to `log`.
    pub fn run_until(&mut self, source: &DataProvider, iters: u64, mut log: impl FnMut(&LossRecord)) -> Result<()> {
        while self.iter < iters {
            let rec = self.step(source)?;
            log(&rec);
        }
        Ok(())
    }
}

/// Distills an inpainting student: real data with fresh masks per batch,
/// image conditioning on both branches, and a distillation loss.
pub fn distill_inpainting(
    cfg: DistillConfig,
    teacher: DenoiserParams,
    student_init: DenoiserParams,
    data: LatentBatch,
    mask: MaskKind,
    log: impl FnMut(&LossRecord),
) -> Result<Distiller> {
    if cfg.data_source != DataSource::Real {
        return Err(invalid("inpainting", "data_source must be real"));
    }
    if cfg.lambda_distill <= 0.0 {
        return Err(invalid("inpainting", "lambda_distill must be > 0"));
    }
    if teacher.arch.grid().is_none() || teacher.arch.cond_channels != teacher.arch.data_shape[0] + 1 {
        return Err(invalid(
            "inpainting",
            "teacher must be a grid model with [masked_input ++ mask] channels",
        ));
    }
    let provider = DataProvider::new(data, Some(mask))?;
    let iters = cfg.iters;
    let mut d = Distiller::new(cfg, teacher, student_init)?;
    d.run_until(&provider, iters, log)?;
    Ok(d)
}
