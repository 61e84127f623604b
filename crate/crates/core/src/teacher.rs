//! Rectified-flow teacher pretraining, guidance and synthetic data.

use ladd_autodiff::{AdamState, AutodiffError, Tape, Tensor, Var};
use rand::Rng;

use crate::data::{build_inpaint_batch, LatentBatch, MaskKind, ToySpec};
use crate::error::{invalid, LaddError, Result};
use crate::flow::{euler_from, forward_diffuse_rows, row_scale, Conditioning, LogitNormal};
use crate::nets::{Bound, DenoiserArch, DenoiserParams};
use crate::rng::{normal, rng_for, split_index, split_seed, LaddRng};

/// Settings for score-matching pretraining with `lambda(t) = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherTrainConfig {
    pub spec: ToySpec,
    pub arch: DenoiserArch,
    pub iters: u64,
    pub batch: usize,
    pub lr: f64,
    pub cond_dropout_prob: f64,
    pub time_dist: LogitNormal,
    pub seed: u64,
    /// Inpainting masks drawn per sample; the net then sees
    /// `[masked_input ++ mask]` as image conditioning.
    pub mask: Option<MaskKind>,
}

impl TeacherTrainConfig {
    pub fn new(spec: ToySpec, arch: DenoiserArch) -> Self {
        TeacherTrainConfig {
            spec,
            arch,
            iters: 2000,
            batch: 256,
            lr: 1e-3,
            cond_dropout_prob: 0.1,
            time_dist: LogitNormal { m: 0.0, s: 1.0 },
            seed: 0,
            mask: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        self.arch.validate()?;
        self.time_dist.validate()?;
        if self.iters < 1 {
            return Err(invalid("teacher config", "iters must be >= 1"));
        }
        if self.batch < 1 {
            return Err(invalid("teacher config", "batch must be >= 1"));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(invalid("teacher config", format!("lr {} must be >= 0", self.lr)));
        }
        if !(0.0..1.0).contains(&self.cond_dropout_prob) {
            return Err(invalid(
                "teacher config",
                format!("cond_dropout_prob {} outside [0, 1)", self.cond_dropout_prob),
            ));
        }
        if self.arch.data_shape != self.spec.data_shape() || self.arch.n_classes != self.spec.n_classes() {
            return Err(invalid("teacher config", "architecture does not match the data spec"));
        }
        let want = if self.mask.is_some() {
            self.spec.data_shape()[0] + 1
        } else {
            0
        };
        if self.mask.is_some() && self.spec.data_shape().len() != 3 {
            return Err(invalid("teacher config", "masks need grid data"));
        }
        if self.arch.cond_channels != want {
            return Err(invalid(
                "teacher config",
                format!("cond_channels {} expected {want}", self.arch.cond_channels),
            ));
        }
        Ok(())
    }
}

/// Replaces each label by `null` with probability `p`.
pub fn apply_cond_dropout<R: Rng + ?Sized>(labels: &[usize], p: f64, null: usize, rng: &mut R) -> Vec<usize> {
    labels
        .iter()
        .map(|&l| if rng.random::<f64>() < p { null } else { l })
        .collect()
}

/// Maps a non-finite tape value to a divergence report for `iter`.
pub(crate) fn diverged(iter: u64) -> impl Fn(LaddError) -> LaddError {
    move |e| match e {
        LaddError::Autodiff(AutodiffError::NonFinite { .. }) => LaddError::Diverged { iter, loss: f64::NAN },
        other => other,
    }
}

/// Mean of `|| x_t - t F(x_t, t) - x0 ||^2` over all elements, recorded on
/// `tape` with the given bound weights.
#[allow(clippy::too_many_arguments)]
pub fn teacher_loss(
    params: &DenoiserParams,
    tape: &mut Tape,
    bound: &Bound,
    x0: &Tensor,
    eps: &Tensor,
    ts: &[f64],
    labels: &[usize],
    image: Option<&Tensor>,
) -> Result<Var> {
    let x_t = forward_diffuse_rows(x0, eps, ts)?;
    let scale = Tensor::new(x0.shape().to_vec(), row_scale(x0, ts)?)?;
    let xv = tape.constant(x_t);
    let img = image.map(|i| tape.constant(i.clone()));
    let (f, _) = params.forward_bound(tape, bound, xv, ts, labels, img)?;
    let tv = tape.constant(scale);
    let tf = tape.mul(tv, f)?;
    let d = tape.sub(xv, tf)?;
    let target = tape.constant(x0.clone());
    let diff = tape.sub(d, target)?;
    let sq = tape.square(diff)?;
    Ok(tape.mean(sq)?)
}

/// Resumable pretraining state.
#[derive(Clone, Debug)]
pub struct TeacherTrainer {
    pub cfg: TeacherTrainConfig,
    pub params: DenoiserParams,
    pub adam: AdamState,
    pub rng: LaddRng,
    pub iter: u64,
    pub losses: Vec<f64>,
}

impl TeacherTrainer {
    pub fn new(cfg: TeacherTrainConfig) -> Result<Self> {
        cfg.validate()?;
        let params = DenoiserParams::init(&cfg.arch, split_seed(cfg.seed, "teacher-init"))?;
        let adam = AdamState::with_lr(cfg.lr, params.params.tensors());
        let rng = rng_for(cfg.seed, "teacher-train");
        Ok(TeacherTrainer {
            cfg,
            params,
            adam,
            rng,
            iter: 0,
            losses: Vec::new(),
        })
    }

    /// One optimizer step; returns the batch loss.
    pub fn step(&mut self) -> Result<f64> {
        let cfg = &self.cfg;
        let iter = self.iter;
        let mut batch = cfg.spec.sample_real(cfg.batch, &mut self.rng)?;
        if let Some(kind) = cfg.mask {
            batch = build_inpaint_batch(batch, kind, &mut self.rng)?;
        }
        let ts = cfg.time_dist.sample_n(cfg.batch, &mut self.rng);
        let eps = Tensor::randn(batch.x0.shape().to_vec(), &mut self.rng);
        let labels = apply_cond_dropout(&batch.cond, cfg.cond_dropout_prob, cfg.arch.null_class(), &mut self.rng);
        let image = batch.conditioning()?.image;

        let mut tape = Tape::new();
        let bound = self.params.params.bind(&mut tape, true);
        let loss = teacher_loss(
            &self.params,
            &mut tape,
            &bound,
            &batch.x0,
            &eps,
            &ts,
            &labels,
            image.as_ref(),
        )
        .map_err(diverged(iter))?;
        let value = tape.value(loss).item()?;
        if !value.is_finite() {
            return Err(LaddError::Diverged { iter, loss: value });
        }
        tape.backward(loss)?;
        let grads = bound.grads(&tape);
        self.adam
            .step(self.params.params.tensors_mut(), &grads)
            .map_err(|e| diverged(iter)(e.into()))?;
        self.iter += 1;
        self.losses.push(value);
        Ok(value)
    }

    /// Steps until `iters` optimizer steps have been taken in total.
    pub fn run_until(&mut self, iters: u64) -> Result<()> {
        while self.iter < iters {
            self.step()?;
        }
        Ok(())
    }

    /// The trained weights, marked frozen.
    pub fn into_params(self) -> DenoiserParams {
        let mut p = self.params;
        p.frozen = true;
        p
    }
}

/// Trains a teacher for `cfg.iters` steps; returns frozen weights and the
/// per-iteration losses.
pub fn train_teacher(cfg: &TeacherTrainConfig) -> Result<(DenoiserParams, Vec<f64>)> {
    let mut trainer = TeacherTrainer::new(cfg.clone())?;
    trainer.run_until(cfg.iters)?;
    let losses = std::mem::take(&mut trainer.losses);
    Ok((trainer.into_params(), losses))
}

/// Guided velocity from a denoiser, see [`crate::flow::cfg_velocity`].
pub fn cfg_velocity(p: &DenoiserParams, x_t: &Tensor, t: f64, cond: &Conditioning, w: f64) -> Result<Tensor> {
    if w < 0.0 {
        return Err(invalid("guidance", format!("weight {w} must be >= 0")));
    }
    crate::flow::cfg_velocity(p, x_t, t, cond, w)
}

const SHARD: usize = 512;

/// One guided Euler trajectory per label. Shards of 512 labels run on
/// separate threads with split seeds and are concatenated in label order.
pub fn generate_synthetic<R: Rng + ?Sized>(
    p: &DenoiserParams,
    conds: &[usize],
    w: f64,
    n_steps: usize,
    rng: &mut R,
) -> Result<LatentBatch> {
    if conds.is_empty() {
        return Err(invalid("synthetic data", "no conditions"));
    }
    if !(w.is_finite() && w >= 0.0) {
        return Err(invalid("guidance", format!("weight {w} must be >= 0")));
    }
    let base: u64 = rng.random();
    let shards: Vec<&[usize]> = conds.chunks(SHARD).collect();
    let workers = std::thread::available_parallelism()
        .map_or(1, |n| n.get())
        .min(shards.len());
    let run_shard = |i: usize| -> Result<Tensor> {
        let labels = shards[i];
        let mut srng = rng_for(split_index(base, i as u64), "synthetic-shard");
        let mut shape = vec![labels.len()];
        shape.extend(&p.arch.data_shape);
        let data = (0..shape.iter().product::<usize>())
            .map(|_| normal(&mut srng))
            .collect();
        let noise = Tensor::new(shape, data)?;
        euler_from(p, noise, &Conditioning::labels(labels.to_vec()), n_steps, w)
    };
    let mut outputs: Vec<Option<Result<Tensor>>> = (0..shards.len()).map(|_| None).collect();
    if workers <= 1 {
        for (i, slot) in outputs.iter_mut().enumerate() {
            *slot = Some(run_shard(i));
        }
    } else {
        std::thread::scope(|scope| {
            let chunks: Vec<Vec<usize>> = (0..workers)
                .map(|k| (k..shards.len()).step_by(workers).collect())
                .collect();
            let handles: Vec<_> = chunks
                .into_iter()
                .map(|idx| {
                    let run_shard = &run_shard;
                    scope.spawn(move || idx.into_iter().map(|i| (i, run_shard(i))).collect::<Vec<_>>())
                })
                .collect();
            for h in handles {
                for (i, r) in h.join().expect("synthetic worker panicked") {
                    outputs[i] = Some(r);
                }
            }
        });
    }
    let parts = outputs
        .into_iter()
        .map(|o| o.expect("every shard ran"))
        .collect::<Result<Vec<_>>>()?;
    LatentBatch::new(Tensor::stack_rows(&parts)?, conds.to_vec())
}
