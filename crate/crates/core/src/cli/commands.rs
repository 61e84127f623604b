//! The command implementations behind the `ladd` binary.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::Serialize;

use super::checkpoint::{
    dataset_checkpoint, dataset_from, denoiser_checkpoint, denoiser_from, distiller_checkpoint, restore_distiller,
    restore_trainer, trainer_checkpoint, Checkpoint,
};
use super::config::RunConfig;
use super::csv::write_metrics;
use super::plots::emit_plots;
use crate::distill::{distill_inpainting, DataProvider, DataSource, Distiller, LossRecord};
use crate::error::{io_err, LaddError, Result};
use crate::evalbench::{evaluate_inpainting, run_sweep, InpaintEval, Metric, MetricsRow, Zoo};
use crate::flow::{consistency_multistep, Conditioning, CountingModel, DiscreteTimeGrid};
use crate::nets::DenoiserParams;
use crate::rng::rng_for;
use crate::teacher::{generate_synthetic, TeacherTrainer};

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Command {
    TrainTeacher,
    GenerateSynthetic,
    Distill,
    DistillInpaint,
    Sample,
    Eval,
    Sweep,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::TrainTeacher => "train-teacher",
            Command::GenerateSynthetic => "generate-synthetic",
            Command::Distill => "distill",
            Command::DistillInpaint => "distill-inpaint",
            Command::Sample => "sample",
            Command::Eval => "eval",
            Command::Sweep => "sweep",
        }
    }
}

fn config_err(msg: impl Into<String>) -> LaddError {
    LaddError::Config(msg.into())
}

/// `{out_dir}/{command}-{config_hash}-{seed}`.
pub fn run_dir(cfg: &RunConfig, command: Command) -> PathBuf {
    Path::new(&cfg.run.out_dir).join(format!("{}-{}-{}", command.name(), cfg.config_hash(), cfg.run.seed))
}

/// Runs `command`, writing artifacts and `config.toml` under its run
/// directory, which is returned. `steps` applies to `sample` only.
pub fn execute(command: Command, cfg: &RunConfig, steps: Option<usize>) -> Result<PathBuf> {
    if steps.is_some() && command != Command::Sample {
        return Err(config_err("--steps applies to `sample` only"));
    }
    let dir = run_dir(cfg, command);
    fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    let snapshot = dir.join("config.toml");
    fs::write(&snapshot, cfg.canonical()).map_err(|e| io_err(&snapshot, e))?;
    match command {
        Command::TrainTeacher => train_teacher(cfg, &dir),
        Command::GenerateSynthetic => generate(cfg, &dir),
        Command::Distill => distill(cfg, &dir),
        Command::DistillInpaint => distill_inpaint(cfg, &dir),
        Command::Sample => sample(cfg, &dir, steps.unwrap_or(1)),
        Command::Eval => eval(cfg, &dir),
        Command::Sweep => sweep(cfg, &dir),
    }?;
    Ok(dir)
}

/// Loads a checkpoint named by a config key; absence is a config error.
fn referenced(path: &Option<String>, key: &str) -> Result<Checkpoint> {
    let path = path
        .as_ref()
        .ok_or_else(|| config_err(format!("`{key}` is required")))?;
    let p = Path::new(path);
    if !p.is_file() {
        return Err(config_err(format!("`{key}` = {path}: no such checkpoint")));
    }
    Checkpoint::load(p)
}

fn frozen_teacher(cfg: &RunConfig) -> Result<DenoiserParams> {
    let mut t = denoiser_from(&referenced(&cfg.run.teacher, "run.teacher")?)?;
    t.frozen = true;
    let spec = cfg.data.spec();
    if t.arch.data_shape != spec.data_shape() || t.arch.n_classes != spec.n_classes() {
        return Err(config_err("run.teacher does not match the [data] section"));
    }
    Ok(t)
}

/// A CSV log; on resume, rows from `start` on are dropped before appending.
fn open_log(path: &Path, header: &str, start: u64) -> Result<BufWriter<File>> {
    let mut kept = vec![header.to_string()];
    if start > 0 {
        if let Ok(text) = fs::read_to_string(path) {
            kept.extend(
                text.lines()
                    .skip(1)
                    .filter(|l| {
                        l.split(',')
                            .next()
                            .and_then(|v| v.parse::<u64>().ok())
                            .is_some_and(|i| i < start)
                    })
                    .map(str::to_string),
            );
        }
    }
    let mut w = BufWriter::new(File::create(path).map_err(|e| io_err(path, e))?);
    for line in kept {
        writeln!(w, "{line}").map_err(|e| io_err(path, e))?;
    }
    Ok(w)
}

fn save_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("plain data serializes");
    fs::write(path, text + "\n").map_err(|e| io_err(path, e))
}

fn train_teacher(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let hash = cfg.config_hash();
    let mut trainer = TeacherTrainer::new(cfg.teacher_config()).map_err(|e| config_err(e.to_string()))?;
    if cfg.run.resume.is_some() {
        restore_trainer(&mut trainer, &referenced(&cfg.run.resume, "run.resume")?)?;
    }
    let state = dir.join("state.ckpt");
    let log_path = dir.join("losses.csv");
    let mut log = open_log(&log_path, "iter,loss", trainer.iter)?;
    let every = cfg.run.checkpoint_every;
    while trainer.iter < cfg.teacher.iters {
        let iter = trainer.iter;
        let loss = trainer.step()?;
        writeln!(log, "{iter},{loss}").map_err(|e| io_err(&log_path, e))?;
        if every > 0 && trainer.iter % every == 0 {
            log.flush().map_err(|e| io_err(&log_path, e))?;
            trainer_checkpoint(&trainer, &hash).save(&state)?;
        }
    }
    log.flush().map_err(|e| io_err(&log_path, e))?;
    trainer_checkpoint(&trainer, &hash).save(&state)?;
    let teacher = trainer.into_params();
    denoiser_checkpoint(&teacher, &hash).save(&dir.join("teacher.ckpt"))?;
    if teacher.arch.grid().is_none() {
        let run_id = dir_name(dir);
        let mut zoo = Zoo::new(cfg.experiment())?;
        let mut rows = zoo.euler_rows(&teacher, cfg.synthetic.n_steps, 1.0, &run_id)?;
        if cfg.synthetic.cfg_w != 1.0 {
            rows.extend(zoo.euler_rows(&teacher, cfg.synthetic.n_steps, cfg.synthetic.cfg_w, &run_id)?);
        }
        write_metrics(&dir.join("metrics.csv"), &rows)?;
    }
    Ok(())
}

fn dir_name(dir: &Path) -> String {
    dir.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn generate(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let teacher = frozen_teacher(cfg)?;
    if teacher.arch.cond_channels > 0 {
        return Err(config_err("synthetic data needs a teacher without image conditioning"));
    }
    let s = &cfg.synthetic;
    let mut rng = rng_for(cfg.run.seed, "synthetic-labels");
    let k = cfg.data.spec().n_classes();
    let labels: Vec<usize> = (0..s.n_samples).map(|_| rng.random_range(0..k)).collect();
    let data = generate_synthetic(&teacher, &labels, s.cfg_w, s.n_steps, &mut rng)?;
    let mut ck = dataset_checkpoint(&data, &cfg.config_hash());
    ck.meta.insert("cfg_w".into(), serde_json::json!(s.cfg_w));
    ck.meta.insert("n_steps".into(), serde_json::json!(s.n_steps));
    ck.save(&dir.join("dataset.ckpt"))
}

const LOSS_HEADER: &str = "iter,l_d,l_g_adv,l_distill,r1,mean_t,mean_t_hat";

fn loss_line(r: &LossRecord) -> String {
    format!(
        "{},{},{},{},{},{},{}",
        r.iter,
        r.l_d,
        r.l_g_adv,
        r.l_distill,
        r.r1,
        r.mean_t(),
        r.mean_t_hat()
    )
}

fn student_init(cfg: &RunConfig, teacher: &DenoiserParams) -> Result<DenoiserParams> {
    match cfg.run.student {
        Some(_) => denoiser_from(&referenced(&cfg.run.student, "run.student")?),
        None => Ok(teacher.clone()),
    }
}

fn save_student(student: &DenoiserParams, hash: &str, run_id: &str, seed: u64, path: &Path) -> Result<()> {
    let mut s = student.clone();
    s.frozen = true;
    let mut ck = denoiser_checkpoint(&s, hash);
    ck.meta.insert("run_id".into(), serde_json::json!(run_id));
    ck.meta.insert("seed".into(), serde_json::json!(seed));
    ck.save(path)
}

fn distill(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let hash = cfg.config_hash();
    let dc = cfg.distill_config()?;
    let teacher = frozen_teacher(cfg)?;
    let student = student_init(cfg, &teacher)?;
    let data = match dc.data_source {
        DataSource::Synthetic => dataset_from(&referenced(&cfg.run.dataset, "run.dataset")?)?,
        DataSource::Real => {
            let mut rng = rng_for(cfg.run.seed, "real-data");
            cfg.data.spec().sample_real(cfg.synthetic.n_samples, &mut rng)?
        }
    };
    let provider = DataProvider::new(data, None)?;
    let mut d = Distiller::new(dc, teacher, student).map_err(|e| config_err(e.to_string()))?;
    if cfg.run.resume.is_some() {
        restore_distiller(&mut d, &referenced(&cfg.run.resume, "run.resume")?)?;
    }
    let state = dir.join("state.ckpt");
    let log_path = dir.join("losses.csv");
    let mut log = open_log(&log_path, LOSS_HEADER, d.iter)?;
    let every = cfg.run.checkpoint_every;
    while d.iter < cfg.distill.iters {
        let rec = d.step(&provider)?;
        writeln!(log, "{}", loss_line(&rec)).map_err(|e| io_err(&log_path, e))?;
        if every > 0 && d.iter % every == 0 {
            log.flush().map_err(|e| io_err(&log_path, e))?;
            distiller_checkpoint(&d, &hash).save(&state)?;
        }
    }
    log.flush().map_err(|e| io_err(&log_path, e))?;
    distiller_checkpoint(&d, &hash).save(&state)?;
    let run_id = dir_name(dir);
    save_student(&d.student, &hash, &run_id, cfg.run.seed, &dir.join("student.ckpt"))?;
    if d.student.arch.grid().is_none() {
        let rows = Zoo::new(cfg.experiment())?.evaluate_student(&d.student, &run_id, &hash, cfg.run.seed)?;
        write_metrics(&dir.join("metrics.csv"), &rows)?;
    }
    Ok(())
}

fn distill_inpaint(cfg: &RunConfig, dir: &Path) -> Result<()> {
    if !cfg.inpaint.enabled {
        return Err(config_err("distill-inpaint needs inpaint.enabled = true"));
    }
    let hash = cfg.config_hash();
    let dc = cfg.distill_config()?;
    if dc.data_source != DataSource::Real || dc.lambda_distill <= 0.0 {
        return Err(config_err(
            "distill-inpaint needs distill.data_source = \"real\" and distill.lambda_distill > 0",
        ));
    }
    let teacher = frozen_teacher(cfg)?;
    let student = student_init(cfg, &teacher)?;
    let spec = cfg.data.spec();
    let mut rng = rng_for(cfg.run.seed, "inpaint-data");
    let data = spec.sample_real(cfg.inpaint.train_samples, &mut rng)?;
    let log_path = dir.join("losses.csv");
    let mut log = open_log(&log_path, LOSS_HEADER, 0)?;
    let mut write_err = None;
    let d = distill_inpainting(dc, teacher.clone(), student, data, cfg.inpaint.mask_kind(), |r| {
        if let Err(e) = writeln!(log, "{}", loss_line(r)) {
            write_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_err {
        return Err(io_err(&log_path, e));
    }
    log.flush().map_err(|e| io_err(&log_path, e))?;
    distiller_checkpoint(&d, &hash).save(&dir.join("state.ckpt"))?;
    let run_id = dir_name(dir);
    save_student(&d.student, &hash, &run_id, cfg.run.seed, &dir.join("student.ckpt"))?;

    let eval = InpaintEval {
        n_samples: cfg.inpaint.eval_samples,
        mask: cfg.inpaint.mask_kind(),
        teacher_steps: cfg.inpaint.teacher_steps,
        n_proj: cfg.eval.n_proj,
        seed: cfg.eval.seed,
    };
    let report = evaluate_inpainting(&d.student, &teacher, &spec, &eval)?;
    let row = |run_id: String, metric, value, step| MetricsRow {
        run_id,
        config_hash: hash.clone(),
        metric,
        value,
        seed: cfg.run.seed,
        step,
        n_samples: eval.n_samples,
    };
    let rows = vec![
        row(run_id.clone(), Metric::VisibleMse, report.visible_mse, 1),
        row(run_id.clone(), Metric::MaskedSlicedW2, report.student_masked_w2, 1),
        row(
            format!("{run_id}/teacher"),
            Metric::MaskedSlicedW2,
            report.teacher_masked_w2,
            eval.teacher_steps,
        ),
    ];
    write_metrics(&dir.join("metrics.csv"), &rows)
}

#[derive(Serialize)]
struct SampleReport {
    steps: usize,
    times: Vec<f64>,
    evaluations: usize,
    n_samples: usize,
}

fn sample(cfg: &RunConfig, dir: &Path, steps: usize) -> Result<()> {
    let grid = DiscreteTimeGrid::for_steps(steps).map_err(|e| config_err(e.to_string()))?;
    let student = denoiser_from(&referenced(&cfg.run.student, "run.student")?)?;
    if student.arch.cond_channels > 0 {
        return Err(config_err("sample needs a student without image conditioning"));
    }
    let n = cfg.eval.n_samples;
    let mut rng = rng_for(cfg.run.seed, "sample");
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..student.arch.n_classes)).collect();
    let counter = CountingModel::new(&student);
    let x = consistency_multistep(&counter, &Conditioning::labels(labels.clone()), &grid.times, &mut rng)?;
    let batch = crate::data::LatentBatch::new(x, labels)?;
    dataset_checkpoint(&batch, &cfg.config_hash()).save(&dir.join("samples.ckpt"))?;
    save_json(
        &dir.join("sample.json"),
        &SampleReport {
            steps,
            times: grid.times,
            evaluations: counter.calls(),
            n_samples: n,
        },
    )
}

/// Re-scores a saved student under the run id, hash and seed it was saved with.
fn eval(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let ck = referenced(&cfg.run.student, "run.student")?;
    let student = denoiser_from(&ck)?;
    if student.arch.grid().is_some() {
        return Err(config_err("eval scores vector students only"));
    }
    let run_id = ck
        .meta
        .get("run_id")
        .and_then(|v| v.as_str())
        .map(str::to_string)
        .ok_or_else(|| config_err("run.student carries no run_id"))?;
    let seed = ck.meta_u64("seed")?;
    let rows = Zoo::new(cfg.experiment())?.evaluate_student(&student, &run_id, &ck.config_hash, seed)?;
    write_metrics(&dir.join("metrics.csv"), &rows)
}

fn sweep(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let spec = cfg.sweep_spec()?;
    spec.validate().map_err(|e| config_err(e.to_string()))?;
    let rows = run_sweep(&spec)?;
    let csv = dir.join("metrics.csv");
    write_metrics(&csv, &rows)?;
    if cfg.sweep.plots {
        emit_plots(&csv, spec.axis, &dir.join("plots"))?;
    }
    Ok(())
}
