//! Rectified-flow mathematics: forward diffusion, the denoiser
//! parameterization, time distributions, a Gaussian oracle and samplers.
//!
//! Conventions: `x_t = (1 - t) x0 + t eps`, the network predicts the velocity
//! `F`, and the denoiser is `D(x_t, t) = x_t - t F(x_t, t)`.

use std::sync::atomic::{AtomicUsize, Ordering};

use ladd_autodiff::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::rng::normal;

/// `t = sigmoid(z)` with `z ~ N(m, s^2)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogitNormal {
    pub m: f64,
    pub s: f64,
}

impl LogitNormal {
    pub fn new(m: f64, s: f64) -> Result<Self> {
        let d = LogitNormal { m, s };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.m.is_finite() || !self.s.is_finite() || self.s <= 0.0 {
            return Err(invalid(
                "logit-normal",
                format!("need finite m and s > 0, got m={} s={}", self.m, self.s),
            ));
        }
        Ok(())
    }

    /// One draw, clamped away from the endpoints so it stays inside (0, 1).
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let z = self.m + self.s * normal(rng);
        let t = 1.0 / (1.0 + (-z).exp());
        t.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
    }

    pub fn sample_n<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<f64> {
        (0..n).map(|_| self.sample(rng)).collect()
    }

    /// Quantile function `sigmoid(m + s * Phi^-1(p))`.
    pub fn quantile(&self, p: f64) -> f64 {
        use statrs::distribution::{ContinuousCDF, Normal};
        let z = Normal::standard().inverse_cdf(p);
        1.0 / (1.0 + (-(self.m + self.s * z)).exp())
    }
}

/// Discrete timesteps used by multi-step students, with sampling weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscreteTimeGrid {
    pub times: Vec<f64>,
    pub probs: Vec<f64>,
}

impl Default for DiscreteTimeGrid {
    fn default() -> Self {
        DiscreteTimeGrid {
            times: vec![1.0, 0.75, 0.5, 0.25],
            probs: vec![0.7, 0.1, 0.1, 0.1],
        }
    }
}

fn check_probs(probs: &[f64], len: usize) -> Result<()> {
    if probs.len() != len {
        return Err(invalid(
            "time grid",
            format!("{} probabilities for {len} times", probs.len()),
        ));
    }
    if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(invalid(
            "time grid",
            format!("negative or non-finite probability in {probs:?}"),
        ));
    }
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > 1e-12 {
        return Err(invalid("time grid", format!("probabilities sum to {total}, not 1")));
    }
    Ok(())
}

impl DiscreteTimeGrid {
    pub fn new(times: Vec<f64>, probs: Vec<f64>) -> Result<Self> {
        let g = DiscreteTimeGrid { times, probs };
        g.validate()?;
        Ok(g)
    }

    /// Uniformly weighted grid over the given times.
    pub fn uniform(times: Vec<f64>) -> Result<Self> {
        let n = times.len().max(1);
        Self::new(times, vec![1.0 / n as f64; n])
    }

    /// Inference grid for a 1, 2 or 4 step student.
    pub fn for_steps(steps: usize) -> Result<Self> {
        match steps {
            1 => Self::uniform(vec![1.0]),
            2 => Self::uniform(vec![1.0, 0.5]),
            4 => Self::uniform(vec![1.0, 0.75, 0.5, 0.25]),
            _ => Err(invalid("steps", format!("{steps} is not one of 1, 2, 4"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.times.is_empty() {
            return Err(invalid("time grid", "no times"));
        }
        if self.times.iter().any(|t| !(*t > 0.0 && *t <= 1.0)) {
            return Err(invalid("time grid", format!("times {:?} outside (0, 1]", self.times)));
        }
        if self.times.windows(2).any(|w| w[1] >= w[0]) {
            return Err(invalid(
                "time grid",
                format!("times {:?} are not strictly descending", self.times),
            ));
        }
        check_probs(&self.probs, self.times.len())
    }

    /// Draws an index into `times` with the given weights.
    pub fn sample_index<R: Rng + ?Sized>(&self, probs: &[f64], rng: &mut R) -> Result<usize> {
        check_probs(probs, self.times.len())?;
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut last = 0;
        for (i, &p) in probs.iter().enumerate() {
            if p > 0.0 {
                last = i;
            }
            acc += p;
            if u < acc {
                return Ok(i);
            }
        }
        Ok(last)
    }
}

/// Exact posterior mean for `x0 ~ N(0, c^2 I)` under the linear schedule.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussianOracle {
    pub c: f64,
}

impl GaussianOracle {
    pub fn new(c: f64) -> Result<Self> {
        if !(c.is_finite() && c > 0.0) {
            return Err(invalid("oracle", format!("data std must be > 0, got {c}")));
        }
        Ok(GaussianOracle { c })
    }

    /// `(1 - t) c^2 / ((1 - t)^2 c^2 + t^2)`.
    pub fn coefficient(&self, t: f64) -> f64 {
        let c2 = self.c * self.c;
        (1.0 - t) * c2 / ((1.0 - t) * (1.0 - t) * c2 + t * t)
    }

    pub fn denoise(&self, x_t: &Tensor, t: f64) -> Result<Tensor> {
        check_t(t)?;
        let k = self.coefficient(t);
        Ok(x_t.map(|x| k * x))
    }

    /// The velocity whose denoiser output is the posterior mean.
    pub fn velocity(&self, x_t: &Tensor, t: f64) -> Result<Tensor> {
        check_t(t)?;
        if t == 0.0 {
            return Ok(Tensor::zeros(x_t.shape().to_vec()));
        }
        let k = self.coefficient(t);
        Ok(x_t.map(|x| (x - k * x) / t))
    }
}

fn check_t(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(invalid("time", format!("{t} outside [0, 1]")));
    }
    Ok(())
}

/// `(1 - t) x0 + t eps`.
pub fn forward_diffuse(x0: &Tensor, eps: &Tensor, t: f64) -> Result<Tensor> {
    check_t(t)?;
    Ok(x0.zip_map(eps, "forward_diffuse", |x, e| (1.0 - t) * x + t * e)?)
}

/// Forward diffusion with one time per leading-axis sample.
pub fn forward_diffuse_rows(x0: &Tensor, eps: &Tensor, ts: &[f64]) -> Result<Tensor> {
    let per = row_scale(x0, ts)?;
    let mut out = x0.zip_map(eps, "forward_diffuse", |x, _| x)?;
    for (((o, &x), &e), &t) in out.data_mut().iter_mut().zip(x0.data()).zip(eps.data()).zip(&per) {
        *o = (1.0 - t) * x + t * e;
    }
    Ok(out)
}

/// `x_t - t f`.
pub fn denoise(f_value: &Tensor, x_t: &Tensor, t: f64) -> Result<Tensor> {
    check_t(t)?;
    Ok(x_t.zip_map(f_value, "denoise", |x, f| x - t * f)?)
}

/// Denoising with one time per leading-axis sample.
pub fn denoise_rows(f_value: &Tensor, x_t: &Tensor, ts: &[f64]) -> Result<Tensor> {
    let per = row_scale(x_t, ts)?;
    let mut out = x_t.zip_map(f_value, "denoise", |x, _| x)?;
    for (((o, &x), &f), &t) in out.data_mut().iter_mut().zip(x_t.data()).zip(f_value.data()).zip(&per) {
        *o = x - t * f;
    }
    Ok(out)
}

/// Expands per-row times to one value per element.
pub(crate) fn row_scale(x: &Tensor, ts: &[f64]) -> Result<Vec<f64>> {
    let rows = x.shape().first().copied().unwrap_or(0);
    if rows != ts.len() {
        return Err(invalid("time", format!("{} times for a batch of {rows}", ts.len())));
    }
    for &t in ts {
        check_t(t)?;
    }
    let inner = x.numel() / rows.max(1);
    Ok(ts.iter().flat_map(|&t| std::iter::repeat_n(t, inner)).collect())
}

/// Per-sample conditioning: class labels and an optional image tensor
/// (masked input and mask channels for inpainting).
#[derive(Clone, Debug, PartialEq)]
pub struct Conditioning {
    pub labels: Vec<usize>,
    pub image: Option<Tensor>,
}

impl Conditioning {
    pub fn labels(labels: Vec<usize>) -> Self {
        Conditioning { labels, image: None }
    }

    pub fn with_image(labels: Vec<usize>, image: Tensor) -> Self {
        Conditioning {
            labels,
            image: Some(image),
        }
    }

    pub fn batch(&self) -> usize {
        self.labels.len()
    }
}

/// Anything that predicts a rectified-flow velocity for a batch.
pub trait VelocityModel {
    /// Velocity at a batch `x_t` (leading axis = batch) and shared time `t`.
    fn velocity(&self, x_t: &Tensor, t: f64, cond: &Conditioning, drop_cond: bool) -> Result<Tensor>;

    /// Per-sample data shape, without the batch axis.
    fn sample_shape(&self) -> Vec<usize>;
}

/// Classifier-free guidance `F_null + w (F_cond - F_null)`; `w = 1` makes a
/// single conditional call.
pub fn cfg_velocity(model: &dyn VelocityModel, x_t: &Tensor, t: f64, cond: &Conditioning, w: f64) -> Result<Tensor> {
    if !w.is_finite() {
        return Err(invalid("guidance", format!("weight {w} is not finite")));
    }
    if w == 1.0 {
        return model.velocity(x_t, t, cond, false);
    }
    let f_null = model.velocity(x_t, t, cond, true)?;
    let f_cond = model.velocity(x_t, t, cond, false)?;
    Ok(f_null.zip_map(&f_cond, "cfg_velocity", |n, c| n + w * (c - n))?)
}

fn noise_for<R: Rng + ?Sized>(model: &dyn VelocityModel, cond: &Conditioning, rng: &mut R) -> Result<Tensor> {
    if cond.batch() == 0 {
        return Err(invalid("sampler", "empty batch"));
    }
    let mut shape = vec![cond.batch()];
    shape.extend(model.sample_shape());
    Ok(Tensor::randn(shape, rng))
}

/// Euler integration of the velocity field on a uniform grid from 1 to 0.
pub fn euler_sample<R: Rng + ?Sized>(
    model: &dyn VelocityModel,
    cond: &Conditioning,
    n_steps: usize,
    cfg_w: f64,
    rng: &mut R,
) -> Result<Tensor> {
    let noise = noise_for(model, cond, rng)?;
    euler_from(model, noise, cond, n_steps, cfg_w)
}

/// Euler integration starting from the given noise at `t = 1`.
pub fn euler_from(
    model: &dyn VelocityModel,
    noise: Tensor,
    cond: &Conditioning,
    n_steps: usize,
    cfg_w: f64,
) -> Result<Tensor> {
    if n_steps == 0 {
        return Err(invalid("sampler", "n_steps must be >= 1"));
    }
    let mut x = noise;
    for i in 0..n_steps {
        let t = 1.0 - i as f64 / n_steps as f64;
        let t_next = 1.0 - (i + 1) as f64 / n_steps as f64;
        let f = cfg_velocity(model, &x, t, cond, cfg_w)?;
        let dt = t - t_next;
        x = x.zip_map(&f, "euler", |x, f| x - dt * f)?;
    }
    Ok(x)
}

/// Predict-then-renoise sampling over the grid times, one model call per time.
pub fn consistency_multistep<R: Rng + ?Sized>(
    model: &dyn VelocityModel,
    cond: &Conditioning,
    times: &[f64],
    rng: &mut R,
) -> Result<Tensor> {
    let noise = noise_for(model, cond, rng)?;
    consistency_from(model, noise, cond, times, rng)
}

/// As [`consistency_multistep`], starting from the given noise at `times[0]`.
pub fn consistency_from<R: Rng + ?Sized>(
    model: &dyn VelocityModel,
    noise: Tensor,
    cond: &Conditioning,
    times: &[f64],
    rng: &mut R,
) -> Result<Tensor> {
    if times.is_empty() {
        return Err(invalid("sampler", "empty time grid"));
    }
    let mut x = noise;
    for (i, &t) in times.iter().enumerate() {
        let f = model.velocity(&x, t, cond, false)?;
        let x0 = denoise(&f, &x, t)?;
        match times.get(i + 1) {
            Some(&t_next) => {
                let eps = Tensor::randn(x0.shape().to_vec(), rng);
                x = forward_diffuse(&x0, &eps, t_next)?;
            }
            None => return Ok(x0),
        }
    }
    unreachable!("loop returns on the last grid time")
}

/// Posterior-mean velocity of the Gaussian oracle as a model.
pub struct OracleModel {
    pub oracle: GaussianOracle,
    pub shape: Vec<usize>,
}

impl VelocityModel for OracleModel {
    fn velocity(&self, x_t: &Tensor, t: f64, _cond: &Conditioning, _drop: bool) -> Result<Tensor> {
        self.oracle.velocity(x_t, t)
    }

    fn sample_shape(&self) -> Vec<usize> {
        self.shape.clone()
    }
}

/// Wraps a model and counts velocity evaluations.
pub struct CountingModel<'a> {
    inner: &'a dyn VelocityModel,
    calls: AtomicUsize,
}

impl<'a> CountingModel<'a> {
    pub fn new(inner: &'a dyn VelocityModel) -> Self {
        CountingModel {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }
}

impl VelocityModel for CountingModel<'_> {
    fn velocity(&self, x_t: &Tensor, t: f64, cond: &Conditioning, drop_cond: bool) -> Result<Tensor> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.inner.velocity(x_t, t, cond, drop_cond)
    }

    fn sample_shape(&self) -> Vec<usize> {
        self.inner.sample_shape()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;

    fn t1(v: f64) -> Tensor {
        Tensor::new(vec![1], vec![v]).unwrap()
    }

    struct Constant(f64);

    impl VelocityModel for Constant {
        fn velocity(&self, x_t: &Tensor, _t: f64, _c: &Conditioning, _d: bool) -> Result<Tensor> {
            Ok(x_t.map(|_| self.0))
        }
        fn sample_shape(&self) -> Vec<usize> {
            vec![3]
        }
    }

    #[test]
    fn forward_and_denoise_examples() {
        let (x0, eps) = (t1(2.0), t1(-1.0));
        assert_eq!(forward_diffuse(&x0, &eps, 0.0).unwrap(), x0);
        assert_eq!(forward_diffuse(&x0, &eps, 1.0).unwrap(), eps);
        let xt = forward_diffuse(&x0, &eps, 0.25).unwrap();
        assert_eq!(xt.data(), &[1.25]);
        assert_eq!(denoise(&t1(-3.0), &xt, 0.25).unwrap().data(), &[2.0]);
        assert_eq!(denoise(&t1(0.0), &xt, 0.25).unwrap(), xt);
        assert_eq!(denoise(&t1(9.0), &xt, 0.0).unwrap(), xt);
        assert!(forward_diffuse(&x0, &Tensor::zeros(vec![2]), 0.5).is_err());
        assert!(denoise(&Tensor::zeros(vec![2]), &xt, 0.5).is_err());
        assert!(forward_diffuse(&x0, &eps, 1.5).is_err());
    }

    #[test]
    fn true_velocity_recovers_clean_sample() {
        let mut rng = rng_for(3, "t");
        let x0 = Tensor::randn(vec![64], &mut rng);
        let eps = Tensor::randn(vec![64], &mut rng);
        let v = eps.zip_map(&x0, "v", |e, x| e - x).unwrap();
        for k in 1..=20 {
            let t = k as f64 / 20.0;
            let xt = forward_diffuse(&x0, &eps, t).unwrap();
            let back = denoise(&v, &xt, t).unwrap();
            for (a, b) in back.data().iter().zip(x0.data()) {
                assert!((a - b).abs() < 1e-14, "t={t}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn diffused_variance_is_t_squared() {
        let mut rng = rng_for(4, "t");
        let n = 100_000;
        let x0 = Tensor::full(vec![n], 0.7);
        for &t in &[0.2, 0.5, 0.9] {
            let eps = Tensor::randn(vec![n], &mut rng);
            let xt = forward_diffuse(&x0, &eps, t).unwrap();
            let m = xt.mean();
            let var = xt.data().iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64;
            assert!((var / (t * t) - 1.0).abs() < 0.02, "t={t} var={var}");
        }
    }

    #[test]
    fn row_variants_match_scalar_versions() {
        let mut rng = rng_for(5, "t");
        let x0 = Tensor::randn(vec![3, 2], &mut rng);
        let eps = Tensor::randn(vec![3, 2], &mut rng);
        let ts = [0.1, 0.5, 1.0];
        let xt = forward_diffuse_rows(&x0, &eps, &ts).unwrap();
        let d = denoise_rows(&eps, &xt, &ts).unwrap();
        for (r, &t) in ts.iter().enumerate() {
            let a = forward_diffuse(&x0.rows(r, 1).unwrap(), &eps.rows(r, 1).unwrap(), t).unwrap();
            assert_eq!(xt.rows(r, 1).unwrap(), a);
            let b = denoise(&eps.rows(r, 1).unwrap(), &a, t).unwrap();
            assert_eq!(d.rows(r, 1).unwrap(), b);
        }
        assert!(forward_diffuse_rows(&x0, &eps, &[0.5]).is_err());
    }

    #[test]
    fn logit_normal_samples() {
        let mut rng = rng_for(6, "t");
        let narrow = LogitNormal::new(0.0, 1e-9).unwrap();
        assert!((narrow.sample(&mut rng) - 0.5).abs() < 1e-8);
        let wide = LogitNormal::new(0.0, 40.0).unwrap();
        for _ in 0..10_000 {
            let t = wide.sample(&mut rng);
            assert!(t > 0.0 && t < 1.0);
        }
        assert!(LogitNormal::new(0.0, 0.0).is_err());
        assert!(LogitNormal::new(f64::NAN, 1.0).is_err());
    }

    #[test]
    fn logit_normal_median() {
        let mut rng = rng_for(7, "t");
        let d = LogitNormal::new(1.0, 1.0).unwrap();
        let mut v = d.sample_n(100_000, &mut rng);
        v.sort_by(f64::total_cmp);
        let median = 0.5 * (v[49_999] + v[50_000]);
        assert!((0.721..=0.741).contains(&median), "median {median}");
        assert!((d.quantile(0.5) - 0.731_058_578_630_004_9).abs() < 1e-12);
    }

    #[test]
    fn oracle_examples() {
        let o = GaussianOracle::new(1.0).unwrap();
        let x = t1(0.8);
        assert_eq!(o.denoise(&x, 1.0).unwrap().data(), &[0.0]);
        assert_eq!(o.denoise(&x, 0.0).unwrap().data(), &[0.8]);
        assert!((o.denoise(&x, 0.5).unwrap().data()[0] - 0.8).abs() < 1e-15);
        assert!(GaussianOracle::new(0.0).is_err());
    }

    #[test]
    fn oracle_coefficient_matches_regression() {
        let mut rng = rng_for(8, "oracle");
        let n = 1_000_000;
        for &c in &[1.0, 0.5, 2.0] {
            let o = GaussianOracle::new(c).unwrap();
            for &t in &[0.1, 0.3, 0.5, 0.7, 0.9] {
                let (mut sxy, mut sxx) = (0.0, 0.0);
                for _ in 0..n {
                    let x0 = c * normal(&mut rng);
                    let xt = (1.0 - t) * x0 + t * normal(&mut rng);
                    sxy += xt * x0;
                    sxx += xt * xt;
                }
                let beta = sxy / sxx;
                let k = o.coefficient(t);
                assert!((beta - k).abs() < 0.005 * k.max(1.0), "c={c} t={t}: {beta} vs {k}");
            }
        }
    }

    #[test]
    fn grid_validation_and_sampling() {
        let g = DiscreteTimeGrid::default();
        g.validate().unwrap();
        assert!(DiscreteTimeGrid::new(vec![0.5, 0.75], vec![0.5, 0.5]).is_err());
        assert!(DiscreteTimeGrid::new(vec![1.0], vec![0.9]).is_err());
        assert!(DiscreteTimeGrid::new(vec![], vec![]).is_err());
        assert!(DiscreteTimeGrid::new(vec![1.0, 0.0], vec![0.5, 0.5]).is_err());
        let mut rng = rng_for(9, "grid");
        let probs = [0.0, 0.0, 0.5, 0.5];
        let mut counts = [0usize; 4];
        for _ in 0..10_000 {
            counts[g.sample_index(&probs, &mut rng).unwrap()] += 1;
        }
        assert_eq!(counts[0] + counts[1], 0);
        assert!(counts[2] > 4_700 && counts[3] > 4_700);
        assert!(DiscreteTimeGrid::for_steps(3).is_err());
        assert_eq!(DiscreteTimeGrid::for_steps(2).unwrap().times, vec![1.0, 0.5]);
    }

    #[test]
    fn euler_examples() {
        let m = Constant(0.3);
        let cond = Conditioning::labels(vec![0; 4]);
        let noise = Tensor::randn(vec![4, 3], &mut rng_for(10, "n"));
        for steps in [1, 2, 4, 7] {
            let out = euler_from(&m, noise.clone(), &cond, steps, 1.0).unwrap();
            let expect = noise.map(|e| e - 0.3);
            for (a, b) in out.data().iter().zip(expect.data()) {
                assert!((a - b).abs() < 1e-14);
            }
        }
        assert!(euler_from(&m, noise.clone(), &cond, 0, 1.0).is_err());
        let one = euler_from(&m, noise.clone(), &cond, 1, 1.0).unwrap();
        let f = m.velocity(&noise, 1.0, &cond, false).unwrap();
        assert_eq!(one, denoise(&f, &noise, 1.0).unwrap());
    }

    #[test]
    fn one_step_consistency_equals_one_step_euler() {
        let o = OracleModel {
            oracle: GaussianOracle::new(1.3).unwrap(),
            shape: vec![2],
        };
        let cond = Conditioning::labels(vec![0; 5]);
        let noise = Tensor::randn(vec![5, 2], &mut rng_for(11, "n"));
        let a = euler_from(&o, noise.clone(), &cond, 1, 1.0).unwrap();
        let b = consistency_from(&o, noise, &cond, &[1.0], &mut rng_for(12, "r")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn consistency_with_oracle_composes_analytically() {
        let o = OracleModel {
            oracle: GaussianOracle::new(1.0).unwrap(),
            shape: vec![1],
        };
        let n = 20_000;
        let cond = Conditioning::labels(vec![0; n]);
        let counter = CountingModel::new(&o);
        let noise = Tensor::randn(vec![n, 1], &mut rng_for(13, "n"));
        let one = consistency_from(&counter, noise.clone(), &cond, &[1.0], &mut rng_for(14, "r")).unwrap();
        assert!(one.data().iter().all(|&v| v == 0.0));
        let two = consistency_from(&counter, noise, &cond, &[1.0, 0.5], &mut rng_for(14, "r")).unwrap();
        assert_eq!(counter.calls(), 3);
        // Second input is 0.5 * 0 + 0.5 eps', and the oracle gain at t = 0.5
        // is 1, so the output is 0.5 eps' with variance 0.25.
        let var = two.data().iter().map(|v| v * v).sum::<f64>() / n as f64;
        assert!((var - 0.25).abs() < 0.01, "{var}");
        let mut rng = rng_for(14, "r");
        let eps = Tensor::randn(vec![n, 1], &mut rng);
        for (a, e) in two.data().iter().zip(eps.data()) {
            assert!((a - 0.5 * e).abs() < 1e-12);
        }
    }

    #[test]
    fn guidance_short_circuits() {
        struct Split;
        impl VelocityModel for Split {
            fn velocity(&self, x: &Tensor, _t: f64, _c: &Conditioning, drop: bool) -> Result<Tensor> {
                Ok(x.map(|_| if drop { 1.0 } else { 3.0 }))
            }
            fn sample_shape(&self) -> Vec<usize> {
                vec![1]
            }
        }
        let x = Tensor::zeros(vec![2, 1]);
        let c = Conditioning::labels(vec![0, 0]);
        let counter = CountingModel::new(&Split);
        assert_eq!(cfg_velocity(&counter, &x, 0.5, &c, 1.0).unwrap().data(), &[3.0, 3.0]);
        assert_eq!(counter.calls(), 1);
        assert_eq!(cfg_velocity(&Split, &x, 0.5, &c, 0.0).unwrap().data(), &[1.0, 1.0]);
        assert_eq!(cfg_velocity(&Split, &x, 0.5, &c, 2.0).unwrap().data(), &[5.0, 5.0]);
        assert!(cfg_velocity(&Split, &x, 0.5, &c, f64::NAN).is_err());
    }
}
