use ladd_autodiff::{AdamState, Tape, Tensor};
use rand::seq::SliceRandom;
use sha2::{Digest, Sha256};

use crate::data::ToySpec;
use crate::error::{invalid, Result};
use crate::nets::ParamStore;
use crate::rng::{rng_for, split_seed};

/// Frozen MLP that scores how well samples match their labels.
///
/// Trained once per data spec on clean labels (label noise switched off),
/// then used unchanged by every evaluation.
#[derive(Clone, Debug)]
pub struct ReferenceClassifier {
    pub n_classes: usize,
    pub input_dim: usize,
    pub params: ParamStore,
    /// Held-out accuracy measured right after training.
    pub accuracy: f64,
}

const HIDDEN: usize = 64;

impl ReferenceClassifier {
    pub fn train(spec: &ToySpec, seed: u64) -> Result<Self> {
        let spec = match *spec {
            ToySpec::Gmm2d {
                modes,
                radius,
                mode_std,
                ..
            } => ToySpec::gmm2d(modes, radius, mode_std),
            ref other => other.clone(),
        };
        let k = spec.n_classes();
        let d: usize = spec.data_shape().iter().product();
        let mut rng = rng_for(split_seed(seed, "classifier"), "init");
        let mut params = ParamStore::new();
        let layer = |fan_in: usize, fan_out: usize, rng: &mut crate::rng::LaddRng| {
            Tensor::randn(vec![fan_in, fan_out], rng).map(|v| v / (fan_in as f64).sqrt())
        };
        params.push("w1", layer(d, HIDDEN, &mut rng));
        params.push("b1", Tensor::zeros(vec![1, HIDDEN]));
        params.push("w2", layer(HIDDEN, HIDDEN, &mut rng));
        params.push("b2", Tensor::zeros(vec![1, HIDDEN]));
        params.push("w3", layer(HIDDEN, k, &mut rng));
        params.push("b3", Tensor::zeros(vec![1, k]));
        let mut clf = ReferenceClassifier {
            n_classes: k,
            input_dim: d,
            params,
            accuracy: 0.0,
        };
        let train = spec.sample_real(8192, &mut rng)?;
        let mut adam = AdamState::with_lr(3e-3, clf.params.tensors());
        let mut order: Vec<usize> = (0..train.len()).collect();
        for _epoch in 0..12 {
            order.shuffle(&mut rng);
            for chunk in order.chunks(256) {
                let batch = train.select(chunk)?;
                let mut tape = Tape::new();
                let bound = clf.params.bind(&mut tape, true);
                let logits = clf.logits_on(&mut tape, &bound, &batch.x0)?;
                let logp = tape.log_softmax(logits)?;
                let onehot = tape.constant(one_hot(&batch.cond, k));
                let picked = tape.mul(logp, onehot)?;
                let total = tape.sum(picked)?;
                let loss = tape.scale(total, -1.0 / chunk.len() as f64)?;
                tape.backward(loss)?;
                let grads = bound.grads(&tape);
                adam.step(clf.params.tensors_mut(), &grads)?;
            }
        }
        let test = spec.sample_real(4096, &mut rng)?;
        let probs = clf.probs(&test.x0)?;
        let correct = probs
            .data()
            .chunks(k)
            .zip(&test.cond)
            .filter(|(row, &label)| {
                let best = (0..k).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap_or(0);
                best == label
            })
            .count();
        clf.accuracy = correct as f64 / test.len() as f64;
        Ok(clf)
    }

    fn logits_on(&self, tape: &mut Tape, p: &crate::nets::Bound, x: &Tensor) -> Result<ladd_autodiff::Var> {
        let n = x.shape()[0];
        if x.numel() / n != self.input_dim {
            return Err(invalid("classifier", format!("input shape {:?}", x.shape())));
        }
        let xv = tape.constant(x.clone().reshape(vec![n, self.input_dim])?);
        let mut h = xv;
        for (w, b, act) in [("w1", "b1", true), ("w2", "b2", true), ("w3", "b3", false)] {
            let y = tape.matmul(h, p.get(w)?)?;
            let bb = tape.expand(p.get(b)?, 0, n)?;
            h = tape.add(y, bb)?;
            if act {
                h = tape.silu(h)?;
            }
        }
        Ok(h)
    }

    /// Class probabilities, `[n, K]`.
    pub fn probs(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let logits = self.logits_on(&mut tape, &bound, x)?;
        let p = tape.softmax(logits)?;
        Ok(tape.value(p).clone())
    }

    /// SHA-256 of the weights, hex encoded.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for t in self.params.tensors() {
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn one_hot(labels: &[usize], k: usize) -> Tensor {
    let mut data = vec![0.0; labels.len() * k];
    for (r, &l) in labels.iter().enumerate() {
        data[r * k + l] = 1.0;
    }
    Tensor::new(vec![labels.len(), k], data).expect("finite one-hot")
}

/// Mean classifier probability of each sample's conditioning label.
pub fn alignment_score(clf: &ReferenceClassifier, samples: &Tensor, conds: &[usize]) -> Result<f64> {
    let n = samples.shape().first().copied().unwrap_or(0);
    if n != conds.len() || n == 0 {
        return Err(invalid("alignment", format!("{n} samples with {} labels", conds.len())));
    }
    if let Some(&bad) = conds.iter().find(|&&c| c >= clf.n_classes) {
        return Err(invalid("alignment", format!("label {bad} out of range")));
    }
    let probs = clf.probs(samples)?;
    let k = clf.n_classes;
    let total: f64 = conds.iter().enumerate().map(|(i, &c)| probs.data()[i * k + c]).sum();
    Ok(total / n as f64)
}
