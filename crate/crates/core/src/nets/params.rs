use ladd_autodiff::{Tape, Tensor, Var};

use crate::error::{invalid, Result};

/// Ordered collection of named weight tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        let name = name.into();
        debug_assert!(self.position(&name).is_none(), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(tensor);
    }

    fn position(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.position(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.position(name).map(|i| &mut self.tensors[i])
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Replaces every tensor, keeping names; shapes must match.
    pub fn set_tensors(&mut self, tensors: Vec<Tensor>) -> Result<()> {
        if tensors.len() != self.tensors.len() {
            return Err(invalid(
                "parameters",
                format!("{} tensors for {} slots", tensors.len(), self.tensors.len()),
            ));
        }
        for ((name, old), new) in self.names.iter().zip(&self.tensors).zip(&tensors) {
            if old.shape() != new.shape() {
                return Err(invalid(
                    "parameters",
                    format!("{name}: shape {:?} expected {:?}", new.shape(), old.shape()),
                ));
            }
        }
        self.tensors = tensors;
        Ok(())
    }

    /// All values concatenated in store order.
    pub fn flatten(&self) -> Tensor {
        let data: Vec<f64> = self.tensors.iter().flat_map(|t| t.data().iter().copied()).collect();
        let n = data.len();
        Tensor::new(vec![n], data).expect("parameters are finite")
    }

    /// Records every tensor on the tape as a leaf.
    pub fn bind<'a>(&'a self, tape: &mut Tape, trainable: bool) -> Bound<'a> {
        let vars = self.tensors.iter().map(|t| tape.leaf(t.clone(), trainable)).collect();
        Bound { store: self, vars }
    }

    /// Views slices of one flat vector (see [`ParamStore::flatten`]) as the
    /// parameters, so a whole network is a function of a single tape value.
    pub fn bind_flat<'a>(&'a self, tape: &mut Tape, flat: Var) -> Result<Bound<'a>> {
        let mut vars = Vec::with_capacity(self.tensors.len());
        let mut offset = 0;
        for t in &self.tensors {
            let piece = tape.slice(flat, 0, offset, t.numel())?;
            vars.push(tape.reshape(piece, t.shape())?);
            offset += t.numel();
        }
        Ok(Bound { store: self, vars })
    }
}

/// Tape handles for the tensors of a [`ParamStore`].
pub struct Bound<'a> {
    store: &'a ParamStore,
    vars: Vec<Var>,
}

impl Bound<'_> {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.store
            .position(name)
            .map(|i| self.vars[i])
            .ok_or_else(|| invalid("parameters", format!("no tensor named {name}")))
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Gradients in store order, zeros where nothing flowed.
    pub fn grads(&self, tape: &Tape) -> Vec<Tensor> {
        self.vars.iter().map(|&v| tape.grad_or_zeros(v)).collect()
    }
}

/// Draws `N(0, std^2)` weights.
pub(crate) fn normal_init<R: rand::Rng + ?Sized>(shape: Vec<usize>, std: f64, rng: &mut R) -> Tensor {
    Tensor::randn(shape, rng).map(|v| v * std)
}

/// `x W + b` for `x` of shape `[n, k]`, `b` of shape `[1, m]`.
pub(crate) fn linear(tape: &mut Tape, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    match b {
        Some(b) => {
            let rows = tape.shape(y)[0];
            let bb = tape.expand(b, 0, rows)?;
            Ok(tape.add(y, bb)?)
        }
        None => Ok(y),
    }
}

/// Adds a `[1, m]` bias to every row of a `[n, m]` value.
pub(crate) fn add_bias(tape: &mut Tape, x: Var, b: Var) -> Result<Var> {
    let rows = tape.shape(x)[0];
    let bb = tape.expand(b, 0, rows)?;
    Ok(tape.add(x, bb)?)
}

/// Fixed log-spaced Fourier features `[sin(f_k t), cos(f_k t)]`, `dim` even.
pub fn fourier_features(ts: &[f64], dim: usize) -> Tensor {
    let half = dim / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|k| {
            if half > 1 {
                (64f64).powf(k as f64 / (half - 1) as f64)
            } else {
                1.0
            }
        })
        .collect();
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        data.extend(freqs.iter().map(|f| (f * t).sin()));
        data.extend(freqs.iter().map(|f| (f * t).cos()));
    }
    Tensor::new(vec![ts.len(), dim], data).expect("finite features")
}

/// One-hot rows for the given labels.
pub(crate) fn one_hot(labels: &[usize], classes: usize) -> Tensor {
    let mut data = vec![0.0; labels.len() * classes];
    for (r, &l) in labels.iter().enumerate() {
        data[r * classes + l] = 1.0;
    }
    Tensor::new(vec![labels.len(), classes], data).expect("finite one-hot")
}
