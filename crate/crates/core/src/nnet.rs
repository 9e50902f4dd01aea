//! Small dense ReLU networks trained with Adam.
//!
//! Parameters live in one flat vector, layer by layer: the row-major
//! `out x in` weight block followed by the `out` biases. Hidden layers use
//! ReLU, the output layer is linear.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Hidden layer width used by every network in this crate.
pub const HIDDEN_WIDTH: usize = 12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    sizes: Vec<usize>,
    params: Vec<f64>,
}

impl MlpModel {
    /// `[input_dim, 12, 12, output_dim]`.
    pub fn architecture(input_dim: usize, output_dim: usize) -> Vec<usize> {
        vec![input_dim, HIDDEN_WIDTH, HIDDEN_WIDTH, output_dim]
    }

    pub fn zeros(sizes: &[usize]) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::invalid(format!("bad layer sizes {sizes:?}")));
        }
        let n = sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        Ok(Self {
            sizes: sizes.to_vec(),
            params: vec![0.0; n],
        })
    }

    /// He-style uniform init, `U(-sqrt(6/fan_in), sqrt(6/fan_in))`, zero biases.
    pub fn new(sizes: &[usize], seed: u64) -> Result<Self> {
        let mut model = Self::zeros(sizes)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut offset = 0;
        for w in sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let limit = (6.0 / fan_in as f64).sqrt();
            for p in &mut model.params[offset..offset + fan_in * fan_out] {
                *p = rng.random_range(-limit..limit);
            }
            offset += fan_in * fan_out + fan_out;
        }
        Ok(model)
    }

    pub fn from_parts(sizes: Vec<usize>, params: Vec<f64>) -> Result<Self> {
        let expected = Self::zeros(&sizes)?.params.len();
        if params.len() != expected {
            return Err(Error::Format(format!(
                "layer sizes {sizes:?} need {expected} parameters, got {}",
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Format("non-finite network parameter".into()));
        }
        Ok(Self { sizes, params })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().expect("at least two layers")
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn layers(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        let mut offset = 0;
        self.sizes.windows(2).map(move |w| {
            let start = offset;
            offset += w[0] * w[1] + w[1];
            (start, w[0], w[1])
        })
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::invalid(format!(
                "network expects {} inputs, got {}",
                self.input_dim(),
                x.len()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let acts = self.activations(x);
        Ok(acts.into_iter().last().expect("output layer"))
    }

    /// Post-activation values of every layer, input included.
    fn activations(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let n_layers = self.sizes.len() - 1;
        let mut acts = Vec::with_capacity(n_layers + 1);
        acts.push(x.to_vec());
        for (l, (start, fan_in, fan_out)) in self.layers().enumerate() {
            let prev = &acts[l];
            let w = &self.params[start..start + fan_in * fan_out];
            let b = &self.params[start + fan_in * fan_out..start + fan_in * fan_out + fan_out];
            let mut out: Vec<f64> = (0..fan_out)
                .map(|o| {
                    let row = &w[o * fan_in..(o + 1) * fan_in];
                    row.iter().zip(prev).map(|(a, b)| a * b).sum::<f64>() + b[o]
                })
                .collect();
            if l + 1 < n_layers {
                for v in &mut out {
                    *v = v.max(0.0);
                }
            }
            acts.push(out);
        }
        acts
    }

    /// Adds `d loss / d params` for one sample into `grad`; returns the loss.
    pub fn accumulate_gradient(&self, x: &[f64], target: f64, loss: Loss, grad: &mut [f64]) -> f64 {
        let acts = self.activations(x);
        let out = acts.last().expect("output layer");
        let (value, mut delta) = loss.value_and_grad(out, target);
        let layers: Vec<_> = self.layers().collect();
        for (l, &(start, fan_in, fan_out)) in layers.iter().enumerate().rev() {
            let prev = &acts[l];
            let wlen = fan_in * fan_out;
            for o in 0..fan_out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                let g = &mut grad[start + o * fan_in..start + (o + 1) * fan_in];
                for (gi, a) in g.iter_mut().zip(prev) {
                    *gi += d * a;
                }
                grad[start + wlen + o] += d;
            }
            if l > 0 {
                let w = &self.params[start..start + wlen];
                let mut next = vec![0.0; fan_in];
                for o in 0..fan_out {
                    let d = delta[o];
                    if d == 0.0 {
                        continue;
                    }
                    for (n, wi) in next.iter_mut().zip(&w[o * fan_in..(o + 1) * fan_in]) {
                        *n += d * wi;
                    }
                }
                // ReLU derivative, taken from the stored post-activation.
                for (n, a) in next.iter_mut().zip(prev) {
                    if *a <= 0.0 {
                        *n = 0.0;
                    }
                }
                delta = next;
            }
        }
        value
    }

    pub fn loss(&self, x: &[f64], target: f64, loss: Loss) -> f64 {
        let acts = self.activations(x);
        loss.value_and_grad(acts.last().expect("output"), target).0
    }
}

/// Per-feature affine rescaling to zero mean and unit variance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    /// Features with zero spread keep a unit scale.
    pub fn fit(inputs: &[Vec<f64>]) -> Result<Self> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::invalid("cannot standardize an empty set"))?;
        let d = first.len();
        let n = inputs.len() as f64;
        let mut mean = vec![0.0; d];
        for x in inputs {
            if x.len() != d {
                return Err(Error::invalid("ragged feature rows"));
            }
            for (m, v) in mean.iter_mut().zip(x) {
                *m += v / n;
            }
        }
        let mut scale = vec![0.0; d];
        for x in inputs {
            for ((s, v), m) in scale.iter_mut().zip(x).zip(&mean) {
                *s += (v - m).powi(2) / n;
            }
        }
        for s in &mut scale {
            *s = if *s > 1e-24 { s.sqrt() } else { 1.0 };
        }
        Ok(Self { mean, scale })
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            scale: vec![1.0; dim],
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }

    pub fn apply_all(&self, inputs: &[Vec<f64>]) -> Vec<Vec<f64>> {
        inputs.iter().map(|x| self.apply(x)).collect()
    }
}

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Training objective for a scalar target.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    /// Squared error on a single output node.
    Mse,
    /// Gaussian negative log-likelihood on `(mu, log sigma)` output nodes.
    GaussianNll,
    /// Mixture negative log-likelihood on `M` logits, `M` means and `M`
    /// log-sigmas.
    MixtureNll { components: usize },
}

impl Loss {
    pub fn output_dim(&self) -> usize {
        match self {
            Loss::Mse => 1,
            Loss::GaussianNll => 2,
            Loss::MixtureNll { components } => 3 * components,
        }
    }

    /// Loss value and its gradient with respect to the output nodes.
    pub fn value_and_grad(&self, out: &[f64], y: f64) -> (f64, Vec<f64>) {
        match *self {
            Loss::Mse => {
                let r = out[0] - y;
                (r * r, vec![2.0 * r])
            }
            Loss::GaussianNll => {
                let (mu, s) = (out[0], out[1]);
                let r = y - mu;
                let inv_var = (-2.0 * s).exp();
                let value = 0.5 * LN_2PI + s + 0.5 * r * r * inv_var;
                (value, vec![-r * inv_var, 1.0 - r * r * inv_var])
            }
            Loss::MixtureNll { components: m } => {
                let logits = &out[..m];
                let mus = &out[m..2 * m];
                let logs = &out[2 * m..3 * m];
                let lmax = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = lmax + logits.iter().map(|l| (l - lmax).exp()).sum::<f64>().ln();
                let log_terms: Vec<f64> = (0..m)
                    .map(|k| {
                        let r = y - mus[k];
                        (logits[k] - lse) - 0.5 * LN_2PI - logs[k] - 0.5 * r * r * (-2.0 * logs[k]).exp()
                    })
                    .collect();
                let tmax = log_terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let total = tmax + log_terms.iter().map(|t| (t - tmax).exp()).sum::<f64>().ln();
                let mut grad = vec![0.0; 3 * m];
                for k in 0..m {
                    let resp = (log_terms[k] - total).exp();
                    let pi = (logits[k] - lse).exp();
                    let r = y - mus[k];
                    let inv_var = (-2.0 * logs[k]).exp();
                    grad[k] = pi - resp;
                    grad[m + k] = -resp * r * inv_var;
                    grad[2 * m + k] = resp * (1.0 - r * r * inv_var);
                }
                (-total, grad)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub seed: u64,
    /// Stop after this many epochs without a new best validation loss.
    /// `None` always runs `max_epochs`.
    pub patience: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            batch_size: 32,
            max_epochs: 1000,
            seed: 0,
            patience: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || self.batch_size == 0 {
            return Err(Error::invalid("learning rate and batch size must be positive"));
        }
        Ok(())
    }
}

/// Borrowed `(inputs, targets)` pairs.
#[derive(Clone, Copy, Debug)]
pub struct TrainData<'a> {
    pub inputs: &'a [Vec<f64>],
    pub targets: &'a [f64],
}

impl<'a> TrainData<'a> {
    pub fn new(inputs: &'a [Vec<f64>], targets: &'a [f64]) -> Result<Self> {
        if inputs.len() != targets.len() {
            return Err(Error::invalid("inputs and targets differ in length"));
        }
        Ok(Self { inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn mean_loss(&self, model: &MlpModel, loss: Loss) -> f64 {
        let total: f64 = self
            .inputs
            .iter()
            .zip(self.targets)
            .map(|(x, &y)| model.loss(x, y, loss))
            .sum();
        total / self.len() as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub train: f64,
    pub validation: f64,
}

/// Per-epoch losses; epoch 0 is the initialized model.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub epochs: Vec<EpochLoss>,
    pub best_epoch: usize,
}

impl TrainTrace {
    pub fn best_validation(&self) -> f64 {
        self.epochs[self.best_epoch].validation
    }
}

/// Adam with the usual `beta1 = 0.9`, `beta2 = 0.999`, `eps = 1e-8`.
#[derive(Clone, Debug)]
pub struct Adam {
    learning_rate: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize, learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mhat = self.m[i] / c1;
            let vhat = self.v[i] / c2;
            params[i] -= self.learning_rate * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed.wrapping_mul(0x2545_F491_4F6C_DD1D)
        .wrapping_add((epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Mini-batch Adam. Returns the snapshot with the lowest validation loss
/// (the initial model counts as epoch 0) together with the loss trace.
pub fn train(
    model: MlpModel,
    train_set: TrainData<'_>,
    validation: TrainData<'_>,
    config: &TrainConfig,
    loss: Loss,
) -> Result<(MlpModel, TrainTrace)> {
    config.validate()?;
    if train_set.is_empty() || validation.is_empty() {
        return Err(Error::invalid(
            "training needs non-empty train and validation sets",
        ));
    }
    if model.output_dim() != loss.output_dim() {
        return Err(Error::invalid(format!(
            "loss {loss:?} needs {} outputs, model has {}",
            loss.output_dim(),
            model.output_dim()
        )));
    }
    for x in train_set.inputs.iter().chain(validation.inputs) {
        model.check_input(x)?;
    }
    let mut trace = TrainTrace::default();
    let initial_val = validation.mean_loss(&model, loss);
    if !initial_val.is_finite() {
        return Err(Error::TrainingDiverged { epoch: 0 });
    }
    trace.epochs.push(EpochLoss {
        epoch: 0,
        train: train_set.mean_loss(&model, loss),
        validation: initial_val,
    });
    let mut best = model.clone();
    let mut best_val = initial_val;
    let mut current = model;
    let mut adam = Adam::new(current.params.len(), config.learning_rate);
    let mut grad = vec![0.0; current.params.len()];
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut since_best = 0;

    for epoch in 1..=config.max_epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed(config.seed, epoch));
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            for &i in batch {
                epoch_loss +=
                    current.accumulate_gradient(&train_set.inputs[i], train_set.targets[i], loss, &mut grad);
            }
            let scale = 1.0 / batch.len() as f64;
            grad.iter_mut().for_each(|g| *g *= scale);
            adam.step(&mut current.params, &grad);
        }
        let train_loss = epoch_loss / train_set.len() as f64;
        let val_loss = validation.mean_loss(&current, loss);
        if !train_loss.is_finite() || !val_loss.is_finite() {
            return Err(Error::TrainingDiverged { epoch });
        }
        trace.epochs.push(EpochLoss {
            epoch,
            train: train_loss,
            validation: val_loss,
        });
        if val_loss < best_val {
            best_val = val_loss;
            best = current.clone();
            trace.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if config.patience.is_some_and(|p| since_best >= p) {
                break;
            }
        }
    }
    Ok((best, trace))
}

/// Largest relative difference between backprop gradients and central
/// finite differences (step `1e-5`) over all parameters.
pub fn gradient_check(model: &MlpModel, input: &[f64], target: f64, loss: Loss) -> f64 {
    let mut analytic = vec![0.0; model.params.len()];
    model.accumulate_gradient(input, target, loss, &mut analytic);
    let h = 1e-5;
    let mut probe = model.clone();
    let mut worst: f64 = 0.0;
    for (i, grad) in analytic.iter().enumerate() {
        let orig = probe.params[i];
        probe.params[i] = orig + h;
        let up = probe.loss(input, target, loss);
        probe.params[i] = orig - h;
        let down = probe.loss(input, target, loss);
        probe.params[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let denom = grad.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max((grad - numeric).abs() / denom);
    }
    worst
}
