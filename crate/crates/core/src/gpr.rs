//! Gaussian process regression with squared-exponential kernels.
//!
//! Each gaze angle gets its own scalar GP. The prior mean is zero, a
//! constant, a linear function of the features, or a small network fitted
//! beforehand; constant and linear coefficients are profiled out of the
//! marginal likelihood by generalized least squares.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::{stratified_subsample, DriveRecord, FeatureConfig};
use crate::error::{Error, Result};
use crate::nnet::{self, Loss, MlpModel, Standardizer, TrainConfig, TrainData};
use crate::optim::{self, Bounds, Settings};
use crate::types::{GazeAngles, GazeDistribution, GazePredictor, HeadPose};

/// Smallest diagonal term added to every Gram matrix.
pub const JITTER_FLOOR: f64 = 1e-9;
/// Largest diagonal term tried before giving up on a factorization.
pub const JITTER_MAX: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LengthScales {
    Isotropic(f64),
    Ard(Vec<f64>),
}

/// Squared-exponential kernel `sf^2 exp(-sum (dx_i / l_i)^2 / 2)` plus a
/// noise term on the Gram diagonal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    pub amplitude: f64,
    pub length_scales: LengthScales,
    pub noise: f64,
}

impl KernelParams {
    pub fn isotropic(amplitude: f64, length_scale: f64, noise: f64) -> Self {
        Self {
            amplitude,
            length_scales: LengthScales::Isotropic(length_scale),
            noise,
        }
    }

    pub fn ard(amplitude: f64, length_scales: Vec<f64>, noise: f64) -> Self {
        Self {
            amplitude,
            length_scales: LengthScales::Ard(length_scales),
            noise,
        }
    }

    pub fn is_ard(&self) -> bool {
        matches!(self.length_scales, LengthScales::Ard(_))
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        let scales_ok = match &self.length_scales {
            LengthScales::Isotropic(l) => *l > 0.0 && l.is_finite(),
            LengthScales::Ard(ls) => {
                if ls.len() != dim {
                    return Err(Error::invalid(format!(
                        "{} ARD length scales for {dim} features",
                        ls.len()
                    )));
                }
                ls.iter().all(|l| *l > 0.0 && l.is_finite())
            }
        };
        if !(self.amplitude > 0.0 && self.amplitude.is_finite())
            || !scales_ok
            || !(self.noise >= 0.0 && self.noise.is_finite())
        {
            return Err(Error::invalid(format!("invalid kernel parameters {self:?}")));
        }
        Ok(())
    }

    /// Kernel value without the noise term.
    pub fn eval(&self, x: &[f64], x2: &[f64]) -> Result<f64> {
        if x.len() != x2.len() {
            return Err(Error::invalid(format!(
                "kernel inputs differ in dimension: {} vs {}",
                x.len(),
                x2.len()
            )));
        }
        if let LengthScales::Ard(ls) = &self.length_scales {
            if ls.len() != x.len() {
                return Err(Error::invalid(format!(
                    "{} ARD length scales for {}-d inputs",
                    ls.len(),
                    x.len()
                )));
            }
        }
        Ok(self.cov(x, x2))
    }

    fn length(&self, i: usize) -> f64 {
        match &self.length_scales {
            LengthScales::Isotropic(l) => *l,
            LengthScales::Ard(ls) => ls[i],
        }
    }

    fn cov(&self, x: &[f64], x2: &[f64]) -> f64 {
        let mut r2 = 0.0;
        for i in 0..x.len() {
            let d = x[i] - x2[i];
            let l = self.length(i);
            r2 += d * d / (l * l);
        }
        self.amplitude * self.amplitude * (-0.5 * r2).exp()
    }

    fn from_log(theta: &[f64], ard: bool) -> Self {
        let n = theta.len();
        let amplitude = theta[0].exp();
        let noise = theta[n - 1].exp();
        if ard {
            Self::ard(
                amplitude,
                theta[1..n - 1].iter().map(|v| v.exp()).collect(),
                noise,
            )
        } else {
            Self::isotropic(amplitude, theta[1].exp(), noise)
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeanKind {
    Zero,
    Constant,
    #[default]
    Linear,
    Neural,
}

impl MeanKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            MeanKind::Zero => "zero",
            MeanKind::Constant => "const",
            MeanKind::Linear => "linear",
            MeanKind::Neural => "nn",
        }
    }
}

impl fmt::Display for MeanKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MeanKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zero" => Ok(MeanKind::Zero),
            "const" | "constant" => Ok(MeanKind::Constant),
            "linear" => Ok(MeanKind::Linear),
            "nn" | "neural" => Ok(MeanKind::Neural),
            other => Err(Error::invalid(format!("unknown GP mean '{other}'"))),
        }
    }
}

/// Prior mean of the GP.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MeanFunction {
    Zero,
    Constant { offset: f64 },
    Linear { offset: f64, weights: Vec<f64> },
    Neural { net: MlpModel, scaler: Standardizer },
}

impl MeanFunction {
    pub fn kind(&self) -> MeanKind {
        match self {
            MeanFunction::Zero => MeanKind::Zero,
            MeanFunction::Constant { .. } => MeanKind::Constant,
            MeanFunction::Linear { .. } => MeanKind::Linear,
            MeanFunction::Neural { .. } => MeanKind::Neural,
        }
    }

    fn check_dim(&self, dim: usize) -> Result<()> {
        let ok = match self {
            MeanFunction::Linear { weights, .. } => weights.len() == dim,
            MeanFunction::Neural { net, scaler } => net.input_dim() == dim && scaler.mean.len() == dim,
            _ => true,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "mean function does not take {dim}-d inputs"
            )))
        }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            MeanFunction::Zero => 0.0,
            MeanFunction::Constant { offset } => *offset,
            MeanFunction::Linear { offset, weights } => {
                offset + weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
            }
            MeanFunction::Neural { net, scaler } => net
                .forward(&scaler.apply(x))
                .expect("dimension checked at construction")[0],
        }
    }
}

/// Hyperparameter search settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub mean: MeanKind,
    pub ard: bool,
    /// Number of optimizer starts; the first is a data-driven guess.
    pub restarts: usize,
    pub max_iterations: usize,
    /// Stop when the log-likelihood changes by less than this per step.
    pub tolerance: f64,
    /// Rows used for the hyperparameter search.
    pub optimization_cap: usize,
    /// Rows the final model is conditioned on.
    pub train_cap: usize,
    /// Training settings for the neural mean.
    pub network: TrainConfig,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            mean: MeanKind::Linear,
            ard: false,
            restarts: 5,
            max_iterations: 200,
            tolerance: 1e-6,
            optimization_cap: 400,
            train_cap: 2000,
            network: TrainConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    /// Log marginal likelihood at each optimizer start (`-inf` if undefined).
    pub start_log_likelihoods: Vec<f64>,
    /// Best log marginal likelihood reached on the search subset.
    pub log_likelihood: f64,
    pub iterations: usize,
}

/// A conditioned GP for one scalar output.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(try_from = "StoredGpr", into = "StoredGpr")]
pub struct GprModel {
    kernel: KernelParams,
    mean: MeanFunction,
    inputs: Vec<Vec<f64>>,
    targets: Vec<f64>,
    lower: DMatrix<f64>,
    alpha: DVector<f64>,
}

#[derive(Serialize, Deserialize)]
struct StoredGpr {
    kernel: KernelParams,
    mean: MeanFunction,
    inputs: Vec<Vec<f64>>,
    targets: Vec<f64>,
}

impl TryFrom<StoredGpr> for GprModel {
    type Error = Error;

    fn try_from(s: StoredGpr) -> Result<Self> {
        GprModel::condition(s.kernel, s.mean, s.inputs, s.targets)
    }
}

impl From<GprModel> for StoredGpr {
    fn from(m: GprModel) -> Self {
        StoredGpr {
            kernel: m.kernel,
            mean: m.mean,
            inputs: m.inputs,
            targets: m.targets,
        }
    }
}

fn check_samples(inputs: &[Vec<f64>], targets: &[f64], min_rows: usize) -> Result<usize> {
    if inputs.len() != targets.len() {
        return Err(Error::invalid("inputs and targets differ in length"));
    }
    if inputs.len() < min_rows {
        return Err(Error::invalid(format!(
            "need at least {min_rows} training rows, got {}",
            inputs.len()
        )));
    }
    let dim = inputs[0].len();
    if dim == 0 || inputs.iter().any(|x| x.len() != dim) {
        return Err(Error::invalid("training inputs must share a non-zero dimension"));
    }
    if inputs.iter().flatten().chain(targets).any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite training data"));
    }
    Ok(dim)
}

/// Latent Gram matrix (no noise term).
fn gram(kernel: &KernelParams, inputs: &[Vec<f64>]) -> DMatrix<f64> {
    let n = inputs.len();
    let mut k = DMatrix::zeros(n, n);
    let sf2 = kernel.amplitude * kernel.amplitude;
    for i in 0..n {
        k[(i, i)] = sf2;
        for j in 0..i {
            let v = kernel.cov(&inputs[i], &inputs[j]);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

/// Cholesky factor of `K + noise I`, raising the noise by 10x from the
/// floor until the factorization succeeds. Returns the noise actually used.
fn factor_with_jitter(
    latent: &DMatrix<f64>,
    noise: f64,
) -> Result<(f64, nalgebra::Cholesky<f64, nalgebra::Dyn>)> {
    let mut noise = noise.max(JITTER_FLOOR);
    loop {
        let mut k = latent.clone();
        for i in 0..k.nrows() {
            k[(i, i)] += noise;
        }
        if let Some(c) = k.cholesky() {
            return Ok((noise, c));
        }
        if noise >= JITTER_MAX {
            return Err(Error::IllConditioned(format!(
                "Cholesky failed with diagonal noise {noise:e}"
            )));
        }
        noise = (noise * 10.0).min(JITTER_MAX);
    }
}

fn design(kind: MeanKind, inputs: &[Vec<f64>]) -> Option<DMatrix<f64>> {
    let n = inputs.len();
    match kind {
        MeanKind::Constant => Some(DMatrix::from_element(n, 1, 1.0)),
        MeanKind::Linear => {
            let d = inputs[0].len();
            Some(DMatrix::from_fn(n, d + 1, |i, j| {
                if j == 0 {
                    1.0
                } else {
                    inputs[i][j - 1]
                }
            }))
        }
        MeanKind::Zero | MeanKind::Neural => None,
    }
}

/// Generalized least squares `(H' K^-1 H)^-1 H' K^-1 y`.
fn gls(
    chol: &nalgebra::Cholesky<f64, nalgebra::Dyn>,
    h: &DMatrix<f64>,
    y: &DVector<f64>,
) -> Option<DVector<f64>> {
    let kinv_h = chol.solve(h);
    let m = h.transpose() * &kinv_h;
    let rhs = kinv_h.transpose() * y;
    m.cholesky().map(|c| c.solve(&rhs))
}

fn mean_from_beta(kind: MeanKind, beta: &DVector<f64>) -> MeanFunction {
    match kind {
        MeanKind::Constant => MeanFunction::Constant { offset: beta[0] },
        MeanKind::Linear => MeanFunction::Linear {
            offset: beta[0],
            weights: beta.iter().skip(1).copied().collect(),
        },
        _ => MeanFunction::Zero,
    }
}

impl GprModel {
    /// Conditions a GP with fixed hyperparameters and mean on the data.
    pub fn condition(
        kernel: KernelParams,
        mean: MeanFunction,
        inputs: Vec<Vec<f64>>,
        targets: Vec<f64>,
    ) -> Result<Self> {
        let dim = check_samples(&inputs, &targets, 1)?;
        kernel.validate(dim)?;
        mean.check_dim(dim)?;
        let (noise, chol) = factor_with_jitter(&gram(&kernel, &inputs), kernel.noise)?;
        Ok(Self::assemble(
            KernelParams { noise, ..kernel },
            mean,
            inputs,
            targets,
            chol,
        ))
    }

    fn assemble(
        kernel: KernelParams,
        mean: MeanFunction,
        inputs: Vec<Vec<f64>>,
        targets: Vec<f64>,
        chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    ) -> Self {
        let resid = DVector::from_iterator(
            targets.len(),
            inputs.iter().zip(&targets).map(|(x, y)| y - mean.eval(x)),
        );
        let alpha = chol.solve(&resid);
        Self {
            kernel,
            mean,
            inputs,
            targets,
            lower: chol.l(),
            alpha,
        }
    }

    /// Like [`condition`](Self::condition) but with constant or linear mean
    /// coefficients set by generalized least squares under `kernel`.
    pub fn condition_profiled(
        kernel: KernelParams,
        kind: MeanKind,
        inputs: Vec<Vec<f64>>,
        targets: Vec<f64>,
    ) -> Result<Self> {
        let dim = check_samples(&inputs, &targets, 1)?;
        kernel.validate(dim)?;
        if kind == MeanKind::Neural {
            return Err(Error::invalid("a neural mean must be supplied explicitly"));
        }
        let (noise, chol) = factor_with_jitter(&gram(&kernel, &inputs), kernel.noise)?;
        let mean = match design(kind, &inputs) {
            None => MeanFunction::Zero,
            Some(h) => {
                let y = DVector::from_column_slice(&targets);
                let beta = gls(&chol, &h, &y).ok_or(Error::SingularDesign {
                    rank: h.clone().rank(1e-10),
                    cols: h.ncols(),
                })?;
                mean_from_beta(kind, &beta)
            }
        };
        Ok(Self::assemble(
            KernelParams { noise, ..kernel },
            mean,
            inputs,
            targets,
            chol,
        ))
    }

    /// Learns hyperparameters by maximizing the log marginal likelihood and
    /// conditions on all rows. The search uses a seeded uniform subset when
    /// there are more than `optimization_cap` rows. `validation` is only used
    /// to select the neural mean.
    pub fn fit(
        inputs: &[Vec<f64>],
        targets: &[f64],
        validation: Option<(&[Vec<f64>], &[f64])>,
        options: &FitOptions,
        seed: u64,
    ) -> Result<(Self, FitReport)> {
        check_samples(inputs, targets, 2)?;
        let subset = uniform_subset(inputs.len(), options.optimization_cap, seed);
        let opt_x: Vec<Vec<f64>> = subset.iter().map(|&i| inputs[i].clone()).collect();
        let opt_y: Vec<f64> = subset.iter().map(|&i| targets[i]).collect();
        fit_two_stage(inputs, targets, &opt_x, &opt_y, validation, options, seed)
    }

    pub fn kernel(&self) -> &KernelParams {
        &self.kernel
    }

    pub fn mean_function(&self) -> &MeanFunction {
        &self.mean
    }

    pub fn inputs(&self) -> &[Vec<f64>] {
        &self.inputs
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    pub fn dim(&self) -> usize {
        self.inputs[0].len()
    }

    /// `K^-1 (y - m(X))`.
    pub fn weights(&self) -> &DVector<f64> {
        &self.alpha
    }

    /// Posterior mean and latent variance at `x`. The variance excludes the
    /// noise term, so far from the data it tends to `amplitude^2`.
    pub fn predict(&self, x: &[f64]) -> Result<(f64, f64)> {
        if x.len() != self.dim() {
            return Err(Error::invalid(format!(
                "GP expects {} features, got {}",
                self.dim(),
                x.len()
            )));
        }
        let kstar = DVector::from_iterator(
            self.inputs.len(),
            self.inputs.iter().map(|xi| self.kernel.cov(x, xi)),
        );
        let mean = self.mean.eval(x) + kstar.dot(&self.alpha);
        let v = self
            .lower
            .solve_lower_triangular(&kstar)
            .expect("Cholesky factor has a positive diagonal");
        let sf2 = self.kernel.amplitude * self.kernel.amplitude;
        Ok((mean, (sf2 - v.norm_squared()).max(0.0)))
    }

    /// [`predict`](Self::predict) for many points at once, with identical
    /// results.
    pub fn predict_many(&self, xs: &[Vec<f64>]) -> Result<Vec<(f64, f64)>> {
        const BLOCK: usize = 32;
        if let Some(x) = xs.iter().find(|x| x.len() != self.dim()) {
            return Err(Error::invalid(format!(
                "GP expects {} features, got {}",
                self.dim(),
                x.len()
            )));
        }
        let n = self.inputs.len();
        let factor = self.lower.as_slice();
        let sf2 = self.kernel.amplitude * self.kernel.amplitude;
        let mut out = Vec::with_capacity(xs.len());
        for chunk in xs.chunks(BLOCK) {
            let kstar = DMatrix::from_fn(n, chunk.len(), |i, c| self.kernel.cov(&chunk[c], &self.inputs[i]));
            let mut v = kstar.clone();
            let cols = v.as_mut_slice();
            for k in 0..n {
                let below = &factor[k * n + k + 1..(k + 1) * n];
                let diag = factor[k * n + k];
                for col in cols.chunks_exact_mut(n) {
                    let vk = col[k] / diag;
                    col[k] = vk;
                    for (vr, lr) in col[k + 1..].iter_mut().zip(below) {
                        *vr -= vk * lr;
                    }
                }
            }
            for (c, x) in chunk.iter().enumerate() {
                let mean = self.mean.eval(x) + kstar.column(c).dot(&self.alpha);
                out.push((mean, (sf2 - v.column(c).norm_squared()).max(0.0)));
            }
        }
        Ok(out)
    }

    /// Posterior mean and variance of a new noisy observation.
    pub fn predict_observed(&self, x: &[f64]) -> Result<(f64, f64)> {
        let (m, v) = self.predict(x)?;
        Ok((m, v + self.kernel.noise))
    }

    /// Log marginal likelihood of the stored targets given the model.
    pub fn log_marginal_likelihood(&self) -> f64 {
        let resid: DVector<f64> = DVector::from_iterator(
            self.targets.len(),
            self.inputs
                .iter()
                .zip(&self.targets)
                .map(|(x, y)| y - self.mean.eval(x)),
        );
        let logdet: f64 = self.lower.diagonal().iter().map(|v| v.ln()).sum::<f64>() * 2.0;
        -0.5 * resid.dot(&self.alpha) - 0.5 * logdet - 0.5 * resid.len() as f64 * (2.0 * PI).ln()
    }
}

fn uniform_subset(n: usize, cap: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    if n > cap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_0F5A_B5E7);
        rand::seq::SliceRandom::shuffle(idx.as_mut_slice(), &mut rng);
        idx.truncate(cap.max(2));
        idx.sort_unstable();
    }
    idx
}

/// Log marginal likelihood as a function of log hyperparameters.
struct Objective<'a> {
    inputs: &'a [Vec<f64>],
    targets: DVector<f64>,
    design: Option<DMatrix<f64>>,
    ard: bool,
}

impl Objective<'_> {
    /// Returns `(log likelihood, gradient)`; the gradient is only computed
    /// on request.
    fn eval(&self, theta: &[f64], with_grad: bool) -> Option<(f64, Vec<f64>)> {
        let kernel = KernelParams::from_log(theta, self.ard);
        let n = self.inputs.len();
        let latent = gram(&kernel, self.inputs);
        let mut k = latent.clone();
        for i in 0..n {
            k[(i, i)] += kernel.noise;
        }
        let chol = k.cholesky()?;
        let resid = match &self.design {
            None => self.targets.clone(),
            Some(h) => {
                let beta = gls(&chol, h, &self.targets)?;
                &self.targets - h * beta
            }
        };
        let alpha = chol.solve(&resid);
        let logdet: f64 = chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>() * 2.0;
        let ll = -0.5 * resid.dot(&alpha) - 0.5 * logdet - 0.5 * n as f64 * (2.0 * PI).ln();
        if !ll.is_finite() {
            return None;
        }
        if !with_grad {
            return Some((ll, Vec::new()));
        }
        let kinv = inverse_lower(chol.l_dirty());
        let inv_l2: Vec<f64> = (0..self.inputs[0].len())
            .map(|d| kernel.length(d).powi(-2))
            .collect();
        let n_scales = theta.len() - 2;
        let mut g_amp = 0.0;
        let mut g_len = vec![0.0; n_scales];
        let mut trace_w = 0.0;
        for i in 0..n {
            let w = alpha[i] * alpha[i] - kinv[(i, i)];
            trace_w += w;
            g_amp += w * latent[(i, i)];
            for j in 0..i {
                // Off-diagonal pairs appear twice in the trace.
                let w = 2.0 * (alpha[i] * alpha[j] - kinv[(i, j)]);
                let kf = latent[(i, j)];
                g_amp += w * kf;
                let (xi, xj) = (&self.inputs[i], &self.inputs[j]);
                for d in 0..xi.len() {
                    let diff = xi[d] - xj[d];
                    let slot = if self.ard { d } else { 0 };
                    g_len[slot] += 0.5 * w * kf * diff * diff * inv_l2[d];
                }
            }
        }
        let mut grad = Vec::with_capacity(theta.len());
        grad.push(g_amp);
        grad.extend(g_len);
        grad.push(0.5 * kernel.noise * trace_w);
        Some((ll, grad))
    }
}

/// Lower triangle of `(L L^T)^-1` from the Cholesky factor `L`; the strict
/// upper triangle of `l` is ignored and the result's is left at zero.
fn inverse_lower(l: &DMatrix<f64>) -> DMatrix<f64> {
    let n = l.nrows();
    let factor = l.as_slice();
    let mut linv = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let x = &mut linv.as_mut_slice()[j * n..(j + 1) * n];
        x[j] = 1.0;
        for k in j..n {
            let xk = x[k] / factor[k * n + k];
            x[k] = xk;
            for (xr, lr) in x[k + 1..].iter_mut().zip(&factor[k * n + k + 1..(k + 1) * n]) {
                *xr -= xk * lr;
            }
        }
    }
    let cols = linv.as_slice();
    let mut out = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        for i in j..n {
            out[(i, j)] = dot(&cols[i * n + i..(i + 1) * n], &cols[j * n + i..(j + 1) * n]);
        }
    }
    out
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let split = a.len() / 4 * 4;
    for (p, q) in a[..split].chunks_exact(4).zip(b[..split].chunks_exact(4)) {
        for k in 0..4 {
            acc[k] += p[k] * q[k];
        }
    }
    let tail: f64 = a[split..].iter().zip(&b[split..]).map(|(p, q)| p * q).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn spread(values: impl Iterator<Item = f64> + Clone, centered: bool) -> f64 {
    let n = values.clone().count() as f64;
    let mean = if centered {
        values.clone().sum::<f64>() / n
    } else {
        0.0
    };
    (values.map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Data-driven starting point and box for the log hyperparameters.
fn search_space(inputs: &[Vec<f64>], targets: &[f64], kind: MeanKind, ard: bool) -> (Vec<f64>, Bounds) {
    let dim = inputs[0].len();
    let centered = matches!(kind, MeanKind::Constant | MeanKind::Linear);
    let s = spread(targets.iter().copied(), centered).max(1e-6);
    let feature_sd: Vec<f64> = (0..dim)
        .map(|d| {
            let sd = spread(inputs.iter().map(|x| x[d]), true);
            if sd > 1e-12 {
                sd
            } else {
                1.0
            }
        })
        .collect();
    let scales: Vec<f64> = if ard {
        feature_sd
    } else {
        vec![feature_sd.iter().sum::<f64>() / dim as f64]
    };
    let mut start = vec![s.ln()];
    let mut lower = vec![(1e-4 * s).ln()];
    let mut upper = vec![(1e2 * s).ln()];
    for l in &scales {
        start.push(l.ln());
        lower.push((1e-2 * l).ln());
        upper.push((1e3 * l).ln());
    }
    let noise_hi = (4.0 * s * s).max(1e-6);
    start.push((0.01 * s * s).clamp(JITTER_FLOOR, noise_hi).ln());
    lower.push(JITTER_FLOOR.ln());
    upper.push(noise_hi.ln());
    (start, Bounds { lower, upper })
}

/// Maximizes the likelihood over `(x, y)` with multiple starts.
fn optimize_kernel(
    inputs: &[Vec<f64>],
    targets: &[f64],
    options: &FitOptions,
    kind: MeanKind,
    seed: u64,
) -> Result<(KernelParams, FitReport)> {
    let objective = Objective {
        inputs,
        targets: DVector::from_column_slice(targets),
        design: design(kind, inputs),
        ard: options.ard,
    };
    let (guess, bounds) = search_space(inputs, targets, kind, options.ard);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let settings = Settings {
        tolerance: options.tolerance,
        max_iterations: options.max_iterations,
        memory: 8,
    };
    let mut report = FitReport {
        log_likelihood: f64::NEG_INFINITY,
        ..FitReport::default()
    };
    let mut starts = Vec::with_capacity(options.restarts + 1);
    if options.ard {
        // ARD contains the isotropic kernel, so its optimum is a natural start.
        let iso = FitOptions {
            ard: false,
            ..options.clone()
        };
        let (k, _) = optimize_kernel(inputs, targets, &iso, kind, seed)?;
        let mut warm = vec![k.amplitude.ln()];
        warm.extend(std::iter::repeat_n(k.length(0).ln(), inputs[0].len()));
        warm.push(k.noise.ln());
        starts.push(warm);
    }
    for start in 0..options.restarts.max(1) {
        let mut x0 = guess.clone();
        if start > 0 {
            for v in &mut x0 {
                let z: f64 = rng.sample(StandardNormal);
                *v += z;
            }
        }
        starts.push(x0);
    }
    let mut best: Option<Vec<f64>> = None;
    for mut x0 in starts {
        bounds.clamp(&mut x0);
        let Some((ll0, _)) = objective.eval(&x0, false) else {
            report.start_log_likelihoods.push(f64::NEG_INFINITY);
            continue;
        };
        report.start_log_likelihoods.push(ll0);
        let found = optim::minimize(
            |t| objective.eval(t, false).map(|(ll, _)| -ll),
            |t| {
                objective
                    .eval(t, true)
                    .map(|(ll, g)| (-ll, g.into_iter().map(|v| -v).collect()))
            },
            &x0,
            &bounds,
            &settings,
        );
        if let Some(m) = found {
            report.iterations += m.iterations;
            if -m.value > report.log_likelihood {
                report.log_likelihood = -m.value;
                best = Some(m.x);
            }
        }
    }
    let best = best
        .ok_or_else(|| Error::Optimization("log marginal likelihood is undefined at every start".into()))?;
    Ok((KernelParams::from_log(&best, options.ard), report))
}

fn fit_two_stage(
    inputs: &[Vec<f64>],
    targets: &[f64],
    opt_inputs: &[Vec<f64>],
    opt_targets: &[f64],
    validation: Option<(&[Vec<f64>], &[f64])>,
    options: &FitOptions,
    seed: u64,
) -> Result<(GprModel, FitReport)> {
    check_samples(inputs, targets, 2)?;
    check_samples(opt_inputs, opt_targets, 2)?;
    if options.mean != MeanKind::Neural {
        let (kernel, report) = optimize_kernel(opt_inputs, opt_targets, options, options.mean, seed)?;
        let model = GprModel::condition_profiled(kernel, options.mean, inputs.to_vec(), targets.to_vec())?;
        return Ok((model, report));
    }
    let scaler = Standardizer::fit(inputs)?;
    let train_x = scaler.apply_all(inputs);
    let (val_x, val_y) = match validation {
        Some((vx, vy)) => (scaler.apply_all(vx), vy.to_vec()),
        None => (train_x.clone(), targets.to_vec()),
    };
    let config = TrainConfig {
        seed: options.network.seed ^ seed,
        ..options.network.clone()
    };
    let init = MlpModel::new(&MlpModel::architecture(scaler.mean.len(), 1), config.seed)?;
    let (net, _) = nnet::train(
        init,
        TrainData::new(&train_x, targets)?,
        TrainData::new(&val_x, &val_y)?,
        &config,
        Loss::Mse,
    )?;
    let mean = MeanFunction::Neural { net, scaler };
    let resid: Vec<f64> = opt_inputs
        .iter()
        .zip(opt_targets)
        .map(|(x, y)| y - mean.eval(x))
        .collect();
    let (kernel, report) = optimize_kernel(opt_inputs, &resid, options, MeanKind::Zero, seed)?;
    let model = GprModel::condition(kernel, mean, inputs.to_vec(), targets.to_vec())?;
    Ok((model, report))
}

/// Independent GPs for the two gaze angles over a shared feature set.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GprPair {
    features: FeatureConfig,
    theta: GprModel,
    phi: GprModel,
}

impl GprPair {
    pub fn new(features: FeatureConfig, theta: GprModel, phi: GprModel) -> Result<Self> {
        if theta.dim() != features.dim() || phi.dim() != features.dim() {
            return Err(Error::invalid(format!(
                "feature mode {} has {} features but the models take {} and {}",
                features.mode,
                features.dim(),
                theta.dim(),
                phi.dim()
            )));
        }
        Ok(Self { features, theta, phi })
    }

    /// Fits both angle models. Training rows are subsampled per
    /// `(driver, marker)` down to `train_cap`, and again to
    /// `optimization_cap` for the hyperparameter search.
    pub fn fit(
        train: &[&DriveRecord],
        validation: &[&DriveRecord],
        features: FeatureConfig,
        options: &FitOptions,
        seed: u64,
    ) -> Result<(Self, [FitReport; 2])> {
        let rows = stratified_subsample(train, options.train_cap, seed);
        let search = stratified_subsample(&rows, options.optimization_cap, seed.wrapping_add(1));
        let x: Vec<Vec<f64>> = rows.iter().map(|r| features.extract(&r.head)).collect();
        let sx: Vec<Vec<f64>> = search.iter().map(|r| features.extract(&r.head)).collect();
        let vx: Vec<Vec<f64>> = validation.iter().map(|r| features.extract(&r.head)).collect();
        let angle = |recs: &[&DriveRecord], pick: fn(&GazeAngles) -> f64| -> Vec<f64> {
            recs.iter().map(|r| pick(&r.target_gaze)).collect()
        };
        let fit_one = |pick: fn(&GazeAngles) -> f64, angle_seed: u64| {
            let y = angle(&rows, pick);
            let sy = angle(&search, pick);
            let vy = angle(validation, pick);
            let val = (!validation.is_empty()).then_some((vx.as_slice(), vy.as_slice()));
            fit_two_stage(&x, &y, &sx, &sy, val, options, angle_seed)
        };
        let (theta, rt) = fit_one(|g| g.theta, seed.wrapping_mul(2).wrapping_add(11))?;
        let (phi, rp) = fit_one(|g| g.phi, seed.wrapping_mul(2).wrapping_add(12))?;
        Ok((Self::new(features, theta, phi)?, [rt, rp]))
    }

    pub fn features(&self) -> FeatureConfig {
        self.features
    }

    pub fn theta(&self) -> &GprModel {
        &self.theta
    }

    pub fn phi(&self) -> &GprModel {
        &self.phi
    }
}

impl GazePredictor for GprPair {
    fn predict_gaze(&self, head: &HeadPose) -> Result<GazeDistribution> {
        let x = self.features.extract(head);
        let (mt, vt) = self.theta.predict_observed(&x)?;
        let (mp, vp) = self.phi.predict_observed(&x)?;
        Ok(GazeDistribution::from_parts(GazeAngles::new(mt, mp), vt, vp))
    }

    fn predict_batch(&self, heads: &[HeadPose]) -> Result<Vec<GazeDistribution>> {
        let xs: Vec<Vec<f64>> = heads.iter().map(|h| self.features.extract(h)).collect();
        let theta = self.theta.predict_many(&xs)?;
        let phi = self.phi.predict_many(&xs)?;
        let (nt, np) = (self.theta.kernel.noise, self.phi.kernel.noise);
        Ok(theta
            .into_iter()
            .zip(phi)
            .map(|((mt, vt), (mp, vp))| {
                GazeDistribution::from_parts(GazeAngles::new(mt, mp), vt + nt, vp + np)
            })
            .collect())
    }

    fn name(&self) -> String {
        let ard = if self.theta.kernel.is_ard() { "+ARD" } else { "" };
        format!("GPR-{}{ard}", self.theta.mean.kind())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn random_inputs(rng: &mut ChaCha8Rng, n: usize, d: usize, range: f64) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| (0..d).map(|_| rng.random_range(0.0..range)).collect())
            .collect()
    }

    /// Posterior evaluated with an explicit inverse.
    fn dense_oracle(model: &GprModel, x: &[f64]) -> (f64, f64) {
        let k = model.kernel();
        let n = model.inputs().len();
        let mut gram = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                gram[(i, j)] = k.eval(&model.inputs()[i], &model.inputs()[j]).unwrap();
            }
            gram[(i, i)] += k.noise;
        }
        let inv = gram.try_inverse().unwrap();
        let ks = DVector::from_iterator(n, model.inputs().iter().map(|xi| k.eval(x, xi).unwrap()));
        let r = DVector::from_iterator(
            n,
            model
                .inputs()
                .iter()
                .zip(model.targets())
                .map(|(xi, y)| y - model.mean_function().eval(xi)),
        );
        let mean = model.mean_function().eval(x) + (ks.transpose() * &inv * r)[0];
        let var = k.amplitude.powi(2) - (ks.transpose() * &inv * &ks)[0];
        (mean, var)
    }

    #[test]
    fn kernel_basics() {
        let k = KernelParams::isotropic(1.5, 0.5, 0.0);
        assert_eq!(k.eval(&[0.3, 0.1], &[0.3, 0.1]).unwrap(), 2.25);
        let d = 0.5 * 2f64.sqrt();
        let v = k.eval(&[0.0, 0.0], &[d, 0.0]).unwrap();
        assert!((v - 2.25 * (-1.0f64).exp()).abs() < 1e-12);
        assert!(k.eval(&[0.0], &[0.0, 1.0]).is_err());
        let ard = KernelParams::ard(1.5, vec![0.5, 0.5], 0.0);
        let a = [0.2, -0.7];
        let b = [1.1, 0.4];
        assert_eq!(ard.eval(&a, &b).unwrap(), k.eval(&a, &b).unwrap());
        assert!(ard.eval(&[0.0; 3], &[0.0; 3]).is_err());
    }

    #[test]
    fn matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for trial in 0..20 {
            let d = 1 + trial % 6;
            let n = 3 + trial % 18;
            let x = random_inputs(&mut rng, n, d, 2.0);
            let y: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let kernel = KernelParams::ard(
                rng.random_range(0.5..2.0),
                (0..d).map(|_| rng.random_range(0.3..1.5)).collect(),
                rng.random_range(0.01..0.1),
            );
            let mean = MeanFunction::Linear {
                offset: 0.3,
                weights: (0..d).map(|_| rng.random_range(-1.0..1.0)).collect(),
            };
            let m = GprModel::condition(kernel, mean, x, y).unwrap();
            let xs: Vec<f64> = (0..d).map(|_| rng.random_range(0.0..2.0)).collect();
            let (mu, var) = m.predict(&xs).unwrap();
            let (mo, vo) = dense_oracle(&m, &xs);
            assert!((mu - mo).abs() < 1e-8 && (var - vo).abs() < 1e-8, "trial {trial}");
        }
    }

    #[test]
    fn interpolates_training_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random_inputs(&mut rng, 12, 2, 3.0);
        let y: Vec<f64> = x.iter().map(|v| (v[0] * 2.0).sin() + v[1]).collect();
        let m = GprModel::condition(
            KernelParams::isotropic(1.0, 0.5, 1e-9),
            MeanFunction::Zero,
            x.clone(),
            y.clone(),
        )
        .unwrap();
        for (xi, yi) in x.iter().zip(&y) {
            let (mu, var) = m.predict(xi).unwrap();
            assert!((mu - yi).abs() < 1e-4);
            assert!(var <= 1e-6);
        }
    }

    #[test]
    fn reverts_to_prior_far_away() {
        let x = vec![vec![0.0], vec![0.5], vec![1.0]];
        let y = vec![1.0, 2.0, 0.5];
        let mean = MeanFunction::Constant { offset: -3.0 };
        let m = GprModel::condition(KernelParams::isotropic(0.7, 0.3, 1e-4), mean, x, y).unwrap();
        let (mu, var) = m.predict(&[100.0]).unwrap();
        assert!((mu + 3.0).abs() < 1e-6);
        assert!((var - 0.49).abs() < 1e-6);
    }

    #[test]
    fn duplicate_inputs_escalate_jitter() {
        let x = vec![vec![0.0]; 4];
        let y = vec![1.0, 1.0, 1.0, 1.0];
        let m =
            GprModel::condition(KernelParams::isotropic(1.0, 1.0, 0.0), MeanFunction::Zero, x, y).unwrap();
        assert!(m.kernel().noise >= JITTER_FLOOR);
    }

    #[test]
    fn likelihood_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_inputs(&mut rng, 25, 3, 2.0);
        let y: Vec<f64> = x
            .iter()
            .map(|v| v[0].sin() + 0.5 * v[1] + 0.1 * v[2] * v[2])
            .collect();
        for (kind, ard) in [
            (MeanKind::Zero, false),
            (MeanKind::Constant, true),
            (MeanKind::Linear, true),
            (MeanKind::Linear, false),
        ] {
            let obj = Objective {
                inputs: &x,
                targets: DVector::from_column_slice(&y),
                design: design(kind, &x),
                ard,
            };
            let theta: Vec<f64> = if ard {
                vec![0.1, -0.2, 0.3, 0.0, -3.0]
            } else {
                vec![0.1, -0.2, -3.0]
            };
            let (_, g) = obj.eval(&theta, true).unwrap();
            for i in 0..theta.len() {
                let h = 1e-6;
                let mut up = theta.clone();
                up[i] += h;
                let mut dn = theta.clone();
                dn[i] -= h;
                let num = (obj.eval(&up, false).unwrap().0 - obj.eval(&dn, false).unwrap().0) / (2.0 * h);
                assert!(
                    (num - g[i]).abs() <= 1e-5 * (1.0 + num.abs()),
                    "{kind:?} ard={ard} param {i}: {num} vs {}",
                    g[i]
                );
            }
        }
    }

    #[test]
    fn recovers_known_hyperparameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let x = random_inputs(&mut rng, 200, 2, 5.0);
        let truth = KernelParams::isotropic(1.0, 0.5, 1e-4);
        let mut k = gram(&truth, &x);
        for i in 0..200 {
            k[(i, i)] += truth.noise;
        }
        let l = k.cholesky().unwrap().l();
        let z = DVector::from_iterator(200, (0..200).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let y: Vec<f64> = (l * z).iter().copied().collect();
        let options = FitOptions {
            mean: MeanKind::Zero,
            ..FitOptions::default()
        };
        let (m, report) = GprModel::fit(&x, &y, None, &options, 1).unwrap();
        let sf = m.kernel().amplitude;
        let LengthScales::Isotropic(len) = m.kernel().length_scales else {
            panic!("isotropic fit expected")
        };
        assert!((0.8..=1.2).contains(&sf), "amplitude {sf}");
        assert!((0.4..=0.6).contains(&len), "length {len}");
        for s in &report.start_log_likelihoods {
            assert!(report.log_likelihood >= *s);
        }
    }

    #[test]
    fn batch_prediction_is_bitwise_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random_inputs(&mut rng, 90, 3, 2.0);
        let y: Vec<f64> = x.iter().map(|r| r[0].cos() * r[1]).collect();
        let m = GprModel::condition_profiled(KernelParams::isotropic(1.0, 0.7, 1e-3), MeanKind::Linear, x, y)
            .unwrap();
        let queries = random_inputs(&mut rng, 70, 3, 2.5);
        let batch = m.predict_many(&queries).unwrap();
        for (q, b) in queries.iter().zip(&batch) {
            assert_eq!(m.predict(q).unwrap(), *b);
        }
        assert!(m.predict_many(&[vec![0.0; 2]]).is_err());
    }

    #[test]
    fn lower_inverse_matches_dense_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for n in [1, 2, 7, 33] {
            let a = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
            let spd = &a * a.transpose() + DMatrix::identity(n, n);
            let chol = spd.clone().cholesky().unwrap();
            let dense = chol.inverse();
            let lower = inverse_lower(chol.l_dirty());
            for j in 0..n {
                for i in j..n {
                    assert!((lower[(i, j)] - dense[(i, j)]).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn ard_is_never_worse_than_isotropic() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random_inputs(&mut rng, 150, 3, 2.0);
        let noise = Normal::new(0.0, 0.05).unwrap();
        let y: Vec<f64> = x
            .iter()
            .map(|r| (2.0 * r[0]).sin() + 0.1 * r[1] + noise.sample(&mut rng))
            .collect();
        let iso = FitOptions::default();
        let ard = FitOptions {
            ard: true,
            ..FitOptions::default()
        };
        let (_, iso_report) = GprModel::fit(&x, &y, None, &iso, 3).unwrap();
        let (_, ard_report) = GprModel::fit(&x, &y, None, &ard, 3).unwrap();
        assert!(ard_report.log_likelihood >= iso_report.log_likelihood - 1e-6);
    }

    #[test]
    fn constant_mean_recovers_offset() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_inputs(&mut rng, 120, 2, 1.0);
        let noise = Normal::new(0.0, 0.1).unwrap();
        let y: Vec<f64> = x.iter().map(|_| 3.0 + noise.sample(&mut rng)).collect();
        let options = FitOptions {
            mean: MeanKind::Constant,
            ..FitOptions::default()
        };
        let (m, _) = GprModel::fit(&x, &y, None, &options, 0).unwrap();
        let MeanFunction::Constant { offset } = m.mean_function() else {
            panic!("constant mean expected")
        };
        assert!((2.9..=3.1).contains(offset), "{offset}");
    }

    #[test]
    fn linear_mean_recovers_exact_plane() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random_inputs(&mut rng, 60, 3, 1.0);
        let coef = [0.4, -1.3, 2.2];
        let y: Vec<f64> = x
            .iter()
            .map(|v| 0.7 + coef.iter().zip(v).map(|(a, b)| a * b).sum::<f64>())
            .collect();
        let options = FitOptions {
            mean: MeanKind::Linear,
            ard: true,
            ..FitOptions::default()
        };
        let (m, _) = GprModel::fit(&x, &y, None, &options, 0).unwrap();
        let MeanFunction::Linear { offset, weights } = m.mean_function() else {
            panic!("linear mean expected")
        };
        assert!((offset - 0.7).abs() < 1e-3);
        for (w, c) in weights.iter().zip(coef) {
            assert!((w - c).abs() < 1e-3, "{w} vs {c}");
        }
        let (_, var) = m.predict(&[0.5, 0.5, 0.5]).unwrap();
        assert!(var < 1e-6, "{var}");
    }

    #[test]
    fn ard_tied_equals_isotropic_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = random_inputs(&mut rng, 15, 3, 1.0);
        let y: Vec<f64> = x.iter().map(|v| v[0] - v[2]).collect();
        let iso = GprModel::condition(
            KernelParams::isotropic(0.9, 0.4, 1e-3),
            MeanFunction::Zero,
            x.clone(),
            y.clone(),
        )
        .unwrap();
        let ard = GprModel::condition(
            KernelParams::ard(0.9, vec![0.4; 3], 1e-3),
            MeanFunction::Zero,
            x,
            y,
        )
        .unwrap();
        let q = [0.3, 0.9, 0.1];
        assert_eq!(iso.predict(&q).unwrap(), ard.predict(&q).unwrap());
    }

    #[test]
    fn serde_round_trip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = random_inputs(&mut rng, 10, 2, 1.0);
        let y: Vec<f64> = x.iter().map(|v| v[0] * v[1]).collect();
        let m = GprModel::condition_profiled(
            KernelParams::ard(1.1, vec![0.3, 0.6], 1e-3),
            MeanKind::Linear,
            x,
            y,
        )
        .unwrap();
        let text = serde_json::to_string(&m).unwrap();
        let back: GprModel = serde_json::from_str(&text).unwrap();
        let q = [0.25, 0.75];
        assert_eq!(m.predict(&q).unwrap(), back.predict(&q).unwrap());
    }
}
