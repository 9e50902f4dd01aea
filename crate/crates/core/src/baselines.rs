//! Baseline predictors: linear regression, a network regressor with a
//! constant variance, and a mixture density network.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dataset::{DriveRecord, FeatureConfig};
use crate::error::{Error, Result};
use crate::nnet::{self, Loss, MlpModel, Standardizer, TrainConfig, TrainData, TrainTrace};
use crate::types::{GazeAngles, GazeDistribution, GazePredictor, HeadPose};

/// Lower bound on stored variances so every prediction stays a proper
/// Gaussian even on noise-free data.
pub const MIN_VARIANCE: f64 = 1e-18;

/// A regressor for one gaze angle returning `(mean, variance)`.
pub trait ScalarRegressor: Send + Sync {
    fn predict(&self, x: &[f64]) -> Result<(f64, f64)>;
}

/// Ordinary least squares with a constant residual variance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    /// Intercept first, then one weight per feature.
    pub coefficients: Vec<f64>,
    /// Mean squared training residual.
    pub variance: f64,
}

impl LinearFit {
    /// Least squares through a QR factorization of the design matrix.
    pub fn fit(inputs: &[Vec<f64>], targets: &[f64]) -> Result<Self> {
        let (n, d) = shape(inputs, targets)?;
        let cols = d + 1;
        if n < cols {
            return Err(Error::SingularDesign { rank: n, cols });
        }
        let h = DMatrix::from_fn(n, cols, |i, j| if j == 0 { 1.0 } else { inputs[i][j - 1] });
        let y = DVector::from_column_slice(targets);
        let qr = h.clone().qr();
        let r = qr.r();
        let diag_max = r.diagonal().iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let rank = r
            .diagonal()
            .iter()
            .filter(|v| v.abs() > 1e-10 * diag_max.max(f64::MIN_POSITIVE))
            .count();
        if rank < cols {
            return Err(Error::SingularDesign { rank, cols });
        }
        let qty = qr.q().transpose() * &y;
        let beta = r
            .solve_upper_triangular(&qty)
            .ok_or(Error::SingularDesign { rank, cols })?;
        let resid = &y - &h * &beta;
        Ok(Self {
            coefficients: beta.iter().copied().collect(),
            variance: (resid.norm_squared() / n as f64).max(MIN_VARIANCE),
        })
    }

    pub fn mean(&self, x: &[f64]) -> f64 {
        self.coefficients[0]
            + self.coefficients[1..]
                .iter()
                .zip(x)
                .map(|(a, v)| a * v)
                .sum::<f64>()
    }
}

impl ScalarRegressor for LinearFit {
    fn predict(&self, x: &[f64]) -> Result<(f64, f64)> {
        check_dim(x, self.coefficients.len() - 1)?;
        Ok((self.mean(x), self.variance))
    }
}

/// MSE-trained network with its training MSE as a constant variance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NnRegressor {
    pub scaler: Standardizer,
    pub net: MlpModel,
    pub variance: f64,
}

impl NnRegressor {
    pub fn fit(
        train: (&[Vec<f64>], &[f64]),
        validation: (&[Vec<f64>], &[f64]),
        config: &TrainConfig,
    ) -> Result<(Self, TrainTrace)> {
        let (_, d) = shape(train.0, train.1)?;
        let scaler = Standardizer::fit(train.0)?;
        let tx = scaler.apply_all(train.0);
        let vx = scaler.apply_all(validation.0);
        let init = MlpModel::new(&MlpModel::architecture(d, 1), config.seed)?;
        let (net, trace) = nnet::train(
            init,
            TrainData::new(&tx, train.1)?,
            TrainData::new(&vx, validation.1)?,
            config,
            Loss::Mse,
        )?;
        let variance = TrainData::new(&tx, train.1)?.mean_loss(&net, Loss::Mse);
        Ok((
            Self {
                scaler,
                net,
                variance: variance.max(MIN_VARIANCE),
            },
            trace,
        ))
    }
}

impl ScalarRegressor for NnRegressor {
    fn predict(&self, x: &[f64]) -> Result<(f64, f64)> {
        let out = self.net.forward(&self.scaler.apply(x))?;
        Ok((out[0], self.variance))
    }
}

/// Mixture density network. With one component the outputs are
/// `(mu, log sigma)`; with `M > 1` they are `M` logits, `M` means and `M`
/// log-sigmas, and predictions are moment-matched to one Gaussian.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MdnRegressor {
    pub scaler: Standardizer,
    pub net: MlpModel,
    pub components: usize,
}

impl MdnRegressor {
    pub fn loss(components: usize) -> Loss {
        if components == 1 {
            Loss::GaussianNll
        } else {
            Loss::MixtureNll { components }
        }
    }

    pub fn fit(
        train: (&[Vec<f64>], &[f64]),
        validation: (&[Vec<f64>], &[f64]),
        config: &TrainConfig,
        components: usize,
    ) -> Result<(Self, TrainTrace)> {
        if components == 0 {
            return Err(Error::invalid("a mixture needs at least one component"));
        }
        let (_, d) = shape(train.0, train.1)?;
        let loss = Self::loss(components);
        let scaler = Standardizer::fit(train.0)?;
        let tx = scaler.apply_all(train.0);
        let vx = scaler.apply_all(validation.0);
        let init = MlpModel::new(&MlpModel::architecture(d, loss.output_dim()), config.seed)?;
        let (net, trace) = nnet::train(
            init,
            TrainData::new(&tx, train.1)?,
            TrainData::new(&vx, validation.1)?,
            config,
            loss,
        )?;
        Ok((
            Self {
                scaler,
                net,
                components,
            },
            trace,
        ))
    }

    /// Mean and variance encoded by raw output nodes.
    pub fn decode(out: &[f64], components: usize) -> (f64, f64) {
        if components == 1 {
            let sigma = out[1].exp();
            return (out[0], (sigma * sigma).max(MIN_VARIANCE));
        }
        let m = components;
        let lmax = out[..m].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = out[..m].iter().map(|l| (l - lmax).exp()).collect();
        let total: f64 = w.iter().sum();
        let mean: f64 = (0..m).map(|k| w[k] / total * out[m + k]).sum();
        let second: f64 = (0..m)
            .map(|k| w[k] / total * ((2.0 * out[2 * m + k]).exp() + out[m + k].powi(2)))
            .sum();
        (mean, (second - mean * mean).max(MIN_VARIANCE))
    }
}

impl ScalarRegressor for MdnRegressor {
    fn predict(&self, x: &[f64]) -> Result<(f64, f64)> {
        let out = self.net.forward(&self.scaler.apply(x))?;
        Ok(Self::decode(&out, self.components))
    }
}

fn shape(inputs: &[Vec<f64>], targets: &[f64]) -> Result<(usize, usize)> {
    if inputs.is_empty() || inputs.len() != targets.len() {
        return Err(Error::invalid("need matching, non-empty inputs and targets"));
    }
    let d = inputs[0].len();
    if inputs.iter().any(|x| x.len() != d) {
        return Err(Error::invalid("ragged feature rows"));
    }
    Ok((inputs.len(), d))
}

fn check_dim(x: &[f64], d: usize) -> Result<()> {
    if x.len() != d {
        return Err(Error::invalid(format!("expected {d} features, got {}", x.len())));
    }
    Ok(())
}

/// Independent regressors for `theta` and `phi` over one feature set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnglePair<M> {
    pub features: FeatureConfig,
    pub theta: M,
    pub phi: M,
}

pub type LinRegModel = AnglePair<LinearFit>;
pub type NnRegModel = AnglePair<NnRegressor>;
pub type MdnModel = AnglePair<MdnRegressor>;

/// Feature rows plus `theta` and `phi` targets.
pub struct AngleSamples {
    pub inputs: Vec<Vec<f64>>,
    pub theta: Vec<f64>,
    pub phi: Vec<f64>,
}

impl AngleSamples {
    pub fn from_records(records: &[&DriveRecord], features: FeatureConfig) -> Self {
        Self {
            inputs: records.iter().map(|r| features.extract(&r.head)).collect(),
            theta: records.iter().map(|r| r.target_gaze.theta).collect(),
            phi: records.iter().map(|r| r.target_gaze.phi).collect(),
        }
    }

    fn theta(&self) -> (&[Vec<f64>], &[f64]) {
        (&self.inputs, &self.theta)
    }

    fn phi(&self) -> (&[Vec<f64>], &[f64]) {
        (&self.inputs, &self.phi)
    }
}

fn angle_config(config: &TrainConfig, angle: u64) -> TrainConfig {
    TrainConfig {
        seed: config.seed.wrapping_mul(31).wrapping_add(angle),
        ..config.clone()
    }
}

pub fn fit_linreg(train: &[&DriveRecord], features: FeatureConfig) -> Result<LinRegModel> {
    let s = AngleSamples::from_records(train, features);
    Ok(AnglePair {
        features,
        theta: LinearFit::fit(&s.inputs, &s.theta)?,
        phi: LinearFit::fit(&s.inputs, &s.phi)?,
    })
}

pub fn fit_nn(
    train: &[&DriveRecord],
    validation: &[&DriveRecord],
    features: FeatureConfig,
    config: &TrainConfig,
) -> Result<(NnRegModel, [TrainTrace; 2])> {
    let t = AngleSamples::from_records(train, features);
    let v = AngleSamples::from_records(validation, features);
    let (theta, tt) = NnRegressor::fit(t.theta(), v.theta(), &angle_config(config, 1))?;
    let (phi, tp) = NnRegressor::fit(t.phi(), v.phi(), &angle_config(config, 2))?;
    Ok((AnglePair { features, theta, phi }, [tt, tp]))
}

pub fn fit_mdn(
    train: &[&DriveRecord],
    validation: &[&DriveRecord],
    features: FeatureConfig,
    config: &TrainConfig,
    components: usize,
) -> Result<(MdnModel, [TrainTrace; 2])> {
    let t = AngleSamples::from_records(train, features);
    let v = AngleSamples::from_records(validation, features);
    let (theta, tt) = MdnRegressor::fit(t.theta(), v.theta(), &angle_config(config, 1), components)?;
    let (phi, tp) = MdnRegressor::fit(t.phi(), v.phi(), &angle_config(config, 2), components)?;
    Ok((AnglePair { features, theta, phi }, [tt, tp]))
}

/// Display name of a baseline family.
pub trait Labeled {
    const LABEL: &'static str;
}

impl Labeled for LinearFit {
    const LABEL: &'static str = "LR";
}

impl Labeled for NnRegressor {
    const LABEL: &'static str = "NN";
}

impl Labeled for MdnRegressor {
    const LABEL: &'static str = "MDN";
}

impl<M: ScalarRegressor + Labeled> GazePredictor for AnglePair<M> {
    fn predict_gaze(&self, head: &HeadPose) -> Result<GazeDistribution> {
        let x = self.features.extract(head);
        let (mt, vt) = self.theta.predict(&x)?;
        let (mp, vp) = self.phi.predict(&x)?;
        Ok(GazeDistribution::from_parts(GazeAngles::new(mt, mp), vt, vp))
    }

    fn name(&self) -> String {
        M::LABEL.to_string()
    }
}
