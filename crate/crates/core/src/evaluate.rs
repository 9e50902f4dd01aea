//! Confidence regions, accuracy/area curves, calibration and the
//! leave-one-driver-out experiment driver.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{fit_linreg, fit_mdn, fit_nn, LinRegModel, MdnModel, NnRegModel};
use crate::dataset::{
    driver_ids, make_folds, normalize_all, records_for, DriveRecord, FeatureConfig, FeatureMode, FoldSplit,
};
use crate::error::{Error, Result};
use crate::geometry::{spherical_area_fraction, AngularEllipse};
use crate::gpr::{FitOptions, GprPair, MeanKind};
use crate::nnet::TrainConfig;
use crate::types::{GazeAngles, GazeDistribution, GazePredictor, HeadPose};

pub mod report;

/// Accuracies reported in the area table.
pub const TABLE_ACCURACIES: [f64; 3] = [0.50, 0.75, 0.95];
/// Sphere fractions reported in the accuracy table.
pub const TABLE_AREAS: [f64; 3] = [0.01, 0.02, 0.04];

/// `0.01, 0.02, ..., 0.99`.
pub fn confidence_grid() -> Vec<f64> {
    (1..=99).map(|i| i as f64 / 100.0).collect()
}

/// Mahalanobis radius enclosing mass `c` of a 2-D Gaussian.
pub fn mahalanobis_radius(confidence: f64) -> Result<f64> {
    if !(confidence > 0.0 && confidence < 1.0) {
        return Err(Error::invalid(format!(
            "confidence must lie in (0, 1), got {confidence}"
        )));
    }
    Ok((-2.0 * (-confidence).ln_1p()).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceRegion {
    pub ellipse: AngularEllipse,
    pub confidence: f64,
    /// Solid angle as a fraction of the sphere.
    pub area_fraction: f64,
}

impl ConfidenceRegion {
    pub fn contains(&self, g: GazeAngles) -> bool {
        self.ellipse.contains(g)
    }
}

/// Level set of `dist` holding probability mass `confidence`.
pub fn region_at(dist: &GazeDistribution, confidence: f64) -> Result<ConfidenceRegion> {
    dist.validate()?;
    let r = mahalanobis_radius(confidence)?;
    let ellipse = AngularEllipse {
        center: dist.mean(),
        semi_theta: r * dist.theta.std_dev(),
        semi_phi: r * dist.phi.std_dev(),
    };
    Ok(ConfidenceRegion {
        ellipse,
        confidence,
        area_fraction: spherical_area_fraction(&ellipse)?,
    })
}

/// One operating point: mean per-point region area and the fraction of
/// ground truths inside their own region.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub confidence: f64,
    pub area: f64,
    pub accuracy: f64,
    pub hits: usize,
    pub count: usize,
}

#[derive(Clone, Copy, Debug, Default)]
struct LevelTotals {
    hits: usize,
    count: usize,
    area_sum: f64,
}

impl LevelTotals {
    fn add(&mut self, other: &Self) {
        self.hits += other.hits;
        self.count += other.count;
        self.area_sum += other.area_sum;
    }
}

fn level_totals(pairs: &[(GazeDistribution, GazeAngles)], grid: &[f64]) -> Result<Vec<LevelTotals>> {
    let mut totals = vec![LevelTotals::default(); grid.len()];
    for (dist, truth) in pairs {
        for (t, &c) in totals.iter_mut().zip(grid) {
            let region = region_at(dist, c)?;
            t.count += 1;
            t.area_sum += region.area_fraction;
            if region.contains(*truth) {
                t.hits += 1;
            }
        }
    }
    Ok(totals)
}

fn curve_from_totals(totals: &[LevelTotals], grid: &[f64]) -> Vec<CurvePoint> {
    let mut curve: Vec<CurvePoint> = totals
        .iter()
        .zip(grid)
        .map(|(t, &c)| CurvePoint {
            confidence: c,
            area: t.area_sum / t.count as f64,
            accuracy: t.hits as f64 / t.count as f64,
            hits: t.hits,
            count: t.count,
        })
        .collect();
    curve.sort_by(|a, b| {
        a.area
            .total_cmp(&b.area)
            .then(a.confidence.total_cmp(&b.confidence))
    });
    curve
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::invalid("empty confidence grid"));
    }
    for &c in grid {
        mahalanobis_radius(c)?;
    }
    Ok(())
}

/// Accuracy curve over `(prediction, ground truth)` pairs, sorted by area.
pub fn accuracy_curve_from(
    pairs: &[(GazeDistribution, GazeAngles)],
    grid: &[f64],
) -> Result<Vec<CurvePoint>> {
    if pairs.is_empty() {
        return Err(Error::invalid("accuracy curve needs test records"));
    }
    check_grid(grid)?;
    Ok(curve_from_totals(&level_totals(pairs, grid)?, grid))
}

pub fn accuracy_curve(
    model: &dyn GazePredictor,
    test: &[DriveRecord],
    grid: &[f64],
) -> Result<Vec<CurvePoint>> {
    let pairs = predict_records(model, test.iter())?;
    accuracy_curve_from(&pairs, grid)
}

fn predict_records<'a>(
    model: &dyn GazePredictor,
    records: impl Iterator<Item = &'a DriveRecord>,
) -> Result<Vec<(GazeDistribution, GazeAngles)>> {
    let (heads, truth): (Vec<HeadPose>, Vec<GazeAngles>) = records.map(|r| (r.head, r.target_gaze)).unzip();
    Ok(model.predict_batch(&heads)?.into_iter().zip(truth).collect())
}

fn interpolate(
    curve: &[CurvePoint],
    target: f64,
    key: fn(&CurvePoint) -> f64,
    value: fn(&CurvePoint) -> f64,
) -> Option<f64> {
    let first = curve.first()?;
    if key(first) == target {
        return Some(value(first));
    }
    for w in curve.windows(2) {
        let (k0, k1) = (key(&w[0]), key(&w[1]));
        if k0 < target && target <= k1 {
            let t = (target - k0) / (k1 - k0);
            return Some(value(&w[0]) + t * (value(&w[1]) - value(&w[0])));
        }
    }
    None
}

/// Area needed for each target accuracy, by linear interpolation along the
/// curve. `None` marks accuracies the curve never reaches.
pub fn area_at_accuracy(curve: &[CurvePoint], targets: &[f64]) -> Vec<Option<f64>> {
    targets
        .iter()
        .map(|&t| interpolate(curve, t, |p| p.accuracy, |p| p.area))
        .collect()
}

/// Accuracy reached at each target area; `None` outside the curve's range.
pub fn accuracy_at_area(curve: &[CurvePoint], targets: &[f64]) -> Vec<Option<f64>> {
    targets
        .iter()
        .map(|&t| interpolate(curve, t, |p| p.area, |p| p.accuracy))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    /// `(theoretical, empirical)` CDF pairs on a uniform grid.
    pub pairs: Vec<(f64, f64)>,
    /// Mean absolute gap between the two CDFs.
    pub deviation: f64,
}

/// Probability mass of the predicted Gaussian inside the ellipse through
/// `truth`.
pub fn cdf_value(dist: &GazeDistribution, truth: GazeAngles) -> f64 {
    -(-0.5 * dist.mahalanobis_sq(truth)).exp_m1()
}

pub fn calibration_from(
    pairs: &[(GazeDistribution, GazeAngles)],
    grid_size: usize,
) -> Result<CalibrationResult> {
    if pairs.is_empty() || grid_size == 0 {
        return Err(Error::invalid(
            "calibration needs test records and a non-empty grid",
        ));
    }
    let mut values: Vec<f64> = pairs.iter().map(|(d, g)| cdf_value(d, *g)).collect();
    values.sort_by(f64::total_cmp);
    let n = values.len() as f64;
    let mut idx = 0;
    let mut out = Vec::with_capacity(grid_size);
    let mut total = 0.0;
    for k in 0..grid_size {
        let p = (k as f64 + 0.5) / grid_size as f64;
        while idx < values.len() && values[idx] <= p {
            idx += 1;
        }
        let emp = idx as f64 / n;
        total += (p - emp).abs();
        out.push((p, emp));
    }
    Ok(CalibrationResult {
        pairs: out,
        deviation: total / grid_size as f64,
    })
}

pub fn cdf_calibration(
    model: &dyn GazePredictor,
    test: &[DriveRecord],
    grid_size: usize,
) -> Result<CalibrationResult> {
    calibration_from(&predict_records(model, test.iter())?, grid_size)
}

/// Regressor family under evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Lr,
    Nn,
    Mdn,
    Gpr(MeanKind),
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelKind::Lr => f.write_str("lr"),
            ModelKind::Nn => f.write_str("nn"),
            ModelKind::Mdn => f.write_str("mdn"),
            ModelKind::Gpr(m) => write!(f, "gpr-{m}"),
        }
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lr" => Ok(ModelKind::Lr),
            "nn" => Ok(ModelKind::Nn),
            "mdn" => Ok(ModelKind::Mdn),
            other => match other.strip_prefix("gpr-") {
                Some(mean) => Ok(ModelKind::Gpr(mean.parse()?)),
                None => Err(Error::invalid(format!(
                    "unknown model '{other}' (expected lr, nn, mdn, gpr-zero, gpr-const, gpr-linear or gpr-nn)"
                ))),
            },
        }
    }
}

/// Everything needed to fit one model family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub ard: bool,
    pub network: TrainConfig,
    pub gpr: FitOptions,
    pub mixture_components: usize,
}

impl ModelSpec {
    pub fn new(kind: ModelKind) -> Self {
        Self {
            kind,
            ard: false,
            network: TrainConfig::default(),
            gpr: FitOptions::default(),
            mixture_components: 1,
        }
    }

    pub fn with_ard(mut self, ard: bool) -> Self {
        self.ard = ard;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.ard && !matches!(self.kind, ModelKind::Gpr(_)) {
            return Err(Error::invalid(format!(
                "--ard only applies to GPR models, not {}",
                self.kind
            )));
        }
        self.network.validate()?;
        if self.mixture_components == 0 {
            return Err(Error::invalid("mixture needs at least one component"));
        }
        Ok(())
    }

    /// Display label, e.g. `GPR-linear+ARD`.
    pub fn label(&self) -> String {
        match self.kind {
            ModelKind::Lr => "LR".into(),
            ModelKind::Nn => "NN".into(),
            ModelKind::Mdn => "MDN".into(),
            ModelKind::Gpr(m) => format!("GPR-{m}{}", if self.ard { "+ARD" } else { "" }),
        }
    }

    pub fn fit(
        &self,
        train: &[&DriveRecord],
        validation: &[&DriveRecord],
        features: FeatureConfig,
        seed: u64,
    ) -> Result<TrainedModel> {
        self.validate()?;
        let network = TrainConfig {
            seed,
            ..self.network.clone()
        };
        Ok(match self.kind {
            ModelKind::Lr => TrainedModel::Lr(fit_linreg(train, features)?),
            ModelKind::Nn => TrainedModel::Nn(fit_nn(train, validation, features, &network)?.0),
            ModelKind::Mdn => {
                TrainedModel::Mdn(fit_mdn(train, validation, features, &network, self.mixture_components)?.0)
            }
            ModelKind::Gpr(mean) => {
                let options = FitOptions {
                    mean,
                    ard: self.ard,
                    network,
                    ..self.gpr.clone()
                };
                TrainedModel::Gpr(Box::new(
                    GprPair::fit(train, validation, features, &options, seed)?.0,
                ))
            }
        })
    }
}

/// A fitted model of any family.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "family", content = "model", rename_all = "snake_case")]
pub enum TrainedModel {
    Lr(LinRegModel),
    Nn(NnRegModel),
    Mdn(MdnModel),
    Gpr(Box<GprPair>),
}

impl TrainedModel {
    pub fn features(&self) -> FeatureConfig {
        match self {
            TrainedModel::Lr(m) => m.features,
            TrainedModel::Nn(m) => m.features,
            TrainedModel::Mdn(m) => m.features,
            TrainedModel::Gpr(m) => m.features(),
        }
    }

    fn inner(&self) -> &dyn GazePredictor {
        match self {
            TrainedModel::Lr(m) => m,
            TrainedModel::Nn(m) => m,
            TrainedModel::Mdn(m) => m,
            TrainedModel::Gpr(m) => m,
        }
    }
}

impl GazePredictor for TrainedModel {
    fn predict_gaze(&self, head: &HeadPose) -> Result<GazeDistribution> {
        self.inner().predict_gaze(head)
    }

    fn predict_batch(&self, heads: &[HeadPose]) -> Result<Vec<GazeDistribution>> {
        self.inner().predict_batch(heads)
    }

    fn name(&self) -> String {
        self.inner().name()
    }
}

/// One test-set prediction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    /// Row of the record in the evaluated dataset.
    pub index: usize,
    pub driver_id: String,
    pub fold: usize,
    pub truth: GazeAngles,
    pub dist: GazeDistribution,
}

/// Curves, calibration and table entries for one set of predictions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub curve: Vec<CurvePoint>,
    pub calibration: CalibrationResult,
    /// `(accuracy, area)` pairs; area is a sphere fraction.
    pub area_at_accuracy: Vec<(f64, Option<f64>)>,
    /// `(area, accuracy)` pairs.
    pub accuracy_at_area: Vec<(f64, Option<f64>)>,
}

impl Summary {
    fn build(curve: Vec<CurvePoint>, calibration: CalibrationResult) -> Self {
        let count = curve.first().map_or(0, |p| p.count);
        Self {
            count,
            area_at_accuracy: TABLE_ACCURACIES
                .iter()
                .copied()
                .zip(area_at_accuracy(&curve, &TABLE_ACCURACIES))
                .collect(),
            accuracy_at_area: TABLE_AREAS
                .iter()
                .copied()
                .zip(accuracy_at_area(&curve, &TABLE_AREAS))
                .collect(),
            curve,
            calibration,
        }
    }

    /// Interpolated area for `accuracy` if it is one of the table targets.
    pub fn area_for(&self, accuracy: f64) -> Option<f64> {
        self.area_at_accuracy
            .iter()
            .find(|(a, _)| *a == accuracy)
            .and_then(|(_, v)| *v)
    }

    /// Summary of arbitrary predictions.
    pub fn of(
        pairs: &[(GazeDistribution, GazeAngles)],
        grid: &[f64],
        calibration_points: usize,
    ) -> Result<Self> {
        Ok(Self::build(
            accuracy_curve_from(pairs, grid)?,
            calibration_from(pairs, calibration_points)?,
        ))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub test_driver: String,
    pub validation_driver: String,
    pub summary: Summary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub model: ModelSpec,
    pub features: FeatureConfig,
    pub seed: u64,
    pub confidence_grid: Vec<f64>,
    pub calibration_points: usize,
    /// Worker threads for fold-level parallelism.
    pub jobs: usize,
    /// Re-express every driver relative to their average head pose first.
    pub normalize: bool,
}

impl ExperimentConfig {
    pub fn new(model: ModelSpec, features: FeatureConfig, seed: u64) -> Self {
        Self {
            model,
            features,
            seed,
            confidence_grid: confidence_grid(),
            calibration_points: 100,
            jobs: 1,
            normalize: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub model: String,
    pub features: FeatureMode,
    pub seed: u64,
    pub folds: Vec<FoldReport>,
    pub pooled: Summary,
    pub predictions: Vec<Prediction>,
}

/// Seed for fold `fold`, independent of the order folds run in.
pub fn fold_seed(seed: u64, fold: usize) -> u64 {
    let mut z = seed ^ (fold as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn with_pool<T: Send>(jobs: usize, work: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
    Ok(pool.install(work))
}

fn fold_error(fold: usize, split: &FoldSplit, e: Error) -> Error {
    Error::Fold {
        fold,
        driver: split.test_driver.clone(),
        source: Box::new(e),
    }
}

/// Prepares records for modeling: optional per-driver normalization.
pub fn prepare(records: &[DriveRecord], normalize: bool) -> Result<Vec<DriveRecord>> {
    if normalize {
        normalize_all(records)
    } else {
        Ok(records.to_vec())
    }
}

/// Fits one model per fold. `records` should already be prepared.
pub fn train_folds(
    records: &[DriveRecord],
    folds: &[FoldSplit],
    spec: &ModelSpec,
    features: FeatureConfig,
    seed: u64,
    jobs: usize,
) -> Result<Vec<TrainedModel>> {
    spec.validate()?;
    with_pool(jobs, || {
        folds
            .par_iter()
            .enumerate()
            .map(|(i, split)| {
                let train = records_for(records, &split.train_drivers);
                let val = records_for(records, std::slice::from_ref(&split.validation_driver));
                spec.fit(&train, &val, features, fold_seed(seed, i))
                    .map_err(|e| fold_error(i, split, e))
            })
            .collect()
    })?
}

/// Scores per-fold models on their test drivers and pools the results.
pub fn evaluate_folds<M: GazePredictor>(
    records: &[DriveRecord],
    folds: &[FoldSplit],
    models: &[M],
    config: &ExperimentConfig,
) -> Result<ExperimentReport> {
    if models.len() != folds.len() {
        return Err(Error::invalid(format!(
            "{} models for {} folds",
            models.len(),
            folds.len()
        )));
    }
    check_grid(&config.confidence_grid)?;
    let grid = &config.confidence_grid;
    type FoldOutput = (Vec<Prediction>, Vec<LevelTotals>, FoldReport);
    let outputs: Vec<FoldOutput> = with_pool(config.jobs, || {
        folds
            .par_iter()
            .zip(models)
            .enumerate()
            .map(|(i, (split, model))| -> Result<FoldOutput> {
                let wrap = |e| fold_error(i, split, e);
                let test: Vec<(usize, &DriveRecord)> = records
                    .iter()
                    .enumerate()
                    .filter(|(_, r)| r.driver_id == split.test_driver)
                    .collect();
                let heads: Vec<HeadPose> = test.iter().map(|(_, r)| r.head).collect();
                let dists = model.predict_batch(&heads).map_err(wrap)?;
                let preds: Vec<Prediction> = test
                    .iter()
                    .zip(dists)
                    .map(|((index, r), dist)| Prediction {
                        index: *index,
                        driver_id: r.driver_id.clone(),
                        fold: i,
                        truth: r.target_gaze,
                        dist,
                    })
                    .collect();
                if preds.is_empty() {
                    return Err(wrap(Error::invalid("test driver has no records")));
                }
                let pairs: Vec<_> = preds.iter().map(|p| (p.dist, p.truth)).collect();
                let totals = level_totals(&pairs, grid).map_err(wrap)?;
                let calibration = calibration_from(&pairs, config.calibration_points).map_err(wrap)?;
                let report = FoldReport {
                    fold: i,
                    test_driver: split.test_driver.clone(),
                    validation_driver: split.validation_driver.clone(),
                    summary: Summary::build(curve_from_totals(&totals, grid), calibration),
                };
                Ok((preds, totals, report))
            })
            .collect::<Result<Vec<_>>>()
    })??;

    let mut pooled_totals = vec![LevelTotals::default(); grid.len()];
    let mut predictions = Vec::new();
    let mut folds_out = Vec::new();
    for (preds, totals, report) in outputs {
        for (p, t) in pooled_totals.iter_mut().zip(&totals) {
            p.add(t);
        }
        predictions.extend(preds);
        folds_out.push(report);
    }
    let pairs: Vec<_> = predictions.iter().map(|p| (p.dist, p.truth)).collect();
    let pooled = Summary::build(
        curve_from_totals(&pooled_totals, grid),
        calibration_from(&pairs, config.calibration_points)?,
    );
    Ok(ExperimentReport {
        model: config.model.label(),
        features: config.features.mode,
        seed: config.seed,
        folds: folds_out,
        pooled,
        predictions,
    })
}

/// Leave-one-driver-out evaluation over every driver in `records`.
pub fn run_experiment(records: &[DriveRecord], config: &ExperimentConfig) -> Result<ExperimentReport> {
    let prepared = prepare(records, config.normalize)?;
    let folds = make_folds(&driver_ids(&prepared))?;
    let models = train_folds(
        &prepared,
        &folds,
        &config.model,
        config.features,
        config.seed,
        config.jobs,
    )?;
    evaluate_folds(&prepared, &folds, &models, config)
}
