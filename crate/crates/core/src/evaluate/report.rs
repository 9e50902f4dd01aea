//! Delimited text renderings of curves, calibration and summary tables.

use serde::{Deserialize, Serialize};

use super::{CalibrationResult, CurvePoint, Prediction, Summary, TABLE_ACCURACIES, TABLE_AREAS};
use crate::dataset::FeatureMode;
use crate::error::{Error, Result};
use crate::types::{GazeAngles, GazeDistribution};

/// Placeholder for table cells the curve never reaches.
pub const OUT_OF_RANGE: &str = "n/a";

fn csv_error(e: csv::Error) -> Error {
    Error::Format(e.to_string())
}

fn finish(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
}

pub fn curve_csv(curve: &[CurvePoint]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["confidence", "area_fraction", "accuracy"])
        .map_err(csv_error)?;
    for p in curve {
        w.write_record([
            p.confidence.to_string(),
            p.area.to_string(),
            p.accuracy.to_string(),
        ])
        .map_err(csv_error)?;
    }
    finish(w)
}

pub fn calibration_csv(cal: &CalibrationResult) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["theoretical", "empirical"]).map_err(csv_error)?;
    for (t, e) in &cal.pairs {
        w.write_record([t.to_string(), e.to_string()])
            .map_err(csv_error)?;
    }
    finish(w)
}

fn percent(v: Option<f64>) -> String {
    v.map_or_else(|| OUT_OF_RANGE.to_string(), |v| format!("{:.2}", 100.0 * v))
}

/// One row per model: region area (% of sphere) needed for 50/75/95%
/// accuracy.
pub fn area_table(rows: &[(String, FeatureMode, &Summary)]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["model".to_string(), "features".to_string()];
    header.extend(
        TABLE_ACCURACIES
            .iter()
            .map(|a| format!("area_pct_at_{:.0}", 100.0 * a)),
    );
    w.write_record(&header).map_err(csv_error)?;
    for (model, features, summary) in rows {
        let mut rec = vec![model.clone(), features.to_string()];
        rec.extend(summary.area_at_accuracy.iter().map(|(_, v)| percent(*v)));
        w.write_record(&rec).map_err(csv_error)?;
    }
    finish(w)
}

/// One row per model: accuracy (%) at 1/2/4% of the sphere.
pub fn accuracy_table(rows: &[(String, FeatureMode, &Summary)]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["model".to_string(), "features".to_string()];
    header.extend(
        TABLE_AREAS
            .iter()
            .map(|a| format!("accuracy_pct_at_{:.0}", 100.0 * a)),
    );
    w.write_record(&header).map_err(csv_error)?;
    for (model, features, summary) in rows {
        let mut rec = vec![model.clone(), features.to_string()];
        rec.extend(summary.accuracy_at_area.iter().map(|(_, v)| percent(*v)));
        w.write_record(&rec).map_err(csv_error)?;
    }
    finish(w)
}

#[derive(Serialize, Deserialize)]
struct PredictionRow {
    model: String,
    features: FeatureMode,
    index: usize,
    driver_id: String,
    fold: usize,
    theta: f64,
    phi: f64,
    mean_theta: f64,
    var_theta: f64,
    mean_phi: f64,
    var_phi: f64,
}

pub fn predictions_csv(model: &str, features: FeatureMode, preds: &[Prediction]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for p in preds {
        w.serialize(PredictionRow {
            model: model.to_string(),
            features,
            index: p.index,
            driver_id: p.driver_id.clone(),
            fold: p.fold,
            theta: p.truth.theta,
            phi: p.truth.phi,
            mean_theta: p.dist.theta.mean,
            var_theta: p.dist.theta.variance,
            mean_phi: p.dist.phi.mean,
            var_phi: p.dist.phi.variance,
        })
        .map_err(csv_error)?;
    }
    finish(w)
}

/// Parsed predictions file: model label, feature mode and rows.
pub struct PredictionSet {
    pub model: String,
    pub features: FeatureMode,
    pub predictions: Vec<Prediction>,
}

pub fn read_predictions(text: &str) -> Result<PredictionSet> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let mut label: Option<(String, FeatureMode)> = None;
    let mut predictions = Vec::new();
    for (i, row) in r.deserialize::<PredictionRow>().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        match &label {
            None => label = Some((row.model.clone(), row.features)),
            Some((m, f)) if *m != row.model || *f != row.features => {
                return Err(Error::Validation {
                    line,
                    message: format!("mixes model '{}' with '{m}'", row.model),
                })
            }
            _ => {}
        }
        let dist = GazeDistribution::from_parts(
            GazeAngles::new(row.mean_theta, row.mean_phi),
            row.var_theta,
            row.var_phi,
        );
        dist.validate().map_err(|e| Error::Validation {
            line,
            message: e.to_string(),
        })?;
        predictions.push(Prediction {
            index: row.index,
            driver_id: row.driver_id,
            fold: row.fold,
            truth: GazeAngles::new(row.theta, row.phi),
            dist,
        });
    }
    let (model, features) = label.ok_or_else(|| Error::Schema("predictions file has no rows".into()))?;
    Ok(PredictionSet {
        model,
        features,
        predictions,
    })
}
