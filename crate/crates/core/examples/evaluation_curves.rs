//! Leave-one-driver-out evaluation of several models with accuracy-versus-area
//! tables and calibration, as CSV text.
//!
//! `cargo run --release --example evaluation_curves`

use salient_gaze::dataset::{synthesize, FeatureConfig, SynthSpec};
use salient_gaze::evaluate::report::{accuracy_table, area_table, calibration_csv};
use salient_gaze::evaluate::{run_experiment, ExperimentConfig, ModelKind, ModelSpec};
use salient_gaze::gpr::MeanKind;

fn main() -> salient_gaze::Result<()> {
    let spec = SynthSpec {
        drivers: 4,
        frames_per_marker: 10,
        ..SynthSpec::default()
    };
    let records = synthesize(&spec, 21)?;

    let mut reports = Vec::new();
    for kind in [
        ModelKind::Lr,
        ModelKind::Gpr(MeanKind::Zero),
        ModelKind::Gpr(MeanKind::Linear),
    ] {
        let mut config = ExperimentConfig::new(ModelSpec::new(kind), FeatureConfig::default(), 2);
        config.model.gpr.train_cap = 600;
        let report = run_experiment(&records, &config)?;
        println!(
            "{:<12} folds {}  calibration deviation {:.4}",
            report.model,
            report.folds.len(),
            report.pooled.calibration.deviation
        );
        reports.push(report);
    }

    let rows: Vec<_> = reports
        .iter()
        .map(|r| (r.model.clone(), r.features, &r.pooled))
        .collect();
    println!("\n{}", area_table(&rows)?);
    println!("{}", accuracy_table(&rows)?);

    let last = reports.last().expect("three reports");
    let cal = calibration_csv(&last.pooled.calibration)?;
    println!("{} calibration (every 10th point):", last.model);
    for line in cal.lines().step_by(10) {
        println!("  {line}");
    }
    Ok(())
}
