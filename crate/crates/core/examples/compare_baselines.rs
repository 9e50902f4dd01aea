//! Trains the linear, neural and mixture-density baselines on one fold and
//! compares their 95% regions on the held-out driver.
//!
//! `cargo run --release --example compare_baselines`

use salient_gaze::baselines::{fit_linreg, fit_mdn, fit_nn};
use salient_gaze::dataset::{
    driver_ids, make_folds, normalize_all, records_for, synthesize, FeatureConfig, SynthSpec,
};
use salient_gaze::evaluate::{accuracy_curve, region_at};
use salient_gaze::nnet::TrainConfig;
use salient_gaze::GazePredictor;

fn main() -> salient_gaze::Result<()> {
    let spec = SynthSpec {
        drivers: 4,
        frames_per_marker: 12,
        ..SynthSpec::default()
    };
    let records = normalize_all(&synthesize(&spec, 9)?)?;
    let fold = &make_folds(&driver_ids(&records))?[1];
    let train = records_for(&records, &fold.train_drivers);
    let val = records_for(&records, std::slice::from_ref(&fold.validation_driver));
    let test: Vec<_> = records
        .iter()
        .filter(|r| r.driver_id == fold.test_driver)
        .cloned()
        .collect();
    let features = FeatureConfig::default();
    let config = TrainConfig {
        max_epochs: 300,
        seed: 4,
        ..TrainConfig::default()
    };

    let lr = fit_linreg(&train, features)?;
    let (nn, nn_traces) = fit_nn(&train, &val, features, &config)?;
    let (mdn, mdn_traces) = fit_mdn(&train, &val, features, &config, 1)?;
    println!(
        "best validation epoch: NN {}/{}, MDN {}/{}",
        nn_traces[0].best_epoch, nn_traces[1].best_epoch, mdn_traces[0].best_epoch, mdn_traces[1].best_epoch
    );

    let models: [&dyn GazePredictor; 3] = [&lr, &nn, &mdn];
    println!("\nmodel  coverage@95  mean area@95 (% sphere)  theta std range");
    for m in models {
        let curve = accuracy_curve(m, &test, &[0.95])?;
        let stds: Vec<f64> = test
            .iter()
            .map(|r| m.predict_gaze(&r.head).map(|d| d.theta.std_dev()))
            .collect::<Result<_, _>>()?;
        let lo = stds.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = stds.iter().copied().fold(0.0, f64::max);
        println!(
            "{:<5}  {:>11.3}  {:>22.4}  {lo:.4} .. {hi:.4}",
            m.name(),
            curve[0].accuracy,
            100.0 * curve[0].area
        );
    }

    let d = mdn.predict_gaze(&test[0].head)?;
    let region = region_at(&d, 0.95)?;
    println!(
        "\nMDN 95% region for the first test frame: semi-axes ({:.3}, {:.3}) rad, {:.4}% of the sphere",
        region.ellipse.semi_theta,
        region.ellipse.semi_phi,
        100.0 * region.area_fraction
    );
    Ok(())
}
