//! Fits a GPR gaze model on all but one driver and inspects its predictive
//! distributions against the generator's ground truth.
//!
//! `cargo run --release --example fit_gpr`

use salient_gaze::dataset::{
    driver_ids, make_folds, normalize_all, records_for, FeatureConfig, FeatureMode, SynthSpec, SyntheticWorld,
};
use salient_gaze::gpr::{FitOptions, GprPair, LengthScales, MeanKind};
use salient_gaze::GazePredictor;

fn main() -> salient_gaze::Result<()> {
    let spec = SynthSpec {
        drivers: 4,
        frames_per_marker: 12,
        ..SynthSpec::default()
    };
    let world = SyntheticWorld::new(spec, 5)?;
    let raw = world.generate();
    let records = normalize_all(&raw)?;
    let fold = &make_folds(&driver_ids(&records))?[0];
    let train = records_for(&records, &fold.train_drivers);
    let val = records_for(&records, std::slice::from_ref(&fold.validation_driver));

    let options = FitOptions {
        mean: MeanKind::Linear,
        ard: true,
        ..FitOptions::default()
    };
    let (model, reports) = GprPair::fit(&train, &val, FeatureConfig::new(FeatureMode::Full6d), &options, 1)?;
    println!("{} trained on {} records", model.name(), train.len());
    for (angle, gp, rep) in [
        ("theta", model.theta(), &reports[0]),
        ("phi", model.phi(), &reports[1]),
    ] {
        let k = gp.kernel();
        let scales = match &k.length_scales {
            LengthScales::Isotropic(l) => vec![*l],
            LengthScales::Ard(ls) => ls.clone(),
        };
        println!(
            "  {angle}: sf {:.4}, noise std {:.4}, log-lik {:.1}, length scales {:.3?}",
            k.amplitude,
            k.noise.sqrt(),
            rep.log_likelihood,
            scales
        );
    }

    println!(
        "\ntest driver {}: prediction vs truth (std in brackets)",
        fold.test_driver
    );
    for (r, raw) in records
        .iter()
        .zip(&raw)
        .filter(|(r, _)| r.driver_id == fold.test_driver)
        .step_by(40)
    {
        let p = model.predict_gaze(&r.head)?;
        let t = world.truth(&raw.driver_id, &raw.head)?;
        println!(
            "  theta {:+.3} [{:.3}] vs {:+.3} [{:.3}]   phi {:+.3} [{:.3}] vs {:+.3} [{:.3}]",
            p.theta.mean,
            p.theta.std_dev(),
            t.theta.mean,
            t.theta.std_dev(),
            p.phi.mean,
            p.phi.std_dev(),
            t.phi.mean,
            t.phi.std_dev()
        );
    }
    Ok(())
}
