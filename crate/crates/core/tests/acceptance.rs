//! Acceptance suite. Each test prints one `criterion N: PASS|FAIL` line with
//! the measured quantities and wall time, then asserts.
//!
//! Tests are serialized through a lock so the timings are not inflated by
//! one another. Leave-one-driver-out experiments are shared between the
//! criteria that need them; a criterion's reported time includes the cost of
//! every experiment it relies on.

use std::io::Write;
use std::path::Path;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector, Matrix3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use salient_gaze::cli;
use salient_gaze::dataset::{DriveRecord, FeatureConfig, FeatureMode, SynthSpec, SyntheticWorld};
use salient_gaze::evaluate::{
    calibration_from, confidence_grid, region_at, run_experiment, ExperimentConfig, ExperimentReport,
    ModelKind, ModelSpec,
};
use salient_gaze::geometry::{
    eigen_mean, gaze_direction, intersect_ray_plane, kabsch, slerp_mean, spherical_area_fraction,
    AngularEllipse, GazeRay, Plane, Quaternion, RigidTransform, Vec3,
};
use salient_gaze::gpr::{GprModel, KernelParams, MeanFunction, MeanKind};
use salient_gaze::nnet::{Loss, MlpModel};
use salient_gaze::project::{mass_contour, road_density, windshield_density, CameraMapping, PlaneGrid};
use salient_gaze::{GazeAngles, GazeDistribution, HeadPose};

const SEED: u64 = 7;

const GPR_ORACLE_TOL: f64 = 1e-8;
const INTERP_MEAN_TOL: f64 = 1e-4;
const INTERP_VAR_FACTOR: f64 = 1e-6;
const GRADIENT_TOL: f64 = 1e-4;
const CALIBRATED_MAX_DEV: f64 = 0.02;
const MISCALIBRATED_MIN_DEV: f64 = 0.05;
const TRUTH_COVERAGE: (f64, f64) = (0.93, 0.97);
const GPR_MIN_COVERAGE: f64 = 0.90;
const ORDERING_MARGIN: f64 = 0.10;
const KABSCH_TOL: f64 = 1e-6;
const SLERP_TOL_DEG: f64 = 0.1;
const PLANE_TOL: f64 = 1e-9;
const AREA_TOL: f64 = 1e-3;
const CONTOUR_MASS_TOL: f64 = 0.02;
const ABLATION_SLACK: f64 = 0.25;

fn serial() -> MutexGuard<'static, ()> {
    static LOCK: Mutex<()> = Mutex::new(());
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(n: u32, pass: bool, detail: &str, elapsed: Duration, budget: Duration) -> bool {
    let ok = pass && elapsed <= budget;
    // Written to the handle directly so the line survives output capture.
    let mut out = std::io::stdout().lock();
    writeln!(
        out,
        "\ncriterion {n}: {} | {detail} | {:.2}s (budget {}s)",
        if ok { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64(),
        budget.as_secs()
    )
    .and_then(|_| out.flush())
    .expect("stdout is writable");
    ok
}

fn secs(s: u64) -> Duration {
    Duration::from_secs(s)
}

struct Experiment {
    report: ExperimentReport,
    cost: Duration,
}

fn world() -> &'static (SyntheticWorld, Vec<DriveRecord>) {
    static WORLD: OnceLock<(SyntheticWorld, Vec<DriveRecord>)> = OnceLock::new();
    WORLD.get_or_init(|| {
        let world = SyntheticWorld::new(SynthSpec::default(), SEED).unwrap();
        let records = world.generate();
        (world, records)
    })
}

fn run(kind: ModelKind, mode: FeatureMode) -> Experiment {
    let t = Instant::now();
    let config = ExperimentConfig::new(ModelSpec::new(kind), FeatureConfig::new(mode), SEED);
    let report = run_experiment(&world().1, &config).unwrap();
    Experiment {
        report,
        cost: t.elapsed(),
    }
}

macro_rules! experiment {
    ($name:ident, $kind:expr, $mode:expr) => {
        fn $name() -> &'static Experiment {
            static CELL: OnceLock<Experiment> = OnceLock::new();
            CELL.get_or_init(|| run($kind, $mode))
        }
    };
}

experiment!(gpr_full, ModelKind::Gpr(MeanKind::Linear), FeatureMode::Full6d);
experiment!(
    gpr_plus_xy,
    ModelKind::Gpr(MeanKind::Linear),
    FeatureMode::OrientationPlusXy
);
experiment!(
    gpr_orientation,
    ModelKind::Gpr(MeanKind::Linear),
    FeatureMode::Orientation3d
);
experiment!(linreg, ModelKind::Lr, FeatureMode::Full6d);
experiment!(nn, ModelKind::Nn, FeatureMode::Full6d);
experiment!(mdn, ModelKind::Mdn, FeatureMode::Full6d);

fn coverage_at_95(report: &ExperimentReport) -> f64 {
    report
        .pooled
        .curve
        .iter()
        .find(|p| (p.confidence - 0.95).abs() < 1e-12)
        .expect("grid holds 0.95")
        .accuracy
}

/// Area at 95% accuracy, or a strict lower bound when the curve stops short
/// of 95%: the area of its last point.
fn area_at_95(report: &ExperimentReport) -> (f64, bool) {
    match report.pooled.area_for(0.95) {
        Some(a) => (a, true),
        None => (report.pooled.curve.last().unwrap().area, false),
    }
}

fn se_kernel(sf: f64, ls: &[f64], a: &[f64], b: &[f64]) -> f64 {
    let r2: f64 = a
        .iter()
        .zip(b)
        .zip(ls)
        .map(|((x, y), l)| ((x - y) / l).powi(2))
        .sum();
    sf * sf * (-0.5 * r2).exp()
}

#[test]
fn criterion_01_gpr_matches_direct_inverse() {
    let _guard = serial();
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;
    for case in 0..100 {
        let n = rng.random_range(1..=20);
        let d = rng.random_range(1..=6);
        let sf = rng.random_range(0.3..3.0);
        let ard = case % 2 == 0;
        let ls: Vec<f64> = if ard {
            (0..d).map(|_| rng.random_range(0.3..3.0)).collect()
        } else {
            vec![rng.random_range(0.3..3.0); d]
        };
        let noise = 10f64.powf(rng.random_range(-4.0..-1.0));
        let x: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect();
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let offset = rng.random_range(-1.0..1.0);
        let weights: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mean_at = |p: &[f64]| offset + weights.iter().zip(p).map(|(w, v)| w * v).sum::<f64>();
        let kernel = if ard {
            KernelParams::ard(sf, ls.clone(), noise)
        } else {
            KernelParams::isotropic(sf, ls[0], noise)
        };
        let mean = MeanFunction::Linear {
            offset,
            weights: weights.clone(),
        };
        let model = GprModel::condition(kernel, mean, x.clone(), y.clone()).unwrap();

        let gram = DMatrix::from_fn(n, n, |i, j| {
            se_kernel(sf, &ls, &x[i], &x[j]) + if i == j { noise } else { 0.0 }
        });
        let inv = gram.try_inverse().unwrap();
        let resid = DVector::from_fn(n, |i, _| y[i] - mean_at(&x[i]));
        for _ in 0..5 {
            let q: Vec<f64> = (0..d).map(|_| rng.random_range(-2.5..2.5)).collect();
            let ks = DVector::from_fn(n, |i, _| se_kernel(sf, &ls, &x[i], &q));
            let mu = mean_at(&q) + (ks.transpose() * &inv * &resid)[0];
            let var = sf * sf - (ks.transpose() * &inv * &ks)[0];
            let (m, v) = model.predict(&q).unwrap();
            worst = worst.max((m - mu).abs()).max((v - var).abs());
        }
    }
    let ok = report(
        1,
        worst <= GPR_ORACLE_TOL,
        &format!(
            "max |cholesky - direct inverse| = {worst:.2e} (tol {GPR_ORACLE_TOL:.0e}) over 100 instances"
        ),
        t.elapsed(),
        secs(5),
    );
    assert!(ok);
}

#[test]
fn criterion_02_gp_interpolates_training_data() {
    let _guard = serial();
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let (mut mean_err, mut var_ratio): (f64, f64) = (0.0, 0.0);
    for _ in 0..20 {
        let sf = rng.random_range(0.5..2.0);
        let x: Vec<Vec<f64>> = (0..30)
            .map(|_| vec![rng.random_range(0.0..5.0), rng.random_range(0.0..5.0)])
            .collect();
        let y: Vec<f64> = x.iter().map(|p| (p[0]).sin() + 0.5 * (p[1]).cos()).collect();
        let model = GprModel::condition(
            KernelParams::isotropic(sf, 0.5, 1e-9),
            MeanFunction::Zero,
            x.clone(),
            y.clone(),
        )
        .unwrap();
        for (p, target) in x.iter().zip(&y) {
            let (m, v) = model.predict(p).unwrap();
            mean_err = mean_err.max((m - target).abs());
            var_ratio = var_ratio.max(v / (sf * sf));
        }
    }
    let ok = report(
        2,
        mean_err <= INTERP_MEAN_TOL && var_ratio <= INTERP_VAR_FACTOR,
        &format!("max |mean - y| = {mean_err:.2e} (tol {INTERP_MEAN_TOL:.0e}), max var/sf^2 = {var_ratio:.2e} (tol {INTERP_VAR_FACTOR:.0e})"),
        t.elapsed(),
        secs(1),
    );
    assert!(ok);
}

#[test]
fn criterion_03_network_gradients_match_finite_differences() {
    let _guard = serial();
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let mut worst = [0.0f64; 2];
    for m in 0..20 {
        let d = rng.random_range(1..=6);
        for (k, loss) in [Loss::Mse, Loss::GaussianNll].into_iter().enumerate() {
            let mut model = MlpModel::new(&MlpModel::architecture(d, loss.output_dim()), 1000 + m).unwrap();
            let x: Vec<f64> = (0..d).map(|_| rng.random_range(-1.5..1.5)).collect();
            let target: f64 = rng.random_range(-1.0..1.0);
            let mut analytic = vec![0.0; model.params().len()];
            model.accumulate_gradient(&x, target, loss, &mut analytic);
            let h = 1e-6;
            for (i, grad) in analytic.iter().enumerate() {
                let orig = model.params()[i];
                model.params_mut()[i] = orig + h;
                let up = model.loss(&x, target, loss);
                model.params_mut()[i] = orig - h;
                let down = model.loss(&x, target, loss);
                model.params_mut()[i] = orig;
                let numeric = (up - down) / (2.0 * h);
                let rel = (grad - numeric).abs() / grad.abs().max(numeric.abs()).max(1e-6);
                worst[k] = worst[k].max(rel);
            }
        }
    }
    let ok = report(
        3,
        worst.iter().all(|w| *w <= GRADIENT_TOL),
        &format!(
            "max relative error mse {:.2e}, gaussian nll {:.2e} (tol {GRADIENT_TOL:.0e}) over 20 models",
            worst[0], worst[1]
        ),
        t.elapsed(),
        secs(10),
    );
    assert!(ok);
}

#[test]
fn criterion_04_calibration_detects_overconfidence() {
    let _guard = serial();
    let t = Instant::now();
    let (world, records) = world();
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    let pairs: Vec<(GazeDistribution, GazeAngles)> = records
        .iter()
        .take(5000)
        .map(|r| {
            let dist = world.truth(&r.driver_id, &r.head).unwrap();
            let zt: f64 = rng.sample(StandardNormal);
            let zp: f64 = rng.sample(StandardNormal);
            let sample = GazeAngles::new(
                dist.theta.mean + zt * dist.theta.std_dev(),
                dist.phi.mean + zp * dist.phi.std_dev(),
            );
            (dist, sample)
        })
        .collect();
    let own = calibration_from(&pairs, 100).unwrap().deviation;
    let halved: Vec<_> = pairs.iter().map(|(d, g)| (d.scaled_variance(0.5), *g)).collect();
    let half = calibration_from(&halved, 100).unwrap().deviation;
    let ok = report(
        4,
        pairs.len() == 5000 && own <= CALIBRATED_MAX_DEV && half >= MISCALIBRATED_MIN_DEV,
        &format!(
            "{} samples: deviation {own:.4} (<= {CALIBRATED_MAX_DEV}), halved variances {half:.4} (>= {MISCALIBRATED_MIN_DEV})",
            pairs.len()
        ),
        t.elapsed(),
        secs(30),
    );
    assert!(ok);
}

#[test]
fn criterion_05_coverage_of_95_percent_regions() {
    let _guard = serial();
    let t = Instant::now();
    let (world, records) = world();
    let inside = records
        .iter()
        .filter(|r| {
            let dist = world.truth(&r.driver_id, &r.head).unwrap();
            region_at(&dist, 0.95).unwrap().contains(r.target_gaze)
        })
        .count();
    let truth = inside as f64 / records.len() as f64;
    let own = t.elapsed();
    let gpr = gpr_full();
    let fitted = coverage_at_95(&gpr.report);
    let ok = report(
        5,
        records.len() >= 2000
            && (TRUTH_COVERAGE.0..=TRUTH_COVERAGE.1).contains(&truth)
            && fitted >= GPR_MIN_COVERAGE,
        &format!(
            "{} held-out records: truth coverage {truth:.4} (in [{}, {}]), GPR-linear coverage {fitted:.4} (>= {GPR_MIN_COVERAGE})",
            records.len(),
            TRUTH_COVERAGE.0,
            TRUTH_COVERAGE.1
        ),
        own + gpr.cost,
        secs(120),
    );
    assert!(ok);
}

#[test]
fn criterion_06_heteroscedastic_models_need_less_area() {
    let _guard = serial();
    let (gpr, lr, nn, mdn) = (gpr_full(), linreg(), nn(), mdn());
    let cost = gpr.cost + lr.cost + nn.cost + mdn.cost;
    let describe = |(a, exact): (f64, bool)| {
        if exact {
            format!("{:.4}%", 100.0 * a)
        } else {
            format!(">{:.4}%", 100.0 * a)
        }
    };
    let (g, l, n, m) = (
        area_at_95(&gpr.report),
        area_at_95(&lr.report),
        area_at_95(&nn.report),
        area_at_95(&mdn.report),
    );
    // A missing value on the smaller side would be a failure; on the larger
    // side the lower bound is enough.
    let gpr_wins = g.1 && g.0 <= (1.0 - ORDERING_MARGIN) * l.0;
    let mdn_wins = m.1 && m.0 <= (1.0 - ORDERING_MARGIN) * n.0;
    let ok = report(
        6,
        gpr_wins && mdn_wins,
        &format!(
            "area@95: GPR {} vs LR {} (ratio {:.3}), MDN {} vs NN {} (ratio {:.3}); need ratio <= {}",
            describe(g),
            describe(l),
            g.0 / l.0,
            describe(m),
            describe(n),
            m.0 / n.0,
            1.0 - ORDERING_MARGIN
        ),
        cost,
        secs(600),
    );
    assert!(ok);
}

fn random_rotation(rng: &mut ChaCha8Rng) -> Matrix3<f64> {
    let axis = Vec3::new(
        rng.sample(StandardNormal),
        rng.sample(StandardNormal),
        rng.sample(StandardNormal),
    );
    let angle = rng.random_range(0.0..std::f64::consts::PI);
    Quaternion::from_axis_angle(axis, angle).unwrap().to_matrix()
}

/// Solid-angle fraction by brute-force midpoint integration over the sphere
/// with `theta` as longitude and `phi` as latitude.
fn area_by_grid(e: &AngularEllipse, n_lat: usize) -> f64 {
    use std::f64::consts::{FRAC_PI_2, PI};
    let n_lon = 2 * n_lat;
    let (dlat, dlon) = (PI / n_lat as f64, 2.0 * PI / n_lon as f64);
    let mut sum = 0.0;
    for i in 0..n_lat {
        let lat = -FRAC_PI_2 + (i as f64 + 0.5) * dlat;
        let w = lat.cos() * dlat * dlon;
        for j in 0..n_lon {
            let lon = -PI + (j as f64 + 0.5) * dlon;
            if e.contains(GazeAngles::new(lon, lat)) {
                sum += w;
            }
        }
    }
    sum / (4.0 * PI)
}

#[test]
fn criterion_07_geometry() {
    let _guard = serial();
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(107);

    let mut kabsch_err: f64 = 0.0;
    for _ in 0..50 {
        let truth = RigidTransform::new(
            random_rotation(&mut rng),
            Vec3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ),
        )
        .unwrap();
        let src: Vec<Vec3> = (0..10)
            .map(|_| {
                Vec3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                )
            })
            .collect();
        let dst: Vec<Vec3> = src.iter().map(|p| truth.apply(p)).collect();
        let est = kabsch(&src, &dst).unwrap();
        kabsch_err = kabsch_err
            .max((est.rotation - truth.rotation).abs().max())
            .max((est.translation - truth.translation).abs().max());
    }

    let mut slerp_err: f64 = 0.0;
    for _ in 0..50 {
        let center = Quaternion::from_matrix(&random_rotation(&mut rng));
        let quats: Vec<Quaternion> = (0..20)
            .map(|_| {
                let axis = Vec3::new(
                    rng.sample(StandardNormal),
                    rng.sample(StandardNormal),
                    rng.sample(StandardNormal),
                );
                let q = Quaternion::from_axis_angle(axis, rng.random_range(0.0..0.2))
                    .unwrap()
                    .mul(&center);
                if rng.random_bool(0.5) {
                    q.neg()
                } else {
                    q
                }
            })
            .collect();
        let a = slerp_mean(&quats).unwrap();
        let b = eigen_mean(&quats).unwrap();
        slerp_err = slerp_err.max(a.angle_to(&b).to_degrees());
    }

    let mut plane_err: f64 = 0.0;
    for _ in 0..200 {
        let normal = Vec3::new(
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
        );
        let plane = Plane::new(normal, rng.random_range(-3.0..3.0)).unwrap();
        let dir = gaze_direction(GazeAngles::new(
            rng.random_range(-1.4..1.4),
            rng.random_range(-1.4..1.4),
        ));
        let ray = GazeRay::new(Vec3::new(rng.random_range(-1.0..1.0), 0.0, 0.0), dir).unwrap();
        if let Ok(hit) = intersect_ray_plane(&ray, &plane) {
            plane_err = plane_err.max(plane.signed_distance(&hit.point).abs());
        }
    }

    let mut area_err: f64 = 0.0;
    for _ in 0..12 {
        let e = AngularEllipse {
            center: GazeAngles::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)),
            semi_theta: rng.random_range(0.05..2.0),
            semi_phi: rng.random_range(0.05..1.2),
        };
        area_err = area_err.max((spherical_area_fraction(&e).unwrap() - area_by_grid(&e, 1500)).abs());
    }
    let full = spherical_area_fraction(&AngularEllipse {
        center: GazeAngles::new(0.0, 0.0),
        semi_theta: 10.0,
        semi_phi: 10.0,
    })
    .unwrap();

    let ok = report(
        7,
        kabsch_err <= KABSCH_TOL
            && slerp_err <= SLERP_TOL_DEG
            && plane_err <= PLANE_TOL
            && area_err <= AREA_TOL
            && (full - 1.0).abs() <= 1e-12,
        &format!(
            "kabsch {kabsch_err:.1e} (<= {KABSCH_TOL:.0e}), slerp vs eigen {slerp_err:.4} deg (<= {SLERP_TOL_DEG}), \
             plane residual {plane_err:.1e} (<= {PLANE_TOL:.0e}), area vs grid {area_err:.1e} (<= {AREA_TOL:.0e}), full sphere {full}"
        ),
        t.elapsed(),
        secs(5),
    );
    assert!(ok);
}

#[test]
fn criterion_08_curves_monotone_and_regions_nested() {
    let _guard = serial();
    let experiments = [
        gpr_full(),
        gpr_plus_xy(),
        gpr_orientation(),
        linreg(),
        nn(),
        mdn(),
    ];
    let t = Instant::now();
    let mut curves = 0;
    let mut monotone = true;
    for e in &experiments {
        let summaries = e
            .report
            .folds
            .iter()
            .map(|f| &f.summary)
            .chain([&e.report.pooled]);
        for s in summaries {
            curves += 1;
            monotone &= s
                .curve
                .windows(2)
                .all(|w| w[1].area >= w[0].area && w[1].accuracy >= w[0].accuracy);
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(108);
    let grid = confidence_grid();
    let mut nested = true;
    for _ in 0..1000 {
        let dist = GazeDistribution::from_parts(
            GazeAngles::new(rng.random_range(-1.0..1.0), rng.random_range(-0.8..0.8)),
            10f64.powf(rng.random_range(-5.0..-1.0)),
            10f64.powf(rng.random_range(-5.0..-1.0)),
        );
        let i = rng.random_range(0..grid.len() - 1);
        let j = rng.random_range(i + 1..grid.len());
        let (inner, outer) = (
            region_at(&dist, grid[i]).unwrap(),
            region_at(&dist, grid[j]).unwrap(),
        );
        nested &= inner.area_fraction <= outer.area_fraction;
        for _ in 0..20 {
            let zt: f64 = rng.sample(StandardNormal);
            let zp: f64 = rng.sample(StandardNormal);
            let g = GazeAngles::new(
                dist.theta.mean + 3.0 * zt * dist.theta.std_dev(),
                dist.phi.mean + 3.0 * zp * dist.phi.std_dev(),
            );
            nested &= !inner.contains(g) || outer.contains(g);
        }
    }
    let ok = report(
        8,
        monotone && nested,
        &format!(
            "{curves} fold/pooled curves non-decreasing: {monotone}; nesting over 1000 random predictions: {nested} \
             (reuses the fits of criteria 5, 6 and 10)"
        ),
        t.elapsed(),
        secs(10),
    );
    assert!(ok);
}

#[test]
fn criterion_09_projection() {
    let _guard = serial();
    let t = Instant::now();
    let head = HeadPose::new([0.04, -0.02, 0.01], [0.0; 3]);
    let eye = Vec3::from(head.position);
    let aim = GazeAngles::new(0.08, -0.03);
    let target = eye + gaze_direction(aim) * 50.0;
    let dist = GazeDistribution::from_parts(aim, 0.03f64.powi(2), 0.02f64.powi(2));
    let camera = CameraMapping::forward(Vec3::new(0.0, 0.1, 0.6), 500.0, 320, 180).unwrap();
    let road = road_density(
        &dist,
        &head,
        &camera,
        &salient_gaze::project::default_depths(),
        false,
    )
    .unwrap();
    let [px, py] = camera.project(&target).unwrap();
    let contour = mass_contour(&road, 0.5).unwrap();
    let mut sorted = road.values.clone();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let total: f64 = sorted.iter().sum();
    let mut acc = 0.0;
    let threshold = *sorted
        .iter()
        .find(|v| {
            acc += **v;
            acc >= 0.5 * total
        })
        .unwrap();
    let target_value = road.get(px as usize, py as usize);
    let road_ok = target_value >= threshold && contour.contains(px, py);

    let plane = Plane::new(Vec3::new(0.0, -0.25, 1.0), 0.8).unwrap();
    let grid = PlaneGrid::new(plane, target.normalize() * 0.8, [0.15, 0.15], 512, 512).unwrap();
    let wind = windshield_density(&dist, &head, &grid, false).unwrap();
    let mass = wind.map.mass_inside(wind.contour.as_ref().unwrap());
    let ok = report(
        9,
        road_ok && (mass - 0.5).abs() <= CONTOUR_MASS_TOL,
        &format!(
            "target pixel ({px:.1}, {py:.1}) inside road 50% region: {road_ok}; windshield mass inside 50% contour \
             on 512x512 = {mass:.4} (0.50 +- {CONTOUR_MASS_TOL})"
        ),
        t.elapsed(),
        secs(60),
    );
    assert!(ok);
}

#[test]
fn criterion_10_limited_features() {
    let _guard = serial();
    let (full, xy, o3) = (gpr_full(), gpr_plus_xy(), gpr_orientation());
    let cost = full.cost + xy.cost + o3.cost;
    let (f, x, o) = (
        area_at_95(&full.report),
        area_at_95(&xy.report),
        area_at_95(&o3.report),
    );
    let within = f.1 && x.1 && (x.0 / f.0 - 1.0).abs() <= ABLATION_SLACK;
    let worse = x.1 && o.0 > x.0;
    let ok = report(
        10,
        within && worse,
        &format!(
            "area@95: full6d {:.4}%, orientation_plus_xy {:.4}% (ratio {:.3}, within {ABLATION_SLACK}), orientation3d {:.4}%{}",
            100.0 * f.0,
            100.0 * x.0,
            x.0 / f.0,
            100.0 * o.0,
            if o.1 { "" } else { " (lower bound)" }
        ),
        cost,
        secs(600),
    );
    assert!(ok);
}

fn cli_ok(args: &[&str]) {
    let mut argv = vec!["salient-gaze"];
    argv.extend_from_slice(args);
    assert_eq!(cli::run(argv), 0, "command failed: {args:?}");
}

fn pipeline(root: &Path) {
    let p = |s: &str| root.join(s).display().to_string();
    cli_ok(&[
        "synth",
        "--drivers",
        "4",
        "--frames",
        "6",
        "--seed",
        "11",
        "-o",
        &p("data"),
    ]);
    let data = p("data/dataset.csv");
    cli_ok(&[
        "train",
        "--data",
        &data,
        "--model",
        "gpr-linear",
        "--ard",
        "--seed",
        "11",
        "-o",
        &p("train"),
    ]);
    cli_ok(&[
        "eval",
        "--data",
        &data,
        "--models",
        &p("train/models"),
        "-o",
        &p("eval"),
    ]);
    cli_ok(&["eval", "--data", &data, "--model", "lr", "-o", &p("eval-lr")]);
    cli_ok(&[
        "curves",
        "--predictions",
        &p("eval/predictions.csv"),
        &p("eval-lr/predictions.csv"),
        "-o",
        &p("curves"),
    ]);
    cli_ok(&[
        "project",
        "--model",
        &p("train/models/fold-00.json"),
        "--data",
        &data,
        "--index",
        "5",
        "--grid",
        "256",
        "--width",
        "320",
        "--height",
        "180",
        "-o",
        &p("project"),
    ]);
}

fn artifacts(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().unwrap() != cli::MANIFEST_FILE {
                let rel = path.strip_prefix(root).unwrap().display().to_string();
                out.push((rel, std::fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn criterion_11_pipeline_is_deterministic() {
    let _guard = serial();
    let t = Instant::now();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    pipeline(a.path());
    pipeline(b.path());
    let (fa, fb) = (artifacts(a.path()), artifacts(b.path()));
    let images = fa.iter().filter(|(p, _)| p.ends_with(".pgm")).count();
    let identical = fa == fb;
    let replayed = cli::replay(&a.path().join("eval/manifest.json"), None).is_ok();
    let ok = report(
        11,
        identical && images == 2 && replayed,
        &format!(
            "{} report/image files ({images} images) byte-identical across two runs: {identical}; manifest replay reproduces: {replayed}",
            fa.len()
        ),
        t.elapsed(),
        secs(900),
    );
    assert!(ok);
}
