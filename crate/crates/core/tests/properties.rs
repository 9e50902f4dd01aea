use proptest::prelude::*;
use salient_gaze::evaluate::region_at;
use salient_gaze::geometry::{kabsch, spherical_area_fraction, AngularEllipse, Quaternion, Vec3};
use salient_gaze::project::{decode_pgm, encode_pgm, HeatMap};
use salient_gaze::{GazeAngles, GazeDistribution};

fn distribution() -> impl Strategy<Value = GazeDistribution> {
    (-1.5..1.5f64, -1.2..1.2f64, 1e-4..0.5f64, 1e-4..0.5f64)
        .prop_map(|(t, p, vt, vp)| GazeDistribution::from_parts(GazeAngles::new(t, p), vt, vp))
}

fn rotation() -> impl Strategy<Value = Quaternion> {
    (-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64, 0.01..3.1f64).prop_filter_map("zero axis", |(x, y, z, a)| {
        Quaternion::from_axis_angle(Vec3::new(x, y, z), a).ok()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn regions_nest(dist in distribution(), lo in 0.01..0.98f64, gap in 0.001..0.5f64,
                    probes in prop::collection::vec((-0.5..0.5f64, -0.5..0.5f64), 32)) {
        let hi = (lo + gap).min(0.995);
        let inner = region_at(&dist, lo).unwrap();
        let outer = region_at(&dist, hi).unwrap();
        prop_assert!(inner.area_fraction <= outer.area_fraction);
        let m = dist.mean();
        for (dt, dp) in probes {
            let g = GazeAngles::new(m.theta + dt, m.phi + dp);
            prop_assert!(!inner.contains(g) || outer.contains(g));
        }
    }

    #[test]
    fn area_fraction_grows_with_axes(theta in -3.0..3.0f64, phi in -1.5..1.5f64,
                                     a in 1e-3..4.0f64, b in 1e-3..2.0f64, scale in 1.0..3.0f64) {
        let small = AngularEllipse { center: GazeAngles::new(theta, phi), semi_theta: a, semi_phi: b };
        let large = AngularEllipse { semi_theta: a * scale, semi_phi: b * scale, ..small };
        let (s, l) = (spherical_area_fraction(&small).unwrap(), spherical_area_fraction(&large).unwrap());
        prop_assert!((0.0..=1.0).contains(&s) && (0.0..=1.0).contains(&l));
        prop_assert!(s <= l + 1e-12);
    }

    #[test]
    fn quaternion_matrix_round_trip(q in rotation()) {
        prop_assert!(Quaternion::from_matrix(&q.to_matrix()).same_rotation(&q, 1e-9));
    }

    #[test]
    fn kabsch_recovers_transform(q in rotation(), t in prop::array::uniform3(-2.0..2.0f64),
                                 pts in prop::collection::vec(prop::array::uniform3(-1.0..1.0f64), 4..20)) {
        let r = q.to_matrix();
        let t = Vec3::from(t);
        let source: Vec<Vec3> = pts.iter().map(|p| Vec3::from(*p)).collect();
        let target: Vec<Vec3> = source.iter().map(|p| r * p + t).collect();
        // Skip nearly collinear point sets.
        if let Ok(fit) = kabsch(&source, &target) {
            let spread = source.iter().map(|p| (p - source[0]).norm()).fold(0.0, f64::max);
            if spread > 0.1 {
                for (s, d) in source.iter().zip(&target) {
                    prop_assert!((fit.apply(s) - d).norm() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn pgm_round_trip(width in 1usize..24, height in 1usize..24, seed in any::<u64>()) {
        let values: Vec<f64> = (0..width * height)
            .map(|i| ((i as u64).wrapping_mul(seed | 1) % 1000) as f64)
            .collect();
        let map = HeatMap { width, height, values, depths: Vec::new(), camera: None, jacobian: false };
        let bytes = encode_pgm(&map).unwrap();
        let (w, h, pixels) = decode_pgm(&bytes).unwrap();
        prop_assert_eq!((w, h, pixels.len()), (width, height, width * height));
        let max = map.max();
        let constant = map.values.iter().all(|v| *v == max);
        for (v, p) in map.values.iter().zip(&pixels) {
            let expected = if constant { 128 } else { (255.0 * v / max).round() as u8 };
            prop_assert_eq!(*p, expected);
        }
    }
}
