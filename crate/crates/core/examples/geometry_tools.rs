//! Rigid registration, rotation averaging, plane fitting and region areas.
//!
//! `cargo run --release --example geometry_tools`

use salient_gaze::dataset::windshield_markers;
use salient_gaze::geometry::{
    eigen_mean, fit_plane, gaze_ray, intersect_ray_plane, kabsch, orientation_quaternion, slerp_mean,
    spherical_area_fraction, AngularEllipse, RigidTransform, Vec3,
};
use salient_gaze::{GazeAngles, HeadPose};

fn main() -> salient_gaze::Result<()> {
    let markers = windshield_markers();
    let moved = RigidTransform::new(
        orientation_quaternion([0.2, -0.1, 0.05]).to_matrix(),
        Vec3::new(0.1, -0.05, 0.3),
    )?;
    let seen: Vec<Vec3> = markers.iter().map(|p| moved.apply(p)).collect();
    let est = kabsch(&markers, &seen)?;
    println!(
        "kabsch: rotation error {:.2e} rad, translation error {:.2e} m",
        est.rotation_angle_to(&moved),
        (est.translation - moved.translation).norm()
    );

    let poses: Vec<_> = (0..10)
        .map(|i| orientation_quaternion([0.3 + 0.01 * i as f64, -0.05, 0.02 * (i % 3) as f64]))
        .collect();
    let a = slerp_mean(&poses)?;
    let b = eigen_mean(&poses)?;
    println!(
        "average orientation: slerp and eigen means differ by {:.2e} deg",
        a.angle_to(&b).to_degrees()
    );

    let fit = fit_plane(&markers)?;
    let ray = gaze_ray(&HeadPose::new([0.0; 3], [0.0; 3]), GazeAngles::new(0.1, 0.05))?;
    let hit = intersect_ray_plane(&ray, &fit.plane)?;
    println!(
        "windshield plane normal {:.3?}, mean residual {:.4} m; gaze (0.1, 0.05) hits it {:.3} m away",
        fit.plane.normal.as_slice(),
        fit.mean_residual,
        hit.distance
    );

    for semi in [0.05, 0.2, 0.8, 3.0] {
        let e = AngularEllipse {
            center: GazeAngles::new(0.0, 0.0),
            semi_theta: semi,
            semi_phi: semi,
        };
        println!(
            "circle of radius {semi} rad covers {:.5} of the sphere",
            spherical_area_fraction(&e)?
        );
    }
    Ok(())
}
