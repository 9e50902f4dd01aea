//! Projects a predicted gaze distribution onto the windshield and onto a road
//! camera, renders both as PGM images with contour sidecars.
//!
//! `cargo run --release --example project_heatmaps [OUT_DIR]`

use salient_gaze::dataset::windshield_markers;
use salient_gaze::geometry::{fit_plane, Vec3};
use salient_gaze::project::{
    contour_path, default_depths, mass_contour, mean_gaze_hit, render, road_density, windshield_density,
    CameraMapping, PlaneGrid,
};
use salient_gaze::{GazeAngles, GazeDistribution, HeadPose};

fn main() -> salient_gaze::Result<()> {
    let dir = std::env::args()
        .nth(1)
        .map(Into::into)
        .unwrap_or_else(|| std::env::temp_dir().join("salient-gaze-projection"));
    std::fs::create_dir_all(&dir).map_err(|e| salient_gaze::Error::Io {
        path: dir.clone(),
        source: e,
    })?;

    let head = HeadPose::new([0.02, 0.0, 0.0], [0.0; 3]);
    let dist = GazeDistribution::from_parts(GazeAngles::new(0.12, -0.02), 0.04f64.powi(2), 0.025f64.powi(2));

    let plane = fit_plane(&windshield_markers())?.plane;
    let center = mean_gaze_hit(&dist, &head, &plane)?;
    let grid = PlaneGrid::new(plane, center, [0.2, 0.2], 256, 256)?;
    let wind = windshield_density(&dist, &head, &grid, false)?;
    let contour = wind.contour.clone().into_iter().collect::<Vec<_>>();
    let wind_path = dir.join("windshield.pgm");
    render(&wind.map, &wind_path, &contour)?;
    if let Some(c) = &wind.contour {
        println!(
            "windshield: mean gaze hits ({:.3}, {:.3}, {:.3}) m, 50% contour holds {:.3} of the grid mass",
            center.x,
            center.y,
            center.z,
            wind.map.mass_inside(c)
        );
    }

    let camera = CameraMapping::forward(Vec3::new(0.0, 0.1, 0.6), 500.0, 480, 270)?;
    let road = road_density(&dist, &head, &camera, &default_depths(), false)?;
    let half = mass_contour(&road, 0.5)?;
    let road_path = dir.join("road.pgm");
    render(&road, &road_path, std::slice::from_ref(&half))?;
    let [w, h] = half.extent();
    println!(
        "road: {} depth planes, 50% region spans {w:.0} x {h:.0} px, peak at {:?}",
        road.depths.len(),
        road.argmax()
    );
    println!(
        "wrote {}, {}, {} and {}",
        wind_path.display(),
        contour_path(&wind_path).display(),
        road_path.display(),
        contour_path(&road_path).display()
    );
    Ok(())
}
