//! Gaze densities projected onto the windshield and onto a road-camera image.
//!
//! Pixel coordinates are continuous: pixel `(col, row)` covers
//! `[col, col + 1) x [row, row + 1)` and its center is at `+0.5`. Rows grow
//! downward in both map kinds.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::evaluate::mahalanobis_radius;
use crate::geometry::{
    direction_angles, gaze_direction, gaze_ray, intersect_ray_plane, Plane, RigidTransform, Vec3,
};
use crate::types::{GazeAngles, GazeDistribution, HeadPose};

/// Confidence level of the contour drawn on windshield maps.
pub const WINDSHIELD_CONTOUR_LEVEL: f64 = 0.5;

const CONTOUR_VERTICES: usize = 360;

/// Depths in meters of the planes averaged into a road map.
pub fn default_depths() -> Vec<f64> {
    (1..=20).map(|k| 10.0 * k as f64).collect()
}

/// Non-negative per-pixel density, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct HeatMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
    /// Depth planes averaged into the map; empty for a windshield map.
    pub depths: Vec<f64>,
    /// Camera used for road maps.
    pub camera: Option<CameraMapping>,
    /// Whether densities include the angle-to-surface Jacobian.
    pub jacobian: bool,
}

impl HeatMap {
    pub fn get(&self, col: usize, row: usize) -> f64 {
        self.values[row * self.width + col]
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }

    /// `(col, row)` of the largest value; the first one on ties.
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = 0;
        for (i, v) in self.values.iter().enumerate() {
            if *v > self.values[best] {
                best = i;
            }
        }
        (best % self.width, best / self.width)
    }

    /// Bilinear interpolation between pixel centers, clamped at the border.
    pub fn sample(&self, x: f64, y: f64) -> f64 {
        let fx = (x - 0.5).clamp(0.0, (self.width - 1) as f64);
        let fy = (y - 0.5).clamp(0.0, (self.height - 1) as f64);
        let (c0, r0) = (fx.floor() as usize, fy.floor() as usize);
        let (c1, r1) = ((c0 + 1).min(self.width - 1), (r0 + 1).min(self.height - 1));
        let (tx, ty) = (fx - c0 as f64, fy - r0 as f64);
        let top = self.get(c0, r0) * (1.0 - tx) + self.get(c1, r0) * tx;
        let bottom = self.get(c0, r1) * (1.0 - tx) + self.get(c1, r1) * tx;
        top * (1.0 - ty) + bottom * ty
    }

    /// Share of the total mass held by pixels whose centers lie inside `contour`.
    pub fn mass_inside(&self, contour: &Contour) -> f64 {
        let total = self.total();
        if total <= 0.0 {
            return 0.0;
        }
        let mut inside = 0.0;
        for row in 0..self.height {
            for col in 0..self.width {
                if contour.contains(col as f64 + 0.5, row as f64 + 0.5) {
                    inside += self.get(col, row);
                }
            }
        }
        inside / total
    }

    fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 || self.values.len() != self.width * self.height {
            return Err(Error::invalid("heat map size does not match its values"));
        }
        if self.values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::invalid("heat map values must be finite and >= 0"));
        }
        Ok(())
    }
}

/// Closed polygon in pixel coordinates enclosing a confidence level.
#[derive(Clone, Debug, PartialEq)]
pub struct Contour {
    pub level: f64,
    pub vertices: Vec<[f64; 2]>,
}

impl Contour {
    /// Even-odd point-in-polygon test.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let v = &self.vertices;
        let mut inside = false;
        let mut j = v.len().wrapping_sub(1);
        for i in 0..v.len() {
            let ([xi, yi], [xj, yj]) = (v[i], v[j]);
            if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
                inside = !inside;
            }
            j = i;
        }
        inside
    }

    /// Extent along the x and y pixel axes.
    pub fn extent(&self) -> [f64; 2] {
        let span = |k: usize| {
            let lo = self.vertices.iter().map(|p| p[k]).fold(f64::INFINITY, f64::min);
            let hi = self
                .vertices
                .iter()
                .map(|p| p[k])
                .fold(f64::NEG_INFINITY, f64::max);
            hi - lo
        };
        [span(0), span(1)]
    }
}

/// Rectangular sampling grid on a plane, centered on `center` and aligned
/// with [`Plane::basis`]: columns run along `u`, rows run against `v`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlaneGrid {
    pub plane: Plane,
    pub center: Vec3,
    /// Half width and half height in meters.
    pub half_extent: [f64; 2],
    pub cols: usize,
    pub rows: usize,
}

impl PlaneGrid {
    /// Grid whose center is the orthogonal projection of `center` onto `plane`.
    pub fn new(plane: Plane, center: Vec3, half_extent: [f64; 2], cols: usize, rows: usize) -> Result<Self> {
        if cols == 0 || rows == 0 {
            return Err(Error::invalid("grid needs at least one column and one row"));
        }
        if !half_extent.iter().all(|h| *h > 0.0 && h.is_finite()) {
            return Err(Error::invalid("grid extent must be positive"));
        }
        let center = center - plane.normal * plane.signed_distance(&center);
        Ok(Self {
            plane,
            center,
            half_extent,
            cols,
            rows,
        })
    }

    fn cell(&self) -> [f64; 2] {
        [
            2.0 * self.half_extent[0] / self.cols as f64,
            2.0 * self.half_extent[1] / self.rows as f64,
        ]
    }

    /// 3D position of a continuous pixel coordinate.
    pub fn point(&self, x: f64, y: f64) -> Vec3 {
        let (u, v) = self.plane.basis();
        let [du, dv] = self.cell();
        self.center + u * (x * du - self.half_extent[0]) + v * (self.half_extent[1] - y * dv)
    }

    /// Continuous pixel coordinate of a point on (or projected onto) the plane.
    pub fn pixel(&self, p: &Vec3) -> [f64; 2] {
        let (u, v) = self.plane.basis();
        let [du, dv] = self.cell();
        let d = p - self.center;
        [
            (d.dot(&u) + self.half_extent[0]) / du,
            (self.half_extent[1] - d.dot(&v)) / dv,
        ]
    }
}

/// Pinhole intrinsics. The camera frame has `x` right, `y` up and `z`
/// along the optical axis; image rows grow downward.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

/// Synthetic road camera: reference-to-camera transform plus intrinsics.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraMapping {
    pub to_camera: RigidTransform,
    pub intrinsics: Intrinsics,
}

impl CameraMapping {
    pub fn new(to_camera: RigidTransform, intrinsics: Intrinsics) -> Result<Self> {
        let k = &intrinsics;
        if !(k.fx > 0.0 && k.fy > 0.0 && k.fx.is_finite() && k.fy.is_finite()) {
            return Err(Error::invalid("focal lengths must be positive"));
        }
        if !(k.cx.is_finite() && k.cy.is_finite()) || k.width == 0 || k.height == 0 {
            return Err(Error::invalid(
                "principal point must be finite and the image non-empty",
            ));
        }
        Ok(Self {
            to_camera,
            intrinsics,
        })
    }

    /// Forward-looking camera at `position` (reference frame) with a
    /// centered principal point.
    pub fn forward(position: Vec3, focal: f64, width: usize, height: usize) -> Result<Self> {
        let to_camera = RigidTransform::new(nalgebra::Matrix3::identity(), -position)?;
        Self::new(
            to_camera,
            Intrinsics {
                fx: focal,
                fy: focal,
                cx: width as f64 / 2.0,
                cy: height as f64 / 2.0,
                width,
                height,
            },
        )
    }

    /// Continuous pixel coordinate of a reference-frame point in front of the camera.
    pub fn project(&self, p: &Vec3) -> Option<[f64; 2]> {
        let c = self.to_camera.apply(p);
        if c.z <= 0.0 {
            return None;
        }
        let k = &self.intrinsics;
        Some([k.cx + k.fx * c.x / c.z, k.cy - k.fy * c.y / c.z])
    }

    /// Reference-frame point at camera depth `depth` seen through pixel `(x, y)`.
    pub fn back_project(&self, x: f64, y: f64, depth: f64) -> Vec3 {
        let k = &self.intrinsics;
        let c = Vec3::new((x - k.cx) / k.fx * depth, (k.cy - y) / k.fy * depth, depth);
        self.to_camera.inverse().apply(&c)
    }

    fn optical_axis(&self) -> Vec3 {
        self.to_camera.rotation.transpose() * Vec3::z()
    }

    fn camera_center(&self) -> Vec3 {
        self.to_camera.inverse().translation
    }
}

/// Density of `dist` at the surface point `p` seen from `eye`. With
/// `jacobian` the angular density is converted to density per unit area of
/// a surface with unit normal `normal`.
fn density_at(dist: &GazeDistribution, eye: &Vec3, p: &Vec3, normal: &Vec3, jacobian: bool) -> f64 {
    let d = p - eye;
    if d.z <= 0.0 {
        return 0.0;
    }
    let g = direction_angles(&d);
    let density = dist.density(g);
    if !jacobian {
        return density;
    }
    let r2 = d.norm_squared();
    let incidence = normal.dot(&d).abs() / r2.sqrt();
    density * incidence / (r2 * g.theta.cos())
}

/// Point where the mean gaze ray meets `plane` in front of the head.
pub fn mean_gaze_hit(dist: &GazeDistribution, head: &HeadPose, plane: &Plane) -> Result<Vec3> {
    dist.validate()?;
    let ray = gaze_ray(head, dist.mean())?;
    match intersect_ray_plane(&ray, plane) {
        Ok(hit) if hit.distance > 0.0 => Ok(hit.point),
        Ok(_) => Err(Error::Projection(
            "plane lies behind the head along the mean gaze".into(),
        )),
        Err(_) => Err(Error::Projection("mean gaze is parallel to the plane".into())),
    }
}

/// Windshield map with the analytic contour of the central confidence region.
#[derive(Clone, Debug, PartialEq)]
pub struct WindshieldMap {
    pub map: HeatMap,
    /// `None` when part of the contour misses the plane.
    pub contour: Option<Contour>,
}

/// Evaluates `dist` at the gaze angles of every grid cell center of a plane.
pub fn windshield_density(
    dist: &GazeDistribution,
    head: &HeadPose,
    grid: &PlaneGrid,
    jacobian: bool,
) -> Result<WindshieldMap> {
    mean_gaze_hit(dist, head, &grid.plane)?;
    let eye = Vec3::from(head.position);
    let normal = grid.plane.normal;
    let values: Vec<f64> = (0..grid.rows)
        .into_par_iter()
        .flat_map_iter(|row| {
            (0..grid.cols).map(move |col| {
                let p = grid.point(col as f64 + 0.5, row as f64 + 0.5);
                density_at(dist, &eye, &p, &normal, jacobian)
            })
        })
        .collect();
    let map = HeatMap {
        width: grid.cols,
        height: grid.rows,
        values,
        depths: Vec::new(),
        camera: None,
        jacobian,
    };
    let contour = angular_contour(dist, head, WINDSHIELD_CONTOUR_LEVEL, |p| {
        let ray = gaze_ray(head, direction_angles(&(p - eye)))?;
        let hit = intersect_ray_plane(&ray, &grid.plane)?;
        Ok((hit.distance > 0.0).then(|| grid.pixel(&hit.point)))
    })?;
    Ok(WindshieldMap { map, contour })
}

/// Boundary of the `level` region in angle space, mapped to pixels by
/// `to_pixel` applied to a point one meter along each boundary ray.
fn angular_contour(
    dist: &GazeDistribution,
    head: &HeadPose,
    level: f64,
    to_pixel: impl Fn(Vec3) -> Result<Option<[f64; 2]>>,
) -> Result<Option<Contour>> {
    let r = mahalanobis_radius(level)?;
    let eye = Vec3::from(head.position);
    let (st, sp) = (dist.theta.std_dev(), dist.phi.std_dev());
    let mean = dist.mean();
    let mut vertices = Vec::with_capacity(CONTOUR_VERTICES);
    for k in 0..CONTOUR_VERTICES {
        let t = 2.0 * PI * k as f64 / CONTOUR_VERTICES as f64;
        let g = GazeAngles::new(mean.theta + r * st * t.cos(), mean.phi + r * sp * t.sin());
        match to_pixel(eye + gaze_direction(g)) {
            Ok(Some(px)) => vertices.push(px),
            Ok(None) | Err(Error::NoIntersection) => return Ok(None),
            Err(e) => return Err(e),
        }
    }
    Ok(Some(Contour { level, vertices }))
}

/// Uniform average over `depths` of the density on camera-fronto-parallel
/// planes, sampled at every pixel of the camera image.
pub fn road_density(
    dist: &GazeDistribution,
    head: &HeadPose,
    camera: &CameraMapping,
    depths: &[f64],
    jacobian: bool,
) -> Result<HeatMap> {
    if depths.is_empty() {
        return Err(Error::invalid("road projection needs at least one depth"));
    }
    if depths.iter().any(|d| !(*d > 0.0) || !d.is_finite()) {
        return Err(Error::invalid("depths must be positive and finite"));
    }
    let axis = camera.optical_axis();
    let origin = camera.camera_center();
    let mut sorted = depths.to_vec();
    sorted.sort_by(f64::total_cmp);
    for depth in &sorted {
        let plane = Plane::through(origin + axis * *depth, axis)?;
        mean_gaze_hit(dist, head, &plane)?;
    }
    let eye = Vec3::from(head.position);
    let k = camera.intrinsics;
    let scale = 1.0 / sorted.len() as f64;
    let values: Vec<f64> = (0..k.height)
        .into_par_iter()
        .flat_map_iter(|row| {
            let sorted = &sorted;
            (0..k.width).map(move |col| {
                let (x, y) = (col as f64 + 0.5, row as f64 + 0.5);
                let sum: f64 = sorted
                    .iter()
                    .map(|depth| density_at(dist, &eye, &camera.back_project(x, y, *depth), &axis, jacobian))
                    .sum();
                sum * scale
            })
        })
        .collect();
    Ok(HeatMap {
        width: k.width,
        height: k.height,
        values,
        depths: sorted,
        camera: Some(*camera),
        jacobian,
    })
}

/// Highest-density region holding `level` of the map's mass, traced as a
/// star-shaped polygon around the argmax.
pub fn mass_contour(map: &HeatMap, level: f64) -> Result<Contour> {
    map.validate()?;
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::invalid(format!(
            "contour level {level} must lie in (0, 1)"
        )));
    }
    let total = map.total();
    if total <= 0.0 {
        return Err(Error::Projection("map holds no mass".into()));
    }
    let mut sorted = map.values.clone();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut acc = 0.0;
    let mut threshold = sorted[sorted.len() - 1];
    for v in &sorted {
        acc += v;
        if acc >= level * total {
            threshold = *v;
            break;
        }
    }
    let (c, r) = map.argmax();
    let (cx, cy) = (c as f64 + 0.5, r as f64 + 0.5);
    let reach = (map.width as f64).hypot(map.height as f64);
    let step = 0.25;
    let vertices = (0..CONTOUR_VERTICES)
        .map(|k| {
            let t = 2.0 * PI * k as f64 / CONTOUR_VERTICES as f64;
            let (dx, dy) = (t.cos(), t.sin());
            let mut prev = (0.0, map.sample(cx, cy));
            let mut s = step;
            while s <= reach {
                let (x, y) = (cx + s * dx, cy + s * dy);
                if x < 0.0 || y < 0.0 || x > map.width as f64 || y > map.height as f64 {
                    s -= step;
                    break;
                }
                let v = map.sample(x, y);
                if v < threshold {
                    let f = (prev.1 - threshold) / (prev.1 - v);
                    s = prev.0 + f * (s - prev.0);
                    break;
                }
                prev = (s, v);
                s += step;
            }
            let s = s.min(reach);
            [cx + s * dx, cy + s * dy]
        })
        .collect();
    Ok(Contour { level, vertices })
}

/// Binary 8-bit PGM scaled so the map maximum is 255. A constant map
/// renders as uniform mid-gray.
pub fn encode_pgm(map: &HeatMap) -> Result<Vec<u8>> {
    map.validate()?;
    let mut out = format!("P5\n{} {}\n255\n", map.width, map.height).into_bytes();
    let max = map.max();
    let min = map.values.iter().copied().fold(f64::INFINITY, f64::min);
    if max == min {
        out.extend(std::iter::repeat_n(128u8, map.values.len()));
    } else {
        out.extend(map.values.iter().map(|v| (255.0 * v / max).round() as u8));
    }
    Ok(out)
}

/// Pixels of a binary 8-bit PGM as `(width, height, data)`.
pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let bad = |m: &str| Error::Format(format!("pgm: {m}"));
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header is not ascii"))?);
    }
    pos += 1;
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(bad("only 8-bit binary images are supported"));
    }
    let width: usize = fields[1].parse().map_err(|_| bad("bad width"))?;
    let height: usize = fields[2].parse().map_err(|_| bad("bad height"))?;
    let data = bytes.get(pos..).unwrap_or_default();
    if data.len() != width * height {
        return Err(bad("pixel data does not match the header size"));
    }
    Ok((width, height, data.to_vec()))
}

/// Plain-text polygons: a `# level <c>` line, then one `x y` vertex per line.
pub fn encode_contours(contours: &[Contour]) -> String {
    let mut s = String::new();
    for (i, c) in contours.iter().enumerate() {
        if i > 0 {
            s.push('\n');
        }
        let _ = writeln!(s, "# level {}", c.level);
        for [x, y] in &c.vertices {
            let _ = writeln!(s, "{x:.4} {y:.4}");
        }
    }
    s
}

/// Companion path of the polygon file written next to an image.
pub fn contour_path(image: &Path) -> PathBuf {
    image.with_extension("poly")
}

/// Writes the map as PGM and, if `overlay` is non-empty, the polygons next to it.
pub fn render(map: &HeatMap, path: &Path, overlay: &[Contour]) -> Result<()> {
    std::fs::write(path, encode_pgm(map)?).map_err(|e| Error::io(path, e))?;
    if !overlay.is_empty() {
        let poly = contour_path(path);
        std::fs::write(&poly, encode_contours(overlay)).map_err(|e| Error::io(poly, e))?;
    }
    Ok(())
}
