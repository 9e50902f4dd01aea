//! Rotations, rigid registration, gaze rays, planes and solid-angle measure.
//!
//! Angle conventions: a gaze `(theta, phi)` points along
//! `[sin(theta), cos(theta) sin(phi), cos(theta) cos(phi)]`, i.e. `+z` is
//! forward, `theta` turns toward `+x` and `phi` tilts toward `+y`. Head
//! orientations `(alpha, beta, gamma)` use the matching rotation
//! `Rx(-beta) * Ry(alpha) * Rz(gamma)`, so a head with zero roll faces along
//! the gaze direction of `(alpha, beta)`.

use std::f64::consts::{FRAC_PI_2, PI};

use nalgebra::{Matrix3, Matrix4, Rotation3, SymmetricEigen, UnitQuaternion, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{GazeAngles, HeadPose};

pub type Vec3 = Vector3<f64>;

const UNIT_TOL: f64 = 1e-9;

/// Unit quaternion `w + xi + yj + zk`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quaternion {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Quaternion {
    pub const IDENTITY: Quaternion = Quaternion {
        w: 1.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    /// Builds a quaternion and normalizes it. Fails on zero or non-finite input.
    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Result<Self> {
        Quaternion { w, x, y, z }.normalized()
    }

    pub fn from_axis_angle(axis: Vec3, angle: f64) -> Result<Self> {
        let n = axis.norm();
        if !(n > 0.0) || !n.is_finite() || !angle.is_finite() {
            return Err(Error::invalid("axis must be a finite non-zero vector"));
        }
        let (s, c) = (0.5 * angle).sin_cos();
        let a = axis / n;
        Quaternion::new(c, s * a.x, s * a.y, s * a.z)
    }

    pub fn rot_x(angle: f64) -> Self {
        Self::from_axis_angle(Vec3::x(), angle).expect("x axis is valid")
    }

    pub fn rot_y(angle: f64) -> Self {
        Self::from_axis_angle(Vec3::y(), angle).expect("y axis is valid")
    }

    pub fn rot_z(angle: f64) -> Self {
        Self::from_axis_angle(Vec3::z(), angle).expect("z axis is valid")
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn normalized(self) -> Result<Self> {
        let n = self.norm();
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::invalid(format!("cannot normalize quaternion {self:?}")));
        }
        Ok(Quaternion {
            w: self.w / n,
            x: self.x / n,
            y: self.y / n,
            z: self.z / n,
        })
    }

    pub fn dot(&self, other: &Self) -> f64 {
        self.w * other.w + self.x * other.x + self.y * other.y + self.z * other.z
    }

    pub fn neg(&self) -> Self {
        Quaternion {
            w: -self.w,
            x: -self.x,
            y: -self.y,
            z: -self.z,
        }
    }

    pub fn conjugate(&self) -> Self {
        Quaternion {
            w: self.w,
            x: -self.x,
            y: -self.y,
            z: -self.z,
        }
    }

    /// Hamilton product `self * rhs` (apply `rhs` first).
    pub fn mul(&self, rhs: &Self) -> Self {
        let (a, b) = (self, rhs);
        Quaternion {
            w: a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
            x: a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
            y: a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
            z: a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w,
        }
    }

    /// Sign representative with `w >= 0`.
    pub fn canonical(&self) -> Self {
        if self.w < 0.0 {
            self.neg()
        } else {
            *self
        }
    }

    /// Geodesic angle (radians) between the rotations, ignoring sign.
    pub fn angle_to(&self, other: &Self) -> f64 {
        let b = if self.dot(other) < 0.0 {
            other.neg()
        } else {
            *other
        };
        let diff = (self.as_vec4() - b.as_vec4()).norm();
        let sum = (self.as_vec4() + b.as_vec4()).norm();
        4.0 * diff.atan2(sum)
    }

    /// Rotation equality: `q` and `-q` are the same rotation.
    pub fn same_rotation(&self, other: &Self, tol: f64) -> bool {
        self.angle_to(other) <= tol
    }

    /// Spherical linear interpolation along the shorter arc.
    pub fn slerp(&self, other: &Self, t: f64) -> Self {
        let mut b = *other;
        let mut cos = self.dot(&b);
        if cos < 0.0 {
            b = b.neg();
            cos = -cos;
        }
        let (wa, wb) = if cos > 1.0 - 1e-12 {
            (1.0 - t, t)
        } else {
            let omega = cos.min(1.0).acos();
            let s = omega.sin();
            (((1.0 - t) * omega).sin() / s, (t * omega).sin() / s)
        };
        let q = Quaternion {
            w: wa * self.w + wb * b.w,
            x: wa * self.x + wb * b.x,
            y: wa * self.y + wb * b.y,
            z: wa * self.z + wb * b.z,
        };
        q.normalized().unwrap_or(*self)
    }

    pub fn to_matrix(&self) -> Matrix3<f64> {
        self.to_unit().to_rotation_matrix().into_inner()
    }

    /// Converts a rotation matrix; the result is canonicalized to `w >= 0`.
    pub fn from_matrix(m: &Matrix3<f64>) -> Self {
        let r = Rotation3::from_matrix_unchecked(*m);
        let q = UnitQuaternion::from_rotation_matrix(&r);
        Quaternion {
            w: q.w,
            x: q.i,
            y: q.j,
            z: q.k,
        }
        .canonical()
    }

    fn to_unit(self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(self.w, self.x, self.y, self.z))
    }

    fn as_vec4(&self) -> Vector4<f64> {
        Vector4::new(self.w, self.x, self.y, self.z)
    }
}

/// Rotation matrix of head orientation angles `(alpha, beta, gamma)`.
pub fn orientation_matrix(orientation: [f64; 3]) -> Matrix3<f64> {
    let [alpha, beta, gamma] = orientation;
    let rx = Rotation3::from_axis_angle(&Vector3::x_axis(), -beta);
    let ry = Rotation3::from_axis_angle(&Vector3::y_axis(), alpha);
    let rz = Rotation3::from_axis_angle(&Vector3::z_axis(), gamma);
    (rx * ry * rz).into_inner()
}

/// Inverse of [`orientation_matrix`] for `|alpha| < pi/2`.
pub fn orientation_angles(m: &Matrix3<f64>) -> [f64; 3] {
    let forward = m.column(2);
    let alpha = forward[0].clamp(-1.0, 1.0).asin();
    let beta = forward[1].atan2(forward[2]);
    let head = orientation_matrix([alpha, beta, 0.0]);
    let roll = head.transpose() * m;
    let gamma = roll[(1, 0)].atan2(roll[(0, 0)]);
    [alpha, beta, gamma]
}

pub fn orientation_quaternion(orientation: [f64; 3]) -> Quaternion {
    Quaternion::from_matrix(&orientation_matrix(orientation))
}

/// Rotational average by streaming pairwise Slerp: the running mean moves
/// toward the k-th rotation by `1/k` of the arc. Inputs are sign-aligned with
/// the running mean before each step; the result has `w >= 0`.
pub fn slerp_mean(quats: &[Quaternion]) -> Result<Quaternion> {
    let (first, rest) = quats
        .split_first()
        .ok_or_else(|| Error::invalid("slerp_mean needs at least one quaternion"))?;
    let mut mean = first.normalized()?.canonical();
    for (i, q) in rest.iter().enumerate() {
        let mut q = q.normalized()?.canonical();
        if q.dot(&mean) < 0.0 {
            q = q.neg();
        }
        mean = mean.slerp(&q, 1.0 / (i as f64 + 2.0));
    }
    Ok(mean.canonical())
}

/// Chordal L2 rotational mean: dominant eigenvector of `sum q q^T`.
pub fn eigen_mean(quats: &[Quaternion]) -> Result<Quaternion> {
    if quats.is_empty() {
        return Err(Error::invalid("eigen_mean needs at least one quaternion"));
    }
    let mut acc = Matrix4::<f64>::zeros();
    for q in quats {
        let v = q.normalized()?.as_vec4();
        acc += v * v.transpose();
    }
    let eig = SymmetricEigen::new(acc);
    let (best, _) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .expect("4 eigenvalues");
    let v = eig.eigenvectors.column(best);
    Ok(Quaternion::new(v[0], v[1], v[2], v[3])?.canonical())
}

/// Proper rigid transform `p -> rotation * p + translation`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vec3,
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vec3) -> Result<Self> {
        let ortho = (rotation.transpose() * rotation - Matrix3::identity())
            .abs()
            .max();
        let det = rotation.determinant();
        if ortho > UNIT_TOL || (det - 1.0).abs() > UNIT_TOL {
            return Err(Error::invalid(format!(
                "rotation is not proper orthonormal (det {det}, |R^T R - I| {ortho})"
            )));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    /// Rotates a direction (no translation).
    pub fn apply_vector(&self, v: &Vec3) -> Vec3 {
        self.rotation * v
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self` after `first`: `p -> self(first(p))`.
    pub fn compose(&self, first: &Self) -> Self {
        Self {
            rotation: self.rotation * first.rotation,
            translation: self.rotation * first.translation + self.translation,
        }
    }

    /// Geodesic angle between the two rotations.
    pub fn rotation_angle_to(&self, other: &Self) -> f64 {
        let rel = self.rotation.transpose() * other.rotation;
        ((rel.trace() - 1.0) * 0.5).clamp(-1.0, 1.0).acos()
    }
}

/// Least-squares rigid transform taking `source[i]` onto `target[i]`.
pub fn kabsch(source: &[Vec3], target: &[Vec3]) -> Result<RigidTransform> {
    if source.len() != target.len() {
        return Err(Error::invalid(format!(
            "kabsch needs equal-length point sets ({} vs {})",
            source.len(),
            target.len()
        )));
    }
    if source.len() < 3 {
        return Err(Error::DegenerateGeometry(format!(
            "kabsch needs at least 3 point pairs, got {}",
            source.len()
        )));
    }
    let n = source.len() as f64;
    let cs = source.iter().sum::<Vec3>() / n;
    let ct = target.iter().sum::<Vec3>() / n;
    let mut h = Matrix3::zeros();
    for (s, t) in source.iter().zip(target) {
        h += (s - cs) * (t - ct).transpose();
    }
    let svd = h.svd(true, true);
    let sv = svd.singular_values;
    let scale = sv[0].max(f64::MIN_POSITIVE);
    if !(sv[0] > 0.0) || sv[1] <= 1e-12 * scale {
        return Err(Error::DegenerateGeometry(format!(
            "collinear or coincident points (singular values {:.3e}, {:.3e}, {:.3e})",
            sv[0], sv[1], sv[2]
        )));
    }
    let u = svd.u.expect("requested U");
    let v = svd.v_t.expect("requested V^T").transpose();
    let d = (v * u.transpose()).determinant().signum();
    let correction = Matrix3::from_diagonal(&Vec3::new(1.0, 1.0, d));
    let rotation = v * correction * u.transpose();
    let translation = ct - rotation * cs;
    Ok(RigidTransform {
        rotation,
        translation,
    })
}

/// Plane `{p : normal . p = offset}` with unit normal.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Plane {
    pub normal: Vec3,
    pub offset: f64,
}

impl Plane {
    pub fn new(normal: Vec3, offset: f64) -> Result<Self> {
        let n = normal.norm();
        if !(n > 0.0) || !n.is_finite() || !offset.is_finite() {
            return Err(Error::invalid("plane normal must be finite and non-zero"));
        }
        Ok(Self {
            normal: normal / n,
            offset: offset / n,
        })
    }

    /// Plane through `point` with the given normal.
    pub fn through(point: Vec3, normal: Vec3) -> Result<Self> {
        let n = normal.normalize();
        Plane::new(n, n.dot(&point))
    }

    pub fn signed_distance(&self, p: &Vec3) -> f64 {
        self.normal.dot(p) - self.offset
    }

    /// Orthonormal in-plane axes `(u, v)` with `u x v = normal`.
    pub fn basis(&self) -> (Vec3, Vec3) {
        let n = self.normal;
        let helper = if n.y.abs() < 0.9 { Vec3::y() } else { Vec3::x() };
        let u = helper.cross(&n).normalize();
        let v = n.cross(&u);
        (u, v)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlaneFit {
    pub plane: Plane,
    /// Mean absolute orthogonal distance of the input points.
    pub mean_residual: f64,
}

/// Total-least-squares plane. The normal is oriented so `offset >= 0`.
pub fn fit_plane(points: &[Vec3]) -> Result<PlaneFit> {
    if points.len() < 3 {
        return Err(Error::DegenerateGeometry(format!(
            "plane fit needs at least 3 points, got {}",
            points.len()
        )));
    }
    let c = points.iter().sum::<Vec3>() / points.len() as f64;
    let mut scatter = Matrix3::zeros();
    for p in points {
        let d = p - c;
        scatter += d * d.transpose();
    }
    let eig = SymmetricEigen::new(scatter);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let largest = eig.eigenvalues[order[2]];
    if !(largest > 0.0) || eig.eigenvalues[order[1]] <= 1e-12 * largest {
        return Err(Error::DegenerateGeometry(
            "points are collinear or coincident".into(),
        ));
    }
    let mut normal: Vec3 = eig.eigenvectors.column(order[0]).into_owned().normalize();
    let mut offset = normal.dot(&c);
    let flip = if offset.abs() > 1e-12 {
        offset < 0.0
    } else {
        let imax = normal.iamax();
        normal[imax] < 0.0
    };
    if flip {
        normal = -normal;
        offset = -offset;
    }
    let plane = Plane { normal, offset };
    let mean_residual =
        points.iter().map(|p| plane.signed_distance(p).abs()).sum::<f64>() / points.len() as f64;
    Ok(PlaneFit { plane, mean_residual })
}

/// Half-line from the head toward the gaze direction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GazeRay {
    pub origin: Vec3,
    pub direction: Vec3,
}

impl GazeRay {
    pub fn new(origin: Vec3, direction: Vec3) -> Result<Self> {
        let n = direction.norm();
        if !(n > 0.0) || !n.is_finite() || !origin.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("ray needs a finite origin and non-zero direction"));
        }
        Ok(Self {
            origin,
            direction: direction / n,
        })
    }

    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.direction * t
    }
}

/// Unit direction of a gaze `(theta, phi)`.
pub fn gaze_direction(g: GazeAngles) -> Vec3 {
    let (st, ct) = g.theta.sin_cos();
    let (sp, cp) = g.phi.sin_cos();
    Vec3::new(st, ct * sp, ct * cp).normalize()
}

/// Inverse of [`gaze_direction`] for forward-facing (`theta` in `[-pi/2, pi/2]`) directions.
pub fn direction_angles(d: &Vec3) -> GazeAngles {
    let d = d.normalize();
    GazeAngles::new(d.x.clamp(-1.0, 1.0).asin(), d.y.atan2(d.z))
}

pub fn gaze_ray(head: &HeadPose, gaze: GazeAngles) -> Result<GazeRay> {
    if !head.is_finite() || !gaze.is_finite() {
        return Err(Error::invalid("gaze ray needs finite head pose and angles"));
    }
    GazeRay::new(Vec3::from(head.position), gaze_direction(gaze))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RayHit {
    pub point: Vec3,
    /// Signed distance along the ray; negative means behind the origin.
    pub distance: f64,
}

impl RayHit {
    pub fn is_forward(&self) -> bool {
        self.distance >= 0.0
    }
}

pub fn intersect_ray_plane(ray: &GazeRay, plane: &Plane) -> Result<RayHit> {
    let denom = plane.normal.dot(&ray.direction);
    if denom.abs() <= 1e-9 {
        return Err(Error::NoIntersection);
    }
    let distance = (plane.offset - plane.normal.dot(&ray.origin)) / denom;
    Ok(RayHit {
        point: ray.at(distance),
        distance,
    })
}

/// Axis-aligned ellipse in `(theta, phi)` with semi-axes in radians.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AngularEllipse {
    pub center: GazeAngles,
    pub semi_theta: f64,
    pub semi_phi: f64,
}

impl AngularEllipse {
    pub fn contains(&self, g: GazeAngles) -> bool {
        let dt = crate::types::wrap_angle(g.theta - self.center.theta) / self.semi_theta;
        let dp = (g.phi - self.center.phi) / self.semi_phi;
        dt * dt + dp * dp <= 1.0
    }
}

/// Solid angle of the ellipse, with `(theta, phi)` read as longitude and
/// latitude, as a fraction of the full sphere.
///
/// The longitude integral is done in closed form (chord length clipped to
/// `2 pi`), leaving `int min(2a cos t, 2pi) cos(phi_c + b sin t) b cos t dt`
/// over the latitude band inside `[-pi/2, pi/2]`. Unclipped ellipses have a
/// closed form; the rest are integrated by adaptive Simpson.
pub fn spherical_area_fraction(region: &AngularEllipse) -> Result<f64> {
    let (a, b) = (region.semi_theta, region.semi_phi);
    let pc = region.center.phi;
    if !(a > 0.0 && b > 0.0) || !a.is_finite() || !b.is_finite() || !pc.is_finite() {
        return Err(Error::invalid(format!(
            "ellipse needs positive finite semi-axes, got ({a}, {b})"
        )));
    }
    if a <= PI && pc.abs() + b <= FRAC_PI_2 {
        // Neither the longitude span nor the latitude band is clipped; the
        // odd part of the integrand vanishes and the rest is a Bessel integral.
        return Ok((0.5 * a * pc.cos() * bessel_j1(b)).clamp(0.0, 1.0));
    }
    Ok(area_by_quadrature(a, b, pc))
}

fn area_by_quadrature(a: f64, b: f64, pc: f64) -> f64 {
    let t_lo = ((-FRAC_PI_2 - pc) / b).clamp(-1.0, 1.0).asin();
    let t_hi = ((FRAC_PI_2 - pc) / b).clamp(-1.0, 1.0).asin();
    if t_hi <= t_lo {
        return 0.0;
    }
    let integrand = |t: f64| {
        let ct = t.cos().max(0.0);
        let span = (2.0 * a * ct).min(2.0 * PI);
        span * (pc + b * t.sin()).cos().max(0.0) * b * ct
    };
    let area = adaptive_simpson(&integrand, t_lo, t_hi, 1e-13, 48);
    (area / (4.0 * PI)).clamp(0.0, 1.0)
}

/// Power series for the Bessel function `J1`, accurate for `|x| <= 2`.
fn bessel_j1(x: f64) -> f64 {
    let h = 0.5 * x;
    let h2 = h * h;
    let mut term = h;
    let mut sum = term;
    for k in 1..40 {
        term *= -h2 / (k as f64 * (k + 1) as f64);
        sum += term;
        if term.abs() < 1e-18 * sum.abs() {
            break;
        }
    }
    sum
}

fn adaptive_simpson<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, eps: f64, depth: u32) -> f64 {
    let fa = f(a);
    let fb = f(b);
    let m = 0.5 * (a + b);
    let fm = f(m);
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    simpson_step(f, a, b, fa, fm, fb, whole, eps, depth)
}

#[allow(clippy::too_many_arguments)]
fn simpson_step<F: Fn(f64) -> f64>(
    f: &F,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    eps: f64,
    depth: u32,
) -> f64 {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm);
    let frm = f(rm);
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * eps {
        left + right + delta / 15.0
    } else {
        simpson_step(f, a, m, fa, flm, fm, left, 0.5 * eps, depth - 1)
            + simpson_step(f, m, b, fm, frm, fb, right, 0.5 * eps, depth - 1)
    }
}
