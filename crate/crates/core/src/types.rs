//! Value types shared by every stage of the pipeline.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// 6-DoF head state.
///
/// `position` is `(x, y, z)` in meters in the reference frame (x toward the
/// passenger side, y up, z forward). `orientation` is `(alpha, beta, gamma)` in
/// radians: `alpha` turns the face horizontally, `beta` vertically and `gamma`
/// is roll about the facing direction. With zero roll the facing direction is
/// the gaze direction of the same `(alpha, beta)` pair.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadPose {
    pub position: [f64; 3],
    pub orientation: [f64; 3],
}

impl HeadPose {
    pub fn new(position: [f64; 3], orientation: [f64; 3]) -> Self {
        Self {
            position,
            orientation,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.position
            .iter()
            .chain(self.orientation.iter())
            .all(|v| v.is_finite())
    }
}

/// Horizontal (`theta`) and vertical (`phi`) gaze angles in radians.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GazeAngles {
    pub theta: f64,
    pub phi: f64,
}

impl GazeAngles {
    pub const fn new(theta: f64, phi: f64) -> Self {
        Self { theta, phi }
    }

    pub fn is_finite(&self) -> bool {
        self.theta.is_finite() && self.phi.is_finite()
    }

    /// Euclidean norm in angle space, used as the eccentricity of a gaze.
    pub fn eccentricity(&self) -> f64 {
        self.theta.hypot(self.phi)
    }
}

/// A univariate Gaussian over one gaze angle.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AngleGaussian {
    pub mean: f64,
    pub variance: f64,
}

impl AngleGaussian {
    pub fn new(mean: f64, variance: f64) -> Self {
        Self { mean, variance }
    }

    pub fn std_dev(&self) -> f64 {
        self.variance.sqrt()
    }

    pub fn density(&self, x: f64) -> f64 {
        let d = x - self.mean;
        (-0.5 * d * d / self.variance).exp() / (2.0 * PI * self.variance).sqrt()
    }
}

/// Heteroscedastic prediction: independent Gaussians for `theta` and `phi`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GazeDistribution {
    pub theta: AngleGaussian,
    pub phi: AngleGaussian,
}

impl GazeDistribution {
    pub fn new(theta: AngleGaussian, phi: AngleGaussian) -> Self {
        Self { theta, phi }
    }

    pub fn from_parts(mean: GazeAngles, var_theta: f64, var_phi: f64) -> Self {
        Self {
            theta: AngleGaussian::new(mean.theta, var_theta),
            phi: AngleGaussian::new(mean.phi, var_phi),
        }
    }

    pub fn mean(&self) -> GazeAngles {
        GazeAngles::new(self.theta.mean, self.phi.mean)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.theta.variance > 0.0
            && self.phi.variance > 0.0
            && self.theta.variance.is_finite()
            && self.phi.variance.is_finite()
            && self.theta.mean.is_finite()
            && self.phi.mean.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "gaze distribution needs finite means and positive variances, got {self:?}"
            )))
        }
    }

    /// Squared Mahalanobis distance of `g` from the mean. The horizontal
    /// offset is wrapped into `[-pi, pi]`.
    pub fn mahalanobis_sq(&self, g: GazeAngles) -> f64 {
        let dt = wrap_angle(g.theta - self.theta.mean);
        let dp = g.phi - self.phi.mean;
        dt * dt / self.theta.variance + dp * dp / self.phi.variance
    }

    /// Joint density in angle space (radians^-2).
    pub fn density(&self, g: GazeAngles) -> f64 {
        let norm = 2.0 * PI * (self.theta.variance * self.phi.variance).sqrt();
        (-0.5 * self.mahalanobis_sq(g)).exp() / norm
    }

    /// Same distribution with both variances multiplied by `factor`.
    pub fn scaled_variance(&self, factor: f64) -> Self {
        Self {
            theta: AngleGaussian::new(self.theta.mean, self.theta.variance * factor),
            phi: AngleGaussian::new(self.phi.mean, self.phi.variance * factor),
        }
    }
}

/// Wraps an angle difference into `[-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    if (-PI..=PI).contains(&a) {
        a
    } else {
        (a + PI).rem_euclid(2.0 * PI) - PI
    }
}

/// Anything that turns a head pose into a gaze distribution.
pub trait GazePredictor: Send + Sync {
    fn predict_gaze(&self, head: &HeadPose) -> Result<GazeDistribution>;

    /// Same as mapping [`predict_gaze`](Self::predict_gaze) over `heads`.
    fn predict_batch(&self, heads: &[HeadPose]) -> Result<Vec<GazeDistribution>> {
        heads.iter().map(|h| self.predict_gaze(h)).collect()
    }

    fn name(&self) -> String;
}

impl<P: GazePredictor + ?Sized> GazePredictor for Box<P> {
    fn predict_gaze(&self, head: &HeadPose) -> Result<GazeDistribution> {
        (**self).predict_gaze(head)
    }

    fn predict_batch(&self, heads: &[HeadPose]) -> Result<Vec<GazeDistribution>> {
        (**self).predict_batch(heads)
    }

    fn name(&self) -> String {
        (**self).name()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wrap_angle_range() {
        assert_eq!(wrap_angle(0.5), 0.5);
        assert!((wrap_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-12);
        assert!((wrap_angle(-3.0 * PI / 2.0) - PI / 2.0).abs() < 1e-12);
    }

    #[test]
    fn density_integrates_to_one_on_grid() {
        let d = GazeDistribution::from_parts(GazeAngles::new(0.1, -0.2), 0.01, 0.04);
        let h = 0.002;
        let mut total = 0.0;
        for i in -600..=600 {
            for j in -600..=600 {
                let g = GazeAngles::new(0.1 + i as f64 * h, -0.2 + j as f64 * h);
                total += d.density(g) * h * h;
            }
        }
        assert!((total - 1.0).abs() < 1e-4, "{total}");
    }

    #[test]
    fn validate_rejects_zero_variance() {
        let d = GazeDistribution::from_parts(GazeAngles::new(0.0, 0.0), 0.0, 1.0);
        assert!(d.validate().is_err());
    }
}
