//! Synthetic drive recordings with a known conditional gaze distribution.
//!
//! The marker layout below is synthetic: 21 plausible positions in a
//! left-hand-drive cabin (meters, head at the origin, `+x` toward the
//! passenger, `+y` up, `+z` forward). Markers 1-13 sit on a gently curved
//! windshield, 14-16 are the mirrors, 17-18 the side windows, 19 the
//! speedometer, 20 the radio and 21 the gear lever.
//!
//! Generative model, per driver `d` with orientation bias `b_d` and mean head
//! position `p_d`, for each frame looking at marker `m`:
//!
//! ```text
//! w      = gaze(m) + N(0, jitter^2)              intended gaze
//! v      = f^-1(w),  f(v) = v + nu * v * |v|     eye-head coupling
//! head   = (kappa * v + b_d, roll),  p = p_d + lean
//! mu     = w + C * lean                           conditional mean
//! target = mu + N(0, s(mu)^2),  s(mu) = sigma0 + sigma1 * |mu|^p
//! ```
//!
//! Given the head pose, the target is exactly Gaussian with mean
//! `f((head - b_d) / kappa) + C (p - p_d)` and per-angle std `s(mu)`, which
//! [`SyntheticWorld::truth`] exposes.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{DriveRecord, Phase};
use crate::error::{Error, Result};
use crate::geometry::{direction_angles, Vec3};
use crate::types::{GazeAngles, GazeDistribution, HeadPose};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Marker {
    pub id: u8,
    pub position: [f64; 3],
    pub label: &'static str,
}

const MARKERS: [Marker; 21] = [
    Marker {
        id: 1,
        position: [-0.45, 0.18, 0.745],
        label: "windshield",
    },
    Marker {
        id: 2,
        position: [-0.15, 0.18, 0.785],
        label: "windshield",
    },
    Marker {
        id: 3,
        position: [0.15, 0.18, 0.800],
        label: "windshield",
    },
    Marker {
        id: 4,
        position: [0.45, 0.18, 0.790],
        label: "windshield",
    },
    Marker {
        id: 5,
        position: [0.75, 0.18, 0.755],
        label: "windshield",
    },
    Marker {
        id: 6,
        position: [-0.30, 0.05, 0.770],
        label: "windshield",
    },
    Marker {
        id: 7,
        position: [0.00, 0.05, 0.795],
        label: "windshield",
    },
    Marker {
        id: 8,
        position: [0.30, 0.05, 0.800],
        label: "windshield",
    },
    Marker {
        id: 9,
        position: [0.60, 0.05, 0.775],
        label: "windshield",
    },
    Marker {
        id: 10,
        position: [-0.45, -0.08, 0.745],
        label: "windshield",
    },
    Marker {
        id: 11,
        position: [-0.15, -0.08, 0.785],
        label: "windshield",
    },
    Marker {
        id: 12,
        position: [0.45, -0.08, 0.790],
        label: "windshield",
    },
    Marker {
        id: 13,
        position: [0.75, -0.08, 0.755],
        label: "windshield",
    },
    Marker {
        id: 14,
        position: [-0.75, -0.05, 0.65],
        label: "left mirror",
    },
    Marker {
        id: 15,
        position: [0.35, 0.25, 0.70],
        label: "rear-view mirror",
    },
    Marker {
        id: 16,
        position: [1.55, -0.10, 0.80],
        label: "right mirror",
    },
    Marker {
        id: 17,
        position: [-0.55, 0.00, 0.15],
        label: "left window",
    },
    Marker {
        id: 18,
        position: [1.40, 0.00, 0.25],
        label: "right window",
    },
    Marker {
        id: 19,
        position: [0.00, -0.30, 0.60],
        label: "speedometer",
    },
    Marker {
        id: 20,
        position: [0.45, -0.38, 0.60],
        label: "radio",
    },
    Marker {
        id: 21,
        position: [0.40, -0.62, 0.35],
        label: "gear",
    },
];

pub fn marker_layout() -> &'static [Marker] {
    &MARKERS
}

/// Windshield markers 1-13 as points.
pub fn windshield_markers() -> Vec<Vec3> {
    MARKERS[..13].iter().map(|m| Vec3::from(m.position)).collect()
}

fn marker_gaze(m: &Marker) -> GazeAngles {
    direction_angles(&Vec3::from(m.position))
}

/// Parameters of the synthetic generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub drivers: usize,
    pub frames_per_marker: usize,
    /// Fraction of the gaze carried by the head, in `(0, 1]`.
    pub kappa: f64,
    /// Noise floor (radians).
    pub sigma0: f64,
    /// Noise growth per unit of `|mu|^p`.
    pub sigma1: f64,
    /// Exponent `p` applied to the eccentricity in the noise model.
    pub noise_exponent: f64,
    /// Eye-head nonlinearity `nu` in `f(v) = v + nu v |v|`.
    pub nonlinearity: f64,
    /// Spread of the intended gaze around each marker (radians).
    pub fixation_jitter: f64,
    /// Std of per-driver orientation bias, e.g. headband placement (radians).
    pub driver_bias_std: f64,
    /// Std of per-driver mean head position (meters).
    pub driver_position_std: f64,
    /// Std of per-frame head movement along x, y, z (meters).
    pub lean_std: [f64; 3],
    /// Gaze shift per meter of lateral (x -> theta) and vertical (y -> phi) lean.
    pub position_gain: f64,
    /// Gaze shift per meter of depth lean, applied to both angles.
    pub depth_gain: f64,
    /// Std of head roll (radians).
    pub roll_std: f64,
    pub phase: Phase,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            drivers: 6,
            frames_per_marker: 40,
            kappa: 0.6,
            sigma0: 0.01,
            sigma1: 0.1,
            noise_exponent: 1.0,
            nonlinearity: 0.6,
            fixation_jitter: 0.04,
            driver_bias_std: 0.05,
            driver_position_std: 0.03,
            lean_std: [0.03, 0.03, 0.01],
            position_gain: 1.0,
            depth_gain: 0.2,
            roll_std: 0.03,
            phase: Phase::Driving,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::invalid(format!("synth spec: {msg}")));
        if self.drivers == 0 {
            return bad("drivers must be >= 1");
        }
        if self.frames_per_marker == 0 {
            return bad("frames_per_marker must be >= 1");
        }
        if !(self.kappa > 0.0 && self.kappa <= 1.0) {
            return bad("kappa must lie in (0, 1]");
        }
        let non_neg = [
            self.sigma0,
            self.sigma1,
            self.noise_exponent,
            self.nonlinearity,
            self.fixation_jitter,
            self.driver_bias_std,
            self.driver_position_std,
            self.lean_std[0],
            self.lean_std[1],
            self.lean_std[2],
            self.roll_std,
        ];
        if non_neg.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return bad("noise levels and nonlinearity must be finite and >= 0");
        }
        if !self.position_gain.is_finite() || !self.depth_gain.is_finite() {
            return bad("gains must be finite");
        }
        Ok(())
    }

    /// Parses a flat `key = value` file. Unknown keys are errors; `#` starts
    /// a comment.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut spec = SynthSpec::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: n + 1,
                message: format!("expected key = value, got '{line}'"),
            })?;
            spec.set(key.trim(), value.trim()).map_err(|e| Error::Parse {
                line: n + 1,
                message: e.to_string(),
            })?;
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "drivers = {}", self.drivers);
        let _ = writeln!(s, "frames_per_marker = {}", self.frames_per_marker);
        let _ = writeln!(s, "kappa = {}", self.kappa);
        let _ = writeln!(s, "sigma0 = {}", self.sigma0);
        let _ = writeln!(s, "sigma1 = {}", self.sigma1);
        let _ = writeln!(s, "noise_exponent = {}", self.noise_exponent);
        let _ = writeln!(s, "nonlinearity = {}", self.nonlinearity);
        let _ = writeln!(s, "fixation_jitter = {}", self.fixation_jitter);
        let _ = writeln!(s, "driver_bias_std = {}", self.driver_bias_std);
        let _ = writeln!(s, "driver_position_std = {}", self.driver_position_std);
        let _ = writeln!(s, "lean_std_x = {}", self.lean_std[0]);
        let _ = writeln!(s, "lean_std_y = {}", self.lean_std[1]);
        let _ = writeln!(s, "lean_std_z = {}", self.lean_std[2]);
        let _ = writeln!(s, "position_gain = {}", self.position_gain);
        let _ = writeln!(s, "depth_gain = {}", self.depth_gain);
        let _ = writeln!(s, "roll_std = {}", self.roll_std);
        let _ = writeln!(s, "phase = {}", self.phase);
        s
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let f = || {
            value
                .parse::<f64>()
                .map_err(|_| Error::invalid(format!("'{key}': '{value}' is not a number")))
        };
        let u = || {
            value
                .parse::<usize>()
                .map_err(|_| Error::invalid(format!("'{key}': '{value}' is not an integer")))
        };
        match key {
            "drivers" => self.drivers = u()?,
            "frames_per_marker" => self.frames_per_marker = u()?,
            "kappa" => self.kappa = f()?,
            "sigma0" => self.sigma0 = f()?,
            "sigma1" => self.sigma1 = f()?,
            "noise_exponent" => self.noise_exponent = f()?,
            "nonlinearity" => self.nonlinearity = f()?,
            "fixation_jitter" => self.fixation_jitter = f()?,
            "driver_bias_std" => self.driver_bias_std = f()?,
            "driver_position_std" => self.driver_position_std = f()?,
            "lean_std_x" => self.lean_std[0] = f()?,
            "lean_std_y" => self.lean_std[1] = f()?,
            "lean_std_z" => self.lean_std[2] = f()?,
            "position_gain" => self.position_gain = f()?,
            "depth_gain" => self.depth_gain = f()?,
            "roll_std" => self.roll_std = f()?,
            "phase" => self.phase = value.parse()?,
            other => return Err(Error::invalid(format!("unknown synth key '{other}'"))),
        }
        Ok(())
    }

    fn eye_head(&self, v: f64) -> f64 {
        v + self.nonlinearity * v * v.abs()
    }

    fn eye_head_inverse(&self, w: f64) -> f64 {
        let nu = self.nonlinearity;
        if nu == 0.0 {
            w
        } else {
            w.signum() * ((1.0 + 4.0 * nu * w.abs()).sqrt() - 1.0) / (2.0 * nu)
        }
    }

    fn noise_std(&self, mu: GazeAngles) -> f64 {
        self.sigma0 + self.sigma1 * mu.eccentricity().powf(self.noise_exponent)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriverParams {
    pub id: String,
    pub orientation_bias: [f64; 3],
    pub mean_position: [f64; 3],
}

/// A sampled population of drivers plus the generating process.
#[derive(Clone, Debug)]
pub struct SyntheticWorld {
    pub spec: SynthSpec,
    pub seed: u64,
    drivers: BTreeMap<String, DriverParams>,
    order: Vec<String>,
}

fn normal(std: f64) -> Normal<f64> {
    Normal::new(0.0, std).expect("validated std")
}

impl SyntheticWorld {
    pub fn new(spec: SynthSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bias = normal(spec.driver_bias_std);
        let pos = normal(spec.driver_position_std);
        let mut drivers = BTreeMap::new();
        let mut order = Vec::new();
        for d in 0..spec.drivers {
            let id = format!("driver{:02}", d + 1);
            let params = DriverParams {
                id: id.clone(),
                orientation_bias: [
                    bias.sample(&mut rng),
                    bias.sample(&mut rng),
                    bias.sample(&mut rng),
                ],
                mean_position: [pos.sample(&mut rng), pos.sample(&mut rng), pos.sample(&mut rng)],
            };
            order.push(id.clone());
            drivers.insert(id, params);
        }
        Ok(Self {
            spec,
            seed,
            drivers,
            order,
        })
    }

    pub fn driver_ids(&self) -> &[String] {
        &self.order
    }

    pub fn driver(&self, id: &str) -> Option<&DriverParams> {
        self.drivers.get(id)
    }

    /// Samples the recordings. Each driver draws from its own stream so the
    /// result for a driver does not depend on how many drivers exist.
    pub fn generate(&self) -> Vec<DriveRecord> {
        let s = &self.spec;
        let mut out = Vec::with_capacity(s.drivers * s.frames_per_marker * MARKERS.len());
        for (d, id) in self.order.iter().enumerate() {
            let params = &self.drivers[id];
            let mut rng =
                ChaCha8Rng::seed_from_u64(self.seed ^ (0x9E37_79B9_7F4A_7C15u64.wrapping_mul(d as u64 + 1)));
            let jitter = normal(s.fixation_jitter);
            let unit = normal(1.0);
            let mut frame = 0u64;
            for _ in 0..s.frames_per_marker {
                for m in MARKERS.iter() {
                    let g = marker_gaze(m);
                    let w =
                        GazeAngles::new(g.theta + jitter.sample(&mut rng), g.phi + jitter.sample(&mut rng));
                    let lean = [
                        s.lean_std[0] * unit.sample(&mut rng),
                        s.lean_std[1] * unit.sample(&mut rng),
                        s.lean_std[2] * unit.sample(&mut rng),
                    ];
                    let v = [s.eye_head_inverse(w.theta), s.eye_head_inverse(w.phi)];
                    let b = params.orientation_bias;
                    let orientation = [
                        s.kappa * v[0] + b[0],
                        s.kappa * v[1] + b[1],
                        b[2] + s.roll_std * unit.sample(&mut rng),
                    ];
                    let p = params.mean_position;
                    let position = [p[0] + lean[0], p[1] + lean[1], p[2] + lean[2]];
                    let mu = self.shifted(w, lean);
                    let sd = s.noise_std(mu);
                    let target = GazeAngles::new(
                        mu.theta + sd * unit.sample(&mut rng),
                        (mu.phi + sd * unit.sample(&mut rng))
                            .clamp(-std::f64::consts::FRAC_PI_2, std::f64::consts::FRAC_PI_2),
                    );
                    out.push(DriveRecord {
                        driver_id: id.clone(),
                        phase: s.phase,
                        frame_index: frame,
                        head: HeadPose::new(position, orientation),
                        target_gaze: target,
                        marker_id: Some(m.id),
                    });
                    frame += 1;
                }
            }
        }
        out
    }

    fn shifted(&self, w: GazeAngles, lean: [f64; 3]) -> GazeAngles {
        let s = &self.spec;
        GazeAngles::new(
            w.theta + s.position_gain * lean[0] + s.depth_gain * lean[2],
            w.phi + s.position_gain * lean[1] + s.depth_gain * lean[2],
        )
    }

    /// Exact conditional distribution of the target given a raw
    /// (unnormalized) head pose of driver `driver`.
    pub fn truth(&self, driver: &str, head: &HeadPose) -> Result<GazeDistribution> {
        let params = self
            .drivers
            .get(driver)
            .ok_or_else(|| Error::invalid(format!("unknown synthetic driver '{driver}'")))?;
        let s = &self.spec;
        let b = params.orientation_bias;
        let w = GazeAngles::new(
            s.eye_head((head.orientation[0] - b[0]) / s.kappa),
            s.eye_head((head.orientation[1] - b[1]) / s.kappa),
        );
        let p = params.mean_position;
        let lean = [
            head.position[0] - p[0],
            head.position[1] - p[1],
            head.position[2] - p[2],
        ];
        let mu = self.shifted(w, lean);
        let var = s.noise_std(mu).powi(2).max(1e-300);
        Ok(GazeDistribution::from_parts(mu, var, var))
    }
}

/// Samples recordings for `spec`; deterministic in `seed`.
pub fn synthesize(spec: &SynthSpec, seed: u64) -> Result<Vec<DriveRecord>> {
    Ok(SyntheticWorld::new(spec.clone(), seed)?.generate())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_records() {
        let spec = SynthSpec {
            drivers: 3,
            frames_per_marker: 2,
            ..SynthSpec::default()
        };
        let a = synthesize(&spec, 7).unwrap();
        let b = synthesize(&spec, 7).unwrap();
        assert_eq!(a, b);
        let mut ba = Vec::new();
        let mut bb = Vec::new();
        super::super::write_records(&mut ba, &a).unwrap();
        super::super::write_records(&mut bb, &b).unwrap();
        assert_eq!(ba, bb);
        assert_ne!(a, synthesize(&spec, 8).unwrap());
        assert_eq!(a.len(), 3 * 2 * 21);
        assert!(a.iter().all(|r| r.validate().is_ok()));
    }

    #[test]
    fn eye_head_inverse_round_trip() {
        let spec = SynthSpec::default();
        for w in [-1.4, -0.3, 0.0, 0.2, 1.1] {
            let v = spec.eye_head_inverse(w);
            assert!((spec.eye_head(v) - w).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        for spec in [
            SynthSpec {
                kappa: 0.0,
                ..SynthSpec::default()
            },
            SynthSpec {
                kappa: 1.5,
                ..SynthSpec::default()
            },
            SynthSpec {
                sigma0: -0.1,
                ..SynthSpec::default()
            },
            SynthSpec {
                drivers: 0,
                ..SynthSpec::default()
            },
        ] {
            assert!(matches!(synthesize(&spec, 1), Err(Error::InvalidArgument(_))));
        }
    }

    #[test]
    fn kv_round_trip() {
        let spec = SynthSpec {
            drivers: 5,
            kappa: 0.75,
            phase: Phase::Parked,
            ..SynthSpec::default()
        };
        assert_eq!(SynthSpec::from_kv(&spec.to_kv()).unwrap(), spec);
        assert!(SynthSpec::from_kv("kappa = 0.5\nbogus = 1\n").is_err());
        assert!(SynthSpec::from_kv("kappa 0.5\n").is_err());
    }

    #[test]
    fn noiseless_unit_kappa_head_gives_gaze() {
        let spec = SynthSpec {
            drivers: 2,
            frames_per_marker: 3,
            kappa: 1.0,
            sigma0: 0.0,
            sigma1: 0.0,
            nonlinearity: 0.0,
            driver_bias_std: 0.0,
            driver_position_std: 0.0,
            position_gain: 0.0,
            depth_gain: 0.0,
            ..SynthSpec::default()
        };
        for r in synthesize(&spec, 3).unwrap() {
            assert!((r.head.orientation[0] - r.target_gaze.theta).abs() < 1e-12);
            assert!((r.head.orientation[1] - r.target_gaze.phi).abs() < 1e-12);
        }
    }

    #[test]
    fn truth_mean_reproduces_noiseless_targets() {
        let spec = SynthSpec {
            drivers: 2,
            frames_per_marker: 2,
            sigma0: 0.0,
            sigma1: 0.0,
            ..SynthSpec::default()
        };
        let world = SyntheticWorld::new(spec, 11).unwrap();
        for r in world.generate() {
            let t = world.truth(&r.driver_id, &r.head).unwrap();
            assert!((t.theta.mean - r.target_gaze.theta).abs() < 1e-9);
            assert!((t.phi.mean - r.target_gaze.phi).abs() < 1e-9);
        }
    }

    #[test]
    fn markers_span_layout() {
        assert_eq!(marker_layout().len(), 21);
        assert_eq!(windshield_markers().len(), 13);
        for (i, m) in marker_layout().iter().enumerate() {
            assert_eq!(m.id as usize, i + 1);
        }
    }
}
