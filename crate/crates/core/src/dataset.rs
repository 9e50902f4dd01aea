//! Drive recordings: record model, per-driver normalization, fold splits,
//! the delimited text format and feature extraction.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    orientation_angles, orientation_matrix, orientation_quaternion, slerp_mean, RigidTransform, Vec3,
};
use crate::types::{GazeAngles, HeadPose};

pub mod synth;

pub use synth::{
    marker_layout, synthesize, windshield_markers, DriverParams, Marker, SynthSpec, SyntheticWorld,
};

/// Recording phase of the three-phase protocol.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Parked,
    Driving,
    Controlled,
}

impl Phase {
    pub fn as_str(&self) -> &'static str {
        match self {
            Phase::Parked => "parked",
            Phase::Driving => "driving",
            Phase::Controlled => "controlled",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "parked" => Ok(Phase::Parked),
            "driving" => Ok(Phase::Driving),
            "controlled" => Ok(Phase::Controlled),
            other => Err(Error::invalid(format!("unknown phase '{other}'"))),
        }
    }
}

/// Highest marker id in the 21-marker layout.
pub const MAX_MARKER_ID: u8 = 21;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriveRecord {
    pub driver_id: String,
    pub phase: Phase,
    pub frame_index: u64,
    pub head: HeadPose,
    pub target_gaze: GazeAngles,
    pub marker_id: Option<u8>,
}

impl DriveRecord {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.driver_id.is_empty() {
            return Err("empty driver_id".into());
        }
        if !self.head.is_finite() {
            return Err("non-finite head pose".into());
        }
        let g = self.target_gaze;
        if !g.is_finite() {
            return Err("non-finite gaze angle".into());
        }
        if g.phi.abs() > std::f64::consts::FRAC_PI_2 || g.theta.abs() > std::f64::consts::PI {
            return Err(format!("gaze angles out of range: ({}, {})", g.theta, g.phi));
        }
        if let Some(m) = self.marker_id {
            if !(1..=MAX_MARKER_ID).contains(&m) {
                return Err(format!("marker_id {m} outside 1..={MAX_MARKER_ID}"));
            }
        }
        Ok(())
    }
}

/// Which head-pose components feed the regressors.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMode {
    #[default]
    Full6d,
    Orientation3d,
    OrientationPlusXy,
}

impl FeatureMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            FeatureMode::Full6d => "full6d",
            FeatureMode::Orientation3d => "orientation3d",
            FeatureMode::OrientationPlusXy => "orientation_plus_xy",
        }
    }
}

impl fmt::Display for FeatureMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FeatureMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "full6d" | "full" => Ok(FeatureMode::Full6d),
            "orientation3d" | "orientation" => Ok(FeatureMode::Orientation3d),
            "orientation_plus_xy" | "orientation_xy" => Ok(FeatureMode::OrientationPlusXy),
            other => Err(Error::invalid(format!("unknown feature mode '{other}'"))),
        }
    }
}

/// Feature extraction. Features are laid out orientation first,
/// `[alpha, beta, gamma, x, y, z]`, so every reduced mode is a prefix of
/// the full vector.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FeatureConfig {
    pub mode: FeatureMode,
}

impl FeatureConfig {
    pub const fn new(mode: FeatureMode) -> Self {
        Self { mode }
    }

    pub fn dim(&self) -> usize {
        match self.mode {
            FeatureMode::Full6d => 6,
            FeatureMode::Orientation3d => 3,
            FeatureMode::OrientationPlusXy => 5,
        }
    }

    pub fn extract(&self, head: &HeadPose) -> Vec<f64> {
        let [a, b, g] = head.orientation;
        let [x, y, z] = head.position;
        let full = [a, b, g, x, y, z];
        full[..self.dim()].to_vec()
    }

    pub fn names(&self) -> &'static [&'static str] {
        &["alpha", "beta", "gamma", "x", "y", "z"][..self.dim()]
    }
}

/// One leave-one-driver-out fold.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub test_driver: String,
    pub validation_driver: String,
    pub train_drivers: Vec<String>,
}

/// One fold per driver: that driver is the test set, its cyclic successor is
/// the validation set, everyone else trains.
pub fn make_folds(drivers: &[String]) -> Result<Vec<FoldSplit>> {
    let unique: BTreeSet<&String> = drivers.iter().collect();
    if unique.len() != drivers.len() {
        return Err(Error::invalid("driver list contains duplicates"));
    }
    if drivers.len() < 3 {
        return Err(Error::invalid(format!(
            "leave-one-driver-out needs at least 3 drivers, got {}",
            drivers.len()
        )));
    }
    let n = drivers.len();
    Ok((0..n)
        .map(|i| {
            let val = (i + 1) % n;
            FoldSplit {
                test_driver: drivers[i].clone(),
                validation_driver: drivers[val].clone(),
                train_drivers: (0..n)
                    .filter(|&j| j != i && j != val)
                    .map(|j| drivers[j].clone())
                    .collect(),
            }
        })
        .collect())
}

/// Distinct driver ids in order of first appearance.
pub fn driver_ids(records: &[DriveRecord]) -> Vec<String> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for r in records {
        if seen.insert(r.driver_id.as_str()) {
            out.push(r.driver_id.clone());
        }
    }
    out
}

pub fn filter_phase(records: &[DriveRecord], phase: Phase) -> Vec<DriveRecord> {
    records.iter().filter(|r| r.phase == phase).cloned().collect()
}

pub fn records_for<'a>(records: &'a [DriveRecord], drivers: &[String]) -> Vec<&'a DriveRecord> {
    let set: BTreeSet<&str> = drivers.iter().map(String::as_str).collect();
    records
        .iter()
        .filter(|r| set.contains(r.driver_id.as_str()))
        .collect()
}

/// Re-expresses one driver's records relative to that driver's average head
/// pose: positions have the mean position subtracted and orientations are
/// left-multiplied by the inverse of the Slerp-mean rotation. Gaze targets are
/// vectors from the head to a fixed marker, so the common translation leaves
/// them unchanged.
///
/// The returned transform holds the applied pieces: orientations map as
/// `R -> rotation * R`, positions as `p -> p + translation`.
pub fn normalize_driver(records: &[DriveRecord]) -> Result<(Vec<DriveRecord>, RigidTransform)> {
    let first = records
        .first()
        .ok_or_else(|| Error::invalid("normalize_driver needs records"))?;
    if records.len() < 10 {
        return Err(Error::invalid(format!(
            "normalize_driver needs at least 10 records, got {}",
            records.len()
        )));
    }
    if let Some(other) = records.iter().find(|r| r.driver_id != first.driver_id) {
        return Err(Error::invalid(format!(
            "normalize_driver got mixed drivers '{}' and '{}'",
            first.driver_id, other.driver_id
        )));
    }
    let n = records.len() as f64;
    let mean_pos = records.iter().map(|r| Vec3::from(r.head.position)).sum::<Vec3>() / n;
    let quats: Vec<_> = records
        .iter()
        .map(|r| orientation_quaternion(r.head.orientation))
        .collect();
    let mean_rot = slerp_mean(&quats)?.to_matrix();
    let transform = RigidTransform {
        rotation: mean_rot.transpose(),
        translation: -mean_pos,
    };
    let out = records
        .iter()
        .map(|r| {
            let mut r = r.clone();
            let p = Vec3::from(r.head.position) + transform.translation;
            r.head.position = [p.x, p.y, p.z];
            let rot = transform.rotation * orientation_matrix(r.head.orientation);
            r.head.orientation = orientation_angles(&rot);
            r
        })
        .collect();
    Ok((out, transform))
}

/// Normalizes every driver independently, preserving record order.
pub fn normalize_all(records: &[DriveRecord]) -> Result<Vec<DriveRecord>> {
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        groups.entry(r.driver_id.as_str()).or_default().push(i);
    }
    let mut out: Vec<Option<DriveRecord>> = vec![None; records.len()];
    for idx in groups.values() {
        let group: Vec<DriveRecord> = idx.iter().map(|&i| records[i].clone()).collect();
        let (normed, _) = normalize_driver(&group)?;
        for (&i, r) in idx.iter().zip(normed) {
            out[i] = Some(r);
        }
    }
    Ok(out.into_iter().map(|r| r.expect("every index filled")).collect())
}

/// Uniform subsample of at most `cap` records, stratified by
/// `(driver, marker)`. Quotas are proportional to group size (largest
/// remainder); the selection keeps the original order.
pub fn stratified_subsample<'a>(records: &[&'a DriveRecord], cap: usize, seed: u64) -> Vec<&'a DriveRecord> {
    if records.len() <= cap {
        return records.to_vec();
    }
    let mut groups: BTreeMap<(&str, Option<u8>), Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        groups
            .entry((r.driver_id.as_str(), r.marker_id))
            .or_default()
            .push(i);
    }
    let total = records.len() as f64;
    let mut quotas: Vec<(usize, f64)> = groups
        .values()
        .map(|g| {
            let exact = cap as f64 * g.len() as f64 / total;
            (exact.floor() as usize, exact - exact.floor())
        })
        .collect();
    let assigned: usize = quotas.iter().map(|q| q.0).sum();
    let mut order: Vec<usize> = (0..quotas.len()).collect();
    order.sort_by(|&a, &b| quotas[b].1.total_cmp(&quotas[a].1).then(a.cmp(&b)));
    for &k in order.iter().take(cap.saturating_sub(assigned)) {
        quotas[k].0 += 1;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = Vec::with_capacity(cap);
    for (group, (quota, _)) in groups.values().zip(&quotas) {
        let mut idx = group.clone();
        idx.shuffle(&mut rng);
        keep.extend(idx.into_iter().take(*quota));
    }
    keep.sort_unstable();
    keep.into_iter().map(|i| records[i]).collect()
}

pub const COLUMNS: [&str; 12] = [
    "driver_id",
    "phase",
    "frame",
    "x",
    "y",
    "z",
    "alpha",
    "beta",
    "gamma",
    "theta",
    "phi",
    "marker_id",
];

/// Writes records as comma-separated text with a header row. Floats use the
/// shortest representation that parses back to the same bits.
pub fn write_records<W: Write>(out: W, records: &[DriveRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let to_io = |e: csv::Error| Error::Format(e.to_string());
    w.write_record(COLUMNS).map_err(to_io)?;
    for r in records {
        let [x, y, z] = r.head.position;
        let [a, b, g] = r.head.orientation;
        let row = [
            r.driver_id.clone(),
            r.phase.to_string(),
            r.frame_index.to_string(),
            x.to_string(),
            y.to_string(),
            z.to_string(),
            a.to_string(),
            b.to_string(),
            g.to_string(),
            r.target_gaze.theta.to_string(),
            r.target_gaze.phi.to_string(),
            r.marker_id.map(|m| m.to_string()).unwrap_or_default(),
        ];
        w.write_record(&row).map_err(to_io)?;
    }
    w.flush().map_err(|e| Error::Format(e.to_string()))?;
    Ok(())
}

pub fn read_records<R: Read>(input: R) -> Result<Vec<DriveRecord>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(input);
    let headers = rdr
        .headers()
        .map_err(|e| Error::Parse {
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    let mut col = [0usize; 12];
    for (k, name) in COLUMNS.iter().enumerate() {
        col[k] = headers
            .iter()
            .position(|h| h == *name)
            .ok_or_else(|| Error::Schema(format!("missing required column '{name}'")))?;
    }
    let mut out = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        let field = |k: usize| -> Result<&str> {
            row.get(col[k]).ok_or_else(|| Error::Parse {
                line,
                message: format!("missing field '{}'", COLUMNS[k]),
            })
        };
        let num = |k: usize| -> Result<f64> {
            let s = field(k)?;
            s.parse::<f64>().map_err(|_| Error::Parse {
                line,
                message: format!("column '{}': '{s}' is not a number", COLUMNS[k]),
            })
        };
        let phase = field(1)?.parse::<Phase>().map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        let frame_str = field(2)?;
        let frame_index = frame_str.parse::<u64>().map_err(|_| Error::Parse {
            line,
            message: format!("column 'frame': '{frame_str}' is not a non-negative integer"),
        })?;
        let marker_str = field(11)?;
        let marker_id = if marker_str.is_empty() {
            None
        } else {
            let m = marker_str.parse::<i64>().map_err(|_| Error::Parse {
                line,
                message: format!("column 'marker_id': '{marker_str}' is not an integer"),
            })?;
            if !(1..=MAX_MARKER_ID as i64).contains(&m) {
                return Err(Error::Validation {
                    line,
                    message: format!("marker_id {m} outside 1..={MAX_MARKER_ID}"),
                });
            }
            Some(m as u8)
        };
        let record = DriveRecord {
            driver_id: field(0)?.to_string(),
            phase,
            frame_index,
            head: HeadPose::new([num(3)?, num(4)?, num(5)?], [num(6)?, num(7)?, num(8)?]),
            target_gaze: GazeAngles::new(num(9)?, num(10)?),
            marker_id,
        };
        record
            .validate()
            .map_err(|message| Error::Validation { line, message })?;
        out.push(record);
    }
    Ok(out)
}

pub fn save(path: impl AsRef<Path>, records: &[DriveRecord]) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_records(std::io::BufWriter::new(file), records)
}

pub fn load(path: impl AsRef<Path>) -> Result<Vec<DriveRecord>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_records(std::io::BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{eigen_mean, Quaternion};

    fn record(driver: &str, frame: u64, pos: [f64; 3], ori: [f64; 3]) -> DriveRecord {
        DriveRecord {
            driver_id: driver.into(),
            phase: Phase::Driving,
            frame_index: frame,
            head: HeadPose::new(pos, ori),
            target_gaze: GazeAngles::new(0.1 * frame as f64 - 0.5, 0.05),
            marker_id: Some((frame % 21 + 1) as u8),
        }
    }

    fn spread(driver: &str, shift: [f64; 3], base: [f64; 3]) -> Vec<DriveRecord> {
        (0..12)
            .map(|i| {
                let t = i as f64;
                let off = [
                    0.01 * (t - 5.5),
                    0.02 * ((t * 1.3).sin()),
                    0.005 * (t * 0.7).cos(),
                ];
                let ori = [
                    base[0] + 0.05 * (t * 0.9).sin(),
                    base[1] + 0.04 * (t * 1.7).cos(),
                    base[2] + 0.02 * (t * 0.4).sin(),
                ];
                record(
                    driver,
                    i,
                    [shift[0] + off[0], shift[1] + off[1], shift[2] + off[2]],
                    ori,
                )
            })
            .collect()
    }

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("d{i:02}")).collect()
    }

    #[test]
    fn folds_sixteen_drivers() {
        let folds = make_folds(&names(16)).unwrap();
        assert_eq!(folds.len(), 16);
        for f in &folds {
            assert_eq!(f.train_drivers.len(), 14);
            assert_ne!(f.test_driver, f.validation_driver);
            assert!(!f.train_drivers.contains(&f.test_driver));
            assert!(!f.train_drivers.contains(&f.validation_driver));
        }
    }

    #[test]
    fn folds_minimum_and_errors() {
        let folds = make_folds(&names(3)).unwrap();
        assert_eq!(folds.len(), 3);
        assert!(folds.iter().all(|f| f.train_drivers.len() == 1));
        assert!(make_folds(&names(2)).is_err());
        assert!(make_folds(&["a".into(), "a".into(), "b".into()]).is_err());
    }

    #[test]
    fn normalize_centered_records_unchanged() {
        let recs = spread("a", [0.0; 3], [0.0; 3]);
        let (once, _) = normalize_driver(&recs).unwrap();
        let (twice, t) = normalize_driver(&once).unwrap();
        assert!(t.translation.norm() < 1e-9);
        for (a, b) in once.iter().zip(&twice) {
            for k in 0..3 {
                assert!((a.head.position[k] - b.head.position[k]).abs() < 1e-9);
                assert!((a.head.orientation[k] - b.head.orientation[k]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn normalize_is_translation_invariant() {
        let a = normalize_driver(&spread("a", [0.0; 3], [0.1, 0.0, 0.0]))
            .unwrap()
            .0;
        let b = normalize_driver(&spread("a", [1.0, 2.0, 3.0], [0.1, 0.0, 0.0]))
            .unwrap()
            .0;
        for (x, y) in a.iter().zip(&b) {
            for k in 0..3 {
                assert!((x.head.position[k] - y.head.position[k]).abs() < 1e-9);
                assert!((x.head.orientation[k] - y.head.orientation[k]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn normalize_removes_mean_rotation() {
        let recs = spread("a", [0.2, 0.0, 0.0], [0.0, 0.0, 0.0])
            .into_iter()
            .map(|mut r| {
                let m = Quaternion::rot_y(15f64.to_radians()).to_matrix()
                    * orientation_matrix(r.head.orientation);
                r.head.orientation = orientation_angles(&m);
                r
            })
            .collect::<Vec<_>>();
        let (normed, _) = normalize_driver(&recs).unwrap();
        let quats: Vec<_> = normed
            .iter()
            .map(|r| orientation_quaternion(r.head.orientation))
            .collect();
        let mean = slerp_mean(&quats).unwrap();
        assert!(mean.angle_to(&Quaternion::IDENTITY) < 1e-6);
        assert!(eigen_mean(&quats).unwrap().angle_to(&Quaternion::IDENTITY) < 1e-3);
        // gaze targets are untouched
        for (a, b) in recs.iter().zip(&normed) {
            assert_eq!(a.target_gaze, b.target_gaze);
        }
    }

    #[test]
    fn normalize_rejects_mixed_drivers() {
        let mut recs = spread("a", [0.0; 3], [0.0; 3]);
        recs[3].driver_id = "b".into();
        assert!(matches!(normalize_driver(&recs), Err(Error::InvalidArgument(_))));
        assert!(normalize_driver(&recs[..5]).is_err());
    }

    #[test]
    fn feature_modes_are_prefixes() {
        let h = HeadPose::new([1.0, 2.0, 3.0], [0.1, 0.2, 0.3]);
        let full = FeatureConfig::new(FeatureMode::Full6d).extract(&h);
        assert_eq!(full, vec![0.1, 0.2, 0.3, 1.0, 2.0, 3.0]);
        for mode in [FeatureMode::Orientation3d, FeatureMode::OrientationPlusXy] {
            let f = FeatureConfig::new(mode).extract(&h);
            assert_eq!(f.len(), FeatureConfig::new(mode).dim());
            assert_eq!(&full[..f.len()], &f[..]);
        }
    }

    #[test]
    fn csv_round_trip() {
        let mut recs = spread("drv-1", [0.1, 0.2, 0.3], [0.3, -0.1, 0.05]);
        recs[0].marker_id = None;
        recs[1].head.position[0] = 0.1 + 0.2;
        let mut buf = Vec::new();
        write_records(&mut buf, &recs).unwrap();
        let back = read_records(buf.as_slice()).unwrap();
        assert_eq!(back, recs);
    }

    #[test]
    fn csv_non_numeric_angle_names_line() {
        let text = "driver_id,phase,frame,x,y,z,alpha,beta,gamma,theta,phi,marker_id\n\
                    a,driving,0,0,0,0,0,0,0,0.1,0.2,3\n\
                    a,driving,1,0,0,0,0,0,0,abc,0.2,3\n";
        match read_records(text.as_bytes()) {
            Err(Error::Parse { line, message }) => {
                assert_eq!(line, 3);
                assert!(message.contains("theta"), "{message}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn csv_marker_out_of_range() {
        let text = "driver_id,phase,frame,x,y,z,alpha,beta,gamma,theta,phi,marker_id\n\
                    a,driving,0,0,0,0,0,0,0,0.1,0.2,22\n";
        assert!(matches!(
            read_records(text.as_bytes()),
            Err(Error::Validation { line: 2, .. })
        ));
    }

    #[test]
    fn csv_missing_column() {
        let text = "driver_id,phase,frame,x,y,z,alpha,beta,gamma,theta,marker_id\n";
        assert!(matches!(read_records(text.as_bytes()), Err(Error::Schema(_))));
    }

    #[test]
    fn stratified_subsample_respects_cap_and_groups() {
        let mut recs = Vec::new();
        for d in 0..4 {
            recs.extend(spread(&format!("d{d}"), [0.0; 3], [0.0; 3]));
        }
        for r in recs.iter_mut() {
            r.marker_id = Some((r.frame_index % 3 + 1) as u8);
        }
        let refs: Vec<&DriveRecord> = recs.iter().collect();
        let sub = stratified_subsample(&refs, 24, 1);
        assert_eq!(sub.len(), 24);
        let again = stratified_subsample(&refs, 24, 1);
        assert_eq!(sub, again);
        for d in 0..4 {
            for m in 1..=3u8 {
                let n = sub
                    .iter()
                    .filter(|r| r.driver_id == format!("d{d}") && r.marker_id == Some(m))
                    .count();
                assert_eq!(n, 2);
            }
        }
        assert_eq!(stratified_subsample(&refs, 23, 1).len(), 23);
        assert_eq!(stratified_subsample(&refs, 1000, 1).len(), recs.len());
    }
}
