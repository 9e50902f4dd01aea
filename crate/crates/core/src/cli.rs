//! Command-line front end: `synth`, `train`, `eval`, `curves` and `project`.
//!
//! Every command writes its artifacts under the output directory together
//! with a `manifest.json` holding the resolved command, the seed and SHA-256
//! hashes of inputs and outputs. `--replay <manifest>` re-runs a recorded
//! command and fails if any output differs.
//!
//! Exit codes: 0 on success, 1 on usage errors, 2 on runtime failures. Runtime
//! failures print one line, `error[<kind>]: <message>`, to stderr.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{
    self, driver_ids, filter_phase, make_folds, DriveRecord, FeatureConfig, FeatureMode, Phase, SynthSpec,
    SyntheticWorld,
};
use crate::error::{Error, Result};
use crate::evaluate::report::{
    accuracy_table, area_table, calibration_csv, curve_csv, predictions_csv, read_predictions,
};
use crate::evaluate::{
    confidence_grid, evaluate_folds, prepare, train_folds, ExperimentConfig, ExperimentReport, ModelKind,
    ModelSpec, Summary, TrainedModel,
};
use crate::geometry::{fit_plane, Vec3};
use crate::gpr::MeanKind;
use crate::project::{
    default_depths, encode_contours, encode_pgm, mass_contour, mean_gaze_hit, road_density,
    windshield_density, CameraMapping, PlaneGrid,
};
use crate::types::GazePredictor;

pub const MODEL_FORMAT: &str = "salient-gaze-model";
pub const MODEL_FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Parser, Debug)]
#[command(
    name = "salient-gaze",
    version,
    about = "Probabilistic driver gaze regions from head pose"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Option<Command>,

    /// Re-run the command recorded in a manifest and verify its outputs.
    #[arg(long, value_name = "MANIFEST")]
    pub replay: Option<PathBuf>,

    /// Output directory [default: ./out, or the manifest's directory with --replay].
    #[arg(short, long, global = true, env = "SALIENT_GAZE_OUT")]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand, Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    /// Generate a synthetic recording set with known gaze distributions.
    Synth(SynthArgs),
    /// Fit one model per leave-one-driver-out fold.
    Train(TrainArgs),
    /// Score per-fold models on their held-out drivers.
    Eval(EvalArgs),
    /// Build comparison tables and curves from prediction files.
    Curves(CurvesArgs),
    /// Render windshield and road heat maps for one record.
    Project(ProjectArgs),
}

impl Command {
    fn seed(&self) -> Option<u64> {
        match self {
            Command::Synth(a) => Some(a.seed),
            Command::Train(a) => Some(a.model.seed),
            Command::Eval(a) => Some(a.model.seed),
            Command::Curves(_) | Command::Project(_) => None,
        }
    }
}

#[derive(Args, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthArgs {
    /// Number of simulated drivers.
    #[arg(long)]
    pub drivers: Option<usize>,
    /// Frames recorded per marker and driver.
    #[arg(long)]
    pub frames: Option<usize>,
    /// Random seed of the generator.
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Generate only this phase.
    #[arg(long)]
    pub phase: Option<Phase>,
    /// Generator parameter override, e.g. `--set sigma1=0.05`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Args, Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelArgs {
    /// lr, nn, mdn, gpr-zero, gpr-const, gpr-linear or gpr-nn [default: gpr-linear]
    #[arg(long)]
    pub model: Option<ModelKind>,
    /// Per-dimension kernel length scales (GPR only).
    #[arg(long)]
    pub ard: bool,
    /// full6d, orientation3d or orientation_plus_xy [default: full6d]
    #[arg(long)]
    pub features: Option<FeatureMode>,
    /// Keep only records of this phase.
    #[arg(long)]
    pub phase: Option<Phase>,
    /// Seed for subsampling, initialization and optimizer restarts.
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Rows a GPR is conditioned on.
    #[arg(long, default_value_t = 2000)]
    pub gpr_cap: usize,
    /// Training epochs for networks.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Skip per-driver head-pose normalization.
    #[arg(long)]
    pub no_normalize: bool,
    /// Folds trained or scored in parallel.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

impl ModelArgs {
    fn kind(&self) -> ModelKind {
        self.model.unwrap_or(ModelKind::Gpr(MeanKind::Linear))
    }

    fn features(&self) -> FeatureMode {
        self.features.unwrap_or_default()
    }

    fn spec(&self) -> Result<ModelSpec> {
        let mut spec = ModelSpec::new(self.kind()).with_ard(self.ard);
        spec.gpr.train_cap = self.gpr_cap;
        if let Some(epochs) = self.epochs {
            spec.network.max_epochs = epochs;
        }
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Args, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainArgs {
    /// Recording CSV.
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Args, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalArgs {
    /// Recording CSV.
    #[arg(long)]
    pub data: PathBuf,
    /// Directory of per-fold model files from `train`; trains in-process when absent.
    #[arg(long)]
    pub models: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Args, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvesArgs {
    /// Prediction files written by `eval`, one per model.
    #[arg(long, required = true, num_args = 1..)]
    pub predictions: Vec<PathBuf>,
}

#[derive(Args, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectArgs {
    /// A per-fold model file written by `train`.
    #[arg(long)]
    pub model: PathBuf,
    /// Recording CSV holding the record.
    #[arg(long)]
    pub data: PathBuf,
    /// Record row, as in the `index` column of a predictions file.
    #[arg(long)]
    pub index: usize,
    /// Windshield grid cells per side.
    #[arg(long, default_value_t = 512)]
    pub grid: usize,
    /// Half side of the windshield window around the mean gaze (meters).
    #[arg(long, default_value_t = 0.25)]
    pub half_extent: f64,
    /// Road image width (pixels).
    #[arg(long, default_value_t = 640)]
    pub width: usize,
    /// Road image height (pixels).
    #[arg(long, default_value_t = 360)]
    pub height: usize,
    /// Road-camera focal length (pixels).
    #[arg(long, default_value_t = 500.0)]
    pub focal: f64,
    /// Road-camera position relative to the head frame (meters).
    #[arg(long, value_delimiter = ',', num_args = 3, default_values_t = [0.0, 0.1, 0.6])]
    pub camera: Vec<f64>,
    /// Depth planes averaged into the road map [default: 10,20,...,200].
    #[arg(long, value_delimiter = ',')]
    pub depths: Option<Vec<f64>>,
    /// Mass level of the road-map contour.
    #[arg(long, default_value_t = 0.5)]
    pub level: f64,
    /// Convert angular density to density per unit area.
    #[arg(long)]
    pub jacobian: bool,
}

/// A per-fold model with the metadata needed to evaluate or project it.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelFile {
    pub format: String,
    pub version: u32,
    pub kind: ModelKind,
    pub ard: bool,
    pub label: String,
    pub features: FeatureMode,
    pub phase: Option<Phase>,
    pub normalize: bool,
    pub seed: u64,
    pub fold: usize,
    pub test_driver: String,
    pub validation_driver: String,
    pub model: TrainedModel,
}

impl ModelFile {
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
        if value.get("format").and_then(|v| v.as_str()) != Some(MODEL_FORMAT) {
            return Err(Error::Format(format!("not a {MODEL_FORMAT} file")));
        }
        match value.get("version").and_then(|v| v.as_u64()) {
            Some(v) if v == u64::from(MODEL_FORMAT_VERSION) => {}
            other => {
                return Err(Error::Format(format!(
                    "unsupported model version {other:?} (expected {MODEL_FORMAT_VERSION})"
                )))
            }
        }
        serde_json::from_value(value).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// Record of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: Command,
    pub seed: Option<u64>,
    /// Input path as given -> SHA-256.
    pub inputs: BTreeMap<String, String>,
    /// Output path relative to the output directory -> SHA-256.
    pub outputs: BTreeMap<String, String>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

struct Outputs {
    root: PathBuf,
    inputs: BTreeMap<String, String>,
    files: BTreeMap<String, String>,
}

impl Outputs {
    fn new(root: &Path) -> Result<Self> {
        std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        Ok(Self {
            root: root.to_path_buf(),
            inputs: BTreeMap::new(),
            files: BTreeMap::new(),
        })
    }

    fn read_input(&mut self, path: &Path) -> Result<Vec<u8>> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        self.inputs.insert(path.display().to_string(), sha256_hex(&bytes));
        Ok(bytes)
    }

    fn write(&mut self, relative: &str, bytes: &[u8]) -> Result<()> {
        let path = self.root.join(relative);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        self.files.insert(relative.to_string(), sha256_hex(bytes));
        Ok(())
    }

    fn finish(mut self, command: &Command) -> Result<Manifest> {
        let manifest = Manifest {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.clone(),
            seed: command.seed(),
            inputs: std::mem::take(&mut self.inputs),
            outputs: std::mem::take(&mut self.files),
        };
        let mut text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Format(e.to_string()))?;
        text.push('\n');
        let path = self.root.join(MANIFEST_FILE);
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(manifest)
    }
}

fn require_file(path: &Path, what: &str) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::Usage(format!(
            "{what} '{}' does not exist",
            path.display()
        )))
    }
}

fn parse_records(bytes: &[u8], phase: Option<Phase>) -> Result<Vec<DriveRecord>> {
    let records = dataset::read_records(bytes)?;
    Ok(match phase {
        Some(p) => filter_phase(&records, p),
        None => records,
    })
}

fn synth(args: &SynthArgs, out: &mut Outputs) -> CliResult<()> {
    let mut spec = SynthSpec::default();
    if let Some(d) = args.drivers {
        spec.drivers = d;
    }
    if let Some(f) = args.frames {
        spec.frames_per_marker = f;
    }
    if let Some(p) = args.phase {
        spec.phase = p;
    }
    for kv in &args.overrides {
        let (key, value) = kv
            .split_once('=')
            .ok_or_else(|| Failure::Usage(format!("--set expects KEY=VALUE, got '{kv}'")))?;
        spec.set(key.trim(), value.trim())
            .map_err(|e| Failure::Usage(e.to_string()))?;
    }
    spec.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let records = SyntheticWorld::new(spec.clone(), args.seed)?.generate();
    let mut csv = Vec::new();
    dataset::write_records(&mut csv, &records)?;
    out.write("dataset.csv", &csv)?;
    out.write("synth.txt", spec.to_kv().as_bytes())?;
    Ok(())
}

fn model_file_name(fold: usize) -> String {
    format!("models/fold-{fold:02}.json")
}

fn train(args: &TrainArgs, out: &mut Outputs) -> CliResult<()> {
    require_file(&args.data, "dataset")?;
    let m = &args.model;
    let spec = m.spec().map_err(|e| Failure::Usage(e.to_string()))?;
    let bytes = out.read_input(&args.data)?;
    let records = prepare(&parse_records(&bytes, m.phase)?, !m.no_normalize)?;
    let folds = make_folds(&driver_ids(&records))?;
    let features = FeatureConfig::new(m.features());
    let models = train_folds(&records, &folds, &spec, features, m.seed, m.jobs)?;
    for (i, (model, split)) in models.into_iter().zip(&folds).enumerate() {
        let file = ModelFile {
            format: MODEL_FORMAT.into(),
            version: MODEL_FORMAT_VERSION,
            kind: spec.kind,
            ard: spec.ard,
            label: spec.label(),
            features: features.mode,
            phase: m.phase,
            normalize: !m.no_normalize,
            seed: m.seed,
            fold: i,
            test_driver: split.test_driver.clone(),
            validation_driver: split.validation_driver.clone(),
            model,
        };
        let mut text = serde_json::to_string(&file).map_err(|e| Error::Format(e.to_string()))?;
        text.push('\n');
        out.write(&model_file_name(i), text.as_bytes())?;
    }
    Ok(())
}

fn check_matches<T: PartialEq + std::fmt::Display>(flag: &str, given: Option<T>, stored: T) -> CliResult<()> {
    match given {
        Some(g) if g != stored => Err(Failure::Usage(format!(
            "--{flag} {g} conflicts with the loaded models ({stored})"
        ))),
        _ => Ok(()),
    }
}

fn eval(args: &EvalArgs, out: &mut Outputs) -> CliResult<()> {
    require_file(&args.data, "dataset")?;
    let m = &args.model;
    let bytes = out.read_input(&args.data)?;
    let (report, label, features) = match &args.models {
        Some(dir) => {
            if !dir.is_dir() {
                return Err(Failure::Usage(format!(
                    "model directory '{}' does not exist",
                    dir.display()
                )));
            }
            let mut files = Vec::new();
            for fold in 0.. {
                let path = dir.join(format!("fold-{fold:02}.json"));
                if !path.is_file() {
                    break;
                }
                let bytes = out.read_input(&path)?;
                let text = String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))?;
                files.push(ModelFile::from_json(&text)?);
            }
            let first = files
                .first()
                .ok_or_else(|| Failure::Usage(format!("no fold-NN.json files in '{}'", dir.display())))?
                .clone();
            check_matches("model", m.model, first.kind)?;
            check_matches("features", m.features, first.features)?;
            if m.ard && !first.ard {
                return Err(Failure::Usage("--ard conflicts with the loaded models".into()));
            }
            let records = prepare(&parse_records(&bytes, first.phase)?, first.normalize)?;
            let folds = make_folds(&driver_ids(&records))?;
            if files.len() != folds.len() {
                return Err(
                    Error::Schema(format!("{} model files for {} folds", files.len(), folds.len())).into(),
                );
            }
            for (f, split) in files.iter().zip(&folds) {
                if f.test_driver != split.test_driver
                    || f.label != first.label
                    || f.features != first.features
                {
                    return Err(Error::Schema(format!(
                        "model file for fold {} does not match the dataset",
                        f.fold
                    ))
                    .into());
                }
            }
            let spec = ModelSpec::new(first.kind).with_ard(first.ard);
            let mut config = ExperimentConfig::new(spec, FeatureConfig::new(first.features), first.seed);
            config.jobs = m.jobs;
            let models: Vec<TrainedModel> = files.into_iter().map(|f| f.model).collect();
            let report = evaluate_folds(&records, &folds, &models, &config)?;
            (report, first.label, first.features)
        }
        None => {
            let spec = m.spec().map_err(|e| Failure::Usage(e.to_string()))?;
            let records = prepare(&parse_records(&bytes, m.phase)?, !m.no_normalize)?;
            let folds = make_folds(&driver_ids(&records))?;
            let features = FeatureConfig::new(m.features());
            let mut config = ExperimentConfig::new(spec.clone(), features, m.seed);
            config.jobs = m.jobs;
            let models = train_folds(&records, &folds, &spec, features, m.seed, m.jobs)?;
            let report = evaluate_folds(&records, &folds, &models, &config)?;
            (report, spec.label(), features.mode)
        }
    };
    write_report(&report, &label, features, out)?;
    Ok(())
}

fn write_report(
    report: &ExperimentReport,
    label: &str,
    features: FeatureMode,
    out: &mut Outputs,
) -> Result<()> {
    out.write(
        "predictions.csv",
        predictions_csv(label, features, &report.predictions)?.as_bytes(),
    )?;
    out.write("curve.csv", curve_csv(&report.pooled.curve)?.as_bytes())?;
    out.write(
        "calibration.csv",
        calibration_csv(&report.pooled.calibration)?.as_bytes(),
    )?;
    let row = [(label.to_string(), features, &report.pooled)];
    out.write("table_area.csv", area_table(&row)?.as_bytes())?;
    out.write("table_accuracy.csv", accuracy_table(&row)?.as_bytes())?;
    let mut folds =
        String::from("fold,test_driver,validation_driver,count,area_pct_at_95,calibration_deviation\n");
    for f in &report.folds {
        let area = f.summary.area_for(0.95).map_or_else(
            || crate::evaluate::report::OUT_OF_RANGE.to_string(),
            |a| format!("{:.4}", 100.0 * a),
        );
        let _ = writeln!(
            folds,
            "{},{},{},{},{area},{:.6}",
            f.fold, f.test_driver, f.validation_driver, f.summary.count, f.summary.calibration.deviation
        );
    }
    out.write("folds.csv", folds.as_bytes())
}

/// File-name-safe form of a model label and feature mode.
fn slug(label: &str, features: FeatureMode) -> String {
    let base: String = label
        .to_ascii_lowercase()
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '-' })
        .collect();
    format!("{base}_{features}")
}

fn curves(args: &CurvesArgs, out: &mut Outputs) -> CliResult<()> {
    for p in &args.predictions {
        require_file(p, "predictions file")?;
    }
    let grid = confidence_grid();
    let mut rows = Vec::new();
    for p in &args.predictions {
        let bytes = out.read_input(p)?;
        let text = String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))?;
        let set = read_predictions(&text)?;
        let pairs: Vec<_> = set.predictions.iter().map(|p| (p.dist, p.truth)).collect();
        let summary = Summary::of(&pairs, &grid, 100)?;
        let name = slug(&set.model, set.features);
        out.write(
            &format!("curves/{name}.csv"),
            curve_csv(&summary.curve)?.as_bytes(),
        )?;
        out.write(
            &format!("calibration/{name}.csv"),
            calibration_csv(&summary.calibration)?.as_bytes(),
        )?;
        rows.push((set.model, set.features, summary));
    }
    let table: Vec<_> = rows.iter().map(|(m, f, s)| (m.clone(), *f, s)).collect();
    out.write("table_area.csv", area_table(&table)?.as_bytes())?;
    out.write("table_accuracy.csv", accuracy_table(&table)?.as_bytes())?;
    Ok(())
}

fn project(args: &ProjectArgs, out: &mut Outputs) -> CliResult<()> {
    require_file(&args.model, "model file")?;
    require_file(&args.data, "dataset")?;
    if args.grid == 0 || args.width == 0 || args.height == 0 {
        return Err(Failure::Usage("grid and image sizes must be positive".into()));
    }
    if !(args.level > 0.0 && args.level < 1.0) {
        return Err(Failure::Usage("--level must lie in (0, 1)".into()));
    }
    let model_bytes = out.read_input(&args.model)?;
    let text = String::from_utf8(model_bytes).map_err(|e| Error::Format(e.to_string()))?;
    let file = ModelFile::from_json(&text)?;
    let bytes = out.read_input(&args.data)?;
    let records = prepare(&parse_records(&bytes, file.phase)?, file.normalize)?;
    let record = records.get(args.index).ok_or_else(|| {
        Error::invalid(format!(
            "record index {} out of range ({} records)",
            args.index,
            records.len()
        ))
    })?;
    let dist = file.model.predict_gaze(&record.head)?;

    let plane = fit_plane(&dataset::windshield_markers())?.plane;
    let center = mean_gaze_hit(&dist, &record.head, &plane)?;
    let grid = PlaneGrid::new(plane, center, [args.half_extent; 2], args.grid, args.grid)?;
    let wind = windshield_density(&dist, &record.head, &grid, args.jacobian)?;
    out.write("windshield.pgm", &encode_pgm(&wind.map)?)?;
    if let Some(c) = &wind.contour {
        out.write(
            "windshield.poly",
            encode_contours(std::slice::from_ref(c)).as_bytes(),
        )?;
    }

    let camera = CameraMapping::forward(
        Vec3::new(args.camera[0], args.camera[1], args.camera[2]),
        args.focal,
        args.width,
        args.height,
    )?;
    let depths = args.depths.clone().unwrap_or_else(default_depths);
    let road = road_density(&dist, &record.head, &camera, &depths, args.jacobian)?;
    out.write("road.pgm", &encode_pgm(&road)?)?;
    let contour = mass_contour(&road, args.level)?;
    out.write("road.poly", encode_contours(&[contour]).as_bytes())?;

    let summary = serde_json::json!({
        "model": file.label,
        "features": file.features,
        "index": args.index,
        "driver_id": record.driver_id,
        "head": record.head,
        "truth": record.target_gaze,
        "prediction": dist,
        "windshield_center": [center.x, center.y, center.z],
        "depths": road.depths,
    });
    let mut text = serde_json::to_string_pretty(&summary).map_err(|e| Error::Format(e.to_string()))?;
    text.push('\n');
    out.write("projection.json", text.as_bytes())?;
    Ok(())
}

/// Runs `command` writing under `out_dir` and returns the manifest written.
pub fn execute(command: &Command, out_dir: &Path) -> CliResult<Manifest> {
    let mut out = Outputs::new(out_dir)?;
    match command {
        Command::Synth(a) => synth(a, &mut out)?,
        Command::Train(a) => train(a, &mut out)?,
        Command::Eval(a) => eval(a, &mut out)?,
        Command::Curves(a) => curves(a, &mut out)?,
        Command::Project(a) => project(a, &mut out)?,
    }
    Ok(out.finish(command)?)
}

/// Re-runs a recorded command; fails if inputs or outputs differ from the record.
pub fn replay(manifest_path: &Path, out_dir: Option<&Path>) -> CliResult<Manifest> {
    require_file(manifest_path, "manifest")?;
    let recorded = Manifest::load(manifest_path)?;
    for (path, hash) in &recorded.inputs {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        if sha256_hex(&bytes) != *hash {
            return Err(Error::Validation {
                line: 0,
                message: format!("input '{path}' changed since the recorded run"),
            }
            .into());
        }
    }
    let default_dir = manifest_path.parent().unwrap_or(Path::new("."));
    let manifest = execute(&recorded.command, out_dir.unwrap_or(default_dir))?;
    if manifest.outputs != recorded.outputs {
        let differing: Vec<_> = recorded
            .outputs
            .iter()
            .filter(|(k, v)| manifest.outputs.get(*k) != Some(*v))
            .map(|(k, _)| k.as_str())
            .collect();
        return Err(Error::Validation {
            line: 0,
            message: format!("replay produced different outputs: {}", differing.join(", ")),
        }
        .into());
    }
    Ok(manifest)
}

fn single_line(e: &Error) -> String {
    e.to_string().split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Parses `argv`, runs the command and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let result = match (&cli.command, &cli.replay) {
        (Some(_), Some(_)) => Err(Failure::Usage(
            "--replay cannot be combined with a subcommand".into(),
        )),
        (None, Some(manifest)) => replay(manifest, cli.out.as_deref()),
        (Some(command), None) => execute(command, cli.out.as_deref().unwrap_or(Path::new("out"))),
        (None, None) => Err(Failure::Usage("a subcommand or --replay is required".into())),
    };
    match result {
        Ok(manifest) => {
            for path in manifest.outputs.keys() {
                println!("{path}");
            }
            0
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}\n\n{}", Cli::command().render_usage());
            1
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error[{}]: {}", e.kind(), single_line(&e));
            2
        }
    }
}
