//! JSON-configured experiment runner: builds the data and parameters, runs one
//! pipeline, and writes CSV/JSON artifacts plus a manifest with checksums.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adjoint::{risk_and_gradient, write_gradient_csv};
use crate::attention::{TokenCloud, Vector};
use crate::error::{Error, Result};
use crate::flow::{forward_trajectory_with, second_moment, write_trajectory_csv, DepthParameterization, Integrator, Sample};
use crate::injectivity::{
    check_pairwise_difference_condition, independence_sigma_min, series_independence_check, IndependenceMode,
    ProbeGrid, ProbeMeasure, DEFAULT_THRESHOLD,
};
use crate::ntk::{ntk_report, NtkOptions, DEFAULT_SIZE_GATE};
use crate::train::{init_parameterization, train, StopReason, TrainConfig};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const METRICS_FILE: &str = "metrics.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Forward,
    Train,
    Ntk,
    Injectivity,
    ConvergenceSweep,
}

fn default_one_f64() -> f64 {
    1.0
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitSpec {
    pub seed: u64,
    #[serde(default = "default_one_f64")]
    pub init_scale: f64,
    #[serde(default = "default_true")]
    pub fixup: bool,
    #[serde(default)]
    pub v_perturbation: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub init: InitSpec,
    #[serde(default)]
    pub integrator: Integrator,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InlineSample {
    pub cloud: Vec<Vec<f64>>,
    #[serde(default)]
    pub weights: Option<Vec<f64>>,
    pub input: Vec<f64>,
    /// Defaults to the initial output shifted by `target_offset`.
    #[serde(default)]
    pub target: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "generator", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetSpec {
    Inline {
        samples: Vec<InlineSample>,
        #[serde(default)]
        target_offset: f64,
        #[serde(default)]
        target_seed: u64,
    },
    GaussianIid {
        samples: usize,
        tokens: usize,
        seed: u64,
        #[serde(default = "default_one_f64")]
        scale: f64,
        #[serde(default)]
        target_offset: f64,
        /// Replace the last sample by a copy of the one before it.
        #[serde(default)]
        duplicate_last: bool,
    },
}

/// Optimization settings; initialization lives in [`InitSpec`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    pub eta: f64,
    pub steps: usize,
    #[serde(default)]
    pub v_clamp: Option<f64>,
    #[serde(default)]
    pub log_every: Option<usize>,
    #[serde(default)]
    pub track_lambda_min: bool,
    #[serde(default)]
    pub max_halvings: Option<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NtkSpec {
    #[serde(default)]
    pub full: bool,
    #[serde(default)]
    pub size_gate: Option<usize>,
    /// Dump every kernel entry to `ntk_matrices.csv`.
    #[serde(default = "default_true")]
    pub dump_matrices: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GridSpec {
    Gaussian {
        count: usize,
        scale: f64,
        seed: u64,
    },
    Points {
        points: Vec<Vec<f64>>,
    },
    Line {
        half_width: f64,
        count: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InjectivitySpec {
    pub measures: Vec<ProbeMeasure>,
    pub mode: IndependenceMode,
    /// Defaults to the seeded weak grid or the clipped strong line.
    #[serde(default)]
    pub grid: Option<GridSpec>,
    #[serde(default)]
    pub threshold: Option<f64>,
    #[serde(default)]
    pub grid_seed: u64,
    /// Run the power-series test with this many orders (strong mode only).
    #[serde(default)]
    pub series_terms: Option<usize>,
    /// Also run the pairwise-difference test on the discrete measures.
    #[serde(default)]
    pub pairwise: bool,
}

fn default_ratio() -> f64 {
    1e-6
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub init_scales: Vec<f64>,
    pub target_offsets: Vec<f64>,
    /// A cell counts as converged when final/initial loss is at most this.
    #[serde(default = "default_ratio")]
    pub convergence_ratio: f64,
}

/// Bounds on a named scalar metric; a violation exits with the check status.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Check {
    pub metric: String,
    #[serde(default)]
    pub min: Option<f64>,
    #[serde(default)]
    pub max: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default)]
    pub model: Option<ModelSpec>,
    #[serde(default)]
    pub dataset: Option<DatasetSpec>,
    #[serde(default)]
    pub train: Option<TrainSettings>,
    #[serde(default)]
    pub ntk: Option<NtkSpec>,
    #[serde(default)]
    pub injectivity: Option<InjectivitySpec>,
    #[serde(default)]
    pub sweep: Option<SweepSpec>,
    #[serde(default)]
    pub checks: Vec<Check>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

fn config_error(path: &str, message: impl Into<String>) -> Error {
    Error::Config {
        path: path.to_string(),
        message: message.into(),
    }
}

fn require<'a, T>(field: &'a Option<T>, path: &str, kind: ExperimentKind) -> Result<&'a T> {
    field
        .as_ref()
        .ok_or_else(|| config_error(path, format!("required for kind {kind:?}")))
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let config: Self = serde_path_to_error::deserialize(de).map_err(|e| Error::Config {
            path: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let kind = self.kind;
        let needs_model = kind != ExperimentKind::Injectivity;
        if needs_model {
            let m = require(&self.model, "model", kind)?;
            if m.dim == 0 {
                return Err(config_error("model.dim", "must be positive"));
            }
            if m.layers == 0 {
                return Err(config_error("model.layers", "must be positive"));
            }
            if m.heads == 0 {
                return Err(config_error("model.heads", "must be positive"));
            }
            if !(m.init.init_scale >= 0.0) || !(m.init.v_perturbation >= 0.0) {
                return Err(config_error("model.init", "scales must be nonnegative"));
            }
            match require(&self.dataset, "dataset", kind)? {
                DatasetSpec::Inline { samples, target_offset, .. } => {
                    if samples.is_empty() {
                        return Err(config_error("dataset.samples", "needs at least one sample"));
                    }
                    for (j, s) in samples.iter().enumerate() {
                        if s.input.len() != m.dim || s.cloud.iter().any(|p| p.len() != m.dim) {
                            return Err(config_error(&format!("dataset.samples[{j}]"), "dimension differs from model.dim"));
                        }
                        if s.target.as_ref().is_some_and(|t| t.len() != m.dim) {
                            return Err(config_error(&format!("dataset.samples[{j}].target"), "dimension differs from model.dim"));
                        }
                    }
                    if !target_offset.is_finite() {
                        return Err(config_error("dataset.target_offset", "must be finite"));
                    }
                }
                DatasetSpec::GaussianIid {
                    samples,
                    tokens,
                    scale,
                    target_offset,
                    duplicate_last,
                    ..
                } => {
                    if *samples == 0 || *tokens == 0 {
                        return Err(config_error("dataset", "samples and tokens must be positive"));
                    }
                    if *duplicate_last && *samples < 2 {
                        return Err(config_error("dataset.duplicate_last", "needs at least two samples"));
                    }
                    if !(*scale > 0.0) || !target_offset.is_finite() {
                        return Err(config_error("dataset.scale", "must be positive, offsets finite"));
                    }
                }
            }
        }
        match kind {
            ExperimentKind::Train | ExperimentKind::ConvergenceSweep => {
                let t = require(&self.train, "train", kind)?;
                self.train_config(t, self.model.as_ref().unwrap().init.init_scale)
                    .validate()
                    .map_err(|e| config_error("train", e.to_string()))?;
            }
            ExperimentKind::Injectivity => {
                let inj = require(&self.injectivity, "injectivity", kind)?;
                if inj.measures.is_empty() {
                    return Err(config_error("injectivity.measures", "needs at least one measure"));
                }
                for (j, m) in inj.measures.iter().enumerate() {
                    m.validate()
                        .map_err(|e| config_error(&format!("injectivity.measures[{j}]"), e.to_string()))?;
                }
            }
            _ => {}
        }
        if kind == ExperimentKind::ConvergenceSweep {
            let s = require(&self.sweep, "sweep", kind)?;
            if s.init_scales.is_empty() || s.target_offsets.is_empty() {
                return Err(config_error("sweep", "grid axes must be nonempty"));
            }
        }
        for (k, c) in self.checks.iter().enumerate() {
            if c.min.is_none() && c.max.is_none() {
                return Err(config_error(&format!("checks[{k}]"), "needs min or max"));
            }
        }
        Ok(())
    }

    fn train_config(&self, t: &TrainSettings, init_scale: f64) -> TrainConfig {
        let init = &self.model.as_ref().expect("validated").init;
        TrainConfig {
            eta: t.eta,
            steps: t.steps,
            fixup: init.fixup,
            init_scale,
            v_clamp: t.v_clamp,
            seed: init.seed,
            log_every: t.log_every.unwrap_or(1),
            v_perturbation: init.v_perturbation,
            track_lambda_min: t.track_lambda_min,
            max_halvings: t.max_halvings.unwrap_or(3),
        }
    }

    fn init_config(&self, init_scale: f64) -> TrainConfig {
        let init = &self.model.as_ref().expect("validated").init;
        let mut c = TrainConfig::new(1.0, 1);
        c.seed = init.seed;
        c.fixup = init.fixup;
        c.init_scale = init_scale;
        c.v_perturbation = init.v_perturbation;
        c
    }

    /// The seed that drives the main randomized component.
    pub fn primary_seed(&self) -> Option<u64> {
        self.model
            .as_ref()
            .map(|m| m.init.seed)
            .or_else(|| self.injectivity.as_ref().map(|i| i.grid_seed))
    }
}

fn gaussian_vector(rng: &mut ChaCha8Rng, dim: usize, scale: f64) -> Vector {
    Vector::from_fn(dim, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        scale * z
    })
}

fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vector {
    loop {
        let v = gaussian_vector(rng, dim, 1.0);
        let n = v.norm();
        if n > 1e-12 {
            return v / n;
        }
    }
}

/// Builds the dataset. Missing targets are the outputs of `rho0` shifted by
/// `target_offset` along a seeded unit direction per sample.
pub fn build_dataset(spec: &DatasetSpec, dim: usize, rho0: &DepthParameterization, integrator: Integrator) -> Result<Vec<Sample>> {
    let (raw, offset, mut rng): (Vec<(TokenCloud, Vector, Option<Vector>)>, f64, ChaCha8Rng) = match spec {
        DatasetSpec::Inline {
            samples,
            target_offset,
            target_seed,
        } => {
            let raw = samples
                .iter()
                .map(|s| {
                    let pts = s.cloud.iter().map(|p| Vector::from_column_slice(p)).collect();
                    let cloud = match &s.weights {
                        Some(w) => TokenCloud::new(pts, w.clone())?,
                        None => TokenCloud::uniform(pts)?,
                    };
                    Ok((cloud, Vector::from_column_slice(&s.input), s.target.as_ref().map(|t| Vector::from_column_slice(t))))
                })
                .collect::<Result<Vec<_>>>()?;
            (raw, *target_offset, ChaCha8Rng::seed_from_u64(*target_seed))
        }
        DatasetSpec::GaussianIid {
            samples,
            tokens,
            seed,
            scale,
            target_offset,
            duplicate_last,
        } => {
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            let mut raw = Vec::with_capacity(*samples);
            for _ in 0..*samples {
                let pts = (0..*tokens).map(|_| gaussian_vector(&mut rng, dim, *scale)).collect();
                let input = gaussian_vector(&mut rng, dim, *scale);
                raw.push((TokenCloud::uniform(pts)?, input, None));
            }
            if *duplicate_last {
                let n = raw.len();
                raw[n - 1] = raw[n - 2].clone();
            }
            (raw, *target_offset, rng)
        }
    };
    raw.into_iter()
        .map(|(cloud, input, target)| {
            let direction = unit_vector(&mut rng, dim);
            let target = match target {
                Some(t) => t,
                None => {
                    let probe = Sample::new(cloud.clone(), input.clone(), input.clone())?;
                    let out = forward_trajectory_with(rho0, &probe, integrator)?.output().clone();
                    out + direction * offset
                }
            };
            Sample::new(cloud, input, target)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub metric: String,
    pub value: Option<f64>,
    pub min: Option<f64>,
    pub max: Option<f64>,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub kind: ExperimentKind,
    pub name: Option<String>,
    pub version: String,
    pub seed: Option<u64>,
    pub started_unix: u64,
    pub wall_clock_seconds: f64,
    pub config: serde_json::Value,
    pub metrics: BTreeMap<String, f64>,
    pub checks: Vec<CheckOutcome>,
    pub files: Vec<FileEntry>,
}

impl RunManifest {
    pub fn checks_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RunOptions {
    /// Worker threads for sweeps; `0` uses the rayon default.
    pub workers: usize,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self { workers: 0 }
    }
}

/// Collects artifacts written to the output directory.
struct Outputs {
    dir: PathBuf,
    files: Vec<FileEntry>,
}

impl Outputs {
    fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    fn write(&mut self, name: &str, bytes: Vec<u8>) -> Result<()> {
        fs::write(self.dir.join(name), &bytes)?;
        self.files.push(FileEntry {
            path: name.to_string(),
            bytes: bytes.len() as u64,
            sha256: hex::encode(Sha256::digest(&bytes)),
        });
        Ok(())
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        self.write(name, bytes)
    }
}

struct Metrics(BTreeMap<String, f64>);

impl Metrics {
    fn new() -> Self {
        Self(BTreeMap::new())
    }

    fn set(&mut self, stage: &str, key: &str, value: f64) -> Result<()> {
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("{stage}: {key}")));
        }
        self.0.insert(key.to_string(), value);
        Ok(())
    }

    fn flag(&mut self, key: &str, value: bool) {
        self.0.insert(key.to_string(), if value { 1.0 } else { 0.0 });
    }
}

/// Runs one experiment into `out_dir`. Outputs other than the manifest are
/// byte-identical across runs with the same config. Numerical failures after
/// partial output return the error; failed checks return
/// [`Error::CheckFailed`] after the manifest is written.
pub fn run(config: &ExperimentConfig, out_dir: &Path, options: RunOptions) -> Result<RunManifest> {
    config.validate()?;
    let started = Instant::now();
    let started_unix = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    let mut out = Outputs::new(out_dir)?;
    let mut metrics = Metrics::new();
    info!("running {:?} into {}", config.kind, out_dir.display());
    let result = match config.kind {
        ExperimentKind::Forward => run_forward(config, &mut out, &mut metrics),
        ExperimentKind::Train => run_train(config, &mut out, &mut metrics),
        ExperimentKind::Ntk => run_ntk(config, &mut out, &mut metrics),
        ExperimentKind::Injectivity => run_injectivity(config, &mut out, &mut metrics),
        ExperimentKind::ConvergenceSweep => run_sweep(config, &mut out, &mut metrics, options),
    };
    result?;
    out.write_json(METRICS_FILE, &metrics.0)?;
    let checks: Vec<CheckOutcome> = config
        .checks
        .iter()
        .map(|c| {
            let value = metrics.0.get(&c.metric).copied();
            let passed = value.is_some_and(|v| c.min.is_none_or(|m| v >= m) && c.max.is_none_or(|m| v <= m));
            CheckOutcome {
                metric: c.metric.clone(),
                value,
                min: c.min,
                max: c.max,
                passed,
            }
        })
        .collect();
    let manifest = RunManifest {
        kind: config.kind,
        name: config.name.clone(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed: config.primary_seed(),
        started_unix,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
        config: serde_json::to_value(config)?,
        metrics: metrics.0,
        checks,
        files: out.files.clone(),
    };
    let mut bytes = serde_json::to_vec_pretty(&manifest)?;
    bytes.push(b'\n');
    fs::write(out_dir.join(MANIFEST_FILE), bytes)?;
    if !manifest.checks_passed() {
        let failed: Vec<&str> = manifest
            .checks
            .iter()
            .filter(|c| !c.passed)
            .map(|c| c.metric.as_str())
            .collect();
        return Err(Error::CheckFailed(failed.join(", ")));
    }
    Ok(manifest)
}

fn setup(config: &ExperimentConfig, init_scale: f64) -> Result<(DepthParameterization, Vec<Sample>)> {
    let m = config.model.as_ref().expect("validated");
    let rho = init_parameterization(m.layers, m.heads, m.dim, &config.init_config(init_scale))?;
    let data = build_dataset(config.dataset.as_ref().expect("validated"), m.dim, &rho, m.integrator)?;
    Ok((rho, data))
}

fn csv_bytes(f: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    Ok(buf)
}

fn run_forward(config: &ExperimentConfig, out: &mut Outputs, metrics: &mut Metrics) -> Result<()> {
    let m = config.model.as_ref().expect("validated");
    let (rho, data) = setup(config, m.init.init_scale)?;
    let trajs = data
        .iter()
        .map(|s| forward_trajectory_with(&rho, s, m.integrator))
        .collect::<Result<Vec<_>>>()?;
    out.write("trajectories.csv", csv_bytes(|b| write_trajectory_csv(b, &trajs))?)?;
    let loss = trajs
        .iter()
        .zip(&data)
        .map(|(t, s)| 0.5 * (t.output() - &s.target).norm_squared())
        .sum::<f64>()
        / data.len() as f64;
    let max_in = trajs.iter().map(|t| t.states[0].max_norm()).fold(0.0, f64::max);
    let max_out = trajs.iter().map(|t| t.terminal().max_norm()).fold(0.0, f64::max);
    let factor: f64 = rho
        .layers()
        .iter()
        .map(|layer| {
            let mean_op = layer.heads().iter().map(|h| h.value_op_norm()).sum::<f64>() / layer.len() as f64;
            1.0 + rho.step_size() * mean_op
        })
        .product();
    metrics.set("forward", "risk", loss)?;
    metrics.set("forward", "second_moment", second_moment(&rho))?;
    metrics.set("forward", "max_input_norm", max_in)?;
    metrics.set("forward", "max_output_norm", max_out)?;
    metrics.set("forward", "gronwall_bound", max_in * factor)?;
    Ok(())
}

fn run_train(config: &ExperimentConfig, out: &mut Outputs, metrics: &mut Metrics) -> Result<()> {
    let m = config.model.as_ref().expect("validated");
    let (rho, data) = setup(config, m.init.init_scale)?;
    let lambda0 = crate::ntk::lambda0(&rho, &data)?;
    metrics.set("train", "lambda0_init", lambda0)?;
    let tc = config.train_config(config.train.as_ref().expect("validated"), m.init.init_scale);
    let report = train(&rho, &data, &tc)?;
    out.write("train_trace.csv", csv_bytes(|b| report.write_csv(b))?)?;
    out.write_json("train_report.json", &report)?;
    let (_, field) = risk_and_gradient(&report.terminal, &data)?;
    out.write("gradient_final.csv", csv_bytes(|b| write_gradient_csv(b, &field))?)?;
    let initial = report.initial_loss();
    metrics.set("train", "initial_loss", initial)?;
    metrics.set("train", "final_loss", report.final_loss())?;
    metrics.set(
        "train",
        "final_loss_ratio",
        if initial > 0.0 { report.final_loss() / initial } else { 0.0 },
    )?;
    metrics.flag("monotone", report.is_monotone());
    metrics.set("train", "halvings", f64::from(report.halvings))?;
    metrics.set("train", "steps_taken", report.steps_taken as f64)?;
    metrics.set("train", "displacement", report.displacement)?;
    metrics.set("train", "path_length", report.path_length)?;
    if let Some(fit) = report.rate {
        metrics.set("train", "rate", fit.rate)?;
        metrics.set("train", "r_squared", fit.r_squared)?;
    }
    if report.stop == StopReason::Diverged {
        return Err(Error::Divergence {
            stage: format!("training step {}", report.steps_taken + 1),
        });
    }
    Ok(())
}

fn run_ntk(config: &ExperimentConfig, out: &mut Outputs, metrics: &mut Metrics) -> Result<()> {
    let m = config.model.as_ref().expect("validated");
    let spec = config.ntk.clone().unwrap_or(NtkSpec {
        full: false,
        size_gate: None,
        dump_matrices: true,
    });
    let (rho, data) = setup(config, m.init.init_scale)?;
    let options = NtkOptions {
        full: spec.full,
        size_gate: spec.size_gate.unwrap_or(DEFAULT_SIZE_GATE),
    };
    let report = ntk_report(&rho, &data, options)?;
    if spec.dump_matrices {
        let bytes = csv_bytes(|b| {
            let mut w = csv::Writer::from_writer(b);
            w.write_record(["kernel", "layer", "row", "col", "value"])?;
            for (l, layer) in report.layers.iter().enumerate() {
                let kernels = std::iter::once(("k1", &layer.k1)).chain(layer.full.iter().map(|k| ("k", k)));
                for (name, k) in kernels {
                    for i in 0..k.nrows() {
                        for j in 0..k.ncols() {
                            w.write_record(&[
                                name.to_string(),
                                l.to_string(),
                                i.to_string(),
                                j.to_string(),
                                crate::fmt_f64(k[(i, j)]),
                            ])?;
                        }
                    }
                }
            }
            w.flush()?;
            Ok(())
        })?;
        out.write("ntk_matrices.csv", bytes)?;
    }
    #[derive(Serialize)]
    struct LayerSummary {
        depth: f64,
        k1: crate::ntk::Spectrum,
        full: Option<crate::ntk::Spectrum>,
    }
    #[derive(Serialize)]
    struct Summary {
        lambda0: f64,
        lambda0_full: Option<f64>,
        layers: Vec<LayerSummary>,
    }
    let summary = Summary {
        lambda0: report.lambda0,
        lambda0_full: report.lambda0_full,
        layers: report
            .layers
            .iter()
            .map(|l| LayerSummary {
                depth: l.depth,
                k1: l.k1_spectrum,
                full: l.full_spectrum,
            })
            .collect(),
    };
    out.write_json("ntk_summary.json", &summary)?;
    metrics.set("ntk", "lambda0", report.lambda0)?;
    if let Some(v) = report.lambda0_full {
        metrics.set("ntk", "lambda0_full", v)?;
    }
    let lmax = report
        .layers
        .iter()
        .map(|l| l.k1_spectrum.lambda_max)
        .fold(0.0, f64::max);
    metrics.set("ntk", "lambda_max", lmax)?;
    Ok(())
}

fn run_injectivity(config: &ExperimentConfig, out: &mut Outputs, metrics: &mut Metrics) -> Result<()> {
    let spec = config.injectivity.as_ref().expect("validated");
    let grid = match (&spec.grid, &spec.mode) {
        (Some(GridSpec::Gaussian { count, scale, seed }), _) => {
            let limit = spec
                .measures
                .iter()
                .map(ProbeMeasure::domain_radius)
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .fold(f64::INFINITY, f64::min);
            ProbeGrid::gaussian(spec.measures[0].dim(), *count, *scale, limit, *seed)
        }
        (Some(GridSpec::Points { points }), _) => {
            ProbeGrid::Points(points.iter().map(|p| Vector::from_column_slice(p)).collect())
        }
        (Some(GridSpec::Line { half_width, count }), _) => ProbeGrid::line(*half_width, *count),
        (None, IndependenceMode::Weak) => ProbeGrid::weak_default(&spec.measures, spec.grid_seed)?,
        (None, IndependenceMode::Strong { direction }) => {
            ProbeGrid::strong_default(&spec.measures, &Vector::from_column_slice(direction))?
        }
    };
    let threshold = spec.threshold.unwrap_or(DEFAULT_THRESHOLD);
    let report = independence_sigma_min(&spec.measures, &spec.mode, &grid, threshold)?;
    metrics.set("injectivity", "sigma_min", report.sigma_min)?;
    metrics.flag("passed", report.passed);
    out.write_json("injectivity_report.json", &report)?;
    if let (Some(terms), IndependenceMode::Strong { direction }) = (spec.series_terms, &spec.mode) {
        let series = series_independence_check(&spec.measures, &Vector::from_column_slice(direction), terms)?;
        metrics.flag("series_passed", series.passed);
        out.write_json("series_report.json", &series)?;
    }
    if spec.pairwise {
        let clouds = spec
            .measures
            .iter()
            .filter_map(|m| match m {
                ProbeMeasure::Discrete { points, weights } => Some((points, weights)),
                _ => None,
            })
            .map(|(points, weights)| {
                let pts = points.iter().map(|p| Vector::from_column_slice(p)).collect();
                match weights {
                    Some(w) => TokenCloud::new(pts, w.clone()),
                    None => TokenCloud::uniform(pts),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let pairwise = check_pairwise_difference_condition(&clouds, None)?;
        metrics.set("injectivity", "pairwise_gap", pairwise.min_gap)?;
        metrics.flag("pairwise_passed", pairwise.passed);
        out.write_json("pairwise_report.json", &pairwise)?;
    }
    Ok(())
}

/// One cell of the convergence sweep.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepCell {
    pub init_scale: f64,
    pub target_offset: f64,
    pub lambda0: Option<f64>,
    pub initial_loss: Option<f64>,
    pub final_loss: Option<f64>,
    pub rate: Option<f64>,
    pub r_squared: Option<f64>,
    pub converged: bool,
    pub error: Option<String>,
}

fn with_offset(spec: &DatasetSpec, offset: f64) -> DatasetSpec {
    let mut s = spec.clone();
    match &mut s {
        DatasetSpec::Inline { target_offset, .. } | DatasetSpec::GaussianIid { target_offset, .. } => {
            *target_offset = offset;
        }
    }
    s
}

fn sweep_cell(config: &ExperimentConfig, init_scale: f64, offset: f64, ratio: f64) -> Result<SweepCell> {
    let mut cell_config = config.clone();
    cell_config.dataset = Some(with_offset(config.dataset.as_ref().expect("validated"), offset));
    let (rho, data) = setup(&cell_config, init_scale)?;
    let lambda0 = crate::ntk::lambda0(&rho, &data)?;
    let tc = config.train_config(config.train.as_ref().expect("validated"), init_scale);
    let report = train(&rho, &data, &tc)?;
    let initial = report.initial_loss();
    let last = report.final_loss();
    Ok(SweepCell {
        init_scale,
        target_offset: offset,
        lambda0: Some(lambda0),
        initial_loss: Some(initial),
        final_loss: Some(last),
        rate: report.rate.map(|f| f.rate),
        r_squared: report.rate.map(|f| f.r_squared),
        converged: report.stop != StopReason::Diverged && (initial == 0.0 || last <= ratio * initial),
        error: None,
    })
}

/// Trains every `(init_scale, target_offset)` cell, in parallel up to the
/// worker count; a failing cell is recorded and does not stop the sweep.
pub fn convergence_sweep(config: &ExperimentConfig, options: RunOptions) -> Result<Vec<SweepCell>> {
    config.validate()?;
    let sweep = require(&config.sweep, "sweep", config.kind)?;
    let cells: Vec<(f64, f64)> = sweep
        .init_scales
        .iter()
        .flat_map(|&a| sweep.target_offsets.iter().map(move |&b| (a, b)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(options.workers)
        .build()
        .map_err(|e| Error::Invalid(format!("thread pool: {e}")))?;
    Ok(pool.install(|| {
        cells
            .par_iter()
            .map(|&(a, b)| {
                sweep_cell(config, a, b, sweep.convergence_ratio).unwrap_or_else(|e| SweepCell {
                    init_scale: a,
                    target_offset: b,
                    lambda0: None,
                    initial_loss: None,
                    final_loss: None,
                    rate: None,
                    r_squared: None,
                    converged: false,
                    error: Some(e.to_string()),
                })
            })
            .collect()
    }))
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), crate::fmt_f64)
}

fn run_sweep(config: &ExperimentConfig, out: &mut Outputs, metrics: &mut Metrics, options: RunOptions) -> Result<()> {
    let cells = convergence_sweep(config, options)?;
    let bytes = csv_bytes(|b| {
        let mut w = csv::Writer::from_writer(b);
        w.write_record([
            "init_scale",
            "target_offset",
            "lambda0",
            "initial_loss",
            "final_loss",
            "rate",
            "r_squared",
            "converged",
            "error",
        ])?;
        for c in &cells {
            w.write_record(&[
                crate::fmt_f64(c.init_scale),
                crate::fmt_f64(c.target_offset),
                opt(c.lambda0),
                opt(c.initial_loss),
                opt(c.final_loss),
                opt(c.rate),
                opt(c.r_squared),
                c.converged.to_string(),
                c.error.clone().unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        Ok(())
    })?;
    out.write("sweep.csv", bytes)?;
    metrics.set("sweep", "cells", cells.len() as f64)?;
    metrics.set("sweep", "converged_cells", cells.iter().filter(|c| c.converged).count() as f64)?;
    metrics.set("sweep", "failed_cells", cells.iter().filter(|c| c.error.is_some()).count() as f64)?;
    Ok(())
}
