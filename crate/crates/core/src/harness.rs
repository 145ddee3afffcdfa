//! Experiment plumbing: TOML configuration, artifact files, the distribution
//! roster and the benchmark that compares both controllers.
//!
//! Every text artifact starts with a `# config_hash=<hex> seed=<n>` line.
//! Wall-clock measurements only go to `timings.csv` so that all other outputs
//! are byte-identical for identical configurations.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baseline::{
    random_policy_transitions, run_blackbox_episode, train_blackbox, BaselineConfig, BaselineReport, BlackboxModel,
    TransitionRecord,
};
use crate::calibration::{calibrate_box, CalibrationConfig, CalibrationData, Channel, ControlForceMap};
use crate::controller::{run_episode, ControllerConfig, EpisodeResult, Outcome};
use crate::error::{Error, Result};
use crate::estimator::{
    derive_seed, generate_dataset, train, Dataset, DatasetConfig, EstimatorModel, TrainingConfig, TrainingReport,
};
use crate::massmodel::{
    iou, sample_gaussian_distribution, sample_slab_distribution, GridDims, HazardVolume, MassDistribution, MASS_FLOOR,
};
use crate::sim::{BeltConfig, Goal, Pose2, Simulator};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MassModelConfig {
    /// Voxels along length, width and height.
    pub grid: [usize; 3],
    /// Box length, width and height (m).
    pub box_dims: [f64; 3],
    /// Total-mass interval for random distributions (kg).
    pub mass_range: (f64, f64),
}

impl Default for MassModelConfig {
    fn default() -> Self {
        Self {
            grid: [10, 8, 4],
            box_dims: [0.40, 0.30, 0.15],
            mass_range: (0.5, 6.0),
        }
    }
}

impl MassModelConfig {
    pub fn dims(&self) -> GridDims {
        GridDims::new(self.grid[0], self.grid[1], self.grid[2])
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimatorSection {
    pub dataset: DatasetConfig,
    pub training: TrainingConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    /// Episodes per (method, distribution) cell.
    pub repetitions: usize,
    /// Random non-hazardous distributions, one physics-prior episode each.
    pub random_batch: usize,
    /// Also run the black-box baseline on the roster.
    pub baseline: bool,
    /// Total mass of the skewed distribution D (kg).
    pub skewed_mass: f64,
    /// Write one trace CSV per episode under `traces/`.
    pub write_traces: bool,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            repetitions: 5,
            random_batch: 20,
            baseline: true,
            skewed_mass: 4.0,
            write_traces: false,
        }
    }
}

/// Artifact file names, relative to the output directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathsConfig {
    pub force_map: String,
    pub estimator: String,
    pub estimator_report: String,
    pub baseline: String,
    pub baseline_report: String,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            force_map: "force_map.csv".into(),
            estimator: "estimator.brem".into(),
            estimator_report: "estimator_report.jsonl".into(),
            baseline: "baseline.brbb".into(),
            baseline_report: "baseline_report.jsonl".into(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Master seed; every section seed is derived from it.
    pub seed: u64,
    pub sim: BeltConfig,
    pub massmodel: MassModelConfig,
    pub calibration: CalibrationConfig,
    pub estimator: EstimatorSection,
    pub baseline: BaselineConfig,
    pub controller: ControllerConfig,
    pub bench: BenchConfig,
    pub paths: PathsConfig,
}

/// Bumped whenever dataset generation changes, invalidating cached files.
pub const DATASET_GENERATOR_VERSION: u32 = 3;

const STREAM_CALIBRATION: u64 = 1;
const STREAM_DATASET: u64 = 2;
const STREAM_TRAINING: u64 = 3;
const STREAM_BASELINE: u64 = 4;
const STREAM_CONTROLLER: u64 = 5;
const STREAM_ROSTER: u64 = 6;
const STREAM_RANDOM_BATCH: u64 = 7;

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Format(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::MissingArtifact(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(format!("config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        self.sim.validate()?;
        self.controller.validate()?;
        self.estimator.training.validate()?;
        self.baseline.validate()?;
        let m = &self.massmodel;
        if m.grid.contains(&0) || m.box_dims.iter().any(|&d| !(d > 0.0)) {
            return Err(Error::InvalidArgument("grid and box dimensions must be positive".into()));
        }
        if !(m.mass_range.0 > 0.0 && m.mass_range.1 >= m.mass_range.0) {
            return Err(Error::InvalidArgument(format!("invalid mass range {:?}", m.mass_range)));
        }
        if self.bench.repetitions == 0 {
            return Err(Error::InvalidArgument("bench needs at least one repetition".into()));
        }
        Ok(())
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Copy whose section seeds mix the master seed into the configured ones.
    /// Apply once to a configuration as loaded.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        let mix = |own: u64, stream: u64| derive_seed(self.seed, stream) ^ own;
        c.calibration.seed = mix(c.calibration.seed, STREAM_CALIBRATION);
        c.estimator.dataset.seed = mix(c.estimator.dataset.seed, STREAM_DATASET);
        c.estimator.training.seed = mix(c.estimator.training.seed, STREAM_TRAINING);
        c.baseline.seed = mix(c.baseline.seed, STREAM_BASELINE);
        c.controller.seed = mix(c.controller.seed, STREAM_CONTROLLER);
        c
    }

    /// SHA-256 of the resolved configuration, hex encoded.
    pub fn hash(&self) -> String {
        sha_hex(&serde_json::to_string(&self.resolved()).expect("config serializes"))
    }

    /// Key for the dataset cache: only the sections that change the data.
    pub fn dataset_key(&self) -> String {
        let r = self.resolved();
        let key = serde_json::json!({
            "generator": DATASET_GENERATOR_VERSION,
            "sim": r.sim,
            "massmodel": r.massmodel,
            "dataset": r.estimator.dataset,
        });
        sha_hex(&key.to_string())[..16].to_string()
    }

    pub fn header(&self) -> String {
        format!("# config_hash={} seed={}", self.hash(), self.seed)
    }

    fn meta(&self) -> serde_json::Value {
        serde_json::json!({ "config_hash": self.hash(), "seed": self.seed })
    }
}

fn sha_hex(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "physics")]
    PhysicsPrior,
    #[serde(rename = "baseline")]
    Baseline,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::PhysicsPrior => "physics",
            Method::Baseline => "baseline",
        })
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "physics" | "physics-prior" => Ok(Method::PhysicsPrior),
            "baseline" | "blackbox" => Ok(Method::Baseline),
            _ => Err(Error::InvalidArgument(format!("unknown method {s:?}; expected physics or baseline"))),
        }
    }
}

/// First non-hazardous Gaussian distribution on the seed stream `stream`.
fn non_hazardous(cfg: &ExperimentConfig, stream: u64, accept: impl Fn(&MassDistribution) -> bool) -> Result<MassDistribution> {
    let m = &cfg.massmodel;
    for attempt in 0..10_000u64 {
        let seed = derive_seed(derive_seed(cfg.seed, stream), attempt);
        let d = sample_gaussian_distribution(seed, m.dims(), m.box_dims, m.mass_range)?;
        if !d.classify_hazard().hazardous && accept(&d) {
            return Ok(d);
        }
    }
    Err(Error::InvalidArgument("no acceptable distribution found".into()))
}

/// The fixed roster: A (baseline training distribution), B (A shifted by one
/// voxel along the length), C (a separate draw overlapping A by IoU < 0.3) and
/// D (a blob placed in and cut to slab U1, with the configured skewed mass).
pub fn roster(cfg: &ExperimentConfig) -> Result<Vec<(String, MassDistribution)>> {
    let m = &cfg.massmodel;
    let a = non_hazardous(cfg, STREAM_ROSTER, |_| true)?;
    let occ_a = a.occupancy();
    let mass_a = a.total_mass() - a.mass_floor() * m.dims().len() as f64;
    let b = MassDistribution::from_occupancy(&occ_a.shifted(1, 0), m.box_dims, mass_a, MASS_FLOOR)?;
    let c = non_hazardous(cfg, STREAM_ROSTER + 100, |d| {
        iou(&d.occupancy(), &occ_a, 0.5).map(|v| v < 0.3).unwrap_or(false)
    })?;
    let d = sample_slab_distribution(
        derive_seed(cfg.seed, STREAM_ROSTER + 200),
        HazardVolume::U1,
        m.dims(),
        m.box_dims,
        cfg.bench.skewed_mass,
    )?;
    Ok(vec![("A".into(), a), ("B".into(), b), ("C".into(), c), ("D".into(), d)])
}

/// `n` non-hazardous Gaussian distributions for the random batch.
pub fn random_batch(cfg: &ExperimentConfig, n: usize) -> Result<Vec<MassDistribution>> {
    (0..n as u64)
        .map(|k| non_hazardous(cfg, STREAM_RANDOM_BATCH + (k << 8), |_| true))
        .collect()
}

/// `A`–`D`, `uniform`, or `random:<k>`.
pub fn named_distribution(cfg: &ExperimentConfig, name: &str) -> Result<MassDistribution> {
    let m = &cfg.massmodel;
    if name == "uniform" {
        return MassDistribution::uniform(m.dims(), m.box_dims, cfg.calibration.box_mass);
    }
    if let Some(k) = name.strip_prefix("random:") {
        let k: u64 = k
            .parse()
            .map_err(|_| Error::InvalidArgument(format!("bad random index {k:?}")))?;
        return non_hazardous(cfg, STREAM_RANDOM_BATCH + (k << 8), |_| true);
    }
    roster(cfg)?
        .into_iter()
        .find(|(n, _)| n == name)
        .map(|(_, d)| d)
        .ok_or_else(|| Error::InvalidArgument(format!("unknown distribution {name:?}; expected A-D, uniform or random:<k>")))
}

/// One row of `bench_episodes.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRow {
    pub method: Method,
    pub distribution: String,
    pub repetition: usize,
    pub seed: u64,
    pub outcome: Outcome,
    pub steps: usize,
    pub exploration_steps: usize,
    pub max_balance_error: f64,
    pub adaptations: usize,
    pub reason: String,
    #[serde(skip)]
    pub wall_time_s: f64,
    #[serde(skip)]
    pub adaptation_time_s: f64,
    #[serde(skip)]
    pub balance_trace: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub method: Method,
    pub distribution: String,
    pub episodes: usize,
    pub successes: usize,
    pub success_ratio: f64,
    /// Mean control steps over successful episodes.
    pub avg_steps: Option<f64>,
    pub aborts: usize,
    pub max_balance_error: f64,
    #[serde(skip)]
    pub mean_wall_time_s: f64,
}

/// Per-step balance statistics across episodes still running at that step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandRow {
    pub step: usize,
    pub median: f64,
    pub sigma: f64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub rows: Vec<EpisodeRow>,
    pub summary: Vec<CellSummary>,
    pub band: Vec<BandRow>,
}

/// Name used for the random-batch cell.
pub const RANDOM_BATCH: &str = "random";

impl BenchReport {
    pub fn from_rows(rows: Vec<EpisodeRow>) -> Self {
        let summary = summarize(&rows);
        let traces: Vec<&[f64]> = rows
            .iter()
            .filter(|r| r.distribution.starts_with(RANDOM_BATCH) && r.method == Method::PhysicsPrior)
            .map(|r| r.balance_trace.as_slice())
            .collect();
        let band = balance_band(&traces);
        Self { rows, summary, band }
    }

    pub fn cell(&self, method: Method, distribution: &str) -> Option<&CellSummary> {
        self.summary
            .iter()
            .find(|c| c.method == method && c.distribution == distribution)
    }

    /// Fixed-width table; wall times only when asked for.
    pub fn table(&self, with_wall_time: bool) -> String {
        let mut s = String::new();
        let _ = write!(
            s,
            "{:<9} {:<7} {:>4} {:>8} {:>9} {:>6} {:>11}",
            "method", "dist", "n", "success", "avg_steps", "aborts", "max_balance"
        );
        if with_wall_time {
            let _ = write!(s, " {:>10}", "wall_s");
        }
        s.push('\n');
        for c in &self.summary {
            let steps = c.avg_steps.map_or_else(|| "-".to_string(), |v| format!("{v:.1}"));
            let _ = write!(
                s,
                "{:<9} {:<7} {:>4} {:>7.1}% {:>9} {:>6} {:>11.4}",
                c.method.to_string(),
                c.distribution,
                c.episodes,
                100.0 * c.success_ratio,
                steps,
                c.aborts,
                c.max_balance_error
            );
            if with_wall_time {
                let _ = write!(s, " {:>10.3}", c.mean_wall_time_s);
            }
            s.push('\n');
        }
        s
    }
}

/// Per (method, distribution) cell; random-batch episodes pool into one cell.
pub fn summarize(rows: &[EpisodeRow]) -> Vec<CellSummary> {
    let mut cells: BTreeMap<(Method, String), Vec<&EpisodeRow>> = BTreeMap::new();
    for r in rows {
        let name = if r.distribution.starts_with(RANDOM_BATCH) {
            RANDOM_BATCH.to_string()
        } else {
            r.distribution.clone()
        };
        cells.entry((r.method, name)).or_default().push(r);
    }
    cells
        .into_iter()
        .map(|((method, distribution), rs)| {
            let n = rs.len();
            let succ: Vec<&&EpisodeRow> = rs.iter().filter(|r| r.outcome == Outcome::Success).collect();
            CellSummary {
                method,
                distribution,
                episodes: n,
                successes: succ.len(),
                success_ratio: succ.len() as f64 / n as f64,
                avg_steps: (!succ.is_empty()).then(|| succ.iter().map(|r| r.steps as f64).sum::<f64>() / succ.len() as f64),
                aborts: rs.iter().filter(|r| r.outcome == Outcome::AbortedHazard).count(),
                max_balance_error: rs.iter().map(|r| r.max_balance_error).fold(0.0, f64::max),
                mean_wall_time_s: rs.iter().map(|r| r.wall_time_s).sum::<f64>() / n as f64,
            }
        })
        .collect()
}

/// Median and population standard deviation per step, 1-based.
pub fn balance_band(traces: &[&[f64]]) -> Vec<BandRow> {
    let len = traces.iter().map(|t| t.len()).max().unwrap_or(0);
    (0..len)
        .map(|i| {
            let mut v: Vec<f64> = traces.iter().filter_map(|t| t.get(i).copied()).collect();
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            let sigma = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
            BandRow {
                step: i + 1,
                median: crate::estimator::median(&mut v),
                sigma,
                n: v.len(),
            }
        })
        .collect()
}

/// Writes `header` then a CSV body from serializable rows.
fn write_csv_rows<T: Serialize>(path: &Path, header: &str, rows: &[T]) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    writeln!(f, "{header}")?;
    let mut w = csv::Writer::from_writer(f);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn write_jsonl(path: &Path, lines: &[serde_json::Value]) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    for l in lines {
        writeln!(f, "{l}")?;
    }
    f.flush()?;
    Ok(())
}

/// An output directory bound to a configuration.
pub struct Workspace {
    pub cfg: ExperimentConfig,
    pub out: PathBuf,
}

#[derive(Clone, Debug)]
pub struct DatasetArtifact {
    pub dataset: Dataset,
    pub path: PathBuf,
    pub cached: bool,
}

impl Workspace {
    pub fn new(cfg: ExperimentConfig, out: impl Into<PathBuf>) -> Result<Self> {
        cfg.validate()?;
        let out = out.into();
        fs::create_dir_all(&out)?;
        Ok(Self { cfg, out })
    }

    fn resolved(&self) -> ExperimentConfig {
        self.cfg.resolved()
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn existing(&self, name: &str) -> Result<PathBuf> {
        let p = self.path(name);
        if p.is_file() {
            Ok(p)
        } else {
            Err(Error::MissingArtifact(p.display().to_string()))
        }
    }

    pub fn calibrate(&self) -> Result<(ControlForceMap, CalibrationData)> {
        let r = self.resolved();
        let m = &r.massmodel;
        let (map, data) = calibrate_box(&r.calibration, &r.sim, m.dims(), m.box_dims)?;
        let mut f = BufWriter::new(File::create(self.path(&r.paths.force_map))?);
        writeln!(f, "{}", self.cfg.header())?;
        map.write_csv(&mut f)?;
        f.flush()?;
        Ok((map, data))
    }

    pub fn force_map(&self) -> Result<ControlForceMap> {
        let p = self.existing(&self.cfg.paths.force_map)?;
        ControlForceMap::read_csv(BufReader::new(File::open(p)?))
    }

    pub fn dataset_path(&self) -> PathBuf {
        self.path(&format!("dataset-{}.brds", self.cfg.dataset_key()))
    }

    /// Loads the cached dataset when its key matches, otherwise generates it.
    pub fn dataset(&self) -> Result<DatasetArtifact> {
        let path = self.dataset_path();
        if path.is_file() {
            let dataset = Dataset::read(BufReader::new(File::open(&path)?))?;
            return Ok(DatasetArtifact { dataset, path, cached: true });
        }
        let r = self.resolved();
        let m = &r.massmodel;
        let dataset = generate_dataset(&r.estimator.dataset, &r.sim, m.dims(), m.box_dims, m.mass_range)?;
        let mut f = BufWriter::new(File::create(&path)?);
        dataset.write(&mut f)?;
        f.flush()?;
        Ok(DatasetArtifact { dataset, path, cached: false })
    }

    pub fn train_estimator(&self) -> Result<(EstimatorModel, TrainingReport, DatasetArtifact)> {
        let data = self.dataset()?;
        let r = self.resolved();
        let (model, report) = train(&data.dataset, &r.estimator.training)?;
        let mut f = BufWriter::new(File::create(self.path(&r.paths.estimator))?);
        model.write(&mut f, self.cfg.meta())?;
        f.flush()?;
        let mut lines = vec![serde_json::json!({
            "config_hash": self.cfg.hash(),
            "seed": self.cfg.seed,
            "boxes": data.dataset.len(),
            "transitions": report.transitions,
            "train_items": report.train_items,
            "val_items": report.val_items,
            "parameters": report.parameter_count,
            "feature_normalization": report.feature_normalization,
        })];
        lines.extend(report.epochs.iter().map(|e| serde_json::to_value(e).expect("epoch stats")));
        lines.push(serde_json::json!({ "final_val_median_iou": report.final_val_median_iou }));
        write_jsonl(&self.path(&r.paths.estimator_report), &lines)?;
        Ok((model, report, data))
    }

    pub fn estimator(&self) -> Result<EstimatorModel> {
        let p = self.existing(&self.cfg.paths.estimator)?;
        let (model, _) = EstimatorModel::read(BufReader::new(File::open(p)?))?;
        if model.dims != self.cfg.massmodel.dims() {
            return Err(Error::GridMismatch {
                expected: self.cfg.massmodel.dims().as_tuple(),
                found: model.dims.as_tuple(),
            });
        }
        Ok(model)
    }

    /// Offline data for the baseline: random-policy transitions on A plus
    /// control transitions of successful physics-prior episodes on A.
    pub fn baseline_data(&self, map: &ControlForceMap, estimator: &EstimatorModel) -> Result<Vec<TransitionRecord>> {
        let r = self.resolved();
        let a = named_distribution(&r, "A")?;
        let mut records = random_policy_transitions(
            &a,
            &r.sim,
            &r.controller,
            r.baseline.random_episodes,
            r.baseline.random_episode_len,
            derive_seed(r.baseline.seed, 1),
        )?;
        let prior: Vec<Vec<TransitionRecord>> = (0..r.baseline.prior_episodes as u64)
            .into_par_iter()
            .map(|k| -> Result<Vec<TransitionRecord>> {
                let ctrl = ControllerConfig {
                    seed: derive_seed(r.baseline.seed, 1000 + k),
                    ..r.controller.clone()
                };
                let mut sim = self.simulator(&a)?;
                let res = run_episode(&mut sim, Pose2::default(), estimator, map, &ctrl)?;
                Ok(if res.outcome == Outcome::Success {
                    res.transitions.iter().map(TransitionRecord::from).collect()
                } else {
                    Vec::new()
                })
            })
            .collect::<Result<_>>()?;
        records.extend(prior.into_iter().flatten());
        Ok(records)
    }

    pub fn train_baseline(&self) -> Result<(BlackboxModel, BaselineReport)> {
        let map = self.force_map()?;
        let estimator = self.estimator()?;
        let records = self.baseline_data(&map, &estimator)?;
        let r = self.resolved();
        let (model, report) = train_blackbox(&records, &r.baseline)?;
        let mut f = BufWriter::new(File::create(self.path(&r.paths.baseline))?);
        model.write(&mut f, self.cfg.meta())?;
        f.flush()?;
        let mut lines = vec![serde_json::json!({
            "config_hash": self.cfg.hash(),
            "seed": self.cfg.seed,
            "transitions": records.len(),
            "train_items": report.train_items,
            "val_items": report.val_items,
            "parameters": report.parameter_count,
        })];
        lines.extend(
            report
                .epochs
                .iter()
                .map(|(e, t, v)| serde_json::json!({ "epoch": e, "train_loss": t, "val_loss": v })),
        );
        write_jsonl(&self.path(&r.paths.baseline_report), &lines)?;
        Ok((model, report))
    }

    pub fn baseline(&self) -> Result<BlackboxModel> {
        let p = self.existing(&self.cfg.paths.baseline)?;
        Ok(BlackboxModel::read(BufReader::new(File::open(p)?))?.0)
    }

    fn simulator(&self, dist: &MassDistribution) -> Result<Simulator> {
        let c = &self.cfg.controller;
        let goal = Goal {
            target_angle: c.target_angle,
            angle_tolerance: c.angle_tolerance,
            max_steps: c.max_steps,
        };
        Simulator::new(dist.clone(), self.cfg.sim.clone(), goal, Pose2::default())
    }

    fn episode(&self, method: Method, dist: &MassDistribution, seed: u64, models: &Models) -> Result<EpisodeResult> {
        let r = self.resolved();
        let ctrl = ControllerConfig { seed, ..r.controller };
        let mut sim = self.simulator(dist)?;
        match method {
            Method::PhysicsPrior => {
                let (map, est) = (models.map.as_ref(), models.estimator.as_ref());
                let (Some(map), Some(est)) = (map, est) else {
                    return Err(Error::MissingArtifact("force map or estimator".into()));
                };
                run_episode(&mut sim, Pose2::default(), est, map, &ctrl)
            }
            Method::Baseline => {
                let model = models
                    .baseline
                    .as_ref()
                    .ok_or_else(|| Error::MissingArtifact(self.cfg.paths.baseline.clone()))?;
                run_blackbox_episode(&mut sim, Pose2::default(), model, &ctrl, &r.baseline)
            }
        }
    }

    fn load_models(&self, methods: &[Method]) -> Result<Models> {
        let physics = methods.contains(&Method::PhysicsPrior);
        Ok(Models {
            map: physics.then(|| self.force_map()).transpose()?,
            estimator: physics.then(|| self.estimator()).transpose()?,
            baseline: methods.contains(&Method::Baseline).then(|| self.baseline()).transpose()?,
        })
    }

    /// Single episode with its trace written to `episode_<method>_<dist>_<seed>.csv`.
    pub fn run_single(&self, method: Method, distribution: &str, seed: u64) -> Result<(EpisodeResult, PathBuf)> {
        let dist = named_distribution(&self.cfg, distribution)?;
        let models = self.load_models(&[method])?;
        let ep_seed = derive_seed(self.resolved().controller.seed, seed);
        let res = self.episode(method, &dist, ep_seed, &models)?;
        let safe: String = distribution.chars().map(|c| if c.is_ascii_alphanumeric() { c } else { '_' }).collect();
        let path = self.path(&format!("episode_{method}_{safe}_{seed}.csv"));
        let mut f = BufWriter::new(File::create(&path)?);
        writeln!(f, "{} method={method} distribution={distribution} episode_seed={ep_seed}", self.cfg.header())?;
        res.write_trace_csv(&mut f)?;
        f.flush()?;
        Ok((res, path))
    }

    /// Roster cells for every enabled method plus the random batch, run on
    /// `workers` threads. Writes all bench files and returns the report.
    pub fn bench(&self, workers: usize) -> Result<BenchReport> {
        let r = self.resolved();
        let mut methods = vec![Method::PhysicsPrior];
        if r.bench.baseline {
            methods.push(Method::Baseline);
        }
        let models = self.load_models(&methods)?;
        let mut jobs: Vec<(Method, String, usize, MassDistribution)> = Vec::new();
        for &m in &methods {
            for (name, d) in roster(&r)? {
                for rep in 0..r.bench.repetitions {
                    jobs.push((m, name.clone(), rep, d.clone()));
                }
            }
        }
        for (k, d) in random_batch(&r, r.bench.random_batch)?.into_iter().enumerate() {
            jobs.push((Method::PhysicsPrior, format!("{RANDOM_BATCH}:{k}"), 0, d));
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers.max(1))
            .build()
            .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
        let results: Vec<(EpisodeRow, EpisodeResult)> = pool.install(|| {
            jobs.par_iter()
                .map(|(m, name, rep, d)| {
                    let seed = episode_seed(r.controller.seed, *m, name, *rep);
                    let res = self.episode(*m, d, seed, &models)?;
                    let row = EpisodeRow {
                        method: *m,
                        distribution: name.clone(),
                        repetition: *rep,
                        seed,
                        outcome: res.outcome,
                        steps: res.steps,
                        exploration_steps: res.exploration_steps,
                        max_balance_error: res.max_balance_error,
                        adaptations: res.adaptations,
                        reason: res.reason.clone().unwrap_or_default(),
                        wall_time_s: res.wall_time_s,
                        adaptation_time_s: res.adaptation_time_s,
                        balance_trace: res.balance_trace.clone(),
                    };
                    log::info!("{m} {name} rep {rep}: {} after {} steps", res.outcome, res.steps);
                    Ok((row, res))
                })
                .collect::<Result<_>>()
        })?;
        if r.bench.write_traces {
            let dir = self.path("traces");
            fs::create_dir_all(&dir)?;
            for (row, res) in &results {
                let name = row.distribution.replace(':', "_");
                let mut f = BufWriter::new(File::create(dir.join(format!("{}_{}_{}.csv", row.method, name, row.repetition)))?);
                writeln!(f, "{} episode_seed={}", self.cfg.header(), row.seed)?;
                res.write_trace_csv(&mut f)?;
                f.flush()?;
            }
        }
        let report = BenchReport::from_rows(results.into_iter().map(|(row, _)| row).collect());
        self.write_bench(&report)?;
        Ok(report)
    }

    fn write_bench(&self, report: &BenchReport) -> Result<()> {
        let header = self.cfg.header();
        write_csv_rows(&self.path("bench_episodes.csv"), &header, &report.rows)?;
        write_csv_rows(&self.path("bench_summary.csv"), &header, &report.summary)?;
        write_csv_rows(&self.path("balance_band.csv"), &header, &report.band)?;
        fs::write(self.path("bench_table.txt"), format!("{header}\n{}", report.table(false)))?;
        #[derive(Serialize)]
        struct Timing<'a> {
            method: Method,
            distribution: &'a str,
            repetition: usize,
            wall_time_s: f64,
            adaptation_time_s: f64,
        }
        let timings: Vec<Timing> = report
            .rows
            .iter()
            .map(|r| Timing {
                method: r.method,
                distribution: &r.distribution,
                repetition: r.repetition,
                wall_time_s: r.wall_time_s,
                adaptation_time_s: r.adaptation_time_s,
            })
            .collect();
        write_csv_rows(&self.path("timings.csv"), &header, &timings)
    }
}

struct Models {
    map: Option<ControlForceMap>,
    estimator: Option<EstimatorModel>,
    baseline: Option<BlackboxModel>,
}

/// Episode seed from the controller seed and the cell coordinates, so that
/// scheduling order never changes results.
pub fn episode_seed(base: u64, method: Method, distribution: &str, repetition: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(method.to_string().as_bytes());
    h.update([0]);
    h.update(distribution.as_bytes());
    let d = h.finalize();
    let stream = u64::from_le_bytes(d[..8].try_into().expect("8 bytes"));
    derive_seed(derive_seed(base, stream), repetition as u64)
}

/// Per-channel bin table for terminal output.
pub fn format_bin_table(map: &ControlForceMap) -> String {
    let mut s = String::new();
    for ch in Channel::ALL {
        let c = map.channel(ch);
        let _ = writeln!(s, "{ch} (range ±{}, {} populated bins)", c.range, c.populated_bins());
        let _ = writeln!(s, "  {:>10} {:>10} {:>10} {:>6}", "center", "mean_N", "std_N", "count");
        for b in &c.bins {
            let _ = writeln!(s, "  {:>10.4} {:>10.4} {:>10.4} {:>6}", b.center, b.mean, b.std, b.count);
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(method: Method, dist: &str, outcome: Outcome, steps: usize, bal: f64) -> EpisodeRow {
        EpisodeRow {
            method,
            distribution: dist.into(),
            repetition: 0,
            seed: 0,
            outcome,
            steps,
            exploration_steps: 45,
            max_balance_error: bal,
            adaptations: 0,
            reason: String::new(),
            wall_time_s: 1.0,
            adaptation_time_s: 0.0,
            balance_trace: vec![bal; steps],
        }
    }

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml_string().unwrap();
        let back = ExperimentConfig::from_toml_str(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        assert_eq!(ExperimentConfig::from_toml_str("").unwrap(), cfg);
    }

    #[test]
    fn hash_tracks_seed_and_parameters() {
        let cfg = ExperimentConfig::default();
        assert_ne!(cfg.hash(), cfg.clone().with_seed(1).hash());
        let mut other = cfg.clone();
        other.controller.n_candidates = 40;
        assert_ne!(cfg.hash(), other.hash());
        assert_eq!(cfg.dataset_key(), other.dataset_key());
        assert_eq!(cfg.hash().len(), 64);
        let mut own = cfg.clone();
        own.calibration.seed = 9;
        assert_ne!(own.resolved().calibration.seed, cfg.resolved().calibration.seed);
        assert!(ExperimentConfig::from_toml_str("[sim]\nbelt_width = -1.0\n").is_err());
    }

    #[test]
    fn roster_has_the_documented_shape() {
        let cfg = ExperimentConfig::default();
        let r = roster(&cfg).unwrap();
        let names: Vec<&str> = r.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(names, ["A", "B", "C", "D"]);
        assert!(!r[0].1.classify_hazard().hazardous);
        assert!(!r[2].1.classify_hazard().hazardous);
        let h = r[3].1.classify_hazard();
        assert!(h.hazardous);
        assert_eq!(h.triggering_volume, Some(HazardVolume::U1));
        assert!((r[3].1.total_mass() - 4.0 - MASS_FLOOR * 320.0).abs() < 1e-9);
        assert!(iou(&r[2].1.occupancy(), &r[0].1.occupancy(), 0.5).unwrap() < 0.3);
        assert_eq!(roster(&cfg).unwrap(), r);
        let batch = random_batch(&cfg, 5).unwrap();
        assert!(batch.iter().all(|d| !d.classify_hazard().hazardous));
        assert_eq!(named_distribution(&cfg, "random:3").unwrap(), batch[3]);
        assert!(named_distribution(&cfg, "E").is_err());
    }

    #[test]
    fn summary_recomputes_from_rows() {
        let rows = vec![
            row(Method::PhysicsPrior, "A", Outcome::Success, 100, 0.01),
            row(Method::PhysicsPrior, "A", Outcome::Failure, 30, 0.05),
            row(Method::PhysicsPrior, "D", Outcome::AbortedHazard, 0, 0.0),
            row(Method::Baseline, "A", Outcome::Success, 200, 0.02),
            row(Method::PhysicsPrior, "random:0", Outcome::Success, 3, 0.01),
            row(Method::PhysicsPrior, "random:1", Outcome::Failure, 2, 0.03),
        ];
        let rep = BenchReport::from_rows(rows);
        let a = rep.cell(Method::PhysicsPrior, "A").unwrap();
        assert_eq!((a.episodes, a.successes), (2, 1));
        assert_eq!(a.success_ratio, 0.5);
        assert_eq!(a.avg_steps, Some(100.0));
        assert_eq!(a.max_balance_error, 0.05);
        assert_eq!(rep.cell(Method::PhysicsPrior, "D").unwrap().aborts, 1);
        let rb = rep.cell(Method::PhysicsPrior, RANDOM_BATCH).unwrap();
        assert_eq!((rb.episodes, rb.successes), (2, 1));
        assert_eq!(rep.band.len(), 3);
        assert_eq!(rep.band[0].n, 2);
        assert!((rep.band[0].median - 0.02).abs() < 1e-12);
        assert!((rep.band[0].sigma - 0.01).abs() < 1e-12);
        assert_eq!(rep.band[2].n, 1);
        for c in &rep.summary {
            assert!((0.0..=1.0).contains(&c.success_ratio));
        }
        assert!(rep.table(false).lines().count() == rep.summary.len() + 1);
    }

    #[test]
    fn method_parsing() {
        assert_eq!("physics".parse::<Method>().unwrap(), Method::PhysicsPrior);
        assert_eq!("baseline".parse::<Method>().unwrap(), Method::Baseline);
        assert!("magic".parse::<Method>().is_err());
    }

    #[test]
    fn episode_seeds_differ_per_cell() {
        let a = episode_seed(1, Method::PhysicsPrior, "A", 0);
        assert_ne!(a, episode_seed(1, Method::Baseline, "A", 0));
        assert_ne!(a, episode_seed(1, Method::PhysicsPrior, "B", 0));
        assert_ne!(a, episode_seed(1, Method::PhysicsPrior, "A", 1));
        assert_eq!(a, episode_seed(1, Method::PhysicsPrior, "A", 0));
    }

    #[test]
    fn missing_artifacts_are_named() {
        let dir = tempfile::tempdir().unwrap();
        let ws = Workspace::new(ExperimentConfig::default(), dir.path()).unwrap();
        match ws.force_map() {
            Err(Error::MissingArtifact(p)) => assert!(p.ends_with("force_map.csv")),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(ws.bench(1), Err(Error::MissingArtifact(_))));
    }
}
