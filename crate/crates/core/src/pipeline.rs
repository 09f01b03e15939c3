//! End-to-end driver: train fiber models on the offline prefix, bucket the
//! fibers, sketch the online segment, factorize and complete the sketch, and
//! score it against a full-data factorization of the same segment.
//!
//! Configuration is a flat `key = value` file; see [`PipelineConfig`].
//! Reports are JSON plus CSV and contain no timing data, so identical
//! configurations produce byte-identical reports. Stage timings go to
//! `timings.csv` next to them.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};

use crate::arima::{default_order_grid, ArimaModel, ArimaOrder};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::metrics::{fms, tcs};
use crate::projection::{
    aggregate_coefficients, assign_buckets_with, default_model_count, fibers,
    train_random_models_with, train_selected_models_with, write_buckets, write_coefficients, write_models,
    AggregatedCoefficients, BucketAssignment, TrainedModel,
};
use crate::sketcher::{
    fixed_rate_sketch, random_sketch, sketch_stream_with, FiberForecasters, PidGains,
    SamplerConfig, SamplerState, SketchResult,
};
use crate::skesmooth::{
    build_regularizer, complete_tensor, factorize_with, FactorizationConfig, RegularizerMatrix,
};
use crate::synth::{generate, SyntheticSpec};
use crate::tensor::{
    read_tensor_dense, write_factors, write_mask, write_tensor, write_tensor_dense, DenseTensor,
    KruskalModel, MaskTensor,
};

/// Tolerance of θ calibration, in drop-rate units.
pub const CALIBRATION_TOLERANCE: f64 = 0.02;
const CALIBRATION_STEPS: usize = 60;
const THETA_CEILING: f64 = 1e4;
/// Automatic ξ is this multiple of the median replay error.
const AUTO_XI_FACTOR: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Adaptive,
    Fixed,
    Random,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Adaptive => "adaptive",
            Strategy::Fixed => "fixed",
            Strategy::Random => "random",
        })
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "adaptive" => Ok(Strategy::Adaptive),
            "fixed" => Ok(Strategy::Fixed),
            "random" => Ok(Strategy::Random),
            other => Err(Error::config(format!("unknown strategy `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    File(PathBuf),
    Synthetic(SyntheticSpec),
}

/// PID tolerance: a fixed value, or twice the median slice error of a
/// full-sampling replay of the training prefix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum XiSetting {
    Fixed(f64),
    Auto,
}

/// Where the regularizer's AR coefficients come from.
#[derive(Debug, Clone, PartialEq)]
pub enum AlphaSource {
    /// Bucket-weighted average of the trained models.
    Data,
    Fixed(Vec<f64>),
}

/// Pipeline settings.
///
/// | key | default | meaning |
/// |---|---|---|
/// | `input` | | sparse tensor file (mode 1 is time) |
/// | `synthetic` | | `default` or a TOML spec path; used when `input` is absent |
/// | `output` | `out` | artifact directory |
/// | `train_fraction` | `0.6` | offline prefix share |
/// | `strategy` | `adaptive` | `adaptive`, `fixed` or `random` |
/// | `theta`, `xi`, `pid`, `delta` | `1`, `3.5`, `0.7,0.2,0.1`, `1` | controller; `xi = auto` allowed |
/// | `drop_rate` | | calibrate θ (adaptive) or size the baseline to this drop rate |
/// | `interval`, `keep_fraction` | `2`, `0.5` | baselines without `drop_rate` |
/// | `models`, `order`, `model_seed` | `auto`, `3,0,0`, `0` | fiber model training; `order = aic` searches orders |
/// | `alpha` | `data` | regularizer coefficients or `data` |
/// | `rank`, `rho`, `max_iterations`, `tolerance`, `memory` | `5`, `600`, `500`, `1e-6`, `5` | factorization |
/// | `seed` | `0` | factorization and random-sketch seed |
/// | `strategies`, `seeds`, `drop_rates` | all, `seed`, none | experiment grid |
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub source: DataSource,
    pub output: PathBuf,
    pub train_fraction: f64,
    pub strategy: Strategy,
    pub gains: PidGains,
    pub theta: f64,
    pub xi: XiSetting,
    pub delta: f64,
    pub drop_rate: Option<f64>,
    pub interval: usize,
    pub keep_fraction: f64,
    pub model_count: Option<usize>,
    pub order: ArimaOrder,
    /// Pick each model's order by AIC instead of using `order`.
    pub select_order: bool,
    pub model_seed: u64,
    pub alpha: AlphaSource,
    pub factorization: FactorizationConfig,
    pub strategies: Vec<Strategy>,
    pub seeds: Vec<u64>,
    pub drop_rates: Vec<f64>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let factorization = FactorizationConfig::default();
        Self {
            source: DataSource::Synthetic(SyntheticSpec::default()),
            output: PathBuf::from("out"),
            train_fraction: 0.6,
            strategy: Strategy::Adaptive,
            gains: PidGains::default(),
            theta: 1.0,
            xi: XiSetting::Fixed(3.5),
            delta: 1.0,
            drop_rate: None,
            interval: 2,
            keep_fraction: 0.5,
            model_count: None,
            order: ArimaOrder::default(),
            select_order: false,
            model_seed: 0,
            alpha: AlphaSource::Data,
            factorization,
            strategies: vec![Strategy::Adaptive, Strategy::Fixed, Strategy::Random],
            seeds: vec![factorization.seed],
            drop_rates: Vec::new(),
        }
    }
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',')
        .map(|s| s.trim())
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| Error::config(format!("{key}: cannot parse `{s}`"))))
        .collect()
}

fn parse_one<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::config(format!("{key}: cannot parse `{v}`")))
}

impl PipelineConfig {
    /// Parses `key = value` lines; relative paths resolve against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seeds_given = false;
        let mut input = None;
        let mut synthetic = None;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::config(format!("line {}: expected `key = value`", n + 1)));
            };
            let (key, v) = (key.trim(), value.trim());
            let f = &mut cfg.factorization;
            match key {
                "input" => input = Some(base.join(v)),
                "synthetic" => synthetic = Some(v.to_string()),
                "output" => cfg.output = base.join(v),
                "train_fraction" => cfg.train_fraction = parse_one(key, v)?,
                "strategy" => cfg.strategy = v.parse()?,
                "theta" => cfg.theta = parse_one(key, v)?,
                "xi" if v == "auto" => cfg.xi = XiSetting::Auto,
                "xi" => cfg.xi = XiSetting::Fixed(parse_one(key, v)?),
                "pid" => cfg.gains = v.parse()?,
                "delta" => cfg.delta = parse_one(key, v)?,
                "drop_rate" => cfg.drop_rate = Some(parse_one(key, v)?),
                "interval" => cfg.interval = parse_one(key, v)?,
                "keep_fraction" => cfg.keep_fraction = parse_one(key, v)?,
                "models" if v == "auto" => cfg.model_count = None,
                "models" => cfg.model_count = Some(parse_one(key, v)?),
                "order" if v == "aic" => cfg.select_order = true,
                "order" => {
                    cfg.order = v.parse()?;
                    cfg.select_order = false;
                }
                "model_seed" => cfg.model_seed = parse_one(key, v)?,
                "alpha" if v == "data" => cfg.alpha = AlphaSource::Data,
                "alpha" => cfg.alpha = AlphaSource::Fixed(parse_list(key, v)?),
                "rank" => f.rank = parse_one(key, v)?,
                "rho" => f.rho = parse_one(key, v)?,
                "max_iterations" => f.max_iterations = parse_one(key, v)?,
                "tolerance" => f.gradient_tolerance = parse_one(key, v)?,
                "memory" => f.lbfgs_memory = parse_one(key, v)?,
                "seed" => f.seed = parse_one(key, v)?,
                "strategies" => cfg.strategies = parse_list(key, v)?,
                "seeds" => {
                    cfg.seeds = parse_list(key, v)?;
                    seeds_given = true;
                }
                "drop_rates" => cfg.drop_rates = parse_list(key, v)?,
                other => return Err(Error::config(format!("line {}: unknown key `{other}`", n + 1))),
            }
        }
        if !seeds_given {
            cfg.seeds = vec![cfg.factorization.seed];
        }
        cfg.source = match (input, synthetic) {
            (Some(p), _) => DataSource::File(p),
            (None, Some(s)) if s == "default" => DataSource::Synthetic(SyntheticSpec::default()),
            (None, Some(s)) => DataSource::Synthetic(SyntheticSpec::load(base.join(s))?),
            (None, None) => cfg.source,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&std::fs::read_to_string(path)?, base)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::config(format!(
                "train_fraction must be in (0, 1), got {}",
                self.train_fraction
            )));
        }
        if let DataSource::File(p) = &self.source {
            if !p.exists() {
                return Err(Error::config(format!("input {} does not exist", p.display())));
            }
        }
        self.sampler(self.theta, 1.0)?;
        if let XiSetting::Fixed(x) = self.xi {
            self.sampler(self.theta, x)?;
        }
        for &d in self.drop_rate.iter().chain(&self.drop_rates) {
            if !(0.0..1.0).contains(&d) {
                return Err(Error::config(format!("drop rates must be in [0, 1), got {d}")));
            }
        }
        if self.interval == 0 {
            return Err(Error::config("interval must be at least 1"));
        }
        if !(self.keep_fraction > 0.0 && self.keep_fraction <= 1.0) {
            return Err(Error::config("keep_fraction must be in (0, 1]"));
        }
        if self.strategies.is_empty() || self.seeds.is_empty() {
            return Err(Error::config("strategies and seeds must be nonempty"));
        }
        self.factorization.validate()
    }

    fn sampler(&self, theta: f64, xi: f64) -> Result<SamplerConfig> {
        SamplerConfig::new(self.gains, theta, xi)?.with_delta(self.delta)
    }

    /// The configuration for grid seed `seed`: synthetic data, model
    /// training and factorization all follow it.
    pub fn for_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.factorization.seed = seed;
        c.model_seed = seed;
        if let DataSource::Synthetic(spec) = &mut c.source {
            spec.seed = seed;
        }
        c
    }
}

/// Everything derived from the offline prefix.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub full: DenseTensor,
    pub planted: Option<KruskalModel>,
    pub prefix: DenseTensor,
    pub online: DenseTensor,
    pub trained: Vec<TrainedModel>,
    pub assignment: BucketAssignment,
    pub coefficients: AggregatedCoefficients,
    pub regularizer: RegularizerMatrix,
}

impl Prepared {
    pub fn models(&self) -> Vec<ArimaModel> {
        self.trained.iter().map(|t| t.model.clone()).collect()
    }

    fn shape(&self) -> (usize, usize) {
        let [_, nj, nk] = self.full.dims();
        (nj, nk)
    }

    /// Forecasters primed on the first `len` prefix slices.
    pub fn forecasters(&self, len: usize) -> Result<FiberForecasters> {
        let primer = self.prefix.time_range(0..len)?;
        FiberForecasters::from_buckets(&self.assignment, &self.models(), self.shape(), Some(&primer))
    }
}

pub fn load_data(config: &PipelineConfig) -> Result<(DenseTensor, Option<KruskalModel>)> {
    match &config.source {
        DataSource::File(p) => Ok((read_tensor_dense(p)?, None)),
        DataSource::Synthetic(spec) => {
            let (x, planted) = generate(spec)?;
            Ok((x, Some(planted)))
        }
    }
}

fn max_order(models: &[ArimaModel]) -> usize {
    models.iter().map(|m| m.order().p).max().unwrap_or(0)
}

/// Splits the tensor and trains, buckets and aggregates on the prefix.
pub fn prepare(config: &PipelineConfig, exec: Exec) -> Result<Prepared> {
    let (full, planted) = load_data(config).map_err(|e| e.in_stage("load"))?;
    let n = full.dims()[0];
    let n_train = (config.train_fraction * n as f64).round() as usize;
    if n_train < 2 || n_train >= n {
        return Err(Error::config(format!(
            "train_fraction {} leaves {n_train} of {n} slices for training",
            config.train_fraction
        )));
    }
    let prefix = full.time_range(0..n_train)?;
    let online = full.time_range(n_train..n)?;

    let fiber_series = fibers(&prefix);
    let count = config
        .model_count
        .unwrap_or_else(|| default_model_count(fiber_series.len()));
    let trained = if config.select_order {
        train_selected_models_with(&fiber_series, count, &default_order_grid(), config.model_seed, exec)
    } else {
        train_random_models_with(&fiber_series, count, config.order, config.model_seed, exec)
    }
    .map_err(|e| e.in_stage("train-models"))?;
    let models: Vec<ArimaModel> = trained.iter().map(|t| t.model.clone()).collect();
    let assignment = assign_buckets_with(&fiber_series, &models, exec).map_err(|e| e.in_stage("bucket"))?;
    let coefficients = match &config.alpha {
        AlphaSource::Data => aggregate_coefficients(&assignment, &models, max_order(&models))
            .map_err(|e| e.in_stage("aggregate"))?,
        AlphaSource::Fixed(a) => AggregatedCoefficients::new(a.clone()),
    };
    let regularizer = build_regularizer(&coefficients, online.dims()[0]).map_err(|e| e.in_stage("regularizer"))?;
    Ok(Prepared {
        full,
        planted,
        prefix,
        online,
        trained,
        assignment,
        coefficients,
        regularizer,
    })
}

/// Adaptive sampling over the second half of the prefix, with forecasters
/// primed on the first half.
pub fn replay_prefix(prepared: &Prepared, sampler: SamplerConfig, exec: Exec) -> Result<SketchResult> {
    let n = prepared.prefix.dims()[0];
    let half = n / 2;
    let stream = prepared.prefix.time_range(half..n)?;
    sketch_stream_with(&stream, prepared.forecasters(half)?, SamplerState::new(sampler)?, exec)
}

pub fn resolve_xi(config: &PipelineConfig, prepared: &Prepared, exec: Exec) -> Result<f64> {
    match config.xi {
        XiSetting::Fixed(x) => Ok(x),
        XiSetting::Auto => {
            let replay = replay_prefix(prepared, config.sampler(1.0, 1.0)?, exec)?;
            let mut errors: Vec<f64> = replay.sample_log.iter().map(|r| r.error).collect();
            errors.sort_by(f64::total_cmp);
            let m = errors.len();
            let median = if m % 2 == 1 {
                errors[m / 2]
            } else {
                0.5 * (errors[m / 2 - 1] + errors[m / 2])
            };
            if !(median > 0.0) {
                return Err(Error::config("automatic xi needs nonzero replay errors"));
            }
            Ok(AUTO_XI_FACTOR * median)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub target: f64,
    /// θ reaching the target within [`CALIBRATION_TOLERANCE`], if any.
    pub theta: Option<f64>,
    /// Drop rate measured at `theta`, or at the closest θ tried.
    pub achieved: f64,
}

impl Calibration {
    pub fn attained(&self) -> bool {
        self.theta.is_some()
    }
}

/// Searches θ for each target drop rate on the prefix replay.
///
/// θ = 1 samples every slice, so it is the answer for a zero target. Larger
/// targets bracket θ by doubling and then bisect.
pub fn calibrate_on(prepared: &Prepared, base: SamplerConfig, targets: &[f64], exec: Exec) -> Result<Vec<Calibration>> {
    let rate = |theta: f64| -> Result<f64> {
        let cfg = SamplerConfig { theta, ..base };
        Ok(replay_prefix(prepared, cfg, exec)?.drop_rate())
    };
    let mut out = Vec::with_capacity(targets.len());
    for &target in targets {
        if !(0.0..1.0).contains(&target) {
            return Err(Error::config(format!("target drop rate must be in [0, 1), got {target}")));
        }
        let close = |r: f64| (r - target).abs() <= CALIBRATION_TOLERANCE;
        let first = rate(1.0)?;
        let mut best = ((first - target).abs(), first);
        let mut consider = |r: f64| {
            if (r - target).abs() < best.0 {
                best = ((r - target).abs(), r);
            }
        };
        let (mut lo, mut hi) = (1.0, 2.0);
        let mut found = close(first).then_some(1.0);
        while found.is_none() && hi <= THETA_CEILING {
            let r = rate(hi)?;
            consider(r);
            if close(r) {
                found = Some(hi);
            } else if r > target {
                break;
            } else {
                lo = hi;
                hi *= 2.0;
            }
        }
        if found.is_none() && hi <= THETA_CEILING {
            for _ in 0..CALIBRATION_STEPS {
                let mid = 0.5 * (lo + hi);
                let r = rate(mid)?;
                consider(r);
                if close(r) {
                    found = Some(mid);
                    break;
                }
                if r < target {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
        }
        let calibration = match found {
            Some(theta) => Calibration { target, theta: Some(theta), achieved: rate(theta)? },
            None => Calibration { target, theta: None, achieved: best.1 },
        };
        out.push(calibration);
    }
    Ok(out)
}

pub fn calibrate_theta(config: &PipelineConfig, targets: &[f64]) -> Result<Vec<Calibration>> {
    let exec = Exec::default();
    let prepared = prepare(config, exec)?;
    let xi = resolve_xi(config, &prepared, exec)?;
    calibrate_on(&prepared, config.sampler(1.0, xi)?, targets, exec)
}

/// One scored run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub strategy: Strategy,
    pub seed: u64,
    pub target_drop: Option<f64>,
    /// Controller magnitude (adaptive), interval (fixed) or keep fraction (random).
    pub setting: f64,
    pub xi: Option<f64>,
    pub drop_rate: f64,
    pub fms: f64,
    /// Undefined when nothing was dropped.
    pub tcs: Option<f64>,
    pub converged: bool,
    /// Artifact directory relative to the report.
    pub artifacts: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub records: Vec<RunRecord>,
    /// Reference factor files relative to the report, one per seed.
    pub references: Vec<String>,
}

impl ExperimentReport {
    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "strategy", "seed", "target_drop", "setting", "xi", "drop_rate", "fms", "tcs", "converged", "artifacts",
        ])?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.records {
            w.write_record([
                r.strategy.to_string(),
                r.seed.to_string(),
                opt(r.target_drop),
                r.setting.to_string(),
                opt(r.xi),
                r.drop_rate.to_string(),
                r.fms.to_string(),
                opt(r.tcs),
                r.converged.to_string(),
                r.artifacts.clone(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Mean FMS per strategy.
    pub fn mean_fms(&self) -> BTreeMap<Strategy, f64> {
        let mut acc: BTreeMap<Strategy, (f64, usize)> = BTreeMap::new();
        for r in &self.records {
            let e = acc.entry(r.strategy).or_default();
            e.0 += r.fms;
            e.1 += 1;
        }
        acc.into_iter().map(|(s, (t, n))| (s, t / n as f64)).collect()
    }
}

#[derive(Debug, Default)]
struct Timings(Vec<(String, f64)>);

impl Timings {
    fn time<T>(&mut self, label: impl Into<String>, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let out = f();
        self.0.push((label.into(), start.elapsed().as_secs_f64()));
        out
    }

    fn write(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["stage", "seconds"])?;
        for (label, s) in &self.0 {
            w.write_record([label.as_str(), &s.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// ρ = 0 factorization of the fully observed online segment.
pub fn reference_factors(prepared: &Prepared, config: &FactorizationConfig, exec: Exec) -> Result<KruskalModel> {
    let cfg = FactorizationConfig { rho: 0.0, ..*config };
    let dims = prepared.online.dims();
    let r = factorize_with(
        &prepared.online.to_sparse_full(),
        &MaskTensor::full(dims)?,
        &cfg,
        &prepared.regularizer,
        exec,
    )?;
    Ok(r.model)
}

/// Sampling decision of one run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SketchPlan {
    Adaptive { theta: f64, xi: f64 },
    Fixed { interval: usize },
    Random { keep_fraction: f64, seed: u64 },
}

impl SketchPlan {
    fn strategy(&self) -> Strategy {
        match self {
            SketchPlan::Adaptive { .. } => Strategy::Adaptive,
            SketchPlan::Fixed { .. } => Strategy::Fixed,
            SketchPlan::Random { .. } => Strategy::Random,
        }
    }

    fn setting(&self) -> f64 {
        match *self {
            SketchPlan::Adaptive { theta, .. } => theta,
            SketchPlan::Fixed { interval } => interval as f64,
            SketchPlan::Random { keep_fraction, .. } => keep_fraction,
        }
    }

    /// Baseline sized to keep `keep` of the slices.
    fn matched(strategy: Strategy, keep: f64, seed: u64) -> Self {
        match strategy {
            Strategy::Fixed => SketchPlan::Fixed { interval: ((1.0 / keep).round() as usize).max(1) },
            _ => SketchPlan::Random { keep_fraction: keep.clamp(f64::MIN_POSITIVE, 1.0), seed },
        }
    }
}

pub fn sketch_online(prepared: &Prepared, config: &PipelineConfig, plan: SketchPlan, exec: Exec) -> Result<SketchResult> {
    match plan {
        SketchPlan::Adaptive { theta, xi } => {
            let n_train = prepared.prefix.dims()[0];
            sketch_stream_with(
                &prepared.online,
                prepared.forecasters(n_train)?,
                SamplerState::new(config.sampler(theta, xi)?)?,
                exec,
            )
        }
        SketchPlan::Fixed { interval } => fixed_rate_sketch(&prepared.online, interval),
        SketchPlan::Random { keep_fraction, seed } => random_sketch(&prepared.online, keep_fraction, seed),
    }
}

struct Cell<'a> {
    prepared: &'a Prepared,
    config: &'a PipelineConfig,
    reference: &'a KruskalModel,
    root: &'a Path,
    exec: Exec,
}

impl Cell<'_> {
    /// Sketch, factorize, complete and score; artifacts land in `root/name`.
    fn run(&self, name: &str, plan: SketchPlan, target: Option<f64>, timings: &mut Timings) -> Result<(RunRecord, SketchResult)> {
        let dir = self.root.join(name);
        std::fs::create_dir_all(&dir)?;
        let sketch = timings
            .time(format!("{name}/sketch"), || sketch_online(self.prepared, self.config, plan, self.exec))
            .map_err(|e| e.in_stage("sketch"))?;
        write_tensor(dir.join("sketch.tns"), &sketch.sketch)?;
        write_mask(dir.join("mask.txt"), &sketch.mask)?;
        sketch.write_log(dir.join("samples.csv"))?;

        let fit = timings
            .time(format!("{name}/decompose"), || {
                factorize_with(&sketch.sketch, &sketch.mask, &self.config.factorization, &self.prepared.regularizer, self.exec)
            })
            .map_err(|e| e.in_stage("decompose"))?;
        write_factors(dir.join("factors.txt"), &fit.model)?;

        let completed = complete_tensor(&sketch.sketch, &sketch.mask, &fit.model).map_err(|e| e.in_stage("complete"))?;
        write_tensor_dense(dir.join("completed.tns"), &completed)?;

        let score = fms(self.reference, &fit.model).map_err(|e| e.in_stage("metrics"))?;
        let completion = if sketch.drop_rate() > 0.0 {
            Some(tcs(&self.prepared.online, &completed, &sketch.mask).map_err(|e| e.in_stage("metrics"))?)
        } else {
            None
        };
        let xi = match plan {
            SketchPlan::Adaptive { xi, .. } => Some(xi),
            _ => None,
        };
        let rel = dir.strip_prefix(self.config.output.as_path()).unwrap_or(&dir);
        info!("{name}: drop {:.3} fms {:.4}", sketch.drop_rate(), score.fms);
        let record = RunRecord {
            strategy: plan.strategy(),
            seed: self.config.factorization.seed,
            target_drop: target,
            setting: plan.setting(),
            xi,
            drop_rate: sketch.drop_rate(),
            fms: score.fms,
            tcs: completion,
            converged: fit.converged,
            artifacts: rel.to_string_lossy().into_owned(),
        };
        Ok((record, sketch))
    }
}

fn persist_prepared(prepared: &Prepared, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_tensor_dense(dir.join("full.tns"), &prepared.full)?;
    if let Some(p) = &prepared.planted {
        write_factors(dir.join("planted.txt"), p)?;
    }
    write_models(dir.join("models.jsonl"), &prepared.trained)?;
    write_buckets(dir.join("buckets.txt"), &prepared.assignment)?;
    write_coefficients(dir.join("coefficients.json"), &prepared.coefficients)?;
    Ok(())
}

fn drop_label(d: f64) -> String {
    format!("d{}", (d * 100.0).round() as i64)
}

/// All runs of one seed: every drop-rate target (or the configured setting
/// when there is none) times every strategy. Baselines match the adaptive
/// run's achieved drop rate when it ran, the target otherwise.
fn run_seed(config: &PipelineConfig, strategies: &[Strategy], targets: &[Option<f64>], exec: Exec, timings: &mut Timings) -> Result<(Vec<RunRecord>, String)> {
    let seed = config.factorization.seed;
    let root = config.output.join(format!("seed{seed}"));
    let prepared = timings.time(format!("seed{seed}/prepare"), || prepare(config, exec))?;
    persist_prepared(&prepared, &root)?;
    let reference = timings
        .time(format!("seed{seed}/reference"), || reference_factors(&prepared, &config.factorization, exec))
        .map_err(|e| e.in_stage("reference"))?;
    let reference_path = root.join("reference.txt");
    write_factors(&reference_path, &reference)?;

    let needs_xi = strategies.contains(&Strategy::Adaptive);
    let xi = if needs_xi {
        Some(resolve_xi(config, &prepared, exec).map_err(|e| e.in_stage("calibrate"))?)
    } else {
        None
    };
    let cell = Cell { prepared: &prepared, config, reference: &reference, root: &root, exec };
    let mut records = Vec::new();
    for &target in targets {
        let label = target.map(drop_label).unwrap_or_else(|| "run".into());
        let mut keep = target.map(|d| 1.0 - d);
        if let Some(xi) = xi.filter(|_| strategies.contains(&Strategy::Adaptive)) {
            let theta = match target {
                Some(d) => {
                    let base = config.sampler(1.0, xi)?;
                    let cal = calibrate_on(&prepared, base, &[d], exec).map_err(|e| e.in_stage("calibrate"))?[0];
                    cal.theta.ok_or_else(|| {
                        Error::config(format!("drop rate {d} is unattainable (closest {:.3})", cal.achieved))
                            .in_stage("calibrate")
                    })?
                }
                None => config.theta,
            };
            let (record, sketch) = cell.run(&format!("{label}/adaptive"), SketchPlan::Adaptive { theta, xi }, target, timings)?;
            keep = Some(sketch.keep_rate());
            records.push(record);
        }
        for &s in strategies.iter().filter(|s| **s != Strategy::Adaptive) {
            let plan = match keep {
                Some(k) => SketchPlan::matched(s, k, seed),
                None if s == Strategy::Fixed => SketchPlan::Fixed { interval: config.interval },
                None => SketchPlan::Random { keep_fraction: config.keep_fraction, seed },
            };
            records.push(cell.run(&format!("{label}/{s}"), plan, target, timings)?.0);
        }
    }
    let rel = reference_path.strip_prefix(&config.output).unwrap_or(&reference_path);
    Ok((records, rel.to_string_lossy().into_owned()))
}

fn finish(config: &PipelineConfig, report: &ExperimentReport, timings: &Timings) -> Result<()> {
    report.write_json(config.output.join("report.json"))?;
    report.write_csv(config.output.join("report.csv"))?;
    timings.write(&config.output.join("timings.csv"))
}

/// Runs the configured strategy once, writing every artifact and the report
/// under `config.output`.
pub fn run_pipeline(config: &PipelineConfig) -> Result<ExperimentReport> {
    config.validate()?;
    std::fs::create_dir_all(&config.output)?;
    let mut timings = Timings::default();
    let (records, reference) = run_seed(config, &[config.strategy], &[config.drop_rate], Exec::default(), &mut timings)?;
    let report = ExperimentReport { records, references: vec![reference] };
    finish(config, &report, &timings)?;
    Ok(report)
}

/// Seeds × drop rates × strategies. Seeds run in parallel, each one
/// sequentially inside, so the report does not depend on scheduling.
pub fn run_experiment(config: &PipelineConfig) -> Result<ExperimentReport> {
    config.validate()?;
    std::fs::create_dir_all(&config.output)?;
    let targets: Vec<Option<f64>> = if config.drop_rates.is_empty() {
        vec![config.drop_rate]
    } else {
        config.drop_rates.iter().map(|&d| Some(d)).collect()
    };
    let mut strategies = config.strategies.clone();
    strategies.sort();
    strategies.dedup();
    let outcomes = Exec::default().map_slice(&config.seeds, |&seed| {
        let mut timings = Timings::default();
        run_seed(&config.for_seed(seed), &strategies, &targets, Exec::Sequential, &mut timings)
            .map(|(records, reference)| (records, reference, timings))
    });
    let mut report = ExperimentReport { records: Vec::new(), references: Vec::new() };
    let mut timings = Timings::default();
    for outcome in outcomes {
        let (records, reference, t) = outcome?;
        report.records.extend(records);
        report.references.push(reference);
        timings.0.extend(t.0);
    }
    finish(config, &report, &timings)?;
    Ok(report)
}
