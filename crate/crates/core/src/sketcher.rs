//! Streaming slice sampler.
//!
//! Every incoming `J × K` slice is forecast fiber by fiber. At the next
//! sampling point the slice is stored, the forecast error feeds a PID
//! controller and the controller output sets the gap to the following
//! sampling point. Between sampling points the fiber models run on their own
//! forecasts. Fixed-interval and Bernoulli baselines produce the same
//! [`SketchResult`].

use std::path::Path;

use log::warn;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arima::{slice_feedback_error, ArimaModel, DEFAULT_DELTA};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::projection::BucketAssignment;
use crate::tensor::{DenseTensor, MaskTensor, SparseTensor};

const FIBER_CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PidGains {
    pub p: f64,
    pub i: f64,
    pub d: f64,
}

impl PidGains {
    /// Gains must be nonnegative and sum to one. A warning is logged unless
    /// `p > i > d`.
    pub fn new(p: f64, i: f64, d: f64) -> Result<Self> {
        if !(p >= 0.0 && i >= 0.0 && d >= 0.0) {
            return Err(Error::config(format!("PID gains must be nonnegative, got ({p}, {i}, {d})")));
        }
        if ((p + i + d) - 1.0).abs() > 1e-12 {
            return Err(Error::config(format!("PID gains must sum to 1, got {}", p + i + d)));
        }
        if !(p > i && i > d) {
            warn!("PID gains ({p}, {i}, {d}) are not ordered p > i > d");
        }
        Ok(Self { p, i, d })
    }
}

impl Default for PidGains {
    fn default() -> Self {
        Self { p: 0.7, i: 0.2, d: 0.1 }
    }
}

impl std::str::FromStr for PidGains {
    type Err = Error;

    /// Parses `P,I,D`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<f64> = s
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::config(format!("cannot parse PID gains `{s}`")))?;
        match parts.as_slice() {
            &[p, i, d] => Self::new(p, i, d),
            _ => Err(Error::config(format!("expected three PID gains, got `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub gains: PidGains,
    /// Largest interval the controller can produce.
    pub theta: f64,
    /// Error tolerance; errors above it force the minimum interval.
    pub xi: f64,
    /// Denominator floor of the slice feedback error.
    pub delta: f64,
}

impl SamplerConfig {
    pub fn new(gains: PidGains, theta: f64, xi: f64) -> Result<Self> {
        let cfg = Self {
            gains,
            theta,
            xi,
            delta: DEFAULT_DELTA,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_delta(mut self, delta: f64) -> Result<Self> {
        self.delta = delta;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("theta", self.theta), ("xi", self.xi), ("delta", self.delta)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} must be positive and finite, got {v}")));
            }
        }
        Ok(())
    }
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            gains: PidGains::default(),
            theta: 1.0,
            xi: 3.5,
            delta: DEFAULT_DELTA,
        }
    }
}

/// `round(max{1, θ(1 − e^{(Γ−ξ)/ξ})})`.
pub fn new_interval(theta: f64, xi: f64, gamma: f64) -> usize {
    let raw = theta * (1.0 - ((gamma - xi) / xi).exp());
    // NaN (Γ = ∞ and a degenerate θ) falls to the floor as well
    if raw.is_nan() || raw < 1.0 {
        1
    } else {
        raw.round() as usize
    }
}

/// Controller state: error history, running sum and next sampling point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerState {
    config: SamplerConfig,
    errors: Vec<(usize, f64)>,
    error_sum: f64,
    next_sample: usize,
}

impl SamplerState {
    pub fn new(config: SamplerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            errors: Vec::new(),
            error_sum: 0.0,
            next_sample: 0,
        })
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.config
    }

    /// `(t, E_t)` of every sample so far.
    pub fn error_history(&self) -> &[(usize, f64)] {
        &self.errors
    }

    pub fn next_sample(&self) -> usize {
        self.next_sample
    }

    /// Controller output for a new error `e_t` observed at `t`.
    ///
    /// The integral term averages every recorded error plus `e_t`; the
    /// derivative divides by the gap to the previous sample and is zero on
    /// the first one.
    pub fn pid_error(&self, e_t: f64, t: usize) -> Result<f64> {
        let g = self.config.gains;
        let mut gamma = g.p * e_t;
        let count = self.errors.len() + 1;
        gamma += g.i * (self.error_sum + e_t) / count as f64;
        if let Some(&(t_prev, e_prev)) = self.errors.last() {
            if t <= t_prev {
                return Err(Error::Ordering { t, last: t_prev });
            }
            gamma += g.d * (e_t - e_prev) / (t - t_prev) as f64;
        }
        Ok(gamma)
    }

    pub fn new_interval(&self, gamma: f64) -> usize {
        new_interval(self.config.theta, self.config.xi, gamma)
    }

    /// Records the sample at `t` and advances the next sampling point.
    pub fn record(&mut self, t: usize, e_t: f64) -> Result<SampleRecord> {
        let gamma = self.pid_error(e_t, t)?;
        let interval = self.new_interval(gamma);
        self.errors.push((t, e_t));
        self.error_sum += e_t;
        self.next_sample = t + interval;
        Ok(SampleRecord {
            t,
            error: e_t,
            gamma,
            interval,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub t: usize,
    #[serde(rename = "E_t")]
    pub error: f64,
    pub gamma: f64,
    pub interval: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SketchResult {
    /// Every entry of the sampled slices, zeros included.
    pub sketch: SparseTensor,
    pub mask: MaskTensor,
    pub sample_log: Vec<SampleRecord>,
}

impl SketchResult {
    pub fn sampled(&self) -> usize {
        self.sample_log.len()
    }

    pub fn total(&self) -> usize {
        self.mask.dims()[0]
    }

    pub fn keep_rate(&self) -> f64 {
        if self.total() == 0 {
            return 0.0;
        }
        self.sampled() as f64 / self.total() as f64
    }

    pub fn drop_rate(&self) -> f64 {
        1.0 - self.keep_rate()
    }

    pub fn write_log(&self, path: impl AsRef<Path>) -> Result<()> {
        write_sample_log(path, &self.sample_log)
    }
}

pub fn write_sample_log(path: impl AsRef<Path>, log: &[SampleRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in log {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_sample_log(path: impl AsRef<Path>) -> Result<Vec<SampleRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in r.deserialize() {
        out.push(rec?);
    }
    Ok(out)
}

/// One forecasting model per mode-1 fiber, indexed `j + J·k`.
#[derive(Debug, Clone, PartialEq)]
pub struct FiberForecasters {
    shape: (usize, usize),
    models: Vec<ArimaModel>,
}

impl FiberForecasters {
    pub fn new(shape: (usize, usize), models: Vec<ArimaModel>) -> Result<Self> {
        if models.len() != shape.0 * shape.1 {
            return Err(Error::dim(format!(
                "{} fiber models for a {}x{} slice",
                models.len(),
                shape.0,
                shape.1
            )));
        }
        Ok(Self { shape, models })
    }

    /// Gives each fiber a copy of its bucket model, primed on the fiber's
    /// values in `prefix` when given. Zero-bucket fibers always forecast zero.
    pub fn from_buckets(
        assignment: &BucketAssignment,
        models: &[ArimaModel],
        shape: (usize, usize),
        prefix: Option<&DenseTensor>,
    ) -> Result<Self> {
        let (nj, nk) = shape;
        if let Some(p) = prefix {
            if p.dims()[1] != nj || p.dims()[2] != nk {
                return Err(Error::dim(format!(
                    "prefix slices are {}x{}, expected {nj}x{nk}",
                    p.dims()[1],
                    p.dims()[2]
                )));
            }
        }
        let mut fibers = vec![ArimaModel::zero(); nj * nk];
        let mut seen = vec![false; nj * nk];
        for (&(j, k), bucket) in assignment.locations.iter().zip(&assignment.buckets) {
            if j >= nj || k >= nk {
                return Err(Error::dim(format!("fiber ({j}, {k}) outside {nj}x{nk}")));
            }
            let n = j + nj * k;
            seen[n] = true;
            if let Some(b) = bucket {
                let model = models.get(*b).ok_or_else(|| {
                    Error::dim(format!("bucket {b} but only {} models", models.len()))
                })?;
                fibers[n] = match prefix {
                    Some(p) => model.prime(&p.fiber(j, k)),
                    None => model.clone(),
                };
            }
        }
        if let Some(n) = seen.iter().position(|s| !s) {
            return Err(Error::dim(format!("fiber ({}, {}) has no bucket", n % nj, n / nj)));
        }
        Self::new(shape, fibers)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.shape
    }

    pub fn models(&self) -> &[ArimaModel] {
        &self.models
    }

    /// One-step forecast of the next slice. A model whose state is not yet
    /// full repeats its last value.
    pub fn forecast(&self, exec: Exec) -> DMatrix<f64> {
        let values = exec.map_slice(&self.models, |m| {
            m.forecast_one()
                .unwrap_or_else(|_| m.history().last().unwrap_or(0.0))
        });
        DMatrix::from_vec(self.shape.0, self.shape.1, values)
    }

    /// Feeds every model its entry of `slice`.
    pub fn observe(&mut self, slice: &DMatrix<f64>, exec: Exec) {
        let values = slice.as_slice();
        exec.for_each_chunk_mut(&mut self.models, FIBER_CHUNK, |c, chunk| {
            for (n, m) in chunk.iter_mut().enumerate() {
                m.observe(values[c * FIBER_CHUNK + n]);
            }
        });
    }
}

/// Push-based form of the adaptive sampler.
#[derive(Debug, Clone)]
pub struct AdaptiveSampler {
    state: SamplerState,
    forecasters: FiberForecasters,
    next_t: usize,
    exec: Exec,
}

impl AdaptiveSampler {
    pub fn new(state: SamplerState, forecasters: FiberForecasters) -> Self {
        Self {
            state,
            forecasters,
            next_t: 0,
            exec: Exec::default(),
        }
    }

    pub fn with_exec(mut self, exec: Exec) -> Self {
        self.exec = exec;
        self
    }

    pub fn state(&self) -> &SamplerState {
        &self.state
    }

    /// Consumes the next slice; returns a record when it was sampled.
    pub fn push(&mut self, slice: &DMatrix<f64>) -> Result<Option<SampleRecord>> {
        let (nj, nk) = self.forecasters.shape();
        if slice.shape() != (nj, nk) {
            return Err(Error::dim(format!(
                "slice is {}x{}, stream is {nj}x{nk}",
                slice.nrows(),
                slice.ncols()
            )));
        }
        let t = self.next_t;
        self.next_t += 1;
        let forecast = self.forecasters.forecast(self.exec);
        if t != self.state.next_sample() {
            self.forecasters.observe(&forecast, self.exec);
            return Ok(None);
        }
        let e_t = slice_feedback_error(&forecast, slice, self.state.config().delta)?;
        let record = self.state.record(t, e_t)?;
        self.forecasters.observe(slice, self.exec);
        Ok(Some(record))
    }
}

fn assemble(stream: &DenseTensor, log: Vec<SampleRecord>) -> Result<SketchResult> {
    let dims = stream.dims();
    let [_, nj, nk] = dims;
    let mut entries = Vec::with_capacity(log.len() * nj * nk);
    for r in &log {
        for j in 0..nj {
            for k in 0..nk {
                entries.push((r.t, j, k, stream.get(r.t, j, k)));
            }
        }
    }
    Ok(SketchResult {
        sketch: SparseTensor::new(dims, entries)?,
        mask: MaskTensor::from_slices(dims, log.iter().map(|r| r.t))?,
        sample_log: log,
    })
}

/// Runs the adaptive sampler over every slice of `stream` (mode 1 is time).
pub fn sketch_stream(
    stream: &DenseTensor,
    forecasters: FiberForecasters,
    state: SamplerState,
) -> Result<SketchResult> {
    sketch_stream_with(stream, forecasters, state, Exec::default())
}

pub fn sketch_stream_with(
    stream: &DenseTensor,
    forecasters: FiberForecasters,
    state: SamplerState,
    exec: Exec,
) -> Result<SketchResult> {
    let mut sampler = AdaptiveSampler::new(state, forecasters).with_exec(exec);
    let mut log = Vec::new();
    for slice in stream.slices() {
        if let Some(r) = sampler.push(&slice)? {
            log.push(r);
        }
    }
    assemble(stream, log)
}

fn placeholder(t: usize, interval: usize) -> SampleRecord {
    SampleRecord {
        t,
        error: 0.0,
        gamma: 0.0,
        interval,
    }
}

/// Samples `t = 0, interval, 2·interval, …`.
pub fn fixed_rate_sketch(stream: &DenseTensor, interval: usize) -> Result<SketchResult> {
    if interval == 0 {
        return Err(Error::config("fixed interval must be at least 1"));
    }
    let log = (0..stream.dims()[0])
        .step_by(interval)
        .map(|t| placeholder(t, interval))
        .collect();
    assemble(stream, log)
}

/// Keeps each slice independently with probability `keep_fraction`.
pub fn random_sketch(stream: &DenseTensor, keep_fraction: f64, seed: u64) -> Result<SketchResult> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(Error::config(format!(
            "keep fraction must be in (0, 1], got {keep_fraction}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let log = (0..stream.dims()[0])
        .filter(|_| rng.random::<f64>() < keep_fraction)
        .map(|t| placeholder(t, 0))
        .collect();
    assemble(stream, log)
}
