//! `stsketch` command-line driver.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use stsketch::arima::ArimaOrder;
use stsketch::exec::Exec;
use stsketch::ingest::{ingest_csv, parse_bin_width, AxisOrder, GridSpec};
use stsketch::metrics::{fms_with, tcs, Matching};
use stsketch::pipeline::{
    calibrate_on, calibrate_theta, prepare, resolve_xi, run_experiment, run_pipeline, sketch_online,
    DataSource, PipelineConfig, SketchPlan, Strategy, XiSetting,
};
use stsketch::projection::{read_coefficients, write_buckets, write_coefficients, write_models, AggregatedCoefficients};
use stsketch::sketcher::{PidGains, SamplerConfig};
use stsketch::skesmooth::{build_regularizer, complete_tensor, factorize, FactorizationConfig};
use stsketch::synth::{generate, SyntheticSpec};
use stsketch::tensor::{
    read_factors, read_mask, read_tensor, read_tensor_dense, write_factors, write_mask, write_tensor,
    write_tensor_dense,
};

#[derive(Parser)]
#[command(name = "stsketch", version, about = "Adaptive tensor-stream sketching and smooth CP completion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a synthetic tensor with a planted CP model.
    Generate(GenerateArgs),
    /// Rasterize a CSV of point events into a time × grid count tensor.
    Ingest(IngestArgs),
    /// Train fiber models on the prefix, bucket fibers, aggregate AR coefficients.
    TrainModels(TrainArgs),
    /// Sample the online segment of a tensor stream.
    Sketch(SketchArgs),
    /// Smooth weighted CP factorization of a sketch.
    Decompose(DecomposeArgs),
    /// Fill unobserved slices from a factorization.
    Complete(CompleteArgs),
    /// Factor match score and tensor completion score as JSON.
    Metrics(MetricsArgs),
    /// Find θ for target drop rates on the training-prefix replay.
    Calibrate(CalibrateArgs),
    /// Run the seeds × drop rates × strategies grid of a config file.
    Experiment(ConfigArgs),
    /// Run the configured strategy once.
    Run(ConfigArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// TOML spec; the built-in bursty default when absent.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    planted: Option<PathBuf>,
}

#[derive(Args)]
struct IngestArgs {
    #[arg(long)]
    csv: PathBuf,
    /// `nyc` or `LAT_MIN,LAT_MAX,LON_MIN,LON_MAX,CELL[,latlon|lonlat]`.
    #[arg(long, default_value = "nyc")]
    grid: String,
    /// Time bin width such as `1d`, `6h` or `900` (seconds).
    #[arg(long, default_value = "1d")]
    bin: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PrefixArgs {
    /// Full tensor; mode 1 is time.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = 0.6)]
    train_frac: f64,
    /// Number of trained models; defaults to ⌈1% of fibers⌉.
    #[arg(long)]
    models: Option<usize>,
    /// `p,d,q` or `aic`.
    #[arg(long, default_value = "3,0,0")]
    order: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl PrefixArgs {
    fn config(&self) -> Result<PipelineConfig> {
        let mut cfg = PipelineConfig {
            source: DataSource::File(self.input.clone()),
            train_fraction: self.train_frac,
            model_count: self.models,
            model_seed: self.seed,
            ..PipelineConfig::default()
        };
        cfg.factorization.seed = self.seed;
        if self.order == "aic" {
            cfg.select_order = true;
        } else {
            cfg.order = self.order.parse::<ArimaOrder>()?;
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    prefix: PrefixArgs,
    /// Model records, one JSON object per line.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    buckets: Option<PathBuf>,
    #[arg(long)]
    coefficients: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    Adaptive,
    Fixed,
    Random,
}

#[derive(Args)]
struct SketchArgs {
    #[command(flatten)]
    prefix: PrefixArgs,
    #[arg(long, value_enum, default_value = "adaptive")]
    strategy: StrategyArg,
    #[arg(long, default_value_t = 1.0)]
    theta: f64,
    /// Tolerance ξ, or `auto`.
    #[arg(long, default_value = "3.5")]
    xi: String,
    #[arg(long, default_value = "0.7,0.2,0.1")]
    pid: String,
    #[arg(long, default_value_t = 1.0)]
    delta: f64,
    /// Calibrate θ (adaptive) or size the baseline to this drop rate.
    #[arg(long)]
    drop_rate: Option<f64>,
    /// Sampling interval of the fixed strategy.
    #[arg(long, default_value_t = 2)]
    interval: usize,
    /// Keep probability of the random strategy.
    #[arg(long, default_value_t = 0.5)]
    keep: f64,
    #[arg(long)]
    output: PathBuf,
    #[arg(long)]
    mask: PathBuf,
    #[arg(long)]
    log: Option<PathBuf>,
    /// Also write the fully observed online segment, for `metrics --tensor`.
    #[arg(long)]
    online: Option<PathBuf>,
}

#[derive(Args)]
struct DecomposeArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    mask: PathBuf,
    #[arg(long, default_value_t = 5)]
    rank: usize,
    #[arg(long, default_value_t = 600.0)]
    rho: f64,
    /// AR coefficients of the temporal regularizer.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true, conflicts_with = "coefficients")]
    alpha: Option<Vec<f64>>,
    /// Coefficients file written by `train-models`.
    #[arg(long)]
    coefficients: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 500)]
    max_iter: usize,
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
    #[arg(long, default_value_t = 5)]
    memory: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CompleteArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    mask: PathBuf,
    #[arg(long)]
    factors: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum MatchingArg {
    Greedy,
    Optimal,
}

#[derive(Args)]
struct MetricsArgs {
    #[arg(long = "ref")]
    reference: PathBuf,
    #[arg(long)]
    est: PathBuf,
    #[arg(long, requires_all = ["completed", "mask"])]
    tensor: Option<PathBuf>,
    #[arg(long, requires = "tensor")]
    completed: Option<PathBuf>,
    #[arg(long, requires = "tensor")]
    mask: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "greedy")]
    matching: MatchingArg,
}

#[derive(Args)]
struct CalibrateArgs {
    /// Pipeline config; defaults apply when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', required = true)]
    targets: Vec<f64>,
    /// Also write the table as CSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ConfigArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's output directory.
    #[arg(long)]
    output: Option<PathBuf>,
}

/// Runs a reader and names the file on failure.
fn load<T>(path: &Path, read: impl FnOnce(&Path) -> stsketch::error::Result<T>) -> Result<T> {
    read(path).with_context(|| format!("reading {}", path.display()))
}

fn print(value: serde_json::Value) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(&value)?);
    Ok(())
}

fn parse_grid(s: &str) -> Result<GridSpec> {
    if s == "nyc" {
        return Ok(GridSpec::nyc());
    }
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != 5 && parts.len() != 6 {
        bail!("grid must be `nyc` or LAT_MIN,LAT_MAX,LON_MIN,LON_MAX,CELL[,latlon|lonlat]");
    }
    let num = |i: usize| parts[i].parse::<f64>().with_context(|| format!("grid field `{}`", parts[i]));
    let order = match parts.get(5).copied() {
        None | Some("latlon") => AxisOrder::LatLon,
        Some("lonlat") => AxisOrder::LonLat,
        Some(other) => bail!("unknown axis order `{other}`"),
    };
    Ok(GridSpec::new((num(0)?, num(1)?), (num(2)?, num(3)?), num(4)?, order)?)
}

fn generate_cmd(a: GenerateArgs) -> Result<()> {
    let mut spec = match &a.spec {
        Some(p) => SyntheticSpec::load(p)?,
        None => SyntheticSpec::default(),
    };
    if let Some(seed) = a.seed {
        spec.seed = seed;
    }
    let (x, planted) = generate(&spec)?;
    write_tensor_dense(&a.out, &x)?;
    if let Some(p) = &a.planted {
        write_factors(p, &planted)?;
    }
    print(json!({ "dims": x.dims(), "rank": planted.rank() }))
}

fn ingest_cmd(a: IngestArgs) -> Result<()> {
    let grid = parse_grid(&a.grid)?;
    let bin = parse_bin_width(&a.bin)?;
    let (x, stats) = ingest_csv(&a.csv, &grid, bin)?;
    write_tensor_dense(&a.out, &x)?;
    print(json!({
        "dims": x.dims(),
        "rows": stats.rows,
        "accepted": stats.accepted,
        "outside_grid": stats.outside_grid,
        "unparseable": stats.unparseable,
        "first_bin": stats.first_bin,
    }))
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let prepared = prepare(&a.prefix.config()?, Exec::default())?;
    write_models(&a.out, &prepared.trained)?;
    if let Some(p) = &a.buckets {
        write_buckets(p, &prepared.assignment)?;
    }
    if let Some(p) = &a.coefficients {
        write_coefficients(p, &prepared.coefficients)?;
    }
    print(json!({
        "models": prepared.trained.len(),
        "fibers": prepared.assignment.fiber_count(),
        "zero_bucket": prepared.assignment.zero_count,
        "weights": prepared.assignment.weights,
        "alpha_bar": prepared.coefficients.alpha_bar,
    }))
}

fn sketch_cmd(a: SketchArgs) -> Result<()> {
    let mut cfg = a.prefix.config()?;
    cfg.gains = a.pid.parse::<PidGains>()?;
    cfg.theta = a.theta;
    cfg.delta = a.delta;
    cfg.xi = if a.xi == "auto" {
        XiSetting::Auto
    } else {
        XiSetting::Fixed(a.xi.parse().context("--xi must be a number or `auto`")?)
    };
    cfg.validate()?;
    let exec = Exec::default();
    let prepared = prepare(&cfg, exec)?;
    let seed = a.prefix.seed;
    let keep = a.drop_rate.map(|d| 1.0 - d);
    let plan = match a.strategy {
        StrategyArg::Adaptive => {
            let xi = resolve_xi(&cfg, &prepared, exec)?;
            let theta = match a.drop_rate {
                Some(d) => {
                    let base = SamplerConfig::new(cfg.gains, 1.0, xi)?.with_delta(cfg.delta)?;
                    let cal = calibrate_on(&prepared, base, &[d], exec)?[0];
                    match cal.theta {
                        Some(t) => t,
                        None => bail!("drop rate {d} is unattainable (closest {:.3})", cal.achieved),
                    }
                }
                None => a.theta,
            };
            SketchPlan::Adaptive { theta, xi }
        }
        StrategyArg::Fixed => SketchPlan::Fixed {
            interval: keep.map_or(a.interval, |k| ((1.0 / k).round() as usize).max(1)),
        },
        StrategyArg::Random => SketchPlan::Random { keep_fraction: keep.unwrap_or(a.keep), seed },
    };
    let result = sketch_online(&prepared, &cfg, plan, exec)?;
    write_tensor(&a.output, &result.sketch)?;
    write_mask(&a.mask, &result.mask)?;
    if let Some(p) = &a.log {
        result.write_log(p)?;
    }
    if let Some(p) = &a.online {
        write_tensor_dense(p, &prepared.online)?;
    }
    let (theta, xi) = match plan {
        SketchPlan::Adaptive { theta, xi } => (Some(theta), Some(xi)),
        _ => (None, None),
    };
    print(json!({
        "online_slices": result.total(),
        "sampled": result.sampled(),
        "drop_rate": result.drop_rate(),
        "theta": theta,
        "xi": xi,
    }))
}

fn decompose_cmd(a: DecomposeArgs) -> Result<()> {
    let y = load(&a.input, |p| read_tensor(p))?;
    let w = load(&a.mask, |p| read_mask(p))?;
    let coefficients = match (&a.alpha, &a.coefficients) {
        (Some(alpha), _) => AggregatedCoefficients::new(alpha.clone()),
        (None, Some(p)) => load(p, |p| read_coefficients(p))?,
        (None, None) => AggregatedCoefficients::default(),
    };
    let l = build_regularizer(&coefficients, y.dims()[0])?;
    let config = FactorizationConfig {
        rank: a.rank,
        rho: a.rho,
        max_iterations: a.max_iter,
        gradient_tolerance: a.tol,
        seed: a.seed,
        lbfgs_memory: a.memory,
    };
    let result = factorize(&y, &w, &config, &l)?;
    write_factors(&a.out, &result.model)?;
    if !result.converged {
        log::warn!("{}", result.diagnostic.as_deref().unwrap_or("did not converge"));
    }
    print(json!({
        "objective": result.objective(),
        "iterations": result.iterations,
        "converged": result.converged,
        "diagnostic": result.diagnostic,
    }))
}

fn complete_cmd(a: CompleteArgs) -> Result<()> {
    let y = load(&a.input, |p| read_tensor(p))?;
    let w = load(&a.mask, |p| read_mask(p))?;
    let model = load(&a.factors, |p| read_factors(p))?;
    let x = complete_tensor(&y, &w, &model)?;
    write_tensor_dense(&a.out, &x)?;
    print(json!({ "dims": x.dims() }))
}

fn metrics_cmd(a: MetricsArgs) -> Result<()> {
    let how = match a.matching {
        MatchingArg::Greedy => Matching::Greedy,
        MatchingArg::Optimal => Matching::Optimal,
    };
    let report = fms_with(&load(&a.reference, |p| read_factors(p))?, &load(&a.est, |p| read_factors(p))?, how)?;
    let score = match (&a.tensor, &a.completed, &a.mask) {
        (Some(t), Some(c), Some(m)) => Some(tcs(&load(t, |p| read_tensor_dense(p))?, &load(c, |p| read_tensor_dense(p))?, &load(m, |p| read_mask(p))?)?),
        _ => None,
    };
    print(json!({
        "fms": report.fms,
        "tcs": score,
        "matching": report.matching,
        "congruences": report.congruences,
    }))
}

fn load_config(path: &Path, output: Option<PathBuf>) -> Result<PipelineConfig> {
    let mut cfg = PipelineConfig::load(path).with_context(|| format!("reading {}", path.display()))?;
    if let Some(o) = output {
        cfg.output = o;
    }
    Ok(cfg)
}

fn calibrate_cmd(a: CalibrateArgs) -> Result<()> {
    let cfg = match &a.config {
        Some(p) => load_config(p, None)?,
        None => PipelineConfig::default(),
    };
    let table = calibrate_theta(&cfg, &a.targets)?;
    if let Some(p) = &a.out {
        let mut w = String::from("target,theta,achieved,attained\n");
        for c in &table {
            let theta = c.theta.map(|t| t.to_string()).unwrap_or_default();
            w.push_str(&format!("{},{},{},{}\n", c.target, theta, c.achieved, c.attained()));
        }
        std::fs::write(p, w)?;
    }
    for c in table.iter().filter(|c| !c.attained()) {
        log::warn!("drop rate {} is unattainable; closest {:.3}", c.target, c.achieved);
    }
    print(serde_json::to_value(&table)?)
}

fn summarize(report: &stsketch::pipeline::ExperimentReport, cfg: &PipelineConfig) -> Result<()> {
    let means: serde_json::Map<String, serde_json::Value> = report
        .mean_fms()
        .into_iter()
        .map(|(s, m): (Strategy, f64)| (s.to_string(), json!(m)))
        .collect();
    print(json!({
        "runs": report.records.len(),
        "mean_fms": means,
        "report": cfg.output.join("report.json"),
    }))
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().command {
        Command::Generate(a) => generate_cmd(a),
        Command::Ingest(a) => ingest_cmd(a),
        Command::TrainModels(a) => train_cmd(a),
        Command::Sketch(a) => sketch_cmd(a),
        Command::Decompose(a) => decompose_cmd(a),
        Command::Complete(a) => complete_cmd(a),
        Command::Metrics(a) => metrics_cmd(a),
        Command::Calibrate(a) => calibrate_cmd(a),
        Command::Experiment(a) => {
            let cfg = load_config(&a.config, a.output)?;
            summarize(&run_experiment(&cfg)?, &cfg)
        }
        Command::Run(a) => {
            let cfg = load_config(&a.config, a.output)?;
            summarize(&run_pipeline(&cfg)?, &cfg)
        }
    }
}
