//! Random projection of fibers onto a few trained ARIMA models.
//!
//! `L` models are fit on randomly drawn fibers; every fiber then joins the
//! bucket of the model with the smallest one-step-ahead RMSE on its training
//! window. Bucket sizes weight the average of the AR coefficients that feeds
//! the temporal regularizer.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arima::{fit_arima, select_order, ArimaModel, ArimaOrder, FiberSeries};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::tensor::DenseTensor;

/// Aggregate AR(3) coefficients used when no data-driven aggregation is run
/// (fit on daily NYC taxi pickups).
pub const DEFAULT_AR_COEFFICIENTS: [f64; 3] = [0.55, -0.19, 0.04];

/// Mode-1 fibers of `t` in storage order (`j` fastest).
pub fn fibers(t: &DenseTensor) -> Vec<FiberSeries> {
    let [_, nj, nk] = t.dims();
    let mut out = Vec::with_capacity(nj * nk);
    for k in 0..nk {
        for j in 0..nj {
            out.push(FiberSeries::from_values((j, k), &t.fiber(j, k)).expect("finite tensor"));
        }
    }
    out
}

/// `max(1, ⌈0.01 · M⌉)`.
pub fn default_model_count(fiber_count: usize) -> usize {
    fiber_count.div_ceil(100).max(1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    /// Fiber the model was fit on.
    pub fiber: (usize, usize),
    pub model: ArimaModel,
}

pub fn train_random_models(
    fibers: &[FiberSeries],
    count: usize,
    order: ArimaOrder,
    seed: u64,
) -> Result<Vec<TrainedModel>> {
    train_random_models_with(fibers, count, order, seed, Exec::default())
}

/// Fits `count` models on distinct fibers drawn without replacement.
///
/// All-zero fibers and fibers the fit rejects are skipped and replaced by the
/// next draw.
pub fn train_random_models_with(
    fibers: &[FiberSeries],
    count: usize,
    order: ArimaOrder,
    seed: u64,
    exec: Exec,
) -> Result<Vec<TrainedModel>> {
    train_drawn(fibers, count, seed, exec, &format!("ARIMA{order}"), |f| fit_arima(f, order))
}

/// Like [`train_random_models_with`], but each model takes the lowest-AIC
/// order of `grid`.
pub fn train_selected_models_with(
    fibers: &[FiberSeries],
    count: usize,
    grid: &[ArimaOrder],
    seed: u64,
    exec: Exec,
) -> Result<Vec<TrainedModel>> {
    train_drawn(fibers, count, seed, exec, "ARIMA", |f| select_order(&f.values(), grid))
}

fn train_drawn<F>(
    fibers: &[FiberSeries],
    count: usize,
    seed: u64,
    exec: Exec,
    label: &str,
    fit: F,
) -> Result<Vec<TrainedModel>>
where
    F: Fn(&FiberSeries) -> Result<ArimaModel> + Sync,
{
    if count == 0 || count > fibers.len() {
        return Err(Error::config(format!(
            "model count must be in 1..={}, got {count}",
            fibers.len()
        )));
    }
    let mut order_of_draws: Vec<usize> = (0..fibers.len()).collect();
    order_of_draws.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let mut trained = Vec::with_capacity(count);
    let mut cursor = 0;
    while trained.len() < count && cursor < order_of_draws.len() {
        let need = count - trained.len();
        let batch = &order_of_draws[cursor..(cursor + need).min(order_of_draws.len())];
        cursor += batch.len();
        let fits = exec.map_slice(batch, |&n| {
            let fiber = &fibers[n];
            if fiber.is_all_zero() {
                return None;
            }
            fit(fiber).ok().map(|model| TrainedModel {
                fiber: fiber.location(),
                model,
            })
        });
        trained.extend(fits.into_iter().flatten());
    }
    if trained.len() < count {
        return Err(Error::config(format!(
            "only {} of {} fibers admit an {label} fit, {count} requested",
            trained.len(),
            fibers.len()
        )));
    }
    Ok(trained)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BucketAssignment {
    /// Fiber locations in the order they were assigned.
    pub locations: Vec<(usize, usize)>,
    /// Bucket per fiber; `None` is the zero bucket for all-zero fibers.
    pub buckets: Vec<Option<usize>>,
    /// Fibers per model bucket.
    pub weights: Vec<usize>,
    /// Fibers in the zero bucket. `Σ weights + zero_count` is the fiber count.
    pub zero_count: usize,
}

impl BucketAssignment {
    pub fn bucket_count(&self) -> usize {
        self.weights.len()
    }

    pub fn fiber_count(&self) -> usize {
        self.buckets.len()
    }
}

pub fn assign_buckets(fibers: &[FiberSeries], models: &[ArimaModel]) -> Result<BucketAssignment> {
    assign_buckets_with(fibers, models, Exec::default())
}

/// Maps every fiber to the model with the lowest one-step-ahead RMSE over the
/// fiber's whole window; ties go to the lower bucket index.
pub fn assign_buckets_with(
    fibers: &[FiberSeries],
    models: &[ArimaModel],
    exec: Exec,
) -> Result<BucketAssignment> {
    if models.is_empty() {
        return Err(Error::config("bucketing needs at least one model"));
    }
    let buckets = exec.map_slice(fibers, |fiber| {
        if fiber.is_all_zero() {
            return None;
        }
        let values = fiber.values();
        let mut best = 0;
        let mut best_rmse = f64::INFINITY;
        for (i, m) in models.iter().enumerate() {
            let rmse = m.one_step_rmse(&values);
            if rmse < best_rmse {
                best = i;
                best_rmse = rmse;
            }
        }
        Some(best)
    });
    let mut weights = vec![0; models.len()];
    let mut zero_count = 0;
    for b in &buckets {
        match b {
            Some(i) => weights[*i] += 1,
            None => zero_count += 1,
        }
    }
    Ok(BucketAssignment {
        locations: fibers.iter().map(FiberSeries::location).collect(),
        buckets,
        weights,
        zero_count,
    })
}

/// Bucket-weighted mean of the AR coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregatedCoefficients {
    pub p: usize,
    pub alpha_bar: Vec<f64>,
}

impl AggregatedCoefficients {
    pub fn new(alpha_bar: Vec<f64>) -> Self {
        Self {
            p: alpha_bar.len(),
            alpha_bar,
        }
    }
}

impl Default for AggregatedCoefficients {
    fn default() -> Self {
        Self::new(DEFAULT_AR_COEFFICIENTS.to_vec())
    }
}

/// `ᾱ_j = Σ_i w_i α_{i,j} / Σ_i w_i`, with `α_{i,j} = 0` past model i's order.
pub fn aggregate_coefficients(
    assignment: &BucketAssignment,
    models: &[ArimaModel],
    p: usize,
) -> Result<AggregatedCoefficients> {
    if assignment.weights.len() != models.len() {
        return Err(Error::dim(format!(
            "{} bucket weights for {} models",
            assignment.weights.len(),
            models.len()
        )));
    }
    let total: usize = assignment.weights.iter().sum();
    if total == 0 {
        return Err(Error::config("no fiber was assigned to a model bucket"));
    }
    let mut alpha_bar = vec![0.0; p];
    for (m, &w) in models.iter().zip(&assignment.weights) {
        if w == 0 {
            continue;
        }
        if m.alpha().len() > p {
            return Err(Error::config(format!(
                "model has {} AR lags, aggregate order is {p}",
                m.alpha().len()
            )));
        }
        for (j, a) in m.alpha().iter().enumerate() {
            alpha_bar[j] += w as f64 * a;
        }
    }
    for a in &mut alpha_bar {
        *a /= total as f64;
    }
    Ok(AggregatedCoefficients { p, alpha_bar })
}

/// One JSON record per line: `{"id", "fiber", "model"}`.
pub fn write_models(path: impl AsRef<Path>, models: &[TrainedModel]) -> Result<()> {
    #[derive(Serialize)]
    struct Record<'a> {
        id: usize,
        #[serde(flatten)]
        model: &'a TrainedModel,
    }
    let mut w = BufWriter::new(File::create(path)?);
    for (id, model) in models.iter().enumerate() {
        serde_json::to_writer(&mut w, &Record { id, model })?;
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_models(path: impl AsRef<Path>) -> Result<Vec<TrainedModel>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

/// `j k bucket` lines; the zero bucket is written as `-1`.
pub fn write_buckets(path: impl AsRef<Path>, assignment: &BucketAssignment) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for (&(j, k), b) in assignment.locations.iter().zip(&assignment.buckets) {
        match b {
            Some(i) => writeln!(w, "{j} {k} {i}")?,
            None => writeln!(w, "{j} {k} -1")?,
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a bucket file; `bucket_count` sizes the weight vector.
pub fn read_buckets(path: impl AsRef<Path>, bucket_count: usize) -> Result<BucketAssignment> {
    let path = path.as_ref();
    let reader = BufReader::new(File::open(path)?);
    let mut locations = Vec::new();
    let mut buckets = Vec::new();
    let mut weights = vec![0; bucket_count];
    let mut zero_count = 0;
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: &str| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            msg: msg.to_string(),
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [j, k, b] = fields.as_slice() else {
            return Err(err("expected `j k bucket`"));
        };
        let j: usize = j.parse().map_err(|_| err("bad j"))?;
        let k: usize = k.parse().map_err(|_| err("bad k"))?;
        let b: i64 = b.parse().map_err(|_| err("bad bucket"))?;
        locations.push((j, k));
        if b < 0 {
            buckets.push(None);
            zero_count += 1;
        } else {
            let b = b as usize;
            if b >= bucket_count {
                return Err(err("bucket index out of range"));
            }
            weights[b] += 1;
            buckets.push(Some(b));
        }
    }
    Ok(BucketAssignment {
        locations,
        buckets,
        weights,
        zero_count,
    })
}

pub fn write_coefficients(path: impl AsRef<Path>, coeffs: &AggregatedCoefficients) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, coeffs)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

pub fn read_coefficients(path: impl AsRef<Path>) -> Result<AggregatedCoefficients> {
    Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand_distr::{Distribution, Normal};

    fn ar_series(alpha: &[f64], c: f64, n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 0.2).unwrap();
        let mut x = vec![0.0; n + 100];
        for t in 0..x.len() {
            let mut v = c + noise.sample(&mut rng);
            for (j, a) in alpha.iter().enumerate() {
                if t > j {
                    v += a * x[t - j - 1];
                }
            }
            x[t] = v;
        }
        x.split_off(100)
    }

    fn fiber(j: usize, values: &[f64]) -> FiberSeries {
        FiberSeries::from_values((j, 0), values).unwrap()
    }

    #[test]
    fn full_training_covers_every_fiber() {
        let fibers: Vec<_> = (0..5)
            .map(|j| fiber(j, &ar_series(&[0.5], 1.0, 60, j as u64)))
            .collect();
        let models = train_random_models(&fibers, 5, ArimaOrder::new(1, 0, 0), 3).unwrap();
        let mut sources: Vec<_> = models.iter().map(|m| m.fiber.0).collect();
        sources.sort();
        assert_eq!(sources, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn training_is_seed_deterministic_and_skips_zero_fibers() {
        let mut fibers: Vec<_> = (0..6)
            .map(|j| fiber(j, &ar_series(&[0.5], 1.0, 60, j as u64)))
            .collect();
        fibers.push(fiber(6, &[0.0; 60]));
        let a = train_random_models(&fibers, 3, ArimaOrder::new(2, 0, 0), 42).unwrap();
        let b = train_random_models(&fibers, 3, ArimaOrder::new(2, 0, 0), 42).unwrap();
        assert_eq!(a, b);
        let all = train_random_models(&fibers, 6, ArimaOrder::new(2, 0, 0), 1).unwrap();
        assert!(all.iter().all(|m| m.fiber.0 != 6));
        assert!(matches!(
            train_random_models(&fibers, 7, ArimaOrder::new(2, 0, 0), 1),
            Err(Error::Config(_))
        ));
        assert!(train_random_models(&fibers, 0, ArimaOrder::new(2, 0, 0), 1).is_err());
    }

    #[test]
    fn selected_orders_come_from_the_grid() {
        let fibers: Vec<_> = (0..4)
            .map(|j| fiber(j, &ar_series(&[0.6, -0.3], 1.0, 300, j as u64)))
            .collect();
        let grid = crate::arima::default_order_grid();
        let models = train_selected_models_with(&fibers, 4, &grid, 0, Exec::Sequential).unwrap();
        assert_eq!(models.len(), 4);
        assert!(models.iter().all(|m| grid.contains(&m.model.order())));
        assert!(models.iter().any(|m| m.model.order().p >= 2));
    }

    #[test]
    fn single_model_takes_every_fiber() {
        let fibers: Vec<_> = (0..4)
            .map(|j| fiber(j, &ar_series(&[0.3], 0.0, 50, j as u64)))
            .collect();
        let models = train_random_models(&fibers, 1, ArimaOrder::new(1, 0, 0), 0).unwrap();
        let only: Vec<_> = models.into_iter().map(|m| m.model).collect();
        let assignment = assign_buckets(&fibers, &only).unwrap();
        assert!(assignment.buckets.iter().all(|b| *b == Some(0)));
        assert_eq!(assignment.weights, vec![4]);

        let twins = vec![only[0].clone(), only[0].clone()];
        let assignment = assign_buckets(&fibers, &twins).unwrap();
        assert!(assignment.buckets.iter().all(|b| *b == Some(0)));
        assert!(assign_buckets(&fibers, &[]).is_err());
    }

    #[test]
    fn two_process_buckets_are_pure() {
        let smooth = ArimaModel::new(ArimaOrder::new(1, 0, 0), vec![0.9], vec![], 0.0).unwrap();
        let rough = ArimaModel::new(ArimaOrder::new(1, 0, 0), vec![-0.7], vec![], 0.0).unwrap();
        let mut fibers = Vec::new();
        for j in 0..40 {
            let alpha = if j % 2 == 0 { 0.9 } else { -0.7 };
            fibers.push(fiber(j, &ar_series(&[alpha], 0.0, 80, 100 + j as u64)));
        }
        let assignment = assign_buckets(&fibers, &[smooth, rough]).unwrap();
        let pure = assignment
            .buckets
            .iter()
            .enumerate()
            .filter(|(j, b)| **b == Some(j % 2))
            .count();
        assert!(pure as f64 >= 0.9 * 40.0, "purity {pure}/40");
        assert_eq!(assignment.weights.iter().sum::<usize>(), 40);
    }

    #[test]
    fn chosen_bucket_never_fits_worse() {
        let fibers: Vec<_> = (0..12)
            .map(|j| fiber(j, &ar_series(&[0.2 + 0.05 * j as f64], 1.0, 60, j as u64)))
            .collect();
        let models: Vec<_> = train_random_models(&fibers, 4, ArimaOrder::new(1, 0, 0), 5)
            .unwrap()
            .into_iter()
            .map(|m| m.model)
            .collect();
        let assignment = assign_buckets(&fibers, &models).unwrap();
        for (f, b) in fibers.iter().zip(&assignment.buckets) {
            let chosen = models[b.unwrap()].one_step_rmse(&f.values());
            for m in &models {
                assert!(chosen <= m.one_step_rmse(&f.values()));
            }
        }
    }

    #[test]
    fn zero_fibers_go_to_zero_bucket() {
        let fibers = vec![fiber(0, &[0.0; 30]), fiber(1, &ar_series(&[0.5], 1.0, 30, 1))];
        let m = ArimaModel::new(ArimaOrder::new(1, 0, 0), vec![0.5], vec![], 1.0).unwrap();
        let a = assign_buckets(&fibers, &[m]).unwrap();
        assert_eq!(a.buckets, vec![None, Some(0)]);
        assert_eq!(a.zero_count, 1);
        assert_eq!(a.weights, vec![1]);
    }

    fn ar_model(alpha: &[f64]) -> ArimaModel {
        ArimaModel::new(ArimaOrder::new(alpha.len(), 0, 0), alpha.to_vec(), vec![], 0.0).unwrap()
    }

    fn assignment_with(weights: Vec<usize>) -> BucketAssignment {
        let mut buckets = Vec::new();
        for (i, &w) in weights.iter().enumerate() {
            buckets.extend(std::iter::repeat_n(Some(i), w));
        }
        BucketAssignment {
            locations: (0..buckets.len()).map(|j| (j, 0)).collect(),
            buckets,
            weights,
            zero_count: 0,
        }
    }

    #[test]
    fn weighted_mean_of_coefficients() {
        let models = vec![ar_model(&[0.6]), ar_model(&[0.2])];
        let agg = aggregate_coefficients(&assignment_with(vec![3, 1]), &models, 1).unwrap();
        assert_abs_diff_eq!(agg.alpha_bar[0], 0.5, epsilon = 1e-15);

        let single = aggregate_coefficients(&assignment_with(vec![2]), &[ar_model(&[0.3, -0.1])], 2)
            .unwrap();
        assert_eq!(single.alpha_bar, vec![0.3, -0.1]);

        // shorter orders are zero-padded
        let mixed = vec![ar_model(&[0.4]), ar_model(&[0.2, 0.2])];
        let agg = aggregate_coefficients(&assignment_with(vec![1, 1]), &mixed, 2).unwrap();
        assert_abs_diff_eq!(agg.alpha_bar[0], 0.3, epsilon = 1e-15);
        assert_abs_diff_eq!(agg.alpha_bar[1], 0.1, epsilon = 1e-15);

        assert!(aggregate_coefficients(&assignment_with(vec![0, 0]), &mixed, 2).is_err());
        assert!(aggregate_coefficients(&assignment_with(vec![1, 1]), &mixed, 1).is_err());
        assert_eq!(AggregatedCoefficients::default().alpha_bar, vec![0.55, -0.19, 0.04]);
    }

    #[test]
    fn aggregation_ignores_bucket_labels() {
        let models = vec![ar_model(&[0.6, 0.1]), ar_model(&[0.2, -0.3]), ar_model(&[0.9, 0.0])];
        let a = aggregate_coefficients(&assignment_with(vec![3, 1, 5]), &models, 2).unwrap();
        let swapped = vec![models[2].clone(), models[0].clone(), models[1].clone()];
        let b = aggregate_coefficients(&assignment_with(vec![5, 3, 1]), &swapped, 2).unwrap();
        for (x, y) in a.alpha_bar.iter().zip(&b.alpha_bar) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-15);
        }
    }

    #[test]
    fn parallel_and_sequential_agree() {
        let fibers: Vec<_> = (0..30)
            .map(|j| fiber(j, &ar_series(&[0.4], 1.0, 50, j as u64)))
            .collect();
        let runs: Vec<_> = Exec::available()
            .into_iter()
            .map(|exec| {
                let models: Vec<_> =
                    train_random_models_with(&fibers, 5, ArimaOrder::new(2, 0, 0), 8, exec)
                        .unwrap()
                        .into_iter()
                        .map(|m| m.model)
                        .collect();
                (models.clone(), assign_buckets_with(&fibers, &models, exec).unwrap())
            })
            .collect();
        assert!(runs.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let fibers: Vec<_> = (0..6)
            .map(|j| fiber(j, &ar_series(&[0.5], 1.0, 40, j as u64)))
            .chain([fiber(6, &[0.0; 40])])
            .collect();
        let trained = train_random_models(&fibers, 2, ArimaOrder::new(1, 0, 1), 0).unwrap();
        write_models(dir.path().join("m.jsonl"), &trained).unwrap();
        assert_eq!(read_models(dir.path().join("m.jsonl")).unwrap(), trained);

        let models: Vec<_> = trained.into_iter().map(|t| t.model).collect();
        let a = assign_buckets(&fibers, &models).unwrap();
        write_buckets(dir.path().join("b.txt"), &a).unwrap();
        assert_eq!(read_buckets(dir.path().join("b.txt"), 2).unwrap(), a);

        let agg = aggregate_coefficients(&a, &models, 1).unwrap();
        write_coefficients(dir.path().join("c.json"), &agg).unwrap();
        assert_eq!(read_coefficients(dir.path().join("c.json")).unwrap(), agg);
    }

    #[test]
    fn default_count() {
        assert_eq!(default_model_count(1), 1);
        assert_eq!(default_model_count(100), 1);
        assert_eq!(default_model_count(101), 2);
        assert_eq!(default_model_count(24000), 240);
    }
}
