//! Per-fiber ARIMA(p, d, q) models.
//!
//! The differenced series `w = ∇^d x` follows
//! `w_t = c + Σ α_j w_{t-j} + ε_t + Σ β_j ε_{t-j}`. Coefficients are fit by
//! Hannan–Rissanen conditional least squares: a long autoregression supplies
//! residual estimates, then `w_t` is regressed on its own lags and the lagged
//! residuals. For `q = 0` the second stage alone is an exact conditional
//! least-squares AR fit.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Extra observations required beyond `p + d + q`.
pub const MIN_EXTRA_SAMPLES: usize = 10;
/// Normal equations with a condition estimate above this get a ridge term.
pub const RIDGE_CONDITION_LIMIT: f64 = 1e12;
/// Ridge strength relative to `trace(XᵀX) / ncols`.
pub const RIDGE_SCALE: f64 = 1e-8;
/// Default sanity bound δ of the slice feedback error.
pub const DEFAULT_DELTA: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ArimaOrder {
    pub p: usize,
    pub d: usize,
    pub q: usize,
}

impl ArimaOrder {
    pub const fn new(p: usize, d: usize, q: usize) -> Self {
        Self { p, d, q }
    }

    pub fn min_samples(&self) -> usize {
        self.p + self.d + self.q + MIN_EXTRA_SAMPLES
    }
}

impl Default for ArimaOrder {
    /// Three AR lags, no differencing, no MA part.
    fn default() -> Self {
        Self::new(3, 0, 0)
    }
}

impl std::fmt::Display for ArimaOrder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{},{},{}", self.p, self.d, self.q)
    }
}

impl std::str::FromStr for ArimaOrder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<usize> = s
            .split(',')
            .map(|p| p.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::domain(format!("cannot parse ARIMA order `{s}`")))?;
        match parts.as_slice() {
            &[p, d, q] => Ok(Self::new(p, d, q)),
            _ => Err(Error::domain(format!("ARIMA order needs p,d,q, got `{s}`"))),
        }
    }
}

/// One spatial location's time series, `X(:, j, k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FiberSeries {
    location: (usize, usize),
    observations: Vec<(usize, f64)>,
}

impl FiberSeries {
    pub fn new(location: (usize, usize), observations: Vec<(usize, f64)>) -> Result<Self> {
        if let Some(w) = observations.windows(2).find(|w| w[1].0 <= w[0].0) {
            return Err(Error::Ordering {
                t: w[1].0,
                last: w[0].0,
            });
        }
        if observations.iter().any(|(_, v)| !v.is_finite()) {
            return Err(Error::domain("fiber values must be finite"));
        }
        Ok(Self {
            location,
            observations,
        })
    }

    /// Contiguous series with timestamps `0..values.len()`.
    pub fn from_values(location: (usize, usize), values: &[f64]) -> Result<Self> {
        Self::new(location, values.iter().copied().enumerate().collect())
    }

    pub fn location(&self) -> (usize, usize) {
        self.location
    }

    pub fn observations(&self) -> &[(usize, f64)] {
        &self.observations
    }

    pub fn values(&self) -> Vec<f64> {
        self.observations.iter().map(|o| o.1).collect()
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn is_all_zero(&self) -> bool {
        self.observations.iter().all(|o| o.1 == 0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArimaModel {
    order: ArimaOrder,
    alpha: Vec<f64>,
    beta: Vec<f64>,
    c: f64,
    /// Last `p + d` observations on the original scale.
    history: VecDeque<f64>,
    /// Last `q` residuals.
    residuals: VecDeque<f64>,
}

impl ArimaModel {
    pub fn new(order: ArimaOrder, alpha: Vec<f64>, beta: Vec<f64>, c: f64) -> Result<Self> {
        if alpha.len() != order.p || beta.len() != order.q {
            return Err(Error::dim(format!(
                "order {order} needs {} AR and {} MA coefficients, got {} and {}",
                order.p,
                order.q,
                alpha.len(),
                beta.len()
            )));
        }
        if !alpha.iter().chain(&beta).all(|v| v.is_finite()) || !c.is_finite() {
            return Err(Error::domain("coefficients must be finite"));
        }
        Ok(Self {
            order,
            alpha,
            beta,
            c,
            history: VecDeque::new(),
            residuals: VecDeque::new(),
        })
    }

    /// Always forecasts zero.
    pub fn zero() -> Self {
        Self::new(ArimaOrder::new(0, 0, 0), Vec::new(), Vec::new(), 0.0)
            .expect("empty model is valid")
    }

    /// Replaces the state with explicit history and residuals (oldest first).
    pub fn with_state(mut self, history: &[f64], residuals: &[f64]) -> Self {
        self.history.clear();
        self.residuals.clear();
        for &x in history {
            self.push_history(x);
        }
        for &e in residuals {
            self.push_residual(e);
        }
        self
    }

    pub fn order(&self) -> ArimaOrder {
        self.order
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn bias(&self) -> f64 {
        self.c
    }

    pub fn history(&self) -> impl Iterator<Item = f64> + '_ {
        self.history.iter().copied()
    }

    pub fn residuals(&self) -> impl Iterator<Item = f64> + '_ {
        self.residuals.iter().copied()
    }

    fn history_window(&self) -> usize {
        self.order.p + self.order.d
    }

    fn push_history(&mut self, x: f64) {
        self.history.push_back(x);
        while self.history.len() > self.history_window() {
            self.history.pop_front();
        }
    }

    fn push_residual(&mut self, e: f64) {
        if self.order.q == 0 {
            return;
        }
        self.residuals.push_back(e);
        while self.residuals.len() > self.order.q {
            self.residuals.pop_front();
        }
    }

    fn ready(&self) -> bool {
        self.history.len() >= self.history_window() && self.residuals.len() >= self.order.q
    }

    /// One-step-ahead prediction with the future innovation set to zero,
    /// integrated back to the original scale.
    pub fn forecast_one(&self) -> Result<f64> {
        if !self.ready() {
            return Err(Error::State(format!(
                "order {} needs {} past values and {} residuals, have {} and {}",
                self.order,
                self.history_window(),
                self.order.q,
                self.history.len(),
                self.residuals.len()
            )));
        }
        let ArimaOrder { p, d, q } = self.order;
        let mut w: Vec<f64> = self.history.iter().copied().collect();
        for _ in 0..d {
            w = w.windows(2).map(|v| v[1] - v[0]).collect();
        }
        let mut next = self.c;
        for j in 1..=p {
            next += self.alpha[j - 1] * w[w.len() - j];
        }
        let res = &self.residuals;
        for j in 1..=q {
            next += self.beta[j - 1] * res[res.len() - j];
        }
        // x_t = ∇^d x_t - Σ_{k=1..d} (-1)^k C(d, k) x_{t-k}
        let h = &self.history;
        let mut binom = 1.0;
        for k in 1..=d {
            binom = binom * (d + 1 - k) as f64 / k as f64;
            let sign = if k % 2 == 1 { 1.0 } else { -1.0 };
            next += sign * binom * h[h.len() - k];
        }
        Ok(next)
    }

    /// Appends an observation and returns its residual against the previous
    /// forecast (zero while the state is still warming up).
    pub fn observe(&mut self, observed: f64) -> f64 {
        let residual = self.forecast_one().map(|f| observed - f).unwrap_or(0.0);
        self.push_history(observed);
        self.push_residual(residual);
        residual
    }

    /// Non-mutating [`ArimaModel::observe`].
    pub fn update_state(&self, observed: f64) -> ArimaModel {
        let mut next = self.clone();
        next.observe(observed);
        next
    }

    /// Feeds the model its own forecast (residual zero) and returns it.
    pub fn free_run(&mut self) -> Result<f64> {
        let f = self.forecast_one()?;
        self.push_history(f);
        self.push_residual(0.0);
        Ok(f)
    }

    /// Same coefficients, state rebuilt by filtering `values`.
    pub fn prime(&self, values: &[f64]) -> ArimaModel {
        let mut m = self.clone().with_state(&[], &[]);
        for &x in values {
            m.observe(x);
        }
        m
    }

    /// Sum of squared one-step-ahead errors over `values` (filtered from an
    /// empty state) and the number of predicted points.
    pub fn one_step_sse(&self, values: &[f64]) -> (f64, usize) {
        let mut m = self.clone().with_state(&[], &[]);
        let mut sse = 0.0;
        let mut n = 0;
        for &x in values {
            if let Ok(f) = m.forecast_one() {
                sse += (x - f) * (x - f);
                n += 1;
            }
            m.observe(x);
        }
        (sse, n)
    }

    /// Root mean squared one-step-ahead error; infinite when nothing is predicted.
    pub fn one_step_rmse(&self, values: &[f64]) -> f64 {
        match self.one_step_sse(values) {
            (_, 0) => f64::INFINITY,
            (sse, n) => (sse / n as f64).sqrt(),
        }
    }
}

fn difference(values: &[f64], d: usize) -> Vec<f64> {
    let mut w = values.to_vec();
    for _ in 0..d {
        w = w.windows(2).map(|v| v[1] - v[0]).collect();
    }
    w
}

/// Least squares through the normal equations, ridge-stabilized when the
/// condition estimate exceeds [`RIDGE_CONDITION_LIMIT`].
pub(crate) fn least_squares(design: &DMatrix<f64>, target: &DVector<f64>) -> Result<DVector<f64>> {
    let ncols = design.ncols();
    let mut gram = design.transpose() * design;
    let rhs = design.transpose() * target;
    let eig = SymmetricEigen::new(gram.clone());
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    if min <= 0.0 || max / min > RIDGE_CONDITION_LIMIT {
        let ridge = RIDGE_SCALE * gram.trace() / ncols as f64;
        let ridge = if ridge > 0.0 { ridge } else { RIDGE_SCALE };
        for i in 0..ncols {
            gram[(i, i)] += ridge;
        }
    }
    let solution = match gram.clone().cholesky() {
        Some(ch) => ch.solve(&rhs),
        None => gram
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::domain("singular regression"))?,
    };
    if solution.iter().any(|v| !v.is_finite()) {
        return Err(Error::domain("regression produced non-finite coefficients"));
    }
    Ok(solution)
}

/// Regresses `w_t` on `[1, w_{t-1..t-p}, e_{t-1..t-q}]` for `t ∈ start..w.len()`.
fn lagged_regression(
    w: &[f64],
    resid: Option<&[f64]>,
    p: usize,
    q: usize,
    start: usize,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let rows = w.len().saturating_sub(start);
    let cols = 1 + p + q;
    if rows < cols + 1 {
        return Err(Error::InsufficientData {
            needed: start + cols + 1,
            got: w.len(),
        });
    }
    let design = DMatrix::from_fn(rows, cols, |row, col| {
        let t = start + row;
        match col {
            0 => 1.0,
            c if c <= p => w[t - c],
            c => resid.expect("residuals present when q > 0")[t - (c - p)],
        }
    });
    let target = DVector::from_fn(rows, |row, _| w[start + row]);
    let beta = least_squares(&design, &target)?;
    Ok((
        beta[0],
        beta.rows(1, p).iter().copied().collect(),
        beta.rows(1 + p, q).iter().copied().collect(),
    ))
}

/// Fits ARIMA(p, d, q) on `series` and primes the state with it.
pub fn fit_arima(series: &FiberSeries, order: ArimaOrder) -> Result<ArimaModel> {
    fit_values(&series.values(), order)
}

pub fn fit_values(values: &[f64], order: ArimaOrder) -> Result<ArimaModel> {
    let ArimaOrder { p, d, q } = order;
    let n = values.len();
    if n < order.min_samples() {
        return Err(Error::InsufficientData {
            needed: order.min_samples(),
            got: n,
        });
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::domain("series values must be finite"));
    }
    let w = difference(values, d);
    let (c, alpha, beta) = if q == 0 {
        lagged_regression(&w, None, p, 0, p)?
    } else {
        // Stage 1: long autoregression for residual estimates.
        let long = (n / 4).clamp(1, 20);
        let (c1, a1, _) = lagged_regression(&w, None, long, 0, long)?;
        let mut resid = vec![0.0; w.len()];
        for t in long..w.len() {
            let fit: f64 = c1 + (1..=long).map(|j| a1[j - 1] * w[t - j]).sum::<f64>();
            resid[t] = w[t] - fit;
        }
        // Stage 2: lags of w and of the stage-1 residuals.
        lagged_regression(&w, Some(&resid), p, q, long + p.max(q))?
    };
    Ok(ArimaModel::new(order, alpha, beta, c)?.prime(values))
}

/// Conditional sum of squares of `model` on `values` and the resulting AIC.
fn aic(model: &ArimaModel, values: &[f64]) -> f64 {
    let (sse, n) = model.one_step_sse(values);
    if n == 0 {
        return f64::INFINITY;
    }
    let sigma2 = (sse / n as f64).max(f64::MIN_POSITIVE);
    let k = model.order.p + model.order.q + 1;
    n as f64 * sigma2.ln() + 2.0 * k as f64
}

/// Orders searched by [`select_order`]: p ∈ 1..=5, d ∈ {0, 1}, q ∈ {0, 1}.
pub fn default_order_grid() -> Vec<ArimaOrder> {
    let mut grid = Vec::new();
    for p in 1..=5 {
        for d in 0..=1 {
            for q in 0..=1 {
                grid.push(ArimaOrder::new(p, d, q));
            }
        }
    }
    grid
}

/// Fits every order in `grid` and keeps the lowest AIC (first wins ties).
pub fn select_order(values: &[f64], grid: &[ArimaOrder]) -> Result<ArimaModel> {
    let mut best: Option<(f64, ArimaModel)> = None;
    let mut last_err = None;
    for &order in grid {
        match fit_values(values, order) {
            Ok(m) => {
                let score = aic(&m, values);
                if best.as_ref().is_none_or(|(b, _)| score < *b) {
                    best = Some((score, m));
                }
            }
            Err(e) => last_err = Some(e),
        }
    }
    best.map(|b| b.1)
        .ok_or_else(|| last_err.unwrap_or_else(|| Error::config("empty order grid")))
}

/// `Σ_{j,k} |x̂ - x| / max{x, δ}` over one `J × K` slice.
pub fn slice_feedback_error(
    predictions: &DMatrix<f64>,
    actuals: &DMatrix<f64>,
    delta: f64,
) -> Result<f64> {
    if predictions.shape() != actuals.shape() {
        return Err(Error::dim(format!(
            "predictions {:?} vs actuals {:?}",
            predictions.shape(),
            actuals.shape()
        )));
    }
    if !(delta > 0.0) {
        return Err(Error::domain(format!("sanity bound must be positive, got {delta}")));
    }
    Ok(predictions
        .iter()
        .zip(actuals.iter())
        .map(|(&p, &x)| (p - x).abs() / x.max(delta))
        .sum())
}
