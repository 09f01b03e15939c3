//! Factor match score, tensor completion score and stream RMSE.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::arima::FiberSeries;
use crate::error::{Error, Result};
use crate::tensor::{DenseTensor, KruskalModel, MaskTensor};

/// Exhaustive matching is used up to this rank when requested.
pub const MAX_OPTIMAL_RANK: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Matching {
    /// Repeatedly pairs the highest-scoring remaining columns.
    #[default]
    Greedy,
    /// Best total score over all permutations (rank ≤ [`MAX_OPTIMAL_RANK`]).
    Optimal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchReport {
    pub fms: f64,
    /// `matching[r]` is the estimate column paired with reference column `r`.
    pub matching: Vec<usize>,
    /// Score of each reference component under the matching.
    pub congruences: Vec<f64>,
}

struct Columns {
    /// Unit columns of A, B, C per component; `None` for a zero column.
    units: Vec<Option<[Vec<f64>; 3]>>,
    /// Product of the three column norms and `|λ|`.
    weight: Vec<f64>,
}

fn columns(model: &KruskalModel, rank: usize) -> Columns {
    let model = model.absorb_lambda();
    let mut units = Vec::with_capacity(rank);
    let mut weight = Vec::with_capacity(rank);
    for r in 0..rank {
        if r >= model.rank() {
            units.push(None);
            weight.push(0.0);
            continue;
        }
        let cols: Vec<Vec<f64>> = [model.a(), model.b(), model.c()]
            .iter()
            .map(|f| f.column(r).iter().copied().collect())
            .collect();
        let norms: Vec<f64> = cols.iter().map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
        let w: f64 = norms.iter().product();
        if w == 0.0 {
            warn!("component {r} has a zero-norm column and scores 0");
            units.push(None);
            weight.push(0.0);
            continue;
        }
        let mut it = cols.into_iter().zip(&norms).map(|(c, n)| c.iter().map(|v| v / n).collect::<Vec<_>>());
        units.push(Some([it.next().unwrap(), it.next().unwrap(), it.next().unwrap()]));
        weight.push(w);
    }
    Columns { units, weight }
}

fn pair_score(x: &Columns, r: usize, y: &Columns, s: usize) -> f64 {
    let (Some(u), Some(v)) = (&x.units[r], &y.units[s]) else {
        return 0.0;
    };
    let (wx, wy) = (x.weight[r], y.weight[s]);
    let penalty = 1.0 - (wx - wy).abs() / wx.max(wy);
    let cosines: f64 = (0..3)
        .map(|m| u[m].iter().zip(&v[m]).map(|(a, b)| a * b).sum::<f64>())
        .product();
    penalty * cosines
}

fn greedy(scores: &[Vec<f64>]) -> Vec<usize> {
    let n = scores.len();
    let mut matching = vec![usize::MAX; n];
    let mut used = vec![false; n];
    for _ in 0..n {
        let mut best = (f64::NEG_INFINITY, 0, 0);
        for (r, row) in scores.iter().enumerate() {
            if matching[r] != usize::MAX {
                continue;
            }
            for (s, &v) in row.iter().enumerate() {
                if !used[s] && v > best.0 {
                    best = (v, r, s);
                }
            }
        }
        matching[best.1] = best.2;
        used[best.2] = true;
    }
    matching
}

fn optimal(scores: &[Vec<f64>]) -> Vec<usize> {
    fn search(
        scores: &[Vec<f64>],
        r: usize,
        used: &mut [bool],
        current: &mut Vec<usize>,
        total: f64,
        best: &mut (f64, Vec<usize>),
    ) {
        if r == scores.len() {
            if total > best.0 {
                *best = (total, current.clone());
            }
            return;
        }
        for s in 0..scores.len() {
            if !used[s] {
                used[s] = true;
                current.push(s);
                search(scores, r + 1, used, current, total + scores[r][s], best);
                current.pop();
                used[s] = false;
            }
        }
    }
    let mut best = (f64::NEG_INFINITY, Vec::new());
    search(scores, 0, &mut vec![false; scores.len()], &mut Vec::new(), 0.0, &mut best);
    best.1
}

pub fn fms(reference: &KruskalModel, estimate: &KruskalModel) -> Result<MatchReport> {
    fms_with(reference, estimate, Matching::Greedy)
}

/// Mean over components of `(1 − |ξ − ξ̄| / max{ξ, ξ̄}) · Π cos`, where `ξ`
/// is the product of a component's column norms and the cosines compare
/// matched columns factor by factor. The smaller rank is padded with zero
/// components, which score 0.
pub fn fms_with(reference: &KruskalModel, estimate: &KruskalModel, how: Matching) -> Result<MatchReport> {
    if reference.dims() != estimate.dims() {
        return Err(Error::dim(format!(
            "reference is {:?}, estimate is {:?}",
            reference.dims(),
            estimate.dims()
        )));
    }
    let rank = reference.rank().max(estimate.rank());
    if how == Matching::Optimal && rank > MAX_OPTIMAL_RANK {
        return Err(Error::config(format!(
            "optimal matching supports rank up to {MAX_OPTIMAL_RANK}, got {rank}"
        )));
    }
    let x = columns(reference, rank);
    let y = columns(estimate, rank);
    let scores: Vec<Vec<f64>> = (0..rank)
        .map(|r| (0..rank).map(|s| pair_score(&x, r, &y, s)).collect())
        .collect();
    let matching = match how {
        Matching::Greedy => greedy(&scores),
        Matching::Optimal => optimal(&scores),
    };
    let congruences: Vec<f64> = matching
        .iter()
        .enumerate()
        .map(|(r, &s)| scores[r][s].clamp(0.0, 1.0))
        .collect();
    let fms = (congruences.iter().sum::<f64>() / rank as f64).clamp(0.0, 1.0);
    Ok(MatchReport {
        fms,
        matching,
        congruences,
    })
}

/// `‖(1−W)∗(X−X̄)‖ / ‖(1−W)∗X‖` over the unobserved entries.
pub fn tcs(x: &DenseTensor, xbar: &DenseTensor, mask: &MaskTensor) -> Result<f64> {
    if x.dims() != xbar.dims() {
        return Err(Error::dim(format!("{:?} vs {:?}", x.dims(), xbar.dims())));
    }
    mask.check_dims(x.dims())?;
    let [ni, nj, nk] = x.dims();
    let (mut num, mut den) = (0.0, 0.0);
    for k in 0..nk {
        for j in 0..nj {
            for i in 0..ni {
                if mask.contains(i, j, k) {
                    continue;
                }
                let v = x.get(i, j, k);
                let d = v - xbar.get(i, j, k);
                num += d * d;
                den += v * v;
            }
        }
    }
    if den == 0.0 {
        return Err(Error::UndefinedScore(
            "no unobserved entry with a nonzero true value".into(),
        ));
    }
    Ok((num / den).sqrt())
}

/// RMSE over the time indices present in both series.
pub fn stream_rmse(predictions: &FiberSeries, actuals: &FiberSeries) -> Result<f64> {
    let (p, a) = (predictions.observations(), actuals.observations());
    let (mut x, mut y) = (0, 0);
    let (mut sse, mut n) = (0.0, 0usize);
    while x < p.len() && y < a.len() {
        match p[x].0.cmp(&a[y].0) {
            std::cmp::Ordering::Less => x += 1,
            std::cmp::Ordering::Greater => y += 1,
            std::cmp::Ordering::Equal => {
                let d = p[x].1 - a[y].1;
                sse += d * d;
                n += 1;
                x += 1;
                y += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::UndefinedScore("series share no time index".into()));
    }
    Ok((sse / n as f64).sqrt())
}
