//! Smooth weighted CP completion.
//!
//! Minimizes `½‖Y − W∗[[A,B,C]]‖² + ρ/2 ‖L·A‖²` over the three factors with
//! L-BFGS, where `W` marks the observed entries and `L` is the banded AR
//! operator of [`regularizer`]. The residual lives on the observed positions
//! only, so one evaluation costs `O(|W| · R + I · p · R)`.

pub mod lbfgs;
pub mod regularizer;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::tensor::ops::mttkrp_raw;
use crate::tensor::{row_major, DenseTensor, Dims, KruskalModel, MaskTensor, Mode, SparseTensor};

pub use lbfgs::{LbfgsOptions, LbfgsOutcome};
pub use regularizer::{build_regularizer, RegularizerMatrix};

const ENTRY_CHUNK: usize = 2048;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FactorizationConfig {
    pub rank: usize,
    pub rho: f64,
    pub max_iterations: usize,
    pub gradient_tolerance: f64,
    pub seed: u64,
    pub lbfgs_memory: usize,
}

impl Default for FactorizationConfig {
    fn default() -> Self {
        Self {
            rank: 5,
            rho: 600.0,
            max_iterations: 500,
            gradient_tolerance: 1e-6,
            seed: 0,
            lbfgs_memory: 5,
        }
    }
}

impl FactorizationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::config("rank must be at least 1"));
        }
        if !(self.rho >= 0.0 && self.rho.is_finite()) {
            return Err(Error::config(format!("rho must be finite and nonnegative, got {}", self.rho)));
        }
        if !(self.gradient_tolerance > 0.0) {
            return Err(Error::config("gradient tolerance must be positive"));
        }
        if self.lbfgs_memory == 0 {
            return Err(Error::config("L-BFGS memory must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FactorizationResult {
    pub model: KruskalModel,
    /// Objective at the initial point and after every accepted step.
    pub objective_trace: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub diagnostic: Option<String>,
}

impl FactorizationResult {
    pub fn objective(&self) -> f64 {
        *self.objective_trace.last().expect("trace holds the initial objective")
    }
}

/// Observed positions with their target values and the regularizer.
struct Problem<'a> {
    dims: Dims,
    rank: usize,
    target: SparseTensor,
    reg: &'a RegularizerMatrix,
    rho: f64,
    exec: Exec,
}

impl<'a> Problem<'a> {
    fn new(
        y: &SparseTensor,
        w: &MaskTensor,
        reg: &'a RegularizerMatrix,
        rank: usize,
        rho: f64,
        exec: Exec,
    ) -> Result<Self> {
        let dims = y.dims();
        w.check_dims(dims)?;
        if reg.size() != dims[0] {
            return Err(Error::dim(format!(
                "regularizer is {0}x{0}, temporal mode has {1} rows",
                reg.size(),
                dims[0]
            )));
        }
        let entries = w
            .observed()
            .into_iter()
            .map(|c| (c[0], c[1], c[2], y.get(c[0], c[1], c[2])))
            .collect();
        Ok(Self {
            dims,
            rank,
            target: SparseTensor::new(dims, entries)?,
            reg,
            rho,
            exec,
        })
    }

    fn param_len(&self) -> usize {
        self.dims.iter().sum::<usize>() * self.rank
    }

    fn split<'x>(&self, x: &'x [f64]) -> [&'x [f64]; 3] {
        let [ni, nj, _] = self.dims;
        let r = self.rank;
        let (a, rest) = x.split_at(ni * r);
        let (b, c) = rest.split_at(nj * r);
        [a, b, c]
    }

    fn factors(&self, x: &[f64]) -> [DMatrix<f64>; 3] {
        let parts = self.split(x);
        std::array::from_fn(|m| DMatrix::from_column_slice(self.dims[m], self.rank, parts[m]))
    }

    /// Objective, and the gradient when `want_grad`.
    fn evaluate(&self, x: &[f64], want_grad: bool) -> (f64, Option<Vec<f64>>) {
        let r = self.rank;
        let [a, b, c] = self.factors(x);
        let rm = [row_major(&a), row_major(&b), row_major(&c)];
        let idx = self.target.indices();
        let y = self.target.values();
        let mut resid = vec![0.0; y.len()];
        self.exec.for_each_chunk_mut(&mut resid, ENTRY_CHUNK, |chunk, out| {
            let base = chunk * ENTRY_CHUNK;
            for (n, o) in out.iter_mut().enumerate() {
                let [i, j, k] = idx[base + n];
                let (ai, bj, ck) = (&rm[0][i * r..][..r], &rm[1][j * r..][..r], &rm[2][k * r..][..r]);
                let z: f64 = (0..r).map(|q| ai[q] * bj[q] * ck[q]).sum();
                *o = y[base + n] - z;
            }
        });
        let mut f = 0.5 * resid.iter().map(|v| v * v).sum::<f64>();
        let la = (self.rho != 0.0).then(|| self.reg.apply(&a));
        if let Some(la) = &la {
            f += 0.5 * self.rho * la.norm_squared();
        }
        if !want_grad {
            return (f, None);
        }
        let resid = self.target.with_values(resid).expect("same pattern");
        let mut grad = Vec::with_capacity(self.param_len());
        for mode in Mode::ALL {
            let (slow, fast) = mode.others();
            let mut g = -mttkrp_raw(&resid, mode, r, &rm[slow.index()], &rm[fast.index()], self.exec);
            if mode == Mode::One {
                if let Some(la) = &la {
                    g += self.reg.apply_transpose(la) * self.rho;
                }
            }
            grad.extend_from_slice(g.as_slice());
        }
        (f, Some(grad))
    }
}

fn flatten(model: &KruskalModel) -> Vec<f64> {
    let m = model.absorb_lambda();
    [m.a(), m.b(), m.c()].iter().flat_map(|f| f.as_slice().iter().copied()).collect()
}

/// `½‖Y − W∗[[A,B,C]]‖² + ρ/2 ‖L·A‖²`; weights are folded into A first.
pub fn objective(
    y: &SparseTensor,
    w: &MaskTensor,
    model: &KruskalModel,
    l: &RegularizerMatrix,
    rho: f64,
) -> Result<f64> {
    model.check_dims(y.dims())?;
    let p = Problem::new(y, w, l, model.rank(), rho, Exec::default())?;
    Ok(p.evaluate(&flatten(model), false).0)
}

/// Gradients of [`objective`] with respect to A, B and C.
pub fn gradients(
    y: &SparseTensor,
    w: &MaskTensor,
    model: &KruskalModel,
    l: &RegularizerMatrix,
    rho: f64,
) -> Result<[DMatrix<f64>; 3]> {
    model.check_dims(y.dims())?;
    let p = Problem::new(y, w, l, model.rank(), rho, Exec::default())?;
    let g = p.evaluate(&flatten(model), true).1.expect("gradient requested");
    Ok(p.factors(&g))
}

/// Seeded uniform(0, 1) factors.
pub fn random_init(dims: Dims, rank: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..dims.iter().sum::<usize>() * rank)
        .map(|_| rng.random::<f64>())
        .collect()
}

pub fn factorize(
    y: &SparseTensor,
    w: &MaskTensor,
    config: &FactorizationConfig,
    l: &RegularizerMatrix,
) -> Result<FactorizationResult> {
    factorize_with(y, w, config, l, Exec::default())
}

pub fn factorize_with(
    y: &SparseTensor,
    w: &MaskTensor,
    config: &FactorizationConfig,
    l: &RegularizerMatrix,
    exec: Exec,
) -> Result<FactorizationResult> {
    config.validate()?;
    let problem = Problem::new(y, w, l, config.rank, config.rho, exec)?;
    if problem.target.nnz() == 0 {
        return Err(Error::Input("no observed entries to factorize".into()));
    }
    let opts = LbfgsOptions {
        memory: config.lbfgs_memory,
        max_iterations: config.max_iterations,
        gradient_tolerance: config.gradient_tolerance,
        ..LbfgsOptions::default()
    };
    let x0 = random_init(problem.dims, config.rank, config.seed);
    let out = lbfgs::minimize(x0, &opts, |x| {
        let (f, g) = problem.evaluate(x, true);
        (f, g.expect("gradient requested"))
    });
    if let Some(msg) = &out.diagnostic {
        log::debug!("factorization: {msg}");
    }
    let [a, b, c] = problem.factors(&out.x);
    Ok(FactorizationResult {
        model: KruskalModel::new(a, b, c)?,
        objective_trace: out.trace,
        converged: out.converged,
        iterations: out.iterations,
        diagnostic: out.diagnostic,
    })
}

/// `W∗Y + (1−W)∗[[A,B,C]]`.
pub fn complete_tensor(y: &SparseTensor, w: &MaskTensor, model: &KruskalModel) -> Result<DenseTensor> {
    model.check_dims(y.dims())?;
    w.check_dims(y.dims())?;
    let mut out = model.reconstruct();
    for [i, j, k] in w.observed() {
        out.set(i, j, k, y.get(i, j, k))?;
    }
    Ok(out)
}
