//! Three-mode tensors and the multilinear primitives built on them.
//!
//! # Layout convention
//!
//! Mode 1 is time (`I`), modes 2 and 3 are the spatial axes (`J`, `K`).
//! Dense values are stored with mode 1 fastest: entry `(i, j, k)` lives at
//! `i + I * (j + J * k)`.
//!
//! The mode-n unfoldings follow the same order:
//!
//! * `X_(1)` is `I × JK`, column `j + J * k`, so `X_(1) = A (C ⊙ B)ᵀ`;
//! * `X_(2)` is `J × IK`, column `i + I * k`, so `X_(2) = B (C ⊙ A)ᵀ`;
//! * `X_(3)` is `K × IJ`, column `i + I * j`, so `X_(3) = C (B ⊙ A)ᵀ`;
//!
//! where `M1 ⊙ M2` has row `r1 * rows(M2) + r2` (the first operand's index
//! is the slow one).

mod io;
pub(crate) mod ops;

use std::collections::BTreeSet;
use std::sync::{Arc, OnceLock};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{
    read_factors, read_mask, read_tensor, read_tensor_dense, write_factors, write_mask,
    write_tensor, write_tensor_dense,
};
pub use ops::{
    fold, khatri_rao, matricize_dense, matricize_sparse, mttkrp, mttkrp_with,
    reconstruct_masked, SparseMatrix,
};

/// Tensor shape `[I, J, K]`.
pub type Dims = [usize; 3];

/// Tensor mode, 1-based as in the usual notation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Mode {
    One,
    Two,
    Three,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::One, Mode::Two, Mode::Three];

    pub fn index(self) -> usize {
        match self {
            Mode::One => 0,
            Mode::Two => 1,
            Mode::Three => 2,
        }
    }

    /// The two remaining modes, in the order their factors enter the
    /// Khatri-Rao product (`slow`, `fast`).
    pub fn others(self) -> (Mode, Mode) {
        match self {
            Mode::One => (Mode::Three, Mode::Two),
            Mode::Two => (Mode::Three, Mode::One),
            Mode::Three => (Mode::Two, Mode::One),
        }
    }
}

impl TryFrom<usize> for Mode {
    type Error = Error;

    fn try_from(n: usize) -> Result<Self> {
        match n {
            1 => Ok(Mode::One),
            2 => Ok(Mode::Two),
            3 => Ok(Mode::Three),
            _ => Err(Error::domain(format!("mode must be 1, 2 or 3, got {n}"))),
        }
    }
}

fn check_dims(dims: Dims) -> Result<()> {
    if dims.contains(&0) {
        return Err(Error::dim(format!("all dimensions must be positive, got {dims:?}")));
    }
    Ok(())
}

#[inline]
pub(crate) fn linear_index(dims: Dims, i: usize, j: usize, k: usize) -> usize {
    i + dims[0] * (j + dims[1] * k)
}

/// Dense `I × J × K` tensor, mode 1 fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor {
    dims: Dims,
    values: Vec<f64>,
}

impl DenseTensor {
    pub fn new(dims: Dims, values: Vec<f64>) -> Result<Self> {
        check_dims(dims)?;
        let n = dims.iter().product::<usize>();
        if values.len() != n {
            return Err(Error::dim(format!(
                "{dims:?} needs {n} values, got {}",
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::domain(format!("non-finite value at linear index {pos}")));
        }
        Ok(Self { dims, values })
    }

    pub fn zeros(dims: Dims) -> Result<Self> {
        check_dims(dims)?;
        Ok(Self {
            dims,
            values: vec![0.0; dims.iter().product()],
        })
    }

    /// Builds a tensor by evaluating `f(i, j, k)` at every position.
    pub fn from_fn(dims: Dims, mut f: impl FnMut(usize, usize, usize) -> f64) -> Result<Self> {
        check_dims(dims)?;
        let mut values = Vec::with_capacity(dims.iter().product());
        for k in 0..dims[2] {
            for j in 0..dims[1] {
                for i in 0..dims[0] {
                    values.push(f(i, j, k));
                }
            }
        }
        Self::new(dims, values)
    }

    /// Stacks `J × K` slices along mode 1.
    pub fn from_slices(slices: &[DMatrix<f64>]) -> Result<Self> {
        let first = slices
            .first()
            .ok_or_else(|| Error::dim("cannot stack zero slices"))?;
        let (j, k) = first.shape();
        if let Some(bad) = slices.iter().position(|s| s.shape() != (j, k)) {
            return Err(Error::dim(format!(
                "slice {bad} has shape {:?}, expected {:?}",
                slices[bad].shape(),
                (j, k)
            )));
        }
        Self::from_fn([slices.len(), j, k], |i, jj, kk| slices[i][(jj, kk)])
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.values[linear_index(self.dims, i, j, k)]
    }

    pub fn set(&mut self, i: usize, j: usize, k: usize, value: f64) -> Result<()> {
        if !value.is_finite() {
            return Err(Error::domain("non-finite value"));
        }
        let idx = linear_index(self.dims, i, j, k);
        self.values[idx] = value;
        Ok(())
    }

    /// The `J × K` slice at time `i`.
    pub fn slice(&self, i: usize) -> DMatrix<f64> {
        DMatrix::from_fn(self.dims[1], self.dims[2], |j, k| self.get(i, j, k))
    }

    pub fn slices(&self) -> impl Iterator<Item = DMatrix<f64>> + '_ {
        (0..self.dims[0]).map(move |i| self.slice(i))
    }

    /// The mode-1 fiber `X(:, j, k)`.
    pub fn fiber(&self, j: usize, k: usize) -> Vec<f64> {
        let start = linear_index(self.dims, 0, j, k);
        self.values[start..start + self.dims[0]].to_vec()
    }

    /// Sub-tensor with time indices in `range`.
    pub fn time_range(&self, range: std::ops::Range<usize>) -> Result<Self> {
        if range.start >= range.end || range.end > self.dims[0] {
            return Err(Error::dim(format!(
                "time range {range:?} outside 0..{}",
                self.dims[0]
            )));
        }
        let start = range.start;
        Self::from_fn([range.len(), self.dims[1], self.dims[2]], |i, j, k| {
            self.get(start + i, j, k)
        })
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// All entries, including zeros, as a sparse tensor.
    pub fn to_sparse_full(&self) -> SparseTensor {
        let mut entries = Vec::with_capacity(self.values.len());
        for i in 0..self.dims[0] {
            for j in 0..self.dims[1] {
                for k in 0..self.dims[2] {
                    entries.push((i, j, k, self.get(i, j, k)));
                }
            }
        }
        SparseTensor::new(self.dims, entries).expect("dense entries are valid")
    }

    /// Nonzero entries only.
    pub fn to_sparse(&self) -> SparseTensor {
        let mut entries = Vec::new();
        for i in 0..self.dims[0] {
            for j in 0..self.dims[1] {
                for k in 0..self.dims[2] {
                    let v = self.get(i, j, k);
                    if v != 0.0 {
                        entries.push((i, j, k, v));
                    }
                }
            }
        }
        SparseTensor::new(self.dims, entries).expect("dense entries are valid")
    }
}

/// Per-mode row grouping of the nonzeros: `perm[ptr[r]..ptr[r + 1]]` are the
/// entries whose mode index equals `r`, in storage order.
#[derive(Debug)]
pub(crate) struct ModeIndex {
    pub(crate) perm: Vec<usize>,
    pub(crate) ptr: Vec<usize>,
}

#[derive(Debug)]
pub(crate) struct Coords {
    pub(crate) idx: Vec<[usize; 3]>,
    modes: [OnceLock<ModeIndex>; 3],
}

impl Coords {
    fn new(idx: Vec<[usize; 3]>) -> Self {
        Self {
            idx,
            modes: Default::default(),
        }
    }

    pub(crate) fn mode_index(&self, mode: Mode, len: usize) -> &ModeIndex {
        self.modes[mode.index()].get_or_init(|| {
            let m = mode.index();
            let mut ptr = vec![0usize; len + 1];
            for c in &self.idx {
                ptr[c[m] + 1] += 1;
            }
            for r in 0..len {
                ptr[r + 1] += ptr[r];
            }
            let mut fill = ptr.clone();
            let mut perm = vec![0usize; self.idx.len()];
            for (n, c) in self.idx.iter().enumerate() {
                perm[fill[c[m]]] = n;
                fill[c[m]] += 1;
            }
            ModeIndex { perm, ptr }
        })
    }
}

/// COO tensor sorted by `(i, j, k)` with unique coordinates.
///
/// Explicit zeros are allowed: a sketch stores every cell of a sampled slice.
/// The coordinate structure is shared between tensors derived through
/// [`SparseTensor::with_values`].
#[derive(Debug, Clone)]
pub struct SparseTensor {
    dims: Dims,
    coords: Arc<Coords>,
    values: Vec<f64>,
}

impl PartialEq for SparseTensor {
    fn eq(&self, other: &Self) -> bool {
        self.dims == other.dims && self.coords.idx == other.coords.idx && self.values == other.values
    }
}

impl SparseTensor {
    pub fn new(dims: Dims, mut entries: Vec<(usize, usize, usize, f64)>) -> Result<Self> {
        check_dims(dims)?;
        for &(i, j, k, v) in &entries {
            if i >= dims[0] || j >= dims[1] || k >= dims[2] {
                return Err(Error::dim(format!(
                    "index ({i}, {j}, {k}) outside {dims:?}"
                )));
            }
            if !v.is_finite() {
                return Err(Error::domain(format!("non-finite value at ({i}, {j}, {k})")));
            }
        }
        entries.sort_by_key(|&(i, j, k, _)| (i, j, k));
        if let Some(w) = entries
            .windows(2)
            .find(|w| (w[0].0, w[0].1, w[0].2) == (w[1].0, w[1].1, w[1].2))
        {
            return Err(Error::domain(format!(
                "duplicate entry at ({}, {}, {})",
                w[0].0, w[0].1, w[0].2
            )));
        }
        let idx = entries.iter().map(|&(i, j, k, _)| [i, j, k]).collect();
        let values = entries.into_iter().map(|e| e.3).collect();
        Ok(Self {
            dims,
            coords: Arc::new(Coords::new(idx)),
            values,
        })
    }

    pub fn empty(dims: Dims) -> Result<Self> {
        Self::new(dims, Vec::new())
    }

    /// Same coordinates, new values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        if values.len() != self.values.len() {
            return Err(Error::dim(format!(
                "expected {} values, got {}",
                self.values.len(),
                values.len()
            )));
        }
        Ok(Self {
            dims: self.dims,
            coords: Arc::clone(&self.coords),
            values,
        })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn indices(&self) -> &[[usize; 3]] {
        &self.coords.idx
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, usize, f64)> + '_ {
        self.coords
            .idx
            .iter()
            .zip(&self.values)
            .map(|(c, &v)| (c[0], c[1], c[2], v))
    }

    /// Value at `(i, j, k)`, zero when not stored.
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        match self.coords.idx.binary_search(&[i, j, k]) {
            Ok(n) => self.values[n],
            Err(_) => 0.0,
        }
    }

    pub fn to_dense(&self) -> DenseTensor {
        let mut out = DenseTensor::zeros(self.dims).expect("dims validated at construction");
        for (i, j, k, v) in self.iter() {
            out.values[linear_index(self.dims, i, j, k)] = v;
        }
        out
    }

    /// Distinct mode-1 indices that carry at least one entry.
    pub fn time_indices(&self) -> BTreeSet<usize> {
        self.coords.idx.iter().map(|c| c[0]).collect()
    }

    pub(crate) fn coords(&self) -> &Coords {
        &self.coords
    }
}

/// Binary observation pattern `W`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MaskPattern {
    /// Whole time slices observed: `w(i, j, k) = [i ∈ set]`.
    Slices(BTreeSet<usize>),
    /// Arbitrary observed entries.
    Entries(BTreeSet<[usize; 3]>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskTensor {
    dims: Dims,
    pattern: MaskPattern,
}

impl MaskTensor {
    pub fn from_slices(dims: Dims, slices: impl IntoIterator<Item = usize>) -> Result<Self> {
        check_dims(dims)?;
        let set: BTreeSet<usize> = slices.into_iter().collect();
        if let Some(&bad) = set.iter().find(|&&t| t >= dims[0]) {
            return Err(Error::dim(format!("slice {bad} outside 0..{}", dims[0])));
        }
        Ok(Self {
            dims,
            pattern: MaskPattern::Slices(set),
        })
    }

    pub fn from_entries(dims: Dims, entries: impl IntoIterator<Item = [usize; 3]>) -> Result<Self> {
        check_dims(dims)?;
        let set: BTreeSet<[usize; 3]> = entries.into_iter().collect();
        if let Some(bad) = set
            .iter()
            .find(|c| c[0] >= dims[0] || c[1] >= dims[1] || c[2] >= dims[2])
        {
            return Err(Error::dim(format!("entry {bad:?} outside {dims:?}")));
        }
        Ok(Self {
            dims,
            pattern: MaskPattern::Entries(set),
        })
    }

    pub fn full(dims: Dims) -> Result<Self> {
        Self::from_slices(dims, 0..dims[0])
    }

    pub fn empty(dims: Dims) -> Result<Self> {
        Self::from_slices(dims, std::iter::empty())
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn pattern(&self) -> &MaskPattern {
        &self.pattern
    }

    /// Observed slice set for slice-structured masks.
    pub fn observed_slices(&self) -> Option<&BTreeSet<usize>> {
        match &self.pattern {
            MaskPattern::Slices(s) => Some(s),
            MaskPattern::Entries(_) => None,
        }
    }

    pub fn contains(&self, i: usize, j: usize, k: usize) -> bool {
        match &self.pattern {
            MaskPattern::Slices(s) => s.contains(&i),
            MaskPattern::Entries(e) => e.contains(&[i, j, k]),
        }
    }

    pub fn observed_count(&self) -> usize {
        match &self.pattern {
            MaskPattern::Slices(s) => s.len() * self.dims[1] * self.dims[2],
            MaskPattern::Entries(e) => e.len(),
        }
    }

    /// Observed coordinates in `(i, j, k)` order.
    pub fn observed(&self) -> Vec<[usize; 3]> {
        match &self.pattern {
            MaskPattern::Slices(s) => {
                let mut out = Vec::with_capacity(self.observed_count());
                for &i in s {
                    for j in 0..self.dims[1] {
                        for k in 0..self.dims[2] {
                            out.push([i, j, k]);
                        }
                    }
                }
                out
            }
            MaskPattern::Entries(e) => e.iter().copied().collect(),
        }
    }

    pub(crate) fn check_dims(&self, dims: Dims) -> Result<()> {
        if self.dims != dims {
            return Err(Error::dim(format!(
                "mask is {:?}, tensor is {dims:?}",
                self.dims
            )));
        }
        Ok(())
    }
}

/// CP model `Σ_r λ_r a_r ∘ b_r ∘ c_r`.
///
/// Factors are stored unnormalized; `lambda` defaults to ones.
#[derive(Debug, Clone, PartialEq)]
pub struct KruskalModel {
    factors: [DMatrix<f64>; 3],
    lambda: Vec<f64>,
}

impl KruskalModel {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, c: DMatrix<f64>) -> Result<Self> {
        let r = a.ncols();
        Self::with_lambda(a, b, c, vec![1.0; r])
    }

    pub fn with_lambda(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        c: DMatrix<f64>,
        lambda: Vec<f64>,
    ) -> Result<Self> {
        let r = a.ncols();
        if r == 0 {
            return Err(Error::dim("rank must be at least 1"));
        }
        if b.ncols() != r || c.ncols() != r || lambda.len() != r {
            return Err(Error::dim(format!(
                "factor column counts {}, {}, {} and {} weights disagree",
                r,
                b.ncols(),
                c.ncols(),
                lambda.len()
            )));
        }
        if a.nrows() == 0 || b.nrows() == 0 || c.nrows() == 0 {
            return Err(Error::dim("factors must have at least one row"));
        }
        let finite = |m: &DMatrix<f64>| m.iter().all(|v| v.is_finite());
        if !finite(&a) || !finite(&b) || !finite(&c) || !lambda.iter().all(|v| v.is_finite()) {
            return Err(Error::domain("factor entries must be finite"));
        }
        Ok(Self {
            factors: [a, b, c],
            lambda,
        })
    }

    pub fn rank(&self) -> usize {
        self.lambda.len()
    }

    pub fn dims(&self) -> Dims {
        [
            self.factors[0].nrows(),
            self.factors[1].nrows(),
            self.factors[2].nrows(),
        ]
    }

    pub fn factor(&self, mode: Mode) -> &DMatrix<f64> {
        &self.factors[mode.index()]
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.factors[0]
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.factors[1]
    }

    pub fn c(&self) -> &DMatrix<f64> {
        &self.factors[2]
    }

    pub fn lambda(&self) -> &[f64] {
        &self.lambda
    }

    pub fn into_factors(self) -> [DMatrix<f64>; 3] {
        self.factors
    }

    /// Folds `lambda` into the first factor and resets it to ones.
    pub fn absorb_lambda(&self) -> KruskalModel {
        let mut a = self.factors[0].clone();
        for (r, &l) in self.lambda.iter().enumerate() {
            a.column_mut(r).scale_mut(l);
        }
        KruskalModel {
            factors: [a, self.factors[1].clone(), self.factors[2].clone()],
            lambda: vec![1.0; self.rank()],
        }
    }

    #[inline]
    pub fn value(&self, i: usize, j: usize, k: usize) -> f64 {
        let [a, b, c] = &self.factors;
        (0..self.rank())
            .map(|r| self.lambda[r] * a[(i, r)] * b[(j, r)] * c[(k, r)])
            .sum()
    }

    pub fn reconstruct(&self) -> DenseTensor {
        DenseTensor::from_fn(self.dims(), |i, j, k| self.value(i, j, k))
            .expect("finite factors give finite values")
    }

    pub(crate) fn check_dims(&self, dims: Dims) -> Result<()> {
        if self.dims() != dims {
            return Err(Error::dim(format!(
                "model is {:?}, tensor is {dims:?}",
                self.dims()
            )));
        }
        Ok(())
    }
}

/// Row-major copy of a factor for cache-friendly row access.
pub(crate) fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}
