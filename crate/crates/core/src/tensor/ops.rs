use nalgebra::DMatrix;

use super::{row_major, DenseTensor, Dims, KruskalModel, MaskTensor, Mode, SparseTensor};
use crate::error::{Error, Result};
use crate::exec::Exec;

/// Column-wise Kronecker product: column `r` is `m1[:, r] ⊗ m2[:, r]`,
/// row `r1 * m2.nrows() + r2`.
pub fn khatri_rao(m1: &DMatrix<f64>, m2: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if m1.ncols() != m2.ncols() {
        return Err(Error::dim(format!(
            "Khatri-Rao operands have {} and {} columns",
            m1.ncols(),
            m2.ncols()
        )));
    }
    let rows2 = m2.nrows();
    Ok(DMatrix::from_fn(m1.nrows() * rows2, m1.ncols(), |row, r| {
        m1[(row / rows2, r)] * m2[(row % rows2, r)]
    }))
}

#[inline]
fn unfold_position(dims: Dims, mode: Mode, i: usize, j: usize, k: usize) -> (usize, usize) {
    match mode {
        Mode::One => (i, j + dims[1] * k),
        Mode::Two => (j, i + dims[0] * k),
        Mode::Three => (k, i + dims[0] * j),
    }
}

fn unfold_shape(dims: Dims, mode: Mode) -> (usize, usize) {
    let n = dims[mode.index()];
    (n, dims.iter().product::<usize>() / n)
}

/// Mode-n unfolding of a dense tensor (see the module docs for column order).
pub fn matricize_dense(t: &DenseTensor, mode: Mode) -> DMatrix<f64> {
    let dims = t.dims();
    let (rows, cols) = unfold_shape(dims, mode);
    let mut out = DMatrix::zeros(rows, cols);
    for k in 0..dims[2] {
        for j in 0..dims[1] {
            for i in 0..dims[0] {
                out[unfold_position(dims, mode, i, j, k)] = t.get(i, j, k);
            }
        }
    }
    out
}

/// Coordinate-format matrix produced by unfolding a sparse tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    pub nrows: usize,
    pub ncols: usize,
    pub entries: Vec<(usize, usize, f64)>,
}

impl SparseMatrix {
    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.nrows, self.ncols);
        for &(r, c, v) in &self.entries {
            out[(r, c)] += v;
        }
        out
    }
}

pub fn matricize_sparse(t: &SparseTensor, mode: Mode) -> SparseMatrix {
    let dims = t.dims();
    let (nrows, ncols) = unfold_shape(dims, mode);
    let entries = t
        .iter()
        .map(|(i, j, k, v)| {
            let (r, c) = unfold_position(dims, mode, i, j, k);
            (r, c, v)
        })
        .collect();
    SparseMatrix {
        nrows,
        ncols,
        entries,
    }
}

/// Inverse of [`matricize_dense`].
pub fn fold(m: &DMatrix<f64>, mode: Mode, dims: Dims) -> Result<DenseTensor> {
    if m.shape() != unfold_shape(dims, mode) {
        return Err(Error::dim(format!(
            "{:?} matrix cannot fold into {dims:?} along {mode:?}",
            m.shape()
        )));
    }
    DenseTensor::from_fn(dims, |i, j, k| m[unfold_position(dims, mode, i, j, k)])
}

/// `T_(n) · (F_slow ⊙ F_fast)` over the stored entries only.
///
/// Mode 1 uses `C ⊙ B`, mode 2 `C ⊙ A`, mode 3 `B ⊙ A`. Runs in
/// `O(nnz · R)` without forming the Khatri-Rao product; `lambda` is ignored.
pub fn mttkrp(t: &SparseTensor, model: &KruskalModel, mode: Mode) -> Result<DMatrix<f64>> {
    mttkrp_with(t, model, mode, Exec::default())
}

pub fn mttkrp_with(
    t: &SparseTensor,
    model: &KruskalModel,
    mode: Mode,
    exec: Exec,
) -> Result<DMatrix<f64>> {
    model.check_dims(t.dims())?;
    let (slow, fast) = mode.others();
    let f_slow = row_major(model.factor(slow));
    let f_fast = row_major(model.factor(fast));
    Ok(mttkrp_raw(
        t,
        mode,
        model.rank(),
        &f_slow,
        &f_fast,
        exec,
    ))
}

/// Kernel shared with the factorization loop, which keeps row-major factor
/// copies around. Each output row is accumulated in storage order, whatever
/// the execution policy.
pub(crate) fn mttkrp_raw(
    t: &SparseTensor,
    mode: Mode,
    rank: usize,
    f_slow: &[f64],
    f_fast: &[f64],
    exec: Exec,
) -> DMatrix<f64> {
    let dims = t.dims();
    let m = mode.index();
    let (slow, fast) = mode.others();
    let (ms, mf) = (slow.index(), fast.index());
    let rows = dims[m];
    let coords = t.coords();
    let index = coords.mode_index(mode, rows);
    let values = t.values();
    let mut out = vec![0.0; rows * rank];
    exec.for_each_chunk_mut(&mut out, rank, |row, acc| {
        for &n in &index.perm[index.ptr[row]..index.ptr[row + 1]] {
            let c = coords.idx[n];
            let v = values[n];
            let s = &f_slow[c[ms] * rank..(c[ms] + 1) * rank];
            let f = &f_fast[c[mf] * rank..(c[mf] + 1) * rank];
            for r in 0..rank {
                acc[r] += v * s[r] * f[r];
            }
        }
    });
    DMatrix::from_row_slice(rows, rank, &out)
}

/// `W ∗ [[A, B, C]]` as a sparse tensor holding every observed position.
pub fn reconstruct_masked(model: &KruskalModel, mask: &MaskTensor) -> Result<SparseTensor> {
    mask.check_dims(model.dims())?;
    let observed = mask.observed();
    let values = Exec::default().map_slice(&observed, |c| model.value(c[0], c[1], c[2]));
    SparseTensor::new(
        mask.dims(),
        observed
            .into_iter()
            .zip(values)
            .map(|(c, v)| (c[0], c[1], c[2], v))
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
        DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    fn random_model(rng: &mut ChaCha8Rng, dims: Dims, rank: usize) -> KruskalModel {
        KruskalModel::new(
            random_matrix(rng, dims[0], rank),
            random_matrix(rng, dims[1], rank),
            random_matrix(rng, dims[2], rank),
        )
        .unwrap()
    }

    #[test]
    fn khatri_rao_expands_columns() {
        let m1 = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let m2 = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        let kr = khatri_rao(&m1, &m2).unwrap();
        let want = DMatrix::from_row_slice(4, 2, &[0.0, 2.0, 1.0, 0.0, 0.0, 4.0, 3.0, 0.0]);
        assert_eq!(kr, want);

        let one = DMatrix::from_element(1, 1, 1.0);
        assert_eq!(khatri_rao(&one, &one).unwrap(), one);
        assert!(matches!(
            khatri_rao(&m1, &DMatrix::zeros(2, 3)),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn khatri_rao_gram_is_hadamard_of_grams() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let m1 = random_matrix(&mut rng, 3, 2);
        let m2 = random_matrix(&mut rng, 4, 2);
        let kr = khatri_rao(&m1, &m2).unwrap();
        // brute-force products
        let lhs = kr.transpose() * &kr;
        let rhs = (m1.transpose() * &m1).component_mul(&(m2.transpose() * &m2));
        assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-12);
    }

    #[test]
    fn unfolding_reads_fibers_in_order() {
        let t = DenseTensor::new([2, 2, 2], (1..=8).map(f64::from).collect()).unwrap();
        let x1 = matricize_dense(&t, Mode::One);
        assert_eq!(x1, DMatrix::from_row_slice(2, 4, &[1., 3., 5., 7., 2., 4., 6., 8.]));
        let x2 = matricize_dense(&t, Mode::Two);
        assert_eq!(x2, DMatrix::from_row_slice(2, 4, &[1., 2., 5., 6., 3., 4., 7., 8.]));
        let x3 = matricize_dense(&t, Mode::Three);
        assert_eq!(x3, DMatrix::from_row_slice(2, 4, &[1., 2., 3., 4., 5., 6., 7., 8.]));
        for mode in Mode::ALL {
            assert_eq!(fold(&matricize_dense(&t, mode), mode, t.dims()).unwrap(), t);
        }
    }

    #[test]
    fn zero_tensor_unfolds_to_zero_matrix() {
        let t = DenseTensor::zeros([3, 4, 5]).unwrap();
        let x2 = matricize_dense(&t, Mode::Two);
        assert_eq!(x2.shape(), (4, 15));
        assert!(x2.iter().all(|&v| v == 0.0));
        assert!(Mode::try_from(4).is_err());
    }

    #[test]
    fn rank_one_unfolding_matches_outer_product() {
        let a = DMatrix::from_column_slice(3, 1, &[1.0, -2.0, 0.5]);
        let b = DMatrix::from_column_slice(2, 1, &[3.0, 1.5]);
        let c = DMatrix::from_column_slice(2, 1, &[-1.0, 2.0]);
        let model = KruskalModel::new(a.clone(), b.clone(), c.clone()).unwrap();
        // brute force every entry
        let t = DenseTensor::from_fn([3, 2, 2], |i, j, k| a[i] * b[j] * c[k]).unwrap();
        assert_eq!(model.reconstruct(), t);
        let want = &a * khatri_rao(&c, &b).unwrap().transpose();
        assert_abs_diff_eq!(matricize_dense(&t, Mode::One), want, epsilon = 1e-12);
    }

    #[test]
    fn sparse_unfolding_matches_dense() {
        let s = SparseTensor::new([2, 3, 2], vec![(0, 2, 1, 1.5), (1, 0, 0, -2.0)]).unwrap();
        for mode in Mode::ALL {
            assert_eq!(
                matricize_sparse(&s, mode).to_dense(),
                matricize_dense(&s.to_dense(), mode)
            );
        }
    }

    fn dense_mttkrp(t: &SparseTensor, model: &KruskalModel, mode: Mode) -> DMatrix<f64> {
        let (slow, fast) = mode.others();
        let kr = khatri_rao(model.factor(slow), model.factor(fast)).unwrap();
        matricize_dense(&t.to_dense(), mode) * kr
    }

    #[test]
    fn mttkrp_small_explicit_case() {
        let t = SparseTensor::new(
            [2, 2, 2],
            vec![(0, 0, 0, 1.0), (1, 1, 0, 2.0), (0, 1, 1, -3.0)],
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = random_model(&mut rng, [2, 2, 2], 2);
        for mode in Mode::ALL {
            for exec in Exec::available() {
                let got = mttkrp_with(&t, &model, mode, exec).unwrap();
                assert_abs_diff_eq!(got, dense_mttkrp(&t, &model, mode), epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn mttkrp_of_empty_tensor_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let model = random_model(&mut rng, [3, 2, 4], 2);
        let t = SparseTensor::empty([3, 2, 4]).unwrap();
        let g = mttkrp(&t, &model, Mode::Three).unwrap();
        assert_eq!(g, DMatrix::zeros(4, 2));
        let wrong = SparseTensor::empty([3, 2, 5]).unwrap();
        assert!(mttkrp(&wrong, &model, Mode::One).is_err());
    }

    #[test]
    fn reconstruct_masked_cases() {
        let ones = DMatrix::from_element(2, 1, 1.0);
        let model = KruskalModel::new(ones.clone(), ones.clone(), ones).unwrap();
        let full = reconstruct_masked(&model, &MaskTensor::full([2, 2, 2]).unwrap()).unwrap();
        assert_eq!(full.nnz(), 8);
        assert!(full.values().iter().all(|&v| v == 1.0));
        let none = reconstruct_masked(&model, &MaskTensor::empty([2, 2, 2]).unwrap()).unwrap();
        assert_eq!(none.nnz(), 0);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = random_model(&mut rng, [5, 3, 4], 3);
        let mask = MaskTensor::from_slices([5, 3, 4], [0, 3, 4]).unwrap();
        let z = reconstruct_masked(&model, &mask).unwrap().to_dense();
        for i in 0..5 {
            for j in 0..3 {
                for k in 0..4 {
                    let want = if mask.contains(i, j, k) {
                        (0..3)
                            .map(|r| model.a()[(i, r)] * model.b()[(j, r)] * model.c()[(k, r)])
                            .sum()
                    } else {
                        0.0
                    };
                    assert_eq!(z.get(i, j, k), want);
                }
            }
        }
    }

    proptest! {
        #[test]
        fn fold_inverts_unfold(i in 1usize..5, j in 1usize..5, k in 1usize..5, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = DenseTensor::from_fn([i, j, k], |_, _, _| rng.random_range(-5.0..5.0)).unwrap();
            for mode in Mode::ALL {
                prop_assert_eq!(fold(&matricize_dense(&t, mode), mode, t.dims()).unwrap(), t.clone());
            }
        }

        #[test]
        fn sparse_mttkrp_matches_dense(
            i in 1usize..6, j in 1usize..6, k in 1usize..6,
            rank in 1usize..4, density in 0.0f64..1.0, seed in 0u64..1000,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let dims = [i, j, k];
            let mut entries = Vec::new();
            for a in 0..i { for b in 0..j { for c in 0..k {
                if rng.random_bool(density) {
                    entries.push((a, b, c, rng.random_range(-3.0..3.0)));
                }
            }}}
            let t = SparseTensor::new(dims, entries).unwrap();
            let model = random_model(&mut rng, dims, rank);
            for mode in Mode::ALL {
                let got = mttkrp(&t, &model, mode).unwrap();
                let want = dense_mttkrp(&t, &model, mode);
                prop_assert!((got - want).abs().max() <= 1e-10);
            }
        }

        #[test]
        fn khatri_rao_gram_identity(r1 in 1usize..6, r2 in 1usize..6, cols in 1usize..4, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m1 = random_matrix(&mut rng, r1, cols);
            let m2 = random_matrix(&mut rng, r2, cols);
            let kr = khatri_rao(&m1, &m2).unwrap();
            let lhs = kr.transpose() * &kr;
            let rhs = (m1.transpose() * &m1).component_mul(&(m2.transpose() * &m2));
            prop_assert!((lhs - rhs).abs().max() <= 1e-12);
        }
    }
}
