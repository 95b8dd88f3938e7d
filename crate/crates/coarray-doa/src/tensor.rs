//! Dense complex tensors of arbitrary order, plus the handful of
//! multilinear operations the co-array pipeline needs: Kruskal (CP)
//! evaluation, mode reshaping, unfolding, Khatri-Rao and Kronecker
//! products.
//!
//! # Memory order — the one convention everything hangs off
//!
//! `vec(·)` of a tensor enumerates **mode 0 fastest**: the linear index of
//! entry `(i₀, i₁, …, i_{N−1})` is `Σₙ iₙ · strideₙ` with `stride₀ = 1`
//! and `strideₙ = strideₙ₋₁ · Iₙ₋₁`. Consequences, all of which the rest
//! of the crate relies on:
//!
//! * `kron(a, b)` and `khatri_rao(a, b)` index the **second** operand
//!   fastest: output row `i·J + j` for rows `i` of `a`, `j` of `b`.
//! * merging a mode subset listed `[m₁ (fastest), …, m_p (slowest)]`
//!   turns a Kruskal factor list into
//!   `khatri_rao(A_{m_p}, khatri_rao(…, A_{m₁}))`.
//! * the shift/selection matrices of the estimator are derived from this
//!   ordering rather than written out by hand; a second, inconsistent
//!   convention anywhere would silently scramble the subspace step.
//!
//! Tensors are immutable values; every operation returns a new tensor, so
//! Monte-Carlo trials can share inputs across threads freely.

use ndarray::prelude::*;

use crate::error::{Error, Result};
use crate::numerics::{CMat, C64};

/// Dense complex tensor with the fixed `vec` convention above.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor {
    shape: Vec<usize>,
    data: Vec<C64>,
}

impl DenseTensor {
    /// All-zeros tensor of the given shape.
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        DenseTensor { shape: shape.to_vec(), data: vec![C64::new(0.0, 0.0); len] }
    }

    /// Build a tensor by evaluating `f` at every multi-index.
    pub fn from_fn(shape: &[usize], mut f: impl FnMut(&[usize]) -> C64) -> Self {
        let mut t = DenseTensor::zeros(shape);
        let mut idx = vec![0usize; shape.len()];
        for lin in 0..t.data.len() {
            t.data[lin] = f(&idx);
            Self::advance(&mut idx, shape);
            let _ = lin;
        }
        t
    }

    /// Wrap an existing `vec`-ordered buffer.
    pub fn from_vec(shape: &[usize], data: Vec<C64>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if data.len() != len {
            return Err(Error::Argument(format!(
                "buffer of {} entries does not fill shape {:?} ({} entries)",
                data.len(),
                shape,
                len
            )));
        }
        Ok(DenseTensor { shape: shape.to_vec(), data })
    }

    /// Odometer step in the fixed memory order (mode 0 fastest).
    fn advance(idx: &mut [usize], shape: &[usize]) {
        for d in 0..idx.len() {
            idx[d] += 1;
            if idx[d] < shape[d] {
                return;
            }
            idx[d] = 0;
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn order(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// The flattened entries in `vec` order.
    pub fn as_slice(&self) -> &[C64] {
        &self.data
    }

    fn linear(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.shape.len());
        let mut lin = 0;
        let mut stride = 1;
        for (d, &i) in idx.iter().enumerate() {
            debug_assert!(i < self.shape[d]);
            lin += i * stride;
            stride *= self.shape[d];
        }
        lin
    }

    pub fn get(&self, idx: &[usize]) -> C64 {
        self.data[self.linear(idx)]
    }

    pub fn set(&mut self, idx: &[usize], v: C64) {
        let lin = self.linear(idx);
        self.data[lin] = v;
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }

    /// Elementwise complex conjugate.
    pub fn conj(&self) -> Self {
        DenseTensor { shape: self.shape.clone(), data: self.data.iter().map(|z| z.conj()).collect() }
    }

    /// Reverse the index of every mode: entry (i₀,…) ↦ (I₀−1−i₀,…).
    pub fn flip_all_modes(&self) -> Self {
        let mut out = DenseTensor::zeros(&self.shape);
        let mut idx = vec![0usize; self.shape.len()];
        let mut flipped = vec![0usize; self.shape.len()];
        for lin in 0..self.data.len() {
            for d in 0..idx.len() {
                flipped[d] = self.shape[d] - 1 - idx[d];
            }
            let dst = out.linear(&flipped);
            out.data[dst] = self.data[lin];
            Self::advance(&mut idx, &self.shape);
        }
        out
    }

    pub fn scale(&self, s: C64) -> Self {
        DenseTensor { shape: self.shape.clone(), data: self.data.iter().map(|z| z * s).collect() }
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::Argument(format!(
                "shape mismatch in add: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(DenseTensor { shape: self.shape.clone(), data })
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.add(&other.scale(C64::new(-1.0, 0.0)))
    }

    /// View an order-2 tensor as a matrix (mode 0 = rows).
    pub fn to_matrix(&self) -> Result<CMat> {
        if self.shape.len() != 2 {
            return Err(Error::Argument(format!(
                "to_matrix needs an order-2 tensor, got order {}",
                self.shape.len()
            )));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        Ok(Array2::from_shape_fn((r, c), |(i, j)| self.data[i + j * r]))
    }

    /// Wrap a matrix as an order-2 tensor (rows = mode 0).
    pub fn from_matrix(a: &CMat) -> Self {
        let (r, c) = a.dim();
        DenseTensor::from_fn(&[r, c], |idx| a[[idx[0], idx[1]]])
    }

    /// Stack two equal-shape tensors along a fresh trailing mode of size 2.
    pub fn stack_pair(a: &Self, b: &Self) -> Result<Self> {
        if a.shape != b.shape {
            return Err(Error::Argument(format!(
                "shape mismatch in stack: {:?} vs {:?}",
                a.shape, b.shape
            )));
        }
        let mut shape = a.shape.clone();
        shape.push(2);
        let mut data = Vec::with_capacity(a.data.len() * 2);
        data.extend_from_slice(&a.data);
        data.extend_from_slice(&b.data);
        Ok(DenseTensor { shape, data })
    }
}

/// Weighted sum of rank-one terms: entry (i₀,…,i_{N−1}) =
/// Σ_k λ_k ∏ₙ factorₙ(iₙ, k). Factor n has shape Iₙ×K.
#[derive(Debug, Clone)]
pub struct KruskalModel {
    pub weights: Vec<C64>,
    pub factors: Vec<CMat>,
}

impl KruskalModel {
    pub fn new(weights: Vec<C64>, factors: Vec<CMat>) -> Result<Self> {
        let k = weights.len();
        for (n, f) in factors.iter().enumerate() {
            if f.ncols() != k {
                return Err(Error::Argument(format!(
                    "factor {n} has {} columns but the model has {k} weights",
                    f.ncols()
                )));
            }
        }
        if factors.is_empty() {
            return Err(Error::Argument("a Kruskal model needs at least one factor".into()));
        }
        Ok(KruskalModel { weights, factors })
    }

    pub fn rank(&self) -> usize {
        self.weights.len()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.factors.iter().map(|f| f.nrows()).collect()
    }

    /// Brute-force evaluation; the oracle every structured path is tested
    /// against.
    pub fn to_dense(&self) -> DenseTensor {
        let shape = self.shape();
        DenseTensor::from_fn(&shape, |idx| {
            let mut acc = C64::new(0.0, 0.0);
            for (k, lam) in self.weights.iter().enumerate() {
                let mut term = *lam;
                for (n, f) in self.factors.iter().enumerate() {
                    term *= f[[idx[n], k]];
                }
                acc += term;
            }
            acc
        })
    }

    /// The model whose dense form equals `reshape_modes(self.to_dense(),
    /// partition)`: each subset's factors are Khatri-Rao-merged with the
    /// first-listed mode fastest.
    pub fn merged(&self, partition: &[Vec<usize>]) -> Result<KruskalModel> {
        validate_partition(partition, self.factors.len())?;
        let mut factors = Vec::with_capacity(partition.len());
        for subset in partition {
            let mut acc = self.factors[subset[0]].clone();
            for &m in &subset[1..] {
                acc = khatri_rao(&self.factors[m], &acc)?;
            }
            factors.push(acc);
        }
        KruskalModel::new(self.weights.clone(), factors)
    }
}

fn validate_partition(partition: &[Vec<usize>], order: usize) -> Result<()> {
    let mut seen = vec![false; order];
    for subset in partition {
        if subset.is_empty() {
            return Err(Error::Argument("empty subset in mode partition".into()));
        }
        for &m in subset {
            if m >= order {
                return Err(Error::Argument(format!(
                    "mode {m} out of range for an order-{order} tensor"
                )));
            }
            if seen[m] {
                return Err(Error::Argument(format!("mode {m} listed twice in partition")));
            }
            seen[m] = true;
        }
    }
    if seen.iter().any(|s| !s) {
        return Err(Error::Argument("partition does not cover all modes".into()));
    }
    Ok(())
}

/// Merge mode subsets into single modes. `partition` lists disjoint,
/// covering subsets of `0..order`; within a subset the **first-listed**
/// mode varies fastest, and subsets become the modes of the result in the
/// order given. `vec` of the result equals `vec` of the input permuted to
/// the concatenated partition order.
pub fn reshape_modes(t: &DenseTensor, partition: &[Vec<usize>]) -> Result<DenseTensor> {
    validate_partition(partition, t.order())?;
    let order = t.order();
    // Permutation: concatenated subsets, fastest first.
    let perm: Vec<usize> = partition.iter().flatten().cloned().collect();
    let out_shape: Vec<usize> =
        partition.iter().map(|s| s.iter().map(|&m| t.shape()[m]).product()).collect();

    // Strides of the output linear index attributed to each *input* mode.
    let mut out_stride_of_mode = vec![0usize; order];
    let mut stride = 1usize;
    for &m in &perm {
        out_stride_of_mode[m] = stride;
        stride *= t.shape()[m];
    }

    let mut out = DenseTensor::zeros(&out_shape);
    let mut idx = vec![0usize; order];
    for lin in 0..t.len() {
        let mut out_lin = 0;
        for d in 0..order {
            out_lin += idx[d] * out_stride_of_mode[d];
        }
        out.data[out_lin] = t.data[lin];
        DenseTensor::advance(&mut idx, t.shape());
    }
    Ok(out)
}

/// Flatten a tensor into a matrix. `row_modes` and `col_modes` are ordered
/// (first-listed fastest) and must partition the mode set. For a Kruskal
/// input this produces `(KR-merge of row factors) · diag(λ) · (KR-merge of
/// col factors)ᵀ`.
pub fn unfold(t: &DenseTensor, row_modes: &[usize], col_modes: &[usize]) -> Result<CMat> {
    let partition = vec![row_modes.to_vec(), col_modes.to_vec()];
    validate_partition(&partition, t.order())?;
    let merged = reshape_modes(t, &partition)?;
    merged.to_matrix()
}

/// Kronecker product with the second operand varying fastest:
/// entry ((i·P + p), (j·Q + q)) = a(i,j)·b(p,q).
pub fn kron(a: &CMat, b: &CMat) -> CMat {
    let (ma, na) = a.dim();
    let (mb, nb) = b.dim();
    Array2::from_shape_fn((ma * mb, na * nb), |(r, c)| {
        a[[r / mb, c / nb]] * b[[r % mb, c % nb]]
    })
}

/// Column-wise Kronecker (Khatri-Rao) product; output row `i·J + j`, i.e.
/// the second operand varies fastest, matching [`kron`].
pub fn khatri_rao(a: &CMat, b: &CMat) -> Result<CMat> {
    let (ma, ka) = a.dim();
    let (mb, kb) = b.dim();
    if ka != kb {
        return Err(Error::Argument(format!(
            "khatri_rao column mismatch: {ka} vs {kb}"
        )));
    }
    Ok(Array2::from_shape_fn((ma * mb, ka), |(r, k)| a[[r / mb, k]] * b[[r % mb, k]]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::fro_norm;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    fn random_matrix(rng: &mut ChaCha8Rng, m: usize, n: usize) -> CMat {
        Array2::from_shape_fn((m, n), |_| {
            c(rng.random::<f64>() * 2.0 - 1.0, rng.random::<f64>() * 2.0 - 1.0)
        })
    }

    fn tensors_close(a: &DenseTensor, b: &DenseTensor, tol: f64) -> bool {
        a.shape() == b.shape()
            && a.as_slice()
                .iter()
                .zip(b.as_slice())
                .all(|(x, y)| (x - y).norm() <= tol)
    }

    #[test]
    fn kruskal_rank_one_all_ones() {
        let ones3 = Array2::from_elem((3, 1), c(1.0, 0.0));
        let ones2 = Array2::from_elem((2, 1), c(1.0, 0.0));
        let m = KruskalModel::new(vec![c(1.0, 0.0)], vec![ones3, ones2]).unwrap();
        let t = m.to_dense();
        assert_eq!(t.shape(), &[3, 2]);
        assert!(t.as_slice().iter().all(|z| (z - c(1.0, 0.0)).norm() < 1e-15));
    }

    #[test]
    fn kruskal_order_two_is_scaled_outer_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random_matrix(&mut rng, 4, 2);
        let b = random_matrix(&mut rng, 3, 2);
        let lam = vec![c(0.5, -1.0), c(2.0, 0.25)];
        let m = KruskalModel::new(lam.clone(), vec![a.clone(), b.clone()]).unwrap();
        let dense = m.to_dense().to_matrix().unwrap();
        let mut diag = Array2::<C64>::zeros((2, 2));
        diag[[0, 0]] = lam[0];
        diag[[1, 1]] = lam[1];
        let expected = a.dot(&diag).dot(&b.t());
        assert!(fro_norm(&(&dense - &expected)) < 1e-12);
    }

    #[test]
    fn kruskal_order_four_matches_nested_loops() {
        // Independent oracle: explicit quadruple loop, written without the
        // generic odometer machinery of the implementation.
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let shape = [3usize, 2, 4, 2];
        let k = 3;
        let factors: Vec<CMat> = shape.iter().map(|&s| random_matrix(&mut rng, s, k)).collect();
        let lam: Vec<C64> = (0..k).map(|_| c(rng.random(), rng.random())).collect();
        let m = KruskalModel::new(lam.clone(), factors.clone()).unwrap();
        let t = m.to_dense();
        for i0 in 0..shape[0] {
            for i1 in 0..shape[1] {
                for i2 in 0..shape[2] {
                    for i3 in 0..shape[3] {
                        let mut want = c(0.0, 0.0);
                        for r in 0..k {
                            want += lam[r]
                                * factors[0][[i0, r]]
                                * factors[1][[i1, r]]
                                * factors[2][[i2, r]]
                                * factors[3][[i3, r]];
                        }
                        let got = t.get(&[i0, i1, i2, i3]);
                        assert!((got - want).norm() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn kruskal_rejects_column_mismatch() {
        let a = Array2::<C64>::zeros((3, 2));
        let b = Array2::<C64>::zeros((2, 3));
        assert!(matches!(
            KruskalModel::new(vec![c(1.0, 0.0); 2], vec![a, b]),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn reshape_merges_mode_sizes() {
        let t = DenseTensor::zeros(&[2, 3, 4, 5, 6]);
        let r = reshape_modes(&t, &[vec![0, 2], vec![1, 3], vec![4]]).unwrap();
        assert_eq!(r.shape(), &[8, 15, 6]);
    }

    #[test]
    fn reshape_identity_partition_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let t = DenseTensor::from_fn(&[3, 2, 4], |_| c(rng.random(), rng.random()));
        let r = reshape_modes(&t, &[vec![0], vec![1], vec![2]]).unwrap();
        assert!(tensors_close(&t, &r, 0.0));
    }

    #[test]
    fn reshape_permutation_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let t = DenseTensor::from_fn(&[2, 3, 4, 2], |_| c(rng.random(), rng.random()));
        let fwd = reshape_modes(&t, &[vec![2], vec![0], vec![3], vec![1]]).unwrap();
        // Inverse permutation of (2,0,3,1) is (1,3,0,2).
        let back = reshape_modes(&fwd, &[vec![1], vec![3], vec![0], vec![2]]).unwrap();
        assert!(tensors_close(&t, &back, 0.0));
    }

    #[test]
    fn reshape_rejects_bad_partitions() {
        let t = DenseTensor::zeros(&[2, 2]);
        assert!(reshape_modes(&t, &[vec![0]]).is_err());
        assert!(reshape_modes(&t, &[vec![0, 0], vec![1]]).is_err());
        assert!(reshape_modes(&t, &[vec![0], vec![1], vec![2]]).is_err());
        assert!(reshape_modes(&t, &[vec![], vec![0], vec![1]]).is_err());
    }

    #[test]
    fn unfold_of_matrix_on_second_mode_is_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random_matrix(&mut rng, 3, 5);
        let t = DenseTensor::from_matrix(&a);
        let u = unfold(&t, &[1], &[0]).unwrap();
        assert!(fro_norm(&(&u - &a.t().to_owned())) < 1e-15);
    }

    #[test]
    fn unfold_zeros_is_zeros() {
        let t = DenseTensor::zeros(&[2, 3, 4]);
        let u = unfold(&t, &[0, 2], &[1]).unwrap();
        assert_eq!(u.dim(), (8, 3));
        assert!(fro_norm(&u) == 0.0);
    }

    #[test]
    fn unfold_kruskal_matches_khatri_rao_formula() {
        // Mode-1 unfolding of an order-3 Kruskal tensor (modes 0,2 in the
        // rows, fastest first) must equal KR(A₂,A₀)·diag(λ)·A₁ᵀ.
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (i, j, l, k) = (3, 4, 2, 3);
        let a0 = random_matrix(&mut rng, i, k);
        let a1 = random_matrix(&mut rng, j, k);
        let a2 = random_matrix(&mut rng, l, k);
        let lam: Vec<C64> = (0..k).map(|_| c(rng.random(), rng.random())).collect();
        let m = KruskalModel::new(lam.clone(), vec![a0.clone(), a1.clone(), a2.clone()]).unwrap();
        let u = unfold(&m.to_dense(), &[0, 2], &[1]).unwrap();

        let kr = khatri_rao(&a2, &a0).unwrap();
        let mut diag = Array2::<C64>::zeros((k, k));
        for (r, l) in lam.iter().enumerate() {
            diag[[r, r]] = *l;
        }
        let expected = kr.dot(&diag).dot(&a1.t());
        assert!(fro_norm(&(&u - &expected)) < 1e-12);
    }

    #[test]
    fn unfold_preserves_frobenius_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let t = DenseTensor::from_fn(&[3, 2, 2, 4], |_| c(rng.random(), rng.random()));
        let u = unfold(&t, &[3, 1], &[0, 2]).unwrap();
        assert!((fro_norm(&u) - t.frobenius_norm()).abs() < 1e-12);
    }

    #[test]
    fn khatri_rao_of_ones_rows() {
        let a = Array2::from_elem((1, 4), c(1.0, 0.0));
        let kr = khatri_rao(&a, &a).unwrap();
        assert_eq!(kr.dim(), (1, 4));
        assert!(kr.iter().all(|z| (z - c(1.0, 0.0)).norm() < 1e-15));
    }

    #[test]
    fn khatri_rao_single_column_equals_kron() {
        let a = array![[c(1.0, 1.0)], [c(2.0, -0.5)]];
        let b = array![[c(0.5, 0.0)], [c(-1.0, 2.0)], [c(0.0, 3.0)]];
        let kr = khatri_rao(&a, &b).unwrap();
        let kk = kron(&a, &b);
        assert_eq!(kr.dim(), (6, 1));
        assert!(fro_norm(&(&kr - &kk)) < 1e-15);
    }

    #[test]
    fn khatri_rao_gram_is_hadamard_of_grams() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let a = random_matrix(&mut rng, 5, 3);
        let b = random_matrix(&mut rng, 4, 3);
        let kr = khatri_rao(&a, &b).unwrap();
        let ah = a.t().mapv(|z| z.conj());
        let bh = b.t().mapv(|z| z.conj());
        let gram = kr.t().mapv(|z| z.conj()).dot(&kr);
        let hadamard = &ah.dot(&a) * &bh.dot(&b);
        assert!(fro_norm(&(&gram - &hadamard)) < 1e-12);
    }

    #[test]
    fn khatri_rao_rejects_column_mismatch() {
        let a = Array2::<C64>::zeros((2, 2));
        let b = Array2::<C64>::zeros((2, 3));
        assert!(khatri_rao(&a, &b).is_err());
    }

    #[test]
    fn kron_is_associative() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let a = random_matrix(&mut rng, 2, 3);
        let b = random_matrix(&mut rng, 3, 2);
        let cm = random_matrix(&mut rng, 2, 2);
        let left = kron(&kron(&a, &b), &cm);
        let right = kron(&a, &kron(&b, &cm));
        assert!(fro_norm(&(&left - &right)) < 1e-12);
    }

    #[test]
    fn flip_all_modes_is_involution_and_reverses_vec() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let t = DenseTensor::from_fn(&[3, 2, 2], |_| c(rng.random(), rng.random()));
        let f = t.flip_all_modes();
        // Reversing every mode reverses the linearized entry order.
        let mut rev: Vec<C64> = t.as_slice().to_vec();
        rev.reverse();
        assert_eq!(f.as_slice(), rev.as_slice());
        assert!(tensors_close(&f.flip_all_modes(), &t, 0.0));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        /// Merging a Kruskal model's factors with `merged` and densifying
        /// must commute with densifying first and then reshaping.
        #[test]
        fn reshape_commutes_with_factor_merge(seed in 0u64..1024) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let order = rng.random_range(2..=4usize);
            let shape: Vec<usize> = (0..order).map(|_| rng.random_range(1..=4usize)).collect();
            let k = rng.random_range(1..=3usize);
            let factors: Vec<CMat> =
                shape.iter().map(|&s| random_matrix(&mut rng, s, k)).collect();
            let lam: Vec<C64> = (0..k).map(|_| c(rng.random(), rng.random())).collect();
            let model = KruskalModel::new(lam, factors).unwrap();

            // Random partition: shuffle modes, split at random points.
            let mut modes: Vec<usize> = (0..order).collect();
            for i in (1..order).rev() {
                let j = rng.random_range(0..=i);
                modes.swap(i, j);
            }
            let mut partition: Vec<Vec<usize>> = Vec::new();
            let mut cur = vec![modes[0]];
            for &m in &modes[1..] {
                if rng.random::<bool>() {
                    partition.push(std::mem::take(&mut cur));
                }
                cur.push(m);
            }
            partition.push(cur);

            let via_dense = reshape_modes(&model.to_dense(), &partition).unwrap();
            let via_merge = model.merged(&partition).unwrap().to_dense();
            prop_assert!(tensors_close(&via_dense, &via_merge, 1e-12));
        }

        /// Any two-way unfolding preserves the Frobenius norm exactly.
        #[test]
        fn unfold_is_entry_bijection(seed in 0u64..1024) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let order = rng.random_range(2..=4usize);
            let shape: Vec<usize> = (0..order).map(|_| rng.random_range(1..=4usize)).collect();
            let t = DenseTensor::from_fn(&shape, |_| c(rng.random(), rng.random()));
            let mut modes: Vec<usize> = (0..order).collect();
            for i in (1..order).rev() {
                let j = rng.random_range(0..=i);
                modes.swap(i, j);
            }
            let split = rng.random_range(1..order);
            let u = unfold(&t, &modes[..split], &modes[split..]).unwrap();
            prop_assert!((fro_norm(&u) - t.frobenius_norm()).abs() < 1e-12);
        }
    }
}
