//! Dense complex-matrix kernels.
//!
//! Everything above this module is written against four small contracts:
//! truncated SVD, general (non-Hermitian) eigendecomposition, least squares,
//! and Hermitian eigenvalues. The implementations delegate to LAPACK
//! (zgesdd/zgeev/zgelsd/zheev via `ndarray-linalg`); the value of this
//! module is the contracts, not the factorizations.
//!
//! Conventions:
//! * all data is `Complex64`;
//! * tolerances are relative to Frobenius norms (the eigen-steps of the
//!   estimator amplify rounding at SNR extremes, so absolute tolerances
//!   would be meaningless across scenes);
//! * `evd_general` promises **no** eigenvalue ordering — callers that need
//!   pairing must carry indices explicitly.

use ndarray::prelude::*;
use ndarray_linalg::{Eig, Eigh, JobSvd, LeastSquaresSvd, SVDDC, UPLO};
use num_complex::Complex64;

use crate::error::{Error, Result};

/// Complex double-precision scalar used throughout the crate.
pub type C64 = Complex64;
/// Dense complex matrix.
pub type CMat = Array2<C64>;
/// Dense complex vector.
pub type CVec = Array1<C64>;

/// Frobenius norm of a complex matrix.
pub fn fro_norm(a: &CMat) -> f64 {
    a.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

/// Frobenius (Euclidean) norm of a complex vector.
pub fn vec_norm(a: &CVec) -> f64 {
    a.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

/// Conjugate transpose.
pub fn hermitian_t(a: &CMat) -> CMat {
    a.t().mapv(|z| z.conj())
}

fn all_finite(a: &CMat) -> bool {
    a.iter().all(|z| z.re.is_finite() && z.im.is_finite())
}

/// Result of a truncated singular value decomposition.
///
/// `u` is m×k, `v` is n×k, `s` holds the k largest singular values in
/// descending order; `u · diag(s) · vᴴ` is the best rank-k Frobenius
/// approximation of the input.
#[derive(Debug, Clone)]
pub struct Tsvd {
    pub u: CMat,
    pub s: Vec<f64>,
    pub v: CMat,
}

impl Tsvd {
    /// Reconstruct the rank-k approximation `u · diag(s) · vᴴ`.
    pub fn reconstruct(&self) -> CMat {
        let us = {
            let mut us = self.u.clone();
            for (j, sv) in self.s.iter().enumerate() {
                us.column_mut(j).mapv_inplace(|z| z * *sv);
            }
            us
        };
        us.dot(&hermitian_t(&self.v))
    }
}

/// Truncated SVD keeping the `k` dominant singular triplets.
pub fn tsvd(a: &CMat, k: usize) -> Result<Tsvd> {
    let (m, n) = a.dim();
    let rank_cap = m.min(n);
    if k == 0 || k > rank_cap {
        return Err(Error::Argument(format!(
            "tsvd rank k={k} out of range for a {m}x{n} matrix (1..={rank_cap})"
        )));
    }
    if !all_finite(a) {
        return Err(Error::Numeric("tsvd input has non-finite entries".into()));
    }
    // Divide-and-conquer SVD; measurably faster than zgesvd at the sizes the
    // pipeline produces (hundreds of rows/columns).
    let (u, s, vh) = a
        .svddc(JobSvd::Some)
        .map_err(|e| Error::Numeric(format!("SVD failed to converge: {e}")))?;
    let u = u.ok_or_else(|| Error::Numeric("SVD did not return U".into()))?;
    let vh = vh.ok_or_else(|| Error::Numeric("SVD did not return Vᴴ".into()))?;
    let u_k = u.slice(s![.., ..k]).to_owned();
    let v_k = hermitian_t(&vh.slice(s![..k, ..]).to_owned());
    let s_k = s.iter().take(k).cloned().collect();
    Ok(Tsvd { u: u_k, s: s_k, v: v_k })
}

/// Eigendecomposition of a general square complex matrix.
///
/// `vectors` holds right eigenvectors as columns, paired with `values` by
/// index. No ordering of the eigenvalues is guaranteed.
#[derive(Debug, Clone)]
pub struct Evd {
    pub values: CVec,
    pub vectors: CMat,
}

/// General (non-Hermitian) eigendecomposition.
pub fn evd_general(a: &CMat) -> Result<Evd> {
    let (m, n) = a.dim();
    if m != n {
        return Err(Error::Argument(format!("evd_general needs a square matrix, got {m}x{n}")));
    }
    if !all_finite(a) {
        return Err(Error::Numeric("evd_general input has non-finite entries".into()));
    }
    if n == 1 {
        // The backend rejects 1x1 inputs (degenerate strides); the answer is immediate.
        return Ok(Evd {
            values: ndarray::arr1(&[a[[0, 0]]]),
            vectors: CMat::eye(1),
        });
    }
    let (values, vectors) = a
        .eig()
        .map_err(|e| Error::Numeric(format!("eigendecomposition failed to converge: {e}")))?;
    Ok(Evd { values, vectors })
}

/// Minimum-norm least-squares solution of `a · x ≈ b` for a matrix of
/// right-hand sides. Rank-deficient `a` (including all-zeros) yields the
/// minimum-norm solution, which is what the pseudo-inverse notation (·)†
/// of the estimator means everywhere.
pub fn lstsq(a: &CMat, b: &CMat) -> Result<CMat> {
    let (m, n) = a.dim();
    let (mb, p) = b.dim();
    if m == 0 || n == 0 {
        return Err(Error::Argument("lstsq needs nonempty a".into()));
    }
    if mb != m {
        return Err(Error::Argument(format!(
            "lstsq dimension mismatch: a is {m}x{n} but b has {mb} rows"
        )));
    }
    let sol = a
        .least_squares(b)
        .map_err(|e| Error::Numeric(format!("least squares failed: {e}")))?;
    debug_assert_eq!(sol.solution.dim(), (n, p));
    Ok(sol.solution)
}

/// Least squares against a single right-hand-side vector.
pub fn lstsq_vec(a: &CMat, b: &CVec) -> Result<CVec> {
    let bm = b.view().insert_axis(Axis(1)).to_owned();
    Ok(lstsq(a, &bm)?.index_axis(Axis(1), 0).to_owned())
}

/// Eigenvalues of a Hermitian matrix, ascending.
///
/// The input is checked against `‖a − aᴴ‖_F ≤ 1e−10 · ‖a‖_F` and then
/// symmetrized, so callers may pass matrices assembled from noisy data.
pub fn eigh_ascending(a: &CMat) -> Result<Vec<f64>> {
    let (m, n) = a.dim();
    if m != n {
        return Err(Error::Argument(format!("eigh_ascending needs a square matrix, got {m}x{n}")));
    }
    let ah = hermitian_t(a);
    let dev = fro_norm(&(a - &ah));
    let scale = fro_norm(a);
    if dev > 1e-10 * scale.max(1e-300) {
        return Err(Error::Argument(format!(
            "matrix is not Hermitian: ‖a − aᴴ‖ = {dev:.3e} vs tolerance {:.3e}",
            1e-10 * scale
        )));
    }
    let sym = (a + &ah).mapv(|z| z * 0.5);
    let (w, _) = sym
        .eigh(UPLO::Lower)
        .map_err(|e| Error::Numeric(format!("Hermitian eigendecomposition failed: {e}")))?;
    // LAPACK returns ascending order already; keep the sort as a guarantee,
    // not an assumption.
    let mut vals: Vec<f64> = w.to_vec();
    vals.sort_by(|x, y| x.partial_cmp(y).expect("eigenvalues are finite"));
    Ok(vals)
}

/// Hermitian eigendecomposition with eigenvectors: `a = V diag(w) Vᴴ`,
/// eigenvalues ascending, eigenvectors as the columns of `V`.
///
/// Same Hermitian-deviation check and symmetrization as [`eigh_ascending`].
pub fn eigh_system(a: &CMat) -> Result<(Array1<f64>, CMat)> {
    let (m, n) = a.dim();
    if m != n {
        return Err(Error::Argument(format!("eigh_system needs a square matrix, got {m}x{n}")));
    }
    let ah = hermitian_t(a);
    let dev = fro_norm(&(a - &ah));
    let scale = fro_norm(a);
    if dev > 1e-10 * scale.max(1e-300) {
        return Err(Error::Argument(format!(
            "matrix is not Hermitian: ‖a − aᴴ‖ = {dev:.3e} vs tolerance {:.3e}",
            1e-10 * scale
        )));
    }
    let sym = (a + &ah).mapv(|z| z * 0.5);
    let (w, v) = sym
        .eigh(UPLO::Lower)
        .map_err(|e| Error::Numeric(format!("Hermitian eigendecomposition failed: {e}")))?;
    Ok((w, v))
}

/// Real symmetric eigendecomposition: `a = V diag(w) Vᵀ`, eigenvalues
/// ascending, eigenvectors as columns. Symmetry is enforced the same way
/// [`eigh_system`] enforces Hermitian symmetry.
pub fn eigh_real_system(a: &Array2<f64>) -> Result<(Array1<f64>, Array2<f64>)> {
    let (m, n) = a.dim();
    if m != n {
        return Err(Error::Argument(format!(
            "eigh_real_system needs a square matrix, got {m}x{n}"
        )));
    }
    let dev = (a - &a.t())
        .iter()
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    let scale = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    if dev > 1e-10 * scale.max(1e-300) {
        return Err(Error::Argument(format!(
            "matrix is not symmetric: ‖a − aᵀ‖ = {dev:.3e} vs tolerance {:.3e}",
            1e-10 * scale
        )));
    }
    let sym = (a + &a.t()).mapv(|v| v * 0.5);
    let (w, v) = sym
        .eigh(UPLO::Lower)
        .map_err(|e| Error::Numeric(format!("symmetric eigendecomposition failed: {e}")))?;
    Ok((w, v))
}
