//! Slepian-Bangs style Cramér-Rao bound for the stacked co-array model.
//!
//! The second estimation stage works on a pseudo-observation whose mean is
//! a sum of rank-one terms: per target, a Kronecker product of an x-axis
//! structure vector (driven by the azimuth) and a conjugated z-axis
//! structure vector (driven by the elevation), weighted by the squared
//! source power. This module treats that pseudo-observation as a Gaussian
//! datum, differentiates its mean with respect to the azimuths, elevations
//! and source powers, and inverts the Fisher information, projecting out
//! the power block so the reported matrix bounds the angles alone.
//!
//! Two practical choices keep the formula well-posed:
//!
//! * the weighting covariance is assembled from the same structure vectors
//!   (both axes, symmetrically), so it is Hermitian PSD by construction —
//!   the raw cross-structured mean matrix is rank-K and one-sided, which
//!   no inverse square root tolerates;
//! * a noise floor (σₙ⁴, optional) and a relative ridge ε are added, and
//!   the ridge actually used is reported.
//!
//! All Kronecker-structured operators are applied through the identity
//! `(A ⊗ B)·vec(V) = vec(B·V·Aᵀ)`; nothing of size (2QM)²×(2QM)² is ever
//! materialized.

use std::f64::consts::PI;

use ndarray::{Array1, Array2};

use crate::array::{ArrayGeometry, Scene, Target};
use crate::error::{Error, Result};
use crate::numerics::{eigh_real_system, eigh_system, vec_norm, C64, CMat, CVec};

/// Cramér-Rao summary for one scene.
#[derive(Debug, Clone)]
pub struct CrbReport {
    /// Parameter vector the bound is taken over, in order: the K azimuths
    /// (degrees), the K elevations (degrees), the K source powers.
    pub psi: Vec<f64>,
    /// Angle block of the bound: 2K×2K, degrees², rows/columns ordered like
    /// the first 2K entries of `psi`. Symmetric positive semidefinite; the
    /// source-power block has been projected out, not ignored.
    pub crb_matrix: Array2<f64>,
    /// Per-target (azimuth, elevation) standard deviations in degrees.
    pub angle_std_deg: Vec<(f64, f64)>,
    /// Absolute ridge added to the weighting covariance diagonal.
    pub epsilon_used: f64,
    /// Whether the weighting covariance included the σₙ⁴ noise floor.
    pub noise_floor_included: bool,
}

/// Knobs for [`crb_matrix_with`]. The defaults match [`crb_matrix`].
#[derive(Debug, Clone, Copy)]
pub struct CrbSettings {
    /// Ridge relative to the mean diagonal of the weighting covariance.
    /// `None` means 1e-10.
    pub epsilon: Option<f64>,
    /// Include the σₙ⁴ noise floor in the weighting covariance. The mean
    /// model excludes the noise-induced term either way; the flag only
    /// changes the weighting.
    pub include_noise_floor: bool,
}

impl Default for CrbSettings {
    fn default() -> Self {
        CrbSettings { epsilon: None, include_noise_floor: true }
    }
}

/// Structure vector of one axis of the pseudo-observation for direction
/// cosine `u`, together with its elementwise derivative in `u`.
///
/// Index layout (fastest last): outer subarray offset q̂ ∈ 0..Q, window
/// position m̂ ∈ 0..M, symmetric half t ∈ {0, 1}. The entry at (q̂, m̂, t)
/// is e^{jπu(S−1−q̂−m̂+2St)}: the co-array window phase for that lag, with
/// the second half shifted by the full 2S span of the mirrored block.
fn axis_structure(u: f64, q: usize, m: usize, s: usize) -> (CVec, CVec) {
    let n = 2 * q * m;
    let mut c = CVec::zeros(n);
    let mut dc = CVec::zeros(n);
    for qi in 0..q {
        for mi in 0..m {
            for t in 0..2 {
                let p = PI
                    * ((s as f64 - 1.0) - qi as f64 - mi as f64 + 2.0 * (s * t) as f64);
                let e = C64::from_polar(1.0, u * p);
                let i = (qi * m + mi) * 2 + t;
                c[i] = e;
                dc[i] = C64::new(0.0, p) * e;
            }
        }
    }
    (c, dc)
}

/// Per-target constituents of the model vector: the two axis structure
/// vectors and their derivatives with respect to the angles in radians
/// (chain rule through the direction cosine already applied).
struct TargetParts {
    cx: CVec,
    dcx: CVec,
    cz: CVec,
    dcz: CVec,
}

fn target_parts(t: &Target, q: usize, m: usize, s: usize) -> TargetParts {
    let az = t.azimuth_deg.to_radians();
    let el = t.elevation_deg.to_radians();
    let (cx, dcx_du) = axis_structure(az.cos(), q, m, s);
    let (cz, dcz_du) = axis_structure(el.cos(), q, m, s);
    let dcx = dcx_du.mapv(|v| v * -az.sin());
    let dcz = dcz_du.mapv(|v| v * -el.sin());
    TargetParts { cx, dcx, cz, dcz }
}

/// Kronecker product of two vectors; `out[i·len(b) + j] = a[i]·b[j]`.
fn kron_vec(a: &CVec, b: &CVec) -> CVec {
    let nb = b.len();
    CVec::from_shape_fn(a.len() * nb, |i| a[i / nb] * b[i % nb])
}

/// Σ conj(u)·v.
fn dotc(u: &CVec, v: &CVec) -> C64 {
    u.iter().zip(v.iter()).map(|(a, b)| a.conj() * b).sum()
}

fn subarray_split(geom: &ArrayGeometry, q: usize) -> Result<(usize, usize)> {
    let s = geom.s_value();
    if q == 0 || q >= 2 * s {
        return Err(Error::Argument(format!(
            "subarray size {q} outside 1..={} for a co-array of {} lags",
            2 * s - 1,
            2 * s - 1
        )));
    }
    Ok((2 * s - q, s))
}

/// Mean of the pseudo-observation and its Jacobian.
///
/// Returns `r` of length (2QM)² and `dr` of shape (2QM)² × 3K whose columns
/// are the derivatives of `r` with respect to the azimuths (radians), the
/// elevations (radians) and the source powers, in that order. The k-th
/// target contributes σₖ⁴·(c_x ⊗ c_z*) to the mean, so the power-derivative
/// columns carry a factor 2σₖ².
pub fn model_vector_and_jacobian(
    geom: &ArrayGeometry,
    scene: &Scene,
    q: usize,
) -> Result<(CVec, CMat)> {
    let (m, s) = subarray_split(geom, q)?;
    let k = scene.num_targets();
    if k == 0 {
        return Err(Error::Argument("the bound needs at least one target".into()));
    }
    let n = 2 * q * m;
    let len = n * n;
    let mut r = CVec::zeros(len);
    let mut dr = CMat::zeros((len, 3 * k));
    for (ki, t) in scene.targets.iter().enumerate() {
        let parts = target_parts(t, q, m, s);
        let czc = parts.cz.mapv(|v| v.conj());
        let dczc = parts.dcz.mapv(|v| v.conj());
        let s4 = t.power * t.power;
        let base = kron_vec(&parts.cx, &czc);
        r.zip_mut_with(&base, |ri, bi| *ri += bi * s4);
        dr.column_mut(ki).assign(&kron_vec(&parts.dcx, &czc).mapv(|v| v * s4));
        dr.column_mut(k + ki).assign(&kron_vec(&parts.cx, &dczc).mapv(|v| v * s4));
        dr.column_mut(2 * k + ki).assign(&base.mapv(|v| v * (2.0 * t.power)));
    }
    Ok((r, dr))
}

/// Apply a Kronecker product to a vector without materializing it:
/// `(A ⊗ B)·v = vec(B·V·Aᵀ)`, where `v = vec(V)` stacks the columns of `V`.
/// `A` is p×q, `B` is r×s, `v` has length q·s, the result length p·r.
pub fn kron_apply(a: &CMat, b: &CMat, v: &CVec) -> Result<CVec> {
    let (p, qa) = a.dim();
    let (rb, sb) = b.dim();
    if v.len() != qa * sb {
        return Err(Error::Argument(format!(
            "kron_apply: vector of length {} does not match ({p}×{qa}) ⊗ ({rb}×{sb})",
            v.len()
        )));
    }
    let vm = CMat::from_shape_fn((sb, qa), |(rr, cc)| v[cc * sb + rr]);
    let w = b.dot(&vm).dot(&a.t());
    Ok(CVec::from_shape_fn(p * rb, |i| w[(i % rb, i / rb)]))
}

/// Cramér-Rao bound for the scene's angles with default weighting
/// (noise floor included). `epsilon` is the relative ridge; `None` = 1e-10.
pub fn crb_matrix(
    geom: &ArrayGeometry,
    scene: &Scene,
    q: usize,
    epsilon: Option<f64>,
) -> Result<CrbReport> {
    crb_matrix_with(geom, scene, q, CrbSettings { epsilon, ..Default::default() })
}

/// Cramér-Rao bound with explicit weighting choices.
///
/// The Fisher information is `T_s · Re{Jᴴ (Wᵀ ⊗ W)⁻¹ J}` with `J` the
/// Jacobian of [`model_vector_and_jacobian`] and `W` the Hermitian PSD
/// weighting covariance described in the module docs. Every column of `J`
/// is a Kronecker product of two vectors, so the whitened columns follow
/// from the mixed-product rule — `(Wᵀ⊗W)^{-1/2}(a ⊗ b) = (W^{-1/2,ᵀ}a) ⊗
/// (W^{-1/2}b)` — which is the rank-one instance of the `vec(B·V·Aᵀ)`
/// identity in [`kron_apply`]. The power block is removed by Schur
/// complement, which equals projecting the angle columns onto the
/// orthogonal complement of the power columns.
pub fn crb_matrix_with(
    geom: &ArrayGeometry,
    scene: &Scene,
    q: usize,
    settings: CrbSettings,
) -> Result<CrbReport> {
    let (m, s) = subarray_split(geom, q)?;
    let k = scene.num_targets();
    if k == 0 {
        return Err(Error::Argument("the bound needs at least one target".into()));
    }
    let n = 2 * q * m;
    let parts: Vec<TargetParts> =
        scene.targets.iter().map(|t| target_parts(t, q, m, s)).collect();

    // Weighting covariance: symmetric in the two axes, built from the same
    // structure vectors that carry the mean (the z side enters conjugated,
    // exactly as it does in the observation).
    let mut w = CMat::zeros((n, n));
    for (t, p) in scene.targets.iter().zip(&parts) {
        let s4 = t.power * t.power;
        let czc = p.cz.mapv(|v| v.conj());
        for i in 0..n {
            for j in 0..n {
                w[(i, j)] += (p.cx[i] * p.cx[j].conj() + czc[i] * czc[j].conj()) * (0.5 * s4);
            }
        }
    }
    if settings.include_noise_floor {
        let nf = scene.noise_power * scene.noise_power;
        for i in 0..n {
            w[(i, i)] += C64::new(nf, 0.0);
        }
    }
    let trace_scale = (0..n).map(|i| w[(i, i)].re).sum::<f64>() / n as f64;
    let eps_abs = settings.epsilon.unwrap_or(1e-10) * trace_scale;
    for i in 0..n {
        w[(i, i)] += C64::new(eps_abs, 0.0);
    }

    let (evals, evecs) = eigh_system(&w)?;
    let floor = evals[n - 1].max(0.0) * 1e-15 + f64::MIN_POSITIVE;
    let mut scaled = evecs.clone();
    for (j, mut col) in scaled.columns_mut().into_iter().enumerate() {
        let inv_sqrt = 1.0 / evals[j].max(floor).sqrt();
        col.map_inplace(|v| *v *= inv_sqrt);
    }
    // W^{-1/2}, Hermitian.
    let w_inv_half = scaled.dot(&evecs.mapv(|v| v.conj()).t().to_owned());
    let w_inv_half_t = w_inv_half.t().to_owned();

    // Whitened Jacobian columns, kept in factored (x-part, z-part) form.
    let mut scales = Vec::with_capacity(3 * k);
    let mut xs: Vec<CVec> = Vec::with_capacity(3 * k);
    let mut zs: Vec<CVec> = Vec::with_capacity(3 * k);
    for (t, p) in scene.targets.iter().zip(&parts) {
        let czc = p.cz.mapv(|v| v.conj());
        let dczc = p.dcz.mapv(|v| v.conj());
        let s4 = t.power * t.power;
        // Order here is per-target; the global (θ..., φ..., σ²...) order is
        // recovered by the index maps below.
        scales.push(s4);
        xs.push(w_inv_half_t.dot(&p.dcx));
        zs.push(w_inv_half.dot(&czc));
        scales.push(s4);
        xs.push(w_inv_half_t.dot(&p.cx));
        zs.push(w_inv_half.dot(&dczc));
        scales.push(2.0 * t.power);
        xs.push(w_inv_half_t.dot(&p.cx));
        zs.push(w_inv_half.dot(&czc));
    }
    // Map per-target column triples to the global parameter order.
    let col_of = |param: usize| -> usize {
        let (which, ki) = (param / k, param % k);
        3 * ki + which
    };

    // Fisher information over (θ, φ, σ²), real part of the Gram matrix of
    // the whitened Jacobian. Kronecker-factored columns make each entry a
    // product of two ordinary inner products.
    let dim = 3 * k;
    let mut fim = Array2::<f64>::zeros((dim, dim));
    for a in 0..dim {
        let ca = col_of(a);
        for b in a..dim {
            let cb = col_of(b);
            let g = dotc(&xs[ca], &xs[cb]) * dotc(&zs[ca], &zs[cb]);
            let val = scales[ca] * scales[cb] * g.re * scene.snapshots as f64;
            fim[(a, b)] = val;
            fim[(b, a)] = val;
        }
    }

    // Schur complement: remove the source-power block.
    let a_blk = fim.slice(ndarray::s![..2 * k, ..2 * k]).to_owned();
    let b_blk = fim.slice(ndarray::s![..2 * k, 2 * k..]).to_owned();
    let d_blk = fim.slice(ndarray::s![2 * k.., 2 * k..]).to_owned();
    let d_inv = invert_psd(&d_blk, 1e-14, |i| format!("power of target {}", i + 1))?;
    let h = &a_blk - &b_blk.dot(&d_inv).dot(&b_blk.t());
    let h = (&h + &h.t()).mapv(|v| v * 0.5);

    let crb_rad = invert_psd(&h, 1e-12, |i| {
        if i < k {
            format!("azimuth of target {}", i + 1)
        } else {
            format!("elevation of target {}", i - k + 1)
        }
    })?;
    let deg2 = (180.0 / PI) * (180.0 / PI);
    let crb = (&crb_rad + &crb_rad.t()).mapv(|v| v * (0.5 * deg2));

    let angle_std_deg = (0..k)
        .map(|ki| (crb[(ki, ki)].max(0.0).sqrt(), crb[(k + ki, k + ki)].max(0.0).sqrt()))
        .collect();
    let mut psi = Vec::with_capacity(3 * k);
    psi.extend(scene.targets.iter().map(|t| t.azimuth_deg));
    psi.extend(scene.targets.iter().map(|t| t.elevation_deg));
    psi.extend(scene.targets.iter().map(|t| t.power));
    Ok(CrbReport {
        psi,
        crb_matrix: crb,
        angle_std_deg,
        epsilon_used: eps_abs,
        noise_floor_included: settings.include_noise_floor,
    })
}

/// Inverse of a real symmetric PSD matrix through its eigendecomposition.
/// An eigenvalue at or below `rel_tol` times the largest one means some
/// parameter direction carries no information; the error names the
/// parameters with the largest weight in the offending direction.
fn invert_psd(
    a: &Array2<f64>,
    rel_tol: f64,
    name: impl Fn(usize) -> String,
) -> Result<Array2<f64>> {
    let (evals, evecs) = eigh_real_system(a)?;
    let dim = evals.len();
    let top = evals[dim - 1].max(0.0);
    if evals[0] <= rel_tol * top || top == 0.0 {
        let null = evecs.column(0);
        let peak = null.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
        let offending: Vec<String> = (0..dim)
            .filter(|&i| null[i].abs() >= 0.5 * peak)
            .map(name)
            .collect();
        return Err(Error::DegenerateInput(format!(
            "Fisher information is rank-deficient; no bound exists for: {}",
            offending.join(", ")
        )));
    }
    let mut scaled = evecs.clone();
    for (j, mut col) in scaled.columns_mut().into_iter().enumerate() {
        let inv = 1.0 / evals[j];
        col.map_inplace(|v| *v *= inv);
    }
    Ok(scaled.dot(&evecs.t()))
}
