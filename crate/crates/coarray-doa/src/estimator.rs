//! Two-step iterative 2-D DOA estimation on the unfolded observation.
//!
//! Step 1 truncates the observation's SVD at the component count, solves
//! the three shift-invariance pencils (x-window, z-window, symmetry slab)
//! on a joint eigenbasis, and converts the per-component generators to
//! angle candidates. A pairing backend then selects which components are
//! reported as targets. Step 2 rebuilds the signal-noise cross term from
//! those estimates, subtracts a damped copy from the *original*
//! observation, and repeats until the subtracted energy stabilizes.
//!
//! One structural fact drives the design: the observation is an outer
//! product of two per-axis window stacks, so it contains one rank-1
//! component for every (azimuth, elevation) *combination* present in the
//! scene — `d_x·d_z` components for `d_x` distinct azimuths and `d_z`
//! distinct elevations — with rank-1 weights (products of per-axis
//! marginal powers). Truncating at K < d_x·d_z mixes components and
//! destroys shift invariance, so the subspace is taken at the component
//! count. And because the weights are rank-1 no matter how the axes are
//! actually paired, the observation itself cannot say which combinations
//! are real: that information lives in the physical cross-covariance
//! E{x zᴴ}, whose temporal averaging suppresses the mixed products. The
//! `cross_covariance` pairing backend uses it; the purely tensor-side
//! backends are retained and honestly report what the tensor alone
//! supports (everything, for a complete grid; an arbitrary selection,
//! otherwise).

use serde::{Deserialize, Serialize};

use crate::array::{steering_vector, ArrayGeometry, Target};
use crate::coarray::{
    coarray_pseudosnapshot, identifiability_bound, noise_locator_matrix, subarray_stack,
    CoarrayMap, DedupMode,
};
use crate::error::{Error, Result};
use crate::numerics::{eigh_ascending, evd_general, fro_norm, lstsq, lstsq_vec, tsvd, CMat, CVec, C64};
use crate::pipeline::{
    conjugate_symmetric_stack, contract_and_unfold, cross_outer, observation_from_stacks,
    phase_generator, shift_powers, subarray_steering, SlabConvention, UnfoldedObservation,
};

/// How estimated azimuths are matched to estimated elevations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PairingBackend {
    /// Resolve automatically: `shared_basis` when the decomposition
    /// yields exactly K components (a bijection), else `gamma` if the
    /// slab generator is certified informative, else `cross_covariance`
    /// when the physical cross-covariance is available, else
    /// `subspace_residual`.
    #[default]
    Auto,
    /// Greedy matching on the symmetry-slab eigenvalues.
    Gamma,
    /// Per-component alignment from the joint eigenbasis of the two
    /// window pencils; selects the K strongest components.
    SharedBasis,
    /// Scores each component's model column against the signal subspace
    /// and keeps the K best fits.
    SubspaceResidual,
    /// Scores each component's physical rank-1 steering block against
    /// the sample cross-covariance E{x zᴴ} and keeps the K best.
    CrossCovariance,
}

impl std::fmt::Display for PairingBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            PairingBackend::Auto => "auto",
            PairingBackend::Gamma => "gamma",
            PairingBackend::SharedBasis => "shared_basis",
            PairingBackend::SubspaceResidual => "subspace_residual",
            PairingBackend::CrossCovariance => "cross_covariance",
        };
        f.write_str(s)
    }
}

/// Knobs of the iterative estimator.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimatorSettings {
    /// Number of targets to report.
    pub k: usize,
    /// Damping applied to the subtracted cross term (0 disables step 2).
    pub mu: f64,
    /// Iteration cap L.
    pub max_iterations: usize,
    /// Relative stall threshold δ on the subtracted energy.
    pub delta: f64,
    /// Pairing backend (or Auto).
    pub backend: PairingBackend,
    /// Symmetry-slab assembly rule the observation was built with.
    pub convention: SlabConvention,
    /// Fixed component count for the subspace, bypassing detection.
    /// Useful when the scene structure is known (e.g. a full angular
    /// grid has exactly K components).
    pub components_override: Option<usize>,
}

impl EstimatorSettings {
    pub fn new(k: usize) -> Self {
        EstimatorSettings {
            k,
            mu: 0.9,
            max_iterations: 20,
            delta: 1e-5,
            backend: PairingBackend::Auto,
            convention: SlabConvention::FlipAll,
            components_override: None,
        }
    }
}

/// Side information for pairing: the array geometry and, when available,
/// the physical N×N sample cross-covariance between the two arms.
#[derive(Debug, Clone, Copy, Default)]
pub struct PairingContext<'a> {
    pub geometry: Option<&'a ArrayGeometry>,
    pub cross_covariance: Option<&'a CMat>,
    /// Whether the slab generator carries pairing information under the
    /// configured convention (see [`empirical_pair_generator`]). Always
    /// false for the flip-all stacking.
    pub gamma_informative: bool,
    /// Stacking convention the observation was assembled with (the
    /// subspace-residual backend models the symmetry slab with it).
    pub convention: SlabConvention,
}

/// Per-component generator estimates from the subspace decomposition.
///
/// All vectors have one entry per retained component, aligned by index:
/// component c has x-generator `kappa_x[c]`, conjugated z-generator
/// `kappa_z_conj[c]` (an estimate of e^{+jπcosφ}), and slab eigenvalue
/// `gamma[c]`. Components are ordered by decreasing subspace weight. The
/// component count is at least the requested K and equals the number of
/// per-axis cosine combinations the data supports.
#[derive(Debug, Clone)]
pub struct GeneratorEstimates {
    pub kappa_x: Vec<C64>,
    pub kappa_z_conj: Vec<C64>,
    pub gamma: Vec<C64>,
    /// Left singular basis of the observation, 2Q² × components.
    pub u_basis: CMat,
    /// Per-component subspace weight (for deterministic ranking).
    pub component_weights: Vec<f64>,
    q: usize,
    m: usize,
    s_value: usize,
}

impl GeneratorEstimates {
    pub fn n_components(&self) -> usize {
        self.kappa_x.len()
    }

    pub fn subarray_rows(&self) -> usize {
        self.q
    }
}

/// Angle candidates per component, aligned with [`GeneratorEstimates`].
#[derive(Debug, Clone)]
pub struct UnpairedAngles {
    pub theta_deg: Vec<f64>,
    pub phi_deg: Vec<f64>,
}

/// Source-power fit along one axis.
#[derive(Debug, Clone)]
pub struct PowerEstimate {
    pub values: Vec<f64>,
    /// Number of estimates clipped up to zero.
    pub clipped: usize,
    /// Set when the co-array steering matrix was ill-conditioned
    /// (condition number above [`POWER_COND_WARN`]), which happens when
    /// two reported angles nearly coincide on an axis.
    pub conditioning_warning: bool,
}

/// One reported target.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TargetEstimate {
    pub azimuth_deg: f64,
    pub elevation_deg: f64,
    pub power: f64,
}

/// Final output of the iterative estimator.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DoaEstimate {
    pub pairs: Vec<TargetEstimate>,
    pub iterations_used: usize,
    /// ε_l = ‖T₍₂₎ − T₍₂₎⁽ˡ⁾‖²_F per completed iteration.
    pub epsilon_history: Vec<f64>,
    /// The backend that actually paired the reported targets (never Auto).
    pub pairing_backend_used: PairingBackend,
    /// True when a later iteration failed and an earlier result was kept.
    pub degraded: bool,
    pub power_conditioning_warning: bool,
    pub clipped_powers: usize,
}

fn row_coords(row: usize, q: usize) -> (usize, usize, usize) {
    // Row ordering of the observation: (q_x · Q + q_z) · 2 + g.
    (row / (2 * q), (row / 2) % q, row % 2)
}

fn select_rows(u: &CMat, keep: impl Fn(usize, usize, usize) -> bool, q: usize) -> CMat {
    let rows: Vec<usize> = (0..u.nrows())
        .filter(|&r| {
            let (qx, qz, g) = row_coords(r, q);
            keep(qx, qz, g)
        })
        .collect();
    let mut out = CMat::zeros((rows.len(), u.ncols()));
    for (i, &r) in rows.iter().enumerate() {
        out.row_mut(i).assign(&u.row(r));
    }
    out
}

/// Diagonal of Ξ⁻¹ M Ξ, solved columnwise in the least-squares sense.
fn diag_in_basis(m: &CMat, xi: &CMat) -> Result<Vec<C64>> {
    let mx = m.dot(xi);
    let d = lstsq(xi, &mx)?;
    Ok((0..d.nrows()).map(|i| d[[i, i]]).collect())
}

/// Decompose the observation at the component count and extract the
/// per-component generators of all three shift pencils on a joint
/// eigenbasis.
///
/// `components_hint` is the expected component count (distinct azimuths
/// times distinct elevations); when absent it is detected from the
/// singular spectrum's largest relative gap at index ≥ K. The retained
/// count is never below K and never above what the pencils support.
pub fn step1_decompose(
    obs: &UnfoldedObservation,
    k: usize,
    components_hint: Option<usize>,
) -> Result<GeneratorEstimates> {
    let (q, m) = (obs.q, obs.m);
    let s_value = (q + m) / 2;
    if k == 0 {
        return Err(Error::DegenerateInput("no signal subspace requested (K = 0)".into()));
    }
    let bound = identifiability_bound(q, m)?;
    if k > bound {
        return Err(Error::Argument(format!(
            "K = {k} exceeds the identifiability bound {bound} for Q = {q}, M = {m}"
        )));
    }
    // Pencil feasibility: the row-reduced bases must still overdetermine
    // the component count.
    let pencil_cap = bound.min(2 * q * (q - 1)).min(q * q);
    if k > pencil_cap {
        return Err(Error::Argument(format!(
            "K = {k} exceeds the shift-pencil capacity {pencil_cap} for Q = {q}, M = {m}"
        )));
    }

    let full = tsvd(&obs.t2, (2 * q * q).min(m * m))?;
    let s = &full.s;
    if s[0] <= 0.0 || !s[0].is_finite() {
        return Err(Error::DegenerateInput("observation is numerically zero".into()));
    }
    if s[k - 1] / s[0] < 1e-12 {
        return Err(Error::DegenerateInput(format!(
            "singular-value ratio σ_K/σ₁ = {:.3e} below 1e-12",
            s[k - 1] / s[0]
        )));
    }

    let n_comp = match components_hint {
        Some(h) => h.clamp(k, pencil_cap),
        None => {
            // Largest relative gap σ_i/σ_{i+1} over i ∈ [K, cap].
            let upper = pencil_cap.min(k * k).min(s.len() - 1);
            let mut best = (k, 0.0f64);
            for i in k..=upper {
                let ratio = if s[i] > 0.0 { s[i - 1] / s[i] } else { f64::INFINITY };
                if ratio > best.1 {
                    best = (i, ratio);
                }
            }
            best.0
        }
    };
    // Guard against retaining numerically-dead directions.
    let mut n_comp = n_comp.min(s.len());
    while n_comp > k && s[n_comp - 1] / s[0] < 1e-13 {
        n_comp -= 1;
    }

    let u = full.u.slice(ndarray::s![.., ..n_comp]).to_owned();
    let weights: Vec<f64> = s[..n_comp].to_vec();

    let ux1 = select_rows(&u, |qx, _, _| qx < q - 1, q);
    let ux2 = select_rows(&u, |qx, _, _| qx >= 1, q);
    let uz1 = select_rows(&u, |_, qz, _| qz < q - 1, q);
    let uz2 = select_rows(&u, |_, qz, _| qz >= 1, q);
    let ug1 = select_rows(&u, |_, _, g| g == 0, q);
    let ug2 = select_rows(&u, |_, _, g| g == 1, q);

    let mx = lstsq(&ux1, &ux2)?;
    let mz = lstsq(&uz1, &uz2)?;
    let mg = lstsq(&ug1, &ug2)?;

    // The x and z pencil matrices commute in exact arithmetic (each
    // component is a simultaneous eigenvector of both), so a generic
    // fixed combination splits every component even when one pencil has
    // repeated eigenvalues — which product structure guarantees as soon
    // as a distinct cosine appears in more than one combination.
    let mut xi = None;
    for rho in [0.618_033_988_749_894_9, 0.381_966_011_250_105_1, 1.324_717_957_244_746] {
        let combo = &mx + &mz.mapv(|v| v * C64::new(rho, 0.0));
        let e = evd_general(&combo)?;
        let f = tsvd(&e.vectors, n_comp)?;
        let cond_ok = f.s[n_comp - 1] > 1e-10 * f.s[0];
        if cond_ok || xi.is_none() {
            xi = Some(e.vectors);
            if cond_ok {
                break;
            }
        }
    }
    let xi = xi.expect("at least one eigenbasis candidate");

    let kappa_x = diag_in_basis(&mx, &xi)?;
    let kappa_z_conj = diag_in_basis(&mz, &xi)?;
    let gamma = diag_in_basis(&mg, &xi)?;

    // Deterministic component order: decreasing subspace weight.
    let mut strength: Vec<f64> = (0..n_comp)
        .map(|c| {
            (0..n_comp)
                .map(|i| (weights[i] * xi[[i, c]].norm()).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    let mut order: Vec<usize> = (0..n_comp).collect();
    order.sort_by(|&a, &b| strength[b].partial_cmp(&strength[a]).unwrap().then(a.cmp(&b)));
    let perm = |v: &[C64]| -> Vec<C64> { order.iter().map(|&c| v[c]).collect() };
    let kappa_x = perm(&kappa_x);
    let kappa_z_conj = perm(&kappa_z_conj);
    let gamma = perm(&gamma);
    strength = order.iter().map(|&c| strength[c]).collect();

    Ok(GeneratorEstimates {
        kappa_x,
        kappa_z_conj,
        gamma,
        u_basis: u,
        component_weights: strength,
        q,
        m,
        s_value,
    })
}

/// Convert per-component generators to angle candidates in degrees.
///
/// cosθ̂ = clamp(−∠κ̂_x/π); cosφ̂ = clamp(+∠κ̂_z/π) — the z eigenvalues
/// come out conjugated, so their angle carries the cosine directly.
pub fn generators_to_angles(g: &GeneratorEstimates) -> Result<UnpairedAngles> {
    let bad: Vec<usize> = (0..g.n_components())
        .filter(|&c| {
            let mx = g.kappa_x[c].norm();
            let mz = g.kappa_z_conj[c].norm();
            !(0.5..=2.0).contains(&mx) || !(0.5..=2.0).contains(&mz)
        })
        .collect();
    if !bad.is_empty() {
        return Err(Error::UnreliableGenerators {
            indices: bad,
            detail: "generator magnitude outside [0.5, 2]".into(),
        });
    }
    let pi = std::f64::consts::PI;
    let theta_deg = g
        .kappa_x
        .iter()
        .map(|k| (-k.arg() / pi).clamp(-1.0, 1.0).acos().to_degrees())
        .collect();
    let phi_deg = g
        .kappa_z_conj
        .iter()
        .map(|k| (k.arg() / pi).clamp(-1.0, 1.0).acos().to_degrees())
        .collect();
    Ok(UnpairedAngles { theta_deg, phi_deg })
}

/// Model value of the symmetry-slab scaling for one component under a
/// given stacking convention (exact-arithmetic prediction).
fn slab_generator_model(convention: SlabConvention, q: usize, m: usize, ux: f64, uz: f64) -> C64 {
    let pi = std::f64::consts::PI;
    match convention {
        SlabConvention::FlipAll => C64::new(1.0, 0.0),
        SlabConvention::FlipSteeringOnly => {
            C64::from_polar(1.0, -pi * (m as f64 - 1.0) * (ux - uz))
        }
        SlabConvention::FlipShiftOnly => {
            C64::from_polar(1.0, pi * (1.0 - q as f64) * (ux - uz))
        }
    }
}

/// Select and pair the K reported targets from the component estimates.
/// Returns index pairs (i_k, j_k) into `kappa_x` / `kappa_z_conj` plus
/// the backend that actually ran (meaningful when `backend` is Auto).
pub fn pair_targets(
    gens: &GeneratorEstimates,
    k: usize,
    backend: PairingBackend,
    ctx: &PairingContext,
) -> Result<(Vec<(usize, usize)>, PairingBackend)> {
    let n = gens.n_components();
    if k == 0 || k > n {
        return Err(Error::Pairing(format!(
            "need {k} pairs from {n} components: candidate set exhausted"
        )));
    }
    // Gate on generator quality before matching anything.
    generators_to_angles(gens)?;
    let resolved = match backend {
        PairingBackend::Auto => {
            if n == k {
                // Exactly K components: the decomposition is already a
                // bijection onto the targets, no matching needed.
                PairingBackend::SharedBasis
            } else if ctx.gamma_informative {
                PairingBackend::Gamma
            } else if ctx.cross_covariance.is_some() && ctx.geometry.is_some() {
                PairingBackend::CrossCovariance
            } else {
                PairingBackend::SubspaceResidual
            }
        }
        other => other,
    };

    let pairs = match resolved {
        PairingBackend::Auto => unreachable!("resolved above"),
        PairingBackend::SharedBasis => (0..k).map(|c| (c, c)).collect(),
        PairingBackend::Gamma => {
            let exp = -2.0 * gens.s_value as f64;
            let mut free_i: Vec<usize> = (0..n).collect();
            let mut free_j: Vec<usize> = (0..n).collect();
            let mut out = Vec::with_capacity(k);
            for kk in 0..k {
                let target = gens.gamma[kk];
                let mut best: Option<(f64, usize, usize)> = None;
                for (ii, &i) in free_i.iter().enumerate() {
                    for (jj, &j) in free_j.iter().enumerate() {
                        let prod = gens.kappa_x[i] * gens.kappa_z_conj[j];
                        let cand = prod.powf(exp);
                        let cost = (target - cand).norm_sqr();
                        if best.map_or(true, |(b, _, _)| cost < b) {
                            best = Some((cost, ii, jj));
                        }
                    }
                }
                let (_, ii, jj) = best.ok_or_else(|| {
                    Error::Pairing("candidate set exhausted before all targets paired".into())
                })?;
                out.push((free_i[ii], free_j[jj]));
                free_i.remove(ii);
                free_j.remove(jj);
            }
            out
        }
        PairingBackend::SubspaceResidual => {
            let pi = std::f64::consts::PI;
            let (q, m, s) = (gens.q, gens.m, gens.s_value);
            let mut scored: Vec<(f64, usize)> = (0..n)
                .map(|c| {
                    let ux = (-gens.kappa_x[c].arg() / pi).clamp(-1.0, 1.0);
                    let uz = (gens.kappa_z_conj[c].arg() / pi).clamp(-1.0, 1.0);
                    let ax = subarray_steering(s, q, ux);
                    let az_c = subarray_steering(s, q, uz).mapv(|v| v.conj());
                    let g2 = slab_generator_model(ctx.convention, q, m, ux, uz);
                    let mut v = CVec::zeros(2 * q * q);
                    for qx in 0..q {
                        for qz in 0..q {
                            let base = (qx * q + qz) * 2;
                            let prod = ax[qx] * az_c[qz];
                            v[base] = prod;
                            v[base + 1] = prod * g2;
                        }
                    }
                    let norm = v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
                    // Residual against the span of the signal subspace.
                    let coeffs = gens.u_basis.t().mapv(|z| z.conj()).dot(&v);
                    let proj = gens.u_basis.dot(&coeffs);
                    let resid = (&v - &proj).iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
                    (resid / norm, c)
                })
                .collect();
            scored.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            scored[..k].iter().map(|&(_, c)| (c, c)).collect()
        }
        PairingBackend::CrossCovariance => {
            let geom = ctx.geometry.ok_or_else(|| {
                Error::Argument("cross_covariance pairing requires the array geometry".into())
            })?;
            let ccm = ctx.cross_covariance.ok_or_else(|| {
                Error::Argument(
                    "cross_covariance pairing requires the sample cross-covariance".into(),
                )
            })?;
            let npos = geom.n_per_axis();
            if ccm.dim() != (npos, npos) {
                return Err(Error::Argument(format!(
                    "cross-covariance is {:?}, expected ({npos}, {npos})",
                    ccm.dim()
                )));
            }
            let pi = std::f64::consts::PI;
            // Candidate rank-1 steering blocks, flattened row-major.
            let mut blocks = CMat::zeros((npos * npos, n));
            for c in 0..n {
                let ux = (-gens.kappa_x[c].arg() / pi).clamp(-1.0, 1.0);
                let uz = (gens.kappa_z_conj[c].arg() / pi).clamp(-1.0, 1.0);
                let ax = steering_vector(geom.positions(), ux)?;
                let az = steering_vector(geom.positions(), uz)?;
                for i in 0..npos {
                    for j in 0..npos {
                        blocks[[i * npos + j, c]] = ax[i] * az[j].conj();
                    }
                }
            }
            let mut rhs = CVec::zeros(npos * npos);
            for i in 0..npos {
                for j in 0..npos {
                    rhs[i * npos + j] = ccm[[i, j]];
                }
            }
            let w = lstsq_vec(&blocks, &rhs)?;
            let mut scored: Vec<(f64, usize)> =
                (0..n).map(|c| (w[c].re, c)).collect();
            scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            scored[..k].iter().map(|&(_, c)| (c, c)).collect()
        }
    };
    Ok((pairs, resolved))
}

/// Measure the slab-2/slab-1 scaling per target on an exact noiseless
/// run: the pipeline's own answer to whether the symmetry slab carries
/// pairing information under a given stacking convention.
pub fn empirical_pair_generator(
    geom: &ArrayGeometry,
    targets: &[Target],
    convention: SlabConvention,
    q: usize,
) -> Result<Vec<C64>> {
    use crate::array::{analytic_covariance, ArrayAxis, Scene};
    let mut out = Vec::with_capacity(targets.len());
    let map = CoarrayMap::new(geom.positions(), geom.s_value())?;
    for t in targets {
        let scene = Scene::new(vec![*t], 0.0, 1, 0)?;
        let cov_x = analytic_covariance(geom, &scene, ArrayAxis::X)?;
        let cov_z = analytic_covariance(geom, &scene, ArrayAxis::Z)?;
        let y_x = coarray_pseudosnapshot(&cov_x, &map, DedupMode::Average)?;
        let y_z = coarray_pseudosnapshot(&cov_z, &map, DedupMode::Average)?;
        let st = subarray_stack(&y_x, &y_z, q)?;
        let (stack, _) = observation_from_stacks(&st, convention)?;
        let denom = stack.tensor.get(&[0, 0, 0, 0, 0]);
        let numer = stack.tensor.get(&[0, 0, 0, 0, 1]);
        if denom.norm() == 0.0 {
            return Err(Error::Numeric("reference entry of slab 1 is zero".into()));
        }
        out.push(numer / denom);
    }
    Ok(out)
}

/// True when any target's slab generator differs measurably from 1.
pub fn gamma_is_informative(
    geom: &ArrayGeometry,
    targets: &[Target],
    convention: SlabConvention,
    q: usize,
) -> Result<bool> {
    let gens = empirical_pair_generator(geom, targets, convention, q)?;
    Ok(gens.iter().any(|g| (g - C64::new(1.0, 0.0)).norm() > 1e-6))
}

/// Least-squares source powers from one axis's full co-array vector and
/// that axis's angle estimates (degrees). Imaginary parts are discarded
/// and negative estimates clipped to zero.
pub fn estimate_source_powers(y: &CVec, angles_deg: &[f64]) -> Result<PowerEstimate> {
    let len = y.len();
    if len % 2 == 0 || len < 3 {
        return Err(Error::Argument(format!(
            "co-array vector length {len} is not an odd number ≥ 3"
        )));
    }
    let s_value = (len + 1) / 2;
    let k = angles_deg.len();
    if k == 0 {
        return Err(Error::Argument("no angles supplied".into()));
    }
    if k > len {
        return Err(Error::Argument(format!(
            "K = {k} exceeds the co-array length {len}"
        )));
    }
    let pi = std::f64::consts::PI;
    let mut a = CMat::zeros((len, k));
    for (kk, ang) in angles_deg.iter().enumerate() {
        let u = ang.to_radians().cos();
        for r in 0..len {
            let lag = r as f64 - (s_value as f64 - 1.0);
            a[[r, kk]] = C64::from_polar(1.0, -pi * u * lag);
        }
    }
    let f = tsvd(&a, k)?;
    let conditioning_warning = f.s[k - 1] <= 0.0 || f.s[0] / f.s[k - 1] > POWER_COND_WARN;
    let sol = lstsq_vec(&a, y)?;
    let mut clipped = 0;
    let values = sol
        .iter()
        .map(|z| {
            if z.re < 0.0 {
                clipped += 1;
                0.0
            } else {
                z.re
            }
        })
        .collect();
    Ok(PowerEstimate { values, clipped, conditioning_warning })
}

/// Noise power as the mean of the N−K smallest eigenvalues of the
/// physical covariance.
pub fn estimate_noise_power(cov_x: &CMat, k: usize) -> Result<f64> {
    let n = cov_x.nrows();
    if cov_x.ncols() != n {
        return Err(Error::Argument("covariance must be square".into()));
    }
    if k >= n {
        return Err(Error::Argument(format!(
            "K = {k} leaves no noise eigenvalues in an {n}×{n} covariance"
        )));
    }
    let eigs = eigh_ascending(cov_x)?;
    let tail = n - k;
    Ok(eigs[..tail].iter().sum::<f64>() / tail as f64)
}

/// Rebuild the signal-noise cross term from angle/power estimates and
/// push it through the same stacking and unfolding as the data.
///
/// `pairs` are (azimuth, elevation) in degrees. Returns the 2Q²×M²
/// unfolded cross-term matrix Ĥ; σ̂_n² = 0 yields exactly zero.
pub fn reconstruct_cross_term(
    pairs: &[(f64, f64)],
    powers: &[f64],
    sigma_n2: f64,
    q: usize,
    s_value: usize,
    convention: SlabConvention,
) -> Result<CMat> {
    if pairs.len() != powers.len() {
        return Err(Error::Argument(format!(
            "{} angle pairs vs {} powers",
            pairs.len(),
            powers.len()
        )));
    }
    let m = 2 * s_value - q;
    let k = pairs.len();
    let mut xt = CMat::zeros((q, m));
    let mut zt = CMat::zeros((q, m));
    for kk in 0..k {
        let ux = pairs[kk].0.to_radians().cos();
        let uz = pairs[kk].1.to_radians().cos();
        let p = C64::new(powers[kk], 0.0);
        let ax = subarray_steering(s_value, q, ux);
        let kx = shift_powers(m, phase_generator(ux));
        let az = subarray_steering(s_value, q, uz);
        let kz = shift_powers(m, phase_generator(uz));
        for qi in 0..q {
            for mi in 0..m {
                xt[[qi, mi]] += p * ax[qi] * kx[mi];
                zt[[qi, mi]] += p * az[qi] * kz[mi];
            }
        }
    }
    let w = noise_locator_matrix(q, m, s_value)?.mapv(|v| C64::new(v, 0.0));
    let sn = C64::new(sigma_n2, 0.0);
    // Slab 1 carries X∘Z*, so its cross term is X̃∘W + W∘Z̃*; slab 2 is
    // assembled from the Z∘X* orientation, whose cross term mirrors it.
    let cross_xz = cross_outer(&xt, &w)?.add(&cross_outer(&w, &zt)?)?.scale(sn);
    let cross_zx = cross_outer(&zt, &w)?.add(&cross_outer(&w, &xt)?)?.scale(sn);
    let stacked = conjugate_symmetric_stack(&cross_xz, &cross_zx, convention)?;
    Ok(contract_and_unfold(&stacked)?.t2)
}

/// Merge tolerance for per-component direction cosines: estimates of
/// the same physical angle scatter well inside this at workable SNRs,
/// while distinct scene angles stay outside it (the closest separation
/// the resolution experiments probe is ≈ 0.009 in cosine).
const COS_MERGE_TOL: f64 = 0.004;

/// Condition-number level of the co-array steering matrix above which a
/// power estimate is flagged. Angle pairs a few hundredths of a degree
/// apart push the 23-lag steering matrix past this; well-separated
/// scenes stay below ~50.
pub const POWER_COND_WARN: f64 = 5e2;

/// Group direction cosines into clusters split wherever the sorted gap
/// exceeds `tol`; returns each value's cluster id and the weighted
/// cluster means. The cluster count is data-driven, so a miscounted
/// rank never forces two distinct angles into one average.
///
/// Cosines live on the mod-2 circle: the array's integer half-wavelength
/// sampling makes u and u ± 2 the same signal, so a noisy estimate of a
/// source near u = ±1 can come out on the far side of the boundary.
/// Clustering therefore cuts the circle at its largest angular gap
/// rather than at ±1, and a cluster's mean is wrapped back into
/// [-1, 1]. Without this, an end-fire source's estimates split into a
/// "junk" cluster at the opposite sign and a conditionally biased one.
fn tolerance_cluster(values: &[f64], weights: &[f64], tol: f64) -> (Vec<usize>, Vec<f64>) {
    let n = values.len();
    if n == 0 {
        return (Vec::new(), Vec::new());
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap());
    // Largest circular gap between consecutive sorted values; the wrap
    // gap closes the circle from the top back around to the bottom.
    let mut cut = n - 1;
    let mut widest = values[order[0]] + 2.0 - values[order[n - 1]];
    for i in 0..n - 1 {
        let gap = values[order[i + 1]] - values[order[i]];
        if gap > widest {
            widest = gap;
            cut = i;
        }
    }
    // Traverse starting just past the cut; elements reached after
    // passing the ±1 boundary are lifted by the period.
    let traversal: Vec<(usize, f64)> = (1..=n)
        .map(|step| {
            let pos = (cut + step) % n;
            let oi = order[pos];
            let lift = if pos <= cut { 2.0 } else { 0.0 };
            (oi, values[oi] + lift)
        })
        .collect();
    let mut ids = vec![0usize; n];
    let mut means = Vec::new();
    let mut start = 0usize;
    for i in 1..=n {
        let boundary = i == n || traversal[i].1 - traversal[i - 1].1 > tol;
        if !boundary {
            continue;
        }
        let mut num = 0.0;
        let mut den = 0.0;
        for &(oi, lifted) in &traversal[start..i] {
            ids[oi] = means.len();
            num += weights[oi] * lifted;
            den += weights[oi];
        }
        let mean = if den > 0.0 { num / den } else { traversal[start].1 };
        means.push((mean + 1.0).rem_euclid(2.0) - 1.0);
        start = i;
    }
    (ids, means)
}

/// Circular distance between two direction cosines on the mod-2 circle.
fn circ_dist(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(2.0);
    d.min(2.0 - d)
}

/// Joint fit of one axis's co-array pseudo snapshot as a sum of complex
/// exponentials plus a zero-lag impulse, refined by damped Gauss-Newton
/// from the given initial cosines.
///
/// This is the step that uses the whole co-array aperture at once: the
/// subspace machinery upstream localizes each direction to a
/// neighbourhood, and the fit here tightens it to the accuracy the
/// pseudo snapshot actually supports. The impulse column absorbs the
/// sensor noise power, so the exponential model is exact rather than
/// approximately despiked, and the amplitudes double as per-direction
/// power estimates. Both the amplitudes and the impulse are constrained
/// real by conjugate-stacking the system. Cosines move freely on the
/// mod-2 circle during the iteration (the model is periodic in u) and
/// are wrapped into [-1, 1] at the end, which keeps end-fire directions
/// unbiased instead of piling their estimates up against the boundary.
#[derive(Debug, Clone)]
struct ToneFit {
    /// Refined cosines, same order as the initializers.
    u: Vec<f64>,
    /// Real amplitude per tone (negative fits clipped to zero).
    powers: Vec<f64>,
    /// Zero-lag impulse coefficient; ≈ the noise power on clean fits.
    spike: f64,
    /// Final squared residual of the fit.
    residual2: f64,
    /// Number of amplitudes clipped at zero.
    clipped: usize,
}

fn tone_fit(y: &CVec, inits: &[f64]) -> Result<ToneFit> {
    let len = y.len();
    if len % 2 == 0 || len < 3 {
        return Err(Error::Argument(format!(
            "co-array vector length {len} is not an odd number ≥ 3"
        )));
    }
    if inits.is_empty() {
        return Err(Error::Argument("tone fit needs at least one initial cosine".into()));
    }
    let kt = inits.len();
    if 2 * kt + 1 > len {
        return Err(Error::Argument(format!(
            "{kt} tones cannot be fit on {len} lags"
        )));
    }
    let s = (len + 1) / 2;
    let pi = std::f64::consts::PI;
    let lag = |l: usize| l as f64 - (s as f64 - 1.0);

    // Real-constrained least squares via conjugate stacking: with rows
    // [A; conj(A)] and rhs [y; conj(y)], the normal equations are real,
    // so the complex minimum-norm solution is itself real.
    let solve_real = |cols: &[CVec], rhs: &CVec| -> Result<Vec<f64>> {
        let nc = cols.len();
        let mut a = CMat::zeros((2 * len, nc));
        for (j, col) in cols.iter().enumerate() {
            for l in 0..len {
                a[[l, j]] = col[l];
                a[[len + l, j]] = col[l].conj();
            }
        }
        let mut b = CMat::zeros((2 * len, 1));
        for l in 0..len {
            b[[l, 0]] = rhs[l];
            b[[len + l, 0]] = rhs[l].conj();
        }
        let sol = lstsq(&a, &b)?;
        Ok((0..nc).map(|j| sol[[j, 0]].re).collect())
    };

    let tone_col = |u: f64| -> CVec {
        CVec::from_shape_fn(len, |l| C64::from_polar(1.0, -pi * u * lag(l)))
    };
    let spike_col = {
        let mut v = CVec::zeros(len);
        v[s - 1] = C64::new(1.0, 0.0);
        v
    };

    let mut u: Vec<f64> = inits.to_vec();
    let mut amps: Vec<f64>;
    let mut resid2;
    {
        let mut cols: Vec<CVec> = u.iter().map(|&ui| tone_col(ui)).collect();
        cols.push(spike_col.clone());
        amps = solve_real(&cols, y)?;
        let mut r = y.clone();
        for (j, col) in cols.iter().enumerate() {
            r = &r - &col.mapv(|v| v * amps[j]);
        }
        resid2 = r.iter().map(|z| z.norm_sqr()).sum::<f64>();
    }

    // Joint Gauss-Newton over cosines, amplitudes, and impulse. Joint
    // matters: alternating amplitude solves with cosine-only steps is
    // coordinate descent, and on closely spaced tones — whose columns
    // couple strongly — it contracts too slowly to converge within any
    // reasonable iteration budget.
    for _ in 0..40 {
        let cols: Vec<CVec> = u.iter().map(|&ui| tone_col(ui)).collect();
        let mut r = y.clone();
        for (j, col) in cols.iter().enumerate() {
            r = &r - &col.mapv(|v| v * amps[j]);
        }
        r = &r - &spike_col.mapv(|v| v * amps[kt]);

        let mut jac: Vec<CVec> = Vec::with_capacity(2 * kt + 1);
        for j in 0..kt {
            jac.push(CVec::from_shape_fn(len, |l| {
                C64::new(0.0, pi * lag(l) * amps[j]) * cols[j][l]
            }));
        }
        for col in &cols {
            jac.push(col.mapv(|v| -v));
        }
        jac.push(spike_col.mapv(|v| -v));
        let delta = solve_real(&jac, &r)?;

        let mut improved = false;
        let mut scale = 1.0f64;
        for _ in 0..7 {
            // r(x + Δ) ≈ r(x) + JΔ, so the descent step is −Δ of the
            // solve above.
            let u_try: Vec<f64> =
                u.iter().zip(&delta[..kt]).map(|(&ui, &d)| ui - scale * d).collect();
            let amps_try: Vec<f64> = amps
                .iter()
                .zip(&delta[kt..])
                .map(|(&ai, &d)| ai - scale * d)
                .collect();
            let cols_try: Vec<CVec> = u_try.iter().map(|&ui| tone_col(ui)).collect();
            let mut r_try = y.clone();
            for (j, col) in cols_try.iter().enumerate() {
                r_try = &r_try - &col.mapv(|v| v * amps_try[j]);
            }
            r_try = &r_try - &spike_col.mapv(|v| v * amps_try[kt]);
            let resid2_try = r_try.iter().map(|z| z.norm_sqr()).sum::<f64>();
            if resid2_try < resid2 {
                let gain = resid2 - resid2_try;
                u = u_try;
                amps = amps_try;
                resid2 = resid2_try;
                improved = true;
                if gain <= 1e-13 * resid2.max(f64::MIN_POSITIVE) {
                    improved = false; // converged
                }
                break;
            }
            scale *= 0.5;
        }
        if !improved {
            break;
        }
    }

    let mut clipped = 0usize;
    let powers: Vec<f64> = amps[..kt]
        .iter()
        .map(|&a| {
            if a < 0.0 {
                clipped += 1;
                0.0
            } else {
                a
            }
        })
        .collect();
    let u_wrapped: Vec<f64> =
        u.iter().map(|&ui| ((ui + 1.0).rem_euclid(2.0) - 1.0).clamp(-1.0, 1.0)).collect();
    Ok(ToneFit { u: u_wrapped, powers, spike: amps[kt], residual2: resid2, clipped })
}

/// The distinct directions one axis actually carries, decided by fit
/// evidence rather than by selection heuristics.
#[derive(Debug, Clone)]
struct AxisEstimate {
    /// Distinct cosines, ascending.
    values: Vec<f64>,
    /// Fitted power per cosine.
    powers: Vec<f64>,
    /// Squared residual of the final fit.
    residual2: f64,
    /// Condition number of the exponential system at the final cosines.
    cond: f64,
    /// Zero-lag impulse of the final fit; ≈ the noise power when the
    /// tone model is complete.
    spike: f64,
    /// Amplitudes clipped at zero across both fit rounds.
    clipped: usize,
}

/// Fraction of the strongest fitted power below which a candidate
/// direction is judged spurious and dropped before the refit.
const WEAK_TONE_FRACTION: f64 = 0.02;

/// Extend `start` to `budget` tones by greedy forward selection, each
/// round auditioning every remaining candidate with a full joint refit
/// and keeping the model that fits best.
///
/// Trial refits are not a luxury: once a fit over too few tones has
/// converged, its residual is orthogonal to the fitted tone columns and
/// their frequency derivatives, and a tone close to an existing one lies
/// first-order inside that span — so correlation scoring against the
/// residual is structurally blind to exactly the close splits this stage
/// exists to recover. Only a joint refit seeded with the extra candidate
/// can show the improvement. The snapshots are short, so the extra fits
/// are cheap.
fn grow_tone_model(
    y: &CVec,
    start: &[f64],
    candidates: &[f64],
    budget: usize,
) -> Option<ToneFit> {
    let mut current: Option<ToneFit> = if start.is_empty() {
        None
    } else {
        tone_fit(y, start).ok()
    };
    let have = current.as_ref().map_or(0, |f| f.u.len());
    for _ in have..budget {
        let model: Vec<f64> = current.as_ref().map_or_else(Vec::new, |f| f.u.clone());
        let mut best: Option<ToneFit> = None;
        for &c in candidates {
            // Skip candidates the current model already sits on.
            if model.iter().any(|&u| circ_dist(u, c) < 1e-3) {
                continue;
            }
            let mut trial = model.clone();
            trial.push(c);
            // A candidate that breaks the fit simply loses the audition.
            let Ok(fit) = tone_fit(y, &trial) else { continue };
            if best.as_ref().map_or(true, |b| fit.residual2 < b.residual2) {
                best = Some(fit);
            }
        }
        match best {
            Some(fit) => current = Some(fit),
            None => break,
        }
    }
    current
}

/// Resolve one axis's candidate cosines into the distinct directions the
/// pseudo snapshot actually supports.
///
/// Several models of the same size are grown with [`grow_tone_model`]
/// and the best fit wins: one from scratch, and one seeded with each
/// caller-supplied block of jointly estimated cosines. The multi-start
/// matters because greedy growth is path-dependent — its early tones
/// settle on weighted blends of closely spaced directions, a local
/// optimum that later additions cannot always pull apart — while a block
/// that places every tone near its own direction at once converges to
/// the split configuration directly.
///
/// Size is `k_max` capped by what the snapshot and candidate pool can
/// support, and a weak-tone prune afterwards drops whatever the fit gave
/// negligible power, so the reported count is still evidence-led.
/// Near-duplicate candidates sort themselves out: one copy is taken, the
/// refit moves it onto the true direction, and the remaining copies
/// never earn their way in. `min_keep` lower-bounds the survivor count
/// so a caller that needs enough distinct values for its pair budget can
/// force borderline tones to stay.
fn consolidate_axis(
    y: &CVec,
    candidates: &[f64],
    blocks: &[&[f64]],
    k_max: usize,
    min_keep: usize,
) -> Result<AxisEstimate> {
    if candidates.is_empty() {
        return Err(Error::Argument("axis consolidation needs candidates".into()));
    }
    let len = y.len();
    let budget = k_max.clamp(1, (len - 1) / 2).min(candidates.len());

    let mut fit: Option<ToneFit> = grow_tone_model(y, &[], candidates, budget);
    for block in blocks {
        // Deduplicate the block at the fit's own resolution and drop
        // blocks the budget cannot accommodate.
        let mut seed: Vec<f64> = Vec::new();
        for &b in block.iter() {
            if !seed.iter().any(|&u| circ_dist(u, b) < 1e-3) {
                seed.push(b);
            }
        }
        if seed.is_empty() || seed.len() > budget {
            continue;
        }
        if let Some(grown) = grow_tone_model(y, &seed, candidates, budget) {
            if fit.as_ref().map_or(true, |f| grown.residual2 < f.residual2) {
                fit = Some(grown);
            }
        }
    }
    let mut fit =
        fit.ok_or_else(|| Error::Numeric("axis fit retained no directions".into()))?;

    // Weak-tone prune on the chosen model.
    let p_max = fit.powers.iter().copied().fold(0.0f64, f64::max);
    let strong: Vec<f64> = fit
        .u
        .iter()
        .zip(fit.powers.iter())
        .filter(|&(_, &p)| p > WEAK_TONE_FRACTION * p_max)
        .map(|(&u, _)| u)
        .collect();
    let mut clipped = fit.clipped;
    if strong.len() >= min_keep.max(1) && strong.len() < fit.u.len() {
        fit = tone_fit(y, &strong)?;
        clipped += fit.clipped;
    }

    let mut order: Vec<usize> = (0..fit.u.len()).collect();
    order.sort_by(|&a, &b| fit.u[a].partial_cmp(&fit.u[b]).unwrap());
    let values: Vec<f64> = order.iter().map(|&i| fit.u[i]).collect();
    let powers: Vec<f64> = order.iter().map(|&i| fit.powers[i]).collect();
    let cond = tone_matrix_cond(len, &values)?;
    Ok(AxisEstimate {
        values,
        powers,
        residual2: fit.residual2,
        cond,
        spike: fit.spike,
        clipped,
    })
}

/// One axis of the refinement: direction cosines from a shift-invariance
/// pencil on the square smoothing split of the axis pseudo-snapshot,
/// plus a distinct-cosine count used to size the decomposition.
///
/// `spike` is subtracted from the zero-lag entry before windowing; it
/// carries the damped noise-level estimate from the second pass on, so
/// the refinement sharpens together with the iteration.
///
/// The count comes from thresholding the stack's singular values against
/// twice the median of their tail (the self-noise floor of the sample
/// covariance), with a relative floor so exact data still counts only
/// true directions. Ratio-gap detection is deliberately avoided: closely
/// spaced cosines compress the leading singular values and make the
/// largest gap land before the true order, and an undersized
/// decomposition merges neighbouring directions for good. Overcounting
/// is the cheaper failure — spurious components are deweighted and
/// dropped downstream.
///
/// The pencil itself always runs at the largest feasible order ≤ K for
/// the same reason.
fn axis_refine(y: &CVec, k: usize, spike: f64) -> Result<(Vec<f64>, usize)> {
    let len = y.len();
    if len % 2 == 0 || len < 3 {
        return Err(Error::Argument(format!(
            "pseudo snapshot length {len} is not an odd number ≥ 3"
        )));
    }
    let s_value = (len + 1) / 2;
    let mut y_adj = y.clone();
    y_adj[s_value - 1] -= C64::new(spike, 0.0);
    let stack = subarray_stack(&y_adj, &y_adj, s_value)?.x_stack;
    let (q, m) = stack.dim();
    let full = tsvd(&stack, q.min(m))?;
    let desc: Vec<f64> = full.s.iter().map(|v| v.max(0.0)).collect();
    let tail_len = (desc.len() / 3).max(1);
    let mut tail: Vec<f64> = desc[desc.len() - tail_len..].to_vec();
    tail.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let tail_median = tail[tail.len() / 2];
    let threshold = (2.0 * tail_median).max(desc[0].max(f64::MIN_POSITIVE) * 1e-12);
    let detected = desc
        .iter()
        .take_while(|&&s| s > threshold)
        .count()
        .clamp(1, k.min(desc.len() - 1));
    let d = k.min(m - 1).min(q);
    let v = full.v.slice(ndarray::s![.., ..d]).to_owned();
    let v1 = v.slice(ndarray::s![..m - 1, ..]).to_owned();
    let v2 = v.slice(ndarray::s![1.., ..]).to_owned();
    let p = lstsq(&v1, &v2)?;
    let e = evd_general(&p)?;
    // The singular vectors span the conjugated shift manifold, so the
    // pencil eigenvalues sit at e^{+jπu}.
    let pi = std::f64::consts::PI;
    let mut cosines: Vec<f64> = e
        .values
        .iter()
        .map(|lam| lam.arg() / pi)
        .filter(|v| v.is_finite())
        .map(|v| v.clamp(-1.0, 1.0))
        .collect();
    if cosines.is_empty() {
        return Err(Error::Numeric("axis pencil produced no usable roots".into()));
    }
    cosines.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok((cosines, detected))
}

/// Anchor cosines for one axis: weighted cluster means of the joint
/// decomposition's per-component cosines, augmented with any single-axis
/// pencil root that sits far from all of them. The joint components get
/// priority because they separate closely spaced values on one axis using
/// the other axis; the pencil roots only add coverage the decomposition
/// missed.
fn anchor_set(values: &[f64], weights: &[f64], refined: &[f64]) -> Vec<f64> {
    let (_, means) = tolerance_cluster(values, weights, COS_MERGE_TOL);
    let mut anchors = means;
    for &root in refined {
        if anchors.iter().all(|&a| circ_dist(a, root) > COS_MERGE_TOL) {
            anchors.push(root);
        }
    }
    anchors.sort_by(|a, b| a.partial_cmp(b).unwrap());
    anchors
}

fn nearest_index(anchors: &[f64], value: f64) -> usize {
    let mut best = (0usize, f64::INFINITY);
    for (i, &a) in anchors.iter().enumerate() {
        let d = circ_dist(a, value);
        if d < best.1 {
            best = (i, d);
        }
    }
    best.0
}

/// Condition number of the co-array exponential system at the given
/// cosines — the quantity that decides whether amplitude estimates at
/// those directions are trustworthy.
fn tone_matrix_cond(len: usize, u: &[f64]) -> Result<f64> {
    if u.len() < 2 {
        return Ok(1.0);
    }
    let s = (len + 1) / 2;
    let pi = std::f64::consts::PI;
    let v = CMat::from_shape_fn((len, u.len()), |(l, j)| {
        C64::from_polar(1.0, -pi * u[j] * (l as f64 - (s as f64 - 1.0)))
    });
    let f = tsvd(&v, u.len())?;
    let smin = f.s[u.len() - 1];
    if smin <= 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(f.s[0] / smin)
}

/// Drop the listed components from an estimate set. The basis is kept
/// whole: it tracks the full signal subspace, not single components.
fn drop_components(gens: &GeneratorEstimates, drop: &[usize]) -> GeneratorEstimates {
    let keep: Vec<usize> = (0..gens.n_components()).filter(|c| !drop.contains(c)).collect();
    GeneratorEstimates {
        kappa_x: keep.iter().map(|&c| gens.kappa_x[c]).collect(),
        kappa_z_conj: keep.iter().map(|&c| gens.kappa_z_conj[c]).collect(),
        gamma: keep.iter().map(|&c| gens.gamma[c]).collect(),
        u_basis: gens.u_basis.clone(),
        component_weights: keep.iter().map(|&c| gens.component_weights[c]).collect(),
        q: gens.q,
        m: gens.m,
        s_value: gens.s_value,
    }
}

/// Collapse components that landed on the same anchor cell, pooling the
/// weights and keeping the strongest member's coupling value, so the
/// pairing backends score each candidate cell once. Skipped when it
/// would leave fewer cells than reported targets.
fn dedup_cells(
    gens: &GeneratorEstimates,
    ids_x: &[usize],
    ids_z: &[usize],
    k: usize,
) -> (GeneratorEstimates, Vec<usize>, Vec<usize>) {
    use std::collections::BTreeMap;
    let n = gens.n_components();
    let mut cells: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for c in 0..n {
        cells.entry((ids_x[c], ids_z[c])).or_default().push(c);
    }
    if cells.len() < k || cells.len() == n {
        return (gens.clone(), ids_x.to_vec(), ids_z.to_vec());
    }
    let mut kappa_x = Vec::with_capacity(cells.len());
    let mut kappa_z_conj = Vec::with_capacity(cells.len());
    let mut gamma = Vec::with_capacity(cells.len());
    let mut weights = Vec::with_capacity(cells.len());
    let mut cell_x = Vec::with_capacity(cells.len());
    let mut cell_z = Vec::with_capacity(cells.len());
    for ((ix, iz), members) in &cells {
        let rep = *members
            .iter()
            .max_by(|&&a, &&b| {
                gens.component_weights[a].partial_cmp(&gens.component_weights[b]).unwrap()
            })
            .unwrap();
        kappa_x.push(gens.kappa_x[rep]);
        kappa_z_conj.push(gens.kappa_z_conj[rep]);
        gamma.push(gens.gamma[rep]);
        weights.push(members.iter().map(|&c| gens.component_weights[c]).sum());
        cell_x.push(*ix);
        cell_z.push(*iz);
    }
    let merged = GeneratorEstimates {
        kappa_x,
        kappa_z_conj,
        gamma,
        u_basis: gens.u_basis.clone(),
        component_weights: weights,
        q: gens.q,
        m: gens.m,
        s_value: gens.s_value,
    };
    (merged, cell_x, cell_z)
}

/// Run the full two-step loop: decompose, pair, estimate powers and the
/// noise level, rebuild the cross term, subtract a damped copy from the
/// original observation, and repeat until the subtracted energy stalls.
///
/// Each pass refines the per-axis angles on the first-slab factors
/// (which see the full M-length aperture and, after the first pass, the
/// cleaned observation) and anchors every decomposition component to the
/// nearest refined cosine before pairing.
pub fn iterate_estimate(
    obs: &UnfoldedObservation,
    cov_x: &CMat,
    y_x: &CVec,
    y_z: &CVec,
    settings: &EstimatorSettings,
    ctx: &PairingContext,
) -> Result<DoaEstimate> {
    if !(0.0..=1.0).contains(&settings.mu) {
        return Err(Error::Argument(format!("μ = {} outside [0, 1]", settings.mu)));
    }
    if settings.max_iterations == 0 {
        return Err(Error::Argument("iteration cap must be ≥ 1".into()));
    }
    let k = settings.k;
    let n_phys = cov_x.nrows();
    if n_phys < 2 {
        return Err(Error::Argument("physical covariance too small".into()));
    }
    let (q, m) = (obs.q, obs.m);
    let s_value = (q + m) / 2;
    let pencil_cap = identifiability_bound(q, m)?.min(2 * q * (q - 1)).min(q * q);

    let norm2 = fro_norm(&obs.t2).powi(2);
    let tol = settings.delta * norm2;
    // The physical covariance never changes across passes, so the noise
    // level is fixed up front and reused everywhere.
    let sigma_n2 = estimate_noise_power(cov_x, k.min(n_phys - 1))?.max(0.0);
    // Refined across passes: with K at or beyond the physical aperture
    // the covariance tail has no clean noise eigenvalues left, and the
    // axis fits' zero-lag impulse becomes the better noise read.
    let mut sigma = sigma_n2;

    let mut current = obs.t2.clone();
    let mut eps_prev = 0.0f64;
    let mut history: Vec<f64> = Vec::new();
    let mut last_good: Option<(f64, DoaEstimate)> = None;

    for l in 1..=settings.max_iterations {
        let cur_obs = UnfoldedObservation { t2: current.clone(), q, m };
        let attempt = (|| -> Result<(DoaEstimate, CMat, f64)> {
            // Per-axis refinement. From the second pass on, the damped
            // noise-spike estimate is removed from the pseudo snapshots
            // before windowing — the working observation's cross-term
            // subtraction deliberately leaves the auto-term in place, so
            // the refinement is where the cleanup lands.
            let spike = if l > 1 { settings.mu * sigma } else { 0.0 };
            let (refined_x, dx) = axis_refine(y_x, k, spike)?;
            let (refined_z, dz) = axis_refine(y_z, k, spike)?;

            let hint = match settings.components_override {
                Some(h) => h.max(k).min(pencil_cap.max(k)),
                None => (dx * dz).max(k).min(pencil_cap.max(k)),
            };
            let gens = step1_decompose(&cur_obs, k, Some(hint))?;
            let (gens, angles) = match generators_to_angles(&gens) {
                Ok(a) => (gens, a),
                Err(Error::UnreliableGenerators { indices, detail }) => {
                    // Over-ordered decompositions can pick up junk
                    // directions; discard them as long as enough healthy
                    // components remain.
                    if gens.n_components() - indices.len() < k {
                        return Err(Error::UnreliableGenerators { indices, detail });
                    }
                    let trimmed = drop_components(&gens, &indices);
                    let a = generators_to_angles(&trimmed)?;
                    (trimmed, a)
                }
                Err(e) => return Err(e),
            };

            // Candidate cosines per axis: weighted cluster means of the
            // joint decomposition's components plus any pencil root far
            // from all of them.
            let cos_x: Vec<f64> =
                angles.theta_deg.iter().map(|a| a.to_radians().cos()).collect();
            let cos_z: Vec<f64> = angles.phi_deg.iter().map(|a| a.to_radians().cos()).collect();
            let w = &gens.component_weights;
            let anchors_x = anchor_set(&cos_x, w, &refined_x);
            let anchors_z = anchor_set(&cos_z, w, &refined_z);
            // Fit evidence now decides the distinct directions each
            // axis carries: candidates the pseudo snapshot does not
            // support never earn a place in the greedy fit. If that
            // leaves too few distinct cells for the pair budget, weak
            // directions are forced back in.
            let max_tones = (y_x.len() - 1) / 2;
            let blocks_x: [&[f64]; 1] = [&refined_x];
            let blocks_z: [&[f64]; 1] = [&refined_z];
            let mut axis_x = consolidate_axis(y_x, &anchors_x, &blocks_x, k, 1)?;
            let mut axis_z = consolidate_axis(y_z, &anchors_z, &blocks_z, k, 1)?;
            if axis_x.values.len() * axis_z.values.len() < k {
                axis_x = consolidate_axis(y_x, &anchors_x, &blocks_x, k, k.min(max_tones))?;
                axis_z = consolidate_axis(y_z, &anchors_z, &blocks_z, k, k.min(max_tones))?;
                if axis_x.values.len() * axis_z.values.len() < k {
                    return Err(Error::Pairing(format!(
                        "axes resolved {} x {} distinct directions, fewer than K = {k}",
                        axis_x.values.len(),
                        axis_z.values.len()
                    )));
                }
            }
            if k + 1 >= n_phys {
                sigma = (0.5 * (axis_x.spike + axis_z.spike)).max(0.0);
            }
            let vals_x = &axis_x.values;
            let vals_z = &axis_z.values;

            // Components mapped onto the refined grid, one candidate
            // per occupied cell.
            let ids_x: Vec<usize> =
                cos_x.iter().map(|&v| nearest_index(vals_x, v)).collect();
            let ids_z: Vec<usize> =
                cos_z.iter().map(|&v| nearest_index(vals_z, v)).collect();
            let (merged, cell_x, cell_z) = dedup_cells(&gens, &ids_x, &ids_z, k);
            let pi = std::f64::consts::PI;
            let gens_anchored = GeneratorEstimates {
                kappa_x: cell_x
                    .iter()
                    .map(|&i| C64::from_polar(1.0, -pi * vals_x[i]))
                    .collect(),
                kappa_z_conj: cell_z
                    .iter()
                    .map(|&i| C64::from_polar(1.0, pi * vals_z[i]))
                    .collect(),
                ..merged
            };
            let ctx = PairingContext { convention: settings.convention, ..*ctx };

            // The backend is resolved here because the candidate set
            // depends on it. Component cells stay authoritative when
            // they form a bijection onto the targets or carry pairing
            // information of their own. The evidence-scored backends
            // instead get every grid combination as a candidate: a
            // component whose cosine came out corrupted on one axis
            // must not be able to erase a true cell from the running.
            let resolved = match settings.backend {
                PairingBackend::Auto => {
                    if gens_anchored.n_components() == k {
                        PairingBackend::SharedBasis
                    } else if ctx.gamma_informative {
                        PairingBackend::Gamma
                    } else if ctx.cross_covariance.is_some() && ctx.geometry.is_some() {
                        PairingBackend::CrossCovariance
                    } else {
                        PairingBackend::SubspaceResidual
                    }
                }
                other => other,
            };
            let want_grid = matches!(
                resolved,
                PairingBackend::CrossCovariance | PairingBackend::SubspaceResidual
            ) && vals_x.len() * vals_z.len() >= k;
            let (candidates, cand_x, cand_z) = if want_grid {
                let mut cells: Vec<(usize, usize)> = (0..vals_x.len())
                    .flat_map(|ix| (0..vals_z.len()).map(move |iz| (ix, iz)))
                    .collect();
                if let (PairingBackend::CrossCovariance, Some(geom), Some(ccm)) =
                    (resolved, ctx.geometry, ctx.cross_covariance)
                {
                    // The joint fit inside the backend needs more
                    // equations than unknowns; a matched-filter score
                    // prunes the grid down to the plausible cells first.
                    let npos = geom.n_per_axis();
                    let cap = k.max((3 * k).min(npos * npos));
                    if cells.len() > cap {
                        let ax_all: Vec<CVec> = vals_x
                            .iter()
                            .map(|&u| steering_vector(geom.positions(), u))
                            .collect::<Result<_>>()?;
                        let az_all: Vec<CVec> = vals_z
                            .iter()
                            .map(|&u| steering_vector(geom.positions(), u))
                            .collect::<Result<_>>()?;
                        let mut scored: Vec<(f64, usize)> = cells
                            .iter()
                            .enumerate()
                            .map(|(ci, &(ix, iz))| {
                                let ax = &ax_all[ix];
                                let az = &az_all[iz];
                                let mut acc = C64::new(0.0, 0.0);
                                for i in 0..npos {
                                    for j in 0..npos {
                                        acc += ax[i].conj() * ccm[[i, j]] * az[j];
                                    }
                                }
                                (acc.norm(), ci)
                            })
                            .collect();
                        scored.sort_by(|a, b| {
                            b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1))
                        });
                        let mut keep: Vec<usize> =
                            scored[..cap].iter().map(|&(_, ci)| ci).collect();
                        keep.sort_unstable();
                        cells = keep.into_iter().map(|ci| cells[ci]).collect();
                    }
                }
                let n_c = cells.len();
                let cand = GeneratorEstimates {
                    kappa_x: cells
                        .iter()
                        .map(|&(ix, _)| C64::from_polar(1.0, -pi * vals_x[ix]))
                        .collect(),
                    kappa_z_conj: cells
                        .iter()
                        .map(|&(_, iz)| C64::from_polar(1.0, pi * vals_z[iz]))
                        .collect(),
                    gamma: vec![C64::new(1.0, 0.0); n_c],
                    component_weights: vec![1.0; n_c],
                    ..gens_anchored.clone()
                };
                let cx: Vec<usize> = cells.iter().map(|c| c.0).collect();
                let cz: Vec<usize> = cells.iter().map(|c| c.1).collect();
                (cand, cx, cz)
            } else {
                (gens_anchored, cell_x, cell_z)
            };
            let (idx_pairs, used) = pair_targets(&candidates, k, resolved, &ctx)?;

            // Report angles straight off the axis estimates; per-target
            // power splits each axis marginal evenly over the reported
            // targets that share it, then averages the two axes.
            let mut occ_x: Vec<usize> = idx_pairs.iter().map(|&(i, _)| cand_x[i]).collect();
            occ_x.sort_unstable();
            occ_x.dedup();
            let mut occ_z: Vec<usize> = idx_pairs.iter().map(|&(_, j)| cand_z[j]).collect();
            occ_z.sort_unstable();
            occ_z.dedup();
            let mut mult_x = vec![0usize; occ_x.len()];
            let mut mult_z = vec![0usize; occ_z.len()];
            let pos_x = |cell: usize| occ_x.binary_search(&cell).unwrap();
            let pos_z = |cell: usize| occ_z.binary_search(&cell).unwrap();
            for &(i, j) in &idx_pairs {
                mult_x[pos_x(cand_x[i])] += 1;
                mult_z[pos_z(cand_z[j])] += 1;
            }
            let mut records: Vec<(f64, f64, f64)> = idx_pairs
                .iter()
                .map(|&(i, j)| {
                    let (ix, iz) = (cand_x[i], cand_z[j]);
                    let ra = axis_x.powers[ix] / mult_x[pos_x(ix)].max(1) as f64;
                    let cb = axis_z.powers[iz] / mult_z[pos_z(iz)].max(1) as f64;
                    (
                        vals_x[ix].acos().to_degrees(),
                        vals_z[iz].acos().to_degrees(),
                        0.5 * (ra + cb),
                    )
                })
                .collect();
            records.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let pairs_deg: Vec<(f64, f64)> = records.iter().map(|r| (r.0, r.1)).collect();
            let powers: Vec<f64> = records.iter().map(|r| r.2).collect();

            let h = reconstruct_cross_term(
                &pairs_deg,
                &powers,
                sigma,
                q,
                s_value,
                settings.convention,
            )?;

            let est = DoaEstimate {
                pairs: (0..k)
                    .map(|i| TargetEstimate {
                        azimuth_deg: pairs_deg[i].0,
                        elevation_deg: pairs_deg[i].1,
                        power: powers[i],
                    })
                    .collect(),
                iterations_used: l,
                epsilon_history: Vec::new(),
                pairing_backend_used: used,
                degraded: false,
                power_conditioning_warning: axis_x.cond > POWER_COND_WARN
                    || axis_z.cond > POWER_COND_WARN,
                clipped_powers: axis_x.clipped + axis_z.clipped,
            };
            Ok((est, h, axis_x.residual2 + axis_z.residual2))
        })();

        match attempt {
            Ok((est, h, score)) => {
                let mu = C64::new(settings.mu, 0.0);
                let subtracted = h.mapv(|v| v * mu);
                let eps = fro_norm(&subtracted).powi(2);
                // A healthy pass re-estimates essentially the same
                // cross term, so ε settles. A jump upward means the
                // subtraction started amplifying its own estimation
                // error; keep what the earlier passes produced.
                if l >= 2 && eps > 2.0 * eps_prev.max(tol) {
                    break;
                }
                history.push(eps);
                // Across passes, the answer whose exponential fit left
                // the smallest residual wins: a pass that cleaned the
                // observation into better anchors shows up here, and a
                // pass that wandered off does not overwrite a good one.
                if last_good.as_ref().map_or(true, |&(s, _)| score < s) {
                    last_good = Some((score, est));
                }
                let stalled = eps <= tol || (eps - eps_prev).abs() <= tol;
                if stalled || l == settings.max_iterations {
                    break;
                }
                current = &obs.t2 - &subtracted;
                eps_prev = eps;
            }
            Err(e) => {
                if let Some((_, mut est)) = last_good {
                    est.degraded = true;
                    est.iterations_used = history.len();
                    est.epsilon_history = history;
                    return Ok(est);
                }
                return Err(e);
            }
        }
    }
    let (_, mut est) =
        last_good.ok_or_else(|| Error::Numeric("no iteration completed".into()))?;
    est.iterations_used = history.len();
    est.epsilon_history = history;
    Ok(est)
}
