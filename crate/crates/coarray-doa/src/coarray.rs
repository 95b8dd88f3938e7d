//! Difference co-array bookkeeping.
//!
//! A covariance estimate of one nested arm is rearranged into a pseudo
//! snapshot over the contiguous lag set −(S−1)..S−1, then split into `M`
//! overlapping subarrays of length `Q` (with `Q + M = 2S`). The noise
//! contribution of the rearrangement lands on a fixed 0/1 stripe — the
//! noise locator matrix — which the estimator later needs both for
//! building cross terms and for locating noise energy.
//!
//! Lag-to-row convention, fixed project-wide: lag ℓ lives in 0-indexed
//! row `ℓ + S − 1` of a pseudo snapshot. Every selector matrix downstream
//! is derived from this and from the Kronecker ordering in [`crate::tensor`].

use ndarray::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{CMat, CVec, C64};

/// For every lag of the difference co-array, the covariance entries that
/// realize it.
#[derive(Debug, Clone)]
pub struct CoarrayMap {
    n: usize,
    s_value: usize,
    /// `pairs[r]` lists (i, j) with ξᵢ − ξⱼ = r − (S−1), lexicographically
    /// sorted.
    pairs: Vec<Vec<(usize, usize)>>,
}

impl CoarrayMap {
    /// Build the lag map of a geometry whose co-array must cover
    /// −(S−1)..S−1 without holes.
    pub fn new(positions: &[usize], s_value: usize) -> Result<Self> {
        let n = positions.len();
        if s_value < 2 {
            return Err(Error::Argument(format!("S = {s_value} too small")));
        }
        let s = s_value as isize;
        let mut pairs: Vec<Vec<(usize, usize)>> = vec![Vec::new(); 2 * s_value - 1];
        for i in 0..n {
            for j in 0..n {
                let lag = positions[i] as isize - positions[j] as isize;
                if lag.abs() <= s - 1 {
                    pairs[(lag + s - 1) as usize].push((i, j));
                }
            }
        }
        for (r, p) in pairs.iter_mut().enumerate() {
            p.sort_unstable();
            if p.is_empty() {
                return Err(Error::Argument(format!(
                    "no element pair realizes lag {}; geometry is not hole-free",
                    r as isize - (s - 1)
                )));
            }
        }
        debug_assert_eq!(pairs[s_value - 1].len(), n, "lag 0 must have exactly N pairs");
        Ok(CoarrayMap { n, s_value, pairs })
    }

    pub fn s_value(&self) -> usize {
        self.s_value
    }

    pub fn n_elements(&self) -> usize {
        self.n
    }

    pub fn num_lags(&self) -> usize {
        2 * self.s_value - 1
    }

    /// Index pairs realizing the given lag.
    pub fn pairs_for_lag(&self, lag: isize) -> Result<&[(usize, usize)]> {
        let s = self.s_value as isize;
        if lag.abs() > s - 1 {
            return Err(Error::Argument(format!("lag {lag} outside ±{}", s - 1)));
        }
        Ok(&self.pairs[(lag + s - 1) as usize])
    }
}

/// How to collapse the redundant covariance entries of one lag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DedupMode {
    /// Arithmetic mean over all pairs for the lag (lower variance).
    #[default]
    Average,
    /// Lexicographically first pair only (the literal "remove repeated
    /// rows and sort" reading).
    First,
}

/// Rearrange a covariance matrix into a pseudo snapshot over the lags
/// −(S−1)..S−1; entry at 0-indexed row `r` carries lag `r − (S−1)`.
pub fn coarray_pseudosnapshot(cov: &CMat, map: &CoarrayMap, dedup: DedupMode) -> Result<CVec> {
    let (r, c) = cov.dim();
    if r != map.n || c != map.n {
        return Err(Error::Argument(format!(
            "covariance is {r}x{c} but the lag map was built for {} elements",
            map.n
        )));
    }
    let mut out = Array1::<C64>::zeros(map.num_lags());
    for (row, pairs) in map.pairs.iter().enumerate() {
        out[row] = match dedup {
            DedupMode::Average => {
                let sum: C64 = pairs.iter().map(|&(i, j)| cov[[i, j]]).sum();
                sum / pairs.len() as f64
            }
            DedupMode::First => {
                let (i, j) = pairs[0];
                cov[[i, j]]
            }
        };
    }
    Ok(out)
}

/// The subarray size maximizing the identifiability bound under
/// `Q + M = 2S`.
///
/// The bound `min(2(Q²−1), (2S−Q)²)` is the minimum of an increasing and
/// a decreasing function of Q, so its integer maximizer is the floor or
/// the ceiling of the continuous crossing point `√(8S²+2) − 2S`;
/// whichever scores higher wins (plain rounding picks the wrong side for
/// some S, e.g. S=9).
pub fn optimal_subarray_size(s_value: usize) -> Result<(usize, usize)> {
    if s_value < 2 {
        return Err(Error::Argument(format!("S = {s_value} too small (need ≥ 2)")));
    }
    let s = s_value as f64;
    let q_star = (8.0 * s * s + 2.0).sqrt() - 2.0 * s;
    let lo = (q_star.floor() as usize).clamp(2, 2 * s_value - 2);
    let hi = (q_star.ceil() as usize).clamp(2, 2 * s_value - 2);
    let score = |q: usize| identifiability_bound(q, 2 * s_value - q).unwrap_or(0);
    let q = if score(hi) > score(lo) { hi } else { lo };
    Ok((q, 2 * s_value - q))
}

/// Largest source count the subarray split can support:
/// `min(2(Q²−1), M²)`.
pub fn identifiability_bound(q: usize, m: usize) -> Result<usize> {
    if q < 2 || m < 2 {
        return Err(Error::Argument(format!(
            "subarray sizes Q={q}, M={m} must both be at least 2"
        )));
    }
    Ok((2 * (q * q - 1)).min(m * m))
}

/// The two pseudo snapshots split into M overlapped subarrays of length Q
/// each, stacked as columns.
#[derive(Debug, Clone)]
pub struct SubarrayStack {
    pub x_stack: CMat,
    pub z_stack: CMat,
    pub q: usize,
    pub m: usize,
    pub s_value: usize,
}

/// Split both pseudo snapshots into `M = 2S − Q` overlapping windows:
/// column m (0-indexed) of each stack is rows `m..m+Q` of the snapshot,
/// so the first column covers lags −S+1..−S+Q.
pub fn subarray_stack(y_x: &CVec, y_z: &CVec, q: usize) -> Result<SubarrayStack> {
    let len = y_x.len();
    if y_z.len() != len {
        return Err(Error::Argument(format!(
            "pseudo snapshots disagree in length: {len} vs {}",
            y_z.len()
        )));
    }
    if len < 3 || len % 2 == 0 {
        return Err(Error::Argument(format!(
            "pseudo snapshot length {len} is not 2S−1 for any S ≥ 2"
        )));
    }
    let s_value = (len + 1) / 2;
    if q < 2 || q > 2 * s_value - 2 {
        return Err(Error::Argument(format!(
            "subarray size Q={q} outside [2, {}] for S={s_value}",
            2 * s_value - 2
        )));
    }
    let m = 2 * s_value - q;
    let window = |y: &CVec| Array2::from_shape_fn((q, m), |(qi, mi)| y[qi + mi]);
    Ok(SubarrayStack { x_stack: window(y_x), z_stack: window(y_z), q, m, s_value })
}

/// Where the noise term of the pseudo snapshot lands after windowing:
/// `W(q,m) = 1` iff the window entry (q,m) sits on lag 0, i.e. 0-indexed
/// `q + m = S − 1`.
pub fn noise_locator_matrix(q: usize, m: usize, s_value: usize) -> Result<Array2<f64>> {
    if q + m != 2 * s_value {
        return Err(Error::Argument(format!(
            "Q + M must equal 2S: got {q} + {m} ≠ {}",
            2 * s_value
        )));
    }
    Ok(Array2::from_shape_fn((q, m), |(qi, mi)| {
        if qi + mi == s_value - 1 {
            1.0
        } else {
            0.0
        }
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::array::{
        analytic_covariance, nested_positions, steering_vector, ArrayAxis, ArrayGeometry, Scene,
        Target,
    };
    use crate::numerics::vec_norm;

    fn unit_lag_vector(s: usize, noise: f64) -> CVec {
        let mut e = Array1::<C64>::zeros(2 * s - 1);
        e[s - 1] = C64::new(noise, 0.0);
        e
    }

    #[test]
    fn map_covers_all_lags_with_n_pairs_at_zero() {
        for n in [4usize, 6, 8] {
            let pos = nested_positions(n).unwrap();
            let s = (n / 2) * (n / 2 + 1);
            let map = CoarrayMap::new(&pos, s).unwrap();
            assert_eq!(map.num_lags(), 2 * s - 1);
            assert_eq!(map.pairs_for_lag(0).unwrap().len(), n);
            for lag in -(s as isize - 1)..=(s as isize - 1) {
                assert!(!map.pairs_for_lag(lag).unwrap().is_empty());
            }
        }
    }

    #[test]
    fn map_rejects_holey_geometry() {
        // {0, 1, 4} misses lag 2.
        assert!(CoarrayMap::new(&[0, 1, 4], 5).is_err());
    }

    #[test]
    fn pseudosnapshot_of_identity_is_unit_lag_vector() {
        let pos = nested_positions(6).unwrap();
        let map = CoarrayMap::new(&pos, 12).unwrap();
        let eye = Array2::<C64>::eye(6);
        let y = coarray_pseudosnapshot(&eye, &map, DedupMode::Average).unwrap();
        let e = unit_lag_vector(12, 1.0);
        assert!(vec_norm(&(&y - &e)) < 1e-14);
        let y_first = coarray_pseudosnapshot(&eye, &map, DedupMode::First).unwrap();
        assert!(vec_norm(&(&y_first - &e)) < 1e-14);
    }

    #[test]
    fn pseudosnapshot_single_source_is_long_steering_vector() {
        let geom = ArrayGeometry::nested(6).unwrap();
        let scene = Scene::new(
            vec![Target { azimuth_deg: 38.0, elevation_deg: 90.0, power: 1.7 }],
            0.0,
            4,
            0,
        )
        .unwrap();
        let cov = analytic_covariance(&geom, &scene, ArrayAxis::X).unwrap();
        let map = CoarrayMap::new(geom.positions(), geom.s_value()).unwrap();
        for dedup in [DedupMode::Average, DedupMode::First] {
            let y = coarray_pseudosnapshot(&cov, &map, dedup).unwrap();
            let u = 38f64.to_radians().cos();
            for (row, v) in y.iter().enumerate() {
                let lag = row as f64 - 11.0;
                let want = C64::from_polar(1.7, -std::f64::consts::PI * u * lag);
                assert!((v - want).norm() < 1e-12, "row {row} dedup {dedup:?}");
            }
        }
    }

    #[test]
    fn pseudosnapshot_hermitian_input_gives_conjugate_symmetry() {
        let geom = ArrayGeometry::nested(6).unwrap();
        let scene = Scene::new(
            vec![
                Target { azimuth_deg: 25.0, elevation_deg: 70.0, power: 1.0 },
                Target { azimuth_deg: 115.0, elevation_deg: 40.0, power: 0.6 },
            ],
            0.8,
            4,
            0,
        )
        .unwrap();
        let cov = analytic_covariance(&geom, &scene, ArrayAxis::X).unwrap();
        let map = CoarrayMap::new(geom.positions(), geom.s_value()).unwrap();
        let y = coarray_pseudosnapshot(&cov, &map, DedupMode::Average).unwrap();
        let s = 12usize;
        for lag in 0..=(s - 1) {
            let pos = y[s - 1 + lag];
            let neg = y[s - 1 - lag];
            assert!((neg - pos.conj()).norm() < 1e-13);
        }
    }

    #[test]
    fn pseudosnapshot_rejects_mismatched_covariance() {
        let pos = nested_positions(4).unwrap();
        let map = CoarrayMap::new(&pos, 6).unwrap();
        let cov = Array2::<C64>::eye(5);
        assert!(coarray_pseudosnapshot(&cov, &map, DedupMode::Average).is_err());
    }

    #[test]
    fn optimal_sizes_match_closed_form() {
        assert_eq!(optimal_subarray_size(12).unwrap(), (10, 14));
        assert_eq!(optimal_subarray_size(6).unwrap(), (5, 7));
    }

    #[test]
    fn optimal_size_maximizes_bound_exhaustively() {
        for s in 2..=50usize {
            let (q_star, m_star) = optimal_subarray_size(s).unwrap();
            assert_eq!(q_star + m_star, 2 * s);
            let best = identifiability_bound(q_star, m_star).unwrap();
            for q in 2..=(2 * s - 2) {
                let b = identifiability_bound(q, 2 * s - q).unwrap();
                assert!(b <= best, "S={s}: Q={q} beats Q*={q_star} ({b} > {best})");
            }
        }
    }

    #[test]
    fn optimal_dof_matches_continuous_expression() {
        let (q, m) = optimal_subarray_size(12).unwrap();
        let bound = identifiability_bound(q, m).unwrap();
        assert_eq!(bound, 196);
        let s = 12f64;
        let continuous = 24.0 * s * s - 8.0 * s * (8.0 * s * s + 2.0).sqrt() + 2.0;
        assert!((bound as f64 - continuous).abs() <= 1.0);
    }

    #[test]
    fn identifiability_bound_examples() {
        assert_eq!(identifiability_bound(10, 14).unwrap(), 196);
        assert_eq!(identifiability_bound(12, 12).unwrap(), 144);
        assert_eq!(identifiability_bound(2, 2).unwrap(), 4);
        assert!(identifiability_bound(1, 2).is_err());
    }

    #[test]
    fn stack_window_structure_at_boundary() {
        // S = 6, Q = 2S−2 = 10, M = 2: two columns shifted by one lag.
        let s = 6usize;
        let y: CVec = Array1::from_iter((0..2 * s - 1).map(|i| C64::new(i as f64, -(i as f64))));
        let st = subarray_stack(&y, &y, 10).unwrap();
        assert_eq!((st.q, st.m), (10, 2));
        for qi in 0..10 {
            assert_eq!(st.x_stack[[qi, 0]], y[qi]);
            assert_eq!(st.x_stack[[qi, 1]], y[qi + 1]);
        }
    }

    #[test]
    fn stack_of_noiseless_source_obeys_shift_relation() {
        let geom = ArrayGeometry::nested(6).unwrap();
        let scene = Scene::new(
            vec![Target { azimuth_deg: 64.0, elevation_deg: 90.0, power: 2.3 }],
            0.0,
            4,
            0,
        )
        .unwrap();
        let cov = analytic_covariance(&geom, &scene, ArrayAxis::X).unwrap();
        let map = CoarrayMap::new(geom.positions(), geom.s_value()).unwrap();
        let y = coarray_pseudosnapshot(&cov, &map, DedupMode::Average).unwrap();
        let st = subarray_stack(&y, &y, 10).unwrap();
        let u = 64f64.to_radians().cos();
        let s = 12i32;
        // Closed form of each window entry…
        for qi in 0..st.q {
            for mi in 0..st.m {
                let lag = (qi as i32 + mi as i32) - (s - 1);
                let want = C64::from_polar(2.3, -std::f64::consts::PI * u * lag as f64);
                assert!((st.x_stack[[qi, mi]] - want).norm() < 1e-12);
            }
        }
        // …and the Vandermonde shift: column m = column 0 · generatorᵐ.
        let gen = C64::from_polar(1.0, -std::f64::consts::PI * u);
        for mi in 1..st.m {
            let g = gen.powi(mi as i32);
            for qi in 0..st.q {
                assert!((st.x_stack[[qi, mi]] - st.x_stack[[qi, 0]] * g).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn stack_of_unit_lag_vector_is_noise_locator() {
        let s = 12usize;
        let e = unit_lag_vector(s, 1.0);
        for q in [2usize, 5, 10, 12, 22] {
            let st = subarray_stack(&e, &e, q).unwrap();
            let w = noise_locator_matrix(st.q, st.m, s).unwrap();
            for qi in 0..st.q {
                for mi in 0..st.m {
                    assert!((st.x_stack[[qi, mi]].re - w[[qi, mi]]).abs() < 1e-15);
                    assert!(st.x_stack[[qi, mi]].im == 0.0);
                }
            }
        }
    }

    #[test]
    fn stack_rejects_bad_sizes() {
        let y: CVec = Array1::zeros(23);
        let short: CVec = Array1::zeros(22);
        assert!(subarray_stack(&y, &short, 10).is_err());
        assert!(subarray_stack(&short, &short, 10).is_err());
        assert!(subarray_stack(&y, &y, 1).is_err());
        assert!(subarray_stack(&y, &y, 23).is_err());
    }

    #[test]
    fn noise_locator_structure() {
        // Square case: anti-diagonal of full rank.
        let w = noise_locator_matrix(12, 12, 12).unwrap();
        for qi in 0..12 {
            for mi in 0..12 {
                let want = if qi + mi == 11 { 1.0 } else { 0.0 };
                assert_eq!(w[[qi, mi]], want);
            }
        }
        // DOF-optimal split: 10 ones on the stripe.
        let w = noise_locator_matrix(10, 14, 12).unwrap();
        let total: f64 = w.iter().sum();
        assert_eq!(total, 10.0);
        for qi in 0..10 {
            let row: f64 = w.row(qi).sum();
            assert!(row <= 1.0);
        }
        for mi in 0..14 {
            let col: f64 = w.column(mi).sum();
            assert!(col <= 1.0);
        }
        assert!(noise_locator_matrix(10, 13, 12).is_err());
    }
}
