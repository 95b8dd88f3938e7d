//! Physical array geometry, steering, scenes, and snapshot simulation.
//!
//! The sensor is an L-shaped pair of nested uniform linear arrays sharing
//! the corner element: one arm along x (azimuth θ measured from the x
//! axis) and one along z (elevation φ measured from the z axis). Each arm
//! has `N` elements: an inner level at unit spacing `d₁ = λ/2` and an
//! outer level at spacing `(N/2+1)·d₁`, which makes the difference
//! co-array of either arm a contiguous run of `2S−1` lags with
//! `S = (N/2)(N/2+1)`.
//!
//! All angles cross the public boundary in degrees; internally everything
//! is a direction cosine, so steering entries are `e^{−jπ·cos(angle)·ξ}`
//! with ξ the element position in units of d₁.

use ndarray::prelude::*;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::numerics::{hermitian_t, CMat, CVec, C64};

/// Which arm of the L the operation refers to.
///
/// `X` carries azimuth (cos θ), `Z` carries elevation (cos φ).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArrayAxis {
    X,
    Z,
}

/// Geometry of one nested arm (both arms are identical).
#[derive(Debug, Clone)]
pub struct ArrayGeometry {
    n_per_axis: usize,
    positions: Vec<usize>,
    s_value: usize,
}

/// Inner level `{0, …, N/2−1}`, outer level at spacing `N/2+1` starting
/// where the inner level leaves off: position `(m+1)(N/2+1) − 1` for
/// `m = 0..N/2`. The result is validated by brute force against the
/// hole-free co-array requirement.
pub fn nested_positions(n: usize) -> Result<Vec<usize>> {
    if n < 4 || n % 2 != 0 {
        return Err(Error::Argument(format!(
            "nested geometry needs an even element count ≥ 4 per axis, got {n}"
        )));
    }
    let half = n / 2;
    let mut pos: Vec<usize> = (0..half).collect();
    pos.extend((0..half).map(|m| (m + 1) * (half + 1) - 1));
    pos.sort_unstable();
    pos.dedup();
    if pos.len() != n {
        return Err(Error::Numeric(format!(
            "nested construction produced duplicate positions for N={n}"
        )));
    }
    Ok(pos)
}

impl ArrayGeometry {
    /// Build and validate the nested geometry for `n` elements per axis.
    pub fn nested(n: usize) -> Result<Self> {
        let positions = nested_positions(n)?;
        let s_value = (n / 2) * (n / 2 + 1);
        let geom = ArrayGeometry { n_per_axis: n, positions, s_value };
        geom.check_coarray_contiguous()?;
        Ok(geom)
    }

    /// Brute-force check that {ξᵢ − ξⱼ} covers every lag in
    /// [−(S−1), S−1].
    fn check_coarray_contiguous(&self) -> Result<()> {
        let s = self.s_value as isize;
        let mut covered = vec![false; (2 * s - 1) as usize];
        for &a in &self.positions {
            for &b in &self.positions {
                let lag = a as isize - b as isize;
                if lag.abs() <= s - 1 {
                    covered[(lag + s - 1) as usize] = true;
                }
            }
        }
        if covered.iter().all(|&c| c) {
            Ok(())
        } else {
            Err(Error::Numeric(format!(
                "difference set of {:?} leaves holes in [−{}, {}]",
                self.positions,
                s - 1,
                s - 1
            )))
        }
    }

    pub fn n_per_axis(&self) -> usize {
        self.n_per_axis
    }

    /// Element positions of one arm in units of d₁, ascending, starting
    /// at 0.
    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    /// S = (N/2)(N/2+1); the co-array spans lags −(S−1)..S−1.
    pub fn s_value(&self) -> usize {
        self.s_value
    }

    /// Number of distinct lags in the difference co-array of one arm.
    pub fn coarray_size(&self) -> usize {
        2 * self.s_value - 1
    }

    /// Physical element count of the whole L (corner element shared).
    pub fn physical_elements(&self) -> usize {
        2 * self.n_per_axis - 1
    }
}

/// One far-field narrowband source.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Target {
    /// Azimuth in degrees, measured from the x axis, open interval (0, 180).
    pub azimuth_deg: f64,
    /// Elevation in degrees, measured from the z axis, open interval (0, 180).
    pub elevation_deg: f64,
    /// Source power σ_k² > 0.
    pub power: f64,
}

impl Target {
    pub fn direction_cosine(&self, axis: ArrayAxis) -> f64 {
        match axis {
            ArrayAxis::X => self.azimuth_deg.to_radians().cos(),
            ArrayAxis::Z => self.elevation_deg.to_radians().cos(),
        }
    }
}

/// A simulation scenario: sources, noise level, snapshot count, RNG seed.
#[derive(Debug, Clone)]
pub struct Scene {
    pub targets: Vec<Target>,
    pub noise_power: f64,
    pub snapshots: usize,
    pub seed: u64,
}

impl Scene {
    pub fn new(targets: Vec<Target>, noise_power: f64, snapshots: usize, seed: u64) -> Result<Self> {
        for (k, t) in targets.iter().enumerate() {
            if !(t.azimuth_deg > 0.0 && t.azimuth_deg < 180.0) {
                return Err(Error::Argument(format!(
                    "target {k}: azimuth {}° outside the open interval (0°, 180°)",
                    t.azimuth_deg
                )));
            }
            if !(t.elevation_deg > 0.0 && t.elevation_deg < 180.0) {
                return Err(Error::Argument(format!(
                    "target {k}: elevation {}° outside the open interval (0°, 180°)",
                    t.elevation_deg
                )));
            }
            if !(t.power > 0.0) {
                return Err(Error::Argument(format!(
                    "target {k}: power {} must be positive",
                    t.power
                )));
            }
        }
        for i in 0..targets.len() {
            for j in i + 1..targets.len() {
                if targets[i].azimuth_deg == targets[j].azimuth_deg
                    && targets[i].elevation_deg == targets[j].elevation_deg
                {
                    return Err(Error::Argument(format!(
                        "targets {i} and {j} share the same (azimuth, elevation) pair"
                    )));
                }
            }
        }
        if !(noise_power >= 0.0) {
            return Err(Error::Argument(format!(
                "noise power {noise_power} must be nonnegative"
            )));
        }
        if snapshots == 0 {
            return Err(Error::Argument("snapshot count must be at least 1".into()));
        }
        Ok(Scene { targets, noise_power, snapshots, seed })
    }

    pub fn num_targets(&self) -> usize {
        self.targets.len()
    }

    pub fn total_signal_power(&self) -> f64 {
        self.targets.iter().map(|t| t.power).sum()
    }
}

/// Steering vector over integer positions for direction cosine `u`:
/// entry n = e^{−jπ·u·ξₙ}.
pub fn steering_vector(positions: &[usize], u: f64) -> Result<CVec> {
    if !(-1.0..=1.0).contains(&u) {
        return Err(Error::Argument(format!(
            "direction cosine {u} outside [−1, 1]"
        )));
    }
    Ok(Array1::from_iter(
        positions
            .iter()
            .map(|&xi| C64::from_polar(1.0, -std::f64::consts::PI * u * xi as f64)),
    ))
}

/// N×K matrix of steering vectors for all scene targets on one axis.
pub fn steering_matrix(geom: &ArrayGeometry, targets: &[Target], axis: ArrayAxis) -> Result<CMat> {
    let n = geom.n_per_axis();
    let mut a = Array2::<C64>::zeros((n, targets.len()));
    for (k, t) in targets.iter().enumerate() {
        let col = steering_vector(geom.positions(), t.direction_cosine(axis))?;
        a.column_mut(k).assign(&col);
    }
    Ok(a)
}

fn circular_gaussian(rng: &mut ChaCha8Rng, variance: f64) -> C64 {
    let s = (variance / 2.0).sqrt();
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    C64::new(re * s, im * s)
}

/// Simulated snapshot matrices for both arms.
pub struct Snapshots {
    /// N×T_s snapshots of the x arm.
    pub x: CMat,
    /// N×T_s snapshots of the z arm.
    pub z: CMat,
}

/// Draw `x(t) = A_x s(t) + n_x(t)` and `z(t) = A_z s(t) + n_z(t)` with one
/// shared source sequence `s(t)` and independent per-arm noise.
/// Deterministic in `scene.seed`: the same scene yields bitwise-identical
/// matrices.
pub fn simulate_snapshots(geom: &ArrayGeometry, scene: &Scene) -> Result<Snapshots> {
    let n = geom.n_per_axis();
    let ts = scene.snapshots;
    let k = scene.num_targets();
    let a_x = steering_matrix(geom, &scene.targets, ArrayAxis::X)?;
    let a_z = steering_matrix(geom, &scene.targets, ArrayAxis::Z)?;
    let mut rng = ChaCha8Rng::seed_from_u64(scene.seed);

    // Fixed draw order: all source samples, then x noise, then z noise —
    // column-major within each block. This order is part of the
    // reproducibility contract.
    let mut s = Array2::<C64>::zeros((k, ts));
    for t in 0..ts {
        for (kk, tgt) in scene.targets.iter().enumerate() {
            s[[kk, t]] = circular_gaussian(&mut rng, tgt.power);
        }
    }
    let noise = |rng: &mut ChaCha8Rng| -> CMat {
        let mut m = Array2::<C64>::zeros((n, ts));
        if scene.noise_power > 0.0 {
            for t in 0..ts {
                for i in 0..n {
                    m[[i, t]] = circular_gaussian(rng, scene.noise_power);
                }
            }
        }
        m
    };
    let n_x = noise(&mut rng);
    let n_z = noise(&mut rng);
    Ok(Snapshots { x: a_x.dot(&s) + &n_x, z: a_z.dot(&s) + &n_z })
}

/// Sample covariance `(1/T_s) Σ_t y(t) y(t)ᴴ`, symmetrized so downstream
/// Hermitian factorizations see an exactly Hermitian matrix.
pub fn sample_covariance(snapshots: &CMat) -> Result<CMat> {
    let (_, ts) = snapshots.dim();
    if ts == 0 {
        return Err(Error::Argument("sample covariance of zero snapshots".into()));
    }
    let scale = C64::new(1.0 / ts as f64, 0.0);
    let r = snapshots.dot(&hermitian_t(snapshots)).mapv(|z| z * scale);
    Ok((&r + &hermitian_t(&r)).mapv(|z| z * 0.5))
}

/// Sample cross-covariance `(1/T_s) Σ_t x(t) z(t)ᴴ` between the two arms.
pub fn sample_cross_covariance(x: &CMat, z: &CMat) -> Result<CMat> {
    let (_, tx) = x.dim();
    let (_, tz) = z.dim();
    if tx == 0 || tx != tz {
        return Err(Error::Argument(format!(
            "cross covariance needs matching nonzero snapshot counts, got {tx} and {tz}"
        )));
    }
    let scale = C64::new(1.0 / tx as f64, 0.0);
    Ok(x.dot(&hermitian_t(z)).mapv(|z| z * scale))
}

/// Exact covariance `A diag(σ²) Aᴴ + σ_n² I` of one arm — the
/// infinite-snapshot oracle used by noiseless and asymptotic tests.
pub fn analytic_covariance(geom: &ArrayGeometry, scene: &Scene, axis: ArrayAxis) -> Result<CMat> {
    let n = geom.n_per_axis();
    let a = steering_matrix(geom, &scene.targets, axis)?;
    let mut r = Array2::<C64>::zeros((n, n));
    for (k, t) in scene.targets.iter().enumerate() {
        let col = a.column(k);
        for i in 0..n {
            for j in 0..n {
                r[[i, j]] += col[i] * col[j].conj() * t.power;
            }
        }
    }
    for i in 0..n {
        r[[i, i]] += scene.noise_power;
    }
    Ok(r)
}

/// Exact cross-covariance `A_x diag(σ²) A_zᴴ` between the arms (noise is
/// independent across arms, so no σ_n² term).
pub fn analytic_cross_covariance(geom: &ArrayGeometry, scene: &Scene) -> Result<CMat> {
    let n = geom.n_per_axis();
    let ax = steering_matrix(geom, &scene.targets, ArrayAxis::X)?;
    let az = steering_matrix(geom, &scene.targets, ArrayAxis::Z)?;
    let mut r = Array2::<C64>::zeros((n, n));
    for (k, t) in scene.targets.iter().enumerate() {
        for i in 0..n {
            for j in 0..n {
                r[[i, j]] += ax[[i, k]] * az[[j, k]].conj() * t.power;
            }
        }
    }
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{eigh_ascending, fro_norm};

    fn target(az: f64, el: f64, p: f64) -> Target {
        Target { azimuth_deg: az, elevation_deg: el, power: p }
    }

    #[test]
    fn nested_positions_small_arrays() {
        assert_eq!(nested_positions(6).unwrap(), vec![0, 1, 2, 3, 7, 11]);
        assert_eq!(nested_positions(4).unwrap(), vec![0, 1, 2, 5]);
    }

    #[test]
    fn nested_positions_rejects_bad_counts() {
        assert!(nested_positions(2).is_err());
        assert!(nested_positions(5).is_err());
        assert!(nested_positions(0).is_err());
    }

    #[test]
    fn coarray_contiguous_for_supported_sizes() {
        for n in [4usize, 6, 8, 10] {
            let g = ArrayGeometry::nested(n).unwrap();
            assert_eq!(g.s_value(), (n / 2) * (n / 2 + 1));
            assert_eq!(g.coarray_size(), 2 * g.s_value() - 1);
            assert_eq!(g.physical_elements(), 2 * n - 1);
        }
    }

    #[test]
    fn coarray_size_n6_is_23() {
        let g = ArrayGeometry::nested(6).unwrap();
        assert_eq!(g.coarray_size(), 23);
        assert_eq!(g.s_value(), 12);
    }

    #[test]
    fn steering_broadside_is_all_ones() {
        let v = steering_vector(&[0, 1, 2, 5], 0.0).unwrap();
        assert!(v.iter().all(|z| (z - C64::new(1.0, 0.0)).norm() < 1e-15));
    }

    #[test]
    fn steering_sixty_degrees_two_elements() {
        let v = steering_vector(&[0, 1], 60f64.to_radians().cos()).unwrap();
        assert!((v[0] - C64::new(1.0, 0.0)).norm() < 1e-12);
        assert!((v[1] - C64::new(0.0, -1.0)).norm() < 1e-12);
    }

    #[test]
    fn steering_is_unit_modulus_and_checks_range() {
        let v = steering_vector(&[0, 1, 2, 3, 7, 11], -0.73).unwrap();
        for z in v.iter() {
            assert!((z.norm() - 1.0).abs() < 1e-14);
        }
        assert!(steering_vector(&[0, 1], 1.01).is_err());
        assert!(steering_vector(&[0, 1], -1.01).is_err());
    }

    #[test]
    fn scene_validation_rejects_bad_inputs() {
        let ok = target(30.0, 60.0, 1.0);
        assert!(Scene::new(vec![ok], 0.1, 16, 1).is_ok());
        assert!(Scene::new(vec![target(0.0, 60.0, 1.0)], 0.1, 16, 1).is_err());
        assert!(Scene::new(vec![target(30.0, 180.0, 1.0)], 0.1, 16, 1).is_err());
        assert!(Scene::new(vec![target(30.0, 60.0, 0.0)], 0.1, 16, 1).is_err());
        assert!(Scene::new(vec![ok], -0.5, 16, 1).is_err());
        assert!(Scene::new(vec![ok], 0.1, 0, 1).is_err());
        assert!(Scene::new(vec![ok, ok], 0.1, 16, 1).is_err());
    }

    #[test]
    fn noiseless_single_snapshot_is_rank_one() {
        let g = ArrayGeometry::nested(4).unwrap();
        let scene = Scene::new(vec![target(40.0, 70.0, 2.0)], 0.0, 1, 99).unwrap();
        let snaps = simulate_snapshots(&g, &scene).unwrap();
        let a = steering_vector(g.positions(), 40f64.to_radians().cos()).unwrap();
        // x(1) = s·a exactly: the ratio x_i / a_i is constant.
        let s0 = snaps.x[[0, 0]] / a[0];
        for i in 0..g.n_per_axis() {
            assert!((snaps.x[[i, 0]] - s0 * a[i]).norm() < 1e-12);
        }
    }

    #[test]
    fn same_seed_reproduces_snapshots_exactly() {
        let g = ArrayGeometry::nested(6).unwrap();
        let scene =
            Scene::new(vec![target(20.0, 50.0, 1.0), target(75.0, 110.0, 0.5)], 0.3, 64, 1234)
                .unwrap();
        let a = simulate_snapshots(&g, &scene).unwrap();
        let b = simulate_snapshots(&g, &scene).unwrap();
        assert_eq!(a.x, b.x);
        assert_eq!(a.z, b.z);
    }

    #[test]
    fn sample_covariance_trivial_cases() {
        let x = Array2::from_shape_fn((3, 1), |(i, _)| C64::new(i as f64 + 1.0, -(i as f64)));
        let r = sample_covariance(&x).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let want = x[[i, 0]] * x[[j, 0]].conj();
                assert!((r[[i, j]] - want).norm() < 1e-14);
            }
        }
        let z = Array2::<C64>::zeros((3, 5));
        assert!(fro_norm(&sample_covariance(&z).unwrap()) == 0.0);
        assert!(sample_covariance(&Array2::<C64>::zeros((3, 0))).is_err());
    }

    #[test]
    fn sample_covariance_is_psd_hermitian() {
        let g = ArrayGeometry::nested(6).unwrap();
        let scene = Scene::new(vec![target(33.0, 66.0, 1.5)], 0.7, 128, 5).unwrap();
        let snaps = simulate_snapshots(&g, &scene).unwrap();
        let r = sample_covariance(&snaps.x).unwrap();
        assert!(fro_norm(&(&r - &hermitian_t(&r))) < 1e-12 * fro_norm(&r));
        let w = eigh_ascending(&r).unwrap();
        assert!(w[0] >= -1e-10 * w.last().unwrap());
    }

    #[test]
    fn sample_covariance_approaches_analytic_limit() {
        let g = ArrayGeometry::nested(6).unwrap();
        let scene = Scene::new(
            vec![target(25.0, 45.0, 1.0), target(50.0, 80.0, 2.0), target(95.0, 120.0, 0.5)],
            0.4,
            100_000,
            2024,
        )
        .unwrap();
        let snaps = simulate_snapshots(&g, &scene).unwrap();
        let r_hat = sample_covariance(&snaps.x).unwrap();
        let r = analytic_covariance(&g, &scene, ArrayAxis::X).unwrap();
        let rel = fro_norm(&(&r_hat - &r)) / fro_norm(&r);
        assert!(rel < 0.02, "relative error {rel} exceeds 2%");
    }

    #[test]
    fn analytic_covariance_noise_only_and_rank_one() {
        let g = ArrayGeometry::nested(4).unwrap();
        let noise_only = Scene::new(vec![], 0.9, 8, 0).unwrap();
        let r0 = analytic_covariance(&g, &noise_only, ArrayAxis::Z).unwrap();
        let eye = Array2::<C64>::eye(4).mapv(|z| z * C64::new(0.9, 0.0));
        assert!(fro_norm(&(&r0 - &eye)) < 1e-14);

        let one = Scene::new(vec![target(70.0, 35.0, 1.3)], 0.0, 8, 0).unwrap();
        let r1 = analytic_covariance(&g, &one, ArrayAxis::X).unwrap();
        let w = eigh_ascending(&r1).unwrap();
        let trace: f64 = (0..4).map(|i| r1[[i, i]].re).sum();
        assert!((trace - 4.0 * 1.3).abs() < 1e-12);
        assert!(w[3] > 1e-9);
        for v in &w[..3] {
            assert!(v.abs() < 1e-10);
        }
    }

    #[test]
    fn analytic_covariance_signal_eigenvalue_count() {
        let g = ArrayGeometry::nested(6).unwrap();
        let scene = Scene::new(
            vec![target(20.0, 40.0, 1.0), target(60.0, 100.0, 0.8)],
            0.25,
            8,
            0,
        )
        .unwrap();
        let r = analytic_covariance(&g, &scene, ArrayAxis::X).unwrap();
        let w = eigh_ascending(&r).unwrap();
        let above = w.iter().filter(|&&v| v > 0.25 + 1e-9).count();
        assert_eq!(above, 2);
    }

    #[test]
    fn snapshot_moments_match_model() {
        let g = ArrayGeometry::nested(4).unwrap();
        let scene = Scene::new(
            vec![target(30.0, 60.0, 1.0), target(80.0, 110.0, 0.5)],
            0.25,
            50_000,
            77,
        )
        .unwrap();
        let snaps = simulate_snapshots(&g, &scene).unwrap();
        let v = scene.total_signal_power() + scene.noise_power;
        let count = (2 * snaps.x.len()) as f64; // real + imaginary parts
        let mean: f64 = snaps.x.iter().map(|z| z.re + z.im).sum::<f64>() / count;
        let var: f64 = snaps.x.iter().map(|z| z.norm_sqr()).sum::<f64>() / (snaps.x.len() as f64);
        // Each real component has variance v/2; the pooled mean has standard
        // deviation √(v/2/count).
        assert!(mean.abs() < 3.0 * (v / 2.0 / count).sqrt(), "mean {mean} too far from 0");
        // Sample variance of ~2·count Gaussian reals concentrates within
        // ~√(2/count)·v of v.
        assert!((var - v).abs() < 3.0 * (2.0 / count).sqrt() * v, "variance {var} vs {v}");
    }
}
