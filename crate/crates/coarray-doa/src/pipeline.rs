//! From subarray stacks to the working observation matrix.
//!
//! The two Q×M subarray stacks are combined into an order-4
//! cross-correlation tensor (outer product of one stack with the
//! conjugate of the other), doubled into an order-5 stack by exploiting
//! the conjugate symmetry of the two cross directions, and finally
//! contracted/unfolded into the `2Q² × M²` matrix the subspace estimator
//! works on.
//!
//! Row ordering of the observation matrix (0-indexed): row
//! `(q_x·Q + q_z)·2 + g` — symmetry slab fastest, z window index middle,
//! x window index slowest — exactly the Khatri-Rao ordering
//! `(Āx ⊙ Āz*) ⊙ G` under this crate's "second operand fastest"
//! convention. Columns: `m_x·M + m_z` (z fastest), matching `Kx ⊙ Kz*`.

use serde::{Deserialize, Serialize};

use crate::array::Target;
use crate::coarray::SubarrayStack;
use crate::error::{Error, Result};
use crate::numerics::{CMat, CVec, C64};
use crate::tensor::{unfold, DenseTensor};

/// How the second (conjugate-symmetric) slab is assembled from the
/// reversed cross tensor.
///
/// `FlipAll` is the faithful realization of the conjugate-symmetry
/// identity and is the default everywhere. The two partial flips are
/// valid data rearrangements but conjugate the un-flipped Vandermonde
/// modes, so the two slabs stop sharing factor matrices; they exist only
/// as probes for the pair-matching study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SlabConvention {
    #[default]
    FlipAll,
    FlipSteeringOnly,
    FlipShiftOnly,
}

/// Order-5 stack (Q, M, Q, M, 2): slab g=0 is the x→z cross tensor, slab
/// g=1 its conjugate-symmetric rearrangement.
#[derive(Debug, Clone)]
pub struct StackedTensor {
    pub tensor: DenseTensor,
    pub q: usize,
    pub m: usize,
    pub convention: SlabConvention,
}

/// The `2Q² × M²` unfolded observation.
#[derive(Debug, Clone)]
pub struct UnfoldedObservation {
    pub t2: CMat,
    pub q: usize,
    pub m: usize,
}

/// Outer product of one stack with the conjugate of the other:
/// entry (i, j, k, l) = x(i, j) · conj(z(k, l)).  Swapping the arguments
/// produces the z→x cross tensor.
pub fn cross_outer(x_stack: &CMat, z_stack: &CMat) -> Result<DenseTensor> {
    let (q, m) = x_stack.dim();
    if z_stack.dim() != (q, m) {
        return Err(Error::Argument(format!(
            "stack shapes disagree: {:?} vs {:?}",
            x_stack.dim(),
            z_stack.dim()
        )));
    }
    Ok(DenseTensor::from_fn(&[q, m, q, m], |idx| {
        x_stack[[idx[0], idx[1]]] * z_stack[[idx[2], idx[3]]].conj()
    }))
}

/// Stack the x→z cross tensor with the rearranged z→x cross tensor along
/// a fifth mode of size 2.
///
/// `r_zx` must have mode order (z, z-shift, x, x-shift), i.e. come from
/// `cross_outer(z_stack, x_stack)`. Under [`SlabConvention::FlipAll`] the
/// second slab satisfies `slab2 = conj(reverse-all-modes(slab1))` exactly
/// — even on noisy data — because the two cross tensors are built from
/// the same pair of stacks.
pub fn conjugate_symmetric_stack(
    r_xz: &DenseTensor,
    r_zx: &DenseTensor,
    convention: SlabConvention,
) -> Result<StackedTensor> {
    let shape = r_xz.shape().to_vec();
    if shape.len() != 4 || r_zx.shape() != shape.as_slice() {
        return Err(Error::Argument(format!(
            "cross tensors must share an order-4 shape; got {:?} and {:?}",
            r_xz.shape(),
            r_zx.shape()
        )));
    }
    if shape[0] != shape[2] || shape[1] != shape[3] {
        return Err(Error::Argument(format!(
            "cross tensor shape {shape:?} is not (Q, M, Q, M)"
        )));
    }
    let (q, m) = (shape[0], shape[1]);
    // Mode-permute r_zx to x-first order and flip modes per convention.
    let slab2 = DenseTensor::from_fn(&[q, m, q, m], |idx| {
        let (i, j, k, l) = (idx[0], idx[1], idx[2], idx[3]);
        let src = match convention {
            SlabConvention::FlipAll => [q - 1 - k, m - 1 - l, q - 1 - i, m - 1 - j],
            SlabConvention::FlipSteeringOnly => [q - 1 - k, l, q - 1 - i, j],
            SlabConvention::FlipShiftOnly => [k, m - 1 - l, i, m - 1 - j],
        };
        r_zx.get(&src)
    });
    let tensor = DenseTensor::stack_pair(r_xz, &slab2)?;
    Ok(StackedTensor { tensor, q, m, convention })
}

/// Contract the order-5 stack to the working matrix: rows merge modes
/// (g fastest, q_z, q_x slowest), columns merge (m_z fastest, m_x).
pub fn contract_and_unfold(stack: &StackedTensor) -> Result<UnfoldedObservation> {
    let t2 = unfold(&stack.tensor, &[4, 2, 0], &[3, 1])?;
    Ok(UnfoldedObservation { t2, q: stack.q, m: stack.m })
}

/// Convenience: run a subarray stack through the whole pipeline.
pub fn observation_from_stacks(
    stack: &SubarrayStack,
    convention: SlabConvention,
) -> Result<(StackedTensor, UnfoldedObservation)> {
    let r_xz = cross_outer(&stack.x_stack, &stack.z_stack)?;
    let r_zx = cross_outer(&stack.z_stack, &stack.x_stack)?;
    let st = conjugate_symmetric_stack(&r_xz, &r_zx, convention)?;
    let obs = contract_and_unfold(&st)?;
    Ok((st, obs))
}

/// Phase generator for direction cosine `u`: κ = e^{−jπu}.
pub fn phase_generator(u: f64) -> C64 {
    C64::from_polar(1.0, -std::f64::consts::PI * u)
}

/// Reference-subarray steering vector over lags −S+1..−S+Q:
/// entry (0-indexed q) = e^{−jπ·u·(q+1−S)}.
pub fn subarray_steering(s_value: usize, q: usize, u: f64) -> CVec {
    CVec::from_iter((0..q).map(|qi| {
        C64::from_polar(1.0, -std::f64::consts::PI * u * (qi as f64 + 1.0 - s_value as f64))
    }))
}

/// Vandermonde shift vector [1, κ, κ², …] of length `m`.
pub fn shift_powers(m: usize, kappa: C64) -> CVec {
    let mut v = CVec::zeros(m);
    let mut acc = C64::new(1.0, 0.0);
    for mi in 0..m {
        v[mi] = acc;
        acc *= kappa;
    }
    v
}

/// The factor matrices of the noiseless observation model for a set of
/// targets: (Āx Q×K, Kx M×K, Āz Q×K, Kz M×K). The z-side factors appear
/// conjugated in the observation.
pub fn model_factors(
    s_value: usize,
    q: usize,
    m: usize,
    targets: &[Target],
) -> (CMat, CMat, CMat, CMat) {
    use crate::array::ArrayAxis;
    let k = targets.len();
    let mut ax = CMat::zeros((q, k));
    let mut kx = CMat::zeros((m, k));
    let mut az = CMat::zeros((q, k));
    let mut kz = CMat::zeros((m, k));
    for (kk, t) in targets.iter().enumerate() {
        let ux = t.direction_cosine(ArrayAxis::X);
        let uz = t.direction_cosine(ArrayAxis::Z);
        ax.column_mut(kk).assign(&subarray_steering(s_value, q, ux));
        kx.column_mut(kk).assign(&shift_powers(m, phase_generator(ux)));
        az.column_mut(kk).assign(&subarray_steering(s_value, q, uz));
        kz.column_mut(kk).assign(&shift_powers(m, phase_generator(uz)));
    }
    (ax, kx, az, kz)
}

/// One rank-1 component of the noiseless observation: a pair of
/// direction cosines and its weight.
///
/// The outer product of the two window stacks multiplies *every* x-axis
/// component against *every* z-axis component: with `d_x` distinct
/// azimuth cosines carrying marginal powers `r_a` (power summed over
/// targets sharing that azimuth) and `d_z` distinct elevation cosines
/// with marginal powers `c_b`, the observation is the sum of `d_x·d_z`
/// rank-1 terms weighted `r_a·c_b`. For a single target this collapses
/// to the familiar `σ⁴`-weighted single component; for `K ≥ 2` the
/// off-pair products are genuine observation content, not error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelComponent {
    pub cos_azimuth: f64,
    pub cos_elevation: f64,
    pub weight: f64,
}

/// Distinct direction cosines along one axis with their marginal powers.
fn axis_marginals(targets: &[Target], axis: crate::array::ArrayAxis) -> Vec<(f64, f64)> {
    let mut out: Vec<(f64, f64)> = Vec::new();
    for t in targets {
        let u = t.direction_cosine(axis);
        match out.iter_mut().find(|(v, _)| *v == u) {
            Some((_, p)) => *p += t.power,
            None => out.push((u, t.power)),
        }
    }
    out
}

/// The rank-1 components of the noiseless observation for a target set:
/// the full product of per-axis marginals. Components are ordered with
/// the z-axis index fastest.
pub fn model_components(targets: &[Target]) -> Vec<ModelComponent> {
    use crate::array::ArrayAxis;
    let xm = axis_marginals(targets, ArrayAxis::X);
    let zm = axis_marginals(targets, ArrayAxis::Z);
    let mut out = Vec::with_capacity(xm.len() * zm.len());
    for &(ux, rx) in &xm {
        for &(uz, rz) in &zm {
            out.push(ModelComponent { cos_azimuth: ux, cos_elevation: uz, weight: rx * rz });
        }
    }
    out
}

/// Ground-truth noiseless observation matrix: the sum over
/// [`model_components`] of `w · [(āx ⊙ āz*) ⊙ g] · (kx ⊙ kz*)ᵀ` with the
/// symmetry-slab factor g all-ones (the exact-arithmetic value of the
/// second slab under `FlipAll`). Matches the physical pipeline to
/// machine precision for any number of targets; when all targets have
/// distinct angles and `K = 1` it reduces to the single `σ⁴`-weighted
/// component.
pub fn model_observation(s_value: usize, q: usize, m: usize, targets: &[Target]) -> Result<CMat> {
    use crate::tensor::khatri_rao;
    let comps = model_components(targets);
    let k = comps.len();
    let mut ax = CMat::zeros((q, k));
    let mut kx = CMat::zeros((m, k));
    let mut az_conj = CMat::zeros((q, k));
    let mut kz_conj = CMat::zeros((m, k));
    for (i, comp) in comps.iter().enumerate() {
        ax.column_mut(i).assign(&subarray_steering(s_value, q, comp.cos_azimuth));
        kx.column_mut(i).assign(&shift_powers(m, phase_generator(comp.cos_azimuth)));
        az_conj
            .column_mut(i)
            .assign(&subarray_steering(s_value, q, comp.cos_elevation).mapv(|z| z.conj()));
        kz_conj
            .column_mut(i)
            .assign(&shift_powers(m, phase_generator(comp.cos_elevation)).mapv(|z| z.conj()));
    }
    let g = CMat::from_elem((2, k), C64::new(1.0, 0.0));
    let mut rows = khatri_rao(&khatri_rao(&ax, &az_conj)?, &g)?;
    for (i, comp) in comps.iter().enumerate() {
        let w = C64::new(comp.weight, 0.0);
        rows.column_mut(i).mapv_inplace(|z| z * w);
    }
    let cols = khatri_rao(&kx, &kz_conj)?;
    Ok(rows.dot(&cols.t()))
}
