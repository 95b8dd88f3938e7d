//! 2-D direction-of-arrival estimation for L-shaped nested arrays.
//!
//! Two nested uniform subarrays along the x- and z-axes share a corner
//! element. Second-order statistics of each axis are rearranged into a
//! hole-free difference co-array, the co-array is split into overlapping
//! subarrays, and the pair of cross-correlation tensors built from the two
//! axes is stacked into a fifth-order tensor with Vandermonde factors. A
//! truncated-SVD subspace step recovers the per-axis phase generators
//! (hence azimuth/elevation), a pair-matching step associates the two axes
//! per source, and an iterative loop rebuilds and subtracts the
//! noise-signal cross term that the co-array construction injects.
//!
//! Modules, bottom of the stack first:
//!
//! * [`numerics`] — dense complex-matrix kernels (truncated SVD, general and
//!   Hermitian eigendecomposition, least squares) behind precise contracts.
//! * [`tensor`] — dense tensors with a fixed memory convention, Kruskal
//!   (CP) models, reshape/unfold, Khatri-Rao and Kronecker products.
//! * [`array`] — nested-array geometry, steering, scenes, snapshot
//!   simulation, sample/analytic covariance.
//! * [`coarray`] — difference co-array bookkeeping: lag map, pseudo
//!   snapshots, subarray stacking, noise locator, DOF optimization.
//! * [`pipeline`] — cross-correlation tensors, conjugate-symmetric
//!   stacking, contraction to the working matrix unfolding.
//! * [`estimator`] — the subspace step, pair matching, power/noise
//!   estimation, cross-term reconstruction and the iterative loop.
//! * [`crb`] — a Slepian-Bangs style Cramér-Rao bound for the tensor
//!   model.
//! * [`baselines`] — spatial-smoothing subspace and ALS tensor-CPD
//!   reference estimators.
//! * [`harness`] — deterministic Monte Carlo runner, metrics, CSV/JSON
//!   reporting, and the configuration surface used by the CLI.

pub mod array;
pub mod coarray;
pub mod crb;
pub mod error;
pub mod estimator;
pub mod numerics;
pub mod pipeline;
pub mod tensor;

pub use error::{Error, Result};
