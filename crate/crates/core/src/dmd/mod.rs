//! Exact Dynamic Mode Decomposition over a sliding window of snapshots and
//! the unit-circle stability metric derived from its eigenvalues.
//!
//! Given snapshots `x_1 … x_m`, with `X = [x_1 … x_{m-1}]` and
//! `X' = [x_2 … x_m]`:
//!
//! 1. thin SVD `X = U Σ Vᵀ`
//! 2. keep singular values with `σ_i > svd_tol · σ_1`, at most `r_max`
//! 3. `Ã = U_rᵀ X' V_r Σ_r⁻¹`
//! 4. eigenvalues `λ_i` of `Ã`
//! 5. metric = mean of `(|λ_i| − 1)²`
//!
//! A metric near zero means the dynamics neither grow nor decay.

pub mod linalg;

use std::collections::VecDeque;

use num_complex::Complex64;
use thiserror::Error;

use crate::model::StreamRecord;
use linalg::{eigenvalues, thin_svd, Matrix};

pub const DEFAULT_WINDOW: usize = 16;
pub const DEFAULT_SVD_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DmdError {
    #[error("insufficient snapshots: need at least 2, have {0}")]
    InsufficientSnapshots(usize),
    #[error("degenerate window: no singular value above tolerance")]
    DegenerateWindow,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("eigenvalue iteration did not converge")]
    NoConvergence,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DmdOptions {
    /// Relative singular-value cutoff against `σ_1`.
    pub svd_tol: f64,
    pub r_max: Option<usize>,
}

impl Default for DmdOptions {
    fn default() -> Self {
        Self {
            svd_tol: DEFAULT_SVD_TOL,
            r_max: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DmdResult {
    pub rank: usize,
    /// Sorted by descending modulus, then descending real part, then
    /// descending imaginary part.
    pub eigenvalues: Vec<Complex64>,
    pub stability_metric: f64,
    pub singular_values: Vec<f64>,
}

/// Mean squared radial distance of `eigenvalues` from the unit circle.
pub fn stability_metric(eigenvalues: &[Complex64]) -> Result<f64, DmdError> {
    if eigenvalues.is_empty() {
        return Err(DmdError::InvalidArgument("empty eigenvalue list".into()));
    }
    let sum: f64 = eigenvalues.iter().map(|l| (l.norm() - 1.0).powi(2)).sum();
    Ok(sum / eigenvalues.len() as f64)
}

/// Deterministic eigenvalue order used in every output.
pub fn sort_eigenvalues(values: &mut [Complex64]) {
    values.sort_by(|a, b| {
        b.norm()
            .total_cmp(&a.norm())
            .then(b.re.total_cmp(&a.re))
            .then(b.im.total_cmp(&a.im))
    });
}

/// Exact DMD over an ordered list of equally sized snapshots.
pub fn dmd_from_snapshots<S: AsRef<[f64]>>(
    snapshots: &[S],
    opts: &DmdOptions,
) -> Result<DmdResult, DmdError> {
    let m = snapshots.len();
    if m < 2 {
        return Err(DmdError::InsufficientSnapshots(m));
    }
    let n = snapshots[0].as_ref().len();
    if n == 0 {
        return Err(DmdError::InvalidArgument("zero-length snapshots".into()));
    }
    for (i, s) in snapshots.iter().enumerate() {
        let s = s.as_ref();
        if s.len() != n {
            return Err(DmdError::InvalidArgument(format!(
                "snapshot {i} has {} values, expected {n}",
                s.len()
            )));
        }
        if s.iter().any(|v| !v.is_finite()) {
            return Err(DmdError::InvalidArgument(format!(
                "snapshot {i} contains non-finite values"
            )));
        }
    }
    if !(opts.svd_tol >= 0.0) {
        return Err(DmdError::InvalidArgument("svd_tol must be ≥ 0".into()));
    }
    if opts.r_max == Some(0) {
        return Err(DmdError::InvalidArgument("r_max must be ≥ 1".into()));
    }

    let x = Matrix::from_columns(&snapshots[..m - 1]);
    let svd = thin_svd(&x);
    let sigma1 = svd.sigma[0];
    if sigma1 == 0.0 {
        return Err(DmdError::DegenerateWindow);
    }
    let cutoff = opts.svd_tol * sigma1;
    let mut r = svd.sigma.iter().take_while(|&&s| s > cutoff).count();
    r = r.min(n).min(m - 1);
    if let Some(cap) = opts.r_max {
        r = r.min(cap);
    }
    if r == 0 {
        return Err(DmdError::DegenerateWindow);
    }

    // Ã = U_rᵀ X' V_r Σ_r⁻¹, built column by column:
    // column j of X' V_r is Σ_k X'[:, k] V[k, j].
    let k_cols = m - 1;
    let mut a_tilde = Matrix::zeros(r, r);
    let mut xv = vec![0.0; n];
    for j in 0..r {
        xv.iter_mut().for_each(|v| *v = 0.0);
        for k in 0..k_cols {
            let vkj = svd.v[(k, j)];
            if vkj != 0.0 {
                for (acc, xk) in xv.iter_mut().zip(snapshots[k + 1].as_ref()) {
                    *acc += xk * vkj;
                }
            }
        }
        for i in 0..r {
            let ui = svd.u.column(i);
            let proj: f64 = ui.iter().zip(&xv).map(|(a, b)| a * b).sum();
            a_tilde[(i, j)] = proj / svd.sigma[j];
        }
    }

    let mut eig = eigenvalues(&a_tilde).map_err(|_| DmdError::NoConvergence)?;
    if eig.iter().any(|l| !l.re.is_finite() || !l.im.is_finite()) {
        return Err(DmdError::NoConvergence);
    }
    sort_eigenvalues(&mut eig);
    let stability_metric = stability_metric(&eig)?;
    Ok(DmdResult {
        rank: r,
        eigenvalues: eig,
        stability_metric,
        singular_values: svd.sigma[..r].to_vec(),
    })
}

/// Sliding window of the most recent snapshots of one stream.
#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotWindow {
    dim: usize,
    capacity: usize,
    snapshots: VecDeque<(u64, Vec<f64>)>,
}

impl SnapshotWindow {
    pub fn new(dim: usize, capacity: usize) -> Result<Self, DmdError> {
        if dim == 0 {
            return Err(DmdError::InvalidArgument("window dimension must be ≥ 1".into()));
        }
        if capacity < 2 {
            return Err(DmdError::InvalidArgument("window capacity must be ≥ 2".into()));
        }
        Ok(Self {
            dim,
            capacity,
            snapshots: VecDeque::with_capacity(capacity + 1),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    pub fn last_step(&self) -> Option<u64> {
        self.snapshots.back().map(|(s, _)| *s)
    }

    pub fn steps(&self) -> impl Iterator<Item = u64> + '_ {
        self.snapshots.iter().map(|(s, _)| *s)
    }

    pub fn snapshots(&self) -> impl Iterator<Item = (u64, &[f64])> + '_ {
        self.snapshots.iter().map(|(s, v)| (*s, v.as_slice()))
    }

    /// Appends a snapshot, evicting the oldest when over capacity.
    pub fn push(&mut self, step: u64, values: Vec<f64>) -> Result<(), DmdError> {
        if values.len() != self.dim {
            return Err(DmdError::InvalidArgument(format!(
                "snapshot has {} values, window expects {}",
                values.len(),
                self.dim
            )));
        }
        if let Some(last) = self.last_step() {
            if step <= last {
                return Err(DmdError::InvalidArgument(format!(
                    "step {step} does not follow {last}"
                )));
            }
        }
        self.snapshots.push_back((step, values));
        while self.snapshots.len() > self.capacity {
            self.snapshots.pop_front();
        }
        Ok(())
    }

    pub fn update(&mut self, record: &StreamRecord) -> Result<(), DmdError> {
        self.push(record.step, record.payload.clone())
    }

    pub fn compute(&self, opts: &DmdOptions) -> Result<DmdResult, DmdError> {
        let cols: Vec<&[f64]> = self.snapshots.iter().map(|(_, v)| v.as_slice()).collect();
        dmd_from_snapshots(&cols, opts)
    }
}

/// Runs DMD over `window` with the default options.
pub fn compute_dmd(window: &SnapshotWindow) -> Result<DmdResult, DmdError> {
    window.compute(&DmdOptions::default())
}
