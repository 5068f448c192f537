//! Sparse storage and the linear solvers used by the flow solver.
//!
//! Matrices share a fixed compressed-row pattern per mesh; only the value
//! array changes between assemblies. The pattern is structurally symmetric,
//! so the transpose lives on the same pattern with permuted values.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Compressed-row sparsity pattern with sorted column indices.
#[derive(Debug, Clone)]
pub struct CsrPattern {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    diag: Vec<usize>,
    transpose: Vec<usize>,
    bandwidth: usize,
}

impl CsrPattern {
    /// Builds a pattern from per-row column lists. The diagonal is always
    /// included and the structure is symmetrized.
    pub fn from_rows(rows: &[Vec<usize>]) -> Self {
        let n = rows.len();
        let mut sets: Vec<Vec<usize>> = rows.to_vec();
        for (i, row) in rows.iter().enumerate() {
            for &j in row {
                sets[j].push(i);
            }
            sets[i].push(i);
        }
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut cols = Vec::new();
        row_ptr.push(0);
        for set in &mut sets {
            set.sort_unstable();
            set.dedup();
            cols.extend_from_slice(set);
            row_ptr.push(cols.len());
        }
        let mut pattern = CsrPattern {
            n,
            row_ptr,
            cols,
            diag: vec![0; n],
            transpose: Vec::new(),
            bandwidth: 0,
        };
        for i in 0..n {
            pattern.diag[i] = pattern.slot(i, i).expect("diagonal present");
        }
        let mut transpose = vec![0; pattern.nnz()];
        let mut bandwidth = 0;
        for i in 0..n {
            for k in pattern.row_ptr[i]..pattern.row_ptr[i + 1] {
                let j = pattern.cols[k];
                transpose[k] = pattern.slot(j, i).expect("symmetric structure");
                bandwidth = bandwidth.max(i.abs_diff(j));
            }
        }
        pattern.transpose = transpose;
        pattern.bandwidth = bandwidth;
        pattern
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.cols.len()
    }

    pub fn bandwidth(&self) -> usize {
        self.bandwidth
    }

    pub fn diag_slot(&self, row: usize) -> usize {
        self.diag[row]
    }

    pub fn diag_slots(&self) -> &[usize] {
        &self.diag
    }

    pub fn row_ptr(&self) -> &[usize] {
        &self.row_ptr
    }

    pub fn cols(&self) -> &[usize] {
        &self.cols
    }

    pub fn slot(&self, row: usize, col: usize) -> Option<usize> {
        let range = self.row_ptr[row]..self.row_ptr[row + 1];
        self.cols[range.clone()]
            .binary_search(&col)
            .ok()
            .map(|k| range.start + k)
    }

    /// Values of the transposed matrix on the same pattern.
    pub fn transpose_values(&self, values: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; values.len()];
        for (k, &t) in self.transpose.iter().enumerate() {
            out[t] = values[k];
        }
        out
    }

    pub fn is_symmetric(&self, values: &[f64]) -> bool {
        self.transpose
            .iter()
            .enumerate()
            .all(|(k, &t)| values[k] == values[t])
    }

    pub fn matvec(&self, values: &[f64], x: &[f64], y: &mut [f64]) {
        for i in 0..self.n {
            let mut acc = 0.0;
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                acc += values[k] * x[self.cols[k]];
            }
            y[i] = acc;
        }
    }

    /// Dense copy, mostly for tests and tiny systems.
    pub fn to_dense(&self, values: &[f64]) -> Vec<Vec<f64>> {
        let mut a = vec![vec![0.0; self.n]; self.n];
        for i in 0..self.n {
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                a[i][self.cols[k]] += values[k];
            }
        }
        a
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverKind {
    /// Preconditioned conjugate gradient; symmetric positive definite only.
    Cg,
    /// Jacobi-preconditioned BiCGSTAB for general matrices.
    BiCgStab,
    /// Banded LU without pivoting. Exact to roundoff; meant for small meshes.
    Direct,
}

impl fmt::Display for SolverKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SolverKind::Cg => "cg",
            SolverKind::BiCgStab => "bicgstab",
            SolverKind::Direct => "direct",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverSettings {
    pub kind: SolverKind,
    /// Stop when ||r||_2 <= max(abs_tol, rel_tol * ||b||_2).
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub max_iter: usize,
}

impl Default for SolverSettings {
    fn default() -> Self {
        SolverSettings {
            kind: SolverKind::BiCgStab,
            rel_tol: 1e-7,
            abs_tol: 1e-14,
            max_iter: 5000,
        }
    }
}

impl SolverSettings {
    pub fn pressure_default() -> Self {
        SolverSettings {
            kind: SolverKind::Cg,
            rel_tol: 1e-8,
            abs_tol: 1e-12,
            max_iter: 20000,
        }
    }

    pub fn direct() -> Self {
        SolverSettings {
            kind: SolverKind::Direct,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, Error)]
pub enum SolveError {
    #[error("{solver} did not converge in {iterations} iterations (last residual {last:.3e}, target {target:.3e})")]
    NotConverged {
        solver: SolverKind,
        iterations: usize,
        last: f64,
        target: f64,
        history: Vec<f64>,
    },
    #[error("{solver} breakdown at iteration {iteration}")]
    Breakdown {
        solver: SolverKind,
        iteration: usize,
    },
    #[error("zero pivot at row {row}")]
    ZeroPivot { row: usize },
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SolveStats {
    pub iterations: usize,
    pub residual: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Solves `A x = b` in place; `x` holds the initial guess on entry.
pub fn solve(
    pattern: &CsrPattern,
    values: &[f64],
    b: &[f64],
    x: &mut [f64],
    settings: &SolverSettings,
) -> Result<SolveStats, SolveError> {
    match settings.kind {
        SolverKind::Cg => cg(pattern, values, b, x, settings),
        SolverKind::BiCgStab => bicgstab(pattern, values, b, x, settings),
        SolverKind::Direct => {
            banded_lu_solve(pattern, values, b, x)?;
            Ok(SolveStats {
                iterations: 1,
                residual: residual_norm(pattern, values, b, x),
            })
        }
    }
}

pub fn residual_norm(pattern: &CsrPattern, values: &[f64], b: &[f64], x: &[f64]) -> f64 {
    let mut ax = vec![0.0; b.len()];
    pattern.matvec(values, x, &mut ax);
    ax.iter()
        .zip(b)
        .map(|(a, b)| (b - a) * (b - a))
        .sum::<f64>()
        .sqrt()
}

fn inverse_diagonal(pattern: &CsrPattern, values: &[f64]) -> Vec<f64> {
    pattern
        .diag_slots()
        .iter()
        .map(|&k| {
            let d = values[k];
            if d != 0.0 {
                1.0 / d
            } else {
                1.0
            }
        })
        .collect()
}

fn cg(
    pattern: &CsrPattern,
    values: &[f64],
    b: &[f64],
    x: &mut [f64],
    settings: &SolverSettings,
) -> Result<SolveStats, SolveError> {
    let n = b.len();
    let target = settings.abs_tol.max(settings.rel_tol * norm2(b));
    let inv_d = inverse_diagonal(pattern, values);
    let mut r = vec![0.0; n];
    pattern.matvec(values, x, &mut r);
    for i in 0..n {
        r[i] = b[i] - r[i];
    }
    let mut res = norm2(&r);
    if res <= target {
        return Ok(SolveStats {
            iterations: 0,
            residual: res,
        });
    }
    let mut z: Vec<f64> = r.iter().zip(&inv_d).map(|(r, d)| r * d).collect();
    let mut p = z.clone();
    let mut q = vec![0.0; n];
    let mut rz = dot(&r, &z);
    let mut history = Vec::new();
    for it in 1..=settings.max_iter {
        pattern.matvec(values, &p, &mut q);
        let pq = dot(&p, &q);
        if pq == 0.0 || !pq.is_finite() {
            return Err(SolveError::Breakdown {
                solver: SolverKind::Cg,
                iteration: it,
            });
        }
        let alpha = rz / pq;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * q[i];
        }
        res = norm2(&r);
        if history.len() < 64 {
            history.push(res);
        }
        if res <= target {
            return Ok(SolveStats {
                iterations: it,
                residual: res,
            });
        }
        for i in 0..n {
            z[i] = r[i] * inv_d[i];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    Err(SolveError::NotConverged {
        solver: SolverKind::Cg,
        iterations: settings.max_iter,
        last: res,
        target,
        history,
    })
}

fn bicgstab(
    pattern: &CsrPattern,
    values: &[f64],
    b: &[f64],
    x: &mut [f64],
    settings: &SolverSettings,
) -> Result<SolveStats, SolveError> {
    let n = b.len();
    let target = settings.abs_tol.max(settings.rel_tol * norm2(b));
    let inv_d = inverse_diagonal(pattern, values);
    let mut r = vec![0.0; n];
    pattern.matvec(values, x, &mut r);
    for i in 0..n {
        r[i] = b[i] - r[i];
    }
    let mut res = norm2(&r);
    if res <= target {
        return Ok(SolveStats {
            iterations: 0,
            residual: res,
        });
    }
    let r_hat = r.clone();
    let mut rho = 1.0;
    let mut alpha = 1.0;
    let mut omega = 1.0;
    let mut v = vec![0.0; n];
    let mut p = vec![0.0; n];
    let mut y = vec![0.0; n];
    let mut s = vec![0.0; n];
    let mut z = vec![0.0; n];
    let mut t = vec![0.0; n];
    let mut history = Vec::new();
    for it in 1..=settings.max_iter {
        let rho_new = dot(&r_hat, &r);
        if rho_new == 0.0 || !rho_new.is_finite() {
            return Err(SolveError::Breakdown {
                solver: SolverKind::BiCgStab,
                iteration: it,
            });
        }
        let beta = (rho_new / rho) * (alpha / omega);
        rho = rho_new;
        for i in 0..n {
            p[i] = r[i] + beta * (p[i] - omega * v[i]);
            y[i] = p[i] * inv_d[i];
        }
        pattern.matvec(values, &y, &mut v);
        let rv = dot(&r_hat, &v);
        if rv == 0.0 {
            return Err(SolveError::Breakdown {
                solver: SolverKind::BiCgStab,
                iteration: it,
            });
        }
        alpha = rho / rv;
        for i in 0..n {
            s[i] = r[i] - alpha * v[i];
        }
        let s_norm = norm2(&s);
        if s_norm <= target {
            for i in 0..n {
                x[i] += alpha * y[i];
            }
            return Ok(SolveStats {
                iterations: it,
                residual: s_norm,
            });
        }
        for i in 0..n {
            z[i] = s[i] * inv_d[i];
        }
        pattern.matvec(values, &z, &mut t);
        let tt = dot(&t, &t);
        omega = if tt > 0.0 { dot(&t, &s) / tt } else { 0.0 };
        for i in 0..n {
            x[i] += alpha * y[i] + omega * z[i];
            r[i] = s[i] - omega * t[i];
        }
        res = norm2(&r);
        if history.len() < 64 {
            history.push(res);
        }
        if res <= target {
            return Ok(SolveStats {
                iterations: it,
                residual: res,
            });
        }
        if omega == 0.0 {
            return Err(SolveError::Breakdown {
                solver: SolverKind::BiCgStab,
                iteration: it,
            });
        }
    }
    Err(SolveError::NotConverged {
        solver: SolverKind::BiCgStab,
        iterations: settings.max_iter,
        last: res,
        target,
        history,
    })
}

/// LU factorization in band storage without pivoting. The 5-point
/// matrices assembled here are diagonally dominant or SPD, so pivoting is
/// not needed.
fn banded_lu_solve(
    pattern: &CsrPattern,
    values: &[f64],
    b: &[f64],
    x: &mut [f64],
) -> Result<(), SolveError> {
    let n = pattern.n();
    let bw = pattern.bandwidth();
    let width = 2 * bw + 1;
    // band[i * width + (j + bw - i)] = A[i][j]
    let mut band = vec![0.0; n * width];
    for i in 0..n {
        for k in pattern.row_ptr[i]..pattern.row_ptr[i + 1] {
            let j = pattern.cols[k];
            band[i * width + (j + bw - i)] += values[k];
        }
    }
    let mut rhs = b.to_vec();
    for kk in 0..n {
        let pivot = band[kk * width + bw];
        if pivot == 0.0 || !pivot.is_finite() {
            return Err(SolveError::ZeroPivot { row: kk });
        }
        let last = (kk + bw).min(n - 1);
        for i in kk + 1..=last {
            let lik_pos = i * width + (kk + bw - i);
            let factor = band[lik_pos] / pivot;
            if factor == 0.0 {
                continue;
            }
            band[lik_pos] = 0.0;
            for j in kk + 1..=(kk + bw).min(n - 1) {
                let u = band[kk * width + (j + bw - kk)];
                if u != 0.0 {
                    band[i * width + (j + bw - i)] -= factor * u;
                }
            }
            rhs[i] -= factor * rhs[kk];
        }
    }
    for i in (0..n).rev() {
        let mut acc = rhs[i];
        for j in i + 1..=(i + bw).min(n - 1) {
            acc -= band[i * width + (j + bw - i)] * x[j];
        }
        x[i] = acc / band[i * width + bw];
    }
    Ok(())
}
