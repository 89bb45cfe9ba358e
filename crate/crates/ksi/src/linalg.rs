//! Small dense linear algebra: symmetric eigendecomposition.
//!
//! Deterministic by construction (no LAPACK, no thread-order effects): the
//! same input always produces bit-identical output on a given platform.
//! Cyclic Jacobi handles moderate matrices exactly; for wide feature
//! covariances a Rayleigh-Ritz subspace iteration extracts just the leading
//! eigenpairs.

use ndarray::{Array1, Array2};

use crate::error::{KsiError, Result};
use crate::seed::splitmix64;

/// Threshold below which the full Jacobi path is used unconditionally.
const JACOBI_SIZE_LIMIT: usize = 512;

/// Full eigendecomposition of a symmetric matrix by cyclic Jacobi.
///
/// Returns eigenvalues in descending order with matching eigenvectors as
/// columns. Cost is O(n^3) per sweep, so keep n moderate.
pub fn jacobi_eigh(a: &Array2<f64>) -> Result<(Array1<f64>, Array2<f64>)> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(KsiError::Shape(format!(
            "eigendecomposition needs a square matrix, got {}x{}",
            n,
            a.ncols()
        )));
    }
    let mut m = a.clone();
    let mut v: Array2<f64> = Array2::eye(n);

    let scale: f64 = m.iter().map(|x| x.abs()).fold(0.0, f64::max);
    if scale == 0.0 || n == 1 {
        let vals = Array1::from_iter((0..n).map(|i| m[[i, i]]));
        return Ok(sort_eigenpairs(vals, v));
    }
    let tol = 1e-14 * scale;

    for _sweep in 0..100 {
        let mut off = 0.0f64;
        for p in 0..n {
            for q in (p + 1)..n {
                off = off.max(m[[p, q]].abs());
            }
        }
        if off <= tol {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[[p, q]];
                if apq.abs() <= tol * 1e-2 {
                    continue;
                }
                let app = m[[p, p]];
                let aqq = m[[q, q]];
                // Stable rotation computation (Golub & Van Loan).
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (1.0 + theta * theta).sqrt())
                } else {
                    1.0 / (theta - (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;

                for i in 0..n {
                    let mip = m[[i, p]];
                    let miq = m[[i, q]];
                    m[[i, p]] = c * mip - s * miq;
                    m[[i, q]] = s * mip + c * miq;
                }
                for i in 0..n {
                    let mpi = m[[p, i]];
                    let mqi = m[[q, i]];
                    m[[p, i]] = c * mpi - s * mqi;
                    m[[q, i]] = s * mpi + c * mqi;
                }
                m[[p, q]] = 0.0;
                m[[q, p]] = 0.0;
                for i in 0..n {
                    let vip = v[[i, p]];
                    let viq = v[[i, q]];
                    v[[i, p]] = c * vip - s * viq;
                    v[[i, q]] = s * vip + c * viq;
                }
            }
        }
    }

    let vals = Array1::from_iter((0..n).map(|i| m[[i, i]]));
    Ok(sort_eigenpairs(vals, v))
}

fn sort_eigenpairs(vals: Array1<f64>, vecs: Array2<f64>) -> (Array1<f64>, Array2<f64>) {
    let n = vals.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        vals[j]
            .partial_cmp(&vals[i])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(i.cmp(&j))
    });
    let sorted_vals = Array1::from_iter(order.iter().map(|&i| vals[i]));
    let mut sorted_vecs = Array2::zeros(vecs.raw_dim());
    for (new_col, &old_col) in order.iter().enumerate() {
        for r in 0..vecs.nrows() {
            sorted_vecs[[r, new_col]] = vecs[[r, old_col]];
        }
    }
    (sorted_vals, sorted_vecs)
}

/// Modified Gram-Schmidt with one re-orthogonalization pass. Columns that
/// collapse to zero norm are replaced by canonical basis vectors so the
/// basis stays full (deterministically).
fn orthonormalize(q: &mut Array2<f64>) {
    let (n, k) = (q.nrows(), q.ncols());
    for j in 0..k {
        for _ in 0..2 {
            for i in 0..j {
                let mut dot = 0.0;
                for r in 0..n {
                    dot += q[[r, i]] * q[[r, j]];
                }
                for r in 0..n {
                    q[[r, j]] -= dot * q[[r, i]];
                }
            }
        }
        let mut norm = 0.0;
        for r in 0..n {
            norm += q[[r, j]] * q[[r, j]];
        }
        let norm = norm.sqrt();
        if norm > 1e-150 {
            for r in 0..n {
                q[[r, j]] /= norm;
            }
        } else {
            // Deterministic fallback: cycle canonical vectors until one
            // survives projection.
            let mut replaced = false;
            for cand in 0..n {
                for r in 0..n {
                    q[[r, j]] = if r == cand { 1.0 } else { 0.0 };
                }
                for i in 0..j {
                    let mut dot = 0.0;
                    for r in 0..n {
                        dot += q[[r, i]] * q[[r, j]];
                    }
                    for r in 0..n {
                        q[[r, j]] -= dot * q[[r, i]];
                    }
                }
                let mut nn = 0.0;
                for r in 0..n {
                    nn += q[[r, j]] * q[[r, j]];
                }
                let nn = nn.sqrt();
                if nn > 1e-8 {
                    for r in 0..n {
                        q[[r, j]] /= nn;
                    }
                    replaced = true;
                    break;
                }
            }
            if !replaced {
                for r in 0..n {
                    q[[r, j]] = 0.0;
                }
            }
        }
    }
}

/// Leading `k` eigenpairs of a symmetric positive semidefinite matrix.
///
/// Small or nearly-full requests fall through to full Jacobi; otherwise a
/// blocked subspace iteration with Rayleigh-Ritz extraction runs until the
/// Ritz values settle to relative 1e-12 (or an iteration cap).
pub fn top_eigenpairs(c: &Array2<f64>, k: usize) -> Result<(Array1<f64>, Array2<f64>)> {
    let n = c.nrows();
    if c.ncols() != n {
        return Err(KsiError::Shape(format!(
            "eigendecomposition needs a square matrix, got {}x{}",
            n,
            c.ncols()
        )));
    }
    if k > n {
        return Err(KsiError::Shape(format!(
            "requested {k} eigenpairs from a {n}x{n} matrix"
        )));
    }
    if n <= JACOBI_SIZE_LIMIT || 2 * k >= n {
        let (vals, vecs) = jacobi_eigh(c)?;
        let top_vals = Array1::from_iter(vals.iter().take(k).copied());
        let mut top_vecs = Array2::zeros((n, k));
        for j in 0..k {
            for r in 0..n {
                top_vecs[[r, j]] = vecs[[r, j]];
            }
        }
        return Ok((top_vals, top_vecs));
    }

    let q_cols = (k + 8).min(n);
    // Fixed-seed start: the basis must depend on the input only.
    let mut state = 0x6b73692d70636121u64;
    let mut q = Array2::from_shape_fn((n, q_cols), |_| {
        state = splitmix64(state);
        (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
    });
    orthonormalize(&mut q);

    let mut prev_ritz: Option<Array1<f64>> = None;
    let mut ritz_vals = Array1::zeros(q_cols);
    let mut ritz_vecs = q.clone();
    let max_iter = 3000;
    for iter in 0..max_iter {
        let mut y = c.dot(&q);
        orthonormalize(&mut y);
        q = y;

        if iter % 5 == 4 || iter == max_iter - 1 {
            let cq = c.dot(&q);
            let t = q.t().dot(&cq);
            let (vals, vecs) = jacobi_eigh(&t)?;
            ritz_vecs = q.dot(&vecs);
            ritz_vals = vals;
            let scale = ritz_vals[0].abs().max(1e-300);
            if let Some(prev) = &prev_ritz {
                let mut settled = true;
                for i in 0..k {
                    if (ritz_vals[i] - prev[i]).abs() > 1e-12 * scale {
                        settled = false;
                        break;
                    }
                }
                if settled {
                    break;
                }
            }
            prev_ritz = Some(ritz_vals.clone());
            q = ritz_vecs.clone();
        }
    }

    let top_vals = Array1::from_iter(ritz_vals.iter().take(k).copied());
    let mut top_vecs = Array2::zeros((n, k));
    for j in 0..k {
        for r in 0..n {
            top_vecs[[r, j]] = ritz_vecs[[r, j]];
        }
    }
    Ok((top_vals, top_vecs))
}
