//! Eigen-angles of orthogonal matrices.
//!
//! An orthogonal matrix has all its eigenvalues on the unit circle: rotation
//! pairs `e^{±iθ}` plus real ±1. Rather than running a general nonsymmetric
//! eigensolver, we exploit that `O` commutes with the symmetric `S = (O+Oᵀ)/2`
//! whose spectrum is `cos θ`: a Jacobi eigendecomposition of `S` hands us the
//! invariant planes, and the action of `O` inside each plane is exactly the
//! 2x2 rotation block a real Schur form would expose.

use super::Matrix;
use crate::error::{Error, Result};

const MAX_SWEEPS: usize = 100;

/// Jacobi eigendecomposition of a symmetric matrix.
///
/// Returns `(eigenvalues, q)` with eigenvalues in descending order and the
/// corresponding orthonormal eigenvectors as columns of `q`. The input is
/// symmetrized as `(a + aᵀ)/2` before iterating.
pub fn symmetric_eigen(a: &Matrix) -> Result<(Vec<f64>, Matrix)> {
    let (rows, cols) = a.dims();
    if rows != cols {
        return Err(Error::NotSquare {
            op: "symmetric_eigen",
            rows,
            cols,
        });
    }
    let n = rows;
    if n == 0 {
        return Err(Error::EmptyInput {
            context: "symmetric_eigen".into(),
        });
    }
    let mut m = Matrix::from_fn(n, n, |i, j| 0.5 * (a.get(i, j) + a.get(j, i)));
    let mut q = Matrix::identity(n);
    let scale = m.frobenius_norm().max(1e-300);

    let mut converged = false;
    for _sweep in 0..MAX_SWEEPS {
        let mut off = 0.0;
        for p in 0..n {
            for r in p + 1..n {
                off += 2.0 * m.get(p, r).powi(2);
            }
        }
        if off.sqrt() <= 1e-13 * scale {
            converged = true;
            break;
        }
        for p in 0..n.saturating_sub(1) {
            for r in p + 1..n {
                let apq = m.get(p, r);
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let theta = (m.get(r, r) - m.get(p, p)) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (1.0 + theta * theta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                // m <- Jᵀ m J applied as column then row updates
                for i in 0..n {
                    let x = m.get(i, p);
                    let y = m.get(i, r);
                    m.set(i, p, c * x - s * y);
                    m.set(i, r, s * x + c * y);
                }
                for j in 0..n {
                    let x = m.get(p, j);
                    let y = m.get(r, j);
                    m.set(p, j, c * x - s * y);
                    m.set(r, j, s * x + c * y);
                }
                for i in 0..n {
                    let x = q.get(i, p);
                    let y = q.get(i, r);
                    q.set(i, p, c * x - s * y);
                    q.set(i, r, s * x + c * y);
                }
            }
        }
    }
    if !converged {
        return Err(Error::SvdNoConvergence { sweeps: MAX_SWEEPS });
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m.get(j, j).partial_cmp(&m.get(i, i)).unwrap().then(i.cmp(&j)));
    let values = order.iter().map(|&k| m.get(k, k)).collect();
    let vectors = Matrix::from_fn(n, n, |i, j| q.get(i, order[j]));
    Ok((values, vectors))
}

/// Eigenvalue angles of an orthogonal matrix, in `[0, 2π)`, sorted ascending.
///
/// Rotation pairs contribute `{θ, 2π-θ}`, the +1 eigenvalue contributes 0, and
/// the -1 eigenvalue contributes π. Input must satisfy `OᵀO = I` within 1e-6.
pub fn eigen_angles(o: &Matrix) -> Result<Vec<f64>> {
    let (rows, cols) = o.dims();
    if rows != cols {
        return Err(Error::NotSquare {
            op: "eigen_angles",
            rows,
            cols,
        });
    }
    let deviation = o.orthonormality_deviation();
    if deviation > 1e-6 {
        return Err(Error::NotOrthogonal {
            op: "eigen_angles",
            deviation,
        });
    }
    let n = rows;
    let s = Matrix::from_fn(n, n, |i, j| 0.5 * (o.get(i, j) + o.get(j, i)));
    let (mu, q) = symmetric_eigen(&s)?;

    // Cluster eigenvalues of S; each cluster spans an O-invariant subspace.
    let mut angles = Vec::with_capacity(n);
    let mut start = 0;
    while start < n {
        let mut end = start + 1;
        while end < n && (mu[end - 1] - mu[end]).abs() <= 1e-7 {
            end += 1;
        }
        let rep = mu[start..end].iter().sum::<f64>() / (end - start) as f64;
        let mut basis: Vec<Vec<f64>> = (start..end).map(|k| q.col(k)).collect();
        if rep >= 1.0 - 1e-7 {
            angles.extend(std::iter::repeat(0.0).take(basis.len()));
        } else if rep <= -1.0 + 1e-7 {
            angles.extend(std::iter::repeat(std::f64::consts::PI).take(basis.len()));
        } else {
            // Peel off one rotation plane at a time.
            while !basis.is_empty() {
                let v = basis.remove(0);
                if basis.is_empty() {
                    return Err(Error::Numeric {
                        context: "eigen_angles: odd-dimensional rotation cluster".into(),
                    });
                }
                let ov = o.mat_vec(&v)?;
                let cos: f64 = v.iter().zip(&ov).map(|(a, b)| a * b).sum();
                let w: Vec<f64> = ov.iter().zip(&v).map(|(a, b)| a - cos * b).collect();
                let sin = w.iter().map(|x| x * x).sum::<f64>().sqrt();
                if sin < 1e-9 {
                    return Err(Error::Numeric {
                        context: "eigen_angles: degenerate rotation plane".into(),
                    });
                }
                let theta = sin.atan2(cos);
                angles.push(theta);
                angles.push(2.0 * std::f64::consts::PI - theta);
                // Remove the plane {v, w} from the cluster basis and
                // re-orthonormalize what is left.
                let w_hat: Vec<f64> = w.iter().map(|x| x / sin).collect();
                basis = reduce_basis(basis, &w_hat)?;
            }
        }
        start = end;
    }

    angles.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(angles)
}

// Removes the direction `remove` from the span of `basis` and returns an
// orthonormal basis of what is left. Since `remove` lies in the span, the
// result always has exactly one vector fewer.
fn reduce_basis(basis: Vec<Vec<f64>>, remove: &[f64]) -> Result<Vec<Vec<f64>>> {
    let target = basis.len() - 1;
    let dim = remove.len();
    let mut kept: Vec<Vec<f64>> = Vec::with_capacity(target);
    for mut cand in basis {
        if kept.len() == target {
            break;
        }
        for _pass in 0..2 {
            let proj: f64 = cand.iter().zip(remove).map(|(a, b)| a * b).sum();
            for (c, r) in cand.iter_mut().zip(remove) {
                *c -= proj * r;
            }
            for k in &kept {
                let proj: f64 = cand.iter().zip(k).map(|(a, b)| a * b).sum();
                for (c, kv) in cand.iter_mut().zip(k) {
                    *c -= proj * kv;
                }
            }
        }
        let norm = cand.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            for c in cand.iter_mut() {
                *c /= norm;
            }
            debug_assert_eq!(cand.len(), dim);
            kept.push(cand);
        }
    }
    if kept.len() != target {
        return Err(Error::Numeric {
            context: "eigen_angles: invariant plane deflation lost rank".into(),
        });
    }
    Ok(kept)
}
