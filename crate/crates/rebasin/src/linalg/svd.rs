//! Singular value decomposition by one-sided (Hestenes) Jacobi rotations.
//!
//! Columns of the working matrix are rotated in pairs until mutually
//! orthogonal; their norms are the singular values. Deterministic, and for the
//! small dense matrices this crate deals in (residual stacks, latent maps) the
//! quadratic convergence makes the 100-sweep cap comfortable.

use super::Matrix;
use crate::error::{Error, Result};

const MAX_SWEEPS: usize = 100;
/// Relative column-orthogonality tolerance: |c_p . c_q| <= TOL * |c_p| * |c_q|.
const TOL: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct SvdResult {
    /// Left singular vectors, orthonormal columns (rows x k).
    pub u: Matrix,
    /// Singular values in descending order (length k = min(rows, cols)).
    pub s: Vec<f64>,
    /// Right singular vectors, orthonormal columns (cols x k).
    pub v: Matrix,
}

impl SvdResult {
    /// `u * diag(s) * v^T`.
    pub fn reconstruct(&self) -> Matrix {
        let k = self.s.len();
        let us = Matrix::from_fn(self.u.rows(), k, |i, j| self.u.get(i, j) * self.s[j]);
        us.matmul_transb(&self.v).expect("shapes agree by construction")
    }
}

/// Full SVD `a = u * diag(s) * v^T` with descending singular values.
pub fn svd(a: &Matrix) -> Result<SvdResult> {
    if a.rows() == 0 || a.cols() == 0 {
        return Err(Error::EmptyInput {
            context: "svd".into(),
        });
    }
    if a.rows() < a.cols() {
        // Factor the transpose and swap the roles of u and v.
        let t = svd(&a.transpose())?;
        return Ok(SvdResult {
            u: t.v,
            s: t.s,
            v: t.u,
        });
    }

    let (m, n) = a.dims();
    let mut w = a.clone(); // columns get rotated in place
    let mut v = Matrix::identity(n);

    let mut converged = false;
    for _sweep in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n.saturating_sub(1) {
            for q in p + 1..n {
                let mut alpha = 0.0;
                let mut beta = 0.0;
                let mut gamma = 0.0;
                for i in 0..m {
                    let x = w.get(i, p);
                    let y = w.get(i, q);
                    alpha += x * x;
                    beta += y * y;
                    gamma += x * y;
                }
                if alpha == 0.0 || beta == 0.0 || gamma.abs() <= TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..m {
                    let x = w.get(i, p);
                    let y = w.get(i, q);
                    w.set(i, p, c * x - s * y);
                    w.set(i, q, s * x + c * y);
                }
                for i in 0..n {
                    let x = v.get(i, p);
                    let y = v.get(i, q);
                    v.set(i, p, c * x - s * y);
                    v.set(i, q, s * x + c * y);
                }
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::SvdNoConvergence { sweeps: MAX_SWEEPS });
    }

    // Column norms are the singular values; sort descending, ties by index.
    let mut order: Vec<usize> = (0..n).collect();
    let norms: Vec<f64> = (0..n)
        .map(|j| (0..m).map(|i| w.get(i, j).powi(2)).sum::<f64>().sqrt())
        .collect();
    order.sort_by(|&i, &j| norms[j].partial_cmp(&norms[i]).unwrap().then(i.cmp(&j)));

    let s: Vec<f64> = order.iter().map(|&j| norms[j]).collect();
    let v_sorted = Matrix::from_fn(n, n, |i, j| v.get(i, order[j]));

    // Normalize the rotated columns into u; complete negligible directions to
    // an orthonormal basis so the contract holds for rank-deficient input.
    let cutoff = s.first().copied().unwrap_or(0.0) * 1e-14;
    let mut u = Matrix::zeros(m, n);
    let mut deficient = Vec::new();
    for (k, &j) in order.iter().enumerate() {
        if s[k] > cutoff && s[k] > 0.0 {
            for i in 0..m {
                u.set(i, k, w.get(i, j) / s[k]);
            }
        } else {
            deficient.push(k);
        }
    }
    if !deficient.is_empty() {
        complete_basis(&mut u, &deficient)?;
    }

    Ok(SvdResult { u, s, v: v_sorted })
}

/// Fills the listed columns of `u` with unit vectors orthogonal to all other
/// columns, drawn from the standard basis via Gram-Schmidt.
fn complete_basis(u: &mut Matrix, fill: &[usize]) -> Result<()> {
    let (m, n) = u.dims();
    let mut filled: Vec<usize> = (0..n).filter(|k| !fill.contains(k)).collect();
    for &k in fill {
        let mut chosen = None;
        for e in 0..m {
            // candidate = standard basis vector e, orthogonalized twice
            let mut cand = vec![0.0; m];
            cand[e] = 1.0;
            for _pass in 0..2 {
                for &f in &filled {
                    let proj: f64 = (0..m).map(|i| cand[i] * u.get(i, f)).sum();
                    for (i, c) in cand.iter_mut().enumerate() {
                        *c -= proj * u.get(i, f);
                    }
                }
            }
            let norm = cand.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-6 {
                for c in cand.iter_mut() {
                    *c /= norm;
                }
                chosen = Some(cand);
                break;
            }
        }
        let cand = chosen.ok_or_else(|| Error::NonFinite {
            context: "svd: failed to complete orthonormal basis".into(),
        })?;
        for (i, c) in cand.into_iter().enumerate() {
            u.set(i, k, c);
        }
        filled.push(k);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pseudo(rows: usize, cols: usize, salt: u64) -> Matrix {
        // deterministic scrambled entries in [-1, 1]
        Matrix::from_fn(rows, cols, |i, j| {
            let x = (i as u64)
                .wrapping_mul(6364136223846793005)
                .wrapping_add((j as u64).wrapping_mul(1442695040888963407))
                .wrapping_add(salt.wrapping_mul(2654435761));
            let x = x ^ (x >> 33);
            (x % 2_000_003) as f64 / 1_000_001.0 - 1.0
        })
    }

    fn assert_valid_svd(a: &Matrix, tight: f64) {
        let r = svd(a).unwrap();
        assert!(r.u.orthonormality_deviation() < 1e-10, "u not orthonormal");
        assert!(r.v.orthonormality_deviation() < 1e-10, "v not orthonormal");
        for pair in r.s.windows(2) {
            assert!(pair[0] >= pair[1], "singular values not descending");
        }
        let err = r.reconstruct().max_abs_diff(a);
        let bound = (tight * a.frobenius_norm()).max(1e-12);
        assert!(err <= bound, "reconstruction error {err} > {bound}");
    }

    #[test]
    fn identity_has_unit_singular_values() {
        let r = svd(&Matrix::identity(3)).unwrap();
        assert_eq!(r.s, vec![1.0, 1.0, 1.0]);
        assert!(r.reconstruct().max_abs_diff(&Matrix::identity(3)) == 0.0);
    }

    #[test]
    fn diagonal_matrix_singular_values_sorted() {
        let a = Matrix::new(2, 2, vec![2.0, 0.0, 0.0, 3.0]).unwrap();
        let r = svd(&a).unwrap();
        assert!((r.s[0] - 3.0).abs() < 1e-14);
        assert!((r.s[1] - 2.0).abs() < 1e-14);
    }

    #[test]
    fn known_two_by_two() {
        // A^T A = [[25, 20], [20, 25]] has eigenvalues 45 and 5.
        let a = Matrix::new(2, 2, vec![3.0, 0.0, 4.0, 5.0]).unwrap();
        let r = svd(&a).unwrap();
        assert!((r.s[0] - 45f64.sqrt()).abs() < 1e-12);
        assert!((r.s[1] - 5f64.sqrt()).abs() < 1e-12);
        assert_valid_svd(&a, 1e-14);
    }

    #[test]
    fn random_tall_matrix_reconstructs() {
        let a = pseudo(20, 12, 7);
        assert_valid_svd(&a, 1e-12);
    }

    #[test]
    fn random_wide_matrix_reconstructs() {
        let a = pseudo(5, 9, 13);
        assert_valid_svd(&a, 1e-12);
    }

    #[test]
    fn rank_deficient_matrix_completes_basis() {
        // rank 2 by construction: 6x4 from two outer products
        let u1 = pseudo(6, 1, 1);
        let v1 = pseudo(4, 1, 2);
        let u2 = pseudo(6, 1, 3);
        let v2 = pseudo(4, 1, 4);
        let a = u1
            .matmul_transb(&v1)
            .unwrap()
            .add(&u2.matmul_transb(&v2).unwrap())
            .unwrap();
        let r = svd(&a).unwrap();
        assert!(r.s[2] < 1e-10 && r.s[3] < 1e-10);
        assert_valid_svd(&a, 1e-12);
    }

    #[test]
    fn zero_matrix_is_handled() {
        let a = Matrix::zeros(4, 3);
        let r = svd(&a).unwrap();
        assert_eq!(r.s, vec![0.0, 0.0, 0.0]);
        assert!(r.u.orthonormality_deviation() < 1e-12);
    }

    #[test]
    fn orthogonal_input_is_fixed_point() {
        // Orthogonal columns are already pairwise orthogonal: no rotations,
        // u equals the input exactly and all singular values are 1.
        let q = crate::linalg::orthonormalize_columns(&pseudo(8, 8, 11)).unwrap();
        let r = svd(&q).unwrap();
        for s in &r.s {
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert!(r.u.matmul_transb(&r.v).unwrap().max_abs_diff(&q) < 1e-12);
    }
}
