//! Orthogonal Procrustes: the best rotation aligning one point stack to another.

use super::{svd, Matrix};
use crate::error::{Error, Result};

/// Returns the orthogonal `O` minimizing `||r_a - r_b * O||_F`.
///
/// Both stacks are rows-of-observations with matching shapes; the solution is
/// `O = U * V^T` from the SVD of `r_b^T * r_a`. The minimizer is unique when
/// `r_b^T * r_a` has full rank.
pub fn procrustes(r_a: &Matrix, r_b: &Matrix) -> Result<Matrix> {
    if r_a.dims() != r_b.dims() {
        return Err(Error::ShapeMismatch {
            op: "procrustes",
            expected: format!("{}x{}", r_a.rows(), r_a.cols()),
            got: format!("{}x{}", r_b.rows(), r_b.cols()),
        });
    }
    if r_a.rows() == 0 || r_a.cols() == 0 {
        return Err(Error::EmptyInput {
            context: "procrustes".into(),
        });
    }
    let m = r_b.matmul_transa(r_a)?;
    let f = svd(&m)?;
    f.u.matmul_transb(&f.v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::orthonormalize_columns;

    fn pseudo(rows: usize, cols: usize, salt: u64) -> Matrix {
        Matrix::from_fn(rows, cols, |i, j| {
            let x = (i as u64)
                .wrapping_mul(0x2545f4914f6cdd1d)
                .wrapping_add((j as u64).wrapping_mul(0x9e3779b97f4a7c15))
                .wrapping_add(salt.wrapping_mul(0x853c49e6748fea9b));
            let x = x ^ (x >> 27);
            (x % 2_000_003) as f64 / 1_000_001.0 - 1.0
        })
    }

    fn random_orthogonal(n: usize, salt: u64) -> Matrix {
        orthonormalize_columns(&pseudo(n, n, salt)).unwrap()
    }

    #[test]
    fn recovers_planted_rotation() {
        let r_b = pseudo(40, 8, 5);
        let planted = random_orthogonal(8, 17);
        let r_a = r_b.matmul(&planted).unwrap();
        let o = procrustes(&r_a, &r_b).unwrap();
        assert!(o.max_abs_diff(&planted) < 1e-9);
    }

    #[test]
    fn identical_stacks_give_identity() {
        let r = pseudo(30, 6, 9); // full rank with overwhelming probability
        let o = procrustes(&r, &r).unwrap();
        assert!(o.max_abs_diff(&Matrix::identity(6)) < 1e-9);
    }

    #[test]
    fn output_is_orthogonal() {
        let o = procrustes(&pseudo(25, 7, 1), &pseudo(25, 7, 2)).unwrap();
        assert!(o.orthonormality_deviation() < 1e-10);
    }

    #[test]
    fn beats_random_orthogonal_candidates() {
        let r_a = pseudo(20, 5, 21);
        let r_b = pseudo(20, 5, 22);
        let o = procrustes(&r_a, &r_b).unwrap();
        let best = r_a.sub(&r_b.matmul(&o).unwrap()).unwrap().frobenius_norm();
        for salt in 0..200 {
            let cand = random_orthogonal(5, 1000 + salt);
            let err = r_a
                .sub(&r_b.matmul(&cand).unwrap())
                .unwrap()
                .frobenius_norm();
            assert!(
                best <= err + 1e-12,
                "candidate {salt} beat procrustes: {err} < {best}"
            );
        }
    }

    #[test]
    fn rejects_mismatched_shapes() {
        assert!(procrustes(&Matrix::zeros(4, 3), &Matrix::zeros(4, 2)).is_err());
    }
}
