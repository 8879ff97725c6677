//! Sinkhorn-Knopp normalization onto the doubly-stochastic polytope.

use super::Matrix;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct SinkhornResult {
    /// Row- and column-normalized matrix.
    pub matrix: Matrix,
    /// Iterations actually performed.
    pub iterations: usize,
    /// Max |row sum - 1| after the final iteration.
    pub max_row_deviation: f64,
    /// Max |column sum - 1| after the final iteration.
    pub max_col_deviation: f64,
}

/// Alternately normalizes rows then columns for `iterations` rounds.
///
/// Requires a square matrix with strictly positive entries; by the
/// Sinkhorn-Knopp theorem the iteration then converges to a doubly-stochastic
/// matrix, and the positivity requirement is what rules out inputs where the
/// limit does not exist.
pub fn sinkhorn_normalize(m: &Matrix, iterations: usize) -> Result<SinkhornResult> {
    let (rows, cols) = m.dims();
    if rows != cols {
        return Err(Error::NotSquare {
            op: "sinkhorn_normalize",
            rows,
            cols,
        });
    }
    if rows == 0 {
        return Err(Error::EmptyInput {
            context: "sinkhorn_normalize".into(),
        });
    }
    for i in 0..rows {
        for j in 0..cols {
            let v = m.get(i, j);
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::NonPositiveEntry {
                    row: i,
                    col: j,
                    value: v,
                });
            }
        }
    }

    let mut out = m.clone();
    for _ in 0..iterations {
        for i in 0..rows {
            let row = out.row_mut(i);
            let sum: f64 = row.iter().sum();
            for x in row.iter_mut() {
                *x /= sum;
            }
        }
        for j in 0..cols {
            let sum: f64 = (0..rows).map(|i| out.get(i, j)).sum();
            for i in 0..rows {
                let v = out.get(i, j) / sum;
                out.set(i, j, v);
            }
        }
    }

    let max_row_deviation = (0..rows)
        .map(|i| (out.row(i).iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max);
    let max_col_deviation = (0..cols)
        .map(|j| ((0..rows).map(|i| out.get(i, j)).sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max);

    Ok(SinkhornResult {
        matrix: out,
        iterations,
        max_row_deviation,
        max_col_deviation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn positive_pseudo(n: usize, salt: u64) -> Matrix {
        Matrix::from_fn(n, n, |i, j| {
            let x = (i as u64)
                .wrapping_mul(0xd1342543de82ef95)
                .wrapping_add((j as u64).wrapping_mul(0xaf251af3b0f025b5))
                .wrapping_add(salt);
            let x = x ^ (x >> 29);
            0.05 + (x % 997) as f64 / 100.0
        })
    }

    #[test]
    fn random_positive_matrix_becomes_doubly_stochastic() {
        let m = positive_pseudo(16, 3);
        let r = sinkhorn_normalize(&m, 50).unwrap();
        assert!(r.max_row_deviation < 1e-6, "rows: {}", r.max_row_deviation);
        assert!(r.max_col_deviation < 1e-6, "cols: {}", r.max_col_deviation);
        assert!(r.matrix.data().iter().all(|&x| x > 0.0));
    }

    #[test]
    fn sharp_exponential_of_permutation_recovers_permutation() {
        // exp(large * P) has one dominant entry per row/column.
        let n = 6;
        let sigma = [2usize, 0, 3, 5, 1, 4];
        let p = Matrix::from_fn(n, n, |i, j| if sigma[i] == j { 1.0 } else { 0.0 });
        let sharp = p.map(|x| (30.0 * x).exp());
        let r = sinkhorn_normalize(&sharp, 50).unwrap();
        let diff = r.matrix.max_abs_diff(&p);
        assert!(diff < 1e-6, "distance to permutation: {diff}");
    }

    #[test]
    fn rejects_zero_and_negative_entries() {
        let mut m = positive_pseudo(4, 1);
        m.set(2, 1, 0.0);
        assert!(matches!(
            sinkhorn_normalize(&m, 20),
            Err(Error::NonPositiveEntry { row: 2, col: 1, .. })
        ));
        m.set(2, 1, -0.5);
        assert!(sinkhorn_normalize(&m, 20).is_err());
    }

    #[test]
    fn doubly_stochastic_input_is_fixed() {
        let m = Matrix::from_fn(5, 5, |_, _| 0.2);
        let r = sinkhorn_normalize(&m, 20).unwrap();
        assert!(r.matrix.max_abs_diff(&m) < 1e-15);
    }
}
