//! Linear assignment by shortest augmenting paths with dual potentials.
//!
//! O(n^3) in the matrix size; exact. Rows are inserted in order and ties are
//! resolved toward the lowest column index, so results are deterministic.

use super::Matrix;
use crate::error::{Error, Result};

/// Solves the assignment problem on a square cost matrix.
///
/// Returns `sigma` with `sigma[row] = col` optimizing the total
/// `sum_i cost[i, sigma(i)]` — minimized, or maximized when `maximize` is set.
pub fn linear_assignment(cost: &Matrix, maximize: bool) -> Result<Vec<usize>> {
    let (rows, cols) = cost.dims();
    if rows != cols {
        return Err(Error::NotSquare {
            op: "linear_assignment",
            rows,
            cols,
        });
    }
    if rows == 0 {
        return Err(Error::EmptyInput {
            context: "linear_assignment".into(),
        });
    }
    let n = rows;
    let sign = if maximize { -1.0 } else { 1.0 };
    let c = |i: usize, j: usize| sign * cost.get(i, j);

    // Dual potentials for rows (u) and columns (v); column n is a virtual
    // start column. p[j] = row currently assigned to column j.
    let mut u = vec![0.0_f64; n];
    let mut v = vec![0.0_f64; n + 1];
    let mut p: Vec<Option<usize>> = vec![None; n + 1];
    let mut way = vec![n; n];

    for i in 0..n {
        p[n] = Some(i);
        let mut j0 = n;
        let mut minv = vec![f64::INFINITY; n];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0].expect("scanned column is assigned");
            let mut delta = f64::INFINITY;
            let mut j1 = n;
            for j in 0..n {
                if used[j] {
                    continue;
                }
                let cur = c(i0, j) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            debug_assert!(j1 < n, "augmenting path always finds a free column");
            for j in 0..=n {
                if used[j] {
                    if let Some(pj) = p[j] {
                        u[pj] += delta;
                    }
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0].is_none() {
                break;
            }
        }
        // Augment along the recorded path back to the virtual column.
        while j0 != n {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
        }
    }

    let mut sigma = vec![0; n];
    for (j, pj) in p.iter().take(n).enumerate() {
        sigma[pj.expect("all columns assigned")] = j;
    }
    Ok(sigma)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pseudo_cost(n: usize, salt: u64) -> Matrix {
        Matrix::from_fn(n, n, |i, j| {
            let x = (i as u64)
                .wrapping_mul(0x9e3779b97f4a7c15)
                .wrapping_add((j as u64).wrapping_mul(0xbf58476d1ce4e5b9))
                .wrapping_add(salt.wrapping_mul(0x94d049bb133111eb));
            let x = x ^ (x >> 31);
            (x % 1000) as f64 / 10.0
        })
    }

    fn total(cost: &Matrix, sigma: &[usize]) -> f64 {
        sigma.iter().enumerate().map(|(i, &j)| cost.get(i, j)).sum()
    }

    /// Exhaustive oracle over all n! assignments (n <= 7).
    fn brute_force(cost: &Matrix, maximize: bool) -> f64 {
        fn rec(cost: &Matrix, row: usize, free: &mut Vec<usize>, maximize: bool) -> f64 {
            if free.is_empty() {
                return 0.0;
            }
            let mut best = if maximize {
                f64::NEG_INFINITY
            } else {
                f64::INFINITY
            };
            for k in 0..free.len() {
                let j = free.remove(k);
                let rest = rec(cost, row + 1, free, maximize) + cost.get(row, j);
                free.insert(k, j);
                best = if maximize {
                    best.max(rest)
                } else {
                    best.min(rest)
                };
            }
            best
        }
        let mut free: Vec<usize> = (0..cost.rows()).collect();
        rec(cost, 0, &mut free, maximize)
    }

    #[test]
    fn matches_brute_force_up_to_seven() {
        for n in 1..=7 {
            for salt in 0..4 {
                let cost = pseudo_cost(n, salt);
                for &maximize in &[false, true] {
                    let sigma = linear_assignment(&cost, maximize).unwrap();
                    let mut seen = vec![false; n];
                    for &j in &sigma {
                        assert!(!seen[j], "not a bijection");
                        seen[j] = true;
                    }
                    let got = total(&cost, &sigma);
                    let want = brute_force(&cost, maximize);
                    assert!(
                        (got - want).abs() < 1e-9,
                        "n={n} salt={salt} maximize={maximize}: {got} vs {want}"
                    );
                }
            }
        }
    }

    #[test]
    fn identity_cost_structure_recovers_identity() {
        // Strong diagonal preference.
        let n = 6;
        let cost = Matrix::from_fn(n, n, |i, j| if i == j { 0.0 } else { 1.0 });
        assert_eq!(
            linear_assignment(&cost, false).unwrap(),
            (0..n).collect::<Vec<_>>()
        );
    }

    #[test]
    fn constant_costs_break_ties_toward_lowest_index() {
        let cost = Matrix::zeros(5, 5);
        assert_eq!(
            linear_assignment(&cost, false).unwrap(),
            vec![0, 1, 2, 3, 4]
        );
    }

    #[test]
    fn rejects_non_square() {
        let cost = Matrix::zeros(3, 4);
        assert!(matches!(
            linear_assignment(&cost, false),
            Err(Error::NotSquare { .. })
        ));
    }

    #[test]
    fn classic_small_example() {
        // Hand-checked optimum total: 12 (two assignments tie at 12).
        let cost = Matrix::new(3, 3, vec![4.0, 5.0, 7.0, 3.0, 8.0, 6.0, 9.0, 2.0, 9.0]).unwrap();
        let sigma = linear_assignment(&cost, false).unwrap();
        assert!((total(&cost, &sigma) - 12.0).abs() < 1e-12);
    }
}
