//! Seeded randomness helpers.
//!
//! Every stochastic routine in this crate threads an explicit ChaCha20 RNG so
//! results are reproducible from a `u64` seed alone, independent of platform.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Gamma, Normal};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// A ChaCha20 RNG from a bare seed.
pub fn seeded(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

/// Matrix of i.i.d. normal entries.
pub fn normal_matrix(rng: &mut ChaCha20Rng, rows: usize, cols: usize, std: f64) -> Matrix {
    let dist = Normal::new(0.0, std).expect("std must be finite and non-negative");
    Matrix::from_fn(rows, cols, |_, _| dist.sample(rng))
}

/// Matrix of i.i.d. uniform entries on `[lo, hi)`.
pub fn uniform_matrix(rng: &mut ChaCha20Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(lo..hi))
}

/// Uniformly random permutation of `0..n`, as the image vector `p[i] = j`.
pub fn random_permutation_indices(rng: &mut ChaCha20Rng, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}

/// Haar-distributed orthogonal matrix (Gram-Schmidt of a Gaussian matrix).
pub fn random_orthogonal(rng: &mut ChaCha20Rng, n: usize) -> Result<Matrix> {
    random_orthonormal_columns(rng, n, n)
}

/// `m x n` matrix with orthonormal columns, `m >= n`.
pub fn random_orthonormal_columns(rng: &mut ChaCha20Rng, m: usize, n: usize) -> Result<Matrix> {
    if m < n {
        return Err(Error::ShapeMismatch {
            op: "random_orthonormal_columns",
            expected: "rows >= cols".into(),
            got: format!("{m}x{n}"),
        });
    }
    // A Gaussian matrix is almost surely full rank; retry on the null event.
    for _ in 0..4 {
        let g = normal_matrix(rng, m, n, 1.0);
        if let Ok(q) = crate::linalg::orthonormalize_columns(&g) {
            return Ok(q);
        }
    }
    Err(Error::Numeric {
        context: "random_orthonormal_columns: repeated rank deficiency".into(),
    })
}

/// Random invertible matrix: Gaussian entries, rejecting near-singular draws.
pub fn random_invertible(rng: &mut ChaCha20Rng, n: usize) -> Result<Matrix> {
    for _ in 0..8 {
        let g = normal_matrix(rng, n, n, 1.0);
        let svd = crate::linalg::svd(&g)?;
        let smax = svd.s[0];
        let smin = svd.s[n - 1];
        if smin > 1e-6 * smax.max(1.0) {
            return Ok(g);
        }
    }
    Err(Error::Numeric {
        context: "random_invertible: repeated near-singular draws".into(),
    })
}

/// Symmetric Dirichlet sample of dimension `k` via normalized Gamma draws.
pub fn dirichlet(rng: &mut ChaCha20Rng, alpha: f64, k: usize) -> Result<Vec<f64>> {
    if k == 0 {
        return Err(Error::EmptyInput {
            context: "dirichlet".into(),
        });
    }
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::Numeric {
        context: format!("dirichlet: bad concentration {alpha}: {e}"),
    })?;
    loop {
        let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
        let total: f64 = draws.iter().sum();
        // With small alpha a draw can underflow to zero; resample if all did.
        if total > 0.0 && total.is_finite() {
            return Ok(draws.into_iter().map(|d| d / total).collect());
        }
    }
}
