//! Function-preserving reparameterizations of transformer weights.
//!
//! Four nested transformation classes act on hidden representations without
//! changing the computed function: permutations, semi-permutations (sparse
//! stochastic maps that can split a unit across several slots), orthogonal
//! maps, and general invertible maps. This module provides the map types,
//! samplers, serialization, and the model-level application operators:
//!
//! - [`apply_alignment`]: residual change of basis plus per-layer FFN and
//!   head permutations (the full alignment map for a trained model);
//! - [`head_mix`]: re-index or split attention heads, exact for any
//!   activation because the output projection is linear in each head;
//! - [`split_ffn`]: semi-permutation of FFN neurons, exact only for relu
//!   (positive homogeneity);
//! - [`absorb_layernorm`]: rewrite LayerNorm models into unit-scale RMSNorm
//!   form so orthogonal residual maps become exact symmetries;
//! - [`expand_width`]: rectangular-orthogonal embedding of a model into a
//!   wider residual stream.

mod absorb;
mod apply;
mod expand;
mod io;

pub use absorb::{absorb_layernorm, AbsorbOutcome};
pub use apply::{apply_alignment, canonicalize_head, head_mix, split_ffn};
pub(crate) use apply::require_absorbed;
pub use expand::expand_width;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng;
use crate::transformer::TransformerParams;
use rand_chacha::ChaCha20Rng;

/// Tolerance for semi-permutation column sums.
const COL_SUM_TOL: f64 = 1e-9;
/// Tolerance for orthogonality (`max |O^T O - I|`).
const ORTHO_TOL: f64 = 1e-10;

/// Permutation of `n` slots. `sigma[i]` is the destination slot of source
/// slot `i`, so the matrix form has `P[sigma[i], i] = 1` and `P x` scatters
/// entry `i` of `x` to position `sigma[i]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Permutation {
    sigma: Vec<usize>,
}

impl Permutation {
    pub fn identity(n: usize) -> Self {
        Self {
            sigma: (0..n).collect(),
        }
    }

    pub fn new(sigma: Vec<usize>) -> Result<Self> {
        let n = sigma.len();
        let mut seen = vec![false; n];
        for &d in &sigma {
            if d >= n || seen[d] {
                return Err(Error::InvalidPermutation {
                    detail: format!("sigma {sigma:?} is not a bijection on 0..{n}"),
                });
            }
            seen[d] = true;
        }
        Ok(Self { sigma })
    }

    pub fn random(r: &mut ChaCha20Rng, n: usize) -> Self {
        Self {
            sigma: rng::random_permutation_indices(r, n),
        }
    }

    pub fn n(&self) -> usize {
        self.sigma.len()
    }

    pub fn sigma(&self) -> &[usize] {
        &self.sigma
    }

    pub fn is_identity(&self) -> bool {
        self.sigma.iter().enumerate().all(|(i, &d)| i == d)
    }

    pub fn inverse(&self) -> Self {
        let mut inv = vec![0; self.sigma.len()];
        for (i, &d) in self.sigma.iter().enumerate() {
            inv[d] = i;
        }
        Self { sigma: inv }
    }

    /// `self` after `first`: the result sends `i` to `self.sigma[first.sigma[i]]`.
    pub fn compose(&self, first: &Self) -> Result<Self> {
        if self.n() != first.n() {
            return Err(Error::InvalidPermutation {
                detail: format!("cannot compose sizes {} and {}", self.n(), first.n()),
            });
        }
        Ok(Self {
            sigma: first.sigma.iter().map(|&i| self.sigma[i]).collect(),
        })
    }

    /// `P · m`: row `i` of `m` moves to row `sigma[i]`.
    pub fn permute_rows(&self, m: &Matrix) -> Result<Matrix> {
        if m.rows() != self.n() {
            return Err(Error::ShapeMismatch {
                op: "Permutation::permute_rows",
                expected: format!("{} rows", self.n()),
                got: format!("{}", m.rows()),
            });
        }
        let mut out = Matrix::zeros(m.rows(), m.cols());
        for i in 0..m.rows() {
            let dest = self.sigma[i];
            out.row_mut(dest).copy_from_slice(m.row(i));
        }
        Ok(out)
    }

    /// `m · P^T`: column `j` of `m` moves to column `sigma[j]`.
    pub fn permute_cols(&self, m: &Matrix) -> Result<Matrix> {
        if m.cols() != self.n() {
            return Err(Error::ShapeMismatch {
                op: "Permutation::permute_cols",
                expected: format!("{} cols", self.n()),
                got: format!("{}", m.cols()),
            });
        }
        let mut out = Matrix::zeros(m.rows(), m.cols());
        for i in 0..m.rows() {
            for j in 0..m.cols() {
                out.set(i, self.sigma[j], m.get(i, j));
            }
        }
        Ok(out)
    }

    pub fn to_matrix(&self) -> Matrix {
        let n = self.n();
        let mut p = Matrix::zeros(n, n);
        for (i, &d) in self.sigma.iter().enumerate() {
            p.set(d, i, 1.0);
        }
        p
    }

    pub fn to_semi(&self) -> SemiPermutation {
        let mut rows = vec![None; self.n()];
        for (i, &d) in self.sigma.iter().enumerate() {
            rows[d] = Some((i, 1.0));
        }
        SemiPermutation {
            cols: self.n(),
            rows,
        }
    }
}

/// Sparse stochastic map from `cols` sources onto `rows >= cols` destination
/// slots: each destination row takes at most one source (with positive
/// weight), and each source's weights sum to 1 across destinations. A square
/// semi-permutation is necessarily a hard permutation.
#[derive(Debug, Clone, PartialEq)]
pub struct SemiPermutation {
    cols: usize,
    rows: Vec<Option<(usize, f64)>>,
}

impl SemiPermutation {
    pub fn new(cols: usize, rows: Vec<Option<(usize, f64)>>) -> Result<Self> {
        if rows.len() < cols {
            return Err(Error::InvalidSemiPermutation {
                detail: format!("{} rows < {cols} columns", rows.len()),
            });
        }
        let mut col_sums = vec![0.0; cols];
        for (i, entry) in rows.iter().enumerate() {
            if let Some((j, w)) = entry {
                if *j >= cols {
                    return Err(Error::InvalidSemiPermutation {
                        detail: format!("row {i} references column {j} of {cols}"),
                    });
                }
                if !(*w > 0.0) || !w.is_finite() {
                    return Err(Error::InvalidSemiPermutation {
                        detail: format!("row {i} has non-positive weight {w}"),
                    });
                }
                col_sums[*j] += w;
            }
        }
        for (j, s) in col_sums.iter().enumerate() {
            if (s - 1.0).abs() > COL_SUM_TOL {
                return Err(Error::InvalidSemiPermutation {
                    detail: format!("column {j} weights sum to {s}, expected 1"),
                });
            }
        }
        Ok(Self { cols, rows })
    }

    /// Random semi-permutation: every source appears at least once, any extra
    /// destination rows draw a random source, and each source's weight is
    /// split uniformly-at-random over its destinations.
    pub fn random(r: &mut ChaCha20Rng, rows: usize, cols: usize) -> Result<Self> {
        use rand::Rng;
        if rows < cols {
            return Err(Error::InvalidSemiPermutation {
                detail: format!("{rows} rows < {cols} columns"),
            });
        }
        // Place each source once (random distinct rows), then fill the rest.
        let slots = rng::random_permutation_indices(r, rows);
        let mut assignment: Vec<Option<usize>> = vec![None; rows];
        for (j, &slot) in slots.iter().take(cols).enumerate() {
            assignment[slot] = Some(j);
        }
        for a in assignment.iter_mut() {
            if a.is_none() {
                *a = Some(r.random_range(0..cols));
            }
        }
        let raw: Vec<f64> = (0..rows).map(|_| r.random_range(0.25..1.0)).collect();
        let mut col_totals = vec![0.0; cols];
        for (a, w) in assignment.iter().zip(&raw) {
            col_totals[a.unwrap()] += w;
        }
        let entries = assignment
            .into_iter()
            .zip(raw)
            .map(|(a, w)| {
                let j = a.unwrap();
                Some((j, w / col_totals[j]))
            })
            .collect();
        Self::new(cols, entries)
    }

    pub fn rows(&self) -> usize {
        self.rows.len()
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// The `(source column, weight)` feeding destination row `i`, if any.
    pub fn row(&self, i: usize) -> Option<(usize, f64)> {
        self.rows[i]
    }

    pub fn entries(&self) -> &[Option<(usize, f64)>] {
        &self.rows
    }

    /// `self` after `first`: destination `i` reads `self`'s source `m`, which
    /// in turn reads `first`'s source `j`, with the weights multiplied.
    pub fn compose(&self, first: &Self) -> Result<Self> {
        if self.cols != first.rows.len() {
            return Err(Error::InvalidSemiPermutation {
                detail: format!(
                    "cannot compose: inner dims {} and {}",
                    self.cols,
                    first.rows.len()
                ),
            });
        }
        let rows = self
            .rows
            .iter()
            .map(|entry| {
                entry.and_then(|(m, w2)| first.rows[m].map(|(j, w1)| (j, w1 * w2)))
            })
            .collect();
        Self::new(first.cols, rows)
    }

    pub fn is_square(&self) -> bool {
        self.rows.len() == self.cols
    }

    /// Square semi-permutations are hard permutations (each column must then
    /// own exactly one row of weight 1).
    pub fn to_permutation(&self) -> Result<Permutation> {
        if !self.is_square() {
            return Err(Error::InvalidSemiPermutation {
                detail: format!("{}x{} map is not square", self.rows(), self.cols),
            });
        }
        let mut sigma = vec![usize::MAX; self.cols];
        for (dest, entry) in self.rows.iter().enumerate() {
            let Some((src, w)) = entry else {
                return Err(Error::InvalidSemiPermutation {
                    detail: format!("square map has an empty row {dest}"),
                });
            };
            if (w - 1.0).abs() > COL_SUM_TOL {
                return Err(Error::InvalidSemiPermutation {
                    detail: format!("square map has fractional weight {w} in row {dest}"),
                });
            }
            sigma[*src] = dest;
        }
        Permutation::new(sigma)
    }

    pub fn to_matrix(&self) -> Matrix {
        let mut m = Matrix::zeros(self.rows(), self.cols);
        for (i, entry) in self.rows.iter().enumerate() {
            if let Some((j, w)) = entry {
                m.set(i, *j, *w);
            }
        }
        m
    }
}

/// Matrix with orthonormal columns (`M x N`, `M >= N`).
#[derive(Debug, Clone, PartialEq)]
pub struct OrthogonalMap {
    matrix: Matrix,
}

impl OrthogonalMap {
    pub fn new(matrix: Matrix) -> Result<Self> {
        if matrix.rows() < matrix.cols() {
            return Err(Error::ShapeMismatch {
                op: "OrthogonalMap::new",
                expected: "rows >= cols".into(),
                got: format!("{}x{}", matrix.rows(), matrix.cols()),
            });
        }
        let deviation = matrix.orthonormality_deviation();
        if deviation > ORTHO_TOL {
            return Err(Error::NotOrthogonal {
                op: "OrthogonalMap::new",
                deviation,
            });
        }
        Ok(Self { matrix })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            matrix: Matrix::identity(n),
        }
    }

    pub fn random(r: &mut ChaCha20Rng, rows: usize, cols: usize) -> Result<Self> {
        Self::new(rng::random_orthonormal_columns(r, rows, cols)?)
    }

    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }

    pub fn is_square(&self) -> bool {
        self.matrix.rows() == self.matrix.cols()
    }

    /// Transpose (the inverse, for square maps).
    pub fn transposed(&self) -> Result<Self> {
        if !self.is_square() {
            return Err(Error::NotSquare {
                op: "OrthogonalMap::transposed",
                rows: self.matrix.rows(),
                cols: self.matrix.cols(),
            });
        }
        Ok(Self {
            matrix: self.matrix.transpose(),
        })
    }
}

/// One of the four symmetry classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SymmetryClass {
    Permutation,
    SemiPermutation,
    Orthogonal,
    Invertible,
}

impl SymmetryClass {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "permutation" => Ok(Self::Permutation),
            "semi-permutation" => Ok(Self::SemiPermutation),
            "orthogonal" => Ok(Self::Orthogonal),
            "invertible" => Ok(Self::Invertible),
            other => Err(Error::ConfigMismatch {
                detail: format!("unknown symmetry class {other:?}"),
            }),
        }
    }
}

/// A sampled member of a symmetry class.
#[derive(Debug, Clone)]
pub enum Transformation {
    Permutation(Permutation),
    SemiPermutation(SemiPermutation),
    Orthogonal(OrthogonalMap),
    Invertible(Matrix),
}

/// Uniformly-seeded member of the requested class with the given dimensions.
/// Permutations and invertible maps must be square; semi-permutations and
/// orthogonal maps allow `rows >= cols`.
pub fn random_symmetry(
    class: SymmetryClass,
    rows: usize,
    cols: usize,
    seed: u64,
) -> Result<Transformation> {
    let mut r = rng::seeded(seed);
    if rows == 0 || cols == 0 {
        return Err(Error::EmptyInput {
            context: "random_symmetry".into(),
        });
    }
    match class {
        SymmetryClass::Permutation => {
            if rows != cols {
                return Err(Error::NotSquare {
                    op: "random_symmetry(permutation)",
                    rows,
                    cols,
                });
            }
            Ok(Transformation::Permutation(Permutation::random(&mut r, rows)))
        }
        SymmetryClass::SemiPermutation => Ok(Transformation::SemiPermutation(
            SemiPermutation::random(&mut r, rows, cols)?,
        )),
        SymmetryClass::Orthogonal => Ok(Transformation::Orthogonal(OrthogonalMap::random(
            &mut r, rows, cols,
        )?)),
        SymmetryClass::Invertible => {
            if rows != cols {
                return Err(Error::NotSquare {
                    op: "random_symmetry(invertible)",
                    rows,
                    cols,
                });
            }
            Ok(Transformation::Invertible(rng::random_invertible(
                &mut r, rows,
            )?))
        }
    }
}

/// Per-layer alignment components.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerMaps {
    /// Square head map (hard permutation in the common case).
    pub p_h: SemiPermutation,
    /// FFN neuron permutation.
    pub p_ff: Permutation,
}

/// A full alignment map: global residual orthogonal map plus per-layer head
/// and FFN permutations. Applying it to a model is function-preserving.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentMaps {
    pub o: OrthogonalMap,
    pub layers: Vec<LayerMaps>,
}

impl AlignmentMaps {
    /// Identity alignment shaped for a given model.
    pub fn identity_for(params: &TransformerParams) -> Self {
        Self {
            o: OrthogonalMap::identity(params.config.d_r),
            layers: params
                .layers
                .iter()
                .map(|l| LayerMaps {
                    p_h: Permutation::identity(l.heads.len()).to_semi(),
                    p_ff: Permutation::identity(l.d_h()),
                })
                .collect(),
        }
    }

    /// Random function-preserving alignment for a model: hard head and FFN
    /// permutations, and either the identity or a random square orthogonal
    /// residual map.
    pub fn random_for(
        params: &TransformerParams,
        with_orthogonal: bool,
        seed: u64,
    ) -> Result<Self> {
        let mut r = rng::seeded(seed);
        let o = if with_orthogonal {
            OrthogonalMap::random(&mut r, params.config.d_r, params.config.d_r)?
        } else {
            OrthogonalMap::identity(params.config.d_r)
        };
        let layers = params
            .layers
            .iter()
            .map(|l| LayerMaps {
                p_h: Permutation::random(&mut r, l.heads.len()).to_semi(),
                p_ff: Permutation::random(&mut r, l.d_h()),
            })
            .collect();
        Ok(Self { o, layers })
    }

    /// Checks that shapes match a model: square `d_r` orthogonal map, square
    /// per-layer head maps, FFN permutations of each layer's hidden width.
    pub fn validate_for(&self, params: &TransformerParams) -> Result<()> {
        let d_r = params.config.d_r;
        if !self.o.is_square() || self.o.matrix().rows() != d_r {
            return Err(Error::ShapeMismatch {
                op: "AlignmentMaps::validate_for",
                expected: format!("square {d_r}x{d_r} residual map"),
                got: format!("{}x{}", self.o.matrix().rows(), self.o.matrix().cols()),
            });
        }
        if self.layers.len() != params.layers.len() {
            return Err(Error::ConfigMismatch {
                detail: format!(
                    "alignment has {} layers, model has {}",
                    self.layers.len(),
                    params.layers.len()
                ),
            });
        }
        for (l, (maps, layer)) in self.layers.iter().zip(&params.layers).enumerate() {
            let h = layer.heads.len();
            if !maps.p_h.is_square() || maps.p_h.cols() != h {
                return Err(Error::ShapeMismatch {
                    op: "AlignmentMaps::validate_for",
                    expected: format!("layer {l}: square {h}x{h} head map"),
                    got: format!("{}x{}", maps.p_h.rows(), maps.p_h.cols()),
                });
            }
            if maps.p_ff.n() != layer.d_h() {
                return Err(Error::ShapeMismatch {
                    op: "AlignmentMaps::validate_for",
                    expected: format!("layer {l}: FFN permutation of {}", layer.d_h()),
                    got: format!("{}", maps.p_ff.n()),
                });
            }
        }
        Ok(())
    }

    /// Inverse alignment (square orthogonal transposes, permutations invert).
    /// The head maps must be hard permutations.
    pub fn inverse(&self) -> Result<Self> {
        let o = self.o.transposed()?;
        let layers = self
            .layers
            .iter()
            .map(|l| {
                Ok(LayerMaps {
                    p_h: l.p_h.to_permutation()?.inverse().to_semi(),
                    p_ff: l.p_ff.inverse(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { o, layers })
    }
}

/// The single alignment equivalent to applying `first` and then `then`:
/// `apply_alignment(m, &compose_alignment(first, then)?)` matches
/// `apply_alignment(&apply_alignment(m, first)?, then)?`. Both inputs must be
/// square (same-width) alignments.
pub fn compose_alignment(first: &AlignmentMaps, then: &AlignmentMaps) -> Result<AlignmentMaps> {
    if first.layers.len() != then.layers.len() {
        return Err(Error::ConfigMismatch {
            detail: format!(
                "compose_alignment: {} layers vs {}",
                first.layers.len(),
                then.layers.len()
            ),
        });
    }
    let o = OrthogonalMap::new(first.o.matrix().matmul(then.o.matrix())?)?;
    let layers = first
        .layers
        .iter()
        .zip(&then.layers)
        .map(|(f, t)| {
            Ok(LayerMaps {
                p_h: t.p_h.compose(&f.p_h)?,
                p_ff: t.p_ff.compose(&f.p_ff)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AlignmentMaps { o, layers })
}
