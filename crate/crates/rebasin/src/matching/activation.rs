//! Activation matching: unit correspondence from correlations on a shared
//! probe set.
//!
//! Both models run the same probe sequences. FFN neurons are paired by
//! linear assignment on the cross-model Pearson correlation of their hidden
//! activations over all probe positions; heads are paired by correlating
//! their flattened attention patterns (both statistics are invariant to the
//! residual basis, which decouples the permutations from `O`). The residual
//! map itself comes from Procrustes on the stacked residual-stream
//! activations. Degenerate statistics fall back to the identity with a
//! warning: a zero-variance unit correlates with nothing, and an all-zero
//! correlation matrix gives the lowest-index (identity) assignment.

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::symmetry::{AlignmentMaps, LayerMaps, OrthogonalMap, Permutation, SemiPermutation};
use crate::transformer::{Batch, ForwardTrace, TransformerParams};

use super::check_same_arch;

#[derive(Debug, Clone)]
pub struct ActivationMatchReport {
    pub maps: AlignmentMaps,
    /// Degeneracies encountered (zero-variance units, all-zero correlations).
    pub warnings: Vec<String>,
}

/// Standardizes each column to zero mean and unit norm; zero-variance
/// columns become all-zero (their correlations read as 0).
fn standardize_columns(m: &Matrix) -> (Matrix, usize) {
    let (rows, cols) = m.dims();
    let mut out = m.clone();
    let mut degenerate = 0;
    for j in 0..cols {
        let mean: f64 = (0..rows).map(|i| out.get(i, j)).sum::<f64>() / rows as f64;
        let mut sq = 0.0;
        for i in 0..rows {
            let c = out.get(i, j) - mean;
            out.set(i, j, c);
            sq += c * c;
        }
        let norm = sq.sqrt();
        if norm < 1e-12 {
            degenerate += 1;
            for i in 0..rows {
                out.set(i, j, 0.0);
            }
        } else {
            for i in 0..rows {
                let v = out.get(i, j) / norm;
                out.set(i, j, v);
            }
        }
    }
    (out, degenerate)
}

/// Pearson correlation of two equally long sample vectors; 0 when either is
/// (numerically) constant.
fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut dot = 0.0;
    let mut nx = 0.0;
    let mut ny = 0.0;
    for (a, b) in x.iter().zip(y) {
        let ca = a - mx;
        let cb = b - my;
        dot += ca * cb;
        nx += ca * ca;
        ny += cb * cb;
    }
    if nx.sqrt() < 1e-12 || ny.sqrt() < 1e-12 {
        return 0.0;
    }
    dot / (nx.sqrt() * ny.sqrt())
}

/// Assignment maximizing `profit`, with an explicit identity fallback (the
/// documented lowest-index tie-break) when the profit matrix is all zero.
fn assign_or_identity(
    profit: &Matrix,
    what: &str,
    warnings: &mut Vec<String>,
) -> Result<Vec<usize>> {
    if profit.max_abs() == 0.0 {
        warnings.push(format!("{what}: correlations all zero; keeping identity"));
        return Ok((0..profit.rows()).collect());
    }
    linalg::linear_assignment(profit, true)
}

fn stack_rows(blocks: &[&Matrix]) -> Matrix {
    let cols = blocks[0].cols();
    let total: usize = blocks.iter().map(|b| b.rows()).sum();
    let mut out = Matrix::zeros(total, cols);
    let mut r = 0;
    for b in blocks {
        for i in 0..b.rows() {
            out.row_mut(r).copy_from_slice(b.row(i));
            r += 1;
        }
    }
    out
}

/// Correlation-based matching on a shared probe set. The probe must supply
/// at least `d_r` positions so the residual Procrustes problem is
/// determined.
pub fn activation_match(
    a: &TransformerParams,
    b: &TransformerParams,
    probe: &[Batch],
) -> Result<ActivationMatchReport> {
    check_same_arch(a, b, "activation_match")?;
    if probe.is_empty() {
        return Err(Error::EmptyInput {
            context: "activation_match: no probe batches".into(),
        });
    }

    let mut traces_a: Vec<ForwardTrace> = Vec::new();
    let mut traces_b: Vec<ForwardTrace> = Vec::new();
    for batch in probe {
        for tokens in &batch.tokens {
            traces_a.push(a.forward_trace(tokens)?);
            traces_b.push(b.forward_trace(tokens)?);
        }
    }
    let positions: usize = traces_a.iter().map(|t| t.logits.rows()).sum();
    if positions < a.config.d_r {
        return Err(Error::EmptyInput {
            context: format!(
                "activation_match: probe has {positions} positions, need at least d_r = {}",
                a.config.d_r
            ),
        });
    }

    let mut warnings = Vec::new();
    let l_count = a.layers.len();
    let mut layers = Vec::with_capacity(l_count);
    for l in 0..l_count {
        // FFN units: correlation of hidden activations across all positions.
        let stack_a = stack_rows(&traces_a.iter().map(|t| &t.ffn_hidden[l]).collect::<Vec<_>>());
        let stack_b = stack_rows(&traces_b.iter().map(|t| &t.ffn_hidden[l]).collect::<Vec<_>>());
        let (std_a, degenerate_a) = standardize_columns(&stack_a);
        let (std_b, degenerate_b) = standardize_columns(&stack_b);
        if degenerate_a + degenerate_b > 0 {
            warnings.push(format!(
                "layer {l}: {} constant FFN units on the probe",
                degenerate_a + degenerate_b
            ));
        }
        let corr = std_a.matmul_transa(&std_b)?;
        let assign = assign_or_identity(&corr, &format!("layer {l} FFN"), &mut warnings)?;
        let mut sigma = vec![0usize; assign.len()];
        for (d, &s) in assign.iter().enumerate() {
            sigma[s] = d;
        }
        let p_ff = Permutation::new(sigma)?;

        // Heads: correlation of flattened attention patterns.
        let heads = a.layers[l].heads.len();
        let flatten = |traces: &[ForwardTrace], h: usize| -> Vec<f64> {
            let mut v = Vec::new();
            for t in traces {
                v.extend_from_slice(t.attn_patterns[l][h].data());
            }
            v
        };
        let head_srcs = if heads < 2 {
            (0..heads).collect::<Vec<_>>()
        } else {
            let vecs_a: Vec<Vec<f64>> = (0..heads).map(|h| flatten(&traces_a, h)).collect();
            let vecs_b: Vec<Vec<f64>> = (0..heads).map(|h| flatten(&traces_b, h)).collect();
            let mut profit = Matrix::zeros(heads, heads);
            for i in 0..heads {
                for j in 0..heads {
                    profit.set(i, j, pearson(&vecs_a[i], &vecs_b[j]));
                }
            }
            assign_or_identity(&profit, &format!("layer {l} heads"), &mut warnings)?
        };
        let mut rows = vec![None; heads];
        for (dest, &src) in head_srcs.iter().enumerate() {
            rows[dest] = Some((src, 1.0));
        }
        layers.push(LayerMaps {
            p_h: SemiPermutation::new(heads, rows)?,
            p_ff,
        });
    }

    // Residual map from the stacked residual-stream activations.
    let res_a: Vec<&Matrix> = traces_a.iter().flat_map(|t| t.residual.iter()).collect();
    let res_b: Vec<&Matrix> = traces_b.iter().flat_map(|t| t.residual.iter()).collect();
    let o = linalg::procrustes(&stack_rows(&res_a), &stack_rows(&res_b))?;

    Ok(ActivationMatchReport {
        maps: AlignmentMaps {
            o: OrthogonalMap::new(o)?,
            layers,
        },
        warnings,
    })
}
