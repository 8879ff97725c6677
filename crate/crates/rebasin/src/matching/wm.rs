//! Weight matching: coordinate descent over FFN permutations, head
//! permutations, and the global residual map.
//!
//! Each sweep solves three subproblems against the similarity objective
//! `J(π, O) = ⟨R_A, R_B(π)·O⟩_F`, where `R` stacks every residual-facing
//! weight block row-wise (embeddings, per-head query/key/value rows and
//! transposed output projections, norm offsets, FFN matrices, output head)
//! and `R_B(π)` re-indexes model B's blocks by the current permutations:
//!
//! 1. per layer, the FFN permutation by linear assignment on
//!    `⟨W₁ᴬ, P·W₁ᴮ·O⟩ + ⟨W₂ᴬ, Oᵀ·W₂ᴮ·Pᵀ⟩`;
//! 2. per layer, the head permutation by linear assignment on the circuit
//!    distance `‖QKᵢᴬ − Oᵀ·QKⱼᴮ·O‖² + ‖OVᵢᴬ − Oᵀ·OVⱼᴮ·O‖²` with
//!    `QK = W_qᵀ·W_k` and `OV = W_o·W_v` (both `d_r × d_r`, invariant to the
//!    per-head basis and conjugated like any residual-space bilinear form);
//! 3. the residual map `O` by orthogonal Procrustes (or, in permutation
//!    mode, by linear assignment over residual coordinates).
//!
//! Steps 1 and 3 exactly maximize their share of `J`, so the recorded
//! objective is non-decreasing; step 2 optimizes the circuit criterion the
//! permutations are actually judged by.

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::symmetry::{require_absorbed, AlignmentMaps, LayerMaps, OrthogonalMap, Permutation, SemiPermutation};
use crate::transformer::{HeadParams, TransformerParams};

use super::{check_same_arch, MatchConfig, ResidualMatching};

/// Weight-matching result: the recovered maps, the similarity objective after
/// each sweep, and whether the permutations stopped changing before the sweep
/// limit.
#[derive(Debug, Clone)]
pub struct WeightMatchReport {
    pub maps: AlignmentMaps,
    pub objective: Vec<f64>,
    pub converged: bool,
}

/// Stacks every residual-facing block of `p` row-wise, optionally re-indexed
/// by per-layer FFN permutations and head source orders. The block order is
/// fixed: embeddings, positions, then per layer (per destination slot:
/// `w_q`, `w_k`, `w_v`, `w_oᵀ`), attention-norm offset, `P·W₁`, `P·W₂ᵀ`,
/// `b₂`, FFN-norm offset; finally the output-norm offset and unembedding.
fn residual_stack(
    p: &TransformerParams,
    perms: Option<(&[Permutation], &[Vec<usize>])>,
) -> Result<Matrix> {
    let mut blocks: Vec<Matrix> = Vec::new();
    blocks.push(p.embed.clone());
    blocks.push(p.pos.clone());
    for (l, layer) in p.layers.iter().enumerate() {
        for i in 0..layer.heads.len() {
            let src = match perms {
                Some((_, heads)) => heads[l][i],
                None => i,
            };
            let h = &layer.heads[src];
            blocks.push(h.w_q.clone());
            blocks.push(h.w_k.clone());
            blocks.push(h.w_v.clone());
            blocks.push(h.w_o.transpose());
        }
        blocks.push(layer.norm_attn.offset.clone());
        match perms {
            Some((sigma_ff, _)) => {
                blocks.push(sigma_ff[l].permute_rows(&layer.w_1)?);
                blocks.push(sigma_ff[l].permute_rows(&layer.w_2.transpose())?);
            }
            None => {
                blocks.push(layer.w_1.clone());
                blocks.push(layer.w_2.transpose());
            }
        }
        blocks.push(layer.b_2.clone());
        blocks.push(layer.norm_ffn.offset.clone());
    }
    blocks.push(p.norm_final.offset.clone());
    blocks.push(p.w_out.clone());

    let cols = p.embed.cols();
    let total: usize = blocks.iter().map(|b| b.rows()).sum();
    let mut out = Matrix::zeros(total, cols);
    let mut r = 0;
    for b in &blocks {
        for i in 0..b.rows() {
            out.row_mut(r).copy_from_slice(b.row(i));
            r += 1;
        }
    }
    Ok(out)
}

fn qk_circuit(h: &HeadParams) -> Result<Matrix> {
    h.w_q.matmul_transa(&h.w_k)
}

fn ov_circuit(h: &HeadParams) -> Result<Matrix> {
    h.w_o.matmul(&h.w_v)
}

/// Coordinate-descent weight matching. Returns maps `π̂` such that
/// `apply_alignment(θ_B, π̂)` approximates `θ_A`.
pub fn weight_match(
    a: &TransformerParams,
    b: &TransformerParams,
    config: &MatchConfig,
) -> Result<WeightMatchReport> {
    config.validate()?;
    check_same_arch(a, b, "weight_match")?;
    require_absorbed(a, "weight_match")?;
    require_absorbed(b, "weight_match")?;

    let d_r = a.config.d_r;
    let l_count = a.layers.len();
    let mut sigma_ff: Vec<Permutation> = a
        .layers
        .iter()
        .map(|l| Permutation::identity(l.d_h()))
        .collect();
    let mut head_src: Vec<Vec<usize>> = a
        .layers
        .iter()
        .map(|l| (0..l.heads.len()).collect())
        .collect();
    let mut o = Matrix::identity(d_r);
    let mut objective = Vec::new();
    let mut converged = false;

    let r_a = residual_stack(a, None)?;

    for sweep in 0..config.wm_iterations {
        let mut changed = false;

        // (1) FFN permutations, layer by layer.
        for l in 0..l_count {
            let la = &a.layers[l];
            let lb = &b.layers[l];
            let profit1 = la.w_1.matmul_transb(&lb.w_1.matmul(&o)?)?;
            let profit2 = la.w_2.matmul_transa(&o.matmul_transa(&lb.w_2)?)?;
            let profit = profit1.add(&profit2)?;
            let assign = linalg::linear_assignment(&profit, true)?;
            let mut sigma = vec![0usize; assign.len()];
            for (d, &s) in assign.iter().enumerate() {
                sigma[s] = d;
            }
            let new = Permutation::new(sigma)?;
            if new.sigma() != sigma_ff[l].sigma() {
                changed = true;
                sigma_ff[l] = new;
            }
        }

        // (2) Head permutations by circuit distance.
        for l in 0..l_count {
            let heads = a.layers[l].heads.len();
            if heads < 2 {
                continue;
            }
            let qk_a: Vec<Matrix> = a.layers[l].heads.iter().map(qk_circuit).collect::<Result<_>>()?;
            let ov_a: Vec<Matrix> = a.layers[l].heads.iter().map(ov_circuit).collect::<Result<_>>()?;
            let mut cost = Matrix::zeros(heads, heads);
            for (j, hb) in b.layers[l].heads.iter().enumerate() {
                let qk_b = o.matmul_transa(&qk_circuit(hb)?)?.matmul(&o)?;
                let ov_b = o.matmul_transa(&ov_circuit(hb)?)?.matmul(&o)?;
                for i in 0..heads {
                    let c = qk_a[i].sub(&qk_b)?.frobenius_norm().powi(2)
                        + ov_a[i].sub(&ov_b)?.frobenius_norm().powi(2);
                    cost.set(i, j, c);
                }
            }
            let assign = linalg::linear_assignment(&cost, false)?;
            if assign != head_src[l] {
                changed = true;
                head_src[l] = assign;
            }
        }

        if !changed && sweep > 0 {
            converged = true;
            break;
        }

        // (3) Residual map given the permutations.
        let r_b = residual_stack(b, Some((&sigma_ff, &head_src)))?;
        o = match config.residual {
            ResidualMatching::Orthogonal => linalg::procrustes(&r_a, &r_b)?,
            ResidualMatching::Permutation => {
                let profit = r_a.matmul_transa(&r_b)?;
                let assign = linalg::linear_assignment(&profit, true)?;
                let mut m = Matrix::zeros(d_r, d_r);
                for (d, &s) in assign.iter().enumerate() {
                    m.set(s, d, 1.0);
                }
                m
            }
        };
        objective.push(r_a.frobenius_inner(&r_b.matmul(&o)?)?);
    }

    let layers = sigma_ff
        .into_iter()
        .zip(head_src)
        .map(|(p_ff, srcs)| {
            let mut rows = vec![None; srcs.len()];
            for (dest, &src) in srcs.iter().enumerate() {
                rows[dest] = Some((src, 1.0));
            }
            Ok(LayerMaps {
                p_h: SemiPermutation::new(srcs.len(), rows)?,
                p_ff,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let maps = AlignmentMaps {
        o: OrthogonalMap::new(o).map_err(|_| Error::Numeric {
            context: "weight_match produced a non-orthogonal residual map".into(),
        })?,
        layers,
    };
    Ok(WeightMatchReport {
        maps,
        objective,
        converged,
    })
}
