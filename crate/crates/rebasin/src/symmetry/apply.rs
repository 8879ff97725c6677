//! Application of alignment maps to model parameters.

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::transformer::{Activation, HeadParams, LayerParams, NormKind, TransformerParams};

use super::{AlignmentMaps, SemiPermutation};

/// Checks the precondition shared by the residual-map operators: unit-scale
/// RMSNorm everywhere, so the norm cores commute with orthogonal maps.
pub(crate) fn require_absorbed(params: &TransformerParams, op: &'static str) -> Result<()> {
    if params.config.norm != NormKind::RmsNorm {
        return Err(Error::NormNotAbsorbed {
            op,
            kind: "layernorm (run absorb_layernorm first)".into(),
        });
    }
    let mut norms: Vec<&Matrix> = vec![&params.norm_final.scale];
    for layer in &params.layers {
        norms.push(&layer.norm_attn.scale);
        norms.push(&layer.norm_ffn.scale);
    }
    for scale in norms {
        if scale.data().iter().any(|&g| (g - 1.0).abs() > 1e-12) {
            return Err(Error::NormNotAbsorbed {
                op,
                kind: "rmsnorm with non-unit scales (run absorb_layernorm first)".into(),
            });
        }
    }
    Ok(())
}

/// Applies an alignment map: the aligned model represents the same function
/// with its residual stream re-expressed as `r' = O^T r`, FFN neurons
/// permuted by `p_ff`, and heads re-indexed by `p_h`.
///
/// In the `W x` convention with row-stacked activations this composes every
/// residual read with `O` on the right (`W_q' = W_q O`, `W_1' = P_ff W_1 O`,
/// `W_out' = W_out O`, embedding rows `r -> r O`), every residual write with
/// `O^T` on the left (`W_o' = O^T W_o`, `W_2' = O^T W_2 P_ff^T`,
/// `b_2' = O^T b_2`), and moves norm offsets with the stream (`t -> O^T t`).
///
/// Requires a unit-scale RMSNorm model (see [`super::absorb_layernorm`]);
/// the identity map returns a bitwise-equal model.
pub fn apply_alignment(params: &TransformerParams, maps: &AlignmentMaps) -> Result<TransformerParams> {
    params.validate()?;
    maps.validate_for(params)?;
    require_absorbed(params, "apply_alignment")?;

    let o = maps.o.matrix();
    let read = |w: &Matrix| w.matmul(o); // rows are residual covectors
    let write = |w: &Matrix| o.matmul_transa(w); // O^T · w, columns write residual

    let mut out = params.clone();
    out.embed = read(&params.embed)?;
    out.pos = read(&params.pos)?;
    for (layer_out, (layer, lmaps)) in out
        .layers
        .iter_mut()
        .zip(params.layers.iter().zip(&maps.layers))
    {
        layer_out.norm_attn.offset = read(&layer.norm_attn.offset)?;
        let rotated: Vec<HeadParams> = layer
            .heads
            .iter()
            .map(|h| {
                Ok(HeadParams {
                    w_q: read(&h.w_q)?,
                    w_k: read(&h.w_k)?,
                    w_v: read(&h.w_v)?,
                    w_o: write(&h.w_o)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        layer_out.heads = mix_heads(&rotated, &lmaps.p_h)?;

        layer_out.norm_ffn.offset = read(&layer.norm_ffn.offset)?;
        layer_out.w_1 = lmaps.p_ff.permute_rows(&read(&layer.w_1)?)?;
        layer_out.b_1 = lmaps.p_ff.permute_cols(&layer.b_1)?;
        layer_out.w_2 = lmaps.p_ff.permute_cols(&write(&layer.w_2)?)?;
        layer_out.b_2 = read(&layer.b_2)?; // row form of O^T b_2
    }
    out.norm_final.offset = read(&params.norm_final.offset)?;
    out.w_out = read(&params.w_out)?;
    out.validate()?;
    Ok(out)
}

/// Re-indexes, duplicates, or splits the heads of one layer. Destination
/// head `j` fed by source `i` with weight `w` copies `W_q`, `W_k`, `W_v`
/// verbatim and takes `w · W_o`; destinations with no source become all-zero
/// heads (zero queries/keys give uniform attention over zero values). Since
/// each source's weights sum to 1 and the output projection is linear per
/// head, the summed multi-head output is unchanged for any activation.
pub fn head_mix(layer: &LayerParams, p_h: &SemiPermutation) -> Result<LayerParams> {
    let mut out = layer.clone();
    out.heads = mix_heads(&layer.heads, p_h)?;
    Ok(out)
}

fn mix_heads(heads: &[HeadParams], p_h: &SemiPermutation) -> Result<Vec<HeadParams>> {
    if p_h.cols() != heads.len() {
        return Err(Error::ShapeMismatch {
            op: "head_mix",
            expected: format!("{} source heads", p_h.cols()),
            got: format!("{}", heads.len()),
        });
    }
    let d_k = heads[0].w_q.rows();
    let d_r = heads[0].w_q.cols();
    Ok((0..p_h.rows())
        .map(|j| match p_h.row(j) {
            Some((i, w)) => HeadParams {
                w_q: heads[i].w_q.clone(),
                w_k: heads[i].w_k.clone(),
                w_v: heads[i].w_v.clone(),
                w_o: heads[i].w_o.scaled(w),
            },
            None => HeadParams {
                w_q: Matrix::zeros(d_k, d_r),
                w_k: Matrix::zeros(d_k, d_r),
                w_v: Matrix::zeros(d_k, d_r),
                w_o: Matrix::zeros(d_r, d_k),
            },
        })
        .collect())
}

/// Semi-permutes the FFN hidden neurons of one layer: destination neuron `j`
/// fed by source `i` with weight `w` takes `w`-scaled first-layer row and
/// bias, and an unscaled copy of the second-layer column. Exact only for
/// relu, whose positive homogeneity gives
/// `relu(w z) = w relu(z)`, so the weighted copies recombine through the
/// unscaled columns to the original sum. Refused for gelu.
pub fn split_ffn(
    layer: &LayerParams,
    p: &SemiPermutation,
    activation: Activation,
) -> Result<LayerParams> {
    if activation != Activation::Relu {
        return Err(Error::ActivationUnsupported {
            op: "split_ffn",
            activation: activation.name().into(),
            detail: "neuron splitting relies on positive homogeneity; only relu qualifies".into(),
        });
    }
    if p.cols() != layer.d_h() {
        return Err(Error::ShapeMismatch {
            op: "split_ffn",
            expected: format!("{} source neurons", p.cols()),
            got: format!("{}", layer.d_h()),
        });
    }
    let d_r = layer.w_1.cols();
    let m = p.rows();
    let mut w_1 = Matrix::zeros(m, d_r);
    let mut b_1 = Matrix::zeros(1, m);
    let mut w_2 = Matrix::zeros(d_r, m);
    for j in 0..m {
        if let Some((i, w)) = p.row(j) {
            for c in 0..d_r {
                w_1.set(j, c, w * layer.w_1.get(i, c));
                w_2.set(c, j, layer.w_2.get(c, i));
            }
            b_1.set(0, j, w * layer.b_1.get(0, i));
        }
    }
    let mut out = layer.clone();
    out.w_1 = w_1;
    out.b_1 = b_1;
    out.w_2 = w_2;
    Ok(out)
}

/// Balances the intra-head invertible freedom: scores depend only on the
/// product `W_q^T W_k` and outputs only on `W_o W_v`, so scaling one factor
/// up and the other down is exact. Rescales so `|W_q| = |W_k|` and
/// `|W_v| = |W_o|` in Frobenius norm.
pub fn canonicalize_head(head: &HeadParams) -> Result<HeadParams> {
    let nq = head.w_q.frobenius_norm();
    let nk = head.w_k.frobenius_norm();
    let nv = head.w_v.frobenius_norm();
    let no = head.w_o.frobenius_norm();
    for (idx, n) in [nq, nk, nv, no].into_iter().enumerate() {
        if n < 1e-12 {
            return Err(Error::DegenerateScale {
                index: idx,
                value: n,
            });
        }
    }
    let s = (nk / nq).sqrt();
    let t = (no / nv).sqrt();
    Ok(HeadParams {
        w_q: head.w_q.scaled(s),
        w_k: head.w_k.scaled(1.0 / s),
        w_v: head.w_v.scaled(t),
        w_o: head.w_o.scaled(1.0 / t),
    })
}
