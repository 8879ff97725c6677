//! Tape expressions that apply alignment tensors to a model and mix several
//! models, so gradient-based matchers can differentiate the task loss of an
//! interpolated model with respect to the alignment matrices.
//!
//! The construction mirrors `apply_alignment` but with dense matrices:
//! residual-space rows multiply by `O` on the right, residual-writing
//! matrices by `Oᵀ` on the left, FFN tensors by the (possibly soft) `P_FF`,
//! and every destination head slot is the `P_H[i,j]`-weighted sum of the
//! source heads. For hard permutation matrices this reproduces
//! `apply_alignment` exactly; doubly-stochastic matrices give the Birkhoff
//! relaxation. Norm scales stay untouched, so the expressions are
//! function-preserving only for absorbed (unit-scale) models, exactly like
//! `apply_alignment`.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::transformer::{TapeHead, TapeLayer, TapeModel, TapeNorm, TransformerParams};

/// Alignment tensors living on a tape: each may be a gradient-requiring leaf
/// (learned matching), a derived node (Sinkhorn output), or a constant.
pub(crate) struct AlignVars {
    pub o: Var,
    pub p_ff: Vec<Var>,
    pub p_h: Vec<Var>,
}

/// Builds model B's tensors with the alignment applied, as tape expressions
/// in the vars of `align`.
pub(crate) fn aligned_model(
    tape: &mut Tape,
    params: &TransformerParams,
    align: &AlignVars,
) -> Result<TapeModel> {
    if align.p_ff.len() != params.layers.len() || align.p_h.len() != params.layers.len() {
        return Err(Error::ConfigMismatch {
            detail: format!(
                "alignment has {} layers, model has {}",
                align.p_ff.len(),
                params.layers.len()
            ),
        });
    }
    let o = align.o;
    let o_t = tape.transpose(o);
    let read = |tape: &mut Tape, m: &crate::linalg::Matrix| -> Result<Var> {
        let c = tape.constant(m.clone());
        tape.matmul(c, o)
    };

    let embed = read(tape, &params.embed)?;
    let pos = read(tape, &params.pos)?;
    let mut layers = Vec::with_capacity(params.layers.len());
    for (l, layer) in params.layers.iter().enumerate() {
        let p_ff = align.p_ff[l];
        let p_ff_t = tape.transpose(p_ff);
        let p_h = align.p_h[l];
        let heads = layer.heads.len();
        if tape.value(p_h).dims() != (heads, heads) {
            return Err(Error::ShapeMismatch {
                op: "aligned_model",
                expected: format!("{heads}x{heads} head map"),
                got: format!("{:?}", tape.value(p_h).dims()),
            });
        }

        let norm_attn = TapeNorm {
            scale: tape.constant(layer.norm_attn.scale.clone()),
            offset: read(tape, &layer.norm_attn.offset)?,
        };

        // Source heads in the new residual basis, then each destination slot
        // as the P_H[i,j]-weighted sum over sources.
        let mut src_q = Vec::with_capacity(heads);
        let mut src_k = Vec::with_capacity(heads);
        let mut src_v = Vec::with_capacity(heads);
        let mut src_o = Vec::with_capacity(heads);
        for h in &layer.heads {
            src_q.push(read(tape, &h.w_q)?);
            src_k.push(read(tape, &h.w_k)?);
            src_v.push(read(tape, &h.w_v)?);
            let c = tape.constant(h.w_o.clone());
            src_o.push(tape.matmul(o_t, c)?);
        }
        let mut new_heads = Vec::with_capacity(heads);
        for i in 0..heads {
            let mut mixed: Option<TapeHead> = None;
            for j in 0..heads {
                let coef = tape.slice(p_h, i, i + 1, j, j + 1)?;
                let q = tape.scale_var(src_q[j], coef)?;
                let k = tape.scale_var(src_k[j], coef)?;
                let v = tape.scale_var(src_v[j], coef)?;
                let wo = tape.scale_var(src_o[j], coef)?;
                mixed = Some(match mixed {
                    None => TapeHead {
                        w_q: q,
                        w_k: k,
                        w_v: v,
                        w_o: wo,
                    },
                    Some(acc) => TapeHead {
                        w_q: tape.add(acc.w_q, q)?,
                        w_k: tape.add(acc.w_k, k)?,
                        w_v: tape.add(acc.w_v, v)?,
                        w_o: tape.add(acc.w_o, wo)?,
                    },
                });
            }
            new_heads.push(mixed.expect("at least one head"));
        }

        let norm_ffn = TapeNorm {
            scale: tape.constant(layer.norm_ffn.scale.clone()),
            offset: read(tape, &layer.norm_ffn.offset)?,
        };
        let w_1c = tape.constant(layer.w_1.clone());
        let w_1p = tape.matmul(p_ff, w_1c)?;
        let w_1 = tape.matmul(w_1p, o)?;
        let b_1c = tape.constant(layer.b_1.clone());
        let b_1 = tape.matmul(b_1c, p_ff_t)?;
        let w_2c = tape.constant(layer.w_2.clone());
        let w_2o = tape.matmul(o_t, w_2c)?;
        let w_2 = tape.matmul(w_2o, p_ff_t)?;
        let b_2 = read(tape, &layer.b_2)?;

        layers.push(TapeLayer {
            norm_attn,
            heads: new_heads,
            norm_ffn,
            w_1,
            b_1,
            w_2,
            b_2,
        });
    }
    let norm_final = TapeNorm {
        scale: tape.constant(params.norm_final.scale.clone()),
        offset: read(tape, &params.norm_final.offset)?,
    };
    let w_out = read(tape, &params.w_out)?;

    Ok(TapeModel {
        activation: params.config.activation,
        norm: params.config.norm,
        eps: params.config.eps,
        vocab: params.config.vocab,
        max_seq: params.config.max_seq,
        embed,
        pos,
        layers,
        norm_final,
        w_out,
    })
}

/// Convex combination `Σ wₘ·modelₘ` of structurally identical tape models
/// (the norm epsilon mixes with the same weights).
pub(crate) fn mix_models(
    tape: &mut Tape,
    models: &[&TapeModel],
    weights: &[f64],
) -> Result<TapeModel> {
    if models.is_empty() || models.len() != weights.len() {
        return Err(Error::EmptyInput {
            context: "mix_models: models and weights must be non-empty and match".into(),
        });
    }
    let first = models[0];
    for m in &models[1..] {
        if m.layers.len() != first.layers.len()
            || m.activation != first.activation
            || m.norm != first.norm
            || m.vocab != first.vocab
            || m.max_seq != first.max_seq
            || m
                .layers
                .iter()
                .zip(&first.layers)
                .any(|(x, y)| x.heads.len() != y.heads.len())
        {
            return Err(Error::ConfigMismatch {
                detail: "mix_models: models have different structure".into(),
            });
        }
    }

    let mix = |tape: &mut Tape, pick: &dyn Fn(&TapeModel) -> Var| -> Result<Var> {
        let mut acc = tape.scale(pick(models[0]), weights[0]);
        for (m, &w) in models[1..].iter().zip(&weights[1..]) {
            let term = tape.scale(pick(m), w);
            acc = tape.add(acc, term)?;
        }
        Ok(acc)
    };

    let embed = mix(tape, &|m| m.embed)?;
    let pos = mix(tape, &|m| m.pos)?;
    let mut layers = Vec::with_capacity(first.layers.len());
    for l in 0..first.layers.len() {
        let norm_attn = TapeNorm {
            scale: mix(tape, &|m| m.layers[l].norm_attn.scale)?,
            offset: mix(tape, &|m| m.layers[l].norm_attn.offset)?,
        };
        let mut heads = Vec::with_capacity(first.layers[l].heads.len());
        for h in 0..first.layers[l].heads.len() {
            heads.push(TapeHead {
                w_q: mix(tape, &|m| m.layers[l].heads[h].w_q)?,
                w_k: mix(tape, &|m| m.layers[l].heads[h].w_k)?,
                w_v: mix(tape, &|m| m.layers[l].heads[h].w_v)?,
                w_o: mix(tape, &|m| m.layers[l].heads[h].w_o)?,
            });
        }
        let norm_ffn = TapeNorm {
            scale: mix(tape, &|m| m.layers[l].norm_ffn.scale)?,
            offset: mix(tape, &|m| m.layers[l].norm_ffn.offset)?,
        };
        layers.push(TapeLayer {
            norm_attn,
            heads,
            norm_ffn,
            w_1: mix(tape, &|m| m.layers[l].w_1)?,
            b_1: mix(tape, &|m| m.layers[l].b_1)?,
            w_2: mix(tape, &|m| m.layers[l].w_2)?,
            b_2: mix(tape, &|m| m.layers[l].b_2)?,
        });
    }
    let norm_final = TapeNorm {
        scale: mix(tape, &|m| m.norm_final.scale)?,
        offset: mix(tape, &|m| m.norm_final.offset)?,
    };
    let w_out = mix(tape, &|m| m.w_out)?;
    let eps = models
        .iter()
        .zip(weights)
        .map(|(m, &w)| w * m.eps)
        .sum();

    Ok(TapeModel {
        activation: first.activation,
        norm: first.norm,
        eps,
        vocab: first.vocab,
        max_seq: first.max_seq,
        embed,
        pos,
        layers,
        norm_final,
        w_out,
    })
}
