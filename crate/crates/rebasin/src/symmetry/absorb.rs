//! LayerNorm-to-RMSNorm absorption.
//!
//! LayerNorm and RMSNorm differ only by mean-centering: with
//! `M = I - (1/D) 11^T`, `layernorm_core(x) = rmsnorm_core(M x)` exactly and
//! with the same epsilon, because the variance of `x` equals the mean square
//! of `M x`. Centering every residual write therefore turns every LayerNorm
//! into an RMSNorm without changing the function; the norms' affine scales
//! are then folded into the consuming weight matrices, leaving unit scales.

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::transformer::{NormKind, NormParams, TransformerParams};

/// What `absorb_layernorm` actually did.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AbsorbOutcome {
    /// LayerNorm model: centering and scales absorbed, now unit-scale RMSNorm.
    Absorbed,
    /// RMSNorm model with non-unit scales: scales folded, no centering needed.
    ScalesFolded,
    /// Already a unit-scale RMSNorm model: nothing to do.
    AlreadyAbsorbed,
}

/// Rewrites a model into unit-scale RMSNorm form, preserving the function:
///
/// 1. (LayerNorm only) every residual write — embedding and positional rows,
///    `W_o`, `W_2`, `b_2` — is mean-centered, which makes every LayerNorm
///    core equal an RMSNorm core on the new stream.
/// 2. Each norm's scale is folded into the maps reading it (`W_q/W_k/W_v`,
///    `W_1`, or `W_out`), and its offset is divided by the scale so the
///    consumer sees the same values. Near-zero scale entries are rejected,
///    since the offset update divides by them.
///
/// Returns the rewritten model and what was done. Idempotent: a second call
/// reports [`AbsorbOutcome::AlreadyAbsorbed`].
pub fn absorb_layernorm(params: &TransformerParams) -> Result<(TransformerParams, AbsorbOutcome)> {
    params.validate()?;
    let was_layernorm = params.config.norm == NormKind::LayerNorm;
    let mut out = params.clone();

    if was_layernorm {
        center_rows(&mut out.embed);
        center_rows(&mut out.pos);
        for layer in &mut out.layers {
            for head in &mut layer.heads {
                center_cols(&mut head.w_o);
            }
            center_cols(&mut layer.w_2);
            center_rows(&mut layer.b_2); // 1 x d_r row is a residual vector
        }
        out.config.norm = NormKind::RmsNorm;
    }

    let mut any_scale = false;
    for l in 0..out.layers.len() {
        let attn_scale = fold_norm(&mut out.layers[l].norm_attn)?;
        if let Some(scale) = attn_scale {
            any_scale = true;
            for head in &mut out.layers[l].heads {
                scale_read_cols(&mut head.w_q, &scale);
                scale_read_cols(&mut head.w_k, &scale);
                scale_read_cols(&mut head.w_v, &scale);
            }
        }
        let ffn_scale = fold_norm(&mut out.layers[l].norm_ffn)?;
        if let Some(scale) = ffn_scale {
            any_scale = true;
            scale_read_cols(&mut out.layers[l].w_1, &scale);
        }
    }
    if let Some(scale) = fold_norm(&mut out.norm_final)? {
        any_scale = true;
        scale_read_cols(&mut out.w_out, &scale);
    }

    let outcome = if was_layernorm {
        AbsorbOutcome::Absorbed
    } else if any_scale {
        AbsorbOutcome::ScalesFolded
    } else {
        AbsorbOutcome::AlreadyAbsorbed
    };
    out.validate()?;
    Ok((out, outcome))
}

/// Subtracts each row's mean (rows are residual vectors).
fn center_rows(m: &mut Matrix) {
    let (rows, cols) = m.dims();
    for i in 0..rows {
        let mean = m.row(i).iter().sum::<f64>() / cols as f64;
        for v in m.row_mut(i) {
            *v -= mean;
        }
    }
}

/// Subtracts each column's mean (columns are residual vectors).
fn center_cols(m: &mut Matrix) {
    let (rows, cols) = m.dims();
    for j in 0..cols {
        let mean = (0..rows).map(|i| m.get(i, j)).sum::<f64>() / rows as f64;
        for i in 0..rows {
            m.set(i, j, m.get(i, j) - mean);
        }
    }
}

/// If the norm's scale is not all ones, sets it to ones, rewrites the offset
/// as `offset / scale`, and returns the old scale for the caller to fold
/// into the consuming weights.
fn fold_norm(norm: &mut NormParams) -> Result<Option<Vec<f64>>> {
    let scale: Vec<f64> = norm.scale.data().to_vec();
    if scale.iter().all(|&g| g == 1.0) {
        return Ok(None);
    }
    if let Some((j, &g)) = scale.iter().enumerate().find(|(_, g)| g.abs() < 1e-12) {
        return Err(Error::DegenerateScale { index: j, value: g });
    }
    for (j, v) in norm.offset.data_mut().iter_mut().enumerate() {
        *v /= scale[j];
    }
    for v in norm.scale.data_mut() {
        *v = 1.0;
    }
    Ok(Some(scale))
}

/// `W <- W · diag(scale)`: folds a norm scale into a map reading the norm.
fn scale_read_cols(w: &mut Matrix, scale: &[f64]) {
    let (rows, cols) = w.dims();
    debug_assert_eq!(cols, scale.len());
    for i in 0..rows {
        for (j, &g) in scale.iter().enumerate().take(cols) {
            w.set(i, j, w.get(i, j) * g);
        }
    }
}
