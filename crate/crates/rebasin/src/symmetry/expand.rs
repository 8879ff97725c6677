//! Width expansion via rectangular orthogonal maps.

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::transformer::TransformerParams;

use super::apply::require_absorbed;
use super::OrthogonalMap;

/// Embeds a width-`N` model into a width-`M >= N` residual stream using a
/// rectangular orthogonal map `O` (M x N, orthonormal columns).
///
/// Residual vectors map as `v -> O v`, which preserves norms but spreads
/// them over `M` coordinates, so the mean square shrinks by `N/M`. With
/// `c = sqrt(N/M)` and the norm epsilon rescaled to `(N/M) eps`, the RMSNorm
/// core output of the expanded stream is exactly `O core / c`; reads are
/// therefore composed as `W -> c W O^T`, writes as `W -> O W`, and norm
/// offsets as `t -> (1/c) O t`. The result is functionally equivalent with
/// residual width `M`. A square `O` coincides with `apply_alignment` using
/// the residual map `O^T`.
pub fn expand_width(params: &TransformerParams, o_rect: &OrthogonalMap) -> Result<TransformerParams> {
    params.validate()?;
    require_absorbed(params, "expand_width")?;
    let o = o_rect.matrix();
    let (m, n) = o.dims();
    if n != params.config.d_r {
        return Err(Error::ShapeMismatch {
            op: "expand_width",
            expected: format!("{} columns (model width)", params.config.d_r),
            got: format!("{n}"),
        });
    }
    // OrthogonalMap already guarantees m >= n.
    let c = (n as f64 / m as f64).sqrt();

    // Row-stacked forms: reads W -> c W O^T; writes (rows r -> r O^T);
    // norm offsets (1/c) r O^T.
    let read = |w: &Matrix| -> Result<Matrix> { Ok(w.matmul_transb(o)?.scaled(c)) };
    let write_rows = |w: &Matrix| w.matmul_transb(o);
    let offset_row = |w: &Matrix| -> Result<Matrix> { Ok(w.matmul_transb(o)?.scaled(1.0 / c)) };
    let write_cols = |w: &Matrix| o.matmul(w); // columns are residual vectors

    let mut out = params.clone();
    out.config.d_r = m;
    out.config.eps = params.config.eps * (n as f64 / m as f64);
    out.embed = write_rows(&params.embed)?;
    out.pos = write_rows(&params.pos)?;
    for (layer_out, layer) in out.layers.iter_mut().zip(&params.layers) {
        layer_out.norm_attn.scale = ones(m);
        layer_out.norm_attn.offset = offset_row(&layer.norm_attn.offset)?;
        for (head_out, head) in layer_out.heads.iter_mut().zip(&layer.heads) {
            head_out.w_q = read(&head.w_q)?;
            head_out.w_k = read(&head.w_k)?;
            head_out.w_v = read(&head.w_v)?;
            head_out.w_o = write_cols(&head.w_o)?;
        }
        layer_out.norm_ffn.scale = ones(m);
        layer_out.norm_ffn.offset = offset_row(&layer.norm_ffn.offset)?;
        layer_out.w_1 = read(&layer.w_1)?;
        layer_out.w_2 = write_cols(&layer.w_2)?;
        layer_out.b_2 = write_rows(&layer.b_2)?;
    }
    out.norm_final.scale = ones(m);
    out.norm_final.offset = offset_row(&params.norm_final.offset)?;
    out.w_out = read(&params.w_out)?;
    out.validate()?;
    Ok(out)
}

fn ones(n: usize) -> Matrix {
    Matrix::from_fn(1, n, |_, _| 1.0)
}
