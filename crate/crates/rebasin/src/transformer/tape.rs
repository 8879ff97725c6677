//! Transformer forward pass built on the autodiff tape.
//!
//! [`TapeModel`] mirrors [`TransformerParams`] with tape [`Var`]s. The weights
//! can be plain leaves (training) or derived nodes (alignment maps applied on
//! the tape), so gradient-based matching reuses the exact same forward graph
//! as training does.

use crate::autodiff::{CeTargets, Tape, Var};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

use super::{Activation, Batch, NormKind, TransformerParams};

#[derive(Debug, Clone, Copy)]
pub struct TapeNorm {
    pub scale: Var,
    pub offset: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct TapeHead {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
}

#[derive(Debug, Clone)]
pub struct TapeLayer {
    pub norm_attn: TapeNorm,
    pub heads: Vec<TapeHead>,
    pub norm_ffn: TapeNorm,
    pub w_1: Var,
    pub b_1: Var,
    pub w_2: Var,
    pub b_2: Var,
}

/// A transformer whose tensors are nodes on a tape.
#[derive(Debug, Clone)]
pub struct TapeModel {
    pub activation: Activation,
    pub norm: NormKind,
    pub eps: f64,
    pub vocab: usize,
    pub max_seq: usize,
    pub embed: Var,
    pub pos: Var,
    pub layers: Vec<TapeLayer>,
    pub norm_final: TapeNorm,
    pub w_out: Var,
}

impl TapeModel {
    /// Loads every tensor of `params` onto the tape, in the same order as
    /// [`TransformerParams::tensor_views`]. With `trainable` the tensors are
    /// gradient-requiring leaves; otherwise they are constants.
    pub fn from_params(tape: &mut Tape, params: &TransformerParams, trainable: bool) -> Self {
        let mut leaf = |m: &Matrix| {
            if trainable {
                tape.param(m.clone())
            } else {
                tape.constant(m.clone())
            }
        };
        let embed = leaf(&params.embed);
        let pos = leaf(&params.pos);
        let mut layers = Vec::with_capacity(params.layers.len());
        for layer in &params.layers {
            let norm_attn = TapeNorm {
                scale: leaf(&layer.norm_attn.scale),
                offset: leaf(&layer.norm_attn.offset),
            };
            let heads = layer
                .heads
                .iter()
                .map(|h| TapeHead {
                    w_q: leaf(&h.w_q),
                    w_k: leaf(&h.w_k),
                    w_v: leaf(&h.w_v),
                    w_o: leaf(&h.w_o),
                })
                .collect();
            let norm_ffn = TapeNorm {
                scale: leaf(&layer.norm_ffn.scale),
                offset: leaf(&layer.norm_ffn.offset),
            };
            layers.push(TapeLayer {
                norm_attn,
                heads,
                norm_ffn,
                w_1: leaf(&layer.w_1),
                b_1: leaf(&layer.b_1),
                w_2: leaf(&layer.w_2),
                b_2: leaf(&layer.b_2),
            });
        }
        let norm_final = TapeNorm {
            scale: leaf(&params.norm_final.scale),
            offset: leaf(&params.norm_final.offset),
        };
        let w_out = leaf(&params.w_out);
        Self {
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
        }
    }

    /// Tensor vars in [`TransformerParams::tensor_views`] order, for pairing
    /// gradients with parameters.
    pub fn vars(&self) -> Vec<Var> {
        let mut out = vec![self.embed, self.pos];
        for layer in &self.layers {
            out.push(layer.norm_attn.scale);
            out.push(layer.norm_attn.offset);
            for head in &layer.heads {
                out.push(head.w_q);
                out.push(head.w_k);
                out.push(head.w_v);
                out.push(head.w_o);
            }
            out.push(layer.norm_ffn.scale);
            out.push(layer.norm_ffn.offset);
            out.push(layer.w_1);
            out.push(layer.b_1);
            out.push(layer.w_2);
            out.push(layer.b_2);
        }
        out.push(self.norm_final.scale);
        out.push(self.norm_final.offset);
        out.push(self.w_out);
        out
    }

    fn apply_norm(&self, tape: &mut Tape, norm: TapeNorm, x: Var) -> Result<Var> {
        let core = match self.norm {
            NormKind::LayerNorm => tape.layernorm_core(x, self.eps),
            NormKind::RmsNorm => tape.rmsnorm_core(x, self.eps),
        };
        let scaled = tape.mul_row(core, norm.scale)?;
        tape.add_row(scaled, norm.offset)
    }

    /// Builds the forward graph for one sequence; returns `T x vocab` logits.
    pub fn logits(&self, tape: &mut Tape, tokens: &[usize]) -> Result<Var> {
        let t = tokens.len();
        if t == 0 {
            return Err(Error::EmptyInput {
                context: "TapeModel::logits: empty sequence".into(),
            });
        }
        if t > self.max_seq {
            return Err(Error::ConfigMismatch {
                detail: format!("sequence length {t} exceeds max_seq {}", self.max_seq),
            });
        }
        let tok_rows = tape.gather_rows(self.embed, tokens.to_vec())?;
        let pos_rows = tape.gather_rows(self.pos, (0..t).collect())?;
        let mut h = tape.add(tok_rows, pos_rows)?;

        let causal = tape.constant(Matrix::from_fn(t, t, |i, j| {
            if j <= i {
                0.0
            } else {
                -1e30
            }
        }));

        for layer in &self.layers {
            let z = self.apply_norm(tape, layer.norm_attn, h)?;
            let d_k = tape.value(layer.heads[0].w_q).rows();
            let scale = 1.0 / (d_k as f64).sqrt();
            let mut attn_out: Option<Var> = None;
            for head in &layer.heads {
                let wq_t = tape.transpose(head.w_q);
                let wk_t = tape.transpose(head.w_k);
                let wv_t = tape.transpose(head.w_v);
                let q = tape.matmul(z, wq_t)?;
                let k = tape.matmul(z, wk_t)?;
                let v = tape.matmul(z, wv_t)?;
                let k_t = tape.transpose(k);
                let scores = tape.matmul(q, k_t)?;
                let scores = tape.scale(scores, scale);
                let masked = tape.add(scores, causal)?;
                let a = tape.row_softmax(masked);
                let ctx = tape.matmul(a, v)?;
                let wo_t = tape.transpose(head.w_o);
                let proj = tape.matmul(ctx, wo_t)?;
                attn_out = Some(match attn_out {
                    Some(acc) => tape.add(acc, proj)?,
                    None => proj,
                });
            }
            h = tape.add(h, attn_out.expect("at least one head"))?;

            let z2 = self.apply_norm(tape, layer.norm_ffn, h)?;
            let w1_t = tape.transpose(layer.w_1);
            let pre = tape.matmul(z2, w1_t)?;
            let pre = tape.add_row(pre, layer.b_1)?;
            let hidden = match self.activation {
                Activation::Relu => tape.relu(pre),
                Activation::Gelu => tape.gelu(pre),
            };
            let w2_t = tape.transpose(layer.w_2);
            let ffn = tape.matmul(hidden, w2_t)?;
            let ffn = tape.add_row(ffn, layer.b_2)?;
            h = tape.add(h, ffn)?;
        }

        let normed = self.apply_norm(tape, self.norm_final, h)?;
        let wout_t = tape.transpose(self.w_out);
        tape.matmul(normed, wout_t)
    }

    /// Masked mean cross-entropy over a whole batch as a single scalar node.
    pub fn batch_loss(&self, tape: &mut Tape, batch: &Batch) -> Result<Var> {
        let mut parts = Vec::with_capacity(batch.len());
        let mut ids = Vec::new();
        let mut weights = Vec::new();
        for (s, tokens) in batch.tokens.iter().enumerate() {
            parts.push(self.logits(tape, tokens)?);
            for (j, &target) in batch.targets[s].iter().enumerate() {
                ids.push(target);
                weights.push(batch.weight(s, j));
            }
        }
        let all_logits = tape.concat_rows(&parts)?;
        tape.cross_entropy(all_logits, CeTargets { ids, weights })
    }
}
