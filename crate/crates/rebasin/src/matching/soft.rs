//! Soft matching: doubly-stochastic permutation relaxations learned end to
//! end.
//!
//! The per-layer mixing matrices are parameterized as
//! `P_l = Sinkhorn(exp(Z_l))`, which keeps them strictly inside the Birkhoff
//! polytope and makes the whole chain differentiable — gradients reach the
//! latents directly, with no straight-through step. The residual map `O`
//! stays fixed at its initial value; the relaxation concerns the
//! permutations. Because a doubly-stochastic matrix is generally not a
//! permutation, applying the soft maps is *not* function-preserving: the
//! deviation at the endpoint is measured and reported rather than assumed
//! away.

use crate::autodiff::{Adam, Tape, Var};
use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::rng;
use crate::symmetry::{AlignmentMaps, LayerMaps, OrthogonalMap};
use crate::transformer::{Batch, HeadParams, LayerParams, NormParams, TapeModel, TransformerParams};

use super::{
    aligned_model, check_same_arch, mix_models, project_permutation, weight_match, AlignVars,
    InitStrategy, MatchConfig,
};

/// Dense doubly-stochastic mixing matrices plus the fixed residual map.
#[derive(Debug, Clone)]
pub struct SoftMaps {
    pub p_ff: Vec<Matrix>,
    pub p_h: Vec<Matrix>,
    pub o: Matrix,
}

#[derive(Debug, Clone)]
pub struct SoftMatchReport {
    pub soft: SoftMaps,
    /// Hungarian rounding of the soft maps, for use where hard permutations
    /// are required.
    pub hard: AlignmentMaps,
    /// Interpolated-model loss at each step (before that step's update).
    pub losses: Vec<f64>,
    /// Largest |logit| deviation of the soft-aligned model from the original
    /// over the probe data — expected to exceed the exact-equivalence
    /// tolerance, since soft maps are not symmetries.
    pub endpoint_gap: f64,
}

/// Strictly positive offset added to the initial mixing matrices so their
/// elementwise logarithm exists even at exact permutations.
const FLOOR: f64 = 1e-9;

/// Applies soft maps to a model's parameters, densely. Mirrors the tape
/// construction used during matching: residual rows right-multiply by `O`,
/// FFN tensors mix through `P_FF`, and each destination head is the
/// `P_H[i,j]`-weighted sum of the transformed source heads.
pub fn soft_apply(params: &TransformerParams, maps: &SoftMaps) -> Result<TransformerParams> {
    if maps.p_ff.len() != params.layers.len() || maps.p_h.len() != params.layers.len() {
        return Err(Error::ConfigMismatch {
            detail: format!(
                "soft maps have {} layers, model has {}",
                maps.p_ff.len(),
                params.layers.len()
            ),
        });
    }
    let o = &maps.o;
    let read = |m: &Matrix| m.matmul(o);

    let mut layers = Vec::with_capacity(params.layers.len());
    for (l, layer) in params.layers.iter().enumerate() {
        let p_ff = &maps.p_ff[l];
        let p_h = &maps.p_h[l];
        let heads = layer.heads.len();
        if p_h.dims() != (heads, heads) {
            return Err(Error::ShapeMismatch {
                op: "soft_apply",
                expected: format!("{heads}x{heads} head map"),
                got: format!("{:?}", p_h.dims()),
            });
        }
        if p_ff.dims() != (layer.d_h(), layer.d_h()) {
            return Err(Error::ShapeMismatch {
                op: "soft_apply",
                expected: format!("{0}x{0} FFN map", layer.d_h()),
                got: format!("{:?}", p_ff.dims()),
            });
        }

        let src: Vec<HeadParams> = layer
            .heads
            .iter()
            .map(|h| {
                Ok(HeadParams {
                    w_q: read(&h.w_q)?,
                    w_k: read(&h.w_k)?,
                    w_v: read(&h.w_v)?,
                    w_o: o.matmul_transa(&h.w_o)?,
                })
            })
            .collect::<Result<_>>()?;
        let mut new_heads = Vec::with_capacity(heads);
        for i in 0..heads {
            let mut acc: Option<HeadParams> = None;
            for (j, s) in src.iter().enumerate() {
                let c = p_h.get(i, j);
                let term = HeadParams {
                    w_q: s.w_q.scaled(c),
                    w_k: s.w_k.scaled(c),
                    w_v: s.w_v.scaled(c),
                    w_o: s.w_o.scaled(c),
                };
                acc = Some(match acc {
                    None => term,
                    Some(a) => HeadParams {
                        w_q: a.w_q.add(&term.w_q)?,
                        w_k: a.w_k.add(&term.w_k)?,
                        w_v: a.w_v.add(&term.w_v)?,
                        w_o: a.w_o.add(&term.w_o)?,
                    },
                });
            }
            new_heads.push(acc.expect("at least one head"));
        }

        layers.push(LayerParams {
            norm_attn: NormParams {
                scale: layer.norm_attn.scale.clone(),
                offset: read(&layer.norm_attn.offset)?,
            },
            heads: new_heads,
            norm_ffn: NormParams {
                scale: layer.norm_ffn.scale.clone(),
                offset: read(&layer.norm_ffn.offset)?,
            },
            w_1: p_ff.matmul(&layer.w_1)?.matmul(o)?,
            b_1: layer.b_1.matmul(&p_ff.transpose())?,
            w_2: o.matmul_transa(&layer.w_2)?.matmul(&p_ff.transpose())?,
            b_2: read(&layer.b_2)?,
        });
    }

    Ok(TransformerParams {
        config: params.config.clone(),
        embed: read(&params.embed)?,
        pos: read(&params.pos)?,
        layers,
        norm_final: NormParams {
            scale: params.norm_final.scale.clone(),
            offset: read(&params.norm_final.offset)?,
        },
        w_out: read(&params.w_out)?,
    })
}

/// Initial hard tensors per the configured strategy.
fn init_tensors(
    a: &TransformerParams,
    b: &TransformerParams,
    config: &MatchConfig,
) -> Result<(Matrix, Vec<Matrix>, Vec<Matrix>)> {
    match config.init {
        InitStrategy::WeightMatching => {
            let wm = weight_match(a, b, config)?;
            Ok((
                wm.maps.o.matrix().clone(),
                wm.maps.layers.iter().map(|l| l.p_ff.to_matrix()).collect(),
                wm.maps.layers.iter().map(|l| l.p_h.to_matrix()).collect(),
            ))
        }
        InitStrategy::Identity => Ok((
            Matrix::identity(a.config.d_r),
            a.layers.iter().map(|l| Matrix::identity(l.d_h())).collect(),
            a.layers
                .iter()
                .map(|l| Matrix::identity(l.heads.len()))
                .collect(),
        )),
        InitStrategy::Random => {
            let mut r = rng::seeded(config.seed ^ 0x50f7_1217);
            let perm = |r: &mut _, n: usize| {
                crate::symmetry::Permutation::random(r, n).to_matrix()
            };
            let p_ff = a.layers.iter().map(|l| perm(&mut r, l.d_h())).collect();
            let p_h = a
                .layers
                .iter()
                .map(|l| perm(&mut r, l.heads.len()))
                .collect();
            Ok((rng::random_orthogonal(&mut r, a.config.d_r)?, p_ff, p_h))
        }
    }
}

/// `Z⁰ = ln(P⁰ + U(0, 2a) + floor)` with Xavier-scaled noise `a = ε·σ·√3`.
fn latent_from_init(p: &Matrix, noise: f64, r: &mut rand_chacha::ChaCha20Rng) -> Matrix {
    let n = p.rows();
    let sigma = (2.0 / (2.0 * n as f64)).sqrt();
    let a = noise * sigma * 3f64.sqrt();
    let u = if a > 0.0 {
        rng::uniform_matrix(r, n, n, 0.0, 2.0 * a)
    } else {
        Matrix::zeros(n, n)
    };
    Matrix::from_fn(n, n, |i, j| (p.get(i, j) + u.get(i, j) + FLOOR).ln())
}

/// On-tape Sinkhorn: `exp`, then alternating row/column normalization.
fn sinkhorn_var(tape: &mut Tape, z: Var, iterations: usize) -> Var {
    let mut e = tape.exp(z);
    for _ in 0..iterations {
        e = tape.row_normalize(e);
        e = tape.col_normalize(e);
    }
    e
}

/// Learns doubly-stochastic mixing matrices by direct gradient descent
/// through Sinkhorn normalization.
pub fn soft_learned_match(
    a: &TransformerParams,
    b: &TransformerParams,
    data: &[Batch],
    config: &MatchConfig,
) -> Result<SoftMatchReport> {
    config.validate()?;
    check_same_arch(a, b, "soft_learned_match")?;
    if data.is_empty() {
        return Err(Error::EmptyInput {
            context: "soft_learned_match: no batches".into(),
        });
    }

    let (o, p_ff_init, p_h_init) = init_tensors(a, b, config)?;
    let mut r = rng::seeded(config.seed ^ 0x50f7_ab1e);
    let mut z_ff: Vec<Matrix> = p_ff_init
        .iter()
        .map(|p| latent_from_init(p, config.noise, &mut r))
        .collect();
    let mut z_h: Vec<Matrix> = p_h_init
        .iter()
        .map(|p| latent_from_init(p, config.noise, &mut r))
        .collect();

    let mut adam = Adam::new(config.lr);
    let mut losses = Vec::with_capacity(config.learn_iterations);

    for step in 0..config.learn_iterations {
        let lambda = config.lambda_sampler.sample(&mut r);
        let batch = &data[step % data.len()];

        let mut tape = Tape::new();
        let z_ff_vars: Vec<Var> = z_ff.iter().map(|z| tape.param(z.clone())).collect();
        let z_h_vars: Vec<Var> = z_h.iter().map(|z| tape.param(z.clone())).collect();
        let vars = AlignVars {
            o: tape.constant(o.clone()),
            p_ff: z_ff_vars
                .iter()
                .map(|&z| sinkhorn_var(&mut tape, z, config.sinkhorn_iters))
                .collect(),
            p_h: z_h_vars
                .iter()
                .map(|&z| sinkhorn_var(&mut tape, z, config.sinkhorn_iters))
                .collect(),
        };
        let aligned_b = aligned_model(&mut tape, b, &vars)?;
        let model_a = TapeModel::from_params(&mut tape, a, false);
        let interp = mix_models(&mut tape, &[&model_a, &aligned_b], &[lambda, 1.0 - lambda])?;
        let loss = interp.batch_loss(&mut tape, batch)?;
        let loss_val = tape.value(loss).get(0, 0);
        if !loss_val.is_finite() {
            return Err(Error::TrainingDiverged {
                step,
                loss: loss_val,
            });
        }
        losses.push(loss_val);

        let grads = tape.backward(loss)?;
        let grad_refs: Vec<Option<&Matrix>> = z_ff_vars
            .iter()
            .chain(&z_h_vars)
            .map(|&v| grads.get(v))
            .collect();
        let mut params: Vec<&mut Matrix> = z_ff.iter_mut().chain(z_h.iter_mut()).collect();
        adam.step(&mut params, &grad_refs)?;
    }

    let finish = |z: &Matrix| -> Result<Matrix> {
        let e = z.map(f64::exp);
        Ok(linalg::sinkhorn_normalize(&e, config.sinkhorn_iters)?.matrix)
    };
    let soft = SoftMaps {
        p_ff: z_ff.iter().map(|z| finish(z)).collect::<Result<_>>()?,
        p_h: z_h.iter().map(|z| finish(z)).collect::<Result<_>>()?,
        o: o.clone(),
    };

    let layers = soft
        .p_ff
        .iter()
        .zip(&soft.p_h)
        .map(|(ff, h)| {
            Ok(LayerMaps {
                p_h: project_permutation(h)?.to_semi(),
                p_ff: project_permutation(ff)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let hard = AlignmentMaps {
        o: OrthogonalMap::new(o)?,
        layers,
    };

    let applied = soft_apply(b, &soft)?;
    let mut endpoint_gap = 0.0f64;
    for batch in data {
        for tokens in &batch.tokens {
            let gap = applied
                .forward(tokens)?
                .max_abs_diff(&b.forward(tokens)?);
            endpoint_gap = endpoint_gap.max(gap);
        }
    }

    Ok(SoftMatchReport {
        soft,
        hard,
        losses,
        endpoint_gap,
    })
}
