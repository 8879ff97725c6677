//! Learned matching: gradient descent on the task loss of the interpolated
//! model, with straight-through projections onto the symmetry manifolds.
//!
//! Each step projects the unconstrained latents onto hard permutations
//! (linear assignment) and an orthogonal matrix (polar factor), evaluates the
//! cross-entropy of `λ·θ_A + (1−λ)·align(θ_B)` at a freshly sampled λ on the
//! next batch, and applies the gradients taken at the projected point to the
//! latents (a straight-through estimator), using Adam.

use crate::autodiff::{Adam, Tape};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng;
use crate::symmetry::{AlignmentMaps, LayerMaps, OrthogonalMap};
use crate::transformer::{Batch, TapeModel, TransformerParams};

use super::{
    aligned_model, check_same_arch, mix_models, project_orthogonal, project_permutation,
    weight_match, AlignVars, InitStrategy, LatentAlignment, MatchConfig,
};

/// Concrete alignment tensors in dense matrix form: the residual map and the
/// per-layer FFN and head mixing matrices. Projected permutations for the
/// hard matcher, doubly-stochastic matrices for the soft one.
#[derive(Debug, Clone)]
pub struct AlignTensors {
    pub o: Matrix,
    pub p_ff: Vec<Matrix>,
    pub p_h: Vec<Matrix>,
}

#[derive(Debug, Clone)]
pub struct LearnedMatchReport {
    pub maps: AlignmentMaps,
    /// Interpolated-model loss at each step (before that step's update).
    pub losses: Vec<f64>,
    /// Step whose maps were selected (0 means the initialization won).
    pub selected_step: usize,
    /// Worst interpolation loss over the alignment batches for the selected
    /// maps, taken across a few interior mixing weights.
    pub selected_loss: f64,
}

fn objective_tape(
    a: &TransformerParams,
    b: &TransformerParams,
    tensors: &AlignTensors,
    lambda: f64,
    batch: &Batch,
) -> Result<(Tape, crate::autodiff::Var, AlignVars)> {
    let mut tape = Tape::new();
    let vars = AlignVars {
        o: tape.param(tensors.o.clone()),
        p_ff: tensors.p_ff.iter().map(|m| tape.param(m.clone())).collect(),
        p_h: tensors.p_h.iter().map(|m| tape.param(m.clone())).collect(),
    };
    let aligned_b = aligned_model(&mut tape, b, &vars)?;
    let model_a = TapeModel::from_params(&mut tape, a, false);
    let interp = mix_models(&mut tape, &[&model_a, &aligned_b], &[lambda, 1.0 - lambda])?;
    let loss = interp.batch_loss(&mut tape, batch)?;
    Ok((tape, loss, vars))
}

/// The learned matcher's objective at one λ: cross-entropy of
/// `λ·θ_A + (1−λ)·align(θ_B; tensors)` on `batch`.
pub fn alignment_objective(
    a: &TransformerParams,
    b: &TransformerParams,
    tensors: &AlignTensors,
    lambda: f64,
    batch: &Batch,
) -> Result<f64> {
    check_same_arch(a, b, "alignment_objective")?;
    let (tape, loss, _) = objective_tape(a, b, tensors, lambda, batch)?;
    Ok(tape.value(loss).get(0, 0))
}

/// As [`alignment_objective`], also returning the gradient with respect to
/// every alignment tensor.
pub fn alignment_objective_grads(
    a: &TransformerParams,
    b: &TransformerParams,
    tensors: &AlignTensors,
    lambda: f64,
    batch: &Batch,
) -> Result<(f64, AlignTensors)> {
    check_same_arch(a, b, "alignment_objective")?;
    let (tape, loss, vars) = objective_tape(a, b, tensors, lambda, batch)?;
    let value = tape.value(loss).get(0, 0);
    let grads = tape.backward(loss)?;
    let zero_like = |m: &Matrix| Matrix::zeros(m.rows(), m.cols());
    let grad = AlignTensors {
        o: grads.get(vars.o).cloned().unwrap_or_else(|| zero_like(&tensors.o)),
        p_ff: vars
            .p_ff
            .iter()
            .zip(&tensors.p_ff)
            .map(|(v, m)| grads.get(*v).cloned().unwrap_or_else(|| zero_like(m)))
            .collect(),
        p_h: vars
            .p_h
            .iter()
            .zip(&tensors.p_h)
            .map(|(v, m)| grads.get(*v).cloned().unwrap_or_else(|| zero_like(m)))
            .collect(),
    };
    Ok((value, grad))
}

/// Dense latent tensors sitting exactly on an existing hard alignment.
pub(crate) fn latents_from_maps(maps: &AlignmentMaps) -> LatentAlignment {
    LatentAlignment {
        z_ff: maps.layers.iter().map(|l| l.p_ff.to_matrix()).collect(),
        z_h: maps.layers.iter().map(|l| l.p_h.to_matrix()).collect(),
        z_o: maps.o.matrix().clone(),
    }
}

/// Initial latents per the configured strategy, in the shapes of `a`.
fn init_latents(
    a: &TransformerParams,
    b: &TransformerParams,
    config: &MatchConfig,
) -> Result<LatentAlignment> {
    match config.init {
        InitStrategy::WeightMatching => {
            let wm = weight_match(a, b, config)?;
            Ok(latents_from_maps(&wm.maps))
        }
        InitStrategy::Identity => Ok(LatentAlignment {
            z_ff: a.layers.iter().map(|l| Matrix::identity(l.d_h())).collect(),
            z_h: a
                .layers
                .iter()
                .map(|l| Matrix::identity(l.heads.len()))
                .collect(),
            z_o: Matrix::identity(a.config.d_r),
        }),
        InitStrategy::Random => {
            let mut r = rng::seeded(config.seed ^ 0x1a7e_17a1);
            let g = |r: &mut _, n: usize| rng::normal_matrix(r, n, n, 1.0 / (n as f64).sqrt());
            Ok(LatentAlignment {
                z_ff: a.layers.iter().map(|l| g(&mut r, l.d_h())).collect(),
                z_h: a.layers.iter().map(|l| g(&mut r, l.heads.len())).collect(),
                z_o: g(&mut r, a.config.d_r),
            })
        }
    }
}

pub(crate) fn project_latents(latent: &LatentAlignment) -> Result<AlignTensors> {
    Ok(AlignTensors {
        o: project_orthogonal(&latent.z_o)?,
        p_ff: latent
            .z_ff
            .iter()
            .map(|z| Ok(project_permutation(z)?.to_matrix()))
            .collect::<Result<_>>()?,
        p_h: latent
            .z_h
            .iter()
            .map(|z| Ok(project_permutation(z)?.to_matrix()))
            .collect::<Result<_>>()?,
    })
}

pub(crate) fn maps_from_latents(latent: &LatentAlignment) -> Result<AlignmentMaps> {
    let layers = latent
        .z_ff
        .iter()
        .zip(&latent.z_h)
        .map(|(z_ff, z_h)| {
            Ok(LayerMaps {
                p_h: project_permutation(z_h)?.to_semi(),
                p_ff: project_permutation(z_ff)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AlignmentMaps {
        o: OrthogonalMap::new(project_orthogonal(&latent.z_o)?)?,
        layers,
    })
}

/// How often the candidate maps are scored for iterate selection.
const SELECT_EVERY: usize = 25;

/// Worst interpolation loss of `a` against `b` aligned by `maps` over a few
/// interior mixing weights, computed on all batches. This is the selection
/// score for the returned iterate; scoring several weights keeps iterates
/// that are good at the midpoint but poor on the shoulders from winning.
fn interp_score(
    a: &TransformerParams,
    b: &TransformerParams,
    maps: &AlignmentMaps,
    data: &[Batch],
) -> Result<f64> {
    let aligned = crate::symmetry::apply_alignment(b, maps)?;
    let mut worst = f64::NEG_INFINITY;
    for lambda in [0.25, 0.5, 0.75] {
        let point = crate::barrier::interpolate(a, &aligned, lambda)?;
        worst = worst.max(crate::barrier::eval_dataset(&point, data)?.loss);
    }
    Ok(worst)
}

/// Gradient-based matching of `θ_B` onto `θ_A`; returns the projected maps
/// and the per-step loss trace.
///
/// The latent iterates oscillate: a permutation entry flipping under the
/// straight-through update can move the objective a lot, so the last iterate
/// is not reliably the best one. Every few steps the current hard maps are
/// scored by their worst interpolation loss over `data`, and the best-scoring maps
/// are the ones returned.
pub fn learned_match(
    a: &TransformerParams,
    b: &TransformerParams,
    data: &[Batch],
    config: &MatchConfig,
) -> Result<LearnedMatchReport> {
    config.validate()?;
    check_same_arch(a, b, "learned_match")?;
    if data.is_empty() {
        return Err(Error::EmptyInput {
            context: "learned_match: no batches".into(),
        });
    }

    let mut latent = init_latents(a, b, config)?;
    let mut r = rng::seeded(config.seed ^ 0x5a3b_da11);
    let mut adam = Adam::new(config.lr);
    let mut losses = Vec::with_capacity(config.learn_iterations);
    let mut best = maps_from_latents(&latent)?;
    let mut best_score = interp_score(a, b, &best, data)?;
    let mut selected_step = 0;

    for step in 0..config.learn_iterations {
        let tensors = project_latents(&latent)?;
        let lambda = config.lambda_sampler.sample(&mut r);
        let batch = &data[step % data.len()];
        // Antithetic pair: averaging the objective at λ and 1−λ applies equal
        // pressure to both sides of the path, so neither shoulder is starved
        // of gradient when the sampler happens to favour one side.
        let (loss, grad) = if (lambda - 0.5).abs() < 1e-12 {
            alignment_objective_grads(a, b, &tensors, lambda, batch)?
        } else {
            let (l1, g1) = alignment_objective_grads(a, b, &tensors, lambda, batch)?;
            let (l2, g2) = alignment_objective_grads(a, b, &tensors, 1.0 - lambda, batch)?;
            let half = |x: &Matrix, y: &Matrix| -> Result<Matrix> {
                Ok(x.add(y)?.scaled(0.5))
            };
            let o = half(&g1.o, &g2.o)?;
            let p_ff = g1
                .p_ff
                .iter()
                .zip(&g2.p_ff)
                .map(|(x, y)| half(x, y))
                .collect::<Result<Vec<_>>>()?;
            let p_h = g1
                .p_h
                .iter()
                .zip(&g2.p_h)
                .map(|(x, y)| half(x, y))
                .collect::<Result<Vec<_>>>()?;
            (0.5 * (l1 + l2), AlignTensors { o, p_ff, p_h })
        };
        if !loss.is_finite() {
            return Err(Error::TrainingDiverged { step, loss });
        }
        losses.push(loss);

        let LatentAlignment { z_ff, z_h, z_o } = &mut latent;
        let mut params: Vec<&mut Matrix> = vec![z_o];
        params.extend(z_ff.iter_mut());
        params.extend(z_h.iter_mut());
        let mut grads: Vec<Option<&Matrix>> = vec![Some(&grad.o)];
        grads.extend(grad.p_ff.iter().map(Some));
        grads.extend(grad.p_h.iter().map(Some));
        adam.step(&mut params, &grads)?;

        if (step + 1) % SELECT_EVERY == 0 || step + 1 == config.learn_iterations {
            let candidate = maps_from_latents(&latent)?;
            let score = interp_score(a, b, &candidate, data)?;
            if score < best_score {
                best_score = score;
                best = candidate;
                selected_step = step + 1;
            }
        }
    }

    Ok(LearnedMatchReport {
        maps: best,
        losses,
        selected_step,
        selected_loss: best_score,
    })
}
