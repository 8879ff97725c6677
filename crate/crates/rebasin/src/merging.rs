//! Multi-model alignment. A shared anchor ("universe") is matched against
//! every model in turn; each round re-aligns all models to the current anchor
//! and replaces it with their average. A second stage refines all alignment
//! latents jointly by gradient descent on Dirichlet-sampled mixtures, so the
//! whole interior of the model simplex is pulled toward the linear baseline
//! rather than any single pair.

use crate::autodiff::{Adam, Tape};
use crate::barrier::{eval_dataset, mixture, multi_barrier, SimplexMode};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::matching::{
    activation_match, aligned_model, check_same_arch, latents_from_maps, maps_from_latents,
    mix_models, project_latents, weight_match, AlignVars, LatentAlignment, MatchConfig,
    MatchMethod,
};
use crate::rng;
use crate::symmetry::{apply_alignment, require_absorbed, AlignmentMaps};
use crate::transformer::{Batch, TapeModel, TransformerParams};

/// Universe-matching configuration.
#[derive(Debug, Clone)]
pub struct MergeConfig {
    /// Universe-matching rounds (each round re-aligns every model).
    pub iterations: usize,
    /// Index of the model that seeds the anchor.
    pub seed_index: usize,
    /// Inner matcher settings; `method` must be data-free (`weight`) or
    /// probe-based (`activation`).
    pub match_config: MatchConfig,
}

impl Default for MergeConfig {
    fn default() -> Self {
        Self {
            iterations: 3,
            seed_index: 0,
            match_config: MatchConfig::default(),
        }
    }
}

/// A shared anchor model plus the per-model maps that align onto it.
#[derive(Debug, Clone)]
pub struct Universe {
    /// The merged anchor: the average of the aligned models.
    pub u: TransformerParams,
    /// `maps[m]` aligns model `m` onto the anchor.
    pub maps: Vec<AlignmentMaps>,
    /// Universe-matching rounds that produced the maps.
    pub iterations: usize,
    /// Multi-model barrier of the aligned set after each round, when probe
    /// batches were supplied (logged, not asserted: the loop runs a fixed
    /// number of rounds).
    pub multi_barriers: Vec<f64>,
    /// Refinement objective per step: mixture loss minus the λ-weighted
    /// endpoint losses. Empty until [`learned_refine`] runs.
    pub objective: Vec<f64>,
}

impl Universe {
    /// Applies the per-model maps, yielding the aligned set the anchor
    /// averages over.
    pub fn aligned(&self, models: &[&TransformerParams]) -> Result<Vec<TransformerParams>> {
        if models.len() != self.maps.len() {
            return Err(Error::ConfigMismatch {
                detail: format!(
                    "universe holds {} maps but {} models were given",
                    self.maps.len(),
                    models.len()
                ),
            });
        }
        models
            .iter()
            .zip(&self.maps)
            .map(|(m, p)| apply_alignment(m, p))
            .collect()
    }
}

fn check_models(models: &[&TransformerParams], op: &'static str) -> Result<()> {
    if models.len() < 2 {
        return Err(Error::EmptyInput {
            context: format!("{op}: need at least 2 models"),
        });
    }
    for m in models {
        require_absorbed(m, op)?;
    }
    for m in &models[1..] {
        check_same_arch(models[0], m, op)?;
    }
    Ok(())
}

/// Iterated universe matching: seed the anchor with one model, then
/// alternate between aligning every model to the anchor and replacing the
/// anchor with the average of the aligned models.
///
/// `probe` batches serve two purposes: activation matching runs its forward
/// traces on them, and when non-empty the multi-model barrier of the aligned
/// set is logged after every round.
pub fn universe_match(
    models: &[&TransformerParams],
    probe: &[Batch],
    config: &MergeConfig,
) -> Result<Universe> {
    check_models(models, "universe_match")?;
    config.match_config.validate()?;
    if config.iterations == 0 {
        return Err(Error::ConfigMismatch {
            detail: "universe_match: iterations must be at least 1".into(),
        });
    }
    if config.seed_index >= models.len() {
        return Err(Error::ConfigMismatch {
            detail: format!(
                "universe_match: seed index {} out of range for {} models",
                config.seed_index,
                models.len()
            ),
        });
    }
    let method = config.match_config.method;
    if !matches!(method, MatchMethod::Weight | MatchMethod::Activation) {
        return Err(Error::ConfigMismatch {
            detail: format!(
                "universe_match: the anchor loop aligns with weight or activation \
                 matching, not {}",
                method.name()
            ),
        });
    }

    let m_count = models.len();
    let weights = vec![1.0 / m_count as f64; m_count];
    let mut u = models[config.seed_index].clone();
    let mut maps = Vec::new();
    let mut multi_barriers = Vec::new();
    for _ in 0..config.iterations {
        maps = models
            .iter()
            .map(|m| match method {
                MatchMethod::Weight => weight_match(&u, m, &config.match_config).map(|r| r.maps),
                MatchMethod::Activation => activation_match(&u, m, probe).map(|r| r.maps),
                _ => unreachable!("method validated above"),
            })
            .collect::<Result<Vec<_>>>()?;
        let aligned: Vec<TransformerParams> = models
            .iter()
            .zip(&maps)
            .map(|(m, p)| apply_alignment(m, p))
            .collect::<Result<_>>()?;
        let refs: Vec<&TransformerParams> = aligned.iter().collect();
        u = mixture(&refs, &weights)?;
        if !probe.is_empty() {
            let report = multi_barrier(
                &refs,
                probe,
                0,
                SimplexMode::UniformSimplex,
                config.match_config.seed,
            )?;
            multi_barriers.push(report.barrier);
        }
    }
    Ok(Universe {
        u,
        maps,
        iterations: config.iterations,
        multi_barriers,
        objective: Vec::new(),
    })
}

/// Joint gradient refinement of all per-model alignment latents.
///
/// Each step samples mixture weights `λ ~ Dirichlet(α·1)`, forms the
/// λ-weighted combination of the (projected) aligned models, and descends
/// the mixture cross-entropy. Gradients taken at the projected maps are
/// applied straight to the latents. The reported objective subtracts the
/// λ-weighted endpoint losses — those are cached once, since hard
/// function-preserving maps cannot change a model's loss — so it reads as a
/// per-step barrier estimate.
pub fn learned_refine(
    universe: &Universe,
    models: &[&TransformerParams],
    data: &[Batch],
    alpha: f64,
    config: &MatchConfig,
) -> Result<Universe> {
    check_models(models, "learned_refine")?;
    config.validate()?;
    if models.len() != universe.maps.len() {
        return Err(Error::ConfigMismatch {
            detail: format!(
                "learned_refine: universe holds {} maps but {} models were given",
                universe.maps.len(),
                models.len()
            ),
        });
    }
    if !alpha.is_finite() || alpha <= 0.0 {
        return Err(Error::ConfigMismatch {
            detail: format!("learned_refine: Dirichlet concentration must be positive, got {alpha}"),
        });
    }
    if data.is_empty() {
        return Err(Error::EmptyInput {
            context: "learned_refine: no batches".into(),
        });
    }

    let endpoint: Vec<f64> = models
        .iter()
        .map(|m| Ok(eval_dataset(m, data)?.loss))
        .collect::<Result<_>>()?;

    let mut r = rng::seeded(config.seed ^ 0xd17c_a11e);
    let mut latents: Vec<LatentAlignment> = universe.maps.iter().map(latents_from_maps).collect();
    let mut adam = Adam::new(config.lr);
    let mut objective = Vec::with_capacity(config.learn_iterations);

    for step in 0..config.learn_iterations {
        let lam = rng::dirichlet(&mut r, alpha, models.len())?;
        let batch = &data[step % data.len()];
        let projected: Vec<_> = latents.iter().map(project_latents).collect::<Result<Vec<_>>>()?;

        let mut tape = Tape::new();
        let mut vars = Vec::with_capacity(models.len());
        let mut tape_models = Vec::with_capacity(models.len());
        for (m, t) in models.iter().zip(&projected) {
            let av = AlignVars {
                o: tape.param(t.o.clone()),
                p_ff: t.p_ff.iter().map(|x| tape.param(x.clone())).collect(),
                p_h: t.p_h.iter().map(|x| tape.param(x.clone())).collect(),
            };
            tape_models.push(aligned_model(&mut tape, m, &av)?);
            vars.push(av);
        }
        let refs: Vec<&TapeModel> = tape_models.iter().collect();
        let mixed = mix_models(&mut tape, &refs, &lam)?;
        let loss_var = mixed.batch_loss(&mut tape, batch)?;
        let loss = tape.value(loss_var).get(0, 0);
        if !loss.is_finite() {
            return Err(Error::TrainingDiverged { step, loss });
        }
        let baseline: f64 = lam.iter().zip(&endpoint).map(|(l, e)| l * e).sum();
        objective.push(loss - baseline);

        let grads = tape.backward(loss_var)?;
        let mut params: Vec<&mut Matrix> = Vec::new();
        let mut grad_refs: Vec<Option<&Matrix>> = Vec::new();
        for (lat, av) in latents.iter_mut().zip(&vars) {
            params.push(&mut lat.z_o);
            grad_refs.push(grads.get(av.o));
            for (z, &v) in lat.z_ff.iter_mut().zip(&av.p_ff) {
                params.push(z);
                grad_refs.push(grads.get(v));
            }
            for (z, &v) in lat.z_h.iter_mut().zip(&av.p_h) {
                params.push(z);
                grad_refs.push(grads.get(v));
            }
        }
        adam.step(&mut params, &grad_refs)?;
    }

    let maps: Vec<AlignmentMaps> = latents
        .iter()
        .map(maps_from_latents)
        .collect::<Result<_>>()?;
    let aligned: Vec<TransformerParams> = models
        .iter()
        .zip(&maps)
        .map(|(m, p)| apply_alignment(m, p))
        .collect::<Result<_>>()?;
    let refs: Vec<&TransformerParams> = aligned.iter().collect();
    let weights = vec![1.0 / models.len() as f64; models.len()];
    let u = mixture(&refs, &weights)?;
    Ok(Universe {
        u,
        maps,
        iterations: universe.iterations,
        multi_barriers: universe.multi_barriers.clone(),
        objective,
    })
}

/// One landmark of the model simplex: a mixture of the models under the
/// given weights, evaluated on a dataset.
#[derive(Debug, Clone)]
pub struct SimplexPoint {
    /// `vertex i`, `edge i-j` (midpoint), or `centroid`.
    pub label: String,
    /// Mixing weights, one per model, summing to 1.
    pub weights: Vec<f64>,
    pub loss: f64,
    pub accuracy: f64,
}

/// Evaluates the canonical landmarks of the simplex spanned by `models`:
/// every vertex, every edge midpoint, and the centroid.
pub fn simplex_report(
    models: &[&TransformerParams],
    data: &[Batch],
) -> Result<Vec<SimplexPoint>> {
    if models.len() < 2 {
        return Err(Error::EmptyInput {
            context: "simplex_report: need at least two models".into(),
        });
    }
    if data.is_empty() {
        return Err(Error::EmptyInput {
            context: "simplex_report: no evaluation batches".into(),
        });
    }
    for m in &models[1..] {
        check_same_arch(models[0], m, "simplex_report")?;
    }
    let n = models.len();
    let mut points = Vec::new();
    let mut push = |label: String, weights: Vec<f64>| -> Result<()> {
        let mixed = mixture(models, &weights)?;
        let metrics = eval_dataset(&mixed, data)?;
        points.push(SimplexPoint {
            label,
            weights,
            loss: metrics.loss,
            accuracy: metrics.accuracy,
        });
        Ok(())
    };
    for i in 0..n {
        let mut w = vec![0.0; n];
        w[i] = 1.0;
        push(format!("vertex {i}"), w)?;
    }
    for i in 0..n {
        for j in (i + 1)..n {
            let mut w = vec![0.0; n];
            w[i] = 0.5;
            w[j] = 0.5;
            push(format!("edge {i}-{j}"), w)?;
        }
    }
    push("centroid".into(), vec![1.0 / n as f64; n])?;
    Ok(points)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::barrier;
    use crate::transformer::{Activation, NormKind, TransformerConfig};
    use rand::Rng;

    fn config() -> TransformerConfig {
        TransformerConfig::new(11, 8, 8, 2, 2)
            .unwrap()
            .with_d_h(12)
            .with_activation(Activation::Gelu)
            .with_norm(NormKind::RmsNorm)
    }

    fn model(seed: u64) -> TransformerParams {
        let mut p = TransformerParams::init(&config(), seed).unwrap();
        let mut r = rng::seeded(seed ^ 0x0ff5e75);
        let d = p.config.d_r;
        for layer in &mut p.layers {
            layer.norm_attn.offset = rng::normal_matrix(&mut r, 1, d, 0.05);
            layer.norm_ffn.offset = rng::normal_matrix(&mut r, 1, d, 0.05);
            layer.b_2 = rng::normal_matrix(&mut r, 1, d, 0.05);
        }
        p.norm_final.offset = rng::normal_matrix(&mut r, 1, d, 0.05);
        p
    }

    fn probe(seed: u64, seqs: usize) -> Vec<Batch> {
        let mut r = rng::seeded(seed);
        let tokens: Vec<Vec<usize>> = (0..seqs)
            .map(|_| (0..8).map(|_| r.random_range(0..11)).collect())
            .collect();
        let targets: Vec<Vec<usize>> = (0..seqs)
            .map(|_| (0..8).map(|_| r.random_range(0..11)).collect())
            .collect();
        vec![Batch::new(tokens, targets).unwrap()]
    }

    fn max_param_gap(a: &TransformerParams, b: &TransformerParams) -> f64 {
        a.tensor_views()
            .iter()
            .zip(b.tensor_views())
            .map(|((_, x), (_, y))| x.max_abs_diff(y))
            .fold(0.0, f64::max)
    }

    #[test]
    fn identical_models_keep_the_anchor() {
        let base = model(1);
        let models = [&base, &base, &base];
        let uni = universe_match(&models, &probe(2, 6), &MergeConfig::default()).unwrap();
        assert!(max_param_gap(&uni.u, &base) <= 1e-12);
        assert_eq!(uni.multi_barriers.len(), 3);
        for b in &uni.multi_barriers {
            assert!(b.abs() <= 1e-9, "multi-barrier {b} on identical models");
        }
        for maps in &uni.maps {
            for layer in &maps.layers {
                assert!(layer.p_ff.is_identity());
            }
        }
    }

    #[test]
    fn universe_match_aligns_permuted_clones() {
        let base = model(3);
        let clones: Vec<TransformerParams> = (0..3)
            .map(|i| {
                let maps = AlignmentMaps::random_for(&base, true, 100 + i).unwrap();
                apply_alignment(&base, &maps).unwrap()
            })
            .collect();
        let refs: Vec<&TransformerParams> = clones.iter().collect();
        let mut cfg = MergeConfig::default();
        cfg.iterations = 2;
        let uni = universe_match(&refs, &probe(4, 6), &cfg).unwrap();
        let aligned = uni.aligned(&refs).unwrap();
        for other in &aligned[1..] {
            let gap = max_param_gap(&aligned[0], other);
            assert!(gap <= 1e-5, "aligned clones differ by {gap}");
        }
        let last = *uni.multi_barriers.last().unwrap();
        assert!(last.abs() <= 1e-6, "multi-barrier {last} after alignment");
    }

    #[test]
    fn two_model_universe_matches_direct_pair_barrier() {
        let a = model(5);
        let b = model(6);
        let data = probe(7, 6);
        let wm = weight_match(&a, &b, &MatchConfig::default()).unwrap();
        let direct =
            barrier::barrier(&a, &apply_alignment(&b, &wm.maps).unwrap(), &data, 11).unwrap();

        let mut cfg = MergeConfig::default();
        cfg.iterations = 1;
        let uni = universe_match(&[&a, &b], &[], &cfg).unwrap();
        let aligned = uni.aligned(&[&a, &b]).unwrap();
        let through_universe = barrier::barrier(&aligned[0], &aligned[1], &data, 11).unwrap();
        let rel = (through_universe.barrier - direct.barrier).abs() / direct.barrier.abs().max(1e-12);
        assert!(
            rel <= 0.10,
            "universe barrier {} vs direct {}",
            through_universe.barrier,
            direct.barrier
        );
    }

    #[test]
    fn refine_keeps_an_exact_universe() {
        let base = model(8);
        let clones: Vec<TransformerParams> = (0..3)
            .map(|i| {
                let maps = AlignmentMaps::random_for(&base, true, 200 + i).unwrap();
                apply_alignment(&base, &maps).unwrap()
            })
            .collect();
        let refs: Vec<&TransformerParams> = clones.iter().collect();
        let data = probe(9, 6);
        let uni = universe_match(&refs, &data, &MergeConfig::default()).unwrap();

        let mut cfg = MatchConfig::default();
        cfg.learn_iterations = 5;
        cfg.lr = 1e-6;
        let refined = learned_refine(&uni, &refs, &data, 0.1, &cfg).unwrap();
        assert_eq!(refined.objective.len(), 5);
        for j in &refined.objective {
            assert!(j.abs() <= 1e-6, "objective {j} on an exactly merged set");
        }
        for (before, after) in uni.maps.iter().zip(&refined.maps) {
            for (lb, la) in before.layers.iter().zip(&after.layers) {
                assert_eq!(lb.p_ff.sigma(), la.p_ff.sigma());
            }
        }
        assert!(max_param_gap(&refined.u, &uni.u) <= 1e-4);
    }

    #[test]
    fn merging_validates_inputs() {
        let a = model(10);
        let data = probe(11, 4);
        assert!(matches!(
            universe_match(&[&a], &data, &MergeConfig::default()),
            Err(Error::EmptyInput { .. })
        ));
        let mut bad = MergeConfig::default();
        bad.seed_index = 5;
        assert!(universe_match(&[&a, &a], &data, &bad).is_err());
        let mut learned = MergeConfig::default();
        learned.match_config.method = MatchMethod::Learned;
        assert!(universe_match(&[&a, &a], &data, &learned).is_err());

        let uni = universe_match(&[&a, &a], &data, &MergeConfig::default()).unwrap();
        assert!(matches!(
            learned_refine(&uni, &[&a, &a], &[], 0.1, &MatchConfig::default()),
            Err(Error::EmptyInput { .. })
        ));
        assert!(learned_refine(&uni, &[&a, &a], &data, 0.0, &MatchConfig::default()).is_err());
        assert!(learned_refine(&uni, &[&a], &data, 0.1, &MatchConfig::default()).is_err());
    }

    #[test]
    fn simplex_report_covers_all_landmarks() {
        let a = model(60);
        let b = model(61);
        let c = model(62);
        let data = probe(63, 5);
        let points = simplex_report(&[&a, &b, &c], &data).unwrap();
        // 3 vertices + 3 edge midpoints + 1 centroid.
        assert_eq!(points.len(), 7);
        let labels: Vec<&str> = points.iter().map(|p| p.label.as_str()).collect();
        assert!(labels.contains(&"vertex 0"));
        assert!(labels.contains(&"edge 0-2"));
        assert!(labels.contains(&"centroid"));
        for p in &points {
            assert!((p.weights.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            assert!(p.loss.is_finite());
        }
        // A vertex evaluates the model itself.
        let direct = eval_dataset(&a, &data).unwrap();
        let vertex0 = points.iter().find(|p| p.label == "vertex 0").unwrap();
        assert!((vertex0.loss - direct.loss).abs() <= 1e-12);

        assert!(simplex_report(&[&a], &data).is_err());
        assert!(simplex_report(&[&a, &b], &[]).is_err());
    }
}
