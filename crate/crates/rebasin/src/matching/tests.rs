use super::*;
use crate::autodiff::Tape;
use crate::rng;
use crate::symmetry::{apply_alignment, AlignmentMaps, OrthogonalMap, Permutation};
use crate::transformer::{Activation, Batch, NormKind, TapeModel, TransformerConfig, TransformerParams};
use rand::Rng;

fn config() -> TransformerConfig {
    TransformerConfig::new(11, 8, 8, 2, 2)
        .unwrap()
        .with_d_h(12)
        .with_activation(Activation::Gelu)
        .with_norm(NormKind::RmsNorm)
}

/// Absorbed model (unit scales) with random weights and norm offsets.
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

fn probe(seed: u64, seqs: usize, len: usize) -> Vec<Batch> {
    let mut r = rng::seeded(seed);
    let tokens: Vec<Vec<usize>> = (0..seqs)
        .map(|_| (0..len).map(|_| r.random_range(0..11)).collect())
        .collect();
    let targets: Vec<Vec<usize>> = (0..seqs)
        .map(|_| (0..len).map(|_| r.random_range(0..11)).collect())
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
fn projections_are_idempotent() {
    let mut r = rng::seeded(41);
    for n in [3, 5, 8] {
        let p = Permutation::random(&mut r, n);
        let recovered = project_permutation(&p.to_matrix()).unwrap();
        assert_eq!(recovered.sigma(), p.sigma());

        let o = rng::random_orthogonal(&mut r, n).unwrap();
        let back = project_orthogonal(&o).unwrap();
        assert!(back.max_abs_diff(&o) <= 1e-10);

        // A scaled orthogonal matrix still projects to the rotation itself.
        assert!(project_orthogonal(&o.scaled(3.7)).unwrap().max_abs_diff(&o) <= 1e-10);

        // Small perturbations of a permutation keep its projection.
        let noisy = p.to_matrix().add(&rng::uniform_matrix(&mut r, n, n, 0.0, 0.3)).unwrap();
        assert_eq!(project_permutation(&noisy).unwrap().sigma(), p.sigma());
    }
}

#[test]
fn weight_match_recovers_planted_alignment() {
    for seed in [1, 2, 3] {
        let a = model(seed);
        let maps = AlignmentMaps::random_for(&a, true, seed ^ 0xbeef).unwrap();
        let b = apply_alignment(&a, &maps).unwrap();

        let wm = weight_match(&a, &b, &MatchConfig::default()).unwrap();
        let aligned = apply_alignment(&b, &wm.maps).unwrap();
        let gap = max_param_gap(&a, &aligned);
        assert!(gap <= 1e-5, "seed {seed}: planted recovery gap {gap}");
        assert!(wm.converged, "seed {seed}: did not converge in 5 sweeps");
        for w in wm.objective.windows(2) {
            assert!(
                w[1] >= w[0] - 1e-9 * w[0].abs(),
                "seed {seed}: objective decreased: {:?}",
                wm.objective
            );
        }
    }
}

#[test]
fn weight_match_on_identical_models_is_identity() {
    let a = model(7);
    let wm = weight_match(&a, &a, &MatchConfig::default()).unwrap();
    for layer in &wm.maps.layers {
        assert!(layer.p_ff.is_identity());
        assert!(layer.p_h.to_permutation().unwrap().is_identity());
    }
    let d = a.config.d_r;
    let gap = wm.maps.o.matrix().max_abs_diff(&crate::linalg::Matrix::identity(d));
    assert!(gap * (d as f64) <= 1e-6, "O deviates from identity by {gap}");
    assert!(wm.converged);
}

#[test]
fn weight_match_permutation_residual_mode_recovers_planted_permutation() {
    let a = model(9);
    let mut r = rng::seeded(99);
    let d = a.config.d_r;
    let residual_perm = Permutation::random(&mut r, d);
    let mut maps = AlignmentMaps::random_for(&a, false, 91).unwrap();
    maps.o = OrthogonalMap::new(residual_perm.to_matrix()).unwrap();
    let b = apply_alignment(&a, &maps).unwrap();

    let mut cfg = MatchConfig::default();
    cfg.residual = ResidualMatching::Permutation;
    let wm = weight_match(&a, &b, &cfg).unwrap();
    let aligned = apply_alignment(&b, &wm.maps).unwrap();
    let gap = max_param_gap(&a, &aligned);
    assert!(gap <= 1e-9, "permutation-residual recovery gap {gap}");
}

#[test]
fn weight_match_rejects_unabsorbed_and_mismatched_models() {
    let mut a = model(11);
    let b = model(12);
    let other = TransformerParams::init(&config().with_d_h(16), 13).unwrap();
    assert!(matches!(
        weight_match(&a, &other, &MatchConfig::default()),
        Err(Error::ConfigMismatch { .. }) | Err(Error::ShapeMismatch { .. })
    ));
    a.layers[0].norm_attn.scale.set(0, 0, 1.01);
    assert!(weight_match(&a, &b, &MatchConfig::default()).is_err());
}

#[test]
fn activation_match_recovers_planted_alignment() {
    for seed in [21, 22] {
        let a = model(seed);
        let maps = AlignmentMaps::random_for(&a, true, seed ^ 0xacce).unwrap();
        let b = apply_alignment(&a, &maps).unwrap();
        let report = activation_match(&a, &b, &probe(seed, 6, 8)).unwrap();
        let aligned = apply_alignment(&b, &report.maps).unwrap();
        let gap = max_param_gap(&a, &aligned);
        assert!(gap <= 1e-5, "seed {seed}: activation recovery gap {gap}");
        assert!(report.warnings.is_empty(), "unexpected: {:?}", report.warnings);
    }
}

#[test]
fn activation_match_degenerates_to_identity_with_warning() {
    let mut a = model(23);
    for (_, t) in a.tensor_views_mut() {
        for x in t.data_mut() {
            *x = 0.0;
        }
    }
    let report = activation_match(&a, &a, &probe(23, 6, 8)).unwrap();
    assert!(!report.warnings.is_empty());
    for layer in &report.maps.layers {
        assert!(layer.p_ff.is_identity());
        assert!(layer.p_h.to_permutation().unwrap().is_identity());
    }
}

#[test]
fn activation_match_refuses_short_probe() {
    let a = model(24);
    let b = model(25);
    let err = activation_match(&a, &b, &probe(24, 1, 4)).unwrap_err();
    assert!(matches!(err, Error::EmptyInput { .. }), "got {err:?}");
}

#[test]
fn aligned_tape_model_matches_dense_application() {
    let b = model(31);
    let mut r = rng::seeded(32);
    // Doubly-stochastic-ish soft maps from Sinkhorn on random positives.
    let soft_mat = |r: &mut _, n: usize| {
        let m = rng::uniform_matrix(r, n, n, 0.1, 1.0);
        crate::linalg::sinkhorn_normalize(&m, 30).unwrap().matrix
    };
    let maps = SoftMaps {
        p_ff: b.layers.iter().map(|l| soft_mat(&mut r, l.d_h())).collect(),
        p_h: b.layers.iter().map(|l| soft_mat(&mut r, l.heads.len())).collect(),
        o: rng::random_orthogonal(&mut r, b.config.d_r).unwrap(),
    };
    let dense = soft_apply(&b, &maps).unwrap();

    let mut tape = Tape::new();
    let vars = AlignVars {
        o: tape.constant(maps.o.clone()),
        p_ff: maps.p_ff.iter().map(|m| tape.constant(m.clone())).collect(),
        p_h: maps.p_h.iter().map(|m| tape.constant(m.clone())).collect(),
    };
    let aligned = aligned_model(&mut tape, &b, &vars).unwrap();
    let tokens: Vec<usize> = (0..8).map(|_| r.random_range(0..11)).collect();
    let on_tape = aligned.logits(&mut tape, &tokens).unwrap();
    let from_dense = dense.forward(&tokens).unwrap();
    let gap = tape.value(on_tape).max_abs_diff(&from_dense);
    assert!(gap <= 1e-10, "tape vs dense alignment gap {gap}");
}

#[test]
fn mixed_tape_model_matches_interpolation() {
    let a = model(33);
    let b = model(34);
    let lambda = 0.3;
    let interp = crate::barrier::interpolate(&a, &b, lambda).unwrap();

    let mut tape = Tape::new();
    let ta = TapeModel::from_params(&mut tape, &a, false);
    let tb = TapeModel::from_params(&mut tape, &b, false);
    let mixed = mix_models(&mut tape, &[&ta, &tb], &[lambda, 1.0 - lambda]).unwrap();
    assert!(tape.value(mixed.embed).max_abs_diff(&interp.embed) <= 1e-15);
    assert!(tape.value(mixed.layers[0].w_1).max_abs_diff(&interp.layers[0].w_1) <= 1e-15);
    assert!(tape.value(mixed.w_out).max_abs_diff(&interp.w_out) <= 1e-15);
    assert!((mixed.eps - interp.config.eps).abs() <= 1e-20);
}

#[test]
fn alignment_objective_gradients_match_finite_differences() {
    let a = model(41);
    let maps = AlignmentMaps::random_for(&a, true, 42).unwrap();
    let b = apply_alignment(&a, &maps).unwrap();
    let wm = weight_match(&a, &b, &MatchConfig::default()).unwrap();
    let tensors = AlignTensors {
        o: wm.maps.o.matrix().clone(),
        p_ff: wm.maps.layers.iter().map(|l| l.p_ff.to_matrix()).collect(),
        p_h: wm.maps.layers.iter().map(|l| l.p_h.to_matrix()).collect(),
    };
    let batch = &probe(43, 3, 6)[0];
    let lambda = 0.37;
    let (_, grad) = alignment_objective_grads(&a, &b, &tensors, lambda, batch).unwrap();

    let h = 1e-5;
    let check = |name: &str, get: &dyn Fn(&AlignTensors) -> &Matrix,
                     get_mut: &dyn Fn(&mut AlignTensors) -> &mut Matrix,
                     entries: &[(usize, usize)]| {
        for &(i, j) in entries {
            let mut plus = tensors.clone();
            let v = get_mut(&mut plus).get(i, j);
            get_mut(&mut plus).set(i, j, v + h);
            let mut minus = tensors.clone();
            get_mut(&mut minus).set(i, j, v - h);
            let fp = alignment_objective(&a, &b, &plus, lambda, batch).unwrap();
            let fm = alignment_objective(&a, &b, &minus, lambda, batch).unwrap();
            let fd = (fp - fm) / (2.0 * h);
            let an = get(&grad).get(i, j);
            assert!(
                (an - fd).abs() <= 1e-5 + 1e-4 * fd.abs(),
                "{name}[{i},{j}]: analytic {an} vs fd {fd}"
            );
        }
    };
    check("o", &|t| &t.o, &|t| &mut t.o, &[(0, 0), (1, 3), (5, 2), (7, 7)]);
    check("p_ff0", &|t| &t.p_ff[0], &|t| &mut t.p_ff[0], &[(0, 0), (3, 7), (11, 2)]);
    check("p_ff1", &|t| &t.p_ff[1], &|t| &mut t.p_ff[1], &[(5, 5), (2, 9)]);
    check("p_h0", &|t| &t.p_h[0], &|t| &mut t.p_h[0], &[(0, 0), (0, 1), (1, 0), (1, 1)]);
    check("p_h1", &|t| &t.p_h[1], &|t| &mut t.p_h[1], &[(0, 1), (1, 1)]);
}

#[test]
fn learned_match_keeps_a_planted_solution() {
    let a = model(51);
    let planted = AlignmentMaps::random_for(&a, true, 52).unwrap();
    let b = apply_alignment(&a, &planted).unwrap();
    let wm = weight_match(&a, &b, &MatchConfig::default()).unwrap();

    let mut cfg = MatchConfig::default();
    cfg.learn_iterations = 10;
    cfg.lr = 1e-6;
    cfg.seed = 5;
    let lm = learned_match(&a, &b, &probe(53, 4, 8), &cfg).unwrap();
    assert_eq!(lm.losses.len(), 10);
    for (ours, theirs) in lm.maps.layers.iter().zip(&wm.maps.layers) {
        assert_eq!(ours.p_ff.sigma(), theirs.p_ff.sigma());
        assert_eq!(
            ours.p_h.to_permutation().unwrap().sigma(),
            theirs.p_h.to_permutation().unwrap().sigma()
        );
    }
    let aligned = apply_alignment(&b, &lm.maps).unwrap();
    let gap = max_param_gap(&a, &aligned);
    assert!(gap <= 1e-3, "learned maps drifted off the planted solution: {gap}");
}

#[test]
fn learned_match_validates_inputs() {
    let a = model(55);
    let b = model(56);
    assert!(matches!(
        learned_match(&a, &b, &[], &MatchConfig::default()),
        Err(Error::EmptyInput { .. })
    ));
    let mut cfg = MatchConfig::default();
    cfg.learn_iterations = 0;
    assert!(matches!(
        learned_match(&a, &b, &probe(57, 2, 6), &cfg),
        Err(Error::ConfigMismatch { .. })
    ));
}

#[test]
fn soft_match_stays_at_a_planted_vertex_without_noise() {
    let a = model(61);
    let planted = AlignmentMaps::random_for(&a, true, 62).unwrap();
    let b = apply_alignment(&a, &planted).unwrap();

    let mut cfg = MatchConfig::default();
    cfg.noise = 0.0;
    cfg.lr = 0.0;
    cfg.learn_iterations = 1;
    let report = soft_learned_match(&a, &b, &probe(63, 4, 8), &cfg).unwrap();

    let wm = weight_match(&a, &b, &MatchConfig::default()).unwrap();
    for (soft_ff, layer) in report.soft.p_ff.iter().zip(&wm.maps.layers) {
        let gap = soft_ff.max_abs_diff(&layer.p_ff.to_matrix());
        assert!(gap <= 1e-6, "Sinkhorn moved off the planted vertex by {gap}");
    }
    for (soft_h, layer) in report.soft.p_h.iter().zip(&wm.maps.layers) {
        let gap = soft_h.max_abs_diff(&layer.p_h.to_matrix());
        assert!(gap <= 1e-6, "head vertex moved by {gap}");
    }
}

#[test]
fn soft_match_reports_endpoint_gap_and_hard_projection() {
    let a = model(64);
    let b = model(65);
    let mut cfg = MatchConfig::default();
    cfg.init = InitStrategy::Identity;
    cfg.learn_iterations = 5;
    cfg.sinkhorn_iters = 20;
    let report = soft_learned_match(&a, &b, &probe(66, 3, 8), &cfg).unwrap();
    assert_eq!(report.losses.len(), 5);
    assert!(
        report.endpoint_gap > 1e-6,
        "soft maps unexpectedly exact: gap {}",
        report.endpoint_gap
    );
    assert_eq!(report.hard.layers.len(), a.layers.len());
    // Soft maps are doubly stochastic. The chain ends on a column
    // normalization, so columns are exact and rows only converged.
    for p in report.soft.p_ff.iter().chain(&report.soft.p_h) {
        for i in 0..p.rows() {
            let rs: f64 = p.row(i).iter().sum();
            assert!((rs - 1.0).abs() <= 1e-2, "row sum {rs}");
        }
        for j in 0..p.cols() {
            let cs: f64 = (0..p.rows()).map(|i| p.get(i, j)).sum();
            assert!((cs - 1.0).abs() <= 1e-8, "col sum {cs}");
        }
    }
}

#[test]
fn orthogonal_diff_analysis_sees_small_rotations() {
    let mut r = rng::seeded(71);
    let n = 8;
    let o_wm = OrthogonalMap::new(rng::random_orthogonal(&mut r, n).unwrap()).unwrap();

    let same = orthogonal_diff_analysis(&o_wm, &o_wm).unwrap();
    let max_same = same.diff_angles.iter().fold(0.0f64, |m, a| m.max(a.abs()));
    assert!(max_same <= 1e-7, "identical maps gave angles up to {max_same}");
    assert!(same.diff_concentration >= 1.0 - 1e-9);

    // Rotate one invariant plane by a known angle.
    let theta = 0.05_f64;
    let mut rot = Matrix::identity(n);
    rot.set(0, 0, theta.cos());
    rot.set(0, 1, -theta.sin());
    rot.set(1, 0, theta.sin());
    rot.set(1, 1, theta.cos());
    let o_lm = OrthogonalMap::new(o_wm.matrix().matmul(&rot).unwrap()).unwrap();
    let report = orthogonal_diff_analysis(&o_wm, &o_lm).unwrap();
    let max_angle = report.diff_angles.iter().fold(0.0f64, |m, a| m.max(a.abs()));
    assert!(
        (max_angle - theta).abs() <= 1e-6,
        "expected max rotation angle {theta}, got {max_angle}"
    );
    assert!(report.diff_concentration > same.wm_concentration || report.diff_concentration > 0.9);
}

#[test]
fn lambda_samplers_stay_in_range() {
    let mut r = rng::seeded(81);
    for sampler in [
        LambdaSampler::Fixed,
        LambdaSampler::UniformNarrow,
        LambdaSampler::UniformFull,
        LambdaSampler::Gaussian,
    ] {
        for _ in 0..200 {
            let l = sampler.sample(&mut r);
            assert!((0.0..=1.0).contains(&l), "{} gave {l}", sampler.name());
            if sampler == LambdaSampler::UniformNarrow {
                assert!((0.4..0.6).contains(&l));
            }
        }
        assert_eq!(LambdaSampler::parse(sampler.name()).unwrap(), sampler);
    }
    assert!(LambdaSampler::parse("uniform").is_err());
}
