//! Interpolation paths and loss barriers.
//!
//! The pairwise barrier is the largest excess of the interpolated model's
//! loss over the linear interpolation of the endpoint losses, measured on a
//! uniform λ grid that includes both endpoints. The multi-model version
//! evaluates the same deviation at barycentric weights on the simplex
//! spanned by M models (vertices, edge midpoints, centroid, plus either a
//! barycentric grid or uniform Dirichlet draws).

use crate::error::{Error, Result};
use crate::rng;
use crate::transformer::{Batch, EvalMetrics, TransformerParams};

/// Weighted aggregate loss/accuracy over a list of batches.
pub fn eval_dataset(params: &TransformerParams, data: &[Batch]) -> Result<EvalMetrics> {
    if data.is_empty() {
        return Err(Error::EmptyInput {
            context: "eval_dataset: no batches".into(),
        });
    }
    let mut weight = 0.0;
    let mut loss = 0.0;
    let mut acc = 0.0;
    for batch in data {
        let m = params.eval_batch(batch)?;
        loss += m.loss * m.weight;
        acc += m.accuracy * m.weight;
        weight += m.weight;
    }
    Ok(EvalMetrics {
        loss: loss / weight,
        accuracy: acc / weight,
        weight,
    })
}

/// Models may be mixed when every tensor has the same shape and the configs
/// agree except possibly in the norm epsilon (width-expanded models carry a
/// rescaled epsilon; it interpolates linearly like any other parameter).
fn check_mixable(a: &TransformerParams, b: &TransformerParams) -> Result<()> {
    let mut ca = a.config.clone();
    let mut cb = b.config.clone();
    ca.eps = 0.0;
    cb.eps = 0.0;
    if ca != cb {
        return Err(Error::ConfigMismatch {
            detail: "models have different architectures".into(),
        });
    }
    let av = a.tensor_views();
    let bv = b.tensor_views();
    if av.len() != bv.len() {
        return Err(Error::ConfigMismatch {
            detail: "models have different tensor counts".into(),
        });
    }
    for ((name, ta), (_, tb)) in av.iter().zip(&bv) {
        if ta.dims() != tb.dims() {
            return Err(Error::ShapeMismatch {
                op: "interpolate",
                expected: format!("{name} {}x{}", ta.rows(), ta.cols()),
                got: format!("{}x{}", tb.rows(), tb.cols()),
            });
        }
    }
    Ok(())
}

/// `λ·θ_A + (1−λ)·θ_B` elementwise (the norm epsilon interpolates too).
pub fn interpolate(a: &TransformerParams, b: &TransformerParams, lambda: f64) -> Result<TransformerParams> {
    check_mixable(a, b)?;
    let mut out = a.clone();
    let bv = b.tensor_views();
    for ((_, ta), (_, tb)) in out.tensor_views_mut().into_iter().zip(bv) {
        for (x, y) in ta.data_mut().iter_mut().zip(tb.data()) {
            *x = lambda * *x + (1.0 - lambda) * *y;
        }
    }
    out.config.eps = lambda * a.config.eps + (1.0 - lambda) * b.config.eps;
    Ok(out)
}

/// Convex combination `Σ w_m·θ_m` of M models.
pub fn mixture(models: &[&TransformerParams], weights: &[f64]) -> Result<TransformerParams> {
    if models.is_empty() || models.len() != weights.len() {
        return Err(Error::EmptyInput {
            context: "mixture: models and weights must be non-empty and match".into(),
        });
    }
    for m in &models[1..] {
        check_mixable(models[0], m)?;
    }
    let mut out = models[0].clone();
    for (_, t) in out.tensor_views_mut() {
        for x in t.data_mut() {
            *x *= weights[0];
        }
    }
    out.config.eps = models[0].config.eps * weights[0];
    for (m, &w) in models[1..].iter().zip(&weights[1..]) {
        let mv = m.tensor_views();
        for ((_, tx), (_, ty)) in out.tensor_views_mut().into_iter().zip(mv) {
            for (x, y) in tx.data_mut().iter_mut().zip(ty.data()) {
                *x += w * *y;
            }
        }
        out.config.eps += w * m.config.eps;
    }
    Ok(out)
}

/// Pairwise barrier result over a uniform λ grid (λ=1 is pure model A).
#[derive(Debug, Clone, serde::Serialize)]
pub struct BarrierReport {
    pub lambda_grid: Vec<f64>,
    pub losses: Vec<f64>,
    pub accuracies: Vec<f64>,
    pub loss_a: f64,
    pub loss_b: f64,
    /// max over the grid of `loss(λ) − (λ·L_A + (1−λ)·L_B)`, unclamped.
    pub barrier: f64,
}

impl BarrierReport {
    /// Excess over the linear baseline at grid index `i`.
    pub fn deviation(&self, i: usize) -> f64 {
        let l = self.lambda_grid[i];
        self.losses[i] - (l * self.loss_a + (1.0 - l) * self.loss_b)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("lambda,loss,accuracy\n");
        for i in 0..self.lambda_grid.len() {
            out.push_str(&format!(
                "{},{},{}\n",
                self.lambda_grid[i], self.losses[i], self.accuracies[i]
            ));
        }
        out
    }
}

/// Pairwise loss barrier on a uniform grid of `grid_size ≥ 3` points.
pub fn barrier(
    a: &TransformerParams,
    b: &TransformerParams,
    data: &[Batch],
    grid_size: usize,
) -> Result<BarrierReport> {
    barrier_threaded(a, b, data, grid_size, 1)
}

/// As [`barrier`], evaluating grid points on up to `threads` worker threads.
/// Results are keyed by grid index, so the report is identical for any
/// thread count.
pub fn barrier_threaded(
    a: &TransformerParams,
    b: &TransformerParams,
    data: &[Batch],
    grid_size: usize,
    threads: usize,
) -> Result<BarrierReport> {
    if grid_size < 3 {
        return Err(Error::ConfigMismatch {
            detail: format!("barrier grid needs at least 3 points, got {grid_size}"),
        });
    }
    check_mixable(a, b)?;
    if data.is_empty() {
        return Err(Error::EmptyInput {
            context: "barrier: no batches".into(),
        });
    }
    let grid: Vec<f64> = (0..grid_size)
        .map(|i| i as f64 / (grid_size - 1) as f64)
        .collect();

    let threads = threads.max(1).min(grid_size);
    let mut results: Vec<Option<(f64, f64)>> = vec![None; grid_size];
    if threads == 1 {
        for (i, &l) in grid.iter().enumerate() {
            let m = eval_dataset(&interpolate(a, b, l)?, data)?;
            results[i] = Some((m.loss, m.accuracy));
        }
    } else {
        let chunks = std::thread::scope(|scope| {
            let mut handles = Vec::new();
            for t in 0..threads {
                let grid = &grid;
                handles.push(scope.spawn(move || -> Result<Vec<(usize, f64, f64)>> {
                    let mut out = Vec::new();
                    let mut i = t;
                    while i < grid.len() {
                        let m = eval_dataset(&interpolate(a, b, grid[i])?, data)?;
                        out.push((i, m.loss, m.accuracy));
                        i += threads;
                    }
                    Ok(out)
                }));
            }
            handles
                .into_iter()
                .map(|h| h.join().expect("barrier worker panicked"))
                .collect::<Result<Vec<_>>>()
        })?;
        for chunk in chunks {
            for (i, loss, acc) in chunk {
                results[i] = Some((loss, acc));
            }
        }
    }
    let (losses, accuracies): (Vec<f64>, Vec<f64>) =
        results.into_iter().map(|r| r.unwrap()).unzip();

    let loss_a = eval_dataset(a, data)?.loss;
    let loss_b = eval_dataset(b, data)?.loss;
    let barrier = grid
        .iter()
        .zip(&losses)
        .map(|(&l, &loss)| loss - (l * loss_a + (1.0 - l) * loss_b))
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(BarrierReport {
        lambda_grid: grid,
        losses,
        accuracies,
        loss_a,
        loss_b,
        barrier,
    })
}

/// How interior simplex points are chosen beyond the fixed vertex, edge
/// midpoint, and centroid probes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SimplexMode {
    /// `sample_count` draws from Dirichlet(1, …, 1).
    UniformSimplex,
    /// Full barycentric grid with denominator `sample_count`.
    Grid,
}

impl SimplexMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "uniform-simplex" => Ok(Self::UniformSimplex),
            "grid" => Ok(Self::Grid),
            other => Err(Error::ConfigMismatch {
                detail: format!("unknown simplex mode {other:?}"),
            }),
        }
    }
}

/// Multi-model barrier over the simplex.
#[derive(Debug, Clone, serde::Serialize)]
pub struct SimplexReport {
    pub labels: Vec<String>,
    pub weights: Vec<Vec<f64>>,
    pub losses: Vec<f64>,
    /// `loss(Σ λ_m θ_m) − Σ λ_m L_m` per evaluated point.
    pub deviations: Vec<f64>,
    pub endpoint_losses: Vec<f64>,
    pub barrier: f64,
}

impl SimplexReport {
    pub fn centroid_deviation(&self) -> f64 {
        self.labels
            .iter()
            .position(|l| l == "centroid")
            .map(|i| self.deviations[i])
            .expect("simplex report always contains the centroid")
    }

    pub fn to_csv(&self) -> String {
        let m = self.endpoint_losses.len();
        let mut out = String::from("label,");
        for i in 0..m {
            out.push_str(&format!("w{i},"));
        }
        out.push_str("loss,deviation\n");
        for (i, label) in self.labels.iter().enumerate() {
            out.push_str(label);
            for w in &self.weights[i] {
                out.push_str(&format!(",{w}"));
            }
            out.push_str(&format!(",{},{}\n", self.losses[i], self.deviations[i]));
        }
        out
    }
}

fn barycentric_grid(m: usize, k: usize) -> Vec<Vec<f64>> {
    // All compositions of k into m non-negative parts, lexicographic.
    fn rec(m: usize, k: usize, prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if m == 1 {
            prefix.push(k);
            out.push(prefix.clone());
            prefix.pop();
            return;
        }
        for n in 0..=k {
            prefix.push(n);
            rec(m - 1, k - n, prefix, out);
            prefix.pop();
        }
    }
    let mut parts = Vec::new();
    rec(m, k, &mut Vec::new(), &mut parts);
    parts
        .into_iter()
        .map(|p| p.into_iter().map(|n| n as f64 / k as f64).collect())
        .collect()
}

/// Evaluates the loss deviation from the linear baseline at vertices, edge
/// midpoints, the centroid, and `sample_count` further interior points.
pub fn multi_barrier(
    models: &[&TransformerParams],
    data: &[Batch],
    sample_count: usize,
    mode: SimplexMode,
    seed: u64,
) -> Result<SimplexReport> {
    let m = models.len();
    if m < 2 {
        return Err(Error::EmptyInput {
            context: "multi_barrier: need at least 2 models".into(),
        });
    }
    for other in &models[1..] {
        check_mixable(models[0], other)?;
    }
    if data.is_empty() {
        return Err(Error::EmptyInput {
            context: "multi_barrier: no batches".into(),
        });
    }

    let mut labels = Vec::new();
    let mut weights: Vec<Vec<f64>> = Vec::new();
    for v in 0..m {
        labels.push(format!("vertex{v}"));
        let mut w = vec![0.0; m];
        w[v] = 1.0;
        weights.push(w);
    }
    for i in 0..m {
        for j in i + 1..m {
            labels.push(format!("edge{i}-{j}"));
            let mut w = vec![0.0; m];
            w[i] = 0.5;
            w[j] = 0.5;
            weights.push(w);
        }
    }
    labels.push("centroid".into());
    weights.push(vec![1.0 / m as f64; m]);
    match mode {
        SimplexMode::Grid => {
            let k = sample_count.max(1);
            for w in barycentric_grid(m, k) {
                let ints: Vec<String> = w.iter().map(|x| format!("{}", (x * k as f64).round() as usize)).collect();
                labels.push(format!("grid{}", ints.join("-")));
                weights.push(w);
            }
        }
        SimplexMode::UniformSimplex => {
            let mut r = rng::seeded(seed);
            for s in 0..sample_count {
                labels.push(format!("sample{s}"));
                weights.push(rng::dirichlet(&mut r, 1.0, m)?);
            }
        }
    }

    let endpoint_losses: Vec<f64> = models
        .iter()
        .map(|p| Ok(eval_dataset(p, data)?.loss))
        .collect::<Result<Vec<_>>>()?;

    let mut losses = Vec::with_capacity(weights.len());
    let mut deviations = Vec::with_capacity(weights.len());
    for w in &weights {
        let mixed = mixture(models, w)?;
        let loss = eval_dataset(&mixed, data)?.loss;
        let baseline: f64 = w.iter().zip(&endpoint_losses).map(|(a, b)| a * b).sum();
        losses.push(loss);
        deviations.push(loss - baseline);
    }
    let barrier = deviations.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(SimplexReport {
        labels,
        weights,
        losses,
        deviations,
        endpoint_losses,
        barrier,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::symmetry::{apply_alignment, AlignmentMaps};
    use crate::transformer::{Activation, NormKind, TransformerConfig};
    use rand::Rng;

    fn config() -> TransformerConfig {
        TransformerConfig::new(9, 8, 8, 2, 2)
            .unwrap()
            .with_d_h(12)
            .with_activation(Activation::Gelu)
            .with_norm(NormKind::RmsNorm)
    }

    fn model(seed: u64) -> TransformerParams {
        TransformerParams::init(&config(), seed).unwrap()
    }

    fn dataset(seed: u64, batches: usize) -> Vec<Batch> {
        let mut r = rng::seeded(seed);
        (0..batches)
            .map(|_| {
                let seqs = 4;
                let t = r.random_range(3..=8);
                let tokens: Vec<Vec<usize>> = (0..seqs)
                    .map(|_| (0..t).map(|_| r.random_range(0..9)).collect())
                    .collect();
                let targets: Vec<Vec<usize>> = (0..seqs)
                    .map(|_| (0..t).map(|_| r.random_range(0..9)).collect())
                    .collect();
                Batch::new(tokens, targets).unwrap()
            })
            .collect()
    }

    #[test]
    fn interpolation_endpoints_are_exact() {
        let a = model(1);
        let b = model(2);
        let at_one = interpolate(&a, &b, 1.0).unwrap();
        let at_zero = interpolate(&a, &b, 0.0).unwrap();
        assert_eq!(at_one, a);
        assert_eq!(at_zero, b);
        let mut neg = a.clone();
        for (_, t) in neg.tensor_views_mut() {
            for x in t.data_mut() {
                *x = -*x;
            }
        }
        let mid = interpolate(&a, &neg, 0.5).unwrap();
        assert_eq!(mid.embed.max_abs(), 0.0);
    }

    #[test]
    fn self_barrier_is_zero_everywhere() {
        let a = model(3);
        let data = dataset(10, 2);
        let report = barrier(&a, &a, &data, 7).unwrap();
        assert!(report.barrier.abs() <= 1e-12);
        for i in 0..7 {
            assert!(report.deviation(i).abs() <= 1e-12);
        }
        assert_eq!(report.lambda_grid[0], 0.0);
        assert_eq!(report.lambda_grid[6], 1.0);
    }

    #[test]
    fn endpoint_losses_match_standalone_evaluation() {
        let a = model(4);
        let b = model(5);
        let data = dataset(11, 2);
        let report = barrier(&a, &b, &data, 5).unwrap();
        assert!((report.losses[4] - report.loss_a).abs() <= 1e-12);
        assert!((report.losses[0] - report.loss_b).abs() <= 1e-12);
        assert!((report.losses[0] - eval_dataset(&b, &data).unwrap().loss).abs() <= 1e-12);
    }

    #[test]
    fn barrier_is_symmetric() {
        let a = model(6);
        let b = model(7);
        let data = dataset(12, 2);
        let ab = barrier(&a, &b, &data, 9).unwrap();
        let ba = barrier(&b, &a, &data, 9).unwrap();
        assert!((ab.barrier - ba.barrier).abs() <= 1e-12);
        for i in 0..9 {
            assert!((ab.losses[i] - ba.losses[8 - i]).abs() <= 1e-12);
        }
    }

    #[test]
    fn aligned_copy_has_no_barrier() {
        let a = model(8);
        let maps = AlignmentMaps::random_for(&a, true, 88).unwrap();
        let b = apply_alignment(&a, &maps).unwrap();
        let back = apply_alignment(&b, &maps.inverse().unwrap()).unwrap();
        let data = dataset(13, 2);
        let report = barrier(&a, &back, &data, 11).unwrap();
        assert!(report.barrier.abs() <= 1e-6, "barrier {}", report.barrier);
    }

    #[test]
    fn barrier_is_invariant_under_joint_symmetry() {
        let a = model(9);
        let b = model(10);
        let data = dataset(14, 2);
        let base = barrier(&a, &b, &data, 9).unwrap();
        for seed in [1, 2] {
            let maps = AlignmentMaps::random_for(&a, true, seed).unwrap();
            let ta = apply_alignment(&a, &maps).unwrap();
            let tb = apply_alignment(&b, &maps).unwrap();
            let moved = barrier(&ta, &tb, &data, 9).unwrap();
            assert!(
                (moved.barrier - base.barrier).abs() <= 2e-6,
                "joint symmetry moved the barrier: {} vs {}",
                moved.barrier,
                base.barrier
            );
        }
    }

    #[test]
    fn threaded_barrier_matches_single_thread() {
        let a = model(11);
        let b = model(12);
        let data = dataset(15, 2);
        let one = barrier_threaded(&a, &b, &data, 9, 1).unwrap();
        let four = barrier_threaded(&a, &b, &data, 9, 4).unwrap();
        assert_eq!(one.losses, four.losses);
        assert_eq!(one.barrier, four.barrier);
    }

    #[test]
    fn barrier_rejects_bad_inputs() {
        let a = model(13);
        let b = model(14);
        assert!(matches!(
            barrier(&a, &b, &dataset(16, 1), 2),
            Err(Error::ConfigMismatch { .. })
        ));
        assert!(matches!(barrier(&a, &b, &[], 5), Err(Error::EmptyInput { .. })));
        let other = TransformerParams::init(&config().with_d_h(16), 15).unwrap();
        assert!(matches!(
            barrier(&a, &other, &dataset(17, 1), 5),
            Err(Error::ConfigMismatch { .. }) | Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn identical_models_have_zero_simplex_deviation() {
        let a = model(16);
        let data = dataset(18, 1);
        let report = multi_barrier(&[&a, &a, &a], &data, 4, SimplexMode::UniformSimplex, 7).unwrap();
        assert!(report.barrier.abs() <= 1e-12);
        assert!(report.deviations.iter().all(|&d| d.abs() <= 1e-12));
        // vertices, 3 edge midpoints, centroid, 4 samples
        assert_eq!(report.labels.len(), 3 + 3 + 1 + 4);
        for w in &report.weights {
            assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            assert!(w.iter().all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn two_model_simplex_grid_reduces_to_pairwise_barrier() {
        let a = model(17);
        let b = model(18);
        let data = dataset(19, 2);
        let pair = barrier(&a, &b, &data, 25).unwrap();
        let simplex = multi_barrier(&[&a, &b], &data, 24, SimplexMode::Grid, 0).unwrap();
        assert!((simplex.barrier - pair.barrier).abs() <= 1e-12);
        // Every pairwise grid loss appears at the matching barycentric point.
        for (i, &l) in pair.lambda_grid.iter().enumerate() {
            let j = simplex
                .weights
                .iter()
                .position(|w| (w[0] - l).abs() <= 1e-12)
                .unwrap();
            assert!((simplex.losses[j] - pair.losses[i]).abs() <= 1e-12);
        }
    }

    #[test]
    fn mixture_weights_eps_like_any_parameter() {
        let a = model(19);
        let mut b = model(20);
        b.config.eps = 2e-5;
        let mid = interpolate(&a, &b, 0.25).unwrap();
        assert!((mid.config.eps - (0.25 * 1e-5 + 0.75 * 2e-5)).abs() <= 1e-20);
        let mixed = mixture(&[&a, &b], &[0.25, 0.75]).unwrap();
        assert_eq!(mixed, mid);
    }
}
