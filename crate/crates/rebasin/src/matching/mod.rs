//! Alignment estimators.
//!
//! Four ways to find the alignment maps relating two trained transformers:
//!
//! - [`weight_match`]: coordinate descent on weight-space similarity — linear
//!   assignment for the FFN and head permutations, Procrustes for the global
//!   residual map;
//! - [`activation_match`]: correlation matching of unit activations on a
//!   shared probe set;
//! - [`learned_match`]: gradient-based refinement that minimizes the task
//!   loss of the interpolated model, with straight-through projections onto
//!   permutations and orthogonal matrices;
//! - [`soft_learned_match`]: a fully differentiable relaxation where the
//!   permutations are doubly-stochastic matrices produced by Sinkhorn
//!   normalization.

mod activation;
mod align_expr;
mod analysis;
mod learned;
mod soft;
#[cfg(test)]
mod tests;
mod wm;

pub use activation::{activation_match, ActivationMatchReport};
pub use analysis::{orthogonal_diff_analysis, OrthogonalDiffReport};
pub use learned::{
    alignment_objective, alignment_objective_grads, learned_match, AlignTensors,
    LearnedMatchReport,
};
pub use soft::{soft_apply, soft_learned_match, SoftMaps, SoftMatchReport};
pub use wm::{weight_match, WeightMatchReport};

pub(crate) use align_expr::{aligned_model, mix_models, AlignVars};
pub(crate) use learned::{latents_from_maps, maps_from_latents, project_latents};

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::symmetry::Permutation;
use crate::transformer::TransformerParams;
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rand_distr::Distribution;

/// Which estimator to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatchMethod {
    Weight,
    Activation,
    Learned,
    Soft,
}

impl MatchMethod {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "weight" => Ok(Self::Weight),
            "activation" => Ok(Self::Activation),
            "learned" => Ok(Self::Learned),
            "soft" => Ok(Self::Soft),
            other => Err(Error::ConfigMismatch {
                detail: format!("unknown matching method {other:?}"),
            }),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Weight => "weight",
            Self::Activation => "activation",
            Self::Learned => "learned",
            Self::Soft => "soft",
        }
    }
}

/// Starting point for the learned and soft matchers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitStrategy {
    WeightMatching,
    Identity,
    Random,
}

impl InitStrategy {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "weight-matching" => Ok(Self::WeightMatching),
            "identity" => Ok(Self::Identity),
            "random" => Ok(Self::Random),
            other => Err(Error::ConfigMismatch {
                detail: format!("unknown init strategy {other:?}"),
            }),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::WeightMatching => "weight-matching",
            Self::Identity => "identity",
            Self::Random => "random",
        }
    }
}

/// How weight matching treats the residual basis: a full orthogonal map or a
/// permutation of residual coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResidualMatching {
    Orthogonal,
    Permutation,
}

impl ResidualMatching {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "orthogonal" => Ok(Self::Orthogonal),
            "permutation" => Ok(Self::Permutation),
            other => Err(Error::ConfigMismatch {
                detail: format!("unknown residual matching {other:?}"),
            }),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Orthogonal => "orthogonal",
            Self::Permutation => "permutation",
        }
    }
}

/// Distribution of the interpolation coefficient λ drawn at each step of the
/// learned and soft matchers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LambdaSampler {
    /// Always the midpoint.
    Fixed,
    /// Uniform on (0.4, 0.6).
    UniformNarrow,
    /// Uniform on (0, 1).
    UniformFull,
    /// Normal(0.5, 0.1) clipped to [0, 1].
    Gaussian,
}

impl LambdaSampler {
    pub fn sample(self, r: &mut ChaCha20Rng) -> f64 {
        match self {
            Self::Fixed => 0.5,
            Self::UniformNarrow => r.random_range(0.4..0.6),
            Self::UniformFull => r.random_range(0.0..1.0),
            Self::Gaussian => {
                let n = rand_distr::Normal::new(0.5_f64, 0.1).expect("valid normal");
                n.sample(r).clamp(0.0, 1.0)
            }
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "fixed-0.5" => Ok(Self::Fixed),
            "uniform-0.4-0.6" => Ok(Self::UniformNarrow),
            "uniform-0-1" => Ok(Self::UniformFull),
            "gaussian-0.5-0.1" => Ok(Self::Gaussian),
            other => Err(Error::ConfigMismatch {
                detail: format!("unknown lambda sampler {other:?}"),
            }),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Fixed => "fixed-0.5",
            Self::UniformNarrow => "uniform-0.4-0.6",
            Self::UniformFull => "uniform-0-1",
            Self::Gaussian => "gaussian-0.5-0.1",
        }
    }
}

/// Settings shared by all matchers; each matcher reads the fields it uses.
#[derive(Debug, Clone)]
pub struct MatchConfig {
    pub method: MatchMethod,
    /// Coordinate-descent sweeps for weight matching.
    pub wm_iterations: usize,
    /// Gradient steps for the learned and soft matchers.
    pub learn_iterations: usize,
    /// Adam learning rate.
    pub lr: f64,
    pub lambda_sampler: LambdaSampler,
    /// Sinkhorn rounds per step in soft matching.
    pub sinkhorn_iters: usize,
    pub init: InitStrategy,
    /// Noise coefficient ε for soft-matching initialization
    /// (`a = ε·σ·√3` with Xavier σ).
    pub noise: f64,
    pub seed: u64,
    pub residual: ResidualMatching,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            method: MatchMethod::Weight,
            wm_iterations: 5,
            learn_iterations: 100,
            lr: 1e-3,
            lambda_sampler: LambdaSampler::UniformNarrow,
            sinkhorn_iters: 50,
            init: InitStrategy::WeightMatching,
            noise: 0.1,
            seed: 0,
            residual: ResidualMatching::Orthogonal,
        }
    }
}

impl MatchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.wm_iterations == 0 || self.learn_iterations == 0 || self.sinkhorn_iters == 0 {
            return Err(Error::ConfigMismatch {
                detail: "matching iteration counts must be positive".into(),
            });
        }
        if !self.lr.is_finite() || self.lr < 0.0 || !self.noise.is_finite() || self.noise < 0.0 {
            return Err(Error::ConfigMismatch {
                detail: "matching lr and noise must be finite and non-negative".into(),
            });
        }
        Ok(())
    }
}

/// Unconstrained latent matrices for the learned matcher: one per FFN layer,
/// one per head block, and one for the residual basis.
#[derive(Debug, Clone)]
pub struct LatentAlignment {
    pub z_ff: Vec<Matrix>,
    pub z_h: Vec<Matrix>,
    pub z_o: Matrix,
}

/// Nearest permutation to `z`, maximizing `⟨P, Z⟩` by linear assignment.
/// Idempotent on permutation matrices.
pub fn project_permutation(z: &Matrix) -> Result<Permutation> {
    if z.rows() != z.cols() {
        return Err(Error::NotSquare {
            op: "project_permutation",
            rows: z.rows(),
            cols: z.cols(),
        });
    }
    let assign = linalg::linear_assignment(z, true)?;
    let mut sigma = vec![0usize; assign.len()];
    for (d, &s) in assign.iter().enumerate() {
        sigma[s] = d;
    }
    Permutation::new(sigma)
}

/// Nearest orthogonal matrix to `z`: the polar factor `U·Vᵀ` of its SVD.
/// Idempotent on orthogonal matrices.
pub fn project_orthogonal(z: &Matrix) -> Result<Matrix> {
    if z.rows() != z.cols() {
        return Err(Error::NotSquare {
            op: "project_orthogonal",
            rows: z.rows(),
            cols: z.cols(),
        });
    }
    let f = linalg::svd(z)?;
    f.u.matmul_transb(&f.v)
}

/// Matching needs structurally identical models: equal configs (the norm
/// epsilon may differ — width-expanded models rescale it) and equal tensor
/// shapes layer by layer.
pub(crate) fn check_same_arch(
    a: &TransformerParams,
    b: &TransformerParams,
    op: &'static str,
) -> Result<()> {
    let mut ca = a.config.clone();
    let mut cb = b.config.clone();
    ca.eps = 0.0;
    cb.eps = 0.0;
    if ca != cb {
        return Err(Error::ConfigMismatch {
            detail: format!("{op}: models have different architectures"),
        });
    }
    let av = a.tensor_views();
    let bv = b.tensor_views();
    if av.len() != bv.len() {
        return Err(Error::ConfigMismatch {
            detail: format!("{op}: models have different tensor counts"),
        });
    }
    for ((name, ta), (_, tb)) in av.iter().zip(&bv) {
        if ta.dims() != tb.dims() {
            return Err(Error::ShapeMismatch {
                op,
                expected: format!("{name} {}x{}", ta.rows(), ta.cols()),
                got: format!("{}x{}", tb.rows(), tb.cols()),
            });
        }
    }
    Ok(())
}
