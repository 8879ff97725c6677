//! Spectral comparison of residual maps found by different matchers.
//!
//! An orthogonal matrix rotates in a set of invariant planes; the rotation
//! angles are the arguments of its (complex) eigenvalues. Comparing the
//! weight-matching map's angles with those of `O_diff = O_LM·O_WMᵀ` shows
//! how much the learned matcher actually moves the basis: angles of `O_diff`
//! concentrated near 0 mean learned matching only refines the
//! weight-matching solution.

use crate::error::{Error, Result};
use crate::linalg::eigen_angles;
use crate::symmetry::OrthogonalMap;

#[derive(Debug, Clone, serde::Serialize)]
pub struct OrthogonalDiffReport {
    /// Rotation angles of the weight-matching map, in `(-π, π]`, ascending.
    pub wm_angles: Vec<f64>,
    /// Rotation angles of `O_LM·O_WMᵀ`, in `(-π, π]`, ascending.
    pub diff_angles: Vec<f64>,
    /// Mean resultant length of the weight-matching angles (1 = all equal).
    pub wm_concentration: f64,
    /// Mean resultant length of the difference angles.
    pub diff_concentration: f64,
}

/// Folds an angle from `[0, 2π)` into the signed range `(-π, π]`, so that a
/// conjugate eigenvalue pair reads as `±θ` and near-identity maps report
/// angles near zero.
fn signed(angle: f64) -> f64 {
    if angle > std::f64::consts::PI {
        angle - 2.0 * std::f64::consts::PI
    } else {
        angle
    }
}

/// Circular concentration: the norm of the mean unit vector of the angles.
fn concentration(angles: &[f64]) -> f64 {
    if angles.is_empty() {
        return 0.0;
    }
    let n = angles.len() as f64;
    let c: f64 = angles.iter().map(|a| a.cos()).sum::<f64>() / n;
    let s: f64 = angles.iter().map(|a| a.sin()).sum::<f64>() / n;
    (c * c + s * s).sqrt()
}

/// Compares the weight-matching residual map with a learned one via the
/// rotation angles of `O_diff = O_LM·O_WMᵀ`.
pub fn orthogonal_diff_analysis(
    o_wm: &OrthogonalMap,
    o_lm: &OrthogonalMap,
) -> Result<OrthogonalDiffReport> {
    let wm = o_wm.matrix();
    let lm = o_lm.matrix();
    if wm.dims() != lm.dims() || wm.rows() != wm.cols() {
        return Err(Error::ShapeMismatch {
            op: "orthogonal_diff_analysis",
            expected: format!("square maps of equal size, got {:?}", wm.dims()),
            got: format!("{:?}", lm.dims()),
        });
    }
    let diff = lm.matmul_transb(wm)?;
    let mut wm_angles: Vec<f64> = eigen_angles(wm)?.into_iter().map(signed).collect();
    let mut diff_angles: Vec<f64> = eigen_angles(&diff)?.into_iter().map(signed).collect();
    wm_angles.sort_by(|a, b| a.partial_cmp(b).unwrap());
    diff_angles.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let wm_concentration = concentration(&wm_angles);
    let diff_concentration = concentration(&diff_angles);
    Ok(OrthogonalDiffReport {
        wm_angles,
        diff_angles,
        wm_concentration,
        diff_concentration,
    })
}
