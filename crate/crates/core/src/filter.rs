//! Offline filter design: the full schedule of gains, error covariances and
//! innovation covariances is computed before any optimization, since it only
//! depends on `P̃₀⁻` and the measurement statistics.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{symmetrize, SymMatrix};
use crate::model::ProblemSpec;

/// One stage of the designed filter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterStage {
    /// Gain `L_k` (underweighted when `p < 1`).
    #[serde(rename = "L", with = "crate::serde_util::mat")]
    pub gain: DMatrix<f64>,
    /// A priori error covariance `P̃_k⁻`.
    #[serde(rename = "Ptilde_minus")]
    pub err_cov_prior: SymMatrix,
    /// A posteriori error covariance `P̃_k`.
    #[serde(rename = "Ptilde")]
    pub err_cov: SymMatrix,
    /// Innovation covariance `P_{ỹ_k⁻}`.
    #[serde(rename = "Pinno")]
    pub innovation_cov: SymMatrix,
}

/// Per-stage gains and covariances for `k = 0..N-1`, all fixed before the
/// control optimization sees the problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterSchedule {
    pub stages: Vec<FilterStage>,
    /// Underweighting factor the schedule was designed with.
    pub underweight_p: f64,
}

impl FilterSchedule {
    pub fn len(&self) -> usize {
        self.stages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stages.is_empty()
    }

    pub fn stage(&self, k: usize) -> &FilterStage {
        &self.stages[k]
    }
}

/// Computes the (possibly underweighted) gain
/// `L = P̃⁻ Hᵀ ((1/p) H P̃⁻ Hᵀ + R)⁻¹`; `p = 1` reproduces the optimal gain.
pub fn kalman_gain(
    ptilde_minus: &SymMatrix,
    h: &DMatrix<f64>,
    r: &SymMatrix,
    p: f64,
) -> Result<DMatrix<f64>> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::Precondition(format!(
            "underweighting factor must lie in (0, 1], got {p}"
        )));
    }
    check_measurement_dims(ptilde_minus, h, r)?;
    let inno = (h * ptilde_minus.as_matrix() * h.transpose()).scale(1.0 / p) + r.as_matrix();
    // Symmetric positive-definite factorization; a singular innovation matrix
    // indicates a modeling error and is surfaced, never pseudo-inverted.
    let chol = nalgebra::linalg::Cholesky::new(symmetrize(&inno)?.into_matrix())
        .ok_or_else(|| Error::Singular("innovation matrix is not positive definite".into()))?;
    Ok(ptilde_minus.as_matrix() * h.transpose() * chol.inverse())
}

/// Joseph-form measurement update
/// `P̃ = (I − L H) P̃⁻ (I − L H)ᵀ + L R Lᵀ`, valid for any gain.
pub fn joseph_update(
    ptilde_minus: &SymMatrix,
    l: &DMatrix<f64>,
    h: &DMatrix<f64>,
    r: &SymMatrix,
) -> Result<SymMatrix> {
    check_measurement_dims(ptilde_minus, h, r)?;
    let nx = ptilde_minus.dim();
    if l.nrows() != nx || l.ncols() != h.nrows() {
        return Err(Error::Dimension(format!(
            "gain must be {nx}x{}, got {}x{}",
            h.nrows(),
            l.nrows(),
            l.ncols()
        )));
    }
    let ilh = DMatrix::identity(nx, nx) - l * h;
    let updated =
        &ilh * ptilde_minus.as_matrix() * ilh.transpose() + l * r.as_matrix() * l.transpose();
    symmetrize(&updated)
}

/// Time update `P̃⁻_{k+1} = A P̃ Aᵀ + G Gᵀ`.
pub fn time_update(ptilde: &SymMatrix, a: &DMatrix<f64>, g: &DMatrix<f64>) -> Result<SymMatrix> {
    let nx = ptilde.dim();
    if a.nrows() != nx || a.ncols() != nx || g.nrows() != nx {
        return Err(Error::Dimension(format!(
            "time update: A must be {nx}x{nx} and G must have {nx} rows"
        )));
    }
    symmetrize(&(a * ptilde.as_matrix() * a.transpose() + g * g.transpose()))
}

/// Innovation covariance `P_{ỹ⁻} = H P̃⁻ Hᵀ + R`.
pub fn innovation_cov(
    ptilde_minus: &SymMatrix,
    h: &DMatrix<f64>,
    r: &SymMatrix,
) -> Result<SymMatrix> {
    check_measurement_dims(ptilde_minus, h, r)?;
    symmetrize(&(h * ptilde_minus.as_matrix() * h.transpose() + r.as_matrix()))
}

/// Designs the whole filter schedule for `k = 0..N-1`.
///
/// The schedule is independent of the control variables; singularity failures
/// carry the stage index.
pub fn design_filter(spec: &ProblemSpec) -> Result<FilterSchedule> {
    let n = spec.horizon;
    let p = spec.underweight_p;
    let mut stages = Vec::with_capacity(n);
    let mut ptilde_minus = spec.boundary.ptilde0().clone();
    for k in 0..n {
        let st = spec.stage(k);
        let gain = kalman_gain(&ptilde_minus, &st.h, &st.r, p).map_err(|e| stage_err(e, k))?;
        let err_cov = joseph_update(&ptilde_minus, &gain, &st.h, &st.r)?;
        let inno = innovation_cov(&ptilde_minus, &st.h, &st.r)?;
        let next_prior = time_update(&err_cov, &st.a, &st.g)?;
        stages.push(FilterStage {
            gain,
            err_cov_prior: ptilde_minus,
            err_cov,
            innovation_cov: inno,
        });
        ptilde_minus = next_prior;
    }
    Ok(FilterSchedule {
        stages,
        underweight_p: p,
    })
}

fn stage_err(e: Error, k: usize) -> Error {
    match e {
        Error::Singular(msg) => Error::Singular(format!("stage {k}: {msg}")),
        other => other,
    }
}

fn check_measurement_dims(ptilde: &SymMatrix, h: &DMatrix<f64>, r: &SymMatrix) -> Result<()> {
    if h.ncols() != ptilde.dim() || r.dim() != h.nrows() {
        return Err(Error::Dimension(format!(
            "measurement shapes do not conform: P̃ is {n}x{n}, H is {hr}x{hc}, R is {r}x{r}",
            n = ptilde.dim(),
            hr = h.nrows(),
            hc = h.ncols(),
            r = r.dim()
        )));
    }
    Ok(())
}
