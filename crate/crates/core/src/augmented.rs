//! Augmented-state statistics: the joint covariance of the true state and
//! its estimate, initial-covariance builders for the two orthogonality
//! scenarios, the filter/control covariance updates, and the prior-work
//! recursion kept around as an equivalence oracle and comparison output.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::FilterSchedule;
use crate::linalg::{self, symmetrize, SymMatrix};
use crate::model::{Policy, ProblemSpec, StageModel};

/// Whether the moments are taken before or after the measurement update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    APriori,
    APosteriori,
}

/// Mean and `2n_x` joint covariance of `[x; x̂]` at one stage.
///
/// Block layout: truth covariance `P` upper-left, estimate covariance `P̂`
/// lower-right, cross-covariance `Σ = Cov(x̂, x)` lower-left.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentedMoments {
    #[serde(with = "crate::serde_util::vec")]
    pub mu: DVector<f64>,
    pub paug: SymMatrix,
    pub phase: Phase,
}

impl AugmentedMoments {
    pub fn nx(&self) -> usize {
        self.paug.dim() / 2
    }

    pub fn truth_block(&self) -> SymMatrix {
        truth_block(&self.paug)
    }

    pub fn estimate_block(&self) -> SymMatrix {
        estimate_block(&self.paug)
    }

    pub fn cross_block(&self) -> DMatrix<f64> {
        cross_block(&self.paug)
    }
}

/// Truth covariance `P`: upper-left `n_x` block.
pub fn truth_block(paug: &SymMatrix) -> SymMatrix {
    let nx = paug.dim() / 2;
    let view = paug.as_matrix().view((0, 0), (nx, nx)).into_owned();
    SymMatrix::new(view).expect("square block")
}

/// Estimate covariance `P̂` (or `P̂⁻`): lower-right `n_x` block.
pub fn estimate_block(paug: &SymMatrix) -> SymMatrix {
    let nx = paug.dim() / 2;
    let view = paug.as_matrix().view((nx, nx), (nx, nx)).into_owned();
    SymMatrix::new(view).expect("square block")
}

/// Cross covariance `Σ = Cov(x̂, x)`: lower-left `n_x` block.
pub fn cross_block(paug: &SymMatrix) -> DMatrix<f64> {
    let nx = paug.dim() / 2;
    paug.as_matrix().view((nx, 0), (nx, nx)).into_owned()
}

/// The block matrices driving the augmented covariance recursions.
#[derive(Debug, Clone)]
pub struct PropagationMatrices {
    /// Measurement-update map `Φ = [[I, 0], [L H, I − L H]]`.
    pub phi: DMatrix<f64>,
    /// Measurement-noise contribution `blockdiag(0, L R Lᵀ)`.
    pub lblk: DMatrix<f64>,
    /// `blockdiag(A, A)`.
    pub ablk: DMatrix<f64>,
    /// `blockdiag(B, B)`.
    pub bblk: DMatrix<f64>,
    /// `[[0, K], [0, K]]`.
    pub kblk: DMatrix<f64>,
    /// Process-noise contribution `blockdiag(G Gᵀ, 0)`.
    pub qblk: DMatrix<f64>,
}

impl PropagationMatrices {
    pub fn new(stage: &StageModel, l: &DMatrix<f64>, k: &DMatrix<f64>) -> Self {
        let nx = stage.a.nrows();
        let lh = l * &stage.h;
        let mut phi = DMatrix::zeros(2 * nx, 2 * nx);
        phi.view_mut((0, 0), (nx, nx))
            .copy_from(&DMatrix::identity(nx, nx));
        phi.view_mut((nx, 0), (nx, nx)).copy_from(&lh);
        phi.view_mut((nx, nx), (nx, nx))
            .copy_from(&(DMatrix::identity(nx, nx) - &lh));

        let mut lblk = DMatrix::zeros(2 * nx, 2 * nx);
        lblk.view_mut((nx, nx), (nx, nx))
            .copy_from(&(l * stage.r.as_matrix() * l.transpose()));

        let mut ablk = DMatrix::zeros(2 * nx, 2 * nx);
        ablk.view_mut((0, 0), (nx, nx)).copy_from(&stage.a);
        ablk.view_mut((nx, nx), (nx, nx)).copy_from(&stage.a);

        let nu = stage.b.ncols();
        let mut bblk = DMatrix::zeros(2 * nx, 2 * nu);
        bblk.view_mut((0, 0), (nx, nu)).copy_from(&stage.b);
        bblk.view_mut((nx, nu), (nx, nu)).copy_from(&stage.b);

        let mut kblk = DMatrix::zeros(2 * nu, 2 * nx);
        kblk.view_mut((0, nx), (nu, nx)).copy_from(k);
        kblk.view_mut((nu, nx), (nu, nx)).copy_from(k);

        let gg = &stage.g * stage.g.transpose();
        let mut qblk = DMatrix::zeros(2 * nx, 2 * nx);
        qblk.view_mut((0, 0), (nx, nx)).copy_from(&gg);

        PropagationMatrices {
            phi,
            lblk,
            ablk,
            bblk,
            kblk,
            qblk,
        }
    }
}

/// Initial joint covariance when the estimation error is orthogonal to the
/// estimate: `[[P̂₀⁻ + P̃₀⁻, P̂₀⁻], [P̂₀⁻, P̂₀⁻]]`.
pub fn build_case1_init(ptilde0_minus: &SymMatrix, phat0_minus: &SymMatrix) -> Result<SymMatrix> {
    check_init_pair("Case 1", ptilde0_minus, phat0_minus)?;
    let sum = symmetrize(&(phat0_minus.as_matrix() + ptilde0_minus.as_matrix()))?;
    Ok(assemble_blocks(&sum, phat0_minus, phat0_minus))
}

/// Initial joint covariance when the estimation error is orthogonal to the
/// TRUE state: `[[P₀, P₀], [P₀, P₀ + P̃₀⁻]]`.
pub fn build_case2_init(ptilde0_minus: &SymMatrix, p0: &SymMatrix) -> Result<SymMatrix> {
    check_init_pair("Case 2", ptilde0_minus, p0)?;
    let sum = symmetrize(&(p0.as_matrix() + ptilde0_minus.as_matrix()))?;
    Ok(assemble_blocks(p0, p0, &sum))
}

fn check_init_pair(label: &str, a: &SymMatrix, b: &SymMatrix) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Dimension(format!(
            "{label}: blocks must share dimension, got {} and {}",
            a.dim(),
            b.dim()
        )));
    }
    let tol = |m: &SymMatrix| 1e-10 * (1.0 + m.norm());
    if !linalg::is_psd(a, tol(a)) || !linalg::is_psd(b, tol(b)) {
        return Err(Error::Precondition(format!("{label}: inputs must be PSD")));
    }
    Ok(())
}

fn assemble_blocks(truth: &SymMatrix, cross: &SymMatrix, estimate: &SymMatrix) -> SymMatrix {
    let nx = truth.dim();
    let mut m = DMatrix::zeros(2 * nx, 2 * nx);
    m.view_mut((0, 0), (nx, nx)).copy_from(truth.as_matrix());
    m.view_mut((0, nx), (nx, nx))
        .copy_from(&cross.as_matrix().transpose());
    m.view_mut((nx, 0), (nx, nx)).copy_from(cross.as_matrix());
    m.view_mut((nx, nx), (nx, nx))
        .copy_from(estimate.as_matrix());
    SymMatrix::new(m).expect("assembled block matrix is square")
}

/// Mean propagation `μ_{k+1} = A μ_k + B ū_k`.
///
/// Decoupled from the covariance: the true state, the estimate and the
/// a priori estimate all share the mean under the unbiasedness assumption.
pub fn mean_step(
    mu: &DVector<f64>,
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    ubar: &DVector<f64>,
) -> DVector<f64> {
    assert_eq!(a.ncols(), mu.len(), "mean step: A and μ must conform");
    assert_eq!(b.ncols(), ubar.len(), "mean step: B and ū must conform");
    a * mu + b * ubar
}

/// Augmented covariance measurement update `𝐏_k = Φ 𝐏_k⁻ Φᵀ + 𝐋`.
///
/// Output is explicitly symmetrized; the truth block passes through
/// untouched (the first block row of `Φ` is `[I, 0]`).
pub fn cov_filter_update(
    paug_minus: &SymMatrix,
    stage: &StageModel,
    l: &DMatrix<f64>,
) -> SymMatrix {
    let nx = stage.a.nrows();
    assert_eq!(paug_minus.dim(), 2 * nx, "augmented covariance size");
    let mats = PropagationMatrices::new(stage, l, &DMatrix::zeros(stage.b.ncols(), nx));
    let prop = &mats.phi * paug_minus.as_matrix() * mats.phi.transpose() + &mats.lblk;
    symmetrize(&prop).expect("propagated covariance is square")
}

/// Augmented covariance control update
/// `𝐏⁻_{k+1} = (𝐀 + 𝐁𝐊) 𝐏_k (𝐀 + 𝐁𝐊)ᵀ + 𝐐`.
///
/// Used in policy evaluation and Monte Carlo prediction; the convex
/// subproblem uses the expanded affine form instead.
pub fn cov_control_update(paug: &SymMatrix, stage: &StageModel, k: &DMatrix<f64>) -> SymMatrix {
    let nx = stage.a.nrows();
    assert_eq!(paug.dim(), 2 * nx, "augmented covariance size");
    let mats = PropagationMatrices::new(stage, &DMatrix::zeros(nx, stage.h.nrows()), k);
    let closed = &mats.ablk + &mats.bblk * &mats.kblk;
    let prop = &closed * paug.as_matrix() * closed.transpose() + &mats.qblk;
    symmetrize(&prop).expect("propagated covariance is square")
}

/// Moments of one stage: shared mean plus both covariance phases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageMoments {
    #[serde(with = "crate::serde_util::vec")]
    pub mu: DVector<f64>,
    #[serde(rename = "Paug_minus")]
    pub paug_minus: SymMatrix,
    #[serde(rename = "Paug")]
    pub paug: SymMatrix,
}

impl StageMoments {
    pub fn a_priori(&self) -> AugmentedMoments {
        AugmentedMoments {
            mu: self.mu.clone(),
            paug: self.paug_minus.clone(),
            phase: Phase::APriori,
        }
    }

    pub fn a_posteriori(&self) -> AugmentedMoments {
        AugmentedMoments {
            mu: self.mu.clone(),
            paug: self.paug.clone(),
            phase: Phase::APosteriori,
        }
    }
}

/// Propagates mean and augmented covariance through the whole horizon under
/// a fixed policy. This is the authoritative prediction for a recovered
/// policy.
pub fn propagate(
    spec: &ProblemSpec,
    schedule: &FilterSchedule,
    policy: &Policy,
) -> Result<Vec<StageMoments>> {
    let n = spec.horizon;
    if schedule.len() != n || policy.len() != n {
        return Err(Error::Dimension(format!(
            "propagate: expected schedule and policy of length {n}, got {} and {}",
            schedule.len(),
            policy.len()
        )));
    }
    let mut out = Vec::with_capacity(n);
    let mut mu = spec.boundary.mu0.clone();
    let mut paug_minus = spec.boundary.paug0()?;
    for k in 0..n {
        let st = spec.stage(k);
        let paug = cov_filter_update(&paug_minus, st, &schedule.stage(k).gain);
        let next = if k + 1 < n {
            Some((
                cov_control_update(&paug, st, &policy.gains[k]),
                mean_step(&mu, &st.a, &st.b, &policy.feedforward[k]),
            ))
        } else {
            None
        };
        out.push(StageMoments {
            mu: mu.clone(),
            paug_minus,
            paug,
        });
        match next {
            Some((pm, m)) => {
                paug_minus = pm;
                mu = m;
            }
            None => break,
        }
    }
    Ok(out)
}

/// Prior-work covariance recursion: estimate covariance driven by the
/// closed-loop map plus the innovation term, truth covariance recovered as
/// `P_k = P̂_k + P̃_k`.
///
/// Valid only under the orthogonality principle, i.e. the optimal gain;
/// calling it with `p ≠ 1` is a precondition error.
pub fn legacy_recursion(
    spec: &ProblemSpec,
    schedule: &FilterSchedule,
    policy: &Policy,
) -> Result<Vec<(SymMatrix, SymMatrix)>> {
    if schedule.underweight_p != 1.0 {
        return Err(Error::Precondition(format!(
            "the orthogonality-based recursion requires the optimal gain (p = 1), \
             schedule was designed with p = {}",
            schedule.underweight_p
        )));
    }
    legacy_recursion_naive(spec, schedule, policy)
}

/// The same recursion with the gain check skipped: the prediction a method
/// that assumes orthogonality would make, regardless of whether the gain is
/// optimal. Used to reproduce the comparison where that assumption visibly
/// fails for underweighted gains.
pub fn legacy_recursion_naive(
    spec: &ProblemSpec,
    schedule: &FilterSchedule,
    policy: &Policy,
) -> Result<Vec<(SymMatrix, SymMatrix)>> {
    let n = spec.horizon;
    if schedule.len() != n || policy.len() != n {
        return Err(Error::Dimension(format!(
            "legacy recursion: expected schedule and policy of length {n}, got {} and {}",
            schedule.len(),
            policy.len()
        )));
    }
    let paug0 = spec.boundary.paug0()?;
    let phat0_minus = estimate_block(&paug0);
    let st0 = schedule.stage(0);
    let l0 = &st0.gain;
    let mut phat = symmetrize(
        &(phat0_minus.as_matrix() + l0 * st0.innovation_cov.as_matrix() * l0.transpose()),
    )?;
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        let p_truth = symmetrize(&(phat.as_matrix() + schedule.stage(k).err_cov.as_matrix()))?;
        out.push((phat.clone(), p_truth));
        if k + 1 < n {
            let st = spec.stage(k);
            let closed = &st.a + &st.b * &policy.gains[k];
            let fs = schedule.stage(k + 1);
            let next = &closed * phat.as_matrix() * closed.transpose()
                + &fs.gain * fs.innovation_cov.as_matrix() * fs.gain.transpose();
            phat = symmetrize(&next)?;
        }
    }
    Ok(out)
}
