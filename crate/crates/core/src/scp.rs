//! Outer sequential-convex-programming loop: solve the relaxation, then
//! iterate rank-penalized subproblems with augmented-Lagrangian multiplier
//! updates until the rank surrogate and the objective both settle, and emit
//! the recovered policy together with a convergence trace.

use std::time::Instant;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::augmented::{self, StageMoments};
use crate::error::Error;
use crate::filter::{design_filter, FilterSchedule};
use crate::linalg::{eig_sym, SymMatrix};
use crate::model::{Policy, ProblemSpec};
use crate::sdp::{self, ClarabelBackend, ConicBackend, SolveStatus, SubproblemSolution};

/// Hard ceiling on the penalty weight; growing past this destroys backend
/// conditioning long before it helps convergence.
pub const MAX_WEIGHT: f64 = 1e8;

/// Residual relaxation slack makes the re-propagated moments drift away from
/// the subproblem's decision variables; the loop keeps tightening until the
/// worst per-entry drift falls below this, so the recovered policy actually
/// reproduces the covariances the subproblem promised.
pub const SELF_CONSISTENCY_TOL: f64 = 1e-6;

/// State of the rank-minimization iteration.
#[derive(Debug, Clone)]
pub struct IrmState {
    /// Iterate counter `i`; the relaxed solve is iterate 0.
    pub iter: usize,
    /// Per-stage orthonormal eigenvectors of the `m − n_x` smallest
    /// eigenvalues of `M_k` from the latest solve.
    pub eigvecs: Vec<DMatrix<f64>>,
    /// Per-stage rank surrogates (the `(m − n_x)`-th smallest eigenvalue).
    pub e_vals: Vec<f64>,
    /// Per-stage Lagrange multipliers.
    pub lambdas: Vec<f64>,
    /// Current penalty weight `w^{(i)} = w₀ βⁱ`.
    pub weight: f64,
    /// Objective of the latest solve.
    pub j_prev: f64,
}

/// One row of the convergence trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iter: usize,
    pub max_e: f64,
    pub objective: f64,
    /// `|J^{(i)} − J^{(i−1)}|`; absent on the relaxed solve.
    pub delta_j: Option<f64>,
    pub weight: f64,
    pub e_vals: Vec<f64>,
    /// Per-stage relaxation gap; absent if an estimate block was singular.
    pub gaps: Option<Vec<f64>>,
    /// Worst per-entry drift between re-propagated moments and subproblem
    /// variables; only evaluated once the loop guard would release.
    pub reprop_drift: Option<f64>,
    pub wall_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceTrace {
    pub iterations: Vec<IterationRecord>,
    pub converged: bool,
}

impl ConvergenceTrace {
    fn empty() -> Self {
        ConvergenceTrace {
            iterations: Vec::new(),
            converged: false,
        }
    }
}

/// Why a run stopped without a policy.
#[derive(Debug)]
pub enum ScpFailureKind {
    /// A subproblem was infeasible (iterate index attached).
    Infeasible { iter: usize },
    /// The backend reported numerical trouble.
    NumericalTrouble { iter: usize },
    /// Loop guard never released within the iteration budget or weight cap.
    NoConvergence { iters: usize },
    /// Infrastructure failure (filter design, decoding, ...).
    Internal(Error),
}

/// Failed run with whatever trace was accumulated.
#[derive(Debug)]
pub struct ScpFailure {
    pub kind: ScpFailureKind,
    pub trace: ConvergenceTrace,
}

impl std::fmt::Display for ScpFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match &self.kind {
            ScpFailureKind::Infeasible { iter } => {
                write!(f, "subproblem infeasible at iterate {iter}")
            }
            ScpFailureKind::NumericalTrouble { iter } => {
                write!(f, "backend reported numerical trouble at iterate {iter}")
            }
            ScpFailureKind::NoConvergence { iters } => {
                write!(f, "no convergence after {iters} iterates")
            }
            ScpFailureKind::Internal(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for ScpFailure {}

impl From<Error> for ScpFailure {
    fn from(e: Error) -> Self {
        ScpFailure {
            kind: ScpFailureKind::Internal(e),
            trace: ConvergenceTrace::empty(),
        }
    }
}

/// Successful run output.
#[derive(Debug)]
pub struct ScpOutput {
    pub policy: Policy,
    /// Moments re-propagated through the covariance recursions with the
    /// recovered policy — the authoritative prediction.
    pub predicted: Vec<StageMoments>,
    pub trace: ConvergenceTrace,
    pub schedule: FilterSchedule,
    /// Decision variables of the final subproblem.
    pub final_solution: SubproblemSolution,
    pub state: IrmState,
}

/// Zero-initialized Lagrange multipliers.
pub fn initialize_multipliers(n: usize) -> Vec<f64> {
    vec![0.0; n]
}

/// `λ_k ← λ_k + w e_k` for every stage.
pub fn update_multipliers(lambdas: &mut [f64], weight: f64, e_vals: &[f64]) {
    for (l, e) in lambdas.iter_mut().zip(e_vals) {
        *l += weight * e;
    }
}

/// Eigenvector block and rank surrogate of one stacked matrix: the
/// orthonormal eigenvectors of the `m − n_x` smallest eigenvalues and the
/// `(m − n_x)`-th smallest eigenvalue itself.
pub fn rank_surrogate_from(m: &SymMatrix, nx: usize) -> crate::Result<(DMatrix<f64>, f64)> {
    let dim = m.dim();
    if nx >= dim {
        return Err(Error::Dimension(format!(
            "rank data: matrix of size {dim} cannot drop {nx} directions"
        )));
    }
    let keep = dim - nx;
    let eig = eig_sym(m)?;
    let vecs = eig.vectors.columns(0, keep).into_owned();
    Ok((vecs, eig.values[keep - 1]))
}

/// Per-stage `(V, e)` from an optimal subproblem solution.
pub fn extract_rank_data(
    solution: &SubproblemSolution,
) -> crate::Result<(Vec<DMatrix<f64>>, Vec<f64>)> {
    if solution.status != SolveStatus::Optimal {
        return Err(Error::Precondition(
            "rank data extraction requires an optimal solution".into(),
        ));
    }
    let mut vs = Vec::with_capacity(solution.stages.len());
    let mut es = Vec::with_capacity(solution.stages.len());
    for sv in &solution.stages {
        let m = sdp::stacked_lmi_matrix(sv, solution.nx, solution.nu)?;
        let (v, e) = rank_surrogate_from(&m, solution.nx)?;
        vs.push(v);
        es.push(e);
    }
    Ok((vs, es))
}

/// Runs the full loop with the default backend.
pub fn run(spec: &ProblemSpec) -> Result<ScpOutput, ScpFailure> {
    run_with(&ClarabelBackend::default(), spec)
}

/// Runs the full loop: filter design, relaxed solve, penalized iterates,
/// gain recovery, re-propagation.
pub fn run_with(backend: &dyn ConicBackend, spec: &ProblemSpec) -> Result<ScpOutput, ScpFailure> {
    let started = Instant::now();
    let n = spec.horizon;
    let schedule = design_filter(spec)?;
    let mut trace = ConvergenceTrace::empty();

    let relaxed = sdp::assemble_relaxed(spec, &schedule)?;
    let mut solution = sdp::solve_with(backend, &relaxed)?;
    check_status(&solution, 0, &trace)?;

    let (mut eigvecs, mut e_vals) =
        extract_rank_data(&solution).map_err(|e| internal(e, &trace))?;
    let mut j = solution
        .objective
        .expect("optimal solutions carry objectives");
    let mut lambdas = initialize_multipliers(n);
    let w0 = spec.scp.w0;
    let beta = spec.scp.beta;
    let mut iter = 0usize;
    let mut delta_j: Option<f64> = None;

    push_record(
        &mut trace,
        &solution,
        iter,
        j,
        delta_j,
        w0,
        &e_vals,
        started.elapsed().as_secs_f64(),
    );

    let outputs = loop {
        let max_e = max_abs(&e_vals);
        let settled = delta_j.is_some_and(|d| d < spec.scp.eps_obj);
        if max_e < spec.scp.eps_rank && settled {
            // Algorithm guard released; also require that the recovered
            // policy reproduces the subproblem moments before stopping.
            let policy = sdp::recover_gains(&solution).map_err(|e| internal(e, &trace))?;
            let predicted =
                augmented::propagate(spec, &schedule, &policy).map_err(|e| internal(e, &trace))?;
            let drift = moment_drift(&predicted, &solution);
            if let Some(rec) = trace.iterations.last_mut() {
                rec.reprop_drift = Some(drift);
            }
            if drift <= SELF_CONSISTENCY_TOL {
                trace.converged = true;
                break (policy, predicted);
            }
            log::info!(
                "irm iter {iter}: guard released but re-propagation drift {drift:.3e} \
                 above {SELF_CONSISTENCY_TOL:.1e}, tightening further"
            );
        }
        if iter >= spec.scp.max_iters {
            return Err(ScpFailure {
                kind: ScpFailureKind::NoConvergence { iters: iter },
                trace,
            });
        }
        // λ update with the weight of the just-finished iterate, then
        // geometric growth for the next one.
        update_multipliers(&mut lambdas, w0 * beta.powi(iter as i32), &e_vals);
        iter += 1;
        let weight = w0 * beta.powi(iter as i32);
        if weight > MAX_WEIGHT {
            return Err(ScpFailure {
                kind: ScpFailureKind::NoConvergence { iters: iter },
                trace,
            });
        }

        let iter_started = Instant::now();
        let program = sdp::assemble_irm_iterate(spec, &schedule, &eigvecs, &lambdas, weight)
            .map_err(|e| internal(e, &trace))?;
        solution = sdp::solve_with(backend, &program).map_err(|e| internal(e, &trace))?;
        check_status(&solution, iter, &trace)?;

        let (vs, es) = extract_rank_data(&solution).map_err(|e| internal(e, &trace))?;
        eigvecs = vs;
        e_vals = es;
        let j_new = solution
            .objective
            .expect("optimal solutions carry objectives");
        delta_j = Some((j_new - j).abs());
        j = j_new;

        push_record(
            &mut trace,
            &solution,
            iter,
            j,
            delta_j,
            weight,
            &e_vals,
            iter_started.elapsed().as_secs_f64(),
        );
    };

    let (policy, predicted) = outputs;
    let state = IrmState {
        iter,
        eigvecs,
        e_vals,
        lambdas,
        weight: w0 * beta.powi(iter as i32),
        j_prev: j,
    };
    Ok(ScpOutput {
        policy,
        predicted,
        trace,
        schedule,
        final_solution: solution,
        state,
    })
}

fn internal(e: Error, trace: &ConvergenceTrace) -> ScpFailure {
    ScpFailure {
        kind: ScpFailureKind::Internal(e),
        trace: trace.clone(),
    }
}

fn check_status(
    solution: &SubproblemSolution,
    iter: usize,
    trace: &ConvergenceTrace,
) -> Result<(), ScpFailure> {
    match solution.status {
        SolveStatus::Optimal => Ok(()),
        SolveStatus::Infeasible => Err(ScpFailure {
            kind: ScpFailureKind::Infeasible { iter },
            trace: trace.clone(),
        }),
        SolveStatus::NumericalTrouble => Err(ScpFailure {
            kind: ScpFailureKind::NumericalTrouble { iter },
            trace: trace.clone(),
        }),
    }
}

#[allow(clippy::too_many_arguments)]
fn push_record(
    trace: &mut ConvergenceTrace,
    solution: &SubproblemSolution,
    iter: usize,
    j: f64,
    delta_j: Option<f64>,
    weight: f64,
    e_vals: &[f64],
    wall_secs: f64,
) {
    let max_e = max_abs(e_vals);
    let gaps = sdp::relaxation_gap(solution).ok();
    match &delta_j {
        Some(d) => {
            log::info!("irm iter {iter}: max_e={max_e:.3e} J={j:.6} |dJ|={d:.3e} w={weight:.3e}")
        }
        None => log::info!("irm iter {iter}: max_e={max_e:.3e} J={j:.6} (relaxed) w={weight:.3e}"),
    }
    trace.iterations.push(IterationRecord {
        iter,
        max_e,
        objective: j,
        delta_j,
        weight,
        e_vals: e_vals.to_vec(),
        gaps,
        reprop_drift: None,
        wall_secs,
    });
}

fn max_abs(vals: &[f64]) -> f64 {
    vals.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

/// Worst per-entry difference between re-propagated moments and the
/// subproblem's covariance variables.
fn moment_drift(predicted: &[StageMoments], solution: &SubproblemSolution) -> f64 {
    let mut worst = 0.0_f64;
    for (m, sv) in predicted.iter().zip(&solution.stages) {
        for (a, b) in [(&m.paug, &sv.paug), (&m.paug_minus, &sv.paug_minus)] {
            let d = (a.as_matrix() - b.as_matrix())
                .iter()
                .fold(0.0_f64, |acc, v| acc.max(v.abs()));
            worst = worst.max(d);
        }
    }
    worst
}
