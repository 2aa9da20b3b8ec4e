//! Closed-loop Monte Carlo validation: sample initial conditions per the
//! case-specific procedure, simulate truth/filter/policy dynamics, and
//! compare empirical moments with the predicted augmented moments.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::augmented::{self, StageMoments};
use crate::error::{Error, Result};
use crate::filter::FilterSchedule;
use crate::linalg::{self, eig_sym, symmetrize, SymMatrix};
use crate::model::{BoundaryConditions, InitCov, Policy, ProblemSpec};

/// Which initial-sampling procedure to run.
///
/// Underweighted-gain setups reuse the `Case1` procedure; the difference is
/// entirely in the filter schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SamplingCase {
    #[serde(rename = "case1")]
    Case1,
    #[serde(rename = "case2")]
    Case2,
}

/// Trials per aggregation block; moments are summed sequentially inside a
/// block and blocks are merged pairwise, so aggregates do not depend on the
/// order blocks are computed in.
const BLOCK: usize = 256;

/// Eigenvalues of a sampled covariance in `[-1e-10, 0)` are clamped to zero;
/// anything more negative is an error.
const CLAMP_TOL: f64 = 1e-10;

/// One recorded step of a simulated trial.
#[derive(Debug, Clone)]
pub struct TrialStep {
    /// True state `x_k`.
    pub x: DVector<f64>,
    /// A priori estimate `x̂_k⁻`.
    pub xhat_minus: DVector<f64>,
    /// A posteriori estimate `x̂_k`.
    pub xhat: DVector<f64>,
    /// Innovation `y_k − H x̂_k⁻`.
    pub innovation: DVector<f64>,
}

/// Full trajectory of one closed-loop trial; `controls[k]` is applied
/// between stages `k` and `k+1`.
#[derive(Debug, Clone)]
pub struct TrialTrajectory {
    pub steps: Vec<TrialStep>,
    pub controls: Vec<DVector<f64>>,
}

/// Per-stage comparison of the ensemble against the prediction. Empirical
/// moments are those of the a posteriori augmented state `[x_k; x̂_k]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageStats {
    #[serde(with = "crate::serde_util::vec")]
    pub empirical_mean: DVector<f64>,
    pub empirical_cov: SymMatrix,
    pub predicted: StageMoments,
    /// `‖mean_emp − [μ; μ]‖₂`.
    pub mean_err: f64,
    /// Relative Frobenius error of the full augmented covariance.
    pub cov_rel_err: f64,
    /// Relative Frobenius error of the truth block alone.
    pub truth_rel_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MCReport {
    pub n_trials: usize,
    pub seed: u64,
    pub case: SamplingCase,
    pub stages: Vec<StageStats>,
    /// Whether the empirical terminal truth covariance satisfies the bound
    /// within a 5% spectral slack.
    pub terminal_ok: bool,
}

/// Factor `F` with `F Fᵀ = m`, with tiny negative eigenvalues repaired.
fn psd_factor(m: &SymMatrix) -> Result<DMatrix<f64>> {
    let eig = eig_sym(m)?;
    let mut scaled = eig.vectors.clone();
    for (j, &lam) in eig.values.iter().enumerate() {
        if lam < -CLAMP_TOL {
            return Err(Error::Precondition(format!(
                "covariance has eigenvalue {lam:.3e}, below the clamp tolerance"
            )));
        }
        let s = lam.max(0.0).sqrt();
        for i in 0..scaled.nrows() {
            scaled[(i, j)] *= s;
        }
    }
    Ok(scaled)
}

fn gaussian(mu: &DVector<f64>, factor: &DMatrix<f64>, rng: &mut impl Rng) -> DVector<f64> {
    let z = DVector::from_fn(factor.ncols(), |_, _| rng.sample::<f64, _>(StandardNormal));
    mu + factor * z
}

/// Samples `(x₀, x̂₀⁻)` so their joint covariance is the case's initial
/// augmented covariance: the error draw is shared, the case decides whether
/// it is added to the estimate or to the truth.
pub fn sample_initial(
    case: SamplingCase,
    boundary: &BoundaryConditions,
    rng: &mut impl Rng,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let sampler = InitSampler::prepare(case, boundary)?;
    Ok(sampler.draw(rng))
}

/// Precomputed factorizations for the initial draw.
struct InitSampler {
    case: SamplingCase,
    mu0: DVector<f64>,
    err_factor: DMatrix<f64>,
    base_factor: DMatrix<f64>,
}

impl InitSampler {
    fn prepare(case: SamplingCase, boundary: &BoundaryConditions) -> Result<Self> {
        let (ptilde0, base) = match (case, &boundary.init_cov) {
            (SamplingCase::Case1, InitCov::Case1 { ptilde0, phat0 }) => (ptilde0, phat0),
            (SamplingCase::Case2, InitCov::Case2 { ptilde0, p0 }) => (ptilde0, p0),
            (case, other) => {
                return Err(Error::Precondition(format!(
                    "sampling case {case:?} requested but the problem's init_cov mode is {}",
                    match other {
                        InitCov::Case1 { .. } => "case1",
                        InitCov::Case2 { .. } => "case2",
                        InitCov::Explicit { .. } => "explicit",
                    }
                )))
            }
        };
        Ok(InitSampler {
            case,
            mu0: boundary.mu0.clone(),
            err_factor: psd_factor(ptilde0)?,
            base_factor: psd_factor(base)?,
        })
    }

    fn draw(&self, rng: &mut impl Rng) -> (DVector<f64>, DVector<f64>) {
        let zero = DVector::zeros(self.mu0.len());
        let err = gaussian(&zero, &self.err_factor, rng);
        match self.case {
            SamplingCase::Case1 => {
                let xhat_minus = gaussian(&self.mu0, &self.base_factor, rng);
                let x0 = &xhat_minus + err;
                (x0, xhat_minus)
            }
            SamplingCase::Case2 => {
                let x0 = gaussian(&self.mu0, &self.base_factor, rng);
                let xhat_minus = &x0 + err;
                (x0, xhat_minus)
            }
        }
    }
}

/// Per-stage noise factorizations shared by all trials.
struct TrialContext {
    r_factors: Vec<DMatrix<f64>>,
    means: Vec<DVector<f64>>,
}

impl TrialContext {
    fn prepare(spec: &ProblemSpec, policy: &Policy) -> Result<Self> {
        let r_factors = spec
            .stages
            .iter()
            .map(|st| psd_factor(&st.r))
            .collect::<Result<Vec<_>>>()?;
        Ok(TrialContext {
            r_factors,
            means: mean_trajectory(spec, policy),
        })
    }
}

/// Nominal mean trajectory under the feedforward sequence.
pub fn mean_trajectory(spec: &ProblemSpec, policy: &Policy) -> Vec<DVector<f64>> {
    let mut means = Vec::with_capacity(spec.horizon);
    let mut mu = spec.boundary.mu0.clone();
    for k in 0..spec.horizon {
        means.push(mu.clone());
        if k + 1 < spec.horizon {
            let st = spec.stage(k);
            mu = augmented::mean_step(&mu, &st.a, &st.b, &policy.feedforward[k]);
        }
    }
    means
}

/// Simulates one closed-loop trial: measurement, filter update, feedback
/// control and propagation at `k = 0..N−2`, plus the final measurement
/// update at `k = N−1`.
pub fn simulate_trial(
    spec: &ProblemSpec,
    schedule: &FilterSchedule,
    policy: &Policy,
    init: (DVector<f64>, DVector<f64>),
    rng: &mut impl Rng,
) -> Result<TrialTrajectory> {
    let ctx = TrialContext::prepare(spec, policy)?;
    Ok(simulate_trial_ctx(spec, schedule, policy, &ctx, init, rng))
}

fn simulate_trial_ctx(
    spec: &ProblemSpec,
    schedule: &FilterSchedule,
    policy: &Policy,
    ctx: &TrialContext,
    init: (DVector<f64>, DVector<f64>),
    rng: &mut impl Rng,
) -> TrialTrajectory {
    let n = spec.horizon;
    let (mut x, mut xhat_minus) = init;
    let mut steps = Vec::with_capacity(n);
    let mut controls = Vec::with_capacity(n - 1);
    let zero_y = |ny: usize| DVector::zeros(ny);
    for k in 0..n {
        let st = spec.stage(k);
        let fs = schedule.stage(k);
        let v = gaussian(&zero_y(st.h.nrows()), &ctx.r_factors[k], rng);
        let y = &st.h * &x + v;
        let innovation = &y - &st.h * &xhat_minus;
        let xhat = &xhat_minus + &fs.gain * &innovation;
        steps.push(TrialStep {
            x: x.clone(),
            xhat_minus: xhat_minus.clone(),
            xhat: xhat.clone(),
            innovation,
        });
        if k + 1 < n {
            let u = &policy.feedforward[k] + &policy.gains[k] * (&xhat - &ctx.means[k]);
            let w = DVector::from_fn(st.g.ncols(), |_, _| rng.sample::<f64, _>(StandardNormal));
            x = &st.a * &x + &st.b * &u + &st.g * &w;
            xhat_minus = &st.a * &xhat + &st.b * &u;
            controls.push(u);
        }
    }
    TrialTrajectory { steps, controls }
}

/// Running sums of the a posteriori augmented state over a block of trials.
struct BlockMoments {
    count: usize,
    sum: Vec<DVector<f64>>,
    sum_outer: Vec<DMatrix<f64>>,
}

impl BlockMoments {
    fn zeros(n_stages: usize, dim: usize) -> Self {
        BlockMoments {
            count: 0,
            sum: vec![DVector::zeros(dim); n_stages],
            sum_outer: vec![DMatrix::zeros(dim, dim); n_stages],
        }
    }

    fn absorb(&mut self, traj: &TrialTrajectory) {
        self.count += 1;
        for (k, step) in traj.steps.iter().enumerate() {
            let nx = step.x.len();
            let mut z = DVector::zeros(2 * nx);
            z.rows_mut(0, nx).copy_from(&step.x);
            z.rows_mut(nx, nx).copy_from(&step.xhat);
            self.sum_outer[k] += &z * z.transpose();
            self.sum[k] += z;
        }
    }

    fn merge(mut self, other: BlockMoments) -> BlockMoments {
        self.count += other.count;
        for (a, b) in self.sum.iter_mut().zip(other.sum) {
            *a += b;
        }
        for (a, b) in self.sum_outer.iter_mut().zip(other.sum_outer) {
            *a += b;
        }
        self
    }
}

/// Pairwise reduction in fixed index order.
fn merge_tree(mut blocks: Vec<BlockMoments>) -> BlockMoments {
    assert!(!blocks.is_empty());
    while blocks.len() > 1 {
        let mut next = Vec::with_capacity(blocks.len().div_ceil(2));
        let mut it = blocks.into_iter();
        while let Some(a) = it.next() {
            match it.next() {
                Some(b) => next.push(a.merge(b)),
                None => next.push(a),
            }
        }
        blocks = next;
    }
    blocks.pop().unwrap()
}

fn trial_rng(seed: u64, trial: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial as u64);
    rng
}

fn block_moments(
    spec: &ProblemSpec,
    schedule: &FilterSchedule,
    policy: &Policy,
    ctx: &TrialContext,
    sampler: &InitSampler,
    seed: u64,
    range: std::ops::Range<usize>,
) -> BlockMoments {
    let mut acc = BlockMoments::zeros(spec.horizon, 2 * spec.dims.nx);
    for trial in range {
        let mut rng = trial_rng(seed, trial);
        let init = sampler.draw(&mut rng);
        let traj = simulate_trial_ctx(spec, schedule, policy, ctx, init, &mut rng);
        acc.absorb(&traj);
    }
    acc
}

/// Runs the ensemble: deterministic for a given seed, with per-trial RNG
/// streams derived from `(seed, trial index)` so results are independent of
/// execution order.
pub fn run_ensemble(
    spec: &ProblemSpec,
    schedule: &FilterSchedule,
    policy: &Policy,
    case: SamplingCase,
    n_trials: usize,
    seed: u64,
) -> Result<MCReport> {
    if n_trials < 2 {
        return Err(Error::Precondition(format!(
            "ensemble needs at least 2 trials, got {n_trials}"
        )));
    }
    let predicted = augmented::propagate(spec, schedule, policy)?;
    let sampler = InitSampler::prepare(case, &spec.boundary)?;
    let ctx = TrialContext::prepare(spec, policy)?;

    let mut blocks = Vec::with_capacity(n_trials.div_ceil(BLOCK));
    let mut start = 0;
    while start < n_trials {
        let end = (start + BLOCK).min(n_trials);
        blocks.push(block_moments(
            spec,
            schedule,
            policy,
            &ctx,
            &sampler,
            seed,
            start..end,
        ));
        start = end;
    }
    let total = merge_tree(blocks);
    finalize_report(spec, predicted, total, case, n_trials, seed)
}

fn finalize_report(
    spec: &ProblemSpec,
    predicted: Vec<StageMoments>,
    total: BlockMoments,
    case: SamplingCase,
    n_trials: usize,
    seed: u64,
) -> Result<MCReport> {
    let n = n_trials as f64;
    let nx = spec.dims.nx;
    let mut stages = Vec::with_capacity(predicted.len());
    for (k, pred) in predicted.into_iter().enumerate() {
        let mean = &total.sum[k] / n;
        let centered = &total.sum_outer[k] - n * &mean * mean.transpose();
        let cov = symmetrize(&(centered / (n - 1.0)))?;
        let mut mu_pred = DVector::zeros(2 * nx);
        mu_pred.rows_mut(0, nx).copy_from(&pred.mu);
        mu_pred.rows_mut(nx, nx).copy_from(&pred.mu);
        let mean_err = (&mean - &mu_pred).norm();
        let cov_rel_err = linalg::rel_frob_err(cov.as_matrix(), pred.paug.as_matrix());
        let truth_emp = augmented::truth_block(&cov);
        let truth_pred = augmented::truth_block(&pred.paug);
        let truth_rel_err = linalg::rel_frob_err(truth_emp.as_matrix(), truth_pred.as_matrix());
        stages.push(StageStats {
            empirical_mean: mean,
            empirical_cov: cov,
            predicted: pred,
            mean_err,
            cov_rel_err,
            truth_rel_err,
        });
    }
    let terminal_ok = {
        let last = stages.last().expect("horizon >= 2");
        let truth_emp = augmented::truth_block(&last.empirical_cov);
        let slack = symmetrize(&(spec.boundary.pf.as_matrix() - truth_emp.as_matrix()))?;
        let margin = 0.05 * linalg::spectral_norm(spec.boundary.pf.as_matrix());
        linalg::is_psd(&slack, margin)
    };
    Ok(MCReport {
        n_trials,
        seed,
        case,
        stages,
        terminal_ok,
    })
}

/// Writes every trial's trajectory as CSV rows
/// (`trial,k,x...,xhat...,u...`; controls are empty at the final stage).
pub fn dump_trials_csv(
    spec: &ProblemSpec,
    schedule: &FilterSchedule,
    policy: &Policy,
    case: SamplingCase,
    n_trials: usize,
    seed: u64,
    out: &mut dyn std::io::Write,
) -> Result<()> {
    let sampler = InitSampler::prepare(case, &spec.boundary)?;
    let ctx = TrialContext::prepare(spec, policy)?;
    let nx = spec.dims.nx;
    let nu = spec.dims.nu;
    write!(out, "trial,k")?;
    for i in 0..nx {
        write!(out, ",x{i}")?;
    }
    for i in 0..nx {
        write!(out, ",xhat{i}")?;
    }
    for i in 0..nu {
        write!(out, ",u{i}")?;
    }
    writeln!(out)?;
    for trial in 0..n_trials {
        let mut rng = trial_rng(seed, trial);
        let init = sampler.draw(&mut rng);
        let traj = simulate_trial_ctx(spec, schedule, policy, &ctx, init, &mut rng);
        for (k, step) in traj.steps.iter().enumerate() {
            write!(out, "{trial},{k}")?;
            for i in 0..nx {
                write!(out, ",{}", step.x[i])?;
            }
            for i in 0..nx {
                write!(out, ",{}", step.xhat[i])?;
            }
            for i in 0..nu {
                match traj.controls.get(k) {
                    Some(u) => write!(out, ",{}", u[i])?,
                    None => write!(out, ",")?,
                }
            }
            writeln!(out)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filter::design_filter;
    use crate::model::{builtin_double_integrator, BuiltinCase};
    use nalgebra::DMatrix;

    fn zero_policy(spec: &ProblemSpec) -> Policy {
        Policy {
            feedforward: vec![DVector::zeros(spec.dims.nu); spec.horizon],
            gains: vec![DMatrix::zeros(spec.dims.nu, spec.dims.nx); spec.horizon],
        }
    }

    fn empirical_cov(samples: &[DVector<f64>]) -> DMatrix<f64> {
        let n = samples.len() as f64;
        let dim = samples[0].len();
        let mean = samples.iter().fold(DVector::zeros(dim), |a, s| a + s) / n;
        let mut cov = DMatrix::zeros(dim, dim);
        for s in samples {
            let d = s - &mean;
            cov += &d * d.transpose();
        }
        cov / (n - 1.0)
    }

    #[test]
    fn sample_initial_degenerate_error() {
        let mut spec = builtin_double_integrator(BuiltinCase::Case1);
        spec.boundary.init_cov = InitCov::Case1 {
            ptilde0: SymMatrix::zeros(4),
            phat0: SymMatrix::from_diagonal(&[0.1, 0.1, 0.02, 0.02]),
        };
        let mut rng = trial_rng(1, 0);
        for _ in 0..20 {
            let (x0, xhat) = sample_initial(SamplingCase::Case1, &spec.boundary, &mut rng).unwrap();
            assert!((x0 - xhat).norm() < 1e-14);
        }
    }

    #[test]
    fn sample_initial_case1_statistics() {
        let spec = builtin_double_integrator(BuiltinCase::Case1);
        let mut rng = trial_rng(7, 0);
        let n = 100_000;
        let mut xs = Vec::with_capacity(n);
        for _ in 0..n {
            let (x0, _) = sample_initial(SamplingCase::Case1, &spec.boundary, &mut rng).unwrap();
            xs.push(x0);
        }
        let cov = empirical_cov(&xs);
        let expect = DMatrix::from_diagonal(&DVector::from_row_slice(&[0.12, 0.11, 0.034, 0.034]));
        let rel = (cov - &expect).norm() / expect.norm();
        assert!(rel < 0.03, "relative error {rel}");
    }

    #[test]
    fn sample_initial_case2_statistics() {
        let spec = builtin_double_integrator(BuiltinCase::Case2);
        let mut rng = trial_rng(8, 0);
        let n = 100_000;
        let mut xhats = Vec::with_capacity(n);
        for _ in 0..n {
            let (_, xh) = sample_initial(SamplingCase::Case2, &spec.boundary, &mut rng).unwrap();
            xhats.push(xh);
        }
        let cov = empirical_cov(&xhats);
        let expect = DMatrix::from_diagonal(&DVector::from_row_slice(&[0.10, 0.10, 0.02, 0.02]));
        let rel = (cov - &expect).norm() / expect.norm();
        assert!(rel < 0.03, "relative error {rel}");
    }

    #[test]
    fn sample_initial_rejects_mismatched_mode() {
        let spec = builtin_double_integrator(BuiltinCase::Case1);
        let mut rng = trial_rng(1, 0);
        let err = sample_initial(SamplingCase::Case2, &spec.boundary, &mut rng);
        assert!(matches!(err, Err(Error::Precondition(_))));
    }

    #[test]
    fn noiseless_trial_tracks_mean() {
        // R = 0 sampled as exactly 0, G = 0, degenerate initial draws: the
        // estimate equals the truth and both ride the mean trajectory.
        let mut spec = builtin_double_integrator(BuiltinCase::Case1);
        for st in &mut spec.stages {
            st.r = SymMatrix::zeros(3);
        }
        spec.boundary.init_cov = InitCov::Case1 {
            ptilde0: SymMatrix::zeros(4),
            phat0: SymMatrix::zeros(4),
        };
        let schedule = FilterSchedule {
            stages: (0..spec.horizon)
                .map(|_| crate::filter::FilterStage {
                    gain: DMatrix::zeros(4, 3),
                    err_cov_prior: SymMatrix::zeros(4),
                    err_cov: SymMatrix::zeros(4),
                    innovation_cov: SymMatrix::zeros(3),
                })
                .collect(),
            underweight_p: 1.0,
        };
        let mut policy = zero_policy(&spec);
        policy.feedforward[0] = DVector::from_row_slice(&[0.3, -0.1]);
        let means = mean_trajectory(&spec, &policy);
        let mut rng = trial_rng(3, 0);
        let init = sample_initial(SamplingCase::Case1, &spec.boundary, &mut rng).unwrap();
        assert!((init.0.clone() - &spec.boundary.mu0).norm() < 1e-14);
        let traj = simulate_trial(&spec, &schedule, &policy, init, &mut rng).unwrap();
        for (k, step) in traj.steps.iter().enumerate() {
            assert!((step.x.clone() - &step.xhat).norm() < 1e-12, "stage {k}");
            assert!((step.x.clone() - &means[k]).norm() < 1e-10, "stage {k}");
        }
    }

    #[test]
    fn open_loop_feedforward_reaches_terminal_mean() {
        // K = 0 with a mean-steering feedforward: by linearity the ensemble
        // mean lands on μ_f.
        let spec = builtin_double_integrator(BuiltinCase::Case1);
        let schedule = design_filter(&spec).unwrap();
        let n = spec.horizon;
        let (nx, nu) = (spec.dims.nx, spec.dims.nu);

        // Minimal-norm feedforward from the stacked reachability map.
        let mut reach = DMatrix::zeros(nx, nu * (n - 1));
        let mut a_pow = DMatrix::identity(nx, nx);
        for k in (0..n - 1).rev() {
            reach
                .view_mut((0, k * nu), (nx, nu))
                .copy_from(&(&a_pow * &spec.stage(k).b));
            a_pow = &a_pow * &spec.stage(k).a;
        }
        let drift = &a_pow * &spec.boundary.mu0;
        let target = &spec.boundary.muf - drift;
        let ubar_stacked = reach
            .clone()
            .svd(true, true)
            .solve(&target, 1e-12)
            .expect("reachable system");
        let mut policy = zero_policy(&spec);
        for k in 0..n - 1 {
            policy.feedforward[k] = ubar_stacked.rows(k * nu, nu).into_owned();
        }

        let report =
            run_ensemble(&spec, &schedule, &policy, SamplingCase::Case1, 2000, 11).unwrap();
        let last = report.stages.last().unwrap();
        for i in 0..nx {
            let err = (last.empirical_mean[i] - spec.boundary.muf[i]).abs();
            assert!(err < 0.05, "component {i} off by {err}");
        }
    }

    #[test]
    fn ensemble_mean_control_matches_feedforward() {
        let spec = builtin_double_integrator(BuiltinCase::Case1);
        let schedule = design_filter(&spec).unwrap();
        let mut policy = zero_policy(&spec);
        for k in 0..spec.horizon {
            policy.feedforward[k] = DVector::from_row_slice(&[0.2, -0.4]);
            policy.gains[k] =
                DMatrix::from_row_slice(2, 4, &[0.3, -0.1, 0.2, 0.0, 0.1, 0.25, -0.2, 0.15]);
        }
        let ctx = TrialContext::prepare(&spec, &policy).unwrap();
        let sampler = InitSampler::prepare(SamplingCase::Case1, &spec.boundary).unwrap();
        let n = 4000;
        let mut mean_u0 = DVector::zeros(2);
        let mut mean_u5 = DVector::zeros(2);
        for trial in 0..n {
            let mut rng = trial_rng(17, trial);
            let init = sampler.draw(&mut rng);
            let traj = simulate_trial_ctx(&spec, &schedule, &policy, &ctx, init, &mut rng);
            mean_u0 += &traj.controls[0];
            mean_u5 += &traj.controls[5];
        }
        mean_u0 /= n as f64;
        mean_u5 /= n as f64;
        assert!((mean_u0 - &policy.feedforward[0]).norm() < 0.05);
        assert!((mean_u5 - &policy.feedforward[5]).norm() < 0.05);
    }

    #[test]
    fn report_is_seed_deterministic() {
        let spec = builtin_double_integrator(BuiltinCase::Case1);
        let schedule = design_filter(&spec).unwrap();
        let policy = zero_policy(&spec);
        let a = run_ensemble(&spec, &schedule, &policy, SamplingCase::Case1, 600, 5).unwrap();
        let b = run_ensemble(&spec, &schedule, &policy, SamplingCase::Case1, 600, 5).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
        let c = run_ensemble(&spec, &schedule, &policy, SamplingCase::Case1, 600, 6).unwrap();
        assert_ne!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&c).unwrap()
        );
    }

    #[test]
    fn aggregation_is_order_independent() {
        let spec = builtin_double_integrator(BuiltinCase::Case1);
        let schedule = design_filter(&spec).unwrap();
        let policy = zero_policy(&spec);
        let sampler = InitSampler::prepare(SamplingCase::Case1, &spec.boundary).unwrap();
        let ctx = TrialContext::prepare(&spec, &policy).unwrap();
        let seed = 23;
        let n = 700;
        let ranges: Vec<std::ops::Range<usize>> = (0..n)
            .step_by(BLOCK)
            .map(|s| s..(s + BLOCK).min(n))
            .collect();
        let forward: Vec<BlockMoments> = ranges
            .iter()
            .map(|r| block_moments(&spec, &schedule, &policy, &ctx, &sampler, seed, r.clone()))
            .collect();
        // Compute blocks in reverse order, then restore index order before
        // the merge tree; the aggregate must be bit-identical.
        let mut reversed: Vec<(usize, BlockMoments)> = ranges
            .iter()
            .enumerate()
            .rev()
            .map(|(i, r)| {
                (
                    i,
                    block_moments(&spec, &schedule, &policy, &ctx, &sampler, seed, r.clone()),
                )
            })
            .collect();
        reversed.sort_by_key(|(i, _)| *i);
        let a = merge_tree(forward);
        let b = merge_tree(reversed.into_iter().map(|(_, b)| b).collect());
        for k in 0..spec.horizon {
            assert_eq!(a.sum[k], b.sum[k]);
            assert_eq!(a.sum_outer[k], b.sum_outer[k]);
        }
    }

    #[test]
    fn smoke_report_with_two_trials() {
        let spec = builtin_double_integrator(BuiltinCase::Case2);
        let schedule = design_filter(&spec).unwrap();
        let policy = zero_policy(&spec);
        let report = run_ensemble(&spec, &schedule, &policy, SamplingCase::Case2, 2, 0).unwrap();
        assert_eq!(report.stages.len(), 20);
        for st in &report.stages {
            assert!(st.mean_err.is_finite());
            assert!(st.cov_rel_err.is_finite());
            assert!(st.truth_rel_err.is_finite());
        }
        assert!(run_ensemble(&spec, &schedule, &policy, SamplingCase::Case2, 1, 0).is_err());
    }

    #[test]
    fn trial_dump_has_expected_shape() {
        let spec = builtin_double_integrator(BuiltinCase::Case1);
        let schedule = design_filter(&spec).unwrap();
        let policy = zero_policy(&spec);
        let mut buf = Vec::new();
        dump_trials_csv(
            &spec,
            &schedule,
            &policy,
            SamplingCase::Case1,
            3,
            9,
            &mut buf,
        )
        .unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 1 + 3 * 20);
        assert!(lines[0].starts_with("trial,k,x0"));
    }
}
