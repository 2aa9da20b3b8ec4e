//! Pipeline orchestration: load a problem, run filter design + SCP + Monte
//! Carlo, emit structured results and plot-ready data series.

mod result;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use covsteer::augmented::{self, StageMoments};
use covsteer::model::{self, BuiltinCase, ProblemSpec};
use covsteer::montecarlo::{self, MCReport, SamplingCase};
use covsteer::scp::{self, ScpFailureKind, ScpOutput};
use covsteer::{linalg, Error};

use result::{LegacyStage, RunResult, FORMAT_VERSION};

/// Exit codes, stable across releases.
mod exit_code {
    pub const OK: u8 = 0;
    /// Parse, validation or usage problems.
    pub const INPUT: u8 = 2;
    /// A subproblem was infeasible.
    pub const INFEASIBLE: u8 = 3;
    /// The iteration budget or weight cap was exhausted.
    pub const NO_CONVERGENCE: u8 = 4;
    /// Backend or numerical failure.
    pub const INTERNAL: u8 = 5;
    /// A validation discrepancy exceeded its tolerance.
    pub const TOLERANCE: u8 = 6;
}

#[derive(Parser)]
#[command(
    name = "covsteer",
    version,
    about = "Covariance steering with output feedback"
)]
struct Cli {
    /// Suppress progress logging on stderr.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Solve a steering problem and write a result file.
    Solve {
        /// Problem file (JSON). Mutually exclusive with --case.
        problem: Option<PathBuf>,
        /// Builtin double-integrator scenario: case1 | case2 | case3.
        #[arg(long, conflicts_with = "problem")]
        case: Option<String>,
        /// Run a closed-loop Monte Carlo with this many trials.
        #[arg(long)]
        mc: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Include the orthogonality-assuming covariance prediction.
        #[arg(long)]
        legacy_compare: bool,
        /// Dump the assembled relaxed conic program as text.
        #[arg(long)]
        dump_program: bool,
        /// Write Monte Carlo trial trajectories to this CSV file.
        #[arg(long, value_name = "PATH")]
        dump_trials: Option<PathBuf>,
        /// Result file path (stdout when omitted).
        #[arg(short, long, value_name = "PATH")]
        output: Option<PathBuf>,
    },
    /// Re-run Monte Carlo against a stored policy and check discrepancies.
    Validate {
        result: PathBuf,
        /// Number of trials.
        #[arg(long, default_value_t = 10_000)]
        mc: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Check against the stored prior-work prediction instead of the
        /// run's own prediction.
        #[arg(long)]
        legacy: bool,
        /// Relative Frobenius tolerance on the truth-block covariance.
        #[arg(long, default_value_t = 0.05)]
        tol: f64,
    },
    /// Export plot-ready CSV series from a result file.
    ExportPlots {
        result: PathBuf,
        /// Output directory (created if missing).
        #[arg(short, long, value_name = "DIR")]
        out_dir: PathBuf,
    },
}

struct Failure {
    code: u8,
    msg: String,
}

impl Failure {
    fn new(code: u8, msg: impl Into<String>) -> Self {
        Failure {
            code,
            msg: msg.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Parse(_)
            | Error::Validation(_)
            | Error::Dimension(_)
            | Error::Precondition(_) => exit_code::INPUT,
            Error::Singular(_) | Error::EigenFailure(_) | Error::Io(_) => exit_code::INTERNAL,
        };
        Failure::new(code, e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logger(cli.quiet);
    match dispatch(cli.cmd) {
        Ok(()) => ExitCode::from(exit_code::OK),
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}

fn dispatch(cmd: Cmd) -> Result<(), Failure> {
    match cmd {
        Cmd::Solve {
            problem,
            case,
            mc,
            seed,
            legacy_compare,
            dump_program,
            dump_trials,
            output,
        } => cmd_solve(
            problem,
            case,
            mc,
            seed,
            legacy_compare,
            dump_program,
            dump_trials,
            output,
        ),
        Cmd::Validate {
            result,
            mc,
            seed,
            legacy,
            tol,
        } => cmd_validate(&result, mc, seed, legacy, tol),
        Cmd::ExportPlots { result, out_dir } => cmd_export_plots(&result, &out_dir),
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_solve(
    problem: Option<PathBuf>,
    case: Option<String>,
    mc: Option<usize>,
    seed: u64,
    legacy_compare: bool,
    dump_program: bool,
    dump_trials: Option<PathBuf>,
    output: Option<PathBuf>,
) -> Result<(), Failure> {
    let (spec, case_name) = match (problem, case) {
        (Some(path), None) => (model::load_problem(&path)?, None),
        (None, Some(name)) => {
            let case: BuiltinCase = name.parse()?;
            (
                model::builtin_double_integrator(case),
                Some(case.to_string()),
            )
        }
        (None, None) | (Some(_), Some(_)) => {
            return Err(Failure::new(
                exit_code::INPUT,
                "exactly one of a problem file or --case must be given",
            ))
        }
    };

    if dump_program {
        let schedule = covsteer::filter::design_filter(&spec)?;
        let program = covsteer::sdp::assemble_relaxed(&spec, &schedule)?;
        let path = program_dump_path(output.as_deref());
        let mut file = std::fs::File::create(&path)
            .map_err(|e| Failure::new(exit_code::INTERNAL, format!("{}: {e}", path.display())))?;
        program
            .dump(&mut file)
            .map_err(|e| Failure::new(exit_code::INTERNAL, e.to_string()))?;
        log::info!("wrote program dump to {}", path.display());
    }

    let out = scp::run(&spec).map_err(|f| {
        let code = match f.kind {
            ScpFailureKind::Infeasible { .. } => exit_code::INFEASIBLE,
            ScpFailureKind::NoConvergence { .. } => exit_code::NO_CONVERGENCE,
            ScpFailureKind::NumericalTrouble { .. } | ScpFailureKind::Internal(_) => {
                exit_code::INTERNAL
            }
        };
        Failure::new(code, f.to_string())
    })?;
    log_summary(&spec, &out);

    let legacy_prediction = if legacy_compare {
        Some(legacy_stages(&spec, &out)?)
    } else {
        None
    };

    let mc_report = match mc {
        Some(n) => {
            let sampling = sampling_case(&spec)?;
            Some(montecarlo::run_ensemble(
                &spec,
                &out.schedule,
                &out.policy,
                sampling,
                n,
                seed,
            )?)
        }
        None => None,
    };

    if let Some(path) = dump_trials {
        let sampling = sampling_case(&spec)?;
        let n = mc.unwrap_or(100);
        let mut file = std::fs::File::create(&path)
            .map_err(|e| Failure::new(exit_code::INTERNAL, format!("{}: {e}", path.display())))?;
        montecarlo::dump_trials_csv(
            &spec,
            &out.schedule,
            &out.policy,
            sampling,
            n,
            seed,
            &mut file,
        )?;
        log::info!("wrote {n} trial trajectories to {}", path.display());
    }

    let gain_spectral_norms = out.policy.gains.iter().map(linalg::spectral_norm).collect();
    let result = RunResult {
        format_version: FORMAT_VERSION,
        case: case_name,
        problem: spec,
        filter: out.schedule,
        policy: out.policy,
        predicted: out.predicted,
        legacy_prediction,
        trace: out.trace,
        gain_spectral_norms,
        mc: mc_report,
    };
    let text = serde_json::to_string_pretty(&result)
        .map_err(|e| Failure::new(exit_code::INTERNAL, e.to_string()))?;
    match output {
        Some(path) => {
            std::fs::write(&path, text).map_err(|e| {
                Failure::new(exit_code::INTERNAL, format!("{}: {e}", path.display()))
            })?;
            log::info!("wrote result to {}", path.display());
        }
        None => println!("{text}"),
    }
    Ok(())
}

fn cmd_validate(
    result_path: &Path,
    mc: usize,
    seed: u64,
    legacy: bool,
    tol: f64,
) -> Result<(), Failure> {
    if mc < 2 {
        return Err(Failure::new(
            exit_code::INPUT,
            "--mc must request at least 2 trials",
        ));
    }
    let stored = RunResult::load(result_path)?;
    let sampling = sampling_case(&stored.problem)?;
    let report = montecarlo::run_ensemble(
        &stored.problem,
        &stored.filter,
        &stored.policy,
        sampling,
        mc,
        seed,
    )?;

    let worst_cov = if legacy {
        let legacy_stages = stored.legacy_prediction.as_ref().ok_or_else(|| {
            Failure::new(
                exit_code::INPUT,
                "result file carries no legacy prediction; re-run solve with --legacy-compare",
            )
        })?;
        worst_against_legacy(&report, legacy_stages)
    } else {
        report
            .stages
            .iter()
            .fold(0.0_f64, |acc, s| acc.max(s.truth_rel_err))
    };
    let worst_mean = worst_mean_err(&report);

    let text = serde_json::to_string_pretty(&report)
        .map_err(|e| Failure::new(exit_code::INTERNAL, e.to_string()))?;
    println!("{text}");
    log::info!(
        "validate: worst truth-covariance rel err {worst_cov:.4} (tol {tol}), \
         worst mean component err {worst_mean:.4}"
    );
    if worst_cov > tol || worst_mean > 0.05 {
        return Err(Failure::new(
            exit_code::TOLERANCE,
            format!(
                "discrepancy exceeds tolerance: covariance {worst_cov:.4} (tol {tol}), \
                 mean {worst_mean:.4} (tol 0.05)"
            ),
        ));
    }
    Ok(())
}

fn cmd_export_plots(result_path: &Path, out_dir: &Path) -> Result<(), Failure> {
    let stored = RunResult::load(result_path)?;
    std::fs::create_dir_all(out_dir)
        .map_err(|e| Failure::new(exit_code::INTERNAL, format!("{}: {e}", out_dir.display())))?;
    let nx = stored.problem.dims.nx;

    let mut mean = csv_file(out_dir, "mean.csv")?;
    let mut header = String::from("k");
    for i in 0..nx {
        header.push_str(&format!(",mu{i}"));
    }
    writeln!(mean, "{header}").map_err(io_failure)?;
    for (k, st) in stored.predicted.iter().enumerate() {
        write!(mean, "{k}").map_err(io_failure)?;
        for i in 0..nx {
            write!(mean, ",{}", st.mu[i]).map_err(io_failure)?;
        }
        writeln!(mean).map_err(io_failure)?;
    }

    if nx >= 2 {
        let mut ell = csv_file(out_dir, "cov_ellipse.csv")?;
        writeln!(ell, "k,lambda1,lambda2,angle_rad").map_err(io_failure)?;
        for (k, st) in stored.predicted.iter().enumerate() {
            let (l1, l2, angle) = position_ellipse(st)?;
            writeln!(ell, "{k},{l1},{l2},{angle}").map_err(io_failure)?;
        }
        if let Some(legacy) = &stored.legacy_prediction {
            let mut ell = csv_file(out_dir, "legacy_cov_ellipse.csv")?;
            writeln!(ell, "k,lambda1,lambda2,angle_rad").map_err(io_failure)?;
            for (k, st) in legacy.iter().enumerate() {
                let (l1, l2, angle) = ellipse_of(st.p.as_matrix())?;
                writeln!(ell, "{k},{l1},{l2},{angle}").map_err(io_failure)?;
            }
        }
    } else {
        log::info!("state dimension < 2, skipping covariance-ellipse series");
    }

    let mut gains = csv_file(out_dir, "gains.csv")?;
    writeln!(gains, "k,spectral_norm").map_err(io_failure)?;
    for (k, g) in stored.gain_spectral_norms.iter().enumerate() {
        writeln!(gains, "{k},{g}").map_err(io_failure)?;
    }

    let mut trace = csv_file(out_dir, "trace.csv")?;
    writeln!(trace, "iter,max_e,objective,delta_j,weight,wall_secs").map_err(io_failure)?;
    for rec in &stored.trace.iterations {
        writeln!(
            trace,
            "{},{},{},{},{},{}",
            rec.iter,
            rec.max_e,
            rec.objective,
            rec.delta_j.map_or(String::new(), |d| d.to_string()),
            rec.weight,
            rec.wall_secs
        )
        .map_err(io_failure)?;
    }

    match &stored.mc {
        Some(mc) => {
            let mut f = csv_file(out_dir, "mc_summary.csv")?;
            writeln!(f, "k,mean_err,cov_rel_err,truth_rel_err").map_err(io_failure)?;
            for (k, st) in mc.stages.iter().enumerate() {
                writeln!(
                    f,
                    "{k},{},{},{}",
                    st.mean_err, st.cov_rel_err, st.truth_rel_err
                )
                .map_err(io_failure)?;
            }
        }
        None => log::info!("result carries no Monte Carlo report, skipping mc_summary.csv"),
    }
    log::info!("wrote plot series to {}", out_dir.display());
    Ok(())
}

fn csv_file(dir: &Path, name: &str) -> Result<std::fs::File, Failure> {
    std::fs::File::create(dir.join(name))
        .map_err(|e| Failure::new(exit_code::INTERNAL, format!("{name}: {e}")))
}

fn io_failure(e: std::io::Error) -> Failure {
    Failure::new(exit_code::INTERNAL, e.to_string())
}

/// Eigen data of the leading 2x2 position block of the truth covariance.
fn position_ellipse(st: &StageMoments) -> Result<(f64, f64, f64), Failure> {
    let truth = augmented::truth_block(&st.paug);
    ellipse_of(truth.as_matrix())
}

fn ellipse_of(p: &covsteer::nalgebra::DMatrix<f64>) -> Result<(f64, f64, f64), Failure> {
    let block = p.view((0, 0), (2, 2)).into_owned();
    let sym = linalg::symmetrize(&block).map_err(Failure::from)?;
    let eig = linalg::eig_sym(&sym).map_err(Failure::from)?;
    // Largest eigenvalue first; the angle orients its eigenvector.
    let l1 = eig.values[1];
    let l2 = eig.values[0];
    let v = eig.vectors.column(1);
    Ok((l1, l2, v[1].atan2(v[0])))
}

fn sampling_case(spec: &ProblemSpec) -> Result<SamplingCase, Failure> {
    match &spec.boundary.init_cov {
        model::InitCov::Case1 { .. } => Ok(SamplingCase::Case1),
        model::InitCov::Case2 { .. } => Ok(SamplingCase::Case2),
        model::InitCov::Explicit { .. } => Err(Failure::new(
            exit_code::INPUT,
            "Monte Carlo needs a case1 or case2 init_cov mode; explicit mode has no \
             sampling procedure",
        )),
    }
}

fn legacy_stages(spec: &ProblemSpec, out: &ScpOutput) -> Result<Vec<LegacyStage>, Failure> {
    let pairs = augmented::legacy_recursion_naive(spec, &out.schedule, &out.policy)?;
    Ok(pairs
        .into_iter()
        .map(|(phat, p)| LegacyStage { phat, p })
        .collect())
}

fn worst_against_legacy(report: &MCReport, legacy: &[LegacyStage]) -> f64 {
    report
        .stages
        .iter()
        .zip(legacy)
        .fold(0.0_f64, |acc, (st, leg)| {
            let truth_emp = augmented::truth_block(&st.empirical_cov);
            acc.max(linalg::rel_frob_err(
                truth_emp.as_matrix(),
                leg.p.as_matrix(),
            ))
        })
}

fn worst_mean_err(report: &MCReport) -> f64 {
    report.stages.iter().fold(0.0_f64, |acc, st| {
        let nx = st.predicted.mu.len();
        let mut worst = acc;
        for i in 0..(2 * nx) {
            let pred = st.predicted.mu[i % nx];
            worst = worst.max((st.empirical_mean[i] - pred).abs());
        }
        worst
    })
}

fn log_summary(spec: &ProblemSpec, out: &ScpOutput) {
    let iters = out.trace.iterations.len().saturating_sub(1);
    let last = out.trace.iterations.last();
    let terminal = out.predicted.last();
    if let (Some(last), Some(terminal)) = (last, terminal) {
        let mu_err = (&terminal.mu - &spec.boundary.muf).norm();
        log::info!(
            "converged after {iters} iterates: J={:.6}, max_e={:.3e}, terminal mean err {:.3e}",
            last.objective,
            last.max_e,
            mu_err
        );
    }
}

fn program_dump_path(output: Option<&Path>) -> PathBuf {
    match output {
        Some(path) => {
            let mut name = path.file_name().unwrap_or_default().to_os_string();
            name.push(".program.txt");
            path.with_file_name(name)
        }
        None => PathBuf::from("program.txt"),
    }
}

/// Minimal stderr logger; the solver's progress lines arrive through `log`.
struct StderrLogger;

static LOGGER: StderrLogger = StderrLogger;

impl log::Log for StderrLogger {
    fn enabled(&self, metadata: &log::Metadata<'_>) -> bool {
        metadata.level() <= log::Level::Info
    }

    fn log(&self, record: &log::Record<'_>) {
        if self.enabled(record.metadata()) {
            eprintln!(
                "[{}] {}",
                record.level().as_str().to_lowercase(),
                record.args()
            );
        }
    }

    fn flush(&self) {}
}

fn init_logger(quiet: bool) {
    if !quiet {
        let _ = log::set_logger(&LOGGER);
        log::set_max_level(log::LevelFilter::Info);
    }
}
