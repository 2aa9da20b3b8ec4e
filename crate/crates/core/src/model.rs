//! Problem definition: stage matrices, noise statistics, boundary conditions
//! and solver parameters, plus ingestion from a structured (JSON) file.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::augmented;
use crate::error::{Error, Result};
use crate::linalg::{self, SymMatrix};

/// Problem dimensions: state, control, measurement and process-noise sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub nx: usize,
    pub nu: usize,
    pub ny: usize,
    pub nw: usize,
}

/// One stage of the linear time-varying model
/// `x_{k+1} = A x_k + B u_k + G w_k`, `y_k = H x_k + v_k`, `v_k ~ N(0, R)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageModel {
    #[serde(rename = "A", with = "crate::serde_util::mat")]
    pub a: DMatrix<f64>,
    #[serde(rename = "B", with = "crate::serde_util::mat")]
    pub b: DMatrix<f64>,
    #[serde(rename = "G", with = "crate::serde_util::mat")]
    pub g: DMatrix<f64>,
    #[serde(rename = "H", with = "crate::serde_util::mat")]
    pub h: DMatrix<f64>,
    #[serde(rename = "R")]
    pub r: SymMatrix,
}

/// How the initial a priori augmented covariance is specified.
///
/// The filter's own design covariance `Ptilde0` is carried explicitly in all
/// modes: it is a design quantity distinct from the true joint statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode")]
pub enum InitCov {
    /// Estimation error orthogonal to the estimate (the classical setting):
    /// blocks `[[P̂₀⁻+P̃₀⁻, P̂₀⁻], [P̂₀⁻, P̂₀⁻]]`.
    #[serde(rename = "case1")]
    Case1 {
        #[serde(rename = "Ptilde0")]
        ptilde0: SymMatrix,
        #[serde(rename = "Phat0")]
        phat0: SymMatrix,
    },
    /// Estimation error orthogonal to the true state (fixed-trajectory
    /// analyses): blocks `[[P₀, P₀], [P₀, P₀+P̃₀⁻]]`.
    #[serde(rename = "case2")]
    Case2 {
        #[serde(rename = "Ptilde0")]
        ptilde0: SymMatrix,
        #[serde(rename = "P0")]
        p0: SymMatrix,
    },
    /// The full `2n_x` block matrix given directly.
    #[serde(rename = "explicit")]
    Explicit {
        #[serde(rename = "Paug0")]
        paug0: SymMatrix,
        #[serde(rename = "Ptilde0")]
        ptilde0: SymMatrix,
    },
}

/// Boundary conditions of the steering problem.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryConditions {
    /// Initial mean of the true state and the a priori estimate.
    pub mu0: DVector<f64>,
    /// Required terminal mean.
    pub muf: DVector<f64>,
    /// Terminal covariance bound on the true state.
    pub pf: SymMatrix,
    pub init_cov: InitCov,
}

impl BoundaryConditions {
    /// Assembles the initial a priori augmented covariance.
    pub fn paug0(&self) -> Result<SymMatrix> {
        match &self.init_cov {
            InitCov::Case1 { ptilde0, phat0 } => augmented::build_case1_init(ptilde0, phat0),
            InitCov::Case2 { ptilde0, p0 } => augmented::build_case2_init(ptilde0, p0),
            InitCov::Explicit { paug0, .. } => Ok(paug0.clone()),
        }
    }

    /// The filter's initial a priori error covariance `P̃₀⁻`.
    pub fn ptilde0(&self) -> &SymMatrix {
        match &self.init_cov {
            InitCov::Case1 { ptilde0, .. }
            | InitCov::Case2 { ptilde0, .. }
            | InitCov::Explicit { ptilde0, .. } => ptilde0,
        }
    }
}

/// Parameters of the outer rank-minimization loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScpParams {
    /// Initial penalty weight `w₀`.
    pub w0: f64,
    /// Geometric weight growth factor `β > 1`.
    pub beta: f64,
    /// Rank-surrogate convergence threshold `ε₁`.
    pub eps_rank: f64,
    /// Objective-change convergence threshold `ε₂`.
    pub eps_obj: f64,
    /// Weight on the cross-correlation trace term in the objective.
    pub eps_cross: f64,
    pub max_iters: usize,
}

impl Default for ScpParams {
    fn default() -> Self {
        ScpParams {
            w0: 1.0,
            beta: 1.2,
            eps_rank: 1e-5,
            eps_obj: 1e-5,
            eps_cross: 1e-3,
            max_iters: 200,
        }
    }
}

/// Fully validated steering problem.
///
/// Immutable after validation; stage matrices are stored per stage even for
/// time-invariant systems so the recursions stay uniform.
#[derive(Debug, Clone, PartialEq)]
pub struct ProblemSpec {
    pub dims: Dims,
    /// Horizon node count `N` (stages are indexed `0..N`).
    pub horizon: usize,
    pub stages: Vec<StageModel>,
    pub boundary: BoundaryConditions,
    /// Underweighting factor `p ∈ (0, 1]`; `p = 1` is the optimal gain.
    pub underweight_p: f64,
    pub scp: ScpParams,
}

impl ProblemSpec {
    pub fn stage(&self, k: usize) -> &StageModel {
        &self.stages[k]
    }

    /// Checks every schema invariant; errors name the offending field and
    /// stage index.
    ///
    /// Negated comparisons are kept so NaN parameters fail validation.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        let Dims { nx, nu, ny, nw } = self.dims;
        if nx == 0 || nu == 0 || ny == 0 {
            return Err(Error::Validation("dims must all be >= 1".into()));
        }
        if self.horizon < 2 {
            return Err(Error::Validation(format!(
                "horizon N must be >= 2, got {}",
                self.horizon
            )));
        }
        if self.stages.len() != self.horizon {
            return Err(Error::Validation(format!(
                "expected {} stages, got {}",
                self.horizon,
                self.stages.len()
            )));
        }
        for (k, st) in self.stages.iter().enumerate() {
            check_shape("A", k, &st.a, nx, nx)?;
            check_shape("B", k, &st.b, nx, nu)?;
            check_shape("G", k, &st.g, nx, nw)?;
            check_shape("H", k, &st.h, ny, nx)?;
            if st.r.dim() != ny {
                return Err(Error::Validation(format!(
                    "stage {k}: R must be {ny}x{ny}, got {d}x{d}",
                    d = st.r.dim()
                )));
            }
            if !linalg::is_psd(&st.r, psd_tol(&st.r)) {
                return Err(Error::Validation(format!("stage {k}: R is not PSD")));
            }
        }
        if self.boundary.mu0.len() != nx {
            return Err(Error::Validation(format!(
                "mu0 must have length {nx}, got {}",
                self.boundary.mu0.len()
            )));
        }
        if self.boundary.muf.len() != nx {
            return Err(Error::Validation(format!(
                "muf must have length {nx}, got {}",
                self.boundary.muf.len()
            )));
        }
        if self.boundary.pf.dim() != nx {
            return Err(Error::Validation(format!(
                "Pf must be {nx}x{nx}, got {d}x{d}",
                d = self.boundary.pf.dim()
            )));
        }
        if !linalg::is_psd(&self.boundary.pf, psd_tol(&self.boundary.pf)) {
            return Err(Error::Validation("Pf is not PSD".into()));
        }
        let ptilde0 = self.boundary.ptilde0();
        if ptilde0.dim() != nx {
            return Err(Error::Validation(format!(
                "init_cov.Ptilde0 must be {nx}x{nx}, got {d}x{d}",
                d = ptilde0.dim()
            )));
        }
        if !linalg::is_psd(ptilde0, psd_tol(ptilde0)) {
            return Err(Error::Validation("init_cov.Ptilde0 is not PSD".into()));
        }
        match &self.boundary.init_cov {
            InitCov::Case1 { phat0, .. } => check_init_block("Phat0", phat0, nx)?,
            InitCov::Case2 { p0, .. } => check_init_block("P0", p0, nx)?,
            InitCov::Explicit { paug0, .. } => check_init_block("Paug0", paug0, 2 * nx)?,
        }
        let paug0 = self.boundary.paug0()?;
        if !linalg::is_psd(&paug0, psd_tol(&paug0)) {
            return Err(Error::Validation(
                "assembled initial augmented covariance is not PSD".into(),
            ));
        }
        if !(self.underweight_p > 0.0 && self.underweight_p <= 1.0) {
            return Err(Error::Validation(format!(
                "underweight_p must lie in (0, 1], got {}",
                self.underweight_p
            )));
        }
        let s = &self.scp;
        if !(s.w0 > 0.0) {
            return Err(Error::Validation("scp.w0 must be > 0".into()));
        }
        if !(s.beta > 1.0) {
            return Err(Error::Validation("scp.beta must be > 1".into()));
        }
        if !(s.eps_rank > 0.0) {
            return Err(Error::Validation("scp.eps_rank must be > 0".into()));
        }
        if !(s.eps_obj > 0.0) {
            return Err(Error::Validation("scp.eps_obj must be > 0".into()));
        }
        if !(s.eps_cross >= 0.0) {
            return Err(Error::Validation("scp.eps_cross must be >= 0".into()));
        }
        if s.max_iters == 0 {
            return Err(Error::Validation("scp.max_iters must be >= 1".into()));
        }
        Ok(())
    }
}

fn psd_tol(m: &SymMatrix) -> f64 {
    1e-10 * (1.0 + m.norm())
}

fn check_shape(name: &str, stage: usize, m: &DMatrix<f64>, rows: usize, cols: usize) -> Result<()> {
    if m.nrows() != rows || m.ncols() != cols {
        return Err(Error::Validation(format!(
            "stage {stage}: {name} must be {rows}x{cols}, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    Ok(())
}

fn check_init_block(name: &str, m: &SymMatrix, dim: usize) -> Result<()> {
    if m.dim() != dim {
        return Err(Error::Validation(format!(
            "init_cov.{name} must be {dim}x{dim}, got {d}x{d}",
            d = m.dim()
        )));
    }
    if !linalg::is_psd(m, psd_tol(m)) {
        return Err(Error::Validation(format!("init_cov.{name} is not PSD")));
    }
    Ok(())
}

/// The deliverable: feedforward sequence `ū_k` and feedback gain sequence
/// `K_k` of the policy `u_k = ū_k + K_k (x̂_k − μ_k)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    #[serde(with = "crate::serde_util::vec_list")]
    pub feedforward: Vec<DVector<f64>>,
    #[serde(with = "crate::serde_util::mat_list")]
    pub gains: Vec<DMatrix<f64>>,
}

impl Policy {
    pub fn len(&self) -> usize {
        self.feedforward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.feedforward.is_empty()
    }
}

// ---------------------------------------------------------------------------
// File schema
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct ProblemFile {
    dims: Dims,
    horizon: HorizonFile,
    stages: StagesFile,
    boundary: BoundaryFile,
    #[serde(default)]
    filter: FilterFile,
    #[serde(default)]
    scp: ScpParams,
}

#[derive(Serialize, Deserialize)]
struct HorizonFile {
    #[serde(rename = "N")]
    n: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum StagesFile {
    Constant { constant: StageModel },
    PerStage(Vec<StageModel>),
}

#[derive(Serialize, Deserialize)]
struct BoundaryFile {
    mu0: Vec<f64>,
    muf: Vec<f64>,
    #[serde(rename = "Pf")]
    pf: SymMatrix,
    init_cov: InitCov,
}

#[derive(Serialize, Deserialize)]
struct FilterFile {
    underweight_p: f64,
}

impl Default for FilterFile {
    fn default() -> Self {
        FilterFile { underweight_p: 1.0 }
    }
}

impl ProblemFile {
    fn into_spec(self) -> Result<ProblemSpec> {
        let stages = match self.stages {
            StagesFile::Constant { constant } => vec![constant; self.horizon.n],
            StagesFile::PerStage(v) => v,
        };
        let spec = ProblemSpec {
            dims: self.dims,
            horizon: self.horizon.n,
            stages,
            boundary: BoundaryConditions {
                mu0: DVector::from_vec(self.boundary.mu0),
                muf: DVector::from_vec(self.boundary.muf),
                pf: self.boundary.pf,
                init_cov: self.boundary.init_cov,
            },
            underweight_p: self.filter.underweight_p,
            scp: self.scp,
        };
        spec.validate()?;
        Ok(spec)
    }

    fn from_spec(spec: &ProblemSpec) -> Self {
        ProblemFile {
            dims: spec.dims,
            horizon: HorizonFile { n: spec.horizon },
            stages: StagesFile::PerStage(spec.stages.clone()),
            boundary: BoundaryFile {
                mu0: spec.boundary.mu0.as_slice().to_vec(),
                muf: spec.boundary.muf.as_slice().to_vec(),
                pf: spec.boundary.pf.clone(),
                init_cov: spec.boundary.init_cov.clone(),
            },
            filter: FilterFile {
                underweight_p: spec.underweight_p,
            },
            scp: spec.scp.clone(),
        }
    }
}

impl Serialize for ProblemSpec {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        ProblemFile::from_spec(self).serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for ProblemSpec {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let file = ProblemFile::deserialize(deserializer)?;
        file.into_spec().map_err(D::Error::custom)
    }
}

/// Parses and validates a problem from its JSON text.
pub fn parse_problem(json: &str) -> Result<ProblemSpec> {
    let file: ProblemFile = serde_json::from_str(json)?;
    file.into_spec()
}

/// Loads and validates a problem file.
pub fn load_problem(path: impl AsRef<Path>) -> Result<ProblemSpec> {
    let text = std::fs::read_to_string(path.as_ref())
        .map_err(|e| Error::Parse(format!("cannot read {}: {e}", path.as_ref().display())))?;
    parse_problem(&text)
}

// ---------------------------------------------------------------------------
// Builtin double-integrator cases
// ---------------------------------------------------------------------------

/// The three builtin double-integrator scenarios.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BuiltinCase {
    /// Error orthogonal to the estimate, optimal gain.
    Case1,
    /// Error orthogonal to the true state, optimal gain.
    Case2,
    /// Case-1 structure with an underweighted gain (`p = 0.25`).
    Case3,
}

impl std::str::FromStr for BuiltinCase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "case1" | "1" => Ok(BuiltinCase::Case1),
            "case2" | "2" => Ok(BuiltinCase::Case2),
            "case3" | "3" => Ok(BuiltinCase::Case3),
            other => Err(Error::Parse(format!(
                "unknown builtin case `{other}` (expected case1|case2|case3)"
            ))),
        }
    }
}

impl std::fmt::Display for BuiltinCase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BuiltinCase::Case1 => write!(f, "case1"),
            BuiltinCase::Case2 => write!(f, "case2"),
            BuiltinCase::Case3 => write!(f, "case3"),
        }
    }
}

/// Builds one of the builtin planar double-integrator steering problems
/// (Δt = 0.2, N = 20, noiseless dynamics, velocity-and-crosstrack
/// measurements).
pub fn builtin_double_integrator(case: BuiltinCase) -> ProblemSpec {
    let dt = 0.2;
    let n = 20;
    let a = DMatrix::from_row_slice(
        4,
        4,
        &[
            1.0, 0.0, dt, 0.0, //
            0.0, 1.0, 0.0, dt, //
            0.0, 0.0, 1.0, 0.0, //
            0.0, 0.0, 0.0, 1.0,
        ],
    );
    let b = DMatrix::from_row_slice(
        4,
        2,
        &[
            dt, 0.0, //
            0.0, dt, //
            1.0, 0.0, //
            0.0, 1.0,
        ],
    );
    let g = DMatrix::zeros(4, 4);
    let h = DMatrix::from_row_slice(
        3,
        4,
        &[
            0.0, 1.0, 0.0, 0.0, //
            0.0, 0.0, 1.0, 0.0, //
            0.0, 0.0, 0.0, 1.0,
        ],
    );
    let r = SymMatrix::from_diagonal(&[1e-2, 1e-2, 1e-2]);
    let stage = StageModel { a, b, g, h, r };

    let scale = |v: &[f64]| -> Vec<f64> { v.iter().map(|x| x * 1e-2).collect() };
    let (init_cov, p) = match case {
        BuiltinCase::Case1 => (
            InitCov::Case1 {
                ptilde0: SymMatrix::from_diagonal(&scale(&[2.0, 1.0, 1.4, 1.4])),
                phat0: SymMatrix::from_diagonal(&scale(&[10.0, 10.0, 2.0, 2.0])),
            },
            1.0,
        ),
        BuiltinCase::Case2 => (
            InitCov::Case2 {
                ptilde0: SymMatrix::from_diagonal(&scale(&[8.0, 9.0, 0.6, 0.6])),
                p0: SymMatrix::from_diagonal(&scale(&[2.0, 1.0, 1.4, 1.4])),
            },
            1.0,
        ),
        BuiltinCase::Case3 => (
            InitCov::Case1 {
                ptilde0: SymMatrix::from_diagonal(&scale(&[2.0, 1.0, 1.4, 1.4])),
                phat0: SymMatrix::from_diagonal(&scale(&[4.0, 2.0, 2.8, 2.8])),
            },
            0.25,
        ),
    };

    let spec = ProblemSpec {
        dims: Dims {
            nx: 4,
            nu: 2,
            ny: 3,
            nw: 4,
        },
        horizon: n,
        stages: vec![stage; n],
        boundary: BoundaryConditions {
            mu0: DVector::from_row_slice(&[1.0, 2.0, 3.0, 2.0]),
            muf: DVector::from_row_slice(&[11.0, 3.0, 0.0, 0.0]),
            pf: SymMatrix::from_diagonal(&scale(&[6.0, 6.0, 0.6, 0.6])),
            init_cov,
        },
        underweight_p: p,
        scp: ScpParams::default(),
    };
    debug_assert!(spec.validate().is_ok());
    spec
}
