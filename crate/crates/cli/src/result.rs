//! Result-file schema: everything one solve produces, serialized as a single
//! JSON document that `validate` and `export-plots` read back.

use std::path::Path;

use serde::{Deserialize, Serialize};

use covsteer::augmented::StageMoments;
use covsteer::filter::FilterSchedule;
use covsteer::linalg::SymMatrix;
use covsteer::model::{Policy, ProblemSpec};
use covsteer::montecarlo::MCReport;
use covsteer::scp::ConvergenceTrace;

pub const FORMAT_VERSION: u32 = 1;

/// One stage of the orthogonality-assuming covariance prediction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LegacyStage {
    #[serde(rename = "Phat")]
    pub phat: SymMatrix,
    #[serde(rename = "P")]
    pub p: SymMatrix,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunResult {
    pub format_version: u32,
    /// Builtin case name when one was solved, for bookkeeping only.
    pub case: Option<String>,
    /// Full problem echo; parses back into an identical spec.
    pub problem: ProblemSpec,
    pub filter: FilterSchedule,
    pub policy: Policy,
    /// Authoritative per-stage prediction (re-propagated with the policy).
    pub predicted: Vec<StageMoments>,
    /// Present when the run was asked to emit the prior-work comparison.
    pub legacy_prediction: Option<Vec<LegacyStage>>,
    pub trace: ConvergenceTrace,
    /// Spectral norm of each feedback gain.
    pub gain_spectral_norms: Vec<f64>,
    pub mc: Option<MCReport>,
}

impl RunResult {
    pub fn load(path: &Path) -> covsteer::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| covsteer::Error::Parse(format!("cannot read {}: {e}", path.display())))?;
        let result: RunResult = serde_json::from_str(&text)
            .map_err(|e| covsteer::Error::Parse(format!("{}: {e}", path.display())))?;
        if result.format_version != FORMAT_VERSION {
            return Err(covsteer::Error::Validation(format!(
                "unsupported result format_version {} (expected {FORMAT_VERSION})",
                result.format_version
            )));
        }
        Ok(result)
    }
}
