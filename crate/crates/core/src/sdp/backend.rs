//! Bridge from the abstract conic program to a concrete solver.
//!
//! The default backend is clarabel; anything that understands linear
//! equalities, PSD cones and second-order cones can be swapped in behind
//! [`ConicBackend`].

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettingsBuilder, DefaultSolver, IPSolver, SolverStatus, SupportedConeT,
};
use serde::{Deserialize, Serialize};

use super::program::ConicProgram;
use crate::error::{Error, Result};

/// Backend-visible outcome of one solve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    NumericalTrouble,
}

/// Primal values as the backend returned them.
#[derive(Debug, Clone)]
pub struct RawSolution {
    pub status: SolveStatus,
    pub x: Vec<f64>,
}

pub trait ConicBackend {
    fn solve(&self, program: &ConicProgram) -> Result<RawSolution>;
}

/// Clarabel interior-point backend.
#[derive(Debug, Clone)]
pub struct ClarabelBackend {
    /// Feasibility and gap tolerance handed to the solver.
    pub tol: f64,
    pub max_iter: u32,
    pub verbose: bool,
}

impl Default for ClarabelBackend {
    fn default() -> Self {
        ClarabelBackend {
            tol: 1e-9,
            max_iter: 500,
            verbose: false,
        }
    }
}

const SQRT2: f64 = std::f64::consts::SQRT_2;

impl ConicBackend for ClarabelBackend {
    fn solve(&self, program: &ConicProgram) -> Result<RawSolution> {
        let n = program.n_vars();
        let mut rows = TripletRows::new(n);
        let mut cones: Vec<SupportedConeT<f64>> = Vec::new();

        // Equalities: A x = b rows in the zero cone.
        for e in &program.eq_rows {
            let r = rows.next_row();
            for &(id, c) in &e.terms {
                rows.push(r, id, c);
            }
            rows.b.push(-e.constant);
        }
        if !program.eq_rows.is_empty() {
            cones.push(SupportedConeT::ZeroConeT(program.eq_rows.len()));
        }

        // Cone memberships use s = b − A x, so coefficients flip sign.
        for block in &program.soc_blocks {
            for e in block {
                let r = rows.next_row();
                for &(id, c) in &e.terms {
                    rows.push(r, id, -c);
                }
                rows.b.push(e.constant);
            }
            cones.push(SupportedConeT::SecondOrderConeT(block.len()));
        }

        // PSD blocks in svec order (column-major upper triangle, off-diagonal
        // entries scaled by sqrt(2)).
        for m in &program.psd_blocks {
            for j in 0..m.ncols {
                for i in 0..=j {
                    let scale = if i == j { 1.0 } else { SQRT2 };
                    let e = m.get(i, j).clone().canonical();
                    let r = rows.next_row();
                    for (id, c) in e.terms {
                        rows.push(r, id, -c * scale);
                    }
                    rows.b.push(e.constant * scale);
                }
            }
            cones.push(SupportedConeT::PSDTriangleConeT(m.nrows));
        }

        let (a, b) = rows.finish();
        let p = CscMatrix::<f64>::zeros((n, n));
        let settings = DefaultSettingsBuilder::default()
            .verbose(self.verbose)
            .max_iter(self.max_iter)
            .tol_gap_abs(self.tol)
            .tol_gap_rel(self.tol)
            .tol_feas(self.tol)
            .build()
            .expect("static settings are valid");

        let mut solver = DefaultSolver::new(&p, &program.objective, &a, &b, &cones, settings)
            .map_err(|e| Error::Dimension(format!("backend rejected program: {e:?}")))?;
        solver.solve();

        let status = match solver.solution.status {
            SolverStatus::Solved => SolveStatus::Optimal,
            SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => {
                SolveStatus::Infeasible
            }
            _ => SolveStatus::NumericalTrouble,
        };
        Ok(RawSolution {
            status,
            x: solver.solution.x.clone(),
        })
    }
}

/// Column-wise triplet accumulator for the constraint matrix.
struct TripletRows {
    cols: Vec<Vec<(usize, f64)>>,
    b: Vec<f64>,
    n_rows: usize,
}

impl TripletRows {
    fn new(n_vars: usize) -> Self {
        TripletRows {
            cols: vec![Vec::new(); n_vars],
            b: Vec::new(),
            n_rows: 0,
        }
    }

    fn next_row(&mut self) -> usize {
        self.n_rows += 1;
        self.n_rows - 1
    }

    fn push(&mut self, row: usize, col: usize, val: f64) {
        if val != 0.0 {
            self.cols[col].push((row, val));
        }
    }

    fn finish(mut self) -> (CscMatrix<f64>, Vec<f64>) {
        let n = self.cols.len();
        let mut colptr = Vec::with_capacity(n + 1);
        let mut rowval = Vec::new();
        let mut nzval = Vec::new();
        colptr.push(0);
        for col in &mut self.cols {
            col.sort_by_key(|e| e.0);
            let mut merged: Vec<(usize, f64)> = Vec::with_capacity(col.len());
            for &(r, v) in col.iter() {
                match merged.last_mut() {
                    Some(last) if last.0 == r => last.1 += v,
                    _ => merged.push((r, v)),
                }
            }
            for (r, v) in merged {
                rowval.push(r);
                nzval.push(v);
            }
            colptr.push(rowval.len());
        }
        (
            CscMatrix::new(self.n_rows, n, colptr, rowval, nzval),
            self.b,
        )
    }
}
