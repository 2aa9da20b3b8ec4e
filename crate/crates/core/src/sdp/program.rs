//! Backend-neutral conic program container: indexed scalar variables, affine
//! expressions over them, and constraints drawn from {linear equality, PSD
//! cone, second-order cone}.
//!
//! Symmetric-matrix decision variables enter through their upper-triangle
//! parameterization; equality between symmetric expressions is imposed on
//! upper triangles only.

use std::io;

use nalgebra::DMatrix;

/// Contiguous run of scalar variables forming a vector.
#[derive(Debug, Clone, Copy)]
pub struct VarVec {
    pub start: usize,
    pub len: usize,
}

impl VarVec {
    pub fn id(&self, i: usize) -> usize {
        debug_assert!(i < self.len);
        self.start + i
    }
}

/// Row-major general matrix of scalar variables.
#[derive(Debug, Clone, Copy)]
pub struct VarMat {
    pub start: usize,
    pub rows: usize,
    pub cols: usize,
}

impl VarMat {
    pub fn id(&self, r: usize, c: usize) -> usize {
        debug_assert!(r < self.rows && c < self.cols);
        self.start + r * self.cols + c
    }
}

/// Symmetric matrix of scalar variables stored as the column-major upper
/// triangle; `id(i, j) == id(j, i)`.
#[derive(Debug, Clone, Copy)]
pub struct VarSym {
    pub start: usize,
    pub n: usize,
}

impl VarSym {
    pub fn id(&self, i: usize, j: usize) -> usize {
        let (i, j) = if i <= j { (i, j) } else { (j, i) };
        debug_assert!(j < self.n);
        self.start + j * (j + 1) / 2 + i
    }

    pub fn tri_len(&self) -> usize {
        self.n * (self.n + 1) / 2
    }
}

/// Allocates variable indices and remembers names for the debug dump.
#[derive(Debug, Default)]
pub struct VarSpace {
    names: Vec<String>,
}

impl VarSpace {
    pub fn scalar(&mut self, name: String) -> usize {
        self.names.push(name);
        self.names.len() - 1
    }

    pub fn vector(&mut self, name: &str, len: usize) -> VarVec {
        let start = self.names.len();
        for i in 0..len {
            self.names.push(format!("{name}[{i}]"));
        }
        VarVec { start, len }
    }

    pub fn matrix(&mut self, name: &str, rows: usize, cols: usize) -> VarMat {
        let start = self.names.len();
        for r in 0..rows {
            for c in 0..cols {
                self.names.push(format!("{name}[{r},{c}]"));
            }
        }
        VarMat { start, rows, cols }
    }

    pub fn sym(&mut self, name: &str, n: usize) -> VarSym {
        let start = self.names.len();
        for j in 0..n {
            for i in 0..=j {
                self.names.push(format!("{name}[{i},{j}]"));
            }
        }
        VarSym { start, n }
    }

    pub fn n_vars(&self) -> usize {
        self.names.len()
    }

    pub fn into_names(self) -> Vec<String> {
        self.names
    }
}

/// Affine scalar expression `constant + Σ coeff_i · x_i`.
#[derive(Debug, Clone, Default)]
pub struct AffExpr {
    pub terms: Vec<(usize, f64)>,
    pub constant: f64,
}

impl AffExpr {
    pub fn constant(c: f64) -> Self {
        AffExpr {
            terms: Vec::new(),
            constant: c,
        }
    }

    pub fn var(id: usize) -> Self {
        AffExpr {
            terms: vec![(id, 1.0)],
            constant: 0.0,
        }
    }

    pub fn term(id: usize, coeff: f64) -> Self {
        AffExpr {
            terms: vec![(id, coeff)],
            constant: 0.0,
        }
    }

    pub fn add_var(&mut self, id: usize, coeff: f64) {
        if coeff != 0.0 {
            self.terms.push((id, coeff));
        }
    }

    pub fn add_const(&mut self, c: f64) {
        self.constant += c;
    }

    pub fn add_scaled(&mut self, other: &AffExpr, scale: f64) {
        if scale == 0.0 {
            return;
        }
        self.constant += scale * other.constant;
        for &(id, c) in &other.terms {
            self.terms.push((id, scale * c));
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.constant *= s;
        if s == 0.0 {
            self.terms.clear();
        } else {
            for t in &mut self.terms {
                t.1 *= s;
            }
        }
    }

    /// Sorts terms by variable id and merges duplicates.
    pub fn canonical(mut self) -> Self {
        self.terms.sort_by_key(|t| t.0);
        let mut merged: Vec<(usize, f64)> = Vec::with_capacity(self.terms.len());
        for (id, c) in self.terms {
            match merged.last_mut() {
                Some(last) if last.0 == id => last.1 += c,
                _ => merged.push((id, c)),
            }
        }
        merged.retain(|t| t.1 != 0.0);
        self.terms = merged;
        self
    }

    fn render(&self, names: &[String]) -> String {
        let mut out = String::new();
        if self.constant != 0.0 || self.terms.is_empty() {
            out.push_str(&format!("{:+.6e}", self.constant));
        }
        for &(id, c) in &self.terms {
            out.push_str(&format!(" {:+.6e}*{}", c, names[id]));
        }
        out
    }
}

/// Dense grid of affine expressions.
#[derive(Debug, Clone)]
pub struct AffMat {
    pub nrows: usize,
    pub ncols: usize,
    entries: Vec<AffExpr>,
}

impl AffMat {
    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        AffMat {
            nrows,
            ncols,
            entries: vec![AffExpr::default(); nrows * ncols],
        }
    }

    pub fn from_const(m: &DMatrix<f64>) -> Self {
        let mut out = AffMat::zeros(m.nrows(), m.ncols());
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                out.get_mut(i, j).constant = m[(i, j)];
            }
        }
        out
    }

    pub fn from_var_mat(v: &VarMat) -> Self {
        let mut out = AffMat::zeros(v.rows, v.cols);
        for i in 0..v.rows {
            for j in 0..v.cols {
                out.get_mut(i, j).add_var(v.id(i, j), 1.0);
            }
        }
        out
    }

    pub fn from_var_sym(v: &VarSym) -> Self {
        let mut out = AffMat::zeros(v.n, v.n);
        for i in 0..v.n {
            for j in 0..v.n {
                out.get_mut(i, j).add_var(v.id(i, j), 1.0);
            }
        }
        out
    }

    pub fn get(&self, i: usize, j: usize) -> &AffExpr {
        &self.entries[i * self.ncols + j]
    }

    pub fn get_mut(&mut self, i: usize, j: usize) -> &mut AffExpr {
        &mut self.entries[i * self.ncols + j]
    }

    pub fn add(&mut self, other: &AffMat) {
        assert_eq!((self.nrows, self.ncols), (other.nrows, other.ncols));
        for (a, b) in self.entries.iter_mut().zip(&other.entries) {
            a.add_scaled(b, 1.0);
        }
    }

    pub fn sub(&mut self, other: &AffMat) {
        assert_eq!((self.nrows, self.ncols), (other.nrows, other.ncols));
        for (a, b) in self.entries.iter_mut().zip(&other.entries) {
            a.add_scaled(b, -1.0);
        }
    }

    pub fn transpose(&self) -> AffMat {
        let mut out = AffMat::zeros(self.ncols, self.nrows);
        for i in 0..self.nrows {
            for j in 0..self.ncols {
                *out.get_mut(j, i) = self.get(i, j).clone();
            }
        }
        out
    }

    /// Congruence-style product `L · X · Rᵀ` with constant `L` and `R`.
    pub fn congruence(l: &DMatrix<f64>, x: &AffMat, r: &DMatrix<f64>) -> AffMat {
        assert_eq!(l.ncols(), x.nrows);
        assert_eq!(r.ncols(), x.ncols);
        let mut out = AffMat::zeros(l.nrows(), r.nrows());
        for i in 0..l.nrows() {
            for p in 0..x.nrows {
                let lc = l[(i, p)];
                if lc == 0.0 {
                    continue;
                }
                for j in 0..r.nrows() {
                    for q in 0..x.ncols {
                        let rc = r[(j, q)];
                        if rc == 0.0 {
                            continue;
                        }
                        out.get_mut(i, j).add_scaled(x.get(p, q), lc * rc);
                    }
                }
            }
        }
        out
    }

    /// Evaluates all entries at a given assignment (used by tests and the
    /// solution checker).
    pub fn eval(&self, x: &[f64]) -> DMatrix<f64> {
        DMatrix::from_fn(self.nrows, self.ncols, |i, j| {
            let e = self.get(i, j);
            e.constant + e.terms.iter().map(|&(id, c)| c * x[id]).sum::<f64>()
        })
    }
}

/// Per-stage variable handles, kept so solutions can be decoded.
#[derive(Debug, Clone)]
pub struct StageVarIds {
    pub mu: VarVec,
    pub ubar: VarVec,
    pub t_norm: usize,
    pub paug_minus: VarSym,
    pub paug: VarSym,
    pub u: VarMat,
    pub y: VarSym,
    pub s: VarMat,
    pub z: VarSym,
    pub e: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct ProgramMeta {
    pub nx: usize,
    pub nu: usize,
    pub horizon: usize,
    pub eps_cross: f64,
    pub stages: Vec<StageVarIds>,
}

/// Shape summary used by tests and the dump header.
#[derive(Debug, Clone, PartialEq)]
pub struct ProgramStats {
    pub n_vars: usize,
    pub n_eq_rows: usize,
    pub soc_dims: Vec<usize>,
    pub psd_dims: Vec<usize>,
}

/// Abstract conic program: linear objective, linear equalities, PSD cone
/// memberships of affine symmetric expressions, and second-order cones.
#[derive(Debug)]
pub struct ConicProgram {
    pub(crate) names: Vec<String>,
    pub(crate) objective: Vec<f64>,
    pub(crate) eq_rows: Vec<AffExpr>,
    pub(crate) soc_blocks: Vec<Vec<AffExpr>>,
    pub(crate) psd_blocks: Vec<AffMat>,
    pub(crate) meta: ProgramMeta,
}

impl ConicProgram {
    pub(crate) fn new(vars: VarSpace, meta: ProgramMeta) -> Self {
        let n = vars.n_vars();
        ConicProgram {
            names: vars.into_names(),
            objective: vec![0.0; n],
            eq_rows: Vec::new(),
            soc_blocks: Vec::new(),
            psd_blocks: Vec::new(),
            meta,
        }
    }

    pub fn n_vars(&self) -> usize {
        self.names.len()
    }

    pub(crate) fn add_objective(&mut self, id: usize, coeff: f64) {
        self.objective[id] += coeff;
    }

    /// Adds `expr == 0`.
    pub(crate) fn add_eq(&mut self, expr: AffExpr) {
        let expr = expr.canonical();
        self.check_ids(&expr);
        self.eq_rows.push(expr);
    }

    /// Adds `m == 0` entry-wise on the upper triangle (incl. diagonal).
    pub(crate) fn add_eq_upper_triangle(&mut self, m: &AffMat) {
        assert_eq!(
            m.nrows, m.ncols,
            "upper-triangle equality needs a square matrix"
        );
        for j in 0..m.ncols {
            for i in 0..=j {
                self.add_eq(m.get(i, j).clone());
            }
        }
    }

    /// Adds `m ⪰ 0` for a symmetric affine expression.
    pub(crate) fn add_psd(&mut self, m: AffMat) {
        assert_eq!(m.nrows, m.ncols, "PSD constraint needs a square matrix");
        for e in &m.entries {
            self.check_ids(e);
        }
        self.psd_blocks.push(m);
    }

    /// Adds `‖(block[1..])‖₂ ≤ block[0]`.
    pub(crate) fn add_soc(&mut self, block: Vec<AffExpr>) {
        assert!(block.len() >= 2, "second-order cone needs dimension >= 2");
        let block: Vec<AffExpr> = block.into_iter().map(AffExpr::canonical).collect();
        for e in &block {
            self.check_ids(e);
        }
        self.soc_blocks.push(block);
    }

    fn check_ids(&self, e: &AffExpr) {
        for &(id, _) in &e.terms {
            assert!(
                id < self.names.len(),
                "constraint references undeclared variable"
            );
        }
    }

    pub fn stats(&self) -> ProgramStats {
        ProgramStats {
            n_vars: self.names.len(),
            n_eq_rows: self.eq_rows.len(),
            soc_dims: self.soc_blocks.iter().map(|b| b.len()).collect(),
            psd_dims: self.psd_blocks.iter().map(|b| b.nrows).collect(),
        }
    }

    /// Writes the full program (variables, objective, every constraint with
    /// affine coefficients) in a plain text form for external verification.
    pub fn dump(&self, out: &mut dyn io::Write) -> io::Result<()> {
        let stats = self.stats();
        writeln!(
            out,
            "conic program: {} variables, {} equality rows, {} soc blocks, {} psd blocks",
            stats.n_vars,
            stats.n_eq_rows,
            stats.soc_dims.len(),
            stats.psd_dims.len()
        )?;
        writeln!(out, "variables:")?;
        for (i, name) in self.names.iter().enumerate() {
            writeln!(out, "  x{i} = {name}")?;
        }
        writeln!(out, "minimize:")?;
        let mut obj = AffExpr::default();
        for (id, &c) in self.objective.iter().enumerate() {
            obj.add_var(id, c);
        }
        writeln!(out, "  {}", obj.canonical().render(&self.names))?;
        writeln!(out, "subject to equalities (expr == 0):")?;
        for e in &self.eq_rows {
            writeln!(out, "  {}", e.render(&self.names))?;
        }
        for (b, block) in self.soc_blocks.iter().enumerate() {
            writeln!(out, "second-order cone {b} (first entry bounds the rest):")?;
            for e in block {
                writeln!(out, "  {}", e.render(&self.names))?;
            }
        }
        for (b, m) in self.psd_blocks.iter().enumerate() {
            writeln!(out, "psd cone {b} ({n}x{n} expression):", n = m.nrows)?;
            for j in 0..m.ncols {
                for i in 0..=j {
                    writeln!(
                        out,
                        "  ({i},{j}): {}",
                        m.get(i, j).clone().canonical().render(&self.names)
                    )?;
                }
            }
        }
        Ok(())
    }
}
