//! Symmetric-matrix kernels shared by all modules: symmetrization, PSD
//! checks, eigendecomposition, Schur-complement and rank utilities.
//!
//! Everything here is dense; the problems this crate targets have state
//! dimensions in the tens, where sparsity buys nothing.

use nalgebra::linalg::SymmetricEigen;
use nalgebra::DMatrix;
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Relative eigenvalue threshold below which a nominally positive-definite
/// matrix is treated as singular: min eig must exceed
/// `SINGULARITY_RTOL * max(1, ||m||_2)`.
pub const SINGULARITY_RTOL: f64 = 1e-10;

/// Dense real symmetric matrix.
///
/// The constructor symmetrizes through `(M + Mᵀ)/2`, so
/// `m[(i, j)] == m[(j, i)]` holds exactly afterwards.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix {
    data: DMatrix<f64>,
}

impl SymMatrix {
    /// Builds a symmetric matrix from an arbitrary square one.
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::Dimension(format!(
                "symmetrize expects a square matrix, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        if m.nrows() == 0 {
            return Err(Error::Dimension("matrix dimension must be >= 1".into()));
        }
        let n = m.nrows();
        let mut data = DMatrix::<f64>::zeros(n, n);
        for i in 0..n {
            data[(i, i)] = m[(i, i)];
            for j in (i + 1)..n {
                let v = 0.5 * (m[(i, j)] + m[(j, i)]);
                data[(i, j)] = v;
                data[(j, i)] = v;
            }
        }
        Ok(SymMatrix { data })
    }

    /// Builds from row-major nested arrays (the file-format representation).
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let m = mat_from_rows(rows)?;
        SymMatrix::new(m)
    }

    pub fn zeros(n: usize) -> Self {
        assert!(n >= 1, "matrix dimension must be >= 1");
        SymMatrix {
            data: DMatrix::zeros(n, n),
        }
    }

    pub fn identity(n: usize) -> Self {
        assert!(n >= 1, "matrix dimension must be >= 1");
        SymMatrix {
            data: DMatrix::identity(n, n),
        }
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        assert!(!diag.is_empty(), "matrix dimension must be >= 1");
        SymMatrix {
            data: DMatrix::from_diagonal(&nalgebra::DVector::from_row_slice(diag)),
        }
    }

    pub fn dim(&self) -> usize {
        self.data.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.data
    }

    /// Frobenius norm.
    pub fn norm(&self) -> f64 {
        self.data.norm()
    }

    pub fn trace(&self) -> f64 {
        self.data.trace()
    }
}

impl std::ops::Index<(usize, usize)> for SymMatrix {
    type Output = f64;
    fn index(&self, idx: (usize, usize)) -> &f64 {
        &self.data[idx]
    }
}

impl Serialize for SymMatrix {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        // Full row-major nested arrays, not triangles: human-checkable at the
        // dimensions this crate works with.
        mat_to_rows(&self.data).serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for SymMatrix {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(deserializer)?;
        SymMatrix::from_rows(&rows).map_err(D::Error::custom)
    }
}

/// Eigendecomposition of a symmetric matrix with the spectrum sorted
/// ascending; column `i` of `vectors` pairs with `values[i]`.
#[derive(Debug, Clone)]
pub struct EigenDecomp {
    pub values: Vec<f64>,
    pub vectors: DMatrix<f64>,
}

impl EigenDecomp {
    pub fn min_value(&self) -> f64 {
        self.values[0]
    }

    pub fn max_abs_value(&self) -> f64 {
        self.values.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
    }
}

/// Returns `(m + mᵀ)/2` as a [`SymMatrix`].
///
/// Solver round-trips break exact symmetry; every covariance re-enters the
/// typed world through here.
pub fn symmetrize(m: &DMatrix<f64>) -> Result<SymMatrix> {
    SymMatrix::new(m.clone())
}

/// Symmetric eigendecomposition with an ascending, deterministically ordered
/// spectrum.
///
/// Ties are broken by the stable ordering of the underlying decomposition;
/// callers must not rely on eigenvector choice inside degenerate eigenspaces.
pub fn eig_sym(m: &SymMatrix) -> Result<EigenDecomp> {
    let eig = SymmetricEigen::try_new(m.data.clone(), f64::EPSILON, 10_000)
        .ok_or_else(|| Error::EigenFailure(format!("{:?}", m.data)))?;
    let n = m.dim();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vectors = DMatrix::<f64>::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    Ok(EigenDecomp { values, vectors })
}

/// True iff the minimum eigenvalue is at least `-tol`.
pub fn is_psd(m: &SymMatrix, tol: f64) -> bool {
    assert!(tol >= 0.0, "tolerance must be non-negative");
    if m.data.iter().any(|v| !v.is_finite()) {
        return false;
    }
    match eig_sym(m) {
        Ok(eig) => eig.min_value() >= -tol,
        Err(_) => false,
    }
}

/// Inverts a symmetric matrix under the positive-definiteness threshold
/// `min eig > SINGULARITY_RTOL * max(1, ||m||_2)`; errors otherwise.
pub fn invert_pd(m: &SymMatrix) -> Result<DMatrix<f64>> {
    let eig = eig_sym(m)?;
    let threshold = SINGULARITY_RTOL * eig.max_abs_value().max(1.0);
    if eig.min_value() <= threshold {
        return Err(Error::Singular(format!(
            "min eigenvalue {:.3e} below threshold {:.3e}",
            eig.min_value(),
            threshold
        )));
    }
    let inv_diag = DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
        m.dim(),
        eig.values.iter().map(|v| 1.0 / v),
    ));
    let inv = &eig.vectors * inv_diag * eig.vectors.transpose();
    Ok(0.5 * (&inv + inv.transpose()))
}

/// Evaluates the Schur-complement residual `S − U P̂⁻¹ Uᵀ`.
///
/// `P̂` must pass the positive-definiteness threshold of [`invert_pd`];
/// `U` is `r x dim(P̂)` and `S` is `r x r`.
pub fn schur_residual(
    phat: &SymMatrix,
    u_aug: &DMatrix<f64>,
    s_aug: &SymMatrix,
) -> Result<SymMatrix> {
    if u_aug.ncols() != phat.dim() || s_aug.dim() != u_aug.nrows() {
        return Err(Error::Dimension(format!(
            "schur residual: P̂ is {n}x{n}, U is {ur}x{uc}, S is {s}x{s}",
            n = phat.dim(),
            ur = u_aug.nrows(),
            uc = u_aug.ncols(),
            s = s_aug.dim()
        )));
    }
    let inv = invert_pd(phat)?;
    let residual = s_aug.as_matrix() - u_aug * inv * u_aug.transpose();
    symmetrize(&residual)
}

/// Spectral norm (largest singular value) of a rectangular matrix.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    let gram = m.transpose() * m;
    let sym = SymMatrix::new(gram).expect("gram matrix is square");
    match eig_sym(&sym) {
        Ok(eig) => eig.values.last().copied().unwrap_or(0.0).max(0.0).sqrt(),
        Err(_) => f64::NAN,
    }
}

/// Relative Frobenius error `||a − b||_F / max(||b||_F, floor)`.
pub fn rel_frob_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(f64::MIN_POSITIVE)
}

pub(crate) fn mat_from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    if rows.is_empty() {
        return Err(Error::Dimension("matrix must have at least one row".into()));
    }
    let ncols = rows[0].len();
    if ncols == 0 || rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Dimension("ragged or empty matrix rows".into()));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Ok(DMatrix::from_row_slice(rows.len(), ncols, &flat))
}

pub(crate) fn mat_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use proptest::prelude::*;

    fn mat(rows: &[&[f64]]) -> DMatrix<f64> {
        let flat: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        DMatrix::from_row_slice(rows.len(), rows[0].len(), &flat)
    }

    #[test]
    fn symmetrize_already_symmetric() {
        let s = symmetrize(&mat(&[&[1.0, 2.0], &[2.0, 1.0]])).unwrap();
        assert_eq!(s.as_matrix(), &mat(&[&[1.0, 2.0], &[2.0, 1.0]]));
    }

    #[test]
    fn symmetrize_averages_off_diagonals() {
        let s = symmetrize(&mat(&[&[1.0, 4.0], &[0.0, 1.0]])).unwrap();
        assert_eq!(s.as_matrix(), &mat(&[&[1.0, 2.0], &[2.0, 1.0]]));
    }

    #[test]
    fn symmetrize_scalar_identity() {
        let s = symmetrize(&mat(&[&[5.0]])).unwrap();
        assert_eq!(s[(0, 0)], 5.0);
    }

    #[test]
    fn symmetrize_rejects_non_square() {
        let err = symmetrize(&DMatrix::zeros(2, 3)).unwrap_err();
        assert!(matches!(err, Error::Dimension(_)));
    }

    #[test]
    fn eig_sorts_diagonal_spectrum() {
        let m = SymMatrix::from_diagonal(&[3.0, 1.0, 2.0]);
        let eig = eig_sym(&m).unwrap();
        assert_eq!(eig.values, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn eig_identity_is_all_ones() {
        let eig = eig_sym(&SymMatrix::identity(4)).unwrap();
        for v in &eig.values {
            assert!((v - 1.0).abs() < 1e-12);
        }
        let vtv = eig.vectors.transpose() * &eig.vectors;
        assert!((vtv - DMatrix::identity(4, 4)).norm() < 1e-10 * 4.0);
    }

    #[test]
    fn eig_reflector() {
        let m = symmetrize(&mat(&[&[0.0, 1.0], &[1.0, 0.0]])).unwrap();
        let eig = eig_sym(&m).unwrap();
        assert!((eig.values[0] + 1.0).abs() < 1e-12);
        assert!((eig.values[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn is_psd_examples() {
        assert!(is_psd(&SymMatrix::identity(2), 0.0));
        assert!(!is_psd(&SymMatrix::from_diagonal(&[1.0, -1e-3]), 1e-6));
        assert!(is_psd(&SymMatrix::from_diagonal(&[1.0, -1e-9]), 1e-6));
    }

    #[test]
    fn schur_residual_zero_variables() {
        let p = SymMatrix::identity(3);
        let u = DMatrix::zeros(2, 3);
        let s = SymMatrix::zeros(2);
        let r = schur_residual(&p, &u, &s).unwrap();
        assert!(r.norm() < 1e-14);
    }

    #[test]
    fn schur_residual_exact_factorization() {
        let p = SymMatrix::identity(3);
        let u = mat(&[&[1.0, 2.0, 3.0], &[0.5, -1.0, 2.0]]);
        let s = symmetrize(&(&u * u.transpose())).unwrap();
        let r = schur_residual(&p, &u, &s).unwrap();
        assert!(r.norm() < 1e-12);
    }

    #[test]
    fn schur_residual_recovers_identity_shift() {
        // S := U P̂⁻¹ Uᵀ + I with the inverse taken through LU so the oracle
        // is independent of the eigendecomposition route inside.
        let f = mat(&[
            &[1.0, 0.2, 0.0, -0.3],
            &[0.4, 2.0, 0.1, 0.0],
            &[-0.5, 0.3, 1.5, 0.2],
            &[0.1, 0.0, -0.2, 1.2],
        ]);
        let p = symmetrize(&(&f * f.transpose())).unwrap();
        let u = mat(&[&[1.0, -2.0, 0.5, 0.3], &[0.0, 1.0, 2.0, -1.0]]);
        let p_inv = p.as_matrix().clone().try_inverse().unwrap();
        let s_mat = &u * p_inv * u.transpose() + DMatrix::identity(2, 2);
        let s = symmetrize(&s_mat).unwrap();
        let r = schur_residual(&p, &u, &s).unwrap();
        assert!(rel_frob_err(r.as_matrix(), &DMatrix::identity(2, 2)) < 1e-9);
    }

    #[test]
    fn schur_residual_rejects_singular() {
        let p = SymMatrix::from_diagonal(&[1.0, 0.0]);
        let u = DMatrix::zeros(1, 2);
        let s = SymMatrix::zeros(1);
        assert!(matches!(
            schur_residual(&p, &u, &s),
            Err(Error::Singular(_))
        ));
    }

    #[test]
    fn spectral_norm_of_diagonal() {
        let m = mat(&[&[3.0, 0.0], &[0.0, -4.0]]);
        assert!((spectral_norm(&m) - 4.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn symmetrize_is_idempotent(vals in proptest::collection::vec(-1e3f64..1e3, 16)) {
            let m = DMatrix::from_row_slice(4, 4, &vals);
            let once = symmetrize(&m).unwrap();
            let twice = symmetrize(once.as_matrix()).unwrap();
            prop_assert_eq!(once.as_matrix(), twice.as_matrix());
        }

        #[test]
        fn eig_values_non_decreasing(vals in proptest::collection::vec(-10.0f64..10.0, 25)) {
            let m = symmetrize(&DMatrix::from_row_slice(5, 5, &vals)).unwrap();
            let eig = eig_sym(&m).unwrap();
            for w in eig.values.windows(2) {
                prop_assert!(w[0] <= w[1]);
            }
        }

        #[test]
        fn eig_reconstructs_input(vals in proptest::collection::vec(-10.0f64..10.0, 16)) {
            let m = symmetrize(&DMatrix::from_row_slice(4, 4, &vals)).unwrap();
            let eig = eig_sym(&m).unwrap();
            let lambda = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(eig.values.clone()));
            let rebuilt = &eig.vectors * lambda * eig.vectors.transpose();
            prop_assert!((m.as_matrix() - rebuilt).norm() <= 1e-8 * (1.0 + m.norm()));
            let vtv = eig.vectors.transpose() * &eig.vectors;
            prop_assert!((vtv - DMatrix::identity(4, 4)).norm() <= 1e-10 * 4.0);
        }

        #[test]
        fn schur_residual_vanishes_on_consistent_s(
            fvals in proptest::collection::vec(-2.0f64..2.0, 9),
            uvals in proptest::collection::vec(-2.0f64..2.0, 6),
        ) {
            let f = DMatrix::from_row_slice(3, 3, &fvals);
            let p = symmetrize(&(&f * f.transpose() + DMatrix::identity(3, 3).scale(0.5))).unwrap();
            let u = DMatrix::from_row_slice(2, 3, &uvals);
            let p_inv = p.as_matrix().clone().try_inverse().unwrap();
            let s = symmetrize(&(&u * p_inv * u.transpose())).unwrap();
            let r = schur_residual(&p, &u, &s).unwrap();
            prop_assert!(r.norm() <= 1e-9 * (1.0 + s.norm()));
        }
    }
}
