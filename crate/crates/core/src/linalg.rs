//! Dense linear algebra for incremental least squares.
//!
//! The central type is [`ActiveModel`], which keeps a thin orthogonal
//! decomposition `Φ_A = Q R` of the active columns together with the
//! least-squares coefficients and residual of a fixed target. Columns are
//! appended by Gram-Schmidt with one round of reorthogonalization and removed
//! by Givens rotations, so neither operation re-solves from scratch. `R` is the
//! upper-triangular Cholesky factor of the active Gram matrix `Φ_Aᵀ Φ_A`.
//!
//! [`CholeskyFactor`] provides the same up/downdate machinery for an explicit
//! symmetric positive definite matrix; the SBL solver uses it for its
//! regularized Gram matrix.

use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// A column whose energetic norm falls below this is considered to lie in the
/// span of the active columns. Absolute, since dictionary columns are unit norm.
pub const RANK_TOL: f64 = 1e-10;

/// Tolerance used when checking that columns are unit norm.
pub const NORM_TOL: f64 = 1e-12;

const MAX_DOWNDATES: usize = 32;
const DRIFT_TOL: f64 = 1e-8;

/// An `n × m` design matrix.
#[derive(Debug, Clone)]
pub struct Dictionary {
    data: DMatrix<f64>,
    normalized: bool,
    gram: OnceLock<DMatrix<f64>>,
}

impl Dictionary {
    /// Wraps a matrix as-is. The `normalized` flag is set when every column
    /// has unit norm within [`NORM_TOL`].
    pub fn new(data: DMatrix<f64>) -> Result<Self> {
        if data.nrows() == 0 || data.ncols() == 0 {
            return Err(Error::BadArity(format!(
                "dictionary must be non-empty, got {}x{}",
                data.nrows(),
                data.ncols()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            let (row, col) = (pos % data.nrows(), pos / data.nrows());
            return Err(Error::NonFinite(format!("dictionary entry ({row}, {col})")));
        }
        let normalized = data
            .column_iter()
            .all(|c| (c.norm() - 1.0).abs() <= NORM_TOL);
        Ok(Self {
            data,
            normalized,
            gram: OnceLock::new(),
        })
    }

    /// Scales every column to unit norm and returns the original norms.
    pub fn normalize(mut data: DMatrix<f64>) -> Result<(Self, Vec<f64>)> {
        let mut norms = Vec::with_capacity(data.ncols());
        for (j, mut col) in data.column_iter_mut().enumerate() {
            let norm = col.norm();
            if !(norm > 0.0 && norm.is_finite()) {
                return Err(Error::BadArity(format!(
                    "column {j} cannot be normalized (norm {norm})"
                )));
            }
            col /= norm;
            norms.push(norm);
        }
        let mut dict = Self::new(data)?;
        dict.normalized = true;
        Ok((dict, norms))
    }

    pub fn nrows(&self) -> usize {
        self.data.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.data.ncols()
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn column(&self, i: usize) -> nalgebra::DVectorView<'_, f64> {
        self.data.column(i)
    }

    /// `Φᵀ Φ`, computed once and cached.
    pub fn gram(&self) -> &DMatrix<f64> {
        self.gram.get_or_init(|| self.data.tr_mul(&self.data))
    }

    /// Submatrix of the given columns.
    pub fn select(&self, indices: &[usize]) -> DMatrix<f64> {
        self.data.select_columns(indices)
    }

    pub(crate) fn check_index(&self, i: usize) -> Result<()> {
        if i >= self.ncols() {
            return Err(Error::BadArity(format!(
                "column index {i} out of range for {} columns",
                self.ncols()
            )));
        }
        Ok(())
    }

    pub(crate) fn check_target(&self, y: &DVector<f64>) -> Result<()> {
        if y.len() != self.nrows() {
            return Err(Error::BadArity(format!(
                "target has length {}, dictionary has {} rows",
                y.len(),
                self.nrows()
            )));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("target vector".into()));
        }
        Ok(())
    }
}

/// Thin orthonormal basis of a set of columns plus the triangular factor.
#[derive(Debug, Clone)]
struct OrthoBasis {
    q: DMatrix<f64>,
    r: DMatrix<f64>,
}

impl OrthoBasis {
    fn empty(n: usize) -> Self {
        Self {
            q: DMatrix::zeros(n, 0),
            r: DMatrix::zeros(0, 0),
        }
    }

    fn len(&self) -> usize {
        self.q.ncols()
    }

    fn max_diag(&self) -> f64 {
        self.r
            .diagonal()
            .iter()
            .fold(0.0, |acc: f64, v| acc.max(v.abs()))
    }

    /// Coefficients `Qᵀv` and the component of `v` orthogonal to the basis,
    /// using classical Gram-Schmidt with one reorthogonalization pass.
    fn project<S>(
        &self,
        v: &nalgebra::Matrix<f64, nalgebra::Dyn, nalgebra::U1, S>,
    ) -> (DVector<f64>, DVector<f64>)
    where
        S: nalgebra::Storage<f64, nalgebra::Dyn, nalgebra::U1>,
    {
        let mut u = v.clone_owned();
        if self.len() == 0 {
            return (DVector::zeros(0), u);
        }
        let mut w = self.q.tr_mul(&u);
        u.gemv(-1.0, &self.q, &w, 1.0);
        let w2 = self.q.tr_mul(&u);
        u.gemv(-1.0, &self.q, &w2, 1.0);
        w += w2;
        (w, u)
    }

    /// Appends a column; fails when it lies in the current span.
    fn push<S>(&mut self, v: &nalgebra::Matrix<f64, nalgebra::Dyn, nalgebra::U1, S>) -> Result<()>
    where
        S: nalgebra::Storage<f64, nalgebra::Dyn, nalgebra::U1>,
    {
        let k = self.len();
        if k >= self.q.nrows() {
            return Err(Error::RankDeficient(format!(
                "cannot hold more than {} independent columns",
                self.q.nrows()
            )));
        }
        let (w, u) = self.project(v);
        let d = u.norm();
        let scale = self.max_diag().max(v.norm());
        if !(d > RANK_TOL * scale.max(f64::MIN_POSITIVE)) {
            return Err(Error::RankDeficient(format!(
                "new column has energetic norm {d:.3e} relative to scale {scale:.3e}"
            )));
        }
        let q = std::mem::replace(&mut self.q, DMatrix::zeros(0, 0));
        self.q = q.insert_column(k, 0.0);
        self.q.column_mut(k).copy_from(&(u / d));
        let r = std::mem::replace(&mut self.r, DMatrix::zeros(0, 0));
        self.r = r.insert_row(k, 0.0).insert_column(k, 0.0);
        self.r.view_mut((0, k), (k, 1)).copy_from(&w);
        self.r[(k, k)] = d;
        Ok(())
    }

    /// Removes column `pos` and restores triangularity with Givens rotations.
    /// `extra` receives the same rotations (used for `Qᵀy`).
    fn remove(&mut self, pos: usize, extra: &mut DVector<f64>) {
        let k = self.len();
        let r = std::mem::replace(&mut self.r, DMatrix::zeros(0, 0));
        let mut r = r.remove_column(pos);
        for j in pos..k - 1 {
            let a = r[(j, j)];
            let b = r[(j + 1, j)];
            let h = a.hypot(b);
            if h == 0.0 {
                continue;
            }
            let (c, s) = (a / h, b / h);
            for col in j..k - 1 {
                let (x, y) = (r[(j, col)], r[(j + 1, col)]);
                r[(j, col)] = c * x + s * y;
                r[(j + 1, col)] = -s * x + c * y;
            }
            r[(j + 1, j)] = 0.0;
            for row in 0..self.q.nrows() {
                let (x, y) = (self.q[(row, j)], self.q[(row, j + 1)]);
                self.q[(row, j)] = c * x + s * y;
                self.q[(row, j + 1)] = -s * x + c * y;
            }
            let (x, y) = (extra[j], extra[j + 1]);
            extra[j] = c * x + s * y;
            extra[j + 1] = -s * x + c * y;
        }
        self.r = r.remove_row(k - 1);
        let q = std::mem::replace(&mut self.q, DMatrix::zeros(0, 0));
        self.q = q.remove_column(k - 1);
        let e = std::mem::replace(extra, DVector::zeros(0));
        *extra = e.remove_row(k - 1);
        // Keep a positive diagonal so R matches the Cholesky convention.
        for j in 0..k - 1 {
            if self.r[(j, j)] < 0.0 {
                self.r.row_mut(j).neg_mut();
                self.q.column_mut(j).neg_mut();
                extra[j] = -extra[j];
            }
        }
    }
}

/// An ordered active set with its least-squares fit of a target.
#[derive(Debug, Clone)]
pub struct ActiveModel<'a> {
    dict: &'a Dictionary,
    target: DVector<f64>,
    active: Vec<usize>,
    basis: OrthoBasis,
    qty: DVector<f64>,
    coeffs: DVector<f64>,
    residual: DVector<f64>,
    downdates: usize,
}

impl<'a> ActiveModel<'a> {
    pub fn new(dict: &'a Dictionary, target: DVector<f64>) -> Result<Self> {
        dict.check_target(&target)?;
        Ok(Self {
            dict,
            residual: target.clone(),
            target,
            active: Vec::new(),
            basis: OrthoBasis::empty(dict.nrows()),
            qty: DVector::zeros(0),
            coeffs: DVector::zeros(0),
            downdates: 0,
        })
    }

    /// Builds a model with the given columns active, in order.
    pub fn with_support(
        dict: &'a Dictionary,
        target: DVector<f64>,
        support: &[usize],
    ) -> Result<Self> {
        let mut model = Self::new(dict, target)?;
        for &i in support {
            model.add_column(i)?;
        }
        Ok(model)
    }

    pub fn dictionary(&self) -> &'a Dictionary {
        self.dict
    }

    pub fn active(&self) -> &[usize] {
        &self.active
    }

    pub fn len(&self) -> usize {
        self.active.len()
    }

    pub fn is_empty(&self) -> bool {
        self.active.is_empty()
    }

    pub fn contains(&self, i: usize) -> bool {
        self.active.contains(&i)
    }

    pub fn target(&self) -> &DVector<f64> {
        &self.target
    }

    /// Least-squares coefficients, ordered like [`active`](Self::active).
    pub fn coeffs(&self) -> &DVector<f64> {
        &self.coeffs
    }

    pub fn residual(&self) -> &DVector<f64> {
        &self.residual
    }

    pub fn residual_norm(&self) -> f64 {
        self.residual.norm()
    }

    /// Upper-triangular factor `R` with `Rᵀ R = Φ_Aᵀ Φ_A`.
    pub fn factor(&self) -> &DMatrix<f64> {
        &self.basis.r
    }

    pub fn add_column(&mut self, i: usize) -> Result<()> {
        self.dict.check_index(i)?;
        if self.contains(i) {
            return Err(Error::DuplicateIndex(i));
        }
        self.basis.push(&self.dict.column(i))?;
        self.active.push(i);
        let k = self.basis.len() - 1;
        let qty_k = self.basis.q.column(k).dot(&self.target);
        let qty = std::mem::replace(&mut self.qty, DVector::zeros(0));
        self.qty = qty.insert_row(k, qty_k);
        self.refresh_solution();
        Ok(())
    }

    pub fn remove_column(&mut self, i: usize) -> Result<()> {
        let pos = self.position(i)?;
        self.basis.remove(pos, &mut self.qty);
        self.active.remove(pos);
        self.downdates += 1;
        let diag = self.basis.r.diagonal();
        let max = diag.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
        let min = diag.iter().fold(f64::INFINITY, |a, v| a.min(v.abs()));
        if self.downdates > MAX_DOWNDATES || (!self.active.is_empty() && min < DRIFT_TOL * max) {
            self.refactor()?;
        }
        self.refresh_solution();
        Ok(())
    }

    /// Rebuilds the factorization from the active columns.
    pub fn refactor(&mut self) -> Result<()> {
        let mut basis = OrthoBasis::empty(self.dict.nrows());
        for &i in &self.active {
            basis.push(&self.dict.column(i))?;
        }
        self.qty = basis.q.tr_mul(&self.target);
        self.basis = basis;
        self.downdates = 0;
        Ok(())
    }

    fn position(&self, i: usize) -> Result<usize> {
        self.active
            .iter()
            .position(|&a| a == i)
            .ok_or(Error::NotActive(i))
    }

    fn refresh_solution(&mut self) {
        let k = self.active.len();
        self.coeffs = if k == 0 {
            DVector::zeros(0)
        } else {
            self.basis
                .r
                .solve_upper_triangular(&self.qty)
                .unwrap_or_else(|| DVector::from_element(k, f64::NAN))
        };
        let (_, r) = self.basis.project(&self.target);
        self.residual = r;
    }

    /// Component of `v` orthogonal to the active span, `R_A v`.
    pub fn project_out<S>(
        &self,
        v: &nalgebra::Matrix<f64, nalgebra::Dyn, nalgebra::U1, S>,
    ) -> DVector<f64>
    where
        S: nalgebra::Storage<f64, nalgebra::Dyn, nalgebra::U1>,
    {
        self.basis.project(v).1
    }

    /// `‖φ_i‖_{R_A}`: norm of column `i` after projecting out the active span.
    pub fn energetic_norm_of(&self, i: usize) -> f64 {
        self.project_out(&self.dict.column(i)).norm()
    }

    /// `‖r_A‖² − ‖r_{A∪i}‖²` via `⟨φ_i, r_A⟩² / ‖φ_i‖²_{R_A}`.
    pub fn residual_decrease(&self, i: usize) -> Result<f64> {
        self.dict.check_index(i)?;
        if self.contains(i) {
            return Err(Error::DuplicateIndex(i));
        }
        let e = self.energetic_norm_of(i);
        if e < RANK_TOL {
            return Err(Error::InSpan(i));
        }
        let c = self.dict.column(i).dot(&self.residual);
        Ok(c * c / (e * e))
    }

    /// Residual decreases for every column; `None` for active columns and
    /// columns in the active span.
    pub fn residual_decreases(&self) -> Vec<Option<f64>> {
        let phi = self.dict.matrix();
        let corr = phi.tr_mul(&self.residual);
        let norms = self.energetic_norms_sq();
        (0..self.dict.ncols())
            .map(|j| {
                let e2 = norms[j]?;
                Some(corr[j] * corr[j] / e2)
            })
            .collect()
    }

    /// Squared energetic norms `‖φ_j‖²_{R_A}` for inactive columns outside
    /// the active span.
    pub fn energetic_norms_sq(&self) -> Vec<Option<f64>> {
        let phi = self.dict.matrix();
        let m = phi.ncols();
        let mut out = vec![None; m];
        let col_sq: Vec<f64> = (0..m).map(|j| self.dict.gram()[(j, j)]).collect();
        let proj = if self.basis.len() > 0 {
            Some(self.basis.q.tr_mul(phi))
        } else {
            None
        };
        for j in 0..m {
            if self.contains(j) {
                continue;
            }
            let mut e2 = match &proj {
                Some(p) => col_sq[j] - p.column(j).norm_squared(),
                None => col_sq[j],
            };
            // The subtraction above loses relative accuracy for columns close
            // to the active span; recompute those by explicit projection.
            if e2 < 1e-6 * col_sq[j] {
                e2 = self.project_out(&phi.column(j)).norm_squared();
            }
            if e2.sqrt() >= RANK_TOL {
                out[j] = Some(e2);
            }
        }
        out
    }

    /// Correlations `⟨φ_j, r_A⟩` for every column.
    pub fn correlations(&self) -> DVector<f64> {
        self.dict.matrix().tr_mul(&self.residual)
    }

    /// `‖r_{A\i}‖² − ‖r_A‖²` for an active column, from the factor:
    /// `x_i² / (G⁻¹)_ii` with `G = RᵀR`.
    pub fn residual_increase(&self, i: usize) -> Result<f64> {
        let pos = self.position(i)?;
        let rinv_rows = self.inverse_row_norms_sq();
        Ok(self.coeffs[pos].powi(2) / rinv_rows[pos])
    }

    /// Residual increases for all active columns, ordered like `active()`.
    pub fn residual_increases(&self) -> Vec<f64> {
        let rows = self.inverse_row_norms_sq();
        self.coeffs
            .iter()
            .zip(rows)
            .map(|(x, g)| x * x / g)
            .collect()
    }

    /// `(G⁻¹)_ii = ‖row i of R⁻¹‖²` for every active position.
    fn inverse_row_norms_sq(&self) -> Vec<f64> {
        let k = self.active.len();
        if k == 0 {
            return Vec::new();
        }
        let rinv = self
            .basis
            .r
            .solve_upper_triangular(&DMatrix::identity(k, k))
            .unwrap_or_else(|| DMatrix::from_element(k, k, f64::NAN));
        (0..k).map(|i| rinv.row(i).norm_squared()).collect()
    }

    /// Coefficients scattered into a length-`m` vector.
    pub fn full_coeffs(&self) -> DVector<f64> {
        let mut x = DVector::zeros(self.dict.ncols());
        for (&i, &c) in self.active.iter().zip(self.coeffs.iter()) {
            x[i] = c;
        }
        x
    }
}

/// Least-squares fit of `y` on the given columns by Householder QR.
pub fn ls_solve(
    dict: &Dictionary,
    indices: &[usize],
    y: &DVector<f64>,
) -> Result<(DVector<f64>, DVector<f64>)> {
    dict.check_target(y)?;
    check_distinct(dict, indices)?;
    if indices.is_empty() {
        return Ok((DVector::zeros(0), y.clone()));
    }
    if indices.len() > dict.nrows() {
        return Err(Error::RankDeficient(format!(
            "{} columns exceed {} rows",
            indices.len(),
            dict.nrows()
        )));
    }
    let sub = dict.select(indices);
    let qr = sub.clone().qr();
    let r = qr.r();
    let diag: Vec<f64> = r.diagonal().iter().map(|v| v.abs()).collect();
    let max = diag.iter().cloned().fold(0.0, f64::max);
    let min = diag.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(min >= RANK_TOL * max) || max == 0.0 {
        return Err(Error::RankDeficient(format!(
            "triangular factor diagonal ratio {:.3e}",
            min / max
        )));
    }
    let qty = qr.q().tr_mul(y);
    let coeffs = r
        .solve_upper_triangular(&qty)
        .ok_or_else(|| Error::RankDeficient("singular triangular factor".into()))?;
    let residual = y - &sub * &coeffs;
    Ok((coeffs, residual))
}

fn check_distinct(dict: &Dictionary, indices: &[usize]) -> Result<()> {
    let mut seen = vec![false; dict.ncols()];
    for &i in indices {
        dict.check_index(i)?;
        if std::mem::replace(&mut seen[i], true) {
            return Err(Error::DuplicateIndex(i));
        }
    }
    Ok(())
}

/// `sqrt(vᵀ (I − Φ_A Φ_A⁺) v)`.
pub fn energetic_norm(dict: &Dictionary, active: &[usize], v: &DVector<f64>) -> Result<f64> {
    check_distinct(dict, active)?;
    if v.len() != dict.nrows() {
        return Err(Error::BadArity(format!(
            "vector has length {}, expected {}",
            v.len(),
            dict.nrows()
        )));
    }
    let mut basis = OrthoBasis::empty(dict.nrows());
    for &i in active {
        basis.push(&dict.column(i))?;
    }
    Ok(basis.project(v).1.norm().max(0.0))
}

/// Dense residual projector `I − Φ_A Φ_A⁺`.
pub fn residual_projector(dict: &Dictionary, active: &[usize]) -> Result<DMatrix<f64>> {
    check_distinct(dict, active)?;
    let n = dict.nrows();
    let mut basis = OrthoBasis::empty(n);
    for &i in active {
        basis.push(&dict.column(i))?;
    }
    Ok(DMatrix::identity(n, n) - &basis.q * basis.q.transpose())
}

/// Smallest singular value of a dense matrix.
pub fn min_singular_value(matrix: &DMatrix<f64>) -> f64 {
    if matrix.is_empty() {
        return 0.0;
    }
    matrix
        .singular_values()
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

/// Upper-triangular Cholesky factor `R` of a symmetric positive definite
/// matrix, `A = RᵀR`, with rank-one and bordering modifications.
#[derive(Debug, Clone)]
pub struct CholeskyFactor {
    r: DMatrix<f64>,
}

impl CholeskyFactor {
    pub fn empty() -> Self {
        Self {
            r: DMatrix::zeros(0, 0),
        }
    }

    pub fn new(a: &DMatrix<f64>) -> Result<Self> {
        let chol = a
            .clone()
            .cholesky()
            .ok_or_else(|| Error::NumericalFailure("matrix is not positive definite".into()))?;
        Ok(Self {
            r: chol.l().transpose(),
        })
    }

    pub fn dim(&self) -> usize {
        self.r.nrows()
    }

    pub fn upper(&self) -> &DMatrix<f64> {
        &self.r
    }

    /// Reconstructs `RᵀR`.
    pub fn matrix(&self) -> DMatrix<f64> {
        self.r.tr_mul(&self.r)
    }

    /// `A ← A + x xᵀ`.
    pub fn update(&mut self, x: &DVector<f64>) {
        let k = self.dim();
        let mut w = x.clone();
        for j in 0..k {
            let rjj = self.r[(j, j)];
            let h = rjj.hypot(w[j]);
            let (c, s) = (rjj / h, w[j] / h);
            self.r[(j, j)] = h;
            for col in j + 1..k {
                let (a, b) = (self.r[(j, col)], w[col]);
                self.r[(j, col)] = c * a + s * b;
                w[col] = -s * a + c * b;
            }
        }
    }

    /// `A ← A − x xᵀ`; fails if the result is not positive definite.
    pub fn downdate(&mut self, x: &DVector<f64>) -> Result<()> {
        let k = self.dim();
        let mut w = x.clone();
        for j in 0..k {
            let rjj = self.r[(j, j)];
            let d = (rjj - w[j]) * (rjj + w[j]);
            if !(d > 0.0) {
                return Err(Error::NumericalFailure(format!(
                    "cholesky downdate lost definiteness at pivot {j}"
                )));
            }
            let h = d.sqrt();
            let (c, s) = (h / rjj, w[j] / rjj);
            self.r[(j, j)] = h;
            for col in j + 1..k {
                let a = self.r[(j, col)];
                let b = w[col];
                let new_a = (a - s * b) / c;
                self.r[(j, col)] = new_a;
                w[col] = c * b - s * new_a;
            }
        }
        Ok(())
    }

    /// Borders the matrix with a new last row/column `[b; d]`.
    pub fn append(&mut self, b: &DVector<f64>, d: f64) -> Result<()> {
        let k = self.dim();
        let w = if k == 0 {
            DVector::zeros(0)
        } else {
            self.r
                .tr_solve_upper_triangular(b)
                .ok_or_else(|| Error::NumericalFailure("singular factor".into()))?
        };
        let pivot = d - w.norm_squared();
        if !(pivot > 0.0) {
            return Err(Error::NumericalFailure(format!(
                "bordered matrix not positive definite (pivot {pivot:.3e})"
            )));
        }
        let r = std::mem::replace(&mut self.r, DMatrix::zeros(0, 0));
        self.r = r.insert_row(k, 0.0).insert_column(k, 0.0);
        self.r.view_mut((0, k), (k, 1)).copy_from(&w);
        self.r[(k, k)] = pivot.sqrt();
        Ok(())
    }

    /// Deletes row and column `pos` of the factored matrix.
    pub fn remove(&mut self, pos: usize) {
        let k = self.dim();
        let r = std::mem::replace(&mut self.r, DMatrix::zeros(0, 0));
        let mut r = r.remove_column(pos);
        for j in pos..k - 1 {
            let a = r[(j, j)];
            let b = r[(j + 1, j)];
            let h = a.hypot(b);
            if h == 0.0 {
                continue;
            }
            let (c, s) = (a / h, b / h);
            for col in j..k - 1 {
                let (x, y) = (r[(j, col)], r[(j + 1, col)]);
                r[(j, col)] = c * x + s * y;
                r[(j + 1, col)] = -s * x + c * y;
            }
            r[(j + 1, j)] = 0.0;
        }
        self.r = r.remove_row(k - 1);
    }

    /// Solves `A x = b`.
    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        if self.dim() == 0 {
            return DVector::zeros(0);
        }
        let z = self
            .r
            .tr_solve_upper_triangular(b)
            .expect("triangular factor has a positive diagonal");
        self.r
            .solve_upper_triangular(&z)
            .expect("triangular factor has a positive diagonal")
    }

    /// Solves `Rᵀ Z = B` for a block of right-hand sides.
    pub fn half_solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        if self.dim() == 0 {
            return DMatrix::zeros(0, b.ncols());
        }
        self.r
            .tr_solve_upper_triangular(b)
            .expect("triangular factor has a positive diagonal")
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        let k = self.dim();
        if k == 0 {
            return DMatrix::zeros(0, 0);
        }
        let rinv = self
            .r
            .solve_upper_triangular(&DMatrix::identity(k, k))
            .expect("triangular factor has a positive diagonal");
        &rinv * rinv.transpose()
    }

    pub fn log_det(&self) -> f64 {
        2.0 * self.r.diagonal().iter().map(|v| v.ln()).sum::<f64>()
    }

    pub fn min_pivot(&self) -> f64 {
        self.r
            .diagonal()
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min)
    }
}
