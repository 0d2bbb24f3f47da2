//! Sparse Bayesian learning by coordinate ascent on the type-II marginal
//! likelihood.
//!
//! The model is `y = Φx + ε` with `ε ~ N(0, σ²I)` and independent priors
//! `x_i ~ N(0, γ_i)`. Columns with `γ_i > 0` form the active set `A`. The
//! state keeps a Cholesky factor of the regularized Gram matrix
//!
//! ```text
//! M = Φ_Aᵀ Φ_A + σ² Γ_A⁻¹
//! ```
//!
//! from which the posterior `Σ = σ² M⁻¹`, `μ = M⁻¹ Φ_Aᵀ y` and the quality
//! and sparsity factors follow. Internally `q` and `s` are stored multiplied
//! by `σ²` (`q̂ = φᵀ R y`, `ŝ = φᵀ R φ` with `R = σ² C⁻¹`), which keeps them
//! well scaled as `σ → 0`.
//!
//! Likelihood values use the conventional halved form
//! `L(γ) = −½ (yᵀC⁻¹y + log|C| + n log 2π)`, so that adding, deleting or
//! re-estimating one `γ_i` changes `L` by exactly `l(γ_i) − l(γ_i_old)` with
//! `l(γ) = ½ (q²γ/(1+γs) − log(1+γs))`.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{CholeskyFactor, Dictionary};
use crate::stepwise::{argmax, argmin, Action, SelectionPath};

/// Moves between full recomputations of the factorization.
pub const REFRESH_INTERVAL: usize = 50;

/// Default outer-iteration limit.
pub const DEFAULT_MAX_OUTER: usize = 100;

/// Closed-form maximizer of `l(γ)` for one coordinate.
pub fn optimal_gamma(q: f64, s: f64) -> f64 {
    let q2 = q * q;
    if q2 > s {
        (q2 - s) / (s * s)
    } else {
        0.0
    }
}

/// `l(γ) = ½ (q²γ/(1+γs) − log(1+γs))`, the part of the likelihood that
/// depends on a single prior variance.
pub fn coordinate_likelihood(q: f64, s: f64, gamma: f64) -> f64 {
    if gamma == 0.0 {
        return 0.0;
    }
    let gs = gamma * s;
    0.5 * (q * q * gamma / (1.0 + gs) - gs.ln_1p())
}

/// `x − log(1 + x)` without cancellation near zero.
fn x_minus_log1p(x: f64) -> f64 {
    if x.abs() < 1e-4 {
        x * x * (0.5 - x * (1.0 / 3.0 - x * 0.25))
    } else {
        x - x.ln_1p()
    }
}

/// Likelihood gain of activating an inactive column at its optimal `γ`.
pub fn delta_add(q: f64, s: f64) -> f64 {
    let t = q * q / s;
    if t > 1.0 {
        0.5 * x_minus_log1p(t - 1.0)
    } else {
        0.0
    }
}

/// Likelihood change of pruning an active column (`γ → 0`). `q` and `s` are
/// the leave-one-out factors.
pub fn delta_delete(q: f64, s: f64, gamma: f64) -> f64 {
    -coordinate_likelihood(q, s, gamma)
}

/// Likelihood change of moving an active `γ` to its optimum (which may be 0).
pub fn delta_update(q: f64, s: f64, gamma_old: f64) -> f64 {
    let gamma_new = optimal_gamma(q, s);
    if gamma_new == 0.0 {
        return delta_delete(q, s, gamma_old);
    }
    let x = s * (gamma_new - gamma_old) / (1.0 + gamma_old * s);
    0.5 * x_minus_log1p(x)
}

/// Posterior and factor state for a fixed dictionary, target and noise level.
#[derive(Debug, Clone)]
pub struct SblState<'a> {
    dict: &'a Dictionary,
    y: DVector<f64>,
    sigma2: f64,
    gamma: Vec<f64>,
    active: Vec<usize>,
    factor: CholeskyFactor,
    moves_since_refresh: usize,
    phi_t_y: DVector<f64>,
    m_inv: DMatrix<f64>,
    mu: DVector<f64>,
    q_hat: DVector<f64>,
    s_hat: DVector<f64>,
}

impl<'a> SblState<'a> {
    /// Empty model (`γ = 0`).
    pub fn new(dict: &'a Dictionary, y: DVector<f64>, sigma2: f64) -> Result<Self> {
        dict.check_target(&y)?;
        if !(sigma2 > 0.0 && sigma2.is_finite()) {
            return Err(Error::BadArity(format!(
                "noise variance must be positive, got {sigma2}"
            )));
        }
        let phi_t_y = dict.matrix().tr_mul(&y);
        let s_hat = dict.gram().diagonal();
        Ok(Self {
            dict,
            sigma2,
            gamma: vec![0.0; dict.ncols()],
            active: Vec::new(),
            factor: CholeskyFactor::empty(),
            moves_since_refresh: 0,
            q_hat: phi_t_y.clone(),
            phi_t_y,
            y,
            m_inv: DMatrix::zeros(0, 0),
            mu: DVector::zeros(0),
            s_hat,
        })
    }

    /// State for an arbitrary non-negative `γ`.
    pub fn from_gamma(
        dict: &'a Dictionary,
        y: DVector<f64>,
        sigma2: f64,
        gamma: &[f64],
    ) -> Result<Self> {
        let mut state = Self::new(dict, y, sigma2)?;
        if gamma.len() != dict.ncols() {
            return Err(Error::BadArity(format!(
                "gamma has length {}, expected {}",
                gamma.len(),
                dict.ncols()
            )));
        }
        if gamma.iter().any(|g| !(g.is_finite() && *g >= 0.0)) {
            return Err(Error::BadArity(
                "gamma must be finite and non-negative".into(),
            ));
        }
        state.gamma = gamma.to_vec();
        state.active = (0..gamma.len()).filter(|&i| gamma[i] > 0.0).collect();
        state.recompute()?;
        Ok(state)
    }

    pub fn dictionary(&self) -> &'a Dictionary {
        self.dict
    }

    pub fn target(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }

    pub fn gamma(&self) -> &[f64] {
        &self.gamma
    }

    /// Active columns in insertion order; `mean()` and `covariance()` follow it.
    pub fn active(&self) -> &[usize] {
        &self.active
    }

    pub fn is_active(&self, i: usize) -> bool {
        self.gamma[i] > 0.0
    }

    /// Posterior mean `μ` on the active set.
    pub fn mean(&self) -> &DVector<f64> {
        &self.mu
    }

    /// Posterior covariance `Σ = (Γ_A⁻¹ + σ⁻² Φ_Aᵀ Φ_A)⁻¹`.
    pub fn covariance(&self) -> DMatrix<f64> {
        &self.m_inv * self.sigma2
    }

    /// Posterior mean scattered into a length-`m` vector.
    pub fn full_mean(&self) -> DVector<f64> {
        let mut x = DVector::zeros(self.dict.ncols());
        for (&i, &v) in self.active.iter().zip(self.mu.iter()) {
            x[i] = v;
        }
        x
    }

    /// Quality factor `q_i = φ_iᵀ C_{A\i}⁻¹ y`.
    pub fn q(&self, i: usize) -> f64 {
        self.q_hat[i] / self.sigma2
    }

    /// Sparsity factor `s_i = φ_iᵀ C_{A\i}⁻¹ φ_i`.
    pub fn s(&self, i: usize) -> f64 {
        self.s_hat[i] / self.sigma2
    }

    pub fn q_all(&self) -> DVector<f64> {
        &self.q_hat / self.sigma2
    }

    pub fn s_all(&self) -> DVector<f64> {
        &self.s_hat / self.sigma2
    }

    /// `|⟨φ̃_i, r_{A\i,σ}⟩| / σ`, where `φ̃_i` is `φ_i` scaled to unit energetic
    /// norm under `R_{A\i,σ}`. Exceeds 1 exactly when `q_i² > s_i`.
    pub fn relevance(&self, i: usize) -> f64 {
        let s = self.s_hat[i];
        if !(s > 0.0) {
            return 0.0;
        }
        self.q_hat[i].abs() / (s * self.sigma2).sqrt()
    }

    /// `r_{A,σ} = y − Φ_A μ`.
    pub fn residual(&self) -> DVector<f64> {
        let mut r = self.y.clone();
        for (&i, &m) in self.active.iter().zip(self.mu.iter()) {
            r.axpy(-m, &self.dict.column(i), 1.0);
        }
        r
    }

    /// Dense `R_{A,σ} = σ² C⁻¹ = I − Φ_A M⁻¹ Φ_Aᵀ`.
    pub fn residual_projector(&self) -> DMatrix<f64> {
        let n = self.dict.nrows();
        if self.active.is_empty() {
            return DMatrix::identity(n, n);
        }
        let a = self.dict.select(&self.active);
        DMatrix::identity(n, n) - &a * &self.m_inv * a.transpose()
    }

    /// Halved log marginal likelihood of the current `γ`.
    pub fn log_marginal_likelihood(&self) -> f64 {
        let n = self.dict.nrows() as f64;
        let k = self.active.len() as f64;
        let r = self.residual();
        let penalty: f64 = self
            .active
            .iter()
            .zip(self.mu.iter())
            .map(|(&i, &m)| m * m / self.gamma[i])
            .sum();
        let quad = r.norm_squared() / self.sigma2 + penalty;
        let log_gamma: f64 = self.active.iter().map(|&i| self.gamma[i].ln()).sum();
        let log_det = (n - k) * self.sigma2.ln() + log_gamma + self.factor.log_det();
        -0.5 * (quad + log_det + n * (2.0 * PI).ln())
    }

    /// Sets `γ_i` and refreshes the posterior. Zero deactivates the column.
    pub fn set_gamma(&mut self, i: usize, value: f64) -> Result<()> {
        self.dict.check_index(i)?;
        if !(value.is_finite() && value >= 0.0) {
            return Err(Error::BadArity(format!(
                "prior variance must be finite and >= 0, got {value}"
            )));
        }
        let old = self.gamma[i];
        if old == value {
            return Ok(());
        }
        let modified = if old == 0.0 {
            self.gamma[i] = value;
            self.active.push(i);
            let gram = self.dict.gram();
            let b = DVector::from_iterator(
                self.active.len() - 1,
                self.active[..self.active.len() - 1]
                    .iter()
                    .map(|&a| gram[(a, i)]),
            );
            self.factor.append(&b, gram[(i, i)] + self.sigma2 / value)
        } else {
            let pos = self
                .active
                .iter()
                .position(|&a| a == i)
                .expect("active column");
            self.gamma[i] = value;
            if value == 0.0 {
                self.factor.remove(pos);
                self.active.remove(pos);
                Ok(())
            } else {
                let change = self.sigma2 * (1.0 / value - 1.0 / old);
                let mut x = DVector::zeros(self.active.len());
                x[pos] = change.abs().sqrt();
                if change > 0.0 {
                    self.factor.update(&x);
                    Ok(())
                } else {
                    self.factor.downdate(&x)
                }
            }
        };
        self.moves_since_refresh += 1;
        if modified.is_err() || self.moves_since_refresh >= REFRESH_INTERVAL {
            self.recompute()
        } else {
            self.refresh_factors()
        }
    }

    /// Rebuilds the factorization from `γ` and recomputes everything.
    pub fn recompute(&mut self) -> Result<()> {
        let gram = self.dict.gram();
        let k = self.active.len();
        self.factor = if k == 0 {
            CholeskyFactor::empty()
        } else {
            let mut m = gram.select_rows(&self.active).select_columns(&self.active);
            for (p, &i) in self.active.iter().enumerate() {
                m[(p, p)] += self.sigma2 / self.gamma[i];
            }
            CholeskyFactor::new(&m)?
        };
        self.moves_since_refresh = 0;
        self.refresh_factors()
    }

    /// Recomputes `μ`, `Σ`, `q` and `s` from the current factor.
    pub fn refresh_factors(&mut self) -> Result<()> {
        let gram = self.dict.gram();
        let m = self.dict.ncols();
        let k = self.active.len();
        if k == 0 {
            self.m_inv = DMatrix::zeros(0, 0);
            self.mu = DVector::zeros(0);
            self.q_hat = self.phi_t_y.clone();
            self.s_hat = gram.diagonal();
            return Ok(());
        }
        if !(self.factor.min_pivot() > 0.0) {
            return Err(Error::NumericalFailure(
                "regularized Gram factor is singular".into(),
            ));
        }
        self.m_inv = self.factor.inverse();
        let rhs = DVector::from_iterator(k, self.active.iter().map(|&i| self.phi_t_y[i]));
        self.mu = self.factor.solve(&rhs);
        let g_a = gram.select_rows(&self.active);
        let z = self.factor.half_solve(&g_a);
        let mut q_hat = &self.phi_t_y - g_a.tr_mul(&self.mu);
        let mut s_hat = DVector::zeros(m);
        for j in 0..m {
            s_hat[j] = gram[(j, j)] - z.column(j).norm_squared();
        }
        for j in 0..m {
            if self.gamma[j] == 0.0 && s_hat[j] < 1e-6 * gram[(j, j)] {
                s_hat[j] = self.ridge_energy(j, None);
            }
        }
        for (p, &i) in self.active.iter().enumerate() {
            let mpp = self.m_inv[(p, p)];
            let schur = 1.0 / mpp;
            let reg = self.sigma2 / self.gamma[i];
            q_hat[i] = self.mu[p] * schur;
            s_hat[i] = if reg <= 0.5 * schur {
                schur - reg
            } else {
                self.ridge_energy(i, Some(p))
            };
        }
        if q_hat.iter().chain(s_hat.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NumericalFailure(
                "non-finite quality or sparsity factor".into(),
            ));
        }
        self.q_hat = q_hat;
        self.s_hat = s_hat;
        Ok(())
    }

    /// `φ_jᵀ R φ_j` evaluated as the optimal ridge objective
    /// `min_β ‖φ_j − Φβ‖² + σ² Σ β²/γ` over the active columns, excluding
    /// active position `skip` when given. Both terms are non-negative, so
    /// this avoids the cancellation of the Gram-based formula.
    fn ridge_energy(&self, j: usize, skip: Option<usize>) -> f64 {
        let gram = self.dict.gram();
        let k = self.active.len();
        let b = DVector::from_iterator(k, self.active.iter().map(|&a| gram[(a, j)]));
        let mut beta = &self.m_inv * &b;
        if let Some(p) = skip {
            // Inverse of M with row/column p removed, applied through the
            // block-inverse identity.
            let col = self.m_inv.column(p).into_owned();
            let mut b_red = b.clone();
            b_red[p] = 0.0;
            let mut inner = &self.m_inv * &b_red;
            let scale = col.dot(&b_red) / self.m_inv[(p, p)];
            inner.axpy(-scale, &col, 1.0);
            inner[p] = 0.0;
            beta = inner;
        }
        let mut v = self.dict.column(j).into_owned();
        let mut penalty = 0.0;
        for (p, &a) in self.active.iter().enumerate() {
            if Some(p) == skip {
                continue;
            }
            v.axpy(-beta[p], &self.dict.column(a), 1.0);
            penalty += beta[p] * beta[p] / self.gamma[a];
        }
        v.norm_squared() + self.sigma2 * penalty
    }
}

/// `L(γ)` for arbitrary `γ`, via the Woodbury factorization on the active columns.
pub fn log_marginal_likelihood(
    dict: &Dictionary,
    gamma: &[f64],
    sigma2: f64,
    y: &DVector<f64>,
) -> Result<f64> {
    Ok(SblState::from_gamma(dict, y.clone(), sigma2, gamma)?.log_marginal_likelihood())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SblOptions {
    /// Convergence threshold on likelihood gains; default `1e-6 · n`.
    pub delta_l: Option<f64>,
    pub max_outer: usize,
    /// Cap on coordinate moves; default `10 · m`.
    pub max_moves: Option<usize>,
}

impl Default for SblOptions {
    fn default() -> Self {
        Self {
            delta_l: None,
            max_outer: DEFAULT_MAX_OUTER,
            max_moves: None,
        }
    }
}

impl SblOptions {
    fn resolve(&self, dict: &Dictionary) -> Result<(f64, usize)> {
        let delta_l = self.delta_l.unwrap_or(1e-6 * dict.nrows() as f64);
        if !(delta_l > 0.0 && delta_l.is_finite()) {
            return Err(Error::BadArity(format!(
                "likelihood tolerance must be positive, got {delta_l}"
            )));
        }
        Ok((delta_l, self.max_moves.unwrap_or(10 * dict.ncols())))
    }
}

/// Result of an SBL solve.
#[derive(Debug, Clone)]
pub struct SblFit {
    pub gamma: Vec<f64>,
    /// Additions and deletions in order; prior-variance updates are counted
    /// in `updates` only.
    pub path: SelectionPath,
    pub updates: usize,
    pub moves: usize,
    /// False when a move or outer-iteration limit was hit first.
    pub converged: bool,
    pub log_likelihood: f64,
    /// Likelihood before the first move and after every move.
    pub trace: Vec<f64>,
    /// Posterior mean as a length-`m` vector.
    pub coefficients: DVector<f64>,
}

impl SblFit {
    pub fn support(&self) -> &[usize] {
        &self.path.support
    }
}

struct Recorder {
    path: SelectionPath,
    trace: Vec<f64>,
    moves: usize,
    updates: usize,
}

impl Recorder {
    fn new(state: &SblState<'_>) -> Self {
        Self {
            path: SelectionPath::default(),
            trace: vec![state.log_marginal_likelihood()],
            moves: 0,
            updates: 0,
        }
    }

    fn apply(&mut self, state: &mut SblState<'_>, i: usize, gamma: f64) -> Result<()> {
        let was_active = state.is_active(i);
        state.set_gamma(i, gamma)?;
        self.moves += 1;
        match (was_active, gamma > 0.0) {
            (false, true) => self.path.record(Action::Add, i, state.residual().norm()),
            (true, false) => self.path.record(Action::Remove, i, state.residual().norm()),
            _ => self.updates += 1,
        }
        self.trace.push(state.log_marginal_likelihood());
        Ok(())
    }

    fn finish(self, state: &SblState<'_>, converged: bool) -> SblFit {
        let mut path = self.path;
        let mut support = state.active().to_vec();
        support.sort_unstable();
        path.support = support;
        SblFit {
            gamma: state.gamma().to_vec(),
            path,
            updates: self.updates,
            moves: self.moves,
            converged,
            log_likelihood: state.log_marginal_likelihood(),
            trace: self.trace,
            coefficients: state.full_mean(),
        }
    }
}

fn check_sigma(sigma: f64) -> Result<()> {
    if sigma > 0.0 && sigma.is_finite() {
        Ok(())
    } else {
        Err(Error::BadArity(format!(
            "noise level must be positive, got {sigma}"
        )))
    }
}

/// Relevance Matching Pursuit with noise level `σ`, started from `γ = 0`.
pub fn rmp_sigma(
    dict: &Dictionary,
    y: &DVector<f64>,
    sigma: f64,
    options: SblOptions,
) -> Result<SblFit> {
    check_sigma(sigma)?;
    let state = SblState::new(dict, y.clone(), sigma * sigma)?;
    rmp_sigma_from(state, options)
}

/// Relevance Matching Pursuit from an existing state.
pub fn rmp_sigma_from(mut state: SblState<'_>, options: SblOptions) -> Result<SblFit> {
    let dict = state.dictionary();
    let (delta_l, max_moves) = options.resolve(dict)?;
    let m = dict.ncols();
    let mut rec = Recorder::new(&state);
    let mut converged = false;
    'outer: for _ in 0..options.max_outer {
        let moves_at_start = rec.moves;
        rec.path.iterations += 1;

        // Acquire the inactive column with the largest normalized correlation
        // while it clears the noise level.
        loop {
            if rec.moves >= max_moves {
                break 'outer;
            }
            let best = argmax(
                (0..m)
                    .filter(|&i| !state.is_active(i))
                    .map(|i| (i, state.relevance(i))),
            );
            match best {
                Some((i, score)) if score > 1.0 => {
                    let g = optimal_gamma(state.q(i), state.s(i));
                    rec.apply(&mut state, i, g)?;
                }
                _ => break,
            }
        }

        // Prune irrelevant columns, otherwise re-estimate the most
        // profitable prior variance.
        loop {
            if rec.moves >= max_moves {
                break 'outer;
            }
            let active = state.active().to_vec();
            let worst = argmin(active.iter().map(|&i| (i, state.relevance(i))));
            if let Some((i, score)) = worst {
                if score <= 1.0 {
                    rec.apply(&mut state, i, 0.0)?;
                    continue;
                }
            }
            let best = argmax(
                active
                    .iter()
                    .map(|&i| (i, delta_update(state.q(i), state.s(i), state.gamma()[i]))),
            );
            match best {
                Some((i, gain)) if gain > delta_l => {
                    let g = optimal_gamma(state.q(i), state.s(i));
                    rec.apply(&mut state, i, g)?;
                }
                _ => break,
            }
        }

        if rec.moves == moves_at_start {
            converged = true;
            break;
        }
    }
    Ok(rec.finish(&state, converged))
}

/// Steepest coordinate ascent: every step applies the single addition,
/// deletion or re-estimation with the largest likelihood gain.
pub fn fsbl(
    dict: &Dictionary,
    y: &DVector<f64>,
    sigma: f64,
    options: SblOptions,
) -> Result<SblFit> {
    check_sigma(sigma)?;
    let state = SblState::new(dict, y.clone(), sigma * sigma)?;
    fsbl_from(state, options)
}

pub fn fsbl_from(mut state: SblState<'_>, options: SblOptions) -> Result<SblFit> {
    let dict = state.dictionary();
    let (delta_l, max_moves) = options.resolve(dict)?;
    let m = dict.ncols();
    let mut rec = Recorder::new(&state);
    let mut converged = false;
    while rec.moves < max_moves {
        let best = argmax((0..m).map(|i| {
            let (q, s) = (state.q(i), state.s(i));
            let gain = if state.is_active(i) {
                delta_update(q, s, state.gamma()[i])
            } else {
                delta_add(q, s)
            };
            (i, gain)
        }));
        match best {
            Some((i, gain)) if gain > delta_l => {
                let g = optimal_gamma(state.q(i), state.s(i));
                rec.apply(&mut state, i, g)?;
                rec.path.iterations += 1;
            }
            _ => {
                converged = true;
                break;
            }
        }
    }
    Ok(rec.finish(&state, converged))
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::gaussian_matrix;
    use rand::{seq::index::sample, Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_dict(n: usize, m: usize, seed: u64) -> Dictionary {
        Dictionary::normalize(gaussian_matrix(n, m, seed))
            .unwrap()
            .0
    }

    fn random_state(seed: u64) -> (Dictionary, DVector<f64>, Vec<f64>, f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(6..16);
        let m = rng.gen_range(n..2 * n);
        let d = random_dict(n, m, seed * 7 + 1);
        let y = gaussian_matrix(n, 1, seed * 7 + 2).column(0).into_owned();
        let k = rng.gen_range(0..n / 2);
        let mut gamma = vec![0.0; m];
        for i in sample(&mut rng, m, k) {
            gamma[i] = rng.gen_range(0.05..3.0);
        }
        let sigma2 = 10f64.powf(rng.gen_range(-3.0..0.0));
        (d, y, gamma, sigma2)
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(1e-300)
    }

    #[test]
    fn optimal_gamma_cases() {
        assert_eq!(optimal_gamma(0.5, 1.0), 0.0);
        assert_eq!(optimal_gamma(1.0, 1.0), 0.0);
        assert_eq!(optimal_gamma(2.0, 1.0), 3.0);
    }

    #[test]
    fn optimal_gamma_maximizes_coordinate_likelihood_on_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let s: f64 = rng.gen_range(0.1..5.0);
            let q: f64 = rng.gen_range(1.05..4.0) * s.sqrt();
            let best = optimal_gamma(q, s);
            let hi = 10.0 * (q * q - s) / (s * s);
            // Grid oracle over l(γ) = ½(q²/(γ⁻¹+s) − log(1+γs)).
            let l = |g: f64| 0.5 * (q * q / (1.0 / g + s) - (1.0 + g * s).ln());
            let grid_best = (1..=20_000).map(|j| hi * j as f64 / 20_000.0).fold(
                (0.0, f64::NEG_INFINITY),
                |acc, g| if l(g) > acc.1 { (g, l(g)) } else { acc },
            );
            assert!((best - grid_best.0).abs() <= hi / 20_000.0 + 1e-12);
            assert!(l(best) >= grid_best.1 - 1e-12);
        }
    }

    #[test]
    fn delta_edge_cases() {
        assert_eq!(delta_add(0.9, 1.0), 0.0);
        let g = optimal_gamma(3.0, 2.0);
        assert!(delta_update(3.0, 2.0, g).abs() < 1e-10);
        assert!(delta_update(3.0, 2.0, g * 1.5) > 0.0);
        assert!(delta_delete(0.5, 2.0, 0.7) > 0.0);
    }

    #[test]
    fn empty_likelihood_closed_form() {
        let d = random_dict(7, 9, 3);
        let y = gaussian_matrix(7, 1, 4).column(0).into_owned();
        let sigma2: f64 = 0.3;
        let n = 7.0;
        let expected = -0.5 * (y.norm_squared() / sigma2 + n * sigma2.ln() + n * (2.0 * PI).ln());
        let got = log_marginal_likelihood(&d, &[0.0; 9], sigma2, &y).unwrap();
        assert!(rel(got, expected) < 1e-13);
    }

    #[test]
    fn single_column_orthonormal_likelihood() {
        let d = Dictionary::new(DMatrix::identity(4, 4)).unwrap();
        let y = DVector::from_vec(vec![1.5, -0.2, 0.7, 0.1]);
        let (sigma2, g): (f64, f64) = (0.5, 2.0);
        // C is diagonal: σ² + γ on the first coordinate.
        let c0 = sigma2 + g;
        let expected = -0.5
            * (y[0] * y[0] / c0
                + (y.norm_squared() - y[0] * y[0]) / sigma2
                + c0.ln()
                + 3.0 * sigma2.ln()
                + 4.0 * (2.0 * PI).ln());
        let got = log_marginal_likelihood(&d, &[g, 0.0, 0.0, 0.0], sigma2, &y).unwrap();
        assert!(rel(got, expected) < 1e-13);
    }

    #[test]
    fn state_matches_dense_oracle() {
        for seed in 0..60 {
            let (d, y, gamma, sigma2) = random_state(seed);
            let state = SblState::from_gamma(&d, y.clone(), sigma2, &gamma).unwrap();
            let lik = oracle::likelihood(&d, &gamma, sigma2, &y);
            assert!(
                rel(state.log_marginal_likelihood(), lik) < 1e-8,
                "seed {seed}"
            );
            for i in 0..d.ncols() {
                let (q, s) = oracle::factors(&d, &gamma, sigma2, &y, i);
                assert!(
                    rel(state.q(i), q) < 1e-6 || (state.q(i) - q).abs() < 1e-9 * s.sqrt(),
                    "q seed {seed} col {i}"
                );
                assert!(rel(state.s(i), s) < 1e-6, "s seed {seed} col {i}");
                assert!(state.s(i) > 0.0);
            }
            if !state.active().is_empty() {
                let a = d.select(state.active());
                let ginv = DMatrix::from_diagonal(&DVector::from_iterator(
                    a.ncols(),
                    state.active().iter().map(|&i| 1.0 / gamma[i]),
                ));
                let sigma = (ginv + a.tr_mul(&a) / sigma2).try_inverse().unwrap();
                assert!((state.covariance() - &sigma).norm() < 1e-8 * sigma.norm());
                let mu = &sigma * a.tr_mul(&y) / sigma2;
                assert!((state.mean() - &mu).norm() < 1e-8 * mu.norm().max(1e-12));
            }
        }
    }

    #[test]
    fn deltas_match_likelihood_differences() {
        for seed in 0..60 {
            let (d, y, gamma, sigma2) = random_state(100 + seed);
            let state = SblState::from_gamma(&d, y.clone(), sigma2, &gamma).unwrap();
            let before = oracle::likelihood(&d, &gamma, sigma2, &y);
            for i in 0..d.ncols() {
                let (q, s) = (state.q(i), state.s(i));
                let mut after = gamma.clone();
                let predicted = if gamma[i] == 0.0 {
                    after[i] = optimal_gamma(q, s);
                    delta_add(q, s)
                } else {
                    after[i] = optimal_gamma(q, s);
                    delta_update(q, s, gamma[i])
                };
                let actual = oracle::likelihood(&d, &after, sigma2, &y) - before;
                assert!(
                    (predicted - actual).abs() < 1e-8 * before.abs().max(1.0),
                    "seed {seed} col {i}"
                );
                if gamma[i] > 0.0 {
                    let mut pruned = gamma.clone();
                    pruned[i] = 0.0;
                    let actual = oracle::likelihood(&d, &pruned, sigma2, &y) - before;
                    assert!(
                        (delta_delete(q, s, gamma[i]) - actual).abs()
                            < 1e-8 * before.abs().max(1.0)
                    );
                }
            }
        }
    }

    #[test]
    fn incremental_moves_track_dense_oracle() {
        let d = random_dict(12, 20, 9);
        let y = gaussian_matrix(12, 1, 10).column(0).into_owned();
        let sigma2 = 0.05;
        let mut state = SblState::new(&d, y.clone(), sigma2).unwrap();
        state.refresh_factors().unwrap();
        assert_eq!(state.q_all(), &d.matrix().tr_mul(&y) / sigma2);

        state.set_gamma(4, 1.3).unwrap();
        for i in 0..20 {
            let (q, s) = oracle::factors(&d, state.gamma(), sigma2, &y, i);
            assert!(rel(state.q(i), q) < 1e-10 && rel(state.s(i), s) < 1e-10);
        }

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..30 {
            let i = rng.gen_range(0..20);
            let v = if state.is_active(i) && rng.gen_bool(0.3) {
                0.0
            } else {
                rng.gen_range(0.01..4.0)
            };
            if state.active().len() >= 10 && v > 0.0 && !state.is_active(i) {
                continue;
            }
            state.set_gamma(i, v).unwrap();
        }
        for i in 0..20 {
            let (q, s) = oracle::factors(&d, state.gamma(), sigma2, &y, i);
            assert!(
                rel(state.q(i), q) < 1e-6 || (state.q(i) - q).abs() < 1e-9 * s,
                "q {i}"
            );
            assert!(rel(state.s(i), s) < 1e-6, "s {i}");
        }
    }

    #[test]
    fn relevance_matches_projector_and_factor_condition() {
        for seed in 0..40 {
            let (d, y, gamma, sigma2) = random_state(300 + seed);
            let state = SblState::from_gamma(&d, y.clone(), sigma2, &gamma).unwrap();
            for i in 0..d.ncols() {
                let corr = oracle::normalized_correlation(&d, &gamma, sigma2, &y, i);
                let sigma = sigma2.sqrt();
                assert!(rel(state.relevance(i) * sigma, corr) < 1e-6);
                let (q, s) = oracle::factors(&d, &gamma, sigma2, &y, i);
                if ((q * q / s) - 1.0).abs() > 1e-8 {
                    assert_eq!(q * q > s, corr > sigma);
                }
            }
        }
    }

    #[test]
    fn zero_target_selects_nothing() {
        let d = random_dict(8, 12, 1);
        let y = DVector::zeros(8);
        let fit = rmp_sigma(&d, &y, 0.1, SblOptions::default()).unwrap();
        assert!(fit.support().is_empty() && fit.gamma.iter().all(|&g| g == 0.0));
        assert!(fit.converged);
        let fit = fsbl(&d, &y, 0.1, SblOptions::default()).unwrap();
        assert!(fit.support().is_empty());
    }

    #[test]
    fn solvers_ascend_and_reach_fixed_point() {
        for seed in 0..20 {
            let d = random_dict(16, 32, 500 + seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut y = DVector::zeros(16);
            for i in sample(&mut rng, 32, 4) {
                y += d.column(i) * if rng.gen::<bool>() { 1.0 } else { -1.0 };
            }
            y += gaussian_matrix(16, 1, 900 + seed).column(0) * 0.05;
            for fit in [
                rmp_sigma(&d, &y, 0.1, SblOptions::default()).unwrap(),
                fsbl(&d, &y, 0.1, SblOptions::default()).unwrap(),
            ] {
                assert!(fit.converged);
                assert!(
                    fit.trace.windows(2).all(|w| w[1] >= w[0] - 1e-10),
                    "seed {seed}"
                );
                let lik = oracle::likelihood(&d, &fit.gamma, 0.01, &y);
                assert!(rel(fit.log_likelihood, lik) < 1e-8);
            }
            let fit = rmp_sigma(&d, &y, 0.1, SblOptions::default()).unwrap();
            let warm = SblState::from_gamma(&d, y.clone(), 0.01, &fit.gamma).unwrap();
            let again = rmp_sigma_from(warm, SblOptions::default()).unwrap();
            assert_eq!(again.moves, 0, "seed {seed}");
        }
    }

    #[test]
    fn move_limit_reports_not_converged() {
        let d = random_dict(16, 32, 3);
        let y = gaussian_matrix(16, 1, 4).column(0).into_owned();
        let opts = SblOptions {
            max_moves: Some(2),
            ..SblOptions::default()
        };
        let fit = rmp_sigma(&d, &y, 0.01, opts).unwrap();
        assert!(!fit.converged);
        assert_eq!(fit.moves, 2);
    }
}
