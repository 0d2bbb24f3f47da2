//! Recovery-guarantee calculators: coherence, the Babel function, the exact
//! recovery condition, deterministic noise bounds, probabilistic success
//! bounds and the subset-selection optimality certificate.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::linalg::{ls_solve, min_singular_value, Dictionary, RANK_TOL};

fn require_normalized(dict: &Dictionary) -> Result<()> {
    if dict.is_normalized() {
        Ok(())
    } else {
        Err(Error::NotNormalized)
    }
}

/// `μ = max_{i≠j} |⟨φ_i, φ_j⟩|`; zero for a single column.
pub fn coherence(dict: &Dictionary) -> Result<f64> {
    require_normalized(dict)?;
    let g = dict.gram();
    let m = dict.ncols();
    let mut mu = 0.0f64;
    for j in 0..m {
        for i in 0..j {
            mu = mu.max(g[(i, j)].abs());
        }
    }
    Ok(mu)
}

/// Babel function `μ₁(k)` for all `k = 1..=k_max` in one pass.
///
/// For each reference column the off-diagonal magnitudes are sorted once;
/// `μ₁(k)` is the largest top-`k` prefix sum over columns.
pub fn babel_profile(dict: &Dictionary, k_max: usize) -> Result<Vec<f64>> {
    require_normalized(dict)?;
    let m = dict.ncols();
    if k_max == 0 || k_max >= m {
        return Err(Error::BadArity(format!(
            "babel order must lie in 1..={}, got {k_max}",
            m.saturating_sub(1)
        )));
    }
    let g = dict.gram();
    let mut profile = vec![0.0f64; k_max];
    let mut row = Vec::with_capacity(m - 1);
    for i in 0..m {
        row.clear();
        row.extend((0..m).filter(|&j| j != i).map(|j| g[(i, j)].abs()));
        row.sort_unstable_by(|a, b| b.total_cmp(a));
        let mut sum = 0.0;
        for (k, v) in row.iter().take(k_max).enumerate() {
            sum += v;
            profile[k] = profile[k].max(sum);
        }
    }
    Ok(profile)
}

/// `μ₁(k) = max_{|I|=k} max_{i∉I} Σ_{j∈I} |⟨φ_i, φ_j⟩|`.
pub fn babel(dict: &Dictionary, k: usize) -> Result<f64> {
    Ok(babel_profile(dict, k)?[k - 1])
}

/// Exact recovery condition value `max_{j∉S} ‖Φ_S⁺ φ_j‖₁`. Recovery of any
/// signal on `S` is guaranteed when this is below 1. The maximum over an
/// empty complement is 0.
pub fn erc(dict: &Dictionary, support: &[usize]) -> Result<f64> {
    let mut inside = vec![false; dict.ncols()];
    for &i in support {
        dict.check_index(i)?;
        inside[i] = true;
    }
    let mut worst = 0.0f64;
    for j in (0..dict.ncols()).filter(|&j| !inside[j]) {
        let (coeffs, _) = ls_solve(dict, support, &dict.column(j).into_owned())?;
        worst = worst.max(coeffs.lp_norm(1));
    }
    if support.is_empty() || worst == 0.0 {
        // Still surface rank problems when there is nothing to project.
        ls_solve(dict, support, &DVector::zeros(dict.nrows()))?;
    }
    Ok(worst)
}

fn check_x_min(x_min: f64) -> Result<()> {
    if x_min > 0.0 && x_min.is_finite() {
        Ok(())
    } else {
        Err(Error::BadArity(format!(
            "smallest coefficient magnitude must be positive, got {x_min}"
        )))
    }
}

/// Largest noise norm for which OMP and forward regression provably recover
/// a `k`-sparse support in `k` steps:
/// `(1 − 2μ₁(k)) / sqrt(2(1 + μ₁(k))) · x_min`, or 0 once `μ₁(k) ≥ ½`.
pub fn forward_noise_bound(mu1_k: f64, x_min: f64) -> f64 {
    if !(mu1_k < 0.5) {
        return 0.0;
    }
    (1.0 - 2.0 * mu1_k) / (2.0 * (1.0 + mu1_k)).sqrt() * x_min
}

/// Success-probability lower bounds for OMP and forward regression under
/// Gaussian noise, as functions of `δ = (½ − μ₁(k)) x_min / σ`.
///
/// Returns `(bound1, bound2)`; `bound2` needs `μ₁(2k) < ½`. Both are clamped
/// to `[0, 1]`.
pub fn forward_success_probability(
    mu1_k: f64,
    mu1_2k: f64,
    m: usize,
    k: usize,
    delta: f64,
) -> Result<(f64, Option<f64>)> {
    if !(0.0..1.0).contains(&mu1_k) || !(0.0..1.0).contains(&mu1_2k) {
        return Err(Error::BadArity(format!(
            "babel values must lie in [0, 1), got {mu1_k} and {mu1_2k}"
        )));
    }
    if k == 0 || m == 0 {
        return Err(Error::BadArity("m and k must be positive".into()));
    }
    if !(delta > 0.0) {
        return Err(Error::BadArity(format!(
            "delta must be positive, got {delta}"
        )));
    }
    let kf = k as f64;
    let log_d = (m.div_ceil(k) as f64).ln();
    let kappa = (1.0 + mu1_2k) / (1.0 - mu1_k);
    let tail = libm::erfc(delta / (2.0 * kappa).sqrt());
    let log_fail1 = log_d + 0.5 * kf * ((1.0 + kappa) / (1.0 - mu1_2k)).ln() + kf * tail.ln();
    let bound1 = clamp_unit(-log_fail1.exp_m1());
    let bound2 = (mu1_2k < 0.5).then(|| {
        let log_fail2 = log_d + kf * ((4.0 / (PI.sqrt() * delta)).ln() - delta * delta / 6.0);
        clamp_unit(-log_fail2.exp_m1())
    });
    Ok((bound1, bound2))
}

fn clamp_unit(v: f64) -> f64 {
    if v.is_nan() {
        0.0
    } else {
        v.clamp(0.0, 1.0)
    }
}

/// Earlier coherence-based success bound `max(0, 1 − 2m e^{−δ²/2}/δ)`.
pub fn baseline_success_probability(m: usize, delta: f64) -> f64 {
    if !(delta > 0.0) {
        return 0.0;
    }
    clamp_unit(1.0 - 2.0 * m as f64 * (-0.5 * delta * delta).exp() / delta)
}

/// Largest noise norm for which backward regression provably recovers the
/// support of a determined system:
/// `σ_min / sqrt(2(2 − σ_min²)) · x_min`.
pub fn backward_noise_bound(sigma_min: f64, x_min: f64) -> Result<f64> {
    // Unit-norm columns force σ_min ≤ 1; allow round-off above it.
    if !(sigma_min > 0.0 && sigma_min <= 1.0 + 1e-10) {
        return Err(Error::BadArity(format!(
            "smallest singular value must lie in (0, 1], got {sigma_min}"
        )));
    }
    check_x_min(x_min)?;
    let s = sigma_min.min(1.0);
    Ok(s / (2.0 * (2.0 - s * s)).sqrt() * x_min)
}

/// Noise bound for backward regression started from a superset of the
/// support: `sqrt((1 − μ₁(k)) / (2(1 + μ₁(k)))) · x_min`.
pub fn backward_superset_bound(mu1_k: f64, x_min: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&mu1_k) {
        return Err(Error::BadArity(format!(
            "babel value must lie in [0, 1), got {mu1_k}"
        )));
    }
    check_x_min(x_min)?;
    Ok(((1.0 - mu1_k) / (2.0 * (1.0 + mu1_k))).sqrt() * x_min)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Certificate {
    pub certified: bool,
    /// Bound minus residual norm; positive when certified.
    pub margin: f64,
    pub residual_norm: f64,
    pub bound: f64,
}

/// Checks whether the least-squares fit on `support` is provably the best
/// `|support|`-sparse fit, by comparing its residual against the backward
/// noise bound.
pub fn subset_selection_certificate(
    dict: &Dictionary,
    support: &[usize],
    y: &DVector<f64>,
) -> Result<Certificate> {
    require_normalized(dict)?;
    if support.is_empty() {
        return Err(Error::BadArity("support must be non-empty".into()));
    }
    if dict.ncols() > dict.nrows() {
        return Err(Error::RankDeficient(format!(
            "{} columns exceed {} rows",
            dict.ncols(),
            dict.nrows()
        )));
    }
    let sigma_min = min_singular_value(dict.matrix());
    if !(sigma_min > RANK_TOL) {
        return Err(Error::RankDeficient(format!(
            "smallest singular value {sigma_min:.3e}"
        )));
    }
    let (coeffs, residual) = ls_solve(dict, support, y)?;
    let x_min = coeffs.iter().map(|v| v.abs()).fold(f64::INFINITY, f64::min);
    let residual_norm = residual.norm();
    let bound = if x_min > 0.0 {
        backward_noise_bound(sigma_min, x_min)?
    } else {
        0.0
    };
    Ok(Certificate {
        certified: residual_norm < bound,
        margin: bound - residual_norm,
        residual_norm,
        bound,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbabilityBound {
    pub delta: f64,
    pub bound1: f64,
    pub bound2: Option<f64>,
    pub baseline: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GuaranteeReport {
    pub mu: f64,
    /// `μ₁(j)` for `j = 1..=min(2k, m − 1)`.
    pub mu1: BTreeMap<usize, f64>,
    pub erc_value: Option<f64>,
    pub fwd_bound: f64,
    /// Zero unless the dictionary is determined (`m ≤ n`).
    pub bwd_bound: f64,
    pub superset_bound: f64,
    /// Empty unless `μ₁(k)` and `μ₁(2k)` are both defined and below 1.
    pub prob_bounds: Vec<ProbabilityBound>,
}

/// All calculators for sparsity `k` and smallest coefficient `x_min`.
pub fn guarantee_report(
    dict: &Dictionary,
    k: usize,
    x_min: f64,
    support: Option<&[usize]>,
    deltas: &[f64],
) -> Result<GuaranteeReport> {
    require_normalized(dict)?;
    check_x_min(x_min)?;
    let m = dict.ncols();
    if k == 0 || k >= m {
        return Err(Error::BadArity(format!("k must lie in 1..{m}, got {k}")));
    }
    let top = (2 * k).min(m - 1);
    let profile = babel_profile(dict, top)?;
    let mu1: BTreeMap<usize, f64> = profile
        .iter()
        .enumerate()
        .map(|(j, &v)| (j + 1, v))
        .collect();
    let mu1_k = mu1[&k];
    let erc_value = support.map(|s| erc(dict, s)).transpose()?;
    let bwd_bound = if m <= dict.nrows() {
        let s = min_singular_value(dict.matrix());
        if s > RANK_TOL {
            backward_noise_bound(s, x_min)?
        } else {
            0.0
        }
    } else {
        0.0
    };
    let superset_bound = if mu1_k < 1.0 {
        backward_superset_bound(mu1_k, x_min)?
    } else {
        0.0
    };
    let mut prob_bounds = Vec::new();
    if let Some(&mu1_2k) = mu1.get(&(2 * k)) {
        if mu1_k < 1.0 && mu1_2k < 1.0 {
            for &delta in deltas {
                let (bound1, bound2) = forward_success_probability(mu1_k, mu1_2k, m, k, delta)?;
                prob_bounds.push(ProbabilityBound {
                    delta,
                    bound1,
                    bound2,
                    baseline: baseline_success_probability(m, delta),
                });
            }
        }
    }
    Ok(GuaranteeReport {
        mu: mu1[&1],
        mu1,
        erc_value,
        fwd_bound: forward_noise_bound(mu1_k, x_min),
        bwd_bound,
        superset_bound,
        prob_bounds,
    })
}
