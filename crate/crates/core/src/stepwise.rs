//! Greedy support selection on top of [`ActiveModel`]: forward regression,
//! orthogonal matching pursuit, backward regression, the forward-backward
//! RMP₀ scheme and FoBa.
//!
//! All selections break ties toward the lowest column index.

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::linalg::{ActiveModel, Dictionary};

/// Improvements below `(IMPROVEMENT_FLOOR · ‖y‖)²` are treated as round-off,
/// so a zero tolerance still terminates on exactly sparse targets.
pub const IMPROVEMENT_FLOOR: f64 = 1e-10;

/// Outer-pass cap for the iterated RMP₀ variant.
pub const MAX_OUTER_PASSES: usize = 100;

/// Default FoBa backward ratio.
pub const FOBA_DEFAULT_NU: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StopRule {
    /// Stop once the support has this many columns.
    TargetSparsity(usize),
    /// Stop once `‖r‖₂ ≤ δ`.
    ResidualThreshold(f64),
    /// Stop once the best change in `‖r‖²` is at most `δ²`.
    MarginalImprovement(f64),
}

impl StopRule {
    pub fn validate(&self) -> Result<()> {
        match *self {
            StopRule::TargetSparsity(_) => Ok(()),
            StopRule::ResidualThreshold(v) | StopRule::MarginalImprovement(v) => {
                if v.is_finite() && v >= 0.0 {
                    Ok(())
                } else {
                    Err(Error::BadArity(format!(
                        "stop threshold must be finite and >= 0, got {v}"
                    )))
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Action {
    Add,
    Remove,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Step {
    pub action: Action,
    pub index: usize,
    /// Residual norm after the step.
    pub residual_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SelectionPath {
    pub steps: Vec<Step>,
    /// Final support, sorted ascending.
    pub support: Vec<usize>,
    /// Outer iterations for the alternating algorithms, steps otherwise.
    pub iterations: usize,
}

impl SelectionPath {
    pub(crate) fn record(&mut self, action: Action, index: usize, residual_norm: f64) {
        self.steps.push(Step {
            action,
            index,
            residual_norm,
        });
    }

    pub(crate) fn finish(mut self, active: &[usize]) -> Self {
        let mut support = active.to_vec();
        support.sort_unstable();
        self.support = support;
        self
    }

    /// Support obtained by replaying the steps from the empty set.
    pub fn replay(&self) -> Vec<usize> {
        self.replay_from(&[])
    }

    pub fn replay_from(&self, start: &[usize]) -> Vec<usize> {
        let mut set: Vec<usize> = start.to_vec();
        for step in &self.steps {
            match step.action {
                Action::Add => set.push(step.index),
                Action::Remove => set.retain(|&i| i != step.index),
            }
        }
        set.sort_unstable();
        set
    }

    pub fn count(&self, action: Action) -> usize {
        self.steps.iter().filter(|s| s.action == action).count()
    }
}

fn improvement_threshold(delta: f64, y: &DVector<f64>) -> f64 {
    (delta * delta).max((IMPROVEMENT_FLOOR * y.norm()).powi(2))
}

fn check_inputs(dict: &Dictionary, y: &DVector<f64>) -> Result<()> {
    dict.check_target(y)?;
    if !dict.is_normalized() {
        return Err(Error::NotNormalized);
    }
    Ok(())
}

fn check_delta(delta: f64) -> Result<()> {
    if delta.is_finite() && delta >= 0.0 {
        Ok(())
    } else {
        Err(Error::BadArity(format!(
            "tolerance must be finite and >= 0, got {delta}"
        )))
    }
}

/// Relative gap below which two scores count as tied.
pub const TIE_TOL: f64 = 1e-9;

/// Index and value of the largest entry. Entries within `TIE_TOL` (relative)
/// of the maximum are ties and go to the lowest index, so selections do not
/// hinge on round-off.
pub(crate) fn argmax<I: IntoIterator<Item = (usize, f64)>>(items: I) -> Option<(usize, f64)> {
    let items: Vec<(usize, f64)> = items.into_iter().filter(|(_, v)| !v.is_nan()).collect();
    let top = items
        .iter()
        .map(|&(_, v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    let cut = if top.is_finite() {
        top - TIE_TOL * top.abs()
    } else {
        top
    };
    items
        .into_iter()
        .filter(|&(_, v)| v >= cut)
        .min_by_key(|&(i, _)| i)
}

/// Index and value of the smallest entry, lowest index on ties.
pub(crate) fn argmin<I: IntoIterator<Item = (usize, f64)>>(items: I) -> Option<(usize, f64)> {
    argmax(items.into_iter().map(|(i, v)| (i, -v))).map(|(i, v)| (i, -v))
}

/// Best forward candidate: `(index, residual decrease)`.
fn best_forward(model: &ActiveModel<'_>) -> Option<(usize, f64)> {
    argmax(
        model
            .residual_decreases()
            .into_iter()
            .enumerate()
            .filter_map(|(j, d)| d.map(|d| (j, d))),
    )
}

/// Best OMP candidate by `|⟨φ_j, r⟩|` with its residual decrease.
fn best_omp(model: &ActiveModel<'_>) -> Option<(usize, f64)> {
    let corr = model.correlations();
    let norms = model.energetic_norms_sq();
    let (j, _) = argmax(
        norms
            .iter()
            .enumerate()
            .filter_map(|(j, e)| e.map(|_| (j, corr[j].abs()))),
    )?;
    let e2 = norms[j].expect("candidate has a norm");
    Some((j, corr[j] * corr[j] / e2))
}

/// Worst active column: `(index, residual increase)`.
fn best_backward(model: &ActiveModel<'_>) -> Option<(usize, f64)> {
    let inc = model.residual_increases();
    argmin(model.active().iter().cloned().zip(inc))
}

#[derive(Clone, Copy)]
enum ForwardRule {
    LeastResidual,
    Correlation,
}

fn forward(
    dict: &Dictionary,
    y: &DVector<f64>,
    stop: StopRule,
    rule: ForwardRule,
) -> Result<SelectionPath> {
    check_inputs(dict, y)?;
    stop.validate()?;
    let mut model = ActiveModel::new(dict, y.clone())?;
    let mut path = SelectionPath::default();
    let cap = dict.nrows().min(dict.ncols());
    let floor = improvement_threshold(0.0, y);
    while model.len() < cap {
        match stop {
            StopRule::TargetSparsity(k) if model.len() >= k => break,
            StopRule::ResidualThreshold(d) if model.residual_norm() <= d => break,
            _ => {}
        }
        let candidate = match rule {
            ForwardRule::LeastResidual => best_forward(&model),
            ForwardRule::Correlation => best_omp(&model),
        };
        let Some((i, decrease)) = candidate else {
            break;
        };
        match stop {
            StopRule::MarginalImprovement(d) if decrease <= improvement_threshold(d, y) => break,
            StopRule::ResidualThreshold(_) if decrease <= floor => break,
            _ => {}
        }
        if model.add_column(i).is_err() {
            break;
        }
        path.record(Action::Add, i, model.residual_norm());
        path.iterations += 1;
    }
    Ok(path.finish(model.active()))
}

/// Forward regression: repeatedly adds `argmin_{i∉A} ‖r_{A∪i}‖₂`.
pub fn forward_regression(
    dict: &Dictionary,
    y: &DVector<f64>,
    stop: StopRule,
) -> Result<SelectionPath> {
    forward(dict, y, stop, ForwardRule::LeastResidual)
}

/// Orthogonal matching pursuit: repeatedly adds `argmax_i |⟨φ_i, r_A⟩|`.
pub fn omp(dict: &Dictionary, y: &DVector<f64>, stop: StopRule) -> Result<SelectionPath> {
    forward(dict, y, stop, ForwardRule::Correlation)
}

/// Backward regression from the full dictionary. Requires `m ≤ n`.
pub fn backward_regression(
    dict: &Dictionary,
    y: &DVector<f64>,
    stop: StopRule,
) -> Result<SelectionPath> {
    if dict.ncols() > dict.nrows() {
        return Err(Error::NotDetermined(format!(
            "backward regression needs m <= n, got {}x{}",
            dict.nrows(),
            dict.ncols()
        )));
    }
    let all: Vec<usize> = (0..dict.ncols()).collect();
    backward_regression_from(dict, y, &all, stop)
}

/// Backward regression starting from an arbitrary linearly independent set.
pub fn backward_regression_from(
    dict: &Dictionary,
    y: &DVector<f64>,
    start: &[usize],
    stop: StopRule,
) -> Result<SelectionPath> {
    check_inputs(dict, y)?;
    stop.validate()?;
    let mut model = ActiveModel::with_support(dict, y.clone(), start)?;
    let mut path = SelectionPath::default();
    while let Some((i, increase)) = best_backward(&model) {
        let remove = match stop {
            StopRule::TargetSparsity(k) => model.len() > k,
            StopRule::MarginalImprovement(d) => increase <= improvement_threshold(d, y),
            StopRule::ResidualThreshold(d) => model.residual_norm().powi(2) + increase <= d * d,
        };
        if !remove {
            break;
        }
        model.remove_column(i)?;
        path.record(Action::Remove, i, model.residual_norm());
        path.iterations += 1;
    }
    Ok(path.finish(model.active()))
}

/// Runs forward additions while the best decrease exceeds `threshold`.
fn forward_phase(model: &mut ActiveModel<'_>, threshold: f64, path: &mut SelectionPath) -> bool {
    let cap = model.dictionary().nrows().min(model.dictionary().ncols());
    let mut changed = false;
    while model.len() < cap {
        let Some((i, decrease)) = best_forward(model) else {
            break;
        };
        if decrease <= threshold || model.add_column(i).is_err() {
            break;
        }
        path.record(Action::Add, i, model.residual_norm());
        changed = true;
    }
    changed
}

/// Runs backward eliminations while the smallest increase is at most `threshold`.
fn backward_phase(
    model: &mut ActiveModel<'_>,
    threshold: f64,
    path: &mut SelectionPath,
) -> Result<bool> {
    let mut changed = false;
    while let Some((i, increase)) = best_backward(model) {
        if increase > threshold {
            break;
        }
        model.remove_column(i)?;
        path.record(Action::Remove, i, model.residual_norm());
        changed = true;
    }
    Ok(changed)
}

/// RMP₀: alternating forward and backward stepwise phases with a shared
/// threshold `δ²` on the change in `‖r‖²`. With `iterate_outer` the pair of
/// phases repeats until the support stops changing (RMP₀+).
pub fn rmp0(
    dict: &Dictionary,
    y: &DVector<f64>,
    delta: f64,
    iterate_outer: bool,
) -> Result<SelectionPath> {
    check_inputs(dict, y)?;
    check_delta(delta)?;
    let threshold = improvement_threshold(delta, y);
    let mut model = ActiveModel::new(dict, y.clone())?;
    let mut path = SelectionPath::default();
    let passes = if iterate_outer { MAX_OUTER_PASSES } else { 1 };
    for _ in 0..passes {
        let mut before = model.active().to_vec();
        before.sort_unstable();
        forward_phase(&mut model, threshold, &mut path);
        backward_phase(&mut model, threshold, &mut path)?;
        path.iterations += 1;
        let mut after = model.active().to_vec();
        after.sort_unstable();
        if after == before {
            break;
        }
    }
    Ok(path.finish(model.active()))
}

/// FoBa: forward steps while the gain exceeds `δ²`; after each one, removes
/// columns whose residual increase is at most `ν` times that gain.
pub fn foba(dict: &Dictionary, y: &DVector<f64>, delta: f64, nu: f64) -> Result<SelectionPath> {
    check_inputs(dict, y)?;
    check_delta(delta)?;
    if !(nu > 0.0 && nu < 1.0) {
        return Err(Error::BadArity(format!(
            "foba ratio must lie in (0, 1), got {nu}"
        )));
    }
    let threshold = improvement_threshold(delta, y);
    let mut model = ActiveModel::new(dict, y.clone())?;
    let mut path = SelectionPath::default();
    let cap = dict.nrows().min(dict.ncols());
    // Each forward/backward round lowers ‖r‖² by at least (1 − ν)·threshold,
    // so this bound is only reached on pathological inputs.
    let max_rounds = 20 * dict.ncols().max(cap);
    while model.len() < cap && path.iterations < max_rounds {
        let Some((i, gain)) = best_forward(&model) else {
            break;
        };
        if gain <= threshold || model.add_column(i).is_err() {
            break;
        }
        path.record(Action::Add, i, model.residual_norm());
        path.iterations += 1;
        while model.len() > 1 {
            let Some((j, increase)) = best_backward(&model) else {
                break;
            };
            if increase > nu * gain {
                break;
            }
            model.remove_column(j)?;
            path.record(Action::Remove, j, model.residual_norm());
        }
    }
    Ok(path.finish(model.active()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::ls_solve;
    use crate::testutil::gaussian_matrix;
    use nalgebra::DMatrix;
    use rand::{seq::index::sample, Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_dict(n: usize, m: usize, seed: u64) -> Dictionary {
        Dictionary::normalize(gaussian_matrix(n, m, seed))
            .unwrap()
            .0
    }

    fn sparse_target(dict: &Dictionary, k: usize, seed: u64) -> (DVector<f64>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut support = sample(&mut rng, dict.ncols(), k).into_vec();
        support.sort_unstable();
        let mut y = DVector::zeros(dict.nrows());
        for &i in &support {
            let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
            y += dict.column(i) * sign;
        }
        (y, support)
    }

    fn orthonormal(n: usize, seed: u64) -> Dictionary {
        let q = gaussian_matrix(n, n, seed).qr().q();
        Dictionary::normalize(q).unwrap().0
    }

    #[test]
    fn orthonormal_noiseless_exact_in_k_steps() {
        let d = orthonormal(10, 3);
        let (y, support) = sparse_target(&d, 4, 4);
        for path in [
            forward_regression(&d, &y, StopRule::TargetSparsity(4)).unwrap(),
            omp(&d, &y, StopRule::TargetSparsity(4)).unwrap(),
        ] {
            assert_eq!(path.support, support);
            assert_eq!(path.steps.len(), 4);
        }
    }

    #[test]
    fn first_step_is_largest_correlation() {
        let d = random_dict(16, 40, 5);
        let y = gaussian_matrix(16, 1, 6).column(0).into_owned();
        let corr = d.matrix().tr_mul(&y);
        let expected = argmax(corr.iter().map(|c| c.abs()).enumerate()).unwrap().0;
        let fr = forward_regression(&d, &y, StopRule::TargetSparsity(1)).unwrap();
        let om = omp(&d, &y, StopRule::TargetSparsity(1)).unwrap();
        assert_eq!(fr.support, vec![expected]);
        assert_eq!(om.support, vec![expected]);
    }

    #[test]
    fn forward_selection_matches_fresh_solves() {
        for seed in 0..100 {
            let d = random_dict(10, 18, 100 + seed);
            let y = gaussian_matrix(10, 1, 300 + seed).column(0).into_owned();
            let mut model = ActiveModel::new(&d, y.clone()).unwrap();
            for _ in 0..4 {
                let (got, _) = best_forward(&model).unwrap();
                let oracle = argmin((0..18).filter(|j| !model.contains(*j)).map(|j| {
                    let mut s = model.active().to_vec();
                    s.push(j);
                    (j, ls_solve(&d, &s, &y).unwrap().1.norm())
                }))
                .unwrap()
                .0;
                assert_eq!(got, oracle, "seed {seed}");
                model.add_column(got).unwrap();
            }
            let (got, _) = best_backward(&model).unwrap();
            let oracle = argmin(model.active().iter().map(|&j| {
                let s: Vec<usize> = model.active().iter().cloned().filter(|&a| a != j).collect();
                (j, ls_solve(&d, &s, &y).unwrap().1.norm())
            }))
            .unwrap()
            .0;
            assert_eq!(got, oracle, "backward seed {seed}");
        }
    }

    #[test]
    fn forward_residuals_decrease_backward_increase() {
        let d = random_dict(20, 20, 9);
        let y = gaussian_matrix(20, 1, 10).column(0).into_owned();
        let fr = forward_regression(&d, &y, StopRule::TargetSparsity(12)).unwrap();
        let norms: Vec<f64> = std::iter::once(y.norm())
            .chain(fr.steps.iter().map(|s| s.residual_norm))
            .collect();
        assert!(norms.windows(2).all(|w| w[1] < w[0]));
        let br = backward_regression(&d, &y, StopRule::TargetSparsity(5)).unwrap();
        assert!(br
            .steps
            .windows(2)
            .all(|w| w[1].residual_norm >= w[0].residual_norm - 1e-12));
        assert_eq!(br.support, br.replay_from(&(0..20).collect::<Vec<_>>()));
        assert_eq!(fr.support, fr.replay());
    }

    #[test]
    fn omp_and_fr_can_diverge() {
        // Coherent 8×12 dictionaries; search seeds for a witness where the
        // two rules disagree after the first step.
        let mut found = false;
        for seed in 0..200 {
            let mut base = gaussian_matrix(8, 12, 1000 + seed);
            let common = gaussian_matrix(8, 1, 2000 + seed);
            for mut c in base.column_iter_mut() {
                c += common.column(0) * 2.0;
            }
            let d = Dictionary::normalize(base).unwrap().0;
            let (y, _) = sparse_target(&d, 3, seed);
            let a = forward_regression(&d, &y, StopRule::TargetSparsity(3)).unwrap();
            let b = omp(&d, &y, StopRule::TargetSparsity(3)).unwrap();
            assert_eq!(a.steps[0].index, b.steps[0].index);
            if a.steps
                .iter()
                .map(|s| s.index)
                .ne(b.steps.iter().map(|s| s.index))
            {
                found = true;
                break;
            }
        }
        assert!(found);
    }

    #[test]
    fn backward_requires_determined() {
        let d = random_dict(5, 8, 1);
        let y = DVector::zeros(5);
        assert!(matches!(
            backward_regression(&d, &y, StopRule::TargetSparsity(2)),
            Err(Error::NotDetermined(_))
        ));
    }

    #[test]
    fn backward_noiseless_recovers_support() {
        for seed in 0..50 {
            let d = random_dict(24, 16, 40 + seed);
            let (y, support) = sparse_target(&d, 5, seed);
            let path = backward_regression(&d, &y, StopRule::TargetSparsity(5)).unwrap();
            assert_eq!(path.support, support, "seed {seed}");
            let mi = backward_regression(&d, &y, StopRule::MarginalImprovement(1e-3)).unwrap();
            assert_eq!(mi.support, support, "seed {seed}");
        }
    }

    #[test]
    fn backward_dense_signal_keeps_everything() {
        let d = random_dict(10, 6, 77);
        let x = DVector::from_element(6, 1.0);
        let y = d.matrix() * x;
        let path = backward_regression(&d, &y, StopRule::TargetSparsity(6)).unwrap();
        assert!(path.steps.is_empty());
        assert_eq!(path.support, (0..6).collect::<Vec<_>>());
    }

    #[test]
    fn rmp0_noiseless_incoherent() {
        let d = orthonormal(12, 8);
        let (y, support) = sparse_target(&d, 4, 9);
        let path = rmp0(&d, &y, 0.0, false).unwrap();
        assert_eq!(path.support, support);
        assert_eq!(path.count(Action::Remove), 0);
    }

    #[test]
    fn rmp0_large_delta_selects_nothing() {
        let d = random_dict(10, 20, 1);
        let (y, _) = sparse_target(&d, 3, 2);
        let path = rmp0(&d, &y, 100.0, true).unwrap();
        assert!(path.support.is_empty());
    }

    #[test]
    fn rmp0_zero_delta_determined_system_interpolates() {
        let d = random_dict(9, 9, 13);
        let y = gaussian_matrix(9, 1, 14).column(0).into_owned();
        let path = rmp0(&d, &y, 0.0, false).unwrap();
        let (_, r) = ls_solve(&d, &path.support, &y).unwrap();
        assert!(r.norm() <= 1e-8 * y.norm());
    }

    #[test]
    fn foba_matches_forward_on_incoherent_noiseless() {
        let d = orthonormal(16, 21);
        let (y, support) = sparse_target(&d, 5, 22);
        let fb = foba(&d, &y, 0.0, FOBA_DEFAULT_NU).unwrap();
        let fr = forward_regression(&d, &y, StopRule::MarginalImprovement(0.0)).unwrap();
        assert_eq!(fb.support, fr.support);
        assert_eq!(fb.support, support);
    }

    #[test]
    fn foba_deletion_rule_matches_rmp0_at_equal_threshold() {
        // With ν·gain equal to δ², a column is dropped by FoBa exactly when the
        // RMP₀ backward rule would drop it.
        let d = random_dict(12, 24, 5);
        let y = gaussian_matrix(12, 1, 6).column(0).into_owned();
        let model = ActiveModel::with_support(&d, y.clone(), &[0, 5, 9]).unwrap();
        let (_, inc) = best_backward(&model).unwrap();
        for factor in [0.5, 0.999, 1.001, 2.0] {
            let delta_sq = inc * factor;
            let nu = 0.999;
            let gain = delta_sq / nu;
            assert_eq!(inc <= nu * gain, inc <= delta_sq);
        }
    }

    #[test]
    fn stop_rules_validate() {
        assert!(StopRule::ResidualThreshold(-1.0).validate().is_err());
        assert!(StopRule::MarginalImprovement(f64::NAN).validate().is_err());
        assert!(StopRule::TargetSparsity(0).validate().is_ok());
        let d = Dictionary::new(DMatrix::from_element(3, 2, 1.0)).unwrap();
        assert!(matches!(
            omp(&d, &DVector::zeros(3), StopRule::TargetSparsity(1)),
            Err(Error::NotNormalized)
        ));
    }

    #[test]
    fn residual_threshold_stops_omp() {
        let d = random_dict(32, 64, 17);
        let (mut y, support) = sparse_target(&d, 3, 18);
        let noise = gaussian_matrix(32, 1, 19).column(0).normalize() * 1e-2;
        y += noise;
        let path = omp(&d, &y, StopRule::ResidualThreshold(2e-2)).unwrap();
        assert_eq!(path.support, support);
    }
}
