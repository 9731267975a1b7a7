//! Window-based adaptive privacy budget allocation.
//!
//! Each possible location gets `ε_r − λ·Δε`, where the control coefficient
//! `λ = α₁·LP + α₂·LS` grows with how predictable and how sensitive the
//! location is. The result is capped by what is left of the current
//! `w`-window so that every run of `w` consecutive real-location budgets sums
//! to at most `ε_w`.

use serde::{Deserialize, Serialize};

use crate::grid::{LocationGrid, Metric};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BudgetError {
    #[error("window budget exhausted: {remaining} left, floor is {floor}")]
    WindowExhausted { remaining: f64, floor: f64 },
    #[error("invalid ledger parameters: {0}")]
    BadLedger(String),
    #[error("invalid profile: {0}")]
    BadProfile(String),
}

/// Which part of the sensitivity score the user-characteristic factor scales.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CharacteristicScope {
    /// `(1 + λ·I_user)` multiplies the semantic term only.
    #[default]
    Semantic,
    /// `(1 + λ·I_user)` multiplies the whole weighted sum.
    WholeSum,
}

/// Per-user, per-cell inputs to the sensitivity score.
#[derive(Debug, Clone, PartialEq)]
pub struct UserProfile {
    /// Normalized sojourn time per cell, in `[0, 1]`.
    pub sojourn: Vec<f64>,
    /// Normalized visit frequency per cell, in `[0, 1]`.
    pub visit_freq: Vec<f64>,
    /// Semantic sensitivity per cell.
    pub semantic: Vec<f64>,
    pub i_user: f64,
    pub lambda_user: f64,
    /// Weights for sojourn, frequency and semantics; they sum to one.
    pub gamma: [f64; 3],
    /// Weights for predictability and sensitivity in the control coefficient.
    pub alpha: [f64; 2],
    pub scope: CharacteristicScope,
}

impl UserProfile {
    pub fn validate(&self) -> Result<(), BudgetError> {
        let bad = |m: &str| Err(BudgetError::BadProfile(m.to_owned()));
        let n = self.sojourn.len();
        if self.visit_freq.len() != n || self.semantic.len() != n {
            return bad("per-cell tables differ in length");
        }
        if self.gamma.iter().any(|g| *g < 0.0) || (self.gamma.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad("gamma weights must be nonnegative and sum to 1");
        }
        if self.alpha.iter().any(|a| *a < 0.0 || !a.is_finite()) {
            return bad("alpha weights must be nonnegative");
        }
        if !(0.0..=1.0).contains(&self.i_user) || self.lambda_user < 0.0 {
            return bad("I_user must be in [0,1] and lambda_user nonnegative");
        }
        let unit = |v: &[f64]| v.iter().all(|x| (0.0..=1.0).contains(x));
        if !unit(&self.sojourn) || !unit(&self.visit_freq) {
            return bad("sojourn and visit frequency must be normalized to [0,1]");
        }
        if self.semantic.iter().any(|s| *s < 0.0 || !s.is_finite()) {
            return bad("semantic sensitivity must be nonnegative");
        }
        Ok(())
    }
}

/// `LP_i = 1 / (1 + Σ_j p(i)·p(j)·d(i, j))`.
pub fn location_predictability(prior: &[f64], grid: &LocationGrid, metric: Metric, i: usize) -> f64 {
    let pi = prior[i];
    if pi == 0.0 {
        return 1.0;
    }
    let spread: f64 = prior
        .iter()
        .enumerate()
        .filter(|(_, &pj)| pj > 0.0)
        .map(|(j, &pj)| pj * grid.dist(metric, i, j))
        .sum();
    1.0 / (1.0 + pi * spread)
}

/// `LS_i = γ_t·T_i + γ_f·F_i + γ_s·Sen_i·(1 + λ·I_user)`.
pub fn location_sensitivity(profile: &UserProfile, i: usize) -> f64 {
    let [gt, gf, gs] = profile.gamma;
    let boost = 1.0 + profile.lambda_user * profile.i_user;
    let base = gt * profile.sojourn[i] + gf * profile.visit_freq[i];
    match profile.scope {
        CharacteristicScope::Semantic => base + gs * profile.semantic[i] * boost,
        CharacteristicScope::WholeSum => (base + gs * profile.semantic[i]) * boost,
    }
}

/// Sliding-window record of real-location budgets.
#[derive(Debug, Clone, PartialEq)]
pub struct BudgetLedger {
    window: usize,
    n_possible: usize,
    eps_total: f64,
    eps_floor: f64,
    history: Vec<f64>,
}

impl BudgetLedger {
    /// Ledger from the total budget `ε_s` across `n` possible locations.
    pub fn new(eps_total: f64, window: usize, n_possible: usize, eps_floor: f64) -> Result<Self, BudgetError> {
        if window == 0 || n_possible == 0 {
            return Err(BudgetError::BadLedger("window and n must be positive".into()));
        }
        if !(eps_total > 0.0 && eps_total.is_finite()) {
            return Err(BudgetError::BadLedger(format!("eps_total {eps_total} must be positive")));
        }
        if !(eps_floor > 0.0) {
            return Err(BudgetError::BadLedger(format!("eps_floor {eps_floor} must be positive")));
        }
        let ledger = Self { window, n_possible, eps_total, eps_floor, history: Vec::new() };
        if eps_floor > ledger.eps_window() {
            return Err(BudgetError::BadLedger("eps_floor exceeds the window budget".into()));
        }
        Ok(ledger)
    }

    /// Ledger parameterized by the per-trajectory window budget `ε_w = ε_s / n`.
    pub fn with_window_budget(
        eps_window: f64,
        window: usize,
        n_possible: usize,
        eps_floor: f64,
    ) -> Result<Self, BudgetError> {
        Self::new(eps_window * n_possible as f64, window, n_possible, eps_floor)
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn n_possible(&self) -> usize {
        self.n_possible
    }

    pub fn eps_total(&self) -> f64 {
        self.eps_total
    }

    /// `ε_w = ε_s / n`.
    pub fn eps_window(&self) -> f64 {
        self.eps_total / self.n_possible as f64
    }

    /// `ε_r = ε_s / (w·n)`.
    pub fn eps_initial(&self) -> f64 {
        self.eps_total / (self.window * self.n_possible) as f64
    }

    /// `Δε = ε_s / 2`.
    pub fn delta_eps(&self) -> f64 {
        self.eps_total / 2.0
    }

    pub fn eps_floor(&self) -> f64 {
        self.eps_floor
    }

    pub fn history(&self) -> &[f64] {
        &self.history
    }

    /// `ε_max,t`: the window budget minus the last `w − 1` recorded allocations.
    pub fn window_remaining(&self) -> f64 {
        let keep = self.window - 1;
        let start = self.history.len().saturating_sub(keep);
        let spent: f64 = self.history[start..].iter().sum();
        (self.eps_window() - spent).max(0.0)
    }

    /// Budget for cell `i` at the current timestamp. Does not touch the history.
    pub fn allocate(
        &self,
        profile: &UserProfile,
        prior: &[f64],
        grid: &LocationGrid,
        metric: Metric,
        i: usize,
    ) -> Result<f64, BudgetError> {
        let lp = location_predictability(prior, grid, metric, i);
        let ls = location_sensitivity(profile, i);
        let control = profile.alpha[0] * lp + profile.alpha[1] * ls;
        self.allocate_with_control(control)
    }

    /// Budget for a given control coefficient `λ_{i,t}`.
    pub fn allocate_with_control(&self, control: f64) -> Result<f64, BudgetError> {
        let remaining = self.window_remaining();
        if remaining < self.eps_floor {
            return Err(BudgetError::WindowExhausted { remaining, floor: self.eps_floor });
        }
        let raw = self.eps_initial() - control * self.delta_eps();
        Ok(raw.min(remaining).clamp(self.eps_floor, self.eps_window()))
    }

    /// Appends the real location's budget for this timestamp.
    pub fn commit(&mut self, eps: f64) {
        debug_assert!(eps == 0.0 || eps <= self.window_remaining() + 1e-12);
        self.history.push(eps);
    }

    /// Records a timestamp whose release was withheld.
    pub fn commit_suppressed(&mut self) {
        self.history.push(0.0);
    }
}

/// Every length-`w` run of the history sums to at most `ε_w`.
pub fn verify_w_dp(ledger: &BudgetLedger) -> bool {
    verify_window_sums(ledger.history(), ledger.window(), ledger.eps_window())
}

/// Sliding-sum check on a raw history. Runs shorter than `w` at the start count as windows too.
pub fn verify_window_sums(history: &[f64], window: usize, cap: f64) -> bool {
    // A tiny relative slack absorbs the rounding of `ε_w − Σ` followed by re-summing.
    let slack = cap * 1e-12;
    (0..history.len()).all(|i| {
        let start = (i + 1).saturating_sub(window);
        history[start..=i].iter().sum::<f64>() <= cap + slack
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn profile(n: usize) -> UserProfile {
        UserProfile {
            sojourn: vec![0.5; n],
            visit_freq: vec![0.4; n],
            semantic: vec![2.0; n],
            i_user: 0.8,
            lambda_user: 0.5,
            gamma: [0.2, 0.3, 0.5],
            alpha: [0.0, 0.0],
            scope: CharacteristicScope::Semantic,
        }
    }

    #[test]
    fn predictability_examples() {
        let g = LocationGrid::new([8, 1, 1], [8.0, 1.0, 1.0]).unwrap();
        let mut p = vec![0.0; 8];
        p[3] = 1.0;
        assert_eq!(location_predictability(&p, &g, Metric::Spatial, 3), 1.0);
        let mut p = vec![0.0; 8];
        p[0] = 0.5;
        p[4] = 0.5;
        assert!((location_predictability(&p, &g, Metric::Spatial, 0) - 0.5).abs() < 1e-15);
        assert_eq!(location_predictability(&p, &g, Metric::Spatial, 1), 1.0);
    }

    #[test]
    fn sensitivity_examples() {
        let p = profile(1);
        assert!((location_sensitivity(&p, 0) - 1.62).abs() < 1e-12);
        let mut z = profile(1);
        z.sojourn[0] = 0.0;
        z.visit_freq[0] = 0.0;
        z.semantic[0] = 0.0;
        z.i_user = 0.0;
        assert_eq!(location_sensitivity(&z, 0), 0.0);
        let mut off = profile(1);
        off.lambda_user = 0.0;
        assert!((location_sensitivity(&off, 0) - (0.1 + 0.12 + 1.0)).abs() < 1e-12);
        let mut whole = profile(1);
        whole.scope = CharacteristicScope::WholeSum;
        assert!((location_sensitivity(&whole, 0) - 1.22 * 1.4).abs() < 1e-12);
    }

    #[test]
    fn profile_validation() {
        let mut p = profile(2);
        p.semantic = vec![0.5; 2];
        assert!(p.validate().is_ok());
        p.gamma = [0.5, 0.5, 0.5];
        assert!(p.validate().is_err());
    }

    #[test]
    fn ledger_derived_quantities() {
        let l = BudgetLedger::new(8.0, 4, 2, 0.01).unwrap();
        assert_eq!(l.eps_initial(), 1.0);
        assert_eq!(l.eps_window(), 4.0);
        assert_eq!(l.delta_eps(), 4.0);
        let w = BudgetLedger::with_window_budget(4.0, 4, 2, 0.01).unwrap();
        assert_eq!(w, l);
    }

    #[test]
    fn window_remaining_examples() {
        let mut l = BudgetLedger::new(8.0, 4, 2, 0.01).unwrap();
        assert_eq!(l.window_remaining(), 4.0);
        for e in [0.6, 0.7, 0.5] {
            l.commit(e);
        }
        assert!((l.window_remaining() - 2.2).abs() < 1e-12);
        let mut full = BudgetLedger::new(4.0, 2, 1, 0.01).unwrap();
        full.commit(4.0);
        assert_eq!(full.window_remaining(), 0.0);
    }

    #[test]
    fn allocation_examples() {
        let mut l = BudgetLedger::new(8.0, 4, 2, 0.01).unwrap();
        assert!((l.allocate_with_control(0.1).unwrap() - 0.6).abs() < 1e-12);
        assert_eq!(l.allocate_with_control(10.0).unwrap(), 0.01);
        l.commit(2.0);
        l.commit(1.75);
        assert!((l.window_remaining() - 0.25).abs() < 1e-12);
        assert!((l.allocate_with_control(0.1).unwrap() - 0.25).abs() < 1e-12);
        l.commit(0.25);
        assert!(matches!(l.allocate_with_control(0.1), Err(BudgetError::WindowExhausted { .. })));
    }

    #[test]
    fn allocation_through_profile() {
        let g = LocationGrid::new([2, 1, 1], [2.0, 1.0, 1.0]).unwrap();
        let mut p = profile(2);
        p.alpha = [0.05, 0.0];
        let l = BudgetLedger::new(8.0, 4, 2, 0.01).unwrap();
        // Point mass gives LP = 1, so λ = 0.05 and ε = 1 − 0.05·4.
        let eps = l.allocate(&p, &[1.0, 0.0], &g, Metric::Spatial, 0).unwrap();
        assert!((eps - 0.8).abs() < 1e-12);
    }

    #[test]
    fn w_dp_examples() {
        assert!(verify_window_sums(&[1.0, 1.0, 1.0, 1.0], 4, 4.0));
        assert!(!verify_window_sums(&[2.0, 2.0, 1.0], 2, 3.0));
        assert!(verify_window_sums(&[], 3, 1.0));
        let l = BudgetLedger::new(8.0, 4, 2, 0.01).unwrap();
        assert!(verify_w_dp(&l));
    }

    #[test]
    fn ledger_rejects_bad_parameters() {
        assert!(BudgetLedger::new(0.0, 4, 2, 0.01).is_err());
        assert!(BudgetLedger::new(8.0, 0, 2, 0.01).is_err());
        assert!(BudgetLedger::new(8.0, 4, 2, 0.0).is_err());
        assert!(BudgetLedger::new(0.01, 4, 2, 0.01).is_err());
    }
}
