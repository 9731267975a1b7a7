//! Brute-force references for tiny instances.
//!
//! Everything here is exponential and meant for grids of at most a few dozen
//! cells. Tests and the `oracle` CLI command compare the production code
//! against these.

use rand::Rng;

use crate::adversary::{step_model, MechanismParams, Pipeline, PriorSource, Scenario, SimError};
use crate::budget::{BudgetLedger, CharacteristicScope, UserProfile};
use crate::grid::{hilbert_orders, HilbertOrder, LocationGrid, Metric};
use crate::mobility::{advance_prior, bayes_posterior, optimal_guess, MobilityError, TransitionMatrix};
use crate::pls::{conditional_expected_error, diameter, GuessDomain};

/// Largest map the subset search accepts.
pub const MAX_SUBSET_CELLS: usize = 20;

/// Exact expectations of the per-run statistics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JointTable {
    /// `E[mean_t d(x_t, x̂_t)]`.
    pub privacy: f64,
    /// `E[mean over released t of d(x_t, x'_t)]`.
    pub qos_loss: f64,
    /// Number of (path, release) leaves enumerated.
    pub leaves: usize,
}

/// Enumerates every real path of length `len` (first cell from the initial
/// prior, then `M`) and every release sequence, weighting each leaf exactly.
///
/// `sc.trajectory` is ignored.
pub fn joint_table(sc: &Scenario, params: &MechanismParams, pipe: &Pipeline, len: usize) -> Result<JointTable, SimError> {
    let mut acc = Acc { privacy: 0.0, qos: 0.0, leaves: 0 };
    let walk = Walk { sc, params, pipe, len };
    walk.node(0, &sc.initial_prior, None, &params.ledger()?, 1.0, Partial::default(), &mut acc)?;
    Ok(JointTable { privacy: acc.privacy, qos_loss: acc.qos, leaves: acc.leaves })
}

struct Acc {
    privacy: f64,
    qos: f64,
    leaves: usize,
}

#[derive(Debug, Clone, Copy, Default)]
struct Partial {
    err_sum: f64,
    pert_sum: f64,
    released: usize,
}

struct Walk<'a> {
    sc: &'a Scenario,
    params: &'a MechanismParams,
    pipe: &'a Pipeline,
    len: usize,
}

impl Walk<'_> {
    #[allow(clippy::too_many_arguments)]
    fn node(
        &self,
        t: usize,
        prior: &[f64],
        prev: Option<usize>,
        ledger: &BudgetLedger,
        weight: f64,
        partial: Partial,
        acc: &mut Acc,
    ) -> Result<(), SimError> {
        let grid = &self.sc.grid;
        if t == self.len {
            acc.privacy += weight * partial.err_sum / self.len as f64;
            if partial.released > 0 {
                acc.qos += weight * partial.pert_sum / partial.released as f64;
            }
            acc.leaves += 1;
            return Ok(());
        }
        let mech_prior = match self.pipe.prior {
            PriorSource::Tracked => prior,
            PriorSource::Static => &self.sc.initial_prior,
        };
        let model = step_model(self.sc, self.params, self.pipe, mech_prior, ledger)?;
        let step_law = match prev {
            None => self.sc.initial_prior.as_slice(),
            Some(p) => self.sc.transition.row(p),
        };

        for (x, &px) in step_law.iter().enumerate() {
            if px == 0.0 {
                continue;
            }
            let k = model.anchor_index(grid, x);
            let mut next_ledger = ledger.clone();
            if model.suppressed {
                next_ledger.commit_suppressed();
                let (guess, _) = optimal_guess(prior, grid, Metric::Spatial);
                let p = Partial { err_sum: partial.err_sum + grid.dist(Metric::Spatial, x, guess), ..partial };
                let next = advance_prior(prior, &self.sc.transition)?;
                self.node(t + 1, &next, Some(x), &next_ledger, weight * px, p, acc)?;
                continue;
            }
            next_ledger.commit(model.eps[k]);
            for (out, pout) in model.rules[k].support() {
                if pout == 0.0 {
                    continue;
                }
                let lik = model.likelihood(grid, prior, out);
                let post = bayes_posterior(prior, &lik)?;
                let (guess, _) = optimal_guess(&post, grid, Metric::Spatial);
                let p = Partial {
                    err_sum: partial.err_sum + grid.dist(Metric::Spatial, x, guess),
                    pert_sum: partial.pert_sum + grid.dist(Metric::Spatial, x, out),
                    released: partial.released + 1,
                };
                let next = advance_prior(&post, &self.sc.transition)?;
                self.node(t + 1, &next, Some(x), &next_ledger, weight * px * pout, p, acc)?;
            }
        }
        Ok(())
    }
}

/// Dense random chain, prior and profile on `grid`; the trajectory is left empty.
pub fn random_scenario<R: Rng + ?Sized>(grid: LocationGrid, rng: &mut R) -> Result<Scenario, MobilityError> {
    let n = grid.len();
    let mut simplex = |lo: f64| {
        let r: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..1.0)).collect();
        let z: f64 = r.iter().sum();
        r.into_iter().map(|v| v / z).collect::<Vec<f64>>()
    };
    let rows: Vec<Vec<f64>> = (0..n).map(|_| simplex(0.05)).collect();
    let prior = simplex(0.2);
    let mut unit = || (0..n).map(|_| rng.gen()).collect::<Vec<f64>>();
    let profile = UserProfile {
        sojourn: unit(),
        visit_freq: unit(),
        semantic: unit(),
        i_user: 0.5,
        lambda_user: 0.5,
        gamma: [0.3, 0.3, 0.4],
        alpha: [0.01, 0.01],
        scope: CharacteristicScope::Semantic,
    };
    Ok(Scenario {
        orders: hilbert_orders(&grid),
        profile,
        transition: TransitionMatrix::from_rows(rows)?,
        initial_prior: prior,
        trajectory: Vec::new(),
        grid,
    })
}

/// A reference protection set.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceSet {
    pub members: Vec<usize>,
    pub diameter: f64,
    pub cond_error: f64,
}

/// Smallest-diameter set over all subsets of `pool` containing `anchor` that
/// clears `e^ε·E_m`; ties to fewer members. `None` when nothing qualifies.
#[allow(clippy::too_many_arguments)]
pub fn subset_optimum_pls(
    anchor: usize,
    prior: &[f64],
    epsilon: f64,
    e_m: f64,
    pool: &[usize],
    grid: &LocationGrid,
    metric: Metric,
    domain: GuessDomain,
) -> Option<ReferenceSet> {
    let others: Vec<usize> = pool.iter().copied().filter(|&c| c != anchor).collect();
    assert!(others.len() < MAX_SUBSET_CELLS, "subset search is exponential");
    let threshold = epsilon.exp() * e_m;
    let mut best: Option<ReferenceSet> = None;
    for mask in 1u32..(1 << others.len()) {
        let mut members = vec![anchor];
        members.extend((0..others.len()).filter(|b| mask >> b & 1 == 1).map(|b| others[b]));
        let d = diameter(&members, grid, metric);
        if d < threshold || best.as_ref().is_some_and(|b| d > b.diameter) {
            continue;
        }
        let Ok(e) = conditional_expected_error(&members, prior, grid, metric, domain) else { continue };
        if e < threshold {
            continue;
        }
        let better = best
            .as_ref()
            .is_none_or(|b| d < b.diameter || (d == b.diameter && members.len() < b.members.len()));
        if better {
            best = Some(ReferenceSet { members, diameter: d, cond_error: e });
        }
    }
    best
}

/// Unpruned scan of every contiguous window around `anchor` in every order,
/// restricted to `pool`, with the production tie rules.
#[allow(clippy::too_many_arguments)]
pub fn window_optimum_pls(
    anchor: usize,
    prior: &[f64],
    epsilon: f64,
    e_m: f64,
    orders: &[HilbertOrder],
    pool: &[bool],
    grid: &LocationGrid,
    metric: Metric,
    domain: GuessDomain,
) -> Option<ReferenceSet> {
    let threshold = epsilon.exp() * e_m;
    let mut best: Option<((f64, usize, usize, usize), ReferenceSet)> = None;
    for o in orders {
        let seq: Vec<usize> = o.permutation.iter().copied().filter(|&c| pool[c]).collect();
        let Some(r) = seq.iter().position(|&c| c == anchor) else { continue };
        for s in 0..=r {
            for e in r.max(s + 1)..seq.len() {
                let members = seq[s..=e].to_vec();
                let Ok(err) = conditional_expected_error(&members, prior, grid, metric, domain) else { continue };
                if err < threshold {
                    continue;
                }
                let d = diameter(&members, grid, metric);
                let key = (d, members.len(), o.rotation_id, s);
                let better = best.as_ref().is_none_or(|(b, _)| {
                    let tie = 1e-12 * b.0.max(1.0);
                    d < b.0 - tie || (d <= b.0 + tie && (key.1, key.2, key.3) < (b.1, b.2, b.3))
                });
                if better {
                    best = Some((key, ReferenceSet { members, diameter: d, cond_error: err }));
                }
            }
        }
    }
    best.map(|(_, r)| r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pls::find_pls;

    #[test]
    fn subset_optimum_on_small_cube() {
        let g = LocationGrid::new([2, 2, 2], [2.0, 2.0, 2.0]).unwrap();
        let prior = vec![0.125; 8];
        let pool: Vec<usize> = (0..8).collect();
        let best = subset_optimum_pls(0, &prior, 0.5, 0.3, &pool, &g, Metric::Spatial, GuessDomain::Map).unwrap();
        assert_eq!(best.members.len(), 2);
        assert_eq!(best.diameter, 1.0);
        assert_eq!(best.cond_error, 0.5);
        assert!(subset_optimum_pls(0, &prior, 5.0, 1.0, &pool, &g, Metric::Spatial, GuessDomain::Map).is_none());
    }

    #[test]
    fn pruned_search_matches_exhaustive_windows() {
        let g = LocationGrid::new([4, 4, 1], [4.0, 4.0, 1.0]).unwrap();
        let orders = hilbert_orders(&g);
        let mut prior: Vec<f64> = (0..16).map(|i| 1.0 + (i * 7 % 5) as f64).collect();
        let z: f64 = prior.iter().sum();
        prior.iter_mut().for_each(|p| *p /= z);
        for anchor in [0, 5, 10, 15] {
            for (eps, em) in [(0.2, 0.4), (0.5, 0.6), (1.0, 0.3)] {
                let got = find_pls(anchor, &prior, eps, em, &orders, &g).unwrap();
                let want = window_optimum_pls(anchor, &prior, eps, em, &orders, &[true; 16], &g, Metric::Spatial, GuessDomain::Map)
                    .unwrap();
                assert_eq!(got.members, want.members);
                let opt = subset_optimum_pls(anchor, &prior, eps, em, &(0..16).collect::<Vec<_>>(), &g, Metric::Spatial, GuessDomain::Map)
                    .unwrap();
                assert!(got.diameter >= opt.diameter - 1e-12);
            }
        }
    }
}
