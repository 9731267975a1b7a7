//! Protection location sets.
//!
//! For a protected cell the search looks for the smallest-diameter set `Φ`
//! containing it whose prior-weighted worst-case inference error clears
//! `e^ε · E_m`. Candidate sets are contiguous runs along rotated Hilbert
//! traversals, which keeps them spatially compact.

use crate::grid::{HilbertOrder, LocationGrid, Metric};
use crate::mobility::weighted_median_cell;

/// Relative slack used only when comparing diameters for tie-breaking.
const DIAMETER_TIE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PlsError {
    #[error("protection set has no prior mass; conditional error is undefined")]
    ZeroMass,
    #[error("protection set is empty")]
    Empty,
    #[error(
        "no protection set reaches e^eps*E_m = {threshold:.4} m \
         (largest conditional error found: {max_found:.4} m)"
    )]
    Infeasible { threshold: f64, max_found: f64 },
    #[error("epsilon {epsilon} and E_m {e_m} must both be positive and finite")]
    BadParameters { epsilon: f64, e_m: f64 },
    #[error("anchor {0} is not part of the search pool")]
    AnchorOutsidePool(usize),
}

/// Where the attacker's guess may range when scoring a set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuessDomain {
    /// Any cell of the map.
    #[default]
    Map,
    /// Only the members of the set.
    Members,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProtectionLocationSet {
    /// Members in traversal order.
    pub members: Vec<usize>,
    pub anchor: usize,
    pub diameter: f64,
    pub cond_error: f64,
    pub epsilon: f64,
    pub e_m: f64,
    pub rotation_id: usize,
}

impl ProtectionLocationSet {
    pub fn threshold(&self) -> f64 {
        self.epsilon.exp() * self.e_m
    }

    fn assert_invariants(&self, grid: &LocationGrid, metric: Metric) {
        assert!(self.members.contains(&self.anchor), "anchor outside its protection set");
        assert!(self.members.len() >= 2, "protection set must hold at least two cells");
        assert_eq!(self.diameter, diameter(&self.members, grid, metric));
        assert!(self.cond_error >= self.threshold(), "admission constraint violated");
        assert!(self.diameter >= self.threshold(), "diameter below e^eps*E_m");
    }
}

/// Largest pairwise distance among `members`; zero for a singleton.
pub fn diameter(members: &[usize], grid: &LocationGrid, metric: Metric) -> f64 {
    let mut d: f64 = 0.0;
    for (k, &a) in members.iter().enumerate() {
        for &b in &members[k + 1..] {
            d = d.max(grid.dist(metric, a, b));
        }
    }
    d
}

/// `min_x̂ Σ_{x∈Φ} prior(x)/mass(Φ) · d(x̂, x)`.
pub fn conditional_expected_error(
    members: &[usize],
    prior: &[f64],
    grid: &LocationGrid,
    metric: Metric,
    domain: GuessDomain,
) -> Result<f64, PlsError> {
    if members.is_empty() {
        return Err(PlsError::Empty);
    }
    let weighted: Vec<(usize, f64)> =
        members.iter().filter(|&&i| prior[i] > 0.0).map(|&i| (i, prior[i])).collect();
    let mass: f64 = weighted.iter().map(|w| w.1).sum();
    if !(mass > 0.0) {
        return Err(PlsError::ZeroMass);
    }
    Ok(raw_error(&weighted, members, grid, metric, domain) / mass)
}

fn raw_error(
    weighted: &[(usize, f64)],
    members: &[usize],
    grid: &LocationGrid,
    metric: Metric,
    domain: GuessDomain,
) -> f64 {
    match domain {
        GuessDomain::Map => weighted_median_cell(weighted, grid, metric).1,
        GuessDomain::Members => members
            .iter()
            .map(|&g| weighted.iter().map(|&(i, w)| w * grid.dist(metric, g, i)).sum::<f64>())
            .fold(f64::INFINITY, f64::min),
    }
}

/// Rotated traversals restricted to a pool of eligible cells.
///
/// Cells outside the pool are dropped while the relative order of the rest is
/// kept, so windows run over eligible cells only.
#[derive(Debug, Clone)]
pub struct PoolOrders {
    seqs: Vec<(usize, Vec<usize>)>,
    rank: Vec<Vec<usize>>,
}

impl PoolOrders {
    pub fn new(orders: &[HilbertOrder], pool: &[bool]) -> Self {
        let mut seqs = Vec::with_capacity(orders.len());
        let mut rank = Vec::with_capacity(orders.len());
        for o in orders {
            let seq: Vec<usize> = o.permutation.iter().copied().filter(|&c| pool[c]).collect();
            let mut r = vec![usize::MAX; pool.len()];
            for (k, &c) in seq.iter().enumerate() {
                r[c] = k;
            }
            seqs.push((o.rotation_id, seq));
            rank.push(r);
        }
        Self { seqs, rank }
    }

    /// Every cell is eligible.
    pub fn full(orders: &[HilbertOrder]) -> Self {
        let n = orders.first().map_or(0, |o| o.permutation.len());
        Self::new(orders, &vec![true; n])
    }

    pub fn contains(&self, cell: usize) -> bool {
        self.rank.first().is_some_and(|r| r[cell] != usize::MAX)
    }
}

/// Search settings shared by every anchor at one timestamp.
#[derive(Debug, Clone, Copy)]
pub struct PlsSearch<'a> {
    pub grid: &'a LocationGrid,
    pub metric: Metric,
    pub domain: GuessDomain,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Pick {
    diameter: f64,
    size: usize,
    rotation_id: usize,
    start: usize,
}

impl Pick {
    fn beats(&self, other: &Pick) -> bool {
        let tie = DIAMETER_TIE * other.diameter.max(1.0);
        if self.diameter < other.diameter - tie {
            return true;
        }
        if self.diameter > other.diameter + tie {
            return false;
        }
        (self.size, self.rotation_id, self.start) < (other.size, other.rotation_id, other.start)
    }
}

impl PlsSearch<'_> {
    /// Smallest-diameter admissible window around `anchor` across all traversals.
    ///
    /// Ties go to fewer members, then the lower rotation id, then the earlier start.
    pub fn find(
        &self,
        anchor: usize,
        prior: &[f64],
        epsilon: f64,
        e_m: f64,
        orders: &PoolOrders,
    ) -> Result<ProtectionLocationSet, PlsError> {
        if !(epsilon > 0.0 && e_m > 0.0 && epsilon.is_finite() && e_m.is_finite()) {
            return Err(PlsError::BadParameters { epsilon, e_m });
        }
        if !orders.contains(anchor) {
            return Err(PlsError::AnchorOutsidePool(anchor));
        }
        let threshold = epsilon.exp() * e_m;
        let (grid, metric) = (self.grid, self.metric);
        let mut best: Option<(Pick, usize)> = None;
        let mut max_found: f64 = 0.0;

        for (oi, (rotation_id, seq)) in orders.seqs.iter().enumerate() {
            let r = orders.rank[oi][anchor];
            // Diameter of seq[s..=r], grown leftwards.
            let mut left_diam = 0.0_f64;
            for s in (0..=r).rev() {
                for &c in &seq[s + 1..=r] {
                    left_diam = left_diam.max(grid.dist(metric, seq[s], c));
                }
                if let Some((b, _)) = &best {
                    if left_diam > b.diameter * (1.0 + DIAMETER_TIE) {
                        break;
                    }
                }
                let mut diam = left_diam;
                let mut weighted: Vec<(usize, f64)> = seq[s..=r]
                    .iter()
                    .filter(|&&c| prior[c] > 0.0)
                    .map(|&c| (c, prior[c]))
                    .collect();
                let mut mass: f64 = weighted.iter().map(|w| w.1).sum();
                let mut dirty = true;
                let mut error = 0.0;
                let first_end = r.max(s + 1);
                for e in r..seq.len() {
                    if e > r {
                        let c = seq[e];
                        for &m in &seq[s..e] {
                            diam = diam.max(grid.dist(metric, m, c));
                        }
                        if prior[c] > 0.0 {
                            weighted.push((c, prior[c]));
                            mass += prior[c];
                            dirty = true;
                        }
                    }
                    if e < first_end {
                        continue;
                    }
                    let pick = Pick { diameter: diam, size: e - s + 1, rotation_id: *rotation_id, start: s };
                    // Extending only grows diameter and size, so nothing further can win.
                    if best.as_ref().is_some_and(|(b, _)| !pick.beats(b)) {
                        break;
                    }
                    // The conditional error never exceeds the diameter.
                    if diam < threshold || weighted.is_empty() {
                        continue;
                    }
                    if dirty {
                        error = raw_error(&weighted, &seq[s..=e], grid, metric, self.domain) / mass;
                        max_found = max_found.max(error);
                        dirty = false;
                    }
                    if error >= threshold {
                        if best.as_ref().is_none_or(|(b, _)| pick.beats(b)) {
                            best = Some((pick, oi));
                        }
                        break;
                    }
                }
            }
        }

        let (pick, oi) = best.ok_or(PlsError::Infeasible { threshold, max_found })?;
        let members = orders.seqs[oi].1[pick.start..pick.start + pick.size].to_vec();
        let cond_error = conditional_expected_error(&members, prior, grid, metric, self.domain)?;
        let pls = ProtectionLocationSet {
            diameter: diameter(&members, grid, metric),
            members,
            anchor,
            cond_error,
            epsilon,
            e_m,
            rotation_id: pick.rotation_id,
        };
        pls.assert_invariants(grid, metric);
        Ok(pls)
    }
}

/// Full-map search with 3D distances and the map-wide guess domain.
pub fn find_pls(
    anchor: usize,
    prior: &[f64],
    epsilon: f64,
    e_m: f64,
    orders: &[HilbertOrder],
    grid: &LocationGrid,
) -> Result<ProtectionLocationSet, PlsError> {
    let search = PlsSearch { grid, metric: Metric::Spatial, domain: GuessDomain::Map };
    search.find(anchor, prior, epsilon, e_m, &PoolOrders::full(orders))
}
