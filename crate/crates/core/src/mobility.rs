//! Markov mobility model and the attacker's belief arithmetic.
//!
//! Beliefs are dense probability vectors over every grid cell. The prior at
//! `t + 1` is the posterior at `t` pushed through the transition matrix; the
//! posterior is a plain Bayes update against the release channel.

use std::io::Read;
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;

use crate::grid::{LocationGrid, Metric};

/// Absolute tolerance for "sums to one" checks.
pub const SIMPLEX_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MobilityError {
    #[error("count matrix must be {n}x{n}")]
    Shape { n: usize },
    #[error("negative count {value} at ({row}, {col})")]
    NegativeCount { row: usize, col: usize, value: f64 },
    #[error("count {value} recorded between unreachable cells ({row}, {col})")]
    UnreachableCount { row: usize, col: usize, value: f64 },
    #[error("dimension mismatch: vector has {got} entries, expected {expected}")]
    Dimension { got: usize, expected: usize },
    #[error("vector is not a probability distribution (sum {sum}, min {min})")]
    NotSimplex { sum: f64, min: f64 },
    #[error("observation has zero likelihood under every location with prior mass")]
    ImpossibleObservation,
    #[error("delta {0} must lie strictly between 0 and 1")]
    BadDelta(f64),
    #[error("cell index {index} out of range for {len} cells")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("count file {path}: {reason}")]
    CountFile { path: String, reason: String },
}

/// Checks nonnegativity and unit mass.
pub fn check_simplex(v: &[f64]) -> Result<(), MobilityError> {
    let sum: f64 = v.iter().sum();
    let min = v.iter().copied().fold(f64::INFINITY, f64::min);
    if !(sum - 1.0).abs().le(&SIMPLEX_TOL) || min < 0.0 || !sum.is_finite() {
        return Err(MobilityError::NotSimplex { sum, min });
    }
    Ok(())
}

/// Row-stochastic transition matrix stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix {
    n: usize,
    m: Vec<f64>,
}

impl TransitionMatrix {
    pub fn identity(n: usize) -> Self {
        let mut m = vec![0.0; n * n];
        for i in 0..n {
            m[i * n + i] = 1.0;
        }
        Self { n, m }
    }

    /// Wraps explicit rows; each must already be a distribution.
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self, MobilityError> {
        let n = rows.len();
        let mut m = Vec::with_capacity(n * n);
        for row in &rows {
            if row.len() != n {
                return Err(MobilityError::Shape { n });
            }
            check_simplex(row)?;
            m.extend_from_slice(row);
        }
        Ok(Self { n, m })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.m[i * self.n..(i + 1) * self.n]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.m[i * self.n + j]
    }
}

/// Normalizes visit counts into transition probabilities.
///
/// Rows without any recorded transition become self-loops.
pub fn estimate_transition_matrix(
    counts: &[Vec<f64>],
    reachable: &[Vec<bool>],
) -> Result<TransitionMatrix, MobilityError> {
    let n = counts.len();
    if reachable.len() != n
        || counts.iter().any(|r| r.len() != n)
        || reachable.iter().any(|r| r.len() != n)
    {
        return Err(MobilityError::Shape { n });
    }
    let mut m = vec![0.0; n * n];
    for (i, row) in counts.iter().enumerate() {
        for (j, &c) in row.iter().enumerate() {
            if c < 0.0 || !c.is_finite() {
                return Err(MobilityError::NegativeCount { row: i, col: j, value: c });
            }
            if c > 0.0 && !reachable[i][j] {
                return Err(MobilityError::UnreachableCount { row: i, col: j, value: c });
            }
        }
        let total: f64 = row.iter().sum();
        if total == 0.0 {
            m[i * n + i] = 1.0;
        } else {
            for (j, &c) in row.iter().enumerate() {
                m[i * n + j] = c / total;
            }
        }
    }
    Ok(TransitionMatrix { n, m })
}

/// Reads sparse visit counts from CSV lines `row,col,count` (optional header).
pub fn read_count_csv(path: &Path, n: usize) -> Result<Vec<Vec<f64>>, MobilityError> {
    let fail = |reason: String| MobilityError::CountFile { path: path.display().to_string(), reason };
    let mut text = String::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_string(&mut text))
        .map_err(|e| fail(e.to_string()))?;
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut counts = vec![vec![0.0; n]; n];
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| fail(e.to_string()))?;
        if rec.len() != 3 {
            return Err(fail(format!("line {}: expected 3 fields", line + 1)));
        }
        let parsed = (rec[0].parse::<usize>(), rec[1].parse::<usize>(), rec[2].parse::<f64>());
        let (i, j, c) = match parsed {
            (Ok(i), Ok(j), Ok(c)) => (i, j, c),
            _ if line == 0 => continue,
            _ => return Err(fail(format!("line {}: unparsable record", line + 1))),
        };
        if i >= n || j >= n {
            return Err(fail(format!("line {}: index out of range", line + 1)));
        }
        counts[i][j] += c;
    }
    Ok(counts)
}

/// Attacker belief at one timestamp.
#[derive(Debug, Clone, PartialEq)]
pub struct BeliefState {
    pub timestamp: usize,
    pub prior: Vec<f64>,
    pub posterior: Vec<f64>,
}

impl BeliefState {
    pub fn new(timestamp: usize, prior: Vec<f64>, posterior: Vec<f64>) -> Result<Self, MobilityError> {
        check_simplex(&prior)?;
        check_simplex(&posterior)?;
        Ok(Self { timestamp, prior, posterior })
    }
}

/// `posterior · M`, the one-step-ahead prior.
pub fn advance_prior(posterior: &[f64], m: &TransitionMatrix) -> Result<Vec<f64>, MobilityError> {
    if posterior.len() != m.len() {
        return Err(MobilityError::Dimension { got: posterior.len(), expected: m.len() });
    }
    let mut out = vec![0.0; m.len()];
    for (i, &p) in posterior.iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        for (o, &mij) in out.iter_mut().zip(m.row(i)) {
            *o += p * mij;
        }
    }
    renormalize(&mut out);
    Ok(out)
}

/// Bayes update: `posterior[i] ∝ prior[i] · likelihood[i]`.
pub fn bayes_posterior(prior: &[f64], likelihood: &[f64]) -> Result<Vec<f64>, MobilityError> {
    if prior.len() != likelihood.len() {
        return Err(MobilityError::Dimension { got: likelihood.len(), expected: prior.len() });
    }
    let mut out: Vec<f64> = prior.iter().zip(likelihood).map(|(p, l)| p * l).collect();
    let z: f64 = out.iter().sum();
    if !(z > 0.0) || !z.is_finite() {
        return Err(MobilityError::ImpossibleObservation);
    }
    out.iter_mut().for_each(|v| *v /= z);
    Ok(out)
}

/// A `len`-step path: the first cell drawn from `initial`, the rest by `M`.
pub fn sample_path<R: Rng + ?Sized>(
    initial: &[f64],
    m: &TransitionMatrix,
    len: usize,
    rng: &mut R,
) -> Result<Vec<usize>, MobilityError> {
    check_simplex(initial)?;
    if initial.len() != m.len() {
        return Err(MobilityError::Dimension { got: initial.len(), expected: m.len() });
    }
    let draw = |w: &[f64], rng: &mut R| WeightedIndex::new(w).expect("valid simplex").sample(rng);
    let mut path = Vec::with_capacity(len);
    if len == 0 {
        return Ok(path);
    }
    path.push(draw(initial, rng));
    while path.len() < len {
        let at = *path.last().unwrap();
        path.push(draw(m.row(at), rng));
    }
    Ok(path)
}

fn renormalize(v: &mut [f64]) {
    let z: f64 = v.iter().sum();
    if z > 0.0 {
        v.iter_mut().for_each(|x| *x /= z);
    }
}

/// The δ-location set: fewest highest-prior cells holding at least `1 − δ` mass.
#[derive(Debug, Clone, PartialEq)]
pub struct PossibleLocationSet {
    /// Members in selection order (prior descending, index ascending).
    pub members: Vec<usize>,
    pub delta: f64,
    /// Stand-in for the real location when it was not selected.
    pub surrogate: Option<usize>,
    pub mass: f64,
}

impl PossibleLocationSet {
    pub fn contains(&self, i: usize) -> bool {
        self.members.contains(&i)
    }

    /// The location actually protected for a real location `real`.
    pub fn anchor_for(&self, grid: &LocationGrid, metric: Metric, real: usize) -> usize {
        if self.contains(real) {
            real
        } else {
            nearest_member(grid, metric, &self.members, real)
        }
    }
}

/// Nearest member to `target`; ties go to the lowest cell index.
pub fn nearest_member(grid: &LocationGrid, metric: Metric, members: &[usize], target: usize) -> usize {
    let mut best = (f64::INFINITY, usize::MAX);
    for &m in members {
        let d = grid.dist(metric, m, target);
        if d < best.0 || (d == best.0 && m < best.1) {
            best = (d, m);
        }
    }
    best.1
}

pub fn delta_location_set(
    prior: &[f64],
    delta: f64,
    real: usize,
    grid: &LocationGrid,
    metric: Metric,
) -> Result<PossibleLocationSet, MobilityError> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(MobilityError::BadDelta(delta));
    }
    if prior.len() != grid.len() {
        return Err(MobilityError::Dimension { got: prior.len(), expected: grid.len() });
    }
    if real >= prior.len() {
        return Err(MobilityError::IndexOutOfRange { index: real, len: prior.len() });
    }
    check_simplex(prior)?;

    let mut order: Vec<usize> = (0..prior.len()).filter(|&i| prior[i] > 0.0).collect();
    order.sort_by(|&a, &b| prior[b].total_cmp(&prior[a]).then(a.cmp(&b)));
    let target = 1.0 - delta;
    let mut members = Vec::new();
    let mut mass = 0.0;
    for &i in &order {
        members.push(i);
        mass += prior[i];
        // Slack absorbs rounding in priors that sum to 1 within SIMPLEX_TOL.
        if mass >= target - SIMPLEX_TOL {
            break;
        }
    }
    debug_assert!(mass >= target - SIMPLEX_TOL);
    debug_assert!(members.len() == 1 || mass - prior[*members.last().unwrap()] < target - SIMPLEX_TOL);

    let surrogate = if members.contains(&real) {
        None
    } else {
        Some(nearest_member(grid, metric, &members, real))
    };
    Ok(PossibleLocationSet { members, delta, surrogate, mass })
}

/// Expected distance from `guess` to the truth under `posterior`.
pub fn expected_distance(posterior: &[f64], grid: &LocationGrid, metric: Metric, guess: usize) -> f64 {
    posterior
        .iter()
        .enumerate()
        .filter(|(_, &p)| p > 0.0)
        .map(|(i, &p)| p * grid.dist(metric, guess, i))
        .sum()
}

/// Cell minimizing posterior expected distance; lowest index on ties.
///
/// The optimum lies inside the lattice bounding box of the posterior support
/// (clamping a point onto that box moves it closer to every support cell), so
/// only that box is scanned.
pub fn optimal_inference(posterior: &[f64], grid: &LocationGrid, metric: Metric) -> usize {
    optimal_guess(posterior, grid, metric).0
}

/// `(argmin, min)` of the posterior expected distance.
pub fn optimal_guess(posterior: &[f64], grid: &LocationGrid, metric: Metric) -> (usize, f64) {
    let support: Vec<(usize, f64)> =
        posterior.iter().enumerate().filter(|(_, &p)| p > 0.0).map(|(i, &p)| (i, p)).collect();
    weighted_median_cell(&support, grid, metric)
}

/// Minimizes `Σ w · dist(x̂, cell)` over grid cells `x̂`, scanning the support's bounding box.
pub(crate) fn weighted_median_cell(
    support: &[(usize, f64)],
    grid: &LocationGrid,
    metric: Metric,
) -> (usize, f64) {
    if support.is_empty() {
        return (0, 0.0);
    }
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    for &(i, _) in support {
        let l = grid.lattice(i);
        for (k, v) in [l.x, l.y, l.z].into_iter().enumerate() {
            lo[k] = lo[k].min(v);
            hi[k] = hi[k].max(v);
        }
    }
    if metric == Metric::Planar {
        // Height is free under the planar metric; the lowest layer wins ties.
        lo[2] = 0;
        hi[2] = 0;
    }
    let pts: Vec<([f64; 3], f64)> = support.iter().map(|&(i, w)| (grid.center(i), w)).collect();
    let axes = if metric == Metric::Planar { 2 } else { 3 };
    let mut best = (usize::MAX, f64::INFINITY);
    for x in lo[0]..=hi[0] {
        for y in lo[1]..=hi[1] {
            for z in lo[2]..=hi[2] {
                let idx = grid.index_of(crate::grid::Lattice { x, y, z }).expect("inside grid");
                let c = grid.center(idx);
                let mut cost = 0.0;
                for (p, w) in &pts {
                    let mut s = 0.0;
                    for k in 0..axes {
                        let d = c[k] - p[k];
                        s += d * d;
                    }
                    cost += w * s.sqrt();
                }
                if cost < best.1 || (cost == best.1 && idx < best.0) {
                    best = (idx, cost);
                }
            }
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Lattice;

    fn line_grid() -> LocationGrid {
        LocationGrid::new([8, 1, 1], [8.0, 1.0, 1.0]).unwrap()
    }

    #[test]
    fn transition_normalization() {
        let counts = vec![vec![1.0, 1.0], vec![0.0, 2.0]];
        let reach = vec![vec![true; 2]; 2];
        let m = estimate_transition_matrix(&counts, &reach).unwrap();
        assert_eq!(m.row(0), &[0.5, 0.5]);
        assert_eq!(m.row(1), &[0.0, 1.0]);

        let zero = vec![vec![0.0; 3]; 3];
        let m = estimate_transition_matrix(&zero, &vec![vec![true; 3]; 3]).unwrap();
        assert_eq!(m.row(1), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn transition_errors() {
        let reach = vec![vec![true, false], vec![true, true]];
        let bad = vec![vec![1.0, 1.0], vec![0.0, 2.0]];
        assert!(matches!(
            estimate_transition_matrix(&bad, &reach),
            Err(MobilityError::UnreachableCount { row: 0, col: 1, .. })
        ));
        let neg = vec![vec![-1.0, 0.0], vec![0.0, 2.0]];
        assert!(matches!(
            estimate_transition_matrix(&neg, &vec![vec![true; 2]; 2]),
            Err(MobilityError::NegativeCount { .. })
        ));
    }

    #[test]
    fn advance_examples() {
        let id = TransitionMatrix::identity(3);
        assert_eq!(advance_prior(&[0.2, 0.3, 0.5], &id).unwrap(), vec![0.2, 0.3, 0.5]);

        let m = TransitionMatrix::from_rows(vec![vec![0.5, 0.5], vec![0.0, 1.0]]).unwrap();
        assert_eq!(advance_prior(&[1.0, 0.0], &m).unwrap(), vec![0.5, 0.5]);
        let p = advance_prior(&[0.5, 0.5], &m).unwrap();
        assert!((p[0] - 0.25).abs() < 1e-15 && (p[1] - 0.75).abs() < 1e-15);
        assert!(matches!(advance_prior(&[1.0], &m), Err(MobilityError::Dimension { .. })));
    }

    #[test]
    fn bayes_examples() {
        let p = bayes_posterior(&[0.5, 0.5], &[0.8, 0.4]).unwrap();
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-15 && (p[1] - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(bayes_posterior(&[0.3, 0.7], &[0.2, 0.2]).unwrap()[0], 0.3 / (0.3 + 0.7));
        assert_eq!(bayes_posterior(&[0.0, 1.0], &[0.9, 0.1]).unwrap(), vec![0.0, 1.0]);
        assert_eq!(
            bayes_posterior(&[0.0, 1.0], &[0.9, 0.0]),
            Err(MobilityError::ImpossibleObservation)
        );
    }

    #[test]
    fn delta_set_examples() {
        let g = LocationGrid::new([4, 1, 1], [4.0, 1.0, 1.0]).unwrap();
        let s = delta_location_set(&[0.5, 0.3, 0.2, 0.0], 0.25, 0, &g, Metric::Spatial).unwrap();
        assert_eq!(s.members, vec![0, 1]);
        assert!((s.mass - 0.8).abs() < 1e-12);
        assert_eq!(s.surrogate, None);

        let s = delta_location_set(&[0.25; 4], 1e-6, 2, &g, Metric::Spatial).unwrap();
        assert_eq!(s.members.len(), 4);

        let s = delta_location_set(&[0.0, 0.0, 1.0, 0.0], 0.5, 2, &g, Metric::Spatial).unwrap();
        assert_eq!(s.members, vec![2]);
        assert_eq!(s.surrogate, None);
    }

    #[test]
    fn delta_set_surrogate_is_nearest_member() {
        let g = line_grid();
        let mut prior = vec![0.0; 8];
        prior[0] = 0.6;
        prior[5] = 0.3;
        prior[7] = 0.1;
        let s = delta_location_set(&prior, 0.15, 7, &g, Metric::Spatial).unwrap();
        assert_eq!(s.members, vec![0, 5]);
        assert_eq!(s.surrogate, Some(5));
        assert_eq!(s.anchor_for(&g, Metric::Spatial, 7), 5);
        assert_eq!(s.anchor_for(&g, Metric::Spatial, 0), 0);
    }

    #[test]
    fn delta_set_tie_break_by_index() {
        let g = LocationGrid::new([4, 1, 1], [4.0, 1.0, 1.0]).unwrap();
        let s = delta_location_set(&[0.25; 4], 0.5, 0, &g, Metric::Spatial).unwrap();
        assert_eq!(s.members, vec![0, 1]);
    }

    #[test]
    fn delta_set_rejections() {
        let g = LocationGrid::new([2, 1, 1], [2.0, 1.0, 1.0]).unwrap();
        assert!(matches!(
            delta_location_set(&[0.5, 0.4], 0.1, 0, &g, Metric::Spatial),
            Err(MobilityError::NotSimplex { .. })
        ));
        assert!(delta_location_set(&[0.5, 0.5], 0.0, 0, &g, Metric::Spatial).is_err());
        assert!(delta_location_set(&[0.5, 0.5], 1.0, 0, &g, Metric::Spatial).is_err());
    }

    fn brute_inference(post: &[f64], g: &LocationGrid) -> (usize, f64) {
        let mut best = (usize::MAX, f64::INFINITY);
        for c in 0..g.len() {
            let e: f64 = (0..g.len()).map(|i| post[i] * g.distance3(c, i).unwrap()).sum();
            if e < best.1 {
                best = (c, e);
            }
        }
        best
    }

    #[test]
    fn inference_examples() {
        let g = LocationGrid::new([4, 4, 4], [4.0; 3]).unwrap();
        for k in [0, 17, 63] {
            let mut p = vec![0.0; 64];
            p[k] = 1.0;
            assert_eq!(optimal_inference(&p, &g, Metric::Spatial), k);
        }
        let a = g.index_of(Lattice { x: 0, y: 0, z: 0 }).unwrap();
        let b = g.index_of(Lattice { x: 3, y: 3, z: 3 }).unwrap();
        let mut p = vec![0.0; 64];
        p[a] = 0.5;
        p[b] = 0.5;
        let (cell, cost) = optimal_guess(&p, &g, Metric::Spatial);
        let (bc, bcost) = brute_inference(&p, &g);
        assert_eq!(cell, bc);
        assert!((cost - bcost).abs() < 1e-12);
        p[a] = 0.9;
        p[b] = 0.1;
        assert_eq!(optimal_inference(&p, &g, Metric::Spatial), a);
    }
}
