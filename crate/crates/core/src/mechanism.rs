//! Permute-and-Flip geo-perturbation.
//!
//! The utility of releasing `x'` for a real cell `x` is `−d(x, x')`. PF walks a
//! random permutation of the candidates and accepts each one with probability
//! `exp(ε·(u − u*)/(2Δu))`; the best candidate is always accepted.
//!
//! Besides the sampler there are two exact distributions. `pf_exact_pmf`
//! enumerates permutations and is only for small candidate sets. `pf_pmf` uses
//! the identity
//!
//! `P(r) = p_r · ∫₀¹ ∏_{s≠r} (1 − t·p_s) dt`
//!
//! (give every candidate an independent uniform arrival time; `r` wins when it
//! accepts and everyone earlier rejects). The integrand is a polynomial of
//! degree `n − 1`, so Gauss–Legendre quadrature with `⌈n/2⌉ + 1` nodes is exact.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::grid::{LocationGrid, Metric};

/// Largest candidate set `pf_exact_pmf` will enumerate.
pub const MAX_ENUMERABLE: usize = 8;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MechanismError {
    #[error("candidate set is empty")]
    NoCandidates,
    #[error("anchor {0} may not be among its own candidates")]
    AnchorIsCandidate(usize),
    #[error("sensitivity {0} must be positive and finite")]
    BadSensitivity(f64),
    #[error("epsilon {0} must be nonnegative and finite")]
    BadEpsilon(f64),
    #[error("{n} candidates exceed the enumeration limit of {max}")]
    TooManyCandidates { n: usize, max: usize },
}

/// Which set the released location is drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputDomain {
    /// The possible-location set minus the anchor.
    #[default]
    PossibleSet,
    /// The anchor's protection set minus the anchor.
    ProtectionSet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationChannel {
    pub anchor: usize,
    pub candidates: Vec<usize>,
    /// `d(anchor, candidate)`; utilities are the negatives.
    pub distances: Vec<f64>,
    /// `max u` over candidates, i.e. minus the smallest candidate distance.
    pub u_star: f64,
    pub sensitivity: f64,
    pub epsilon: f64,
}

impl PerturbationChannel {
    pub fn new(
        anchor: usize,
        candidates: Vec<usize>,
        grid: &LocationGrid,
        metric: Metric,
        epsilon: f64,
        sensitivity: f64,
    ) -> Result<Self, MechanismError> {
        if candidates.is_empty() {
            return Err(MechanismError::NoCandidates);
        }
        if candidates.contains(&anchor) {
            return Err(MechanismError::AnchorIsCandidate(anchor));
        }
        let distances = candidates.iter().map(|&c| grid.dist(metric, anchor, c)).collect();
        Self::from_distances(anchor, candidates, distances, epsilon, sensitivity)
    }

    /// Channel over abstract candidates with given distances to the anchor.
    pub fn from_distances(
        anchor: usize,
        candidates: Vec<usize>,
        distances: Vec<f64>,
        epsilon: f64,
        sensitivity: f64,
    ) -> Result<Self, MechanismError> {
        if candidates.is_empty() {
            return Err(MechanismError::NoCandidates);
        }
        assert_eq!(candidates.len(), distances.len());
        if !(sensitivity > 0.0 && sensitivity.is_finite()) {
            return Err(MechanismError::BadSensitivity(sensitivity));
        }
        if !(epsilon >= 0.0 && epsilon.is_finite()) {
            return Err(MechanismError::BadEpsilon(epsilon));
        }
        let d_min = distances.iter().copied().fold(f64::INFINITY, f64::min);
        Ok(Self { anchor, candidates, distances, u_star: -d_min, sensitivity, epsilon })
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    /// Flip probability of candidate `k`.
    pub fn acceptance(&self, k: usize) -> f64 {
        let gap = -self.distances[k] - self.u_star;
        debug_assert!(gap <= 0.0, "utility above u*");
        (self.epsilon * gap / (2.0 * self.sensitivity)).exp().clamp(0.0, 1.0)
    }

    fn acceptances(&self) -> Vec<f64> {
        (0..self.len()).map(|k| self.acceptance(k)).collect()
    }

    /// Position of `cell` in the candidate list.
    pub fn position(&self, cell: usize) -> Option<usize> {
        self.candidates.iter().position(|&c| c == cell)
    }
}

/// One Permute-and-Flip draw; returns the released cell.
pub fn pf_sample<R: Rng + ?Sized>(channel: &PerturbationChannel, rng: &mut R) -> usize {
    channel.candidates[pf_sample_index(channel, rng)]
}

/// Like [`pf_sample`] but returns the candidate position.
pub fn pf_sample_index<R: Rng + ?Sized>(channel: &PerturbationChannel, rng: &mut R) -> usize {
    let mut order: Vec<usize> = (0..channel.len()).collect();
    order.shuffle(rng);
    for k in order {
        let p = channel.acceptance(k);
        if p >= 1.0 || rng.gen::<f64>() < p {
            return k;
        }
    }
    unreachable!("the top candidate always accepts")
}

/// Selection distribution by enumerating every permutation.
pub fn pf_exact_pmf(channel: &PerturbationChannel) -> Result<Vec<f64>, MechanismError> {
    let n = channel.len();
    if n > MAX_ENUMERABLE {
        return Err(MechanismError::TooManyCandidates { n, max: MAX_ENUMERABLE });
    }
    let acc = channel.acceptances();
    let mut pmf = vec![0.0; n];
    let mut perm: Vec<usize> = (0..n).collect();
    let mut total_perms = 0u64;
    // Heap's algorithm; each permutation contributes its first-acceptance distribution.
    let mut c = vec![0usize; n];
    let mut visit = |perm: &[usize], pmf: &mut [f64]| {
        let mut reach = 1.0;
        for &k in perm {
            pmf[k] += reach * acc[k];
            reach *= 1.0 - acc[k];
        }
        total_perms += 1;
    };
    visit(&perm, &mut pmf);
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            visit(&perm, &mut pmf);
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    let scale = 1.0 / total_perms as f64;
    pmf.iter_mut().for_each(|p| *p *= scale);
    Ok(pmf)
}

/// Exact selection distribution for any candidate count.
pub fn pf_pmf(channel: &PerturbationChannel) -> Vec<f64> {
    let acc = channel.acceptances();
    let n = acc.len();
    if n == 1 {
        return vec![1.0];
    }
    let (nodes, weights) = gauss_legendre_unit(n / 2 + 1);
    let mut pmf = vec![0.0; n];
    let mut prefix = vec![1.0; n + 1];
    let mut suffix = vec![1.0; n + 1];
    for (&t, &w) in nodes.iter().zip(&weights) {
        for k in 0..n {
            prefix[k + 1] = prefix[k] * (1.0 - t * acc[k]);
        }
        for k in (0..n).rev() {
            suffix[k] = suffix[k + 1] * (1.0 - t * acc[k]);
        }
        for k in 0..n {
            pmf[k] += w * prefix[k] * suffix[k + 1];
        }
    }
    for (p, a) in pmf.iter_mut().zip(&acc) {
        *p *= a;
    }
    // Quadrature is exact; this only removes rounding drift.
    let s: f64 = pmf.iter().sum();
    pmf.iter_mut().for_each(|p| *p /= s);
    pmf
}

/// Gauss–Legendre nodes and weights mapped to `[0, 1]`.
fn gauss_legendre_unit(m: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = Vec::with_capacity(m);
    let mut weights = Vec::with_capacity(m);
    for i in 0..m {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (m as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=m {
                let kf = k as f64;
                let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
                p0 = p1;
                p1 = p2;
            }
            let pm = if m == 1 { x } else { p1 };
            let pm1 = if m == 1 { 1.0 } else { p0 };
            dp = m as f64 * (x * pm - pm1) / (x * x - 1.0);
            let step = pm / dp;
            x -= step;
            if step.abs() < 1e-15 {
                break;
            }
        }
        nodes.push(0.5 * (1.0 - x));
        weights.push(1.0 / ((1.0 - x * x) * dp * dp));
    }
    (nodes, weights)
}

/// Distance bound that PF draws exceed with probability at most `ψ`, as printed.
///
/// `max_d` is the term subtracted inside the bracket; the bracket mixes a
/// length with logarithms, so callers pick its value explicitly.
pub fn pf_tail_bound(d: f64, epsilon: f64, n_chi: usize, n_phi: usize, psi: f64, max_d: f64) -> f64 {
    (2.0 * d / epsilon)
        * ((n_chi as f64).ln() - epsilon / 2.0 - (n_phi as f64).ln() - psi.ln() - max_d)
}

/// Exponential mechanism over cells with utility `−d(anchor, ·)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpMechanism {
    pub anchor: usize,
    pub candidates: Vec<usize>,
    pub pmf: Vec<f64>,
}

impl ExpMechanism {
    pub fn new(
        anchor: usize,
        candidates: Vec<usize>,
        grid: &LocationGrid,
        metric: Metric,
        epsilon: f64,
        sensitivity: f64,
    ) -> Result<Self, MechanismError> {
        let distances: Vec<f64> = candidates.iter().map(|&c| grid.dist(metric, anchor, c)).collect();
        let pmf = exp_mech_pmf(&distances, epsilon, sensitivity)?;
        Ok(Self { anchor, candidates, pmf })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        self.candidates[sample_pmf(&self.pmf, rng)]
    }

    pub fn prob_of(&self, cell: usize) -> f64 {
        self.candidates.iter().position(|&c| c == cell).map_or(0.0, |k| self.pmf[k])
    }
}

/// Softmax of `ε·(−d)/(2·sensitivity)`.
pub fn exp_mech_pmf(distances: &[f64], epsilon: f64, sensitivity: f64) -> Result<Vec<f64>, MechanismError> {
    if distances.is_empty() {
        return Err(MechanismError::NoCandidates);
    }
    if !(sensitivity > 0.0 && sensitivity.is_finite()) {
        return Err(MechanismError::BadSensitivity(sensitivity));
    }
    if !(epsilon >= 0.0 && epsilon.is_finite()) {
        return Err(MechanismError::BadEpsilon(epsilon));
    }
    let d_min = distances.iter().copied().fold(f64::INFINITY, f64::min);
    let mut w: Vec<f64> =
        distances.iter().map(|d| (-epsilon * (d - d_min) / (2.0 * sensitivity)).exp()).collect();
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= s);
    Ok(w)
}

/// One draw from the exponential mechanism; returns the released cell.
pub fn exp_mech_sample<R: Rng + ?Sized>(
    anchor: usize,
    candidates: &[usize],
    grid: &LocationGrid,
    metric: Metric,
    epsilon: f64,
    sensitivity: f64,
    rng: &mut R,
) -> Result<usize, MechanismError> {
    Ok(ExpMechanism::new(anchor, candidates.to_vec(), grid, metric, epsilon, sensitivity)?.sample(rng))
}

/// Inverse-CDF draw of an index from a probability vector.
pub fn sample_pmf<R: Rng + ?Sized>(pmf: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (k, p) in pmf.iter().enumerate() {
        acc += p;
        if u < acc {
            return k;
        }
    }
    // Rounding left the total a hair under one; fall back to the last positive entry.
    pmf.iter().rposition(|&p| p > 0.0).unwrap_or(pmf.len() - 1)
}
