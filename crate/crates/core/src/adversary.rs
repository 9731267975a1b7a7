//! The perturbation pipeline and the Bayesian attacker that watches it.
//!
//! Each timestamp the mechanism builds a [`StepModel`]: the δ-location set,
//! a budget per member, and for every member the exact law of what it would
//! release. The real location's anchor draws from its law. The attacker, who
//! knows the mechanism, scores every cell by the probability its own anchor
//! would have produced the observation, updates, guesses the posterior
//! median, and rolls the belief forward through `M`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::budget::{verify_w_dp, BudgetError, BudgetLedger, UserProfile};
use crate::grid::{HilbertOrder, LocationGrid, Metric};
use crate::mechanism::{
    pf_pmf, pf_sample_index, ExpMechanism, MechanismError, OutputDomain, PerturbationChannel,
};
use crate::mobility::{
    advance_prior, bayes_posterior, check_simplex, delta_location_set, nearest_member, optimal_guess,
    MobilityError, PossibleLocationSet, TransitionMatrix,
};
use crate::pls::{diameter, GuessDomain, PlsError, PlsSearch, PoolOrders, ProtectionLocationSet};

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error(transparent)]
    Pls(#[from] PlsError),
    #[error(transparent)]
    Mobility(#[from] MobilityError),
    #[error(transparent)]
    Mechanism(#[from] MechanismError),
    #[error(transparent)]
    Budget(#[from] BudgetError),
    #[error("invariant violated at t={t}: {what}")]
    Invariant { t: usize, what: String },
    #[error("no runs to aggregate")]
    EmptyRunSet,
}

/// Everything fixed about one simulated user.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub grid: LocationGrid,
    pub orders: Vec<HilbertOrder>,
    pub transition: TransitionMatrix,
    pub initial_prior: Vec<f64>,
    pub trajectory: Vec<usize>,
    pub profile: UserProfile,
}

/// Cells a protection set may draw from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlsPool {
    /// Cells with positive mechanism prior.
    #[default]
    Support,
    /// Every cell of the map.
    Map,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MechanismParams {
    pub eps_window: f64,
    pub e_m: f64,
    pub window: usize,
    pub delta: f64,
    pub n_possible: usize,
    pub eps_floor: f64,
    pub guess_domain: GuessDomain,
    pub output_domain: OutputDomain,
    pub pool: PlsPool,
}

impl MechanismParams {
    pub fn ledger(&self) -> Result<BudgetLedger, BudgetError> {
        BudgetLedger::with_window_budget(self.eps_window, self.window, self.n_possible, self.eps_floor)
    }
}

/// Prior the mechanism plans with.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PriorSource {
    /// The attacker's running prior.
    Tracked,
    /// The initial distribution at every timestamp.
    Static,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Perturbation {
    /// PLS + adaptive budget + Permute-and-Flip.
    PermuteFlip,
    /// Exponential mechanism over the δ-set at a flat `ε_w / w`.
    Exponential,
}

/// One configuration of the shared pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pipeline {
    /// Metric the mechanism plans with. The attacker always scores in 3D.
    pub metric: Metric,
    pub prior: PriorSource,
    pub perturbation: Perturbation,
    /// Released cells are moved onto the anchor's height layer.
    pub keep_layer: bool,
}

impl Pipeline {
    pub const STPM: Pipeline = Pipeline {
        metric: Metric::Spatial,
        prior: PriorSource::Tracked,
        perturbation: Perturbation::PermuteFlip,
        keep_layer: false,
    };
}

/// How one member of the δ-set releases.
#[derive(Debug, Clone)]
pub enum ReleaseRule {
    /// Nothing to mix with; the anchor itself goes out.
    Fixed(usize),
    Flip {
        channel: PerturbationChannel,
        /// Cell actually reported for each candidate.
        targets: Vec<usize>,
        pmf: Vec<f64>,
    },
    Exp(ExpMechanism),
}

impl ReleaseRule {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        match self {
            ReleaseRule::Fixed(c) => *c,
            ReleaseRule::Flip { channel, targets, .. } => targets[pf_sample_index(channel, rng)],
            ReleaseRule::Exp(m) => m.sample(rng),
        }
    }

    /// `f(x' | anchor)`.
    pub fn prob(&self, released: usize) -> f64 {
        match self {
            ReleaseRule::Fixed(c) => f64::from(u8::from(*c == released)),
            ReleaseRule::Flip { targets, pmf, .. } => {
                targets.iter().zip(pmf).filter(|(&t, _)| t == released).map(|(_, p)| p).sum()
            }
            ReleaseRule::Exp(m) => m.prob_of(released),
        }
    }

    /// Released cells with their probabilities, duplicates merged.
    pub fn support(&self) -> Vec<(usize, f64)> {
        let mut out: Vec<(usize, f64)> = Vec::new();
        let mut push = |c: usize, p: f64| match out.iter_mut().find(|(k, _)| *k == c) {
            Some(e) => e.1 += p,
            None => out.push((c, p)),
        };
        match self {
            ReleaseRule::Fixed(c) => push(*c, 1.0),
            ReleaseRule::Flip { targets, pmf, .. } => targets.iter().zip(pmf).for_each(|(&t, &p)| push(t, p)),
            ReleaseRule::Exp(m) => m.candidates.iter().zip(&m.pmf).for_each(|(&c, &p)| push(c, p)),
        }
        out
    }
}

/// The mechanism at one timestamp, before the real location is revealed.
#[derive(Debug, Clone)]
pub struct StepModel {
    pub metric: Metric,
    pub delta_set: PossibleLocationSet,
    /// Aligned with `delta_set.members`.
    pub rules: Vec<ReleaseRule>,
    pub eps: Vec<f64>,
    /// Protection set per member; `None` when no set was needed.
    pub protection: Vec<Option<ProtectionLocationSet>>,
    /// The window budget ran out; nothing is released.
    pub suppressed: bool,
}

impl StepModel {
    /// Position in the δ-set of the cell protected on behalf of `real`.
    pub fn anchor_index(&self, grid: &LocationGrid, real: usize) -> usize {
        let members = &self.delta_set.members;
        let a = if self.delta_set.contains(real) { real } else { nearest_member(grid, self.metric, members, real) };
        members.iter().position(|&m| m == a).expect("anchor is a member")
    }

    /// `f(x' | anchor(x))` for every cell `x` with positive `prior`.
    pub fn likelihood(&self, grid: &LocationGrid, prior: &[f64], released: usize) -> Vec<f64> {
        let per_member: Vec<f64> = self.rules.iter().map(|r| r.prob(released)).collect();
        prior
            .iter()
            .enumerate()
            .map(|(x, &p)| if p > 0.0 { per_member[self.anchor_index(grid, x)] } else { 0.0 })
            .collect()
    }
}

/// Builds the mechanism for one timestamp from the planning prior and the ledger.
pub fn step_model(
    sc: &Scenario,
    params: &MechanismParams,
    pipe: &Pipeline,
    mech_prior: &[f64],
    ledger: &BudgetLedger,
) -> Result<StepModel, SimError> {
    let grid = &sc.grid;
    let metric = pipe.metric;
    // The surrogate is resolved per cell through `anchor_index`; the seed cell here is irrelevant.
    let seed = mech_prior.iter().position(|&p| p > 0.0).unwrap_or(0);
    let delta_set = delta_location_set(mech_prior, params.delta, seed, grid, metric)?;
    let members = delta_set.members.clone();
    let n = members.len();

    if ledger.window_remaining() < ledger.eps_floor() {
        return Ok(StepModel {
            metric,
            delta_set,
            rules: members.iter().map(|&a| ReleaseRule::Fixed(a)).collect(),
            eps: vec![0.0; n],
            protection: vec![None; n],
            suppressed: true,
        });
    }

    let mut rules = Vec::with_capacity(n);
    let mut eps = Vec::with_capacity(n);
    let mut protection = Vec::with_capacity(n);

    match pipe.perturbation {
        Perturbation::Exponential => {
            let e = ledger.eps_initial().min(ledger.window_remaining());
            let sens = diameter(&members, grid, Metric::Spatial);
            for &a in &members {
                eps.push(e);
                protection.push(None);
                rules.push(if n == 1 {
                    ReleaseRule::Fixed(a)
                } else {
                    ReleaseRule::Exp(ExpMechanism::new(a, members.clone(), grid, Metric::Spatial, e, sens)?)
                });
            }
        }
        Perturbation::PermuteFlip => {
            let pool: Vec<bool> = match params.pool {
                PlsPool::Support => mech_prior.iter().map(|&p| p > 0.0).collect(),
                PlsPool::Map => vec![true; grid.len()],
            };
            let orders = PoolOrders::new(&sc.orders, &pool);
            let search = PlsSearch { grid, metric, domain: params.guess_domain };
            for &a in &members {
                let e = ledger.allocate(&sc.profile, mech_prior, grid, metric, a)?;
                eps.push(e);
                if n == 1 {
                    rules.push(ReleaseRule::Fixed(a));
                    protection.push(None);
                    continue;
                }
                let pls = search.find(a, mech_prior, e, params.e_m, &orders)?;
                let candidates: Vec<usize> = match params.output_domain {
                    OutputDomain::PossibleSet => members.iter().copied().filter(|&c| c != a).collect(),
                    OutputDomain::ProtectionSet => pls.members.iter().copied().filter(|&c| c != a).collect(),
                };
                let targets: Vec<usize> = if pipe.keep_layer {
                    candidates.iter().map(|&c| grid.with_layer_of(c, a)).collect()
                } else {
                    candidates.clone()
                };
                let channel = PerturbationChannel::new(a, candidates, grid, metric, e, pls.diameter)?;
                let pmf = pf_pmf(&channel);
                protection.push(Some(pls));
                rules.push(ReleaseRule::Flip { channel, targets, pmf });
            }
        }
    }
    Ok(StepModel { metric, delta_set, rules, eps, protection, suppressed: false })
}

/// One timestamp of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackStep {
    pub real: usize,
    pub anchor: usize,
    pub released: Option<usize>,
    pub inferred: usize,
    pub prior: Vec<f64>,
    pub posterior: Vec<f64>,
    /// Budget recorded in the ledger for this timestamp.
    pub eps: f64,
    pub pls_diameter: Option<f64>,
    pub delta_set_size: usize,
    /// `d₃(x, x̂)`.
    pub inference_error: f64,
    /// `d₃(x, x')` when something was released.
    pub perturbation: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackTrace {
    pub steps: Vec<AttackStep>,
    pub ledger: BudgetLedger,
}

impl AttackTrace {
    /// Mean attacker error over timestamps.
    pub fn privacy(&self) -> f64 {
        self.steps.iter().map(|s| s.inference_error).sum::<f64>() / self.steps.len() as f64
    }

    /// Mean perturbation distance over released timestamps; 0 when nothing went out.
    pub fn qos_loss(&self) -> f64 {
        mean_or_zero(self.steps.iter().filter_map(|s| s.perturbation))
    }

    pub fn suppressed(&self) -> usize {
        self.steps.iter().filter(|s| s.released.is_none()).count()
    }

    pub fn mean_eps(&self) -> f64 {
        mean_or_zero(self.steps.iter().map(|s| s.eps))
    }

    pub fn mean_pls_diameter(&self) -> f64 {
        mean_or_zero(self.steps.iter().filter_map(|s| s.pls_diameter))
    }
}

fn mean_or_zero(it: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Runs the pipeline along `sc.trajectory`.
pub fn simulate<R: Rng + ?Sized>(
    sc: &Scenario,
    params: &MechanismParams,
    pipe: &Pipeline,
    rng: &mut R,
) -> Result<AttackTrace, SimError> {
    let grid = &sc.grid;
    let mut ledger = params.ledger()?;
    let mut prior = sc.initial_prior.clone();
    let mut steps = Vec::with_capacity(sc.trajectory.len());

    for (t, &real) in sc.trajectory.iter().enumerate() {
        let mech_prior = match pipe.prior {
            PriorSource::Tracked => &prior,
            PriorSource::Static => &sc.initial_prior,
        };
        let model = step_model(sc, params, pipe, mech_prior, &ledger)?;
        let k = model.anchor_index(grid, real);
        let anchor = model.delta_set.members[k];

        let (released, posterior) = if model.suppressed {
            ledger.commit_suppressed();
            (None, prior.clone())
        } else {
            ledger.commit(model.eps[k]);
            let x = model.rules[k].sample(rng);
            let lik = model.likelihood(grid, &prior, x);
            (Some(x), bayes_posterior(&prior, &lik)?)
        };
        if !verify_w_dp(&ledger) {
            return Err(SimError::Invariant { t, what: format!("window sums exceed eps_w: {:?}", ledger.history()) });
        }
        check_simplex(&posterior).map_err(|e| SimError::Invariant { t, what: e.to_string() })?;

        let (inferred, _) = optimal_guess(&posterior, grid, Metric::Spatial);
        let next = advance_prior(&posterior, &sc.transition)?;
        steps.push(AttackStep {
            real,
            anchor,
            released,
            inferred,
            prior: std::mem::replace(&mut prior, next),
            posterior,
            eps: *ledger.history().last().unwrap(),
            pls_diameter: model.protection[k].as_ref().map(|p| p.diameter),
            delta_set_size: model.delta_set.members.len(),
            inference_error: grid.dist(Metric::Spatial, real, inferred),
            perturbation: released.map(|x| grid.dist(Metric::Spatial, real, x)),
        });
    }
    Ok(AttackTrace { steps, ledger })
}

/// Mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub std_err: f64,
    pub n: usize,
}

impl Estimate {
    pub fn from_samples(xs: &[f64]) -> Result<Self, SimError> {
        if xs.is_empty() {
            return Err(SimError::EmptyRunSet);
        }
        let n = xs.len();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let std_err = if n < 2 {
            0.0
        } else {
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        };
        Ok(Self { mean, std_err, n })
    }
}

/// `min_x̂ Σ posterior(x)·d(x̂, x)`.
pub fn expected_inference_error(posterior: &[f64], grid: &LocationGrid, metric: Metric) -> f64 {
    optimal_guess(posterior, grid, metric).1
}

/// Trajectory privacy `p` across runs.
pub fn trajectory_privacy(runs: &[AttackTrace]) -> Result<Estimate, SimError> {
    Estimate::from_samples(&runs.iter().map(AttackTrace::privacy).collect::<Vec<_>>())
}

/// QoS loss `q` across runs.
pub fn qos_loss(runs: &[AttackTrace]) -> Result<Estimate, SimError> {
    Estimate::from_samples(&runs.iter().map(AttackTrace::qos_loss).collect::<Vec<_>>())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::budget::CharacteristicScope;
    use crate::grid::hilbert_orders;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn profile(n: usize) -> UserProfile {
        UserProfile {
            sojourn: vec![0.5; n],
            visit_freq: vec![0.5; n],
            semantic: vec![0.5; n],
            i_user: 0.5,
            lambda_user: 0.5,
            gamma: [0.3, 0.3, 0.4],
            alpha: [0.002, 0.002],
            scope: CharacteristicScope::Semantic,
        }
    }

    fn params() -> MechanismParams {
        MechanismParams {
            eps_window: 2.0,
            e_m: 0.2,
            window: 2,
            delta: 0.05,
            n_possible: 8,
            eps_floor: 0.01,
            guess_domain: GuessDomain::Map,
            output_domain: OutputDomain::PossibleSet,
            pool: PlsPool::Support,
        }
    }

    fn scenario(prior: Vec<f64>, m: TransitionMatrix, trajectory: Vec<usize>) -> Scenario {
        let grid = LocationGrid::new([2, 2, 2], [2.0, 2.0, 2.0]).unwrap();
        Scenario { orders: hilbert_orders(&grid), profile: profile(grid.len()), grid, transition: m, initial_prior: prior, trajectory }
    }

    #[test]
    fn estimates() {
        let e = Estimate::from_samples(&[1.0, 3.0]).unwrap();
        assert_eq!(e.mean, 2.0);
        assert!((e.std_err - 1.0).abs() < 1e-12);
        assert!(matches!(Estimate::from_samples(&[]), Err(SimError::EmptyRunSet)));
    }

    #[test]
    fn expected_error_examples() {
        let g = LocationGrid::new([8, 1, 1], [8.0, 1.0, 1.0]).unwrap();
        let mut p = vec![0.0; 8];
        p[2] = 1.0;
        assert_eq!(expected_inference_error(&p, &g, Metric::Spatial), 0.0);
        let mut p = vec![0.0; 8];
        p[0] = 0.9;
        p[7] = 0.1;
        // Cell 0 costs 0.7, every other cell at least as much.
        assert!((expected_inference_error(&p, &g, Metric::Spatial) - 0.7).abs() < 1e-12);
    }

    #[test]
    fn point_mass_prior_is_deterministic() {
        let mut prior = vec![0.0; 8];
        prior[5] = 1.0;
        let sc = scenario(prior, TransitionMatrix::identity(8), vec![5, 5, 5]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let tr = simulate(&sc, &params(), &Pipeline::STPM, &mut rng).unwrap();
        for s in &tr.steps {
            assert_eq!(s.released, Some(5));
            assert_eq!(s.inferred, 5);
            assert_eq!(s.delta_set_size, 1);
        }
        assert_eq!(tr.privacy(), 0.0);
        assert_eq!(tr.qos_loss(), 0.0);
        assert!(verify_w_dp(&tr.ledger));
    }

    #[test]
    fn beliefs_follow_bayes_and_markov() {
        let prior = vec![0.125; 8];
        let rows: Vec<Vec<f64>> = (0..8)
            .map(|i| (0..8).map(|j| if i == j { 0.5 } else { 0.5 / 7.0 }).collect())
            .collect();
        let m = TransitionMatrix::from_rows(rows).unwrap();
        let sc = scenario(prior, m.clone(), vec![0, 1, 3]);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = params();
        let tr = simulate(&sc, &p, &Pipeline::STPM, &mut rng).unwrap();
        let mut ledger = p.ledger().unwrap();
        for (t, s) in tr.steps.iter().enumerate() {
            let model = step_model(&sc, &p, &Pipeline::STPM, &s.prior, &ledger).unwrap();
            let lik = model.likelihood(&sc.grid, &s.prior, s.released.unwrap());
            let post = bayes_posterior(&s.prior, &lik).unwrap();
            for (a, b) in post.iter().zip(&s.posterior) {
                assert!((a - b).abs() < 1e-12);
            }
            if t + 1 < tr.steps.len() {
                assert_eq!(advance_prior(&s.posterior, &m).unwrap(), tr.steps[t + 1].prior);
            }
            ledger.commit(s.eps);
        }
        assert_eq!(tr.ledger.history(), ledger.history());
    }

    #[test]
    fn same_seed_same_trace() {
        let sc = scenario(vec![0.125; 8], TransitionMatrix::identity(8), vec![0, 7, 3]);
        let run = |seed| simulate(&sc, &params(), &Pipeline::STPM, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        assert_eq!(run(4), run(4));
    }

    #[test]
    fn real_location_never_released() {
        let sc = scenario(vec![0.125; 8], TransitionMatrix::identity(8), vec![2; 4]);
        let mut p = params();
        p.window = 4;
        p.eps_window = 2.0;
        for seed in 0..30 {
            let tr = simulate(&sc, &p, &Pipeline::STPM, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            assert!(tr.steps.iter().all(|s| s.released != Some(s.anchor)));
        }
    }
}
