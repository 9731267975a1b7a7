//! Scenario generation, parameter sweeps and result files.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adversary::{AttackTrace, Estimate, MechanismParams, PlsPool, Scenario, SimError};
use crate::baselines::{MechanismStrategy, Strategy};
use crate::budget::{verify_w_dp, CharacteristicScope, UserProfile};
use crate::grid::{hilbert_orders_n, GridError, LocationGrid, Metric, CUBE_ROTATIONS};
use crate::mechanism::OutputDomain;
use crate::mobility::{estimate_transition_matrix, sample_path, MobilityError};
use crate::pls::GuessDomain;

/// Environment variable that replaces the configured base seed.
pub const SEED_ENV: &str = "GEOPERTURB_SEED";

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("cannot read config {path}: {reason}")]
    ConfigFile { path: PathBuf, reason: String },
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Mobility(#[from] MobilityError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("reachability graph stayed disconnected after {0} attempts")]
    Disconnected(usize),
    #[error("no rows to write")]
    EmptyRows,
    #[error("cannot write {path}: {reason}")]
    Output { path: PathBuf, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub dims: [usize; 3],
    pub extent: [f64; 3],
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { dims: [8, 8, 8], extent: [10.0, 10.0, 10.0] }
    }
}

/// Synthetic mobility history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WalkConfig {
    /// Minimum transitions in the synthetic history; the walk runs on until it has covered every chosen cell.
    pub steps: usize,
    /// Chance of staying put at each step.
    pub stay_prob: f64,
    /// Reachability radius in units of the smallest cell pitch.
    pub neighbor_radius: f64,
    pub max_retries: usize,
}

impl Default for WalkConfig {
    fn default() -> Self {
        Self { steps: 2000, stay_prob: 0.3, neighbor_radius: 2.5, max_retries: 32 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub eps_w: Vec<f64>,
    pub e_m: Vec<f64>,
    pub w: Vec<usize>,
    pub delta: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self { eps_w: vec![1.0, 2.0, 3.0, 4.0, 5.0], e_m: vec![0.2, 0.4, 0.6], w: vec![4], delta: vec![0.1] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProfileConfig {
    pub gamma: [f64; 3],
    pub alpha: [f64; 2],
    pub lambda_user: f64,
    pub i_user: f64,
    /// Semantic sensitivity levels; each cell draws one uniformly.
    pub semantic_levels: Vec<f64>,
    pub eps_floor: f64,
    pub scope: CharacteristicScope,
}

impl Default for ProfileConfig {
    fn default() -> Self {
        Self {
            gamma: [0.3, 0.3, 0.4],
            alpha: [0.002, 0.002],
            lambda_user: 0.5,
            i_user: 0.5,
            semantic_levels: vec![0.2, 0.5, 1.0],
            eps_floor: 0.01,
            scope: CharacteristicScope::Semantic,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MechanismConfig {
    pub rotations: usize,
    pub guess_domain: GuessDomain,
    pub output_domain: OutputDomain,
    pub pool: PlsPool,
}

impl Default for MechanismConfig {
    fn default() -> Self {
        Self {
            rotations: CUBE_ROTATIONS,
            guess_domain: GuessDomain::Map,
            output_domain: OutputDomain::PossibleSet,
            pool: PlsPool::Support,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub grid: GridConfig,
    pub n_locations: usize,
    pub trajectory_length: usize,
    pub walk: WalkConfig,
    pub sweep: SweepConfig,
    pub profile: ProfileConfig,
    pub mechanism: MechanismConfig,
    pub strategies: Vec<Strategy>,
    pub base_seed: u64,
    pub seed_count: usize,
    /// Mechanism runs per seed; a row reports their average.
    pub replicates: usize,
    /// Allows `w ≥ T`: the whole trajectory then sits in one window.
    pub single_window: bool,
    pub output: PathBuf,
    /// Worker threads; 0 lets rayon decide.
    pub threads: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            grid: GridConfig::default(),
            n_locations: 50,
            trajectory_length: 5,
            walk: WalkConfig::default(),
            sweep: SweepConfig::default(),
            profile: ProfileConfig::default(),
            mechanism: MechanismConfig::default(),
            strategies: vec![Strategy::Stpm3d],
            base_seed: 0,
            seed_count: 20,
            replicates: 10,
            single_window: false,
            output: PathBuf::from("results.csv"),
            threads: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, ExperimentError> {
        serde_json::from_str(text).map_err(|e| ExperimentError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = fs::read_to_string(path)
            .map_err(|e| ExperimentError::ConfigFile { path: path.to_owned(), reason: e.to_string() })?;
        Self::from_json(&text)
    }

    /// Replaces the base seed from [`SEED_ENV`] when set.
    pub fn apply_seed_env(&mut self) -> Result<(), ExperimentError> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.base_seed =
                v.trim().parse().map_err(|_| ExperimentError::Config(format!("{SEED_ENV}={v} is not an integer")))?;
        }
        Ok(())
    }

    pub fn seeds(&self) -> Vec<u64> {
        (0..self.seed_count as u64).map(|i| self.base_seed.wrapping_add(i)).collect()
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: String| Err(ExperimentError::Config(m));
        let grid = LocationGrid::new(self.grid.dims, self.grid.extent)?;
        if self.n_locations < 2 || self.n_locations > grid.len() {
            return bad(format!("n_locations {} must lie in [2, {}]", self.n_locations, grid.len()));
        }
        if self.trajectory_length == 0 {
            return bad("trajectory_length must be positive".into());
        }
        let s = &self.sweep;
        if s.eps_w.is_empty() || s.e_m.is_empty() || s.w.is_empty() || s.delta.is_empty() {
            return bad("every sweep list needs at least one value".into());
        }
        if s.eps_w.iter().chain(&s.e_m).any(|v| !(*v > 0.0 && v.is_finite())) {
            return bad("eps_w and e_m values must be positive".into());
        }
        if s.delta.iter().any(|d| !(*d > 0.0 && *d < 1.0)) {
            return bad("delta values must lie in (0, 1)".into());
        }
        for &w in &s.w {
            if w == 0 {
                return bad("w must be positive".into());
            }
            if w >= self.trajectory_length && !self.single_window {
                return bad(format!(
                    "w = {w} must be smaller than the trajectory length {} (set single_window to allow it)",
                    self.trajectory_length
                ));
            }
            for &e in &s.eps_w {
                if self.profile.eps_floor > e {
                    return bad(format!("eps_floor {} exceeds eps_w {e}", self.profile.eps_floor));
                }
            }
        }
        if !(0.0..1.0).contains(&self.walk.stay_prob) || self.walk.steps == 0 || !(self.walk.neighbor_radius >= 1.0) {
            return bad("walk needs steps > 0, stay_prob in [0,1) and neighbor_radius >= 1".into());
        }
        if self.profile.semantic_levels.is_empty() {
            return bad("semantic_levels must not be empty".into());
        }
        if self.mechanism.rotations == 0 || self.mechanism.rotations > CUBE_ROTATIONS {
            return bad(format!("rotations must lie in [1, {CUBE_ROTATIONS}]"));
        }
        if self.strategies.is_empty() || self.seed_count == 0 || self.replicates == 0 {
            return bad("need at least one strategy, seed and replicate".into());
        }
        self.profile_for(&vec![0.0; 1], &[0.0], &[0.0]).validate().map_err(|e| ExperimentError::Config(e.to_string()))?;
        Ok(())
    }

    fn profile_for(&self, sojourn: &[f64], visits: &[f64], semantic: &[f64]) -> UserProfile {
        let p = &self.profile;
        UserProfile {
            sojourn: sojourn.to_vec(),
            visit_freq: visits.to_vec(),
            semantic: semantic.to_vec(),
            i_user: p.i_user,
            lambda_user: p.lambda_user,
            gamma: p.gamma,
            alpha: p.alpha,
            scope: p.scope,
        }
    }

    pub fn params(&self, point: &SweepPoint) -> MechanismParams {
        MechanismParams {
            eps_window: point.eps_w,
            e_m: point.e_m,
            window: point.w,
            delta: point.delta,
            n_possible: self.n_locations,
            eps_floor: self.profile.eps_floor,
            guess_domain: self.mechanism.guess_domain,
            output_domain: self.mechanism.output_domain,
            pool: self.mechanism.pool,
        }
    }

    /// SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}

/// Builds one synthetic user. Deterministic in `(config, seed)`.
pub fn generate_scenario(config: &ExperimentConfig, seed: u64) -> Result<Scenario, ExperimentError> {
    let grid = LocationGrid::new(config.grid.dims, config.grid.extent)?;
    let n = grid.len();
    let pitch = grid.pitch().into_iter().fold(f64::INFINITY, f64::min);
    let radius = config.walk.neighbor_radius * pitch * (1.0 + 1e-9);

    for attempt in 0..config.walk.max_retries {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(attempt as u64);
        let mut chosen = sample(&mut rng, n, config.n_locations).into_vec();
        chosen.sort_unstable();

        // Neighbours by position in `chosen`.
        let neighbors: Vec<Vec<usize>> = chosen
            .iter()
            .map(|&a| (0..chosen.len()).filter(|&k| chosen[k] != a && grid.dist(Metric::Spatial, a, chosen[k]) <= radius).collect())
            .collect();
        if !connected(&neighbors) {
            continue;
        }

        let mut counts = vec![vec![0.0; n]; n];
        let mut reach = vec![vec![false; n]; n];
        for (k, &a) in chosen.iter().enumerate() {
            reach[a][a] = true;
            for &b in &neighbors[k] {
                reach[a][chosen[b]] = true;
            }
        }
        let mut visits = vec![0.0; n];
        let mut stays = vec![0.0; n];
        let mut at = rng.gen_range(0..chosen.len());
        visits[chosen[at]] += 1.0;
        // Keep walking past `steps` until every chosen cell has been seen.
        let mut unseen = chosen.len() - 1;
        let mut taken = 0usize;
        while taken < config.walk.steps || unseen > 0 {
            taken += 1;
            let nb = &neighbors[at];
            let next = if rng.gen::<f64>() < config.walk.stay_prob { at } else { nb[rng.gen_range(0..nb.len())] };
            let (a, b) = (chosen[at], chosen[next]);
            counts[a][b] += 1.0;
            if a == b {
                stays[a] += 1.0;
            }
            at = next;
            if visits[b] == 0.0 {
                unseen -= 1;
            }
            visits[b] += 1.0;
        }
        let transition = estimate_transition_matrix(&counts, &reach)?;
        let total: f64 = visits.iter().sum();
        let initial_prior: Vec<f64> = visits.iter().map(|v| v / total).collect();
        let max_of = |v: &[f64]| v.iter().copied().fold(0.0, f64::max);
        let (max_v, max_s) = (max_of(&visits), max_of(&stays));
        let visit_freq: Vec<f64> = visits.iter().map(|v| v / max_v).collect();
        let sojourn: Vec<f64> = stays.iter().map(|s| if max_s > 0.0 { s / max_s } else { 0.0 }).collect();
        let levels = &config.profile.semantic_levels;
        let semantic: Vec<f64> = (0..n).map(|_| levels[rng.gen_range(0..levels.len())]).collect();
        let trajectory = sample_path(&initial_prior, &transition, config.trajectory_length, &mut rng)?;
        let orders = hilbert_orders_n(&grid, config.mechanism.rotations)?;
        return Ok(Scenario {
            profile: config.profile_for(&sojourn, &visit_freq, &semantic),
            grid,
            orders,
            transition,
            initial_prior,
            trajectory,
        });
    }
    Err(ExperimentError::Disconnected(config.walk.max_retries))
}

fn connected(adj: &[Vec<usize>]) -> bool {
    if adj.is_empty() {
        return true;
    }
    let mut seen = vec![false; adj.len()];
    let mut stack = vec![0];
    seen[0] = true;
    while let Some(i) = stack.pop() {
        for &j in &adj[i] {
            if !seen[j] {
                seen[j] = true;
                stack.push(j);
            }
        }
    }
    seen.into_iter().all(|s| s)
}

/// A hash of the parts of a scenario the pipeline reads.
pub fn scenario_digest(sc: &Scenario) -> String {
    let mut h = Sha256::new();
    for v in [&sc.initial_prior, &sc.profile.sojourn, &sc.profile.visit_freq, &sc.profile.semantic] {
        for x in v.iter() {
            h.update(x.to_le_bytes());
        }
    }
    for i in 0..sc.transition.len() {
        for x in sc.transition.row(i) {
            h.update(x.to_le_bytes());
        }
    }
    for &c in &sc.trajectory {
        h.update((c as u64).to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// One combination of swept values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub eps_w: f64,
    pub e_m: f64,
    pub w: usize,
    pub delta: f64,
}

impl SweepConfig {
    /// Cartesian product in `eps_w, e_m, w, delta` nesting order.
    pub fn points(&self) -> Vec<SweepPoint> {
        let mut out = Vec::new();
        for &eps_w in &self.eps_w {
            for &e_m in &self.e_m {
                for &w in &self.w {
                    for &delta in &self.delta {
                        out.push(SweepPoint { eps_w, e_m, w, delta });
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub strategy: Strategy,
    pub seed: u64,
    pub eps_w: f64,
    pub e_m: f64,
    pub w: usize,
    pub delta: f64,
    pub p: Option<f64>,
    pub q: Option<f64>,
    pub mean_pls_diameter: Option<f64>,
    pub mean_eps: Option<f64>,
    pub suppressed: usize,
    /// Every replicate ledger re-checked against the window cap; empty for aborted rows.
    pub w_dp: Option<bool>,
    /// `ok`, or the reason the run was aborted.
    pub status: String,
}

impl ResultRow {
    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }

    pub fn point(&self) -> SweepPoint {
        SweepPoint { eps_w: self.eps_w, e_m: self.e_m, w: self.w, delta: self.delta }
    }

    fn from_runs(strategy: Strategy, seed: u64, pt: &SweepPoint, runs: Result<Vec<AttackTrace>, SimError>) -> Self {
        let base = |status: String| ResultRow {
            strategy,
            seed,
            eps_w: pt.eps_w,
            e_m: pt.e_m,
            w: pt.w,
            delta: pt.delta,
            p: None,
            q: None,
            mean_pls_diameter: None,
            mean_eps: None,
            suppressed: 0,
            w_dp: None,
            status,
        };
        match runs {
            Ok(trs) => {
                let avg = |f: fn(&AttackTrace) -> f64| trs.iter().map(f).sum::<f64>() / trs.len() as f64;
                ResultRow {
                    p: Some(avg(AttackTrace::privacy)),
                    q: Some(avg(AttackTrace::qos_loss)),
                    mean_pls_diameter: Some(avg(AttackTrace::mean_pls_diameter)),
                    mean_eps: Some(avg(AttackTrace::mean_eps)),
                    suppressed: trs.iter().map(AttackTrace::suppressed).sum(),
                    w_dp: Some(trs.iter().all(|t| verify_w_dp(&t.ledger))),
                    ..base("ok".into())
                }
            }
            Err(e) => base(e.to_string()),
        }
    }
}

/// Mechanism randomness for a seed, shared by every strategy and sweep point.
pub fn mechanism_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    rng
}

/// Runs every sweep point × strategy × seed. Rows come back in that nesting order.
pub fn run_sweep(config: &ExperimentConfig) -> Result<Vec<ResultRow>, ExperimentError> {
    config.validate()?;
    let seeds = config.seeds();
    let scenarios: Vec<Scenario> =
        seeds.par_iter().map(|&s| generate_scenario(config, s)).collect::<Result<_, _>>()?;
    let mut jobs = Vec::new();
    for pt in config.sweep.points() {
        for &strategy in &config.strategies {
            for k in 0..seeds.len() {
                jobs.push((pt, strategy, k));
            }
        }
    }
    let run = || {
        jobs.par_iter()
            .map(|&(pt, strategy, k)| {
                let m = MechanismStrategy { strategy, params: config.params(&pt) };
                let mut rng = mechanism_rng(seeds[k]);
                let traces = (0..config.replicates).map(|_| m.run(&scenarios[k], &mut rng)).collect();
                ResultRow::from_runs(strategy, seeds[k], &pt, traces)
            })
            .collect::<Vec<_>>()
    };
    let rows = if config.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(config.threads)
            .build()
            .map_err(|e| ExperimentError::Config(e.to_string()))?
            .install(run)
    } else {
        run()
    };
    Ok(rows)
}

/// Seed-averaged view of one (strategy, point) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub strategy: Strategy,
    pub point: SweepPoint,
    pub p: Option<Estimate>,
    pub q: Option<Estimate>,
    pub ok_runs: usize,
    pub failed_runs: usize,
    pub suppressed: usize,
}

pub fn summarize(rows: &[ResultRow]) -> Vec<Summary> {
    let mut groups: BTreeMap<(Strategy, [u64; 4]), Vec<&ResultRow>> = BTreeMap::new();
    let key = |r: &ResultRow| [r.eps_w.to_bits(), r.e_m.to_bits(), r.w as u64, r.delta.to_bits()];
    let mut order = Vec::new();
    for r in rows {
        let k = (r.strategy, key(r));
        if !groups.contains_key(&k) {
            order.push(k);
        }
        groups.entry(k).or_default().push(r);
    }
    order
        .into_iter()
        .map(|k| {
            let g = &groups[&k];
            let ok: Vec<&&ResultRow> = g.iter().filter(|r| r.is_ok()).collect();
            let est = |f: fn(&ResultRow) -> Option<f64>| {
                let xs: Vec<f64> = ok.iter().filter_map(|r| f(r)).collect();
                Estimate::from_samples(&xs).ok()
            };
            Summary {
                strategy: k.0,
                point: g[0].point(),
                p: est(|r| r.p),
                q: est(|r| r.q),
                ok_runs: ok.len(),
                failed_runs: g.len() - ok.len(),
                suppressed: g.iter().map(|r| r.suppressed).sum(),
            }
        })
        .collect()
}

/// Writes rows with a header line.
pub fn emit_csv(rows: &[ResultRow], path: &Path) -> Result<(), ExperimentError> {
    if rows.is_empty() {
        return Err(ExperimentError::EmptyRows);
    }
    let err = |e: &dyn std::fmt::Display| ExperimentError::Output { path: path.to_owned(), reason: e.to_string() };
    let mut w = csv::Writer::from_path(path).map_err(|e| err(&e))?;
    for r in rows {
        w.serialize(r).map_err(|e| err(&e))?;
    }
    w.flush().map_err(|e| err(&e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub config_digest: String,
    pub seeds: Vec<u64>,
    pub rows: usize,
    pub failed_rows: usize,
    pub csv: PathBuf,
    pub config: ExperimentConfig,
}

impl Manifest {
    pub fn new(config: &ExperimentConfig, rows: &[ResultRow]) -> Self {
        Self {
            version: env!("CARGO_PKG_VERSION").to_owned(),
            config_digest: config.digest(),
            seeds: config.seeds(),
            rows: rows.len(),
            failed_rows: rows.iter().filter(|r| !r.is_ok()).count(),
            csv: config.output.clone(),
            config: config.clone(),
        }
    }

    pub fn write(&self, path: &Path) -> Result<(), ExperimentError> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(path, text + "\n").map_err(|e| ExperimentError::Output { path: path.to_owned(), reason: e.to_string() })
    }
}
