use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use geoperturb::adversary::{MechanismParams, PlsPool};
use geoperturb::baselines::{MechanismStrategy, Strategy};
use geoperturb::experiment::{
    emit_csv, generate_scenario, mechanism_rng, run_sweep, scenario_digest, summarize, ExperimentConfig, Manifest,
};
use geoperturb::grid::{hilbert_orders, LocationGrid, Metric};
use geoperturb::mechanism::OutputDomain;
use geoperturb::mobility::sample_path;
use geoperturb::oracle::{joint_table, random_scenario, subset_optimum_pls};
use geoperturb::pls::{find_pls, GuessDomain};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Parser)]
#[command(name = "geoperturb", version, about = "3D trajectory perturbation simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a parameter sweep and write CSV plus a JSON manifest.
    Sweep(ConfigArgs),
    /// Check a config without running it.
    Validate(ConfigArgs),
    /// Compare production code against brute-force references on tiny grids.
    Oracle {
        #[arg(long, default_value_t = 4000)]
        runs: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// One verbose run of a single seed.
    Demo {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON config file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "eps-w", value_delimiter = ',')]
    eps_w: Vec<f64>,
    #[arg(long = "em", value_delimiter = ',')]
    e_m: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    w: Vec<usize>,
    #[arg(long, value_delimiter = ',')]
    delta: Vec<f64>,
    /// Number of seeds.
    #[arg(long)]
    seeds: Option<usize>,
    /// Mechanism runs averaged per seed.
    #[arg(long)]
    replicates: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    strategy: Vec<Strategy>,
    /// CSV output path.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Allow w at or above the trajectory length.
    #[arg(long)]
    single_window: bool,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut c = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        c.apply_seed_env()?;
        if !self.eps_w.is_empty() {
            c.sweep.eps_w = self.eps_w.clone();
        }
        if !self.e_m.is_empty() {
            c.sweep.e_m = self.e_m.clone();
        }
        if !self.w.is_empty() {
            c.sweep.w = self.w.clone();
        }
        if !self.delta.is_empty() {
            c.sweep.delta = self.delta.clone();
        }
        if let Some(n) = self.seeds {
            c.seed_count = n;
        }
        if let Some(r) = self.replicates {
            c.replicates = r;
        }
        if !self.strategy.is_empty() {
            c.strategies = self.strategy.clone();
        }
        if let Some(o) = &self.out {
            c.output = o.clone();
        }
        c.single_window |= self.single_window;
        c.validate()?;
        Ok(c)
    }
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Sweep(args) => sweep(&args.resolve()?),
        Command::Validate(args) => {
            let c = args.resolve()?;
            println!(
                "config ok: {} sweep points x {} strategies x {} seeds, digest {}",
                c.sweep.points().len(),
                c.strategies.len(),
                c.seed_count,
                c.digest()
            );
            Ok(())
        }
        Command::Oracle { runs, seed } => oracle(runs, seed),
        Command::Demo { config, seed } => demo(&config.resolve()?, seed),
    }
}

fn sweep(c: &ExperimentConfig) -> Result<()> {
    let started = std::time::Instant::now();
    let rows = run_sweep(c)?;
    emit_csv(&rows, &c.output)?;
    let manifest_path = c.output.with_extension("json");
    Manifest::new(c, &rows).write(&manifest_path)?;
    println!("{:<8} {:>6} {:>6} {:>3} {:>6}  {:>16}  {:>16}  {:>4}", "strategy", "eps_w", "E_m", "w", "delta", "p (m)", "q (m)", "fail");
    for s in summarize(&rows) {
        let show = |e: Option<geoperturb::adversary::Estimate>| {
            e.map_or("-".to_string(), |e| format!("{:.4} ± {:.4}", e.mean, e.std_err))
        };
        println!(
            "{:<8} {:>6} {:>6} {:>3} {:>6}  {:>16}  {:>16}  {:>4}",
            s.strategy.name(),
            s.point.eps_w,
            s.point.e_m,
            s.point.w,
            s.point.delta,
            show(s.p),
            show(s.q),
            s.failed_runs
        );
    }
    let failed = rows.iter().filter(|r| !r.is_ok()).count();
    if failed > 0 {
        let first = rows.iter().find(|r| !r.is_ok()).unwrap();
        eprintln!("{failed} runs flagged; first: {}", first.status);
    }
    println!(
        "{} rows -> {} (manifest {}) in {:.1}s",
        rows.len(),
        c.output.display(),
        manifest_path.display(),
        started.elapsed().as_secs_f64()
    );
    Ok(())
}

fn demo(c: &ExperimentConfig, seed: u64) -> Result<()> {
    let sc = generate_scenario(c, seed)?;
    println!("scenario seed {seed}, digest {}", scenario_digest(&sc));
    let pt = c.sweep.points()[0];
    let params = c.params(&pt);
    println!("point: eps_w={} E_m={} w={} delta={}", pt.eps_w, pt.e_m, pt.w, pt.delta);
    for &strategy in &c.strategies {
        let tr = MechanismStrategy { strategy, params }
            .run(&sc, &mut mechanism_rng(seed))
            .with_context(|| format!("{strategy} run failed"))?;
        println!("\n{strategy}");
        println!("{:>2} {:>5} {:>6} {:>8} {:>8} {:>7} {:>7} {:>7} {:>7}", "t", "real", "anchor", "released", "inferred", "|dchi|", "eps", "D(phi)", "d(x,x^)");
        for (t, s) in tr.steps.iter().enumerate() {
            println!(
                "{:>2} {:>5} {:>6} {:>8} {:>8} {:>7} {:>7.4} {:>7} {:>7.3}",
                t,
                s.real,
                s.anchor,
                s.released.map_or("-".into(), |x| x.to_string()),
                s.inferred,
                s.delta_set_size,
                s.eps,
                s.pls_diameter.map_or("-".into(), |d| format!("{d:.3}")),
                s.inference_error
            );
        }
        println!("p = {:.4} m, q = {:.4} m, ledger {:?}", tr.privacy(), tr.qos_loss(), tr.ledger.history());
    }
    Ok(())
}

fn oracle(runs: usize, seed: u64) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    println!("protection-set search vs subset optimum (4x4x1 grid)");
    let g = LocationGrid::new([4, 4, 1], [4.0, 4.0, 1.0])?;
    let orders = hilbert_orders(&g);
    let mut worst: f64 = 1.0;
    let mut sum = 0.0;
    let mut count = 0;
    for _ in 0..40 {
        let mut prior: Vec<f64> = (0..16).map(|_| rng.gen_range(0.1..1.0)).collect();
        let z: f64 = prior.iter().sum();
        prior.iter_mut().for_each(|p| *p /= z);
        let anchor = rng.gen_range(0..16);
        let (eps, em) = (rng.gen_range(0.1..1.0), rng.gen_range(0.1..0.6));
        let Ok(got) = find_pls(anchor, &prior, eps, em, &orders, &g) else { continue };
        let pool: Vec<usize> = (0..16).collect();
        let opt = subset_optimum_pls(anchor, &prior, eps, em, &pool, &g, Metric::Spatial, GuessDomain::Map)
            .context("window found but subset search did not")?;
        if got.diameter < opt.diameter - 1e-12 {
            bail!("window search beat the subset optimum");
        }
        let ratio = got.diameter / opt.diameter;
        worst = worst.max(ratio);
        sum += ratio;
        count += 1;
    }
    println!("  {count} feasible cases, mean ratio {:.4}, worst {:.4}", sum / count as f64, worst);

    println!("joint table vs Monte Carlo (2x2x2 grid, T=3, {runs} runs)");
    let sc = random_scenario(LocationGrid::new([2, 2, 2], [2.0, 2.0, 2.0])?, &mut rng)?;
    let params = tiny_params();
    for strategy in Strategy::ALL {
        let exact = joint_table(&sc, &params, &strategy.pipeline(), 3)?;
        let (mut ps, mut qs) = (Vec::new(), Vec::new());
        for _ in 0..runs {
            let mut run_sc = sc.clone();
            run_sc.trajectory = sample_path(&sc.initial_prior, &sc.transition, 3, &mut rng)?;
            let tr = MechanismStrategy { strategy, params }.run(&run_sc, &mut rng)?;
            ps.push(tr.privacy());
            qs.push(tr.qos_loss());
        }
        let p = geoperturb::adversary::Estimate::from_samples(&ps)?;
        let q = geoperturb::adversary::Estimate::from_samples(&qs)?;
        println!(
            "  {:<8} p exact {:.4} mc {:.4} ± {:.4} | q exact {:.4} mc {:.4} ± {:.4}",
            strategy.name(),
            exact.privacy,
            p.mean,
            p.std_err,
            exact.qos_loss,
            q.mean,
            q.std_err
        );
    }
    Ok(())
}

fn tiny_params() -> MechanismParams {
    MechanismParams {
        eps_window: 1.5,
        e_m: 0.15,
        window: 2,
        delta: 0.1,
        n_possible: 8,
        eps_floor: 0.01,
        guess_domain: GuessDomain::Map,
        output_domain: OutputDomain::PossibleSet,
        pool: PlsPool::Support,
    }
}
