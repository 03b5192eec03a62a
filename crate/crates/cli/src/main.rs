use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use panel_mfm::config::{PanelKind, RunConfig};
use panel_mfm::io;
use panel_mfm::postprocess::summarize;
use panel_mfm::sampler::run_chain_seeded;
use panel_mfm::study::{prior_kplus_means, replication_seeds, run_mc_study};
use panel_mfm::{Error, Result};

/// Bayesian clustering of panel data with an unknown number of groups.
#[derive(Parser)]
#[command(name = "panel-mfm", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
    /// Worker threads; overrides the config, 0 uses all cores.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one panel from the [dgp] section.
    Simulate(Common),
    /// Fit a panel CSV and write draws and a posterior summary.
    Fit {
        #[command(flatten)]
        common: Common,
        /// Panel CSV; overrides [data].path.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Monte Carlo study: simulate, fit and aggregate replications.
    Mc(Common),
    /// Prior mean of the number of filled components.
    PriorKplus(Common),
    /// Summarise a draws file written by `fit`.
    Summarize {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        draws: PathBuf,
    },
}

struct Ctx {
    cfg: RunConfig,
    seed: u64,
    out: PathBuf,
    threads: usize,
}

impl Ctx {
    fn new(c: &Common) -> Result<Self> {
        let cfg = RunConfig::load(&c.config)?;
        fs::create_dir_all(&c.out)?;
        Ok(Self { seed: c.seed.unwrap_or(cfg.seed), threads: c.threads.unwrap_or(cfg.threads), out: c.out.clone(), cfg })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn write(&self, name: &str, text: &str) -> Result<()> {
        fs::write(self.path(name), text)?;
        Ok(())
    }
}

// Chain and panel seeds match replication 0 of `mc` with the same seed.
fn chain_seed(seed: u64) -> u64 {
    replication_seeds(seed, 0).1
}

fn simulate(ctx: &Ctx) -> Result<()> {
    let mut design = ctx.cfg.dgp_section()?.config(ctx.cfg.panel, 0)?;
    design.seed = replication_seeds(ctx.seed, 0).0;
    let (data, alloc) = panel_mfm::dgp::simulate_panel(&design)?;
    io::write_panel(&ctx.path("panel.csv"), &data)?;
    io::write_allocations(&ctx.path("allocations.csv"), &alloc)?;
    println!("wrote N={} T={} p={} panel to {}", data.n(), data.t(), data.p(), ctx.path("panel.csv").display());
    Ok(())
}

fn fit(ctx: &Ctx, data_path: Option<&Path>) -> Result<()> {
    let path = match (data_path, &ctx.cfg.data) {
        (Some(p), _) => p.to_path_buf(),
        (None, Some(d)) => d.path.clone(),
        (None, None) => return Err(Error::Config("no panel given: use --data or a [data] section".into())),
    };
    let h = ctx.cfg.data.as_ref().map_or(0, |d| d.h);
    let loaded = io::load_panel(&path, ctx.cfg.panel == PanelKind::Dynamic, h)?;
    let data = loaded.data;
    println!(
        "loaded N={} T={} p={} ({} units dropped as incomplete)",
        data.n(),
        data.t(),
        data.p(),
        loaded.dropped_units.len()
    );
    let priors = ctx.cfg.prior.spec(data.p())?.resolve(&data)?;
    let seed = chain_seed(ctx.seed);
    let settings = ctx.cfg.sampler_section()?.settings(seed)?;
    let store = run_chain_seeded(&data, &priors, &settings)?;
    io::write_draws(&ctx.path("draws.csv"), &store)?;
    let summary = summarize(&store, ctx.cfg.identification, seed)?;
    io::write_summary(&ctx.path("summary.csv"), &summary)?;
    let table = io::summary_table(&summary);
    ctx.write("table.txt", &table)?;
    print!("{table}");
    Ok(())
}

fn summarize_draws(ctx: &Ctx, draws: &Path) -> Result<()> {
    let store = io::read_draws(draws)?;
    let summary = summarize(&store, ctx.cfg.identification, chain_seed(ctx.seed))?;
    io::write_summary(&ctx.path("summary.csv"), &summary)?;
    let table = io::summary_table(&summary);
    ctx.write("table.txt", &table)?;
    print!("{table}");
    Ok(())
}

fn mc(ctx: &Ctx) -> Result<()> {
    let mut design = ctx.cfg.study_design()?;
    design.seed = ctx.seed;
    if design.replications == 0 {
        log::warn!("zero replications requested; writing an empty report");
    }
    let report = run_mc_study(&design, ctx.threads)?;
    let w1: Vec<f64> = report.outcomes.iter().filter_map(|o| o.w1_to_truth).collect();
    let fails = report.failures.len();
    io::write_mc_summary(&ctx.path("summary.csv"), report.aggregate.as_ref(), design.replications, fails, &w1)?;
    io::write_replications(&ctx.path("replications.csv"), &report)?;
    for (r, msg) in &report.failures {
        log::warn!("replication {r} failed: {msg}");
    }
    let table = io::mc_table(report.aggregate.as_ref(), design.replications, fails, &w1);
    ctx.write("table.txt", &table)?;
    print!("{table}");
    Ok(())
}

fn prior_kplus(ctx: &Ctx) -> Result<()> {
    let sec = ctx.cfg.prior_kplus.as_ref().ok_or_else(|| Error::Config("missing [prior_kplus] section".into()))?;
    if sec.n.is_empty() || sec.n.contains(&0) || sec.nsim == 0 {
        return Err(Error::Config("prior_kplus needs positive sample sizes and nsim".into()));
    }
    let weights = ctx.cfg.prior.weights.resolve()?;
    let mut csv = String::from("n,mean,se\n");
    let mut table = String::new();
    for (n, m, se) in prior_kplus_means(&ctx.cfg.prior.k, &weights, &sec.n, sec.nsim, ctx.seed) {
        csv += &format!("{n},{m},{se}\n");
        table += &format!("N = {n:>6}  E[K+] = {m:.4}  (MC se {se:.4})\n");
    }
    ctx.write("prior_kplus.csv", &csv)?;
    ctx.write("table.txt", &table)?;
    print!("{table}");
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Simulate(c) => simulate(&Ctx::new(c)?),
        Command::Fit { common, data } => fit(&Ctx::new(common)?, data.as_deref()),
        Command::Mc(c) => mc(&Ctx::new(c)?),
        Command::PriorKplus(c) => prior_kplus(&Ctx::new(c)?),
        Command::Summarize { common, draws } => summarize_draws(&Ctx::new(common)?, draws),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_numerical() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
