use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use carbon_gossip::accounting::BudgetAxis;
use carbon_gossip::baselines::StrategyName;
use carbon_gossip::controller::PresetName;
use carbon_gossip::harness::{
    expand_grid, export_results, matched_budget_report, read_metrics_csv, run_grid, run_single,
    trajectories_from_records, write_matched_csv, ExperimentConfig, GridKind, SummaryRow,
};
use carbon_gossip::topology::{build_snapshots, generate_mobility, inject_gaps, Regime};
use clap::{Args, Parser, Subcommand};

/// Carbon-aware gossip learning simulator.
#[derive(Parser)]
#[command(version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML experiment config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    regime: Option<Regime>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a mobility trace and its snapshot graphs.
    GenTopology {
        #[command(flatten)]
        common: Common,
    },
    /// Run the `[run]` scenario once.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        strategy: Option<StrategyName>,
        #[arg(long)]
        preset: Option<PresetName>,
    },
    /// Run a scenario grid over strategies and seeds.
    Grid {
        #[command(flatten)]
        common: Common,
        /// client-stress or packet-loss.
        #[arg(long, default_value = "client-stress")]
        kind: GridKind,
        /// Restrict the grid to one strategy.
        #[arg(long)]
        strategy: Option<StrategyName>,
        #[arg(long)]
        preset: Option<PresetName>,
    },
    /// Matched-budget report from an exported metrics table.
    Report {
        /// metrics.csv written by `run` or `grid`.
        #[arg(long)]
        metrics: PathBuf,
        /// carbon or delivered-mb.
        #[arg(long, default_value = "carbon")]
        axis: BudgetAxis,
        /// Budget on the axis; defaults to the largest common feasible one.
        #[arg(long)]
        budget: Option<f64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.run.seed = seed;
        cfg.grid.seeds = vec![seed];
    }
    if let Some(regime) = common.regime {
        cfg.run.regime = regime;
        cfg.grid.regimes = vec![regime];
    }
    Ok(cfg)
}

fn print_summary(rows: &[SummaryRow]) {
    println!("{:<40} {:<7} {:>5} {:>10} {:>8} {:>12} {:>12}", "cell", "method", "seeds", "mse", "r2", "carbon_g", "delivered_mb");
    for r in rows {
        let m = |k: &str| r.get(k).map_or(f64::NAN, |v| v.0);
        println!(
            "{:<40} {:<7} {:>5} {:>10.5} {:>8.4} {:>12.4e} {:>12.4}",
            r.cell,
            r.method,
            r.n_seeds,
            m("mse"),
            m("r2"),
            m("carbon_g"),
            m("delivered_mb")
        );
    }
}

fn gen_topology(common: &Common) -> Result<()> {
    let cfg = load_config(common)?;
    cfg.validate()?;
    let seed = cfg.run.seed;
    fs::create_dir_all(&common.out)?;
    let trace = inject_gaps(&generate_mobility(&cfg.mobility, seed)?, &cfg.mobility, seed);
    let mobility_path = common.out.join(format!("mobility_seed{seed}.tsv"));
    trace.write_tsv(&mobility_path)?;
    let regimes = match common.regime {
        Some(r) => vec![r],
        None => Regime::ALL.to_vec(),
    };
    for regime in regimes {
        let topo = build_snapshots(&trace, regime.preset())?;
        let path = common.out.join(format!("topology_{}_seed{seed}.tsv", regime.name()));
        topo.write_tsv(&path)?;
        let s = topo.stats();
        println!(
            "{:<15} snapshots {:>3}  connected {:>3} ({:.3})  median comps {}  LCR {:.3}  -> {}",
            regime.name(),
            s.snapshot_count,
            s.connected_snapshot_count,
            s.connectivity_rate,
            s.median_components,
            s.mean_largest_component_ratio,
            path.display()
        );
    }
    println!("mobility trace -> {}", mobility_path.display());
    Ok(())
}

fn write_config(out: &Path, cfg: &ExperimentConfig) -> Result<()> {
    fs::create_dir_all(out)?;
    fs::write(out.join("config.toml"), cfg.to_toml_string())?;
    Ok(())
}

fn run(common: &Common, strategy: Option<StrategyName>, preset: Option<PresetName>) -> Result<()> {
    let mut cfg = load_config(common)?;
    if let Some(s) = strategy {
        cfg.run.strategy = s;
    }
    if let Some(p) = preset {
        cfg.run.preset = p;
    }
    cfg.validate()?;
    let result = run_single(&cfg, &cfg.scenario())?;
    write_config(&common.out, &cfg)?;
    export_results(&common.out, std::slice::from_ref(&result))?;
    let s = &result.summary;
    println!(
        "{} seed {}: {} rounds, {} updates, mse {:.5}, r2 {:.4}, energy {:.3} J, carbon {:.4e} g, delivered {:.4} MB, p_eff {}",
        result.scenario.id(),
        result.scenario.seed,
        s.rounds,
        s.updates,
        s.mse,
        s.r2,
        s.energy_j,
        s.carbon_g,
        s.delivered_mb,
        s.p_eff.map_or("n/a".to_string(), |p| format!("{p:.4}"))
    );
    println!("results -> {}", common.out.display());
    Ok(())
}

fn grid(common: &Common, kind: GridKind, strategy: Option<StrategyName>, preset: Option<PresetName>) -> Result<()> {
    let mut cfg = load_config(common)?;
    if let Some(s) = strategy {
        cfg.grid.strategies = vec![s];
    }
    if let Some(p) = preset {
        cfg.run.preset = p;
        cfg.grid.loss_preset = p;
    }
    cfg.validate()?;
    let scenarios = expand_grid(&cfg, kind);
    eprintln!("running {} scenarios", scenarios.len());
    let results = run_grid(&cfg, &scenarios)?;
    write_config(&common.out, &cfg)?;
    let rows = export_results(&common.out, &results)?;
    print_summary(&rows);
    println!("results -> {}", common.out.display());
    Ok(())
}

fn report(metrics: &Path, axis: BudgetAxis, budget: Option<f64>, out: &Path) -> Result<()> {
    let records = read_metrics_csv(metrics).with_context(|| format!("reading {}", metrics.display()))?;
    if records.is_empty() {
        bail!("{} has no metric rows", metrics.display());
    }
    let report = matched_budget_report(&trajectories_from_records(&records), axis, budget)?;
    fs::create_dir_all(out)?;
    let path = out.join(format!("matched_{}.csv", axis.name()));
    write_matched_csv(&path, &report)?;
    println!("matched {} budget {:.6e}", axis.name(), report.budget);
    println!("{:<8} {:>3} {:>12} {:>10} {:>10} {:>10}", "method", "n", "mse", "±", "r2", "±");
    for m in &report.methods {
        println!(
            "{:<8} {:>3} {:>12.6} {:>10.6} {:>10.5} {:>10.5}",
            m.method, m.n, m.mse_mean, m.mse_std, m.r2_mean, m.r2_std
        );
    }
    println!("report -> {}", path.display());
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::GenTopology { common } => gen_topology(&common),
        Command::Run { common, strategy, preset } => run(&common, strategy, preset),
        Command::Grid { common, kind, strategy, preset } => grid(&common, kind, strategy, preset),
        Command::Report { metrics, axis, budget, out } => report(&metrics, axis, budget, &out),
    }
}
