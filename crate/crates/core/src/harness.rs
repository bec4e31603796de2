//! Experiment runner: configuration, the fixed-compute simulation loop,
//! scenario grids, summaries, matched-budget reports and file exports.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::accounting::{
    common_feasible_budget, matched_budget_metric, round_cost, BudgetAxis, CarbonLedger, DeviceProfile, MetricPoint,
    RoundUsage,
};
use crate::baselines::{build_strategy, RoundContext, StrategyName, StrategyParams, StrategySetup};
use crate::controller::{compute_proxy, target_active, ControllerConfig, PresetName, RuntimePreset};
use crate::learners::{
    evaluate, make_synthetic_fleet, preprocess_timeseries, EpochTrainer, Fleet, PreprocessConfig, SgdConfig,
    SyntheticTaskSpec, TimeSeriesTable,
};
use crate::rng::{derive_seed, keyed_rng, Stream};
use crate::signals::{CarbonParams, CarbonTrace, ParticipationTracker};
use crate::topology::{topology_for_seed, MobilityConfig, Regime, TopologyTrace};
use crate::{Error, Result};

/// Hard stop for runs whose update budget can never be met.
const MAX_ROUNDS: u64 = 10_000_000;

/// Reference intensity for the default carbon budget, gCO2/kWh.
const REFERENCE_CHI: f64 = 330.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TaskConfig {
    Synthetic(SyntheticTaskSpec),
    /// One CSV per node, preprocessed independently.
    Csv {
        paths: Vec<PathBuf>,
        target: String,
        #[serde(default)]
        preprocess: PreprocessConfig,
    },
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig::Synthetic(SyntheticTaskSpec::default())
    }
}

/// Single-run selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunSection {
    pub strategy: StrategyName,
    pub regime: Regime,
    pub preset: PresetName,
    pub dropout_pd: f64,
    pub participation_f: f64,
    pub loss_p: f64,
    pub seed: u64,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            strategy: StrategyName::Cargo,
            regime: Regime::Mid,
            preset: PresetName::Standard,
            dropout_pd: 0.2,
            participation_f: 0.5,
            loss_p: 0.0,
            seed: 0,
        }
    }
}

/// Axes of the scenario grids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridSection {
    pub strategies: Vec<StrategyName>,
    pub dropout_pd: Vec<f64>,
    pub participation_f: Vec<f64>,
    pub loss_p: Vec<f64>,
    pub regimes: Vec<Regime>,
    pub seeds: Vec<u64>,
    /// Preset used by the packet-loss grid.
    pub loss_preset: PresetName,
}

impl Default for GridSection {
    fn default() -> Self {
        GridSection {
            strategies: StrategyName::ALL.to_vec(),
            dropout_pd: vec![0.2, 0.5],
            participation_f: vec![0.25, 0.5, 1.0],
            loss_p: vec![0.0, 0.05, 0.1, 0.2],
            regimes: Regime::ALL.to_vec(),
            seeds: (0..5).collect(),
            loss_preset: PresetName::LossRobust,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BudgetSection {
    pub total_local_updates: u64,
    pub eval_every_updates: u64,
    /// Charge idle power to nodes that do not train in a round.
    pub charge_idle: bool,
    /// Optional stop after this many rounds, even if updates remain.
    pub max_rounds: Option<u64>,
}

impl Default for BudgetSection {
    fn default() -> Self {
        BudgetSection {
            total_local_updates: 20_000,
            eval_every_updates: 1_000,
            charge_idle: true,
            max_rounds: None,
        }
    }
}

/// Everything a run or grid needs; loaded from TOML.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub run: RunSection,
    pub grid: GridSection,
    pub budget: BudgetSection,
    pub task: TaskConfig,
    pub sgd: SgdConfig,
    pub controller: ControllerConfig,
    pub device: DeviceProfile,
    pub mobility: MobilityConfig,
    pub carbon: CarbonParams,
    /// `node_id, round, chi` table replacing the synthetic carbon generator.
    pub carbon_table: Option<PathBuf>,
    pub strategy_params: StrategyParams,
}

fn check_probability(field: &str, p: f64, upper_open: bool) -> Result<()> {
    let ok = p >= 0.0 && if upper_open { p < 1.0 } else { p <= 1.0 };
    if ok {
        Ok(())
    } else {
        let range = if upper_open { "[0, 1)" } else { "[0, 1]" };
        Err(Error::config(field, format!("{p} must lie in {range}")))
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.sgd.validate()?;
        self.controller.validate()?;
        self.device.validate()?;
        self.mobility.validate()?;
        self.strategy_params.validate()?;
        if self.budget.eval_every_updates == 0 {
            return Err(Error::config("eval_every_updates", "must be at least 1"));
        }
        match &self.task {
            TaskConfig::Synthetic(spec) => spec.validate()?,
            TaskConfig::Csv { paths, preprocess, .. } => {
                preprocess.validate()?;
                if paths.len() != self.mobility.n_vessels {
                    return Err(Error::config(
                        "task.paths",
                        format!("{} files for {} vessels", paths.len(), self.mobility.n_vessels),
                    ));
                }
            }
        }
        self.scenario().validate()?;
        let g = &self.grid;
        for p in &g.dropout_pd {
            check_probability("grid.dropout_pd", *p, true)?;
        }
        for f in &g.participation_f {
            if !(*f > 0.0 && *f <= 1.0) {
                return Err(Error::config("grid.participation_f", format!("{f} must lie in (0, 1]")));
            }
        }
        for p in &g.loss_p {
            check_probability("grid.loss_p", *p, true)?;
        }
        if g.seeds.is_empty() {
            return Err(Error::config("grid.seeds", "must not be empty"));
        }
        if g.strategies.is_empty() {
            return Err(Error::config("grid.strategies", "must not be empty"));
        }
        Ok(())
    }

    /// The scenario described by the `[run]` section.
    pub fn scenario(&self) -> Scenario {
        let r = &self.run;
        Scenario {
            strategy: r.strategy,
            regime: r.regime,
            preset: r.preset,
            dropout_pd: r.dropout_pd,
            participation_f: r.participation_f,
            loss_p: r.loss_p,
            seed: r.seed,
        }
    }
}

/// One fully specified run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub strategy: StrategyName,
    pub regime: Regime,
    pub preset: PresetName,
    pub dropout_pd: f64,
    pub participation_f: f64,
    pub loss_p: f64,
    pub seed: u64,
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        check_probability("dropout_pd", self.dropout_pd, true)?;
        check_probability("loss_p", self.loss_p, true)?;
        if !(self.participation_f > 0.0 && self.participation_f <= 1.0) {
            return Err(Error::config("participation_f", format!("{} must lie in (0, 1]", self.participation_f)));
        }
        Ok(())
    }

    /// Grid cell label shared by every strategy and seed.
    pub fn cell_id(&self) -> String {
        let preset = match self.preset {
            PresetName::Standard => "standard",
            PresetName::LossRobust => "loss-robust",
        };
        format!(
            "{}/{}/pd{}/f{}/p{}",
            self.regime.name(),
            preset,
            self.dropout_pd,
            self.participation_f,
            self.loss_p
        )
    }

    /// Cell plus strategy.
    pub fn id(&self) -> String {
        format!("{}/{}", self.strategy, self.cell_id())
    }

    fn file_stem(&self) -> String {
        format!("{}_seed{}", self.id().replace('/', "_"), self.seed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GridKind {
    /// Dropout x participation at the run's regime, loss and preset.
    ClientStress,
    /// Regime x packet loss at the run's dropout and participation.
    PacketLoss,
}

impl std::str::FromStr for GridKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "client-stress" => Ok(GridKind::ClientStress),
            "packet-loss" => Ok(GridKind::PacketLoss),
            other => Err(Error::config("grid", format!("unknown grid kind {other:?}"))),
        }
    }
}

/// Expands a grid into scenarios, seeds innermost.
pub fn expand_grid(config: &ExperimentConfig, kind: GridKind) -> Vec<Scenario> {
    let g = &config.grid;
    let base = config.scenario();
    let mut out = Vec::new();
    match kind {
        GridKind::ClientStress => {
            for &pd in &g.dropout_pd {
                for &f in &g.participation_f {
                    for &s in &g.strategies {
                        for &seed in &g.seeds {
                            out.push(Scenario { strategy: s, dropout_pd: pd, participation_f: f, seed, ..base });
                        }
                    }
                }
            }
        }
        GridKind::PacketLoss => {
            for &regime in &g.regimes {
                for &p in &g.loss_p {
                    for &s in &g.strategies {
                        for &seed in &g.seeds {
                            out.push(Scenario {
                                strategy: s,
                                regime,
                                loss_p: p,
                                preset: g.loss_preset,
                                seed,
                                ..base
                            });
                        }
                    }
                }
            }
        }
    }
    out
}

/// Per-round audit record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundLog {
    pub round: u64,
    pub available: Vec<usize>,
    pub active: Vec<usize>,
    /// Inactivity streaks before the round, from the harness's own history.
    pub streaks_before: Vec<u32>,
    pub k_target: usize,
    pub edges: usize,
    /// Largest number of links kept by any one node (controller strategies).
    pub max_fanout: Option<usize>,
    pub resync: bool,
    pub local_steps: u64,
    pub updates: u64,
    pub bytes_attempted: u64,
    pub bytes_delivered: u64,
    pub carbon_g: f64,
    pub cumulative_carbon_g: f64,
    pub lambda_c: f64,
    pub lambda_f: f64,
    pub mean_participation: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub mse: f64,
    pub r2: f64,
    pub rmse: f64,
    pub train_mse: f64,
    pub energy_j: f64,
    pub carbon_g: f64,
    pub attempted_mb: f64,
    pub delivered_mb: f64,
    pub p_eff: Option<f64>,
    pub rounds: u64,
    pub updates: u64,
    pub messages_attempted: u64,
    pub carbon_budget_g: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub scenario: Scenario,
    pub points: Vec<MetricPoint>,
    pub summary: RunSummary,
    pub rounds: Vec<RoundLog>,
}

/// Builds the per-node datasets for a run seed.
pub fn build_fleet(config: &ExperimentConfig, seed: u64) -> Result<Fleet> {
    let n = config.mobility.n_vessels;
    match &config.task {
        TaskConfig::Synthetic(spec) => {
            let spec = SyntheticTaskSpec { seed: derive_seed(spec.seed, Stream::Fleet, &[seed]), ..*spec };
            Ok(make_synthetic_fleet(&spec, n)?.fleet)
        }
        TaskConfig::Csv { paths, target, preprocess } => {
            let mut train = Vec::with_capacity(n);
            let mut test = Vec::with_capacity(n);
            for p in paths {
                let table = TimeSeriesTable::read_csv(p, target)?;
                let d = preprocess_timeseries(&table, target, preprocess)?;
                train.push(d.train);
                test.push(d.test);
            }
            Fleet::new(train, test)
        }
    }
}

pub fn build_carbon(config: &ExperimentConfig, seed: u64) -> Result<CarbonTrace> {
    match &config.carbon_table {
        Some(path) => CarbonTrace::read_csv(path, config.mobility.n_vessels),
        None => Ok(CarbonTrace::Synthetic { params: config.carbon, seed }),
    }
}

/// Nodes available at round `t`: independent Bernoulli(1 - p_d), keyed by `(seed, t, i)`.
pub fn draw_availability(n: usize, p_d: f64, seed: u64, t: u64) -> Vec<usize> {
    (0..n)
        .filter(|&i| keyed_rng(seed, Stream::Availability, &[t, i as u64]).random::<f64>() >= p_d)
        .collect()
}

/// Expected rounds to spend the update budget with uniform participation.
fn expected_rounds(config: &ExperimentConfig, scenario: &Scenario, fleet: &Fleet) -> f64 {
    let n = fleet.n_nodes();
    let mean_avail = n as f64 * (1.0 - scenario.dropout_pd);
    let k = target_active(scenario.participation_f, n, n) as f64;
    let active = k.min(mean_avail).max(1.0);
    let steps = fleet
        .train
        .iter()
        .map(|d| config.sgd.steps_per_epoch(d.len()) as f64)
        .sum::<f64>()
        / n as f64;
    config.budget.total_local_updates as f64 / (active * steps.max(1.0))
}

/// Configured carbon budget, or expected rounds times N times the median
/// per-epoch compute proxy at the reference intensity.
pub fn carbon_budget(config: &ExperimentConfig, scenario: &Scenario, fleet: &Fleet) -> Result<f64> {
    if let Some(b) = config.controller.carbon_budget {
        return Ok(b);
    }
    let n = fleet.n_nodes();
    let mut flops = fleet.epoch_flops();
    flops.sort_unstable();
    let per_epoch = compute_proxy(
        flops[n / 2] as f64,
        config.device.throughput_flops,
        config.device.active_power_w,
        REFERENCE_CHI,
    )?;
    Ok((expected_rounds(config, scenario, fleet) * n as f64 * per_epoch).max(f64::MIN_POSITIVE))
}

/// Runs one scenario on a prebuilt topology and fleet.
pub fn simulate(
    config: &ExperimentConfig,
    scenario: &Scenario,
    topology: &TopologyTrace,
    fleet: &Fleet,
    carbon: &CarbonTrace,
) -> Result<RunResult> {
    scenario.validate()?;
    let n = fleet.n_nodes();
    if topology.n_nodes() != n {
        return Err(Error::Dimension { expected: n, got: topology.n_nodes() });
    }
    let dim = fleet.dim();
    let x0 = vec![vec![0.0; dim]; n];
    let setup = StrategySetup {
        initial_losses: fleet.train.iter().zip(&x0).map(|(d, x)| d.mse(x)).collect(),
        epoch_flops: fleet.epoch_flops(),
        x0,
    };
    let budget_g = carbon_budget(config, scenario, fleet)?;
    let preset = RuntimePreset::named(scenario.preset);
    let controller = ControllerConfig { participation_fraction: scenario.participation_f, ..config.controller.clone() };
    let mut strategy = build_strategy(
        scenario.strategy,
        &setup,
        &config.strategy_params,
        &controller,
        &preset,
        &config.device,
        budget_g,
    )?;

    let total = config.budget.total_local_updates;
    let every = config.budget.eval_every_updates;
    let mut idle_flops = fleet.epoch_flops();
    idle_flops.sort_unstable();
    let idle_seconds = if config.budget.charge_idle {
        config.device.compute_seconds(idle_flops[n / 2])
    } else {
        0.0
    };

    let mut ledger = CarbonLedger::new();
    let mut history = ParticipationTracker::new(n);
    let mut logs = Vec::new();
    let mut updates = 0u64;
    let mut next_mark = every.min(total);
    let point = |ledger: &CarbonLedger, round: u64, updates: u64, x: &[f64], duals: crate::controller::DualState, partial| {
        let test = evaluate(x, &fleet.test);
        let train = evaluate(x, &fleet.train);
        MetricPoint {
            round,
            updates,
            mse: test.mse,
            r2: test.r2,
            rmse: test.rmse,
            train_mse: train.mse,
            energy_j: ledger.cumulative_energy_j(),
            carbon_g: ledger.cumulative_carbon_g(),
            attempted_mb: ledger.attempted_mb(),
            delivered_mb: ledger.delivered_mb(),
            p_eff: ledger.effective_loss(),
            lambda_c: duals.lambda_c,
            lambda_f: duals.lambda_f,
            partial,
        }
    };
    let p0 = point(&ledger, 0, 0, &strategy.mean_model(), strategy.duals(), false);
    ledger.record_point(p0);

    let round_cap = config.budget.max_rounds.unwrap_or(u64::MAX);
    let mut t = 0u64;
    while updates < total && t < round_cap {
        if t >= MAX_ROUNDS {
            return Err(Error::InvalidArgument(format!("update budget not reached after {MAX_ROUNDS} rounds")));
        }
        let snapshot = topology.snapshot_for_round(t);
        let available = draw_availability(n, scenario.dropout_pd, scenario.seed, t);
        let chi = carbon.round(n, t);
        let ctx = RoundContext {
            round: t,
            available: &available,
            candidates: &snapshot.edges,
            chi: &chi,
            participation_fraction: scenario.participation_f,
            loss_p: scenario.loss_p,
            seed: scenario.seed,
        };
        let mut trainer = EpochTrainer {
            fleet,
            sgd: config.sgd,
            seed: scenario.seed,
            round: t,
            step_allowance: Some(next_mark - updates),
        };
        let streaks_before: Vec<u32> = (0..n).map(|i| history.streak(i)).collect();
        let round = strategy.step(&ctx, &mut trainer)?;
        let outcome = &round.outcome;
        let steps = outcome.local_steps();
        updates += steps;

        let trained: Vec<bool> = {
            let mut v = vec![false; n];
            outcome.work.iter().for_each(|w| v[w.node] = true);
            v
        };
        let idle: Vec<usize> = (0..n).filter(|&i| !trained[i]).collect();
        let cost = round_cost(
            &RoundUsage {
                round: t,
                work: &outcome.work,
                payloads: &outcome.payloads,
                chi: &chi,
                idle: &idle,
                idle_seconds,
            },
            &config.device,
        )?;
        ledger.record_round(cost);
        strategy.end_round(ledger.cumulative_carbon_g());
        let duals = strategy.duals();
        ledger.record_duals(duals);
        history.update(&outcome.active)?;

        let k_target = round
            .control
            .as_ref()
            .map_or_else(|| target_active(scenario.participation_f, n, available.len()), |c| c.k_target);
        logs.push(RoundLog {
            round: t,
            available: available.clone(),
            active: outcome.active.clone(),
            streaks_before,
            k_target,
            edges: outcome.payloads.iter().filter(|p| p.kind != crate::dataplane::PayloadKind::Resync).count(),
            max_fanout: round
                .control
                .as_ref()
                .map(|c| c.bundle.selections.iter().map(|s| s.edges.len()).max().unwrap_or(0)),
            resync: round.control.as_ref().is_some_and(|c| c.bundle.resync),
            local_steps: steps,
            updates,
            bytes_attempted: cost.bytes_attempted,
            bytes_delivered: cost.bytes_delivered,
            carbon_g: cost.carbon_g,
            cumulative_carbon_g: ledger.cumulative_carbon_g(),
            lambda_c: duals.lambda_c,
            lambda_f: duals.lambda_f,
            mean_participation: history.mean_rate(),
        });

        t += 1;
        if updates == next_mark {
            let partial = !updates.is_multiple_of(every);
            let p = point(&ledger, t, updates, &strategy.mean_model(), duals, partial);
            ledger.record_point(p);
            next_mark = (next_mark + every).min(total);
        }
    }

    if t == round_cap && updates < next_mark && updates > 0 {
        let last = ledger.trajectory.last().map_or(0, |p| p.updates);
        if last != updates {
            let p = point(&ledger, t, updates, &strategy.mean_model(), strategy.duals(), true);
            ledger.record_point(p);
        }
    }
    let last = *ledger.trajectory.last().expect("initial point recorded");
    let summary = RunSummary {
        mse: last.mse,
        r2: last.r2,
        rmse: last.rmse,
        train_mse: last.train_mse,
        energy_j: ledger.cumulative_energy_j(),
        carbon_g: ledger.cumulative_carbon_g(),
        attempted_mb: ledger.attempted_mb(),
        delivered_mb: ledger.delivered_mb(),
        p_eff: ledger.effective_loss(),
        rounds: t,
        updates,
        messages_attempted: ledger.messages_attempted(),
        carbon_budget_g: budget_g,
    };
    Ok(RunResult { scenario: *scenario, points: ledger.trajectory, summary, rounds: logs })
}

/// Builds topology, fleet and carbon trace for the scenario seed and runs it.
pub fn run_single(config: &ExperimentConfig, scenario: &Scenario) -> Result<RunResult> {
    let topology = topology_for_seed(&config.mobility, scenario.regime.preset(), scenario.seed)?;
    let fleet = build_fleet(config, scenario.seed)?;
    let carbon = build_carbon(config, scenario.seed)?;
    simulate(config, scenario, &topology, &fleet, &carbon)
}

/// Runs the `[run]` scenario over every grid seed.
pub fn run_scenario(config: &ExperimentConfig) -> Result<Vec<RunResult>> {
    config.validate()?;
    let base = config.scenario();
    config
        .grid
        .seeds
        .par_iter()
        .map(|&seed| run_single(config, &Scenario { seed, ..base }))
        .collect()
}

/// Runs scenarios in parallel; results keep the input order.
pub fn run_grid(config: &ExperimentConfig, scenarios: &[Scenario]) -> Result<Vec<RunResult>> {
    config.validate()?;
    scenarios.par_iter().map(|s| run_single(config, s)).collect()
}

/// Mean and sample standard deviation; std is 0 for a single value.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Final metrics of one method-seed trajectory, with identifying labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub method: String,
    pub seed: u64,
    pub scenario: String,
    pub round: u64,
    pub updates: u64,
    pub mse: f64,
    pub r2: f64,
    pub rmse: f64,
    pub train_mse: f64,
    pub energy_j: f64,
    pub carbon_g: f64,
    pub attempted_mb: f64,
    pub delivered_mb: f64,
    pub p_eff: Option<f64>,
    pub lambda_c: f64,
    pub lambda_f: f64,
    pub partial: bool,
}

impl MetricRecord {
    pub fn new(method: &str, seed: u64, scenario: &str, p: &MetricPoint) -> Self {
        MetricRecord {
            method: method.to_string(),
            seed,
            scenario: scenario.to_string(),
            round: p.round,
            updates: p.updates,
            mse: p.mse,
            r2: p.r2,
            rmse: p.rmse,
            train_mse: p.train_mse,
            energy_j: p.energy_j,
            carbon_g: p.carbon_g,
            attempted_mb: p.attempted_mb,
            delivered_mb: p.delivered_mb,
            p_eff: p.p_eff,
            lambda_c: p.lambda_c,
            lambda_f: p.lambda_f,
            partial: p.partial,
        }
    }

    pub fn point(&self) -> MetricPoint {
        MetricPoint {
            round: self.round,
            updates: self.updates,
            mse: self.mse,
            r2: self.r2,
            rmse: self.rmse,
            train_mse: self.train_mse,
            energy_j: self.energy_j,
            carbon_g: self.carbon_g,
            attempted_mb: self.attempted_mb,
            delivered_mb: self.delivered_mb,
            p_eff: self.p_eff,
            lambda_c: self.lambda_c,
            lambda_f: self.lambda_f,
            partial: self.partial,
        }
    }
}

/// A labelled method-seed trajectory, the unit of summaries and reports.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub method: String,
    pub seed: u64,
    /// Grid cell (scenario without strategy).
    pub cell: String,
    pub points: Vec<MetricPoint>,
}

impl From<&RunResult> for Trajectory {
    fn from(r: &RunResult) -> Self {
        Trajectory {
            method: r.scenario.strategy.to_string(),
            seed: r.scenario.seed,
            cell: r.scenario.cell_id(),
            points: r.points.clone(),
        }
    }
}

/// Groups metric records back into trajectories, ordered by (cell, method, seed).
pub fn trajectories_from_records(records: &[MetricRecord]) -> Vec<Trajectory> {
    let mut groups: BTreeMap<(String, String, u64), Vec<MetricPoint>> = BTreeMap::new();
    for r in records {
        groups
            .entry((r.scenario.clone(), r.method.clone(), r.seed))
            .or_default()
            .push(r.point());
    }
    groups
        .into_iter()
        .map(|((cell, method, seed), mut points)| {
            points.sort_by_key(|p| p.updates);
            Trajectory { method, seed, cell, points }
        })
        .collect()
}

pub const SUMMARY_METRICS: [&str; 9] = [
    "mse",
    "r2",
    "rmse",
    "train_mse",
    "energy_j",
    "carbon_g",
    "attempted_mb",
    "delivered_mb",
    "p_eff",
];

fn final_metric(p: &MetricPoint, name: &str) -> Option<f64> {
    Some(match name {
        "mse" => p.mse,
        "r2" => p.r2,
        "rmse" => p.rmse,
        "train_mse" => p.train_mse,
        "energy_j" => p.energy_j,
        "carbon_g" => p.carbon_g,
        "attempted_mb" => p.attempted_mb,
        "delivered_mb" => p.delivered_mb,
        "p_eff" => return p.p_eff,
        _ => return None,
    })
}

/// Mean ± std of each final metric for one (cell, method).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub cell: String,
    pub method: String,
    pub n_seeds: usize,
    /// Set when only one seed backs the row, so std is 0 by convention.
    pub single_seed: bool,
    /// `(metric, mean, std)` in [`SUMMARY_METRICS`] order.
    pub metrics: Vec<(String, f64, f64)>,
}

impl SummaryRow {
    pub fn get(&self, metric: &str) -> Option<(f64, f64)> {
        self.metrics.iter().find(|m| m.0 == metric).map(|m| (m.1, m.2))
    }
}

pub fn summarize(trajectories: &[Trajectory]) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<(String, String), Vec<&MetricPoint>> = BTreeMap::new();
    for t in trajectories {
        if let Some(last) = t.points.last() {
            groups.entry((t.cell.clone(), t.method.clone())).or_default().push(last);
        }
    }
    groups
        .into_iter()
        .map(|((cell, method), finals)| {
            let metrics = SUMMARY_METRICS
                .iter()
                .map(|&name| {
                    let vals: Vec<f64> = finals.iter().filter_map(|p| final_metric(p, name)).collect();
                    let (m, s) = mean_std(&vals);
                    (name.to_string(), m, s)
                })
                .collect();
            SummaryRow { n_seeds: finals.len(), single_seed: finals.len() == 1, cell, method, metrics }
        })
        .collect()
}

/// Interpolated metrics of one method-seed trajectory at the common budget.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MatchedEntry {
    pub method: String,
    pub seed: u64,
    pub cell: String,
    pub mse: f64,
    pub r2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MatchedMethod {
    pub method: String,
    pub n: usize,
    pub mse_mean: f64,
    pub mse_std: f64,
    pub r2_mean: f64,
    pub r2_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MatchedReport {
    pub axis: BudgetAxis,
    pub budget: f64,
    pub entries: Vec<MatchedEntry>,
    pub methods: Vec<MatchedMethod>,
}

/// Evaluates every trajectory at one budget on `axis`; the budget defaults
/// to the common feasible one. An explicit budget that some trajectory never
/// reaches is an error listing those trajectories.
pub fn matched_budget_report(trajectories: &[Trajectory], axis: BudgetAxis, budget: Option<f64>) -> Result<MatchedReport> {
    let series = |t: &Trajectory, f: fn(&MetricPoint) -> f64| -> Vec<(f64, f64)> {
        t.points.iter().map(|p| (axis.of(p), f(p))).collect()
    };
    let budget = match budget {
        Some(b) => b,
        None => {
            let all: Vec<Vec<(f64, f64)>> = trajectories.iter().map(|t| series(t, |p| p.mse)).collect();
            common_feasible_budget(&all)?
        }
    };
    let mut entries = Vec::new();
    let mut infeasible = Vec::new();
    for t in trajectories {
        let mse = matched_budget_metric(&series(t, |p| p.mse), budget);
        let r2 = matched_budget_metric(&series(t, |p| p.r2), budget);
        match (mse, r2) {
            (Some(mse), Some(r2)) => entries.push(MatchedEntry {
                method: t.method.clone(),
                seed: t.seed,
                cell: t.cell.clone(),
                mse,
                r2,
            }),
            _ => infeasible.push(format!("{}/{}/seed{}", t.method, t.cell, t.seed)),
        }
    }
    if !infeasible.is_empty() {
        return Err(Error::InfeasibleBudget { budget, infeasible });
    }
    let mut by_method: BTreeMap<&str, Vec<&MatchedEntry>> = BTreeMap::new();
    for e in &entries {
        by_method.entry(&e.method).or_default().push(e);
    }
    let methods = by_method
        .into_iter()
        .map(|(m, es)| {
            let (mse_mean, mse_std) = mean_std(&es.iter().map(|e| e.mse).collect::<Vec<_>>());
            let (r2_mean, r2_std) = mean_std(&es.iter().map(|e| e.r2).collect::<Vec<_>>());
            MatchedMethod { method: m.to_string(), n: es.len(), mse_mean, mse_std, r2_mean, r2_std }
        })
        .collect();
    Ok(MatchedReport { axis, budget, entries, methods })
}

pub fn write_metrics_csv(path: &Path, results: &[RunResult]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in results {
        let method = r.scenario.strategy.to_string();
        let cell = r.scenario.cell_id();
        for p in &r.points {
            w.serialize(MetricRecord::new(&method, r.scenario.seed, &cell, p))?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|rec| rec.map_err(Error::from)).collect()
}

pub fn write_summary_csv(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["cell".to_string(), "method".into(), "n_seeds".into(), "single_seed".into()];
    for m in SUMMARY_METRICS {
        header.push(format!("{m}_mean"));
        header.push(format!("{m}_std"));
    }
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.cell.clone(), r.method.clone(), r.n_seeds.to_string(), r.single_seed.to_string()];
        for (_, m, s) in &r.metrics {
            rec.push(m.to_string());
            rec.push(s.to_string());
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_matched_csv(path: &Path, report: &MatchedReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["axis", "budget", "method", "n", "mse_mean", "mse_std", "r2_mean", "r2_std"])?;
    for m in &report.methods {
        w.write_record([
            report.axis.name().to_string(),
            report.budget.to_string(),
            m.method.clone(),
            m.n.to_string(),
            m.mse_mean.to_string(),
            m.mse_std.to_string(),
            m.r2_mean.to_string(),
            m.r2_std.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// One JSON object per round, then a final summary object.
pub fn write_run_log(path: &Path, result: &RunResult) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for log in &result.rounds {
        serde_json::to_writer(&mut f, &serde_json::json!({ "type": "round", "data": log }))?;
        writeln!(f)?;
    }
    serde_json::to_writer(
        &mut f,
        &serde_json::json!({ "type": "summary", "scenario": result.scenario, "data": result.summary }),
    )?;
    writeln!(f)?;
    f.flush()?;
    Ok(())
}

/// Writes `metrics.csv`, `summary.csv` and `logs/<run>.jsonl` under `out`.
pub fn export_results(out: &Path, results: &[RunResult]) -> Result<Vec<SummaryRow>> {
    fs::create_dir_all(out.join("logs"))?;
    write_metrics_csv(&out.join("metrics.csv"), results)?;
    for r in results {
        write_run_log(&out.join("logs").join(format!("{}.jsonl", r.scenario.file_stem())), r)?;
    }
    let trajectories: Vec<Trajectory> = results.iter().map(Trajectory::from).collect();
    let rows = summarize(&trajectories);
    write_summary_csv(&out.join("summary.csv"), &rows)?;
    Ok(rows)
}
