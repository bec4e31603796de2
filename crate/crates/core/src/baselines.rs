//! Common per-round strategy interface with CARGO and the four
//! decentralized baselines: D-PSGD, SGP (push-sum), CHOCO-SGD and sparse
//! disagreement-driven gossip.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::accounting::DeviceProfile;
use crate::controller::{
    control_round, dual_update, metropolis, target_active, ControlContext, ControlOutput, ControllerConfig,
    DecisionBundle, DualState, MixingMatrix, RuntimePreset,
};
use crate::dataplane::{
    data_round, exchange_round, sample_mask, CompressionMode, Exchange, NodeState, NodeWork, PayloadKind,
    PayloadRecord, RoundOutcome,
};
use crate::graph::Edge;
use crate::learners::LocalTrainer;
use crate::rng::{keyed_rng, Stream};
use crate::signals::{disagreement, ParticipationTracker, Telemetry};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StrategyName {
    Cargo,
    Dpsgd,
    Sgp,
    Choco,
    Gossip,
}

impl StrategyName {
    pub const ALL: [StrategyName; 5] = [
        StrategyName::Cargo,
        StrategyName::Dpsgd,
        StrategyName::Sgp,
        StrategyName::Choco,
        StrategyName::Gossip,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StrategyName::Cargo => "cargo",
            StrategyName::Dpsgd => "dpsgd",
            StrategyName::Sgp => "sgp",
            StrategyName::Choco => "choco",
            StrategyName::Gossip => "gossip",
        }
    }
}

impl std::fmt::Display for StrategyName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for StrategyName {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "cargo" => Ok(StrategyName::Cargo),
            "dpsgd" => Ok(StrategyName::Dpsgd),
            "sgp" => Ok(StrategyName::Sgp),
            "choco" | "chocosgd" => Ok(StrategyName::Choco),
            "gossip" | "sparsegossip" => Ok(StrategyName::Gossip),
            _ => Err(Error::config("strategy", format!("unknown strategy {s:?}"))),
        }
    }
}

/// Per-strategy overrides; unset ratios fall back to the preset Top-K ratio
/// and unset step sizes to the controller's gossip step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StrategyParams {
    pub choco_topk_ratio: Option<f64>,
    pub choco_gamma: Option<f64>,
    pub gossip_topk_ratio: Option<f64>,
    pub gossip_gamma: Option<f64>,
}

impl StrategyParams {
    pub fn validate(&self) -> Result<()> {
        for (name, r) in [("choco_topk_ratio", self.choco_topk_ratio), ("gossip_topk_ratio", self.gossip_topk_ratio)] {
            if let Some(r) = r {
                if !(r > 0.0 && r <= 1.0) {
                    return Err(Error::config(name, "must lie in (0, 1]"));
                }
            }
        }
        for (name, g) in [("choco_gamma", self.choco_gamma), ("gossip_gamma", self.gossip_gamma)] {
            if let Some(g) = g {
                if !(g > 0.0 && g <= 1.0) {
                    return Err(Error::config(name, "must lie in (0, 1]"));
                }
            }
        }
        Ok(())
    }
}

/// What every strategy sees in a round; identical across strategies for a
/// given `(seed, scenario, round)`.
#[derive(Debug, Clone, Copy)]
pub struct RoundContext<'a> {
    pub round: u64,
    pub available: &'a [usize],
    pub candidates: &'a [Edge],
    pub chi: &'a [f64],
    pub participation_fraction: f64,
    pub loss_p: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StrategyRound {
    pub outcome: RoundOutcome,
    /// Controller decisions, for strategies that have a controller.
    pub control: Option<ControlOutput>,
}

impl From<RoundOutcome> for StrategyRound {
    fn from(outcome: RoundOutcome) -> Self {
        StrategyRound { outcome, control: None }
    }
}

pub trait Strategy: Send {
    fn name(&self) -> StrategyName;

    /// Current per-node model estimates.
    fn models(&self) -> Vec<Vec<f64>>;

    fn step(&mut self, ctx: &RoundContext<'_>, trainer: &mut dyn LocalTrainer) -> Result<StrategyRound>;

    /// Called after the round's costs are booked.
    fn end_round(&mut self, _cumulative_carbon_g: f64) {}

    fn duals(&self) -> DualState {
        DualState::default()
    }

    /// Consensus (average) model.
    fn mean_model(&self) -> Vec<f64> {
        let models = self.models();
        let n = models.len() as f64;
        let mut mean = vec![0.0; models.first().map_or(0, |m| m.len())];
        for m in &models {
            for (a, v) in mean.iter_mut().zip(m) {
                *a += v;
            }
        }
        mean.iter_mut().for_each(|a| *a /= n);
        mean
    }
}

/// Uniform `k`-subset of `available`, keyed by `(seed, round)`, ascending.
pub fn uniform_subset(available: &[usize], k: usize, seed: u64, round: u64) -> Vec<usize> {
    let mut pool = available.to_vec();
    pool.sort_unstable();
    if k < pool.len() {
        let mut rng = keyed_rng(seed, Stream::Participation, &[round]);
        pool.shuffle(&mut rng);
        pool.truncate(k);
        pool.sort_unstable();
    }
    pool
}

/// Candidate edges with both endpoints in `active`.
pub fn active_edges(candidates: &[Edge], active: &[usize]) -> Vec<Edge> {
    let set: BTreeSet<usize> = active.iter().copied().collect();
    candidates
        .iter()
        .copied()
        .filter(|e| set.contains(&e.lo) && set.contains(&e.hi))
        .collect()
}

fn baseline_active(ctx: &RoundContext<'_>, n: usize) -> Vec<usize> {
    let k = target_active(ctx.participation_fraction, n, ctx.available.len());
    uniform_subset(ctx.available, k, ctx.seed, ctx.round)
}

fn fixed_bundle(round: u64, active: Vec<usize>, edges: Vec<Edge>, n: usize, mode: CompressionMode) -> DecisionBundle {
    let mut compression = vec![None; n];
    for &i in &active {
        compression[i] = Some(mode);
    }
    DecisionBundle {
        round,
        mixing: metropolis(&edges, n),
        active,
        edges,
        selections: Vec::new(),
        compression,
        resync: false,
        waking: Vec::new(),
    }
}

fn models_of(states: &[NodeState]) -> Vec<Vec<f64>> {
    states.iter().map(|s| s.x.clone()).collect()
}

/// Shared starting point for every strategy.
#[derive(Debug, Clone, PartialEq)]
pub struct StrategySetup {
    pub x0: Vec<Vec<f64>>,
    /// Local training loss of each node at `x0`.
    pub initial_losses: Vec<f64>,
    /// Estimated FLOPs of one full local epoch per node.
    pub epoch_flops: Vec<u64>,
}

impl StrategySetup {
    pub fn n_nodes(&self) -> usize {
        self.x0.len()
    }

    pub fn dim(&self) -> usize {
        self.x0.first().map_or(0, |x| x.len())
    }

    fn states(&self) -> Vec<NodeState> {
        self.x0.iter().cloned().map(NodeState::new).collect()
    }
}

/// Full-precision gossip with Metropolis mixing over the active topology.
#[derive(Debug, Clone)]
pub struct Dpsgd {
    states: Vec<NodeState>,
}

impl Dpsgd {
    pub fn new(setup: &StrategySetup) -> Self {
        Dpsgd { states: setup.states() }
    }

    /// The decisions D-PSGD applies this round.
    pub fn bundle(&self, ctx: &RoundContext<'_>) -> DecisionBundle {
        let n = self.states.len();
        let active = baseline_active(ctx, n);
        let edges = active_edges(ctx.candidates, &active);
        fixed_bundle(ctx.round, active, edges, n, CompressionMode::Dense)
    }
}

impl Strategy for Dpsgd {
    fn name(&self) -> StrategyName {
        StrategyName::Dpsgd
    }

    fn models(&self) -> Vec<Vec<f64>> {
        models_of(&self.states)
    }

    fn step(&mut self, ctx: &RoundContext<'_>, trainer: &mut dyn LocalTrainer) -> Result<StrategyRound> {
        let bundle = self.bundle(ctx);
        Ok(data_round(&mut self.states, &bundle, 1.0, ctx.loss_p, ctx.seed, trainer)?.into())
    }
}

/// CHOCO-SGD: the compressed error-feedback data plane with one fixed
/// operator, every active candidate edge and no resynchronization.
#[derive(Debug, Clone)]
pub struct Choco {
    states: Vec<NodeState>,
    mode: CompressionMode,
    gamma: f64,
}

impl Choco {
    pub fn new(setup: &StrategySetup, mode: CompressionMode, gamma: f64) -> Self {
        Choco { states: setup.states(), mode, gamma }
    }

    pub fn states(&self) -> &[NodeState] {
        &self.states
    }

    pub fn bundle(&self, ctx: &RoundContext<'_>) -> DecisionBundle {
        let n = self.states.len();
        let active = baseline_active(ctx, n);
        let edges = active_edges(ctx.candidates, &active);
        fixed_bundle(ctx.round, active, edges, n, self.mode)
    }
}

impl Strategy for Choco {
    fn name(&self) -> StrategyName {
        StrategyName::Choco
    }

    fn models(&self) -> Vec<Vec<f64>> {
        models_of(&self.states)
    }

    fn step(&mut self, ctx: &RoundContext<'_>, trainer: &mut dyn LocalTrainer) -> Result<StrategyRound> {
        let bundle = self.bundle(ctx);
        Ok(data_round(&mut self.states, &bundle, self.gamma, ctx.loss_p, ctx.seed, trainer)?.into())
    }
}

/// Push-sum numerators and weights; the model estimate is `z / weight`.
#[derive(Debug, Clone, PartialEq)]
pub struct PushSumState {
    pub z: Vec<Vec<f64>>,
    pub weight: Vec<f64>,
}

impl PushSumState {
    pub fn new(x0: &[Vec<f64>]) -> Self {
        PushSumState { z: x0.to_vec(), weight: vec![1.0; x0.len()] }
    }

    pub fn estimate(&self, i: usize) -> Vec<f64> {
        self.z[i].iter().map(|v| v / self.weight[i]).collect()
    }

    pub fn total_weight(&self) -> f64 {
        self.weight.iter().sum()
    }
}

/// Below this largest weight the whole state is rescaled to avoid underflow.
const PUSH_SUM_RESCALE_BELOW: f64 = 1e-100;

/// Stochastic gradient push over both directions of the active candidate edges.
#[derive(Debug, Clone)]
pub struct Sgp {
    state: PushSumState,
}

impl Sgp {
    pub fn new(setup: &StrategySetup) -> Self {
        Sgp { state: PushSumState::new(&setup.x0) }
    }

    pub fn state(&self) -> &PushSumState {
        &self.state
    }
}

impl Strategy for Sgp {
    fn name(&self) -> StrategyName {
        StrategyName::Sgp
    }

    fn models(&self) -> Vec<Vec<f64>> {
        (0..self.state.weight.len()).map(|i| self.state.estimate(i)).collect()
    }

    fn step(&mut self, ctx: &RoundContext<'_>, trainer: &mut dyn LocalTrainer) -> Result<StrategyRound> {
        let n = self.state.weight.len();
        let dim = self.state.z.first().map_or(0, |z| z.len());
        let active = baseline_active(ctx, n);
        let mut outcome = RoundOutcome { active: active.clone(), ..Default::default() };
        if active.is_empty() {
            return Ok(outcome.into());
        }

        for &i in &active {
            let upd = trainer.train(i, &self.state.estimate(i))?;
            let w = self.state.weight[i];
            self.state.z[i] = upd.x.iter().map(|v| v * w).collect();
            outcome.work.push(NodeWork { node: i, flops: upd.flops, steps: upd.steps });
            outcome.losses.push((i, upd.loss));
        }

        let edges = active_edges(ctx.candidates, &active);
        let mask = sample_mask(&edges, ctx.loss_p, ctx.seed, ctx.round)?;
        let mut out_deg = vec![0usize; n];
        for e in &edges {
            out_deg[e.lo] += 1;
            out_deg[e.hi] += 1;
        }
        let mut next_z = self.state.z.clone();
        let mut next_w = self.state.weight.clone();
        for &i in &active {
            let share = 1.0 / (out_deg[i] + 1) as f64;
            next_z[i].iter_mut().for_each(|v| *v *= share);
            next_w[i] *= share;
        }
        for e in &edges {
            for (s, r) in [(e.lo, e.hi), (e.hi, e.lo)] {
                let delivered = mask.delivered(s, r);
                outcome.payloads.push(PayloadRecord::new(
                    s,
                    r,
                    CompressionMode::Dense,
                    PayloadKind::PushSum,
                    dim,
                    delivered,
                ));
                if delivered {
                    let share = 1.0 / (out_deg[s] + 1) as f64;
                    for (a, v) in next_z[r].iter_mut().zip(&self.state.z[s]) {
                        *a += share * v;
                    }
                    next_w[r] += share * self.state.weight[s];
                }
            }
        }
        self.state.z = next_z;
        self.state.weight = next_w;

        // Lost shares shrink the total mass geometrically; ratios are
        // unaffected by a common rescale.
        let max_w = self.state.weight.iter().cloned().fold(0.0, f64::max);
        if max_w < PUSH_SUM_RESCALE_BELOW {
            let s = 1.0 / max_w;
            self.state.weight.iter_mut().for_each(|w| *w *= s);
            self.state.z.iter_mut().flatten().for_each(|v| *v *= s);
        }
        outcome.mask = mask;
        Ok(outcome.into())
    }
}

/// One message per active node to the neighbour with the largest loss gap,
/// Top-K error-feedback payloads and half-weight pairwise averaging.
#[derive(Debug, Clone)]
pub struct SparseGossip {
    states: Vec<NodeState>,
    losses: Vec<f64>,
    mode: CompressionMode,
    gamma: f64,
}

impl SparseGossip {
    pub fn new(setup: &StrategySetup, mode: CompressionMode, gamma: f64) -> Self {
        SparseGossip {
            states: setup.states(),
            losses: setup.initial_losses.clone(),
            mode,
            gamma,
        }
    }
}

/// Each active node's partner: the active candidate neighbour maximizing
/// `|loss_i - loss_j|`, ties to the lowest id.
pub fn pick_partners(active: &[usize], candidates: &[Edge], losses: &[f64]) -> Vec<(usize, usize)> {
    let edges = active_edges(candidates, active);
    let mut out = Vec::new();
    for &i in active {
        let best = edges
            .iter()
            .filter(|e| e.touches(i))
            .map(|e| e.other(i))
            .map(|j| ((losses[i] - losses[j]).abs(), j))
            .max_by(|a, b| a.0.total_cmp(&b.0).then(b.1.cmp(&a.1)));
        if let Some((_, j)) = best {
            out.push((i, j));
        }
    }
    out
}

/// Receiver rows: self weight 1/2, the other half split over incoming senders.
fn pairwise_mixing(messages: &[(usize, usize)], n: usize) -> MixingMatrix {
    let mut senders = vec![Vec::new(); n];
    for &(s, r) in messages {
        senders[r].push(s);
    }
    let mut w = MixingMatrix::identity(n);
    for (r, ss) in senders.iter().enumerate() {
        if ss.is_empty() {
            continue;
        }
        w.set(r, r, 0.5);
        for &s in ss {
            w.set(r, s, 0.5 / ss.len() as f64);
        }
    }
    w
}

impl Strategy for SparseGossip {
    fn name(&self) -> StrategyName {
        StrategyName::Gossip
    }

    fn models(&self) -> Vec<Vec<f64>> {
        models_of(&self.states)
    }

    fn step(&mut self, ctx: &RoundContext<'_>, trainer: &mut dyn LocalTrainer) -> Result<StrategyRound> {
        let n = self.states.len();
        let active = baseline_active(ctx, n);
        let messages = pick_partners(&active, ctx.candidates, &self.losses);
        let mixing = pairwise_mixing(&messages, n);
        let mut compression = vec![None; n];
        for &i in &active {
            compression[i] = Some(self.mode);
        }
        let ex = Exchange {
            round: ctx.round,
            active: &active,
            messages: &messages,
            mixing: &mixing,
            compression: &compression,
            gamma: self.gamma,
            loss_p: ctx.loss_p,
            seed: ctx.seed,
        };
        let outcome = exchange_round(&mut self.states, &ex, trainer)?;
        for &(i, l) in &outcome.losses {
            self.losses[i] = l;
        }
        Ok(outcome.into())
    }
}

/// The carbon-aware controller driving the compressed data plane.
#[derive(Debug, Clone)]
pub struct Cargo {
    states: Vec<NodeState>,
    losses: Vec<f64>,
    disagreement: Vec<f64>,
    tracker: ParticipationTracker,
    duals: DualState,
    config: ControllerConfig,
    preset: RuntimePreset,
    profile: DeviceProfile,
    epoch_flops: Vec<u64>,
    budget_g: f64,
}

impl Cargo {
    pub fn new(
        setup: &StrategySetup,
        config: ControllerConfig,
        preset: RuntimePreset,
        profile: DeviceProfile,
        budget_g: f64,
    ) -> Result<Self> {
        config.validate()?;
        preset.validate()?;
        profile.validate()?;
        if !(budget_g > 0.0) {
            return Err(Error::config("carbon_budget", "must be positive"));
        }
        let n = setup.n_nodes();
        Ok(Cargo {
            states: setup.states(),
            losses: setup.initial_losses.clone(),
            disagreement: vec![0.0; n],
            tracker: ParticipationTracker::new(n),
            duals: DualState::default(),
            config,
            preset,
            profile,
            epoch_flops: setup.epoch_flops.clone(),
            budget_g,
        })
    }

    pub fn states(&self) -> &[NodeState] {
        &self.states
    }

    pub fn tracker(&self) -> &ParticipationTracker {
        &self.tracker
    }

    pub fn budget_g(&self) -> f64 {
        self.budget_g
    }

    pub fn telemetry(&self, chi: &[f64]) -> Vec<Telemetry> {
        (0..self.states.len())
            .map(|i| Telemetry {
                loss: self.losses[i],
                disagreement: self.disagreement[i],
                streak: self.tracker.streak(i),
                rate: self.tracker.rate(i),
                chi: chi[i],
            })
            .collect()
    }
}

impl Strategy for Cargo {
    fn name(&self) -> StrategyName {
        StrategyName::Cargo
    }

    fn models(&self) -> Vec<Vec<f64>> {
        models_of(&self.states)
    }

    fn step(&mut self, ctx: &RoundContext<'_>, trainer: &mut dyn LocalTrainer) -> Result<StrategyRound> {
        let telemetry = self.telemetry(ctx.chi);
        let config = ControllerConfig {
            participation_fraction: ctx.participation_fraction,
            ..self.config.clone()
        };
        let control = control_round(&ControlContext {
            round: ctx.round,
            available: ctx.available,
            candidates: ctx.candidates,
            telemetry: &telemetry,
            duals: self.duals,
            config: &config,
            preset: &self.preset,
            profile: &self.profile,
            dim: self.states.first().map_or(0, |s| s.x.len()),
            flops: &self.epoch_flops,
        })?;
        let outcome = data_round(
            &mut self.states,
            &control.bundle,
            self.config.gamma,
            ctx.loss_p,
            ctx.seed,
            trainer,
        )?;
        for &(i, l) in &outcome.losses {
            self.losses[i] = l;
        }
        for &i in &outcome.active {
            let senders = outcome.delivered_senders(i);
            let nbrs = senders.iter().map(|&j| self.states[j].h.as_slice());
            self.disagreement[i] = disagreement(&self.states[i].x, nbrs)?;
        }
        self.tracker.update(&outcome.active)?;
        Ok(StrategyRound { outcome, control: Some(control) })
    }

    fn end_round(&mut self, cumulative_carbon_g: f64) {
        self.duals = dual_update(
            &self.duals,
            cumulative_carbon_g,
            self.budget_g,
            self.tracker.mean_rate(),
            &self.config,
        );
    }

    fn duals(&self) -> DualState {
        self.duals
    }
}

/// Builds the named strategy from shared settings.
pub fn build_strategy(
    name: StrategyName,
    setup: &StrategySetup,
    params: &StrategyParams,
    config: &ControllerConfig,
    preset: &RuntimePreset,
    profile: &DeviceProfile,
    budget_g: f64,
) -> Result<Box<dyn Strategy>> {
    params.validate()?;
    let topk = |r: Option<f64>| CompressionMode::TopK { ratio: r.unwrap_or(preset.topk_ratio) };
    Ok(match name {
        StrategyName::Cargo => Box::new(Cargo::new(setup, config.clone(), *preset, *profile, budget_g)?),
        StrategyName::Dpsgd => Box::new(Dpsgd::new(setup)),
        StrategyName::Sgp => Box::new(Sgp::new(setup)),
        StrategyName::Choco => Box::new(Choco::new(
            setup,
            topk(params.choco_topk_ratio),
            params.choco_gamma.unwrap_or(config.gamma),
        )),
        StrategyName::Gossip => Box::new(SparseGossip::new(
            setup,
            topk(params.gossip_topk_ratio),
            params.gossip_gamma.unwrap_or(config.gamma),
        )),
    })
}
