//! Energy, carbon and byte ledger, plus matched-budget interpolation.

use serde::{Deserialize, Serialize};

use crate::controller::{DualState, J_PER_KWH};
use crate::dataplane::{NodeWork, PayloadRecord};
use crate::{Error, Result};

pub const BYTES_PER_MB: f64 = 1e6;

/// Homogeneous edge-device profile shared by every node.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DeviceProfile {
    pub active_power_w: f64,
    pub idle_power_w: f64,
    pub throughput_flops: f64,
    pub energy_per_byte_j: f64,
    pub link_efficiency: f64,
}

impl Default for DeviceProfile {
    fn default() -> Self {
        DeviceProfile {
            active_power_w: 10.0,
            idle_power_w: 1.5,
            throughput_flops: 2.0e10,
            energy_per_byte_j: 2.0e-7,
            link_efficiency: 1.0,
        }
    }
}

impl DeviceProfile {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("active_power_w", self.active_power_w),
            ("idle_power_w", self.idle_power_w),
            ("throughput_flops", self.throughput_flops),
            ("energy_per_byte_j", self.energy_per_byte_j),
            ("link_efficiency", self.link_efficiency),
        ];
        for (name, v) in fields {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(name, format!("must be positive, got {v}")));
            }
        }
        Ok(())
    }

    /// Seconds needed to execute `flops`.
    pub fn compute_seconds(&self, flops: u64) -> f64 {
        flops as f64 / self.throughput_flops
    }
}

/// `(flops / tau) * P_active`.
pub fn compute_energy(flops: u64, profile: &DeviceProfile) -> f64 {
    profile.compute_seconds(flops) * profile.active_power_w
}

/// `(tx + rx) * energy_per_byte * link_efficiency`.
pub fn comm_energy(tx_bytes: u64, rx_bytes: u64, profile: &DeviceProfile) -> f64 {
    let per_byte = profile.energy_per_byte_j * profile.link_efficiency;
    tx_bytes as f64 * per_byte + rx_bytes as f64 * per_byte
}

/// Grams CO2e for `energy_j` joules at intensity `chi` gCO2/kWh.
pub fn carbon_of(energy_j: f64, chi: f64) -> f64 {
    energy_j / J_PER_KWH * chi
}

/// Aggregated cost of one round.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RoundCost {
    pub round: u64,
    pub energy_comp_j: f64,
    pub energy_comm_j: f64,
    pub energy_idle_j: f64,
    /// `comp + comm + idle`.
    pub energy_total_j: f64,
    pub carbon_g: f64,
    pub bytes_attempted: u64,
    pub bytes_delivered: u64,
    pub messages_attempted: u64,
    pub messages_delivered: u64,
}

/// Inputs to one round's cost.
#[derive(Debug, Clone, Copy)]
pub struct RoundUsage<'a> {
    pub round: u64,
    pub work: &'a [NodeWork],
    pub payloads: &'a [PayloadRecord],
    /// Carbon intensity per node this round.
    pub chi: &'a [f64],
    /// Nodes that did no training this round (unavailable or not selected).
    pub idle: &'a [usize],
    /// Nominal round duration used for idle charging; 0 disables idle energy.
    pub idle_seconds: f64,
}

/// Charges compute and idle energy at each node's intensity, tx energy at the
/// sender for every attempt and rx energy at the receiver for deliveries.
pub fn round_cost(usage: &RoundUsage<'_>, profile: &DeviceProfile) -> Result<RoundCost> {
    let n = usage.chi.len();
    let check = |i: usize| {
        if i < n {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("node {i} has no carbon intensity")))
        }
    };
    let mut cost = RoundCost {
        round: usage.round,
        ..Default::default()
    };
    for w in usage.work {
        check(w.node)?;
        let e = compute_energy(w.flops, profile);
        cost.energy_comp_j += e;
        cost.carbon_g += carbon_of(e, usage.chi[w.node]);
    }
    for &i in usage.idle {
        check(i)?;
        let e = usage.idle_seconds * profile.idle_power_w;
        cost.energy_idle_j += e;
        cost.carbon_g += carbon_of(e, usage.chi[i]);
    }
    for p in usage.payloads {
        check(p.sender)?;
        check(p.receiver)?;
        let tx = comm_energy(p.bytes_attempted, 0, profile);
        let rx = comm_energy(0, p.bytes_delivered(), profile);
        cost.energy_comm_j += tx + rx;
        cost.carbon_g += carbon_of(tx, usage.chi[p.sender]) + carbon_of(rx, usage.chi[p.receiver]);
        cost.bytes_attempted += p.bytes_attempted;
        cost.bytes_delivered += p.bytes_delivered();
        cost.messages_attempted += 1;
        cost.messages_delivered += u64::from(p.delivered);
    }
    cost.energy_total_j = cost.energy_comp_j + cost.energy_comm_j + cost.energy_idle_j;
    Ok(cost)
}

/// One evaluation point of a run trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricPoint {
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
    /// Set on a final point reached before a full evaluation interval.
    pub partial: bool,
}

/// Per-run cumulative ledger.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CarbonLedger {
    pub rounds: Vec<RoundCost>,
    pub duals: Vec<DualState>,
    pub trajectory: Vec<MetricPoint>,
    cumulative_energy_j: f64,
    cumulative_carbon_g: f64,
    cumulative_attempted: u64,
    cumulative_delivered: u64,
    cumulative_messages: u64,
}

impl CarbonLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record_round(&mut self, cost: RoundCost) {
        self.cumulative_energy_j += cost.energy_total_j;
        self.cumulative_carbon_g += cost.carbon_g;
        self.cumulative_attempted += cost.bytes_attempted;
        self.cumulative_delivered += cost.bytes_delivered;
        self.cumulative_messages += cost.messages_attempted;
        self.rounds.push(cost);
    }

    pub fn record_duals(&mut self, duals: DualState) {
        self.duals.push(duals);
    }

    pub fn record_point(&mut self, point: MetricPoint) {
        self.trajectory.push(point);
    }

    pub fn cumulative_energy_j(&self) -> f64 {
        self.cumulative_energy_j
    }

    pub fn cumulative_carbon_g(&self) -> f64 {
        self.cumulative_carbon_g
    }

    pub fn bytes_attempted(&self) -> u64 {
        self.cumulative_attempted
    }

    pub fn bytes_delivered(&self) -> u64 {
        self.cumulative_delivered
    }

    pub fn messages_attempted(&self) -> u64 {
        self.cumulative_messages
    }

    pub fn attempted_mb(&self) -> f64 {
        self.cumulative_attempted as f64 / BYTES_PER_MB
    }

    pub fn delivered_mb(&self) -> f64 {
        self.cumulative_delivered as f64 / BYTES_PER_MB
    }

    pub fn effective_loss(&self) -> Option<f64> {
        effective_loss(self.cumulative_attempted, self.cumulative_delivered)
    }
}

/// `1 - delivered / attempted`; `None` when nothing was attempted.
pub fn effective_loss(attempted: u64, delivered: u64) -> Option<f64> {
    if attempted == 0 {
        None
    } else {
        Some(1.0 - delivered as f64 / attempted as f64)
    }
}

/// Abscissa used for matched-budget comparisons.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BudgetAxis {
    Carbon,
    DeliveredMb,
}

impl BudgetAxis {
    pub fn of(&self, p: &MetricPoint) -> f64 {
        match self {
            BudgetAxis::Carbon => p.carbon_g,
            BudgetAxis::DeliveredMb => p.delivered_mb,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            BudgetAxis::Carbon => "carbon",
            BudgetAxis::DeliveredMb => "delivered-mb",
        }
    }
}

impl std::str::FromStr for BudgetAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "carbon" => Ok(BudgetAxis::Carbon),
            "delivered-mb" | "delivered_mb" | "delivered" => Ok(BudgetAxis::DeliveredMb),
            other => Err(Error::config("axis", format!("unknown axis {other:?}"))),
        }
    }
}

/// Piecewise-linear metric at `budget` along `(abscissa, metric)` points
/// sorted by nondecreasing abscissa. `None` when the budget lies outside the
/// recorded range. On flat stretches the latest point at the budget is used.
pub fn matched_budget_metric(points: &[(f64, f64)], budget: f64) -> Option<f64> {
    let first = points.first()?;
    if budget < first.0 || !budget.is_finite() {
        return None;
    }
    match points.iter().position(|&(x, _)| x > budget) {
        None => {
            let last = points.last()?;
            (last.0 == budget).then_some(last.1)
        }
        Some(k) => {
            let (x0, y0) = points[k - 1];
            let (x1, y1) = points[k];
            Some(y0 + (y1 - y0) * (budget - x0) / (x1 - x0))
        }
    }
}

/// Largest budget every trajectory reaches: the minimum of per-trajectory maxima.
pub fn common_feasible_budget(trajectories: &[Vec<(f64, f64)>]) -> Result<f64> {
    if trajectories.is_empty() {
        return Err(Error::InvalidArgument("no trajectories".into()));
    }
    let mut budget = f64::INFINITY;
    for (k, t) in trajectories.iter().enumerate() {
        let max = t
            .iter()
            .map(|p| p.0)
            .fold(None, |m: Option<f64>, x| Some(m.map_or(x, |m| m.max(x))))
            .ok_or_else(|| Error::InvalidArgument(format!("trajectory {k} is empty")))?;
        budget = budget.min(max);
    }
    Ok(budget)
}
