//! Per-node telemetry: carbon intensity, participation history, disagreement.

use std::collections::{BTreeMap, VecDeque};
use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::rng::{keyed_rng, Stream};
use crate::{Error, Result};

/// Parameters of the synthetic diurnal carbon-intensity generator (gCO2/kWh).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CarbonParams {
    pub mid: f64,
    pub amp: f64,
    /// Period in rounds.
    pub period: f64,
    pub noise_std: f64,
    pub lo: f64,
    pub hi: f64,
}

impl Default for CarbonParams {
    fn default() -> Self {
        CarbonParams {
            mid: 330.0,
            amp: 90.0,
            period: 24.0,
            noise_std: 10.0,
            lo: 180.0,
            hi: 520.0,
        }
    }
}

/// `mid + amp * sin(2 pi t / period + phase_node) + noise`, clamped to `[lo, hi]`.
pub fn carbon_intensity(node: usize, t: u64, params: &CarbonParams, seed: u64) -> f64 {
    let phase = 2.0 * PI * keyed_rng(seed, Stream::CarbonPhase, &[node as u64]).random::<f64>();
    let noise = if params.noise_std > 0.0 {
        let mut rng = keyed_rng(seed, Stream::CarbonNoise, &[node as u64, t]);
        Normal::new(0.0, params.noise_std)
            .expect("finite std")
            .sample(&mut rng)
    } else {
        0.0
    };
    let chi = params.mid + params.amp * (2.0 * PI * (t as f64 / params.period) + phase).sin() + noise;
    chi.clamp(params.lo, params.hi)
}

/// Source of chi_i(t): the synthetic generator or an imported table.
#[derive(Debug, Clone, PartialEq)]
pub enum CarbonTrace {
    Synthetic { params: CarbonParams, seed: u64 },
    /// `table[node]` holds chi per round; rounds past the end wrap around.
    Table(Vec<Vec<f64>>),
}

impl CarbonTrace {
    pub fn chi(&self, node: usize, t: u64) -> f64 {
        match self {
            CarbonTrace::Synthetic { params, seed } => carbon_intensity(node, t, params, *seed),
            CarbonTrace::Table(rows) => {
                let row = &rows[node];
                row[(t % row.len() as u64) as usize]
            }
        }
    }

    pub fn round(&self, n: usize, t: u64) -> Vec<f64> {
        (0..n).map(|i| self.chi(i, t)).collect()
    }

    /// Reads a `node_id, round, chi` table. Every node in `0..n_nodes` must
    /// cover the same contiguous range of rounds starting at 0.
    pub fn read_csv(path: &Path, n_nodes: usize) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
        let mut per_node: Vec<BTreeMap<u64, f64>> = vec![BTreeMap::new(); n_nodes];
        for rec in r.records() {
            let rec = rec?;
            let get = |i: usize| rec.get(i).unwrap_or("");
            let node: usize = get(0)
                .parse()
                .map_err(|_| Error::Data(format!("bad node_id {:?}", get(0))))?;
            let round: u64 = get(1)
                .parse()
                .map_err(|_| Error::Data(format!("bad round {:?}", get(1))))?;
            let chi: f64 = get(2)
                .parse()
                .map_err(|_| Error::Data(format!("bad chi {:?}", get(2))))?;
            if node >= n_nodes {
                return Err(Error::Data(format!("node_id {node} >= {n_nodes}")));
            }
            if !(chi > 0.0 && chi.is_finite()) {
                return Err(Error::Data(format!("chi must be positive, got {chi}")));
            }
            per_node[node].insert(round, chi);
        }
        let rows = per_node
            .into_iter()
            .enumerate()
            .map(|(i, m)| {
                let contiguous = m.keys().copied().eq(0..m.len() as u64);
                if m.is_empty() || !contiguous {
                    return Err(Error::Data(format!(
                        "node {i} must cover rounds 0..k contiguously"
                    )));
                }
                Ok(m.into_values().collect())
            })
            .collect::<Result<_>>()?;
        Ok(CarbonTrace::Table(rows))
    }
}

pub const PARTICIPATION_WINDOW: usize = 8;

/// Sliding-window participation rate and inactivity streak per node.
///
/// Before a node has any history its rate is 1.0; afterwards it is the mean
/// of the (up to) `window_len` most recent activity flags.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticipationTracker {
    window_len: usize,
    windows: Vec<VecDeque<bool>>,
    streaks: Vec<u32>,
}

impl ParticipationTracker {
    pub fn new(n: usize) -> Self {
        Self::with_window(n, PARTICIPATION_WINDOW)
    }

    pub fn with_window(n: usize, window_len: usize) -> Self {
        assert!(window_len > 0);
        ParticipationTracker {
            window_len,
            windows: vec![VecDeque::with_capacity(window_len); n],
            streaks: vec![0; n],
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.streaks.len()
    }

    pub fn update(&mut self, active: &[usize]) -> Result<()> {
        let n = self.n_nodes();
        let mut is_active = vec![false; n];
        for &i in active {
            if i >= n {
                return Err(Error::InvalidArgument(format!("node {i} out of range 0..{n}")));
            }
            is_active[i] = true;
        }
        for (i, flag) in is_active.into_iter().enumerate() {
            let w = &mut self.windows[i];
            if w.len() == self.window_len {
                w.pop_front();
            }
            w.push_back(flag);
            self.streaks[i] = if flag { 0 } else { self.streaks[i] + 1 };
        }
        Ok(())
    }

    pub fn streak(&self, i: usize) -> u32 {
        self.streaks[i]
    }

    pub fn rate(&self, i: usize) -> f64 {
        let w = &self.windows[i];
        if w.is_empty() {
            1.0
        } else {
            w.iter().filter(|&&b| b).count() as f64 / w.len() as f64
        }
    }

    pub fn mean_rate(&self) -> f64 {
        let n = self.n_nodes();
        (0..n).map(|i| self.rate(i)).sum::<f64>() / n as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Telemetry {
    pub loss: f64,
    pub disagreement: f64,
    pub streak: u32,
    pub rate: f64,
    pub chi: f64,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Mean over delivered neighbours of `|x_i - x_j| / (|x_i| + 1e-6)`; 0 with no neighbours.
pub fn disagreement<'a, I>(own: &[f64], neighbors: I) -> Result<f64>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let denom = norm(own) + 1e-6;
    let mut sum = 0.0;
    let mut count = 0usize;
    for nb in neighbors {
        if nb.len() != own.len() {
            return Err(Error::Dimension {
                expected: own.len(),
                got: nb.len(),
            });
        }
        let d = own
            .iter()
            .zip(nb)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        sum += d / denom;
        count += 1;
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}
