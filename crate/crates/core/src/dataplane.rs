//! Compressed gossip execution: local training, error-feedback compression,
//! packet loss, delivered-weight renormalization, memory mixing and resync.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::controller::{metropolis, DecisionBundle, MixingMatrix};
use crate::graph::Edge;
use crate::learners::LocalTrainer;
use crate::rng::{keyed_rng, Stream};
use crate::{Error, Result};

/// Bytes per transmitted scalar or index.
pub const WORD_BYTES: u64 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum CompressionMode {
    Dense,
    Int8,
    TopK { ratio: f64 },
}

impl CompressionMode {
    pub fn label(&self) -> &'static str {
        match self {
            CompressionMode::Dense => "dense",
            CompressionMode::Int8 => "int8",
            CompressionMode::TopK { .. } => "topk",
        }
    }
}

/// `ceil(ratio * dim)`, clamped to `[1, dim]`. The small offset keeps
/// products such as `0.05 * 1000` from rounding up past the exact integer.
pub fn topk_count(ratio: f64, dim: usize) -> usize {
    ((ratio * dim as f64 - 1e-9).ceil() as usize).clamp(1, dim.max(1))
}

/// Wire size: dense `4P`, int8 `P + 4`, top-k `8 ceil(ratio P)` (value + index).
pub fn payload_bytes(mode: CompressionMode, dim: usize) -> u64 {
    let dim_b = dim as u64;
    match mode {
        CompressionMode::Dense => WORD_BYTES * dim_b,
        CompressionMode::Int8 => dim_b + WORD_BYTES,
        CompressionMode::TopK { ratio } => 2 * WORD_BYTES * topk_count(ratio, dim) as u64,
    }
}

/// Wire representation of a compressed vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Payload {
    Dense(Vec<f64>),
    Int8 { scale: f64, codes: Vec<i8> },
    TopK { dim: usize, indices: Vec<u32>, values: Vec<f64> },
}

impl Payload {
    pub fn reconstruct(&self) -> Vec<f64> {
        match self {
            Payload::Dense(v) => v.clone(),
            Payload::Int8 { scale, codes } => codes.iter().map(|&c| c as f64 * scale).collect(),
            Payload::TopK { dim, indices, values } => {
                let mut out = vec![0.0; *dim];
                for (&i, &v) in indices.iter().zip(values) {
                    out[i as usize] = v;
                }
                out
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Compressed {
    pub payload: Payload,
    pub reconstructed: Vec<f64>,
}

pub fn compress(v: &[f64], mode: CompressionMode) -> Compressed {
    let payload = match mode {
        CompressionMode::Dense => Payload::Dense(v.to_vec()),
        CompressionMode::Int8 => {
            let max_abs = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            if max_abs == 0.0 {
                Payload::Int8 {
                    scale: 0.0,
                    codes: vec![0; v.len()],
                }
            } else {
                let scale = max_abs / 127.0;
                let codes = v
                    .iter()
                    .map(|x| (x / scale).round().clamp(-127.0, 127.0) as i8)
                    .collect();
                Payload::Int8 { scale, codes }
            }
        }
        CompressionMode::TopK { ratio } => {
            let k = topk_count(ratio, v.len()).min(v.len());
            let mut order: Vec<usize> = (0..v.len()).collect();
            order.sort_by(|&a, &b| v[b].abs().total_cmp(&v[a].abs()).then(a.cmp(&b)));
            let mut kept: Vec<usize> = order.into_iter().take(k).collect();
            kept.sort_unstable();
            Payload::TopK {
                dim: v.len(),
                values: kept.iter().map(|&i| v[i]).collect(),
                indices: kept.into_iter().map(|i| i as u32).collect(),
            }
        }
    };
    let reconstructed = payload.reconstruct();
    Compressed {
        payload,
        reconstructed,
    }
}

/// Model `x` and error-feedback memory `h` of one node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeState {
    pub x: Vec<f64>,
    pub h: Vec<f64>,
}

impl NodeState {
    /// Memory starts at the model.
    pub fn new(x: Vec<f64>) -> Self {
        NodeState { h: x.clone(), x }
    }
}

/// `e = x~ - h`, `e^ = Q(e)`, `h' = h + e^`. Returns `(h', compressed e^)`.
pub fn error_feedback(state: &NodeState, trained: &[f64], mode: CompressionMode) -> Result<(Vec<f64>, Compressed)> {
    if trained.len() != state.h.len() {
        return Err(Error::Dimension {
            expected: state.h.len(),
            got: trained.len(),
        });
    }
    let err: Vec<f64> = trained.iter().zip(&state.h).map(|(x, h)| x - h).collect();
    let c = compress(&err, mode);
    // Under the identity operator h + (x~ - h) is x~; take it exactly.
    let h_new = if mode == CompressionMode::Dense {
        trained.to_vec()
    } else {
        state.h.iter().zip(&c.reconstructed).map(|(h, e)| h + e).collect()
    };
    Ok((h_new, c))
}

/// Per directed message delivery flags, keyed by `(sender, receiver)`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DeliveryMask {
    flags: BTreeMap<(usize, usize), bool>,
}

impl DeliveryMask {
    pub fn all_delivered(edges: &[Edge]) -> Self {
        let mut flags = BTreeMap::new();
        for e in edges {
            flags.insert((e.lo, e.hi), true);
            flags.insert((e.hi, e.lo), true);
        }
        DeliveryMask { flags }
    }

    pub fn set(&mut self, sender: usize, receiver: usize, delivered: bool) {
        self.flags.insert((sender, receiver), delivered);
    }

    /// Self-delivery always holds; messages not in the mask were never sent.
    pub fn delivered(&self, sender: usize, receiver: usize) -> bool {
        sender == receiver || self.flags.get(&(sender, receiver)).copied().unwrap_or(false)
    }

    pub fn iter(&self) -> impl Iterator<Item = ((usize, usize), bool)> + '_ {
        self.flags.iter().map(|(&k, &v)| (k, v))
    }

    pub fn len(&self) -> usize {
        self.flags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flags.is_empty()
    }
}

fn check_loss_probability(p: f64) -> Result<()> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::config("loss_p", format!("{p} must lie in [0, 1)")));
    }
    Ok(())
}

/// Bernoulli delivery for one directed message, keyed by `(seed, round, sender, receiver)`.
pub fn message_delivered(p: f64, seed: u64, round: u64, sender: usize, receiver: usize) -> bool {
    if p == 0.0 {
        return true;
    }
    let mut rng = keyed_rng(seed, Stream::PacketLoss, &[round, sender as u64, receiver as u64]);
    rng.random::<f64>() >= p
}

/// Independent per-direction drops over the activated undirected edges.
pub fn sample_mask(edges: &[Edge], p: f64, seed: u64, round: u64) -> Result<DeliveryMask> {
    sample_directed_mask(&directed_pairs(edges), p, seed, round)
}

pub fn sample_directed_mask(pairs: &[(usize, usize)], p: f64, seed: u64, round: u64) -> Result<DeliveryMask> {
    check_loss_probability(p)?;
    let mut mask = DeliveryMask::default();
    for &(s, r) in pairs {
        mask.set(s, r, message_delivered(p, seed, round, s, r));
    }
    Ok(mask)
}

/// Drops undelivered neighbour weights and renormalizes each row; a row with
/// no surviving weight becomes the identity row.
pub fn delivered_mixing(w: &MixingMatrix, mask: &DeliveryMask) -> MixingMatrix {
    let n = w.n();
    let mut out = MixingMatrix::identity(n);
    for i in 0..n {
        let masked: Vec<f64> = (0..n)
            .map(|j| if mask.delivered(j, i) { w.get(i, j) } else { 0.0 })
            .collect();
        let denom: f64 = masked.iter().sum();
        if denom > 0.0 {
            for (j, m) in masked.into_iter().enumerate() {
                out.set(i, j, m / denom);
            }
        }
    }
    out
}

/// For each node in `trained`: `h_bar = sum_j w~_ij h_j` over post-update
/// memories, then `x = x~ + gamma (h_bar - h)`. Other nodes are untouched.
pub fn mix_and_update(
    states: &mut [NodeState],
    trained: &BTreeMap<usize, Vec<f64>>,
    w: &MixingMatrix,
    gamma: f64,
) -> Result<()> {
    let n = states.len();
    if w.n() != n {
        return Err(Error::Dimension {
            expected: n,
            got: w.n(),
        });
    }
    let mut updates = Vec::with_capacity(trained.len());
    for (&i, x_tilde) in trained {
        let dim = states[i].h.len();
        let mut h_bar = vec![0.0; dim];
        for j in 0..n {
            let wij = w.get(i, j);
            if wij != 0.0 {
                for (acc, hj) in h_bar.iter_mut().zip(&states[j].h) {
                    *acc += wij * hj;
                }
            }
        }
        let x_new: Vec<f64> = x_tilde
            .iter()
            .zip(h_bar.iter().zip(&states[i].h))
            .map(|(xt, (hb, hi))| xt + gamma * (hb - hi))
            .collect();
        updates.push((i, x_new));
    }
    for (i, x) in updates {
        states[i].x = x;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PayloadKind {
    Gossip,
    /// Push-sum share: model payload plus one weight scalar.
    PushSum,
    Resync,
}

/// One attempted directed transmission.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PayloadRecord {
    pub sender: usize,
    pub receiver: usize,
    pub mode: CompressionMode,
    pub kind: PayloadKind,
    pub bytes_attempted: u64,
    pub delivered: bool,
}

impl PayloadRecord {
    pub fn new(sender: usize, receiver: usize, mode: CompressionMode, kind: PayloadKind, dim: usize, delivered: bool) -> Self {
        let extra = if kind == PayloadKind::PushSum { WORD_BYTES } else { 0 };
        PayloadRecord {
            sender,
            receiver,
            mode,
            kind,
            bytes_attempted: payload_bytes(mode, dim) + extra,
            delivered,
        }
    }

    pub fn bytes_delivered(&self) -> u64 {
        if self.delivered {
            self.bytes_attempted
        } else {
            0
        }
    }
}

/// Resynchronizes `nodes`: each pulls full-precision models over its
/// delivered activated links, takes the renormalized Metropolis mix and
/// resets `h <- x`. Returns the resync payload records.
pub fn resynchronize(
    states: &mut [NodeState],
    activated: &[Edge],
    mask: &DeliveryMask,
    nodes: &[usize],
) -> Vec<PayloadRecord> {
    let n = states.len();
    let dim = states.first().map_or(0, |s| s.x.len());
    let w = delivered_mixing(&metropolis(activated, n), mask);
    let mixed: Vec<(usize, Vec<f64>)> = nodes
        .iter()
        .map(|&i| {
            let mut acc = vec![0.0; dim];
            for j in 0..n {
                let wij = w.get(i, j);
                if wij != 0.0 {
                    for (a, xj) in acc.iter_mut().zip(&states[j].x) {
                        *a += wij * xj;
                    }
                }
            }
            (i, acc)
        })
        .collect();
    for (i, x) in mixed {
        states[i].h = x.clone();
        states[i].x = x;
    }
    let mut records = Vec::new();
    for e in activated {
        for (s, r) in [(e.lo, e.hi), (e.hi, e.lo)] {
            if nodes.contains(&r) && mask.delivered(s, r) {
                records.push(PayloadRecord::new(s, r, CompressionMode::Dense, PayloadKind::Resync, dim, true));
            }
        }
    }
    records
}

/// Compute performed by one node in a round.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NodeWork {
    pub node: usize,
    pub flops: u64,
    pub steps: u64,
}

/// What a round did, for telemetry and accounting.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RoundOutcome {
    pub active: Vec<usize>,
    pub payloads: Vec<PayloadRecord>,
    pub work: Vec<NodeWork>,
    /// Epoch-mean training loss per trained node.
    pub losses: Vec<(usize, f64)>,
    pub mask: DeliveryMask,
}

impl RoundOutcome {
    pub fn local_steps(&self) -> u64 {
        self.work.iter().map(|w| w.steps).sum()
    }

    /// Senders whose gossip payload reached `receiver` this round.
    pub fn delivered_senders(&self, receiver: usize) -> Vec<usize> {
        let mut s: Vec<usize> = self
            .payloads
            .iter()
            .filter(|p| p.receiver == receiver && p.delivered && p.kind != PayloadKind::Resync)
            .map(|p| p.sender)
            .collect();
        s.sort_unstable();
        s.dedup();
        s
    }
}

/// Runs local training for each active node and returns `x~` keyed by node,
/// recording work and losses into `outcome`.
pub(crate) fn train_active(
    states: &[NodeState],
    active: &[usize],
    trainer: &mut dyn LocalTrainer,
    outcome: &mut RoundOutcome,
) -> Result<BTreeMap<usize, Vec<f64>>> {
    let mut trained = BTreeMap::new();
    for &i in active {
        let upd = trainer.train(i, &states[i].x)?;
        outcome.work.push(NodeWork {
            node: i,
            flops: upd.flops,
            steps: upd.steps,
        });
        outcome.losses.push((i, upd.loss));
        trained.insert(i, upd.x);
    }
    Ok(trained)
}

/// Inputs to a compressed exchange over explicit directed messages.
#[derive(Debug, Clone, Copy)]
pub struct Exchange<'a> {
    pub round: u64,
    pub active: &'a [usize],
    /// `(sender, receiver)` pairs; both endpoints must be active.
    pub messages: &'a [(usize, usize)],
    pub mixing: &'a MixingMatrix,
    pub compression: &'a [Option<CompressionMode>],
    pub gamma: f64,
    pub loss_p: f64,
    pub seed: u64,
}

/// Local training, error feedback, per-message loss, delivered mixing and
/// the state update, for an arbitrary set of directed messages.
pub fn exchange_round(states: &mut [NodeState], ex: &Exchange<'_>, trainer: &mut dyn LocalTrainer) -> Result<RoundOutcome> {
    let n = states.len();
    let dim = states.first().map_or(0, |s| s.x.len());
    let mut outcome = RoundOutcome {
        active: ex.active.to_vec(),
        ..Default::default()
    };
    if ex.active.is_empty() {
        return Ok(outcome);
    }
    if ex.mixing.n() != n || ex.compression.len() != n {
        return Err(Error::Dimension {
            expected: n,
            got: ex.mixing.n(),
        });
    }
    let mode_of = |i: usize| {
        ex.compression[i].ok_or_else(|| Error::InvalidArgument(format!("active node {i} has no compression mode")))
    };

    let trained = train_active(states, ex.active, trainer, &mut outcome)?;
    for (&i, x_tilde) in &trained {
        let (h_new, _) = error_feedback(&states[i], x_tilde, mode_of(i)?)?;
        states[i].h = h_new;
    }

    let mask = sample_directed_mask(ex.messages, ex.loss_p, ex.seed, ex.round)?;
    for &(s, r) in ex.messages {
        outcome
            .payloads
            .push(PayloadRecord::new(s, r, mode_of(s)?, PayloadKind::Gossip, dim, mask.delivered(s, r)));
    }

    let w_tilde = delivered_mixing(ex.mixing, &mask);
    mix_and_update(states, &trained, &w_tilde, ex.gamma)?;
    outcome.mask = mask;
    Ok(outcome)
}

/// Both directions of every undirected edge, in edge order.
pub fn directed_pairs(edges: &[Edge]) -> Vec<(usize, usize)> {
    edges.iter().flat_map(|e| [(e.lo, e.hi), (e.hi, e.lo)]).collect()
}

/// One data-plane round: local training, error feedback, packet-loss mask,
/// delivered mixing, state update and, when flagged, resynchronization of
/// the waking nodes.
pub fn data_round(
    states: &mut [NodeState],
    bundle: &DecisionBundle,
    gamma: f64,
    loss_p: f64,
    seed: u64,
    trainer: &mut dyn LocalTrainer,
) -> Result<RoundOutcome> {
    let messages = directed_pairs(&bundle.edges);
    let ex = Exchange {
        round: bundle.round,
        active: &bundle.active,
        messages: &messages,
        mixing: &bundle.mixing,
        compression: &bundle.compression,
        gamma,
        loss_p,
        seed,
    };
    let mut outcome = exchange_round(states, &ex, trainer)?;
    if bundle.resync && !bundle.waking.is_empty() {
        let records = resynchronize(states, &bundle.edges, &outcome.mask, &bundle.waking);
        outcome.payloads.extend(records);
    }
    Ok(outcome)
}
