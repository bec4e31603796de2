//! Shared helpers for integration tests and the acceptance binary.

#![allow(dead_code)]

use std::path::PathBuf;

use carbon_gossip::controller::{control_round, ControlContext, ControllerConfig, DualState, RuntimePreset};
use carbon_gossip::dataplane::{
    data_round, delivered_mixing, directed_pairs, error_feedback, mix_and_update, CompressionMode, DeliveryMask,
    NodeState, PayloadKind, PayloadRecord,
};
use carbon_gossip::graph::Edge;
use carbon_gossip::learners::{LocalTrainer, LocalUpdate};
use carbon_gossip::signals::Telemetry;
use serde_json::Value;

pub fn fixture_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests").join("fixtures").join(name)
}

/// Returns the same `x~` for a node every time.
pub struct FixedTrainer(pub Vec<Vec<f64>>);

impl LocalTrainer for FixedTrainer {
    fn train(&mut self, node: usize, _x: &[f64]) -> carbon_gossip::Result<LocalUpdate> {
        Ok(LocalUpdate { x: self.0[node].clone(), loss: 0.0, steps: 1, flops: 0 })
    }
}

fn f(v: &Value) -> f64 {
    v.as_f64().expect("number")
}

fn u(v: &Value) -> usize {
    v.as_u64().expect("integer") as usize
}

fn vec_f(v: &Value) -> Vec<f64> {
    v.as_array().expect("array").iter().map(f).collect()
}

fn mat_f(v: &Value) -> Vec<Vec<f64>> {
    v.as_array().expect("array").iter().map(vec_f).collect()
}

fn edge(v: &Value) -> Edge {
    Edge::new(u(&v[0]), u(&v[1])).expect("edge")
}

fn edges(v: &Value) -> Vec<Edge> {
    v.as_array().expect("array").iter().map(edge).collect()
}

fn mode_name(m: Option<CompressionMode>) -> Value {
    m.map_or(Value::Null, |m| Value::String(m.label().to_string()))
}

fn check_states(label: &str, states: &[NodeState], expected: &Value) -> Result<f64, String> {
    let mut worst = 0.0f64;
    for (key, pick) in [("x", 0usize), ("h", 1)] {
        let want = mat_f(&expected[key]);
        for (i, row) in want.iter().enumerate() {
            let got = if pick == 0 { &states[i].x } else { &states[i].h };
            for (a, b) in got.iter().zip(row) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    if worst > 1e-12 {
        return Err(format!("{label}: state deviation {worst:e} exceeds 1e-12"));
    }
    Ok(worst)
}

fn bytes(records: &[PayloadRecord]) -> (u64, u64) {
    (
        records.iter().map(|r| r.bytes_attempted).sum(),
        records.iter().map(|r| r.bytes_delivered()).sum(),
    )
}

/// Replays the golden 3-node round and compares it against the committed trace.
/// Returns the largest state deviation on success.
pub fn check_golden_round() -> Result<f64, String> {
    let raw = std::fs::read_to_string(fixture_path("golden_round.json")).map_err(|e| e.to_string())?;
    let fx: Value = serde_json::from_str(&raw).map_err(|e| e.to_string())?;
    let inp = &fx["inputs"];
    let dim = u(&inp["dim"]);
    let round = inp["round"].as_u64().unwrap();

    let p = &inp["preset"];
    let preset = RuntimePreset {
        fanout_cap: u(&p["fanout_cap"]),
        chi_lo: f(&p["chi_lo"]),
        chi_hi: f(&p["chi_hi"]),
        topk_ratio: f(&p["topk_ratio"]),
        resync_interval: p["resync_interval"].as_u64().unwrap(),
    };
    let config = ControllerConfig { participation_fraction: f(&inp["participation_fraction"]), ..Default::default() };
    let telemetry: Vec<Telemetry> = inp["telemetry"]
        .as_array()
        .unwrap()
        .iter()
        .map(|z| Telemetry {
            loss: f(&z["loss"]),
            disagreement: f(&z["disagreement"]),
            streak: z["streak"].as_u64().unwrap() as u32,
            rate: f(&z["rate"]),
            chi: f(&z["chi"]),
        })
        .collect();
    let available: Vec<usize> = inp["available"].as_array().unwrap().iter().map(u).collect();
    let candidates = edges(&inp["candidates"]);
    let flops: Vec<u64> = inp["flops"].as_array().unwrap().iter().map(|v| v.as_u64().unwrap()).collect();
    let duals = DualState { lambda_c: f(&inp["duals"]["lambda_c"]), lambda_f: f(&inp["duals"]["lambda_f"]) };
    let profile = Default::default();

    let out = control_round(&ControlContext {
        round,
        available: &available,
        candidates: &candidates,
        telemetry: &telemetry,
        duals,
        config: &config,
        preset: &preset,
        profile: &profile,
        dim,
        flops: &flops,
    })
    .map_err(|e| e.to_string())?;

    // Score trace, to 1e-12.
    for (got, want) in out.scores.iter().zip(fx["trace"]["scores"].as_array().unwrap()) {
        for (name, g) in [
            ("utility", got.utility),
            ("carbon_proxy", got.carbon_proxy),
            ("fairness", got.fairness),
            ("score", got.score),
        ] {
            if (g - f(&want[name])).abs() > 1e-12 {
                return Err(format!("node {} {name}: {g} vs {}", got.node, want[name]));
            }
        }
    }

    // Decision bundle, bitwise.
    let b = &fx["bundle"];
    let bundle = &out.bundle;
    let want_active: Vec<usize> = b["active"].as_array().unwrap().iter().map(u).collect();
    if out.k_target != u(&b["k_target"]) {
        return Err(format!("k_target {} vs {}", out.k_target, b["k_target"]));
    }
    if bundle.active != want_active {
        return Err(format!("active {:?} vs {:?}", bundle.active, want_active));
    }
    if bundle.edges != edges(&b["edges"]) {
        return Err(format!("edges {:?} vs {}", bundle.edges, b["edges"]));
    }
    for (got, want) in bundle.selections.iter().zip(b["selections"].as_array().unwrap()) {
        if got.node != u(&want["node"]) || got.edges != edges(&want["edges"]) {
            return Err(format!("selection of node {}: {:?} vs {}", got.node, got.edges, want));
        }
    }
    if bundle.selections.len() != b["selections"].as_array().unwrap().len() {
        return Err("selection count differs".into());
    }
    let w = mat_f(&b["mixing"]);
    for (i, row) in w.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            if bundle.mixing.get(i, j).to_bits() != v.to_bits() {
                return Err(format!("mixing[{i}][{j}] {} vs {v}", bundle.mixing.get(i, j)));
            }
        }
    }
    let modes: Vec<Value> = bundle.compression.iter().map(|m| mode_name(*m)).collect();
    if modes != *b["compression"].as_array().unwrap() {
        return Err(format!("compression {modes:?} vs {}", b["compression"]));
    }
    if bundle.resync != b["resync"].as_bool().unwrap() {
        return Err("resync flag differs".into());
    }
    let want_waking: Vec<usize> = b["waking"].as_array().unwrap().iter().map(u).collect();
    if bundle.waking != want_waking {
        return Err(format!("waking {:?} vs {want_waking:?}", bundle.waking));
    }

    let initial: Vec<NodeState> = mat_f(&inp["x"])
        .into_iter()
        .zip(mat_f(&inp["h"]))
        .map(|(x, h)| NodeState { x, h })
        .collect();
    let trained = mat_f(&inp["trained"]);

    // Lossless full round through the data plane.
    let mut states = initial.clone();
    let outcome = data_round(&mut states, bundle, config.gamma, 0.0, 0, &mut FixedTrainer(trained.clone()))
        .map_err(|e| e.to_string())?;
    let mut worst = check_states("lossless", &states, &fx["lossless"])?;
    let (att, del) = bytes(&outcome.payloads);
    let want = &fx["lossless"];
    if att != want["bytes_attempted"].as_u64().unwrap() || del != want["bytes_delivered"].as_u64().unwrap() {
        return Err(format!("lossless bytes ({att}, {del}) vs ({}, {})", want["bytes_attempted"], want["bytes_delivered"]));
    }

    // Lossy variant driven by an explicit mask, without resync.
    let lossy = &fx["lossy"];
    let mut mask = DeliveryMask::all_delivered(&bundle.edges);
    for d in lossy["dropped"].as_array().unwrap() {
        mask.set(u(&d[0]), u(&d[1]), false);
    }
    let mut states = initial;
    let mut by_node = std::collections::BTreeMap::new();
    for &i in &bundle.active {
        let (h_new, _) =
            error_feedback(&states[i], &trained[i], bundle.compression[i].unwrap()).map_err(|e| e.to_string())?;
        states[i].h = h_new;
        by_node.insert(i, trained[i].clone());
    }
    mix_and_update(&mut states, &by_node, &delivered_mixing(&bundle.mixing, &mask), config.gamma)
        .map_err(|e| e.to_string())?;
    worst = worst.max(check_states("lossy", &states, lossy)?);
    let records: Vec<PayloadRecord> = directed_pairs(&bundle.edges)
        .into_iter()
        .map(|(s, r)| PayloadRecord::new(s, r, bundle.compression[s].unwrap(), PayloadKind::Gossip, dim, mask.delivered(s, r)))
        .collect();
    let (att, del) = bytes(&records);
    if att != lossy["bytes_attempted"].as_u64().unwrap() || del != lossy["bytes_delivered"].as_u64().unwrap() {
        return Err(format!("lossy bytes ({att}, {del}) vs ({}, {})", lossy["bytes_attempted"], lossy["bytes_delivered"]));
    }
    Ok(worst)
}
