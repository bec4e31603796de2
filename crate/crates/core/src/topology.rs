//! Synthetic AIS-style vessel mobility and time-binned contact graphs.
//!
//! Vessels alternate between dwelling in port and sailing to a uniformly drawn
//! destination port. Reporting gaps are injected with phase-dependent
//! probabilities, and the resulting trace is binned into snapshot graphs: two
//! vessels are linked when they are within the regime's communication range or
//! moored in the same port. A vessel missing from exactly one bin keeps its
//! previous bin's report; longer gaps drop it from the snapshot.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::graph::{component_sizes, Edge};
use crate::rng::{keyed_rng, Stream};
use crate::{Error, Result};

pub const EARTH_RADIUS_KM: f64 = 6371.0;
const KM_PER_DEG: f64 = EARTH_RADIUS_KM * PI / 180.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPosition {
    pub lat_deg: f64,
    pub lon_deg: f64,
}

impl GeoPosition {
    pub fn new(lat_deg: f64, lon_deg: f64) -> Result<Self> {
        let p = GeoPosition { lat_deg, lon_deg };
        if p.is_valid() {
            Ok(p)
        } else {
            Err(Error::InvalidArgument(format!(
                "coordinates out of range: ({lat_deg}, {lon_deg})"
            )))
        }
    }

    pub fn is_valid(&self) -> bool {
        (-90.0..=90.0).contains(&self.lat_deg) && (-180.0..=180.0).contains(&self.lon_deg)
    }

    fn lerp(&self, to: &GeoPosition, frac: f64) -> GeoPosition {
        GeoPosition {
            lat_deg: self.lat_deg + (to.lat_deg - self.lat_deg) * frac,
            lon_deg: self.lon_deg + (to.lon_deg - self.lon_deg) * frac,
        }
    }
}

/// Great-circle distance in km on a sphere of radius 6371 km.
pub fn haversine_km(a: GeoPosition, b: GeoPosition) -> f64 {
    let (lat1, lat2) = (a.lat_deg.to_radians(), b.lat_deg.to_radians());
    let dlat = lat2 - lat1;
    let dlon = (b.lon_deg - a.lon_deg).to_radians();
    let h = (dlat / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * (dlon / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * h.sqrt().min(1.0).asin()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PortSpec {
    pub port_id: usize,
    pub position: GeoPosition,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MobilityConfig {
    pub n_vessels: usize,
    pub n_ports: usize,
    pub region_center: GeoPosition,
    pub region_radius_km: f64,
    pub min_port_separation_km: f64,
    pub n_base_steps: usize,
    pub base_step_min: u32,
    pub dwell_mean: f64,
    pub dwell_std: f64,
    pub dwell_min: f64,
    pub speed_mean_kmh: f64,
    pub speed_std_kmh: f64,
    pub speed_min_kmh: f64,
    /// Per-step reporting-gap probabilities; reporting at sea is less reliable.
    pub gap_prob_in_port: f64,
    pub gap_prob_at_sea: f64,
}

impl Default for MobilityConfig {
    fn default() -> Self {
        MobilityConfig {
            n_vessels: 5,
            n_ports: 6,
            region_center: GeoPosition {
                lat_deg: 37.0,
                lon_deg: -122.0,
            },
            region_radius_km: 300.0,
            min_port_separation_km: 30.0,
            n_base_steps: 48,
            base_step_min: 30,
            dwell_mean: 4.0,
            dwell_std: 1.0,
            dwell_min: 1.0,
            speed_mean_kmh: 28.0,
            speed_std_kmh: 6.0,
            speed_min_kmh: 5.0,
            gap_prob_in_port: 0.05,
            gap_prob_at_sea: 0.15,
        }
    }
}

impl MobilityConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_vessels", self.n_vessels),
            ("n_ports", self.n_ports),
            ("n_base_steps", self.n_base_steps),
            ("base_step_min", self.base_step_min as usize),
        ];
        for (field, v) in counts {
            if v == 0 {
                return Err(Error::config(field, "must be at least 1"));
            }
        }
        for (field, p) in [
            ("gap_prob_in_port", self.gap_prob_in_port),
            ("gap_prob_at_sea", self.gap_prob_at_sea),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(field, format!("{p} is not a probability")));
            }
        }
        if !(self.speed_min_kmh > 0.0) {
            return Err(Error::config("speed_min_kmh", "must be positive"));
        }
        if self.speed_mean_kmh < self.speed_min_kmh || self.speed_std_kmh < 0.0 {
            return Err(Error::config(
                "speed_mean_kmh",
                "mean must be at least the minimum and std nonnegative",
            ));
        }
        if self.dwell_min < 1.0 || self.dwell_mean < self.dwell_min || self.dwell_std < 0.0 {
            return Err(Error::config(
                "dwell_mean",
                "dwell minimum must be >= 1, mean >= minimum, std >= 0",
            ));
        }
        if !(self.region_radius_km > 0.0) || !self.region_center.is_valid() {
            return Err(Error::config("region_radius_km", "invalid region"));
        }
        Ok(())
    }
}

/// Per-step navigational state of a vessel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    InPort { port: usize },
    Underway { destination: usize },
}

impl Phase {
    fn tag(&self) -> String {
        match self {
            Phase::InPort { port } => format!("port:{port}"),
            Phase::Underway { destination } => format!("underway:{destination}"),
        }
    }

    fn parse(s: &str) -> Result<Self> {
        let bad = || Error::Data(format!("unrecognized phase tag {s:?}"));
        let (kind, id) = s.split_once(':').ok_or_else(bad)?;
        let id: usize = id.parse().map_err(|_| bad())?;
        match kind {
            "port" => Ok(Phase::InPort { port: id }),
            "underway" => Ok(Phase::Underway { destination: id }),
            _ => Err(bad()),
        }
    }
}

/// One port-to-port passage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Voyage {
    pub from_port: usize,
    pub to_port: usize,
    pub depart_step: usize,
    /// Step at which the vessel reaches the destination (may exceed the trace).
    pub arrive_step: usize,
    pub speed_kmh: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MobilityTrace {
    pub ports: Vec<PortSpec>,
    pub base_step_min: u32,
    /// `positions[vessel][step]`; `None` is a reporting gap.
    pub positions: Vec<Vec<Option<GeoPosition>>>,
    pub phases: Vec<Vec<Phase>>,
    /// Voyage log; empty for imported traces.
    pub voyages: Vec<Vec<Voyage>>,
}

impl MobilityTrace {
    pub fn n_vessels(&self) -> usize {
        self.positions.len()
    }

    pub fn n_steps(&self) -> usize {
        self.positions.first().map_or(0, Vec::len)
    }

    /// Writes one row per vessel per base step.
    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        let mut w = csv::WriterBuilder::new().delimiter(b'\t').from_path(path)?;
        w.write_record(["vessel_id", "step", "lat", "lon", "present", "phase"])?;
        for (v, (row, phases)) in self.positions.iter().zip(&self.phases).enumerate() {
            for (s, (pos, phase)) in row.iter().zip(phases).enumerate() {
                let (lat, lon, present) = match pos {
                    Some(p) => (format!("{:.6}", p.lat_deg), format!("{:.6}", p.lon_deg), "1"),
                    None => (String::new(), String::new(), "0"),
                };
                w.write_record([
                    v.to_string(),
                    s.to_string(),
                    lat,
                    lon,
                    present.to_string(),
                    phase.tag(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_tsv(path: &Path, base_step_min: u32) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new().delimiter(b'\t').from_path(path)?;
        let mut rows: Vec<(usize, usize, Option<GeoPosition>, Phase)> = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let field = |i: usize| rec.get(i).unwrap_or("").trim().to_string();
            let parse_usize = |i: usize| {
                field(i)
                    .parse::<usize>()
                    .map_err(|_| Error::Data(format!("bad integer in column {i}: {:?}", field(i))))
            };
            let vessel = parse_usize(0)?;
            let step = parse_usize(1)?;
            let pos = if field(4) == "1" {
                let lat: f64 = field(2).parse().map_err(|_| Error::Data("bad lat".into()))?;
                let lon: f64 = field(3).parse().map_err(|_| Error::Data("bad lon".into()))?;
                Some(GeoPosition::new(lat, lon)?)
            } else {
                None
            };
            rows.push((vessel, step, pos, Phase::parse(&field(5))?));
        }
        let n_vessels = rows.iter().map(|r| r.0 + 1).max().unwrap_or(0);
        let n_steps = rows.iter().map(|r| r.1 + 1).max().unwrap_or(0);
        if rows.len() != n_vessels * n_steps {
            return Err(Error::Data(format!(
                "expected {} rows for {n_vessels} vessels x {n_steps} steps, found {}",
                n_vessels * n_steps,
                rows.len()
            )));
        }
        let mut positions = vec![vec![None; n_steps]; n_vessels];
        let mut phases = vec![vec![Phase::InPort { port: 0 }; n_steps]; n_vessels];
        for (v, s, pos, phase) in rows {
            positions[v][s] = pos;
            phases[v][s] = phase;
        }
        Ok(MobilityTrace {
            ports: Vec::new(),
            base_step_min,
            positions,
            phases,
            voyages: vec![Vec::new(); n_vessels],
        })
    }
}

fn truncated_normal<R: Rng>(rng: &mut R, mean: f64, std: f64, min: f64) -> f64 {
    if std == 0.0 {
        return mean.max(min);
    }
    let dist = Normal::new(mean, std).expect("std validated nonnegative");
    loop {
        let x = dist.sample(rng);
        if x >= min {
            return x;
        }
    }
}

fn place_ports(config: &MobilityConfig, seed: u64) -> Result<Vec<PortSpec>> {
    let mut rng = keyed_rng(seed, Stream::Ports, &[]);
    let center = config.region_center;
    let mut ports: Vec<PortSpec> = Vec::with_capacity(config.n_ports);
    let mut attempts = 0usize;
    while ports.len() < config.n_ports {
        attempts += 1;
        if attempts > 100_000 {
            return Err(Error::config(
                "n_ports",
                "cannot place ports with the requested separation inside the region",
            ));
        }
        let r = config.region_radius_km * rng.random::<f64>().sqrt();
        let theta = 2.0 * PI * rng.random::<f64>();
        let lat = center.lat_deg + r * theta.cos() / KM_PER_DEG;
        let lon = center.lon_deg + r * theta.sin() / (KM_PER_DEG * center.lat_deg.to_radians().cos());
        let Ok(pos) = GeoPosition::new(lat, lon) else {
            continue;
        };
        if haversine_km(pos, center) > config.region_radius_km {
            continue;
        }
        if ports
            .iter()
            .any(|p| haversine_km(p.position, pos) < config.min_port_separation_km)
        {
            continue;
        }
        ports.push(PortSpec {
            port_id: ports.len(),
            position: pos,
        });
    }
    Ok(ports)
}

/// Generates the dwell/underway mobility trace. Deterministic in `(config, seed)`.
pub fn generate_mobility(config: &MobilityConfig, seed: u64) -> Result<MobilityTrace> {
    config.validate()?;
    let ports = place_ports(config, seed)?;
    let step_h = config.base_step_min as f64 / 60.0;
    let n_steps = config.n_base_steps;

    let mut positions = Vec::with_capacity(config.n_vessels);
    let mut phases = Vec::with_capacity(config.n_vessels);
    let mut voyages = Vec::with_capacity(config.n_vessels);

    for v in 0..config.n_vessels {
        let mut rng = keyed_rng(seed, Stream::Vessels, &[v as u64]);
        let mut port = rng.random_range(0..ports.len());
        let mut pos_row = Vec::with_capacity(n_steps);
        let mut phase_row = Vec::with_capacity(n_steps);
        let mut log = Vec::new();

        while pos_row.len() < n_steps {
            let dwell = truncated_normal(&mut rng, config.dwell_mean, config.dwell_std, config.dwell_min)
                .round()
                .max(config.dwell_min) as usize;
            for _ in 0..dwell {
                if pos_row.len() == n_steps {
                    break;
                }
                pos_row.push(Some(ports[port].position));
                phase_row.push(Phase::InPort { port });
            }
            if pos_row.len() == n_steps || ports.len() == 1 {
                continue;
            }

            let mut dest = rng.random_range(0..ports.len() - 1);
            if dest >= port {
                dest += 1;
            }
            let speed = truncated_normal(
                &mut rng,
                config.speed_mean_kmh,
                config.speed_std_kmh,
                config.speed_min_kmh,
            );
            let (from, to) = (ports[port].position, ports[dest].position);
            let transit = (haversine_km(from, to) / speed / step_h).ceil().max(1.0) as usize;
            let depart = pos_row.len();
            log.push(Voyage {
                from_port: port,
                to_port: dest,
                depart_step: depart,
                arrive_step: depart + transit - 1,
                speed_kmh: speed,
            });
            for k in 1..=transit {
                if pos_row.len() == n_steps {
                    break;
                }
                pos_row.push(Some(from.lerp(&to, k as f64 / transit as f64)));
                phase_row.push(Phase::Underway { destination: dest });
            }
            port = dest;
        }
        positions.push(pos_row);
        phases.push(phase_row);
        voyages.push(log);
    }

    Ok(MobilityTrace {
        ports,
        base_step_min: config.base_step_min,
        positions,
        phases,
        voyages,
    })
}

/// Erases each report independently with the in-port or at-sea gap probability.
pub fn inject_gaps(trace: &MobilityTrace, config: &MobilityConfig, seed: u64) -> MobilityTrace {
    let mut out = trace.clone();
    for (v, (row, phases)) in out.positions.iter_mut().zip(&trace.phases).enumerate() {
        let mut rng = keyed_rng(seed, Stream::Gaps, &[v as u64]);
        for (slot, phase) in row.iter_mut().zip(phases) {
            let p = match phase {
                Phase::InPort { .. } => config.gap_prob_in_port,
                Phase::Underway { .. } => config.gap_prob_at_sea,
            };
            // Draw unconditionally so the stream position never depends on presence.
            let u: f64 = rng.random();
            if u < p {
                *slot = None;
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    WellConnected,
    Mid,
    Fragmented,
}

impl Regime {
    pub const ALL: [Regime; 3] = [Regime::WellConnected, Regime::Mid, Regime::Fragmented];

    pub fn preset(self) -> RegimePreset {
        match self {
            Regime::WellConnected => RegimePreset {
                bin_min: 30,
                comm_range_km: 200.0,
            },
            Regime::Mid => RegimePreset {
                bin_min: 30,
                comm_range_km: 80.0,
            },
            Regime::Fragmented => RegimePreset {
                bin_min: 60,
                comm_range_km: 80.0,
            },
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Regime::WellConnected => "well-connected",
            Regime::Mid => "mid",
            Regime::Fragmented => "fragmented",
        }
    }
}

impl std::str::FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "well-connected" | "well" => Ok(Regime::WellConnected),
            "mid" => Ok(Regime::Mid),
            "fragmented" => Ok(Regime::Fragmented),
            other => Err(Error::config("regime", format!("unknown regime {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegimePreset {
    /// Snapshot duration in minutes.
    pub bin_min: u32,
    pub comm_range_km: f64,
}

impl RegimePreset {
    pub fn validate(&self, base_step_min: u32) -> Result<()> {
        if self.bin_min == 0 || base_step_min == 0 || !self.bin_min.is_multiple_of(base_step_min) {
            return Err(Error::config(
                "bin_min",
                format!(
                    "{} is not a positive multiple of the {base_step_min}-minute base step",
                    self.bin_min
                ),
            ));
        }
        if !(self.comm_range_km > 0.0) {
            return Err(Error::config("comm_range_km", "must be positive"));
        }
        Ok(())
    }
}

/// Contact graph for one time bin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotGraph {
    pub bin_index: usize,
    pub n_nodes: usize,
    /// Whether each vessel has a (possibly gap-bridged) position in this bin.
    pub present: Vec<bool>,
    /// Sorted, deduplicated undirected edges.
    pub edges: Vec<Edge>,
}

impl SnapshotGraph {
    pub fn neighbors(&self, node: usize) -> impl Iterator<Item = usize> + '_ {
        self.edges
            .iter()
            .filter(move |e| e.touches(node))
            .map(move |e| e.other(node))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopologyTrace {
    pub snapshots: Vec<SnapshotGraph>,
    pub regime: RegimePreset,
}

impl TopologyTrace {
    pub fn n_nodes(&self) -> usize {
        self.snapshots.first().map_or(0, |s| s.n_nodes)
    }

    /// Snapshot used at round `t`; the trace is cycled.
    pub fn snapshot_for_round(&self, t: u64) -> &SnapshotGraph {
        &self.snapshots[(t % self.snapshots.len() as u64) as usize]
    }

    pub fn stats(&self) -> ConnectivityStats {
        connectivity_stats(&self.snapshots)
    }

    /// One row per snapshot edge: `bin, i, j`.
    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        let mut w = csv::WriterBuilder::new().delimiter(b'\t').from_path(path)?;
        w.write_record(["bin", "i", "j"])?;
        for s in &self.snapshots {
            for e in &s.edges {
                w.write_record([s.bin_index.to_string(), e.lo.to_string(), e.hi.to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Rebuilds a trace from an edge table. Presence flags are not stored in
    /// the table, so every node is marked present.
    pub fn read_tsv(path: &Path, n_nodes: usize, n_bins: usize, regime: RegimePreset) -> Result<Self> {
        let mut snapshots: Vec<SnapshotGraph> = (0..n_bins)
            .map(|b| SnapshotGraph {
                bin_index: b,
                n_nodes,
                present: vec![true; n_nodes],
                edges: Vec::new(),
            })
            .collect();
        let mut r = csv::ReaderBuilder::new().delimiter(b'\t').from_path(path)?;
        for rec in r.records() {
            let rec = rec?;
            let nums: Vec<usize> = (0..3)
                .map(|i| {
                    rec.get(i)
                        .and_then(|f| f.trim().parse().ok())
                        .ok_or_else(|| Error::Data(format!("bad edge row {rec:?}")))
                })
                .collect::<Result<_>>()?;
            let (b, i, j) = (nums[0], nums[1], nums[2]);
            if b >= n_bins || i >= n_nodes || j >= n_nodes {
                return Err(Error::Data(format!("edge row out of range: {b} {i} {j}")));
            }
            let e = Edge::new(i, j).ok_or_else(|| Error::Data(format!("self-edge at bin {b}")))?;
            snapshots[b].edges.push(e);
        }
        for s in &mut snapshots {
            s.edges.sort_unstable();
            s.edges.dedup();
        }
        Ok(TopologyTrace { snapshots, regime })
    }
}

/// Bins `trace` into snapshot contact graphs under `regime`.
pub fn build_snapshots(trace: &MobilityTrace, regime: RegimePreset) -> Result<TopologyTrace> {
    regime.validate(trace.base_step_min)?;
    let n = trace.n_vessels();
    let steps_per_bin = (regime.bin_min / trace.base_step_min) as usize;
    let n_bins = trace.n_steps() / steps_per_bin;
    if n == 0 || n_bins == 0 {
        return Err(Error::InvalidArgument(
            "trace is empty or shorter than one snapshot bin".into(),
        ));
    }

    // Last direct report of each vessel inside each bin.
    let direct: Vec<Vec<Option<(GeoPosition, Phase)>>> = (0..n)
        .map(|v| {
            (0..n_bins)
                .map(|b| {
                    (b * steps_per_bin..(b + 1) * steps_per_bin)
                        .rev()
                        .find_map(|s| trace.positions[v][s].map(|p| (p, trace.phases[v][s])))
                })
                .collect()
        })
        .collect();

    let snapshots = (0..n_bins)
        .map(|b| {
            let obs: Vec<Option<(GeoPosition, Phase)>> = (0..n)
                .map(|v| direct[v][b].or_else(|| if b > 0 { direct[v][b - 1] } else { None }))
                .collect();
            let mut edges = Vec::new();
            for i in 0..n {
                for j in i + 1..n {
                    let (Some((pi, phi)), Some((pj, phj))) = (obs[i], obs[j]) else {
                        continue;
                    };
                    let same_port = matches!(
                        (phi, phj),
                        (Phase::InPort { port: a }, Phase::InPort { port: c }) if a == c
                    );
                    if same_port || haversine_km(pi, pj) <= regime.comm_range_km {
                        edges.push(Edge { lo: i, hi: j });
                    }
                }
            }
            SnapshotGraph {
                bin_index: b,
                n_nodes: n,
                present: obs.iter().map(Option::is_some).collect(),
                edges,
            }
        })
        .collect();

    Ok(TopologyTrace { snapshots, regime })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConnectivityStats {
    pub connected_snapshot_count: usize,
    pub snapshot_count: usize,
    pub connectivity_rate: f64,
    pub median_components: f64,
    pub mean_largest_component_ratio: f64,
}

/// Connectivity summary over a set of snapshots. Components are counted over
/// all nodes, so an absent vessel is an isolated component.
pub fn connectivity_stats(snapshots: &[SnapshotGraph]) -> ConnectivityStats {
    let mut comps = Vec::with_capacity(snapshots.len());
    let mut connected = 0;
    let mut lcr_sum = 0.0;
    for s in snapshots {
        let sizes = component_sizes(&s.edges, s.n_nodes);
        if sizes.len() == 1 {
            connected += 1;
        }
        lcr_sum += sizes[0] as f64 / s.n_nodes as f64;
        comps.push(sizes.len());
    }
    comps.sort_unstable();
    let m = comps.len();
    let median = if m == 0 {
        0.0
    } else if m % 2 == 1 {
        comps[m / 2] as f64
    } else {
        (comps[m / 2 - 1] + comps[m / 2]) as f64 / 2.0
    };
    ConnectivityStats {
        connected_snapshot_count: connected,
        snapshot_count: m,
        connectivity_rate: if m == 0 { 0.0 } else { connected as f64 / m as f64 },
        median_components: median,
        mean_largest_component_ratio: if m == 0 { 0.0 } else { lcr_sum / m as f64 },
    }
}

/// Convenience: mobility with gaps, binned under `regime`.
pub fn topology_for_seed(config: &MobilityConfig, regime: RegimePreset, seed: u64) -> Result<TopologyTrace> {
    let trace = generate_mobility(config, seed)?;
    let gapped = inject_gaps(&trace, config, seed);
    build_snapshots(&gapped, regime)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn pos(lat: f64, lon: f64) -> GeoPosition {
        GeoPosition::new(lat, lon).unwrap()
    }

    /// Independent route: spherical law of cosines.
    fn cosine_law_km(a: GeoPosition, b: GeoPosition) -> f64 {
        let (p1, p2) = (a.lat_deg.to_radians(), b.lat_deg.to_radians());
        let dl = (b.lon_deg - a.lon_deg).to_radians();
        let c = p1.sin() * p2.sin() + p1.cos() * p2.cos() * dl.cos();
        EARTH_RADIUS_KM * c.clamp(-1.0, 1.0).acos()
    }

    #[test]
    fn haversine_examples() {
        assert_eq!(haversine_km(pos(37.0, -122.0), pos(37.0, -122.0)), 0.0);
        // R * 1 degree in radians = 6371 * pi / 180.
        let d = haversine_km(pos(0.0, 0.0), pos(0.0, 1.0));
        assert!((d - 111.195).abs() < 0.01, "{d}");
        assert!((d - cosine_law_km(pos(0.0, 0.0), pos(0.0, 1.0))).abs() < 1e-6);
    }

    #[test]
    fn haversine_symmetry_on_random_pairs() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let a = pos(rng.random_range(-90.0..=90.0), rng.random_range(-180.0..=180.0));
            let b = pos(rng.random_range(-90.0..=90.0), rng.random_range(-180.0..=180.0));
            let (d1, d2) = (haversine_km(a, b), haversine_km(b, a));
            assert_eq!(d1, d2);
            assert!(d1 >= 0.0);
            // Compare to the cosine law away from its ill-conditioned short range.
            if d1 > 10.0 {
                assert!((d1 - cosine_law_km(a, b)).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn rejects_empty_fleet_or_ports() {
        let cfg = MobilityConfig {
            n_vessels: 0,
            ..Default::default()
        };
        assert!(generate_mobility(&cfg, 1).is_err());
        let cfg = MobilityConfig {
            n_ports: 0,
            ..Default::default()
        };
        assert!(generate_mobility(&cfg, 1).is_err());
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = MobilityConfig::default();
        assert_eq!(generate_mobility(&cfg, 5).unwrap(), generate_mobility(&cfg, 5).unwrap());
        assert_ne!(generate_mobility(&cfg, 5).unwrap(), generate_mobility(&cfg, 6).unwrap());
    }

    #[test]
    fn ports_respect_region_and_separation() {
        let cfg = MobilityConfig::default();
        for seed in 0..10 {
            let t = generate_mobility(&cfg, seed).unwrap();
            assert_eq!(t.ports.len(), 6);
            for (i, p) in t.ports.iter().enumerate() {
                assert_eq!(p.port_id, i);
                assert!(haversine_km(p.position, cfg.region_center) <= cfg.region_radius_km);
                for q in &t.ports[i + 1..] {
                    assert!(haversine_km(p.position, q.position) >= cfg.min_port_separation_km);
                }
            }
        }
    }

    #[test]
    fn degenerate_distributions_fix_dwell_and_speed() {
        let cfg = MobilityConfig {
            dwell_std: 0.0,
            speed_std_kmh: 0.0,
            n_base_steps: 200,
            ..Default::default()
        };
        let t = generate_mobility(&cfg, 3).unwrap();
        for (v, phases) in t.phases.iter().enumerate() {
            assert!(t.voyages[v].iter().all(|voy| voy.speed_kmh == 28.0));
            // Interior in-port runs (bounded by underway steps on both sides) are 4 long.
            let mut runs = Vec::new();
            let mut run = 0;
            for (s, ph) in phases.iter().enumerate() {
                match ph {
                    Phase::InPort { .. } => run += 1,
                    Phase::Underway { .. } => {
                        if run > 0 {
                            runs.push((s, run));
                        }
                        run = 0;
                    }
                }
            }
            assert!(!runs.is_empty());
            for (_, len) in runs {
                assert_eq!(len, 4);
            }
        }
    }

    #[test]
    fn every_vessel_alternates_dwell_and_transit() {
        let cfg = MobilityConfig::default();
        for seed in 0..25 {
            let t = generate_mobility(&cfg, seed).unwrap();
            for (v, phases) in t.phases.iter().enumerate() {
                assert!(matches!(phases[0], Phase::InPort { .. }), "seed {seed} vessel {v}");
                assert!(
                    phases.iter().any(|p| matches!(p, Phase::Underway { .. })),
                    "seed {seed} vessel {v} never sails"
                );
                for voy in &t.voyages[v] {
                    assert_ne!(voy.from_port, voy.to_port);
                }
            }
        }
    }

    #[test]
    fn underway_speed_never_exceeds_service_speed() {
        let cfg = MobilityConfig::default();
        let step_h = cfg.base_step_min as f64 / 60.0;
        for seed in 0..10 {
            let t = generate_mobility(&cfg, seed).unwrap();
            for (v, row) in t.positions.iter().enumerate() {
                for s in 1..row.len() {
                    let (a, b) = (row[s - 1].unwrap(), row[s].unwrap());
                    let d = haversine_km(a, b);
                    if d == 0.0 {
                        continue;
                    }
                    let voy = t.voyages[v]
                        .iter()
                        .find(|voy| voy.depart_step <= s && s <= voy.arrive_step)
                        .expect("movement outside a voyage");
                    // Linear lat/lon interpolation is not exactly great-circle; allow 1%.
                    assert!(d / step_h <= voy.speed_kmh * 1.01 + 1e-9);
                }
            }
        }
    }

    #[test]
    fn gap_extremes() {
        let cfg = MobilityConfig::default();
        let t = generate_mobility(&cfg, 2).unwrap();
        let none = MobilityConfig {
            gap_prob_in_port: 0.0,
            gap_prob_at_sea: 0.0,
            ..cfg.clone()
        };
        assert_eq!(inject_gaps(&t, &none, 9), t);
        let all = MobilityConfig {
            gap_prob_in_port: 1.0,
            gap_prob_at_sea: 1.0,
            ..cfg.clone()
        };
        let g = inject_gaps(&t, &all, 9);
        assert!(g.positions.iter().flatten().all(Option::is_none));
        assert_eq!(inject_gaps(&t, &cfg, 4), inject_gaps(&t, &cfg, 4));
    }

    #[test]
    fn gap_rates_match_configuration() {
        let cfg = MobilityConfig {
            gap_prob_in_port: 0.1,
            gap_prob_at_sea: 0.3,
            ..Default::default()
        };
        let (mut port_total, mut port_erased, mut sea_total, mut sea_erased) = (0, 0, 0, 0);
        for seed in 0..10 {
            let t = generate_mobility(&cfg, seed).unwrap();
            let g = inject_gaps(&t, &cfg, seed);
            for (row, phases) in g.positions.iter().zip(&g.phases) {
                for (p, ph) in row.iter().zip(phases) {
                    match ph {
                        Phase::InPort { .. } => {
                            port_total += 1;
                            port_erased += p.is_none() as usize;
                        }
                        Phase::Underway { .. } => {
                            sea_total += 1;
                            sea_erased += p.is_none() as usize;
                        }
                    }
                }
            }
        }
        let port_rate = port_erased as f64 / port_total as f64;
        let sea_rate = sea_erased as f64 / sea_total as f64;
        assert!((port_rate - 0.1).abs() <= 0.05, "{port_rate}");
        assert!((sea_rate - 0.3).abs() <= 0.05, "{sea_rate}");
    }

    fn two_vessel_trace(
        a: Vec<Option<GeoPosition>>,
        b: Vec<Option<GeoPosition>>,
        phases: [Phase; 2],
    ) -> MobilityTrace {
        let n = a.len();
        MobilityTrace {
            ports: Vec::new(),
            base_step_min: 30,
            positions: vec![a, b],
            phases: vec![vec![phases[0]; n], vec![phases[1]; n]],
            voyages: vec![Vec::new(), Vec::new()],
        }
    }

    /// A point `km` north of (37, -122).
    fn north_of_base(km: f64) -> GeoPosition {
        pos(37.0 + km / KM_PER_DEG, -122.0)
    }

    #[test]
    fn distance_rule_and_port_clique() {
        let a = north_of_base(0.0);
        let b = north_of_base(50.0);
        let sea = [Phase::Underway { destination: 0 }, Phase::Underway { destination: 1 }];
        let t = two_vessel_trace(vec![Some(a)], vec![Some(b)], sea);
        let in_range = RegimePreset {
            bin_min: 30,
            comm_range_km: 80.0,
        };
        let out_of_range = RegimePreset {
            bin_min: 30,
            comm_range_km: 30.0,
        };
        assert_eq!(build_snapshots(&t, in_range).unwrap().snapshots[0].edges.len(), 1);
        assert!(build_snapshots(&t, out_of_range).unwrap().snapshots[0].edges.is_empty());

        let port = [Phase::InPort { port: 2 }, Phase::InPort { port: 2 }];
        let t = two_vessel_trace(vec![Some(a)], vec![Some(b)], port);
        assert_eq!(build_snapshots(&t, out_of_range).unwrap().snapshots[0].edges.len(), 1);
    }

    #[test]
    fn single_bin_gap_is_bridged_longer_gap_is_not() {
        let a = north_of_base(0.0);
        let b = north_of_base(10.0);
        let sea = [Phase::Underway { destination: 0 }, Phase::Underway { destination: 1 }];
        let t = two_vessel_trace(
            vec![Some(a); 4],
            vec![Some(b), None, None, Some(b)],
            sea,
        );
        let regime = Regime::Mid.preset();
        let topo = build_snapshots(&t, regime).unwrap();
        let edge_counts: Vec<usize> = topo.snapshots.iter().map(|s| s.edges.len()).collect();
        assert_eq!(edge_counts, vec![1, 1, 0, 1]);
        assert_eq!(topo.snapshots[2].present, vec![true, false]);
    }

    #[test]
    fn last_report_in_bin_wins() {
        let far = north_of_base(500.0);
        let near = north_of_base(5.0);
        let sea = [Phase::Underway { destination: 0 }, Phase::Underway { destination: 1 }];
        let t = two_vessel_trace(
            vec![Some(north_of_base(0.0)); 2],
            vec![Some(far), Some(near)],
            sea,
        );
        let regime = RegimePreset {
            bin_min: 60,
            comm_range_km: 80.0,
        };
        let topo = build_snapshots(&t, regime).unwrap();
        assert_eq!(topo.snapshots.len(), 1);
        assert_eq!(topo.snapshots[0].edges.len(), 1);
    }

    #[test]
    fn snapshot_count_and_validation() {
        let cfg = MobilityConfig::default();
        let t = generate_mobility(&cfg, 0).unwrap();
        assert_eq!(build_snapshots(&t, Regime::Mid.preset()).unwrap().snapshots.len(), 48);
        assert_eq!(build_snapshots(&t, Regime::Fragmented.preset()).unwrap().snapshots.len(), 24);
        let bad = RegimePreset {
            bin_min: 45,
            comm_range_km: 80.0,
        };
        assert!(build_snapshots(&t, bad).is_err());
        let empty = MobilityTrace {
            ports: Vec::new(),
            base_step_min: 30,
            positions: Vec::new(),
            phases: Vec::new(),
            voyages: Vec::new(),
        };
        assert!(build_snapshots(&empty, Regime::Mid.preset()).is_err());
    }

    #[test]
    fn stats_on_complete_and_empty_graphs() {
        let complete: Vec<Edge> = (0..5)
            .flat_map(|i| (i + 1..5).map(move |j| Edge { lo: i, hi: j }))
            .collect();
        let snap = |edges: Vec<Edge>| SnapshotGraph {
            bin_index: 0,
            n_nodes: 5,
            present: vec![true; 5],
            edges,
        };
        let s = connectivity_stats(&[snap(complete.clone()), snap(complete)]);
        assert_eq!(s.connectivity_rate, 1.0);
        assert_eq!(s.median_components, 1.0);
        assert_eq!(s.mean_largest_component_ratio, 1.0);
        let s = connectivity_stats(&vec![snap(Vec::new()); 3]);
        assert_eq!(s.connectivity_rate, 0.0);
        assert_eq!(s.median_components, 5.0);
        assert!((s.mean_largest_component_ratio - 0.2).abs() < 1e-15);
    }

    #[test]
    fn topology_tables_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = MobilityConfig::default();
        let trace = inject_gaps(&generate_mobility(&cfg, 8).unwrap(), &cfg, 8);
        let tpath = dir.path().join("trace.tsv");
        trace.write_tsv(&tpath).unwrap();
        let back = MobilityTrace::read_tsv(&tpath, 30).unwrap();
        assert_eq!(back.phases, trace.phases);
        let topo = build_snapshots(&trace, Regime::WellConnected.preset()).unwrap();
        let topo_back = build_snapshots(&back, Regime::WellConnected.preset()).unwrap();
        let edges = |t: &TopologyTrace| t.snapshots.iter().map(|s| s.edges.clone()).collect::<Vec<_>>();
        assert_eq!(edges(&topo), edges(&topo_back));

        let epath = dir.path().join("edges.tsv");
        topo.write_tsv(&epath).unwrap();
        let read = TopologyTrace::read_tsv(&epath, 5, 48, topo.regime).unwrap();
        assert_eq!(edges(&read), edges(&topo));
    }
}
