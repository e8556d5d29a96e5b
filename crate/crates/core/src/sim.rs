//! Synthetic microservice telemetry: a layered call graph placed on hosts,
//! rhythmic per-service metrics with autoregressive noise and request
//! coupling, connection-derived adjacency, and injected faults that cascade
//! along call edges with a per-hop delay and attenuation.

use alloc::collections::VecDeque;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::array::DenseArray;
use crate::error::{Error, Result};
use crate::graph::DeploymentMap;
use crate::rng::SeededRng;

/// AR(1) coefficient of the metric noise.
pub const AR_COEFF: f64 = 0.8;

const DEFAULT_FEATURES: [(&str, f64, f64, bool); 16] = [
    ("cpu_usage", 0.2, 0.6, false),
    ("memory_usage", 0.3, 0.7, false),
    ("disk_read", 10.0, 50.0, false),
    ("disk_write", 5.0, 30.0, false),
    ("connection_latency", 5.0, 20.0, true),
    ("tcp_retransmits", 0.5, 2.0, true),
    ("socket_queue_length", 1.0, 5.0, true),
    ("throughput_in", 100.0, 1000.0, true),
    ("throughput_out", 100.0, 1000.0, true),
    ("request_rate", 10.0, 100.0, false),
    ("error_rate", 0.01, 0.05, false),
    ("p95_latency", 20.0, 60.0, false),
    ("gc_pause", 1.0, 5.0, false),
    ("thread_count", 20.0, 80.0, false),
    ("open_fds", 50.0, 200.0, false),
    ("restart_count", 0.0, 0.0, false),
];

/// Ordered metric names with the network-relevant subset flagged.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSchema {
    names: Vec<String>,
    network: Vec<bool>,
    ranges: Vec<(f64, f64)>,
}

impl FeatureSchema {
    /// The first `c` default metrics; beyond 16, `extra_{i}` metrics with
    /// baselines in `[1, 10]`.
    pub fn with_features(c: usize) -> Self {
        let mut s = Self {
            names: Vec::with_capacity(c),
            network: Vec::with_capacity(c),
            ranges: Vec::with_capacity(c),
        };
        for i in 0..c {
            match DEFAULT_FEATURES.get(i) {
                Some(&(name, lo, hi, net)) => {
                    s.names.push(name.into());
                    s.network.push(net);
                    s.ranges.push((lo, hi));
                }
                None => {
                    s.names.push(format!("extra_{}", i - DEFAULT_FEATURES.len()));
                    s.network.push(false);
                    s.ranges.push((1.0, 10.0));
                }
            }
        }
        s
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn network_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.network[i]).collect()
    }

    pub fn is_network(&self, i: usize) -> bool {
        self.network[i]
    }

    /// Range that per-service baseline levels are drawn from.
    pub fn baseline_range(&self, i: usize) -> (f64, f64) {
        self.ranges[i]
    }
}

impl Default for FeatureSchema {
    fn default() -> Self {
        Self::with_features(DEFAULT_FEATURES.len())
    }
}

/// Directed call graph over services whose indices are grouped by host.
#[derive(Clone, Debug, PartialEq)]
pub struct ServiceGraph {
    n: usize,
    /// `(caller, callee, weight)`.
    edges: Vec<(usize, usize, f64)>,
    layers: Vec<usize>,
}

impl ServiceGraph {
    pub fn nodes(&self) -> usize {
        self.n
    }

    pub fn edges(&self) -> &[(usize, usize, f64)] {
        &self.edges
    }

    /// Layer of each service: 0 for entries.
    pub fn layers(&self) -> &[usize] {
        &self.layers
    }

    pub fn entries(&self) -> Vec<usize> {
        (0..self.n).filter(|&u| self.layers[u] == 0).collect()
    }

    pub fn callees(&self, u: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.edges.iter().filter(move |e| e.0 == u).map(|e| (e.1, e.2))
    }

    pub fn callers(&self, v: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.edges.iter().filter(move |e| e.1 == v).map(|e| (e.0, e.2))
    }

    /// Services ordered by layer, callers before callees.
    pub fn topological_order(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.n).collect();
        order.sort_by_key(|&u| (self.layers[u], u));
        order
    }

    /// Shortest hop count along call edges from `source`; `None` when
    /// unreachable.
    pub fn hops_from(&self, source: usize) -> Vec<Option<usize>> {
        let mut dist = vec![None; self.n];
        dist[source] = Some(0);
        let mut queue = VecDeque::from([source]);
        while let Some(u) = queue.pop_front() {
            let du = dist[u].unwrap_or(0);
            for (v, _) in self.callees(u) {
                if dist[v].is_none() {
                    dist[v] = Some(du + 1);
                    queue.push_back(v);
                }
            }
        }
        dist
    }

    /// True when every service is reachable from some entry.
    pub fn all_reachable(&self) -> bool {
        let mut seen = vec![false; self.n];
        for e in self.entries() {
            for (v, d) in self.hops_from(e).into_iter().enumerate() {
                seen[v] |= d.is_some();
            }
        }
        seen.into_iter().all(|s| s)
    }
}

/// Layered call graph (entry, middle, backend) with every non-entry service
/// called from the previous layer, plus random extra forward edges, placed
/// round-robin on `n_hosts` hosts with random swaps. Services are renumbered
/// so each host's pods are contiguous.
pub fn build_topology(n_services: usize, n_hosts: usize, rng: &mut SeededRng) -> Result<(ServiceGraph, DeploymentMap)> {
    if n_services < 2 {
        return Err(Error::config(format!("need at least 2 services, got {n_services}")));
    }
    if n_hosts == 0 {
        return Err(Error::config("need at least 1 host"));
    }
    let n = n_services;
    let outer = (n / 4).max(1);
    let layer_of = |i: usize| {
        if i < outer {
            0
        } else if i >= n - outer {
            2
        } else {
            1
        }
    };
    let layers: Vec<usize> = (0..n).map(layer_of).collect();
    let mut edges = Vec::new();
    for v in 0..n {
        let lv = layers[v];
        if lv == 0 {
            continue;
        }
        let prev: Vec<usize> = (0..n).filter(|&u| layers[u] + 1 == lv || (lv == 2 && layers[u] == 0 && !layers.contains(&1))).collect();
        let earlier: Vec<usize> = (0..n).filter(|&u| layers[u] < lv).collect();
        let forced = prev[rng.below(prev.len())];
        edges.push((forced, v, rng.uniform(0.5, 1.5)));
        for &u in &earlier {
            if u != forced && rng.bernoulli(0.3) {
                edges.push((u, v, rng.uniform(0.5, 1.5)));
            }
        }
    }

    let mut host: Vec<usize> = (0..n).map(|i| i % n_hosts).collect();
    for i in 0..n {
        if rng.bernoulli(0.3) {
            let j = rng.below(n);
            host.swap(i, j);
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| (host[i], i));
    let mut new_index = vec![0; n];
    for (new, &old) in order.iter().enumerate() {
        new_index[old] = new;
    }
    let mut counts = vec![0; n_hosts];
    for &h in &host {
        counts[h] += 1;
    }
    let mut edges: Vec<(usize, usize, f64)> = edges.into_iter().map(|(u, v, w)| (new_index[u], new_index[v], w)).collect();
    edges.sort_by_key(|e| (e.0, e.1));
    let layers = order.iter().map(|&old| layers[old]).collect();
    Ok((ServiceGraph { n, edges, layers }, DeploymentMap::new(counts)))
}

/// Generator knobs shared by every window.
#[derive(Clone, Debug, PartialEq)]
pub struct SimConfig {
    /// Rhythm period in steps.
    pub period: f64,
    /// Rhythm amplitude relative to the baseline level.
    pub amplitude: f64,
    /// Innovation scale of the AR noise relative to the baseline level.
    pub noise: f64,
    /// Strength of request-rate propagation along call edges.
    pub coupling: f64,
    /// Onset delay per hop.
    pub delta: usize,
    /// Per-hop attenuation of cascaded perturbations.
    pub attenuation: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            period: 24.0,
            amplitude: 0.2,
            noise: 0.05,
            coupling: 0.3,
            delta: 2,
            attenuation: 0.5,
        }
    }
}

/// Per-(service, feature) baseline level and rhythm phase.
#[derive(Clone, Debug, PartialEq)]
pub struct BaselineProfile {
    /// `[N, C]`.
    pub level: DenseArray,
    /// `[N, C]`.
    pub phase: DenseArray,
}

impl BaselineProfile {
    pub fn sample(n: usize, schema: &FeatureSchema, rng: &mut SeededRng) -> Self {
        let c = schema.len();
        let mut level = DenseArray::zeros(&[n, c]);
        let mut phase = DenseArray::zeros(&[n, c]);
        for u in 0..n {
            for f in 0..c {
                let (lo, hi) = schema.baseline_range(f);
                level.set(&[u, f], rng.uniform(lo, hi));
                phase.set(&[u, f], rng.uniform(0.0, core::f64::consts::TAU));
            }
        }
        Self { level, phase }
    }
}

/// The six injectable fault kinds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FaultKind {
    CpuStress,
    MemoryStress,
    NetworkLoss,
    NetworkDelay,
    IoStress,
    PodKill,
}

impl FaultKind {
    pub const ALL: [FaultKind; 6] = [
        FaultKind::CpuStress,
        FaultKind::MemoryStress,
        FaultKind::NetworkLoss,
        FaultKind::NetworkDelay,
        FaultKind::IoStress,
        FaultKind::PodKill,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FaultKind::CpuStress => "cpu-stress",
            FaultKind::MemoryStress => "memory-stress",
            FaultKind::NetworkLoss => "network-loss",
            FaultKind::NetworkDelay => "network-delay",
            FaultKind::IoStress => "io-stress",
            FaultKind::PodKill => "pod-kill",
        }
    }

    /// Scale of the latency/error disturbance passed downstream.
    fn cascade_strength(self) -> f64 {
        match self {
            FaultKind::CpuStress | FaultKind::NetworkLoss => 1.0,
            FaultKind::MemoryStress | FaultKind::IoStress => 0.5,
            FaultKind::NetworkDelay | FaultKind::PodKill => 2.0,
        }
    }
}

impl fmt::Display for FaultKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FaultKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::config(format!("unknown fault kind `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FaultSpec {
    pub kind: FaultKind,
    pub target: usize,
    pub start: usize,
    pub duration: usize,
    /// In `(0, 1]`.
    pub intensity: f64,
}

impl FaultSpec {
    pub fn validate(&self, n: usize, t: usize) -> Result<()> {
        if self.target >= n {
            return Err(Error::config(format!("fault target {} outside {n} services", self.target)));
        }
        if self.duration == 0 || self.start + self.duration > t {
            return Err(Error::config(format!(
                "fault window {}..{} outside 0..{t}",
                self.start,
                self.start + self.duration
            )));
        }
        if !(self.intensity > 0.0 && self.intensity <= 1.0) {
            return Err(Error::config(format!("fault intensity {} outside (0, 1]", self.intensity)));
        }
        Ok(())
    }

    fn active(&self, t: usize, delay: usize) -> bool {
        t >= self.start + delay && t < self.start + self.duration + delay
    }
}

/// Generated window: states `[T, N, C]` and raw adjacency `[T, N, N]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    pub states: DenseArray,
    pub adjacency: DenseArray,
}

/// Index lookups of the metrics faults act on; absent metrics are skipped.
struct Slots {
    cpu: Option<usize>,
    memory: Option<usize>,
    disk: [Option<usize>; 2],
    latency: [Option<usize>; 2],
    retransmits: Option<usize>,
    requests: Option<usize>,
    errors: Option<usize>,
    gc: Option<usize>,
    restarts: Option<usize>,
    load: [Option<usize>; 4],
}

impl Slots {
    fn new(s: &FeatureSchema) -> Self {
        Self {
            cpu: s.index("cpu_usage"),
            memory: s.index("memory_usage"),
            disk: [s.index("disk_read"), s.index("disk_write")],
            latency: [s.index("connection_latency"), s.index("p95_latency")],
            retransmits: s.index("tcp_retransmits"),
            requests: s.index("request_rate"),
            errors: s.index("error_rate"),
            gc: s.index("gc_pause"),
            restarts: s.index("restart_count"),
            load: [
                s.index("cpu_usage"),
                s.index("throughput_in"),
                s.index("throughput_out"),
                s.index("thread_count"),
            ],
        }
    }
}

/// Deterministic rhythm of one metric: `level (1 + amplitude sin(2 pi (t + shift) / period + phase))`.
pub fn rhythm(profile: &BaselineProfile, cfg: &SimConfig, u: usize, f: usize, t: f64, shift: f64) -> f64 {
    let level = profile.level.get(&[u, f]);
    let phase = profile.phase.get(&[u, f]);
    level * (1.0 + cfg.amplitude * libm::sin(core::f64::consts::TAU * (t + shift) / cfg.period + phase))
}

/// One window of `t` steps.
///
/// Draws, in order: the rhythm shift, then per (service, feature) the
/// stationary AR start and `t - 1` innovations. Faults draw nothing, so a
/// faulted window shares its noise with the fault-free window of the same
/// rng state.
#[allow(clippy::too_many_arguments)]
pub fn simulate_window(
    graph: &ServiceGraph,
    map: &DeploymentMap,
    schema: &FeatureSchema,
    profile: &BaselineProfile,
    cfg: &SimConfig,
    faults: &[FaultSpec],
    t: usize,
    rng: &mut SeededRng,
) -> Result<Window> {
    let (n, c) = (graph.nodes(), schema.len());
    map.check(n)?;
    if profile.level.shape() != [n, c] {
        return Err(Error::Shape {
            op: "simulate_window",
            expected: vec![n, c],
            got: profile.level.shape().to_vec(),
        });
    }
    for f in faults {
        f.validate(n, t)?;
    }
    let slots = Slots::new(schema);
    let shift = rng.uniform(0.0, cfg.period);
    let mut x = DenseArray::zeros(&[t, n, c]);
    let stationary = 1.0 / libm::sqrt(1.0 - AR_COEFF * AR_COEFF);
    for u in 0..n {
        for f in 0..c {
            let sigma = cfg.noise * profile.level.get(&[u, f]);
            let mut e = sigma * stationary * rng.standard_normal();
            for ti in 0..t {
                if ti > 0 {
                    e = AR_COEFF * e + sigma * rng.standard_normal();
                }
                x.set(&[ti, u, f], rhythm(profile, cfg, u, f, ti as f64, shift) + e);
            }
        }
    }

    // Request deviations flow caller to callee, then drive load metrics.
    if let Some(rr) = slots.requests {
        for v in graph.topological_order() {
            let base_v = profile.level.get(&[v, rr]);
            for ti in 0..t {
                let inflow: f64 = graph
                    .callers(v)
                    .map(|(u, w)| w * (x.get(&[ti, u, rr]) / profile.level.get(&[u, rr]) - 1.0))
                    .sum();
                let cur = x.get(&[ti, v, rr]);
                x.set(&[ti, v, rr], cur + cfg.coupling * base_v * inflow);
            }
        }
        for v in 0..n {
            let base_v = profile.level.get(&[v, rr]);
            for ti in 0..t {
                let rel = x.get(&[ti, v, rr]) / base_v - 1.0;
                for f in slots.load.iter().flatten() {
                    let cur = x.get(&[ti, v, *f]);
                    x.set(&[ti, v, *f], cur + cfg.coupling * profile.level.get(&[v, *f]) * rel);
                }
            }
        }
    }

    for fault in faults {
        apply_fault(&mut x, graph, profile, cfg, &slots, fault, t);
    }
    for v in x.data_mut() {
        *v = v.max(0.0);
    }

    let mut adj = DenseArray::zeros(&[t, n, n]);
    for &(u, v, w) in graph.edges() {
        for ti in 0..t {
            let calls = match slots.requests {
                Some(rr) => x.get(&[ti, u, rr]) / profile.level.get(&[u, rr]),
                None => 1.0,
            };
            let speed = match slots.latency[0] {
                Some(l) => 1.0 / (1.0 + x.get(&[ti, v, l]) / profile.level.get(&[v, l])),
                None => 0.5,
            };
            adj.set(&[ti, u, v], w * (0.5 * calls.max(0.0) + speed));
        }
    }
    for fault in faults.iter().filter(|f| f.kind == FaultKind::PodKill) {
        for ti in (0..t).filter(|&ti| fault.active(ti, 0)) {
            for k in 0..n {
                adj.set(&[ti, fault.target, k], 0.0);
                adj.set(&[ti, k, fault.target], 0.0);
            }
        }
    }
    Ok(Window { states: x, adjacency: adj })
}

fn bump(x: &mut DenseArray, t: usize, u: usize, f: Option<usize>, add: f64) {
    if let Some(f) = f {
        let cur = x.get(&[t, u, f]);
        x.set(&[t, u, f], cur + add);
    }
}

fn scale(x: &mut DenseArray, t: usize, u: usize, f: Option<usize>, by: f64) {
    if let Some(f) = f {
        let cur = x.get(&[t, u, f]);
        x.set(&[t, u, f], cur * by);
    }
}

fn apply_fault(x: &mut DenseArray, graph: &ServiceGraph, profile: &BaselineProfile, cfg: &SimConfig, slots: &Slots, fault: &FaultSpec, t: usize) {
    let u = fault.target;
    let i = fault.intensity;
    let lvl = |f: Option<usize>, v: usize| f.map_or(0.0, |f| profile.level.get(&[v, f]));
    let c = x.shape()[2];
    for ti in (0..t).filter(|&ti| fault.active(ti, 0)) {
        match fault.kind {
            FaultKind::CpuStress => {
                scale(x, ti, u, slots.cpu, 1.0 + 3.0 * i);
            }
            FaultKind::MemoryStress => {
                scale(x, ti, u, slots.memory, 1.0 + 2.0 * i);
                scale(x, ti, u, slots.gc, 1.0 + 4.0 * i);
            }
            FaultKind::NetworkLoss => {
                bump(x, ti, u, slots.retransmits, 5.0 * i * lvl(slots.retransmits, u));
                bump(x, ti, u, slots.errors, 4.0 * i * lvl(slots.errors, u));
            }
            FaultKind::NetworkDelay => {}
            FaultKind::IoStress => {
                for f in slots.disk {
                    scale(x, ti, u, f, 1.0 + 3.0 * i);
                }
            }
            FaultKind::PodKill => {
                for f in 0..c {
                    x.set(&[ti, u, f], 0.0);
                }
            }
        }
    }
    if fault.kind == FaultKind::PodKill {
        for ti in fault.start..t {
            bump(x, ti, u, slots.restarts, 1.0);
        }
    }
    // Latency and errors at the target (hop 0) and downstream services.
    let strength = fault.kind.cascade_strength() * i;
    for (v, hop) in graph.hops_from(u).into_iter().enumerate() {
        let Some(h) = hop else { continue };
        if h == 0 && fault.kind == FaultKind::PodKill {
            continue;
        }
        let gain = strength * libm::pow(cfg.attenuation, h as f64);
        for ti in (0..t).filter(|&ti| fault.active(ti, h * cfg.delta)) {
            for f in slots.latency {
                bump(x, ti, v, f, gain * lvl(f, v));
            }
            bump(x, ti, v, slots.errors, gain * lvl(slots.errors, v));
        }
    }
}

/// Window counts per category (normal first, then [`FaultKind::ALL`]) by
/// largest-remainder rounding of `samples * ratio`; remainder ties go to the
/// earlier category. Ratios must be nonnegative and sum to 1.
pub fn category_counts(samples: usize, ratios: &[f64; 7]) -> Result<[usize; 7]> {
    if ratios.iter().any(|r| !(*r >= 0.0) || !r.is_finite()) {
        return Err(Error::config("fault mix ratios must be nonnegative"));
    }
    let total: f64 = ratios.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::config(format!("fault mix ratios sum to {total}, expected 1")));
    }
    let exact: Vec<f64> = ratios.iter().map(|r| r * samples as f64).collect();
    let mut counts = [0usize; 7];
    for (c, e) in counts.iter_mut().zip(&exact) {
        *c = libm::floor(*e + 1e-9) as usize;
    }
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..7).collect();
    let frac = |i: usize| exact[i] - counts[i] as f64;
    order.sort_by(|&a, &b| frac(b).partial_cmp(&frac(a)).unwrap_or(core::cmp::Ordering::Equal).then(a.cmp(&b)));
    for &i in order.iter().take(samples.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    Ok(counts)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_services_single_edge() {
        let (g, m) = build_topology(2, 1, &mut SeededRng::new(3)).unwrap();
        assert_eq!(g.edges().len(), 1);
        assert_eq!(m.nodes(), 2);
        let (u, v, _) = g.edges()[0];
        assert_eq!(g.layers()[u], 0);
        assert!(g.layers()[v] > 0);
    }

    #[test]
    fn counts_round_by_largest_remainder() {
        let mix = [0.4, 0.1, 0.1, 0.1, 0.1, 0.1, 0.1];
        assert_eq!(category_counts(10, &mix).unwrap(), [4, 1, 1, 1, 1, 1, 1]);
        assert_eq!(category_counts(200, &mix).unwrap(), [80, 20, 20, 20, 20, 20, 20]);
        // 13 * [0.4, 0.1 x 6] = [5.2, 1.3 x 6]: floors sum to 11, the two
        // extra windows go to the first two 0.3 remainders.
        assert_eq!(category_counts(13, &mix).unwrap(), [5, 2, 2, 1, 1, 1, 1]);
        assert!(category_counts(10, &[0.5, 0.1, 0.1, 0.1, 0.1, 0.1, 0.1]).is_err());
    }

    #[test]
    fn schema_defaults() {
        let s = FeatureSchema::default();
        assert_eq!(s.len(), 16);
        assert_eq!(s.network_indices(), vec![4, 5, 6, 7, 8]);
        let wide = FeatureSchema::with_features(18);
        assert_eq!(wide.names()[17], "extra_1");
    }
}
