//! Discrete-event model of the device-to-fog link layer.
//!
//! Control-plane state (a version number) spreads over the mesh with Trickle
//! timers following RFC 6206. Data packets travel along precomputed
//! hop-count shortest paths, each hop adding its latency and serialization
//! delay and dropping the packet with the link's loss probability.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, VecDeque};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type NodeId = String;

/// Bluetooth 4 nominal link rate.
pub const DEFAULT_CAPACITY_BPS: f64 = 25_000_000.0;

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("unknown node {0:?}")]
    Node(NodeId),
    #[error("invalid route: {0}")]
    Route(String),
    #[error("invalid topology: {0}")]
    Topology(String),
    #[error("invalid link model: {0}")]
    Link(String),
    #[error("invalid trickle parameters: {0}")]
    Params(String),
    #[error("topology file: {0}")]
    Io(#[from] std::io::Error),
    #[error("topology file: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LinkModel {
    pub latency_s: f64,
    pub loss_prob: f64,
    pub capacity_bps: f64,
}

impl Default for LinkModel {
    fn default() -> Self {
        LinkModel { latency_s: 0.01, loss_prob: 0.0, capacity_bps: DEFAULT_CAPACITY_BPS }
    }
}

impl LinkModel {
    pub fn validate(&self) -> Result<(), MeshError> {
        if !(self.latency_s >= 0.0) {
            return Err(MeshError::Link("latency_s must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.loss_prob) {
            return Err(MeshError::Link("loss_prob must be in [0, 1]".into()));
        }
        if !(self.capacity_bps > 0.0) {
            return Err(MeshError::Link("capacity_bps must be > 0".into()));
        }
        Ok(())
    }
}

/// Undirected mesh with a link model per edge.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TopologyGraph {
    nodes: BTreeSet<NodeId>,
    edges: BTreeMap<(NodeId, NodeId), LinkModel>,
}

fn edge_key(a: &str, b: &str) -> (NodeId, NodeId) {
    if a <= b {
        (a.to_string(), b.to_string())
    } else {
        (b.to_string(), a.to_string())
    }
}

/// On-disk topology: nodes, edge pairs and one link model for every edge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopologyFile {
    pub nodes: Vec<NodeId>,
    pub edges: Vec<[NodeId; 2]>,
    pub link: LinkModel,
}

impl TopologyGraph {
    pub fn new<I, S>(nodes: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<NodeId>,
    {
        TopologyGraph { nodes: nodes.into_iter().map(Into::into).collect(), edges: BTreeMap::new() }
    }

    pub fn add_edge(&mut self, a: &str, b: &str, link: LinkModel) -> Result<(), MeshError> {
        if a == b {
            return Err(MeshError::Topology(format!("self-loop on {a:?}")));
        }
        for n in [a, b] {
            if !self.nodes.contains(n) {
                return Err(MeshError::Node(n.to_string()));
            }
        }
        link.validate()?;
        self.edges.insert(edge_key(a, b), link);
        Ok(())
    }

    pub fn nodes(&self) -> impl Iterator<Item = &NodeId> {
        self.nodes.iter()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn contains(&self, node: &str) -> bool {
        self.nodes.contains(node)
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn link(&self, a: &str, b: &str) -> Option<&LinkModel> {
        self.edges.get(&edge_key(a, b))
    }

    /// Neighbours of `node` in name order.
    pub fn neighbors<'a>(&'a self, node: &'a str) -> impl Iterator<Item = (&'a NodeId, &'a LinkModel)> + 'a {
        self.edges.iter().filter_map(move |((a, b), l)| {
            if a == node {
                Some((b, l))
            } else if b == node {
                Some((a, l))
            } else {
                None
            }
        })
    }

    /// Fully connected graph on `n00..n{count-1}`.
    pub fn clique(count: usize, link: LinkModel) -> Result<Self, MeshError> {
        let names = node_names(count);
        let mut g = TopologyGraph::new(names.clone());
        for i in 0..count {
            for j in i + 1..count {
                g.add_edge(&names[i], &names[j], link)?;
            }
        }
        Ok(g)
    }

    /// Hub-and-spoke graph with `hub` in the middle.
    pub fn star(hub: &str, leaves: &[NodeId], link: LinkModel) -> Result<Self, MeshError> {
        let mut g = TopologyGraph::new(std::iter::once(hub.to_string()).chain(leaves.iter().cloned()));
        for leaf in leaves {
            g.add_edge(hub, leaf, link)?;
        }
        Ok(g)
    }

    /// Seeded connected graph: a random spanning tree plus each remaining pair
    /// with probability `extra_edge_prob`.
    pub fn random_connected(count: usize, extra_edge_prob: f64, seed: u64, link: LinkModel) -> Result<Self, MeshError> {
        let names = node_names(count);
        let mut g = TopologyGraph::new(names.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in 1..count {
            let parent = rng.random_range(0..i);
            g.add_edge(&names[i], &names[parent], link)?;
        }
        for i in 0..count {
            for j in i + 1..count {
                if rng.random_bool(extra_edge_prob.clamp(0.0, 1.0)) {
                    g.add_edge(&names[i], &names[j], link)?;
                }
            }
        }
        Ok(g)
    }

    pub fn from_file(file: &TopologyFile) -> Result<Self, MeshError> {
        let mut g = TopologyGraph::new(file.nodes.iter().cloned());
        if g.node_count() != file.nodes.len() {
            return Err(MeshError::Topology("duplicate node name".into()));
        }
        for [a, b] in &file.edges {
            g.add_edge(a, b, file.link)?;
        }
        Ok(g)
    }

    pub fn load(path: &Path) -> Result<Self, MeshError> {
        let file: TopologyFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        Self::from_file(&file)
    }

    /// Hop-count shortest path, ties broken toward lexically smaller names.
    pub fn shortest_path(&self, from: &str, to: &str) -> Result<Option<Vec<NodeId>>, MeshError> {
        for n in [from, to] {
            if !self.contains(n) {
                return Err(MeshError::Node(n.to_string()));
            }
        }
        let mut prev: BTreeMap<&str, &str> = BTreeMap::new();
        let mut seen: BTreeSet<&str> = BTreeSet::from([from]);
        let mut queue = VecDeque::from([from]);
        while let Some(cur) = queue.pop_front() {
            if cur == to {
                let mut path = vec![to.to_string()];
                let mut at = to;
                while let Some(&p) = prev.get(at) {
                    path.push(p.to_string());
                    at = p;
                }
                path.reverse();
                return Ok(Some(path));
            }
            for (next, _) in self.neighbors(cur) {
                if seen.insert(next.as_str()) {
                    prev.insert(next.as_str(), cur);
                    queue.push_back(next.as_str());
                }
            }
        }
        Ok(None)
    }

    pub fn is_connected(&self) -> bool {
        let Some(first) = self.nodes.iter().next() else {
            return true;
        };
        let mut seen = BTreeSet::from([first.as_str()]);
        let mut stack = vec![first.as_str()];
        while let Some(cur) = stack.pop() {
            for (next, _) in self.neighbors(cur) {
                if seen.insert(next.as_str()) {
                    stack.push(next.as_str());
                }
            }
        }
        seen.len() == self.nodes.len()
    }
}

fn node_names(count: usize) -> Vec<NodeId> {
    (0..count).map(|i| format!("n{i:02}")).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrickleParams {
    pub i_min_s: f64,
    pub i_doublings: u32,
    /// Redundancy constant.
    pub k: u32,
}

impl Default for TrickleParams {
    fn default() -> Self {
        TrickleParams { i_min_s: 1.0, i_doublings: 4, k: 1 }
    }
}

impl TrickleParams {
    pub fn i_max_s(&self) -> f64 {
        self.i_min_s * 2f64.powi(self.i_doublings as i32)
    }

    pub fn validate(&self) -> Result<(), MeshError> {
        if !(self.i_min_s > 0.0) {
            return Err(MeshError::Params("i_min_s must be > 0".into()));
        }
        if self.k < 1 {
            return Err(MeshError::Params("k must be >= 1".into()));
        }
        Ok(())
    }
}

/// Per-node Trickle timer state. `t_fire_s` is an offset into the current
/// interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrickleState {
    pub interval_i_s: f64,
    pub t_fire_s: f64,
    pub c: u32,
    pub version: u64,
}

impl TrickleState {
    /// Fresh state at `I = i_min` with a fire time already drawn.
    pub fn new<R: Rng + ?Sized>(version: u64, params: &TrickleParams, rng: &mut R) -> Self {
        let s = TrickleState { interval_i_s: params.i_min_s, t_fire_s: 0.0, c: 0, version };
        trickle_advance(s, TrickleEvent::IntervalStart, params, rng).0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrickleEvent {
    IntervalStart,
    HeardConsistent,
    HeardInconsistent(u64),
    TimerFired,
    IntervalExpired,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrickleAction {
    Transmit,
    None,
}

fn begin_interval<R: Rng + ?Sized>(mut s: TrickleState, rng: &mut R) -> TrickleState {
    s.c = 0;
    let i = s.interval_i_s;
    s.t_fire_s = rng.random_range(i / 2.0..i);
    s
}

/// Applies one Trickle rule.
///
/// A newer version is adopted and resets the interval to `i_min`. An older
/// version heard from a neighbour resets the timer only when `I > i_min`.
/// Either reset starts a new interval.
pub fn trickle_advance<R: Rng + ?Sized>(
    state: TrickleState,
    event: TrickleEvent,
    params: &TrickleParams,
    rng: &mut R,
) -> (TrickleState, TrickleAction) {
    match event {
        TrickleEvent::IntervalStart => (begin_interval(state, rng), TrickleAction::None),
        TrickleEvent::HeardConsistent => (TrickleState { c: state.c.saturating_add(1), ..state }, TrickleAction::None),
        TrickleEvent::HeardInconsistent(v) if v > state.version => {
            let s = TrickleState { version: v, interval_i_s: params.i_min_s, ..state };
            (begin_interval(s, rng), TrickleAction::None)
        }
        TrickleEvent::HeardInconsistent(_) => {
            if state.interval_i_s > params.i_min_s {
                let s = TrickleState { interval_i_s: params.i_min_s, ..state };
                (begin_interval(s, rng), TrickleAction::None)
            } else {
                (state, TrickleAction::None)
            }
        }
        TrickleEvent::TimerFired => {
            let action = if state.c < params.k { TrickleAction::Transmit } else { TrickleAction::None };
            (state, action)
        }
        TrickleEvent::IntervalExpired => {
            let i = (2.0 * state.interval_i_s).min(params.i_max_s());
            (begin_interval(TrickleState { interval_i_s: i, ..state }, rng), TrickleAction::None)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TxRecord {
    pub t: f64,
    pub node: usize,
    /// Interval ordinal of the sender when it transmitted.
    pub interval: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisseminationStats {
    pub coverage: f64,
    pub tx_total: u64,
    pub tx_per_node: BTreeMap<NodeId, u64>,
    /// Time at which every node held the originator's version, if it happened.
    pub convergence_time_s: Option<f64>,
    /// `(time, nodes holding the new version)` at each adoption.
    pub coverage_timeline: Vec<(f64, usize)>,
    /// Node indices follow the sorted node order.
    pub transmissions: Vec<TxRecord>,
}

#[derive(Debug, Clone, Copy)]
enum SimEvent {
    Fire { node: usize, epoch: u64 },
    Expire { node: usize, epoch: u64 },
    Deliver { to: usize, version: u64 },
}

#[derive(Debug)]
struct Scheduled {
    at: f64,
    order: u64,
    event: SimEvent,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Scheduled {}

impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Scheduled {
    // reversed: BinaryHeap is a max-heap and we pop the earliest event
    fn cmp(&self, other: &Self) -> Ordering {
        other.at.total_cmp(&self.at).then_with(|| other.order.cmp(&self.order))
    }
}

/// Event queue ordered by `(time, insertion order)`.
#[derive(Debug, Default)]
struct EventQueue {
    heap: BinaryHeap<Scheduled>,
    next_order: u64,
}

impl EventQueue {
    fn push(&mut self, at: f64, event: SimEvent) {
        self.heap.push(Scheduled { at, order: self.next_order, event });
        self.next_order += 1;
    }

    fn pop(&mut self) -> Option<(f64, SimEvent)> {
        self.heap.pop().map(|s| (s.at, s.event))
    }
}

struct NodeRuntime {
    state: TrickleState,
    interval_start: f64,
    epoch: u64,
}

/// Floods version 1 from `originator` while every other node starts at
/// version 0. All nodes begin their first interval at `i_min` at time 0.
pub fn simulate_dissemination(
    topology: &TopologyGraph,
    params: &TrickleParams,
    originator: &str,
    duration_s: f64,
    seed: u64,
) -> Result<DisseminationStats, MeshError> {
    params.validate()?;
    let names: Vec<&NodeId> = topology.nodes().collect();
    let origin = names.iter().position(|n| n.as_str() == originator).ok_or_else(|| MeshError::Node(originator.to_string()))?;
    let index: BTreeMap<&str, usize> = names.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
    let adjacency: Vec<Vec<(usize, LinkModel)>> = names
        .iter()
        .map(|n| topology.neighbors(n).map(|(m, l)| (index[m.as_str()], *l)).collect())
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut queue = EventQueue::default();
    let mut nodes: Vec<NodeRuntime> = Vec::with_capacity(names.len());
    for i in 0..names.len() {
        let version = u64::from(i == origin);
        let state = TrickleState::new(version, params, &mut rng);
        queue.push(state.t_fire_s, SimEvent::Fire { node: i, epoch: 0 });
        queue.push(state.interval_i_s, SimEvent::Expire { node: i, epoch: 0 });
        nodes.push(NodeRuntime { state, interval_start: 0.0, epoch: 0 });
    }

    let mut covered = 1usize;
    let mut timeline = vec![(0.0, covered)];
    let mut convergence = (covered == names.len()).then_some(0.0);
    let mut transmissions = Vec::new();
    let mut tx_per_node = vec![0u64; names.len()];

    // schedule the new interval's timers after a state transition that restarted it
    fn restart(node: &mut NodeRuntime, i: usize, now: f64, queue: &mut EventQueue) {
        node.epoch += 1;
        node.interval_start = now;
        queue.push(now + node.state.t_fire_s, SimEvent::Fire { node: i, epoch: node.epoch });
        queue.push(now + node.state.interval_i_s, SimEvent::Expire { node: i, epoch: node.epoch });
    }

    while let Some((now, event)) = queue.pop() {
        if now > duration_s {
            break;
        }
        match event {
            SimEvent::Fire { node, epoch } => {
                let n = &mut nodes[node];
                if epoch != n.epoch {
                    continue;
                }
                let (state, action) = trickle_advance(n.state, TrickleEvent::TimerFired, params, &mut rng);
                n.state = state;
                if action == TrickleAction::Transmit {
                    let version = n.state.version;
                    transmissions.push(TxRecord { t: now, node, interval: epoch });
                    tx_per_node[node] += 1;
                    for &(to, link) in &adjacency[node] {
                        let lost = rng.random::<f64>() < link.loss_prob;
                        if !lost {
                            queue.push(now + link.latency_s, SimEvent::Deliver { to, version });
                        }
                    }
                }
            }
            SimEvent::Expire { node, epoch } => {
                let n = &mut nodes[node];
                if epoch != n.epoch {
                    continue;
                }
                let (state, _) = trickle_advance(n.state, TrickleEvent::IntervalExpired, params, &mut rng);
                n.state = state;
                restart(n, node, now, &mut queue);
            }
            SimEvent::Deliver { to, version } => {
                let n = &mut nodes[to];
                let before = n.state;
                let ev = if version == before.version {
                    TrickleEvent::HeardConsistent
                } else {
                    TrickleEvent::HeardInconsistent(version)
                };
                let (state, _) = trickle_advance(before, ev, params, &mut rng);
                n.state = state;
                let reset = matches!(ev, TrickleEvent::HeardInconsistent(_)) && state != before;
                if reset {
                    restart(n, to, now, &mut queue);
                }
                if before.version == 0 && state.version == 1 {
                    covered += 1;
                    timeline.push((now, covered));
                    if covered == names.len() {
                        convergence = Some(now);
                    }
                }
            }
        }
    }

    let tx_total = tx_per_node.iter().sum();
    Ok(DisseminationStats {
        coverage: covered as f64 / names.len() as f64,
        tx_total,
        tx_per_node: names.iter().map(|n| n.to_string()).zip(tx_per_node).collect(),
        convergence_time_s: convergence,
        coverage_timeline: timeline,
        transmissions,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeliveryOutcome {
    pub delivered: bool,
    /// Time spent on the hops that were traversed successfully.
    pub latency_s: f64,
    pub hops: usize,
}

/// Sends one packet along `route`, hop by hop.
pub fn deliver_data<R: Rng + ?Sized>(
    topology: &TopologyGraph,
    route: &[NodeId],
    packet_bits: u64,
    rng: &mut R,
) -> Result<DeliveryOutcome, MeshError> {
    if let Some(first) = route.first() {
        if !topology.contains(first) {
            return Err(MeshError::Route(format!("unknown node {first:?}")));
        }
    }
    let links = route
        .windows(2)
        .map(|w| {
            topology
                .link(&w[0], &w[1])
                .copied()
                .ok_or_else(|| MeshError::Route(format!("no edge {:?} - {:?}", w[0], w[1])))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut latency = 0.0;
    for (hop, link) in links.iter().enumerate() {
        if rng.random::<f64>() < link.loss_prob {
            return Ok(DeliveryOutcome { delivered: false, latency_s: latency, hops: hop });
        }
        latency += link.latency_s + packet_bits as f64 / link.capacity_bps;
    }
    Ok(DeliveryOutcome { delivered: true, latency_s: latency, hops: links.len() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn lossless() -> LinkModel {
        LinkModel { latency_s: 0.01, loss_prob: 0.0, capacity_bps: DEFAULT_CAPACITY_BPS }
    }

    fn state(i: f64, c: u32, version: u64) -> TrickleState {
        TrickleState { interval_i_s: i, t_fire_s: i / 2.0, c, version }
    }

    #[test]
    fn suppressed_when_counter_reaches_k() {
        let p = TrickleParams { k: 2, ..TrickleParams::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (_, a) = trickle_advance(state(4.0, 2, 0), TrickleEvent::TimerFired, &p, &mut rng);
        assert_eq!(a, TrickleAction::None);
        let (_, a) = trickle_advance(state(4.0, 1, 0), TrickleEvent::TimerFired, &p, &mut rng);
        assert_eq!(a, TrickleAction::Transmit);
    }

    #[test]
    fn newer_version_resets_interval() {
        let p = TrickleParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (s, _) = trickle_advance(state(p.i_max_s(), 3, 0), TrickleEvent::HeardInconsistent(7), &p, &mut rng);
        assert_eq!(s.interval_i_s, p.i_min_s);
        assert_eq!(s.version, 7);
        assert_eq!(s.c, 0);
        assert!(s.t_fire_s >= 0.5 && s.t_fire_s < 1.0);
    }

    #[test]
    fn older_version_resets_only_above_imin() {
        let p = TrickleParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (s, _) = trickle_advance(state(8.0, 1, 5), TrickleEvent::HeardInconsistent(2), &p, &mut rng);
        assert_eq!((s.interval_i_s, s.version), (1.0, 5));
        let before = state(1.0, 1, 5);
        let (s, _) = trickle_advance(before, TrickleEvent::HeardInconsistent(2), &p, &mut rng);
        assert_eq!(s, before);
    }

    #[test]
    fn interval_doubles_to_cap() {
        let p = TrickleParams { i_min_s: 1.0, i_doublings: 2, k: 1 };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = TrickleState::new(0, &p, &mut rng);
        let mut seen = vec![s.interval_i_s];
        for _ in 0..4 {
            s = trickle_advance(s, TrickleEvent::IntervalExpired, &p, &mut rng).0;
            assert!(s.t_fire_s >= s.interval_i_s / 2.0 && s.t_fire_s < s.interval_i_s);
            seen.push(s.interval_i_s);
        }
        assert_eq!(seen, vec![1.0, 2.0, 4.0, 4.0, 4.0]);
        let s2 = trickle_advance(TrickleState { c: 0, ..s }, TrickleEvent::HeardConsistent, &p, &mut rng).0;
        assert_eq!(s2.c, 1);
    }

    #[test]
    fn isolated_node_transmits_once_per_interval() {
        // intervals 1, 2, 4, 4, 4 fill exactly 15 s
        let p = TrickleParams { i_min_s: 1.0, i_doublings: 2, k: 1 };
        let g = TopologyGraph::new(["solo"]);
        let stats = simulate_dissemination(&g, &p, "solo", 15.0, 1).unwrap();
        assert_eq!(stats.tx_total, 5);
        let intervals: Vec<u64> = stats.transmissions.iter().map(|t| t.interval).collect();
        assert_eq!(intervals, vec![0, 1, 2, 3, 4]);
        let bounds = [(0.5, 1.0), (2.0, 3.0), (5.0, 7.0), (9.0, 11.0), (13.0, 15.0)];
        for (tx, (lo, hi)) in stats.transmissions.iter().zip(bounds) {
            assert!(tx.t >= lo && tx.t < hi, "{} not in [{lo}, {hi})", tx.t);
        }
        assert_eq!(stats.coverage, 1.0);
        assert_eq!(stats.convergence_time_s, Some(0.0));
    }

    #[test]
    fn clique_full_coverage() {
        let g = TopologyGraph::clique(5, lossless()).unwrap();
        let stats = simulate_dissemination(&g, &TrickleParams::default(), "n00", 60.0, 7).unwrap();
        assert_eq!(stats.coverage, 1.0);
        assert!(stats.convergence_time_s.unwrap() < 2.0);
    }

    #[test]
    fn isolated_node_not_covered() {
        let names = ["n00", "n01", "n02", "n03", "n04"];
        let mut g = TopologyGraph::new(names);
        for i in 0..4 {
            for j in i + 1..4 {
                g.add_edge(names[i], names[j], lossless()).unwrap();
            }
        }
        let stats = simulate_dissemination(&g, &TrickleParams::default(), "n00", 60.0, 7).unwrap();
        assert_eq!(stats.coverage, 0.8);
        assert_eq!(stats.convergence_time_s, None);
    }

    #[test]
    fn total_loss_reaches_only_originator() {
        let link = LinkModel { loss_prob: 1.0, ..lossless() };
        let g = TopologyGraph::clique(6, link).unwrap();
        let stats = simulate_dissemination(&g, &TrickleParams::default(), "n03", 60.0, 7).unwrap();
        assert_eq!(stats.coverage, 1.0 / 6.0);
    }

    #[test]
    fn unknown_originator() {
        let g = TopologyGraph::clique(3, lossless()).unwrap();
        assert!(matches!(simulate_dissemination(&g, &TrickleParams::default(), "zz", 1.0, 0), Err(MeshError::Node(_))));
    }

    #[test]
    fn lossy_mesh_still_converges() {
        let link = LinkModel { loss_prob: 0.3, ..lossless() };
        let g = TopologyGraph::random_connected(12, 0.1, 4, link).unwrap();
        let stats = simulate_dissemination(&g, &TrickleParams::default(), "n00", 300.0, 4).unwrap();
        assert_eq!(stats.coverage, 1.0);
    }

    #[test]
    fn deterministic_runs() {
        let link = LinkModel { loss_prob: 0.2, ..lossless() };
        let g = TopologyGraph::random_connected(15, 0.2, 9, link).unwrap();
        let a = simulate_dissemination(&g, &TrickleParams::default(), "n00", 120.0, 42).unwrap();
        let b = simulate_dissemination(&g, &TrickleParams::default(), "n00", 120.0, 42).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_hop_delivery_latency() {
        let g = TopologyGraph::star("fog", &["glove".to_string()], lossless()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let route = vec!["glove".to_string(), "fog".to_string()];
        let out = deliver_data(&g, &route, 1000, &mut rng).unwrap();
        assert!(out.delivered);
        // 0.01 s + 1000 bits / 25 Mbit/s = 0.01 + 40 µs
        assert!((out.latency_s - 0.01004).abs() < 1e-15);
    }

    #[test]
    fn lossy_hop_drops_packet() {
        let mut g = TopologyGraph::new(["a", "b", "c"]);
        g.add_edge("a", "b", lossless()).unwrap();
        g.add_edge("b", "c", LinkModel { loss_prob: 1.0, ..lossless() }).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let route: Vec<NodeId> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let out = deliver_data(&g, &route, 8, &mut rng).unwrap();
        assert!(!out.delivered);
        assert_eq!(out.hops, 1);
    }

    #[test]
    fn empty_route_is_local() {
        let g = TopologyGraph::new(["a"]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = deliver_data(&g, &[], 8, &mut rng).unwrap();
        assert_eq!(out, DeliveryOutcome { delivered: true, latency_s: 0.0, hops: 0 });
        let out = deliver_data(&g, &["a".to_string()], 8, &mut rng).unwrap();
        assert!(out.delivered);
    }

    #[test]
    fn bad_route() {
        let g = TopologyGraph::new(["a", "b"]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let route = vec!["a".to_string(), "b".to_string()];
        assert!(matches!(deliver_data(&g, &route, 8, &mut rng), Err(MeshError::Route(_))));
    }

    #[test]
    fn topology_validation() {
        let mut g = TopologyGraph::new(["a", "b"]);
        assert!(g.add_edge("a", "a", lossless()).is_err());
        assert!(matches!(g.add_edge("a", "zz", lossless()), Err(MeshError::Node(_))));
        assert!(g.add_edge("a", "b", LinkModel { loss_prob: 1.5, ..lossless() }).is_err());
        assert!(g.add_edge("a", "b", LinkModel { capacity_bps: 0.0, ..lossless() }).is_err());
    }

    #[test]
    fn topology_file_parsing() {
        let text = r#"{"nodes":["fog","g1","g2"],"edges":[["fog","g1"],["g1","g2"]],"link":{"latency_s":0.005,"loss_prob":0.1}}"#;
        let file: TopologyFile = serde_json::from_str(text).unwrap();
        let g = TopologyGraph::from_file(&file).unwrap();
        assert_eq!(g.edge_count(), 2);
        assert_eq!(g.link("g1", "fog").unwrap().capacity_bps, DEFAULT_CAPACITY_BPS);
        let path = g.shortest_path("g2", "fog").unwrap().unwrap();
        assert_eq!(path, vec!["g2", "g1", "fog"]);
        let bad = r#"{"nodes":["a"],"edges":[["a","b"]],"link":{"latency_s":0,"loss_prob":0}}"#;
        assert!(TopologyGraph::from_file(&serde_json::from_str(bad).unwrap()).is_err());
    }

    #[test]
    fn random_graph_is_connected() {
        for seed in 0..20 {
            let g = TopologyGraph::random_connected(20, 0.05, seed, lossless()).unwrap();
            assert!(g.is_connected());
        }
    }

    proptest! {
        #[test]
        fn coverage_never_drops(seed in any::<u64>(), n in 2usize..12, loss in 0.0f64..0.6) {
            let link = LinkModel { loss_prob: loss, ..lossless() };
            let g = TopologyGraph::random_connected(n, 0.2, seed, link).unwrap();
            let stats = simulate_dissemination(&g, &TrickleParams::default(), "n00", 60.0, seed).unwrap();
            prop_assert!(stats.coverage_timeline.windows(2).all(|w| w[1].0 >= w[0].0 && w[1].1 > w[0].1));
            let mut seen = BTreeSet::new();
            for tx in &stats.transmissions {
                prop_assert!(seen.insert((tx.node, tx.interval)), "two transmissions in one interval");
            }
        }

        #[test]
        fn lossless_connected_converges_in_bounded_time(seed in any::<u64>(), n in 2usize..=20) {
            let p = TrickleParams::default();
            let g = TopologyGraph::random_connected(n, 0.1, seed, lossless()).unwrap();
            let stats = simulate_dissemination(&g, &p, "n00", 10.0 * p.i_max_s(), seed).unwrap();
            prop_assert_eq!(stats.coverage, 1.0);
        }
    }
}
