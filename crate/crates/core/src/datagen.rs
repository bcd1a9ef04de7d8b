//! Synthetic flow-link scenarios labeled by an M/M/1 queueing oracle.
//!
//! Each scenario is a random connected topology with shortest-path routing.
//! Flow traffic is drawn log-uniformly and, when some link would exceed the
//! utilization cap, every flow is scaled down so the busiest link lands at a
//! random fraction of the cap. Flow statistics (IPG moments and percentiles,
//! burst descriptors) are derived from the flow's packet rate with jitter.

use std::collections::VecDeque;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{FlowKanError, Result};
use crate::netgraph::{build_graph, FlowRecord, FlowType, HeteroGraph, Scenario, FLOW_FEATURES};
use crate::rng::{self, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub nodes: (usize, usize),
    pub links: (usize, usize),
    pub flows: (usize, usize),
    /// Gbit/s choices.
    pub capacities: Vec<f64>,
    /// bits/s, sampled log-uniformly before rescaling.
    pub traffic: (f64, f64),
    /// No flow may be rescaled below this rate; hitting it triggers a redraw.
    pub traffic_floor: f64,
    /// Mean packet size used by the oracle's service rate.
    pub mean_packet_bytes: f64,
    /// Every link's utilization stays strictly below this.
    pub utilization_cap: f64,
    /// Per-link propagation delay in seconds.
    pub propagation_delay: f64,
    /// Fraction of bursty (MB) flows.
    pub mb_fraction: f64,
    /// Observation window in seconds, used for packet counts.
    pub duration: (f64, f64),
    pub max_retries: usize,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            nodes: (4, 8),
            links: (4, 12),
            flows: (5, 20),
            capacities: vec![0.01, 0.02, 0.04],
            traffic: (2e5, 8e6),
            traffic_floor: 1e4,
            mean_packet_bytes: 1000.0,
            utilization_cap: 0.9,
            propagation_delay: 5e-5,
            mb_fraction: 0.5,
            duration: (5.0, 60.0),
            max_retries: 100,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        let range = |name: &str, lo: usize, hi: usize| {
            if lo > hi {
                Err(FlowKanError::config(format!("{name} range [{lo}, {hi}] is empty")))
            } else {
                Ok(())
            }
        };
        range("nodes", self.nodes.0, self.nodes.1)?;
        range("links", self.links.0, self.links.1)?;
        range("flows", self.flows.0, self.flows.1)?;
        if self.nodes.0 < 2 {
            return Err(FlowKanError::config("scenarios need at least 2 nodes"));
        }
        if self.links.0 == 0 {
            return Err(FlowKanError::config("scenarios need at least 1 link"));
        }
        if self.capacities.is_empty() || self.capacities.iter().any(|&c| !(c > 0.0 && c.is_finite())) {
            return Err(FlowKanError::config("capacities must be a non-empty list of positive values"));
        }
        if !(self.traffic.0 > 0.0 && self.traffic.0 <= self.traffic.1 && self.traffic.1.is_finite()) {
            return Err(FlowKanError::config(format!("invalid traffic range {:?}", self.traffic)));
        }
        if !(self.traffic_floor >= 0.0 && self.traffic_floor <= self.traffic.0) {
            return Err(FlowKanError::config("traffic floor must lie in [0, minimum traffic]"));
        }
        if !(self.utilization_cap > 0.0 && self.utilization_cap < 1.0) {
            return Err(FlowKanError::config(format!(
                "utilization cap {} must lie in (0, 1)",
                self.utilization_cap
            )));
        }
        if !(self.mean_packet_bytes > 0.0 && self.propagation_delay >= 0.0) {
            return Err(FlowKanError::config("packet size must be positive and propagation delay non-negative"));
        }
        if !(0.0..=1.0).contains(&self.mb_fraction) {
            return Err(FlowKanError::config("mb_fraction must lie in [0, 1]"));
        }
        if !(self.duration.0 > 0.0 && self.duration.0 <= self.duration.1) {
            return Err(FlowKanError::config(format!("invalid duration range {:?}", self.duration)));
        }
        Ok(())
    }

    pub fn oracle(&self) -> DelayOracle {
        DelayOracle {
            propagation_delay: self.propagation_delay,
            mean_packet_bytes: self.mean_packet_bytes,
        }
    }
}

/// Closed-form M/M/1 sojourn-time labels: per traversed link
/// `1 / (mu - lambda) + propagation`, with `mu = C * 1e9 / (8 E)` and
/// `lambda = traffic / (8 E)` for a fixed mean packet size `E`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DelayOracle {
    pub propagation_delay: f64,
    pub mean_packet_bytes: f64,
}

/// Mean time in an M/M/1 system.
pub fn mm1_sojourn(mu: f64, lambda: f64) -> Option<f64> {
    (lambda < mu).then(|| 1.0 / (mu - lambda))
}

impl DelayOracle {
    pub fn service_rate(&self, capacity_gbps: f64) -> f64 {
        capacity_gbps * 1e9 / (8.0 * self.mean_packet_bytes)
    }

    pub fn arrival_rate(&self, traffic_bps: f64) -> f64 {
        traffic_bps / (8.0 * self.mean_packet_bytes)
    }

    /// Per-link traffic sums in bits/s.
    pub fn link_traffic(flows: &[FlowRecord], n_links: usize) -> Vec<f64> {
        let mut t = vec![0.0; n_links];
        for f in flows {
            for &l in &f.path {
                t[l] += f.flow_traffic;
            }
        }
        t
    }

    pub fn flow_delay(&self, flow: &FlowRecord, capacities: &[f64], link_traffic: &[f64]) -> Result<f64> {
        flow.path.iter().try_fold(0.0, |acc, &l| {
            let mu = self.service_rate(capacities[l]);
            let lambda = self.arrival_rate(link_traffic[l]);
            let q = mm1_sojourn(mu, lambda).ok_or(FlowKanError::Unstable { link: l, lambda, mu })?;
            Ok(acc + q + self.propagation_delay)
        })
    }

    /// Labels every flow of `graph` in place.
    pub fn label(&self, graph: &mut HeteroGraph) -> Result<()> {
        let caps: Vec<f64> = graph.links.iter().map(|l| l.capacity).collect();
        let traffic = Self::link_traffic(&graph.flows, caps.len());
        for i in 0..graph.flows.len() {
            let d = self.flow_delay(&graph.flows[i], &caps, &traffic)?;
            graph.flows[i].delay = Some(d);
        }
        Ok(())
    }
}

fn random_topology(n_nodes: usize, n_links: usize, rng: &mut Rng) -> Vec<(usize, usize)> {
    let mut order: Vec<usize> = (0..n_nodes).collect();
    order.shuffle(rng);
    let mut edges = Vec::with_capacity(n_links);
    for i in 1..n_nodes {
        let j = rng.random_range(0..i);
        let (a, b) = (order[i].min(order[j]), order[i].max(order[j]));
        edges.push((a, b));
    }
    let mut missing: Vec<(usize, usize)> = (0..n_nodes)
        .flat_map(|a| (a + 1..n_nodes).map(move |b| (a, b)))
        .filter(|e| !edges.contains(e))
        .collect();
    missing.shuffle(rng);
    edges.extend(missing.into_iter().take(n_links - edges.len()));
    edges
}

/// Breadth-first shortest path returning link ids; neighbors are visited in
/// ascending node order so ties resolve deterministically.
fn shortest_path(adj: &[Vec<(usize, usize)>], src: usize, dst: usize) -> Vec<usize> {
    let mut prev: Vec<Option<(usize, usize)>> = vec![None; adj.len()];
    let mut seen = vec![false; adj.len()];
    let mut queue = VecDeque::from([src]);
    seen[src] = true;
    while let Some(u) = queue.pop_front() {
        if u == dst {
            break;
        }
        for &(v, link) in &adj[u] {
            if !seen[v] {
                seen[v] = true;
                prev[v] = Some((u, link));
                queue.push_back(v);
            }
        }
    }
    let mut path = Vec::new();
    let mut cur = dst;
    while let Some((p, link)) = prev[cur] {
        path.push(link);
        cur = p;
    }
    path.reverse();
    path
}

fn log_uniform(rng: &mut Rng, lo: f64, hi: f64) -> f64 {
    if lo == hi {
        return lo;
    }
    (rng.random_range(lo.ln()..hi.ln())).exp()
}

fn flow_statistics(traffic: f64, path: Vec<usize>, cfg: &ScenarioConfig, rng: &mut Rng) -> FlowRecord {
    let mb = rng.random::<f64>() < cfg.mb_fraction;
    let size = cfg.mean_packet_bytes * rng.random_range(0.5..1.5);
    let pkt_rate = traffic / (8.0 * size);
    let duration = rng.random_range(cfg.duration.0..=cfg.duration.1);
    let ipg_mean = 1.0 / pkt_rate;
    let (cv, ibg, per_burst) = if mb {
        let cv = rng.random_range(0.7..1.5);
        (cv, ipg_mean * rng.random_range(5.0..50.0), traffic * rng.random_range(1.5..4.0))
    } else {
        (rng.random_range(0.01..0.1), 0.0, traffic)
    };
    let sd = cv * ipg_mean;
    let p11 = (ipg_mean - sd * rng.random_range(0.8..1.2)).max(0.05 * ipg_mean);
    let p99 = ipg_mean + sd * rng.random_range(2.0..2.6);
    let p100 = p99 + sd * rng.random_range(0.1..1.5);
    FlowRecord {
        flow_traffic: traffic,
        flow_packets: (pkt_rate * duration).round(),
        flow_packet_size: size,
        flow_type: if mb { FlowType::Mb } else { FlowType::Cbr },
        flow_length: path.len(),
        flow_p10_pkt_size: size * rng.random_range(0.6..0.95),
        flow_tos: rng.random_range(0..8),
        flow_packet_loss: 0.0,
        ibg,
        rate: traffic * rng.random_range(0.95..1.05),
        flow_bitrate_per_burst: per_burst,
        flow_ipg_mean: ipg_mean,
        flow_ipg_var: sd * sd,
        ipg_p11: p11,
        ipg_p99: p99,
        ipg_p100: p100,
        path,
        delay: None,
    }
}

/// One labeled scenario.
pub fn generate_scenario(cfg: &ScenarioConfig, rng: &mut Rng) -> Result<HeteroGraph> {
    cfg.validate()?;
    let n_nodes = rng.random_range(cfg.nodes.0..=cfg.nodes.1);
    let max_links = n_nodes * (n_nodes - 1) / 2;
    let (lo, hi) = (cfg.links.0.max(n_nodes - 1), cfg.links.1.min(max_links));
    if lo > hi {
        return Err(FlowKanError::config(format!(
            "cannot build a connected simple graph on {n_nodes} nodes with {:?} links",
            cfg.links
        )));
    }
    let n_links = rng.random_range(lo..=hi);
    let edges = random_topology(n_nodes, n_links, rng);
    let capacities: Vec<f64> = (0..n_links)
        .map(|_| *cfg.capacities.choose(rng).expect("non-empty"))
        .collect();
    let mut adj = vec![Vec::new(); n_nodes];
    for (l, &(a, b)) in edges.iter().enumerate() {
        adj[a].push((b, l));
        adj[b].push((a, l));
    }
    for nbrs in &mut adj {
        nbrs.sort_unstable();
    }

    let n_flows = rng.random_range(cfg.flows.0..=cfg.flows.1);
    let paths: Vec<Vec<usize>> = (0..n_flows)
        .map(|_| {
            let src = rng.random_range(0..n_nodes);
            let mut dst = rng.random_range(0..n_nodes - 1);
            if dst >= src {
                dst += 1;
            }
            shortest_path(&adj, src, dst)
        })
        .collect();

    let caps_bps: Vec<f64> = capacities.iter().map(|c| c * 1e9).collect();
    let mut traffic = None;
    for _ in 0..=cfg.max_retries {
        let mut t: Vec<f64> = (0..n_flows).map(|_| log_uniform(rng, cfg.traffic.0, cfg.traffic.1)).collect();
        let mut per_link = vec![0.0; n_links];
        for (p, &v) in paths.iter().zip(&t) {
            for &l in p {
                per_link[l] += v;
            }
        }
        let peak = per_link
            .iter()
            .zip(&caps_bps)
            .map(|(x, c)| x / c)
            .fold(0.0f64, f64::max);
        if peak >= cfg.utilization_cap {
            let target = cfg.utilization_cap * rng.random_range(0.5..0.98);
            let s = target / peak;
            t.iter_mut().for_each(|v| *v *= s);
            if t.iter().any(|&v| v < cfg.traffic_floor) {
                continue;
            }
        }
        traffic = Some(t);
        break;
    }
    let traffic = traffic.ok_or_else(|| {
        FlowKanError::Generation(format!(
            "could not keep link utilization under {} within {} retries",
            cfg.utilization_cap, cfg.max_retries
        ))
    })?;

    let flows = traffic
        .into_iter()
        .zip(paths)
        .map(|(t, p)| flow_statistics(t, p, cfg, rng))
        .collect();
    let mut graph = build_graph(Scenario { capacities, flows })?;
    cfg.oracle().label(&mut graph)?;
    Ok(graph)
}

/// Graph `i` of a dataset uses its own generator derived from `(seed, i)`, so
/// the result depends only on the index and never on evaluation order.
pub fn generate_dataset(cfg: &ScenarioConfig, n_graphs: usize, seed: u64) -> Result<Vec<HeteroGraph>> {
    generate_range(cfg, 0..n_graphs, seed)
}

pub fn generate_range(cfg: &ScenarioConfig, indices: std::ops::Range<usize>, seed: u64) -> Result<Vec<HeteroGraph>> {
    indices
        .map(|i| generate_scenario(cfg, &mut rng::split(seed, i as u64)))
        .collect()
}

/// Desk-scale split used throughout the tests and defaults.
pub const DESK_TRAIN_GRAPHS: usize = 250;
pub const DESK_TEST_GRAPHS: usize = 60;

/// `(train, test)` with disjoint graph indices.
pub fn desk_scale_split(cfg: &ScenarioConfig, seed: u64) -> Result<(Vec<HeteroGraph>, Vec<HeteroGraph>)> {
    let train = generate_range(cfg, 0..DESK_TRAIN_GRAPHS, seed)?;
    let test = generate_range(cfg, DESK_TRAIN_GRAPHS..DESK_TRAIN_GRAPHS + DESK_TEST_GRAPHS, seed)?;
    Ok((train, test))
}

pub const DISTRACTOR_COUNT: usize = 8;

/// Flat per-flow table: the 16 flow features, then 8 distractor columns that
/// carry no information about delay beyond chance.
#[derive(Clone, Debug, PartialEq)]
pub struct RawTable {
    pub names: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    /// Delay in milliseconds.
    pub target: Vec<f64>,
}

pub fn raw_feature_table(graphs: &[HeteroGraph], seed: u64) -> Result<RawTable> {
    let mut rng = rng::seeded(seed);
    let mut names: Vec<String> = FLOW_FEATURES.iter().map(|s| s.to_string()).collect();
    names.extend((0..DISTRACTOR_COUNT).map(|i| format!("distractor_{i}")));
    let mut rows = Vec::new();
    let mut target = Vec::new();
    for (gi, g) in graphs.iter().enumerate() {
        for (fi, f) in g.flows.iter().enumerate() {
            let delay = f.delay.ok_or_else(|| {
                FlowKanError::validation(format!("graph {gi} flow {fi} has no delay label"))
            })?;
            let mut row = f.features().to_vec();
            row.push(rng.random::<f64>());
            row.push(rng.random_range(-1.0..1.0));
            row.push(f.flow_traffic * rng.random_range(0.0..2.0));
            row.push(rng.random_range(0..64) as f64);
            row.push(f.flow_ipg_mean * rng.random_range(0.0..3.0));
            row.push(1.0 + 1e-3 * rng.random::<f64>());
            row.push(rng.random_range(0.0..1e6));
            row.push((rng.random::<f64>() - 0.5).powi(3));
            rows.push(row);
            target.push(delay * 1e3);
        }
    }
    Ok(RawTable { names, rows, target })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netgraph::write_dataset;

    #[test]
    fn service_time_only_on_idle_link() {
        let o = DelayOracle {
            propagation_delay: 0.0,
            mean_packet_bytes: 1000.0,
        };
        let mu = o.service_rate(1.0);
        assert_eq!(mm1_sojourn(mu, 0.0), Some(1.0 / mu));
    }

    #[test]
    fn hand_substitution() {
        let q = mm1_sojourn(2e5, 1e5).unwrap();
        assert!((q - 1e-5).abs() < 1e-18);
        assert!(mm1_sojourn(1e5, 1e5).is_none());
    }

    #[test]
    fn single_flow_single_link_label() {
        let cfg = ScenarioConfig {
            mean_packet_bytes: 500.0,
            propagation_delay: 0.0,
            ..Default::default()
        };
        let mut f = crate::netgraph::tests::flow(500.0 * 8.0 * 1e4, vec![0]);
        f.delay = None;
        let mut g = build_graph(Scenario {
            capacities: vec![1.0],
            flows: vec![f],
        })
        .unwrap();
        cfg.oracle().label(&mut g).unwrap();
        // mu = 1e9 / 4000 = 250000, lambda = 1e4
        let want = 1.0 / (250_000.0 - 10_000.0);
        assert!((g.flows[0].delay.unwrap() - want).abs() < 1e-18);
    }

    #[test]
    fn three_identical_hops_triple_delay() {
        let o = DelayOracle {
            propagation_delay: 2e-6,
            mean_packet_bytes: 1000.0,
        };
        let f1 = crate::netgraph::tests::flow(3e6, vec![0]);
        let f3 = crate::netgraph::tests::flow(3e6, vec![0, 1, 2]);
        let caps = [0.01; 3];
        let one = o.flow_delay(&f1, &caps, &[3e6]).unwrap();
        let three = o.flow_delay(&f3, &caps, &[3e6; 3]).unwrap();
        assert!((three - 3.0 * one).abs() < 1e-18);
    }

    #[test]
    fn unstable_link_reported() {
        let o = ScenarioConfig::default().oracle();
        let f = crate::netgraph::tests::flow(2e7, vec![0]);
        assert!(matches!(
            o.flow_delay(&f, &[0.01], &[2e7]),
            Err(FlowKanError::Unstable { link: 0, .. })
        ));
    }

    #[test]
    fn zero_flows() {
        let cfg = ScenarioConfig {
            flows: (0, 0),
            ..Default::default()
        };
        let g = generate_scenario(&cfg, &mut rng::seeded(3)).unwrap();
        assert_eq!(g.n_flows(), 0);
        assert!(g.n_links() >= 4);
    }

    #[test]
    fn generated_graphs_satisfy_invariants() {
        let cfg = ScenarioConfig::default();
        for g in generate_dataset(&cfg, 30, 17).unwrap() {
            g.validate().unwrap();
            for l in &g.links {
                assert!(l.load < cfg.utilization_cap);
            }
            for f in &g.flows {
                assert!(f.delay.unwrap() > 0.0);
                assert!(f.ipg_p11 <= f.ipg_p99 && f.ipg_p99 <= f.ipg_p100);
            }
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let cfg = ScenarioConfig::default();
        let bytes = |seed| {
            let mut buf = Vec::new();
            write_dataset(&generate_dataset(&cfg, 5, seed).unwrap(), &mut buf).unwrap();
            buf
        };
        assert_eq!(bytes(7), bytes(7));
        assert_ne!(bytes(7), bytes(8));
    }

    #[test]
    fn increasing_traffic_increases_delay() {
        let cfg = ScenarioConfig::default();
        let o = cfg.oracle();
        let g = generate_scenario(&cfg, &mut rng::seeded(21)).unwrap();
        let caps: Vec<f64> = g.links.iter().map(|l| l.capacity).collect();
        for target in 0..g.n_flows() {
            let mut flows = g.flows.clone();
            flows[target].flow_traffic *= 1.01;
            let traffic = DelayOracle::link_traffic(&flows, caps.len());
            if traffic.iter().zip(&caps).any(|(t, c)| t / (c * 1e9) >= cfg.utilization_cap) {
                continue;
            }
            for (i, f) in flows.iter().enumerate() {
                let before = g.flows[i].delay.unwrap();
                let after = o.flow_delay(f, &caps, &traffic).unwrap();
                if i == target {
                    assert!(after > before);
                } else {
                    assert!(after >= before);
                }
            }
        }
    }

    #[test]
    fn infeasible_config_errors() {
        let cfg = ScenarioConfig {
            flows: (20, 20),
            links: (1, 1),
            nodes: (2, 2),
            traffic: (9e6, 9e6),
            traffic_floor: 9e6,
            capacities: vec![0.01],
            max_retries: 5,
            ..Default::default()
        };
        assert!(matches!(
            generate_scenario(&cfg, &mut rng::seeded(0)),
            Err(FlowKanError::Generation(_))
        ));
    }

    #[test]
    fn raw_table_shape() {
        let gs = generate_dataset(&ScenarioConfig::default(), 3, 1).unwrap();
        let t = raw_feature_table(&gs, 2).unwrap();
        assert_eq!(t.names.len(), 24);
        assert!(t.rows.iter().all(|r| r.len() == 24));
        assert_eq!(t.rows.len(), gs.iter().map(|g| g.n_flows()).sum::<usize>());
    }
}
