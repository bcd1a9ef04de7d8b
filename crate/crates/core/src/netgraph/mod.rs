//! Flow-link bipartite graphs, link loads, feature vectors and normalization.

mod io;
mod normalize;

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{FlowKanError, Result};

pub use io::{load_dataset, read_dataset, save_dataset, write_dataset, DATASET_FORMAT, DATASET_VERSION};
pub use normalize::{fit_flow_normalizer, fit_link_normalizer, Normalizer};

/// Denominator guard for link loads.
pub const LOAD_EPS: f64 = 1e-9;

/// The selected flow features, in table order.
pub const FLOW_FEATURES: [&str; 16] = [
    "flow_traffic",
    "flow_packets",
    "flow_packet_size",
    "flow_type",
    "flow_length",
    "flow_p10PktSize",
    "flow_tos",
    "flow_packet_loss",
    "ibg",
    "rate",
    "flow_bitrate_per_burst",
    "flow_ipg_mean",
    "flow_ipg_var",
    "ipg_p11",
    "ipg_p99",
    "ipg_p100",
];

pub const LINK_FEATURES: [&str; 2] = ["capacity", "load"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FlowType {
    #[serde(rename = "CBR")]
    Cbr,
    #[serde(rename = "MB")]
    Mb,
}

impl FlowType {
    pub fn code(self) -> f64 {
        match self {
            FlowType::Cbr => 0.0,
            FlowType::Mb => 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowRecord {
    /// bits/s
    pub flow_traffic: f64,
    pub flow_packets: f64,
    /// bytes
    pub flow_packet_size: f64,
    pub flow_type: FlowType,
    /// hop count, equal to `path.len()`
    pub flow_length: usize,
    #[serde(rename = "flow_p10PktSize")]
    pub flow_p10_pkt_size: f64,
    pub flow_tos: u32,
    /// percent
    pub flow_packet_loss: f64,
    /// seconds
    pub ibg: f64,
    /// bits/s
    pub rate: f64,
    pub flow_bitrate_per_burst: f64,
    pub flow_ipg_mean: f64,
    pub flow_ipg_var: f64,
    pub ipg_p11: f64,
    pub ipg_p99: f64,
    pub ipg_p100: f64,
    pub path: Vec<usize>,
    /// End-to-end delay label in seconds.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delay: Option<f64>,
}

impl FlowRecord {
    /// All 16 features in [`FLOW_FEATURES`] order.
    pub fn features(&self) -> [f64; 16] {
        [
            self.flow_traffic,
            self.flow_packets,
            self.flow_packet_size,
            self.flow_type.code(),
            self.flow_length as f64,
            self.flow_p10_pkt_size,
            self.flow_tos as f64,
            self.flow_packet_loss,
            self.ibg,
            self.rate,
            self.flow_bitrate_per_burst,
            self.flow_ipg_mean,
            self.flow_ipg_var,
            self.ipg_p11,
            self.ipg_p99,
            self.ipg_p100,
        ]
    }

    pub fn validate(&self, idx: usize, n_links: usize) -> Result<()> {
        let bad = |msg: String| Err(FlowKanError::validation(format!("flow {idx}: {msg}")));
        if self.path.is_empty() {
            return bad("empty path".into());
        }
        let mut seen = HashSet::new();
        for &l in &self.path {
            if l >= n_links {
                return bad(format!("references unknown link {l} ({n_links} links)"));
            }
            if !seen.insert(l) {
                return bad(format!("traverses link {l} twice"));
            }
        }
        if self.flow_length != self.path.len() {
            return bad(format!(
                "flow_length {} differs from path length {}",
                self.flow_length,
                self.path.len()
            ));
        }
        let feats = self.features();
        if let Some(i) = feats.iter().position(|v| !v.is_finite()) {
            return bad(format!("non-finite {}", FLOW_FEATURES[i]));
        }
        for (name, v) in [
            ("flow_traffic", self.flow_traffic),
            ("flow_packets", self.flow_packets),
            ("flow_packet_size", self.flow_packet_size),
            ("flow_p10PktSize", self.flow_p10_pkt_size),
            ("flow_packet_loss", self.flow_packet_loss),
            ("ibg", self.ibg),
            ("rate", self.rate),
            ("flow_bitrate_per_burst", self.flow_bitrate_per_burst),
            ("flow_ipg_mean", self.flow_ipg_mean),
            ("flow_ipg_var", self.flow_ipg_var),
            ("ipg_p11", self.ipg_p11),
        ] {
            if v < 0.0 {
                return bad(format!("negative {name}"));
            }
        }
        if !(self.ipg_p11 <= self.ipg_p99 && self.ipg_p99 <= self.ipg_p100) {
            return bad("IPG percentiles out of order".into());
        }
        if let Some(d) = self.delay {
            if !(d.is_finite() && d > 0.0) {
                return bad(format!("delay label {d} is not a positive finite value"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkRecord {
    /// Gbit/s
    pub capacity: f64,
    /// Offered traffic over capacity.
    pub load: f64,
}

impl LinkRecord {
    pub fn features(&self) -> [f64; 2] {
        [self.capacity, self.load]
    }
}

/// Link capacities plus routed flows: what [`build_graph`] consumes.
#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    pub capacities: Vec<f64>,
    pub flows: Vec<FlowRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeteroGraph {
    pub flows: Vec<FlowRecord>,
    pub links: Vec<LinkRecord>,
    /// `(flow, link)` pairs, flow-major in path order.
    pub edges_f2l: Vec<(usize, usize)>,
    /// `(link, flow)` pairs; `edges_l2f[i]` mirrors `edges_f2l[i]`.
    pub edges_l2f: Vec<(usize, usize)>,
}

/// Offered load of `link`: summed traffic of the flows crossing it over
/// `capacity * 1e9 + LOAD_EPS`.
pub fn compute_link_load(flows: &[FlowRecord], link: usize, capacity: f64) -> f64 {
    let traffic: f64 = flows
        .iter()
        .filter(|f| f.path.contains(&link))
        .map(|f| f.flow_traffic)
        .sum();
    traffic / (capacity * 1e9 + LOAD_EPS)
}

pub fn build_graph(scenario: Scenario) -> Result<HeteroGraph> {
    let Scenario { capacities, flows } = scenario;
    for (l, &c) in capacities.iter().enumerate() {
        if !(c.is_finite() && c > 0.0) {
            return Err(FlowKanError::validation(format!("link {l}: capacity {c} must be positive")));
        }
    }
    for (i, f) in flows.iter().enumerate() {
        f.validate(i, capacities.len())?;
    }
    let links = capacities
        .iter()
        .enumerate()
        .map(|(l, &capacity)| LinkRecord {
            capacity,
            load: compute_link_load(&flows, l, capacity),
        })
        .collect();
    let edges_f2l: Vec<(usize, usize)> = flows
        .iter()
        .enumerate()
        .flat_map(|(f, rec)| rec.path.iter().map(move |&l| (f, l)))
        .collect();
    let edges_l2f = edges_f2l.iter().map(|&(f, l)| (l, f)).collect();
    Ok(HeteroGraph {
        flows,
        links,
        edges_f2l,
        edges_l2f,
    })
}

impl HeteroGraph {
    pub fn n_flows(&self) -> usize {
        self.flows.len()
    }

    pub fn n_links(&self) -> usize {
        self.links.len()
    }

    pub fn n_edges(&self) -> usize {
        self.edges_f2l.len()
    }

    /// Checks every structural invariant, including the edge/path correspondence.
    pub fn validate(&self) -> Result<()> {
        for (l, link) in self.links.iter().enumerate() {
            if !(link.capacity.is_finite() && link.capacity > 0.0) {
                return Err(FlowKanError::validation(format!("link {l}: non-positive capacity")));
            }
            if !(link.load.is_finite() && link.load >= 0.0) {
                return Err(FlowKanError::validation(format!("link {l}: invalid load {}", link.load)));
            }
        }
        for (i, f) in self.flows.iter().enumerate() {
            f.validate(i, self.links.len())?;
        }
        if self.edges_f2l.len() != self.edges_l2f.len()
            || self
                .edges_f2l
                .iter()
                .zip(&self.edges_l2f)
                .any(|(&(f, l), &(l2, f2))| f != f2 || l != l2)
        {
            return Err(FlowKanError::validation("edges_l2f is not the mirror of edges_f2l"));
        }
        let mut expected: Vec<(usize, usize)> = self
            .flows
            .iter()
            .enumerate()
            .flat_map(|(f, rec)| rec.path.iter().map(move |&l| (f, l)))
            .collect();
        let mut actual = self.edges_f2l.clone();
        expected.sort_unstable();
        actual.sort_unstable();
        if expected != actual {
            return Err(FlowKanError::validation("edge set does not match flow paths"));
        }
        Ok(())
    }

    pub fn labels(&self) -> Option<Vec<f64>> {
        self.flows.iter().map(|f| f.delay).collect()
    }

    /// Flows crossing each link, in edge order.
    pub fn link_neighbors(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.links.len()];
        for &(f, l) in &self.edges_f2l {
            out[l].push(f);
        }
        out
    }

    /// Copy with flows reordered so that new flow `i` is old flow `perm[i]`.
    pub fn permute_flows(&self, perm: &[usize]) -> HeteroGraph {
        let mut inverse = vec![0; perm.len()];
        for (new, &old) in perm.iter().enumerate() {
            inverse[old] = new;
        }
        let flows = perm.iter().map(|&old| self.flows[old].clone()).collect();
        let edges_f2l: Vec<(usize, usize)> = self.edges_f2l.iter().map(|&(f, l)| (inverse[f], l)).collect();
        let edges_l2f = edges_f2l.iter().map(|&(f, l)| (l, f)).collect();
        HeteroGraph {
            flows,
            links: self.links.clone(),
            edges_f2l,
            edges_l2f,
        }
    }

    /// Copy with the edge lists reordered by `perm` (same permutation on both
    /// directions, so the mirror invariant is kept).
    pub fn permute_edges(&self, perm: &[usize]) -> HeteroGraph {
        let edges_f2l: Vec<(usize, usize)> = perm.iter().map(|&i| self.edges_f2l[i]).collect();
        let edges_l2f = edges_f2l.iter().map(|&(f, l)| (l, f)).collect();
        HeteroGraph {
            flows: self.flows.clone(),
            links: self.links.clone(),
            edges_f2l,
            edges_l2f,
        }
    }
}

/// Ordered subset of [`FLOW_FEATURES`] used as model input.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "SelectionNames")]
pub struct FeatureSelection {
    pub names: Vec<String>,
    #[serde(skip)]
    indices: Vec<usize>,
}

#[derive(Deserialize)]
struct SelectionNames {
    names: Vec<String>,
}

impl TryFrom<SelectionNames> for FeatureSelection {
    type Error = FlowKanError;

    fn try_from(raw: SelectionNames) -> Result<Self> {
        Self::from_names(raw.names)
    }
}

impl FeatureSelection {
    pub fn all() -> Self {
        Self::from_names(FLOW_FEATURES.iter().map(|s| s.to_string())).expect("known names")
    }

    pub fn from_names(names: impl IntoIterator<Item = String>) -> Result<Self> {
        let names: Vec<String> = names.into_iter().collect();
        if names.is_empty() {
            return Err(FlowKanError::config("feature selection is empty"));
        }
        let mut indices = Vec::with_capacity(names.len());
        for n in &names {
            let i = FLOW_FEATURES
                .iter()
                .position(|f| f == n)
                .ok_or_else(|| FlowKanError::config(format!("unknown flow feature `{n}`")))?;
            if indices.contains(&i) {
                return Err(FlowKanError::config(format!("feature `{n}` selected twice")));
            }
            indices.push(i);
        }
        Ok(Self { names, indices })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn extract(&self, flow: &FlowRecord) -> Vec<f64> {
        let all = flow.features();
        self.indices.iter().map(|&i| all[i]).collect()
    }

}
