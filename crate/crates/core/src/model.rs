//! Pieces shared by every model tier: input preparation, the prediction
//! traits, and the checkpoint container.
//!
//! Models work in milliseconds internally. Targets are scaled by 1e3 before
//! the loss and predictions are scaled back to seconds at the public
//! boundary.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::baseline::{BaselineConfig, BaselineModel};
use crate::error::{FlowKanError, Result};
use crate::flowkanet::{FlowKanConfig, FlowKanModel};
use crate::netgraph::{fit_flow_normalizer, fit_link_normalizer, FeatureSelection, HeteroGraph, Normalizer};
use crate::rng::Rng;
use crate::tensor::{ParamStore, Tape, Tensor, Var};

pub const SECONDS_TO_MS: f64 = 1e3;

/// Feature selection plus the two min-max normalizers fitted on training
/// graphs. These are non-trainable buffers stored with every checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Preprocess {
    pub selection: FeatureSelection,
    pub flow: Normalizer,
    pub link: Normalizer,
}

/// One graph, normalized and flattened into what the forward passes consume.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphInput {
    pub n_flows: usize,
    pub n_links: usize,
    /// `[n_flows, selected features]`
    pub flow_x: Tensor,
    /// `[n_links, 2]`
    pub link_x: Tensor,
    /// Flow end of every flow-link edge.
    pub edge_flow: Vec<usize>,
    /// Link end of every flow-link edge.
    pub edge_link: Vec<usize>,
    /// `[n_flows, 1]` delays in milliseconds, when labeled.
    pub target_ms: Option<Tensor>,
}

impl Preprocess {
    pub fn fit(graphs: &[HeteroGraph], selection: FeatureSelection) -> Result<Self> {
        let flow = fit_flow_normalizer(graphs, &selection)?;
        let link = fit_link_normalizer(graphs)?;
        Ok(Self { selection, flow, link })
    }

    pub fn input_width(&self) -> usize {
        self.selection.len()
    }

    pub fn prepare(&self, graph: &HeteroGraph) -> Result<GraphInput> {
        graph.validate()?;
        let w = self.selection.len();
        let mut flow_x = Vec::with_capacity(graph.n_flows() * w);
        for (i, f) in graph.flows.iter().enumerate() {
            let raw = self.selection.extract(f);
            if let Some(j) = raw.iter().position(|v| !v.is_finite()) {
                return Err(FlowKanError::validation(format!(
                    "flow {i}: feature `{}` is {}",
                    self.selection.names[j], raw[j]
                )));
            }
            flow_x.extend(self.flow.apply(&raw));
        }
        let mut link_x = Vec::with_capacity(graph.n_links() * 2);
        for l in &graph.links {
            link_x.extend(self.link.apply(&l.features()));
        }
        if let Some(v) = flow_x.iter().chain(&link_x).find(|v| !v.is_finite()) {
            return Err(FlowKanError::validation(format!("normalized feature is {v}")));
        }
        let target_ms = graph
            .labels()
            .map(|d| Tensor::column(d.into_iter().map(|v| v * SECONDS_TO_MS).collect()));
        Ok(GraphInput {
            n_flows: graph.n_flows(),
            n_links: graph.n_links(),
            flow_x: Tensor::matrix(graph.n_flows(), w, flow_x),
            link_x: Tensor::matrix(graph.n_links(), 2, link_x),
            edge_flow: graph.edges_f2l.iter().map(|e| e.0).collect(),
            edge_link: graph.edges_f2l.iter().map(|e| e.1).collect(),
            target_ms,
        })
    }

    pub fn prepare_all(&self, graphs: &[HeteroGraph]) -> Result<Vec<GraphInput>> {
        graphs.iter().map(|g| self.prepare(g)).collect()
    }
}

/// Anything that maps a graph to per-flow delays.
pub trait Predictor {
    fn preprocess(&self) -> &Preprocess;

    /// Per-flow delays in milliseconds.
    fn predict_ms(&self, input: &GraphInput) -> Result<Vec<f64>>;

    /// Per-flow delays in seconds.
    fn predict(&self, graph: &HeteroGraph) -> Result<Vec<f64>> {
        let input = self.preprocess().prepare(graph)?;
        Ok(self.predict_ms(&input)?.into_iter().map(|v| v / SECONDS_TO_MS).collect())
    }
}

/// A neural model whose parameters live in a [`ParamStore`].
pub trait Trainable: Predictor {
    fn store(&self) -> &ParamStore;
    fn store_mut(&mut self) -> &mut ParamStore;

    /// Records the forward pass on `tape` and returns `[n_flows, 1]`
    /// predictions in milliseconds. Dropout is active iff `rng` is given.
    fn forward(&self, tape: &mut Tape, input: &GraphInput, rng: Option<&mut Rng>) -> Result<Var>;

    fn param_count(&self) -> usize;
}

pub(crate) fn eval_forward<M: Trainable + ?Sized>(model: &M, input: &GraphInput) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, input, None)?;
    Ok(tape.value(out).data().to_vec())
}

/// Replaces `target`'s parameters with `params`, checking that names and
/// shapes agree one for one.
pub(crate) fn install_params(target: &mut ParamStore, params: ParamStore) -> Result<()> {
    if target.len() != params.len() {
        return Err(FlowKanError::parse(
            "checkpoint",
            format!("expected {} parameter tensors, found {}", target.len(), params.len()),
        ));
    }
    for ((_, n1, t1), (_, n2, t2)) in target.iter().zip(params.iter()) {
        if n1 != n2 || t1.shape() != t2.shape() {
            return Err(FlowKanError::parse(
                "checkpoint",
                format!("parameter `{n2}` {:?} does not match `{n1}` {:?}", t2.shape(), t1.shape()),
            ));
        }
    }
    *target = params;
    Ok(())
}

pub const CHECKPOINT_FORMAT: &str = "flowkan-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "config", rename_all = "snake_case")]
pub enum ModelSpec {
    Baseline(BaselineConfig),
    Flowkan(FlowKanConfig),
}

/// Self-describing model file: architecture, preprocessing buffers and every
/// named parameter tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelCheckpoint {
    pub format: String,
    pub version: u32,
    pub model: ModelSpec,
    pub preprocess: Preprocess,
    pub params: ParamStore,
}

/// Either neural tier, as loaded from a checkpoint.
#[derive(Clone, Debug)]
pub enum AnyModel {
    Baseline(BaselineModel),
    Flowkan(FlowKanModel),
}

impl AnyModel {
    pub fn kind(&self) -> &'static str {
        match self {
            AnyModel::Baseline(_) => "baseline",
            AnyModel::Flowkan(_) => "flowkan",
        }
    }

    pub fn as_trainable(&self) -> &dyn Trainable {
        match self {
            AnyModel::Baseline(m) => m,
            AnyModel::Flowkan(m) => m,
        }
    }

    pub fn to_checkpoint(&self) -> ModelCheckpoint {
        let (model, preprocess, params) = match self {
            AnyModel::Baseline(m) => (ModelSpec::Baseline(m.config.clone()), m.preprocess.clone(), m.store.clone()),
            AnyModel::Flowkan(m) => (ModelSpec::Flowkan(m.config.clone()), m.preprocess.clone(), m.store.clone()),
        };
        ModelCheckpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            model,
            preprocess,
            params,
        }
    }

    pub fn from_checkpoint(ck: ModelCheckpoint) -> Result<Self> {
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(FlowKanError::parse(
                "checkpoint",
                format!("unsupported format {} v{}", ck.format, ck.version),
            ));
        }
        match ck.model {
            ModelSpec::Baseline(cfg) => {
                let mut m = BaselineModel::new(cfg, ck.preprocess, 0)?;
                install_params(&mut m.store, ck.params)?;
                Ok(AnyModel::Baseline(m))
            }
            ModelSpec::Flowkan(cfg) => {
                let mut m = FlowKanModel::new(cfg, ck.preprocess, 0)?;
                install_params(&mut m.store, ck.params)?;
                Ok(AnyModel::Flowkan(m))
            }
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(&self.to_checkpoint())
            .map_err(|e| FlowKanError::parse(path.display().to_string(), e.to_string()))?;
        std::fs::write(path, text).map_err(|e| FlowKanError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| FlowKanError::io(path, e))?;
        let ck: ModelCheckpoint = serde_json::from_str(&text)
            .map_err(|e| FlowKanError::parse(path.display().to_string(), e.to_string()))?;
        Self::from_checkpoint(ck)
    }
}

impl From<BaselineModel> for AnyModel {
    fn from(m: BaselineModel) -> Self {
        AnyModel::Baseline(m)
    }
}

impl From<FlowKanModel> for AnyModel {
    fn from(m: FlowKanModel) -> Self {
        AnyModel::Flowkan(m)
    }
}

impl Predictor for AnyModel {
    fn preprocess(&self) -> &Preprocess {
        self.as_trainable().preprocess()
    }

    fn predict_ms(&self, input: &GraphInput) -> Result<Vec<f64>> {
        self.as_trainable().predict_ms(input)
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::datagen::{generate_dataset, ScenarioConfig};
    use crate::netgraph::{build_graph, tests::flow, Scenario};

    /// Three flows over two links; link 1 carries a single flow.
    pub fn tiny_graph() -> HeteroGraph {
        let mut flows = vec![flow(1e6, vec![0]), flow(2.5e6, vec![0, 1]), flow(4e5, vec![0])];
        flows[1].flow_packet_size = 900.0;
        flows[2].flow_ipg_var = 3e-6;
        for (i, f) in flows.iter_mut().enumerate() {
            f.delay = Some(1e-3 * (i + 1) as f64);
        }
        build_graph(Scenario {
            capacities: vec![0.01, 0.04],
            flows,
        })
        .unwrap()
    }

    pub fn tiny_preprocess() -> Preprocess {
        let graphs = generate_dataset(&ScenarioConfig::default(), 4, 99).unwrap();
        Preprocess::fit(&graphs, FeatureSelection::all()).unwrap()
    }

    #[test]
    fn prepare_shapes_and_units() {
        let p = tiny_preprocess();
        let g = tiny_graph();
        let input = p.prepare(&g).unwrap();
        assert_eq!(input.flow_x.shape(), &[3, 16]);
        assert_eq!(input.link_x.shape(), &[2, 2]);
        assert_eq!(input.edge_flow, vec![0, 1, 1, 2]);
        assert_eq!(input.edge_link, vec![0, 0, 1, 0]);
        assert_eq!(input.target_ms.unwrap().data(), &[1.0, 2.0, 3.0]);
    }
}
