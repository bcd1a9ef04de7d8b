//! Python bindings: datasets, training, evaluation, feature selection,
//! symbolic regression and distillation.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use flowkan::baseline::{BaselineConfig, BaselineModel};
use flowkan::datagen::{generate_dataset, ScenarioConfig};
use flowkan::featsel::{sfs as run_sfs, SfsConfig};
use flowkan::flowkanet::{FlowKanConfig, FlowKanModel};
use flowkan::model::{AnyModel, Predictor, Preprocess};
use flowkan::netgraph::{load_dataset, save_dataset, FeatureSelection, HeteroGraph};
use flowkan::rng;
use flowkan::symdistill::{self, DistillConfig, Expr, GpConfig, OperatorSet, SymbolicModel};
use flowkan::trainer::{self, split_train_val, Metrics, TrainConfig};
use flowkan::FlowKanError;

fn py_err(e: FlowKanError) -> PyErr {
    match e {
        FlowKanError::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn metrics_dict<'py>(py: Python<'py>, m: &Metrics) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("mse_ms2", m.mse_ms2)?;
    d.set_item("r2", m.r2)?;
    d.set_item("flows", m.flows)?;
    Ok(d)
}

fn predict_all(p: &dyn Predictor, graphs: &[HeteroGraph]) -> PyResult<Vec<Vec<f64>>> {
    graphs.iter().map(|g| p.predict(g).map_err(py_err)).collect()
}

/// A list of labeled flow-link graphs.
#[pyclass(module = "flowkan_py")]
pub struct Dataset {
    graphs: Vec<HeteroGraph>,
}

#[pymethods]
impl Dataset {
    /// Synthetic graphs from the default scenario generator.
    #[staticmethod]
    #[pyo3(signature = (n_graphs, seed = 42))]
    fn generate(n_graphs: usize, seed: u64) -> PyResult<Self> {
        let graphs = generate_dataset(&ScenarioConfig::default(), n_graphs, seed).map_err(py_err)?;
        Ok(Self { graphs })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            graphs: load_dataset(path).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_dataset(&self.graphs, path).map_err(py_err)
    }

    fn __len__(&self) -> usize {
        self.graphs.len()
    }

    fn flow_count(&self) -> usize {
        self.graphs.iter().map(|g| g.n_flows()).sum()
    }

    /// Per-graph flow delays in seconds.
    fn labels(&self) -> Vec<Vec<f64>> {
        self.graphs.iter().map(|g| g.labels().unwrap_or_default()).collect()
    }

    /// Link loads per graph.
    fn link_loads(&self) -> Vec<Vec<f64>> {
        self.graphs.iter().map(|g| g.links.iter().map(|l| l.load).collect()).collect()
    }

    fn graph_json(&self, index: usize) -> PyResult<String> {
        let g = self
            .graphs
            .get(index)
            .ok_or_else(|| PyValueError::new_err(format!("graph {index} out of range")))?;
        serde_json::to_string(g).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    /// `(train, validation)` split, seeded.
    #[pyo3(signature = (val_fraction = 0.1, seed = 42))]
    fn split(&self, val_fraction: f64, seed: u64) -> (Dataset, Dataset) {
        let (a, b) = split_train_val(&self.graphs, val_fraction, seed);
        (Dataset { graphs: a }, Dataset { graphs: b })
    }
}

/// A trained baseline or FlowKANet.
#[pyclass(module = "flowkan_py")]
pub struct Model {
    inner: AnyModel,
}

#[pymethods]
impl Model {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: AnyModel::load(path).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(path).map_err(py_err)
    }

    #[getter]
    fn kind(&self) -> &'static str {
        self.inner.kind()
    }

    fn param_count(&self) -> usize {
        self.inner.as_trainable().param_count()
    }

    /// Per-graph flow delays in seconds.
    fn predict(&self, data: &Dataset) -> PyResult<Vec<Vec<f64>>> {
        predict_all(&self.inner, &data.graphs)
    }

    fn evaluate<'py>(&self, py: Python<'py>, data: &Dataset) -> PyResult<Bound<'py, PyDict>> {
        let m = trainer::evaluate(&self.inner, &data.graphs).map_err(py_err)?;
        metrics_dict(py, &m)
    }
}

fn train_any(kind: &str, data: &Dataset, epochs: usize, lr: f64, seed: u64) -> PyResult<Model> {
    let tc = TrainConfig {
        lr,
        max_epochs: epochs,
        seed,
        ..TrainConfig::default()
    };
    let (tr, va) = split_train_val(&data.graphs, tc.val_fraction, seed);
    let pre = Preprocess::fit(&tr, FeatureSelection::all()).map_err(py_err)?;
    let inner: AnyModel = match kind {
        "flowkan" => {
            let mut m = FlowKanModel::new(FlowKanConfig::default(), pre, seed).map_err(py_err)?;
            trainer::train(&mut m, &tr, &va, &tc).map_err(py_err)?;
            m.into()
        }
        _ => {
            let mut m = BaselineModel::new(BaselineConfig::default(), pre, seed).map_err(py_err)?;
            trainer::train(&mut m, &tr, &va, &tc).map_err(py_err)?;
            m.into()
        }
    };
    Ok(Model { inner })
}

/// Trains FlowKANet with default hyperparameters on all 16 features.
#[pyfunction]
#[pyo3(signature = (data, epochs = 150, lr = 0.002, seed = 42))]
fn train_flowkan(py: Python<'_>, data: &Dataset, epochs: usize, lr: f64, seed: u64) -> PyResult<Model> {
    py.detach(|| train_any("flowkan", data, epochs, lr, seed))
}

/// Trains the attention-GNN baseline with default hyperparameters.
#[pyfunction]
#[pyo3(signature = (data, epochs = 150, lr = 0.002, seed = 42))]
fn train_baseline(py: Python<'_>, data: &Dataset, epochs: usize, lr: f64, seed: u64) -> PyResult<Model> {
    py.detach(|| train_any("baseline", data, epochs, lr, seed))
}

/// Closed-form surrogate produced by distillation.
#[pyclass(module = "flowkan_py")]
pub struct Surrogate {
    inner: SymbolicModel,
    trace: Vec<(String, String, f64)>,
}

#[pymethods]
impl Surrogate {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: symdistill::load_equations(path).map_err(py_err)?,
            trace: Vec::new(),
        })
    }

    /// Writes `equations.txt` and `equations.json` into `dir`.
    fn export(&self, dir: PathBuf) -> PyResult<(String, String)> {
        let f = symdistill::export_equations(&self.inner, dir).map_err(py_err)?;
        Ok((f.text.display().to_string(), f.json.display().to_string()))
    }

    fn equations(&self) -> String {
        self.inner.equations_text()
    }

    fn constant_count(&self) -> usize {
        self.inner.constant_count()
    }

    fn trainable_param_count(&self) -> usize {
        self.inner.trainable_param_count()
    }

    /// `(block, label, mse_ms2)` after each block was symbolized.
    #[getter]
    fn trace(&self) -> Vec<(String, String, f64)> {
        self.trace.clone()
    }

    fn predict(&self, data: &Dataset) -> PyResult<Vec<Vec<f64>>> {
        predict_all(&self.inner, &data.graphs)
    }

    fn evaluate<'py>(&self, py: Python<'py>, data: &Dataset) -> PyResult<Bound<'py, PyDict>> {
        let m = trainer::evaluate(&self.inner, &data.graphs).map_err(py_err)?;
        metrics_dict(py, &m)
    }
}

/// Symbolizes every block of a FlowKANet in canonical order.
#[pyfunction]
#[pyo3(signature = (model, data, trials = 25, gamma = 0.5, val_fraction = 0.1, seed = 42))]
fn distill(
    py: Python<'_>,
    model: &Model,
    data: &Dataset,
    trials: usize,
    gamma: f64,
    val_fraction: f64,
    seed: u64,
) -> PyResult<Surrogate> {
    let AnyModel::Flowkan(m) = &model.inner else {
        return Err(PyValueError::new_err("distillation needs a FlowKANet model"));
    };
    let cfg = DistillConfig {
        trials,
        gamma,
        seed,
        ..DistillConfig::default()
    };
    let (tr, va) = split_train_val(&data.graphs, val_fraction, seed);
    let out = py.detach(|| symdistill::distill_all(m, &tr, &va, &cfg)).map_err(py_err)?;
    Ok(Surrogate {
        inner: out.surrogate,
        trace: out
            .trace
            .into_iter()
            .map(|t| (t.block.to_string(), t.label, t.mse_ms2))
            .collect(),
    })
}

/// Guarded evaluation of an expression given as its JSON node list.
#[pyfunction]
fn safe_eval(expr_json: &str, inputs: Vec<f64>) -> PyResult<f64> {
    let e: Expr = serde_json::from_str(expr_json).map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok(symdistill::safe_eval(&e, &inputs))
}

/// Symbolic regression over row-major `inputs`; returns the Pareto list as
/// `(infix, json, mse, complexity)` tuples.
#[pyfunction]
#[pyo3(signature = (inputs, target, maxsize = 14, binary_menu = 0, unary_menu = 0, population = 200, iterations = 60, parsimony = 1e-4, seed = 0))]
#[allow(clippy::too_many_arguments)]
fn gp_search(
    inputs: Vec<Vec<f64>>,
    target: Vec<f64>,
    maxsize: usize,
    binary_menu: usize,
    unary_menu: usize,
    population: usize,
    iterations: usize,
    parsimony: f64,
    seed: u64,
) -> PyResult<Vec<(String, String, f64, usize)>> {
    let cfg = GpConfig {
        maxsize,
        operators: OperatorSet::menu(binary_menu, unary_menu),
        population,
        iterations,
        parsimony,
        ..GpConfig::default()
    };
    let r = symdistill::gp_search(&inputs, &target, &cfg, &mut rng::seeded(seed)).map_err(py_err)?;
    r.pareto
        .into_iter()
        .map(|c| {
            let json = serde_json::to_string(&c.expr).map_err(|e| PyValueError::new_err(e.to_string()))?;
            Ok((c.expr.to_string(), json, c.mse, c.complexity))
        })
        .collect()
}

/// Sequential forward selection; returns `(selected column indices, cv-mse trace)`.
#[pyfunction]
#[pyo3(signature = (x, y, folds = 3, seed = 0, tolerance = 1e-4, max_features = 16))]
fn sfs(
    x: Vec<Vec<f64>>,
    y: Vec<f64>,
    folds: usize,
    seed: u64,
    tolerance: f64,
    max_features: usize,
) -> PyResult<(Vec<usize>, Vec<f64>)> {
    let cfg = SfsConfig {
        folds,
        seed,
        tolerance,
        max_features,
    };
    let r = run_sfs(&x, &y, &cfg).map_err(py_err)?;
    Ok((r.selected, r.cv_mse_trace))
}

/// Runs the `flowkan` command line in-process; returns the exit code.
#[pyfunction]
fn run_cli(args: Vec<String>) -> i32 {
    let argv = std::iter::once("flowkan".to_string()).chain(args).map(Into::into);
    flowkan::cli::main_with_args(argv)
}

#[pymodule]
fn flowkan_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Dataset>()?;
    m.add_class::<Model>()?;
    m.add_class::<Surrogate>()?;
    m.add_function(wrap_pyfunction!(train_flowkan, m)?)?;
    m.add_function(wrap_pyfunction!(train_baseline, m)?)?;
    m.add_function(wrap_pyfunction!(distill, m)?)?;
    m.add_function(wrap_pyfunction!(safe_eval, m)?)?;
    m.add_function(wrap_pyfunction!(gp_search, m)?)?;
    m.add_function(wrap_pyfunction!(sfs, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    Ok(())
}
