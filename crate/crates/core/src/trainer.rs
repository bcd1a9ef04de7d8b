//! Training loop with early stopping, regression metrics, and seeded random
//! hyperparameter search.

use std::io::Write;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{FlowKanError, Result};
use crate::flowkanet::{ActivationMode, BlockTable, FlowKanConfig};
use crate::model::{GraphInput, Predictor, Trainable};
use crate::netgraph::HeteroGraph;
use crate::rng::{self, Rng};
use crate::splines::SplineSpec;
use crate::tensor::{Activation, Adam, AdamConfig, Tape};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    /// Share of the training graphs held out for early stopping.
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.002,
            max_epochs: 150,
            patience: 20,
            seed: 0,
            val_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(FlowKanError::config(format!("learning rate {} must be finite and >= 0", self.lr)));
        }
        if self.patience == 0 {
            return Err(FlowKanError::config("patience must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(FlowKanError::config(format!("val_fraction {} outside [0, 1)", self.val_fraction)));
        }
        Ok(())
    }
}

/// Deterministic shuffled split; the validation share is rounded and kept
/// non-empty whenever at least two graphs are available.
pub fn split_train_val(graphs: &[HeteroGraph], val_fraction: f64, seed: u64) -> (Vec<HeteroGraph>, Vec<HeteroGraph>) {
    let mut idx: Vec<usize> = (0..graphs.len()).collect();
    idx.shuffle(&mut rng::split(seed, 0x7a11));
    let mut n_val = (graphs.len() as f64 * val_fraction).round() as usize;
    if val_fraction > 0.0 && n_val == 0 && graphs.len() >= 2 {
        n_val = 1;
    }
    let (val, train) = idx.split_at(n_val.min(graphs.len()));
    let pick = |ids: &[usize]| ids.iter().map(|&i| graphs[i].clone()).collect();
    (pick(train), pick(val))
}

pub fn mse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(FlowKanError::contract(format!(
            "mse needs equal non-empty lengths, got {} and {}",
            pred.len(),
            truth.len()
        )));
    }
    Ok(pred.iter().zip(truth).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / pred.len() as f64)
}

/// `1 - SSE / SST`, with SST taken about the mean of `truth`.
pub fn r2(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() || pred.len() < 2 {
        return Err(FlowKanError::contract(format!(
            "r2 needs equal lengths of at least 2, got {} and {}",
            pred.len(),
            truth.len()
        )));
    }
    let mean = truth.iter().sum::<f64>() / truth.len() as f64;
    let sst: f64 = truth.iter().map(|t| (t - mean).powi(2)).sum();
    if sst == 0.0 {
        return Err(FlowKanError::Numeric("r2 is undefined for a constant target".into()));
    }
    let sse: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t).powi(2)).sum();
    Ok(1.0 - sse / sst)
}

/// Pooled per-flow metrics in milliseconds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mse_ms2: f64,
    pub r2: f64,
    pub flows: usize,
}

/// Pooled predictions and targets, in milliseconds.
pub fn collect_predictions<P: Predictor + ?Sized>(model: &P, inputs: &[GraphInput]) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut pred = Vec::new();
    let mut truth = Vec::new();
    for (i, input) in inputs.iter().enumerate() {
        let t = input
            .target_ms
            .as_ref()
            .ok_or_else(|| FlowKanError::validation(format!("graph {i} has unlabeled flows")))?;
        pred.extend(model.predict_ms(input)?);
        truth.extend_from_slice(t.data());
    }
    Ok((pred, truth))
}

pub fn evaluate<P: Predictor + ?Sized>(model: &P, graphs: &[HeteroGraph]) -> Result<Metrics> {
    let inputs = model.preprocess().prepare_all(graphs)?;
    evaluate_inputs(model, &inputs)
}

pub fn evaluate_inputs<P: Predictor + ?Sized>(model: &P, inputs: &[GraphInput]) -> Result<Metrics> {
    let (pred, truth) = collect_predictions(model, inputs)?;
    Ok(Metrics {
        mse_ms2: mse(&pred, &truth)?,
        r2: r2(&pred, &truth)?,
        flows: pred.len(),
    })
}

fn pooled_mse<P: Predictor + ?Sized>(model: &P, inputs: &[GraphInput]) -> Result<f64> {
    let (pred, truth) = collect_predictions(model, inputs)?;
    mse(&pred, &truth)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were restored.
    pub best_epoch: usize,
    pub best_val_mse: f64,
    pub stopped_early: bool,
}

impl History {
    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let err = |e: csv::Error| FlowKanError::Numeric(format!("csv: {e}"));
        w.write_record(["epoch", "train_mse", "val_mse"]).map_err(err)?;
        for r in &self.epochs {
            w.write_record([r.epoch.to_string(), r.train_mse.to_string(), r.val_mse.to_string()])
                .map_err(err)?;
        }
        w.flush().map_err(|e| FlowKanError::io("history", e))
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = std::fs::File::create(path).map_err(|e| FlowKanError::io(path, e))?;
        self.write_csv(f)
    }
}

/// Trains with one Adam step per graph, in an order reshuffled every epoch.
/// After each epoch the model is scored in inference mode on both sets; the
/// parameters of the best validation epoch are restored on exit. With an
/// empty validation set the training MSE drives early stopping.
pub fn train<M: Trainable>(
    model: &mut M,
    train_graphs: &[HeteroGraph],
    val_graphs: &[HeteroGraph],
    config: &TrainConfig,
) -> Result<History> {
    config.validate()?;
    let train_in = model.preprocess().prepare_all(train_graphs)?;
    let val_in = model.preprocess().prepare_all(val_graphs)?;
    train_prepared(model, &train_in, &val_in, config)
}

pub fn train_prepared<M: Trainable>(
    model: &mut M,
    train_in: &[GraphInput],
    val_in: &[GraphInput],
    config: &TrainConfig,
) -> Result<History> {
    config.validate()?;
    if train_in.iter().all(|g| g.n_flows == 0) {
        return Err(FlowKanError::Training("no training graph has any flow".into()));
    }
    let mut adam = Adam::new(
        AdamConfig {
            lr: config.lr,
            ..AdamConfig::default()
        },
        model.store(),
    );
    let mut order: Vec<usize> = (0..train_in.len()).collect();
    let mut history = History {
        best_val_mse: f64::INFINITY,
        ..History::default()
    };
    let mut best = model.store().clone();
    let mut since_best = 0;
    for epoch in 1..=config.max_epochs {
        let mut rng: Rng = rng::split(config.seed, epoch as u64);
        order.shuffle(&mut rng);
        for &gi in &order {
            let g = &train_in[gi];
            let Some(target) = &g.target_ms else {
                return Err(FlowKanError::Training(format!("epoch {epoch}, graph {gi}: missing labels")));
            };
            if g.n_flows == 0 {
                continue;
            }
            let mut tape = Tape::new();
            let pred = model.forward(&mut tape, g, Some(&mut rng))?;
            let loss = tape.mse(pred, target)?;
            let lv = tape.value(loss).item();
            if !lv.is_finite() || tape.nonfinite_replaced() > 0 {
                return Err(FlowKanError::Training(format!(
                    "epoch {epoch}, graph {gi}: loss {lv} ({} non-finite intermediate values)",
                    tape.nonfinite_replaced()
                )));
            }
            let grads = tape.backward(loss)?;
            if !grads.all_finite() {
                return Err(FlowKanError::Training(format!("epoch {epoch}, graph {gi}: non-finite gradient")));
            }
            adam.step(model.store_mut(), &grads)?;
        }
        let train_mse = pooled_mse(model, train_in)?;
        let val_mse = if val_in.iter().any(|g| g.n_flows > 0) {
            pooled_mse(model, val_in)?
        } else {
            train_mse
        };
        if !val_mse.is_finite() {
            return Err(FlowKanError::Training(format!("epoch {epoch}: validation MSE is {val_mse}")));
        }
        history.epochs.push(EpochRecord { epoch, train_mse, val_mse });
        log::debug!("epoch {epoch}: train {train_mse:.6} val {val_mse:.6}");
        if val_mse < history.best_val_mse {
            history.best_val_mse = val_mse;
            history.best_epoch = epoch;
            best = model.store().clone();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                history.stopped_early = true;
                break;
            }
        }
    }
    if history.best_epoch > 0 {
        *model.store_mut() = best;
    }
    Ok(history)
}

/// A hyperparameter point: an architecture plus its learning rate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub config: FlowKanConfig,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchSpace {
    pub flow_hidden: Vec<usize>,
    pub link_hidden: Vec<usize>,
    pub rounds: Vec<usize>,
    pub dropout: (f64, f64),
    /// Sampled log-uniformly.
    pub lr: (f64, f64),
    pub activation: Vec<Activation>,
    pub activation_mode: Vec<ActivationMode>,
    pub grid_size: (usize, usize),
    pub order: (usize, usize),
    pub sigma: (f64, f64),
}

impl Default for SearchSpace {
    fn default() -> Self {
        Self {
            flow_hidden: vec![4, 8, 16],
            link_hidden: vec![2, 4],
            rounds: vec![1, 2, 3],
            dropout: (0.0, 0.3),
            lr: (5e-4, 5e-3),
            activation: vec![Activation::Relu, Activation::Silu, Activation::Tanh, Activation::LeakyRelu],
            activation_mode: vec![
                ActivationMode::FinalOnly,
                ActivationMode::ExceptMp,
                ActivationMode::All,
                ActivationMode::NoActivation,
            ],
            grid_size: (3, 10),
            order: (1, 5),
            sigma: (0.1, 2.5),
        }
    }
}

impl SearchSpace {
    pub fn validate(&self) -> Result<()> {
        let nonempty = !(self.flow_hidden.is_empty()
            || self.link_hidden.is_empty()
            || self.rounds.is_empty()
            || self.activation.is_empty()
            || self.activation_mode.is_empty());
        let ranges = self.dropout.0 <= self.dropout.1
            && self.dropout.0 >= 0.0
            && self.dropout.1 < 1.0
            && self.lr.0 > 0.0
            && self.lr.0 <= self.lr.1
            && self.grid_size.0 >= 1
            && self.grid_size.0 <= self.grid_size.1
            && self.order.0 >= 1
            && self.order.0 <= self.order.1
            && self.sigma.0 >= 0.0
            && self.sigma.0 <= self.sigma.1;
        let widths = !self.flow_hidden.contains(&0) && !self.link_hidden.contains(&0);
        if nonempty && ranges && widths {
            Ok(())
        } else {
            Err(FlowKanError::config(format!("invalid search space {self:?}")))
        }
    }

    fn spec(&self, rng: &mut Rng) -> SplineSpec {
        SplineSpec::new(
            rng.random_range(self.grid_size.0..=self.grid_size.1),
            rng.random_range(self.order.0..=self.order.1),
            rng.random_range(self.sigma.0..=self.sigma.1),
        )
    }

    pub fn sample(&self, rng: &mut Rng) -> Candidate {
        let pick = |v: &Vec<usize>, rng: &mut Rng| *v.choose(rng).expect("validated non-empty");
        let flow_hidden = pick(&self.flow_hidden, rng);
        let link_hidden = pick(&self.link_hidden, rng);
        let rounds = pick(&self.rounds, rng);
        let dropout = rng.random_range(self.dropout.0..=self.dropout.1);
        let lr = (rng.random_range(self.lr.0.ln()..=self.lr.1.ln())).exp();
        let activation = *self.activation.choose(rng).expect("validated non-empty");
        let activation_mode = *self.activation_mode.choose(rng).expect("validated non-empty");
        let blocks = BlockTable {
            flow_init: self.spec(rng),
            link_init: self.spec(rng),
            f2l: (0..rounds).map(|_| self.spec(rng)).collect(),
            l2f: (0..rounds).map(|_| self.spec(rng)).collect(),
            fuse: self.spec(rng),
            final_block: self.spec(rng),
        };
        Candidate {
            config: FlowKanConfig {
                flow_hidden,
                link_hidden,
                rounds,
                dropout,
                activation,
                activation_mode,
                blocks,
            },
            lr,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub seed: u64,
    pub candidate: Candidate,
    /// Validation MSE, or the failure message.
    pub outcome: std::result::Result<f64, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub best_trial: usize,
    pub best: Candidate,
    pub best_val_mse: f64,
    pub trials: Vec<TrialRecord>,
}

pub const SEARCH_LOG_HEADER: &str =
    "# seeded uniform random search over the configured space (stands in for a TPE sampler)";

impl SearchResult {
    pub fn write_csv(&self, mut out: impl Write) -> Result<()> {
        writeln!(out, "{SEARCH_LOG_HEADER}").map_err(|e| FlowKanError::io("trial log", e))?;
        let mut w = csv::Writer::from_writer(out);
        let err = |e: csv::Error| FlowKanError::Numeric(format!("csv: {e}"));
        w.write_record([
            "trial", "seed", "val_mse", "status", "lr", "flow_hidden", "link_hidden", "rounds", "dropout",
            "activation", "activation_mode",
        ])
        .map_err(err)?;
        for t in &self.trials {
            let c = &t.candidate.config;
            let (mse, status) = match &t.outcome {
                Ok(v) => (v.to_string(), "ok".to_string()),
                Err(e) => (String::new(), e.clone()),
            };
            w.write_record([
                t.trial.to_string(),
                t.seed.to_string(),
                mse,
                status,
                t.candidate.lr.to_string(),
                c.flow_hidden.to_string(),
                c.link_hidden.to_string(),
                c.rounds.to_string(),
                c.dropout.to_string(),
                c.activation.to_string(),
                serde_json::to_value(c.activation_mode)
                    .ok()
                    .and_then(|v| v.as_str().map(str::to_string))
                    .unwrap_or_default(),
            ])
            .map_err(err)?;
        }
        w.flush().map_err(|e| FlowKanError::io("trial log", e))
    }
}

/// Samples `budget` candidates and scores each with `objective(candidate,
/// trial_seed)`. The lowest finite score wins; ties go to the earliest
/// trial. Failing trials are logged and skipped.
pub fn random_search(
    space: &SearchSpace,
    budget: usize,
    seed: u64,
    objective: &mut dyn FnMut(&Candidate, u64) -> Result<f64>,
) -> Result<SearchResult> {
    space.validate()?;
    if budget == 0 {
        return Err(FlowKanError::config("search budget must be at least 1"));
    }
    let mut sampler = rng::seeded(seed);
    let mut trials = Vec::with_capacity(budget);
    let mut best: Option<(usize, f64)> = None;
    for trial in 0..budget {
        let candidate = space.sample(&mut sampler);
        let trial_seed = rng::derive_seed(seed, trial as u64 + 1);
        let outcome = match objective(&candidate, trial_seed) {
            Ok(v) if v.is_finite() => Ok(v),
            Ok(v) => Err(format!("objective returned {v}")),
            Err(e) => Err(e.to_string()),
        };
        if let Ok(v) = outcome {
            if best.is_none_or(|(_, b)| v < b) {
                best = Some((trial, v));
            }
        }
        log::info!("trial {trial}: {outcome:?}");
        trials.push(TrialRecord {
            trial,
            seed: trial_seed,
            candidate,
            outcome,
        });
    }
    match best {
        Some((i, v)) => Ok(SearchResult {
            best_trial: i,
            best: trials[i].candidate.clone(),
            best_val_mse: v,
            trials,
        }),
        None => Err(FlowKanError::Search(
            trials
                .iter()
                .map(|t| format!("trial {}: {}", t.trial, t.outcome.as_ref().err().cloned().unwrap_or_default()))
                .collect::<Vec<_>>()
                .join("; "),
        )),
    }
}
