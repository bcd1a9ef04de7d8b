//! Block-wise symbolic distillation of a trained FlowKANet.
//!
//! Blocks are replaced one at a time in canonical order. Each replacement is
//! fitted to the neural block's input/output pairs recorded with every
//! upstream block already symbolic, and the bundle that gives the lowest
//! full-model validation MSE is frozen. The attention softmax, residual sums
//! and neighbor aggregations stay as fixed structure.

pub mod expr;
pub mod gp;

use std::io::Write;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

pub use expr::{safe_eval, BinaryOp, Expr, Node, UnaryOp};
pub use gp::{gp_search, Candidate, GpConfig, GpResult, OperatorSet, MAXSIZES};

use crate::error::{FlowKanError, Result};
use crate::flowkanet::{kamp_forward, Block, BlockHook, Direction, FlowKanModel};
use crate::model::{GraphInput, Predictor, Preprocess};
use crate::netgraph::{HeteroGraph, LINK_FEATURES};
use crate::rng::{self, Rng};
use crate::tensor::{Tape, Tensor};
use crate::trainer::{collect_predictions, mse};

/// One expression per output dimension of a block, over the block's input
/// vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SymbolicBlock {
    pub block: Block,
    pub input_width: usize,
    pub exprs: Vec<Expr>,
}

impl SymbolicBlock {
    pub fn new(block: Block, input_width: usize, exprs: Vec<Expr>) -> Result<Self> {
        let b = Self {
            block,
            input_width,
            exprs,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn constant(block: Block, input_width: usize, values: &[f64]) -> Self {
        Self {
            block,
            input_width,
            exprs: values.iter().map(|&v| Expr::constant(v)).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.exprs.is_empty() {
            return Err(FlowKanError::validation(format!("{} has no expressions", self.block)));
        }
        for (j, e) in self.exprs.iter().enumerate() {
            if let Some(s) = e.max_slot().filter(|&s| s >= self.input_width) {
                return Err(FlowKanError::validation(format!(
                    "{}[{j}] reads slot {s} of a {}-wide input",
                    self.block, self.input_width
                )));
            }
        }
        Ok(())
    }

    pub fn output_width(&self) -> usize {
        self.exprs.len()
    }

    pub fn constant_count(&self) -> usize {
        self.exprs.iter().map(Expr::constant_count).sum()
    }

    pub fn max_complexity(&self) -> usize {
        self.exprs.iter().map(Expr::complexity).max().unwrap_or(0)
    }

    /// Row-wise evaluation of every expression on `[n, input_width]`.
    pub fn eval(&self, x: &Tensor) -> Result<Tensor> {
        if x.shape().len() != 2 || x.cols() != self.input_width {
            return Err(FlowKanError::contract(format!(
                "{} expects [n, {}] input, got {:?}",
                self.block,
                self.input_width,
                x.shape()
            )));
        }
        let n = x.rows();
        let cols: Vec<Vec<f64>> = (0..self.input_width).map(|j| (0..n).map(|r| x.get(r, j)).collect()).collect();
        let outs: Vec<Vec<f64>> = self.exprs.iter().map(|e| e.eval_columns(&cols, n)).collect();
        let o = outs.len();
        let mut data = Vec::with_capacity(n * o);
        for r in 0..n {
            data.extend(outs.iter().map(|c| c[r]));
        }
        Ok(Tensor::matrix(n, o, data))
    }
}

/// Replaces blocks that have a symbolic form.
struct SymbolicHook<'a> {
    order: &'a [Block],
    symbolic: &'a [Option<SymbolicBlock>],
    capture: Option<(Block, &'a mut BlockSamples)>,
}

impl BlockHook for SymbolicHook<'_> {
    fn replace(&mut self, block: Block, input: &Tensor) -> Result<Option<Tensor>> {
        let i = self.order.iter().position(|&b| b == block);
        match i.and_then(|i| self.symbolic[i].as_ref()) {
            Some(s) => s.eval(input).map(Some),
            None => Ok(None),
        }
    }

    fn observe(&mut self, block: Block, input: &Tensor, output: &Tensor) {
        if let Some((b, store)) = self.capture.as_mut() {
            if *b == block {
                store.inputs.extend(input.rows_vec());
                store.outputs.extend(output.rows_vec());
            }
        }
    }
}

/// A trained FlowKANet where a prefix of the canonical block order has been
/// replaced by expressions. Remaining neural blocks keep their frozen weights.
#[derive(Clone, Debug)]
pub struct HybridModel {
    pub model: FlowKanModel,
    order: Vec<Block>,
    symbolic: Vec<Option<SymbolicBlock>>,
}

impl HybridModel {
    pub fn new(model: FlowKanModel) -> Self {
        let order = model.blocks();
        let symbolic = vec![None; order.len()];
        Self { model, order, symbolic }
    }

    pub fn order(&self) -> &[Block] {
        &self.order
    }

    pub fn symbolic(&self, block: Block) -> Option<&SymbolicBlock> {
        self.index(block).ok().and_then(|i| self.symbolic[i].as_ref())
    }

    pub fn symbolized_count(&self) -> usize {
        self.symbolic.iter().filter(|s| s.is_some()).count()
    }

    /// Earliest block that is still neural.
    pub fn next_neural(&self) -> Option<Block> {
        self.symbolic.iter().position(|s| s.is_none()).map(|i| self.order[i])
    }

    /// True when every symbolic block precedes every neural one.
    pub fn has_prefix_property(&self) -> bool {
        let k = self.symbolized_count();
        self.symbolic[..k].iter().all(Option::is_some)
    }

    fn index(&self, block: Block) -> Result<usize> {
        self.order
            .iter()
            .position(|&b| b == block)
            .ok_or_else(|| FlowKanError::config(format!("block {block} is not part of this model")))
    }

    /// Installs `sb` for the earliest neural block.
    pub fn with_symbolic(&self, sb: SymbolicBlock) -> Result<Self> {
        let i = self.index(sb.block)?;
        if self.next_neural() != Some(sb.block) {
            return Err(FlowKanError::contract(format!(
                "{} is not the earliest neural block (next is {:?})",
                sb.block,
                self.next_neural().map(|b| b.to_string())
            )));
        }
        let (iw, ow) = self.model.config.block_io(sb.block, self.model.preprocess.input_width());
        if sb.input_width != iw || sb.output_width() != ow {
            return Err(FlowKanError::contract(format!(
                "{} maps {iw} -> {ow}, symbolic form maps {} -> {}",
                sb.block,
                sb.input_width,
                sb.output_width()
            )));
        }
        sb.validate()?;
        let mut next = self.clone();
        next.symbolic[i] = Some(sb);
        Ok(next)
    }

    fn run(&self, input: &GraphInput, capture: Option<(Block, &mut BlockSamples)>) -> Result<Vec<f64>> {
        let mut hook = SymbolicHook {
            order: &self.order,
            symbolic: &self.symbolic,
            capture,
        };
        let mut tape = Tape::new();
        let y = self.model.forward_with(&mut tape, input, None, &mut hook, None)?;
        Ok(tape.value(y).data().to_vec())
    }

    /// Converts a fully symbolized hybrid into a parameter-free model.
    pub fn to_surrogate(&self) -> Result<SymbolicModel> {
        let blocks: Vec<SymbolicBlock> = self.symbolic.iter().flatten().cloned().collect();
        if blocks.len() != self.order.len() {
            return Err(FlowKanError::contract(format!(
                "{} of {} blocks are still neural",
                self.order.len() - blocks.len(),
                self.order.len()
            )));
        }
        let c = &self.model.config;
        SymbolicModel::new(self.model.preprocess.clone(), c.flow_hidden, c.link_hidden, c.rounds, blocks)
    }
}

impl Predictor for HybridModel {
    fn preprocess(&self) -> &Preprocess {
        &self.model.preprocess
    }

    fn predict_ms(&self, input: &GraphInput) -> Result<Vec<f64>> {
        self.run(input, None)
    }
}

/// Recorded `(input, output)` rows of one block.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BlockSamples {
    pub inputs: Vec<Vec<f64>>,
    pub outputs: Vec<Vec<f64>>,
}

impl BlockSamples {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// Output column `j`.
    pub fn target(&self, j: usize) -> Vec<f64> {
        self.outputs.iter().map(|o| o[j]).collect()
    }

    fn take(&self, idx: &[usize]) -> Self {
        Self {
            inputs: idx.iter().map(|&i| self.inputs[i].clone()).collect(),
            outputs: idx.iter().map(|&i| self.outputs[i].clone()).collect(),
        }
    }

    fn truncated(&self, n: usize) -> Self {
        Self {
            inputs: self.inputs.iter().take(n).cloned().collect(),
            outputs: self.outputs.iter().take(n).cloned().collect(),
        }
    }
}

/// Records the exact input and output rows of `block` on every graph (one
/// row per edge for message-passing operators, per node otherwise), then
/// splits them into a fitting part of fraction `gamma` and a holdout, after
/// a seeded shuffle.
pub fn sample_block_io(
    hybrid: &HybridModel,
    inputs: &[GraphInput],
    block: &str,
    gamma: f64,
    seed: u64,
) -> Result<(BlockSamples, BlockSamples)> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(FlowKanError::config(format!("gamma {gamma} outside (0, 1]")));
    }
    let b: Block = block.parse()?;
    hybrid.index(b)?;
    if hybrid.symbolic(b).is_some() {
        return Err(FlowKanError::config(format!("block {b} is already symbolic")));
    }
    let mut all = BlockSamples::default();
    for input in inputs {
        hybrid.run(input, Some((b, &mut all)))?;
    }
    let mut idx: Vec<usize> = (0..all.len()).collect();
    idx.shuffle(&mut rng::seeded(seed));
    let n_fit = ((all.len() as f64) * gamma).round() as usize;
    let (fit, hold) = idx.split_at(n_fit.min(all.len()));
    Ok((all.take(fit), all.take(hold)))
}

/// Ranges the per-block hyperparameter search draws `GpConfig`s from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GpSpace {
    pub population: (usize, usize),
    pub iterations: (usize, usize),
    pub crossover_rate: (f64, f64),
    pub mutation_rate: (f64, f64),
    /// Log-uniform.
    pub parsimony: (f64, f64),
    pub maxsizes: Vec<usize>,
    pub binary_menus: Vec<usize>,
    pub unary_menus: Vec<usize>,
}

impl Default for GpSpace {
    fn default() -> Self {
        Self {
            population: (64, 160),
            iterations: (20, 45),
            crossover_rate: (0.4, 0.7),
            mutation_rate: (0.25, 0.5),
            parsimony: (1e-6, 1e-3),
            maxsizes: MAXSIZES.to_vec(),
            binary_menus: (0..gp::BINARY_MENUS).collect(),
            unary_menus: (0..gp::UNARY_MENUS).collect(),
        }
    }
}

impl GpSpace {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(FlowKanError::config(m));
        if self.population.0 < 4 || self.population.0 > self.population.1 {
            return bad(format!("population range {:?}", self.population));
        }
        if self.iterations.0 > self.iterations.1 {
            return bad(format!("iteration range {:?}", self.iterations));
        }
        for (n, r) in [("crossover_rate", self.crossover_rate), ("mutation_rate", self.mutation_rate)] {
            if !(0.0 <= r.0 && r.0 <= r.1 && r.1 <= 1.0) {
                return bad(format!("{n} range {r:?}"));
            }
        }
        if !(0.0 < self.parsimony.0 && self.parsimony.0 <= self.parsimony.1) {
            return bad(format!("parsimony range {:?}", self.parsimony));
        }
        if self.maxsizes.is_empty() || self.maxsizes.iter().any(|m| !MAXSIZES.contains(m)) {
            return bad(format!("maxsizes {:?} must be a non-empty subset of {MAXSIZES:?}", self.maxsizes));
        }
        if self.binary_menus.is_empty() || self.binary_menus.iter().any(|&m| m >= gp::BINARY_MENUS) {
            return bad(format!("binary menus {:?}", self.binary_menus));
        }
        if self.unary_menus.is_empty() || self.unary_menus.iter().any(|&m| m >= gp::UNARY_MENUS) {
            return bad(format!("unary menus {:?}", self.unary_menus));
        }
        Ok(())
    }

    pub fn sample(&self, rng: &mut Rng) -> GpConfig {
        let pick = |rng: &mut Rng, v: &[usize]| v[rng.random_range(0..v.len())];
        let (lo, hi) = (self.parsimony.0.ln(), self.parsimony.1.ln());
        GpConfig {
            population: rng.random_range(self.population.0..=self.population.1),
            iterations: rng.random_range(self.iterations.0..=self.iterations.1),
            crossover_rate: rng.random_range(self.crossover_rate.0..=self.crossover_rate.1),
            mutation_rate: rng.random_range(self.mutation_rate.0..=self.mutation_rate.1),
            parsimony: rng.random_range(lo..=hi).exp(),
            maxsize: pick(rng, &self.maxsizes),
            operators: OperatorSet::menu(pick(rng, &self.binary_menus), pick(rng, &self.unary_menus)),
            ..GpConfig::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    /// Hyperparameter trials per block.
    pub trials: usize,
    /// Fraction of recorded rows used for fitting; the rest rank candidates.
    pub gamma: f64,
    pub max_fit_samples: usize,
    pub max_holdout_samples: usize,
    pub seed: u64,
    pub space: GpSpace,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            trials: 25,
            gamma: 0.5,
            max_fit_samples: 300,
            max_holdout_samples: 300,
            seed: 0,
            space: GpSpace::default(),
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(FlowKanError::config("trials must be >= 1"));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(FlowKanError::config(format!("gamma {} outside (0, 1]", self.gamma)));
        }
        if self.max_fit_samples < gp::MIN_SAMPLES {
            return Err(FlowKanError::config(format!("max_fit_samples must be >= {}", gp::MIN_SAMPLES)));
        }
        self.space.validate()
    }
}

/// What happened while distilling one block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockReport {
    pub block: Block,
    pub samples: usize,
    /// Winning trial, or `None` when the constant fallback was kept.
    pub best_trial: Option<usize>,
    pub val_mse_ms2: f64,
    pub constant_val_mse_ms2: f64,
    pub constants: usize,
    pub max_complexity: usize,
}

fn pooled_mse(model: &dyn Predictor, inputs: &[GraphInput]) -> Result<f64> {
    let (pred, truth) = collect_predictions(model, inputs)?;
    mse(&pred, &truth)
}

/// Expression from `result` with the lowest holdout MSE (fit fitness when
/// the holdout is empty).
fn pick_expr(result: &GpResult, holdout: &BlockSamples, j: usize) -> Expr {
    if holdout.is_empty() {
        return result.best.expr.clone();
    }
    let t = holdout.target(j);
    let score = |e: &Expr| {
        let s: f64 = holdout.inputs.iter().zip(&t).map(|(x, y)| (e.eval(x) - y).powi(2)).sum();
        s / t.len() as f64
    };
    let mut best = (f64::INFINITY, usize::MAX, &result.best.expr);
    for c in &result.pareto {
        let m = score(&c.expr);
        if m < best.0 || (m == best.0 && c.complexity < best.1) {
            best = (m, c.complexity, &c.expr);
        }
    }
    best.2.clone()
}

/// Symbolizes `block`, which must be the earliest neural block of `hybrid`.
/// Samples are recorded on `train` with the current hybrid upstream; each
/// trial draws a `GpConfig`, fits every output dimension, and the bundle
/// with the lowest pooled MSE on `val` wins. A per-dimension constant bundle
/// competes as the baseline.
pub fn distill_block(
    hybrid: &HybridModel,
    block: Block,
    train: &[GraphInput],
    val: &[GraphInput],
    cfg: &DistillConfig,
) -> Result<(HybridModel, BlockReport)> {
    cfg.validate()?;
    if hybrid.next_neural() != Some(block) {
        return Err(FlowKanError::contract(format!(
            "{block} is not the earliest neural block (next is {:?})",
            hybrid.next_neural().map(|b| b.to_string())
        )));
    }
    let bi = hybrid.index(block)? as u64;
    let (iw, ow) = hybrid.model.config.block_io(block, hybrid.model.preprocess.input_width());
    let (fit, hold) = sample_block_io(hybrid, train, &block.to_string(), cfg.gamma, rng::derive_seed(cfg.seed, bi))?;
    let fit = fit.truncated(cfg.max_fit_samples);
    let hold = hold.truncated(cfg.max_holdout_samples);
    if fit.len() < gp::MIN_SAMPLES {
        return Err(FlowKanError::contract(format!(
            "{block}: only {} fitting samples recorded",
            fit.len()
        )));
    }

    let means: Vec<f64> = (0..ow).map(|j| fit.target(j).iter().sum::<f64>() / fit.len() as f64).collect();
    let constant = SymbolicBlock::constant(block, iw, &means);
    let constant_mse = pooled_mse(&hybrid.with_symbolic(constant.clone())?, val)?;

    let mut best: Option<(f64, usize, HybridModel)> = None;
    for t in 0..cfg.trials {
        let trial_seed = rng::derive_seed(cfg.seed, (bi << 32) | t as u64);
        let gp_cfg = cfg.space.sample(&mut rng::seeded(trial_seed));
        let mut exprs = Vec::with_capacity(ow);
        for j in 0..ow {
            let r = gp_search(&fit.inputs, &fit.target(j), &gp_cfg, &mut rng::split(trial_seed, j as u64))?;
            exprs.push(pick_expr(&r, &hold, j));
        }
        let candidate = hybrid.with_symbolic(SymbolicBlock::new(block, iw, exprs)?)?;
        let m = pooled_mse(&candidate, val)?;
        if m.is_finite() && best.as_ref().is_none_or(|b| m < b.0) {
            best = Some((m, t, candidate));
        }
    }

    let (next, best_trial, val_mse) = match best {
        Some((m, t, h)) if m < constant_mse => (h, Some(t), m),
        _ => {
            warn!("{block}: no expression beat the constant baseline; keeping constants");
            (hybrid.with_symbolic(constant)?, None, constant_mse)
        }
    };
    let sb = next.symbolic(block).expect("just installed");
    let report = BlockReport {
        block,
        samples: fit.len() + hold.len(),
        best_trial,
        val_mse_ms2: val_mse,
        constant_val_mse_ms2: constant_mse,
        constants: sb.constant_count(),
        max_complexity: sb.max_complexity(),
    };
    info!(
        "distilled {block}: val mse {val_mse:.4} (constant {constant_mse:.4}), {} constants",
        report.constants
    );
    Ok((next, report))
}

/// Axis label for the progressive trace: transforms and attention of one
/// direction share a label.
pub fn trace_label(block: Block) -> String {
    match block {
        Block::Transform(i, d) | Block::Attention(i, d) => {
            let tag = match d {
                Direction::F2l => "f2l",
                Direction::L2f => "l2f",
            };
            format!("L{i}.{tag}")
        }
        b => b.to_string(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub block: Block,
    pub label: String,
    /// Pooled MSE over the train and validation graphs after this block was
    /// symbolized.
    pub mse_ms2: f64,
}

pub const TRACE_HEADER: [&str; 4] = ["step", "block", "label", "mse_ms2"];

pub fn write_trace_csv(trace: &[TraceEntry], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let err = |e: csv::Error| FlowKanError::parse("trace csv", e.to_string());
    w.write_record(TRACE_HEADER).map_err(err)?;
    for (i, t) in trace.iter().enumerate() {
        w.write_record([(i + 1).to_string(), t.block.to_string(), t.label.clone(), format!("{:.6}", t.mse_ms2)])
            .map_err(err)?;
    }
    w.flush().map_err(|e| FlowKanError::parse("trace csv", e.to_string()))
}

#[derive(Clone, Debug)]
pub struct DistillOutcome {
    pub surrogate: SymbolicModel,
    pub neural_mse_ms2: f64,
    pub trace: Vec<TraceEntry>,
    pub reports: Vec<BlockReport>,
}

/// Symbolizes every block in canonical order and records the pooled MSE
/// after each step.
pub fn distill_all(
    model: &FlowKanModel,
    train: &[HeteroGraph],
    val: &[HeteroGraph],
    cfg: &DistillConfig,
) -> Result<DistillOutcome> {
    cfg.validate()?;
    let train_in = model.preprocess.prepare_all(train)?;
    let val_in = model.preprocess.prepare_all(val)?;
    let everything: Vec<GraphInput> = train_in.iter().chain(&val_in).cloned().collect();
    let mut hybrid = HybridModel::new(model.clone());
    let neural_mse = pooled_mse(&hybrid, &everything)?;
    let mut trace = Vec::new();
    let mut reports = Vec::new();
    for block in hybrid.order().to_vec() {
        let (next, report) = distill_block(&hybrid, block, &train_in, &val_in, cfg)?;
        hybrid = next;
        debug_assert!(hybrid.has_prefix_property());
        trace.push(TraceEntry {
            block,
            label: trace_label(block),
            mse_ms2: pooled_mse(&hybrid, &everything)?,
        });
        reports.push(report);
    }
    Ok(DistillOutcome {
        surrogate: hybrid.to_surrogate()?,
        neural_mse_ms2: neural_mse,
        trace,
        reports,
    })
}

/// The fully symbolic FlowKANet: expressions for every block plus the fixed
/// message-passing structure. Holds no trainable tensors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SymbolicModel {
    pub preprocess: Preprocess,
    pub flow_hidden: usize,
    pub link_hidden: usize,
    pub rounds: usize,
    pub blocks: Vec<SymbolicBlock>,
}

impl SymbolicModel {
    pub fn new(
        preprocess: Preprocess,
        flow_hidden: usize,
        link_hidden: usize,
        rounds: usize,
        blocks: Vec<SymbolicBlock>,
    ) -> Result<Self> {
        let m = Self {
            preprocess,
            flow_hidden,
            link_hidden,
            rounds,
            blocks,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let order = Block::canonical(self.rounds);
        let got: Vec<Block> = self.blocks.iter().map(|b| b.block).collect();
        if got != order {
            return Err(FlowKanError::validation(format!(
                "symbolic blocks {:?} do not follow the canonical order",
                got.iter().map(|b| b.to_string()).collect::<Vec<_>>()
            )));
        }
        let (f, l, w) = (self.flow_hidden, self.link_hidden, self.preprocess.input_width());
        for b in &self.blocks {
            b.validate()?;
            let io = match b.block {
                Block::FlowInit => (w, f),
                Block::LinkInit => (LINK_FEATURES.len(), l),
                Block::Transform(_, Direction::F2l) => (f, l),
                Block::Transform(_, Direction::L2f) => (l, f),
                Block::Attention(_, Direction::F2l) => (l, 1),
                Block::Attention(_, Direction::L2f) => (f, 1),
                Block::Fuse => (f + l, f),
                Block::Final => (f, 1),
            };
            if (b.input_width, b.output_width()) != io {
                return Err(FlowKanError::validation(format!(
                    "{} maps {} -> {}, expected {} -> {}",
                    b.block,
                    b.input_width,
                    b.output_width(),
                    io.0,
                    io.1
                )));
            }
        }
        Ok(())
    }

    /// Always 0: the surrogate carries only expression constants.
    pub fn trainable_param_count(&self) -> usize {
        0
    }

    pub fn constant_count(&self) -> usize {
        self.blocks.iter().map(SymbolicBlock::constant_count).sum()
    }

    pub fn max_complexity(&self) -> usize {
        self.blocks.iter().map(SymbolicBlock::max_complexity).max().unwrap_or(0)
    }

    fn block(&self, b: Block) -> Result<&SymbolicBlock> {
        self.blocks
            .iter()
            .find(|s| s.block == b)
            .ok_or_else(|| FlowKanError::contract(format!("no expression for {b}")))
    }

    /// Human-readable equations: the composition rules followed by every
    /// block's expressions with named inputs.
    pub fn equations_text(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("# {EQUATIONS_FORMAT} v{EQUATIONS_VERSION}\n"));
        s.push_str(&format!(
            "# {} blocks, {} constants, max complexity {}\n\n",
            self.blocks.len(),
            self.constant_count(),
            self.max_complexity()
        ));
        s.push_str("## composition (N(f): links on the path of flow f, N(l): flows crossing link l)\n");
        s.push_str("h_f = flow_init(x_f) for every flow f; h_l = link_init(x_l) for every link l\n");
        for k in 0..self.rounds {
            s.push_str(&format!(
                "m_fl = L{k}.f2l.T(h_f); s_fl = L{k}.f2l.A(LeakyReLU(h_l + m_fl)); \
                 a_fl = exp(s_fl) / sum_{{f' in N(l)}} exp(s_f'l); h_l <- h_l + sum_{{f in N(l)}} a_fl * m_fl\n"
            ));
            s.push_str(&format!(
                "m_lf = L{k}.l2f.T(h_l); s_lf = L{k}.l2f.A(LeakyReLU(h_f + m_lf)); \
                 a_lf = exp(s_lf) / sum_{{l' in N(f)}} exp(s_l'f); h_f <- h_f + sum_{{l in N(f)}} a_lf * m_lf\n"
            ));
        }
        s.push_str("c_f = sum_{l in N(f)} h_l; z_f = fuse([h_f, c_f]); delay_ms(f) = softplus(final(h_f + z_f))\n");
        s.push_str("log(x) means log(max(x, 1e-8)); exp clips its argument to [-50, 50]; a / b = 0 when |b| < 1e-12; ");
        s.push_str("a ^ b = |a| ^ clamp(b, -1, 2); non-finite values become 0\n\n");
        for b in &self.blocks {
            s.push_str(&format!("## {}\n", b.block));
            let names = self.slot_names(b.block);
            let name = |i: usize| names.get(i).cloned().unwrap_or_else(|| format!("x{i}"));
            for (j, e) in b.exprs.iter().enumerate() {
                s.push_str(&format!("{}[{j}] = {}\n", b.block, e.to_infix(&name)));
            }
            s.push('\n');
        }
        s
    }

    fn slot_names(&self, block: Block) -> Vec<String> {
        let (f, l) = (self.flow_hidden, self.link_hidden);
        let seq = |p: &str, n: usize| (0..n).map(|i| format!("{p}[{i}]")).collect::<Vec<_>>();
        match block {
            Block::FlowInit => self.preprocess.selection.names.iter().map(|n| format!("x_f.{n}")).collect(),
            Block::LinkInit => LINK_FEATURES.iter().map(|n| format!("x_l.{n}")).collect(),
            Block::Transform(_, Direction::F2l) => seq("h_f", f),
            Block::Transform(_, Direction::L2f) => seq("h_l", l),
            Block::Attention(_, Direction::F2l) => seq("z_fl", l),
            Block::Attention(_, Direction::L2f) => seq("z_lf", f),
            Block::Fuse => seq("h_f", f).into_iter().chain(seq("c_f", l)).collect(),
            Block::Final => seq("r_f", f),
        }
    }
}

impl Predictor for SymbolicModel {
    fn preprocess(&self) -> &Preprocess {
        &self.preprocess
    }

    fn predict_ms(&self, input: &GraphInput) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let y = kamp_forward(
            &mut tape,
            input,
            self.rounds,
            None,
            &mut |tape, b, x| {
                let out = self.block(b)?.eval(tape.value(x))?;
                Ok(tape.constant(out))
            },
            None,
        )?;
        Ok(tape.value(y).data().to_vec())
    }
}

pub const EQUATIONS_FORMAT: &str = "flowkan-equations";
pub const EQUATIONS_VERSION: u32 = 1;

/// Machine-readable equation file: prefix-order node lists for every block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EquationBundle {
    pub format: String,
    pub version: u32,
    pub model: SymbolicModel,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EquationFiles {
    pub text: PathBuf,
    pub json: PathBuf,
}

/// Writes `equations.txt` and `equations.json` into `dir`.
pub fn export_equations(model: &SymbolicModel, dir: impl AsRef<Path>) -> Result<EquationFiles> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| FlowKanError::io(dir, e))?;
    let files = EquationFiles {
        text: dir.join("equations.txt"),
        json: dir.join("equations.json"),
    };
    std::fs::write(&files.text, model.equations_text()).map_err(|e| FlowKanError::io(&files.text, e))?;
    let bundle = EquationBundle {
        format: EQUATIONS_FORMAT.into(),
        version: EQUATIONS_VERSION,
        model: model.clone(),
    };
    let json = serde_json::to_string_pretty(&bundle)
        .map_err(|e| FlowKanError::parse(files.json.display().to_string(), e.to_string()))?;
    std::fs::write(&files.json, json).map_err(|e| FlowKanError::io(&files.json, e))?;
    Ok(files)
}

pub fn load_equations(path: impl AsRef<Path>) -> Result<SymbolicModel> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| FlowKanError::io(path, e))?;
    let ctx = || path.display().to_string();
    let b: EquationBundle = serde_json::from_str(&text).map_err(|e| FlowKanError::parse(ctx(), e.to_string()))?;
    if b.format != EQUATIONS_FORMAT || b.version != EQUATIONS_VERSION {
        return Err(FlowKanError::parse(ctx(), format!("unsupported format {} v{}", b.format, b.version)));
    }
    b.model.validate()?;
    Ok(b.model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_dataset, ScenarioConfig};
    use crate::flowkanet::FlowKanConfig;
    use crate::model::tests::{tiny_graph, tiny_preprocess};
    use crate::netgraph::{build_graph, tests::flow, Scenario};
    use crate::rng::seeded;

    fn model() -> FlowKanModel {
        FlowKanModel::new(FlowKanConfig::default(), tiny_preprocess(), 3).unwrap()
    }

    fn quick() -> DistillConfig {
        DistillConfig {
            trials: 2,
            space: GpSpace {
                population: (12, 12),
                iterations: (2, 2),
                ..GpSpace::default()
            },
            ..DistillConfig::default()
        }
    }

    fn graphs(n: usize, seed: u64) -> Vec<HeteroGraph> {
        generate_dataset(&ScenarioConfig::default(), n, seed).unwrap()
    }

    #[test]
    fn sampling_records_exact_block_rows() {
        let h = HybridModel::new(model());
        let g = build_graph(Scenario {
            capacities: vec![0.02],
            flows: vec![{
                let mut f = flow(2e6, vec![0]);
                f.delay = Some(1e-3);
                f
            }],
        })
        .unwrap();
        let input = h.model.preprocess.prepare(&g).unwrap();
        let (fit, hold) = sample_block_io(&h, std::slice::from_ref(&input), "flow_init", 1.0, 0).unwrap();
        assert!(hold.is_empty());
        assert_eq!(fit.len(), 1);
        assert_eq!(fit.inputs[0], input.flow_x.row(0));

        let inputs = h.model.preprocess.prepare_all(&graphs(3, 5)).unwrap();
        for name in ["L1.f2l.A", "fuse", "final"] {
            let (fit, hold) = sample_block_io(&h, &inputs, name, 0.5, 9).unwrap();
            let all: Vec<Vec<f64>> = fit.inputs.iter().chain(&hold.inputs).cloned().collect();
            let outs: Vec<Vec<f64>> = fit.outputs.iter().chain(&hold.outputs).cloned().collect();
            let replay = h.model.eval_block(name.parse().unwrap(), &Tensor::from_rows(&all).unwrap()).unwrap();
            assert_eq!(replay.rows_vec(), outs, "{name}");
        }
        let edges: usize = inputs.iter().map(|i| i.edge_flow.len()).sum();
        let (fit, hold) = sample_block_io(&h, &inputs, "L0.l2f.T", 0.5, 0).unwrap();
        assert_eq!(fit.len() + hold.len(), edges);
        assert!(matches!(sample_block_io(&h, &inputs, "L7.f2l.T", 0.5, 0), Err(FlowKanError::Config(_))));
        assert!(matches!(sample_block_io(&h, &inputs, "nope", 0.5, 0), Err(FlowKanError::Config(_))));
    }

    #[test]
    fn zero_block_distills_to_zero_without_changing_predictions() {
        let mut m = model();
        let ids: Vec<_> = m.store.iter().filter(|(_, n, _)| n.starts_with("flow_init")).map(|(id, _, _)| id).collect();
        for id in ids {
            m.store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let h = HybridModel::new(m);
        let inputs = h.model.preprocess.prepare_all(&graphs(4, 1)).unwrap();
        let before = pooled_mse(&h, &inputs).unwrap();
        let (next, report) = distill_block(&h, Block::FlowInit, &inputs, &inputs, &quick()).unwrap();
        let sb = next.symbolic(Block::FlowInit).unwrap();
        assert!(sb.exprs.iter().all(|e| e.as_constant() == Some(0.0)), "{:?}", sb.exprs);
        assert_eq!(pooled_mse(&next, &inputs).unwrap(), before);
        assert_eq!(report.val_mse_ms2, before);
    }

    #[test]
    fn distill_block_keeps_prefix_order() {
        let h = HybridModel::new(model());
        let inputs = h.model.preprocess.prepare_all(&graphs(3, 2)).unwrap();
        let e = distill_block(&h, Block::LinkInit, &inputs, &inputs, &quick()).unwrap_err();
        assert!(matches!(e, FlowKanError::Contract(_)));
        let (h1, _) = distill_block(&h, Block::FlowInit, &inputs, &inputs, &quick()).unwrap();
        let (h2, r) = distill_block(&h1, Block::LinkInit, &inputs, &inputs, &quick()).unwrap();
        assert!(h2.has_prefix_property());
        assert_eq!(h2.symbolized_count(), 2);
        assert_eq!(h2.next_neural(), Some(Block::Transform(0, Direction::F2l)));
        assert!(r.val_mse_ms2.is_finite());
        assert!(r.val_mse_ms2 <= r.constant_val_mse_ms2);
    }

    fn random_surrogate(seed: u64) -> SymbolicModel {
        let m = model();
        let mut rng = seeded(seed);
        let w = m.preprocess.input_width();
        let blocks = m
            .blocks()
            .into_iter()
            .map(|b| {
                let (iw, ow) = m.config.block_io(b, w);
                let exprs = (0..ow)
                    .map(|_| {
                        let a = Expr::var(rng.random_range(0..iw));
                        let c = Expr::constant(rng.random_range(-0.5..0.5));
                        let e = Expr::binary(BinaryOp::Mul, c, Expr::unary(UnaryOp::Tanh, a));
                        Expr::binary(BinaryOp::Add, e, Expr::constant(rng.random_range(-0.1..0.1)))
                    })
                    .collect();
                SymbolicBlock::new(b, iw, exprs).unwrap()
            })
            .collect();
        SymbolicModel::new(m.preprocess.clone(), 8, 2, 3, blocks).unwrap()
    }

    #[test]
    fn export_round_trip_is_bit_exact() {
        let s = random_surrogate(4);
        let dir = tempfile::tempdir().unwrap();
        let files = export_equations(&s, dir.path()).unwrap();
        let text = std::fs::read_to_string(&files.text).unwrap();
        assert!(text.contains("sum_{l in N(f)}"));
        assert!(text.contains("flow_init[7] = "));
        let back = load_equations(&files.json).unwrap();
        assert_eq!(back, s);
        for g in graphs(5, 8) {
            assert_eq!(back.predict(&g).unwrap(), s.predict(&g).unwrap());
        }
        assert_eq!(s.trainable_param_count(), 0);
        assert_eq!(s.constant_count(), 2 * (8 + 2 + 3 * (2 + 1 + 8 + 1) + 8 + 1));
    }

    #[test]
    fn constant_surrogate_lists_constants() {
        let m = model();
        let w = m.preprocess.input_width();
        let blocks = m
            .blocks()
            .into_iter()
            .map(|b| {
                let (iw, ow) = m.config.block_io(b, w);
                SymbolicBlock::constant(b, iw, &vec![0.25; ow])
            })
            .collect();
        let s = SymbolicModel::new(m.preprocess.clone(), 8, 2, 3, blocks).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let files = export_equations(&s, dir.path()).unwrap();
        assert!(std::fs::read_to_string(&files.text).unwrap().contains("final[0] = 0.25"));
        let back = load_equations(&files.json).unwrap();
        let g = tiny_graph();
        assert_eq!(back.predict(&g).unwrap(), s.predict(&g).unwrap());
    }

    #[test]
    fn surrogate_ignores_path_order() {
        let s = random_surrogate(7);
        let mk = |path: Vec<usize>| {
            let mut flows = vec![flow(1e6, vec![0]), flow(2.5e6, path), flow(4e5, vec![1])];
            flows.iter_mut().for_each(|f| f.delay = Some(1e-3));
            build_graph(Scenario {
                capacities: vec![0.01, 0.04],
                flows,
            })
            .unwrap()
        };
        let a = s.predict(&mk(vec![0, 1])).unwrap();
        let b = s.predict(&mk(vec![1, 0])).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-9);
            assert!(*x > 0.0);
        }
    }

    #[test]
    fn corrupted_bundles_are_rejected() {
        let s = random_surrogate(1);
        let dir = tempfile::tempdir().unwrap();
        let files = export_equations(&s, dir.path()).unwrap();
        let text = std::fs::read_to_string(&files.json).unwrap();
        std::fs::write(&files.json, text.replace("flowkan-equations", "other")).unwrap();
        assert!(matches!(load_equations(&files.json), Err(FlowKanError::Parse { .. })));
        let mut bad = s.clone();
        bad.blocks.swap(0, 1);
        assert!(bad.validate().is_err());
        let e = SymbolicBlock::new(Block::Final, 8, vec![Expr::var(8)]).unwrap_err();
        assert!(matches!(e, FlowKanError::Validation(_)));
    }

    #[test]
    fn distill_all_trace_and_surrogate() {
        let m = model();
        let train = graphs(3, 11);
        let val = graphs(2, 12);
        let cfg = DistillConfig {
            trials: 1,
            ..quick()
        };
        let out = distill_all(&m, &train, &val, &cfg).unwrap();
        assert_eq!(out.trace.len(), 16);
        assert_eq!(out.trace[2].label, "L0.f2l");
        assert_eq!(out.trace[3].label, "L0.f2l");
        assert!(out.trace.iter().all(|t| t.mse_ms2.is_finite()));
        assert_eq!(out.surrogate.trainable_param_count(), 0);
        assert!(out.surrogate.constant_count() > 0);
        assert!(out.surrogate.max_complexity() <= 35);
        let mut buf = Vec::new();
        write_trace_csv(&out.trace, &mut buf).unwrap();
        let csv = String::from_utf8(buf).unwrap();
        assert!(csv.starts_with("step,block,label,mse_ms2\n1,flow_init,flow_init,"));
        assert_eq!(csv.lines().count(), 17);
        let again = distill_all(&m, &train, &val, &cfg).unwrap();
        assert_eq!(again.surrogate, out.surrogate);
    }
}
