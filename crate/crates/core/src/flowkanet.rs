//! FlowKANet: spline-operator encoders, attention-weighted message passing
//! whose transformation and scoring operators are KAN layers, residual
//! updates, and a KAN fusion/readout ending in softplus.
//!
//! Every learnable stage is a named block. A [`BlockHook`] can observe block
//! inputs/outputs or substitute a block's output, which is how symbolic
//! distillation samples blocks and evaluates hybrid models.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{FlowKanError, Result};
use crate::model::{GraphInput, Predictor, Preprocess, Trainable};
use crate::rng::{self, Rng};
use crate::splines::{KanLayer, SplineSpec};
use crate::tensor::{dropout, Activation, ParamStore, Tape, Tensor, Var};

/// Spline domain of the encoders, whose inputs are min-max normalized.
pub const ENCODER_DOMAIN: (f64, f64) = (-1.0, 1.5);
/// Spline domain of every block fed by embeddings.
pub const HIDDEN_DOMAIN: (f64, f64) = (-2.0, 2.0);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationMode {
    /// Only inside the final readout block.
    FinalOnly,
    /// Encoders, fusion and final readout; message passing stays linear.
    ExceptMp,
    /// Every block, including the message-passing operators.
    All,
    NoActivation,
}

impl FromStr for ActivationMode {
    type Err = FlowKanError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "final_only" => Ok(Self::FinalOnly),
            "except_mp" => Ok(Self::ExceptMp),
            "all" => Ok(Self::All),
            "no_activation" => Ok(Self::NoActivation),
            _ => Err(FlowKanError::config(format!("unknown activation mode `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Direction {
    F2l,
    L2f,
}

impl Direction {
    fn tag(self) -> &'static str {
        match self {
            Direction::F2l => "f2l",
            Direction::L2f => "l2f",
        }
    }
}

/// A learnable stage of the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Block {
    FlowInit,
    LinkInit,
    Transform(usize, Direction),
    Attention(usize, Direction),
    Fuse,
    Final,
}

impl Block {
    /// Canonical order: encoders, then per round f2l.T, f2l.A, l2f.T, l2f.A,
    /// then fuse and final.
    pub fn canonical(rounds: usize) -> Vec<Block> {
        let mut v = vec![Block::FlowInit, Block::LinkInit];
        for i in 0..rounds {
            for d in [Direction::F2l, Direction::L2f] {
                v.push(Block::Transform(i, d));
                v.push(Block::Attention(i, d));
            }
        }
        v.push(Block::Fuse);
        v.push(Block::Final);
        v
    }
}

impl fmt::Display for Block {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Block::FlowInit => f.write_str("flow_init"),
            Block::LinkInit => f.write_str("link_init"),
            Block::Transform(i, d) => write!(f, "L{i}.{}.T", d.tag()),
            Block::Attention(i, d) => write!(f, "L{i}.{}.A", d.tag()),
            Block::Fuse => f.write_str("fuse"),
            Block::Final => f.write_str("final"),
        }
    }
}

impl FromStr for Block {
    type Err = FlowKanError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || FlowKanError::config(format!("unknown block `{s}`"));
        match s {
            "flow_init" => return Ok(Block::FlowInit),
            "link_init" => return Ok(Block::LinkInit),
            "fuse" => return Ok(Block::Fuse),
            "final" => return Ok(Block::Final),
            _ => {}
        }
        let rest = s.strip_prefix('L').ok_or_else(bad)?;
        let mut parts = rest.split('.');
        let round: usize = parts.next().and_then(|p| p.parse().ok()).ok_or_else(bad)?;
        let dir = match parts.next() {
            Some("f2l") => Direction::F2l,
            Some("l2f") => Direction::L2f,
            _ => return Err(bad()),
        };
        let b = match parts.next() {
            Some("T") => Block::Transform(round, dir),
            Some("A") => Block::Attention(round, dir),
            _ => return Err(bad()),
        };
        if parts.next().is_some() {
            return Err(bad());
        }
        Ok(b)
    }
}

impl Serialize for Block {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Block {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Per-block grid size, spline order and initialization scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockTable {
    pub flow_init: SplineSpec,
    pub link_init: SplineSpec,
    pub f2l: Vec<SplineSpec>,
    pub l2f: Vec<SplineSpec>,
    pub fuse: SplineSpec,
    #[serde(rename = "final")]
    pub final_block: SplineSpec,
}

impl BlockTable {
    /// Tuned per-block values for the three-round network.
    pub fn tuned() -> Self {
        Self {
            flow_init: SplineSpec::new(9, 3, 0.93),
            link_init: SplineSpec::new(7, 5, 1.66),
            f2l: vec![SplineSpec::new(5, 3, 0.55), SplineSpec::new(6, 4, 0.70), SplineSpec::new(8, 4, 0.82)],
            l2f: vec![SplineSpec::new(7, 3, 0.73), SplineSpec::new(7, 5, 0.77), SplineSpec::new(10, 3, 0.33)],
            fuse: SplineSpec::new(6, 5, 1.15),
            final_block: SplineSpec::new(10, 5, 2.28),
        }
    }

    pub fn spec(&self, block: Block) -> SplineSpec {
        match block {
            Block::FlowInit => self.flow_init,
            Block::LinkInit => self.link_init,
            Block::Transform(i, Direction::F2l) | Block::Attention(i, Direction::F2l) => self.f2l[i],
            Block::Transform(i, Direction::L2f) | Block::Attention(i, Direction::L2f) => self.l2f[i],
            Block::Fuse => self.fuse,
            Block::Final => self.final_block,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowKanConfig {
    pub flow_hidden: usize,
    pub link_hidden: usize,
    pub rounds: usize,
    pub dropout: f64,
    pub activation: Activation,
    pub activation_mode: ActivationMode,
    pub blocks: BlockTable,
}

impl Default for FlowKanConfig {
    fn default() -> Self {
        Self {
            flow_hidden: 8,
            link_hidden: 2,
            rounds: 3,
            dropout: 0.1,
            activation: Activation::Tanh,
            activation_mode: ActivationMode::ExceptMp,
            blocks: BlockTable::tuned(),
        }
    }
}

impl FlowKanConfig {
    pub fn validate(&self) -> Result<()> {
        if self.flow_hidden == 0 || self.link_hidden == 0 {
            return Err(FlowKanError::config("hidden widths must be positive"));
        }
        if self.blocks.f2l.len() != self.rounds || self.blocks.l2f.len() != self.rounds {
            return Err(FlowKanError::config(format!(
                "block table has {} f2l and {} l2f rows for {} rounds",
                self.blocks.f2l.len(),
                self.blocks.l2f.len(),
                self.rounds
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(FlowKanError::config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        for b in Block::canonical(self.rounds) {
            let s = self.blocks.spec(b);
            if s.grid_size == 0 || s.order == 0 || !(s.sigma >= 0.0 && s.sigma.is_finite()) {
                return Err(FlowKanError::config(format!("block {b}: invalid spline spec {s:?}")));
            }
        }
        Ok(())
    }

    pub fn block_names(&self) -> Vec<String> {
        Block::canonical(self.rounds).iter().map(|b| b.to_string()).collect()
    }

    /// Activation applied at the end of `block` (inside the final block it
    /// sits between the two spline layers).
    pub fn activation_for(&self, block: Block) -> Option<Activation> {
        use ActivationMode::*;
        let on = match (self.activation_mode, block) {
            (NoActivation, _) => false,
            (All, _) => true,
            (_, Block::Final) => true,
            (ExceptMp, Block::FlowInit | Block::LinkInit | Block::Fuse) => true,
            _ => false,
        };
        on.then_some(self.activation)
    }

    /// `(input width, output width)` of a block's map.
    pub fn block_io(&self, block: Block, input_width: usize) -> (usize, usize) {
        let (f, l) = (self.flow_hidden, self.link_hidden);
        match block {
            Block::FlowInit => (input_width, f),
            Block::LinkInit => (2, l),
            Block::Transform(_, Direction::F2l) => (f, l),
            Block::Transform(_, Direction::L2f) => (l, f),
            Block::Attention(_, Direction::F2l) => (l, 1),
            Block::Attention(_, Direction::L2f) => (f, 1),
            Block::Fuse => (f + l, f),
            Block::Final => (f, 1),
        }
    }
}

/// Observes or overrides block evaluations during a forward pass.
pub trait BlockHook {
    /// Output to use instead of running `block`'s neural map.
    fn replace(&mut self, _block: Block, _input: &Tensor) -> Result<Option<Tensor>> {
        Ok(None)
    }

    /// Called after a neural block ran.
    fn observe(&mut self, _block: Block, _input: &Tensor, _output: &Tensor) {}
}

pub struct NoHook;

impl BlockHook for NoHook {}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Round {
    f2l_t: KanLayer,
    f2l_a: KanLayer,
    l2f_t: KanLayer,
    l2f_a: KanLayer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowKanModel {
    pub config: FlowKanConfig,
    pub preprocess: Preprocess,
    pub store: ParamStore,
    flow_init: KanLayer,
    link_init: KanLayer,
    rounds: Vec<Round>,
    fuse: KanLayer,
    final_hidden: KanLayer,
    final_out: KanLayer,
}

/// Which of a direction's two operators a KAMP step is asking for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KampOp {
    Transform,
    Attention,
}

/// `(h~, alpha)`: per-edge transformed sender states `T(h_u)` and attention
/// weights `softmax_recv(A(LeakyReLU(h_v + h~)))`. `apply` evaluates `T` on
/// the gathered per-edge sender states and `A` on the per-edge score inputs.
pub fn kamp_messages(
    tape: &mut Tape,
    h_send: Var,
    h_recv: Var,
    send_idx: &[usize],
    recv_idx: &[usize],
    apply: &mut dyn FnMut(&mut Tape, KampOp, Var) -> Result<Var>,
) -> Result<(Var, Var)> {
    let hs = tape.gather_rows(h_send, send_idx)?;
    let msgs = apply(tape, KampOp::Transform, hs)?;
    let hr = tape.gather_rows(h_recv, recv_idx)?;
    if tape.value(msgs).shape() != tape.value(hr).shape() {
        return Err(FlowKanError::contract(format!(
            "transformed messages {:?} do not match receiver states {:?}",
            tape.value(msgs).shape(),
            tape.value(hr).shape()
        )));
    }
    let pre = tape.add(hr, msgs)?;
    let z = tape.activation(pre, Activation::LeakyRelu);
    let scores = apply(tape, KampOp::Attention, z)?;
    if tape.value(scores).shape() != [send_idx.len(), 1] {
        return Err(FlowKanError::contract(format!(
            "attention operator must output one score per edge, got {:?}",
            tape.value(scores).shape()
        )));
    }
    let alpha = tape.segment_softmax(scores, recv_idx)?;
    Ok((msgs, alpha))
}

/// `h_v + sum_u alpha_uv * h~_uv`; nodes without neighbors keep `h_v`.
pub fn aggregate_and_update(tape: &mut Tape, h: Var, msgs: Var, alpha: Var, recv_idx: &[usize]) -> Result<Var> {
    let n = tape.value(h).rows();
    let weighted = tape.mul_rows(msgs, alpha)?;
    let agg = tape.segment_sum(weighted, recv_idx, n)?;
    tape.add(h, agg)
}

/// Attention weights per round and direction, in edge order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KampTrace {
    pub f2l: Vec<Vec<f64>>,
    pub l2f: Vec<Vec<f64>>,
    /// Flow and link states right after encoding.
    pub encoded: Option<(Tensor, Tensor)>,
    /// Flow and link states after the last round.
    pub final_states: Option<(Tensor, Tensor)>,
}

impl FlowKanModel {
    pub fn new(config: FlowKanConfig, preprocess: Preprocess, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::seeded(seed);
        let mut store = ParamStore::new();
        let w = preprocess.input_width();
        let t = &config.blocks;
        let mut layer = |name: String, b: Block, i: usize, o: usize, dom: (f64, f64)| {
            KanLayer::from_spec(&mut store, &name, i, o, dom, t.spec(b), &mut rng)
        };
        let (f, l) = (config.flow_hidden, config.link_hidden);
        let flow_init = layer("flow_init".into(), Block::FlowInit, w, f, ENCODER_DOMAIN)?;
        let link_init = layer("link_init".into(), Block::LinkInit, 2, l, ENCODER_DOMAIN)?;
        let mut rounds = Vec::with_capacity(config.rounds);
        for i in 0..config.rounds {
            let mut mk = |b: Block, io: (usize, usize)| layer(b.to_string(), b, io.0, io.1, HIDDEN_DOMAIN);
            rounds.push(Round {
                f2l_t: mk(Block::Transform(i, Direction::F2l), (f, l))?,
                f2l_a: mk(Block::Attention(i, Direction::F2l), (l, 1))?,
                l2f_t: mk(Block::Transform(i, Direction::L2f), (l, f))?,
                l2f_a: mk(Block::Attention(i, Direction::L2f), (f, 1))?,
            });
        }
        let fuse = layer("fuse".into(), Block::Fuse, f + l, f, HIDDEN_DOMAIN)?;
        let final_hidden = layer("final.0".into(), Block::Final, f, f, HIDDEN_DOMAIN)?;
        let final_out = layer("final.1".into(), Block::Final, f, 1, HIDDEN_DOMAIN)?;
        Ok(Self {
            config,
            preprocess,
            store,
            flow_init,
            link_init,
            rounds,
            fuse,
            final_hidden,
            final_out,
        })
    }

    /// Spline layers that make up `block`, in evaluation order.
    pub fn layers(&self, block: Block) -> Vec<&KanLayer> {
        match block {
            Block::FlowInit => vec![&self.flow_init],
            Block::LinkInit => vec![&self.link_init],
            Block::Transform(i, Direction::F2l) => vec![&self.rounds[i].f2l_t],
            Block::Attention(i, Direction::F2l) => vec![&self.rounds[i].f2l_a],
            Block::Transform(i, Direction::L2f) => vec![&self.rounds[i].l2f_t],
            Block::Attention(i, Direction::L2f) => vec![&self.rounds[i].l2f_a],
            Block::Fuse => vec![&self.fuse],
            Block::Final => vec![&self.final_hidden, &self.final_out],
        }
    }

    pub fn blocks(&self) -> Vec<Block> {
        Block::canonical(self.config.rounds)
    }

    pub fn block_param_count(&self, block: Block) -> usize {
        self.layers(block).iter().map(|l| l.param_count()).sum()
    }

    /// Sum of spline-layer parameter counts over every block.
    pub fn param_count(&self) -> usize {
        self.blocks().into_iter().map(|b| self.block_param_count(b)).sum()
    }

    /// The block's neural map, including its activation.
    pub fn run_block(&self, tape: &mut Tape, block: Block, x: Var) -> Result<Var> {
        let act = self.config.activation_for(block);
        let s = &self.store;
        match block {
            Block::Final => {
                let h = self.final_hidden.forward(tape, s, x)?;
                let h = act.map_or(h, |a| tape.activation(h, a));
                self.final_out.forward(tape, s, h)
            }
            _ => {
                let y = self.layers(block)[0].forward(tape, s, x)?;
                Ok(act.map_or(y, |a| tape.activation(y, a)))
            }
        }
    }

    /// Same as [`Self::run_block`] on plain values.
    pub fn eval_block(&self, block: Block, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let y = self.run_block(&mut tape, block, v)?;
        Ok(tape.value(y).clone())
    }

    fn hooked(&self, tape: &mut Tape, hook: &mut dyn BlockHook, block: Block, x: Var) -> Result<Var> {
        if let Some(out) = hook.replace(block, tape.value(x))? {
            let (_, o) = self.config.block_io(block, self.preprocess.input_width());
            if out.shape() != [tape.value(x).rows(), o] {
                return Err(FlowKanError::contract(format!(
                    "replacement for {block} has shape {:?}, expected [{}, {o}]",
                    out.shape(),
                    tape.value(x).rows()
                )));
            }
            return Ok(tape.constant(out));
        }
        let y = self.run_block(tape, block, x)?;
        hook.observe(block, tape.value(x), tape.value(y));
        Ok(y)
    }

    pub fn forward_with(
        &self,
        tape: &mut Tape,
        input: &GraphInput,
        rng: Option<&mut Rng>,
        hook: &mut dyn BlockHook,
        trace: Option<&mut KampTrace>,
    ) -> Result<Var> {
        let dropout = rng.map(|r| (self.config.dropout, r));
        kamp_forward(
            tape,
            input,
            self.config.rounds,
            dropout,
            &mut |tape, b, x| self.hooked(tape, hook, b, x),
            trace,
        )
    }
}

/// The FlowKANet wiring with every block map supplied by `block`: encoders,
/// `rounds` KAMP-Attn rounds, link-context fuse with residual, final block
/// and softplus. Dropout `(p, rng)` follows the encoders and the fuse.
pub fn kamp_forward(
    tape: &mut Tape,
    input: &GraphInput,
    rounds: usize,
    mut dropout_rng: Option<(f64, &mut Rng)>,
    block: &mut dyn FnMut(&mut Tape, Block, Var) -> Result<Var>,
    mut trace: Option<&mut KampTrace>,
) -> Result<Var> {
    let mut drop = |tape: &mut Tape, x: Var| -> Result<Var> {
        match dropout_rng.as_mut() {
            Some((p, r)) => dropout(tape, x, *p, true, r),
            None => Ok(x),
        }
    };
    let fx = tape.constant(input.flow_x.clone());
    let lx = tape.constant(input.link_x.clone());
    let h_f = block(tape, Block::FlowInit, fx)?;
    let mut h_f = drop(tape, h_f)?;
    let h_l = block(tape, Block::LinkInit, lx)?;
    let mut h_l = drop(tape, h_l)?;
    if let Some(t) = trace.as_deref_mut() {
        t.encoded = Some((tape.value(h_f).clone(), tape.value(h_l).clone()));
    }
    let (ef, el) = (&input.edge_flow, &input.edge_link);
    for i in 0..rounds {
        for dir in [Direction::F2l, Direction::L2f] {
            let (send, recv, si, ri) = match dir {
                Direction::F2l => (h_f, h_l, ef, el),
                Direction::L2f => (h_l, h_f, el, ef),
            };
            let (msgs, alpha) = kamp_messages(tape, send, recv, si, ri, &mut |tape, op, x| {
                let b = match op {
                    KampOp::Transform => Block::Transform(i, dir),
                    KampOp::Attention => Block::Attention(i, dir),
                };
                block(tape, b, x)
            })?;
            let updated = aggregate_and_update(tape, recv, msgs, alpha, ri)?;
            if let Some(t) = trace.as_deref_mut() {
                let a = tape.value(alpha).data().to_vec();
                match dir {
                    Direction::F2l => t.f2l.push(a),
                    Direction::L2f => t.l2f.push(a),
                }
            }
            match dir {
                Direction::F2l => h_l = updated,
                Direction::L2f => h_f = updated,
            }
        }
    }
    if let Some(t) = trace {
        t.final_states = Some((tape.value(h_f).clone(), tape.value(h_l).clone()));
    }
    let per_edge = tape.gather_rows(h_l, el)?;
    let ctx = tape.segment_sum(per_edge, ef, input.n_flows)?;
    let cat = tape.concat_cols(h_f, ctx)?;
    let z = block(tape, Block::Fuse, cat)?;
    let z = drop(tape, z)?;
    let r = tape.add(h_f, z)?;
    let out = block(tape, Block::Final, r)?;
    Ok(tape.activation(out, Activation::Softplus))
}

impl Predictor for FlowKanModel {
    fn preprocess(&self) -> &Preprocess {
        &self.preprocess
    }

    fn predict_ms(&self, input: &GraphInput) -> Result<Vec<f64>> {
        crate::model::eval_forward(self, input)
    }
}

impl Trainable for FlowKanModel {
    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn forward(&self, tape: &mut Tape, input: &GraphInput, rng: Option<&mut Rng>) -> Result<Var> {
        self.forward_with(tape, input, rng, &mut NoHook, None)
    }

    fn param_count(&self) -> usize {
        FlowKanModel::param_count(self)
    }
}
