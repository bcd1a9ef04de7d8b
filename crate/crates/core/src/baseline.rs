//! Attention message-passing baseline: MLP encoders, per-round bidirectional
//! attention between flows and links, GRU refinement of flow states, and an
//! MLP readout over the flow state fused with its summed link states.

use serde::{Deserialize, Serialize};

use crate::error::{FlowKanError, Result};
use crate::model::{eval_forward, GraphInput, Predictor, Preprocess, Trainable};
use crate::rng::{self, Rng};
use crate::tensor::{dropout, Activation, Dense, GruCell, ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GruPlacement {
    /// Flow states pass through the GRU after every round.
    PerRound,
    /// Rounds replace flow states directly; one GRU step after the loop
    /// blends the encoded state with the message-passed one.
    AfterLoop,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    pub flow_hidden: usize,
    pub link_hidden: usize,
    pub rounds: usize,
    pub encoder_width: usize,
    pub readout_width: usize,
    pub dropout: f64,
    pub activation: Activation,
    pub gru: GruPlacement,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            flow_hidden: 64,
            link_hidden: 64,
            rounds: 3,
            encoder_width: 64,
            readout_width: 64,
            dropout: 0.1,
            activation: Activation::Tanh,
            gru: GruPlacement::PerRound,
        }
    }
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<()> {
        let widths = [self.flow_hidden, self.link_hidden, self.encoder_width, self.readout_width];
        if widths.contains(&0) {
            return Err(FlowKanError::config(format!("baseline widths must be positive, got {widths:?}")));
        }
        if self.rounds == 0 {
            return Err(FlowKanError::config("baseline needs at least one message-passing round"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(FlowKanError::config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Attention for one direction of one round. Scores are
/// `LeakyReLU(a_recv . (h_v W_recv) + a_send . (h_u W_send))`, i.e. the
/// concatenated form `a^T [W h_v || W h_u]` with the receiver and sender
/// projections kept separate because the two node types can differ in width.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionLayer {
    pub w_send: Dense,
    pub w_recv: Dense,
    pub a_send: ParamId,
    pub a_recv: ParamId,
}

impl AttentionLayer {
    pub fn new(store: &mut ParamStore, name: &str, d_send: usize, d_recv: usize, rng: &mut Rng) -> Self {
        let w_send = Dense::new(store, &format!("{name}.w_send"), d_send, d_recv, false, rng);
        let w_recv = Dense::new(store, &format!("{name}.w_recv"), d_recv, d_recv, false, rng);
        let a_send = Dense::new(store, &format!("{name}.a_send"), d_recv, 1, false, rng).weight;
        let a_recv = Dense::new(store, &format!("{name}.a_recv"), d_recv, 1, false, rng).weight;
        Self {
            w_send,
            w_recv,
            a_send,
            a_recv,
        }
    }

    /// Returns the pre-activation update `h_v W_recv + sum_u alpha_uv W_send h_u`
    /// and the per-edge weights. The first term is the receiver's self
    /// connection, the heterogeneous counterpart of a self-loop.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        h_send: Var,
        h_recv: Var,
        send_idx: &[usize],
        recv_idx: &[usize],
        n_recv: usize,
    ) -> Result<(Var, Var)> {
        let msg_nodes = self.w_send.forward(tape, store, h_send)?;
        let a_s = tape.param(store, self.a_send);
        let score_send = tape.matmul(msg_nodes, a_s)?;
        let q = self.w_recv.forward(tape, store, h_recv)?;
        let a_r = tape.param(store, self.a_recv);
        let score_recv = tape.matmul(q, a_r)?;
        let ss = tape.gather_rows(score_send, send_idx)?;
        let sr = tape.gather_rows(score_recv, recv_idx)?;
        let raw = tape.add(ss, sr)?;
        let scores = tape.activation(raw, Activation::LeakyRelu);
        let alpha = tape.segment_softmax(scores, recv_idx)?;
        let msgs = tape.gather_rows(msg_nodes, send_idx)?;
        let weighted = tape.mul_rows(msgs, alpha)?;
        let agg = tape.segment_sum(weighted, recv_idx, n_recv)?;
        let upd = tape.add(q, agg)?;
        Ok((upd, alpha))
    }

    fn param_count(&self, d_send: usize, d_recv: usize) -> usize {
        d_send * d_recv + d_recv * d_recv + 2 * d_recv
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineModel {
    pub config: BaselineConfig,
    pub preprocess: Preprocess,
    pub store: ParamStore,
    flow_enc: [Dense; 2],
    link_enc: [Dense; 2],
    f2l: Vec<AttentionLayer>,
    l2f: Vec<AttentionLayer>,
    gru: GruCell,
    readout: [Dense; 2],
}

/// Attention weights of one forward pass, per round, for inspection.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AttentionTrace {
    pub f2l: Vec<Vec<f64>>,
    pub l2f: Vec<Vec<f64>>,
}

impl BaselineModel {
    pub fn new(config: BaselineConfig, preprocess: Preprocess, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::seeded(seed);
        let mut store = ParamStore::new();
        let c = &config;
        let d_in = preprocess.input_width();
        let flow_enc = [
            Dense::new(&mut store, "flow_enc.0", d_in, c.encoder_width, true, &mut rng),
            Dense::new(&mut store, "flow_enc.1", c.encoder_width, c.flow_hidden, true, &mut rng),
        ];
        let link_enc = [
            Dense::new(&mut store, "link_enc.0", 2, c.encoder_width, true, &mut rng),
            Dense::new(&mut store, "link_enc.1", c.encoder_width, c.link_hidden, true, &mut rng),
        ];
        let mut f2l = Vec::new();
        let mut l2f = Vec::new();
        for i in 0..c.rounds {
            f2l.push(AttentionLayer::new(&mut store, &format!("L{i}.f2l"), c.flow_hidden, c.link_hidden, &mut rng));
            l2f.push(AttentionLayer::new(&mut store, &format!("L{i}.l2f"), c.link_hidden, c.flow_hidden, &mut rng));
        }
        let gru = GruCell::new(&mut store, "gru", c.flow_hidden, c.flow_hidden, &mut rng);
        let readout = [
            Dense::new(&mut store, "readout.0", c.flow_hidden + c.link_hidden, c.readout_width, true, &mut rng),
            Dense::new(&mut store, "readout.1", c.readout_width, 1, true, &mut rng),
        ];
        Ok(Self {
            config,
            preprocess,
            store,
            flow_enc,
            link_enc,
            f2l,
            l2f,
            gru,
            readout,
        })
    }

    /// Closed-form trainable scalar count for the configured architecture.
    pub fn param_count(&self) -> usize {
        let c = &self.config;
        let dense = |i: usize, o: usize| i * o + o;
        let d_in = self.preprocess.input_width();
        dense(d_in, c.encoder_width)
            + dense(c.encoder_width, c.flow_hidden)
            + dense(2, c.encoder_width)
            + dense(c.encoder_width, c.link_hidden)
            + c.rounds
                * (self.f2l[0].param_count(c.flow_hidden, c.link_hidden)
                    + self.l2f[0].param_count(c.link_hidden, c.flow_hidden))
            + self.gru.param_count()
            + dense(c.flow_hidden + c.link_hidden, c.readout_width)
            + dense(c.readout_width, 1)
    }

    /// Id of the final readout bias.
    pub fn readout_bias(&self) -> ParamId {
        self.readout[1].bias.expect("readout has a bias")
    }

    fn encode(&self, tape: &mut Tape, layers: &[Dense; 2], x: Var) -> Result<Var> {
        let act = self.config.activation;
        let h = layers[0].forward(tape, &self.store, x)?;
        let h = tape.activation(h, act);
        let h = layers[1].forward(tape, &self.store, h)?;
        Ok(tape.activation(h, act))
    }

    pub fn forward_traced(
        &self,
        tape: &mut Tape,
        input: &GraphInput,
        mut rng: Option<&mut Rng>,
        mut trace: Option<&mut AttentionTrace>,
    ) -> Result<Var> {
        let act = self.config.activation;
        let p = self.config.dropout;
        let training = rng.is_some();
        let mut drop = |tape: &mut Tape, x: Var| -> Result<Var> {
            match rng.as_deref_mut() {
                Some(r) => dropout(tape, x, p, training, r),
                None => Ok(x),
            }
        };
        let fx = tape.constant(input.flow_x.clone());
        let lx = tape.constant(input.link_x.clone());
        let h_f0 = self.encode(tape, &self.flow_enc, fx)?;
        let h_f0 = drop(tape, h_f0)?;
        let h_l0 = self.encode(tape, &self.link_enc, lx)?;
        let mut h_l = drop(tape, h_l0)?;
        let mut h_f = h_f0;
        let (ef, el) = (&input.edge_flow, &input.edge_link);
        for i in 0..self.config.rounds {
            let (m_l, a1) = self.f2l[i].forward(tape, &self.store, h_f, h_l, ef, el, input.n_links)?;
            h_l = tape.activation(m_l, act);
            let (m_f, a2) = self.l2f[i].forward(tape, &self.store, h_l, h_f, el, ef, input.n_flows)?;
            let upd = tape.activation(m_f, act);
            h_f = match self.config.gru {
                GruPlacement::PerRound => self.gru.forward(tape, &self.store, h_f, upd)?,
                GruPlacement::AfterLoop => upd,
            };
            if let Some(t) = trace.as_deref_mut() {
                t.f2l.push(tape.value(a1).data().to_vec());
                t.l2f.push(tape.value(a2).data().to_vec());
            }
        }
        if self.config.gru == GruPlacement::AfterLoop {
            h_f = self.gru.forward(tape, &self.store, h_f0, h_f)?;
        }
        let per_edge = tape.gather_rows(h_l, el)?;
        let ctx = tape.segment_sum(per_edge, ef, input.n_flows)?;
        let fused = tape.concat_cols(h_f, ctx)?;
        let r = self.readout[0].forward(tape, &self.store, fused)?;
        let r = tape.activation(r, act);
        let r = drop(tape, r)?;
        let out = self.readout[1].forward(tape, &self.store, r)?;
        Ok(tape.activation(out, Activation::Softplus))
    }
}

impl Predictor for BaselineModel {
    fn preprocess(&self) -> &Preprocess {
        &self.preprocess
    }

    fn predict_ms(&self, input: &GraphInput) -> Result<Vec<f64>> {
        eval_forward(self, input)
    }
}

impl Trainable for BaselineModel {
    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn forward(&self, tape: &mut Tape, input: &GraphInput, rng: Option<&mut Rng>) -> Result<Var> {
        self.forward_traced(tape, input, rng, None)
    }

    fn param_count(&self) -> usize {
        BaselineModel::param_count(self)
    }
}

/// Zeroes every parameter in `store`.
pub fn zero_params(store: &mut ParamStore) {
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let shape = store.get(id).shape().to_vec();
        *store.get_mut(id) = Tensor::zeros(&shape);
    }
}
