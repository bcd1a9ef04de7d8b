use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{FlowKanError, Result};
use crate::rng::Rng;

fn uniform(rng: &mut Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Affine layer `x W + b` with `W: [in, out]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Dense {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, bias: bool, rng: &mut Rng) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), uniform(rng, &[in_dim, out_dim], bound));
        let bias = bias.then(|| store.add(format!("{name}.bias"), uniform(rng, &[1, out_dim], bound)));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let y = tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let bv = tape.param(store, b);
                tape.add_row(y, bv)
            }
            None => Ok(y),
        }
    }
}

/// Gated recurrent unit: `h' = (1 - z) * h + z * n` with
/// `z = sigmoid(x Wz + h Uz + bz)`, `r = sigmoid(x Wr + h Ur + br)` and
/// `n = tanh(x Wn + (r * h) Un + bn)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GruCell {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub w: [ParamId; 3],
    pub u: [ParamId; 3],
    pub b: [ParamId; 3],
}

impl GruCell {
    pub fn new(store: &mut ParamStore, name: &str, input_dim: usize, hidden_dim: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (hidden_dim as f64).sqrt();
        let mut mk = |gate: &str, part: &str, shape: &[usize]| {
            store.add(format!("{name}.{part}_{gate}"), uniform(rng, shape, bound))
        };
        let mut w = [ParamId(0); 3];
        let mut u = [ParamId(0); 3];
        let mut b = [ParamId(0); 3];
        for (g, gate) in ["z", "r", "n"].iter().enumerate() {
            w[g] = mk(gate, "w", &[input_dim, hidden_dim]);
            u[g] = mk(gate, "u", &[hidden_dim, hidden_dim]);
            b[g] = mk(gate, "b", &[1, hidden_dim]);
        }
        Self {
            input_dim,
            hidden_dim,
            w,
            u,
            b,
        }
    }

    pub fn param_count(&self) -> usize {
        3 * (self.input_dim * self.hidden_dim + self.hidden_dim * self.hidden_dim + self.hidden_dim)
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, h_prev: Var, x: Var) -> Result<Var> {
        let hs = tape.value(h_prev).shape().to_vec();
        let xs = tape.value(x).shape().to_vec();
        if hs.len() != 2 || hs[1] != self.hidden_dim || xs.len() != 2 || xs[1] != self.input_dim || hs[0] != xs[0] {
            return Err(FlowKanError::contract(format!(
                "gru: h {hs:?} / x {xs:?} for input width {} hidden width {}",
                self.input_dim, self.hidden_dim
            )));
        }
        let pre = |tape: &mut Tape, g: usize, h: Var| -> Result<Var> {
            let w = tape.param(store, self.w[g]);
            let u = tape.param(store, self.u[g]);
            let b = tape.param(store, self.b[g]);
            let xw = tape.matmul(x, w)?;
            let hu = tape.matmul(h, u)?;
            let s = tape.add(xw, hu)?;
            tape.add_row(s, b)
        };
        let zp = pre(tape, 0, h_prev)?;
        let z = tape.sigmoid(zp);
        let rp = pre(tape, 1, h_prev)?;
        let r = tape.sigmoid(rp);
        let rh = tape.mul(r, h_prev)?;
        let np = pre(tape, 2, rh)?;
        let n = tape.activation(np, super::Activation::Tanh);
        let keep = tape.affine(z, -1.0, 1.0);
        let a = tape.mul(keep, h_prev)?;
        let c = tape.mul(z, n)?;
        tape.add(a, c)
    }
}

/// Inverted-dropout mask: entries are `0` or `1 / (1 - p)`.
pub fn dropout_mask(shape: &[usize], p: f64, rng: &mut Rng) -> Result<Tensor> {
    if !(0.0..1.0).contains(&p) {
        return Err(FlowKanError::config(format!("dropout probability {p} outside [0, 1)")));
    }
    let keep = 1.0 / (1.0 - p);
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
        .collect();
    Tensor::new(shape.to_vec(), data)
}

/// Identity at inference or when `p == 0`; otherwise multiplies by a fresh mask.
pub fn dropout(tape: &mut Tape, x: Var, p: f64, training: bool, rng: &mut Rng) -> Result<Var> {
    if !(0.0..1.0).contains(&p) {
        return Err(FlowKanError::config(format!("dropout probability {p} outside [0, 1)")));
    }
    if !training || p == 0.0 {
        return Ok(x);
    }
    let mask = dropout_mask(tape.value(x).shape(), p, rng)?;
    let m = tape.constant(mask);
    tape.mul(x, m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn zero_gru(input: usize, hidden: usize) -> (ParamStore, GruCell) {
        let mut store = ParamStore::new();
        let cell = GruCell::new(&mut store, "gru", input, hidden, &mut seeded(0));
        for id in store.ids().collect::<Vec<_>>() {
            store.get_mut(id).data_mut().fill(0.0);
        }
        (store, cell)
    }

    #[test]
    fn zero_params_halve_state() {
        let (store, cell) = zero_gru(2, 3);
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::matrix(1, 3, vec![1.0, -2.0, 4.0]));
        let x = tape.constant(Tensor::matrix(1, 2, vec![0.7, 0.3]));
        let out = cell.forward(&mut tape, &store, h, x).unwrap();
        assert_eq!(tape.value(out).data(), &[0.5, -1.0, 2.0]);
    }

    #[test]
    fn zero_state_zero_input_zero_bias() {
        let mut store = ParamStore::new();
        let cell = GruCell::new(&mut store, "gru", 2, 3, &mut seeded(4));
        for b in cell.b {
            store.get_mut(b).data_mut().fill(0.0);
        }
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::zeros(&[1, 3]));
        let x = tape.constant(Tensor::zeros(&[1, 2]));
        let out = cell.forward(&mut tape, &store, h, x).unwrap();
        assert!(tape.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gru_width_mismatch() {
        let (store, cell) = zero_gru(2, 3);
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::zeros(&[1, 4]));
        let x = tape.constant(Tensor::zeros(&[1, 2]));
        assert!(matches!(
            cell.forward(&mut tape, &store, h, x),
            Err(FlowKanError::Contract(_))
        ));
    }

    #[test]
    fn dropout_modes() {
        let mut rng = seeded(1);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]));
        assert_eq!(dropout(&mut tape, x, 0.0, true, &mut rng).unwrap(), x);
        assert_eq!(dropout(&mut tape, x, 0.9, false, &mut rng).unwrap(), x);
        assert!(matches!(
            dropout(&mut tape, x, 1.0, true, &mut rng),
            Err(FlowKanError::Config(_))
        ));
    }

    #[test]
    fn dropout_preserves_mean() {
        let mut rng = seeded(11);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 10_000], 3.0));
        let y = dropout(&mut tape, x, 0.5, true, &mut rng).unwrap();
        let mean = tape.value(y).sum() / 10_000.0;
        assert!((mean - 3.0).abs() / 3.0 < 0.02, "mean {mean}");
    }
}
