use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{sigmoid, Activation, Tensor};
use crate::error::{FlowKanError, Result};
use crate::splines::SplineGrid;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named trainable tensors, addressed by [`ParamId`].
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    /// Number of stored trainable scalars.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }
}

/// Gradient map produced by [`Tape::backward`]. Parameters that the loss does
/// not reach are absent and read back as zeros.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    grads: BTreeMap<ParamId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    pub fn get_or_zeros(&self, id: ParamId, like: &Tensor) -> Tensor {
        self.grads
            .get(&id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.shape()))
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.grads.iter().map(|(k, v)| (*k, v))
    }

    pub fn all_finite(&self) -> bool {
        self.grads.values().all(Tensor::all_finite)
    }

    fn accumulate(&mut self, id: ParamId, g: &Tensor) {
        match self.grads.get_mut(&id) {
            Some(acc) => add_assign(acc.data_mut(), g.data()),
            None => {
                self.grads.insert(id, g.clone());
            }
        }
    }
}

#[derive(Clone, Debug)]
struct KanOp {
    x: Var,
    coeffs: Var,
    base: Var,
    scale: Var,
    order: usize,
    /// Per (row, input): index of the first active basis function.
    start: Vec<usize>,
    /// Per (row, input): k+1 active basis values, then k+1 derivatives.
    basis: Vec<f64>,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRows(Var, Var),
    Affine(Var, f64),
    Act(Var, Activation),
    Sigmoid(Var),
    ConcatCols(Var, Var),
    GatherRows(Var, Vec<usize>),
    SegmentSum(Var, Vec<usize>),
    SegmentSoftmax(Var, Vec<usize>),
    Square(Var),
    Sum(Var),
    Mean(Var),
    Kan(Box<KanOp>),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records operations in creation order, which is a topological order.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    nonfinite: usize,
}

fn add_assign(acc: &mut [f64], g: &[f64]) {
    for (a, b) in acc.iter_mut().zip(g) {
        *a += b;
    }
}

fn check_2d(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    if t.shape().len() != 2 {
        return Err(FlowKanError::contract(format!(
            "{what}: expected a 2-D tensor, got shape {:?}",
            t.shape()
        )));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(FlowKanError::contract(format!(
            "{what}: shape {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn segment_count(ids: &[usize]) -> usize {
    ids.iter().max().map_or(0, |m| m + 1)
}

/// Softmax normalized separately over each segment id. Segments need not be
/// contiguous; output order follows input order.
pub fn segmented_softmax(scores: &Tensor, segment_ids: &[usize]) -> Result<Tensor> {
    if scores.len() != segment_ids.len() {
        return Err(FlowKanError::contract(format!(
            "segmented_softmax: {} scores but {} segment ids",
            scores.len(),
            segment_ids.len()
        )));
    }
    let out = softmax_values(scores.data(), segment_ids);
    Tensor::new(scores.shape().to_vec(), out)
}

fn softmax_values(scores: &[f64], ids: &[usize]) -> Vec<f64> {
    let n_seg = segment_count(ids);
    let mut max = vec![f64::NEG_INFINITY; n_seg];
    for (&s, &id) in scores.iter().zip(ids) {
        max[id] = max[id].max(s);
    }
    let mut out: Vec<f64> = scores
        .iter()
        .zip(ids)
        .map(|(&s, &id)| (s - max[id]).exp())
        .collect();
    let mut denom = vec![0.0; n_seg];
    for (&e, &id) in out.iter().zip(ids) {
        denom[id] += e;
    }
    for (e, &id) in out.iter_mut().zip(ids) {
        *e /= denom[id];
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// How many non-finite forward values were replaced by zero so far.
    pub fn nonfinite_replaced(&self) -> usize {
        self.nonfinite
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, mut value: Tensor, op: Op, requires_grad: bool) -> Var {
        for x in value.data_mut() {
            if !x.is_finite() {
                *x = 0.0;
                self.nonfinite += 1;
            }
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.get(id).clone(), Op::Param(id), true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = check_2d(self.value(a), "matmul lhs")?;
        let (k2, m) = check_2d(self.value(b), "matmul rhs")?;
        if k != k2 {
            return Err(FlowKanError::contract(format!(
                "matmul: [{n}, {k}] x [{k2}, {m}]"
            )));
        }
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), n, k, m);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::matrix(n, m, out), Op::MatMul(a, b), rg))
    }

    fn zip_op(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        same_shape(self.value(a), self.value(b), what)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a `[1, m]` row to every row of an `[n, m]` tensor.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (n, m) = check_2d(self.value(a), "add_row lhs")?;
        let r = self.value(row);
        if r.len() != m {
            return Err(FlowKanError::contract(format!(
                "add_row: row of {} values for width {m}",
                r.len()
            )));
        }
        let mut out = self.value(a).data().to_vec();
        for chunk in out.chunks_mut(m.max(1)) {
            add_assign(chunk, r.data());
        }
        let rg = self.rg(&[a, row]);
        Ok(self.push(Tensor::matrix(n, m, out), Op::AddRow(a, row), rg))
    }

    /// Scales row `e` of `[n, m]` tensor `a` by `w[e]` where `w` is `[n, 1]`.
    pub fn mul_rows(&mut self, a: Var, w: Var) -> Result<Var> {
        let (n, m) = check_2d(self.value(a), "mul_rows lhs")?;
        if self.value(w).len() != n {
            return Err(FlowKanError::contract(format!(
                "mul_rows: {} weights for {n} rows",
                self.value(w).len()
            )));
        }
        let wd = self.value(w).data();
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x * wd[i / m.max(1)])
            .collect();
        let rg = self.rg(&[a, w]);
        Ok(self.push(Tensor::matrix(n, m, out), Op::MulRows(a, w), rg))
    }

    /// `scale * a + shift`.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let t = self.value(a).map(|x| scale * x + shift);
        let rg = self.rg(&[a]);
        self.push(t, Op::Affine(a, scale), rg)
    }

    pub fn activation(&mut self, a: Var, act: Activation) -> Var {
        let t = self.value(a).map(|x| act.apply(x));
        let rg = self.rg(&[a]);
        self.push(t, Op::Act(a, act), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.value(a).map(sigmoid);
        let rg = self.rg(&[a]);
        self.push(t, Op::Sigmoid(a), rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x * x);
        let rg = self.rg(&[a]);
        self.push(t, Op::Square(a), rg)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, ma) = check_2d(self.value(a), "concat lhs")?;
        let (n2, mb) = check_2d(self.value(b), "concat rhs")?;
        if n != n2 {
            return Err(FlowKanError::contract(format!(
                "concat_cols: {n} rows vs {n2} rows"
            )));
        }
        let mut out = Vec::with_capacity(n * (ma + mb));
        for r in 0..n {
            out.extend_from_slice(self.value(a).row(r));
            out.extend_from_slice(self.value(b).row(r));
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::matrix(n, ma + mb, out), Op::ConcatCols(a, b), rg))
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (n, m) = check_2d(self.value(a), "gather_rows")?;
        let mut out = Vec::with_capacity(idx.len() * m);
        for &i in idx {
            if i >= n {
                return Err(FlowKanError::contract(format!(
                    "gather_rows: index {i} out of {n} rows"
                )));
            }
            out.extend_from_slice(self.value(a).row(i));
        }
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor::matrix(idx.len(), m, out),
            Op::GatherRows(a, idx.to_vec()),
            rg,
        ))
    }

    /// Sums rows of `a` into `n_out` buckets given by `seg`.
    pub fn segment_sum(&mut self, a: Var, seg: &[usize], n_out: usize) -> Result<Var> {
        let (n, m) = check_2d(self.value(a), "segment_sum")?;
        if seg.len() != n || seg.iter().any(|&s| s >= n_out) {
            return Err(FlowKanError::contract(format!(
                "segment_sum: {} ids for {n} rows into {n_out} segments",
                seg.len()
            )));
        }
        let mut out = vec![0.0; n_out * m];
        for (r, &s) in seg.iter().enumerate() {
            add_assign(&mut out[s * m..(s + 1) * m], self.value(a).row(r));
        }
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor::matrix(n_out, m, out),
            Op::SegmentSum(a, seg.to_vec()),
            rg,
        ))
    }

    pub fn segment_softmax(&mut self, scores: Var, seg: &[usize]) -> Result<Var> {
        let t = segmented_softmax(self.value(scores), seg)?;
        let rg = self.rg(&[scores]);
        Ok(self.push(t, Op::SegmentSoftmax(scores, seg.to_vec()), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(FlowKanError::contract("mean of an empty tensor"));
        }
        let s = self.value(a).sum() / n as f64;
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::scalar(s), Op::Mean(a), rg))
    }

    /// Mean squared error against a constant target of the same shape.
    pub fn mse(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        let t = self.constant(target.clone());
        let d = self.sub(pred, t)?;
        let sq = self.square(d);
        self.mean(sq)
    }

    /// Fused spline-operator layer:
    /// `y[n,o] = sum_i base[o,i] * silu(x[n,i]) + scale[o,i] * sum_c coeffs[o,i,c] * B_c(x[n,i])`.
    pub fn kan(&mut self, x: Var, coeffs: Var, base: Var, scale: Var, grid: &SplineGrid) -> Result<Var> {
        let (n, in_dim) = check_2d(self.value(x), "kan input")?;
        let cshape = self.value(coeffs).shape().to_vec();
        let nb = grid.basis_len();
        if cshape.len() != 3 || cshape[1] != in_dim || cshape[2] != nb {
            return Err(FlowKanError::contract(format!(
                "kan: input width {in_dim} incompatible with coefficient shape {cshape:?} (basis {nb})"
            )));
        }
        let out_dim = cshape[0];
        for (v, what) in [(base, "base weight"), (scale, "spline scale")] {
            if self.value(v).shape() != [out_dim, in_dim] {
                return Err(FlowKanError::contract(format!(
                    "kan: {what} shape {:?}, expected [{out_dim}, {in_dim}]",
                    self.value(v).shape()
                )));
            }
        }
        let order = grid.order();
        let w = order + 1;
        let mut start = vec![0usize; n * in_dim];
        let mut basis = vec![0.0; n * in_dim * 2 * w];
        let mut silu_x = vec![0.0; n * in_dim];
        let xd = self.value(x).data();
        for r in 0..n {
            for i in 0..in_dim {
                let ri = r * in_dim + i;
                let (vals, ders) = basis[ri * 2 * w..(ri + 1) * 2 * w].split_at_mut(w);
                start[ri] = grid.active_basis(xd[ri], vals, ders);
                silu_x[ri] = super::silu(xd[ri]);
            }
        }
        let cd = self.value(coeffs).data();
        let bd = self.value(base).data();
        let sd = self.value(scale).data();
        let mut out = vec![0.0; n * out_dim];
        for r in 0..n {
            for o in 0..out_dim {
                let mut acc = 0.0;
                for i in 0..in_dim {
                    let ri = r * in_dim + i;
                    let oi = o * in_dim + i;
                    let vals = &basis[ri * 2 * w..ri * 2 * w + w];
                    let c = &cd[oi * nb + start[ri]..oi * nb + start[ri] + w];
                    let spline: f64 = c.iter().zip(vals).map(|(a, b)| a * b).sum();
                    acc += bd[oi] * silu_x[ri] + sd[oi] * spline;
                }
                out[r * out_dim + o] = acc;
            }
        }
        let rg = self.rg(&[x, coeffs, base, scale]);
        let op = Op::Kan(Box::new(KanOp {
            x,
            coeffs,
            base,
            scale,
            order,
            start,
            basis,
        }));
        Ok(self.push(Tensor::matrix(n, out_dim, out), op, rg))
    }

    /// Reverse pass from a scalar loss. The tape is left untouched, so
    /// repeated calls return identical gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(FlowKanError::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        let mut out = Gradients::default();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let mut send = |v: Var, contrib: Tensor| {
                if !self.nodes[v.0].requires_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(acc) => add_assign(acc.data_mut(), contrib.data()),
                    slot @ None => *slot = Some(contrib),
                }
            };
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => out.accumulate(*id, &g),
                Op::MatMul(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    let (n, k) = (av.shape()[0], av.shape()[1]);
                    let m = bv.shape()[1];
                    if self.nodes[a.0].requires_grad {
                        let bt = transpose(bv.data(), k, m);
                        send(*a, Tensor::matrix(n, k, matmul_raw(g.data(), &bt, n, m, k)));
                    }
                    if self.nodes[b.0].requires_grad {
                        let at = transpose(av.data(), n, k);
                        send(*b, Tensor::matrix(k, m, matmul_raw(&at, g.data(), k, n, m)));
                    }
                }
                Op::Add(a, b) => {
                    send(*a, g.clone());
                    send(*b, g);
                }
                Op::Sub(a, b) => {
                    send(*a, g.clone());
                    send(*b, g.map(|x| -x));
                }
                Op::Mul(a, b) => {
                    let ga = zip(&g, self.value(*b), |x, y| x * y);
                    let gb = zip(&g, self.value(*a), |x, y| x * y);
                    send(*a, ga);
                    send(*b, gb);
                }
                Op::AddRow(a, row) => {
                    let m = self.value(*row).len();
                    let mut gr = vec![0.0; m];
                    for chunk in g.data().chunks(m.max(1)) {
                        add_assign(&mut gr, chunk);
                    }
                    send(*row, Tensor::new(self.value(*row).shape().to_vec(), gr).unwrap());
                    send(*a, g);
                }
                Op::MulRows(a, w) => {
                    let av = self.value(*a);
                    let wv = self.value(*w);
                    let m = av.cols().max(1);
                    let ga: Vec<f64> = g
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(i, &x)| x * wv.data()[i / m])
                        .collect();
                    let mut gw = vec![0.0; wv.len()];
                    for (i, (&x, &y)) in g.data().iter().zip(av.data()).enumerate() {
                        gw[i / m] += x * y;
                    }
                    send(*a, Tensor::new(av.shape().to_vec(), ga).unwrap());
                    send(*w, Tensor::new(wv.shape().to_vec(), gw).unwrap());
                }
                Op::Affine(a, s) => send(*a, g.map(|x| x * s)),
                Op::Act(a, act) => {
                    let ga = zip(&g, self.value(*a), |x, y| x * act.derivative(y));
                    send(*a, ga);
                }
                Op::Sigmoid(a) => {
                    let ga = zip(&g, &node.value, |x, s| x * s * (1.0 - s));
                    send(*a, ga);
                }
                Op::Square(a) => {
                    let ga = zip(&g, self.value(*a), |x, y| 2.0 * x * y);
                    send(*a, ga);
                }
                Op::ConcatCols(a, b) => {
                    let ma = self.value(*a).cols();
                    let mb = self.value(*b).cols();
                    let n = g.rows();
                    let mut ga = Vec::with_capacity(n * ma);
                    let mut gb = Vec::with_capacity(n * mb);
                    for r in 0..n {
                        let row = g.row(r);
                        ga.extend_from_slice(&row[..ma]);
                        gb.extend_from_slice(&row[ma..]);
                    }
                    send(*a, Tensor::matrix(n, ma, ga));
                    send(*b, Tensor::matrix(n, mb, gb));
                }
                Op::GatherRows(a, idx) => {
                    let av = self.value(*a);
                    let m = av.cols();
                    let mut ga = vec![0.0; av.len()];
                    for (e, &i) in idx.iter().enumerate() {
                        add_assign(&mut ga[i * m..(i + 1) * m], g.row(e));
                    }
                    send(*a, Tensor::new(av.shape().to_vec(), ga).unwrap());
                }
                Op::SegmentSum(a, seg) => {
                    let av = self.value(*a);
                    let mut ga = Vec::with_capacity(av.len());
                    for &s in seg {
                        ga.extend_from_slice(g.row(s));
                    }
                    send(*a, Tensor::new(av.shape().to_vec(), ga).unwrap());
                }
                Op::SegmentSoftmax(a, seg) => {
                    let y = node.value.data();
                    let mut dot = vec![0.0; segment_count(seg)];
                    for ((&yi, &gi), &s) in y.iter().zip(g.data()).zip(seg) {
                        dot[s] += yi * gi;
                    }
                    let ga: Vec<f64> = y
                        .iter()
                        .zip(g.data())
                        .zip(seg)
                        .map(|((&yi, &gi), &s)| yi * (gi - dot[s]))
                        .collect();
                    send(*a, Tensor::new(node.value.shape().to_vec(), ga).unwrap());
                }
                Op::Sum(a) => {
                    let gv = g.item();
                    send(*a, Tensor::full(self.value(*a).shape(), gv));
                }
                Op::Mean(a) => {
                    let n = self.value(*a).len() as f64;
                    let gv = g.item() / n;
                    send(*a, Tensor::full(self.value(*a).shape(), gv));
                }
                Op::Kan(k) => {
                    let (gx, gc, gb, gs) = self.kan_backward(k, &g);
                    send(k.x, gx);
                    send(k.coeffs, gc);
                    send(k.base, gb);
                    send(k.scale, gs);
                }
            }
        }
        Ok(out)
    }

    fn kan_backward(&self, k: &KanOp, g: &Tensor) -> (Tensor, Tensor, Tensor, Tensor) {
        let xv = self.value(k.x);
        let cv = self.value(k.coeffs);
        let bv = self.value(k.base);
        let sv = self.value(k.scale);
        let (n, in_dim) = (xv.shape()[0], xv.shape()[1]);
        let out_dim = cv.shape()[0];
        let nb = cv.shape()[2];
        let w = k.order + 1;
        let (cd, bd, sd, xd) = (cv.data(), bv.data(), sv.data(), xv.data());

        let mut gx = vec![0.0; xv.len()];
        let mut gc = vec![0.0; cv.len()];
        let mut gb = vec![0.0; bv.len()];
        let mut gs = vec![0.0; sv.len()];
        for r in 0..n {
            for i in 0..in_dim {
                let ri = r * in_dim + i;
                let vals = &k.basis[ri * 2 * w..ri * 2 * w + w];
                let ders = &k.basis[ri * 2 * w + w..(ri + 1) * 2 * w];
                let st = k.start[ri];
                let x = xd[ri];
                let sx = super::silu(x);
                let dsx = super::silu_derivative(x);
                let mut gxi = 0.0;
                for o in 0..out_dim {
                    let go = g.data()[r * out_dim + o];
                    if go == 0.0 {
                        continue;
                    }
                    let oi = o * in_dim + i;
                    let c = &cd[oi * nb + st..oi * nb + st + w];
                    let mut spline = 0.0;
                    let mut dspline = 0.0;
                    for j in 0..w {
                        spline += c[j] * vals[j];
                        dspline += c[j] * ders[j];
                        gc[oi * nb + st + j] += go * sd[oi] * vals[j];
                    }
                    gb[oi] += go * sx;
                    gs[oi] += go * spline;
                    gxi += go * (bd[oi] * dsx + sd[oi] * dspline);
                }
                gx[ri] = gxi;
            }
        }
        (
            Tensor::new(xv.shape().to_vec(), gx).unwrap(),
            Tensor::new(cv.shape().to_vec(), gc).unwrap(),
            Tensor::new(bv.shape().to_vec(), gb).unwrap(),
            Tensor::new(sv.shape().to_vec(), gs).unwrap(),
        )
    }
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).unwrap()
}

fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = a[r * cols + c];
        }
    }
    t
}

fn matmul_raw(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for r in 0..n {
        let orow = &mut out[r * m..(r + 1) * m];
        for (j, &av) in a[r * k..(r + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in orow.iter_mut().zip(&b[j * m..(j + 1) * m]) {
                *o += av * bv;
            }
        }
    }
    out
}
