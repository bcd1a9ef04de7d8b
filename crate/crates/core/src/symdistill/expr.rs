//! Expression trees in prefix form with guarded, total evaluation.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{FlowKanError, Result};

pub const LOG_FLOOR: f64 = 1e-8;
pub const EXP_CLIP: f64 = 50.0;
pub const DIV_GUARD: f64 = 1e-12;
pub const POW_RANGE: (f64, f64) = (-1.0, 2.0);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnaryOp {
    Exp,
    Log,
    Sin,
    Cos,
    Tan,
    Tanh,
    Abs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

impl UnaryOp {
    pub const ALL: [UnaryOp; 7] = [
        UnaryOp::Exp,
        UnaryOp::Log,
        UnaryOp::Sin,
        UnaryOp::Cos,
        UnaryOp::Tan,
        UnaryOp::Tanh,
        UnaryOp::Abs,
    ];

    pub fn name(self) -> &'static str {
        match self {
            UnaryOp::Exp => "exp",
            UnaryOp::Log => "log",
            UnaryOp::Sin => "sin",
            UnaryOp::Cos => "cos",
            UnaryOp::Tan => "tan",
            UnaryOp::Tanh => "tanh",
            UnaryOp::Abs => "abs",
        }
    }

    /// Guarded application; non-finite results become 0.
    pub fn apply(self, x: f64) -> f64 {
        let y = match self {
            UnaryOp::Exp => x.clamp(-EXP_CLIP, EXP_CLIP).exp(),
            UnaryOp::Log => x.max(LOG_FLOOR).ln(),
            UnaryOp::Sin => x.sin(),
            UnaryOp::Cos => x.cos(),
            UnaryOp::Tan => x.tan(),
            UnaryOp::Tanh => x.tanh(),
            UnaryOp::Abs => x.abs(),
        };
        finite_or_zero(y)
    }
}

impl BinaryOp {
    pub const ALL: [BinaryOp; 5] = [BinaryOp::Add, BinaryOp::Sub, BinaryOp::Mul, BinaryOp::Div, BinaryOp::Pow];

    pub fn symbol(self) -> &'static str {
        match self {
            BinaryOp::Add => "+",
            BinaryOp::Sub => "-",
            BinaryOp::Mul => "*",
            BinaryOp::Div => "/",
            BinaryOp::Pow => "^",
        }
    }

    /// Guarded application; non-finite results become 0.
    pub fn apply(self, a: f64, b: f64) -> f64 {
        let y = match self {
            BinaryOp::Add => a + b,
            BinaryOp::Sub => a - b,
            BinaryOp::Mul => a * b,
            BinaryOp::Div => {
                if b.abs() < DIV_GUARD {
                    0.0
                } else {
                    a / b
                }
            }
            BinaryOp::Pow => a.abs().powf(b.clamp(POW_RANGE.0, POW_RANGE.1)),
        };
        finite_or_zero(y)
    }
}

impl FromStr for UnaryOp {
    type Err = FlowKanError;

    fn from_str(s: &str) -> Result<Self> {
        UnaryOp::ALL
            .into_iter()
            .find(|op| op.name() == s)
            .ok_or_else(|| FlowKanError::config(format!("unknown unary operator `{s}`")))
    }
}

impl FromStr for BinaryOp {
    type Err = FlowKanError;

    fn from_str(s: &str) -> Result<Self> {
        let op = match s {
            "+" | "add" => BinaryOp::Add,
            "-" | "sub" => BinaryOp::Sub,
            "*" | "mul" => BinaryOp::Mul,
            "/" | "div" => BinaryOp::Div,
            "^" | "pow" => BinaryOp::Pow,
            _ => return Err(FlowKanError::config(format!("unknown binary operator `{s}`"))),
        };
        Ok(op)
    }
}

fn finite_or_zero(y: f64) -> f64 {
    if y.is_finite() {
        y
    } else {
        0.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Node {
    Var(usize),
    Const(f64),
    Unary(UnaryOp),
    Binary(BinaryOp),
}

impl Node {
    pub fn arity(self) -> usize {
        match self {
            Node::Var(_) | Node::Const(_) => 0,
            Node::Unary(_) => 1,
            Node::Binary(_) => 2,
        }
    }
}

/// An expression stored as its prefix-order node list. Complexity is the
/// node count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Node>", into = "Vec<Node>")]
pub struct Expr {
    nodes: Vec<Node>,
}

impl TryFrom<Vec<Node>> for Expr {
    type Error = FlowKanError;

    fn try_from(nodes: Vec<Node>) -> Result<Self> {
        Expr::from_nodes(nodes)
    }
}

impl From<Expr> for Vec<Node> {
    fn from(e: Expr) -> Self {
        e.nodes
    }
}

impl Expr {
    /// Checks that `nodes` is exactly one well-formed prefix tree.
    pub fn from_nodes(nodes: Vec<Node>) -> Result<Self> {
        let mut open = 1usize;
        for (i, n) in nodes.iter().enumerate() {
            if open == 0 {
                return Err(FlowKanError::parse("expression", format!("trailing nodes after position {i}")));
            }
            open = open - 1 + n.arity();
        }
        if open != 0 || nodes.is_empty() {
            return Err(FlowKanError::parse("expression", "incomplete prefix tree"));
        }
        Ok(Self { nodes })
    }

    pub(crate) fn from_nodes_unchecked(nodes: Vec<Node>) -> Self {
        debug_assert!(Self::from_nodes(nodes.clone()).is_ok());
        Self { nodes }
    }

    pub fn constant(c: f64) -> Self {
        Self { nodes: vec![Node::Const(c)] }
    }

    pub fn var(i: usize) -> Self {
        Self { nodes: vec![Node::Var(i)] }
    }

    pub fn unary(op: UnaryOp, a: Expr) -> Self {
        let mut nodes = vec![Node::Unary(op)];
        nodes.extend(a.nodes);
        Self { nodes }
    }

    pub fn binary(op: BinaryOp, a: Expr, b: Expr) -> Self {
        let mut nodes = vec![Node::Binary(op)];
        nodes.extend(a.nodes);
        nodes.extend(b.nodes);
        Self { nodes }
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub(crate) fn nodes_mut(&mut self) -> &mut [Node] {
        &mut self.nodes
    }

    pub fn complexity(&self) -> usize {
        self.nodes.len()
    }

    pub fn constant_count(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, Node::Const(_))).count()
    }

    /// Largest input slot referenced, if any.
    pub fn max_slot(&self) -> Option<usize> {
        self.nodes
            .iter()
            .filter_map(|n| match n {
                Node::Var(i) => Some(*i),
                _ => None,
            })
            .max()
    }

    pub fn as_constant(&self) -> Option<f64> {
        match self.nodes[..] {
            [Node::Const(c)] => Some(c),
            _ => None,
        }
    }

    /// One past the last node of the subtree rooted at `start`.
    pub fn subtree_end(&self, start: usize) -> usize {
        let mut need = 1usize;
        let mut i = start;
        while need > 0 {
            need = need - 1 + self.nodes[i].arity();
            i += 1;
        }
        i
    }

    pub fn subtree(&self, start: usize) -> Expr {
        Expr {
            nodes: self.nodes[start..self.subtree_end(start)].to_vec(),
        }
    }

    /// A copy with the subtree at `start` replaced by `with`.
    pub fn replace_subtree(&self, start: usize, with: &Expr) -> Expr {
        let end = self.subtree_end(start);
        let mut nodes = Vec::with_capacity(self.nodes.len() - (end - start) + with.nodes.len());
        nodes.extend_from_slice(&self.nodes[..start]);
        nodes.extend_from_slice(&with.nodes);
        nodes.extend_from_slice(&self.nodes[end..]);
        Expr { nodes }
    }

    /// Guarded evaluation at one input vector. Total: the result is always
    /// finite. Slots beyond `inputs` read as 0.
    pub fn eval(&self, inputs: &[f64]) -> f64 {
        let mut stack: Vec<f64> = Vec::with_capacity(self.nodes.len());
        for n in self.nodes.iter().rev() {
            let v = match *n {
                Node::Var(i) => finite_or_zero(inputs.get(i).copied().unwrap_or(0.0)),
                Node::Const(c) => finite_or_zero(c),
                Node::Unary(op) => {
                    let a = stack.pop().expect("well-formed prefix tree");
                    op.apply(a)
                }
                Node::Binary(op) => {
                    let a = stack.pop().expect("well-formed prefix tree");
                    let b = stack.pop().expect("well-formed prefix tree");
                    op.apply(a, b)
                }
            };
            stack.push(v);
        }
        stack[0]
    }

    /// Evaluates on column-major samples: `columns[slot][sample]`.
    pub fn eval_columns(&self, columns: &[Vec<f64>], n: usize) -> Vec<f64> {
        let mut stack: Vec<Vec<f64>> = Vec::with_capacity(4);
        for node in self.nodes.iter().rev() {
            let v = match *node {
                Node::Var(i) => match columns.get(i) {
                    Some(c) => c.iter().map(|&x| finite_or_zero(x)).collect(),
                    None => vec![0.0; n],
                },
                Node::Const(c) => vec![finite_or_zero(c); n],
                Node::Unary(op) => {
                    let mut a = stack.pop().expect("well-formed prefix tree");
                    a.iter_mut().for_each(|x| *x = op.apply(*x));
                    a
                }
                Node::Binary(op) => {
                    let mut a = stack.pop().expect("well-formed prefix tree");
                    let b = stack.pop().expect("well-formed prefix tree");
                    a.iter_mut().zip(&b).for_each(|(x, &y)| *x = op.apply(*x, y));
                    a
                }
            };
            stack.push(v);
        }
        stack.pop().unwrap_or_else(|| vec![0.0; n])
    }

    /// Infix rendering with custom slot names.
    pub fn to_infix(&self, slot_name: &dyn Fn(usize) -> String) -> String {
        let mut pos = 0;
        self.infix_at(&mut pos, slot_name)
    }

    fn infix_at(&self, pos: &mut usize, slot_name: &dyn Fn(usize) -> String) -> String {
        let n = self.nodes[*pos];
        *pos += 1;
        match n {
            Node::Var(i) => slot_name(i),
            Node::Const(c) => format_const(c),
            Node::Unary(op) => format!("{}({})", op.name(), self.infix_at(pos, slot_name)),
            Node::Binary(op) => {
                let a = self.infix_at(pos, slot_name);
                let b = self.infix_at(pos, slot_name);
                format!("({a} {} {b})", op.symbol())
            }
        }
    }
}

fn format_const(c: f64) -> String {
    if c < 0.0 {
        format!("({c})")
    } else {
        format!("{c}")
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_infix(&|i| format!("x{i}")))
    }
}

/// Guarded evaluation of `expr` at `inputs`.
pub fn safe_eval(expr: &Expr, inputs: &[f64]) -> f64 {
    expr.eval(inputs)
}
