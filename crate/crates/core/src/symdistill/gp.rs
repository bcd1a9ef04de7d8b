//! Genetic-programming symbolic regression with parsimony pressure, linear
//! output scaling and coordinate-descent constant refinement.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::expr::{BinaryOp, Expr, Node, UnaryOp};
use crate::error::{FlowKanError, Result};
use crate::rng::Rng;

pub const MAXSIZES: [usize; 5] = [7, 14, 21, 28, 35];
pub const MIN_SAMPLES: usize = 10;

/// Binary menus, from smallest to largest.
pub fn binary_menu(i: usize) -> Vec<BinaryOp> {
    use BinaryOp::*;
    match i {
        0 => vec![Add, Sub, Mul],
        1 => vec![Add, Sub, Mul, Div],
        _ => vec![Add, Sub, Mul, Div, Pow],
    }
}

/// Unary menus. Menu 0 is empty.
pub fn unary_menu(i: usize) -> Vec<UnaryOp> {
    use UnaryOp::*;
    match i {
        0 => vec![],
        1 => vec![Exp, Log, Abs],
        2 => vec![Exp, Log, Tanh, Abs],
        _ => vec![Exp, Log, Tan, Tanh, Abs],
    }
}

pub const BINARY_MENUS: usize = 3;
pub const UNARY_MENUS: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OperatorSet {
    pub binary: Vec<BinaryOp>,
    pub unary: Vec<UnaryOp>,
}

impl OperatorSet {
    pub fn menu(binary: usize, unary: usize) -> Self {
        Self {
            binary: binary_menu(binary),
            unary: unary_menu(unary),
        }
    }

    pub fn arithmetic() -> Self {
        Self::menu(0, 0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GpConfig {
    pub population: usize,
    pub iterations: usize,
    pub tournament: usize,
    pub crossover_rate: f64,
    pub mutation_rate: f64,
    /// Fitness is `mse + parsimony * var(target) * complexity`.
    pub parsimony: f64,
    pub maxsize: usize,
    pub operators: OperatorSet,
    pub elitism: usize,
    /// Fit `a + b * f(x)` by least squares for every candidate `f`.
    pub linear_scaling: bool,
    pub refine_top: usize,
    pub refine_sweeps: usize,
}

impl Default for GpConfig {
    fn default() -> Self {
        Self {
            population: 200,
            iterations: 60,
            tournament: 5,
            crossover_rate: 0.6,
            mutation_rate: 0.35,
            parsimony: 1e-4,
            maxsize: 14,
            operators: OperatorSet::arithmetic(),
            elitism: 4,
            linear_scaling: true,
            refine_top: 5,
            refine_sweeps: 3,
        }
    }
}

impl GpConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(FlowKanError::config(m));
        if !MAXSIZES.contains(&self.maxsize) {
            return bad(format!("maxsize {} not in {MAXSIZES:?}", self.maxsize));
        }
        for (name, r) in [("crossover_rate", self.crossover_rate), ("mutation_rate", self.mutation_rate)] {
            if !(0.0..=1.0).contains(&r) {
                return bad(format!("{name} {r} outside [0, 1]"));
            }
        }
        if self.parsimony.is_nan() || self.parsimony < 0.0 {
            return bad(format!("parsimony {} must be >= 0", self.parsimony));
        }
        if self.population < 2 || self.tournament == 0 || self.elitism >= self.population {
            return bad(format!(
                "population {} / tournament {} / elitism {} invalid",
                self.population, self.tournament, self.elitism
            ));
        }
        if self.operators.binary.is_empty() {
            return bad("at least one binary operator is required".into());
        }
        Ok(())
    }

    fn core_limit(&self) -> usize {
        if self.linear_scaling {
            self.maxsize - 4
        } else {
            self.maxsize
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub expr: Expr,
    pub mse: f64,
    pub complexity: usize,
    pub fitness: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GpResult {
    /// Non-dominated `(mse, complexity)` candidates sorted by MSE, then
    /// complexity.
    pub pareto: Vec<Candidate>,
    /// Lowest fitness among everything seen.
    pub best: Candidate,
}

/// Column-major training data plus target statistics.
struct Data {
    cols: Vec<Vec<f64>>,
    y: Vec<f64>,
    n: usize,
    mean: f64,
    var: f64,
}

impl Data {
    fn mse(&self, pred: &[f64]) -> f64 {
        pred.iter().zip(&self.y).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / self.n as f64
    }
}

#[derive(Clone, Debug)]
struct Individual {
    core: Expr,
    fitness: f64,
}

struct Search<'a> {
    cfg: &'a GpConfig,
    data: &'a Data,
    n_vars: usize,
    penalty: f64,
    /// Best candidate per complexity, index = complexity.
    hall: Vec<Option<Candidate>>,
}

impl<'a> Search<'a> {
    fn fitness(&self, mse: f64, complexity: usize) -> f64 {
        mse + self.penalty * complexity as f64
    }

    fn offer(&mut self, expr: &Expr, mse: f64) {
        let c = expr.complexity();
        if c >= self.hall.len() || !mse.is_finite() {
            return;
        }
        let better = match &self.hall[c] {
            Some(old) => mse < old.mse,
            None => true,
        };
        if better {
            self.hall[c] = Some(Candidate {
                expr: expr.clone(),
                mse,
                complexity: c,
                fitness: self.fitness(mse, c),
            });
        }
    }

    fn evaluate(&mut self, core: Expr) -> Individual {
        let d = self.data;
        let f = core.eval_columns(&d.cols, d.n);
        let shaped = if self.cfg.linear_scaling {
            scaled(&core, &f, d)
        } else {
            core.clone()
        };
        let pred = if shaped == core {
            f
        } else {
            shaped.eval_columns(&d.cols, d.n)
        };
        let mse = d.mse(&pred);
        let mse = if mse.is_finite() { mse } else { f64::MAX };
        self.offer(&shaped, mse);
        Individual {
            fitness: self.fitness(mse, shaped.complexity()),
            core,
        }
    }

    fn leaf(&self, rng: &mut Rng) -> Node {
        if self.n_vars > 0 && rng.random_bool(0.7) {
            Node::Var(rng.random_range(0..self.n_vars))
        } else {
            Node::Const(rng.random_range(-2.0..2.0))
        }
    }

    /// Random tree of at most `budget` nodes and depth `depth`.
    fn grow(&self, rng: &mut Rng, depth: usize, budget: usize, full: bool, out: &mut Vec<Node>) {
        let ops = &self.cfg.operators;
        let can_unary = budget >= 2 && !ops.unary.is_empty();
        let can_binary = budget >= 3;
        if depth == 0 || !(can_unary || can_binary) || (!full && rng.random_bool(0.3)) {
            out.push(self.leaf(rng));
            return;
        }
        let pick_unary = can_unary && (!can_binary || rng.random_bool(0.25));
        if pick_unary {
            out.push(Node::Unary(ops.unary[rng.random_range(0..ops.unary.len())]));
            self.grow(rng, depth - 1, budget - 1, full, out);
        } else {
            out.push(Node::Binary(ops.binary[rng.random_range(0..ops.binary.len())]));
            let before = out.len();
            self.grow(rng, depth - 1, budget - 2, full, out);
            let used = out.len() - before;
            self.grow(rng, depth - 1, budget - 1 - used, full, out);
        }
    }

    fn random_tree(&self, rng: &mut Rng, depth: usize, budget: usize, full: bool) -> Expr {
        let mut nodes = Vec::new();
        self.grow(rng, depth, budget.max(1), full, &mut nodes);
        Expr::from_nodes_unchecked(nodes)
    }

    fn tournament<'p>(&self, pop: &'p [Individual], rng: &mut Rng) -> &'p Individual {
        let mut best = rng.random_range(0..pop.len());
        for _ in 1..self.cfg.tournament {
            let j = rng.random_range(0..pop.len());
            if pop[j].fitness < pop[best].fitness || (pop[j].fitness == pop[best].fitness && j < best) {
                best = j;
            }
        }
        &pop[best]
    }

    fn crossover(&self, a: &Expr, b: &Expr, rng: &mut Rng) -> Expr {
        let limit = self.cfg.core_limit();
        for _ in 0..4 {
            let i = rng.random_range(0..a.complexity());
            let j = rng.random_range(0..b.complexity());
            let child = a.replace_subtree(i, &b.subtree(j));
            if child.complexity() <= limit {
                return child;
            }
        }
        a.clone()
    }

    fn mutate(&self, e: &Expr, rng: &mut Rng) -> Expr {
        let limit = self.cfg.core_limit();
        let ops = &self.cfg.operators;
        let i = rng.random_range(0..e.complexity());
        let child = match rng.random_range(0..5) {
            0 => {
                let free = limit - (e.complexity() - (e.subtree_end(i) - i));
                let t = self.random_tree(rng, 3, free, false);
                e.replace_subtree(i, &t)
            }
            1 => {
                let mut c = e.clone();
                let n = &mut c.nodes_mut()[i];
                *n = match *n {
                    Node::Var(_) | Node::Const(_) => self.leaf(rng),
                    Node::Unary(_) => Node::Unary(ops.unary[rng.random_range(0..ops.unary.len())]),
                    Node::Binary(_) => Node::Binary(ops.binary[rng.random_range(0..ops.binary.len())]),
                };
                c
            }
            2 => {
                let consts: Vec<usize> = (0..e.complexity())
                    .filter(|&k| matches!(e.nodes()[k], Node::Const(_)))
                    .collect();
                let mut c = e.clone();
                if let Some(&k) = consts.get(rng.random_range(0..consts.len().max(1))) {
                    if let Node::Const(v) = &mut c.nodes_mut()[k] {
                        let z: f64 = Normal::new(0.0, 1.0).expect("unit normal").sample(rng);
                        *v = if rng.random_bool(0.5) { *v * (1.0 + 0.2 * z) } else { *v + 0.5 * z };
                    }
                }
                c
            }
            3 => e.subtree(i),
            _ => {
                let sub = e.subtree(i);
                let grown = if !ops.unary.is_empty() && rng.random_bool(0.5) {
                    Expr::unary(ops.unary[rng.random_range(0..ops.unary.len())], sub)
                } else {
                    let op = ops.binary[rng.random_range(0..ops.binary.len())];
                    let leaf = Expr::from_nodes_unchecked(vec![self.leaf(rng)]);
                    if rng.random_bool(0.5) {
                        Expr::binary(op, sub, leaf)
                    } else {
                        Expr::binary(op, leaf, sub)
                    }
                };
                e.replace_subtree(i, &grown)
            }
        };
        if child.complexity() <= limit {
            child
        } else {
            e.clone()
        }
    }

    /// Coordinate descent over the constants of `expr`, multiplicative steps.
    fn refine(&self, expr: &Expr) -> (Expr, f64) {
        const FACTORS: [f64; 10] = [0.5, 0.9, 0.99, 0.999, 0.9999, 1.0001, 1.001, 1.01, 1.1, 2.0];
        let d = self.data;
        let mut best = expr.clone();
        let mut best_mse = d.mse(&best.eval_columns(&d.cols, d.n));
        let slots: Vec<usize> = (0..expr.complexity())
            .filter(|&k| matches!(expr.nodes()[k], Node::Const(_)))
            .collect();
        for _ in 0..self.cfg.refine_sweeps {
            for &k in &slots {
                let Node::Const(c0) = best.nodes()[k] else { continue };
                let mut steps: Vec<f64> = FACTORS.iter().map(|f| c0 * f).collect();
                steps.push(-c0);
                if c0 == 0.0 {
                    steps.extend([-0.1, 0.1]);
                }
                for v in steps {
                    let mut trial = best.clone();
                    trial.nodes_mut()[k] = Node::Const(v);
                    let m = d.mse(&trial.eval_columns(&d.cols, d.n));
                    if m < best_mse {
                        best_mse = m;
                        best = trial;
                    }
                }
            }
        }
        (best, best_mse)
    }

    fn pareto(&self) -> Vec<Candidate> {
        let mut front = Vec::new();
        let mut floor = f64::INFINITY;
        for c in self.hall.iter().flatten() {
            if c.mse < floor {
                floor = c.mse;
                front.push(c.clone());
            }
        }
        front.sort_by(|a, b| a.mse.total_cmp(&b.mse).then(a.complexity.cmp(&b.complexity)));
        front
    }
}

/// `a + b * f`, dropping `a` or `b` when they are negligible.
fn scaled(core: &Expr, f: &[f64], d: &Data) -> Expr {
    let n = d.n as f64;
    let mf = f.iter().sum::<f64>() / n;
    let (mut cov, mut vf) = (0.0, 0.0);
    for (fi, yi) in f.iter().zip(&d.y) {
        cov += (fi - mf) * (yi - d.mean);
        vf += (fi - mf) * (fi - mf);
    }
    if vf.is_nan() || vf <= 1e-24 * n * (1.0 + mf * mf) || !cov.is_finite() {
        return Expr::constant(d.mean);
    }
    let b = cov / vf;
    let a = d.mean - b * mf;
    if !a.is_finite() || !b.is_finite() {
        return Expr::constant(d.mean);
    }
    let tol = 1e-9 * (d.var.sqrt() + d.mean.abs());
    let body = if (b - 1.0).abs() <= 1e-9 {
        core.clone()
    } else {
        Expr::binary(BinaryOp::Mul, Expr::constant(b), core.clone())
    };
    if a.abs() <= tol {
        body
    } else {
        Expr::binary(BinaryOp::Add, Expr::constant(a), body)
    }
}

/// Evolves expressions approximating `target` from `inputs` (one row per
/// sample). Deterministic for a given `rng` state.
pub fn gp_search(inputs: &[Vec<f64>], target: &[f64], cfg: &GpConfig, rng: &mut Rng) -> Result<GpResult> {
    cfg.validate()?;
    let n = target.len();
    if n < MIN_SAMPLES || inputs.len() != n {
        return Err(FlowKanError::contract(format!(
            "symbolic regression needs >= {MIN_SAMPLES} samples with one target each, got {} inputs / {n} targets",
            inputs.len()
        )));
    }
    let n_vars = inputs[0].len();
    if inputs.iter().any(|r| r.len() != n_vars) {
        return Err(FlowKanError::contract("ragged sample rows"));
    }
    if inputs.iter().flatten().chain(target).any(|v| !v.is_finite()) {
        return Err(FlowKanError::contract("samples must be finite"));
    }
    let cols: Vec<Vec<f64>> = (0..n_vars).map(|j| inputs.iter().map(|r| r[j]).collect()).collect();
    let mean = target.iter().sum::<f64>() / n as f64;
    let var = target.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / n as f64;
    let constant = |mse: f64| Candidate {
        expr: Expr::constant(mean),
        mse,
        complexity: 1,
        fitness: mse,
    };
    if var <= 1e-300 || target.iter().all(|&t| t == target[0]) {
        let c = Candidate {
            expr: Expr::constant(target[0]),
            ..constant(0.0)
        };
        return Ok(GpResult {
            pareto: vec![c.clone()],
            best: c,
        });
    }
    let data = Data {
        cols,
        y: target.to_vec(),
        n,
        mean,
        var,
    };
    let mut s = Search {
        cfg,
        data: &data,
        n_vars,
        penalty: cfg.parsimony * var,
        hall: vec![None; cfg.maxsize + 1],
    };
    s.offer(&Expr::constant(mean), var);

    let limit = cfg.core_limit();
    let mut pop: Vec<Individual> = Vec::with_capacity(cfg.population);
    for i in 0..n_vars.min(cfg.population / 2) {
        pop.push(s.evaluate(Expr::var(i)));
    }
    let mut k = 0;
    while pop.len() < cfg.population {
        let depth = 1 + k % 4;
        let t = s.random_tree(rng, depth, limit, k % 2 == 0);
        pop.push(s.evaluate(t));
        k += 1;
    }

    for _ in 0..cfg.iterations {
        let mut order: Vec<usize> = (0..pop.len()).collect();
        order.sort_by(|&a, &b| pop[a].fitness.total_cmp(&pop[b].fitness).then(a.cmp(&b)));
        let mut next: Vec<Individual> = order[..cfg.elitism].iter().map(|&i| pop[i].clone()).collect();
        while next.len() < cfg.population {
            let r: f64 = rng.random();
            let p1 = s.tournament(&pop, rng).core.clone();
            let child = if r < cfg.crossover_rate {
                let p2 = s.tournament(&pop, rng).core.clone();
                s.crossover(&p1, &p2, rng)
            } else if r < cfg.crossover_rate + cfg.mutation_rate {
                s.mutate(&p1, rng)
            } else {
                p1
            };
            next.push(s.evaluate(child));
        }
        pop = next;
    }

    let top: Vec<Candidate> = s.pareto().into_iter().take(cfg.refine_top).collect();
    for c in top {
        if c.expr.constant_count() == 0 {
            continue;
        }
        let (e, m) = s.refine(&c.expr);
        s.offer(&e, m);
    }
    let pareto = s.pareto();
    let best = s
        .hall
        .iter()
        .flatten()
        .min_by(|a, b| a.fitness.total_cmp(&b.fitness).then(a.complexity.cmp(&b.complexity)))
        .cloned()
        .unwrap_or_else(|| constant(var));
    Ok(GpResult { pareto, best })
}
