//! B-spline bases on uniform grids and the spline-operator (KAN) layer.
//!
//! A layer maps `x: [n, in]` to `y: [n, out]` with
//!
//! ```text
//! y[o] = sum_i base[o,i] * silu(x[i]) + scale[o,i] * sum_c coeffs[o,i,c] * B_c(x[i])
//! ```
//!
//! where `B_c` are the `G + k` degree-`k` B-splines of a uniform grid with `G`
//! intervals on `[lo, hi]`, extended by `k` knots past each end. Inputs are
//! clamped into `[lo, hi]` before the basis is evaluated; the silu path sees the
//! raw input.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{FlowKanError, Result};
use crate::rng::Rng;
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplineGrid {
    lo: f64,
    hi: f64,
    grid_size: usize,
    order: usize,
    knots: Vec<f64>,
}

impl SplineGrid {
    pub fn new(lo: f64, hi: f64, grid_size: usize, order: usize) -> Result<Self> {
        if order == 0 {
            return Err(FlowKanError::config(
                "spline order must be >= 1 (use SplineGrid::piecewise_constant for order 0)",
            ));
        }
        Self::build(lo, hi, grid_size, order)
    }

    /// Order-0 grid: the basis is the interval indicator.
    pub fn piecewise_constant(lo: f64, hi: f64, grid_size: usize) -> Result<Self> {
        Self::build(lo, hi, grid_size, 0)
    }

    fn build(lo: f64, hi: f64, grid_size: usize, order: usize) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(FlowKanError::config(format!("invalid spline domain [{lo}, {hi}]")));
        }
        if grid_size == 0 {
            return Err(FlowKanError::config("spline grid size must be >= 1"));
        }
        let h = (hi - lo) / grid_size as f64;
        let knots = (0..grid_size + 2 * order + 1)
            .map(|j| lo + (j as f64 - order as f64) * h)
            .collect();
        Ok(Self {
            lo,
            hi,
            grid_size,
            order,
            knots,
        })
    }

    pub fn lo(&self) -> f64 {
        self.lo
    }

    pub fn hi(&self) -> f64 {
        self.hi
    }

    pub fn grid_size(&self) -> usize {
        self.grid_size
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    /// Number of basis functions, `G + k`.
    pub fn basis_len(&self) -> usize {
        self.grid_size + self.order
    }

    fn step(&self) -> f64 {
        (self.hi - self.lo) / self.grid_size as f64
    }

    /// Evaluates the `k + 1` basis functions that can be nonzero at `x` and
    /// their derivatives. Returns the index of the first one. Derivatives are
    /// zero outside the domain, where the clamp makes the spline constant.
    pub fn active_basis(&self, x: f64, vals: &mut [f64], ders: &mut [f64]) -> usize {
        let k = self.order;
        debug_assert!(vals.len() == k + 1 && ders.len() == k + 1);
        let inside = (self.lo..=self.hi).contains(&x);
        let xc = if x.is_nan() { self.lo } else { x.clamp(self.lo, self.hi) };
        let h = self.step();
        let cell = (((xc - self.lo) / h).floor() as usize).min(self.grid_size - 1);
        let span = cell + k;
        let t = &self.knots;

        // Cox-de Boor triangle, keeping the degree k-1 row for derivatives.
        vals.fill(0.0);
        vals[0] = 1.0;
        let mut lower = vec![0.0; k + 1];
        for d in 1..=k {
            if d == k {
                lower[..k].copy_from_slice(&vals[..k]);
            }
            let mut saved = 0.0;
            for r in 0..d {
                let right = t[span + r + 1] - xc;
                let left = xc - t[span + 1 + r - d];
                let temp = vals[r] / (right + left);
                vals[r] = saved + right * temp;
                saved = left * temp;
            }
            vals[d] = saved;
        }

        ders.fill(0.0);
        if k >= 1 && inside {
            // lower[j] is N_{span-k+1+j, k-1}; uniform spacing makes every
            // denominator k*h.
            for (j, d) in ders.iter_mut().enumerate() {
                let left = if j >= 1 { lower[j - 1] } else { 0.0 };
                let right = if j < k { lower[j] } else { 0.0 };
                *d = (left - right) / h;
            }
        }
        span - k
    }
}

/// All `G + k` basis values at `x` (clamped to the grid domain).
pub fn bspline_basis(x: f64, grid: &SplineGrid) -> Vec<f64> {
    let w = grid.order() + 1;
    let mut vals = vec![0.0; w];
    let mut ders = vec![0.0; w];
    let start = grid.active_basis(x, &mut vals, &mut ders);
    let mut out = vec![0.0; grid.basis_len()];
    out[start..start + w].copy_from_slice(&vals);
    out
}

/// Grid size, order and initialization scale for one block.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplineSpec {
    pub grid_size: usize,
    pub order: usize,
    pub sigma: f64,
}

impl SplineSpec {
    pub const fn new(grid_size: usize, order: usize, sigma: f64) -> Self {
        Self {
            grid_size,
            order,
            sigma,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KanLayer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub grid: SplineGrid,
    pub sigma: f64,
    /// `[out, in, G + k]`
    pub coeffs: ParamId,
    /// `[out, in]`
    pub base_weight: ParamId,
    /// `[out, in]`
    pub spline_scale: ParamId,
}

impl KanLayer {
    /// Registers a freshly initialized layer in `store`.
    ///
    /// Spline coefficients are drawn from `N(0, (sigma / sqrt(G + k))^2)`, base
    /// weights from `N(0, 1 / in)`, and spline scales start at one.
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        grid: SplineGrid,
        sigma: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(FlowKanError::config(format!(
                "kan layer `{name}` needs positive widths, got {in_dim}->{out_dim}"
            )));
        }
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(FlowKanError::config(format!("kan layer `{name}`: bad sigma {sigma}")));
        }
        let nb = grid.basis_len();
        let coeff_std = sigma / (nb as f64).sqrt();
        let coeffs: Vec<f64> = if coeff_std == 0.0 {
            vec![0.0; out_dim * in_dim * nb]
        } else {
            let normal = Normal::new(0.0, coeff_std).expect("finite std");
            (0..out_dim * in_dim * nb).map(|_| normal.sample(rng)).collect()
        };
        let base_normal = Normal::new(0.0, 1.0 / (in_dim as f64).sqrt()).expect("finite std");
        let base: Vec<f64> = (0..out_dim * in_dim).map(|_| base_normal.sample(rng)).collect();

        let coeffs = store.add(
            format!("{name}.coeffs"),
            Tensor::new(vec![out_dim, in_dim, nb], coeffs)?,
        );
        let base_weight = store.add(format!("{name}.base_weight"), Tensor::matrix(out_dim, in_dim, base));
        let spline_scale = store.add(format!("{name}.spline_scale"), Tensor::full(&[out_dim, in_dim], 1.0));
        Ok(Self {
            in_dim,
            out_dim,
            grid,
            sigma,
            coeffs,
            base_weight,
            spline_scale,
        })
    }

    pub fn from_spec(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        domain: (f64, f64),
        spec: SplineSpec,
        rng: &mut Rng,
    ) -> Result<Self> {
        let grid = SplineGrid::new(domain.0, domain.1, spec.grid_size, spec.order)?;
        Self::init(store, name, in_dim, out_dim, grid, spec.sigma, rng)
    }

    /// `out * in * (G + k + 2)`.
    pub fn param_count(&self) -> usize {
        self.out_dim * self.in_dim * (self.grid.basis_len() + 2)
    }

    pub fn param_ids(&self) -> [ParamId; 3] {
        [self.coeffs, self.base_weight, self.spline_scale]
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let width = tape.value(x).shape().get(1).copied();
        if width != Some(self.in_dim) {
            return Err(FlowKanError::contract(format!(
                "kan layer expects width {}, got shape {:?}",
                self.in_dim,
                tape.value(x).shape()
            )));
        }
        let c = tape.param(store, self.coeffs);
        let b = tape.param(store, self.base_weight);
        let s = tape.param(store, self.spline_scale);
        tape.kan(x, c, b, s, &self.grid)
    }

    /// Forward pass on plain values, without keeping a tape around.
    pub fn eval(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = self.forward(&mut tape, store, xv)?;
        Ok(tape.value(y).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use crate::tensor::silu;

    /// Textbook recursion over the full knot vector, half-open intervals, with
    /// the right domain end folded into the last interval.
    fn cox_de_boor(t: &[f64], i: usize, k: usize, x: f64, hi: f64, last_cell: usize) -> f64 {
        if k == 0 {
            let hit = if x == hi {
                i == last_cell
            } else {
                t[i] <= x && x < t[i + 1]
            };
            return if hit { 1.0 } else { 0.0 };
        }
        let mut v = 0.0;
        let d1 = t[i + k] - t[i];
        if d1 > 0.0 {
            v += (x - t[i]) / d1 * cox_de_boor(t, i, k - 1, x, hi, last_cell);
        }
        let d2 = t[i + k + 1] - t[i + 1];
        if d2 > 0.0 {
            v += (t[i + k + 1] - x) / d2 * cox_de_boor(t, i + 1, k - 1, x, hi, last_cell);
        }
        v
    }

    fn oracle_basis(grid: &SplineGrid, x: f64) -> Vec<f64> {
        let xc = x.clamp(grid.lo(), grid.hi());
        let last_cell = grid.grid_size() + grid.order() - 1;
        (0..grid.basis_len())
            .map(|i| cox_de_boor(grid.knots(), i, grid.order(), xc, grid.hi(), last_cell))
            .collect()
    }

    #[test]
    fn order_zero_is_indicator() {
        let g = SplineGrid::piecewise_constant(0.0, 4.0, 4).unwrap();
        assert_eq!(bspline_basis(2.5, &g), vec![0.0, 0.0, 1.0, 0.0]);
        assert_eq!(bspline_basis(4.0, &g), vec![0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn matches_independent_recursion() {
        let g = SplineGrid::new(-1.0, 1.0, 5, 3).unwrap();
        let got = bspline_basis(0.0, &g);
        let want = oracle_basis(&g, 0.0);
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-14, "{got:?} vs {want:?}");
        }
        for grid_size in 1..=7 {
            for order in 1..=5 {
                let g = SplineGrid::new(-2.0, 2.0, grid_size, order).unwrap();
                for &x in &[-2.0, -1.3, -0.01, 0.0, 0.77, 1.999, 2.0, 3.5] {
                    let got = bspline_basis(x, &g);
                    let want = oracle_basis(&g, x);
                    for (a, b) in got.iter().zip(&want) {
                        assert!((a - b).abs() < 1e-12, "G={grid_size} k={order} x={x}");
                    }
                }
            }
        }
    }

    #[test]
    fn basis_derivative_matches_finite_difference() {
        let g = SplineGrid::new(-1.0, 1.5, 6, 4).unwrap();
        let w = g.order() + 1;
        let (mut v, mut d) = (vec![0.0; w], vec![0.0; w]);
        for &x in &[-0.93, -0.21, 0.33, 1.12] {
            let start = g.active_basis(x, &mut v, &mut d);
            let h = 1e-6;
            let up = bspline_basis(x + h, &g);
            let dn = bspline_basis(x - h, &g);
            for j in 0..w {
                let fd = (up[start + j] - dn[start + j]) / (2.0 * h);
                assert!((fd - d[j]).abs() < 1e-6, "x={x} j={j}: {fd} vs {}", d[j]);
            }
        }
    }

    #[test]
    fn param_count_formula() {
        let mut store = ParamStore::new();
        let mut rng = seeded(0);
        let tiny = KanLayer::from_spec(&mut store, "t", 1, 1, (-1.0, 1.0), SplineSpec::new(1, 1, 0.1), &mut rng).unwrap();
        assert_eq!(tiny.param_count(), 4);
        let flow_init =
            KanLayer::from_spec(&mut store, "f", 16, 8, (-1.0, 1.5), SplineSpec::new(9, 3, 0.93), &mut rng).unwrap();
        assert_eq!(flow_init.param_count(), 1792);
        let stored: usize = flow_init.param_ids().iter().map(|&id| store.get(id).len()).sum();
        assert_eq!(stored, 1792);
    }

    #[test]
    fn zero_sigma_gives_zero_coefficients() {
        let mut store = ParamStore::new();
        let l = KanLayer::from_spec(&mut store, "z", 3, 2, (-2.0, 2.0), SplineSpec::new(5, 3, 0.0), &mut seeded(3)).unwrap();
        assert!(store.get(l.coeffs).data().iter().all(|&c| c == 0.0));
    }

    #[test]
    fn coefficient_std_monte_carlo() {
        let mut store = ParamStore::new();
        let spec = SplineSpec::new(9, 3, 0.93);
        // 10 x 834 x 12 = 100,080 draws
        let l = KanLayer::from_spec(&mut store, "mc", 834, 10, (-1.0, 1.5), spec, &mut seeded(5)).unwrap();
        let c = store.get(l.coeffs).data();
        let n = c.len() as f64;
        let mean = c.iter().sum::<f64>() / n;
        let std = (c.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        let want = 0.93 / 12f64.sqrt();
        assert!((std - want).abs() / want < 0.03, "{std} vs {want}");
    }

    #[test]
    fn zero_layer_and_base_path_reduction() {
        let mut store = ParamStore::new();
        let l = KanLayer::from_spec(&mut store, "l", 3, 3, (-2.0, 2.0), SplineSpec::new(4, 3, 0.5), &mut seeded(9)).unwrap();
        let x = Tensor::matrix(2, 3, vec![0.3, -1.2, 2.5, 0.0, 1.0, -0.4]);

        for id in l.param_ids() {
            store.get_mut(id).data_mut().fill(0.0);
        }
        assert!(l.eval(&store, &x).unwrap().data().iter().all(|&v| v == 0.0));

        let eye: Vec<f64> = (0..9).map(|i| if i % 4 == 0 { 1.0 } else { 0.0 }).collect();
        store.get_mut(l.base_weight).data_mut().copy_from_slice(&eye);
        let y = l.eval(&store, &x).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - silu(*b)).abs() < 1e-15);
        }
    }

    #[test]
    fn width_mismatch_is_contract_error() {
        let mut store = ParamStore::new();
        let l = KanLayer::from_spec(&mut store, "l", 3, 2, (-2.0, 2.0), SplineSpec::new(4, 3, 0.5), &mut seeded(9)).unwrap();
        let x = Tensor::matrix(1, 2, vec![0.0, 0.0]);
        assert!(matches!(l.eval(&store, &x), Err(FlowKanError::Contract(_))));
    }
}
