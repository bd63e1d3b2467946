//! Brenier potentials as a quadratic base plus a stack of `(η, Δ)` layers.
//!
//! Layers are shared behind `Arc`, so pushing a layer copies a vector of
//! pointers and leaves the original stack untouched. A residual that reads
//! its parent potential (the analytic oracle, the classifier composite and
//! the score composite) needs the parent at a higher order than it is
//! itself asked for; [`PotentialStack::series`] computes those orders once
//! and evaluates every layer exactly once per point.

use std::cell::Cell;
use std::sync::Arc;

use crate::error::{arg, Error, Result};
use crate::flow::target::Target1D;
use crate::jet::{Jet3, Taylor};
use crate::neural::StudentNet;
use crate::quadrature::legendre;

/// The function `Δ` carried by one layer.
#[derive(Clone, Debug)]
pub enum ResidualFn {
    /// `Σ c_i y^i`; handy for tests and hand-built potentials.
    Polynomial(Vec<f64>),
    /// `−f(ψ'(y)) + g(y) + log ψ''(y)` for the parent potential ψ.
    AnalyticDelta { target: Target1D, reference: Target1D, parent: PotentialStack },
    /// A trained network used directly as `Δ`.
    Student(Arc<StudentNet>),
    /// `−ĥ(ψ'(y))` with ĥ the fitted log density-ratio.
    NegatedClassifierComposite { classifier: Arc<StudentNet>, parent: PotentialStack },
    /// The potential form of the score update: `Δ' = −ψ''·(σ̂_model − σ̂_target)(ψ')`,
    /// with `Δ(0) = 0`.
    ScoreComposite { model_score: Arc<StudentNet>, target_score: Arc<StudentNet>, parent: PotentialStack },
}

impl ResidualFn {
    fn parent(&self) -> Option<&PotentialStack> {
        match self {
            ResidualFn::AnalyticDelta { parent, .. }
            | ResidualFn::NegatedClassifierComposite { parent, .. }
            | ResidualFn::ScoreComposite { parent, .. } => Some(parent),
            _ => None,
        }
    }

    /// Series of Δ alone at `y`, evaluating the parent stack when there is one.
    pub fn eval_series(&self, y: f64, order: usize) -> Result<Taylor> {
        let p = match self.parent() {
            Some(p) => Some(p.series(y, order + self.parent_need())?),
            None => None,
        };
        self.series(y, order, p.as_ref())
    }

    /// (Δ, Δ', Δ'', Δ''') at `y`.
    pub fn jet(&self, y: f64) -> Result<Jet3> {
        match self {
            ResidualFn::Student(net) => Ok(net.jet(y)),
            r => Ok(r.eval_series(y, 3)?.to_jet3()),
        }
    }

    /// Extra orders of the parent needed beyond the requested order.
    fn parent_need(&self) -> usize {
        match self {
            ResidualFn::AnalyticDelta { .. } => 2,
            ResidualFn::NegatedClassifierComposite { .. } | ResidualFn::ScoreComposite { .. } => 1,
            _ => 0,
        }
    }

    /// Series of Δ at `y` to `order`. `parent` must be the parent's series
    /// at `y` to at least `order + parent_need()` when the residual has a parent.
    fn series(&self, y: f64, order: usize, parent: Option<&Taylor>) -> Result<Taylor> {
        match self {
            ResidualFn::Polynomial(c) => {
                let t = Taylor::variable(y, order);
                let mut acc = Taylor::constant(0.0, order);
                for &ci in c.iter().rev() {
                    acc = acc.mul(&t).add_const(ci);
                }
                Ok(acc)
            }
            ResidualFn::Student(net) => {
                if order <= 3 {
                    Ok(net.jet(y).to_taylor().truncate(order))
                } else {
                    Ok(net.forward(&Taylor::variable(y, order)))
                }
            }
            ResidualFn::AnalyticDelta { target, reference, .. } => {
                let p = parent.expect("analytic residual without parent series").clone().truncate(order + 2);
                analytic_delta_series(&p, target, reference, y)
            }
            ResidualFn::NegatedClassifierComposite { classifier, .. } => {
                let p = parent.expect("composite residual without parent series").clone().truncate(order + 1);
                Ok(classifier.forward(&p.derivative()).scale(-1.0))
            }
            ResidualFn::ScoreComposite { model_score, target_score, parent: pstack } => {
                let p = parent.expect("composite residual without parent series").clone().truncate(order + 1);
                let v = score_composite_value(model_score, target_score, pstack, y)?;
                if order == 0 {
                    return Ok(Taylor::constant(v, 0));
                }
                let d1 = p.derivative();
                let m = model_score.forward(&d1).sub(&target_score.forward(&d1));
                let dd = d1.derivative().mul(&m.truncate(order - 1)).scale(-1.0);
                let mut c = vec![v];
                c.extend(dd.coeffs().iter().enumerate().map(|(k, x)| x / (k + 1) as f64));
                Ok(Taylor::from_coeffs(c))
            }
        }
    }
}

/// Δ = −f(ψ') + g + log ψ'' from a parent series of order r + 2, giving order r.
pub fn analytic_delta_series(psi: &Taylor, target: &Target1D, reference: &Target1D, y: f64) -> Result<Taylor> {
    let d1 = psi.derivative();
    let d2 = d1.derivative();
    if !(d2.value() > 0.0) {
        return Err(Error::Convexity { y, d2: d2.value() });
    }
    let order = d2.order();
    let fx = target.series(&d1.clone().truncate(order));
    let gy = reference.series(&Taylor::variable(y, order));
    Ok(gy.sub(&fx).add(&d2.ln()))
}

/// Same as [`analytic_delta_series`] from a [`Jet3`] parent: value and first derivative.
pub fn analytic_delta_jet(psi: Jet3, target: &Target1D, reference: &Target1D, y: f64) -> Result<(f64, f64)> {
    if !(psi.d2 > 0.0) {
        return Err(Error::Convexity { y, d2: psi.d2 });
    }
    let f = target.derivs(psi.d1);
    let g = reference.derivs(y);
    Ok((-f[0] + g[0] + psi.d2.ln(), -f[1] * psi.d2 + g[1] + psi.d3 / psi.d2))
}

fn score_composite_value(ms: &StudentNet, ts: &StudentNet, parent: &PotentialStack, y: f64) -> Result<f64> {
    if y == 0.0 {
        return Ok(0.0);
    }
    let mut acc = 0.0;
    for (t, w) in legendre(0.0, y, 24) {
        let j = parent.series(t, 2)?.to_jet3();
        acc += w * j.d2 * (ms.value(j.d1) - ts.value(j.d1));
    }
    Ok(-acc)
}

#[derive(Clone, Debug)]
pub struct Layer {
    pub eta: f64,
    pub residual: ResidualFn,
}

/// ψ(y) = c0·y²/2 + Σ η_i Δ_i(y).
#[derive(Clone, Debug)]
pub struct PotentialStack {
    base: f64,
    layers: Vec<Arc<Layer>>,
    convex_on_grid: bool,
}

thread_local! {
    static LAYER_EVALS: Cell<u64> = const { Cell::new(0) };
}

/// Number of layer evaluations performed on this thread so far.
pub fn layer_evaluations() -> u64 {
    LAYER_EVALS.with(|c| c.get())
}

impl PotentialStack {
    pub fn new(base_coefficient: f64) -> Result<Self> {
        if !(base_coefficient > 0.0 && base_coefficient.is_finite()) {
            return arg(format!("base coefficient must be positive, got {base_coefficient}"));
        }
        Ok(Self { base: base_coefficient, layers: Vec::new(), convex_on_grid: true })
    }

    pub fn identity() -> Self {
        Self::new(1.0).unwrap()
    }

    pub fn base_coefficient(&self) -> f64 {
        self.base
    }

    pub fn layers(&self) -> &[Arc<Layer>] {
        &self.layers
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn convex_on_grid(&self) -> bool {
        self.convex_on_grid
    }

    /// New stack with one more layer; the flag is cleared until re-checked.
    pub fn push_residual(&self, residual: ResidualFn, eta: f64) -> Result<Self> {
        if !(eta > 0.0 && eta.is_finite()) {
            return arg(format!("step size must be positive, got {eta}"));
        }
        let mut layers = self.layers.clone();
        layers.push(Arc::new(Layer { eta, residual }));
        Ok(Self { base: self.base, layers, convex_on_grid: false })
    }

    /// Is `other` exactly this stack's first `other.len()` layers?
    fn is_prefix(&self, other: &PotentialStack, len: usize) -> bool {
        other.layers.len() == len && other.base == self.base && other.layers.iter().zip(&self.layers).all(|(a, b)| Arc::ptr_eq(a, b))
    }

    /// Series of ψ at `y` to `order`.
    pub fn series(&self, y: f64, order: usize) -> Result<Taylor> {
        if !y.is_finite() {
            return arg(format!("evaluation point must be finite, got {y}"));
        }
        let n = self.layers.len();
        // required order of every layer, back to front
        let mut req = vec![order; n];
        let mut need = order;
        for j in (0..n).rev() {
            req[j] = need;
            let r = &self.layers[j].residual;
            if let Some(p) = r.parent() {
                if self.is_prefix(p, j) {
                    need = need.max(req[j] + r.parent_need());
                }
            }
        }
        let mut psi = Taylor::from_coeffs({
            let mut c = vec![0.0; need + 1];
            c[0] = 0.5 * self.base * y * y;
            if need >= 1 {
                c[1] = self.base * y;
            }
            if need >= 2 {
                c[2] = 0.5 * self.base;
            }
            c
        });
        for (j, layer) in self.layers.iter().enumerate() {
            let r = &layer.residual;
            let parent = match r.parent() {
                Some(p) if self.is_prefix(p, j) => Some(psi.clone()),
                Some(p) => Some(p.series(y, req[j] + r.parent_need())?),
                None => None,
            };
            LAYER_EVALS.with(|c| c.set(c.get() + 1));
            let d = r.series(y, req[j], parent.as_ref()).map_err(|e| match e {
                Error::NonFinite { .. } => Error::NonFinite { layer: j },
                other => other,
            })?;
            if !d.is_finite() {
                return Err(Error::NonFinite { layer: j });
            }
            psi.axpy(layer.eta, &d);
        }
        Ok(psi.truncate(order))
    }

    /// (ψ, ψ', ψ'', ψ''') at `y`.
    pub fn jet_eval(&self, y: f64) -> Result<Jet3> {
        if self.layers.iter().all(|l| l.residual.parent().is_none()) {
            if !y.is_finite() {
                return arg(format!("evaluation point must be finite, got {y}"));
            }
            let mut j = Jet3::new(0.5 * self.base * y * y, self.base * y, self.base, 0.0);
            for (i, l) in self.layers.iter().enumerate() {
                LAYER_EVALS.with(|c| c.set(c.get() + 1));
                let d = match &l.residual {
                    ResidualFn::Student(net) => net.jet(y),
                    r => r.series(y, 3, None)?.to_jet3(),
                };
                if !d.is_finite() {
                    return Err(Error::NonFinite { layer: i });
                }
                j = j + d.scale(l.eta);
            }
            return Ok(j);
        }
        let s = self.series(y, 3)?;
        Ok(s.to_jet3())
    }

    /// ψ'(y) only.
    pub fn map(&self, y: f64) -> Result<f64> {
        Ok(self.jet_eval(y)?.d1)
    }

    /// min over the grid of ψ''.
    pub fn convexity_margin(&self, grid: &[f64]) -> Result<f64> {
        if grid.is_empty() {
            return arg("convexity margin needs a non-empty grid");
        }
        let mut m = f64::INFINITY;
        for &y in grid {
            m = m.min(self.jet_eval(y)?.d2);
        }
        Ok(m)
    }

    /// Computes the margin and sets the convex-on-grid flag from its sign.
    pub fn mark_convexity(&mut self, grid: &[f64]) -> Result<f64> {
        let m = self.convexity_margin(grid)?;
        self.convex_on_grid = m > 0.0;
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::target::standard_normal;

    fn poly(c: &[f64]) -> ResidualFn {
        ResidualFn::Polynomial(c.to_vec())
    }

    #[test]
    fn quadratic_base() {
        let s = PotentialStack::identity();
        assert_eq!(s.jet_eval(2.0).unwrap(), Jet3::new(2.0, 2.0, 1.0, 0.0));
    }

    #[test]
    fn cubic_layer_by_hand() {
        let s = PotentialStack::identity().push_residual(poly(&[0.0, 0.0, 0.0, 1.0]), 0.5).unwrap();
        assert_eq!(s.jet_eval(1.0).unwrap(), Jet3::new(1.0, 2.5, 4.0, 3.0));
    }

    #[test]
    fn odd_residual_at_zero_has_zero_slope() {
        let s = PotentialStack::identity().push_residual(poly(&[0.0, 0.0, 0.0, 2.0]), 0.3).unwrap();
        assert_eq!(s.jet_eval(0.0).unwrap().d1, 0.0);
    }

    #[test]
    fn push_rejects_bad_eta_and_keeps_original() {
        let s = PotentialStack::identity();
        assert!(s.push_residual(poly(&[1.0]), 0.0).is_err());
        assert!(s.push_residual(poly(&[1.0]), -1.0).is_err());
        let t = s.push_residual(poly(&[0.0, 0.0, 1.0]), 1.0).unwrap();
        assert_eq!(s.len(), 0);
        assert_eq!(t.len(), 1);
    }

    #[test]
    fn zero_residual_is_no_op() {
        let s = PotentialStack::new(1.7).unwrap();
        let t = s.push_residual(poly(&[0.0]), 0.9).unwrap();
        for y in [-2.0, 0.3, 1.5] {
            assert_eq!(s.jet_eval(y).unwrap(), t.jet_eval(y).unwrap());
        }
    }

    #[test]
    fn cancelling_residual_clears_flag() {
        let grid = [-1.0, 0.0, 1.0];
        let mut s = PotentialStack::identity().push_residual(poly(&[0.0, 0.0, -0.5]), 1.0).unwrap();
        let j = s.jet_eval(1.3).unwrap();
        assert_eq!((j.v, j.d1, j.d2), (0.0, 0.0, 0.0));
        assert_eq!(s.mark_convexity(&grid).unwrap(), 0.0);
        assert!(!s.convex_on_grid());
    }

    #[test]
    fn margin_by_hand() {
        let s = PotentialStack::identity().push_residual(poly(&[0.0, 0.0, -0.25]), 1.0).unwrap();
        assert_eq!(s.convexity_margin(&[-1.0, 0.0, 1.0]).unwrap(), 0.5);
        assert_eq!(PotentialStack::identity().convexity_margin(&[3.0]).unwrap(), 1.0);
        assert!(s.convexity_margin(&[]).is_err());
    }

    #[test]
    fn gaussian_oracle_step_matches_slope_map() {
        // ψ = y² (c = 2), target N(0,1), reference N(0,1): new slope c − η(c² − 1)
        let s = PotentialStack::new(2.0).unwrap();
        let d = ResidualFn::AnalyticDelta { target: standard_normal(), reference: standard_normal(), parent: s.clone() };
        let t = s.push_residual(d, 0.1).unwrap();
        for y in [-1.0, 0.5, 2.0] {
            let j = t.jet_eval(y).unwrap();
            assert!((j.d2 - 1.7).abs() < 1e-13);
            assert!((j.d1 - 1.7 * y).abs() < 1e-13);
        }
    }

    #[test]
    fn nested_analytic_layers_agree_with_finite_differences() {
        let target = crate::flow::target::bimodal_mixture();
        let mut s = PotentialStack::identity();
        for eta in [0.2, 0.1, 0.05] {
            let d = ResidualFn::AnalyticDelta { target: target.clone(), reference: standard_normal(), parent: s.clone() };
            s = s.push_residual(d, eta).unwrap();
        }
        let h = 1e-4;
        for y in [-1.2, 0.3, 2.0] {
            let j = s.jet_eval(y).unwrap();
            let p = s.jet_eval(y + h).unwrap();
            let m = s.jet_eval(y - h).unwrap();
            assert!(((p.v - m.v) / (2.0 * h) - j.d1).abs() < 1e-7);
            assert!(((p.d1 - m.d1) / (2.0 * h) - j.d2).abs() < 1e-7);
            assert!(((p.d2 - m.d2) / (2.0 * h) - j.d3).abs() < 1e-6);
        }
    }

    #[test]
    fn evaluation_cost_is_linear_in_layers() {
        let target = crate::flow::target::bimodal_mixture();
        let mut s = PotentialStack::identity();
        for _ in 0..6 {
            let d = ResidualFn::AnalyticDelta { target: target.clone(), reference: standard_normal(), parent: s.clone() };
            s = s.push_residual(d, 0.01).unwrap();
        }
        let before = layer_evaluations();
        s.jet_eval(0.4).unwrap();
        assert_eq!(layer_evaluations() - before, 6);
    }

    #[test]
    fn analytic_jet_matches_series() {
        let t = crate::flow::target::bimodal_mixture();
        let psi = Jet3::new(0.3, 0.8, 1.4, -0.2);
        let (v, d1) = analytic_delta_jet(psi, &t, &standard_normal(), 0.7).unwrap();
        let s = analytic_delta_series(&psi.to_taylor(), &t, &standard_normal(), 0.7).unwrap().to_jet3();
        assert!((v - s.v).abs() < 1e-13 && (d1 - s.d1).abs() < 1e-13);
    }

    #[test]
    fn convexity_error_names_point() {
        let s = PotentialStack::identity().push_residual(poly(&[0.0, 0.0, -1.0]), 1.0).unwrap();
        let d = ResidualFn::AnalyticDelta { target: standard_normal(), reference: standard_normal(), parent: s.clone() };
        let t = s.push_residual(d, 0.1).unwrap();
        assert!(matches!(t.jet_eval(0.5), Err(Error::Convexity { .. })));
    }
}
