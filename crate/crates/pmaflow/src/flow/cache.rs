//! Potential jets tabulated on a uniform grid, with quintic Hermite
//! interpolation of ψ' between nodes.
//!
//! Diagnostics need ψ, ψ', ψ'' and (ψ')⁻¹ at thousands of points per step.
//! A stack of k student layers costs k network passes per point, so the
//! cache is updated layer by layer instead of being re-evaluated, which
//! keeps a T-step run linear in T.

use crate::divergence::{Density1D, MonotoneMap};
use crate::error::{Error, Result};
use crate::flow::target::Target1D;
use crate::jet::Jet3;
use crate::potential::{PotentialStack, ResidualFn};

#[derive(Clone, Debug)]
pub struct MapCache {
    a: f64,
    h: f64,
    jets: Vec<Jet3>,
}

/// Monomial coefficients on t ∈ [0,1] of the quintic matching value, slope and
/// curvature of ψ' at both ends of a cell of width `h`.
fn quintic(l: &Jet3, r: &Jet3, h: f64) -> [f64; 6] {
    let (c0, c1, c2) = (l.d1, h * l.d2, 0.5 * h * h * l.d3);
    let a = r.d1 - c0 - c1 - c2;
    let b = h * r.d2 - c1 - 2.0 * c2;
    let c = h * h * r.d3 - 2.0 * c2;
    [c0, c1, c2, 10.0 * a - 4.0 * b + 0.5 * c, -15.0 * a + 7.0 * b - c, 6.0 * a - 3.0 * b + 0.5 * c]
}

impl MapCache {
    /// Tabulate `stack` on `n` equispaced nodes of `[a, b]`.
    pub fn build(stack: &PotentialStack, (a, b): (f64, f64), n: usize) -> Result<Self> {
        if !(n >= 2 && b > a) {
            return crate::error::arg(format!("map cache needs n >= 2 and a < b, got {n} on ({a}, {b})"));
        }
        let h = (b - a) / (n - 1) as f64;
        let jets = (0..n).map(|i| stack.jet_eval(a + h * i as f64)).collect::<Result<Vec<_>>>()?;
        Ok(Self { a, h, jets })
    }

    /// Bring the cache from ψ to ψ + η·Δ. Residuals without a parent are added
    /// node by node; the others force a rebuild from `after`.
    pub fn advance(&mut self, residual: &ResidualFn, eta: f64, after: &PotentialStack) -> Result<()> {
        match residual {
            ResidualFn::Student(_) | ResidualFn::Polynomial(_) => {
                for i in 0..self.jets.len() {
                    let y = self.node(i);
                    let d = residual.jet(y)?;
                    self.jets[i] = self.jets[i] + d.scale(eta);
                }
                Ok(())
            }
            _ => {
                *self = Self::build(after, self.domain(), self.jets.len())?;
                Ok(())
            }
        }
    }

    pub fn node(&self, i: usize) -> f64 {
        self.a + self.h * i as f64
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.a, self.node(self.jets.len() - 1))
    }

    pub fn jets(&self) -> &[Jet3] {
        &self.jets
    }

    pub fn nodes(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.jets.len()).map(|i| self.node(i))
    }

    /// Smallest ψ'' over the nodes.
    pub fn min_d2(&self) -> f64 {
        self.jets.iter().map(|j| j.d2).fold(f64::INFINITY, f64::min)
    }

    fn require_convex(&self) -> Result<()> {
        if let Some((i, j)) = self.jets.iter().enumerate().find(|(_, j)| !(j.d2 > 0.0)) {
            return Err(Error::Convexity { y: self.node(i), d2: j.d2 });
        }
        Ok(())
    }

    fn cell(&self, y: f64) -> Option<(usize, f64)> {
        let n = self.jets.len();
        let s = (y - self.a) / self.h;
        if !(s >= -1e-9 && s <= (n - 1) as f64 + 1e-9) {
            return None;
        }
        let i = (s.floor().max(0.0) as usize).min(n - 2);
        Some((i, (s - i as f64).clamp(0.0, 1.0)))
    }

    /// (ψ, ψ', ψ'') at `y` inside the cached domain.
    pub fn eval(&self, y: f64) -> Option<(f64, f64, f64)> {
        let (i, t) = self.cell(y)?;
        let c = quintic(&self.jets[i], &self.jets[i + 1], self.h);
        let mut p = 0.0;
        let mut dp = 0.0;
        let mut ip = 0.0;
        for k in (0..6).rev() {
            p = p * t + c[k];
            ip = ip * t + c[k] / (k + 1) as f64;
            if k > 0 {
                dp = dp * t + k as f64 * c[k];
            }
        }
        Some((self.jets[i].v + self.h * ip * t, p, dp / self.h))
    }

    /// (ψ, ψ', ψ'', ψ''') at `y` inside the cached domain.
    pub fn eval3(&self, y: f64) -> Option<Jet3> {
        let (v, d1, d2) = self.eval(y)?;
        let (i, t) = self.cell(y)?;
        let c = quintic(&self.jets[i], &self.jets[i + 1], self.h);
        let mut dd = 0.0;
        for k in (2..6).rev() {
            dd = dd * t + (k * (k - 1)) as f64 * c[k];
        }
        Some(Jet3::new(v, d1, d2, dd / (self.h * self.h)))
    }

    /// (ψ')⁻¹(x), or `None` when x lies outside ψ' of the cached domain.
    pub fn inverse(&self, x: f64) -> Option<f64> {
        let n = self.jets.len();
        if !(x >= self.jets[0].d1 && x <= self.jets[n - 1].d1) {
            return None;
        }
        let i = self.jets.partition_point(|j| j.d1 <= x).clamp(1, n - 1) - 1;
        let c = quintic(&self.jets[i], &self.jets[i + 1], self.h);
        let eval = |t: f64| {
            let (mut p, mut dp) = (0.0, 0.0);
            for k in (0..6).rev() {
                p = p * t + c[k];
                if k > 0 {
                    dp = dp * t + k as f64 * c[k];
                }
            }
            (p - x, dp)
        };
        let (mut lo, mut hi) = (0.0, 1.0);
        let mut t = if c[0] == self.jets[i + 1].d1 { 0.5 } else { ((x - c[0]) / (self.jets[i + 1].d1 - c[0])).clamp(0.0, 1.0) };
        for _ in 0..60 {
            let (r, d) = eval(t);
            if r.abs() < 1e-15 * (1.0 + x.abs()) {
                break;
            }
            if r < 0.0 {
                lo = t;
            } else {
                hi = t;
            }
            let nt = t - r / d;
            t = if d > 0.0 && nt > lo && nt < hi { nt } else { 0.5 * (lo + hi) };
            if hi - lo < 1e-16 {
                break;
            }
        }
        Some(self.a + self.h * (i as f64 + t))
    }

    /// The pushforward of `reference` under ψ' as a density.
    pub fn pushforward<'a>(&'a self, reference: &'a Target1D) -> Result<CachedPushforward<'a>> {
        self.require_convex()?;
        Ok(CachedPushforward { cache: self, reference })
    }

    /// KL(ρ|e^{−f}) written over the reference: E_g[f(ψ') − g − log ψ''].
    pub fn kl_reference_space(&self, target: &Target1D, reference: &Target1D, quad: &[(f64, f64)]) -> Result<f64> {
        self.require_convex()?;
        let mut acc = 0.0;
        for &(y, w) in quad {
            let wy = w * reference.density(y);
            if wy < 1e-300 {
                continue;
            }
            let (_, d1, d2) = self.eval(y).ok_or_else(|| Error::Numeric(format!("y = {y} outside the map cache")))?;
            acc += wy * (target.f(d1) - reference.f(y) - d2.ln());
        }
        Ok(acc)
    }

    /// E_g[ψ] by quadrature.
    pub fn mean_potential(&self, reference: &Target1D, quad: &[(f64, f64)]) -> Result<f64> {
        let mut acc = 0.0;
        for &(y, w) in quad {
            let wy = w * reference.density(y);
            if wy < 1e-300 {
                continue;
            }
            acc += wy * self.eval(y).ok_or_else(|| Error::Numeric(format!("y = {y} outside the map cache")))?.0;
        }
        Ok(acc)
    }
}

impl MonotoneMap for MapCache {
    fn map(&self, y: f64) -> Result<f64> {
        self.eval(y).map(|e| e.1).ok_or_else(|| Error::Numeric(format!("y = {y} outside the map cache")))
    }
    fn inverse(&self, x: f64) -> Result<f64> {
        MapCache::inverse(self, x).ok_or_else(|| Error::Numeric(format!("x = {x} outside the cached map range")))
    }
    fn integral(&self, a: f64, b: f64) -> Result<f64> {
        let pa = self.eval(a).ok_or_else(|| Error::Numeric(format!("{a} outside the map cache")))?.0;
        let pb = self.eval(b).ok_or_else(|| Error::Numeric(format!("{b} outside the map cache")))?.0;
        Ok(pb - pa)
    }
}

/// ρ(x) = e^{−g(y)}/ψ''(y) at x = ψ'(y).
pub struct CachedPushforward<'a> {
    cache: &'a MapCache,
    reference: &'a Target1D,
}

impl Density1D for CachedPushforward<'_> {
    fn log_density(&self, x: f64) -> f64 {
        match self.cache.inverse(x) {
            Some(y) => {
                let d2 = self.cache.eval(y).map(|e| e.2).unwrap_or(f64::NAN);
                -self.reference.f(y) - d2.ln()
            }
            None => f64::NEG_INFINITY,
        }
    }
    fn cdf(&self, x: f64) -> f64 {
        match self.cache.inverse(x) {
            Some(y) => self.reference.cdf(y),
            None if x < self.cache.jets[0].d1 => 0.0,
            None => 1.0,
        }
    }
    fn sf(&self, x: f64) -> f64 {
        match self.cache.inverse(x) {
            Some(y) => Density1D::sf(self.reference, y),
            None if x < self.cache.jets[0].d1 => 1.0,
            None => 0.0,
        }
    }
    fn quantile(&self, u: f64) -> f64 {
        self.cache.map(self.reference.quantile(u)).unwrap_or(f64::NAN)
    }
    fn isf(&self, q: f64) -> f64 {
        self.cache.map(Density1D::isf(self.reference, q)).unwrap_or(f64::NAN)
    }
    fn support_hint(&self) -> (f64, f64) {
        (self.cache.jets[0].d1, self.cache.jets[self.cache.jets.len() - 1].d1)
    }
}
