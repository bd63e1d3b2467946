//! Fixed quadrature rules shared by the divergence, flow and Sinkhorn code.

use std::f64::consts::PI;
use std::num::NonZeroUsize;

use gauss_quad::{GaussHermite, GaussLegendre};
use serde::{Deserialize, Serialize};

use crate::error::{arg, Result};

/// Composite Gauss–Legendre rule on a finite interval.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadratureSpec {
    pub nodes: usize,
    pub domain: (f64, f64),
}

/// Nodes per panel of the composite rule.
const PANEL_DEGREE: usize = 16;

impl QuadratureSpec {
    pub fn new(nodes: usize, domain: (f64, f64)) -> Result<Self> {
        if nodes < 32 {
            return arg(format!("quadrature needs at least 32 nodes, got {nodes}"));
        }
        if !(domain.0 < domain.1) || !domain.0.is_finite() || !domain.1.is_finite() {
            return arg(format!("bad quadrature domain {domain:?}"));
        }
        Ok(Self { nodes, domain })
    }

    /// Node/weight pairs; the node count is rounded up to whole panels.
    pub fn points(&self) -> Vec<(f64, f64)> {
        legendre_composite(self.domain.0, self.domain.1, self.nodes)
    }

    pub fn integrate(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.points().into_iter().map(|(x, w)| w * f(x)).sum()
    }
}

/// Composite Gauss–Legendre nodes on `[a, b]` with about `n` nodes.
pub fn legendre_composite(a: f64, b: f64, n: usize) -> Vec<(f64, f64)> {
    let panels = n.div_ceil(PANEL_DEGREE).max(1);
    let rule = GaussLegendre::new(NonZeroUsize::new(PANEL_DEGREE).unwrap());
    let h = (b - a) / panels as f64;
    let mut out = Vec::with_capacity(panels * PANEL_DEGREE);
    for p in 0..panels {
        let lo = a + p as f64 * h;
        for &(x, w) in rule.as_node_weight_pairs() {
            out.push((lo + 0.5 * h * (x + 1.0), 0.5 * h * w));
        }
    }
    out
}

/// Single-panel Gauss–Legendre rule on `[a, b]`.
pub fn legendre(a: f64, b: f64, n: usize) -> Vec<(f64, f64)> {
    let rule = GaussLegendre::new(NonZeroUsize::new(n.max(1)).unwrap());
    rule.as_node_weight_pairs().iter().map(|&(x, w)| (0.5 * (b - a) * x + 0.5 * (b + a), 0.5 * (b - a) * w)).collect()
}

/// Nodes and probability weights for expectations under `N(0, sd²)`.
pub fn hermite_normal(n: usize, sd: f64) -> Vec<(f64, f64)> {
    let rule = GaussHermite::new(NonZeroUsize::new(n.max(1)).unwrap());
    let s = 2f64.sqrt() * sd;
    rule.as_node_weight_pairs().iter().map(|&(x, w)| (s * x, w / PI.sqrt())).collect()
}
