//! Step-size schedules and the grid-adaptive step.

use serde::{Deserialize, Serialize};

use crate::error::{arg, Result};
use crate::jet::Jet3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum AdaptiveMode {
    /// safety·min(min ratio, floor): keeps ψ'' above (1 − safety)·ψ'' on the grid.
    Min,
    /// safety·max(max ratio, floor), the literal published formula.
    PaperMax,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveRule {
    pub grid: Vec<f64>,
    pub floor: f64,
    pub safety: f64,
    pub mode: AdaptiveMode,
}

impl AdaptiveRule {
    /// 1000 equal parts of [−3, 3], floor 0.4, safety ½.
    pub fn standard(mode: AdaptiveMode) -> Self {
        Self { grid: uniform_grid(-3.0, 3.0, 1001), floor: 0.4, safety: 0.5, mode }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum StepSchedule {
    Constant {
        eta: f64,
    },
    /// η_k = T^{−1/2}.
    InverseSqrtT {
        t: usize,
    },
    /// η_k = M / ((k+1)λ).
    Logarithmic {
        lambda: f64,
        m: f64,
    },
    /// η_k = C·M·B0·log T / (λT), constant over the run.
    LastIterate {
        c: f64,
        m: f64,
        lambda: f64,
        b0: f64,
        t: usize,
    },
    Adaptive(AdaptiveRule),
}

impl StepSchedule {
    /// The scheduled η_k, or `None` when the step depends on the residual.
    pub fn fixed_eta(&self, k: usize) -> Result<Option<f64>> {
        let eta = match *self {
            StepSchedule::Constant { eta } => eta,
            StepSchedule::InverseSqrtT { t } => 1.0 / (t.max(1) as f64).sqrt(),
            StepSchedule::Logarithmic { lambda, m } => m / ((k + 1) as f64 * lambda),
            StepSchedule::LastIterate { c, m, lambda, b0, t } => c * m * b0 * (t as f64).ln() / (lambda * t as f64),
            StepSchedule::Adaptive(_) => return Ok(None),
        };
        if !(eta > 0.0 && eta.is_finite()) {
            return arg(format!("schedule produced a non-positive step {eta} at k = {k}"));
        }
        Ok(Some(eta))
    }
}

pub fn uniform_grid(a: f64, b: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![0.5 * (a + b)];
    }
    (0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect()
}

/// The adaptive step from paired jets of ψ and Δ on the grid.
pub fn adaptive_eta(psi: &[Jet3], delta: &[Jet3], floor: f64, safety: f64, mode: AdaptiveMode) -> f64 {
    let ratios = psi.iter().zip(delta).filter(|(_, d)| d.d2 < 0.0).map(|(p, d)| -p.d2 / d.d2);
    match mode {
        AdaptiveMode::Min => safety * ratios.fold(floor, f64::min),
        AdaptiveMode::PaperMax => safety * ratios.fold(floor, f64::max),
    }
}
