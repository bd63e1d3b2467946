//! Analytic oracle residuals, the ξ field and distillation into a student.

use std::sync::Arc;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::schedule::{adaptive_eta, AdaptiveRule, StepSchedule};
use crate::flow::target::Target1D;
use crate::jet::Jet3;
use crate::neural::{train, PointLoss, StudentNet, TrainConfig, TrainReport};
use crate::potential::{PotentialStack, ResidualFn};
use crate::quadrature::QuadratureSpec;

/// The analytic residual of `psi` as a layer-ready function.
pub fn oracle_residual(psi: &PotentialStack, target: &Target1D, g_ref: &Target1D) -> ResidualFn {
    ResidualFn::AnalyticDelta { target: target.clone(), reference: g_ref.clone(), parent: psi.clone() }
}

/// Jet of Δ(y) = −f(ψ'(y)) + g(y) + log ψ''(y).
pub fn oracle_delta(psi: &PotentialStack, target: &Target1D, g_ref: &Target1D, y: f64) -> Result<Jet3> {
    oracle_residual(psi, target, g_ref).jet(y)
}

/// Step from the grid-adaptive rule for residual `delta`.
pub fn adaptive_step(psi: &PotentialStack, delta: &ResidualFn, rule: &AdaptiveRule) -> Result<f64> {
    let (p, d) = grid_jets(psi, delta, &rule.grid)?;
    Ok(adaptive_eta(&p, &d, rule.floor, rule.safety, rule.mode))
}

fn grid_jets(psi: &PotentialStack, delta: &ResidualFn, grid: &[f64]) -> Result<(Vec<Jet3>, Vec<Jet3>)> {
    let mut p = Vec::with_capacity(grid.len());
    let mut d = Vec::with_capacity(grid.len());
    for &y in grid {
        p.push(psi.jet_eval(y)?);
        d.push(delta.jet(y)?);
    }
    Ok((p, d))
}

/// The step size for `delta` at iteration `k`.
pub fn schedule_eta(schedule: &StepSchedule, k: usize, psi: &PotentialStack, delta: &ResidualFn) -> Result<f64> {
    match schedule {
        StepSchedule::Adaptive(rule) => adaptive_step(psi, delta, rule),
        s => Ok(s.fixed_eta(k)?.expect("non-adaptive schedule")),
    }
}

/// Push `delta` with the scheduled step; in adaptive `min` mode the new
/// stack must stay convex on the rule's grid.
pub fn push_scheduled(psi: &PotentialStack, delta: ResidualFn, schedule: &StepSchedule, k: usize) -> Result<(PotentialStack, f64)> {
    let eta = schedule_eta(schedule, k, psi, &delta)?;
    let mut next = psi.push_residual(delta, eta)?;
    if let StepSchedule::Adaptive(rule) = schedule {
        let m = next.mark_convexity(&rule.grid)?;
        if rule.mode == crate::flow::schedule::AdaptiveMode::Min && !(m > 0.0) {
            return Err(Error::Numeric(format!("convexity lost after an adaptive min step (margin {m})")));
        }
    }
    Ok((next, eta))
}

/// One exact oracle update.
pub fn oracle_step(
    psi: &PotentialStack,
    target: &Target1D,
    g_ref: &Target1D,
    schedule: &StepSchedule,
    k: usize,
) -> Result<(PotentialStack, f64)> {
    push_scheduled(psi, oracle_residual(psi, target, g_ref), schedule, k)
}

/// ξ(y) = ψ''(y)·(f + log ρ)'(ψ'(y)) = −Δ'(y).
pub fn xi_field(psi: &PotentialStack, target: &Target1D, g_ref: &Target1D, y: f64) -> Result<f64> {
    let j = psi.jet_eval(y)?;
    if !(j.d2 > 0.0) {
        return Err(Error::Convexity { y, d2: j.d2 });
    }
    // (log ρ)∘ψ' = −g − log ψ''; differentiate in y and divide by ψ''
    let dlog_rho = (-g_ref.derivs(y)[1] - j.d3 / j.d2) / j.d2;
    Ok(j.d2 * (target.derivs(j.d1)[1] + dlog_rho))
}

/// ∫ ξ² dπ_k with π_k = e^{−g}, by quadrature.
pub fn xi_norm_sq(psi: &PotentialStack, target: &Target1D, g_ref: &Target1D, quad: &QuadratureSpec) -> Result<f64> {
    let mut acc = 0.0;
    for (y, w) in quad.points() {
        let wy = w * g_ref.density(y);
        if wy < 1e-300 {
            continue;
        }
        acc += wy * xi_field(psi, target, g_ref, y)?.powi(2);
    }
    Ok(acc)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub train: TrainConfig,
    pub samples: usize,
    pub domain: (f64, f64),
    /// Start each student from the previous one instead of a fresh init.
    pub warm_start: bool,
    /// Epoch budget of a warm-started student; the first student always gets `train.epochs`.
    pub warm_epochs: usize,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self { train: TrainConfig::default(), samples: 500, domain: (-3.0, 3.0), warm_start: false, warm_epochs: 50 }
    }
}

struct SlopeMatch<'a> {
    targets: &'a [f64],
}

impl PointLoss for SlopeMatch<'_> {
    fn needs_tangent(&self) -> bool {
        true
    }
    fn eval(&self, i: usize, _y: f64, yt: f64) -> (f64, f64, f64) {
        let r = yt - self.targets[i];
        (r * r, 0.0, 2.0 * r)
    }
}

/// Fit a student to Δ' in squared error on Unif(domain), then shift it so stud(0) = Δ(0).
pub fn distill(delta: &ResidualFn, cfg: &DistillConfig, seed: u64, init: Option<&StudentNet>) -> Result<(StudentNet, TrainReport)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (a, b) = cfg.domain;
    let zs: Vec<f64> = (0..cfg.samples).map(|_| rng.random_range(a..b)).collect();
    let targets = zs.iter().map(|&z| delta.jet(z).map(|j| j.d1)).collect::<Result<Vec<_>>>()?;
    distill_slopes(&zs, &targets, delta.jet(0.0)?.v, cfg, seed, init)
}

/// Distillation from precomputed slopes `targets` at `zs` and the anchor value Δ(0).
pub fn distill_slopes(
    zs: &[f64],
    targets: &[f64],
    anchor: f64,
    cfg: &DistillConfig,
    seed: u64,
    init: Option<&StudentNet>,
) -> Result<(StudentNet, TrainReport)> {
    let mut train_cfg = cfg.train.clone();
    let mut net = match init {
        Some(n) if cfg.warm_start && n.widths() == cfg.train.widths.as_slice() => {
            train_cfg.epochs = cfg.warm_epochs;
            n.clone()
        }
        _ => StudentNet::new(&cfg.train.widths, seed ^ 0x5eed)?,
    };
    let report = train(&mut net, zs, &SlopeMatch { targets }, &train_cfg)?;
    let shift = anchor - net.value(0.0);
    net.add_output_bias(shift);
    Ok((net, report))
}

/// Wrap a trained student as a layer residual.
pub fn student_residual(net: StudentNet) -> ResidualFn {
    ResidualFn::Student(Arc::new(net))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::schedule::AdaptiveMode;
    use crate::flow::target::{bimodal_mixture, standard_normal};
    use crate::gaussian::discrete_gaussian_step;

    #[test]
    fn oracle_delta_examples() {
        let id = PotentialStack::identity();
        let n = standard_normal();
        assert!(oracle_delta(&id, &n, &n, 0.7).unwrap().v.abs() < 1e-15);
        let d = oracle_delta(&id, &bimodal_mixture(), &n, 0.0).unwrap();
        assert!((d.v + 2.0).abs() < 1e-12);
        let c2 = PotentialStack::new(2.0).unwrap();
        let d = oracle_delta(&c2, &n, &n, 1.0).unwrap();
        assert!((d.v - (-2.0 + 0.5 + 2f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn oracle_step_reproduces_gaussian_slope_map() {
        let lambda = 0.5;
        let g = Target1D::Normal { mean: 0.0, sd: lambda };
        let psi = PotentialStack::new(1.3).unwrap();
        let (next, eta) = oracle_step(&psi, &standard_normal(), &g, &StepSchedule::Constant { eta: 0.05 }, 0).unwrap();
        assert_eq!(eta, 0.05);
        let c = discrete_gaussian_step(1.3, 0.05, lambda);
        for y in [-1.0, 0.4] {
            assert!((next.jet_eval(y).unwrap().d1 - c * y).abs() < 1e-12);
        }
    }

    #[test]
    fn target_equal_reference_is_fixed() {
        let n = standard_normal();
        let (next, _) = oracle_step(&PotentialStack::identity(), &n, &n, &StepSchedule::Constant { eta: 0.3 }, 0).unwrap();
        for y in [-2.0, 0.0, 1.0] {
            assert!((next.jet_eval(y).unwrap().d1 - y).abs() < 1e-15);
        }
    }

    #[test]
    fn xi_is_minus_delta_slope() {
        let t = bimodal_mixture();
        let n = standard_normal();
        let mut s = PotentialStack::identity();
        s = oracle_step(&s, &t, &n, &StepSchedule::Constant { eta: 0.1 }, 0).unwrap().0;
        for y in [-2.0, -0.5, 0.3, 1.7] {
            let xi = xi_field(&s, &t, &n, y).unwrap();
            let d = oracle_delta(&s, &t, &n, y).unwrap();
            assert!((xi + d.d1).abs() < 1e-10);
        }
        assert_eq!(xi_field(&PotentialStack::identity(), &n, &n, 0.4).unwrap(), 0.0);
        // linear map, target N(0,1), reference N(0,λ²): ξ(y) = (c² − λ⁻²)y
        let (c, lambda) = (1.4, 0.8);
        let g = Target1D::Normal { mean: 0.0, sd: lambda };
        let xi = xi_field(&PotentialStack::new(c).unwrap(), &n, &g, 0.9).unwrap();
        assert!((xi - (c * c - 1.0 / (lambda * lambda)) * 0.9).abs() < 1e-12);
    }

    #[test]
    fn adaptive_oracle_steps_reduce_kl_and_stay_convex() {
        use crate::flow::cache::MapCache;
        let t = bimodal_mixture();
        let n = standard_normal();
        let sched = StepSchedule::Adaptive(AdaptiveRule::standard(AdaptiveMode::Min));
        let quad = crate::quadrature::legendre_composite(-8.0, 8.0, 512);
        let mut s = PotentialStack::identity();
        let mut last = f64::INFINITY;
        for k in 0..5 {
            let kl = MapCache::build(&s, (-9.0, 9.0), 901).unwrap().kl_reference_space(&t, &n, &quad).unwrap();
            assert!(kl < last, "step {k}: {kl} >= {last}");
            last = kl;
            s = oracle_step(&s, &t, &n, &sched, k).unwrap().0;
            assert!(s.convex_on_grid());
        }
    }

    #[test]
    fn distill_quadratic_and_determinism() {
        let delta = ResidualFn::Polynomial(vec![0.3, 0.0, 0.5]);
        let cfg = DistillConfig::default();
        let (a, rep) = distill(&delta, &cfg, 11, None).unwrap();
        assert!(rep.final_loss.is_finite());
        for y in [-3.0, -1.0, 0.0, 1.2, 2.9] {
            assert!((a.jet(y).d1 - y).abs() < 0.05, "{y}: {}", a.jet(y).d1);
        }
        assert!((a.value(0.0) - 0.3).abs() < 1e-12);
        let (b, _) = distill(&delta, &cfg, 11, None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn distill_realizable_net() {
        let teacher = StudentNet::new(&[1, 32, 32, 1], 3).unwrap();
        let cfg = DistillConfig::default();
        let (_, rep) = distill(&ResidualFn::Student(Arc::new(teacher)), &cfg, 5, None).unwrap();
        assert!(rep.final_loss < 1e-4, "{}", rep.final_loss);
    }
}
