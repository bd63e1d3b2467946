//! Fast invariant suites behind `pmaflow verify`.

// checks are immediately-invoked closures so `?` works inside them
#![allow(clippy::redundant_closure_call)]

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::divergence::three_point_quadrature;
use crate::error::Result;
use crate::flow::run::{flow_run, FlowConfig, FlowMode};
use crate::flow::schedule::{AdaptiveMode, AdaptiveRule, StepSchedule};
use crate::flow::target::{bimodal_mixture, standard_normal, Target1D};
use crate::gaussian::{
    contraction_certificate, gaussian_bg, gaussian_kl, gaussian_three_point, riccati_sigma, riccati_sigma_rk4, sinkhorn_residual,
    variance_ratio, Certificate, GaussianTriple,
};
use crate::neural::{learner_defaults, logistic_fit, score_fit};
use crate::potential::PotentialStack;
use crate::quadrature::QuadratureSpec;
use crate::seed::derive_seed;
use crate::vi::{vi_run, vi_step, Expectation, VIConfig, VIState, VITargetScalar};

pub const SUITES: [&str; 7] = ["gaussian", "three-point", "convexity", "sinkhorn", "vi", "learners", "flow"];

#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub suite: &'static str,
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

struct Suite {
    name: &'static str,
    out: Vec<CheckResult>,
}

impl Suite {
    fn check(&mut self, name: &str, r: Result<(bool, String)>) {
        let (pass, detail) = r.unwrap_or_else(|e| (false, format!("error: {e}")));
        self.out.push(CheckResult { suite: self.name, name: format!("{}/{name}", self.name), pass, detail });
    }
}

/// Runs every suite, or only `filter`.
pub fn run_suites(filter: Option<&str>, seed: u64, flip_alg1_labels: bool) -> Vec<CheckResult> {
    let mut all = Vec::new();
    for name in SUITES {
        if filter.is_some_and(|f| f != name) {
            continue;
        }
        let mut s = Suite { name, out: Vec::new() };
        match name {
            "gaussian" => gaussian(&mut s, seed),
            "three-point" => three_point(&mut s, seed),
            "convexity" => convexity(&mut s, seed),
            "sinkhorn" => sinkhorn(&mut s),
            "vi" => vi(&mut s),
            "learners" => learners(&mut s, seed, flip_alg1_labels),
            "flow" => flow(&mut s),
            _ => unreachable!(),
        }
        all.extend(s.out);
    }
    all
}

fn gaussian(s: &mut Suite, seed: u64) {
    s.check(
        "certified tuples contract",
        (|| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (mut certified, mut violations) = (0, 0);
            while certified < 100 {
                let lambda: f64 = rng.random_range(0.05..1.0);
                let eta = lambda * rng.random_range(0.01..0.99);
                let lower = (1.0 - 2.0 * eta / lambda).abs();
                let upsilon = lower + rng.random_range(0.01..0.99) * (1.0 - lower);
                let Certificate::Issued(p) = contraction_certificate(lambda, eta, 1.0 / lambda, upsilon) else { continue };
                let c0 = 1.0 / lambda + rng.random_range(-0.99..0.99) * p.delta;
                let Certificate::Issued(p) = contraction_certificate(lambda, eta, c0, upsilon) else { continue };
                certified += 1;
                for (k, c) in p.trajectory(100).into_iter().enumerate() {
                    if (c - 1.0 / lambda).abs() > p.bound(k) * (1.0 + 1e-9) + 1e-14 {
                        violations += 1;
                    }
                }
            }
            Ok((violations == 0, format!("{violations} violations over {certified} tuples")))
        })(),
    );
    s.check(
        "riccati matches rk4",
        (|| {
            let mut worst: f64 = 0.0;
            for i in 0..=50 {
                let t = 0.1 * i as f64;
                worst = worst.max((riccati_sigma(t, 0.5)? - riccati_sigma_rk4(t, 0.5, 1e-3)).abs());
            }
            Ok((worst < 1e-6, format!("max deviation {worst:.2e}")))
        })(),
    );
    s.check(
        "variance ratio increases",
        (|| {
            let r: Vec<f64> = (10..=50).map(|i| variance_ratio(0.1 * i as f64, 0.5)).collect::<Result<_>>()?;
            let ok = r[0] > 1.0 && r.windows(2).all(|w| w[1] > w[0]);
            Ok((ok, format!("ratio {:.4} at t=1, {:.4} at t=5", r[0], r[40])))
        })(),
    );
}

fn triple(rng: &mut ChaCha8Rng) -> GaussianTriple {
    let mut s = || rng.random_range(0.5..2.0);
    GaussianTriple { sigma_g: s(), sigma_1: s(), sigma_2: s(), sigma_pi: s() }
}

fn three_point(s: &mut Suite, seed: u64) {
    s.check(
        "closed form",
        (|| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut worst: f64 = 0.0;
            for _ in 0..1000 {
                worst = worst.max(gaussian_three_point(triple(&mut rng))?.residual().abs());
            }
            Ok((worst < 1e-12, format!("max residual {worst:.2e}")))
        })(),
    );
    s.check(
        "quadrature",
        (|| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 1));
            let qy = QuadratureSpec::new(256, (-12.0, 12.0))?;
            let qx = QuadratureSpec::new(256, (-14.0, 14.0))?;
            let n = |s: f64| Target1D::Normal { mean: 0.0, sd: s };
            let mut worst: f64 = 0.0;
            for _ in 0..5 {
                let t = triple(&mut rng);
                let r = three_point_quadrature(&n(t.sigma_pi), &n(t.sigma_1), &n(t.sigma_2), &n(t.sigma_g), &qy, &qx)?;
                worst = worst.max(r.residual().abs());
            }
            Ok((worst < 1e-5, format!("max residual {worst:.2e}")))
        })(),
    );
}

fn convexity(s: &mut Suite, seed: u64) {
    s.check(
        "KL dominates scaled B_G",
        (|| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut worst = f64::INFINITY;
            for _ in 0..1000 {
                let t = triple(&mut rng);
                // λ = σ_g⁻², β = σ_ρ/σ_g for centred Gaussians
                let gap = gaussian_kl(t.sigma_pi, t.sigma_1)
                    - t.sigma_g / (t.sigma_g * t.sigma_g * t.sigma_1) * gaussian_bg(t.sigma_pi, t.sigma_1, t.sigma_g);
                worst = worst.min(gap);
            }
            Ok((worst >= -1e-6, format!("min gap {worst:.2e}")))
        })(),
    );
}

fn sinkhorn(s: &mut Suite) {
    s.check(
        "residual shrinks with epsilon",
        (|| {
            let quad = QuadratureSpec::new(1024, (-10.0, 10.0))?;
            let n = standard_normal();
            let psi = PotentialStack::new(1.3)?;
            let probes = [-1.0, 0.0, 0.5, 1.5];
            let r: Vec<f64> =
                [0.2, 0.1, 0.05].iter().map(|&e| sinkhorn_residual(&psi, e, &n, &n, &quad, &probes)).collect::<Result<_>>()?;
            Ok((r.windows(2).all(|w| w[1] < w[0]), format!("{r:.4?}")))
        })(),
    );
}

fn vi(s: &mut Suite) {
    s.check(
        "logistic stationarity at k=50",
        (|| {
            let cfg = VIConfig { mc: Expectation::exact(), ..VIConfig::logistic_default(0) };
            let last = *vi_run(&cfg)?.last().unwrap();
            Ok((last.err1.abs() < 0.02 && last.err2.abs() < 0.02, format!("err1 {:.2e} err2 {:.2e}", last.err1, last.err2)))
        })(),
    );
    s.check(
        "stationary state is fixed",
        (|| {
            let t = VITargetScalar::Gaussian { mean: 0.7, sd: 1.0 };
            let n = vi_step(VIState { m: 0.7, s: 1.0, k: 0 }, 0.3, 1.0, &t, &Expectation::exact())?;
            let d = (n.m - 0.7).abs().max((n.s - 1.0).abs());
            Ok((d < 1e-12, format!("moved by {d:.1e}")))
        })(),
    );
}

fn learners(s: &mut Suite, seed: u64, flip: bool) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let target = Target1D::Normal { mean: 1.0, sd: 1.0 }.sample_n(3000, &mut rng);
    let model = standard_normal().sample_n(3000, &mut rng);
    s.check(
        "logistic update moves toward target",
        (|| {
            let (a, b) = if flip { (&model, &target) } else { (&target, &model) };
            let (h, _) = logistic_fit(a, b, &learner_defaults(), derive_seed(seed, 1))?;
            // from the identity, ψ_1'(y) = y − η·ĥ'(y); the map must move mass right
            let shift = -tenths(-1.0, 1.0).map(|x| h.jet(x).d1).sum::<f64>() / 21.0;
            let err = tenths(-1.0, 2.0).map(|x| (h.value(x) - (0.5 - x)).abs()).fold(0.0, f64::max);
            Ok((shift > 0.0 && err < 0.3, format!("mean shift {shift:.3}, sup error vs 0.5 - x {err:.3}")))
        })(),
    );
    s.check(
        "score recovers -x",
        (|| {
            let (sc, _) = score_fit(&model, &learner_defaults(), derive_seed(seed, 2))?;
            let err = tenths(-2.0, 2.0).map(|x| (sc.value(x) + x).abs()).fold(0.0, f64::max);
            Ok((err < 0.2, format!("sup error {err:.3}")))
        })(),
    );
}

fn flow(s: &mut Suite) {
    s.check(
        "target = reference stays put",
        (|| {
            let n = standard_normal();
            let run = flow_run(&FlowConfig::new(n.clone(), n, StepSchedule::Constant { eta: 0.3 }, 2, FlowMode::Oracle))?;
            let kl = run.trace.records.iter().map(|r| r.kl.abs()).fold(0.0, f64::max);
            Ok((run.failure.is_none() && kl < 1e-10, format!("max |KL| {kl:.1e}")))
        })(),
    );
    s.check(
        "oracle identity per step",
        (|| {
            let sched = StepSchedule::Adaptive(AdaptiveRule::standard(AdaptiveMode::Min));
            let run = flow_run(&FlowConfig::new(bimodal_mixture(), standard_normal(), sched, 3, FlowMode::Oracle))?;
            if let Some(e) = run.failure {
                return Ok((false, e.to_string()));
            }
            let worst = run.trace.records.iter().map(|r| r.avg_identity_residual).fold(0.0, f64::max);
            let convex = run.trace.records.iter().all(|r| r.min_hess > 0.0);
            Ok((worst < 1e-5 && convex, format!("max residual {worst:.1e}")))
        })(),
    );
}

/// a, a + 0.1, …, b.
fn tenths(a: f64, b: f64) -> impl Iterator<Item = f64> {
    let n = ((b - a) * 10.0).round() as usize;
    (0..=n).map(move |i| a + 0.1 * i as f64)
}
