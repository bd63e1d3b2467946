//! Univariate Gaussian variational inference by the G_η fixed-point map.
//!
//! Expectations over `Y ~ N(0, λ²)` are taken either by Gauss–Hermite
//! quadrature (deterministic) or by seeded Monte Carlo.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{arg, Error, Result};
use crate::quadrature::hermite_normal;
use crate::seed::derive_seed;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VIState {
    pub m: f64,
    pub s: f64,
    pub k: usize,
}

/// Target given through f′ and f″ of its negative log-density.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum VITargetScalar {
    /// Standard logistic distribution: f′ = 2σ(x) − 1, f″ = 2σ(x)(1 − σ(x)).
    Logistic,
    Gaussian {
        mean: f64,
        sd: f64,
    },
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl VITargetScalar {
    pub fn f_d1(&self, x: f64) -> f64 {
        match *self {
            Self::Logistic => 2.0 * sigmoid(x) - 1.0,
            Self::Gaussian { mean, sd } => (x - mean) / (sd * sd),
        }
    }

    pub fn f_d2(&self, x: f64) -> f64 {
        match *self {
            Self::Logistic => {
                let s = sigmoid(x);
                2.0 * s * (1.0 - s)
            }
            Self::Gaussian { sd, .. } => 1.0 / (sd * sd),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Expectation {
    Quadrature {
        nodes: usize,
    },
    /// Fresh draws per call, seeded by `derive_seed(seed, k)`.
    MonteCarlo {
        draws: usize,
        seed: u64,
    },
}

impl Expectation {
    pub fn exact() -> Self {
        Expectation::Quadrature { nodes: 64 }
    }

    /// Nodes and weights for Y ~ N(0, λ²) at iteration `k`.
    fn rule(&self, lambda: f64, k: usize) -> Result<Vec<(f64, f64)>> {
        match *self {
            Expectation::Quadrature { nodes } => Ok(hermite_normal(nodes, lambda)),
            Expectation::MonteCarlo { draws, seed } => {
                if draws == 0 {
                    return arg("Monte Carlo mode needs at least one draw");
                }
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, k as u64));
                let n = Normal::new(0.0, lambda).map_err(|e| Error::Argument(e.to_string()))?;
                let w = 1.0 / draws as f64;
                Ok((0..draws).map(|_| (n.sample(&mut rng), w)).collect())
            }
        }
    }
}

/// (E f′(X), E f″(X)) with X = (s/λ)Y + m.
fn moments(state: &VIState, lambda: f64, target: &VITargetScalar, mc: &Expectation) -> Result<(f64, f64)> {
    let scale = state.s / lambda;
    let (mut e1, mut e2) = (0.0, 0.0);
    for (y, w) in mc.rule(lambda, state.k)? {
        let x = scale * y + state.m;
        e1 += w * target.f_d1(x);
        e2 += w * target.f_d2(x);
    }
    Ok((e1, e2))
}

fn check(state: &VIState, lambda: f64) -> Result<()> {
    if !(state.s > 0.0 && state.s.is_finite()) {
        return arg(format!("variational sd must be positive, got {}", state.s));
    }
    if !(lambda > 0.0 && lambda.is_finite()) {
        return arg(format!("lambda must be positive, got {lambda}"));
    }
    Ok(())
}

/// G_η(m, s) = (m − (ηs/λ)E f′, s − (η/λ²)(s² E f″ − 1)).
pub fn vi_step(state: VIState, eta: f64, lambda: f64, target: &VITargetScalar, mc: &Expectation) -> Result<VIState> {
    check(&state, lambda)?;
    if !(eta > 0.0) {
        return arg(format!("step size must be positive, got {eta}"));
    }
    let (e1, e2) = moments(&state, lambda, target, mc)?;
    let m = state.m - eta * state.s / lambda * e1;
    let s = state.s - eta / (lambda * lambda) * (state.s * state.s * e2 - 1.0);
    if !(s > 0.0) {
        return Err(Error::StepSize(s));
    }
    Ok(VIState { m, s, k: state.k + 1 })
}

/// η = ½s / (1 + |s² E f″ − 1|).
pub fn vi_adaptive_eta(prev: VIState, lambda: f64, target: &VITargetScalar, mc: &Expectation) -> Result<f64> {
    check(&prev, lambda)?;
    let (_, e2) = moments(&prev, lambda, target, mc)?;
    Ok(0.5 * prev.s / (1.0 + (prev.s * prev.s * e2 - 1.0).abs()))
}

/// (E f′(X), E f″(X) − s⁻²) under X ~ N(m, s²).
pub fn stationarity_errors(state: VIState, target: &VITargetScalar, mc: &Expectation) -> Result<(f64, f64)> {
    check(&state, 1.0)?;
    let (e1, e2) = moments(&state, 1.0, target, mc)?;
    Ok((e1, e2 - 1.0 / (state.s * state.s)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VIConfig {
    pub target: VITargetScalar,
    pub lambda: f64,
    pub m0: f64,
    pub s0: f64,
    pub t: usize,
    pub mc: Expectation,
    /// Fixed step; `None` selects the adaptive rule.
    pub eta: Option<f64>,
}

impl VIConfig {
    /// Logistic target, λ = 1, (m0, σ0) = (10, 1), 50 adaptive steps, 1000 draws.
    pub fn logistic_default(seed: u64) -> Self {
        Self {
            target: VITargetScalar::Logistic,
            lambda: 1.0,
            m0: 10.0,
            s0: 1.0,
            t: 50,
            mc: Expectation::MonteCarlo { draws: 1000, seed },
            eta: None,
        }
    }
}

/// One trace row; `eta` is the step that produced this state (0 for k = 0).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VIRecord {
    pub state: VIState,
    pub eta: f64,
    pub err1: f64,
    pub err2: f64,
}

pub fn vi_run(cfg: &VIConfig) -> Result<Vec<VIRecord>> {
    let mut state = VIState { m: cfg.m0, s: cfg.s0, k: 0 };
    let (err1, err2) = stationarity_errors(state, &cfg.target, &cfg.mc)?;
    let mut out = vec![VIRecord { state, eta: 0.0, err1, err2 }];
    for _ in 0..cfg.t {
        let eta = match cfg.eta {
            Some(e) => e,
            None => vi_adaptive_eta(state, cfg.lambda, &cfg.target, &cfg.mc)?,
        };
        state = vi_step(state, eta, cfg.lambda, &cfg.target, &cfg.mc)?;
        let (err1, err2) = stationarity_errors(state, &cfg.target, &cfg.mc)?;
        out.push(VIRecord { state, eta, err1, err2 });
    }
    Ok(out)
}

pub fn write_vi_csv<W: Write>(rows: &[VIRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| Error::Numeric(format!("csv: {e}"));
    w.write_record(["k", "m", "s", "eta", "err1", "err2"]).map_err(io)?;
    for r in rows {
        w.write_record([
            r.state.k.to_string(),
            format!("{:?}", r.state.m),
            format!("{:?}", r.state.s),
            format!("{:?}", r.eta),
            format!("{:?}", r.err1),
            format!("{:?}", r.err2),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| Error::Numeric(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const N01: VITargetScalar = VITargetScalar::Gaussian { mean: 0.0, sd: 1.0 };

    #[test]
    fn step_examples() {
        let ex = Expectation::exact();
        let s = vi_step(VIState { m: 1.0, s: 1.0, k: 0 }, 0.1, 1.0, &N01, &ex).unwrap();
        assert!((s.m - 0.9).abs() < 1e-14 && (s.s - 1.0).abs() < 1e-14);
        let s = vi_step(VIState { m: 0.0, s: 1.0, k: 0 }, 0.7, 1.0, &N01, &ex).unwrap();
        assert!(s.m.abs() < 1e-14 && (s.s - 1.0).abs() < 1e-14);
        let s = vi_step(VIState { m: 0.0, s: 2.3, k: 0 }, 0.2, 1.0, &VITargetScalar::Logistic, &ex).unwrap();
        assert!(s.m.abs() < 1e-14);
    }

    #[test]
    fn oversized_step_is_rejected() {
        let r = vi_step(VIState { m: 0.0, s: 3.0, k: 0 }, 1.0, 1.0, &N01, &Expectation::exact());
        assert!(matches!(r, Err(Error::StepSize(_))));
    }

    #[test]
    fn adaptive_eta_examples() {
        let ex = Expectation::exact();
        assert!((vi_adaptive_eta(VIState { m: 0.3, s: 1.0, k: 0 }, 1.0, &N01, &ex).unwrap() - 0.5).abs() < 1e-14);
        assert!(vi_adaptive_eta(VIState { m: 0.0, s: 1e-9, k: 0 }, 1.0, &N01, &ex).unwrap() < 1e-9);
        let eta = vi_adaptive_eta(VIState { m: 10.0, s: 1.0, k: 0 }, 1.0, &VITargetScalar::Logistic, &ex).unwrap();
        assert!(eta > 0.25 && eta < 0.5, "{eta}");
    }

    #[test]
    fn f_d2_matches_finite_differences() {
        for t in [VITargetScalar::Logistic, VITargetScalar::Gaussian { mean: 1.0, sd: 0.7 }] {
            for x in [-5.0, -0.3, 0.0, 1.1, 8.0] {
                let h = 1e-5;
                let fd = (t.f_d1(x + h) - t.f_d1(x - h)) / (2.0 * h);
                assert!((fd - t.f_d2(x)).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn stationarity_examples() {
        let ex = Expectation::exact();
        let (a, b) = stationarity_errors(VIState { m: 0.0, s: 1.0, k: 0 }, &N01, &ex).unwrap();
        assert!(a.abs() < 1e-14 && b.abs() < 1e-14);
        let (a, _) = stationarity_errors(VIState { m: 0.0, s: 1.7, k: 0 }, &VITargetScalar::Logistic, &ex).unwrap();
        assert!(a.abs() < 1e-14);
    }

    #[test]
    fn logistic_reaches_stationarity() {
        let mut cfg = VIConfig::logistic_default(0);
        cfg.mc = Expectation::exact();
        let rows = vi_run(&cfg).unwrap();
        assert_eq!(rows.len(), 51);
        let last = rows[50];
        assert!(last.err1.abs() < 0.02 && last.err2.abs() < 0.02, "{last:?}");
    }

    #[test]
    fn zero_steps_returns_initial_state() {
        let mut cfg = VIConfig::logistic_default(0);
        cfg.t = 0;
        let rows = vi_run(&cfg).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!((rows[0].state.m, rows[0].state.s), (10.0, 1.0));
    }

    #[test]
    fn monte_carlo_agrees_with_quadrature() {
        let mut cfg = VIConfig::logistic_default(9);
        cfg.mc = Expectation::MonteCarlo { draws: 1_000_000, seed: 9 };
        cfg.t = 20;
        let mc = vi_run(&cfg).unwrap();
        cfg.mc = Expectation::exact();
        let ex = vi_run(&cfg).unwrap();
        for (a, b) in mc.iter().zip(&ex) {
            assert!((a.state.m - b.state.m).abs() < 1e-2 && (a.state.s - b.state.s).abs() < 1e-2, "{a:?} {b:?}");
        }
    }

    #[test]
    fn gaussian_target_converges_monotonically() {
        let cfg = VIConfig {
            target: VITargetScalar::Gaussian { mean: 1.5, sd: 1.0 },
            lambda: 1.0,
            m0: -2.0,
            s0: 2.5,
            t: 200,
            mc: Expectation::exact(),
            eta: None,
        };
        let rows = vi_run(&cfg).unwrap();
        let gaps: Vec<f64> = rows.iter().map(|r| (r.state.m - 1.5).abs()).collect();
        assert!(gaps.windows(2).all(|w| w[1] <= w[0]));
        let last = rows.last().unwrap().state;
        assert!((last.m - 1.5).abs() < 1e-6 && (last.s - 1.0).abs() < 1e-6, "{last:?}");
    }

    #[test]
    fn symmetric_start_stays_centred() {
        let mut cfg = VIConfig::logistic_default(0);
        cfg.m0 = 0.0;
        cfg.s0 = 3.0;
        cfg.mc = Expectation::exact();
        assert!(vi_run(&cfg).unwrap().iter().all(|r| r.state.m.abs() < 1e-12));
    }

    #[test]
    fn csv_header() {
        let mut buf = Vec::new();
        write_vi_csv(&vi_run(&VIConfig::logistic_default(1)).unwrap()[..2], &mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("k,m,s,eta,err1,err2\n"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn adaptive_rule_keeps_s_positive(m0 in -20.0..20.0f64, s0 in 0.01..10.0f64) {
            let cfg = VIConfig { m0, s0, t: 30, mc: Expectation::exact(), ..VIConfig::logistic_default(0) };
            for r in vi_run(&cfg).unwrap() {
                prop_assert!(r.state.s > 0.0);
            }
        }

        #[test]
        fn stationary_state_is_fixed(eta in 0.01..2.0f64, mu in -3.0..3.0f64) {
            let t = VITargetScalar::Gaussian { mean: mu, sd: 1.0 };
            let s = vi_step(VIState { m: mu, s: 1.0, k: 0 }, eta, 1.0, &t, &Expectation::exact()).unwrap();
            prop_assert!((s.m - mu).abs() < 1e-12 && (s.s - 1.0).abs() < 1e-12);
        }
    }
}
