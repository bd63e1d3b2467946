//! Closed-form univariate Gaussian dynamics and the Sinkhorn scaling-limit residual.
//!
//! With target N(0,1), reference N(0,λ²) and ψ_t'(y) = c_t·y, the flow
//! reduces to the Riccati equation ċ = −c² + λ⁻², solved in closed form by
//! σ_t = λc_t = tanh(t/λ + artanh λ). The discrete flow is the map
//! c ↦ c − η(c² − λ⁻²).

use serde::{Deserialize, Serialize};

use crate::error::{arg, Error, Result};
use crate::flow::target::Target1D;
use crate::potential::PotentialStack;
use crate::quadrature::QuadratureSpec;

/// σ_t for the Riccati flow started at the identity map.
pub fn riccati_sigma(t: f64, lambda: f64) -> Result<f64> {
    if !(lambda > 0.0 && lambda < 1.0) {
        return arg(format!("riccati_sigma needs 0 < lambda < 1, got {lambda}"));
    }
    if !(t >= 0.0) {
        return arg(format!("time must be nonnegative, got {t}"));
    }
    Ok((t / lambda + lambda.atanh()).tanh())
}

/// Independent RK4 integration of ċ = −c² + λ⁻², c(0) = 1, returning λ·c(t).
pub fn riccati_sigma_rk4(t: f64, lambda: f64, dt: f64) -> f64 {
    let rhs = |c: f64| -c * c + 1.0 / (lambda * lambda);
    let steps = (t / dt).ceil().max(1.0) as usize;
    let h = t / steps as f64;
    let mut c = 1.0;
    for _ in 0..steps {
        let k1 = rhs(c);
        let k2 = rhs(c + 0.5 * h * k1);
        let k3 = rhs(c + 0.5 * h * k2);
        let k4 = rhs(c + h * k3);
        c += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    }
    lambda * c
}

/// Variance of the Ornstein–Uhlenbeck flow from N(0,λ²) towards N(0,1).
pub fn fokker_planck_sigma_sq(t: f64, lambda: f64) -> f64 {
    1.0 - (1.0 - lambda * lambda) * (-2.0 * t).exp()
}

/// (1 − σ²_{F,t}) / (1 − σ_t²).
pub fn variance_ratio(t: f64, lambda: f64) -> Result<f64> {
    let s = riccati_sigma(t, lambda)?;
    // 1 − tanh² = sech², computed without cancellation
    let z = t / lambda + lambda.atanh();
    let one_minus_s2 = if z < 15.0 { 1.0 - s * s } else { 4.0 * (-2.0 * z).exp() };
    Ok((1.0 - lambda * lambda) * (-2.0 * t).exp() / one_minus_s2)
}

/// c − η(c² − λ⁻²).
pub fn discrete_gaussian_step(c: f64, eta: f64, lambda: f64) -> f64 {
    c - eta * (c * c - 1.0 / (lambda * lambda))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianFlowParams {
    pub lambda: f64,
    pub eta: f64,
    pub c0: f64,
    pub upsilon: f64,
    pub delta: f64,
}

impl GaussianFlowParams {
    /// Slopes c_0..c_n of the discrete flow.
    pub fn trajectory(&self, n: usize) -> Vec<f64> {
        let mut c = vec![self.c0];
        for _ in 0..n {
            let last = *c.last().unwrap();
            c.push(discrete_gaussian_step(last, self.eta, self.lambda));
        }
        c
    }

    /// υ^k |c_0 − λ⁻¹|.
    pub fn bound(&self, k: usize) -> f64 {
        self.upsilon.powi(k as i32) * (self.c0 - 1.0 / self.lambda).abs()
    }
}

/// The first violated hypothesis of the contraction statement.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Rejection {
    LambdaNotPositive,
    EtaOutsideZeroLambda,
    UpsilonOutOfRange { lower: f64 },
    BasinEmpty { delta: f64 },
    StartOutsideBasin { distance: f64, delta: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Certificate {
    Issued(GaussianFlowParams),
    Rejected(Rejection),
}

pub fn contraction_certificate(lambda: f64, eta: f64, c0: f64, upsilon: f64) -> Certificate {
    use Rejection::*;
    let reject = |r| Certificate::Rejected(r);
    if !(lambda > 0.0) {
        return reject(LambdaNotPositive);
    }
    if !(eta > 0.0 && eta < lambda) {
        return reject(EtaOutsideZeroLambda);
    }
    let lower = (1.0 - 2.0 * eta / lambda).abs();
    if !(upsilon > lower && upsilon < 1.0) {
        return reject(UpsilonOutOfRange { lower });
    }
    let delta = (2.0 * eta - lambda * (1.0 - upsilon)).min(lambda * (1.0 + upsilon) - 2.0 * eta) / (2.0 * eta * lambda);
    if !(delta > 0.0) {
        return reject(BasinEmpty { delta });
    }
    let distance = (c0 - 1.0 / lambda).abs();
    if !(distance < delta) {
        return reject(StartOutsideBasin { distance, delta });
    }
    Certificate::Issued(GaussianFlowParams { lambda, eta, c0, upsilon, delta })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianTriple {
    pub sigma_g: f64,
    pub sigma_1: f64,
    pub sigma_2: f64,
    pub sigma_pi: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThreePointRecord {
    pub lhs: f64,
    pub bg_pi_rho1: f64,
    pub bg_pi_rho2: f64,
    pub bg_gpi: f64,
}

impl ThreePointRecord {
    pub fn residual(&self) -> f64 {
        self.lhs - (self.bg_pi_rho1 - self.bg_pi_rho2 + self.bg_gpi)
    }
}

/// Centered-Gaussian closed forms of both sides of the three-point identity.
pub fn gaussian_three_point(t: GaussianTriple) -> Result<ThreePointRecord> {
    let GaussianTriple { sigma_g: g, sigma_1: s1, sigma_2: s2, sigma_pi: p } = t;
    if !(g > 0.0 && s1 > 0.0 && s2 > 0.0 && p > 0.0) {
        return arg(format!("standard deviations must be positive: {t:?}"));
    }
    Ok(ThreePointRecord {
        lhs: 0.5 * g * (s1 - s2) * (1.0 - p * p / (s1 * s1)),
        bg_pi_rho1: 0.5 * (g / s1) * (p - s1).powi(2),
        bg_pi_rho2: 0.5 * (g / s2) * (p - s2).powi(2),
        bg_gpi: 0.5 * g * p * p * s2 * (1.0 / s1 - 1.0 / s2).powi(2),
    })
}

/// Closed-form Gaussian KL(N(0,a²)|N(0,b²)).
pub fn gaussian_kl(a: f64, b: f64) -> f64 {
    0.5 * ((a * a) / (b * b) - 1.0 + 2.0 * (b / a).ln())
}

/// Closed-form B_G(N(0,σπ²)|N(0,σρ²)) with reference N(0,σg²).
pub fn gaussian_bg(sigma_pi: f64, sigma_rho: f64, sigma_g: f64) -> f64 {
    0.5 * (sigma_g / sigma_rho) * (sigma_pi - sigma_rho).powi(2)
}

/// ln ∫ e^{a_i} w_i over pairs (a_i, ln w_i), plus the largest term for tail checks.
fn log_sum_exp(terms: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = terms.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + terms.map(|t| (t - m).exp()).sum::<f64>().ln()
}

/// Relative size of the boundary terms of a log-integrand; tail-truncation estimate.
fn tail_mass(log_terms: &[f64]) -> f64 {
    let m = log_terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let ends = log_terms[0].max(log_terms[log_terms.len() - 1]);
    (ends - m).exp()
}

/// max over probes of |(Ṽ^ε[ψ](y) − ψ(y))/ε − (−f(ψ'(y)) + g(y) + log ψ''(y))|.
///
/// Ṽ^ε(y) = ε log ∫ e^{xy/ε − f(x)} / Z(x) dx with
/// Z(x) = ∫ e^{(xy' − ψ(y'))/ε − g(y')} dy', both integrals by
/// log-sum-exp Gauss–Legendre on the quadrature domain.
pub fn sinkhorn_residual(
    psi: &PotentialStack,
    epsilon: f64,
    f: &Target1D,
    g: &Target1D,
    quad: &QuadratureSpec,
    probes: &[f64],
) -> Result<f64> {
    Ok(sinkhorn_profile(psi, epsilon, f, g, quad, probes)?.into_iter().map(|(_, r)| r.abs()).fold(0.0, f64::max))
}

/// Signed residual at every probe.
pub fn sinkhorn_profile(
    psi: &PotentialStack,
    epsilon: f64,
    f: &Target1D,
    g: &Target1D,
    quad: &QuadratureSpec,
    probes: &[f64],
) -> Result<Vec<(f64, f64)>> {
    if !(epsilon > 0.0) {
        return arg(format!("epsilon must be positive, got {epsilon}"));
    }
    let pts = quad.points();
    let ln_w: Vec<f64> = pts.iter().map(|p| p.1.ln()).collect();
    let xs: Vec<f64> = pts.iter().map(|p| p.0).collect();
    let mut psi_y = Vec::with_capacity(xs.len());
    for &y in &xs {
        psi_y.push(psi.jet_eval(y)?.v);
    }
    let a_y: Vec<f64> = (0..xs.len()).map(|j| -psi_y[j] / epsilon - g.f(xs[j]) + ln_w[j]).collect();
    let mut log_z = Vec::with_capacity(xs.len());
    let mut row = vec![0.0; xs.len()];
    for &x in &xs {
        for j in 0..xs.len() {
            row[j] = x * xs[j] / epsilon + a_y[j];
        }
        if tail_mass(&row) > 1e-12 && x.abs() < 0.5 * quad.domain.1.max(-quad.domain.0) {
            return Err(Error::Numeric(format!("inner Sinkhorn integral not converged at x = {x}")));
        }
        log_z.push(log_sum_exp(row.iter().copied()));
    }
    let b_x: Vec<f64> = (0..xs.len()).map(|i| -f.f(xs[i]) - log_z[i] + ln_w[i]).collect();
    let mut out = Vec::with_capacity(probes.len());
    for &y in probes {
        for i in 0..xs.len() {
            row[i] = xs[i] * y / epsilon + b_x[i];
        }
        if tail_mass(&row) > 1e-12 {
            return Err(Error::Numeric(format!("outer Sinkhorn integral not converged at y = {y}")));
        }
        let v_over_eps = log_sum_exp(row.iter().copied());
        let j = psi.jet_eval(y)?;
        if !(j.d2 > 0.0) {
            return Err(Error::Convexity { y, d2: j.d2 });
        }
        let rhs = -f.f(j.d1) + g.f(y) + j.d2.ln();
        out.push((y, v_over_eps - j.v / epsilon - rhs));
    }
    Ok(out)
}

/// Exact residual for ψ = c·y²/2 with f = g = N(0,1):
/// Ṽ/ε = ½ ln(b/a) + y²/(2ε²a), b = c/ε + 1, a = 1 + 1/(ε²b).
pub fn sinkhorn_residual_exact_quadratic(c: f64, epsilon: f64, y: f64) -> f64 {
    let b = c / epsilon + 1.0;
    let a = 1.0 + 1.0 / (epsilon * epsilon * b);
    let v_over_eps = 0.5 * (b / a).ln() + y * y / (2.0 * epsilon * epsilon * a);
    let rhs = -0.5 * c * c * y * y + 0.5 * y * y + c.ln();
    v_over_eps - c * y * y / (2.0 * epsilon) - rhs
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::target::standard_normal;

    #[test]
    fn riccati_examples() {
        assert!((riccati_sigma(0.0, 0.5).unwrap() - 0.5).abs() < 1e-15);
        assert!((riccati_sigma(1.0, 0.5).unwrap() - 0.98786).abs() < 1e-5);
        assert!((riccati_sigma(1.0, 0.5).unwrap() - riccati_sigma_rk4(1.0, 0.5, 1e-4)).abs() < 1e-10);
        assert!((riccati_sigma(10.0, 0.5).unwrap() - 1.0).abs() < 1e-8);
        assert!(riccati_sigma(1.0, 1.0).is_err());
    }

    #[test]
    fn fokker_planck_examples() {
        assert!((fokker_planck_sigma_sq(0.0, 0.5) - 0.25).abs() < 1e-15);
        assert!((fokker_planck_sigma_sq(1.0, 0.5) - 0.89850).abs() < 1e-5);
        // Euler integration of v' = 2(1 − v)
        let mut v = 0.25;
        let h = 1e-5;
        for _ in 0..100_000 {
            v += h * 2.0 * (1.0 - v);
        }
        assert!((v - fokker_planck_sigma_sq(1.0, 0.5)).abs() < 1e-5);
    }

    #[test]
    fn ratio_examples() {
        assert!((variance_ratio(0.0, 0.5).unwrap() - 1.0).abs() < 1e-12);
        let r1 = variance_ratio(1.0, 0.5).unwrap();
        assert!((r1 - 4.2).abs() < 0.1, "{r1}");
        assert!(variance_ratio(5.0, 0.5).unwrap() > variance_ratio(4.0, 0.5).unwrap());
    }

    #[test]
    fn discrete_step_examples() {
        assert_eq!(discrete_gaussian_step(2.0, 0.3, 0.5), 2.0);
        assert!((discrete_gaussian_step(2.0, 0.1, 1.0) - 1.7).abs() < 1e-15);
        assert!((discrete_gaussian_step(1.0, 0.4, 0.5) - 2.2).abs() < 1e-15);
    }

    #[test]
    fn certificate_examples() {
        match contraction_certificate(1.0, 0.4, 1.2, 0.5) {
            Certificate::Issued(p) => assert!((p.delta - 0.375).abs() < 1e-15),
            other => panic!("{other:?}"),
        }
        assert_eq!(contraction_certificate(1.0, 1.5, 1.0, 0.5), Certificate::Rejected(Rejection::EtaOutsideZeroLambda));
        match contraction_certificate(0.5, 0.4, 2.0, 0.7) {
            Certificate::Issued(p) => assert!((p.delta - 0.125).abs() < 1e-12),
            other => panic!("{other:?}"),
        }
        assert!(matches!(contraction_certificate(1.0, 0.4, 1.2, 0.1), Certificate::Rejected(Rejection::UpsilonOutOfRange { .. })));
        assert!(matches!(contraction_certificate(1.0, 0.4, 2.0, 0.5), Certificate::Rejected(Rejection::StartOutsideBasin { .. })));
    }

    #[test]
    fn three_point_examples() {
        let r = gaussian_three_point(GaussianTriple { sigma_g: 1.0, sigma_1: 2.0, sigma_2: 1.0, sigma_pi: 1.0 }).unwrap();
        assert_eq!((r.lhs, r.bg_pi_rho1, r.bg_pi_rho2, r.bg_gpi), (0.375, 0.25, 0.0, 0.125));
        let r = gaussian_three_point(GaussianTriple { sigma_g: 1.3, sigma_1: 0.7, sigma_2: 0.7, sigma_pi: 2.0 }).unwrap();
        assert_eq!(r.lhs, 0.0);
        assert_eq!(r.bg_gpi, 0.0);
        assert_eq!(r.bg_pi_rho1, r.bg_pi_rho2);
        let r = gaussian_three_point(GaussianTriple { sigma_g: 1.0, sigma_1: 1.5, sigma_2: 0.4, sigma_pi: 1.5 }).unwrap();
        assert_eq!(r.lhs, 0.0);
        assert!(gaussian_three_point(GaussianTriple { sigma_g: 0.0, sigma_1: 1.0, sigma_2: 1.0, sigma_pi: 1.0 }).is_err());
    }

    #[test]
    fn sinkhorn_quadrature_matches_closed_form() {
        let q = QuadratureSpec::new(2048, (-10.0, 10.0)).unwrap();
        let probes: Vec<f64> = (-4..=4).map(|i| 0.5 * i as f64).collect();
        for (c, eps) in [(1.0, 0.2), (1.3, 0.1), (1.3, 0.025)] {
            let psi = PotentialStack::new(c).unwrap();
            let prof = sinkhorn_profile(&psi, eps, &standard_normal(), &standard_normal(), &q, &probes).unwrap();
            for (y, r) in prof {
                let exact = sinkhorn_residual_exact_quadratic(c, eps, y);
                assert!((r - exact).abs() < 1e-8, "c={c} eps={eps} y={y}: {r} vs {exact}");
            }
        }
    }

    #[test]
    fn sinkhorn_symmetric_probe_is_finite() {
        let q = QuadratureSpec::new(1024, (-10.0, 10.0)).unwrap();
        let psi = PotentialStack::new(1.3).unwrap();
        let r = sinkhorn_residual(&psi, 0.1, &standard_normal(), &standard_normal(), &q, &[0.0]).unwrap();
        assert!(r.is_finite());
    }

    #[test]
    fn sinkhorn_rate_on_quadratic() {
        let q = QuadratureSpec::new(2048, (-10.0, 10.0)).unwrap();
        let probes: Vec<f64> = (-4..=4).map(|i| 0.5 * i as f64).collect();
        let psi = PotentialStack::new(1.3).unwrap();
        let eps = [0.2, 0.1, 0.05, 0.025];
        let r: Vec<f64> =
            eps.iter().map(|&e| sinkhorn_residual(&psi, e, &standard_normal(), &standard_normal(), &q, &probes).unwrap()).collect();
        assert!(r.windows(2).all(|w| w[0] > w[1]));
        // the halving ratio only approaches 2 asymptotically: 1.39, 1.70, 1.85 here
        let ratios: Vec<f64> = r.windows(2).map(|w| w[0] / w[1]).collect();
        assert!(ratios.windows(2).all(|w| w[1] > w[0]));
        assert!((1.8..2.0).contains(&ratios[2]), "{ratios:?}");
    }

    #[test]
    fn riccati_dominates_fokker_planck() {
        for lambda in [0.1, 0.3, 0.5, 0.7, 0.9, 0.99] {
            for t in [1.0, 1.5, 2.0, 3.0, 5.0] {
                let s = riccati_sigma(t, lambda).unwrap();
                assert!(1.0 - s * s < 1.0 - fokker_planck_sigma_sq(t, lambda));
            }
        }
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(200))]

        #[test]
        fn certified_tuples_contract(
            lambda in 0.05f64..1.0,
            eta_frac in 0.01f64..0.99,
            ups_frac in 0.01f64..0.99,
            c_frac in -0.99f64..0.99,
        ) {
            let eta = eta_frac * lambda;
            let lower = (1.0 - 2.0 * eta / lambda).abs();
            let upsilon = lower + ups_frac * (1.0 - lower);
            let delta = (2.0 * eta - lambda * (1.0 - upsilon)).min(lambda * (1.0 + upsilon) - 2.0 * eta) / (2.0 * eta * lambda);
            proptest::prop_assume!(delta > 0.0);
            let c0 = 1.0 / lambda + c_frac * delta;
            let Certificate::Issued(p) = contraction_certificate(lambda, eta, c0, upsilon) else {
                return Err(proptest::test_runner::TestCaseError::fail("certificate refused"));
            };
            let traj = p.trajectory(100);
            let (lo, hi) = ((1.0 - upsilon) / (2.0 * eta), (1.0 + upsilon) / (2.0 * eta));
            for (k, &c) in traj.iter().enumerate() {
                proptest::prop_assert!((c - 1.0 / lambda).abs() <= p.bound(k) * (1.0 + 1e-9) + 1e-14);
                proptest::prop_assert!(c > lo && c < hi);
                let sk = lambda * c;
                proptest::prop_assert!((sk - 1.0).abs() <= upsilon.powi(k as i32) * (lambda * c0 - 1.0).abs() * (1.0 + 1e-9) + 1e-14);
            }
        }

        #[test]
        fn three_point_identity_holds(
            g in 0.2f64..5.0, s1 in 0.2f64..5.0, s2 in 0.2f64..5.0, p in 0.2f64..5.0,
        ) {
            let r = gaussian_three_point(GaussianTriple { sigma_g: g, sigma_1: s1, sigma_2: s2, sigma_pi: p }).unwrap();
            proptest::prop_assert!(r.residual().abs() < 1e-12 * (1.0 + r.lhs.abs().max(r.bg_pi_rho1)));
        }

        #[test]
        fn relative_convexity_closed_form(g in 0.2f64..5.0, rho in 0.2f64..5.0, p in 0.2f64..5.0) {
            let lambda_g = 1.0 / (g * g);
            let beta = rho / g;
            proptest::prop_assert!(gaussian_kl(p, rho) >= lambda_g / beta * gaussian_bg(p, rho, g) - 1e-12);
        }
    }
}
