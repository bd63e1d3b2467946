//! Analytic one-dimensional targets and references.
//!
//! Every target is stored through its negative log-density `f`, with its
//! normalizing constant kept.

use std::f64::consts::PI;

use rand::{Rng, RngExt};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use statrs::function::erf::erfc;

use crate::divergence::Density1D;
use crate::error::{arg, Result};
use crate::jet::{sigmoid, softplus, Jet3, Taylor};

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Target1D {
    Normal {
        mean: f64,
        sd: f64,
    },
    /// `w·φ(x−a) + (1−w)·φ(x−b)` with unit-variance components.
    Mixture {
        a: f64,
        b: f64,
        weight: f64,
    },
}

pub fn standard_normal() -> Target1D {
    Target1D::Normal { mean: 0.0, sd: 1.0 }
}

/// Two-component Gaussian location mixture.
pub fn mixture_target(means: (f64, f64), weight: f64) -> Result<Target1D> {
    if !(weight > 0.0 && weight < 1.0) {
        return arg(format!("mixture weight must lie in (0,1), got {weight}"));
    }
    Ok(Target1D::Mixture { a: means.0, b: means.1, weight })
}

/// The experiment target ½φ(x−2) + ½φ(x+2).
pub fn bimodal_mixture() -> Target1D {
    Target1D::Mixture { a: 2.0, b: -2.0, weight: 0.5 }
}

pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

pub fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x - HALF_LN_2PI).exp()
}

pub fn std_normal_quantile(u: f64) -> f64 {
    let z = Normal::standard().inverse_cdf(u);
    // one Newton polish keeps cdf(quantile(u)) = u near roundoff
    let d = std_normal_pdf(z);
    if d > 0.0 {
        z - (std_normal_cdf(z) - u) / d
    } else {
        z
    }
}

/// ln Φ(x), accurate far into the lower tail where Φ underflows.
pub fn std_normal_log_cdf(x: f64) -> f64 {
    if x > -30.0 {
        return std_normal_cdf(x).ln();
    }
    // Mills-ratio series: Φ(x) = φ(x)/|x| · (1 − x⁻² + 3x⁻⁴ − 15x⁻⁶ + 105x⁻⁸ − …)
    let r = 1.0 / (x * x);
    let series = 1.0 - r * (1.0 - 3.0 * r * (1.0 - 5.0 * r * (1.0 - 7.0 * r)));
    -0.5 * x * x - HALF_LN_2PI - (-x).ln() + series.ln()
}

/// Inverse of [`std_normal_log_cdf`].
pub fn std_normal_quantile_log(lu: f64) -> f64 {
    if lu > -600.0 {
        return std_normal_quantile(lu.exp());
    }
    let mut z = -(-2.0 * lu).sqrt();
    for _ in 0..50 {
        // d/dz ln Φ = φ/Φ
        let step = (std_normal_log_cdf(z) - lu) / (-0.5 * z * z - HALF_LN_2PI - std_normal_log_cdf(z)).exp();
        z -= step;
        if step.abs() < 1e-13 * z.abs() {
            break;
        }
    }
    z
}

fn log_add(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        m
    } else {
        m + ((a - m).exp() + (b - m).exp()).ln()
    }
}

impl Target1D {
    /// Mixture constants: `f(x) = ½log2π + x²/2 − log(1−w) − b x + b²/2 − softplus(α + (a−b) x)`.
    fn mixture_parts(a: f64, b: f64, w: f64) -> (f64, f64) {
        let alpha = (w / (1.0 - w)).ln() - 0.5 * (a * a - b * b);
        (alpha, a - b)
    }

    /// f(x) = −log density.
    pub fn f(&self, x: f64) -> f64 {
        self.derivs(x)[0]
    }

    /// `[f, f', f'', f''']` at `x`.
    pub fn derivs(&self, x: f64) -> [f64; 4] {
        match *self {
            Target1D::Normal { mean, sd } => {
                let z = (x - mean) / sd;
                [0.5 * z * z + sd.ln() + HALF_LN_2PI, z / sd, 1.0 / (sd * sd), 0.0]
            }
            Target1D::Mixture { a, b, weight } => {
                let (alpha, d) = Self::mixture_parts(a, b, weight);
                let z = alpha + d * x;
                let s = sigmoid(z);
                let ds = s * (1.0 - s);
                [
                    HALF_LN_2PI + 0.5 * x * x - (1.0 - weight).ln() - b * x + 0.5 * b * b - softplus(z),
                    x - b - d * s,
                    1.0 - d * d * ds,
                    -d * d * d * ds * (1.0 - 2.0 * s),
                ]
            }
        }
    }

    pub fn jet(&self, x: Jet3) -> Jet3 {
        x.compose(self.derivs(x.v))
    }

    /// `f ∘ u` for a series `u`, at the order of `u`.
    pub fn series(&self, u: &Taylor) -> Taylor {
        match *self {
            Target1D::Normal { mean, sd } => {
                let z = u.clone().add_const(-mean).scale(1.0 / sd);
                z.mul(&z).scale(0.5).add_const(sd.ln() + HALF_LN_2PI)
            }
            Target1D::Mixture { a, b, weight } => {
                let (alpha, d) = Self::mixture_parts(a, b, weight);
                let sp = u.scale(d).add_const(alpha).softplus();
                let mut r = u.mul(u).scale(0.5);
                r.axpy(-b, u);
                let mut r = r.add_const(HALF_LN_2PI - (1.0 - weight).ln() + 0.5 * b * b);
                r.axpy(-1.0, &sp);
                r
            }
        }
    }

    pub fn density(&self, x: f64) -> f64 {
        (-self.f(x)).exp()
    }

    pub fn cdf(&self, x: f64) -> f64 {
        match *self {
            Target1D::Normal { mean, sd } => std_normal_cdf((x - mean) / sd),
            Target1D::Mixture { a, b, weight } => weight * std_normal_cdf(x - a) + (1.0 - weight) * std_normal_cdf(x - b),
        }
    }

    pub fn quantile(&self, u: f64) -> f64 {
        match *self {
            Target1D::Normal { mean, sd } => mean + sd * std_normal_quantile(u),
            Target1D::Mixture { .. } => crate::divergence::bisect_monotone(|x| self.cdf(x), u, (-10.0, 10.0), 1e-12),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let z: f64 = StandardNormal.sample(rng);
        match *self {
            Target1D::Normal { mean, sd } => mean + sd * z,
            Target1D::Mixture { a, b, weight } => {
                let u: f64 = rng.random();
                z + if u < weight { a } else { b }
            }
        }
    }

    pub fn sample_n<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<f64> {
        (0..n).map(|_| self.sample(rng)).collect()
    }

    pub fn support_hint(&self) -> (f64, f64) {
        match *self {
            Target1D::Normal { mean, sd } => (mean - 12.0 * sd, mean + 12.0 * sd),
            Target1D::Mixture { a, b, .. } => (a.min(b) - 12.0, a.max(b) + 12.0),
        }
    }
}

impl Density1D for Target1D {
    fn log_density(&self, x: f64) -> f64 {
        -self.f(x)
    }
    fn cdf(&self, x: f64) -> f64 {
        Target1D::cdf(self, x)
    }
    fn quantile(&self, u: f64) -> f64 {
        Target1D::quantile(self, u)
    }
    fn sf(&self, x: f64) -> f64 {
        match *self {
            Target1D::Normal { mean, sd } => std_normal_cdf(-(x - mean) / sd),
            Target1D::Mixture { a, b, weight } => weight * std_normal_cdf(a - x) + (1.0 - weight) * std_normal_cdf(b - x),
        }
    }
    fn log_cdf(&self, x: f64) -> f64 {
        match *self {
            Target1D::Normal { mean, sd } => std_normal_log_cdf((x - mean) / sd),
            Target1D::Mixture { a, b, weight } => {
                log_add(weight.ln() + std_normal_log_cdf(x - a), (1.0 - weight).ln() + std_normal_log_cdf(x - b))
            }
        }
    }
    fn log_sf(&self, x: f64) -> f64 {
        match *self {
            Target1D::Normal { mean, sd } => std_normal_log_cdf((mean - x) / sd),
            Target1D::Mixture { a, b, weight } => {
                log_add(weight.ln() + std_normal_log_cdf(a - x), (1.0 - weight).ln() + std_normal_log_cdf(b - x))
            }
        }
    }
    fn quantile_log(&self, lu: f64) -> f64 {
        match *self {
            Target1D::Normal { mean, sd } => mean + sd * std_normal_quantile_log(lu),
            Target1D::Mixture { .. } if lu > -600.0 => Target1D::quantile(self, lu.exp()),
            Target1D::Mixture { .. } => crate::divergence::bisect_monotone(|x| self.log_cdf(x), lu, (-10.0, 10.0), 1e-12),
        }
    }
    fn isf_log(&self, lq: f64) -> f64 {
        match *self {
            Target1D::Normal { mean, sd } => mean - sd * std_normal_quantile_log(lq),
            Target1D::Mixture { .. } if lq > -600.0 => self.isf(lq.exp()),
            Target1D::Mixture { .. } => crate::divergence::bisect_monotone(|x| -self.log_sf(x), -lq, (-10.0, 10.0), 1e-12),
        }
    }
    fn isf(&self, q: f64) -> f64 {
        match *self {
            Target1D::Normal { mean, sd } => mean - sd * std_normal_quantile(q),
            Target1D::Mixture { .. } => crate::divergence::bisect_monotone(|x| -self.sf(x), -q, (-10.0, 10.0), 1e-12),
        }
    }
    fn support_hint(&self) -> (f64, f64) {
        Target1D::support_hint(self)
    }
}

/// Lebesgue normalization constant check helper: ∫ e^{−f} over the support hint.
pub fn total_mass(t: &Target1D) -> f64 {
    let (a, b) = t.support_hint();
    crate::quadrature::legendre_composite(a, b, 1024).into_iter().map(|(x, w)| w * t.density(x)).sum()
}

/// ½ log 2π, the normalizer of the standard normal reference.
pub fn half_ln_2pi() -> f64 {
    0.5 * (2.0 * PI).ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_cdf_tail_is_continuous_and_invertible() {
        for x in [-5.0, -20.0, -29.0] {
            assert!((std_normal_log_cdf(x) - std_normal_cdf(x).ln()).abs() < 1e-10 * std_normal_cdf(x).ln().abs());
        }
        // the series branch starts at −30, where the direct cdf is still representable
        let (a, b) = (std_normal_cdf(-30.0).ln(), std_normal_log_cdf(-30.0));
        assert!((a - b).abs() < 1e-10 * a.abs(), "{a} vs {b}");
        for x in [-3.0, -31.0, -60.0, -200.0] {
            let back = std_normal_quantile_log(std_normal_log_cdf(x));
            assert!((back - x).abs() < 1e-9 * x.abs(), "{x} -> {back}");
        }
    }

    #[test]
    fn mixture_log_tails_match_direct_values() {
        let t = bimodal_mixture();
        for x in [-6.0, -1.0, 3.0] {
            assert!((t.log_cdf(x) - t.cdf(x).ln()).abs() < 1e-12);
            assert!((t.log_sf(x) - Density1D::sf(&t, x).ln()).abs() < 1e-12);
        }
        let x = -45.0;
        assert!((t.quantile_log(t.log_cdf(x)) - x).abs() < 1e-8);
        assert!((t.isf_log(t.log_sf(-x)) + x).abs() < 1e-8);
    }

    #[test]
    fn mixture_density_at_zero() {
        let t = bimodal_mixture();
        assert!((t.density(0.0) - std_normal_pdf(2.0)).abs() < 1e-15);
        assert!((t.density(0.0) - 0.05399).abs() < 1e-5);
        assert!(t.derivs(0.0)[1].abs() < 1e-15);
    }

    #[test]
    fn mixture_score_matches_closed_form() {
        let t = bimodal_mixture();
        for x in [-3.0, -0.7, 0.1, 1.9, 4.0] {
            let d = t.derivs(x);
            let th = (2.0 * x).tanh();
            assert!((d[1] - (x - 2.0 * th)).abs() < 1e-12);
            assert!((d[2] - (1.0 - 4.0 * (1.0 - th * th))).abs() < 1e-12);
        }
    }

    #[test]
    fn normalized() {
        for t in [bimodal_mixture(), standard_normal(), mixture_target((1.0, -3.0), 0.3).unwrap()] {
            assert!((total_mass(&t) - 1.0).abs() < 1e-9);
        }
        assert!((half_ln_2pi() - HALF_LN_2PI).abs() < 1e-15);
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let h = 1e-5;
        for t in [bimodal_mixture(), Target1D::Normal { mean: 0.3, sd: 1.7 }] {
            for x in [-2.5, -0.3, 0.0, 1.1, 3.2] {
                let d = t.derivs(x);
                for k in 0..3 {
                    let fd = (t.derivs(x + h)[k] - t.derivs(x - h)[k]) / (2.0 * h);
                    assert!((fd - d[k + 1]).abs() < 1e-5, "order {k} at {x}");
                }
            }
        }
    }

    #[test]
    fn series_agrees_with_derivs() {
        let t = mixture_target((1.5, -2.5), 0.3).unwrap();
        let y = 0.4;
        let s = t.series(&Taylor::variable(y, 3)).to_jet3();
        let d = t.derivs(y);
        for (a, b) in [(s.v, d[0]), (s.d1, d[1]), (s.d2, d[2]), (s.d3, d[3])] {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn quantiles_invert_cdfs() {
        for t in [bimodal_mixture(), Target1D::Normal { mean: -1.0, sd: 2.0 }] {
            for u in [0.001, 0.2, 0.5, 0.77, 0.999] {
                assert!((t.cdf(t.quantile(u)) - u).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn mixture_constructor_validates_weight() {
        assert!(mixture_target((2.0, -2.0), 1.0).is_err());
    }
}
