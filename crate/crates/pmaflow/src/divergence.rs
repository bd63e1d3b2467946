//! Divergences between one-dimensional densities: KL, W2, the Bregman
//! divergence B_G induced by ½W₂²(·, e^{−g}), and the MMD statistic.
//!
//! Brenier maps are monotone rearrangements `quantile_to ∘ cdf_from`,
//! switching to survival functions in the upper tail so that both tails
//! keep full relative precision.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{arg, Error, Result};
use crate::quadrature::{legendre, QuadratureSpec};

pub trait Density1D {
    fn log_density(&self, x: f64) -> f64;
    fn cdf(&self, x: f64) -> f64;
    fn support_hint(&self) -> (f64, f64);

    fn density(&self, x: f64) -> f64 {
        self.log_density(x).exp()
    }

    /// Survival function `1 − cdf`; override when a precise form exists.
    fn sf(&self, x: f64) -> f64 {
        1.0 - self.cdf(x)
    }

    fn quantile(&self, u: f64) -> f64 {
        bisect_monotone(|x| self.cdf(x), u, self.support_hint(), 1e-12)
    }

    /// Inverse survival function.
    fn isf(&self, q: f64) -> f64 {
        bisect_monotone(|x| -self.sf(x), -q, self.support_hint(), 1e-12)
    }

    /// ln cdf; override where the cdf underflows in the tail.
    fn log_cdf(&self, x: f64) -> f64 {
        self.cdf(x).ln()
    }

    fn log_sf(&self, x: f64) -> f64 {
        self.sf(x).ln()
    }

    /// Quantile of `exp(lu)`.
    fn quantile_log(&self, lu: f64) -> f64 {
        self.quantile(lu.exp())
    }

    /// Inverse survival function of `exp(lq)`.
    fn isf_log(&self, lq: f64) -> f64 {
        self.isf(lq.exp())
    }
}

/// Solve `f(x) = level` for nondecreasing `f` by bisection, doubling the bracket
/// outward from `hint` until it straddles the level. NaN when no bracket is found.
pub fn bisect_monotone(f: impl Fn(f64) -> f64, level: f64, hint: (f64, f64), tol: f64) -> f64 {
    let (mut lo, mut hi) = hint;
    let mut width = (hi - lo).max(1.0);
    let mut tries = 0;
    while f(lo) > level {
        lo -= width;
        width *= 2.0;
        tries += 1;
        if tries > 60 {
            return f64::NAN;
        }
    }
    width = (hi - lo).max(1.0);
    while f(hi) < level {
        hi += width;
        width *= 2.0;
        tries += 1;
        if tries > 120 {
            return f64::NAN;
        }
    }
    while hi - lo > tol * (1.0 + lo.abs().max(hi.abs())) {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if f(mid) < level {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// KL(ρ|π) = ∫ ρ log(ρ/π) by composite Gauss–Legendre.
pub fn kl_quadrature(rho: &dyn Density1D, pi: &dyn Density1D, quad: &QuadratureSpec) -> Result<f64> {
    let mut acc = 0.0;
    for (x, w) in quad.points() {
        let lr = rho.log_density(x);
        if lr == f64::NEG_INFINITY {
            continue;
        }
        let lp = pi.log_density(x);
        let r = lr.exp();
        if lp == f64::NEG_INFINITY && r > 0.0 {
            return Err(Error::Numeric(format!("KL support mismatch at x = {x}")));
        }
        if !(lr.is_finite() && lp.is_finite()) {
            return Err(Error::Numeric(format!("non-finite log density at x = {x}")));
        }
        acc += w * r * (lr - lp);
    }
    Ok(if acc < 0.0 && acc > -1e-9 { 0.0 } else { acc })
}

/// Quadrature nodes carrying less mass than this are skipped; evaluating the
/// nested rearrangements there only risks CDF underflow.
const NEGLIGIBLE: f64 = 1e-40;

/// Monotone rearrangement pushing `from` to `to`.
pub struct BrenierMap<'a> {
    from: &'a dyn Density1D,
    to: &'a dyn Density1D,
}

pub fn brenier_map_1d<'a>(from: &'a dyn Density1D, to: &'a dyn Density1D) -> BrenierMap<'a> {
    BrenierMap { from, to }
}

impl BrenierMap<'_> {
    pub fn apply(&self, y: f64) -> Result<f64> {
        // matched in log space so deep-tail points survive cdf underflow
        let lu = self.from.log_cdf(y);
        let x = if lu <= -std::f64::consts::LN_2 { self.to.quantile_log(lu) } else { self.to.isf_log(self.from.log_sf(y)) };
        if x.is_finite() {
            Ok(x)
        } else {
            Err(Error::Numeric(format!("quantile bracketing failed for y = {y}")))
        }
    }
}

/// Three numbers describing a monotone map `T` well enough for Bregman integrals:
/// `T`, its inverse, and `∫_a^b T`.
pub trait MonotoneMap {
    fn map(&self, y: f64) -> Result<f64>;
    fn inverse(&self, x: f64) -> Result<f64>;
    /// ∫_a^b T(t) dt; the default uses a 32-node Gauss–Legendre rule.
    fn integral(&self, a: f64, b: f64) -> Result<f64> {
        let mut s = 0.0;
        for (t, w) in legendre(a, b, 32) {
            s += w * self.map(t)?;
        }
        Ok(s)
    }
}

/// The Brenier map from a reference to a density together with its inverse.
pub struct RearrangementPair<'a> {
    pub reference: &'a dyn Density1D,
    pub density: &'a dyn Density1D,
}

impl MonotoneMap for RearrangementPair<'_> {
    fn map(&self, y: f64) -> Result<f64> {
        brenier_map_1d(self.reference, self.density).apply(y)
    }
    fn inverse(&self, x: f64) -> Result<f64> {
        brenier_map_1d(self.density, self.reference).apply(x)
    }
}

/// Pointwise Bregman integrand `φ1(T2 y) + ψ1(y) − y·T2(y)` written as
/// `T2(y)(u − y) − ∫_y^u T1` with `u = T1⁻¹(T2 y)`, so the additive constant in ψ1 cancels.
pub fn bregman_integrand(t1: &dyn MonotoneMap, t2y: f64, y: f64) -> Result<f64> {
    let u = t1.inverse(t2y)?;
    let v = t2y * (u - y) - t1.integral(y, u)?;
    Ok(v)
}

/// B_G(ρ2|ρ1) = E_{Y∼e^{−g}}[ φ1(T2 Y) + ψ1(Y) − Y·T2(Y) ].
pub fn bregman_bg(rho2: &dyn Density1D, rho1: &dyn Density1D, g_ref: &dyn Density1D, quad: &QuadratureSpec) -> Result<f64> {
    let t1 = RearrangementPair { reference: g_ref, density: rho1 };
    let t2 = RearrangementPair { reference: g_ref, density: rho2 };
    bregman_with_maps(&t1, |y| t2.map(y), g_ref, quad)
}

/// B_G with ρ1 described by its Brenier map from the reference and ρ2 by `t2`.
pub fn bregman_with_maps(
    t1: &dyn MonotoneMap,
    t2: impl Fn(f64) -> Result<f64>,
    g_ref: &dyn Density1D,
    quad: &QuadratureSpec,
) -> Result<f64> {
    let mut acc = 0.0;
    for (y, w) in quad.points() {
        let wy = w * g_ref.density(y);
        if wy < NEGLIGIBLE {
            continue;
        }
        acc += wy * bregman_integrand(t1, t2(y)?, y)?;
    }
    if acc < -1e-7 {
        return Err(Error::Numeric(format!("negative Bregman divergence {acc}")));
    }
    Ok(acc)
}

/// W2 through the reference quantile coupling `u = Φ(z)`.
pub fn w2_1d(rho: &dyn Density1D, pi: &dyn Density1D, quad: &QuadratureSpec) -> Result<f64> {
    let z = crate::flow::target::standard_normal();
    let a = RearrangementPair { reference: &z, density: rho };
    let b = RearrangementPair { reference: &z, density: pi };
    let mut acc = 0.0;
    for (y, w) in quad.points() {
        let wy = w * z.density(y);
        if wy < NEGLIGIBLE {
            continue;
        }
        let d = a.map(y)? - b.map(y)?;
        acc += wy * d * d;
    }
    Ok(acc.max(0.0).sqrt())
}

/// KL(π|ρ) − (λ/β)·B_G(π|ρ).
pub fn relative_convexity_gap(
    pi: &dyn Density1D,
    rho: &dyn Density1D,
    g_ref: &dyn Density1D,
    lambda_g: f64,
    beta: f64,
    quad_x: &QuadratureSpec,
    quad_y: &QuadratureSpec,
) -> Result<f64> {
    if !(lambda_g > 0.0 && beta > 0.0) {
        return arg("relative convexity needs positive lambda and beta");
    }
    Ok(kl_quadrature(pi, rho, quad_x)? - lambda_g / beta * bregman_bg(pi, rho, g_ref, quad_y)?)
}

/// Pushforward of `base` under the rearrangement from `via_from` to `via_to`.
pub struct Transported<'a> {
    pub base: &'a dyn Density1D,
    pub via_from: &'a dyn Density1D,
    pub via_to: &'a dyn Density1D,
}

impl Transported<'_> {
    /// Inverse of the transporting map: rearrangement `via_to → via_from`.
    fn back(&self, y: f64) -> f64 {
        brenier_map_1d(self.via_to, self.via_from).apply(y).unwrap_or(f64::NAN)
    }
}

impl Density1D for Transported<'_> {
    fn log_density(&self, y: f64) -> f64 {
        let x = self.back(y);
        self.base.log_density(x) + self.via_to.log_density(y) - self.via_from.log_density(x)
    }
    fn cdf(&self, y: f64) -> f64 {
        self.base.cdf(self.back(y))
    }
    fn sf(&self, y: f64) -> f64 {
        self.base.sf(self.back(y))
    }
    fn quantile(&self, u: f64) -> f64 {
        let x = self.base.quantile(u);
        brenier_map_1d(self.via_from, self.via_to).apply(x).unwrap_or(f64::NAN)
    }
    fn isf(&self, q: f64) -> f64 {
        let x = self.base.isf(q);
        brenier_map_1d(self.via_from, self.via_to).apply(x).unwrap_or(f64::NAN)
    }
    fn log_cdf(&self, y: f64) -> f64 {
        self.base.log_cdf(self.back(y))
    }
    fn log_sf(&self, y: f64) -> f64 {
        self.base.log_sf(self.back(y))
    }
    fn quantile_log(&self, lu: f64) -> f64 {
        let x = self.base.quantile_log(lu);
        brenier_map_1d(self.via_from, self.via_to).apply(x).unwrap_or(f64::NAN)
    }
    fn isf_log(&self, lq: f64) -> f64 {
        let x = self.base.isf_log(lq);
        brenier_map_1d(self.via_from, self.via_to).apply(x).unwrap_or(f64::NAN)
    }
    fn support_hint(&self) -> (f64, f64) {
        self.via_to.support_hint()
    }
}

/// Terms of the three-point identity evaluated by quadrature.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ThreePointTerms {
    pub lhs: f64,
    pub bg1: f64,
    pub bg2: f64,
    pub bgpi: f64,
}

impl ThreePointTerms {
    pub fn residual(&self) -> f64 {
        self.lhs - (self.bg1 - self.bg2 + self.bgpi)
    }
}

/// `∫(ψ_{ρ2} − ψ_{ρ1})(π1 − e^{−g})` against `B_G(π|ρ1) − B_G(π|ρ2) + B_{G_π}(π1|π2)`,
/// with `π_i` the image of π under the rearrangement ρ_i → e^{−g}.
pub fn three_point_quadrature(
    pi: &dyn Density1D,
    rho1: &dyn Density1D,
    rho2: &dyn Density1D,
    g_ref: &dyn Density1D,
    quad_y: &QuadratureSpec,
    quad_x: &QuadratureSpec,
) -> Result<ThreePointTerms> {
    let t1 = RearrangementPair { reference: g_ref, density: rho1 };
    let t2 = RearrangementPair { reference: g_ref, density: rho2 };
    // ψ2 − ψ1 up to a constant: ∫_0^y (T2 − T1)
    let dpsi = |y: f64| -> Result<f64> { Ok(t2.integral(0.0, y)? - t1.integral(0.0, y)?) };
    // E_{π1}[ψ2 − ψ1] = E_π[(ψ2 − ψ1)(S1 X)], S1 = T1⁻¹
    let mut e_pi1 = 0.0;
    for (x, w) in quad_x.points() {
        let wx = w * pi.density(x);
        if wx < NEGLIGIBLE {
            continue;
        }
        e_pi1 += wx * dpsi(t1.inverse(x)?)?;
    }
    let mut e_g = 0.0;
    for (y, w) in quad_y.points() {
        let wy = w * g_ref.density(y);
        if wy < NEGLIGIBLE {
            continue;
        }
        e_g += wy * dpsi(y)?;
    }
    let bg1 = bregman_bg(pi, rho1, g_ref, quad_y)?;
    let bg2 = bregman_bg(pi, rho2, g_ref, quad_y)?;
    let pi1 = Transported { base: pi, via_from: rho1, via_to: g_ref };
    let pi2 = Transported { base: pi, via_from: rho2, via_to: g_ref };
    let bgpi = bregman_bg(&pi1, &pi2, pi, quad_x)?;
    Ok(ThreePointTerms { lhs: e_pi1 - e_g, bg1, bg2, bgpi })
}

/// Unbiased MMD² with kernel exp(−(a−b)²/(2h²)).
pub fn mmd_sq(xs: &[f64], ys: &[f64], bandwidth: f64) -> Result<f64> {
    if !(bandwidth > 0.0) {
        return arg(format!("bandwidth must be positive, got {bandwidth}"));
    }
    if xs.len() < 2 || ys.len() < 2 {
        return arg("MMD needs at least two samples per side");
    }
    if xs.len() * ys.len() <= 4_000_000 {
        return Ok(mmd_direct(xs, ys, bandwidth));
    }
    let f = KernelFeatures::new(xs.iter().chain(ys).copied(), bandwidth)?;
    let sx = f.sum(xs);
    let sy = f.sum(ys);
    Ok(mmd_from_sums(&sx, &sy, xs.len(), ys.len()))
}

fn mmd_direct(xs: &[f64], ys: &[f64], h: f64) -> f64 {
    let k = |a: f64, b: f64| (-(a - b) * (a - b) / (2.0 * h * h)).exp();
    let within = |v: &[f64]| -> f64 {
        let mut s = 0.0;
        for i in 0..v.len() {
            for j in i + 1..v.len() {
                s += k(v[i], v[j]);
            }
        }
        2.0 * s / (v.len() * (v.len() - 1)) as f64
    };
    let mut cross = 0.0;
    for &a in xs {
        for &b in ys {
            cross += k(a, b);
        }
    }
    within(xs) + within(ys) - 2.0 * cross / (xs.len() * ys.len()) as f64
}

/// Bounded finite features with `k(a, b) = Σ_m φ_m(a) φ_m(b)` up to a negligible tail:
/// after centering, `φ_m(x) = e^{−x²/2h²} (x/h)^m / √m!`.
struct KernelFeatures {
    center: f64,
    h: f64,
    rank: usize,
}

impl KernelFeatures {
    fn new(pool: impl Iterator<Item = f64> + Clone, h: f64) -> Result<Self> {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for x in pool {
            lo = lo.min(x);
            hi = hi.max(x);
        }
        let center = 0.5 * (lo + hi);
        let r2 = ((hi - lo) / (2.0 * h)).powi(2);
        // Poisson(r²) tail beyond rank is far below roundoff
        let rank = (r2 + 12.0 * r2.sqrt() + 40.0).ceil() as usize;
        if rank > 2000 {
            return Err(Error::Numeric(format!("kernel expansion rank {rank} too large; bandwidth {h} too small")));
        }
        Ok(Self { center, h, rank })
    }

    fn sum(&self, xs: &[f64]) -> Vec<f64> {
        let mut s = vec![0.0; self.rank];
        let mut phi = vec![0.0; self.rank];
        for &x in xs {
            self.features(x, &mut phi);
            for (a, b) in s.iter_mut().zip(&phi) {
                *a += b;
            }
        }
        s
    }

    fn features(&self, x: f64, out: &mut [f64]) {
        let z = (x - self.center) / self.h;
        out[0] = (-0.5 * z * z).exp();
        for m in 1..out.len() {
            out[m] = out[m - 1] * z / (m as f64).sqrt();
        }
    }
}

fn mmd_from_sums(sx: &[f64], sy: &[f64], n: usize, m: usize) -> f64 {
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();
    let (n, m) = (n as f64, m as f64);
    (dot(sx, sx) - n) / (n * (n - 1.0)) + (dot(sy, sy) - m) / (m * (m - 1.0)) - 2.0 * dot(sx, sy) / (n * m)
}

/// Median pairwise distance of the pooled sample, from at most 4000 evenly spaced points.
pub fn median_bandwidth(xs: &[f64], ys: &[f64]) -> f64 {
    let pool: Vec<f64> = xs.iter().chain(ys).copied().collect();
    let step = pool.len().div_ceil(4000).max(1);
    let sub: Vec<f64> = pool.iter().step_by(step).copied().collect();
    let mut d = Vec::with_capacity(sub.len() * sub.len() / 2);
    for i in 0..sub.len() {
        for j in i + 1..sub.len() {
            d.push((sub[i] - sub[j]).abs());
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    let mid = d.len() / 2;
    let (_, m, _) = d.select_nth_unstable_by(mid, |a, b| a.total_cmp(b));
    if *m > 0.0 {
        *m
    } else {
        1.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PermutationTest {
    pub statistic: f64,
    pub p_value: f64,
    /// 1 − level quantile of the permutation null.
    pub null_quantile: f64,
    pub bandwidth: f64,
}

/// Permutation two-sample test on MMD² with `perms` seeded shuffles.
pub fn mmd_permutation_test(
    xs: &[f64],
    ys: &[f64],
    bandwidth: Option<f64>,
    perms: usize,
    level: f64,
    seed: u64,
) -> Result<PermutationTest> {
    let h = bandwidth.unwrap_or_else(|| median_bandwidth(xs, ys));
    let statistic = mmd_sq(xs, ys, h)?;
    let mut pool: Vec<f64> = xs.iter().chain(ys).copied().collect();
    let (n, m) = (xs.len(), ys.len());
    let feats = if n * m > 4_000_000 { Some(KernelFeatures::new(pool.iter().copied(), h)?) } else { None };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut null = Vec::with_capacity(perms);
    for _ in 0..perms {
        pool.shuffle(&mut rng);
        let (a, b) = pool.split_at(n);
        null.push(match &feats {
            Some(f) => mmd_from_sums(&f.sum(a), &f.sum(b), n, m),
            None => mmd_direct(a, b, h),
        });
    }
    let exceed = null.iter().filter(|&&v| v >= statistic).count();
    let p_value = (1 + exceed) as f64 / (1 + perms) as f64;
    null.sort_by(|a, b| a.total_cmp(b));
    let idx = (((1.0 - level) * perms as f64).ceil() as usize).clamp(1, perms.max(1)) - 1;
    let null_quantile = null.get(idx).copied().unwrap_or(f64::NAN);
    Ok(PermutationTest { statistic, p_value, null_quantile, bandwidth: h })
}
