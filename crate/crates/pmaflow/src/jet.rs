//! Truncated Taylor arithmetic.
//!
//! [`Jet3`] carries a value and its first three derivatives and is the
//! currency every public evaluation returns. [`Taylor`] is the same idea at
//! run-time order: stacks of analytic oracle layers need their parents at
//! two orders above their own, so the order demanded at the bottom of a
//! stack grows with its depth.

use std::ops::{Add, Mul, Neg, Sub};

/// Value and derivatives up to order 3 of a scalar function at a point.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Jet3 {
    pub v: f64,
    pub d1: f64,
    pub d2: f64,
    pub d3: f64,
}

impl Jet3 {
    pub const fn new(v: f64, d1: f64, d2: f64, d3: f64) -> Self {
        Self { v, d1, d2, d3 }
    }

    pub const fn constant(v: f64) -> Self {
        Self::new(v, 0.0, 0.0, 0.0)
    }

    /// The identity function seen at `y`.
    pub const fn variable(y: f64) -> Self {
        Self::new(y, 1.0, 0.0, 0.0)
    }

    pub fn is_finite(&self) -> bool {
        self.v.is_finite() && self.d1.is_finite() && self.d2.is_finite() && self.d3.is_finite()
    }

    /// Chain rule: `f ∘ self` where `f` has derivatives `[f, f', f'', f''']` at `self.v`.
    pub fn compose(self, f: [f64; 4]) -> Self {
        let (u1, u2, u3) = (self.d1, self.d2, self.d3);
        Self { v: f[0], d1: f[1] * u1, d2: f[2] * u1 * u1 + f[1] * u2, d3: f[3] * u1 * u1 * u1 + 3.0 * f[2] * u1 * u2 + f[1] * u3 }
    }

    pub fn exp(self) -> Self {
        let e = self.v.exp();
        self.compose([e, e, e, e])
    }

    pub fn ln(self) -> Self {
        let r = 1.0 / self.v;
        self.compose([self.v.ln(), r, -r * r, 2.0 * r * r * r])
    }

    pub fn softplus(self) -> Self {
        let s = sigmoid(self.v);
        let ds = s * (1.0 - s);
        self.compose([softplus(self.v), s, ds, ds * (1.0 - 2.0 * s)])
    }

    pub fn scale(self, c: f64) -> Self {
        Self::new(c * self.v, c * self.d1, c * self.d2, c * self.d3)
    }

    /// Derivative jet, losing the top order (which becomes zero).
    pub fn derivative(self) -> Self {
        Self::new(self.d1, self.d2, self.d3, 0.0)
    }

    pub fn to_taylor(self) -> Taylor {
        Taylor::from_coeffs(vec![self.v, self.d1, self.d2 / 2.0, self.d3 / 6.0])
    }
}

impl Add for Jet3 {
    type Output = Jet3;
    fn add(self, o: Jet3) -> Jet3 {
        Jet3::new(self.v + o.v, self.d1 + o.d1, self.d2 + o.d2, self.d3 + o.d3)
    }
}

impl Sub for Jet3 {
    type Output = Jet3;
    fn sub(self, o: Jet3) -> Jet3 {
        Jet3::new(self.v - o.v, self.d1 - o.d1, self.d2 - o.d2, self.d3 - o.d3)
    }
}

impl Neg for Jet3 {
    type Output = Jet3;
    fn neg(self) -> Jet3 {
        self.scale(-1.0)
    }
}

impl Mul for Jet3 {
    type Output = Jet3;
    fn mul(self, o: Jet3) -> Jet3 {
        Jet3::new(
            self.v * o.v,
            self.d1 * o.v + self.v * o.d1,
            self.d2 * o.v + 2.0 * self.d1 * o.d1 + self.v * o.d2,
            self.d3 * o.v + 3.0 * self.d2 * o.d1 + 3.0 * self.d1 * o.d2 + self.v * o.d3,
        )
    }
}

impl Mul<f64> for Jet3 {
    type Output = Jet3;
    fn mul(self, c: f64) -> Jet3 {
        self.scale(c)
    }
}

/// Logistic sigmoid, stable on both tails.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^x)` computed as `max(x, 0) + log1p(e^{-|x|})`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Truncated power series in normalized form: `c[k] = h^{(k)}(y0) / k!`.
///
/// Binary operations truncate to the shorter operand.
#[derive(Clone, Debug, PartialEq)]
pub struct Taylor {
    c: Vec<f64>,
}

impl Taylor {
    pub fn from_coeffs(c: Vec<f64>) -> Self {
        assert!(!c.is_empty(), "a series needs at least a constant term");
        Self { c }
    }

    pub fn constant(v: f64, order: usize) -> Self {
        let mut c = vec![0.0; order + 1];
        c[0] = v;
        Self { c }
    }

    /// The identity `y ↦ y` expanded at `y0`.
    pub fn variable(y0: f64, order: usize) -> Self {
        let mut c = vec![0.0; order + 1];
        c[0] = y0;
        if order >= 1 {
            c[1] = 1.0;
        }
        Self { c }
    }

    pub fn order(&self) -> usize {
        self.c.len() - 1
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.c
    }

    pub fn value(&self) -> f64 {
        self.c[0]
    }

    /// The k-th derivative (zero above the carried order).
    pub fn deriv(&self, k: usize) -> f64 {
        self.c.get(k).map_or(0.0, |&x| x * factorial(k))
    }

    pub fn is_finite(&self) -> bool {
        self.c.iter().all(|x| x.is_finite())
    }

    pub fn truncate(mut self, order: usize) -> Self {
        self.c.truncate(order + 1);
        self
    }

    /// Series of the derivative function, one order shorter.
    pub fn derivative(&self) -> Self {
        if self.c.len() == 1 {
            return Self::constant(0.0, 0);
        }
        Self { c: (1..self.c.len()).map(|k| k as f64 * self.c[k]).collect() }
    }

    pub fn to_jet3(&self) -> Jet3 {
        Jet3::new(self.deriv(0), self.deriv(1), self.deriv(2), self.deriv(3))
    }

    pub fn scale(&self, s: f64) -> Self {
        Self { c: self.c.iter().map(|x| s * x).collect() }
    }

    pub fn add_const(mut self, s: f64) -> Self {
        self.c[0] += s;
        self
    }

    /// `self += s · x` over the common order.
    pub fn axpy(&mut self, s: f64, x: &Taylor) {
        let n = self.c.len().min(x.c.len());
        self.c.truncate(n);
        for (a, b) in self.c.iter_mut().zip(&x.c) {
            *a += s * b;
        }
    }

    pub fn add(&self, o: &Taylor) -> Taylor {
        let mut r = self.clone();
        r.axpy(1.0, o);
        r
    }

    pub fn sub(&self, o: &Taylor) -> Taylor {
        let mut r = self.clone();
        r.axpy(-1.0, o);
        r
    }

    pub fn mul(&self, o: &Taylor) -> Taylor {
        let n = self.c.len().min(o.c.len());
        let c = (0..n).map(|k| (0..=k).map(|i| self.c[i] * o.c[k - i]).sum()).collect();
        Taylor { c }
    }

    pub fn div(&self, o: &Taylor) -> Taylor {
        let n = self.c.len().min(o.c.len());
        let mut q = vec![0.0; n];
        for k in 0..n {
            let s: f64 = (1..=k).map(|j| o.c[j] * q[k - j]).sum();
            q[k] = (self.c[k] - s) / o.c[0];
        }
        Taylor { c: q }
    }

    pub fn exp(&self) -> Taylor {
        let n = self.c.len();
        let mut e = vec![0.0; n];
        e[0] = self.c[0].exp();
        for k in 1..n {
            let s: f64 = (1..=k).map(|j| j as f64 * self.c[j] * e[k - j]).sum();
            e[k] = s / k as f64;
        }
        Taylor { c: e }
    }

    pub fn ln(&self) -> Taylor {
        let n = self.c.len();
        let a0 = self.c[0];
        let mut l = vec![0.0; n];
        l[0] = a0.ln();
        for k in 1..n {
            let s: f64 = (1..k).map(|j| j as f64 * l[j] * self.c[k - j]).sum();
            l[k] = (self.c[k] - s / k as f64) / a0;
        }
        Taylor { c: l }
    }

    /// Logistic sigmoid via the ODE `s' = s (1 - s) u'`.
    pub fn sigmoid(&self) -> Taylor {
        self.sigmoid_with_softplus().0
    }

    pub fn softplus(&self) -> Taylor {
        self.sigmoid_with_softplus().1
    }

    fn sigmoid_with_softplus(&self) -> (Taylor, Taylor) {
        let n = self.c.len();
        let mut s = vec![0.0; n];
        let mut w = vec![0.0; n]; // s (1 - s)
        let mut p = vec![0.0; n];
        s[0] = sigmoid(self.c[0]);
        p[0] = softplus(self.c[0]);
        for k in 0..n {
            if k > 0 {
                let acc: f64 = (1..=k).map(|j| j as f64 * self.c[j] * w[k - j]).sum();
                s[k] = acc / k as f64;
                let acc: f64 = (1..=k).map(|j| j as f64 * self.c[j] * s[k - j]).sum();
                p[k] = acc / k as f64;
            }
            let sq: f64 = (0..=k).map(|i| s[i] * s[k - i]).sum();
            w[k] = s[k] - sq;
        }
        (Taylor { c: s }, Taylor { c: p })
    }
}

fn factorial(k: usize) -> f64 {
    (1..=k).fold(1.0, |a, i| a * i as f64)
}

/// Scalars that a network forward pass can be generic over.
pub trait Smooth: Clone {
    fn constant_like(&self, c: f64) -> Self;
    fn value(&self) -> f64;
    /// `self += s · x`.
    fn axpy(&mut self, s: f64, x: &Self);
    fn softplus(&self) -> Self;
}

impl Smooth for f64 {
    fn constant_like(&self, c: f64) -> f64 {
        c
    }
    fn value(&self) -> f64 {
        *self
    }
    fn axpy(&mut self, s: f64, x: &f64) {
        *self += s * x;
    }
    fn softplus(&self) -> f64 {
        softplus(*self)
    }
}

impl Smooth for Jet3 {
    fn constant_like(&self, c: f64) -> Jet3 {
        Jet3::constant(c)
    }
    fn value(&self) -> f64 {
        self.v
    }
    fn axpy(&mut self, s: f64, x: &Jet3) {
        *self = *self + x.scale(s);
    }
    fn softplus(&self) -> Jet3 {
        Jet3::softplus(*self)
    }
}

impl Smooth for Taylor {
    fn constant_like(&self, c: f64) -> Taylor {
        Taylor::constant(c, self.order())
    }
    fn value(&self) -> f64 {
        self.c[0]
    }
    fn axpy(&mut self, s: f64, x: &Taylor) {
        Taylor::axpy(self, s, x)
    }
    fn softplus(&self) -> Taylor {
        Taylor::softplus(self)
    }
}
