//! Double-double arithmetic: each value is an unevaluated sum of two
//! f64 components, giving roughly 106 mantissa bits (about 31 decimal
//! digits).
//!
//! The finite-difference checker needs this. A central difference
//! divides `f(x+eps) - f(x-eps)` by `2 eps`; when the two evaluations
//! are done in plain f64 the subtraction bottoms out at roughly 1e-11
//! absolute for losses of order one, which is far too coarse to verify
//! gradient elements that are legitimately tiny. Re-evaluating the
//! recorded graph with this type pushes the floor below 1e-25.
//!
//! The algorithms are the classic error-free transformations (two_sum,
//! two_prod via fused multiply-add) with exp by argument reduction plus
//! a short Taylor series, and ln by Newton iteration on exp.

use std::cmp::Ordering;
use std::ops::{Add, Div, Mul, Neg, Sub};

/// An unevaluated sum `hi + lo` with `|lo| <= ulp(hi) / 2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dd {
    hi: f64,
    lo: f64,
}

/// Error-free sum: `a + b = s + err` exactly.
#[inline]
fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    let err = (a - (s - bb)) + (b - bb);
    (s, err)
}

/// Error-free sum assuming `|a| >= |b|`.
#[inline]
fn quick_two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let err = b - (s - a);
    (s, err)
}

/// Error-free product: `a * b = p + err` exactly.
#[inline]
fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    let err = a.mul_add(b, -p);
    (p, err)
}

pub const ZERO: Dd = Dd { hi: 0.0, lo: 0.0 };
pub const ONE: Dd = Dd { hi: 1.0, lo: 0.0 };
/// ln 2 to double-double precision.
const LN2: Dd = Dd { hi: std::f64::consts::LN_2, lo: 2.3190468138462996e-17 };

impl Dd {
    pub const ZERO: Dd = ZERO;
    pub const ONE: Dd = ONE;

    #[inline]
    pub fn from_f64(v: f64) -> Dd {
        Dd { hi: v, lo: 0.0 }
    }

    #[inline]
    pub fn to_f64(self) -> f64 {
        self.hi + self.lo
    }

    #[inline]
    pub fn hi(self) -> f64 {
        self.hi
    }

    #[inline]
    fn norm(hi: f64, lo: f64) -> Dd {
        let (hi, lo) = quick_two_sum(hi, lo);
        Dd { hi, lo }
    }

    /// Multiply by an exact power of two.
    #[inline]
    fn mul_pwr2(self, p: f64) -> Dd {
        Dd { hi: self.hi * p, lo: self.lo * p }
    }

    pub fn abs(self) -> Dd {
        if self.hi < 0.0 || (self.hi == 0.0 && self.lo < 0.0) {
            -self
        } else {
            self
        }
    }

    pub fn max(self, other: Dd) -> Dd {
        if self < other {
            other
        } else {
            self
        }
    }

    /// `e^self`. Saturates to 0 far below the f64 range and panics on
    /// overflow, mirroring where plain f64 evaluation would break down.
    pub fn exp(self) -> Dd {
        if self.hi <= -709.0 {
            return ZERO;
        }
        assert!(self.hi < 709.0, "dd exp overflow at {}", self.hi);
        // self = m ln2 + r with |r| small, then e^r by Taylor on r/512
        // followed by nine squarings.
        let m = (self.hi / LN2.hi + 0.5).floor();
        let r = (self - LN2 * Dd::from_f64(m)).mul_pwr2(1.0 / 512.0);
        // s = e^r - 1 from the series; |r| <= ln2/1024 so it converges in
        // a handful of terms.
        let mut term = (r * r).mul_pwr2(0.5);
        let mut s = r + term;
        let mut k = 3.0;
        while term.hi.abs() > 1e-40 && k < 24.0 {
            term = term * r / Dd::from_f64(k);
            s = s + term;
            k += 1.0;
        }
        // (1+s)^2 - 1 = 2s + s^2 keeps everything in the e^x - 1 form.
        for _ in 0..9 {
            s = s.mul_pwr2(2.0) + s * s;
        }
        let s = s + ONE;
        let p = 2.0f64.powi(m as i32);
        Dd { hi: s.hi * p, lo: s.lo * p }
    }

    /// Natural logarithm by Newton iteration on `exp(y) = self`.
    pub fn ln(self) -> Dd {
        assert!(self.hi > 0.0, "dd ln of non-positive {}", self.hi);
        let mut y = Dd::from_f64(self.hi.ln());
        for _ in 0..2 {
            y = y + self * (-y).exp() - ONE;
        }
        y
    }

    pub fn tanh(self) -> Dd {
        if self.hi == 0.0 && self.lo == 0.0 {
            return ZERO;
        }
        if self.hi.abs() > 40.0 {
            return Dd::from_f64(if self.hi > 0.0 { 1.0 } else { -1.0 });
        }
        let e = self.mul_pwr2(2.0).exp();
        (e - ONE) / (e + ONE)
    }

    pub fn sigmoid(self) -> Dd {
        if self.hi >= 0.0 {
            let t = (-self).exp();
            ONE / (t + ONE)
        } else {
            let t = self.exp();
            t / (t + ONE)
        }
    }
}

impl From<f64> for Dd {
    fn from(v: f64) -> Dd {
        Dd::from_f64(v)
    }
}

impl Add for Dd {
    type Output = Dd;
    #[inline]
    fn add(self, b: Dd) -> Dd {
        let (s1, s2) = two_sum(self.hi, b.hi);
        let (t1, t2) = two_sum(self.lo, b.lo);
        let (s1, s2) = quick_two_sum(s1, s2 + t1);
        Dd::norm(s1, s2 + t2)
    }
}

impl Sub for Dd {
    type Output = Dd;
    #[inline]
    fn sub(self, b: Dd) -> Dd {
        self + (-b)
    }
}

impl Neg for Dd {
    type Output = Dd;
    #[inline]
    fn neg(self) -> Dd {
        Dd { hi: -self.hi, lo: -self.lo }
    }
}

impl Mul for Dd {
    type Output = Dd;
    #[inline]
    fn mul(self, b: Dd) -> Dd {
        let (p1, p2) = two_prod(self.hi, b.hi);
        Dd::norm(p1, p2 + (self.hi * b.lo + self.lo * b.hi))
    }
}

impl Mul<f64> for Dd {
    type Output = Dd;
    #[inline]
    fn mul(self, b: f64) -> Dd {
        let (p1, p2) = two_prod(self.hi, b);
        Dd::norm(p1, p2 + self.lo * b)
    }
}

impl Add<f64> for Dd {
    type Output = Dd;
    #[inline]
    fn add(self, b: f64) -> Dd {
        let (s1, s2) = two_sum(self.hi, b);
        Dd::norm(s1, s2 + self.lo)
    }
}

impl Div for Dd {
    type Output = Dd;
    fn div(self, b: Dd) -> Dd {
        let q1 = self.hi / b.hi;
        let r = self - b * q1;
        let q2 = r.hi / b.hi;
        let r = r - b * q2;
        let q3 = r.hi / b.hi;
        Dd::norm(q1, q2) + q3
    }
}

impl Add<Dd> for f64 {
    type Output = Dd;
    #[inline]
    fn add(self, b: Dd) -> Dd {
        b + self
    }
}

impl PartialOrd for Dd {
    fn partial_cmp(&self, other: &Dd) -> Option<Ordering> {
        match self.hi.partial_cmp(&other.hi) {
            Some(Ordering::Equal) => self.lo.partial_cmp(&other.lo),
            ord => ord,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rel(a: Dd, b: Dd) -> f64 {
        let d = (a - b).abs().to_f64();
        let m = a.abs().max(b.abs()).to_f64().max(1e-300);
        d / m
    }

    #[test]
    fn resolves_far_below_f64_precision() {
        let x = ONE + Dd::from_f64(1e-25);
        let d = x - ONE;
        assert_eq!(d.to_f64(), 1e-25);
    }

    #[test]
    fn error_free_transforms_are_exact() {
        let (s, e) = two_sum(1e16, 1.0);
        assert_eq!(s, 1e16);
        assert_eq!(e, 1.0);
        let (p, e) = two_prod(1.0 + 2f64.powi(-30), 1.0 + 2f64.powi(-30));
        // (1+u)^2 = 1 + 2u + u^2; the square term lands in the error part.
        assert_eq!(p, 1.0 + 2f64.powi(-29));
        assert_eq!(e, 2f64.powi(-60));
    }

    #[test]
    fn division_inverts_multiplication() {
        let a = Dd::from_f64(std::f64::consts::PI);
        let b = Dd::from_f64(1.7320508) + Dd::from_f64(3.1e-18);
        let q = a / b;
        assert!(rel(q * b, a) < 1e-30);
    }

    #[test]
    fn exp_matches_known_digits() {
        // e = 2.71828182845904523536... splits across both components.
        let e = ONE.exp();
        assert_eq!(e.hi, std::f64::consts::E);
        assert!((e.lo - 1.4456468917292502e-16).abs() < 1e-28);
        assert_eq!(ZERO.exp(), ONE);
    }

    #[test]
    fn exp_satisfies_addition_law() {
        let cases = [(0.3, -1.7), (5.0, 4.25), (-20.0, 0.001), (12.5, -30.0)];
        for (a, b) in cases {
            let (a, b) = (Dd::from_f64(a), Dd::from_f64(b));
            assert!(rel(a.exp() * b.exp(), (a + b).exp()) < 1e-28);
        }
    }

    #[test]
    fn ln_inverts_exp() {
        for v in [1e-8, 0.37, 1.0, 2.0, 891.77, 1e10] {
            let x = Dd::from_f64(v);
            assert!(rel(x.ln().exp(), x) < 1e-28, "v={v}");
        }
        assert!(rel(Dd::from_f64(2.0).ln(), LN2) < 1e-30);
    }

    #[test]
    fn tanh_and_sigmoid_identities() {
        for v in [-3.0, -0.25, 1e-3, 0.8, 12.0] {
            let x = Dd::from_f64(v);
            // tanh is odd.
            assert!(rel(x.tanh(), -((-x).tanh())) < 1e-28, "v={v}");
            // sigmoid(x) + sigmoid(-x) = 1.
            let s = x.sigmoid() + (-x).sigmoid();
            assert!((s - ONE).abs().to_f64() < 1e-30, "v={v}");
            // tanh(x) = 2 sigmoid(2x) - 1.
            let t = x.mul_pwr2(2.0).sigmoid().mul_pwr2(2.0) - ONE;
            assert!((t - x.tanh()).abs().to_f64() < 1e-28, "v={v}");
        }
        assert!((Dd::from_f64(50.0).tanh() - ONE).abs().to_f64() < 1e-30);
    }

    #[test]
    fn comparison_follows_numeric_order() {
        let a = Dd { hi: 1.0, lo: -1e-20 };
        let b = ONE;
        let c = ONE + Dd::from_f64(1e-20);
        assert!(a < b && b < c);
        assert_eq!(a.max(c), c);
        assert!(Dd::from_f64(-2.0) < Dd::from_f64(1.0));
    }
}
