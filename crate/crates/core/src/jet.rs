//! Forward-mode first derivatives for the polynomial recurrences.
//!
//! Every basis evaluation in this crate is written once, generically over
//! [`Real`], and instantiated either with `f64` (values only) or with
//! [`Jet`] (value plus exact gradient). The recurrences only use ring
//! operations, so the gradients carry no truncation error.

use std::ops::{Add, Mul, Neg, Sub};

/// Ring operations needed by the three-term recurrences.
pub trait Real:
    Copy + Add<Output = Self> + Sub<Output = Self> + Mul<Output = Self> + Neg<Output = Self>
{
    fn cst(v: f64) -> Self;
    fn scale(self, s: f64) -> Self;
    fn value(self) -> f64;
}

impl Real for f64 {
    #[inline]
    fn cst(v: f64) -> Self {
        v
    }
    #[inline]
    fn scale(self, s: f64) -> Self {
        self * s
    }
    #[inline]
    fn value(self) -> f64 {
        self
    }
}

/// A value together with its gradient with respect to `D` variables.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Jet<const D: usize> {
    pub v: f64,
    pub d: [f64; D],
}

impl<const D: usize> Jet<D> {
    /// The independent variable number `k` at value `v`.
    pub fn var(v: f64, k: usize) -> Self {
        let mut d = [0.0; D];
        d[k] = 1.0;
        Jet { v, d }
    }
}

impl<const D: usize> Add for Jet<D> {
    type Output = Self;
    #[inline]
    fn add(mut self, o: Self) -> Self {
        self.v += o.v;
        for k in 0..D {
            self.d[k] += o.d[k];
        }
        self
    }
}

impl<const D: usize> Sub for Jet<D> {
    type Output = Self;
    #[inline]
    fn sub(mut self, o: Self) -> Self {
        self.v -= o.v;
        for k in 0..D {
            self.d[k] -= o.d[k];
        }
        self
    }
}

impl<const D: usize> Mul for Jet<D> {
    type Output = Self;
    #[inline]
    fn mul(self, o: Self) -> Self {
        let mut d = [0.0; D];
        for k in 0..D {
            d[k] = self.v * o.d[k] + self.d[k] * o.v;
        }
        Jet { v: self.v * o.v, d }
    }
}

impl<const D: usize> Neg for Jet<D> {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        self.scale(-1.0)
    }
}

impl<const D: usize> Real for Jet<D> {
    #[inline]
    fn cst(v: f64) -> Self {
        Jet { v, d: [0.0; D] }
    }
    #[inline]
    fn scale(mut self, s: f64) -> Self {
        self.v *= s;
        for k in 0..D {
            self.d[k] *= s;
        }
        self
    }
    #[inline]
    fn value(self) -> f64 {
        self.v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn product_rule() {
        let x = Jet::<2>::var(3.0, 0);
        let y = Jet::<2>::var(-2.0, 1);
        let f = x * x * y - y.scale(4.0) + Jet::cst(1.0);
        assert_eq!(f.v, 9.0 * -2.0 + 8.0 + 1.0);
        assert_eq!(f.d, [2.0 * 3.0 * -2.0, 9.0 - 4.0]);
    }
}
