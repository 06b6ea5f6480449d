//! Forward-mode derivatives with a fixed 3-wide tangent, used to compute
//! exact Jacobians of the deformation map w.r.t. the canonical coordinate.
//!
//! `Real` abstracts over plain f64 and `Jet3` so the field networks are
//! written once and evaluated on either.

use std::ops::{Add, Mul, Neg, Sub};

pub trait Real:
    Copy + Add<Output = Self> + Sub<Output = Self> + Mul<Output = Self> + Neg<Output = Self>
{
    fn cst(v: f64) -> Self;
    fn value(self) -> f64;
    /// Multiply by a constant.
    fn scale(self, s: f64) -> Self;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn exp(self) -> Self;
    fn recip(self) -> Self;
    fn relu(self) -> Self;
    fn softplus(self) -> Self;
    fn logistic(self) -> Self;
}

#[inline]
pub fn softplus_f64(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
pub fn logistic_f64(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Real for f64 {
    #[inline]
    fn cst(v: f64) -> Self {
        v
    }
    #[inline]
    fn value(self) -> f64 {
        self
    }
    #[inline]
    fn scale(self, s: f64) -> Self {
        self * s
    }
    #[inline]
    fn sin(self) -> Self {
        f64::sin(self)
    }
    #[inline]
    fn cos(self) -> Self {
        f64::cos(self)
    }
    #[inline]
    fn exp(self) -> Self {
        f64::exp(self)
    }
    #[inline]
    fn recip(self) -> Self {
        1.0 / self
    }
    #[inline]
    fn relu(self) -> Self {
        if self > 0.0 {
            self
        } else {
            0.0
        }
    }
    #[inline]
    fn softplus(self) -> Self {
        softplus_f64(self)
    }
    #[inline]
    fn logistic(self) -> Self {
        logistic_f64(self)
    }
}

/// Value plus a 3-vector of tangents (directional derivatives).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Jet3 {
    pub v: f64,
    pub d: [f64; 3],
}

impl Jet3 {
    /// Seed variable `i` of a 3-dimensional input.
    pub fn var(v: f64, i: usize) -> Jet3 {
        let mut d = [0.0; 3];
        d[i] = 1.0;
        Jet3 { v, d }
    }

    #[inline]
    fn chain(self, v: f64, dv: f64) -> Jet3 {
        Jet3 {
            v,
            d: [self.d[0] * dv, self.d[1] * dv, self.d[2] * dv],
        }
    }
}

impl Add for Jet3 {
    type Output = Jet3;
    #[inline]
    fn add(self, r: Jet3) -> Jet3 {
        Jet3 {
            v: self.v + r.v,
            d: [self.d[0] + r.d[0], self.d[1] + r.d[1], self.d[2] + r.d[2]],
        }
    }
}

impl Sub for Jet3 {
    type Output = Jet3;
    #[inline]
    fn sub(self, r: Jet3) -> Jet3 {
        Jet3 {
            v: self.v - r.v,
            d: [self.d[0] - r.d[0], self.d[1] - r.d[1], self.d[2] - r.d[2]],
        }
    }
}

impl Mul for Jet3 {
    type Output = Jet3;
    #[inline]
    fn mul(self, r: Jet3) -> Jet3 {
        Jet3 {
            v: self.v * r.v,
            d: [
                self.d[0] * r.v + self.v * r.d[0],
                self.d[1] * r.v + self.v * r.d[1],
                self.d[2] * r.v + self.v * r.d[2],
            ],
        }
    }
}

impl Neg for Jet3 {
    type Output = Jet3;
    #[inline]
    fn neg(self) -> Jet3 {
        Jet3 {
            v: -self.v,
            d: [-self.d[0], -self.d[1], -self.d[2]],
        }
    }
}

impl Real for Jet3 {
    #[inline]
    fn cst(v: f64) -> Self {
        Jet3 { v, d: [0.0; 3] }
    }
    #[inline]
    fn value(self) -> f64 {
        self.v
    }
    #[inline]
    fn scale(self, s: f64) -> Self {
        Jet3 {
            v: self.v * s,
            d: [self.d[0] * s, self.d[1] * s, self.d[2] * s],
        }
    }
    #[inline]
    fn sin(self) -> Self {
        self.chain(self.v.sin(), self.v.cos())
    }
    #[inline]
    fn cos(self) -> Self {
        self.chain(self.v.cos(), -self.v.sin())
    }
    #[inline]
    fn exp(self) -> Self {
        let e = self.v.exp();
        self.chain(e, e)
    }
    #[inline]
    fn recip(self) -> Self {
        let r = 1.0 / self.v;
        self.chain(r, -r * r)
    }
    #[inline]
    fn relu(self) -> Self {
        if self.v > 0.0 {
            self
        } else {
            Jet3::cst(0.0)
        }
    }
    #[inline]
    fn softplus(self) -> Self {
        self.chain(softplus_f64(self.v), logistic_f64(self.v))
    }
    #[inline]
    fn logistic(self) -> Self {
        let s = logistic_f64(self.v);
        self.chain(s, s * (1.0 - s))
    }
}
