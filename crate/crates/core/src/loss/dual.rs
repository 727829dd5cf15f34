//! Forward-mode dual numbers carrying four partial derivatives, enough to
//! differentiate box losses w.r.t. (cx, cy, w, h) in one pass.

use std::ops::{Add, Div, Mul, Neg, Sub};

#[derive(Debug, Clone, Copy)]
pub struct Dual4 {
    pub v: f64,
    pub d: [f64; 4],
}

impl Dual4 {
    pub fn constant(v: f64) -> Self {
        Dual4 { v, d: [0.0; 4] }
    }

    /// Seed variable `i` with unit derivative.
    pub fn var(v: f64, i: usize) -> Self {
        let mut d = [0.0; 4];
        d[i] = 1.0;
        Dual4 { v, d }
    }

    fn chain(self, v: f64, dv: f64) -> Self {
        Dual4 { v, d: self.d.map(|g| g * dv) }
    }

    pub fn exp(self) -> Self {
        let e = self.v.exp();
        self.chain(e, e)
    }

    pub fn sqrt(self) -> Self {
        let s = self.v.sqrt();
        self.chain(s, 0.5 / s)
    }

    pub fn atan(self) -> Self {
        self.chain(self.v.atan(), 1.0 / (1.0 + self.v * self.v))
    }

    /// |x| with subgradient 0 at the kink.
    pub fn abs(self) -> Self {
        let sign = if self.v > 0.0 {
            1.0
        } else if self.v < 0.0 {
            -1.0
        } else {
            0.0
        };
        self.chain(self.v.abs(), sign)
    }

    /// Larger-value branch; exact ties keep `self`.
    pub fn max(self, other: Dual4) -> Dual4 {
        if self.v >= other.v { self } else { other }
    }

    /// Smaller-value branch; exact ties keep `self`.
    pub fn min(self, other: Dual4) -> Dual4 {
        if self.v <= other.v { self } else { other }
    }
}

impl Add for Dual4 {
    type Output = Dual4;
    fn add(self, o: Dual4) -> Dual4 {
        Dual4 {
            v: self.v + o.v,
            d: [self.d[0] + o.d[0], self.d[1] + o.d[1], self.d[2] + o.d[2], self.d[3] + o.d[3]],
        }
    }
}

impl Sub for Dual4 {
    type Output = Dual4;
    fn sub(self, o: Dual4) -> Dual4 {
        self + (-o)
    }
}

impl Neg for Dual4 {
    type Output = Dual4;
    fn neg(self) -> Dual4 {
        Dual4 { v: -self.v, d: self.d.map(|g| -g) }
    }
}

impl Mul for Dual4 {
    type Output = Dual4;
    fn mul(self, o: Dual4) -> Dual4 {
        Dual4 {
            v: self.v * o.v,
            d: [
                self.d[0] * o.v + self.v * o.d[0],
                self.d[1] * o.v + self.v * o.d[1],
                self.d[2] * o.v + self.v * o.d[2],
                self.d[3] * o.v + self.v * o.d[3],
            ],
        }
    }
}

impl Div for Dual4 {
    type Output = Dual4;
    fn div(self, o: Dual4) -> Dual4 {
        let inv = 1.0 / o.v;
        let v = self.v * inv;
        Dual4 {
            v,
            d: [
                (self.d[0] - v * o.d[0]) * inv,
                (self.d[1] - v * o.d[1]) * inv,
                (self.d[2] - v * o.d[2]) * inv,
                (self.d[3] - v * o.d[3]) * inv,
            ],
        }
    }
}

macro_rules! scalar_ops {
    ($($op:ident :: $f:ident),*) => {$(
        impl $op<f64> for Dual4 {
            type Output = Dual4;
            fn $f(self, s: f64) -> Dual4 {
                self.$f(Dual4::constant(s))
            }
        }
        impl $op<Dual4> for f64 {
            type Output = Dual4;
            fn $f(self, d: Dual4) -> Dual4 {
                Dual4::constant(self).$f(d)
            }
        }
    )*};
}
scalar_ops!(Add::add, Sub::sub, Mul::mul, Div::div);
