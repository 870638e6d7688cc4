//! Scalar forward-mode dual numbers.
//!
//! A `Dual` carries a value and its directional derivative. Seeding one
//! coordinate's tangent with 1 and evaluating yields that partial derivative.

use std::ops::{Add, Div, Mul, Neg, Sub};

use super::tape::{sigmoid, softplus};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dual {
    pub primal: f64,
    pub tangent: f64,
}

impl Dual {
    pub const fn new(primal: f64, tangent: f64) -> Self {
        Self { primal, tangent }
    }

    pub const fn constant(primal: f64) -> Self {
        Self::new(primal, 0.0)
    }

    pub const fn variable(primal: f64) -> Self {
        Self::new(primal, 1.0)
    }

    pub fn exp(self) -> Self {
        let e = self.primal.exp();
        Self::new(e, e * self.tangent)
    }

    pub fn ln(self) -> Self {
        Self::new(self.primal.ln(), self.tangent / self.primal)
    }

    pub fn ln_1p(self) -> Self {
        Self::new(self.primal.ln_1p(), self.tangent / (1.0 + self.primal))
    }

    pub fn sin(self) -> Self {
        Self::new(self.primal.sin(), self.primal.cos() * self.tangent)
    }

    pub fn cos(self) -> Self {
        Self::new(self.primal.cos(), -self.primal.sin() * self.tangent)
    }

    pub fn softplus(self) -> Self {
        Self::new(softplus(self.primal), sigmoid(self.primal) * self.tangent)
    }

    /// Subgradient 0 at the origin.
    pub fn relu(self) -> Self {
        if self.primal > 0.0 {
            self
        } else {
            Self::constant(0.0)
        }
    }

    pub fn abs(self) -> Self {
        if self.primal > 0.0 {
            self
        } else if self.primal < 0.0 {
            -self
        } else {
            Self::constant(0.0)
        }
    }

    pub fn max(self, other: Self) -> Self {
        if self.primal > other.primal {
            self
        } else if other.primal > self.primal {
            other
        } else {
            Self::constant(self.primal)
        }
    }

    pub fn sqrt(self) -> Self {
        let r = self.primal.sqrt();
        Self::new(r, self.tangent / (2.0 * r))
    }
}

impl Add for Dual {
    type Output = Dual;
    fn add(self, rhs: Dual) -> Dual {
        Dual::new(self.primal + rhs.primal, self.tangent + rhs.tangent)
    }
}

impl Sub for Dual {
    type Output = Dual;
    fn sub(self, rhs: Dual) -> Dual {
        Dual::new(self.primal - rhs.primal, self.tangent - rhs.tangent)
    }
}

impl Mul for Dual {
    type Output = Dual;
    fn mul(self, rhs: Dual) -> Dual {
        Dual::new(
            self.primal * rhs.primal,
            self.tangent * rhs.primal + self.primal * rhs.tangent,
        )
    }
}

impl Div for Dual {
    type Output = Dual;
    fn div(self, rhs: Dual) -> Dual {
        Dual::new(
            self.primal / rhs.primal,
            (self.tangent * rhs.primal - self.primal * rhs.tangent) / (rhs.primal * rhs.primal),
        )
    }
}

impl Neg for Dual {
    type Output = Dual;
    fn neg(self) -> Dual {
        Dual::new(-self.primal, -self.tangent)
    }
}

impl Mul<f64> for Dual {
    type Output = Dual;
    fn mul(self, rhs: f64) -> Dual {
        Dual::new(self.primal * rhs, self.tangent * rhs)
    }
}

impl Add<f64> for Dual {
    type Output = Dual;
    fn add(self, rhs: f64) -> Dual {
        Dual::new(self.primal + rhs, self.tangent)
    }
}

/// Gradient of a scalar field at `x` by three axis-seeded forward passes.
pub fn gradient3(f: impl Fn([Dual; 3]) -> Dual, x: [f64; 3]) -> [f64; 3] {
    let mut g = [0.0; 3];
    for (axis, slot) in g.iter_mut().enumerate() {
        let seeded = std::array::from_fn(|k| Dual::new(x[k], if k == axis { 1.0 } else { 0.0 }));
        *slot = f(seeded).tangent;
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn product_and_quotient_rules() {
        let x = Dual::variable(2.0);
        let y = Dual::constant(3.0);
        assert_eq!((x * x).tangent, 4.0);
        assert_eq!((x / y).tangent, 1.0 / 3.0);
        assert_eq!((y / x).tangent, -3.0 / 4.0);
    }

    #[test]
    fn gradient_of_quadratic() {
        let g = gradient3(|x| x[0] * x[0] + x[1] * x[1] + x[2] * x[2], [1.0, 2.0, 3.0]);
        assert_eq!(g, [2.0, 4.0, 6.0]);
    }

    #[test]
    fn kinks_take_zero_subgradient() {
        assert_eq!(Dual::variable(0.0).relu().tangent, 0.0);
        assert_eq!(Dual::variable(0.0).abs().tangent, 0.0);
        let a = Dual::new(1.0, 1.0);
        let b = Dual::new(1.0, -1.0);
        assert_eq!(a.max(b).tangent, 0.0);
    }
}
