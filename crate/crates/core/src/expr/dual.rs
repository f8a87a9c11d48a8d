//! Forward-mode dual numbers.
//!
//! [`Dual<T>`] carries a value and a vector of partial derivatives whose
//! components are themselves scalars of type `T`. Nesting `Dual<Dual<f64>>`
//! yields exact second derivatives: the inner layer tracks the gradient and
//! the outer layer differentiates it along one seed direction.

use std::ops::{Add, Div, Mul, Neg, Sub};

/// Arithmetic needed by the expression evaluator.
pub trait Scalar:
    Clone
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    /// Whether this scalar type tracks derivatives.
    const DIFFERENTIATES: bool;

    fn constant(c: f64) -> Self;

    /// The underlying real value, with every infinitesimal part dropped.
    fn re(&self) -> f64;

    fn sin(&self) -> Self;
    fn cos(&self) -> Self;
    fn exp(&self) -> Self;
    fn ln(&self) -> Self;
    fn sqrt(&self) -> Self;

    /// Integer power by repeated multiplication.
    fn powi(&self, n: i32) -> Self {
        if n == 0 {
            return Self::constant(1.0);
        }
        let mut base = self.clone();
        let mut k = n.unsigned_abs();
        let mut acc: Option<Self> = None;
        while k > 0 {
            if k & 1 == 1 {
                acc = Some(match acc {
                    Some(a) => a * base.clone(),
                    None => base.clone(),
                });
            }
            k >>= 1;
            if k > 0 {
                base = base.clone() * base;
            }
        }
        let pos = acc.expect("nonzero exponent");
        if n < 0 {
            Self::constant(1.0) / pos
        } else {
            pos
        }
    }
}

impl Scalar for f64 {
    const DIFFERENTIATES: bool = false;

    fn constant(c: f64) -> Self {
        c
    }
    fn re(&self) -> f64 {
        *self
    }
    fn sin(&self) -> Self {
        f64::sin(*self)
    }
    fn cos(&self) -> Self {
        f64::cos(*self)
    }
    fn exp(&self) -> Self {
        f64::exp(*self)
    }
    fn ln(&self) -> Self {
        f64::ln(*self)
    }
    fn sqrt(&self) -> Self {
        f64::sqrt(*self)
    }
}

/// A value together with its partial derivatives.
///
/// An empty `eps` stands for an all-zero derivative vector, so constants cost
/// no allocation.
#[derive(Debug, Clone, PartialEq)]
pub struct Dual<T> {
    pub re: T,
    pub eps: Vec<T>,
}

impl<T: Scalar> Dual<T> {
    pub fn new(re: T, eps: Vec<T>) -> Self {
        Self { re, eps }
    }

    /// The `index`-th of `len` seeded variables with value `re`.
    pub fn variable(re: T, index: usize, len: usize) -> Self {
        let mut eps = vec![T::constant(0.0); len];
        eps[index] = T::constant(1.0);
        Self { re, eps }
    }

    /// Applies a scalar function given its value and derivative at `self.re`.
    fn chain(&self, value: T, slope: T) -> Self {
        let eps = self.eps.iter().map(|e| e.clone() * slope.clone()).collect();
        Self { re: value, eps }
    }
}

fn zip_eps<T: Scalar>(a: &[T], b: &[T], f: impl Fn(Option<&T>, Option<&T>) -> T) -> Vec<T> {
    let len = a.len().max(b.len());
    (0..len).map(|i| f(a.get(i), b.get(i))).collect()
}

impl<T: Scalar> Add for Dual<T> {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        let eps = zip_eps(&self.eps, &rhs.eps, |a, b| match (a, b) {
            (Some(a), Some(b)) => a.clone() + b.clone(),
            (Some(a), None) => a.clone(),
            (None, Some(b)) => b.clone(),
            (None, None) => unreachable!(),
        });
        Self {
            re: self.re + rhs.re,
            eps,
        }
    }
}

impl<T: Scalar> Sub for Dual<T> {
    type Output = Self;
    fn sub(self, rhs: Self) -> Self {
        let eps = zip_eps(&self.eps, &rhs.eps, |a, b| match (a, b) {
            (Some(a), Some(b)) => a.clone() - b.clone(),
            (Some(a), None) => a.clone(),
            (None, Some(b)) => -b.clone(),
            (None, None) => unreachable!(),
        });
        Self {
            re: self.re - rhs.re,
            eps,
        }
    }
}

#[allow(clippy::suspicious_arithmetic_impl)]
impl<T: Scalar> Mul for Dual<T> {
    type Output = Self;
    fn mul(self, rhs: Self) -> Self {
        let eps = zip_eps(&self.eps, &rhs.eps, |a, b| match (a, b) {
            (Some(a), Some(b)) => a.clone() * rhs.re.clone() + b.clone() * self.re.clone(),
            (Some(a), None) => a.clone() * rhs.re.clone(),
            (None, Some(b)) => b.clone() * self.re.clone(),
            (None, None) => unreachable!(),
        });
        Self {
            re: self.re * rhs.re,
            eps,
        }
    }
}

#[allow(clippy::suspicious_arithmetic_impl)]
impl<T: Scalar> Div for Dual<T> {
    type Output = Self;
    fn div(self, rhs: Self) -> Self {
        let re = self.re.clone() / rhs.re.clone();
        // d(a/b) = (da - q db) / b
        let eps = zip_eps(&self.eps, &rhs.eps, |a, b| match (a, b) {
            (Some(a), Some(b)) => (a.clone() - re.clone() * b.clone()) / rhs.re.clone(),
            (Some(a), None) => a.clone() / rhs.re.clone(),
            (None, Some(b)) => -(re.clone() * b.clone()) / rhs.re.clone(),
            (None, None) => unreachable!(),
        });
        Self { re, eps }
    }
}

impl<T: Scalar> Neg for Dual<T> {
    type Output = Self;
    fn neg(self) -> Self {
        Self {
            re: -self.re,
            eps: self.eps.into_iter().map(|e| -e).collect(),
        }
    }
}

impl<T: Scalar> Scalar for Dual<T> {
    const DIFFERENTIATES: bool = true;

    fn constant(c: f64) -> Self {
        Self {
            re: T::constant(c),
            eps: Vec::new(),
        }
    }
    fn re(&self) -> f64 {
        self.re.re()
    }
    fn sin(&self) -> Self {
        self.chain(self.re.sin(), self.re.cos())
    }
    fn cos(&self) -> Self {
        self.chain(self.re.cos(), -self.re.sin())
    }
    fn exp(&self) -> Self {
        let e = self.re.exp();
        self.chain(e.clone(), e)
    }
    fn ln(&self) -> Self {
        self.chain(self.re.ln(), T::constant(1.0) / self.re.clone())
    }
    fn sqrt(&self) -> Self {
        let s = self.re.sqrt();
        self.chain(s.clone(), T::constant(0.5) / s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn product_rule() {
        let x = Dual::variable(3.0, 0, 2);
        let y = Dual::variable(4.0, 1, 2);
        let p = x.clone() * y.clone() + x / y;
        assert_eq!(p.re, 12.75);
        assert_eq!(p.eps, vec![4.0 + 0.25, 3.0 - 3.0 / 16.0]);
    }

    #[test]
    fn constants_have_no_derivative() {
        let c: Dual<f64> = Dual::constant(2.5);
        assert!(c.eps.is_empty());
        let x = Dual::variable(1.0, 0, 1);
        let s = c.clone() * x;
        assert_eq!(s.eps, vec![2.5]);
    }

    #[test]
    fn powi_matches_closed_form() {
        let x = Dual::variable(1.5, 0, 1);
        let p = x.powi(5);
        assert!((p.re - 1.5f64.powi(5)).abs() < 1e-12);
        assert!((p.eps[0] - 5.0 * 1.5f64.powi(4)).abs() < 1e-12);
        let q = x.powi(-2);
        assert!((q.eps[0] + 2.0 / 1.5f64.powi(3)).abs() < 1e-12);
        assert_eq!(x.powi(0).re, 1.0);
    }

    #[test]
    fn nested_dual_gives_second_derivative() {
        // f(x) = sin(x) * x, f'' = 2 cos x - x sin x
        let x0 = 0.7;
        let inner = Dual::variable(x0, 0, 1);
        let x = Dual::new(inner, vec![Dual::constant(1.0)]);
        let f = x.sin() * x.clone();
        let second = f.eps[0].eps[0];
        assert!((second - (2.0 * x0.cos() - x0 * x0.sin())).abs() < 1e-12);
    }
}
