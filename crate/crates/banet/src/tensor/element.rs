use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub};

/// Floating-point element type for tensors: f32 in the artifact, f64 for
/// finite-difference verification. Reductions accumulate in f64 regardless.
pub trait Element:
    Copy
    + Default
    + PartialOrd
    + Debug
    + Display
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + Sum
{
    fn zero() -> Self;
    fn one() -> Self;
    fn f64(self) -> f64;
    fn from64(v: f64) -> Self;

    fn exp(self) -> Self {
        Self::from64(self.f64().exp())
    }
    fn ln(self) -> Self {
        Self::from64(self.f64().ln())
    }
    fn sqrt(self) -> Self {
        Self::from64(self.f64().sqrt())
    }
    fn abs(self) -> Self {
        Self::from64(self.f64().abs())
    }
    fn max(self, other: Self) -> Self {
        if self > other {
            self
        } else {
            other
        }
    }
    /// Gauss error function, evaluated in f64 (absolute error below 2e-8).
    fn erf(self) -> Self {
        Self::from64(erf64(self.f64()))
    }
}

impl Element for f32 {
    fn zero() -> Self {
        0.0
    }
    fn one() -> Self {
        1.0
    }
    fn f64(self) -> f64 {
        self as f64
    }
    fn from64(v: f64) -> Self {
        v as f32
    }
}

impl Element for f64 {
    fn zero() -> Self {
        0.0
    }
    fn one() -> Self {
        1.0
    }
    fn f64(self) -> f64 {
        self
    }
    fn from64(v: f64) -> Self {
        v
    }
}

/// erf via its Maclaurin series for |x| <= 4, saturated to +-1 beyond
/// (erf(4) differs from 1 by 1.6e-8). The alternating series in f64 keeps
/// cancellation error below 1e-10 over that range.
pub fn erf64(x: f64) -> f64 {
    if x.abs() > 4.0 {
        return if x > 0.0 { 1.0 } else { -1.0 };
    }
    let x2 = x * x;
    let mut term = x;
    let mut sum = x;
    for n in 1..=60 {
        term *= -x2 / n as f64;
        let contrib = term / (2 * n + 1) as f64;
        sum += contrib;
        if contrib.abs() < 1e-17 * sum.abs().max(1e-300) {
            break;
        }
    }
    sum * 2.0 / std::f64::consts::PI.sqrt()
}

#[cfg(test)]
mod tests {
    use super::erf64;

    #[test]
    fn erf_reference_points() {
        // Reference values to 16 significant digits.
        let cases = [
            (0.0, 0.0),
            (0.5, 0.5204998778130465),
            (1.0, 0.8427007929497149),
            (2.0, 0.9953222650189527),
            (3.0, 0.9999779095030014),
            (-1.0, -0.8427007929497149),
        ];
        for (x, want) in cases {
            assert!(
                (erf64(x) - want).abs() < 1e-12,
                "erf({x}) = {}, want {want}",
                erf64(x)
            );
        }
    }

    #[test]
    fn erf_matches_quadrature() {
        // Independent oracle: Simpson quadrature of the Gaussian density.
        for i in 0..80 {
            let x = -4.0 + 0.1 * i as f64;
            let steps = 20_000;
            let h = x / steps as f64;
            let f = |t: f64| (-t * t).exp();
            let mut s = f(0.0) + f(x);
            for j in 1..steps {
                let t = j as f64 * h;
                s += f(t) * if j % 2 == 1 { 4.0 } else { 2.0 };
            }
            let oracle = s * h / 3.0 * 2.0 / std::f64::consts::PI.sqrt();
            assert!(
                (erf64(x) - oracle).abs() < 1e-9,
                "erf({x}): {} vs quadrature {}",
                erf64(x),
                oracle
            );
        }
    }
}
