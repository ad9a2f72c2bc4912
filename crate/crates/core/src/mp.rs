//! Marčenko–Pastur Stieltjes transforms evaluated on the negative real axis.
//!
//! For an aspect ratio `c = p/n`, `m(z)` is the limiting normalised trace of
//! `((1/n) X Xᵀ - z I_p)^{-1}` and the companion `m̃(z) = c m(z) - (1-c)/z` is
//! the corresponding limit for the `n x n` Gram matrix. All theory paths
//! evaluate at `z = -λ < 0`, strictly left of the spectrum, where both
//! transforms are real, positive and increasing.

use crate::error::{Error, Result};

/// Limit ratio `p/n`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct AspectRatio(f64);

impl AspectRatio {
    pub fn new(c: f64) -> Result<Self> {
        if c.is_finite() && c > 0.0 {
            Ok(Self(c))
        } else {
            Err(Error::InvalidAspectRatio(c))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

/// A point `z < 0` on the real axis.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct SpectralPoint(f64);

impl SpectralPoint {
    pub fn new(z: f64) -> Result<Self> {
        if z < 0.0 && z.is_finite() {
            Ok(Self(z))
        } else {
            Err(Error::NonNegativeZ(z))
        }
    }

    /// `z = -λ` for a ridge penalty `λ > 0`.
    pub fn from_lambda(lambda: f64) -> Result<Self> {
        Self::new(-lambda)
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

/// All four transform values at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransformValues {
    pub m: f64,
    pub m_tilde: f64,
    pub m_prime: f64,
    pub m_tilde_prime: f64,
}

impl TransformValues {
    pub fn at(c: AspectRatio, z: SpectralPoint) -> Result<Self> {
        let m = mp_stieltjes(c, z)?;
        let m_prime = derivative_from_m(c.get(), z.get(), m)?;
        let (cv, zv) = (c.get(), z.get());
        Ok(Self {
            m,
            m_tilde: cv * m - (1.0 - cv) / zv,
            m_prime,
            m_tilde_prime: cv * m_prime + (1.0 - cv) / (zv * zv),
        })
    }
}

/// Residual of the quadratic `z c m² - (1-c-z) m + 1 = 0` satisfied by `m(z)`.
pub fn self_consistency_residual(c: AspectRatio, z: SpectralPoint, m: f64) -> f64 {
    let (c, z) = (c.get(), z.get());
    z * c * m * m - (1.0 - c - z) * m + 1.0
}

/// Stieltjes transform `m(z)` of the Marčenko–Pastur law with ratio `c`.
///
/// Closed form `(b - √(b² - 4cz)) / (2cz)` with `b = 1 - c - z`. When `b ≥ 0`
/// the numerator cancels catastrophically as `|cz| → 0`, so that branch is
/// evaluated through the conjugate form `2 / (b + √(b² - 4cz))`, which is
/// algebraically identical. The switch is on the sign of `b` rather than a
/// fixed `|cz|` threshold: it always picks the cancellation-free form, and
/// in particular covers every `|cz| < 1e-8` case with `b > 0`.
pub fn mp_stieltjes(c: AspectRatio, z: SpectralPoint) -> Result<f64> {
    let (cv, zv) = (c.get(), z.get());
    let b = 1.0 - cv - zv;
    let disc = (b * b - 4.0 * cv * zv).sqrt();
    let m = if b >= 0.0 {
        2.0 / (b + disc)
    } else {
        (b - disc) / (2.0 * cv * zv)
    };
    if !(m > 0.0) || !m.is_finite() {
        return Err(Error::NumericalBranchFailure { c: cv, z: zv, value: m });
    }
    Ok(m)
}

/// Companion transform `m̃(z) = c m(z) - (1-c)/z`.
pub fn mp_companion(c: AspectRatio, z: SpectralPoint) -> Result<f64> {
    let m = mp_stieltjes(c, z)?;
    Ok(c.get() * m - (1.0 - c.get()) / z.get())
}

fn derivative_from_m(c: f64, z: f64, m: f64) -> Result<f64> {
    // implicit differentiation of z c m² - (1-c-z) m + 1 = 0
    let denom = 2.0 * z * c * m + c + z - 1.0;
    if denom.abs() < 1e-14 {
        return Err(Error::SingularDerivativeDenominator(denom));
    }
    Ok(-(c * m * m + m) / denom)
}

/// `m'(z)`, by implicit differentiation of the self-consistency equation.
pub fn mp_stieltjes_derivative(c: AspectRatio, z: SpectralPoint) -> Result<f64> {
    let m = mp_stieltjes(c, z)?;
    derivative_from_m(c.get(), z.get(), m)
}

/// `m̃'(z) = c m'(z) + (1-c)/z²`.
pub fn mp_companion_derivative(c: AspectRatio, z: SpectralPoint) -> Result<f64> {
    let mp = mp_stieltjes_derivative(c, z)?;
    let zv = z.get();
    Ok(c.get() * mp + (1.0 - c.get()) / (zv * zv))
}
