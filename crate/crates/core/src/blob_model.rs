//! Gaussian event-blob state, event density and chi-squared gating.
//!
//! A blob is described by the 10-vector
//! `(p_x, p_y, v_x, v_y, θ, q, λ₁, λ₂, Δ₁, Δ₂)`. Its shape matrix
//! `Λ = R(θ) diag(λ) R(θ)ᵀ` is used so that `Λ²` is the covariance of event
//! positions around `p + σΔ`.

use nalgebra::{Matrix2, SMatrix, SVector, Vector2};
use thiserror::Error;

use crate::events::Event;
use crate::scalar::Real;

pub const STATE_DIM: usize = 10;

/// Index of each component in the canonical state vector.
pub mod idx {
    pub const PX: usize = 0;
    pub const PY: usize = 1;
    pub const VX: usize = 2;
    pub const VY: usize = 3;
    pub const THETA: usize = 4;
    pub const Q: usize = 5;
    pub const L1: usize = 6;
    pub const L2: usize = 7;
    pub const D1: usize = 8;
    pub const D2: usize = 9;
}

/// Smallest admissible principal axis, in pixels.
pub const LAMBDA_FLOOR: f64 = 0.5;

pub type StateVector<T> = SVector<T, STATE_DIM>;
pub type BlobCovariance<T> = SMatrix<T, STATE_DIM, STATE_DIM>;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("principal axes must be positive, got ({0}, {1})")]
    NonPositiveAxes(f64, f64),
}

/// Wraps an orientation into `(-π/2, π/2]`. The shape matrix is π-periodic
/// so this loses nothing.
#[inline]
pub fn wrap_orientation<T: Real>(theta: T) -> T {
    let pi = T::pi();
    let half = T::frac_pi_2();
    let mut t = theta % pi;
    if t > half {
        t -= pi;
    } else if t <= -half {
        t += pi;
    }
    t
}

/// Counter-clockwise rotation by `theta`.
#[inline]
pub fn rotation<T: Real>(theta: T) -> Matrix2<T> {
    let (s, c) = theta.sin_cos();
    Matrix2::new(c, -s, s, c)
}

/// `Λ = R(θ) diag(λ₁, λ₂) R(θ)ᵀ`.
pub fn shape_matrix<T: Real>(theta: T, lambda: Vector2<T>) -> Result<Matrix2<T>, ModelError> {
    if !(lambda.x > T::zero() && lambda.y > T::zero()) {
        return Err(ModelError::NonPositiveAxes(
            lambda.x.as_f64(),
            lambda.y.as_f64(),
        ));
    }
    Ok(scaled_rotation(theta, lambda.x, lambda.y))
}

/// `R(θ) diag(a, b) R(θ)ᵀ` without validation.
#[inline]
pub(crate) fn scaled_rotation<T: Real>(theta: T, a: T, b: T) -> Matrix2<T> {
    let (s, c) = theta.sin_cos();
    let (cc, ss, cs) = (c * c, s * s, c * s);
    let off = (a - b) * cs;
    Matrix2::new(a * cc + b * ss, off, off, a * ss + b * cc)
}

/// `Λ⁻¹`, computed from the eigen-decomposition rather than by inversion.
#[inline]
pub fn inverse_shape<T: Real>(theta: T, lambda: Vector2<T>) -> Matrix2<T> {
    scaled_rotation(theta, T::one() / lambda.x, T::one() / lambda.y)
}

/// Event-blob state ζ.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlobState<T: Real> {
    pub p: Vector2<T>,
    pub v: Vector2<T>,
    pub theta: T,
    pub q: T,
    pub lambda: Vector2<T>,
    pub delta: Vector2<T>,
}

impl<T: Real> BlobState<T> {
    pub fn from_vector(x: &StateVector<T>) -> Self {
        Self {
            p: Vector2::new(x[idx::PX], x[idx::PY]),
            v: Vector2::new(x[idx::VX], x[idx::VY]),
            theta: x[idx::THETA],
            q: x[idx::Q],
            lambda: Vector2::new(x[idx::L1], x[idx::L2]),
            delta: Vector2::new(x[idx::D1], x[idx::D2]),
        }
    }

    pub fn to_vector(&self) -> StateVector<T> {
        StateVector::from_column_slice(&[
            self.p.x,
            self.p.y,
            self.v.x,
            self.v.y,
            self.theta,
            self.q,
            self.lambda.x,
            self.lambda.y,
            self.delta.x,
            self.delta.y,
        ])
    }

    pub fn shape(&self) -> Result<Matrix2<T>, ModelError> {
        shape_matrix(self.theta, self.lambda)
    }

    #[inline]
    pub fn inverse_shape(&self) -> Matrix2<T> {
        inverse_shape(self.theta, self.lambda)
    }

    /// Residual `ξ − p − σΔ`.
    #[inline]
    pub fn residual(&self, position: Vector2<T>, sigma: T) -> Vector2<T> {
        position - self.p - self.delta * sigma
    }

    /// Wraps θ and clamps both axes to `floor`.
    pub fn canonicalize(&mut self, floor: T) {
        self.theta = wrap_orientation(self.theta);
        self.lambda.x = self.lambda.x.max(floor);
        self.lambda.y = self.lambda.y.max(floor);
    }

    /// Mean position and orientation advanced by `dt` seconds under the
    /// constant-velocity, constant-rate model.
    #[inline]
    pub fn extrapolated(&self, dt: T) -> Self {
        Self {
            p: self.p + self.v * dt,
            theta: self.theta + self.q * dt,
            ..*self
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_vector().iter().all(|v| v.is_finite())
    }
}

/// `d² = ξ̃ᵀ Λ⁻² ξ̃` for a raw position and polarity sign.
#[inline]
pub fn mahalanobis_sq_at<T: Real>(state: &BlobState<T>, position: Vector2<T>, sigma: T) -> T {
    let h = state.inverse_shape() * state.residual(position, sigma);
    h.norm_squared()
}

pub fn mahalanobis_sq<T: Real>(state: &BlobState<T>, event: &Event) -> T {
    mahalanobis_sq_at(state, event.position(), event.polarity.value())
}

/// Conditional event density `exp(−½ d²) / (2π det Λ)`.
pub fn event_density<T: Real>(state: &BlobState<T>, event: &Event) -> T {
    let det = state.lambda.x * state.lambda.y;
    let d2 = mahalanobis_sq(state, event);
    (-d2 * T::lit(0.5)).exp() / (T::two_pi() * det)
}

/// Critical value of χ²₂ at the given significance: `−2 ln(1 − s)`.
#[inline]
pub fn chi2_2_critical(significance: f64) -> f64 {
    -2.0 * (1.0 - significance).ln()
}

#[inline]
pub fn gate<T: Real>(d2: T, significance: f64) -> bool {
    d2 <= T::lit(chi2_2_critical(significance))
}
