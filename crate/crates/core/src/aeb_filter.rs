//! Per-track extended Kalman filter over the 10-dimensional blob state.
//!
//! Two pseudo-measurements drive the correction:
//!
//! * `H = Λ⁻¹(ξ − σΔ − p)`, observed as `0` with noise `I₂`;
//! * `G = (1+β)⁻¹ Σⱼ ‖Λ⁻¹(ξⱼ − σⱼΔ − p̂⁻ⱼ)‖²` over the last `n` associated
//!   events and the predictions made at their arrival, observed as `2n`
//!   with noise `4n`. `G` keeps the shape observable.
//!
//! `β` bounds the buffered position covariances, so for `λ ≥ 1` the factor
//! `(1+β)⁻¹` bounds the inflation of each squared residual by prediction
//! error. Applying it inside the norm (squared) over-corrects and drags `λ`
//! to the floor while the first predictions are still uncertain.
//!
//! The process model is constant velocity and constant angular rate.

use std::collections::VecDeque;

use nalgebra::{Matrix2, SMatrix, SVector, Vector2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::blob_model::{idx, inverse_shape, wrap_orientation, BlobCovariance, BlobState, STATE_DIM};
use crate::detector::Detection;
use crate::scalar::{us_to_s, Real};

#[derive(Debug, Error, PartialEq)]
pub enum FilterError {
    #[error("negative time step {0} s")]
    NegativeTimeStep(f64),
    #[error("filter diverged (non-finite state or covariance)")]
    NonFinite,
}

/// One value per state block, in state order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockDiagonal {
    pub position: f64,
    pub velocity: f64,
    pub theta: f64,
    pub q: f64,
    pub lambda: f64,
    pub delta: f64,
}

impl BlockDiagonal {
    pub fn diagonal<T: Real>(&self) -> SVector<T, STATE_DIM> {
        let v = [
            self.position,
            self.position,
            self.velocity,
            self.velocity,
            self.theta,
            self.q,
            self.lambda,
            self.lambda,
            self.delta,
            self.delta,
        ];
        SVector::from_iterator(v.iter().map(|&x| T::lit(x)))
    }

    fn all_non_negative(&self) -> bool {
        [
            self.position,
            self.velocity,
            self.theta,
            self.q,
            self.lambda,
            self.delta,
        ]
        .iter()
        .all(|v| *v >= 0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterConfig {
    /// Number of past (prediction, event) pairs entering `G`.
    pub buffer_len: usize,
    /// Process noise spectral densities (per second).
    pub process_noise: BlockDiagonal,
    pub initial_covariance: BlockDiagonal,
    pub lambda_floor: f64,
    pub spawn_lambda: [f64; 2],
    /// Magnitude of the initial polarity offset along the motion, px.
    pub spawn_delta: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            buffer_len: 20,
            process_noise: BlockDiagonal {
                position: 0.0,
                velocity: 200.0,
                theta: 0.0,
                q: 5.0,
                lambda: 0.5,
                delta: 0.1,
            },
            initial_covariance: BlockDiagonal {
                position: 4.0,
                velocity: 1e4,
                theta: 0.5,
                q: 10.0,
                lambda: 4.0,
                delta: 2.0,
            },
            lambda_floor: crate::blob_model::LAMBDA_FLOOR,
            spawn_lambda: [3.0, 1.5],
            spawn_delta: 1.5,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.buffer_len < 2 {
            return Err("filter.buffer_len must be >= 2".into());
        }
        if !self.process_noise.all_non_negative() {
            return Err("filter.process_noise entries must be >= 0".into());
        }
        if !self.initial_covariance.all_non_negative() {
            return Err("filter.initial_covariance entries must be >= 0".into());
        }
        if !(self.lambda_floor > 0.0) {
            return Err("filter.lambda_floor must be > 0".into());
        }
        if !(self.spawn_lambda[0] >= self.lambda_floor && self.spawn_lambda[1] >= self.lambda_floor) {
            return Err("filter.spawn_lambda must be >= filter.lambda_floor".into());
        }
        Ok(())
    }
}

/// What the filter predicted when an associated event arrived.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BufferedPrediction<T: Real> {
    pub position: Vector2<T>,
    pub inverse_shape: Matrix2<T>,
    pub delta: Vector2<T>,
    /// 2-norm of the predicted position covariance.
    pub covariance_norm: T,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BufferedEvent<T: Real> {
    pub position: Vector2<T>,
    pub sigma: T,
}

/// Ring buffers of the last `n` predictions and their events.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterBuffers<T: Real> {
    capacity: usize,
    predictions: VecDeque<BufferedPrediction<T>>,
    events: VecDeque<BufferedEvent<T>>,
}

impl<T: Real> FilterBuffers<T> {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            predictions: VecDeque::with_capacity(capacity + 1),
            events: VecDeque::with_capacity(capacity + 1),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.events.len() >= self.capacity
    }

    /// Appends a pair, evicting the oldest once at capacity.
    pub fn push(&mut self, prediction: BufferedPrediction<T>, event: BufferedEvent<T>) {
        if self.events.len() == self.capacity {
            self.predictions.pop_front();
            self.events.pop_front();
        }
        self.predictions.push_back(prediction);
        self.events.push_back(event);
    }

    /// Upper bound `β` on the stored position-covariance norms.
    pub fn beta(&self) -> T {
        self.predictions
            .iter()
            .fold(T::zero(), |m, p| m.max(p.covariance_norm))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&BufferedPrediction<T>, &BufferedEvent<T>)> {
        self.predictions.iter().zip(self.events.iter())
    }
}

/// `G` with the shape and offset stored alongside each prediction.
pub fn measurement_g<T: Real>(buffers: &FilterBuffers<T>) -> T {
    let scale = T::one() / (T::one() + buffers.beta());
    let sum = buffers.iter().fold(T::zero(), |acc, (pred, ev)| {
        let r = ev.position - ev.delta_free(pred);
        acc + (pred.inverse_shape * r).norm_squared()
    });
    sum * scale
}

impl<T: Real> BufferedEvent<T> {
    #[inline]
    fn delta_free(&self, pred: &BufferedPrediction<T>) -> Vector2<T> {
        pred.position + pred.delta * self.sigma
    }
}

/// `G` as a function of the current shape and offset, with the buffered
/// predicted positions held fixed. This is the form linearized in the
/// update.
pub fn g_at_state<T: Real>(state: &BlobState<T>, buffers: &FilterBuffers<T>) -> T {
    g_from_components(state.theta, state.lambda, state.delta, buffers)
}

#[inline]
fn g_from_components<T: Real>(
    theta: T,
    lambda: Vector2<T>,
    delta: Vector2<T>,
    buffers: &FilterBuffers<T>,
) -> T {
    let li = inverse_shape(theta, lambda);
    let scale = T::one() / (T::one() + buffers.beta());
    let sum = buffers.iter().fold(T::zero(), |acc, (pred, ev)| {
        let r = ev.position - pred.position - delta * ev.sigma;
        acc + (li * r).norm_squared()
    });
    sum * scale
}

/// `H = Λ⁻¹(ξ − σΔ − p)`.
#[inline]
pub fn measurement_h<T: Real>(state: &BlobState<T>, position: Vector2<T>, sigma: T) -> Vector2<T> {
    state.inverse_shape() * state.residual(position, sigma)
}

/// Analytic `∂H/∂ζ`.
pub fn jacobian_h<T: Real>(state: &BlobState<T>, position: Vector2<T>, sigma: T) -> SMatrix<T, 2, STATE_DIM> {
    let (s, c) = state.theta.sin_cos();
    let (a, b) = (T::one() / state.lambda.x, T::one() / state.lambda.y);
    let li = inverse_shape(state.theta, state.lambda);
    let r = state.residual(position, sigma);
    let two = T::lit(2.0);
    let d_theta = Matrix2::new(-two * c * s, c * c - s * s, c * c - s * s, two * c * s) * (a - b);
    let u1 = Vector2::new(c, s);
    let u2 = Vector2::new(-s, c);
    let dl1 = u1 * (-(a * a) * u1.dot(&r));
    let dl2 = u2 * (-(b * b) * u2.dot(&r));
    let dth = d_theta * r;

    let mut j = SMatrix::<T, 2, STATE_DIM>::zeros();
    for row in 0..2 {
        j[(row, idx::PX)] = -li[(row, 0)];
        j[(row, idx::PY)] = -li[(row, 1)];
        j[(row, idx::D1)] = -sigma * li[(row, 0)];
        j[(row, idx::D2)] = -sigma * li[(row, 1)];
        j[(row, idx::THETA)] = dth[row];
        j[(row, idx::L1)] = dl1[row];
        j[(row, idx::L2)] = dl2[row];
    }
    j
}

/// `∂G/∂ζ` by central differences through the current-state dependence.
pub fn jacobian_g<T: Real>(state: &BlobState<T>, buffers: &FilterBuffers<T>) -> SVector<T, STATE_DIM> {
    let h = T::fd_step();
    let two_h = h + h;
    let x = state.to_vector();
    let mut grad = SVector::<T, STATE_DIM>::zeros();
    for k in 0..STATE_DIM {
        let mut plus = x;
        let mut minus = x;
        plus[k] += h;
        minus[k] -= h;
        let gp = g_from_components(
            plus[idx::THETA],
            Vector2::new(plus[idx::L1], plus[idx::L2]),
            Vector2::new(plus[idx::D1], plus[idx::D2]),
            buffers,
        );
        let gm = g_from_components(
            minus[idx::THETA],
            Vector2::new(minus[idx::L1], minus[idx::L2]),
            Vector2::new(minus[idx::D1], minus[idx::D2]),
            buffers,
        );
        grad[k] = (gp - gm) / two_h;
    }
    grad
}

/// Stacked `C = [∂H/∂ζ; ∂G/∂ζ]`.
pub fn jacobians<T: Real>(
    state: &BlobState<T>,
    position: Vector2<T>,
    sigma: T,
    buffers: &FilterBuffers<T>,
) -> SMatrix<T, 3, STATE_DIM> {
    let jh = jacobian_h(state, position, sigma);
    let jg = jacobian_g(state, buffers);
    let mut c = SMatrix::<T, 3, STATE_DIM>::zeros();
    c.fixed_rows_mut::<2>(0).copy_from(&jh);
    c.row_mut(2).copy_from(&jg.transpose());
    c
}

/// Constant-velocity prediction over `dt` seconds.
pub fn predict<T: Real>(
    state: &BlobState<T>,
    covariance: &BlobCovariance<T>,
    dt: T,
    process_noise: &SVector<T, STATE_DIM>,
) -> Result<(BlobState<T>, BlobCovariance<T>), FilterError> {
    if dt < T::zero() {
        return Err(FilterError::NegativeTimeStep(dt.as_f64()));
    }
    if dt == T::zero() {
        return Ok((*state, *covariance));
    }
    let mut next = state.extrapolated(dt);
    next.theta = wrap_orientation(next.theta);

    // F P Fᵀ with F = I + dt·(p←v, θ←q), applied as row then column ops.
    let pairs = [(idx::PX, idx::VX), (idx::PY, idx::VY), (idx::THETA, idx::Q)];
    let mut p = *covariance;
    for &(dst, src) in &pairs {
        let row = p.row(src) * dt;
        let mut r = p.row_mut(dst);
        r += row;
    }
    for &(dst, src) in &pairs {
        let col = p.column(src) * dt;
        let mut c = p.column_mut(dst);
        c += col;
    }
    for k in 0..STATE_DIM {
        p[(k, k)] += process_noise[k] * dt;
    }
    Ok((next, p))
}

/// Generic EKF correction with Joseph-form covariance update.
pub fn ekf_correct<T: Real, const M: usize>(
    x: &SVector<T, STATE_DIM>,
    p: &BlobCovariance<T>,
    innovation: &SVector<T, M>,
    c: &SMatrix<T, M, STATE_DIM>,
    r: &SMatrix<T, M, M>,
) -> Result<(SVector<T, STATE_DIM>, BlobCovariance<T>), FilterError> {
    let pct = p * c.transpose();
    let s = c * pct + r;
    let s_inv = s.try_inverse().ok_or(FilterError::NonFinite)?;
    let k = pct * s_inv;
    let x_new = x + k * innovation;
    let ikc = BlobCovariance::<T>::identity() - k * c;
    let joseph = ikc * p * ikc.transpose() + k * r * k.transpose();
    let p_new = (joseph + joseph.transpose()) * T::lit(0.5);
    if !x_new.iter().chain(p_new.iter()).all(|v| v.is_finite()) {
        return Err(FilterError::NonFinite);
    }
    Ok((x_new, p_new))
}

#[inline]
fn position_covariance_norm<T: Real>(p: &BlobCovariance<T>) -> T {
    let (a, b, c) = (p[(0, 0)], p[(0, 1)], p[(1, 1)]);
    let half = T::lit(0.5);
    let mean = (a + c) * half;
    let diff = (a - c) * half;
    mean + (diff * diff + b * b).sqrt()
}

/// Corrects a predicted state with one associated event, then rotates the
/// buffers. Until the buffers hold `n` pairs only `H` is used.
pub fn update<T: Real>(
    state: &BlobState<T>,
    covariance: &BlobCovariance<T>,
    position: Vector2<T>,
    sigma: T,
    buffers: &mut FilterBuffers<T>,
    lambda_floor: T,
) -> Result<(BlobState<T>, BlobCovariance<T>), FilterError> {
    let x = state.to_vector();
    let h = measurement_h(state, position, sigma);
    let jh = jacobian_h(state, position, sigma);
    let (x_new, p_new) = if buffers.is_full() {
        let n = T::lit(buffers.capacity() as f64);
        let g = g_at_state(state, buffers);
        let innovation = SVector::<T, 3>::new(-h.x, -h.y, n + n - g);
        let mut c = SMatrix::<T, 3, STATE_DIM>::zeros();
        c.fixed_rows_mut::<2>(0).copy_from(&jh);
        c.row_mut(2).copy_from(&jacobian_g(state, buffers).transpose());
        let r = SMatrix::<T, 3, 3>::from_diagonal(&SVector::<T, 3>::new(
            T::one(),
            T::one(),
            T::lit(4.0) * n,
        ));
        ekf_correct(&x, covariance, &innovation, &c, &r)?
    } else {
        ekf_correct(&x, covariance, &(-h), &jh, &SMatrix::<T, 2, 2>::identity())?
    };
    let mut next = BlobState::from_vector(&x_new);
    let mut p_new = p_new;
    // (λ₁, λ₂, θ) and (λ₂, λ₁, θ + π/2) describe the same ellipse. Keep the
    // major axis first so that θ is the orientation of the long axis.
    if next.lambda.x < next.lambda.y {
        next.lambda = Vector2::new(next.lambda.y, next.lambda.x);
        next.theta += T::frac_pi_2();
        p_new.swap_rows(idx::L1, idx::L2);
        p_new.swap_columns(idx::L1, idx::L2);
    }
    next.canonicalize(lambda_floor);

    buffers.push(
        BufferedPrediction {
            position: state.p,
            inverse_shape: state.inverse_shape(),
            delta: state.delta,
            covariance_norm: position_covariance_norm(covariance),
        },
        BufferedEvent { position, sigma },
    );
    Ok((next, p_new))
}

/// One track's filter: posterior state and covariance at `t_us`, plus the
/// `G` buffers.
#[derive(Debug, Clone)]
pub struct AebFilter<T: Real> {
    state: BlobState<T>,
    covariance: BlobCovariance<T>,
    t_us: u64,
    buffers: FilterBuffers<T>,
    process_noise: SVector<T, STATE_DIM>,
    lambda_floor: T,
}

impl<T: Real> AebFilter<T> {
    pub fn new(state: BlobState<T>, covariance: BlobCovariance<T>, t_us: u64, config: &FilterConfig) -> Self {
        Self {
            state,
            covariance,
            t_us,
            buffers: FilterBuffers::new(config.buffer_len),
            process_noise: config.process_noise.diagonal(),
            lambda_floor: T::lit(config.lambda_floor),
        }
    }

    /// Initializes a filter from a detection.
    pub fn spawn(detection: &Detection<T>, config: &FilterConfig) -> Self {
        let dir = detection.direction;
        let state = BlobState {
            p: detection.position,
            v: dir * detection.speed,
            theta: wrap_orientation(dir.y.atan2(dir.x)),
            q: T::zero(),
            lambda: Vector2::new(T::lit(config.spawn_lambda[0]), T::lit(config.spawn_lambda[1])),
            delta: dir * T::lit(config.spawn_delta),
        };
        let covariance = BlobCovariance::from_diagonal(&config.initial_covariance.diagonal());
        Self::new(state, covariance, detection.t, config)
    }

    pub fn state(&self) -> &BlobState<T> {
        &self.state
    }

    pub fn covariance(&self) -> &BlobCovariance<T> {
        &self.covariance
    }

    pub fn time(&self) -> u64 {
        self.t_us
    }

    pub fn buffers(&self) -> &FilterBuffers<T> {
        &self.buffers
    }

    /// Predicted mean at `t` without touching the filter.
    #[inline]
    pub fn predicted_state(&self, t_us: u64) -> BlobState<T> {
        let dt = us_to_s::<T>(t_us as i64 - self.t_us as i64);
        self.state.extrapolated(dt)
    }

    pub fn predict_to(&mut self, t_us: u64) -> Result<(), FilterError> {
        let dt = us_to_s::<T>(t_us as i64 - self.t_us as i64);
        let (s, p) = predict(&self.state, &self.covariance, dt, &self.process_noise)?;
        self.state = s;
        self.covariance = p;
        self.t_us = t_us;
        Ok(())
    }

    /// Predicts to the event time and fuses the event.
    pub fn correct(&mut self, t_us: u64, position: Vector2<T>, sigma: T) -> Result<(), FilterError> {
        self.predict_to(t_us)?;
        let (s, p) = update(
            &self.state,
            &self.covariance,
            position,
            sigma,
            &mut self.buffers,
            self.lambda_floor,
        )?;
        self.state = s;
        self.covariance = p;
        Ok(())
    }

    pub fn position_covariance_trace(&self) -> T {
        self.covariance[(0, 0)] + self.covariance[(1, 1)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blob_model::mahalanobis_sq_at;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn sample_state(rng: &mut ChaCha8Rng) -> BlobState<f64> {
        BlobState {
            p: Vector2::new(rng.random_range(0.0..100.0), rng.random_range(0.0..100.0)),
            v: Vector2::new(rng.random_range(-500.0..500.0), rng.random_range(-500.0..500.0)),
            theta: rng.random_range(-1.5..1.5),
            q: rng.random_range(-1.0..1.0),
            lambda: Vector2::new(rng.random_range(0.8..5.0), rng.random_range(0.8..5.0)),
            delta: Vector2::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)),
        }
    }

    fn gaussian(rng: &mut ChaCha8Rng) -> Vector2<f64> {
        Vector2::new(StandardNormal.sample(rng), StandardNormal.sample(rng))
    }

    fn true_sample(state: &BlobState<f64>, rng: &mut ChaCha8Rng) -> (Vector2<f64>, f64) {
        let sigma = if rng.random::<bool>() { 1.0 } else { -1.0 };
        let shape = state.shape().unwrap();
        (state.p + state.delta * sigma + shape * gaussian(rng), sigma)
    }

    fn fill_buffers(state: &BlobState<f64>, n: usize, rng: &mut ChaCha8Rng) -> FilterBuffers<f64> {
        let mut b = FilterBuffers::new(n);
        for _ in 0..n {
            let (pos, sigma) = true_sample(state, rng);
            b.push(
                BufferedPrediction {
                    position: state.p,
                    inverse_shape: state.inverse_shape(),
                    delta: state.delta,
                    covariance_norm: 0.0,
                },
                BufferedEvent { position: pos, sigma },
            );
        }
        b
    }

    #[test]
    fn predict_moves_position() {
        let s = BlobState {
            p: Vector2::new(5.0, 5.0),
            v: Vector2::new(100.0, 0.0),
            theta: 0.0,
            q: 0.0,
            lambda: Vector2::new(2.0, 1.0),
            delta: Vector2::zeros(),
        };
        let cov = BlobCovariance::<f64>::identity();
        let q = FilterConfig::default().process_noise.diagonal();
        let (n, p) = predict(&s, &cov, 0.01, &q).unwrap();
        assert!((n.p - Vector2::new(6.0, 5.0)).norm() < 1e-12);
        assert!(p.trace() >= cov.trace());
        assert!((p - p.transpose()).abs().max() < 1e-12);
        let (same, same_cov) = predict(&s, &cov, 0.0, &q).unwrap();
        assert_eq!((same, same_cov), (s, cov));
        assert!(matches!(
            predict(&s, &cov, -1e-3, &q),
            Err(FilterError::NegativeTimeStep(_))
        ));
    }

    #[test]
    fn predict_matches_dense_transition() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = sample_state(&mut rng);
        let a = SMatrix::<f64, 10, 10>::from_fn(|_, _| rng.random_range(-1.0..1.0));
        let cov = a * a.transpose();
        let q = FilterConfig::default().process_noise.diagonal();
        let dt = 0.0123;
        let mut f = BlobCovariance::<f64>::identity();
        f[(idx::PX, idx::VX)] = dt;
        f[(idx::PY, idx::VY)] = dt;
        f[(idx::THETA, idx::Q)] = dt;
        let expected = f * cov * f.transpose() + BlobCovariance::from_diagonal(&(q * dt));
        let (_, p) = predict(&s, &cov, dt, &q).unwrap();
        assert!((p - expected).abs().max() < 1e-12);
    }

    #[test]
    fn h_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = sample_state(&mut rng);
        let at_mode = s.p + s.delta;
        assert!(measurement_h(&s, at_mode, 1.0).norm() < 1e-12);
        s.theta = 0.3;
        s.lambda = Vector2::new(1.0, 1.0);
        let pos = s.p + Vector2::new(3.0, -1.0);
        let h = measurement_h(&s, pos, -1.0);
        assert!((h - s.residual(pos, -1.0)).norm() < 1e-12);
    }

    #[test]
    fn h_is_standard_normal_under_true_model() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = BlobState {
            theta: 0.7,
            lambda: Vector2::new(4.0, 2.0),
            ..sample_state(&mut rng)
        };
        let n = 10_000;
        let mut mean = Vector2::zeros();
        let mut second = Matrix2::zeros();
        for _ in 0..n {
            let (pos, sigma) = true_sample(&s, &mut rng);
            let h = measurement_h(&s, pos, sigma);
            mean += h;
            second += h * h.transpose();
        }
        mean /= n as f64;
        let cov = second / n as f64 - mean * mean.transpose();
        assert!(mean.norm() < 0.05, "{mean}");
        assert!((cov - Matrix2::identity()).abs().max() < 0.05, "{cov}");
    }

    #[test]
    fn g_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = sample_state(&mut rng);
        let mut b = FilterBuffers::new(5);
        for k in 0..5 {
            let sigma = if k % 2 == 0 { 1.0 } else { -1.0 };
            b.push(
                BufferedPrediction {
                    position: s.p,
                    inverse_shape: s.inverse_shape(),
                    delta: s.delta,
                    covariance_norm: 0.3,
                },
                BufferedEvent {
                    position: s.p + s.delta * sigma,
                    sigma,
                },
            );
        }
        assert!(measurement_g(&b).abs() < 1e-20);
        assert!(g_at_state(&s, &b).abs() < 1e-20);

        let b = fill_buffers(&s, 20, &mut rng);
        let g = measurement_g(&b);
        let doubled: FilterBuffers<f64> = {
            let mut d = FilterBuffers::new(20);
            for (p, e) in b.iter() {
                d.push(
                    BufferedPrediction {
                        inverse_shape: inverse_shape(s.theta, s.lambda * 2.0),
                        ..*p
                    },
                    *e,
                );
            }
            d
        };
        assert!((measurement_g(&doubled) - g / 4.0).abs() < 1e-9 * g);
        assert!((measurement_g(&b) - g_at_state(&s, &b)).abs() < 1e-9 * g);
    }

    #[test]
    fn beta_scales_g() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let s = sample_state(&mut rng);
        let mut b = fill_buffers(&s, 4, &mut rng);
        let g0 = measurement_g(&b);
        let (p, e) = b.iter().next().map(|(p, e)| (*p, *e)).unwrap();
        b.push(BufferedPrediction { covariance_norm: 1.0, ..p }, e);
        assert_eq!(b.beta(), 1.0);
        let mut unscaled = b.clone();
        unscaled.predictions.iter_mut().for_each(|p| p.covariance_norm = 0.0);
        assert!((measurement_g(&b) - 0.5 * measurement_g(&unscaled)).abs() < 1e-12);
        assert!(g0 > 0.0);
    }

    #[test]
    fn g_moments_match_chi_squared() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let s = BlobState {
            theta: -0.4,
            lambda: Vector2::new(4.0, 2.0),
            ..sample_state(&mut rng)
        };
        let n = 20;
        let windows = 10_000;
        let (mut sum, mut sum_sq) = (0.0, 0.0);
        for _ in 0..windows {
            let g = measurement_g(&fill_buffers(&s, n, &mut rng));
            sum += g;
            sum_sq += g * g;
        }
        let mean = sum / windows as f64;
        let var = sum_sq / windows as f64 - mean * mean;
        assert!((mean - 2.0 * n as f64).abs() < 0.05 * 2.0 * n as f64, "{mean}");
        assert!((var - 4.0 * n as f64).abs() < 0.2 * 4.0 * n as f64, "{var}");
    }

    #[test]
    fn jacobian_h_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let s = BlobState {
            lambda: Vector2::new(1.0, 1.0),
            ..sample_state(&mut rng)
        };
        let (pos, sigma) = true_sample(&s, &mut rng);
        let j = jacobian_h(&s, pos, sigma);
        assert!((j.fixed_view::<2, 2>(0, idx::PX) + Matrix2::identity()).abs().max() < 1e-12);
        for col in [idx::VX, idx::VY, idx::Q] {
            assert_eq!(j.column(col).norm(), 0.0);
        }
    }

    #[test]
    fn jacobian_h_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        for _ in 0..200 {
            let s = sample_state(&mut rng);
            let (pos, sigma) = true_sample(&s, &mut rng);
            let j = jacobian_h(&s, pos, sigma);
            let x = s.to_vector();
            for k in 0..STATE_DIM {
                let eps = 1e-6;
                let mut xp = x;
                let mut xm = x;
                xp[k] += eps;
                xm[k] -= eps;
                let fd = (measurement_h(&BlobState::from_vector(&xp), pos, sigma)
                    - measurement_h(&BlobState::from_vector(&xm), pos, sigma))
                    / (2.0 * eps);
                let err = (fd - j.column(k)).norm();
                assert!(err < 1e-6 * (1.0 + fd.norm()), "column {k}: {fd} vs {}", j.column(k));
            }
        }
    }

    #[test]
    fn jacobian_g_matches_shape_derivative() {
        // Closed form: ∂G/∂λ₁ = -2/λ₁ Σ (u₁·r)²/λ₁², buffers built with β = 0.
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let s = sample_state(&mut rng);
        let b = fill_buffers(&s, 20, &mut rng);
        let u1 = Vector2::new(s.theta.cos(), s.theta.sin());
        let expected: f64 = b
            .iter()
            .map(|(p, e)| {
                let r = e.position - p.position - s.delta * e.sigma;
                -2.0 * u1.dot(&r).powi(2) / s.lambda.x.powi(3)
            })
            .sum();
        let got = jacobian_g(&s, &b)[idx::L1];
        assert!((got - expected).abs() < 1e-6 * expected.abs(), "{got} vs {expected}");
    }

    #[test]
    fn jacobian_g_is_zero_for_lagged_entries() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let s = sample_state(&mut rng);
        let b = fill_buffers(&s, 20, &mut rng);
        let g = jacobian_g(&s, &b);
        for col in [idx::PX, idx::PY, idx::VX, idx::VY, idx::Q] {
            assert_eq!(g[col], 0.0);
        }
        assert!(g[idx::L1] < 0.0 && g[idx::L2] < 0.0);
    }

    #[test]
    fn event_at_mode_with_balanced_g_leaves_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut s = sample_state(&mut rng);
        s.lambda = Vector2::new(4.0, 2.0);
        let cov = BlobCovariance::<f64>::identity();
        let mut b = fill_buffers(&s, 20, &mut rng);
        // Rescale buffered events so that G equals 2n exactly.
        let g = g_at_state(&s, &b);
        let k = (40.0 / g).sqrt();
        let mut tuned = FilterBuffers::new(20);
        for (p, e) in b.iter() {
            let r = e.position - p.position - s.delta * e.sigma;
            tuned.push(
                *p,
                BufferedEvent {
                    position: p.position + s.delta * e.sigma + r * k,
                    sigma: e.sigma,
                },
            );
        }
        b = tuned;
        assert!((g_at_state(&s, &b) - 40.0).abs() < 1e-9);
        let (next, _) = update(&s, &cov, s.p + s.delta, 1.0, &mut b, 0.5).unwrap();
        assert!((next.to_vector() - s.to_vector()).abs().max() < 1e-9);
    }

    #[test]
    fn minor_first_axes_are_swapped_with_covariance() {
        let mut s = sample_state(&mut ChaCha8Rng::seed_from_u64(13));
        s.theta = 0.2;
        s.lambda = Vector2::new(1.0, 3.0);
        let mut cov = BlobCovariance::<f64>::identity();
        cov[(idx::L1, idx::L1)] = 0.25;
        cov[(idx::L2, idx::L2)] = 9.0;
        let mut b = FilterBuffers::new(20);
        let (next, p) = update(&s, &cov, s.p + s.delta, 1.0, &mut b, 0.5).unwrap();
        assert!(next.lambda.x >= next.lambda.y);
        assert!((next.theta - wrap_orientation(0.2 + std::f64::consts::FRAC_PI_2)).abs() < 1e-12);
        // Same ellipse before and after, up to the update itself.
        assert!((next.shape().unwrap() - s.shape().unwrap()).norm() < 0.5);
        assert!(p[(idx::L1, idx::L1)] > p[(idx::L2, idx::L2)]);
    }

    #[test]
    fn huge_measurement_noise_freezes_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let s = sample_state(&mut rng);
        let cov = BlobCovariance::<f64>::identity() * 4.0;
        let (pos, sigma) = true_sample(&s, &mut rng);
        let h = measurement_h(&s, pos, sigma);
        let c = jacobian_h(&s, pos, sigma);
        let r = SMatrix::<f64, 2, 2>::identity() * 1e30;
        let (x, p) = ekf_correct(&s.to_vector(), &cov, &(-h), &c, &r).unwrap();
        assert!((x - s.to_vector()).abs().max() < 1e-20);
        assert!((p - cov).abs().max() < 1e-20);
    }

    #[test]
    fn buffer_discipline() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let s = BlobState {
            lambda: Vector2::new(3.0, 2.0),
            ..sample_state(&mut rng)
        };
        let config = FilterConfig {
            buffer_len: 5,
            ..Default::default()
        };
        let mut f = AebFilter::new(s, BlobCovariance::identity(), 0, &config);
        for k in 0..12u64 {
            let target = f.predicted_state(k * 100);
            let (pos, sigma) = true_sample(&target, &mut rng);
            assert_eq!(f.buffers().is_full(), k >= 5);
            f.correct(k * 100, pos, sigma).unwrap();
            assert_eq!(f.buffers().len(), ((k + 1) as usize).min(5));
            let last = f.buffers().iter().last().unwrap();
            assert_eq!(last.1.position, pos);
        }
    }

    #[test]
    fn spawn_from_detection() {
        let det = Detection {
            position: Vector2::new(50.0, 60.0),
            direction: Vector2::new(1.0, 0.0),
            speed: 500.0,
            t: 42,
        };
        let cfg = FilterConfig::default();
        let f = AebFilter::spawn(&det, &cfg);
        let s = f.state();
        assert_eq!(s.p, Vector2::new(50.0, 60.0));
        assert_eq!(s.v, Vector2::new(500.0, 0.0));
        assert_eq!(s.theta, 0.0);
        assert_eq!(s.q, 0.0);
        assert_eq!(s.lambda, Vector2::new(3.0, 1.5));
        assert_eq!(s.delta, Vector2::new(1.5, 0.0));
        assert_eq!(f.time(), 42);
        assert!(f.buffers().is_empty());
        let again = AebFilter::spawn(&det, &cfg);
        assert_eq!(again.state(), f.state());
        assert_eq!(again.covariance(), f.covariance());

        let down = AebFilter::spawn(
            &Detection {
                direction: Vector2::new(0.0, -1.0),
                ..det
            },
            &cfg,
        );
        let th = down.state().theta;
        assert!(th > -std::f64::consts::FRAC_PI_2 && th <= std::f64::consts::FRAC_PI_2);
    }

    #[test]
    fn covariance_stays_positive_definite() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let truth = BlobState {
            p: Vector2::new(100.0, 100.0),
            v: Vector2::new(0.0, 0.0),
            theta: 0.4,
            q: 0.0,
            lambda: Vector2::new(3.0, 1.5),
            delta: Vector2::new(1.0, 0.5),
        };
        let mut f = AebFilter::new(
            BlobState {
                lambda: Vector2::new(2.0, 2.0),
                ..truth
            },
            BlobCovariance::from_diagonal(&FilterConfig::default().initial_covariance.diagonal()),
            0,
            &FilterConfig::default(),
        );
        for k in 1..=100_000u64 {
            // Mix in gross outliers to stress the update.
            let (pos, sigma) = if k % 7 == 0 {
                (
                    f.state().p + Vector2::new(rng.random_range(-6.0..6.0), rng.random_range(-6.0..6.0)),
                    1.0,
                )
            } else {
                true_sample(&truth, &mut rng)
            };
            f.correct(k * 10, pos, sigma).unwrap();
            if k % 1000 == 0 {
                let p = f.covariance();
                assert!((p - p.transpose()).abs().max() <= 1e-12 * p.norm());
                let eig = p.symmetric_eigenvalues();
                assert!(eig.min() > 0.0, "step {k}: {eig}");
            }
        }
    }

    proptest! {
        #[test]
        fn h_norm_is_mahalanobis(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = sample_state(&mut rng);
            let pos = s.p + Vector2::new(rng.random_range(-9.0..9.0), rng.random_range(-9.0..9.0));
            let sigma = if rng.random::<bool>() { 1.0 } else { -1.0 };
            let h = measurement_h(&s, pos, sigma);
            let d2 = mahalanobis_sq_at(&s, pos, sigma);
            prop_assert!((h.norm_squared() - d2).abs() <= 1e-9 * (1.0 + d2));
        }

        #[test]
        fn update_is_time_origin_invariant(seed in 0u64..1000, shift in 0u64..1_000_000_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = sample_state(&mut rng);
            let cfg = FilterConfig { buffer_len: 3, ..Default::default() };
            let cov = BlobCovariance::from_diagonal(&cfg.initial_covariance.diagonal());
            let mut a = AebFilter::new(s, cov, 1000, &cfg);
            let mut b = AebFilter::new(s, cov, 1000 + shift, &cfg);
            for k in 1..8u64 {
                let (pos, sigma) = true_sample(&a.predicted_state(1000 + k * 150), &mut rng);
                a.correct(1000 + k * 150, pos, sigma).unwrap();
                b.correct(1000 + shift + k * 150, pos, sigma).unwrap();
            }
            prop_assert!((a.state().to_vector() - b.state().to_vector()).abs().max() < 1e-9);
        }
    }
}
