//! Fixed-step ODE integration with strided recording.

use alloc::vec;
use alloc::vec::Vec;
use core::convert::Infallible;

use thiserror::Error;

/// Any state component with magnitude above this aborts the run.
pub const DIVERGENCE_LIMIT: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Rk4,
    Euler,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntegratorConfig {
    pub dt: f64,
    pub horizon: f64,
    pub method: Method,
    /// Record every `record_every`-th step (step 0 always recorded).
    pub record_every: usize,
}

impl IntegratorConfig {
    pub fn new(dt: f64, horizon: f64) -> Self {
        Self { dt, horizon, method: Method::Rk4, record_every: 100 }
    }

    pub fn with_method(self, method: Method) -> Self {
        Self { method, ..self }
    }

    pub fn with_record_every(self, record_every: usize) -> Self {
        Self { record_every, ..self }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(ConfigError::Step(self.dt));
        }
        if !(self.horizon.is_finite() && self.horizon >= self.dt) {
            return Err(ConfigError::Horizon { horizon: self.horizon, dt: self.dt });
        }
        if self.record_every == 0 {
            return Err(ConfigError::Stride);
        }
        Ok(())
    }

    /// Number of integration steps, `horizon / dt` rounded to the nearest integer.
    pub fn steps(&self) -> usize {
        num_traits::Float::round(self.horizon / self.dt) as usize
    }

    /// Number of recorded samples, including the initial state.
    pub fn samples(&self) -> usize {
        self.steps() / self.record_every + 1
    }
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self::new(0.001, 1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("step size must be positive and finite, got {0}")]
    Step(f64),
    #[error("horizon {horizon} must be finite and at least the step {dt}")]
    Horizon { horizon: f64, dt: f64 },
    #[error("record stride must be at least 1")]
    Stride,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum IntegrationError<E> {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("state left the finite range (|x| > {DIVERGENCE_LIMIT:e}) at t = {time}")]
    NonFiniteState { time: f64 },
    #[error("derivative evaluation failed at t = {time}: {source}")]
    Derivative { time: f64, source: E },
}

impl IntegrationError<Infallible> {
    /// Widen an infallible-derivative error into any other error type.
    pub fn widen<E>(self) -> IntegrationError<E> {
        match self {
            IntegrationError::Config(c) => IntegrationError::Config(c),
            IntegrationError::NonFiniteState { time } => IntegrationError::NonFiniteState { time },
            IntegrationError::Derivative { source, .. } => match source {},
        }
    }
}

/// Recorded samples of an integration run.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub final_time: f64,
    pub final_state: Vec<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (f64, &[f64])> {
        self.times.iter().copied().zip(self.states.iter().map(Vec::as_slice))
    }
}

fn check_finite(x: &[f64]) -> bool {
    x.iter().all(|v| v.is_finite() && v.abs() <= DIVERGENCE_LIMIT)
}

/// Integrates `dx/dt = f(t, x)` from `x0` over `[0, horizon]`.
///
/// `f(t, x, out)` writes the derivative into `out`. Times are computed as
/// `step * dt`, so recorded times carry no accumulated round-off.
pub fn integrate<F, E>(mut f: F, x0: Vec<f64>, config: &IntegratorConfig) -> Result<Trajectory, IntegrationError<E>>
where
    F: FnMut(f64, &[f64], &mut [f64]) -> Result<(), E>,
{
    config.validate()?;
    if !check_finite(&x0) {
        return Err(IntegrationError::NonFiniteState { time: 0.0 });
    }
    let dim = x0.len();
    let dt = config.dt;
    let steps = config.steps();

    let mut x = x0;
    let mut times = Vec::with_capacity(config.samples());
    let mut states = Vec::with_capacity(config.samples());
    times.push(0.0);
    states.push(x.clone());

    let mut k1 = vec![0.0; dim];
    let mut k2 = vec![0.0; dim];
    let mut k3 = vec![0.0; dim];
    let mut k4 = vec![0.0; dim];
    let mut tmp = vec![0.0; dim];

    let mut eval = |t: f64, x: &[f64], out: &mut [f64]| {
        f(t, x, out).map_err(|source| IntegrationError::Derivative { time: t, source })
    };

    for step in 0..steps {
        let t = step as f64 * dt;
        match config.method {
            Method::Euler => {
                eval(t, &x, &mut k1)?;
                for (xi, ki) in x.iter_mut().zip(&k1) {
                    *xi += dt * ki;
                }
            }
            Method::Rk4 => {
                eval(t, &x, &mut k1)?;
                for m in 0..dim {
                    tmp[m] = x[m] + 0.5 * dt * k1[m];
                }
                eval(t + 0.5 * dt, &tmp, &mut k2)?;
                for m in 0..dim {
                    tmp[m] = x[m] + 0.5 * dt * k2[m];
                }
                eval(t + 0.5 * dt, &tmp, &mut k3)?;
                for m in 0..dim {
                    tmp[m] = x[m] + dt * k3[m];
                }
                eval(t + dt, &tmp, &mut k4)?;
                for m in 0..dim {
                    x[m] += dt / 6.0 * (k1[m] + 2.0 * k2[m] + 2.0 * k3[m] + k4[m]);
                }
            }
        }
        let t_next = (step + 1) as f64 * dt;
        if !check_finite(&x) {
            return Err(IntegrationError::NonFiniteState { time: t_next });
        }
        if (step + 1) % config.record_every == 0 {
            times.push(t_next);
            states.push(x.clone());
        }
    }

    Ok(Trajectory { times, states, final_time: steps as f64 * dt, final_state: x })
}
