//! Driftless coupled oscillators on the unit circle.
//!
//! Each agent moves along the sum of weighted wrapped displacements to its
//! neighbors. Unlike Euclidean consensus this can stall: twenty agents spread
//! evenly around the circle with all-to-all coupling never agree, while any
//! configuration inside an open semicircle contracts to a single angle.

use alloc::vec::Vec;
use core::convert::Infallible;
use core::f64::consts::{PI, TAU};

use crate::graph::DiGraph;
use crate::integrate::{integrate, IntegrationError, IntegratorConfig, Trajectory};

/// Displacements within this distance of the antipode count as exactly `+π`.
pub const ANTIPODE_TOL: f64 = 1e-12;
/// Spread below which a run is declared synchronized.
pub const SYNC_TOL: f64 = 1e-3;

/// Wraps an angle into `(-π, π]`.
pub fn wrap_angle(x: f64) -> f64 {
    let mut r = x % TAU;
    if r < 0.0 {
        r += TAU;
    }
    if r > PI {
        r - TAU
    } else {
        r
    }
}

/// The displacement `θ_ji`: the unique `δ ∈ (-π, π]` with `δ ≡ θ_j - θ_i`.
///
/// Ties at the antipode resolve to `+π`, including differences that miss it
/// by less than [`ANTIPODE_TOL`] through round-off.
pub fn angular_displacement(theta_j: f64, theta_i: f64) -> f64 {
    let d = wrap_angle(theta_j - theta_i);
    if d.abs() >= PI - ANTIPODE_TOL {
        PI
    } else {
        d
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OscillatorState {
    theta: Vec<f64>,
}

impl OscillatorState {
    /// Wraps each angle into `(-π, π]`.
    pub fn new(theta: impl IntoIterator<Item = f64>) -> Self {
        Self { theta: theta.into_iter().map(wrap_angle).collect() }
    }

    /// `n` agents at `offset + 2πk/n`.
    pub fn evenly_spaced(n: usize, offset: f64) -> Self {
        Self::new((0..n).map(|k| offset + TAU * k as f64 / n as f64))
    }

    pub fn angles(&self) -> &[f64] {
        &self.theta
    }

    pub fn len(&self) -> usize {
        self.theta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta.is_empty()
    }

    /// Largest angular distance between any two agents.
    pub fn spread(&self) -> f64 {
        max_pairwise_distance(&self.theta)
    }
}

/// Largest `|θ_ji|` over all pairs; lies in `[0, π]`.
pub fn max_pairwise_distance(theta: &[f64]) -> f64 {
    let mut worst = 0.0f64;
    for (a, &ti) in theta.iter().enumerate() {
        for &tj in &theta[a + 1..] {
            worst = worst.max(angular_displacement(tj, ti).abs());
        }
    }
    worst
}

fn derivative_into(theta: &[f64], g: &DiGraph, out: &mut [f64]) {
    for (i, o) in out.iter_mut().enumerate() {
        *o = g.neighbors(i).map(|(j, a)| a * angular_displacement(theta[j], theta[i])).sum();
    }
}

/// `θ̇_i = Σ_{j∈N_i} a_ij θ_ji`.
pub fn oscillator_derivative(state: &OscillatorState, g: &DiGraph) -> Vec<f64> {
    assert_eq!(state.len(), g.n_vertices(), "one angle per vertex");
    let mut out = alloc::vec![0.0; state.len()];
    derivative_into(&state.theta, g, &mut out);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyncVerdict {
    Synchronized,
    NotSynchronized,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CircleRun {
    /// Raw (unwrapped) angle samples; wrap with [`wrap_angle`] for display.
    pub trajectory: Trajectory,
    /// Spread at every recorded sample.
    pub spread: Vec<f64>,
    pub final_state: OscillatorState,
    pub final_spread: f64,
    pub verdict: SyncVerdict,
}

/// Integrates the oscillators and judges synchronization at the horizon.
pub fn run_circle(
    state0: &OscillatorState,
    g: &DiGraph,
    config: &IntegratorConfig,
) -> Result<CircleRun, IntegrationError<Infallible>> {
    assert_eq!(state0.len(), g.n_vertices(), "one angle per vertex");
    let trajectory = integrate(
        |_, theta, out| {
            derivative_into(theta, g, out);
            Ok(())
        },
        state0.theta.clone(),
        config,
    )?;
    let spread = trajectory.states.iter().map(|s| max_pairwise_distance(s)).collect();
    let final_state = OscillatorState::new(trajectory.final_state.iter().copied());
    let final_spread = final_state.spread();
    let verdict = if final_spread < SYNC_TOL { SyncVerdict::Synchronized } else { SyncVerdict::NotSynchronized };
    Ok(CircleRun { trajectory, spread, final_state, final_spread, verdict })
}
