//! Network localization from frame-local displacement measurements.
//!
//! Each agent keeps a position estimate `p̂_i` in a common frame and corrects
//! it with what it measures, rotated back by its orientation estimate:
//!
//! ```text
//! ṗ̂_i = k_u Σ_{j∈N_i} l_ij (p̂_j - p̂_i - Ĉ_iᵀ p_ji^i)
//! ```
//!
//! Since `Ĉ_i → C_i C*`, the estimates settle on a rigid copy of the true
//! positions rotated by `C*ᵀ`. Pairwise distances are recovered exactly.

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DVector, Matrix3};
use thiserror::Error;

use crate::estimator::{
    assemble_estimate, steady_state_oracle, EstimatorError, EstimatorState, OrientationConsensus, RelativeOrientations,
    SteadyState,
};
use crate::formation::{check_network, mat3, ErrorSignals, FormationError, FormationState, Vec3};
use crate::graph::{laplacian, DiGraph, Laplacian};
use crate::integrate::{integrate, IntegrationError, IntegratorConfig, Trajectory};
use crate::metrics::{fit_rigid_transform, log_slope, RigidFit};
use crate::rotation::{orthonormal_frame, Rotation, RotationError};

/// Distance error below which localization counts as converged.
pub const LOCALIZATION_TOL: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LocalizationError {
    #[error(transparent)]
    Scenario(#[from] FormationError),
    #[error(transparent)]
    Rotation(#[from] RotationError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error("initialization cannot converge to a valid estimate: {0}")]
    InvalidInitialization(EstimatorError),
    #[error(transparent)]
    Integration(#[from] IntegrationError<RotationError>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalizationScenario {
    graph: DiGraph,
    orientations: Vec<Rotation>,
    true_positions: Vec<Vec3>,
    initial_estimates: Vec<Vec3>,
    k_u: f64,
    edge_gains: Vec<f64>,
}

impl LocalizationScenario {
    pub fn new(
        graph: DiGraph,
        orientations: Vec<Rotation>,
        true_positions: Vec<Vec3>,
        initial_estimates: Vec<Vec3>,
        k_u: f64,
        edge_gains: Vec<f64>,
    ) -> Result<Self, LocalizationError> {
        check_network(
            &graph,
            &orientations,
            &[("true positions", true_positions.len()), ("position estimates", initial_estimates.len())],
            k_u,
            &edge_gains,
        )?;
        Ok(Self { graph, orientations, true_positions, initial_estimates, k_u, edge_gains })
    }

    pub fn with_unit_gains(
        graph: DiGraph,
        orientations: Vec<Rotation>,
        true_positions: Vec<Vec3>,
        initial_estimates: Vec<Vec3>,
        k_u: f64,
    ) -> Result<Self, LocalizationError> {
        let gains = vec![1.0; graph.edges().len()];
        Self::new(graph, orientations, true_positions, initial_estimates, k_u, gains)
    }

    pub fn graph(&self) -> &DiGraph {
        &self.graph
    }

    pub fn orientations(&self) -> &[Rotation] {
        &self.orientations
    }

    pub fn true_positions(&self) -> &[Vec3] {
        &self.true_positions
    }

    pub fn initial_estimates(&self) -> &[Vec3] {
        &self.initial_estimates
    }

    pub fn k_u(&self) -> f64 {
        self.k_u
    }

    pub fn edge_gains(&self) -> &[f64] {
        &self.edge_gains
    }

    pub fn agents(&self) -> usize {
        self.graph.n_vertices()
    }

    pub fn control_laplacian(&self) -> Laplacian {
        laplacian(&self.graph.reweighted(&self.edge_gains).expect("gains validated on construction"))
    }

    pub fn sensor(&self) -> DisplacementSensor {
        DisplacementSensor::new(&self.orientations, &self.true_positions)
    }
}

/// Ground truth hidden behind the measurement interface: agents only see
/// `C_i (p_j - p_i)`.
#[derive(Debug, Clone)]
pub struct DisplacementSensor {
    frames: Vec<Matrix3<f64>>,
    positions: Vec<Vec3>,
}

impl DisplacementSensor {
    pub fn new(orientations: &[Rotation], positions: &[Vec3]) -> Self {
        Self { frames: orientations.iter().map(mat3).collect(), positions: positions.to_vec() }
    }

    /// `p_ji^i`, the displacement of `j` seen from `i` in `i`'s frame.
    pub fn measure(&self, i: usize, j: usize) -> Vec3 {
        self.frames[i] * (self.positions[j] - self.positions[i])
    }
}

fn update_with(
    p_hat: &[Vec3],
    scenario: &LocalizationScenario,
    sensor: &DisplacementSensor,
    i: usize,
    c_hat: &Matrix3<f64>,
) -> Vec3 {
    let mut v = Vec3::zeros();
    for (e, &gain) in scenario.graph.edges().iter().zip(&scenario.edge_gains).filter(|(e, _)| e.i == i) {
        v += gain * (p_hat[e.j] - p_hat[i] - c_hat.transpose() * sensor.measure(i, e.j));
    }
    v * scenario.k_u
}

/// `ṗ̂` for every agent given the current orientation estimates.
pub fn localization_derivative(
    p_hat: &[Vec3],
    scenario: &LocalizationScenario,
    estimator: &EstimatorState,
) -> Result<Vec<Vec3>, LocalizationError> {
    let sensor = scenario.sensor();
    (0..scenario.agents())
        .map(|i| {
            let c_hat = mat3(&assemble_estimate(estimator, i)?);
            Ok(update_with(p_hat, scenario, &sensor, i, &c_hat))
        })
        .collect()
}

/// `p̃_i = p̂_i - R p_i` and `Ψ_i = k_u Σ l_ij (R - Ĉ_iᵀ C_i)(p_j - p_i)`.
///
/// With a converging estimator the estimates settle in the frame `R = C*ᵀ`.
pub fn localization_error(
    p_hat: &[Vec3],
    scenario: &LocalizationScenario,
    estimator: &EstimatorState,
    frame: &Rotation,
) -> Result<ErrorSignals, LocalizationError> {
    let r = mat3(frame);
    let p = &scenario.true_positions;
    let error = p_hat.iter().zip(p).map(|(ph, pi)| ph - r * pi).collect();
    let mut disturbance = vec![Vec3::zeros(); scenario.agents()];
    for (i, psi) in disturbance.iter_mut().enumerate() {
        let back = mat3(&assemble_estimate(estimator, i)?).transpose() * mat3(&scenario.orientations[i]);
        for (e, &gain) in scenario.graph.edges().iter().zip(&scenario.edge_gains).filter(|(e, _)| e.i == i) {
            *psi += gain * (r - back) * (p[e.j] - p[i]);
        }
        *psi *= scenario.k_u;
    }
    Ok(ErrorSignals { error, disturbance })
}

/// Largest `|‖p̂_i - p̂_j‖ - ‖p_i - p_j‖|` over all pairs.
pub fn max_distance_error(estimates: &[Vec3], truth: &[Vec3]) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..truth.len() {
        for j in i + 1..truth.len() {
            let d = (estimates[i] - estimates[j]).norm() - (truth[i] - truth[j]).norm();
            worst = worst.max(d.abs());
        }
    }
    worst
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalizationReport {
    /// Rotation between the true positions and the settled estimates.
    pub frame: Option<Rotation>,
    pub initialization_valid: bool,
    pub distance_error_trace: Vec<f64>,
    pub max_distance_error: f64,
    /// Rigid transform taking the true positions onto the final estimates.
    pub rigid_fit: Option<RigidFit>,
    pub decay_rate: Option<f64>,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalizationRun {
    pub trajectory: Trajectory,
    pub oracle: Option<SteadyState>,
    pub report: LocalizationReport,
}

impl LocalizationRun {
    /// Sample `k` as position estimates plus estimator state.
    pub fn state_at(&self, sample: usize) -> FormationState {
        FormationState::from_flat(self.trajectory.final_state.len() / 9, &self.trajectory.states[sample])
            .expect("recorded by this run")
    }

    pub fn final_state(&self) -> FormationState {
        FormationState::from_flat(self.trajectory.final_state.len() / 9, &self.trajectory.final_state)
            .expect("recorded by this run")
    }
}

/// Integrates the position estimates together with the orientation estimator.
pub fn run_localization(
    scenario: &LocalizationScenario,
    z0: &EstimatorState,
    config: &IntegratorConfig,
    force: bool,
) -> Result<LocalizationRun, LocalizationError> {
    let n = scenario.agents();
    if z0.dim() != 3 || z0.agents() != n {
        return Err(FormationError::Count { what: "estimator agents", expected: n, got: z0.agents() }.into());
    }
    let oracle = match steady_state_oracle(&scenario.graph, &scenario.orientations, z0) {
        Ok(o) => Some(o),
        Err(e) if !force => return Err(LocalizationError::InvalidInitialization(e)),
        Err(_) => None,
    };
    let rel = RelativeOrientations::from_true(&scenario.graph, &scenario.orientations)?;
    let consensus = OrientationConsensus::new(&scenario.graph, &rel)?;
    let sensor = scenario.sensor();

    let mut x0: Vec<f64> = scenario.initial_estimates.iter().flat_map(|p| p.iter().copied()).collect();
    x0.extend_from_slice(z0.as_slice());
    let trajectory = integrate(
        |_, x, out| -> Result<(), RotationError> {
            let (pos, z) = x.split_at(3 * n);
            let (dpos, dz) = out.split_at_mut(3 * n);
            consensus.derivative_into(z, dz);
            let p_hat: Vec<Vec3> = pos.chunks_exact(3).map(Vec3::from_column_slice).collect();
            for i in 0..n {
                let zi = &z[i * 6..(i + 1) * 6];
                let c_hat = mat3(&orthonormal_frame(&[
                    DVector::from_column_slice(&zi[..3]),
                    DVector::from_column_slice(&zi[3..]),
                ])?);
                let v = update_with(&p_hat, scenario, &sensor, i, &c_hat);
                dpos[3 * i..3 * i + 3].copy_from_slice(v.as_slice());
            }
            Ok(())
        },
        x0,
        config,
    )?;

    let estimates =
        |flat: &[f64]| -> Vec<Vec3> { flat[..3 * n].chunks_exact(3).map(Vec3::from_column_slice).collect() };
    let distance_error_trace: Vec<f64> =
        trajectory.states.iter().map(|s| max_distance_error(&estimates(s), &scenario.true_positions)).collect();
    let final_estimates = estimates(&trajectory.final_state);
    let max_distance_error = max_distance_error(&final_estimates, &scenario.true_positions);
    let rigid_fit = fit_rigid_transform(&scenario.true_positions, &final_estimates);
    let horizon = trajectory.final_time;
    let decay_rate = log_slope(&trajectory.times, &distance_error_trace, 0.1 * horizon, 0.5 * horizon).map(|s| -s);

    Ok(LocalizationRun {
        trajectory,
        report: LocalizationReport {
            frame: oracle.as_ref().map(|o| o.common_rotation.transpose()),
            initialization_valid: oracle.is_some(),
            distance_error_trace,
            max_distance_error,
            rigid_fit,
            decay_rate,
            converged: oracle.is_some() && max_distance_error < LOCALIZATION_TOL,
        },
        oracle,
    })
}
