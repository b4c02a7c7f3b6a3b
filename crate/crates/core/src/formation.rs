//! Displacement-based 3-D formation control with frames compensated by the
//! online orientation estimate.
//!
//! Agent `i` measures neighbor displacements in its own frame and applies
//!
//! ```text
//! u_i^i = k_u Σ_{j∈N_i} l_ij ((p_j^i - p_i^i) - Ĉ_i (p_j* - p_i*))
//! ```
//!
//! while its estimator runs alongside on the same clock. In the global frame
//! the error `e_i = p_i - C* p_i*` obeys `ė = -k_u (L ⊗ I_3) e + w` where the
//! disturbance `w` vanishes as the estimate converges.

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use thiserror::Error;

use crate::estimator::{
    assemble_estimate, steady_state_oracle, EstimatorError, EstimatorState, OrientationConsensus, RelativeOrientations,
    SteadyState,
};
use crate::graph::{laplacian, DiGraph, GraphError, Laplacian};
use crate::integrate::{integrate, IntegrationError, IntegratorConfig, Trajectory};
use crate::metrics::log_slope;
use crate::rotation::{orthonormal_frame, Rotation, RotationError};

pub type Vec3 = Vector3<f64>;

/// Displacement error below which a formation counts as converged.
pub const FORMATION_TOL: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FormationError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Rotation(#[from] RotationError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error("{what}: expected {expected} entries, got {got}")]
    Count { what: &'static str, expected: usize, got: usize },
    #[error("frames must be 3-D, got dimension {0}")]
    NotThreeDimensional(usize),
    #[error("{what} must be positive and finite, got {value}")]
    InvalidGain { what: &'static str, value: f64 },
    #[error("initialization cannot converge to a valid estimate: {0}")]
    InvalidInitialization(EstimatorError),
    #[error(transparent)]
    Integration(#[from] IntegrationError<RotationError>),
}

pub(crate) fn mat3(r: &Rotation) -> Matrix3<f64> {
    Matrix3::from_column_slice(r.matrix().as_slice())
}

pub(crate) fn check_network(
    graph: &DiGraph,
    orientations: &[Rotation],
    points: &[(&'static str, usize)],
    k_u: f64,
    edge_gains: &[f64],
) -> Result<(), FormationError> {
    let n = graph.n_vertices();
    if orientations.len() != n {
        return Err(FormationError::Count { what: "orientations", expected: n, got: orientations.len() });
    }
    if let Some(c) = orientations.iter().find(|c| c.dim() != 3) {
        return Err(FormationError::NotThreeDimensional(c.dim()));
    }
    for &(what, got) in points {
        if got != n {
            return Err(FormationError::Count { what, expected: n, got });
        }
    }
    if !(k_u.is_finite() && k_u > 0.0) {
        return Err(FormationError::InvalidGain { what: "k_u", value: k_u });
    }
    if edge_gains.len() != graph.edges().len() {
        return Err(FormationError::Count { what: "edge gains", expected: graph.edges().len(), got: edge_gains.len() });
    }
    if let Some(&value) = edge_gains.iter().find(|g| !(g.is_finite() && **g > 0.0)) {
        return Err(FormationError::InvalidGain { what: "edge gain", value });
    }
    Ok(())
}

/// Everything needed to run the formation experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct FormationScenario {
    graph: DiGraph,
    orientations: Vec<Rotation>,
    initial_positions: Vec<Vec3>,
    desired: Vec<Vec3>,
    k_u: f64,
    edge_gains: Vec<f64>,
}

impl FormationScenario {
    /// `edge_gains` are the `l_ij`, one per edge of `graph` in edge order.
    pub fn new(
        graph: DiGraph,
        orientations: Vec<Rotation>,
        initial_positions: Vec<Vec3>,
        desired: Vec<Vec3>,
        k_u: f64,
        edge_gains: Vec<f64>,
    ) -> Result<Self, FormationError> {
        check_network(
            &graph,
            &orientations,
            &[("initial positions", initial_positions.len()), ("desired formation", desired.len())],
            k_u,
            &edge_gains,
        )?;
        Ok(Self { graph, orientations, initial_positions, desired, k_u, edge_gains })
    }

    /// Unit edge gains.
    pub fn with_unit_gains(
        graph: DiGraph,
        orientations: Vec<Rotation>,
        initial_positions: Vec<Vec3>,
        desired: Vec<Vec3>,
        k_u: f64,
    ) -> Result<Self, FormationError> {
        let gains = vec![1.0; graph.edges().len()];
        Self::new(graph, orientations, initial_positions, desired, k_u, gains)
    }

    pub fn graph(&self) -> &DiGraph {
        &self.graph
    }

    pub fn orientations(&self) -> &[Rotation] {
        &self.orientations
    }

    pub fn initial_positions(&self) -> &[Vec3] {
        &self.initial_positions
    }

    pub fn desired(&self) -> &[Vec3] {
        &self.desired
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

    /// Laplacian built from the control gains `l_ij`.
    pub fn control_laplacian(&self) -> Laplacian {
        laplacian(&self.graph.reweighted(&self.edge_gains).expect("gains validated on construction"))
    }

    pub fn with_initial_positions(mut self, positions: Vec<Vec3>) -> Result<Self, FormationError> {
        if positions.len() != self.agents() {
            return Err(FormationError::Count {
                what: "initial positions",
                expected: self.agents(),
                got: positions.len(),
            });
        }
        self.initial_positions = positions;
        Ok(self)
    }
}

/// Positions plus the embedded estimator.
#[derive(Debug, Clone, PartialEq)]
pub struct FormationState {
    pub positions: Vec<Vec3>,
    pub estimator: EstimatorState,
}

impl FormationState {
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out: Vec<f64> = self.positions.iter().flat_map(|p| p.iter().copied()).collect();
        out.extend_from_slice(self.estimator.as_slice());
        out
    }

    pub fn from_flat(agents: usize, data: &[f64]) -> Result<Self, FormationError> {
        let (pos, z) = data.split_at(3 * agents);
        let positions = pos.chunks_exact(3).map(Vec3::from_column_slice).collect();
        let estimator = EstimatorState::from_flat(3, agents, z.to_vec())?;
        Ok(Self { positions, estimator })
    }
}

/// `p_ji^i = C_i (p_j - p_i)`: displacement of `j` from `i` in `i`'s frame.
pub fn relative_position_measurement(p: &[Vec3], c_i: &Rotation, i: usize, j: usize) -> Vec3 {
    mat3(c_i) * (p[j] - p[i])
}

/// Control input of agent `i`, expressed in its local frame.
pub fn control_input(state: &FormationState, scenario: &FormationScenario, i: usize) -> Result<Vec3, FormationError> {
    let c_hat = mat3(&assemble_estimate(&state.estimator, i)?);
    Ok(control_from_estimate(&state.positions, scenario, i, &c_hat))
}

fn control_from_estimate(p: &[Vec3], scenario: &FormationScenario, i: usize, c_hat: &Matrix3<f64>) -> Vec3 {
    let c_i = &scenario.orientations[i];
    let mut u = Vec3::zeros();
    for (e, &gain) in scenario.graph.edges().iter().zip(&scenario.edge_gains).filter(|(e, _)| e.i == i) {
        let measured = relative_position_measurement(p, c_i, i, e.j);
        let desired = scenario.desired[e.j] - scenario.desired[i];
        u += gain * (measured - c_hat * desired);
    }
    u * scenario.k_u
}

/// Error `e` (or `p̃`) and disturbance `w` (or `Ψ`) of a cascade.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorSignals {
    pub error: Vec<Vec3>,
    pub disturbance: Vec<Vec3>,
}

impl ErrorSignals {
    pub fn error_norm(&self) -> f64 {
        stacked_norm(&self.error)
    }

    pub fn disturbance_norm(&self) -> f64 {
        stacked_norm(&self.disturbance)
    }
}

pub fn stacked_norm(v: &[Vec3]) -> f64 {
    num_traits::Float::sqrt(v.iter().map(|x| x.norm_squared()).sum::<f64>())
}

/// `e_i = p_i - C* p_i*` and `w_i = k_u Σ l_ij (C* - C_iᵀ Ĉ_i)(p_j* - p_i*)`.
pub fn formation_error(
    state: &FormationState,
    scenario: &FormationScenario,
    c_star: &Rotation,
) -> Result<ErrorSignals, FormationError> {
    let cs = mat3(c_star);
    let error = state.positions.iter().zip(&scenario.desired).map(|(p, d)| p - cs * d).collect();
    let mut disturbance = vec![Vec3::zeros(); scenario.agents()];
    for (i, w) in disturbance.iter_mut().enumerate() {
        let aligned = mat3(&scenario.orientations[i]).transpose() * mat3(&assemble_estimate(&state.estimator, i)?);
        for (e, &gain) in scenario.graph.edges().iter().zip(&scenario.edge_gains).filter(|(e, _)| e.i == i) {
            *w += gain * (cs - aligned) * (scenario.desired[e.j] - scenario.desired[i]);
        }
        *w *= scenario.k_u;
    }
    Ok(ErrorSignals { error, disturbance })
}

/// Right-hand side `-k_u (L ⊗ I_3) x + d` of the error dynamics, evaluated
/// through the assembled Kronecker matrix.
pub fn error_dynamics(l: &Laplacian, k_u: f64, signals: &ErrorSignals) -> Vec<Vec3> {
    let n = l.dim();
    let big = l.matrix().kronecker(&DMatrix::<f64>::identity(3, 3));
    let x = DVector::from_iterator(3 * n, signals.error.iter().flat_map(|v| v.iter().copied()));
    let rhs = -(big * x) * k_u;
    (0..n).map(|i| Vec3::new(rhs[3 * i], rhs[3 * i + 1], rhs[3 * i + 2]) + signals.disturbance[i]).collect()
}

/// Largest `‖(p_j - p_i) - R (r_j - r_i)‖` over the listed pairs.
pub fn max_displacement_error(
    positions: &[Vec3],
    reference: &[Vec3],
    rotation: &Matrix3<f64>,
    pairs: impl Iterator<Item = (usize, usize)>,
) -> f64 {
    pairs
        .map(|(i, j)| ((positions[j] - positions[i]) - rotation * (reference[j] - reference[i])).norm())
        .fold(0.0, f64::max)
}

struct Cascade<'a> {
    scenario: &'a FormationScenario,
    consensus: OrientationConsensus,
    c_t: Vec<Matrix3<f64>>,
}

impl Cascade<'_> {
    fn derivative_into(&self, x: &[f64], out: &mut [f64]) -> Result<(), RotationError> {
        let n = self.scenario.agents();
        let (pos, z) = x.split_at(3 * n);
        let (dpos, dz) = out.split_at_mut(3 * n);
        self.consensus.derivative_into(z, dz);
        let p: Vec<Vec3> = pos.chunks_exact(3).map(Vec3::from_column_slice).collect();
        for i in 0..n {
            let zi = &z[i * 6..(i + 1) * 6];
            let c_hat = mat3(&orthonormal_frame(&[
                DVector::from_column_slice(&zi[..3]),
                DVector::from_column_slice(&zi[3..]),
            ])?);
            let v = self.c_t[i] * control_from_estimate(&p, self.scenario, i, &c_hat);
            dpos[3 * i..3 * i + 3].copy_from_slice(v.as_slice());
        }
        Ok(())
    }
}

/// Where the common rotation in a report came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RotationSource {
    /// Spectral steady-state prediction.
    Oracle,
    /// Read from agent 0's estimate at the horizon (initialization was invalid).
    Tail,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FormationReport {
    pub common_rotation: Option<Rotation>,
    pub rotation_source: RotationSource,
    pub initialization_valid: bool,
    /// Max edge displacement error at every recorded sample.
    pub edge_error_trace: Vec<f64>,
    pub max_edge_error: f64,
    /// Fitted exponential rate of the edge error (positive when decaying).
    pub decay_rate: Option<f64>,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FormationRun {
    pub trajectory: Trajectory,
    pub oracle: Option<SteadyState>,
    pub report: FormationReport,
}

impl FormationRun {
    pub fn state_at(&self, sample: usize) -> FormationState {
        FormationState::from_flat(self.oracle_agents(), &self.trajectory.states[sample]).expect("recorded by this run")
    }

    pub fn final_state(&self) -> FormationState {
        FormationState::from_flat(self.oracle_agents(), &self.trajectory.final_state).expect("recorded by this run")
    }

    fn oracle_agents(&self) -> usize {
        self.trajectory.final_state.len() / 9
    }
}

/// Integrates estimator and positions together.
///
/// Refuses with [`FormationError::InvalidInitialization`] when `z0` cannot
/// produce a valid estimate, unless `force` is set.
pub fn run_formation(
    scenario: &FormationScenario,
    z0: &EstimatorState,
    config: &IntegratorConfig,
    force: bool,
) -> Result<FormationRun, FormationError> {
    let n = scenario.agents();
    if z0.dim() != 3 || z0.agents() != n {
        return Err(FormationError::Count { what: "estimator agents", expected: n, got: z0.agents() });
    }
    let oracle = match steady_state_oracle(&scenario.graph, &scenario.orientations, z0) {
        Ok(o) => Some(o),
        Err(e) if !force => return Err(FormationError::InvalidInitialization(e)),
        Err(_) => None,
    };
    let rel = RelativeOrientations::from_true(&scenario.graph, &scenario.orientations)?;
    let cascade = Cascade {
        scenario,
        consensus: OrientationConsensus::new(&scenario.graph, &rel)?,
        c_t: scenario.orientations.iter().map(|c| mat3(c).transpose()).collect(),
    };
    let x0 = FormationState { positions: scenario.initial_positions.clone(), estimator: z0.clone() };
    let trajectory = integrate(|_, x, out| cascade.derivative_into(x, out), x0.to_flat(), config)?;

    let (common_rotation, rotation_source) = match &oracle {
        Some(o) => (Some(o.common_rotation.clone()), RotationSource::Oracle),
        None => {
            let last = FormationState::from_flat(n, &trajectory.final_state)?;
            let tail = assemble_estimate(&last.estimator, 0)
                .ok()
                .map(|c_hat| scenario.orientations[0].transpose().compose(&c_hat).expect("both 3-D"));
            (tail, RotationSource::Tail)
        }
    };
    let edges: Vec<(usize, usize)> = scenario.graph.edges().iter().map(|e| (e.i, e.j)).collect();
    let edge_error = |flat: &[f64]| match &common_rotation {
        Some(c) => {
            let p: Vec<Vec3> = flat[..3 * n].chunks_exact(3).map(Vec3::from_column_slice).collect();
            max_displacement_error(&p, &scenario.desired, &mat3(c), edges.iter().copied())
        }
        None => f64::NAN,
    };
    let edge_error_trace: Vec<f64> = trajectory.states.iter().map(|s| edge_error(s)).collect();
    let max_edge_error = edge_error(&trajectory.final_state);
    let horizon = trajectory.final_time;
    let decay_rate = log_slope(&trajectory.times, &edge_error_trace, 0.1 * horizon, 0.5 * horizon).map(|s| -s);
    let converged = oracle.is_some() && max_edge_error < FORMATION_TOL;

    Ok(FormationRun {
        trajectory,
        report: FormationReport {
            common_rotation,
            rotation_source,
            initialization_valid: oracle.is_some(),
            edge_error_trace,
            max_edge_error,
            decay_rate,
            converged,
        },
        oracle,
    })
}
