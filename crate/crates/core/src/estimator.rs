//! Distributed orientation estimation.
//!
//! Every agent `i` carries `n - 1` auxiliary vectors `z_{i,k} ∈ R^n` and
//! drives them with the linear consensus law
//!
//! ```text
//! ż_{i,k} = Σ_{j∈N_i} a_ij (C_jiᵀ z_{j,k} - z_{i,k})
//! ```
//!
//! where `C_ji` is the measured orientation of `j` relative to `i`. Stacked
//! per slot this is `ż_k = H z_k`. The estimate `Ĉ_i` is read out by
//! Gram-Schmidt on the agent's slots followed by pseudovector completion; it
//! never feeds back into the dynamics.
//!
//! In the coordinates `q_{i,k} = C_iᵀ z_{i,k}` the dynamics become plain
//! consensus `q̇_k = -(L ⊗ I_n) q_k`, which is what [`steady_state_oracle`]
//! exploits to predict the limit without integrating.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;
use core::convert::Infallible;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use thiserror::Error;

use crate::graph::{laplacian, zero_eigen_left_vector, DiGraph, GraphError};
use crate::integrate::{integrate, IntegrationError, IntegratorConfig, Trajectory};
use crate::rotation::{
    gaussian_vector, gram_schmidt, orthonormal_frame, relative_orientation, Rotation, RotationError,
};

/// Margin for the column-space test on the initial condition.
pub const INIT_EPS: f64 = 1e-6;
/// Allowed mismatch between `C_ij` and `C_jiᵀ` for bidirectional edges.
pub const CONSISTENCY_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EstimatorError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Rotation(#[from] RotationError),
    #[error("no relative orientation for edge ({i}, {j})")]
    MissingEdgeMeasurement { i: usize, j: usize },
    #[error("measurements on ({i}, {j}) and ({j}, {i}) disagree by {deviation:e}")]
    InconsistentRelativeOrientation { i: usize, j: usize, deviation: f64 },
    #[error("expected {expected} agents, got {got}")]
    AgentCount { expected: usize, got: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("slot {slot} converges to zero: its initial value lies in the Laplacian column space")]
    DegenerateLimit { slot: usize },
    #[error("limit vectors are linearly dependent")]
    DependentLimits,
}

/// Relative orientation measurements keyed by sensing edge `(i, j)`; the
/// value is `C_ji = C_j C_iᵀ` as seen by agent `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct RelativeOrientations {
    dim: usize,
    map: BTreeMap<(usize, usize), Rotation>,
}

impl RelativeOrientations {
    pub fn new(dim: usize) -> Self {
        Self { dim, map: BTreeMap::new() }
    }

    pub fn insert(&mut self, i: usize, j: usize, c_ji: Rotation) -> Result<(), EstimatorError> {
        if c_ji.dim() != self.dim {
            return Err(EstimatorError::Dimension { expected: self.dim, got: c_ji.dim() });
        }
        self.map.insert((i, j), c_ji);
        Ok(())
    }

    pub fn get(&self, i: usize, j: usize) -> Option<&Rotation> {
        self.map.get(&(i, j))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Synthesizes every edge measurement from true orientations.
    pub fn from_true(g: &DiGraph, orientations: &[Rotation]) -> Result<Self, EstimatorError> {
        let dim = common_dim(g, orientations)?;
        let mut rel = Self::new(dim);
        for e in g.edges() {
            rel.insert(e.i, e.j, relative_orientation(&orientations[e.j], &orientations[e.i])?)?;
        }
        Ok(rel)
    }
}

fn common_dim(g: &DiGraph, orientations: &[Rotation]) -> Result<usize, EstimatorError> {
    if orientations.len() != g.n_vertices() {
        return Err(EstimatorError::AgentCount { expected: g.n_vertices(), got: orientations.len() });
    }
    let dim = orientations[0].dim();
    if let Some(c) = orientations.iter().find(|c| c.dim() != dim) {
        return Err(EstimatorError::Dimension { expected: dim, got: c.dim() });
    }
    Ok(dim)
}

/// Auxiliary variables of all agents, laid out agent-major then slot-major.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorState {
    dim: usize,
    agents: usize,
    data: Vec<f64>,
}

impl EstimatorState {
    pub fn zeros(dim: usize, agents: usize) -> Self {
        assert!(dim >= 2, "auxiliary variables need dimension at least 2");
        Self { dim, agents, data: vec![0.0; agents * (dim - 1) * dim] }
    }

    pub fn from_flat(dim: usize, agents: usize, data: Vec<f64>) -> Result<Self, EstimatorError> {
        let expected = agents * (dim - 1) * dim;
        if dim < 2 || data.len() != expected {
            return Err(EstimatorError::Dimension { expected, got: data.len() });
        }
        Ok(Self { dim, agents, data })
    }

    /// Builds a state from `slots[i][k] = z_{i,k}`.
    pub fn from_slots(dim: usize, slots: &[Vec<DVector<f64>>]) -> Result<Self, EstimatorError> {
        let mut state = Self::zeros(dim, slots.len());
        for (i, agent) in slots.iter().enumerate() {
            if agent.len() != dim - 1 {
                return Err(EstimatorError::Dimension { expected: dim - 1, got: agent.len() });
            }
            for (k, z) in agent.iter().enumerate() {
                if z.len() != dim {
                    return Err(EstimatorError::Dimension { expected: dim, got: z.len() });
                }
                state.slot_mut(i, k).copy_from_slice(z.as_slice());
            }
        }
        Ok(state)
    }

    /// Independent standard normal entries.
    pub fn random<R: Rng + ?Sized>(dim: usize, agents: usize, rng: &mut R) -> Self {
        let mut state = Self::zeros(dim, agents);
        for i in 0..agents {
            for k in 0..dim - 1 {
                let v = gaussian_vector(dim, rng);
                state.slot_mut(i, k).copy_from_slice(v.as_slice());
            }
        }
        state
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn agents(&self) -> usize {
        self.agents
    }

    pub fn slots(&self) -> usize {
        self.dim - 1
    }

    fn offset(&self, i: usize, k: usize) -> usize {
        (i * (self.dim - 1) + k) * self.dim
    }

    pub fn slot(&self, i: usize, k: usize) -> &[f64] {
        let o = self.offset(i, k);
        &self.data[o..o + self.dim]
    }

    pub fn slot_mut(&mut self, i: usize, k: usize) -> &mut [f64] {
        let o = self.offset(i, k);
        &mut self.data[o..o + self.dim]
    }

    pub fn slot_vector(&self, i: usize, k: usize) -> DVector<f64> {
        DVector::from_column_slice(self.slot(i, k))
    }

    pub fn agent_slots(&self, i: usize) -> Vec<DVector<f64>> {
        (0..self.slots()).map(|k| self.slot_vector(i, k)).collect()
    }

    /// The stacked vector `z_k = (z_{1,k}, …, z_{N,k})`.
    pub fn stacked(&self, k: usize) -> DVector<f64> {
        let mut out = DVector::zeros(self.agents * self.dim);
        for i in 0..self.agents {
            out.rows_mut(i * self.dim, self.dim).copy_from_slice(self.slot(i, k));
        }
        out
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn norm(&self) -> f64 {
        DVector::from_column_slice(&self.data).norm()
    }

    /// Rotates every agent's slots into its own frame: `q_{i,k} = C_iᵀ z_{i,k}`.
    pub fn to_transformed(&self, orientations: &[Rotation]) -> Self {
        self.map_agents(|i, z| orientations[i].matrix().transpose() * z)
    }

    /// Inverse of [`to_transformed`](Self::to_transformed): `z_{i,k} = C_i q_{i,k}`.
    pub fn from_transformed(q: &Self, orientations: &[Rotation]) -> Self {
        q.map_agents(|i, v| orientations[i].matrix() * v)
    }

    fn map_agents(&self, f: impl Fn(usize, &DVector<f64>) -> DVector<f64>) -> Self {
        let mut out = Self::zeros(self.dim, self.agents);
        for i in 0..self.agents {
            for k in 0..self.slots() {
                let v = f(i, &self.slot_vector(i, k));
                out.slot_mut(i, k).copy_from_slice(v.as_slice());
            }
        }
        out
    }

    /// Largest distance between two agents' values of the same slot.
    pub fn disagreement(&self) -> f64 {
        let mut worst = 0.0f64;
        for k in 0..self.slots() {
            for i in 0..self.agents {
                for j in i + 1..self.agents {
                    let d = self.slot(i, k).iter().zip(self.slot(j, k)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
                    worst = worst.max(d);
                }
            }
        }
        num_traits::Float::sqrt(worst)
    }
}

/// The `(nN)×(nN)` generator of the stacked auxiliary dynamics.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockMatrixH(DMatrix<f64>);

impl BlockMatrixH {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn block(&self, i: usize, j: usize, n: usize) -> DMatrix<f64> {
        self.0.view((i * n, j * n), (n, n)).into_owned()
    }
}

#[derive(Debug, Clone)]
struct Link {
    j: usize,
    weight: f64,
    // C_ij = C_jiᵀ, row-major
    c_ij: Vec<f64>,
}

/// Precomputed per-agent neighbor data for evaluating the estimator law.
#[derive(Debug, Clone)]
pub struct OrientationConsensus {
    dim: usize,
    links: Vec<Vec<Link>>,
}

impl OrientationConsensus {
    pub fn new(g: &DiGraph, rel: &RelativeOrientations) -> Result<Self, EstimatorError> {
        let dim = rel.dim();
        if dim < 2 {
            return Err(EstimatorError::Dimension { expected: 2, got: dim });
        }
        let mut links = vec![Vec::new(); g.n_vertices()];
        for e in g.edges() {
            let c_ji = rel.get(e.i, e.j).ok_or(EstimatorError::MissingEdgeMeasurement { i: e.i, j: e.j })?;
            if let Some(c_ij) = rel.get(e.j, e.i) {
                let deviation = (c_ij.matrix() - c_ji.matrix().transpose()).norm();
                if !(deviation <= CONSISTENCY_TOL) {
                    return Err(EstimatorError::InconsistentRelativeOrientation { i: e.i, j: e.j, deviation });
                }
            }
            // row-major of C_jiᵀ is the column-major storage of C_ji
            links[e.i].push(Link { j: e.j, weight: e.weight, c_ij: c_ji.matrix().as_slice().to_vec() });
        }
        Ok(Self { dim, links })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn agents(&self) -> usize {
        self.links.len()
    }

    /// Length of the flat state vector.
    pub fn state_len(&self) -> usize {
        self.agents() * (self.dim - 1) * self.dim
    }

    /// Writes `ż` for the flat state `z` into `out`.
    pub fn derivative_into(&self, z: &[f64], out: &mut [f64]) {
        let n = self.dim;
        let stride = (n - 1) * n;
        out.fill(0.0);
        for (i, links) in self.links.iter().enumerate() {
            for link in links {
                for k in 0..n - 1 {
                    let zi = &z[i * stride + k * n..][..n];
                    let zj = &z[link.j * stride + k * n..][..n];
                    let o = &mut out[i * stride + k * n..][..n];
                    for r in 0..n {
                        let row = &link.c_ij[r * n..(r + 1) * n];
                        let rotated: f64 = row.iter().zip(zj).map(|(c, x)| c * x).sum();
                        o[r] += link.weight * (rotated - zi[r]);
                    }
                }
            }
        }
    }

    pub fn derivative(&self, state: &EstimatorState) -> EstimatorState {
        let mut out = EstimatorState::zeros(self.dim, self.agents());
        self.derivative_into(state.as_slice(), &mut out.data);
        out
    }

    pub fn h_matrix(&self) -> BlockMatrixH {
        let n = self.dim;
        let mut h = DMatrix::zeros(n * self.agents(), n * self.agents());
        for (i, links) in self.links.iter().enumerate() {
            for link in links {
                let c_ij = DMatrix::from_row_slice(n, n, &link.c_ij);
                h.view_mut((i * n, link.j * n), (n, n)).copy_from(&(c_ij * link.weight));
                for d in 0..n {
                    h[(i * n + d, i * n + d)] -= link.weight;
                }
            }
        }
        BlockMatrixH(h)
    }

    /// Integrates the estimator alone.
    pub fn run(
        &self,
        z0: &EstimatorState,
        config: &IntegratorConfig,
    ) -> Result<Trajectory, IntegrationError<Infallible>> {
        assert_eq!(z0.as_slice().len(), self.state_len(), "state shape does not match the network");
        integrate(
            |_, z, out| {
                self.derivative_into(z, out);
                Ok(())
            },
            z0.as_slice().to_vec(),
            config,
        )
    }
}

/// Assembles the block matrix `H` of the stacked dynamics `ż_k = H z_k`.
pub fn build_h(g: &DiGraph, rel: &RelativeOrientations) -> Result<BlockMatrixH, EstimatorError> {
    Ok(OrientationConsensus::new(g, rel)?.h_matrix())
}

pub fn estimator_derivative(
    state: &EstimatorState,
    g: &DiGraph,
    rel: &RelativeOrientations,
) -> Result<EstimatorState, EstimatorError> {
    let sys = OrientationConsensus::new(g, rel)?;
    if state.dim() != sys.dim() || state.agents() != sys.agents() {
        return Err(EstimatorError::Dimension { expected: sys.state_len(), got: state.as_slice().len() });
    }
    Ok(sys.derivative(state))
}

/// Orientation estimate `Ĉ_i` read out from agent `i`'s auxiliary variables.
pub fn assemble_estimate(state: &EstimatorState, i: usize) -> Result<Rotation, RotationError> {
    orthonormal_frame(&state.agent_slots(i))
}

/// Predicted limit of the estimator, computed from the spectrum rather than
/// by integration.
#[derive(Debug, Clone, PartialEq)]
pub struct SteadyState {
    /// Left zero-eigenvector of the Laplacian, entries summing to one.
    pub left_vector: DVector<f64>,
    /// Common limit `q_k^∞` of every agent's transformed slot `k`.
    pub limits: Vec<DVector<f64>>,
    /// The common rotation `C*` that every `C_iᵀ Ĉ_i` approaches.
    pub common_rotation: Rotation,
}

/// Projects the transformed initial condition onto the consensus subspace.
///
/// Needs the true orientations, so it is a verification tool rather than
/// part of the distributed algorithm.
pub fn steady_state_oracle(
    g: &DiGraph,
    orientations: &[Rotation],
    z0: &EstimatorState,
) -> Result<SteadyState, EstimatorError> {
    let dim = common_dim(g, orientations)?;
    if z0.dim() != dim || z0.agents() != g.n_vertices() {
        return Err(EstimatorError::Dimension { expected: dim, got: z0.dim() });
    }
    let w = zero_eigen_left_vector(&laplacian(g))?;
    let q0 = z0.to_transformed(orientations);

    let mut limits = Vec::with_capacity(dim - 1);
    for k in 0..dim - 1 {
        let mut limit = DVector::zeros(dim);
        for i in 0..g.n_vertices() {
            limit.axpy(w[i], &q0.slot_vector(i, k), 1.0);
        }
        if !(limit.norm() > INIT_EPS * q0.stacked(k).norm()) {
            return Err(EstimatorError::DegenerateLimit { slot: k });
        }
        limits.push(limit);
    }
    let basis = gram_schmidt(&limits).map_err(|e| match e {
        RotationError::DegenerateInput { .. } => EstimatorError::DependentLimits,
        other => EstimatorError::Rotation(other),
    })?;
    let common_rotation = basis.complete()?;
    Ok(SteadyState { left_vector: w, limits, common_rotation })
}

/// Whether `z0` leads every agent to a well-defined common rotation: each
/// slot keeps a nonzero projection on the consensus subspace and the
/// projected limits are independent.
pub fn check_initialization(g: &DiGraph, orientations: &[Rotation], z0: &EstimatorState) -> bool {
    steady_state_oracle(g, orientations, z0).is_ok()
}
