//! Scenario files: JSON documents describing a network, its agents and the
//! integration settings. Unknown keys are rejected at every level.
//!
//! Vertices are numbered from 0. A graph edge `{"from": j, "to": i}` means
//! information flows from `j` to `i`: agent `i` measures agent `j`.
//!
//! Randomized fields (`"random"` orientations and position estimates, and a
//! random estimator start) are materialized from `seed`, so a file always
//! denotes one concrete experiment.

use std::fs;
use std::path::{Path, PathBuf};

use formest_core::estimator::EstimatorState;
use formest_core::formation::{FormationScenario, Vec3};
use formest_core::graph::DiGraph;
use formest_core::integrate::{IntegratorConfig, Method};
use formest_core::localization::LocalizationScenario;
use formest_core::rotation::{gaussian_vector, random_rotation_with, Rotation, RotationError};
use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("{field}: {message}")]
    Schema { field: String, message: String },
    #[error("{field}: {message}")]
    InvariantViolation { field: String, message: String },
}

fn schema(field: impl Into<String>, message: impl Into<String>) -> ScenarioError {
    ScenarioError::Schema { field: field.into(), message: message.into() }
}

fn invariant(field: impl Into<String>, message: impl ToString) -> ScenarioError {
    ScenarioError::InvariantViolation { field: field.into(), message: message.to_string() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub dimension: usize,
    pub seed: u64,
    pub graph: GraphSpec,
    pub agents: Vec<AgentSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub desired_formation: Option<Vec<[f64; 3]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gains: Option<GainSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub estimator_init: Option<EstimatorInit>,
    #[serde(default)]
    pub integrator: IntegratorSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphSpec {
    pub vertices: usize,
    pub edges: Vec<EdgeSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgeSpec {
    pub from: usize,
    pub to: usize,
    #[serde(default = "one")]
    pub weight: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Keyword {
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum OrientationSpec {
    /// `n × n` entries, row-major.
    Matrix(Vec<f64>),
    AxisAngle(AxisAngle),
    Keyword(Keyword),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AxisAngle {
    pub axis: [f64; 3],
    pub angle: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PointSpec {
    Point([f64; 3]),
    Keyword(Keyword),
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub orientation: Option<OrientationSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub position: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub position_estimate: Option<PointSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GainSpec {
    pub k_u: f64,
    /// Per-edge overrides of the control gain `l_ij`; unlisted edges use 1.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub edges: Vec<EdgeGain>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgeGain {
    pub from: usize,
    pub to: usize,
    pub gain: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum EstimatorInit {
    Random(RandomInit),
    /// Per agent, the `n - 1` auxiliary vectors.
    Explicit(Vec<Vec<Vec<f64>>>),
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomInit {
    /// Falls back to the scenario seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MethodSpec {
    Rk4,
    Euler,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntegratorSpec {
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "default_horizon")]
    pub horizon: f64,
    #[serde(default = "default_method")]
    pub method: MethodSpec,
    #[serde(default = "default_stride")]
    pub record_every: usize,
}

fn default_dt() -> f64 {
    0.001
}
fn default_horizon() -> f64 {
    60.0
}
fn default_method() -> MethodSpec {
    MethodSpec::Rk4
}
fn default_stride() -> usize {
    100
}

impl Default for IntegratorSpec {
    fn default() -> Self {
        Self { dt: default_dt(), horizon: default_horizon(), method: default_method(), record_every: default_stride() }
    }
}

/// Command-line overrides applied on top of a file.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Overrides {
    pub dt: Option<f64>,
    pub horizon: Option<f64>,
    pub seed: Option<u64>,
    pub record_every: Option<usize>,
}

/// A validated scenario with every randomized field drawn.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub path: PathBuf,
    /// `sha256:` digest of the file bytes.
    pub digest: String,
    pub dimension: usize,
    pub seed: u64,
    pub graph: DiGraph,
    pub integrator: IntegratorConfig,
    orientations: Option<Vec<Rotation>>,
    positions: Option<Vec<Vec3>>,
    position_estimates: Option<Vec<Vec3>>,
    thetas: Option<Vec<f64>>,
    desired: Option<Vec<Vec3>>,
    k_u: f64,
    edge_gains: Vec<f64>,
    estimator_init: Option<EstimatorState>,
}

pub fn load_scenario(path: &Path, overrides: &Overrides) -> Result<Scenario, ScenarioError> {
    let bytes = fs::read(path)
        .map_err(|e| ScenarioError::Parse { path: path.to_owned(), message: format!("cannot read file: {e}") })?;
    let file: ScenarioFile = serde_json::from_slice(&bytes)
        .map_err(|e| ScenarioError::Parse { path: path.to_owned(), message: e.to_string() })?;
    let digest = format!("sha256:{:x}", Sha256::digest(&bytes));
    Scenario::from_file(file, path.to_owned(), digest, overrides)
}

fn vec3(p: &[f64; 3]) -> Vec3 {
    Vec3::new(p[0], p[1], p[2])
}

fn finite(field: &str, values: &[f64]) -> Result<(), ScenarioError> {
    match values.iter().find(|v| !v.is_finite()) {
        Some(v) => Err(invariant(field, format!("non-finite value {v}"))),
        None => Ok(()),
    }
}

impl Scenario {
    pub fn from_file(
        file: ScenarioFile,
        path: PathBuf,
        digest: String,
        overrides: &Overrides,
    ) -> Result<Self, ScenarioError> {
        let n = file.graph.vertices;
        let dim = file.dimension;
        if dim < 2 {
            return Err(invariant("dimension", format!("must be at least 2, got {dim}")));
        }
        if file.agents.len() != n {
            return Err(schema(
                "agents",
                format!("graph has {n} vertices but {} agents are listed", file.agents.len()),
            ));
        }
        let seed = overrides.seed.unwrap_or(file.seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);

        for (k, e) in file.graph.edges.iter().enumerate() {
            finite(&format!("graph.edges[{k}].weight"), &[e.weight])?;
        }
        let graph = DiGraph::new(n, file.graph.edges.iter().map(|e| (e.to, e.from, e.weight)))
            .map_err(|e| invariant("graph", e))?;

        let orientations = collect_optional(&file.agents, "orientation", |a| a.orientation.as_ref())?
            .map(|specs| {
                specs
                    .iter()
                    .enumerate()
                    .map(|(i, s)| {
                        orientation(s, dim, &mut rng).map_err(|e| invariant(format!("agents[{i}].orientation"), e))
                    })
                    .collect::<Result<Vec<_>, _>>()
            })
            .transpose()?;
        let positions = collect_optional(&file.agents, "position", |a| a.position.as_ref())?
            .map(|ps| ps.iter().map(|p| vec3(p)).collect::<Vec<_>>());
        if let Some(ps) = &positions {
            for (i, p) in ps.iter().enumerate() {
                finite(&format!("agents[{i}].position"), p.as_slice())?;
            }
        }
        let position_estimates = collect_optional(&file.agents, "position_estimate", |a| a.position_estimate.as_ref())?
            .map(|ps| {
                ps.iter()
                    .enumerate()
                    .map(|(i, p)| match p {
                        PointSpec::Point(p) => finite(&format!("agents[{i}].position_estimate"), p).map(|_| vec3(p)),
                        PointSpec::Keyword(Keyword::Random) => {
                            Ok(Vec3::from_iterator(gaussian_vector(3, &mut rng).iter().copied()))
                        }
                    })
                    .collect::<Result<Vec<_>, _>>()
            })
            .transpose()?;
        let thetas = collect_optional(&file.agents, "theta", |a| a.theta.as_ref())?
            .map(|ts| ts.into_iter().copied().collect::<Vec<_>>());
        if let Some(ts) = &thetas {
            finite("agents[].theta", ts)?;
        }

        let desired = match &file.desired_formation {
            Some(d) if d.len() != n => {
                return Err(schema("desired_formation", format!("expected {n} points, got {}", d.len())))
            }
            Some(d) => {
                for (i, p) in d.iter().enumerate() {
                    finite(&format!("desired_formation[{i}]"), p)?;
                }
                Some(d.iter().map(vec3).collect::<Vec<_>>())
            }
            None => None,
        };

        let (k_u, edge_gains) = gains(&file, &graph)?;

        let estimator_init = match &file.estimator_init {
            None => None,
            Some(EstimatorInit::Random(r)) => {
                // --seed replaces every seed in the file
                let s = match overrides.seed {
                    Some(s) => s,
                    None => r.seed.unwrap_or(seed),
                };
                Some(EstimatorState::random(dim, n, &mut ChaCha8Rng::seed_from_u64(s)))
            }
            Some(EstimatorInit::Explicit(agents)) => Some(explicit_init(agents, dim, n)?),
        };

        let spec = &file.integrator;
        let method = match spec.method {
            MethodSpec::Rk4 => Method::Rk4,
            MethodSpec::Euler => Method::Euler,
        };
        let integrator = IntegratorConfig {
            dt: overrides.dt.unwrap_or(spec.dt),
            horizon: overrides.horizon.unwrap_or(spec.horizon),
            method,
            record_every: overrides.record_every.unwrap_or(spec.record_every),
        };
        integrator.validate().map_err(|e| invariant("integrator", e))?;

        Ok(Self {
            path,
            digest,
            dimension: dim,
            seed,
            graph,
            integrator,
            orientations,
            positions,
            position_estimates,
            thetas,
            desired,
            k_u,
            edge_gains,
            estimator_init,
        })
    }

    pub fn agents(&self) -> usize {
        self.graph.n_vertices()
    }

    pub fn orientations(&self) -> Result<&[Rotation], ScenarioError> {
        self.orientations.as_deref().ok_or_else(|| schema("agents[].orientation", "required for this command"))
    }

    pub fn estimator_init(&self) -> Result<&EstimatorState, ScenarioError> {
        self.estimator_init.as_ref().ok_or_else(|| schema("estimator_init", "required for this command"))
    }

    pub fn thetas(&self) -> Result<&[f64], ScenarioError> {
        self.thetas.as_deref().ok_or_else(|| schema("agents[].theta", "required for this command"))
    }

    fn require_3d(&self) -> Result<(), ScenarioError> {
        if self.dimension != 3 {
            return Err(schema("dimension", format!("this command needs dimension 3, got {}", self.dimension)));
        }
        Ok(())
    }

    fn positions(&self) -> Result<Vec<Vec3>, ScenarioError> {
        self.positions.clone().ok_or_else(|| schema("agents[].position", "required for this command"))
    }

    pub fn formation(&self) -> Result<FormationScenario, ScenarioError> {
        self.require_3d()?;
        let desired = self.desired.clone().ok_or_else(|| schema("desired_formation", "required for this command"))?;
        FormationScenario::new(
            self.graph.clone(),
            self.orientations()?.to_vec(),
            self.positions()?,
            desired,
            self.k_u,
            self.edge_gains.clone(),
        )
        .map_err(|e| invariant("scenario", e))
    }

    pub fn localization(&self) -> Result<LocalizationScenario, ScenarioError> {
        self.require_3d()?;
        let estimates = self
            .position_estimates
            .clone()
            .ok_or_else(|| schema("agents[].position_estimate", "required for this command"))?;
        LocalizationScenario::new(
            self.graph.clone(),
            self.orientations()?.to_vec(),
            self.positions()?,
            estimates,
            self.k_u,
            self.edge_gains.clone(),
        )
        .map_err(|e| invariant("scenario", e))
    }
}

/// All agents must agree on whether an optional field is present.
fn collect_optional<'a, T>(
    agents: &'a [AgentSpec],
    name: &str,
    get: impl Fn(&'a AgentSpec) -> Option<&'a T>,
) -> Result<Option<Vec<&'a T>>, ScenarioError> {
    let present: Vec<_> = agents.iter().map(&get).collect();
    match present.iter().position(Option::is_none) {
        None if !agents.is_empty() => Ok(Some(present.into_iter().map(Option::unwrap).collect())),
        None => Ok(None),
        Some(_) if present.iter().all(Option::is_none) => Ok(None),
        Some(i) => Err(schema(format!("agents[{i}].{name}"), "missing while other agents set it")),
    }
}

fn orientation(spec: &OrientationSpec, dim: usize, rng: &mut ChaCha8Rng) -> Result<Rotation, String> {
    match spec {
        OrientationSpec::Matrix(entries) => {
            if entries.len() != dim * dim {
                return Err(format!("expected {} entries, got {}", dim * dim, entries.len()));
            }
            Rotation::from_row_slice(dim, entries).map_err(|e| match e {
                RotationError::NotProper { det } => format!("determinant {det:.6} (improper rotation)"),
                other => other.to_string(),
            })
        }
        OrientationSpec::AxisAngle(AxisAngle { axis, angle }) => {
            if dim != 3 {
                return Err("axis-angle form needs dimension 3".into());
            }
            Rotation::from_axis_angle(*axis, *angle).map_err(|e| e.to_string())
        }
        OrientationSpec::Keyword(Keyword::Random) => Ok(random_rotation_with(dim, rng)),
    }
}

fn gains(file: &ScenarioFile, graph: &DiGraph) -> Result<(f64, Vec<f64>), ScenarioError> {
    let mut edge_gains = vec![1.0; graph.edges().len()];
    let Some(spec) = &file.gains else {
        return Ok((1.0, edge_gains));
    };
    if !(spec.k_u.is_finite() && spec.k_u > 0.0) {
        return Err(invariant("gains.k_u", format!("must be positive, got {}", spec.k_u)));
    }
    for (k, g) in spec.edges.iter().enumerate() {
        let field = format!("gains.edges[{k}]");
        if !(g.gain.is_finite() && g.gain > 0.0) {
            return Err(invariant(field, format!("gain must be positive, got {}", g.gain)));
        }
        let slot = graph
            .edges()
            .iter()
            .position(|e| e.i == g.to && e.j == g.from)
            .ok_or_else(|| invariant(field, format!("no graph edge from {} to {}", g.from, g.to)))?;
        edge_gains[slot] = g.gain;
    }
    Ok((spec.k_u, edge_gains))
}

fn explicit_init(agents: &[Vec<Vec<f64>>], dim: usize, n: usize) -> Result<EstimatorState, ScenarioError> {
    if agents.len() != n {
        return Err(schema("estimator_init.explicit", format!("expected {n} agents, got {}", agents.len())));
    }
    let mut slots = Vec::with_capacity(n);
    for (i, a) in agents.iter().enumerate() {
        if a.len() != dim - 1 {
            return Err(schema(format!("estimator_init.explicit[{i}]"), format!("expected {} vectors", dim - 1)));
        }
        let mut vs = Vec::with_capacity(dim - 1);
        for (k, v) in a.iter().enumerate() {
            let field = format!("estimator_init.explicit[{i}][{k}]");
            if v.len() != dim {
                return Err(schema(field, format!("expected {dim} entries, got {}", v.len())));
            }
            finite(&field, v)?;
            vs.push(DVector::from_column_slice(v));
        }
        slots.push(vs);
    }
    EstimatorState::from_slots(dim, &slots).map_err(|e| invariant("estimator_init", e))
}
