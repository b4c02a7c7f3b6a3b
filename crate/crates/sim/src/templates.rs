//! Named scenario templates. Every random quantity is drawn from the seed and
//! written out explicitly, so the same seed always yields the same file.

use std::f64::consts::TAU;
use std::fmt;
use std::str::FromStr;

use formest_core::formation::Vec3;
use formest_core::rotation::{gaussian_vector, random_rotation_with};
use formest_core::topology;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::scenario::{
    AgentSpec, EdgeSpec, EstimatorInit, GainSpec, GraphSpec, IntegratorSpec, OrientationSpec, PointSpec, RandomInit,
    ScenarioFile,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Template {
    /// Six agents on the reference network, prism-shaped target.
    Fig3,
    /// Five agents in a directed chain rooted at agent 0.
    Chain,
    /// Twenty oscillators, all-to-all, evenly spaced on the circle.
    AllToAllCircle20,
}

impl Template {
    pub const ALL: [Template; 3] = [Template::Fig3, Template::Chain, Template::AllToAllCircle20];

    pub fn name(self) -> &'static str {
        match self {
            Template::Fig3 => "fig3",
            Template::Chain => "chain",
            Template::AllToAllCircle20 => "all2all-circle20",
        }
    }
}

impl fmt::Display for Template {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Template {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Template::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| format!("unknown template {s:?} (expected fig3, chain or all2all-circle20)"))
    }
}

fn round(x: f64) -> f64 {
    // keep generated files readable; 12 digits is far below every tolerance
    (x * 1e12).round() / 1e12
}

fn point(p: Vec3) -> [f64; 3] {
    [round(p.x), round(p.y), round(p.z)]
}

fn random_point(rng: &mut ChaCha8Rng, scale: f64) -> [f64; 3] {
    let v = gaussian_vector(3, rng);
    point(Vec3::new(v[0], v[1], v[2]) * scale)
}

fn spatial(seed: u64, sensing: &[(usize, usize)], shape: Vec<Vec3>) -> ScenarioFile {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.len();
    let agents = (0..n)
        .map(|_| {
            // Rotation::from_row_slice revalidates on load, which the rounding
            // would spoil; store the full-precision entries.
            let c = random_rotation_with(3, &mut rng).to_row_major();
            AgentSpec {
                orientation: Some(OrientationSpec::Matrix(c)),
                position: Some(random_point(&mut rng, 3.0)),
                position_estimate: Some(PointSpec::Point(random_point(&mut rng, 1.0))),
                theta: None,
            }
        })
        .collect();
    ScenarioFile {
        dimension: 3,
        seed,
        graph: GraphSpec {
            vertices: n,
            edges: sensing.iter().map(|&(i, j)| EdgeSpec { from: j, to: i, weight: 1.0 }).collect(),
        },
        agents,
        desired_formation: Some(shape.into_iter().map(point).collect()),
        gains: Some(GainSpec { k_u: 1.0, edges: Vec::new() }),
        estimator_init: Some(EstimatorInit::Random(RandomInit { seed: Some(rng.random()) })),
        integrator: IntegratorSpec::default(),
    }
}

pub fn generate(template: Template, seed: u64) -> ScenarioFile {
    match template {
        Template::Fig3 => spatial(seed, &topology::SIX_AGENT_EDGES, topology::six_agent_prism()),
        Template::Chain => {
            let sensing: Vec<_> = (1..5).map(|k| (k, k - 1)).collect();
            spatial(seed, &sensing, topology::helix(5))
        }
        Template::AllToAllCircle20 => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let offset: f64 = rng.random_range(0.0..TAU / 20.0);
            let mut edges = Vec::new();
            for i in 0..20 {
                for j in 0..20 {
                    if i != j {
                        edges.push(EdgeSpec { from: j, to: i, weight: 1.0 });
                    }
                }
            }
            ScenarioFile {
                dimension: 2,
                seed,
                graph: GraphSpec { vertices: 20, edges },
                agents: (0..20)
                    .map(|k| AgentSpec { theta: Some(offset + TAU * k as f64 / 20.0), ..AgentSpec::default() })
                    .collect(),
                desired_formation: None,
                gains: None,
                estimator_init: None,
                integrator: IntegratorSpec { horizon: 20.0, ..IntegratorSpec::default() },
            }
        }
    }
}

pub fn to_json(file: &ScenarioFile) -> String {
    let mut s = serde_json::to_string_pretty(file).expect("scenario types always serialize");
    s.push('\n');
    s
}
