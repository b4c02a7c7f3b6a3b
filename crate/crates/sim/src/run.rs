//! Runs one scenario under one command and collects the CSV rows and the
//! report.

use std::fmt;
use std::time::Instant;

use formest_core::circle::{run_circle, wrap_angle, OscillatorState, SyncVerdict};
use formest_core::estimator::{
    assemble_estimate, steady_state_oracle, EstimatorState, OrientationConsensus, RelativeOrientations,
};
use formest_core::formation::{max_displacement_error, run_formation, FormationError, RotationSource, Vec3};
use formest_core::localization::{run_localization, LocalizationError};
use formest_core::metrics::log_slope;
use formest_core::rotation::Rotation;
use formest_core::DiGraph;
use nalgebra::{DMatrix, Matrix3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::report::{IntegratorReport, RunReport, Threshold, Verdict};
use crate::scenario::{Scenario, ScenarioError};

pub const AGREEMENT_TOL: f64 = 1e-6;
pub const EDGE_RESIDUAL_TOL: f64 = 1e-6;
pub const EDGE_ERROR_TOL: f64 = 1e-4;
pub const DISTANCE_ERROR_TOL: f64 = 1e-4;
pub const SPREAD_TOL: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Estimate,
    Formation,
    Localize,
    Circle,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Estimate => "estimate",
            Command::Formation => "formation",
            Command::Localize => "localize",
            Command::Circle => "circle",
        }
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RunOptions {
    pub force: bool,
    /// Circle only: uniform noise of this amplitude added to every angle.
    pub perturb: Option<f64>,
}

/// Rows of a CSV file; every value is already formatted.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    fn new(header: impl IntoIterator<Item = String>) -> Self {
        Self { header: header.into_iter().collect(), rows: Vec::new() }
    }
}

fn num(x: f64) -> String {
    if x.is_nan() {
        "nan".to_owned()
    } else {
        // shortest representation that parses back to the same value
        format!("{x}")
    }
}

#[derive(Debug)]
pub struct RunOutcome {
    pub report: RunReport,
    /// Absent when the run was refused or failed before producing samples.
    pub table: Option<Table>,
}

struct Partial {
    metrics: Vec<(&'static str, f64)>,
    decay_rate: Option<f64>,
    thresholds: Vec<Threshold>,
    verdict: Verdict,
    error: Option<String>,
    details: serde_json::Value,
    table: Option<Table>,
}

impl Partial {
    fn refused(thresholds: Vec<Threshold>, error: impl ToString) -> Self {
        Self {
            metrics: Vec::new(),
            decay_rate: None,
            thresholds,
            verdict: Verdict::Refused,
            error: Some(error.to_string()),
            details: serde_json::Value::Null,
            table: None,
        }
    }

    fn failed(thresholds: Vec<Threshold>, error: impl ToString) -> Self {
        Self { verdict: Verdict::NotConverged, ..Self::refused(thresholds, error) }
    }
}

fn thresholds(command: Command) -> Vec<Threshold> {
    match command {
        Command::Estimate => vec![
            Threshold { metric: "agreement", below: AGREEMENT_TOL },
            Threshold { metric: "edge_residual", below: EDGE_RESIDUAL_TOL },
        ],
        Command::Formation => vec![Threshold { metric: "edge_error", below: EDGE_ERROR_TOL }],
        Command::Localize => vec![Threshold { metric: "distance_error", below: DISTANCE_ERROR_TOL }],
        Command::Circle => vec![Threshold { metric: "final_spread", below: SPREAD_TOL }],
    }
}

/// Runs `command` on an already loaded scenario. Only missing or malformed
/// inputs are errors; refusals and failed runs come back as reports.
pub fn run(command: Command, scenario: &Scenario, options: &RunOptions) -> Result<RunOutcome, ScenarioError> {
    let start = Instant::now();
    let partial = match command {
        Command::Estimate => estimate(scenario, options)?,
        Command::Formation => formation(scenario, options)?,
        Command::Localize => localize(scenario, options)?,
        Command::Circle => circle(scenario, options)?,
    };
    let report = RunReport {
        command: command.name(),
        scenario: scenario.path.display().to_string(),
        digest: scenario.digest.clone(),
        seed: scenario.seed,
        agents: scenario.agents(),
        integrator: IntegratorReport::from(&scenario.integrator),
        metrics: partial.metrics,
        decay_rate: partial.decay_rate,
        thresholds: partial.thresholds,
        verdict: partial.verdict,
        error: partial.error,
        details: partial.details,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
    };
    Ok(RunOutcome { report, table: partial.table })
}

fn verdict(thresholds: &[Threshold], metrics: &[(&'static str, f64)], sync: bool) -> Verdict {
    let met = thresholds.iter().all(|t| metrics.iter().any(|(n, v)| *n == t.metric && *v < t.below));
    match (met, sync) {
        (true, false) => Verdict::Converged,
        (false, false) => Verdict::NotConverged,
        (true, true) => Verdict::Synchronized,
        (false, true) => Verdict::NotSynchronized,
    }
}

fn row_major(m: &Matrix3<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

// ---------------------------------------------------------------- estimate

/// Per-agent agreement and edge residuals of one estimator sample.
struct EstimateSample {
    c_hat: Vec<Option<DMatrix<f64>>>,
    agreement: Vec<f64>,
    edge_residual: Vec<f64>,
}

fn estimate_sample(state: &EstimatorState, orientations: &[Rotation], g: &DiGraph) -> EstimateSample {
    let n = state.agents();
    let c_hat: Vec<Option<DMatrix<f64>>> =
        (0..n).map(|i| assemble_estimate(state, i).ok().map(Rotation::into_matrix)).collect();
    // C_iᵀ Ĉ_i, which every agent should share
    let aligned: Vec<Option<DMatrix<f64>>> =
        c_hat.iter().zip(orientations).map(|(c, o)| c.as_ref().map(|c| o.matrix().transpose() * c)).collect();
    let agreement = (0..n)
        .map(|i| {
            let mut worst = 0.0f64;
            for j in 0..n {
                match (&aligned[i], &aligned[j]) {
                    (Some(a), Some(b)) => worst = worst.max((a - b).norm()),
                    _ => return f64::NAN,
                }
            }
            worst
        })
        .collect();
    let mut edge_residual = vec![0.0f64; n];
    for e in g.edges() {
        let r = match (&c_hat[e.i], &c_hat[e.j]) {
            (Some(ci), Some(cj)) => {
                let c_ji = orientations[e.j].matrix() * orientations[e.i].matrix().transpose();
                (cj - c_ji * ci).norm()
            }
            _ => f64::NAN,
        };
        let cur = edge_residual[e.i];
        edge_residual[e.i] = if r.is_nan() || cur.is_nan() { f64::NAN } else { cur.max(r) };
    }
    for i in 0..n {
        if c_hat[i].is_none() {
            edge_residual[i] = f64::NAN;
        }
    }
    EstimateSample { c_hat, agreement, edge_residual }
}

fn max_or_nan(values: &[f64]) -> f64 {
    values.iter().copied().fold(0.0, |acc, v| if acc.is_nan() || v.is_nan() { f64::NAN } else { acc.max(v) })
}

fn estimate(scenario: &Scenario, options: &RunOptions) -> Result<Partial, ScenarioError> {
    let th = thresholds(Command::Estimate);
    let orientations = scenario.orientations()?;
    let z0 = scenario.estimator_init()?;
    let g = &scenario.graph;
    let dim = scenario.dimension;
    if orientations.iter().any(|o| o.dim() != dim) || z0.dim() != dim || z0.agents() != g.n_vertices() {
        return Err(ScenarioError::InvariantViolation {
            field: "estimator_init".into(),
            message: format!("expected {} agents in dimension {dim}", g.n_vertices()),
        });
    }
    let oracle = match steady_state_oracle(g, orientations, z0) {
        Ok(o) => Some(o),
        Err(e) if !options.force => return Ok(Partial::refused(th, format!("invalid initialization: {e}"))),
        Err(_) => None,
    };
    let invariant = |e: &dyn fmt::Display| ScenarioError::InvariantViolation {
        field: "agents[].orientation".into(),
        message: e.to_string(),
    };
    let rel = RelativeOrientations::from_true(g, orientations).map_err(|e| invariant(&e))?;
    let consensus = OrientationConsensus::new(g, &rel).map_err(|e| invariant(&e))?;
    let trajectory = match consensus.run(z0, &scenario.integrator) {
        Ok(t) => t,
        Err(e) => return Ok(Partial::failed(th, e)),
    };

    let n = g.n_vertices();
    let mut table = Table::new(
        ["t".to_owned(), "agent".to_owned()]
            .into_iter()
            .chain((1..=dim).flat_map(|r| (1..=dim).map(move |c| format!("c_hat_{r}_{c}"))))
            .chain(["agreement".to_owned(), "edge_residual".to_owned()]),
    );
    let mut agreement_trace = Vec::with_capacity(trajectory.len());
    let mut last = None;
    for (t, flat) in trajectory.iter() {
        let state = EstimatorState::from_flat(dim, n, flat.to_vec()).expect("trajectory has the estimator layout");
        let s = estimate_sample(&state, orientations, g);
        for i in 0..n {
            let mut row = vec![num(t), i.to_string()];
            match &s.c_hat[i] {
                Some(c) => row.extend(c.transpose().iter().map(|&v| num(v))),
                None => row.extend((0..dim * dim).map(|_| num(f64::NAN))),
            }
            row.push(num(s.agreement[i]));
            row.push(num(s.edge_residual[i]));
            table.rows.push(row);
        }
        agreement_trace.push(max_or_nan(&s.agreement));
        last = Some((state, s));
    }
    let (final_state, s) = last.expect("at least one sample");
    let agreement = max_or_nan(&s.agreement);
    let edge_residual = max_or_nan(&s.edge_residual);
    let mut metrics = vec![("agreement", agreement), ("edge_residual", edge_residual)];
    if let Some(o) = &oracle {
        let gap: Vec<f64> = s
            .c_hat
            .iter()
            .zip(orientations)
            .map(|(c, r)| match c {
                Some(c) => (r.matrix().transpose() * c - o.common_rotation.matrix()).norm(),
                None => f64::NAN,
            })
            .collect();
        metrics.push(("oracle_gap", max_or_nan(&gap)));
    }
    metrics.push(("norm_ratio", final_state.norm() / z0.norm()));
    let horizon = trajectory.final_time;
    let decay_rate = log_slope(&trajectory.times, &agreement_trace, 0.1 * horizon, 0.5 * horizon).map(|s| -s);
    let details = json!({
        "initialization_valid": oracle.is_some(),
        "common_rotation": oracle.as_ref().map(|o| o.common_rotation.to_row_major()),
    });
    Ok(Partial {
        verdict: verdict(&th, &metrics, false),
        metrics,
        decay_rate,
        thresholds: th,
        error: None,
        details,
        table: Some(table),
    })
}

// --------------------------------------------------------------- formation

fn formation(scenario: &Scenario, options: &RunOptions) -> Result<Partial, ScenarioError> {
    let th = thresholds(Command::Formation);
    let fs = scenario.formation()?;
    let z0 = scenario.estimator_init()?;
    let run = match run_formation(&fs, z0, &scenario.integrator, options.force) {
        Ok(r) => r,
        Err(FormationError::InvalidInitialization(e)) => {
            return Ok(Partial::refused(th, format!("invalid initialization: {e}")))
        }
        Err(e @ FormationError::Integration(_)) => return Ok(Partial::failed(th, e)),
        Err(e) => return Err(ScenarioError::InvariantViolation { field: "scenario".into(), message: e.to_string() }),
    };
    let n = fs.agents();
    let rotation = run.report.common_rotation.as_ref().map(|c| Matrix3::from_column_slice(c.matrix().as_slice()));
    let mut table = Table::new(["t", "agent", "px", "py", "pz", "edge_error"].map(String::from));
    for (k, &t) in run.trajectory.times.iter().enumerate() {
        let p = run.state_at(k).positions;
        for i in 0..n {
            // edges sensed by agent i
            let err = match &rotation {
                Some(r) => max_displacement_error(
                    &p,
                    fs.desired(),
                    r,
                    fs.graph().edges().iter().filter(|e| e.i == i).map(|e| (e.i, e.j)),
                ),
                None => f64::NAN,
            };
            table.rows.push(vec![num(t), i.to_string(), num(p[i].x), num(p[i].y), num(p[i].z), num(err)]);
        }
    }
    let r = &run.report;
    let metrics = vec![("edge_error", r.max_edge_error)];
    let mut verdict = verdict(&th, &metrics, false);
    if !r.initialization_valid {
        // a forced run has no guaranteed limit to converge to
        verdict = Verdict::NotConverged;
    }
    let details = json!({
        "initialization_valid": r.initialization_valid,
        "rotation_source": match r.rotation_source {
            RotationSource::Oracle => "oracle",
            RotationSource::Tail => "tail",
        },
        "common_rotation": rotation.as_ref().map(row_major),
    });
    Ok(Partial { metrics, decay_rate: r.decay_rate, thresholds: th, verdict, error: None, details, table: Some(table) })
}

// ---------------------------------------------------------------- localize

fn localize(scenario: &Scenario, options: &RunOptions) -> Result<Partial, ScenarioError> {
    let th = thresholds(Command::Localize);
    let ls = scenario.localization()?;
    let z0 = scenario.estimator_init()?;
    let run = match run_localization(&ls, z0, &scenario.integrator, options.force) {
        Ok(r) => r,
        Err(LocalizationError::InvalidInitialization(e)) => {
            return Ok(Partial::refused(th, format!("invalid initialization: {e}")))
        }
        Err(e @ LocalizationError::Integration(_)) => return Ok(Partial::failed(th, e)),
        Err(e) => return Err(ScenarioError::InvariantViolation { field: "scenario".into(), message: e.to_string() }),
    };
    let n = ls.agents();
    let truth = ls.true_positions();
    let mut table = Table::new(["t", "agent", "phx", "phy", "phz", "distance_error"].map(String::from));
    for (k, &t) in run.trajectory.times.iter().enumerate() {
        let p: Vec<Vec3> = run.state_at(k).positions;
        for i in 0..n {
            let err = (0..n)
                .filter(|&j| j != i)
                .map(|j| ((p[i] - p[j]).norm() - (truth[i] - truth[j]).norm()).abs())
                .fold(0.0, f64::max);
            table.rows.push(vec![num(t), i.to_string(), num(p[i].x), num(p[i].y), num(p[i].z), num(err)]);
        }
    }
    let r = &run.report;
    let mut metrics = vec![("distance_error", r.max_distance_error)];
    if let Some(fit) = &r.rigid_fit {
        metrics.push(("rigid_fit_residual", fit.residual));
    }
    let mut verdict = verdict(&th, &metrics, false);
    if !r.initialization_valid {
        verdict = Verdict::NotConverged;
    }
    let frame = r.frame.as_ref().map(|c| Matrix3::from_column_slice(c.matrix().as_slice()));
    let details = json!({
        "initialization_valid": r.initialization_valid,
        "frame": frame.as_ref().map(row_major),
        "rigid_fit": r.rigid_fit.as_ref().map(|f| json!({
            "rotation": row_major(&f.rotation),
            "translation": [f.translation.x, f.translation.y, f.translation.z],
            "residual": f.residual,
        })),
    });
    Ok(Partial { metrics, decay_rate: r.decay_rate, thresholds: th, verdict, error: None, details, table: Some(table) })
}

// ------------------------------------------------------------------ circle

fn circle(scenario: &Scenario, options: &RunOptions) -> Result<Partial, ScenarioError> {
    let th = thresholds(Command::Circle);
    let mut theta = scenario.thetas()?.to_vec();
    if let Some(amp) = options.perturb {
        if !(amp.is_finite() && amp >= 0.0) {
            return Err(ScenarioError::InvariantViolation {
                field: "--perturb".into(),
                message: format!("amplitude must be finite and non-negative, got {amp}"),
            });
        }
        // a stream separate from the one that drew the scenario itself
        let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed ^ 0x5eed_c1c1e);
        for t in &mut theta {
            *t += amp * rng.random_range(-1.0..=1.0);
        }
    }
    let state = OscillatorState::new(theta);
    let run = match run_circle(&state, &scenario.graph, &scenario.integrator) {
        Ok(r) => r,
        Err(e) => return Ok(Partial { verdict: Verdict::NotSynchronized, ..Partial::failed(th, e) }),
    };
    let n = scenario.agents();
    let mut table = Table::new(["t", "agent", "theta", "spread"].map(String::from));
    for (k, (t, s)) in run.trajectory.iter().enumerate() {
        for (i, &x) in s.iter().enumerate().take(n) {
            table.rows.push(vec![num(t), i.to_string(), num(wrap_angle(x)), num(run.spread[k])]);
        }
    }
    let min_spread = run.spread.iter().copied().fold(f64::INFINITY, f64::min);
    let metrics =
        vec![("final_spread", run.final_spread), ("initial_spread", run.spread[0]), ("min_spread", min_spread)];
    let horizon = run.trajectory.final_time;
    let decay_rate = log_slope(&run.trajectory.times, &run.spread, 0.1 * horizon, 0.5 * horizon).map(|s| -s);
    let verdict = verdict(&th, &metrics, true);
    debug_assert_eq!(verdict == Verdict::Synchronized, run.verdict == SyncVerdict::Synchronized);
    let details = serde_json::Value::Null;
    Ok(Partial { metrics, decay_rate, thresholds: th, verdict, error: None, details, table: Some(table) })
}
