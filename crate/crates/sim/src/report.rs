//! Machine-readable run reports.

use std::fmt;

use serde::Serialize;

use formest_core::integrate::{IntegratorConfig, Method};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Converged,
    NotConverged,
    Synchronized,
    NotSynchronized,
    Refused,
}

impl Verdict {
    pub fn exit_code(self) -> u8 {
        match self {
            Verdict::Converged | Verdict::Synchronized => 0,
            Verdict::NotConverged | Verdict::NotSynchronized => 2,
            Verdict::Refused => 3,
        }
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Converged => "converged",
            Verdict::NotConverged => "not converged",
            Verdict::Synchronized => "synchronized",
            Verdict::NotSynchronized => "not synchronized",
            Verdict::Refused => "refused",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IntegratorReport {
    pub dt: f64,
    pub horizon: f64,
    pub method: &'static str,
    pub record_every: usize,
    pub samples: usize,
}

impl From<&IntegratorConfig> for IntegratorReport {
    fn from(c: &IntegratorConfig) -> Self {
        Self {
            dt: c.dt,
            horizon: c.horizon,
            method: match c.method {
                Method::Rk4 => "rk4",
                Method::Euler => "euler",
            },
            record_every: c.record_every,
            samples: c.samples(),
        }
    }
}

/// A metric compared against an upper limit; the verdict requires every
/// threshold to hold.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Threshold {
    pub metric: &'static str,
    pub below: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub command: &'static str,
    pub scenario: String,
    pub digest: String,
    pub seed: u64,
    pub agents: usize,
    pub integrator: IntegratorReport,
    /// Final values; non-finite entries serialize as null.
    pub metrics: Vec<(&'static str, f64)>,
    pub decay_rate: Option<f64>,
    pub thresholds: Vec<Threshold>,
    pub verdict: Verdict,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(skip_serializing_if = "serde_json::Value::is_null")]
    pub details: serde_json::Value,
    pub wall_clock_seconds: f64,
}

impl RunReport {
    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metrics.iter().find(|(n, _)| *n == name).map(|(_, v)| *v)
    }

    /// Whether every threshold holds for the recorded metrics.
    pub fn thresholds_met(&self) -> bool {
        self.thresholds.iter().all(|t| self.metric(t.metric).is_some_and(|v| v < t.below))
    }

    /// The verdict the thresholds imply, given whether the run was refused and
    /// which pair of verdicts the command uses.
    pub fn implied_verdict(&self, success: Verdict, failure: Verdict) -> Verdict {
        if self.verdict == Verdict::Refused {
            Verdict::Refused
        } else if self.error.is_none() && self.thresholds_met() {
            success
        } else {
            failure
        }
    }

    pub fn summary(&self) -> String {
        let metrics: Vec<String> = self.metrics.iter().map(|(n, v)| format!("{n} {v:.3e}")).collect();
        let mut line = format!("{} {}: {}", self.command, self.scenario, self.verdict);
        if !metrics.is_empty() {
            line.push_str(&format!(" ({})", metrics.join(", ")));
        }
        if let Some(e) = &self.error {
            line.push_str(&format!(" [{e}]"));
        }
        line.push_str(&format!(" in {:.2} s", self.wall_clock_seconds));
        line
    }
}

impl RunReport {
    // metrics as an object keyed by name
    pub fn to_json(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("reports always serialize");
        let metrics: serde_json::Map<String, serde_json::Value> =
            self.metrics.iter().map(|(n, x)| (n.to_string(), serde_json::json!(x))).collect();
        v["metrics"] = serde_json::Value::Object(metrics);
        v
    }
}
