//! Scenario files, CSV trajectories, run reports and the `formest` command
//! line, on top of `formest-core`.

pub mod cli;
pub mod report;
pub mod run;
pub mod scenario;
pub mod templates;
