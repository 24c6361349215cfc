//! Run configuration: JSON file, command-line overrides, resolution of the
//! variant-dependent defaults and validation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use ellada_core::anderson::AndersonParams;
use ellada_core::driver::{RunSpec, SolverParams};
use ellada_core::quadratic::GeneratedQp;
use ellada_core::runtime::{ExecutionMode, TransportKind};
use ellada_core::schedule::{default_schedules, BarrierSchedule, ToleranceSchedule, Variant};
use ellada_tank::mpc::{ControllerKind, MonolithicOptions, Scenario, BENCHMARK_START};
use ellada_tank::{OcpSpec, TankModel};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ProblemKind {
    /// Quadruple-tank OCP at `tank.initial`.
    Tank,
    /// Generated chain of convex QPs (`qp` section, `seed`).
    Qp,
    /// QP description read from `problem_file`.
    File,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum PlotFormat {
    Svg,
    Png,
    None,
}

/// Which final tolerances the variant uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Finals {
    /// The variant's own finals.
    Native,
    /// ELL's stationarity and dual finals for every variant.
    Equalized,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TankConfig {
    pub model: TankModel,
    pub ocp: OcpSpec,
    pub initial: [f64; 4],
    /// Sampling instants of a closed-loop run.
    pub steps: usize,
    pub plant_tolerance: f64,
    pub monolithic: MonolithicOptions,
    pub controllers: Vec<ControllerKind>,
    /// Log wall-clock solve times. Off by default so that repeated runs
    /// write identical files.
    pub record_time: bool,
}

impl Default for TankConfig {
    fn default() -> Self {
        let sc = Scenario::default();
        Self {
            model: sc.model,
            ocp: sc.ocp,
            initial: BENCHMARK_START,
            steps: sc.steps,
            plant_tolerance: sc.plant_tolerance,
            monolithic: sc.monolithic,
            controllers: ControllerKind::ALL.to_vec(),
            record_time: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub problem: ProblemKind,
    pub problem_file: Option<PathBuf>,
    pub algo: Variant,
    /// Unset: native for `solve`, equalized for `closed-loop`.
    pub finals: Option<Finals>,
    pub solver: SolverParams,
    /// Unset: the variant's default schedule.
    pub schedule: Option<ToleranceSchedule>,
    pub barrier: Option<BarrierSchedule>,
    pub accel: AndersonParams,
    pub seed: u64,
    pub mode: ExecutionMode,
    pub transport: TransportKind,
    pub out: PathBuf,
    pub plot: PlotFormat,
    pub qp: GeneratedQp,
    pub tank: TankConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            problem: ProblemKind::Tank,
            problem_file: None,
            algo: Variant::Ellada,
            finals: None,
            solver: SolverParams::default(),
            schedule: None,
            barrier: None,
            accel: AndersonParams::default(),
            seed: 0,
            mode: ExecutionMode::Synchronous,
            transport: TransportKind::Inline,
            out: PathBuf::from("out"),
            plot: PlotFormat::Svg,
            qp: GeneratedQp::default(),
            tank: TankConfig::default(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Read {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}:{column}: {message}")]
    Parse {
        path: String,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

/// Parses a configuration file; errors carry `path:line:column`.
pub fn load(path: &Path) -> Result<RunConfig, ConfigError> {
    read_json(path)
}

/// Reads any JSON document with line-anchored errors.
pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
        path: path.display().to_string(),
        source,
    })?;
    parse_json(&text, &path.display().to_string())
}

#[cfg(test)]
fn parse(text: &str, origin: &str) -> Result<RunConfig, ConfigError> {
    parse_json(text, origin)
}

fn parse_json<T: serde::de::DeserializeOwned>(text: &str, origin: &str) -> Result<T, ConfigError> {
    serde_json::from_str(text).map_err(|e| {
        let message = e.to_string();
        // serde_json appends its own " at line L column C"
        let message = match message.rfind(" at line ") {
            Some(i) => message[..i].to_string(),
            None => message,
        };
        ConfigError::Parse {
            path: origin.to_string(),
            line: e.line(),
            column: e.column(),
            message,
        }
    })
}

/// Subcommand being configured; decides the default finals.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Solve,
    ClosedLoop,
}

impl RunConfig {
    /// Fills every variant-dependent default so the echoed file is complete.
    pub fn resolve(&mut self, command: Command) {
        let finals = *self.finals.get_or_insert(match command {
            Command::Solve => Finals::Native,
            Command::ClosedLoop => Finals::Equalized,
        });
        let (schedule, barrier) = default_schedules(self.algo);
        let schedule = self.schedule.get_or_insert(schedule);
        if finals == Finals::Equalized {
            schedule.equalize_finals();
        }
        self.barrier.get_or_insert(barrier);
    }

    /// Solver settings; call after [`RunConfig::resolve`].
    pub fn run_spec(&self) -> RunSpec {
        let (schedule, barrier) = default_schedules(self.algo);
        RunSpec {
            variant: self.algo,
            params: self.solver.clone(),
            schedule: self.schedule.clone().unwrap_or(schedule),
            barrier: self.barrier.unwrap_or(barrier),
            accel: self.accel.clone(),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| ConfigError::Invalid(m);
        self.run_spec().validate().map_err(invalid)?;
        self.tank
            .ocp
            .validate()
            .map_err(|e| invalid(e.to_string()))?;
        match (self.problem, &self.problem_file) {
            (ProblemKind::File, None) => {
                return Err(invalid("problem 'file' needs problem_file".into()))
            }
            (ProblemKind::Tank | ProblemKind::Qp, Some(_)) => {
                return Err(invalid(
                    "problem_file is only read with problem 'file'".into(),
                ))
            }
            _ => {}
        }
        if self.tank.steps == 0 {
            return Err(invalid("tank.steps must be at least 1".into()));
        }
        if self.tank.controllers.is_empty() {
            return Err(invalid("tank.controllers must not be empty".into()));
        }
        if self.tank.initial.iter().any(|h| !(*h >= 0.0)) {
            return Err(invalid("tank.initial levels must be nonnegative".into()));
        }
        if !(self.tank.plant_tolerance > 0.0) {
            return Err(invalid("tank.plant_tolerance must be positive".into()));
        }
        Ok(())
    }

    pub fn scenario(&self) -> Scenario {
        Scenario {
            model: self.tank.model,
            ocp: self.tank.ocp.clone(),
            initial: self.tank.initial,
            steps: self.tank.steps,
            plant_tolerance: self.tank.plant_tolerance,
            monolithic: self.tank.monolithic.clone(),
            solver: self.run_spec(),
            transport: self.transport,
            mode: self.mode,
            record_time: self.tank.record_time,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_is_the_default() {
        assert_eq!(parse("{}", "t").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_key_is_located() {
        let err = parse("{\n  \"algo\": \"ell\",\n  \"penalty\": 3\n}", "cfg.json").unwrap_err();
        match &err {
            ConfigError::Parse { line, message, .. } => {
                assert_eq!(*line, 3);
                assert!(message.contains("unknown field `penalty`"), "{message}");
            }
            other => panic!("{other}"),
        }
        assert!(err.to_string().starts_with("cfg.json:3:"));
    }

    #[test]
    fn nested_unknown_key_is_rejected() {
        assert!(parse(r#"{"tank": {"ocp": {"horizn": 3}}}"#, "t").is_err());
    }

    #[test]
    fn closed_loop_defaults_to_equalized_finals() {
        let mut c = RunConfig::default();
        c.resolve(Command::ClosedLoop);
        assert_eq!(c.finals, Some(Finals::Equalized));
        assert_eq!(c.run_spec(), Scenario::default().solver);
        let mut s = RunConfig::default();
        s.resolve(Command::Solve);
        assert_eq!(s.run_spec(), RunSpec::defaults(Variant::Ellada));
    }

    #[test]
    fn resolved_config_round_trips() {
        let mut c = RunConfig {
            algo: Variant::Ell,
            ..RunConfig::default()
        };
        c.resolve(Command::Solve);
        let text = serde_json::to_string_pretty(&c).unwrap();
        assert_eq!(parse(&text, "echo").unwrap(), c);
    }

    #[test]
    fn file_problem_needs_a_path() {
        let c = RunConfig {
            problem: ProblemKind::File,
            ..RunConfig::default()
        };
        assert!(c.validate().is_err());
    }
}
