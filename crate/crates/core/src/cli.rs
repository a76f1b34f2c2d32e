//! Scenario files, the `run` and `verify` commands and their output files.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::controllers::{ControllerKind, ControllerSpec};
use crate::error::{Error, Result};
use crate::integrate::HorizonGrid;
use crate::models::{Aircraft, AircraftParams, DoubleIntegrator, DoubleIntegratorParams};
use crate::sim::{compare_controllers, Comparison, Metrics, SimConfig, TrajectoryLog};
use crate::system::Scenario;
use crate::verify::{run_suite, CheckResult, Suite};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VERIFY_FAILED: i32 = 1;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

/// Environment variable that overrides the configured random seed.
pub const SEED_ENV: &str = "SAFETY_SEED";
pub const DEFAULT_SEED: u64 = 20_240_601;

#[derive(Debug, Parser)]
#[command(name = "oi-safety", version, about = "Backup-CBF safety controllers: simulation and verification")]
pub struct Cli {
    /// Directory for output files (overrides the scenario file).
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    /// Suppress progress output on standard output.
    #[arg(long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate the scenario described by a JSON file.
    Run { config: PathBuf },
    /// Run a property suite: kkt, oracle, sensitivity, invariance or all.
    Verify { suite: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioName {
    DoubleIntegrator,
    Aircraft,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ControllerField {
    One(ControllerKind),
    Many(Vec<ControllerKind>),
}

impl ControllerField {
    pub fn kinds(&self) -> Vec<ControllerKind> {
        match self {
            ControllerField::One(k) => vec![*k],
            ControllerField::Many(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HorizonSection {
    #[serde(rename = "T")]
    pub t: f64,
    #[serde(rename = "N")]
    pub n: usize,
    pub dt_int: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSection {
    pub t_final: f64,
    pub dt_ctrl: f64,
    pub dt_plant: f64,
    pub x0: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlendingSection {
    pub eta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlphaSection {
    pub alpha: f64,
    pub alpha_b: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default)]
    pub dir: Option<PathBuf>,
    /// File name prefix; defaults to the scenario file stem.
    #[serde(default)]
    pub prefix: Option<String>,
}

/// Top-level scenario file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub scenario: ScenarioName,
    /// Model parameters; fields not given take their defaults.
    #[serde(default)]
    pub model: Option<serde_json::Value>,
    pub controller: ControllerField,
    pub horizon: HorizonSection,
    pub sim: SimSection,
    #[serde(default)]
    pub blending: Option<BlendingSection>,
    /// Overrides the class-K gains of the model section.
    #[serde(default)]
    pub alpha: Option<AlphaSection>,
    #[serde(default)]
    pub output: Option<OutputSection>,
    #[serde(default)]
    pub seed: Option<u64>,
}

/// A validated plant.
#[derive(Debug, Clone)]
pub enum Plant {
    DoubleIntegrator(DoubleIntegrator),
    Aircraft(Aircraft),
}

impl Plant {
    pub fn as_scenario(&self) -> &dyn Scenario {
        match self {
            Plant::DoubleIntegrator(m) => m,
            Plant::Aircraft(m) => m,
        }
    }
}

/// A scenario file after validation.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub plant: Plant,
    pub runs: Vec<(String, SimConfig)>,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub prefix: String,
}

fn from_model_section<T: serde::de::DeserializeOwned + Default>(v: &Option<serde_json::Value>) -> Result<T> {
    match v {
        None => Ok(T::default()),
        Some(v) => serde_json::from_value(v.clone()).map_err(|e| Error::invalid(format!("model section: {e}"))),
    }
}

impl ScenarioFile {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::invalid(format!("scenario file: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            fs::read_to_string(path).map_err(|e| Error::invalid(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn build_plant(&self) -> Result<Plant> {
        Ok(match self.scenario {
            ScenarioName::DoubleIntegrator => {
                let mut p: DoubleIntegratorParams = from_model_section(&self.model)?;
                if let Some(a) = &self.alpha {
                    p.alpha = a.alpha;
                    p.alpha_b = a.alpha_b;
                }
                Plant::DoubleIntegrator(DoubleIntegrator::new(p)?)
            }
            ScenarioName::Aircraft => {
                let mut p: AircraftParams = from_model_section(&self.model)?;
                if let Some(a) = &self.alpha {
                    p.alpha = a.alpha;
                    p.alpha_b = a.alpha_b;
                }
                Plant::Aircraft(Aircraft::new(p)?)
            }
        })
    }

    /// Validate everything and build the simulation runs. `default_prefix`
    /// is used when the file names none.
    pub fn prepare(&self, default_prefix: &str, out_dir: Option<&Path>) -> Result<Prepared> {
        let plant = self.build_plant()?;
        let model = plant.as_scenario();
        let grid = HorizonGrid::new(self.horizon.t, self.horizon.n, self.horizon.dt_int)?;
        let kinds = self.controller.kinds();
        if kinds.is_empty() {
            return Err(Error::invalid("controller list is empty"));
        }
        for (i, k) in kinds.iter().enumerate() {
            if kinds[..i].contains(k) {
                return Err(Error::invalid(format!("controller '{k}' listed twice")));
            }
        }
        let eta = match (&self.blending, kinds.contains(&ControllerKind::Blended)) {
            (Some(b), _) => b.eta,
            (None, true) => return Err(Error::invalid("the blended controller needs a blending section")),
            (None, false) => 1.0,
        };
        if !(eta.is_finite() && eta > 0.0) {
            return Err(Error::invalid(format!("blending eta must be > 0, got {eta}")));
        }
        if self.sim.x0.len() != model.state_dim() {
            return Err(Error::invalid(format!(
                "x0 has {} entries, the {} model has {}",
                self.sim.x0.len(),
                model.name(),
                model.state_dim()
            )));
        }
        if self.sim.x0.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("x0 must be finite"));
        }
        let runs: Vec<(String, SimConfig)> = kinds
            .iter()
            .map(|&kind| {
                (
                    kind.to_string(),
                    SimConfig {
                        t_final: self.sim.t_final,
                        dt_ctrl: self.sim.dt_ctrl,
                        dt_plant: self.sim.dt_plant,
                        x0: DVector::from_vec(self.sim.x0.clone()),
                        controller: ControllerSpec { kind, grid, eta },
                    },
                )
            })
            .collect();
        runs[0].1.steps()?;
        let output = self.output.clone().unwrap_or(OutputSection { dir: None, prefix: None });
        let out_dir = out_dir.map(Path::to_path_buf).or(output.dir).unwrap_or_else(|| PathBuf::from("."));
        let prefix = output.prefix.unwrap_or_else(|| default_prefix.to_string());
        if prefix.is_empty() || prefix.contains(['/', '\\']) {
            return Err(Error::invalid(format!("invalid output prefix '{prefix}'")));
        }
        Ok(Prepared { plant, runs, seed: resolve_seed(self.seed), out_dir, prefix })
    }
}

/// `SAFETY_SEED` if set and valid, else the configured seed, else the default.
pub fn resolve_seed(configured: Option<u64>) -> u64 {
    std::env::var(SEED_ENV).ok().and_then(|s| s.trim().parse().ok()).or(configured).unwrap_or(DEFAULT_SEED)
}

/// Scientific notation with 17 significant digits, locale independent.
pub fn fmt_real(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else if v.is_nan() {
        "nan".into()
    } else if v > 0.0 {
        "inf".into()
    } else {
        "-inf".into()
    }
}

pub fn csv_header(n: usize, m: usize) -> String {
    let mut cols = vec!["t".to_string()];
    cols.extend((0..n).map(|i| format!("x{i}")));
    cols.extend((0..m).map(|j| format!("u{j}")));
    cols.extend(["mu", "h", "h_b", "h_I", "binding_index", "status", "step_wall_us"].map(String::from));
    cols.join(",")
}

/// Render a trajectory as CSV. Missing values are empty fields.
pub fn log_to_csv(log: &TrajectoryLog, n: usize, m: usize) -> String {
    let mut out = csv_header(n, m);
    out.push('\n');
    let opt = |v: Option<f64>| v.map(fmt_real).unwrap_or_default();
    for r in &log.rows {
        let mut fields = vec![fmt_real(r.t)];
        fields.extend(r.x.iter().map(|v| fmt_real(*v)));
        fields.extend(r.u.iter().map(|v| fmt_real(*v)));
        fields.push(opt(r.mu));
        fields.push(fmt_real(r.h));
        fields.push(fmt_real(r.h_b));
        fields.push(opt(r.h_i));
        fields.push(r.binding_index.map(|b| b.to_string()).unwrap_or_default());
        fields.push(r.status.as_str().to_string());
        fields.push(fmt_real(r.step_wall_us));
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}

/// Write `contents` to `path` through a temporary file in the same
/// directory and a rename.
pub fn write_atomic(path: &Path, contents: &[u8]) -> std::io::Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp.{}", std::process::id()));
    fs::write(&tmp, contents)?;
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })
}

#[derive(Debug, Serialize)]
struct Summary<'a> {
    scenario: &'a str,
    controller: &'a str,
    metrics: &'a Metrics,
    error: Option<String>,
}

/// Result of a `run` command.
#[derive(Debug)]
pub struct RunOutcome {
    pub exit_code: i32,
    pub files: Vec<PathBuf>,
    pub messages: Vec<String>,
}

/// Execute a prepared scenario and write its output files.
pub fn execute(prepared: &Prepared) -> Result<RunOutcome> {
    let model = prepared.plant.as_scenario();
    let (n, m) = (model.state_dim(), model.input_dim());
    fs::create_dir_all(&prepared.out_dir)
        .map_err(|e| Error::invalid(format!("cannot create {}: {e}", prepared.out_dir.display())))?;
    let io = |e: std::io::Error| Error::invalid(format!("write failed: {e}"));
    let mut files = Vec::new();
    let mut messages = Vec::new();
    let (comparison, logs): (Comparison, Vec<(String, TrajectoryLog)>) = compare_controllers(model, &prepared.runs)?;
    for (name, log) in &logs {
        let path = prepared.out_dir.join(format!("{}_{name}.csv", prepared.prefix));
        write_atomic(&path, log_to_csv(log, n, m).as_bytes()).map_err(io)?;
        files.push(path);
    }
    let aborted: Vec<&str> = comparison.runs.iter().filter_map(|r| r.error.as_deref()).collect();
    if logs.len() == 1 {
        let run = &comparison.runs[0];
        let summary = Summary {
            scenario: model.name(),
            controller: &run.controller,
            metrics: &run.metrics,
            error: run.error.clone(),
        };
        let path = prepared.out_dir.join(format!("{}_summary.json", prepared.prefix));
        let text = serde_json::to_string_pretty(&summary).map_err(|e| Error::Numerical(e.to_string()))?;
        write_atomic(&path, text.as_bytes()).map_err(io)?;
        files.push(path);
    } else {
        let path = prepared.out_dir.join(format!("{}_comparison.json", prepared.prefix));
        let text = serde_json::to_string_pretty(&comparison).map_err(|e| Error::Numerical(e.to_string()))?;
        write_atomic(&path, text.as_bytes()).map_err(io)?;
        files.push(path);
    }
    for r in &comparison.runs {
        let mut line = String::new();
        let _ = write!(
            line,
            "{:<8} rows={} min_h={:.6e} input_violations={} reversals={:?} mu_switches={} ode_dim={}",
            r.name,
            r.metrics.rows,
            r.metrics.min_h,
            r.metrics.input_violations,
            r.metrics.u_sign_reversals_after_contact,
            r.metrics.mu_switch_count,
            r.metrics.ode_dim
        );
        if let Some(e) = &r.error {
            let _ = write!(line, " ABORTED: {e}");
        }
        messages.push(line);
    }
    let exit_code = if aborted.is_empty() { EXIT_OK } else { EXIT_NUMERICAL };
    Ok(RunOutcome { exit_code, files, messages })
}

/// Format a pass/fail table.
pub fn format_checks(results: &[CheckResult]) -> String {
    let width = results.iter().map(|r| r.name.len()).max().unwrap_or(0);
    let mut out = String::new();
    for r in results {
        let _ = writeln!(out, "{} {:<width$}  {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
    }
    out
}

/// Entry point shared by the binary; returns the process exit code.
pub fn main_with(cli: Cli) -> i32 {
    match cli.command {
        Command::Run { config } => {
            let stem = config.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "run".into());
            let prepared = match ScenarioFile::load(&config).and_then(|f| f.prepare(&stem, cli.out_dir.as_deref())) {
                Ok(p) => p,
                Err(e) => {
                    eprintln!("error: {e}");
                    return EXIT_VALIDATION;
                }
            };
            match execute(&prepared) {
                Ok(outcome) => {
                    if !cli.quiet {
                        for m in &outcome.messages {
                            println!("{m}");
                        }
                        for f in &outcome.files {
                            println!("wrote {}", f.display());
                        }
                    }
                    if outcome.exit_code != EXIT_OK {
                        eprintln!("error: at least one simulation aborted");
                    }
                    outcome.exit_code
                }
                Err(e @ Error::InvalidInput(_)) => {
                    eprintln!("error: {e}");
                    EXIT_VALIDATION
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    EXIT_NUMERICAL
                }
            }
        }
        Command::Verify { suite } => {
            let suite: Suite = match suite.parse() {
                Ok(s) => s,
                Err(e) => {
                    eprintln!("error: {e}");
                    return EXIT_VALIDATION;
                }
            };
            let seed = resolve_seed(None);
            let results = run_suite(suite, seed);
            if !cli.quiet {
                println!("seed {seed}");
                print!("{}", format_checks(&results));
            }
            if results.iter().all(|r| r.passed) {
                EXIT_OK
            } else {
                if cli.quiet {
                    eprint!("{}", format_checks(&results));
                }
                EXIT_VERIFY_FAILED
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const DI: &str = r#"{
        "scenario": "double_integrator",
        "controller": "oi",
        "horizon": {"T": 2.0, "N": 20, "dt_int": 0.01},
        "sim": {"t_final": 0.1, "dt_ctrl": 0.01, "dt_plant": 0.005, "x0": [-1.0, 0.0]}
    }"#;

    #[test]
    fn parses_single_and_list_controllers() {
        let f = ScenarioFile::from_json(DI).unwrap();
        assert_eq!(f.controller.kinds(), vec![ControllerKind::Oi]);
        let g = ScenarioFile::from_json(&DI.replace("\"oi\"", "[\"oi\", \"bcbf_qp\"]")).unwrap();
        assert_eq!(g.controller.kinds(), vec![ControllerKind::Oi, ControllerKind::BcbfQp]);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(
            ScenarioFile::from_json(&DI.replace("\"seed\"", "x").replace("\"controller\"", "\"controler\"")).is_err()
        );
        let f = ScenarioFile::from_json(&DI.replace("\"T\": 2.0", "\"T\": -2.0")).unwrap();
        assert!(f.prepare("x", None).is_err());
        let f = ScenarioFile::from_json(&DI.replace("[-1.0, 0.0]", "[-1.0]")).unwrap();
        assert!(f.prepare("x", None).is_err());
        let f = ScenarioFile::from_json(&DI.replace("\"oi\"", "\"blended\"")).unwrap();
        assert!(f.prepare("x", None).is_err());
        let bad_model = DI.replace("\"controller\"", "\"model\": {\"kapa\": 3.0}, \"controller\"");
        let f = ScenarioFile::from_json(&bad_model).unwrap();
        assert!(f.prepare("x", None).is_err());
    }

    #[test]
    fn csv_layout() {
        assert_eq!(csv_header(2, 1), "t,x0,x1,u0,mu,h,h_b,h_I,binding_index,status,step_wall_us");
        assert_eq!(fmt_real(0.1), "1.0000000000000001e-1");
        assert_eq!(fmt_real(-2.0), "-2.0000000000000000e0");
        assert_eq!("1.0000000000000001e-1".parse::<f64>().unwrap(), 0.1);
    }
}
