//! Command-line front end: config loading, flag overrides, dispatch and
//! atomic output.
//!
//! Every command reads an optional JSON config whose keys mirror the long
//! flags (with underscores). Flags override file values, unknown keys are
//! rejected, and every output embeds the fully resolved config.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use metalinreg::bounds::{self, LinRegBoundInputs, SgdSchedule, SmoothnessConstants};
use metalinreg::estimators::{solve_drs, solve_maml};
use metalinreg::experiment::{self, DistributionSpec, GridConfig};
use metalinreg::sgd_sim::{self, Method, OracleSettings, VerifyConfig};
use metalinreg::task_model::{generate_dataset, MetaDataset, SimulationSpec};
use metalinreg::{EstimateResult, Error as CoreError};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Io(String),
    #[error("{source}")]
    Core {
        module: &'static str,
        #[source]
        source: CoreError,
    },
}

impl CliError {
    pub fn code(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Config(_) => "invalid_config",
            CliError::Io(_) => "io",
            CliError::Core { source, .. } => source.code(),
        }
    }

    pub fn module(&self) -> &'static str {
        match self {
            CliError::Core { module, .. } => module,
            _ => "cli",
        }
    }

    /// 1 usage or input error, 2 assumption violation, 3 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core { source: CoreError::AssumptionViolation(_), .. } => 2,
            CliError::Core { source, .. } if source.is_numerical() => 3,
            _ => 1,
        }
    }

    pub fn to_json(&self) -> Value {
        json!({"error": {"code": self.code(), "module": self.module(), "message": self.to_string()}})
    }
}

fn core(module: &'static str) -> impl Fn(CoreError) -> CliError {
    move |source| CliError::Core { module, source }
}

#[derive(Debug, Parser)]
#[command(name = "metalinreg", version, about = "DRS vs MAML meta linear regression: estimators, bounds and simulations")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// JSON config file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output path; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Monte Carlo win-probability grid over (M, N, alpha).
    Contour {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
        #[arg(long, value_delimiter = ',')]
        m_values: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',')]
        n_values: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',')]
        alpha_values: Option<Vec<f64>>,
        #[arg(long)]
        reps: Option<usize>,
        #[arg(long)]
        mc_tasks: Option<usize>,
        /// Dimension of the simulated task distribution.
        #[arg(long)]
        p: Option<usize>,
    },
    /// Fit both estimators to a dataset written by gen-data.
    Estimate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        alpha: Option<f64>,
    },
    /// Evaluate the sample-complexity and statistical-error bounds.
    Bounds {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        alpha: Option<f64>,
    },
    /// Run meta-training and meta-testing SGD and check the complexity bound.
    SgdVerify {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        method: Option<MethodArg>,
        #[arg(long)]
        seeds: Option<usize>,
    },
    /// One-sided Welch t-test from summary statistics.
    Welch {
        #[command(flatten)]
        common: Common,
        #[arg(long, allow_hyphen_values = true)]
        mean_a: Option<f64>,
        #[arg(long)]
        var_a: Option<f64>,
        #[arg(long)]
        n_a: Option<usize>,
        #[arg(long, allow_hyphen_values = true)]
        mean_b: Option<f64>,
        #[arg(long)]
        var_b: Option<f64>,
        #[arg(long)]
        n_b: Option<usize>,
    },
    /// Sample a meta-dataset.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        m: Option<usize>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        p: Option<usize>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Drs,
    Maml,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimateConfig {
    pub data: PathBuf,
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComplexityInputs {
    pub constants: SmoothnessConstants,
    pub lambda_drs: f64,
    pub lambda_maml: f64,
    pub schedule: SgdSchedule,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StatisticalInputs {
    /// Explicit inputs; computed from `distribution` when absent.
    #[serde(default)]
    pub inputs: Option<LinRegBoundInputs>,
    #[serde(default)]
    pub distribution: Option<DistributionSpec>,
    pub m: usize,
    pub n: usize,
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundsConfig {
    #[serde(default)]
    pub complexity: Option<ComplexityInputs>,
    #[serde(default)]
    pub statistical: Option<StatisticalInputs>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdVerifyConfig {
    pub method: Method,
    pub distribution: DistributionSpec,
    pub oracle: OracleSettings,
    pub schedule: SgdSchedule,
    #[serde(default = "yes")]
    pub optimize_rate: bool,
    #[serde(default)]
    pub theta0: Option<Vec<f64>>,
    #[serde(default = "default_seeds")]
    pub seeds: usize,
    #[serde(default)]
    pub seed: u64,
}

fn yes() -> bool {
    true
}

fn default_seeds() -> usize {
    50
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WelchConfig {
    pub mean_a: f64,
    pub var_a: f64,
    pub n_a: usize,
    pub mean_b: f64,
    pub var_b: f64,
    pub n_b: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenDataConfig {
    #[serde(default = "default_distribution")]
    pub distribution: DistributionSpec,
    pub m: usize,
    pub n: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_distribution() -> DistributionSpec {
    DistributionSpec::PaperSimulation(SimulationSpec::new(1))
}

#[derive(Debug, Clone, PartialEq)]
pub enum Params {
    Contour { grid: GridConfig, format: Format },
    Estimate(EstimateConfig),
    Bounds(BoundsConfig),
    SgdVerify(SgdVerifyConfig),
    Welch(WelchConfig),
    GenData(GenDataConfig),
}

/// Fully resolved invocation.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub command: &'static str,
    /// 0 unless set; never derived from the clock.
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub params: Params,
}

fn load_file(path: &Option<PathBuf>) -> Result<Map<String, Value>, CliError> {
    let Some(path) = path else {
        return Ok(Map::new());
    };
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("reading {}: {e}", path.display())))?;
    match serde_json::from_str(&text) {
        Ok(Value::Object(map)) => Ok(map),
        Ok(_) => Err(CliError::Config(format!("{}: config must be a JSON object", path.display()))),
        Err(e) => Err(CliError::Config(format!("{}: {e}", path.display()))),
    }
}

fn set<T: Serialize>(map: &mut Map<String, Value>, key: &str, value: Option<T>) {
    if let Some(v) = value {
        map.insert(key.to_string(), serde_json::to_value(v).expect("flag values serialize"));
    }
}

fn resolve<T: for<'de> Deserialize<'de>>(map: Map<String, Value>) -> Result<T, CliError> {
    serde_json::from_value(Value::Object(map)).map_err(|e| CliError::Config(e.to_string()))
}

fn method_name(m: MethodArg) -> &'static str {
    match m {
        MethodArg::Drs => "drs",
        MethodArg::Maml => "maml",
    }
}

/// Parses argv (program name first) and merges the config file.
pub fn parse_config<I, T>(argv: I) -> Result<RunConfig, CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(argv).map_err(|e| CliError::Usage(e.to_string()))?;
    let (command, common, params) = match cli.command {
        Command::Contour {
            common,
            format,
            m_values,
            n_values,
            alpha_values,
            reps,
            mc_tasks,
            p,
        } => {
            let mut map = load_file(&common.config)?;
            set(&mut map, "m_values", m_values);
            set(&mut map, "n_values", n_values);
            set(&mut map, "alpha_values", alpha_values);
            set(&mut map, "reps", reps);
            set(&mut map, "mc_tasks", mc_tasks);
            set(&mut map, "seed", common.seed);
            set(&mut map, "distribution", p.map(|p| DistributionSpec::PaperSimulation(SimulationSpec::new(p))));
            let grid: GridConfig = resolve(map)?;
            ("contour", common, Params::Contour { grid, format })
        }
        Command::Estimate { common, data, alpha } => {
            let mut map = load_file(&common.config)?;
            set(&mut map, "data", data);
            set(&mut map, "alpha", alpha);
            ("estimate", common, Params::Estimate(resolve(map)?))
        }
        Command::Bounds { common, alpha } => {
            let mut cfg: BoundsConfig = resolve(load_file(&common.config)?)?;
            if let Some(a) = alpha {
                if let Some(c) = cfg.complexity.as_mut() {
                    c.schedule.alpha = a;
                }
                if let Some(s) = cfg.statistical.as_mut() {
                    s.alpha = a;
                }
            }
            if cfg.complexity.is_none() && cfg.statistical.is_none() {
                return Err(CliError::Config("bounds needs a `complexity` or `statistical` block".into()));
            }
            ("bounds", common, Params::Bounds(cfg))
        }
        Command::SgdVerify { common, method, seeds } => {
            let mut map = load_file(&common.config)?;
            set(&mut map, "method", method.map(method_name));
            set(&mut map, "seeds", seeds);
            set(&mut map, "seed", common.seed);
            ("sgd-verify", common, Params::SgdVerify(resolve(map)?))
        }
        Command::Welch {
            common,
            mean_a,
            var_a,
            n_a,
            mean_b,
            var_b,
            n_b,
        } => {
            let mut map = load_file(&common.config)?;
            set(&mut map, "mean_a", mean_a);
            set(&mut map, "var_a", var_a);
            set(&mut map, "n_a", n_a);
            set(&mut map, "mean_b", mean_b);
            set(&mut map, "var_b", var_b);
            set(&mut map, "n_b", n_b);
            ("welch", common, Params::Welch(resolve(map)?))
        }
        Command::GenData { common, m, n, p } => {
            let mut map = load_file(&common.config)?;
            set(&mut map, "m", m);
            set(&mut map, "n", n);
            set(&mut map, "seed", common.seed);
            set(&mut map, "distribution", p.map(|p| DistributionSpec::PaperSimulation(SimulationSpec::new(p))));
            ("gen-data", common, Params::GenData(resolve(map)?))
        }
    };
    let seed = match &params {
        Params::Contour { grid, .. } => grid.seed,
        Params::SgdVerify(c) => c.seed,
        Params::GenData(c) => c.seed,
        _ => common.seed.unwrap_or(0),
    };
    Ok(RunConfig {
        command,
        seed,
        out: common.out,
        params,
    })
}

/// Rendered outputs of a run: the main payload and an optional sidecar
/// written next to it.
#[derive(Debug, Clone, PartialEq)]
pub struct Output {
    pub body: Vec<u8>,
    pub sidecar: Option<(String, Vec<u8>)>,
}

fn json_bytes(v: &Value) -> Vec<u8> {
    let mut s = serde_json::to_vec_pretty(v).expect("values serialize");
    s.push(b'\n');
    s
}

fn vec_of(v: &DVector<f64>) -> Vec<f64> {
    v.iter().copied().collect()
}

fn estimate_json(e: &EstimateResult) -> Value {
    json!({
        "theta_hat": vec_of(&e.theta_hat),
        "rank_deficient": e.rank_deficient,
        "min_singular_value": e.min_singular_value,
    })
}

fn run_bounds(cfg: &BoundsConfig) -> Result<Value, CliError> {
    let mut report = Map::new();
    if let Some(c) = &cfg.complexity {
        let err = core("bounds");
        c.constants.validate().map_err(&err)?;
        let s = &c.schedule;
        let (drs_tr, drs_te) = bounds::drs_complexity_constants(&c.constants, s.m, s.n);
        let (maml_tr, maml_te) = bounds::maml_complexity_constants(&c.constants, s.m, s.n, s.alpha);
        let mut block = json!({
            "drs": {
                "c_tr": drs_tr,
                "c_te": drs_te,
                "bound": bounds::drs_complexity_bound(&c.constants, c.lambda_drs, s).map_err(&err)?,
                "optimal_rate": bounds::drs_optimal_rate(&c.constants, c.lambda_drs, s),
            },
            "maml": {
                "c_tr": maml_tr,
                "c_te": maml_te,
                "bias_term": bounds::maml_bias_term(&c.constants, s),
                "bound": bounds::maml_complexity_bound(&c.constants, c.lambda_maml, s).map_err(&err)?,
                "optimal_rate": bounds::maml_optimal_rate(&c.constants, c.lambda_maml, s),
            },
        });
        if s.lr_train > 0.0 && s.lr_test > 0.0 {
            block["drs"]["bound_two_rate"] = json!(bounds::drs_complexity_bound_two_rate(&c.constants, c.lambda_drs, s).map_err(&err)?);
            block["maml"]["bound_two_rate"] =
                json!(bounds::maml_complexity_bound_two_rate(&c.constants, c.lambda_maml, s).map_err(&err)?);
        }
        report.insert("complexity".into(), block);
    }
    if let Some(st) = &cfg.statistical {
        let err = core("bounds");
        let inputs = match (&st.inputs, &st.distribution) {
            (Some(i), _) => *i,
            (None, Some(d)) => {
                let dist = d.build().map_err(&err)?;
                LinRegBoundInputs::from_finite(&dist, st.alpha).map_err(&err)?
            }
            (None, None) => return Err(CliError::Config("statistical bounds need `inputs` or `distribution`".into())),
        };
        let block = json!({
            "inputs": inputs,
            "omega_drs": bounds::omega_drs(inputs.p, st.m, inputs.delta).map_err(&err)?,
            "omega_maml": bounds::omega_maml(inputs.p, st.m, inputs.delta).map_err(&err)?,
            "drs": bounds::drs_statistical_bound(&inputs, st.m, st.n).map_err(&err)?,
            "maml": bounds::maml_statistical_bound(&inputs, st.m, st.n, st.alpha).map_err(&err)?,
        });
        report.insert("statistical".into(), block);
    }
    Ok(Value::Object(report))
}

fn run_sgd_verify(cfg: &SgdVerifyConfig) -> Result<Value, CliError> {
    let err = core("sgd_sim");
    let dist = cfg.distribution.build().map_err(&err)?;
    let dist = dist.as_finite().map_err(&err)?.clone();
    let p = dist.dim();
    let theta0 = match &cfg.theta0 {
        Some(v) => DVector::from_vec(v.clone()),
        None => DVector::zeros(p),
    };
    let report = sgd_sim::verify_complexity_bound(&VerifyConfig {
        method: cfg.method,
        dist,
        oracle: cfg.oracle,
        sched: cfg.schedule,
        optimize_rate: cfg.optimize_rate,
        theta0,
        seeds: cfg.seeds,
        seed: cfg.seed,
    })
    .map_err(&err)?;
    Ok(serde_json::to_value(report).expect("report serializes"))
}

fn read_dataset(path: &Path) -> Result<MetaDataset, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("reading {}: {e}", path.display())))?;
    let mut value: Value = serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    if let Value::Object(map) = &mut value {
        map.remove("config");
    }
    MetaDataset::from_json(&value).map_err(core("task_model"))
}

/// Runs the command and renders its output.
pub fn dispatch(cfg: &RunConfig) -> Result<Output, CliError> {
    let body = match &cfg.params {
        Params::Contour { grid, format } => {
            let result = experiment::run_grid(grid).map_err(core("experiment"))?;
            let meta = json!({"config": grid, "mc_seed": result.mc_seed, "format": format});
            return match format {
                Format::Csv => {
                    let mut buf = Vec::new();
                    experiment::write_csv(&result, &mut buf).map_err(core("experiment"))?;
                    Ok(Output {
                        body: buf,
                        sidecar: Some(("meta.json".into(), json_bytes(&meta))),
                    })
                }
                Format::Json => Ok(Output {
                    body: json_bytes(&json!({"config": grid, "mc_seed": result.mc_seed, "cells": result.cells})),
                    sidecar: None,
                }),
            };
        }
        Params::Estimate(c) => {
            let data = read_dataset(&c.data)?;
            let err = core("estimators");
            let drs = solve_drs(&data).map_err(&err)?;
            let maml = solve_maml(&data, c.alpha).map_err(&err)?;
            json!({"config": c, "drs": estimate_json(&drs), "maml": estimate_json(&maml)})
        }
        Params::Bounds(c) => {
            let mut report = run_bounds(c)?;
            report["config"] = serde_json::to_value(c).expect("config serializes");
            report
        }
        Params::SgdVerify(c) => {
            let mut report = run_sgd_verify(c)?;
            report["config"] = serde_json::to_value(c).expect("config serializes");
            report
        }
        Params::Welch(c) => {
            let r = experiment::welch_test(c.mean_a, c.var_a, c.n_a, c.mean_b, c.var_b, c.n_b)
                .map_err(core("experiment"))?;
            json!({"config": c, "t": r.t_value, "dof": r.dof, "p": r.p_greater})
        }
        Params::GenData(c) => {
            let err = core("task_model");
            let dist = c.distribution.build().map_err(&err)?;
            let data = generate_dataset(&dist, c.m, c.n, c.seed).map_err(&err)?;
            let mut v = data.to_json();
            v["config"] = serde_json::to_value(c).expect("config serializes");
            v
        }
    };
    Ok(Output {
        body: json_bytes(&body),
        sidecar: None,
    })
}

/// Writes `bytes` to `path` through a temporary file in the same directory,
/// so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let io = |e: std::io::Error| CliError::Io(format!("writing {}: {e}", path.display()));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io)?;
    tmp.write_all(bytes).map_err(io)?;
    tmp.as_file().sync_all().map_err(io)?;
    tmp.persist(path).map_err(|e| io(e.error))?;
    Ok(())
}

fn sidecar_path(out: &Path, suffix: &str) -> PathBuf {
    let mut name = out.as_os_str().to_owned();
    name.push(".");
    name.push(suffix);
    PathBuf::from(name)
}

/// Validates output paths before any work is done.
fn check_out(out: &Option<PathBuf>) -> Result<(), CliError> {
    if let Some(path) = out {
        if path.is_dir() {
            return Err(CliError::Usage(format!("--out {} is a directory", path.display())));
        }
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            if !dir.is_dir() {
                return Err(CliError::Usage(format!("output directory {} does not exist", dir.display())));
            }
        }
    }
    Ok(())
}

fn execute(cfg: &RunConfig, stdout: &mut dyn Write) -> Result<(), CliError> {
    check_out(&cfg.out)?;
    let output = dispatch(cfg)?;
    match &cfg.out {
        Some(path) => {
            // Both files are fully rendered before either is written.
            if let Some((suffix, bytes)) = &output.sidecar {
                write_atomic(&sidecar_path(path, suffix), bytes)?;
            }
            write_atomic(path, &output.body)?;
        }
        None => stdout
            .write_all(&output.body)
            .map_err(|e| CliError::Io(format!("stdout: {e}")))?,
    }
    Ok(())
}

/// Entry point shared by the binary and tests; returns the exit status.
pub fn run<I, T>(argv: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let result = parse_config(argv).and_then(|cfg| execute(&cfg, stdout));
    match result {
        Ok(()) => 0,
        Err(CliError::Usage(msg)) if is_help(&msg) => {
            let _ = stdout.write_all(msg.as_bytes());
            0
        }
        Err(e) => {
            let _ = writeln!(stderr, "{}", e.to_json());
            e.exit_code()
        }
    }
}

fn is_help(msg: &str) -> bool {
    msg.starts_with("Usage:") || msg.starts_with("DRS vs MAML") || msg.starts_with("metalinreg ")
}
