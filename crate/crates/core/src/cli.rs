//! Command-line front end.
//!
//! Parameters come from, in increasing priority: the nominal defaults, a
//! bundled preset (`--preset`), a JSON config file or preset name
//! (`--config`), and individual flags. Results go to stdout or `--output`
//! as JSON or CSV, with every number printed to 12 significant digits.
//!
//! Exit codes: 0 on success, 1 on runtime failure, 2 on invalid input, 3
//! when the command needs a stable configuration and the input has none.

use std::ffi::OsString;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;
use serde_json::{json, Value};

use crate::analysis::{self, AnalysisError, SweepParameter, ThetaMin};
use crate::model::{InflowSpec, SystemParams};
use crate::simulate::{self, SimConfig, SimError, SimState, Topology, TrajectoryWriter};
use crate::spectral::SpectralError;
use crate::stability::{self, DriftGrid, StabilityError};

/// Worker-thread cap read at start-up.
pub const THREADS_ENV: &str = "TANDEMFLUID_THREADS";

const PRESETS: [(&str, &str); 5] = [
    ("nominal", include_str!("../presets/nominal.json")),
    ("paper-split", include_str!("../presets/paper-split.json")),
    ("paper-merge", include_str!("../presets/paper-merge.json")),
    ("paper-s1", include_str!("../presets/paper-s1.json")),
    ("paper-s2", include_str!("../presets/paper-s2.json")),
];

/// Formats `x` with 12 significant digits in the shortest round-trip form.
pub fn format_number(x: f64) -> String {
    if !x.is_finite() {
        return x.to_string();
    }
    let rounded: f64 = format!("{x:.11e}").parse().unwrap_or(x);
    rounded.to_string()
}

fn round_number(x: f64) -> f64 {
    format_number(x).parse().unwrap_or(x)
}

/// Rounds every non-integer number in `v` to 12 significant digits.
pub fn round_json(v: Value) -> Value {
    match v {
        Value::Number(n) if n.is_f64() => n
            .as_f64()
            .map(|x| json!(round_number(x)))
            .unwrap_or(Value::Null),
        Value::Array(xs) => Value::Array(xs.into_iter().map(round_json).collect()),
        Value::Object(m) => Value::Object(m.into_iter().map(|(k, x)| (k, round_json(x))).collect()),
        other => other,
    }
}

/// Names of the bundled presets.
pub fn preset_names() -> Vec<&'static str> {
    PRESETS.iter().map(|(n, _)| *n).collect()
}

#[derive(Debug)]
enum CliError {
    Invalid(String),
    Infeasible(String),
    Runtime(String),
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Runtime(_) => 1,
            CliError::Invalid(_) => 2,
            CliError::Infeasible(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Invalid(m) | CliError::Infeasible(m) | CliError::Runtime(m) => m,
        }
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<StabilityError> for CliError {
    fn from(e: StabilityError) -> Self {
        match e {
            StabilityError::InvalidParams(_)
            | StabilityError::InvalidInflow(_)
            | StabilityError::MalformedGrid(_) => CliError::Invalid(e.to_string()),
            StabilityError::Indeterminate { .. } => CliError::Invalid(e.to_string()),
            StabilityError::Spectral(ref s) => spectral_kind(s, e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

fn spectral_kind(e: &SpectralError, msg: String) -> CliError {
    match e {
        SpectralError::Residual { .. } => CliError::Runtime(msg),
        SpectralError::PrerequisiteViolated { .. } | SpectralError::UnsupportedDrifts { .. } => {
            CliError::Infeasible(msg)
        }
        _ => CliError::Invalid(msg),
    }
}

impl From<SpectralError> for CliError {
    fn from(e: SpectralError) -> Self {
        let msg = e.to_string();
        spectral_kind(&e, msg)
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Stalled { .. } | SimError::Io(_) => CliError::Runtime(e.to_string()),
            _ => CliError::Invalid(e.to_string()),
        }
    }
}

impl From<AnalysisError> for CliError {
    fn from(e: AnalysisError) -> Self {
        match e {
            AnalysisError::Stability(s) => s.into(),
            AnalysisError::Spectral(s) => s.into(),
            AnalysisError::InvalidArgument(m) => CliError::Invalid(m),
            AnalysisError::Infeasible { .. } => CliError::Infeasible(e.to_string()),
            AnalysisError::Simulation(m) => CliError::Runtime(m),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum TopologyArg {
    TwoLink,
    SingleFinite,
    SingleInfinite,
    Merge,
    Split,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ParameterArg {
    DeltaU,
    LambdaMu,
    Theta,
}

#[derive(Debug, Parser)]
#[command(
    name = "tandemfluid",
    version,
    about = "Stability analysis and simulation of a two-link fluid queue with spillback"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// JSON config file, or the name of a bundled preset.
    #[arg(long, global = true)]
    config: Option<String>,
    /// Bundled preset applied before `--config`.
    #[arg(long, global = true)]
    preset: Option<String>,
    #[arg(long, global = true, value_enum, default_value = "json")]
    format: Format,
    /// Write results here instead of stdout.
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    #[arg(long, global = true)]
    v: Option<f64>,
    #[arg(long, global = true)]
    u1: Option<f64>,
    #[arg(long, global = true)]
    u2: Option<f64>,
    #[arg(long, global = true)]
    lambda: Option<f64>,
    #[arg(long, global = true)]
    mu: Option<f64>,
    #[arg(long, global = true)]
    theta: Option<f64>,
    /// Constant inflow.
    #[arg(long, global = true, allow_negative_numbers = true)]
    r: Option<f64>,
    /// Inflow in mode 1 (with `--r2`).
    #[arg(long, global = true)]
    r1: Option<f64>,
    /// Inflow in mode 2 (with `--r1`).
    #[arg(long, global = true)]
    r2: Option<f64>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    horizon: Option<f64>,
    #[arg(long, global = true)]
    warmup: Option<f64>,
    #[arg(long, global = true)]
    replications: Option<usize>,
    /// Bisection tolerance.
    #[arg(long, global = true)]
    tol: Option<f64>,
    #[arg(long, global = true)]
    v1: Option<f64>,
    #[arg(long, global = true)]
    v2: Option<f64>,
    /// Fraction of the merge inflow entering link 1.
    #[arg(long, global = true)]
    share: Option<f64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Necessary and sufficient stability verdicts at one inflow.
    Check,
    /// Monte Carlo statistics.
    Simulate {
        #[arg(long, value_enum)]
        topology: Option<TopologyArg>,
        /// Event-by-event CSV of replication 0.
        #[arg(long)]
        trajectory: Option<PathBuf>,
        /// Compare the merge inflow split with a capacity-proportional one.
        #[arg(long)]
        merge_demo: bool,
    },
    /// Upper and lower bounds on the maximum throughput.
    Throughput,
    /// Throughput bounds while one parameter varies.
    Sweep {
        #[arg(long, value_enum)]
        parameter: ParameterArg,
        #[command(flatten)]
        values: ValueList,
    },
    /// Smallest buffer with a stability certificate.
    ThetaMin {
        #[command(flatten)]
        values: ValueList,
    },
    /// Tolerable relative buffer error at each inflow.
    Resilience {
        /// Buffer size the system was designed for; defaults to theta.
        #[arg(long)]
        theta_hat: Option<f64>,
        #[command(flatten)]
        values: ValueList,
    },
    /// Invariant measure of the unbounded link, with a simulated comparison.
    Invariant {
        /// Inflow; defaults to r.
        #[arg(long)]
        f: Option<f64>,
        #[arg(long)]
        no_empirical: bool,
    },
    /// Certificate plus a grid check of its drift inequality.
    VerifyDrift {
        #[arg(long, default_value_t = 201)]
        n_q1: usize,
        #[arg(long, default_value_t = 51)]
        n_q2: usize,
        #[arg(long)]
        q1_max: Option<f64>,
    },
}

/// Values given as a comma list or as an evenly spaced range.
#[derive(Debug, Args)]
struct ValueList {
    #[arg(long, value_delimiter = ',', conflicts_with_all = ["from", "to", "steps"])]
    values: Option<Vec<f64>>,
    #[arg(long, requires_all = ["to", "steps"])]
    from: Option<f64>,
    #[arg(long)]
    to: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
}

impl ValueList {
    fn resolve(&self, fallback: Option<f64>) -> Result<Vec<f64>, CliError> {
        if let Some(v) = &self.values {
            return Ok(v.clone());
        }
        if let (Some(a), Some(b), Some(n)) = (self.from, self.to, self.steps) {
            return match n {
                0 => Err(CliError::Invalid("--steps must be >= 1".into())),
                1 => Ok(vec![a]),
                _ => Ok((0..n)
                    .map(|k| a + (b - a) * k as f64 / (n - 1) as f64)
                    .collect()),
            };
        }
        fallback.map(|x| vec![x]).ok_or_else(|| {
            CliError::Invalid("no values: pass --values, --from/--to/--steps or --r".into())
        })
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    v: Option<f64>,
    u1: Option<f64>,
    u2: Option<f64>,
    lambda: Option<f64>,
    mu: Option<f64>,
    theta: Option<f64>,
    r: Option<f64>,
    r1: Option<f64>,
    r2: Option<f64>,
    seed: Option<u64>,
    horizon: Option<f64>,
    warmup: Option<f64>,
    replications: Option<usize>,
    tol: Option<f64>,
    topology: Option<TopologyArg>,
    v1: Option<f64>,
    v2: Option<f64>,
    share: Option<f64>,
}

impl<'de> Deserialize<'de> for TopologyArg {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        TopologyArg::from_str(&s.replace('_', "-"), true).map_err(serde::de::Error::custom)
    }
}

macro_rules! overlay {
    ($dst:expr, $src:expr; $($f:ident),*) => {
        $( if $src.$f.is_some() { $dst.$f = $src.$f; } )*
    };
}

impl ConfigFile {
    fn parse(text: &str, origin: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Invalid(format!("{origin}: {e}")))
    }

    fn overlay(&mut self, o: ConfigFile) {
        if o.r.is_some() {
            self.r1 = None;
            self.r2 = None;
        }
        if o.r1.is_some() || o.r2.is_some() {
            self.r = None;
        }
        overlay!(self, o; v, u1, u2, lambda, mu, theta, r, r1, r2, seed, horizon, warmup, replications, tol, topology, v1, v2, share);
    }
}

fn preset(name: &str) -> Option<&'static str> {
    PRESETS.iter().find(|(n, _)| *n == name).map(|(_, t)| *t)
}

fn load_config(source: &str) -> Result<ConfigFile, CliError> {
    let path = Path::new(source);
    if path.is_file() {
        let text = std::fs::read_to_string(path)?;
        return ConfigFile::parse(&text, source);
    }
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or(source);
    match preset(stem) {
        Some(text) => ConfigFile::parse(text, stem),
        None => Err(CliError::Invalid(format!(
            "config '{source}' is neither a file nor a preset ({})",
            preset_names().join(", ")
        ))),
    }
}

/// Fully resolved inputs shared by the subcommands.
struct Resolved {
    params: SystemParams,
    inflow: Option<InflowSpec>,
    sim: SimConfig,
    tol: f64,
    topology: Option<TopologyArg>,
    v1: Option<f64>,
    v2: Option<f64>,
    share: Option<f64>,
}

fn resolve(c: &Common) -> Result<Resolved, CliError> {
    let mut cfg = ConfigFile::parse(preset("nominal").unwrap_or("{}"), "nominal")?;
    if let Some(name) = &c.preset {
        let text = preset(name).ok_or_else(|| {
            CliError::Invalid(format!(
                "unknown preset '{name}' ({})",
                preset_names().join(", ")
            ))
        })?;
        cfg.overlay(ConfigFile::parse(text, name)?);
    }
    if let Some(source) = &c.config {
        cfg.overlay(load_config(source)?);
    }
    cfg.overlay(ConfigFile {
        v: c.v,
        u1: c.u1,
        u2: c.u2,
        lambda: c.lambda,
        mu: c.mu,
        theta: c.theta,
        r: c.r,
        r1: c.r1,
        r2: c.r2,
        seed: c.seed,
        horizon: c.horizon,
        warmup: c.warmup,
        replications: c.replications,
        tol: c.tol,
        topology: None,
        v1: c.v1,
        v2: c.v2,
        share: c.share,
    });
    let n = SystemParams::nominal();
    let params = SystemParams {
        v: cfg.v.unwrap_or(n.v),
        u1: cfg.u1.unwrap_or(n.u1),
        u2: cfg.u2.unwrap_or(n.u2),
        lambda: cfg.lambda.unwrap_or(n.lambda),
        mu: cfg.mu.unwrap_or(n.mu),
        theta: cfg.theta.unwrap_or(n.theta),
    };
    let inflow = match (cfg.r, cfg.r1, cfg.r2) {
        (Some(r), None, None) => Some(InflowSpec::Constant(r)),
        (None, Some(r1), Some(r2)) => Some(InflowSpec::ModeResponsive { r1, r2 }),
        (None, None, None) => None,
        _ => return Err(CliError::Invalid("give either r or both r1 and r2".into())),
    };
    if let Some(i) = inflow {
        if !i.is_valid() {
            return Err(CliError::Invalid(format!(
                "inflow rates must be finite and >= 0, got {:?}",
                i.rates()
            )));
        }
    }
    let d = SimConfig::default();
    let sim = SimConfig {
        horizon: cfg.horizon.unwrap_or(d.horizon),
        seed: cfg.seed.unwrap_or(d.seed),
        warmup: cfg.warmup.unwrap_or(d.warmup),
        replications: cfg.replications.unwrap_or(d.replications),
        initial: d.initial,
    };
    Ok(Resolved {
        params,
        inflow,
        sim,
        tol: cfg.tol.unwrap_or(analysis::DEFAULT_TOL),
        topology: cfg.topology,
        v1: cfg.v1,
        v2: cfg.v2,
        share: cfg.share,
    })
}

impl Resolved {
    fn inflow(&self) -> Result<InflowSpec, CliError> {
        self.inflow
            .ok_or_else(|| CliError::Invalid("this command needs --r or --r1/--r2".into()))
    }

    fn constant_inflow(&self, what: &str) -> Result<f64, CliError> {
        match self.inflow()? {
            InflowSpec::Constant(r) => Ok(r),
            InflowSpec::ModeResponsive { .. } => Err(CliError::Invalid(format!(
                "{what} needs a constant inflow --r"
            ))),
        }
    }

    fn validate_params(&self) -> Result<(), CliError> {
        let report = self.params.validate();
        if report.is_valid() {
            Ok(())
        } else {
            Err(CliError::Invalid(format!("invalid parameters: {report}")))
        }
    }

    fn topology(&self, arg: Option<TopologyArg>) -> Result<Topology, CliError> {
        let need = |x: Option<f64>, name: &str| {
            x.ok_or_else(|| CliError::Invalid(format!("topology needs {name}")))
        };
        Ok(
            match arg.or(self.topology).unwrap_or(TopologyArg::TwoLink) {
                TopologyArg::TwoLink => Topology::TwoLink,
                TopologyArg::SingleFinite => Topology::SingleFinite,
                TopologyArg::SingleInfinite => Topology::SingleInfinite,
                TopologyArg::Merge => Topology::Merge {
                    v1: need(self.v1, "v1")?,
                    v2: need(self.v2, "v2")?,
                    share: need(self.share, "share")?,
                },
                TopologyArg::Split => Topology::Split {
                    v1: need(self.v1, "v1")?,
                    v2: need(self.v2, "v2")?,
                },
            },
        )
    }
}

/// A result ready for printing in either format.
struct Report {
    json: Value,
    header: Vec<&'static str>,
    rows: Vec<Vec<String>>,
    /// Set when the command computed a result but the input failed a
    /// requirement.
    failure: Option<CliError>,
}

impl Report {
    fn new(json: Value, header: Vec<&'static str>, rows: Vec<Vec<String>>) -> Self {
        Report {
            json,
            header,
            rows,
            failure: None,
        }
    }
}

fn cell(x: f64) -> String {
    format_number(x)
}

fn opt_cell(x: Option<f64>) -> String {
    x.map(cell).unwrap_or_default()
}

fn to_json<T: serde::Serialize>(x: &T) -> Result<Value, CliError> {
    serde_json::to_value(x).map_err(|e| CliError::Runtime(e.to_string()))
}

fn cmd_check(res: &Resolved) -> Result<Report, CliError> {
    res.validate_params()?;
    let inflow = res.inflow()?;
    let p = &res.params;
    let [r1, r2] = inflow.rates();
    let necessary = match inflow {
        InflowSpec::Constant(r) => stability::check_necessary(r, p)?,
        InflowSpec::ModeResponsive { r1, r2 } => stability::check_necessary_feedback(r1, r2, p)?,
    };
    let cert = match inflow {
        InflowSpec::Constant(r) => stability::check_sufficient(r, p)?,
        InflowSpec::ModeResponsive { r1, r2 } => stability::check_sufficient_feedback(r1, r2, p)?,
    };
    let drift = match &cert {
        Some(c) => Some(stability::verify_drift(c, inflow, p, DriftGrid::default())?),
        None => None,
    };
    let json = json!({
        "params": to_json(p)?,
        "inflow": {"r1": r1, "r2": r2},
        "necessary": to_json(&necessary)?,
        "sufficient": {
            "holds": cert.is_some(),
            "certificate": to_json(&cert)?,
            "drift_passes": drift.as_ref().map(|d| d.passes),
            "drift_max_margin": drift.as_ref().map(|d| d.max_margin),
        },
    });
    let cv = cert.map(|c| c.as_vector());
    let comp = |k: usize| opt_cell(cv.map(|v| v[k]));
    let row = vec![
        cell(r1),
        cell(r2),
        necessary.prerequisite_ok.to_string(),
        opt_cell(necessary.p_hat),
        cell(necessary.lhs),
        opt_cell(necessary.rhs),
        necessary.holds.to_string(),
        cert.is_some().to_string(),
        comp(0),
        comp(1),
        comp(2),
        comp(3),
        comp(4),
        comp(5),
        opt_cell(cert.map(|c| c.queue_bound)),
    ];
    Ok(Report::new(
        json,
        vec![
            "r1",
            "r2",
            "prerequisite_ok",
            "p_hat",
            "lhs",
            "rhs",
            "necessary_holds",
            "sufficient_holds",
            "a1",
            "a2",
            "b1",
            "b2",
            "c",
            "d",
            "queue_bound",
        ],
        vec![row],
    ))
}

const SIM_HEADER: [&str; 17] = [
    "label",
    "topology",
    "replications",
    "horizon",
    "warmup",
    "time_avg_total_queue",
    "frac_time_q2_full",
    "frac_time_q1_zero",
    "frac_time_mode1",
    "frac_time_mode2",
    "terminal_q_over_t",
    "mean_throughput",
    "se_time_avg_total_queue",
    "se_frac_time_q2_full",
    "se_frac_time_q1_zero",
    "se_terminal_q_over_t",
    "se_mean_throughput",
];

fn sim_row(label: &str, s: &simulate::SimStats) -> Vec<String> {
    let se = s.std_errors;
    vec![
        label.to_string(),
        s.topology.to_string(),
        s.replications.to_string(),
        cell(s.horizon),
        cell(s.warmup),
        cell(s.time_avg_total_queue),
        cell(s.frac_time_q2_full),
        cell(s.frac_time_q1_zero),
        cell(s.frac_time_mode[0]),
        cell(s.frac_time_mode[1]),
        cell(s.terminal_q_over_t),
        cell(s.mean_throughput),
        opt_cell(se.map(|e| e.time_avg_total_queue)),
        opt_cell(se.map(|e| e.frac_time_q2_full)),
        opt_cell(se.map(|e| e.frac_time_q1_zero)),
        opt_cell(se.map(|e| e.terminal_q_over_t)),
        opt_cell(se.map(|e| e.mean_throughput)),
    ]
}

fn cmd_simulate(
    res: &Resolved,
    topology: Option<TopologyArg>,
    trajectory: Option<&Path>,
    merge_demo: bool,
) -> Result<Report, CliError> {
    let inflow = res.inflow()?;
    let topo = res.topology(topology)?;
    let p = &res.params;
    if merge_demo {
        let Topology::Merge { v1, v2, share } = topo else {
            return Err(CliError::Invalid(
                "--merge-demo needs the merge topology".into(),
            ));
        };
        let total = res.constant_inflow("--merge-demo")?;
        let demo = simulate::simulate_merge_stability_demo(
            total,
            (share * total, (1.0 - share) * total),
            v1,
            v2,
            p,
            &res.sim,
        )?;
        let rows = vec![
            sim_row("original", &demo.original),
            sim_row("redistributed", &demo.redistributed),
        ];
        return Ok(Report::new(to_json(&demo)?, SIM_HEADER.to_vec(), rows));
    }
    let stats = simulate::simulate(&topo, inflow, p, &res.sim)?;
    if let Some(path) = trajectory {
        let file = BufWriter::new(File::create(path)?);
        let mut writer = TrajectoryWriter::new(file, topo.queues())?;
        let rep = simulate::simulate_replication(&topo, inflow, p, &res.sim, 0, &mut writer)?;
        let flows = topo.flows(rep.final_mode, rep.q_final, inflow.rate(rep.final_mode), p);
        let end = SimState {
            t: res.sim.horizon,
            mode: rep.final_mode,
            q: rep.q_final,
        };
        writer.finish(Some(&end), Some(&flows))?;
    }
    let row = sim_row("run", &stats);
    Ok(Report::new(
        to_json(&stats)?,
        SIM_HEADER.to_vec(),
        vec![row],
    ))
}

fn cmd_throughput(res: &Resolved) -> Result<Report, CliError> {
    res.validate_params()?;
    let p = &res.params;
    let upper = analysis::throughput_upper_bound_detail(p, res.tol)?;
    let lower = analysis::throughput_lower_bound_detail(p, res.tol)?;
    let json = json!({
        "params": to_json(p)?,
        "upper": upper.value,
        "lower": lower.value,
        "tol": res.tol,
        "upper_search": to_json(&upper)?,
        "lower_search": to_json(&lower)?,
    });
    let row = vec![cell(upper.value), cell(lower.value), cell(res.tol)];
    Ok(Report::new(json, vec!["upper", "lower", "tol"], vec![row]))
}

fn cmd_sweep(
    res: &Resolved,
    parameter: ParameterArg,
    values: &ValueList,
) -> Result<Report, CliError> {
    res.validate_params()?;
    let param = match parameter {
        ParameterArg::DeltaU => SweepParameter::DeltaU,
        ParameterArg::LambdaMu => SweepParameter::LambdaMu,
        ParameterArg::Theta => SweepParameter::Theta,
    };
    let rows = analysis::sweep(&res.params, param, &values.resolve(None)?, res.tol)?;
    let table = rows
        .iter()
        .map(|r| {
            vec![
                r.parameter.to_string(),
                cell(r.value),
                cell(r.upper),
                cell(r.lower),
            ]
        })
        .collect();
    Ok(Report::new(
        json!({"params": to_json(&res.params)?, "tol": res.tol, "rows": to_json(&rows)?}),
        vec!["parameter", "value", "upper", "lower"],
        table,
    ))
}

fn cmd_theta_min(res: &Resolved, values: &ValueList) -> Result<Report, CliError> {
    res.validate_params()?;
    let fallback = res.inflow.and_then(|i| match i {
        InflowSpec::Constant(r) => Some(r),
        _ => None,
    });
    let rs = values.resolve(fallback)?;
    let mut rows = Vec::with_capacity(rs.len());
    let mut out = Vec::with_capacity(rs.len());
    for &r in &rs {
        let tm = analysis::theta_min(r, &res.params, res.tol)?;
        rows.push(vec![cell(r), opt_cell(tm.value())]);
        out.push(
            json!({"r": r, "theta_min": tm.value(), "within_cap": tm != ThetaMin::NoneWithinCap}),
        );
    }
    Ok(Report::new(
        json!({"params": to_json(&res.params)?, "tol": res.tol, "theta_cap": analysis::THETA_CAP, "rows": out}),
        vec!["r", "theta_min"],
        rows,
    ))
}

fn cmd_resilience(
    res: &Resolved,
    theta_hat: Option<f64>,
    values: &ValueList,
) -> Result<Report, CliError> {
    res.validate_params()?;
    let fallback = res.inflow.and_then(|i| match i {
        InflowSpec::Constant(r) => Some(r),
        _ => None,
    });
    let theta_hat = theta_hat.unwrap_or(res.params.theta);
    let curve =
        analysis::resilience_curve(&values.resolve(fallback)?, theta_hat, &res.params, res.tol)?;
    let rows = curve
        .iter()
        .map(|c| {
            vec![
                cell(c.r_hat),
                cell(c.theta_hat),
                opt_cell(c.theta_min.value()),
                opt_cell(c.alpha),
                opt_cell(c.alpha_raw),
            ]
        })
        .collect();
    let out: Vec<Value> = curve
        .iter()
        .map(|c| {
            json!({
                "r_hat": c.r_hat,
                "theta_hat": c.theta_hat,
                "theta_min": c.theta_min.value(),
                "alpha": c.alpha,
                "alpha_raw": c.alpha_raw,
            })
        })
        .collect();
    Ok(Report::new(
        json!({"params": to_json(&res.params)?, "tol": res.tol, "rows": out}),
        vec!["r_hat", "theta_hat", "theta_min", "alpha", "alpha_raw"],
        rows,
    ))
}

fn cmd_invariant(res: &Resolved, f: Option<f64>, no_empirical: bool) -> Result<Report, CliError> {
    let f = match f {
        Some(f) => f,
        None => res.constant_inflow("invariant")?,
    };
    let p = &res.params;
    if !crate::spectral::bpdq_is_stable(f, p) {
        return Err(CliError::Infeasible(format!(
            "inflow {f} is not below the mean capacity {}; no invariant measure",
            p.mean_capacity()
        )));
    }
    let (m, empirical) = if no_empirical {
        (crate::spectral::bpdq_invariant_measure(f, p)?, None)
    } else {
        let chk = analysis::bpdq_empirical_check(f, p, res.sim.horizon, res.sim.seed)?;
        (chk.measure, Some(chk))
    };
    let json = json!({
        "f": f,
        "params": to_json(p)?,
        "measure": to_json(&m)?,
        "total_mass": m.total_mass(),
        "mean": m.mean(),
        "empirical": empirical.map(|c| json!({
            "horizon": c.horizon,
            "seed": res.sim.seed,
            "atom": c.empirical_atom,
            "ks_distance": c.ks_distance,
        })),
    });
    let row = vec![
        cell(f),
        cell(m.z1),
        cell(m.a1),
        cell(m.a2),
        cell(m.s),
        cell(m.total_mass()),
        cell(m.mean()),
        opt_cell(empirical.map(|c| c.empirical_atom)),
        opt_cell(empirical.map(|c| c.ks_distance)),
    ];
    Ok(Report::new(
        json,
        vec![
            "f",
            "z1",
            "a1",
            "a2",
            "s",
            "total_mass",
            "mean",
            "empirical_atom",
            "ks_distance",
        ],
        vec![row],
    ))
}

fn cmd_verify_drift(res: &Resolved, grid: DriftGrid) -> Result<Report, CliError> {
    res.validate_params()?;
    let inflow = res.inflow()?;
    let p = &res.params;
    let cert = match inflow {
        InflowSpec::Constant(r) => stability::check_sufficient(r, p)?,
        InflowSpec::ModeResponsive { r1, r2 } => stability::check_sufficient_feedback(r1, r2, p)?,
    };
    let Some(cert) = cert else {
        return Err(CliError::Infeasible(format!(
            "no stability certificate exists at inflow {:?}",
            inflow.rates()
        )));
    };
    let report = stability::verify_drift(&cert, inflow, p, grid)?;
    let rows = report
        .cases
        .iter()
        .map(|c| {
            let w = c.worst;
            vec![
                format!("{:?}", c.case),
                w.map(|w| w.mode.number().to_string()).unwrap_or_default(),
                opt_cell(w.map(|w| w.q1)),
                opt_cell(w.map(|w| w.q2)),
                opt_cell(w.map(|w| w.margin)),
            ]
        })
        .collect();
    let json = json!({
        "params": to_json(p)?,
        "inflow": inflow.rates(),
        "certificate": to_json(&cert)?,
        "tolerance": stability::DRIFT_TOL,
        "report": to_json(&report)?,
    });
    let mut out = Report::new(json, vec!["case", "mode", "q1", "q2", "margin"], rows);
    if !report.passes {
        out.failure = Some(CliError::Infeasible(format!(
            "drift margin {} exceeds {}",
            report.max_margin,
            stability::DRIFT_TOL
        )));
    }
    Ok(out)
}

fn render(report: &Report, format: Format) -> String {
    match format {
        Format::Json => {
            let v = round_json(report.json.clone());
            let mut s = serde_json::to_string_pretty(&v).unwrap_or_default();
            s.push('\n');
            s
        }
        Format::Csv => {
            let mut s = report.header.join(",");
            s.push('\n');
            for row in &report.rows {
                s.push_str(&row.join(","));
                s.push('\n');
            }
            s
        }
    }
}

fn dispatch(cli: &Cli) -> Result<Option<CliError>, CliError> {
    let res = resolve(&cli.common)?;
    let report = match &cli.command {
        Command::Check => cmd_check(&res)?,
        Command::Simulate {
            topology,
            trajectory,
            merge_demo,
        } => cmd_simulate(&res, *topology, trajectory.as_deref(), *merge_demo)?,
        Command::Throughput => cmd_throughput(&res)?,
        Command::Sweep { parameter, values } => cmd_sweep(&res, *parameter, values)?,
        Command::ThetaMin { values } => cmd_theta_min(&res, values)?,
        Command::Resilience { theta_hat, values } => cmd_resilience(&res, *theta_hat, values)?,
        Command::Invariant { f, no_empirical } => cmd_invariant(&res, *f, *no_empirical)?,
        Command::VerifyDrift { n_q1, n_q2, q1_max } => cmd_verify_drift(
            &res,
            DriftGrid {
                n_q1: *n_q1,
                n_q2: *n_q2,
                q1_max: *q1_max,
            },
        )?,
    };
    let text = render(&report, cli.common.format);
    match &cli.common.output {
        Some(path) => std::fs::write(path, text)?,
        None => io::stdout().lock().write_all(text.as_bytes())?,
    }
    Ok(report.failure)
}

fn thread_cap() -> Result<Option<usize>, CliError> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(None),
        Ok(s) => match s.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(CliError::Invalid(format!(
                "{THREADS_ENV} must be a positive integer, got '{s}'"
            ))),
        },
    }
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let outcome = thread_cap().and_then(|cap| match cap {
        None => dispatch(&cli),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| CliError::Runtime(e.to_string()))?
            .install(|| dispatch(&cli)),
    });
    match outcome {
        Ok(None) => 0,
        Ok(Some(e)) | Err(e) => {
            eprintln!("error: {}", e.message());
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numbers_keep_twelve_significant_digits() {
        assert_eq!(format_number(0.1 + 0.2), "0.3");
        assert_eq!(format_number(1.0 / 3.0), "0.333333333333");
        assert_eq!(format_number(123_456_789.123_456_79), "123456789.123");
        assert_eq!(format_number(2.0), "2");
        assert_eq!(format_number(-1.5e-20), "-0.000000000000000000015");
        assert_eq!(format_number(f64::NAN), "NaN");
    }

    #[test]
    fn json_rounding_leaves_integers_alone() {
        let v = round_json(json!({"a": [1.0 / 3.0, 7], "b": {"c": 2.0f64.sqrt()}}));
        assert_eq!(v["a"][1], json!(7));
        assert_eq!(v["a"][0].as_f64().unwrap().to_string(), "0.333333333333");
        assert_eq!(v["b"]["c"].as_f64().unwrap().to_string(), "1.41421356237");
    }

    #[test]
    fn presets_parse_and_validate() {
        for name in preset_names() {
            let cfg = ConfigFile::parse(preset(name).unwrap(), name).unwrap();
            assert!(cfg.theta.is_some(), "{name}");
        }
    }

    #[test]
    fn flags_override_config_and_clear_the_other_inflow_form() {
        let cli =
            Cli::try_parse_from(["x", "--preset", "paper-s2", "--r", "0.6", "check"]).unwrap();
        let res = resolve(&cli.common).unwrap();
        assert_eq!(res.inflow, Some(InflowSpec::Constant(0.6)));
        let cli =
            Cli::try_parse_from(["x", "--preset", "paper-s1", "--theta", "2", "check"]).unwrap();
        let res = resolve(&cli.common).unwrap();
        assert_eq!(res.inflow, Some(InflowSpec::Constant(0.625)));
        assert_eq!(res.params.theta, 2.0);
    }

    #[test]
    fn config_accepts_preset_file_names() {
        assert!(load_config("nominal.json").is_ok());
        assert!(matches!(
            load_config("no-such-thing"),
            Err(CliError::Invalid(_))
        ));
    }

    #[test]
    fn partial_feedback_inflow_is_rejected() {
        let cli = Cli::try_parse_from(["x", "--r1", "0.7", "check"]).unwrap();
        assert!(matches!(resolve(&cli.common), Err(CliError::Invalid(_))));
    }

    #[test]
    fn value_ranges_include_both_ends() {
        let v = ValueList {
            values: None,
            from: Some(0.0),
            to: Some(1.0),
            steps: Some(5),
        };
        assert_eq!(v.resolve(None).unwrap(), vec![0.0, 0.25, 0.5, 0.75, 1.0]);
    }
}
