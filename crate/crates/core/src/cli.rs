//! Command-line front end.
//!
//! Every command reads an optional JSON config, applies `--set` overrides,
//! validates everything it needs, computes, and only then writes its
//! artifacts into the output directory.
//!
//! Exit status: 0 on success, 1 on a runtime failure, 2 on invalid input
//! (the message names the offending field), 3 when no checked condition
//! holds and at least one is indeterminate.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use serde_json::{json, Map, Value};

use crate::bayes::{run_adaptive, BayesConfig, Reporting, DEFAULT_LAST_K};
use crate::conditions::{
    check_general, check_reward, check_surrogate, default_probe_grid, region_scan, verify_assumption,
    ConditionReport, Family, ScanMode, Verdict,
};
use crate::distributions::DistributionSpec;
use crate::error::{Error, Result};
use crate::gridsearch::{optimize, LagGrid, Objective};
use crate::output::{fmt_num, json_num, json_text, Table};
use crate::reward::RewardSpec;
use crate::scenarios::{
    benchmark_cases, kappa_sweep, mean_shift_run, run_suite, shift_schedule, shift_table, suite_table,
    ExperimentSpec, Method, ShiftKind, ShiftOptions, DEFAULT_GRID_JOBS, DEFAULT_JOBS, DEFAULT_SEGMENT_JOBS,
};
use crate::simulator::{estimate_reward, run_fixed_lag, ParamSchedule, RewardReport, Segment, Window, DEFAULT_BURN_IN};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_INVALID: i32 = 2;
pub const EXIT_INDETERMINATE: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "qlag", version, about = "Simulate, analyse and learn the call lag of a two-slot delayed-arrival queue")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// JSON config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; must not exist unless --force is given.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Top-level seed; overrides the config's `seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Override a config value by dotted path, e.g. `service.mean=2`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Write into an existing output directory, replacing its files.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fixed-lag simulation.
    Simulate(Common),
    /// Lag grid search.
    GridSearch(Common),
    /// Adaptive lag learning.
    Bayes(Common),
    /// Sufficient conditions for the no-lag policy.
    CheckConditions(Common),
    /// Condition verdicts over a grid of mean service and delay times.
    RegionScan(Common),
    /// Adaptive learning under changing means.
    MeanShift(Common),
    /// Benchmark case matrix.
    Suite(Common),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CommandKind {
    Simulate,
    GridSearch,
    Bayes,
    CheckConditions,
    RegionScan,
    MeanShift,
    Suite,
}

pub const COMMANDS: [CommandKind; 7] = [
    CommandKind::Simulate,
    CommandKind::GridSearch,
    CommandKind::Bayes,
    CommandKind::CheckConditions,
    CommandKind::RegionScan,
    CommandKind::MeanShift,
    CommandKind::Suite,
];

impl CommandKind {
    pub fn name(&self) -> &'static str {
        match self {
            CommandKind::Simulate => "simulate",
            CommandKind::GridSearch => "grid-search",
            CommandKind::Bayes => "bayes",
            CommandKind::CheckConditions => "check-conditions",
            CommandKind::RegionScan => "region-scan",
            CommandKind::MeanShift => "mean-shift",
            CommandKind::Suite => "suite",
        }
    }

    /// Top-level config keys accepted by the command.
    pub fn keys(&self) -> &'static [&'static str] {
        match self {
            CommandKind::Simulate => &["service", "delay", "reward", "lag", "n", "schedule", "burn_in", "trajectory", "seed"],
            CommandKind::GridSearch => &["service", "delay", "reward", "n", "objective", "grid", "seed"],
            CommandKind::Bayes => &["service", "delay", "reward", "n", "schedule", "bayes", "reporting", "seed"],
            CommandKind::CheckConditions => &["service", "delay", "reward", "probe_grid"],
            CommandKind::RegionScan => &["family", "mode", "kappa", "ts_grid", "td_grid"],
            CommandKind::MeanShift => &[
                "service", "delay", "reward", "n", "kind", "from", "to", "segment_jobs", "width", "burn_in", "stride",
                "bayes", "grid", "seed",
            ],
            CommandKind::Suite => &["cases", "kappa", "kappas", "seeds", "n", "grid_jobs", "grid", "reporting", "bayes"],
        }
    }
}

/// Keys of the nested config objects.
pub const NESTED_KEYS: [(&str, &[&str]); 9] = [
    ("service / delay", &["kind", "mean", "lower", "upper", "mu", "sigma", "value"]),
    ("reward", &["kind", "kappa", "gamma"]),
    ("grid", &["lag_min", "lag_max", "step"]),
    ("schedule", &["kind", "service_mean", "delay_mean", "service", "delay", "over", "segments"]),
    ("schedule.segments[]", &["jobs", "service_mean", "delay_mean"]),
    ("bayes", &["alpha0", "beta0", "eps_idle", "eps_busy"]),
    ("reporting", &["mode", "width"]),
    ("ts_grid / td_grid", &["min", "max", "points"]),
    ("cases[]", &["id", "service", "delay", "reward", "methods", "n", "seeds", "schedule"]),
];

const DIST_KEYS: &[&str] = NESTED_KEYS[0].1;
const REWARD_KEYS: &[&str] = NESTED_KEYS[1].1;
const GRID_KEYS: &[&str] = NESTED_KEYS[2].1;
const SCHEDULE_KEYS: &[&str] = NESTED_KEYS[3].1;
const SEGMENT_KEYS: &[&str] = NESTED_KEYS[4].1;
const BAYES_KEYS: &[&str] = NESTED_KEYS[5].1;
const REPORTING_KEYS: &[&str] = NESTED_KEYS[6].1;
const AXIS_KEYS: &[&str] = NESTED_KEYS[7].1;
const CASE_KEYS: &[&str] = NESTED_KEYS[8].1;

/// The config reference appended to `--help`.
pub fn config_help() -> String {
    let mut s = String::from("CONFIG KEYS (JSON file via --config, or --set key.path=value)\n\n");
    for c in COMMANDS {
        s.push_str(&format!("  {:<17} {}\n", c.name(), c.keys().join(", ")));
    }
    s.push('\n');
    for (name, keys) in NESTED_KEYS {
        s.push_str(&format!("  {:<21} {}\n", name, keys.join(", ")));
    }
    s.push_str(
        "\n  service/delay kinds: exponential{mean}, uniform{lower,upper} or uniform{mean} = U(0, 2*mean),\n\
         \x20   truncnorm{mu,sigma,lower,upper}, deterministic{value}\n\
         \x20 reward kinds: exponential{kappa} (default kappa 1), polynomial{gamma}\n\
         \x20 objective: simulated | exact | surrogate      reporting.mode: last_k | sliding\n\
         \x20 schedule.kind: stationary | gradual | abrupt  mean-shift kind: gradual | abrupt | stationary\n\
         \x20 family: exp_exp | unif_unif                   mode: thm2_cond1 | cor1\n\
         \x20 cases: \"benchmark\" or a list of case objects; methods: grid, bayes, exact, surrogate, conditions\n\
         \x20 from / to: [t_s, t_d]; probe_grid, kappas, seeds: lists\n\
         \nENVIRONMENT\n  QLAG_THREADS  worker thread count\n",
    );
    s
}

fn command_kind(c: &Command) -> (CommandKind, &Common) {
    match c {
        Command::Simulate(a) => (CommandKind::Simulate, a),
        Command::GridSearch(a) => (CommandKind::GridSearch, a),
        Command::Bayes(a) => (CommandKind::Bayes, a),
        Command::CheckConditions(a) => (CommandKind::CheckConditions, a),
        Command::RegionScan(a) => (CommandKind::RegionScan, a),
        Command::MeanShift(a) => (CommandKind::MeanShift, a),
        Command::Suite(a) => (CommandKind::Suite, a),
    }
}

pub fn command() -> clap::Command {
    Cli::command().after_long_help(config_help())
}

/// Parses `args` (including the program name), runs the command and
/// returns the exit status.
pub fn run<I, A>(args: I) -> i32
where
    I: IntoIterator<Item = A>,
    A: Into<OsString> + Clone,
{
    let matches = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INVALID } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return EXIT_INVALID;
        }
    };
    let (kind, common) = command_kind(&cli.command);
    match execute(kind, common) {
        Ok(code) => code,
        Err(e) => {
            let code = exit_code(&e);
            eprintln!("{}", error_record(&e, code));
            code
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidParameter { .. } | Error::InvalidSchedule(_) | Error::EmptyWindow { .. } | Error::DivergentMgf { .. } => {
            EXIT_INVALID
        }
        _ => EXIT_RUNTIME,
    }
}

/// One-line JSON error record.
pub fn error_record(e: &Error, code: i32) -> String {
    let field = match e {
        Error::InvalidParameter { field, .. } => Value::String(field.clone()),
        Error::DivergentMgf { .. } => Value::String("reward.kappa".into()),
        _ => Value::Null,
    };
    json!({
        "error": if code == EXIT_INVALID { "validation" } else { "runtime" },
        "field": field,
        "message": e.to_string(),
        "exit_code": code,
    })
    .to_string()
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("QLAG_THREADS") {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::invalid("QLAG_THREADS", format!("must be a positive integer, got {v:?}")))?;
        // A pool built earlier in the same process keeps its size.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

fn load_config(common: &Common) -> Result<Value> {
    let mut root = match &common.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::invalid("config", format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| Error::invalid("config", format!("{}: {e}", p.display())))?
        }
        None => Value::Object(Map::new()),
    };
    if !root.is_object() {
        return Err(Error::invalid("config", "top level must be a JSON object"));
    }
    for o in &common.overrides {
        apply_override(&mut root, o)?;
    }
    Ok(root)
}

/// Applies `a.b.c=value`; the value is parsed as JSON, falling back to a string.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::invalid("--set", format!("expected KEY=VALUE, got {assignment:?}")))?;
    if path.is_empty() || path.split('.').any(str::is_empty) {
        return Err(Error::invalid("--set", format!("malformed key {path:?}")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let parts: Vec<&str> = path.split('.').collect();
    let mut cur = root;
    for (i, part) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        let here = parts[..=i].join(".");
        cur = match cur {
            Value::Object(map) => {
                if last {
                    map.insert(part.to_string(), value);
                    return Ok(());
                }
                map.entry(part.to_string()).or_insert_with(|| Value::Object(Map::new()))
            }
            Value::Array(items) => {
                let idx: usize = part
                    .parse()
                    .ok()
                    .filter(|&k| k < items.len())
                    .ok_or_else(|| Error::invalid(here.clone(), "array index out of range"))?;
                if last {
                    items[idx] = value;
                    return Ok(());
                }
                &mut items[idx]
            }
            _ => return Err(Error::invalid(here, "cannot descend into a scalar")),
        };
    }
    Ok(())
}

/// A config value together with its dotted path, for error messages.
#[derive(Clone, Copy)]
struct Node<'a> {
    v: &'a Value,
    path: &'a str,
}

struct Owned<'a> {
    v: &'a Value,
    path: String,
}

impl<'a> Owned<'a> {
    fn node(&self) -> Node<'_> {
        Node { v: self.v, path: &self.path }
    }
}

fn join(path: &str, key: &str) -> String {
    if path.is_empty() {
        key.to_string()
    } else {
        format!("{path}.{key}")
    }
}

impl<'a> Node<'a> {
    fn obj(&self) -> Result<&'a Map<String, Value>> {
        self.v
            .as_object()
            .ok_or_else(|| Error::invalid(self.path_or("config"), "must be an object"))
    }

    fn path_or(&self, fallback: &str) -> String {
        if self.path.is_empty() {
            fallback.to_string()
        } else {
            self.path.to_string()
        }
    }

    fn allow(&self, keys: &[&str]) -> Result<()> {
        for k in self.obj()?.keys() {
            if !keys.contains(&k.as_str()) {
                return Err(Error::invalid(join(self.path, k), "unknown key"));
            }
        }
        Ok(())
    }

    fn get(&self, key: &str) -> Option<Owned<'a>> {
        self.v.get(key).filter(|v| !v.is_null()).map(|v| Owned {
            v,
            path: join(self.path, key),
        })
    }

    fn req(&self, key: &str) -> Result<Owned<'a>> {
        self.get(key).ok_or_else(|| Error::invalid(join(self.path, key), "is required"))
    }

    fn f64(&self) -> Result<f64> {
        self.v
            .as_f64()
            .filter(|x| x.is_finite())
            .ok_or_else(|| Error::invalid(self.path, "must be a number"))
    }

    fn u64(&self) -> Result<u64> {
        self.v
            .as_u64()
            .ok_or_else(|| Error::invalid(self.path, "must be a non-negative integer"))
    }

    fn usize(&self) -> Result<usize> {
        Ok(self.u64()? as usize)
    }

    fn str(&self) -> Result<&'a str> {
        self.v.as_str().ok_or_else(|| Error::invalid(self.path, "must be a string"))
    }

    fn list(&self) -> Result<Vec<Owned<'a>>> {
        let items = self.v.as_array().ok_or_else(|| Error::invalid(self.path, "must be a list"))?;
        Ok(items
            .iter()
            .enumerate()
            .map(|(i, v)| Owned {
                v,
                path: format!("{}[{i}]", self.path),
            })
            .collect())
    }

    fn f64_list(&self) -> Result<Vec<f64>> {
        self.list()?.iter().map(|o| o.node().f64()).collect()
    }

    fn opt_f64(&self, key: &str, default: f64) -> Result<f64> {
        self.get(key).map_or(Ok(default), |o| o.node().f64())
    }

    fn opt_usize(&self, key: &str, default: usize) -> Result<usize> {
        self.get(key).map_or(Ok(default), |o| o.node().usize())
    }

    fn opt_str(&self, key: &str, default: &'a str) -> Result<&'a str> {
        match self.get(key) {
            Some(o) => o.v.as_str().ok_or_else(|| Error::invalid(o.path, "must be a string")),
            None => Ok(default),
        }
    }

    fn bool(&self, key: &str, default: bool) -> Result<bool> {
        match self.get(key) {
            Some(o) => o.v.as_bool().ok_or_else(|| Error::invalid(o.path, "must be true or false")),
            None => Ok(default),
        }
    }
}

/// Prefixes the field of a parameter error with the config path.
fn at(path: &str) -> impl Fn(Error) -> Error + '_ {
    move |e| match e {
        Error::InvalidParameter { field, reason } if !path.is_empty() => Error::InvalidParameter {
            field: join(path, &field),
            reason,
        },
        other => other,
    }
}

fn parse_distribution(n: Node) -> Result<DistributionSpec<f64>> {
    n.allow(DIST_KEYS)?;
    let kind = n.req("kind")?;
    let num = |k: &str| -> Result<f64> { n.req(k)?.node().f64() };
    let d = match kind.node().str()? {
        "exponential" => DistributionSpec::exponential(num("mean")?),
        "uniform" => {
            if n.get("lower").is_some() || n.get("upper").is_some() {
                DistributionSpec::uniform(num("lower")?, num("upper")?)
            } else {
                DistributionSpec::uniform_with_mean(num("mean")?)
            }
        }
        "truncnorm" => DistributionSpec::truncated_normal(num("mu")?, num("sigma")?, num("lower")?, num("upper")?),
        "deterministic" => DistributionSpec::deterministic(num("value")?),
        other => {
            return Err(Error::invalid(
                kind.path.clone(),
                format!("unknown kind {other:?} (exponential, uniform, truncnorm, deterministic)"),
            ))
        }
    };
    d.map_err(at(n.path))
}

fn required_law(root: Node, key: &str) -> Result<DistributionSpec<f64>> {
    parse_distribution(root.req(key)?.node())
}

fn parse_reward(root: Node) -> Result<RewardSpec<f64>> {
    let Some(o) = root.get("reward") else {
        return RewardSpec::exponential(1.0);
    };
    let n = o.node();
    n.allow(REWARD_KEYS)?;
    let r = match n.opt_str("kind", "exponential")? {
        "exponential" => RewardSpec::exponential(n.opt_f64("kappa", 1.0)?),
        "polynomial" => RewardSpec::polynomial(n.req("gamma")?.node().f64()?),
        other => return Err(Error::invalid(join(n.path, "kind"), format!("unknown kind {other:?}"))),
    };
    r.map_err(at(n.path))
}

fn parse_grid(root: Node, service: &DistributionSpec<f64>) -> Result<LagGrid<f64>> {
    let Some(o) = root.get("grid") else {
        return Ok(LagGrid::default_for(service));
    };
    let n = o.node();
    n.allow(GRID_KEYS)?;
    let d = LagGrid::default_for(service);
    LagGrid::new(n.opt_f64("lag_min", d.lag_min)?, n.opt_f64("lag_max", d.lag_max)?, n.opt_f64("step", d.step)?)
        .map_err(at(n.path))
}

fn pair(n: Node) -> Result<(f64, f64)> {
    match n.f64_list()?.as_slice() {
        [a, b] => Ok((*a, *b)),
        _ => Err(Error::invalid(n.path, "must be a two-element list")),
    }
}

fn parse_schedule(
    root: Node,
    service: &DistributionSpec<f64>,
    delay: &DistributionSpec<f64>,
    n_jobs: usize,
) -> Result<ParamSchedule<f64>> {
    let Some(o) = root.get("schedule") else {
        return Ok(ParamSchedule::stationary_of(service, delay));
    };
    let n = o.node();
    n.allow(SCHEDULE_KEYS)?;
    let s = match n.opt_str("kind", "stationary")? {
        "stationary" => ParamSchedule::Stationary {
            service_mean: n.opt_f64("service_mean", service.mean())?,
            delay_mean: n.opt_f64("delay_mean", delay.mean())?,
        },
        "gradual" => ParamSchedule::GradualLinear {
            service: pair(n.req("service")?.node())?,
            delay: pair(n.req("delay")?.node())?,
            over: n.opt_usize("over", n_jobs)?,
        },
        "abrupt" => {
            let segs = n.req("segments")?;
            let segments = segs
                .node()
                .list()?
                .iter()
                .map(|o| {
                    let s = o.node();
                    s.allow(SEGMENT_KEYS)?;
                    Ok(Segment {
                        jobs: s.req("jobs")?.node().usize()?,
                        service_mean: s.req("service_mean")?.node().f64()?,
                        delay_mean: s.req("delay_mean")?.node().f64()?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            ParamSchedule::AbruptPiecewise(segments)
        }
        other => return Err(Error::invalid(join(n.path, "kind"), format!("unknown kind {other:?}"))),
    };
    s.validate(n_jobs).map_err(|e| match e {
        Error::InvalidSchedule(m) => Error::invalid(n.path, m),
        e => e,
    })?;
    Ok(s)
}

fn parse_bayes(root: Node) -> Result<BayesConfig<f64>> {
    let d = BayesConfig::default();
    let Some(o) = root.get("bayes") else {
        return Ok(d);
    };
    let n = o.node();
    n.allow(BAYES_KEYS)?;
    let cfg = BayesConfig {
        alpha0: n.opt_f64("alpha0", d.alpha0)?,
        beta0: n.opt_f64("beta0", d.beta0)?,
        eps_idle: n.opt_f64("eps_idle", d.eps_idle)?,
        eps_busy: n.opt_f64("eps_busy", d.eps_busy)?,
    };
    cfg.validate().map_err(at(n.path))?;
    Ok(cfg)
}

fn parse_reporting(root: Node) -> Result<Reporting> {
    let Some(o) = root.get("reporting") else {
        return Ok(Reporting::LastK(DEFAULT_LAST_K));
    };
    let n = o.node();
    n.allow(REPORTING_KEYS)?;
    let width = n.opt_usize("width", DEFAULT_LAST_K)?;
    if width == 0 {
        return Err(Error::invalid(join(n.path, "width"), "must be positive"));
    }
    match n.opt_str("mode", "last_k")? {
        "last_k" => Ok(Reporting::LastK(width)),
        "sliding" => Ok(Reporting::Sliding(width)),
        other => Err(Error::invalid(join(n.path, "mode"), format!("unknown mode {other:?}"))),
    }
}

fn parse_axis(root: Node, key: &str) -> Result<Vec<f64>> {
    let Some(o) = root.get(key) else {
        return Ok(linspace(0.1, 2.0, 50));
    };
    let n = o.node();
    let v = if n.v.is_array() {
        n.f64_list()?
    } else {
        n.allow(AXIS_KEYS)?;
        let points = n.opt_usize("points", 50)?;
        if points < 2 {
            return Err(Error::invalid(join(n.path, "points"), "must be >= 2"));
        }
        linspace(n.opt_f64("min", 0.1)?, n.opt_f64("max", 2.0)?, points)
    };
    if v.is_empty() || v.iter().any(|&x| !(x > 0.0)) {
        return Err(Error::invalid(n.path, "must contain positive means"));
    }
    Ok(v)
}

fn linspace(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    (0..points)
        .map(|i| lo + (hi - lo) * i as f64 / (points - 1) as f64)
        .collect()
}

fn jobs(root: Node, default: usize) -> Result<usize> {
    let n = root.opt_usize("n", default)?;
    if n < 2 {
        return Err(Error::invalid("n", "at least two jobs are required"));
    }
    Ok(n)
}

/// Files produced by a command, written together at the end.
#[derive(Default)]
struct Artifacts {
    files: Vec<(String, String)>,
    exit: i32,
}

impl Artifacts {
    fn add(&mut self, name: &str, contents: String) {
        self.files.push((name.to_string(), contents));
    }
}

fn check_out(out: &Path, force: bool) -> Result<()> {
    if out.exists() && !force {
        return Err(Error::invalid(
            "out",
            format!("{} already exists; pass --force to overwrite", out.display()),
        ));
    }
    if out.exists() && !out.is_dir() {
        return Err(Error::invalid("out", format!("{} is not a directory", out.display())));
    }
    Ok(())
}

fn io(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |e| Error::Io(format!("{}: {e}", path.display()))
}

/// New directories appear fully populated via a rename of a staging
/// directory; with `--force` each file is replaced by a rename.
fn commit(out: &Path, art: &Artifacts, force: bool) -> Result<()> {
    check_out(out, force)?;
    let parent = match out.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&parent).map_err(io(&parent))?;
    let name = out.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "out".into());
    let staging = parent.join(format!(".{name}.staging-{}", std::process::id()));
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(io(&staging))?;
    }
    fs::create_dir(&staging).map_err(io(&staging))?;
    for (file, contents) in &art.files {
        let p = staging.join(file);
        fs::write(&p, contents).map_err(io(&p))?;
    }
    let result = if out.exists() {
        art.files.iter().try_for_each(|(file, _)| {
            let to = out.join(file);
            fs::rename(staging.join(file), &to).map_err(io(&to))
        })
    } else {
        fs::rename(&staging, out).map_err(io(out))
    };
    let _ = fs::remove_dir_all(&staging);
    result
}

fn execute(kind: CommandKind, common: &Common) -> Result<i32> {
    configure_threads()?;
    check_out(&common.out, common.force)?;
    let cfg = load_config(common)?;
    let root = Node { v: &cfg, path: "" };
    root.allow(kind.keys())?;
    let seed = match common.seed {
        Some(s) => s,
        None if kind.keys().contains(&"seed") => root.get("seed").map_or(Ok(0), |o| o.node().u64())?,
        None => 0,
    };
    let art = match kind {
        CommandKind::Simulate => cmd_simulate(root, seed)?,
        CommandKind::GridSearch => cmd_grid(root, seed)?,
        CommandKind::Bayes => cmd_bayes(root, seed)?,
        CommandKind::CheckConditions => cmd_conditions(root)?,
        CommandKind::RegionScan => cmd_region(root)?,
        CommandKind::MeanShift => cmd_mean_shift(root, seed)?,
        CommandKind::Suite => cmd_suite(root, common.seed)?,
    };
    commit(&common.out, &art, common.force)?;
    Ok(art.exit)
}

fn cmd_simulate(root: Node, seed: u64) -> Result<Artifacts> {
    let service = required_law(root, "service")?;
    let delay = required_law(root, "delay")?;
    let f = parse_reward(root)?;
    let n = jobs(root, 100_000)?;
    let lag = root.opt_f64("lag", 0.0)?;
    let burn_in = root.opt_usize("burn_in", DEFAULT_BURN_IN)?;
    if burn_in >= n {
        return Err(Error::invalid("burn_in", "must be smaller than n"));
    }
    let schedule = parse_schedule(root, &service, &delay, n)?;
    let with_trajectory = root.bool("trajectory", true)?;
    let traj = run_fixed_lag(&service, &delay, lag, n, &schedule, seed)?;
    let est = estimate_reward(&traj, &f, Window::SkipFirst(burn_in))?
        .point()
        .expect("point window");
    let kept = &traj.jobs[burn_in..];
    let mean_wait = kept.iter().map(|j| j.wait).sum::<f64>() / kept.len() as f64;
    let busy = kept.iter().filter(|j| j.wait > 0.0).count() as f64 / kept.len() as f64;
    let mut art = Artifacts::default();
    if with_trajectory {
        let mut t = Table::new(&["index", "service", "delay", "wait", "sojourn", "iat", "lag", "arrival", "state"]);
        for j in &traj.jobs {
            t.push(vec![
                j.index.to_string(),
                fmt_num(j.service),
                fmt_num(j.delay),
                fmt_num(j.wait),
                fmt_num(j.sojourn),
                fmt_num(j.iat),
                fmt_num(j.lag),
                fmt_num(j.arrival),
                j.state.as_str().to_string(),
            ]);
        }
        art.add("trajectory.csv", t.to_csv());
    }
    art.add(
        "summary.json",
        json_text(&json!({
            "command": "simulate",
            "seed": seed,
            "lag": json_num(lag),
            "n": n,
            "burn_in": burn_in,
            "reward": json_num(est.value),
            "std_error": json_num(est.std_error),
            "mean_wait": json_num(mean_wait),
            "busy_fraction": json_num(busy),
        })),
    );
    Ok(art)
}

fn parse_objective(root: Node) -> Result<Objective> {
    match root.opt_str("objective", "simulated")? {
        "simulated" => Ok(Objective::Simulated),
        "exact" => Ok(Objective::Exact),
        "surrogate" => Ok(Objective::Surrogate),
        other => Err(Error::invalid("objective", format!("unknown objective {other:?}"))),
    }
}

fn cmd_grid(root: Node, seed: u64) -> Result<Artifacts> {
    let service = required_law(root, "service")?;
    let delay = required_law(root, "delay")?;
    let f = parse_reward(root)?;
    let objective = parse_objective(root)?;
    let n = root.opt_usize("n", 100_000)?;
    let grid = parse_grid(root, &service)?;
    let r = optimize(&service, &delay, &f, &grid, n, seed, objective).map_err(at(""))?;
    let mut art = Artifacts::default();
    art.add("grid.csv", r.to_table(objective).to_csv());
    art.add(
        "summary.json",
        json_text(&json!({
            "command": "grid-search",
            "objective": objective.as_str(),
            "seed": seed,
            "best_lag": json_num(r.best_lag),
            "best_reward": json_num(r.best_reward),
        })),
    );
    Ok(art)
}

fn cmd_bayes(root: Node, seed: u64) -> Result<Artifacts> {
    let service = required_law(root, "service")?;
    let delay = required_law(root, "delay")?;
    let f = parse_reward(root)?;
    let n = jobs(root, DEFAULT_JOBS)?;
    let reporting = parse_reporting(root)?;
    if n < reporting.width() {
        return Err(Error::invalid("n", "must be >= reporting.width"));
    }
    let schedule = parse_schedule(root, &service, &delay, n)?;
    let cfg = parse_bayes(root)?;
    let run = run_adaptive(&service, &delay, &schedule, &f, n, &cfg, seed, reporting)?;
    let mut art = Artifacts::default();
    art.add("bayes_log.csv", run.log_table().to_csv());
    art.add("posterior.json", run.posterior.to_json());
    let mut summary = json!({
        "command": "bayes",
        "seed": seed,
        "n": n,
        "mean_lag": json_num(run.posterior.mean_lag()),
    });
    match &run.reward {
        RewardReport::Point(e) => {
            summary["g_be"] = json_num(e.value);
            summary["std_error"] = json_num(e.std_error);
        }
        RewardReport::Series(s) => {
            let w = reporting.width();
            let mut t = Table::new(&["index", "G_be_window"]);
            for (i, v) in s.iter().enumerate() {
                t.push(vec![(i + w).to_string(), fmt_num(*v)]);
            }
            art.add("reward_series.csv", t.to_csv());
            summary["g_be"] = s.last().map_or(Value::Null, |v| json_num(*v));
        }
    }
    art.add("summary.json", json_text(&summary));
    Ok(art)
}

fn report_json(r: &ConditionReport<f64>) -> Value {
    json!({
        "condition": r.condition.as_str(),
        "lhs": json_num(r.lhs),
        "rhs": if r.rhs == f64::INFINITY { Value::String("inf".into()) } else { json_num(r.rhs) },
        "relation": match r.relation {
            crate::conditions::Relation::Le => "le",
            crate::conditions::Relation::Lt => "lt",
            crate::conditions::Relation::Ge => "ge",
        },
        "verdict": r.verdict.as_str(),
        "assumption_checked": r.assumption_checked,
        "notes": r.notes,
    })
}

/// 3 when nothing holds and something is indeterminate, else 0.
pub fn conditions_exit(reports: &[ConditionReport<f64>]) -> i32 {
    let holds = reports.iter().any(|r| r.verdict == Verdict::Holds);
    let unknown = reports.iter().any(|r| r.verdict == Verdict::Indeterminate);
    if !holds && unknown {
        EXIT_INDETERMINATE
    } else {
        EXIT_OK
    }
}

fn cmd_conditions(root: Node) -> Result<Artifacts> {
    let service = required_law(root, "service")?;
    let delay = required_law(root, "delay")?;
    let f = parse_reward(root)?;
    let probe = match root.get("probe_grid") {
        Some(o) => o.node().f64_list()?,
        None => default_probe_grid(),
    };
    let assumption = verify_assumption(&service, &delay, &probe).map_err(at(""))?;
    let mut reports = vec![check_general(&service, &delay, &f), check_reward(&service, &delay, &f)];
    if let RewardSpec::Exponential { kappa } = f {
        let (a, b) = check_surrogate(&service, &delay, kappa);
        reports.push(a);
        reports.push(b);
    }
    let mut t = Table::new(&["condition", "lhs", "rhs", "relation", "verdict"]);
    for r in &reports {
        t.push(vec![
            r.condition.as_str().into(),
            fmt_num(r.lhs),
            fmt_num(r.rhs),
            report_json(r)["relation"].as_str().unwrap_or_default().into(),
            r.verdict.as_str().into(),
        ]);
    }
    let mut art = Artifacts::default();
    art.add("conditions.csv", t.to_csv());
    art.add(
        "conditions.json",
        json_text(&json!({
            "reports": reports.iter().map(report_json).collect::<Vec<_>>(),
            "assumption": {
                "holds": assumption.holds,
                "bound_holds": assumption.bound_holds,
                "worst_violation": assumption.worst_violation.map(|(a, b, r)| json!({
                    "from": json_num(a), "to": json_num(b), "increase": json_num(r),
                })),
            },
        })),
    );
    art.exit = conditions_exit(&reports);
    Ok(art)
}

fn cmd_region(root: Node) -> Result<Artifacts> {
    let family = match root.opt_str("family", "exp_exp")? {
        "exp_exp" => Family::ExpExp,
        "unif_unif" => Family::UnifUnif,
        other => return Err(Error::invalid("family", format!("unknown family {other:?}"))),
    };
    let mode = match root.opt_str("mode", "thm2_cond1")? {
        "thm2_cond1" => ScanMode::Thm2Cond1,
        "cor1" => ScanMode::Cor1,
        other => return Err(Error::invalid("mode", format!("unknown mode {other:?}"))),
    };
    let kappa = root.opt_f64("kappa", 1.0)?;
    if !(kappa > 0.0) {
        return Err(Error::invalid("kappa", "must be > 0"));
    }
    let ts = parse_axis(root, "ts_grid")?;
    let td = parse_axis(root, "td_grid")?;
    let cells = region_scan(&ts, &td, kappa, family, mode)?;
    let mut t = Table::new(&["t_s", "t_d", "verdict"]);
    for c in &cells {
        t.push(vec![fmt_num(c.t_s), fmt_num(c.t_d), c.verdict.as_str().into()]);
    }
    let mut art = Artifacts::default();
    art.add("region.csv", t.to_csv());
    Ok(art)
}

fn cmd_mean_shift(root: Node, seed: u64) -> Result<Artifacts> {
    let service = required_law(root, "service")?;
    let delay = required_law(root, "delay")?;
    let f = parse_reward(root)?;
    let n = jobs(root, DEFAULT_JOBS)?;
    let from = match root.get("from") {
        Some(o) => pair(o.node())?,
        None => (service.mean(), delay.mean()),
    };
    let to = match root.get("to") {
        Some(o) => pair(o.node())?,
        None => (from.0 / 2.0, from.1 / 2.0),
    };
    let segment = root.opt_usize("segment_jobs", DEFAULT_SEGMENT_JOBS)?;
    let d = ShiftOptions::default();
    let opts = ShiftOptions {
        width: root.opt_usize("width", d.width)?,
        burn_in: root.opt_usize("burn_in", d.burn_in)?,
        stride: root.opt_usize("stride", d.stride)?,
    };
    if opts.width == 0 || opts.width > n {
        return Err(Error::invalid("width", "must be in 1..=n"));
    }
    let kind = root.opt_str("kind", "abrupt")?;
    let schedule = match kind {
        "gradual" => shift_schedule(ShiftKind::Gradual, from, to, n, segment),
        "abrupt" => shift_schedule(ShiftKind::Abrupt, from, to, n, segment),
        "stationary" => Ok(ParamSchedule::Stationary {
            service_mean: from.0,
            delay_mean: from.1,
        }),
        other => return Err(Error::invalid("kind", format!("unknown kind {other:?}"))),
    }
    .map_err(at(""))?;
    schedule.validate(n).map_err(|e| Error::invalid("from", e.to_string()))?;
    let mut spec = ExperimentSpec::new("mean-shift", service, delay, f);
    spec.methods = vec![Method::Bayes];
    spec.n = n;
    spec.schedule = schedule;
    spec.bayes = parse_bayes(root)?;
    spec.reporting = Reporting::Sliding(opts.width);
    if root.get("grid").is_some() {
        spec.grid = Some(parse_grid(root, &service)?);
    }
    let pts = mean_shift_run(&spec, seed, opts)?;
    let steady: Vec<f64> = pts
        .iter()
        .filter(|p| !p.transient)
        .map(|p| ((p.g_be - p.g_ref) / p.g_ref).abs())
        .collect();
    let mut art = Artifacts::default();
    art.add("mean_shift.csv", shift_table(&pts).to_csv());
    art.add(
        "summary.json",
        json_text(&json!({
            "command": "mean-shift",
            "kind": kind,
            "seed": seed,
            "points": pts.len(),
            "mean_abs_rel_dev": if steady.is_empty() { Value::Null } else {
                json_num(steady.iter().sum::<f64>() / steady.len() as f64)
            },
        })),
    );
    Ok(art)
}

fn parse_methods(n: Node) -> Result<Vec<Method>> {
    n.list()?
        .iter()
        .map(|o| {
            let s = o.node().str()?;
            Method::parse(s).ok_or_else(|| Error::invalid(o.path.clone(), format!("unknown method {s:?}")))
        })
        .collect()
}

fn cmd_suite(root: Node, seed_flag: Option<u64>) -> Result<Artifacts> {
    let seeds: Vec<u64> = match (root.get("seeds"), seed_flag) {
        (_, Some(s)) => vec![s],
        (Some(o), None) => o.node().list()?.iter().map(|o| o.node().u64()).collect::<Result<_>>()?,
        (None, None) => vec![0],
    };
    if seeds.is_empty() {
        return Err(Error::invalid("seeds", "at least one seed is required"));
    }
    let kappa = root.opt_f64("kappa", 1.0)?;
    let n = jobs(root, DEFAULT_JOBS)?;
    let grid_jobs = root.opt_usize("grid_jobs", DEFAULT_GRID_JOBS)?;
    let reporting = parse_reporting(root)?;
    let bayes = parse_bayes(root)?;
    let mut specs = match root.get("cases") {
        None => benchmark_cases(kappa, &seeds).map_err(at(""))?,
        Some(o) if o.v.is_string() => match o.node().str()? {
            "benchmark" => benchmark_cases(kappa, &seeds).map_err(at(""))?,
            other => return Err(Error::invalid("cases", format!("unknown case set {other:?}"))),
        },
        Some(o) => o
            .node()
            .list()?
            .iter()
            .map(|c| {
                let c = c.node();
                c.allow(CASE_KEYS)?;
                let service = required_law(c, "service")?;
                let delay = required_law(c, "delay")?;
                let reward = match c.get("reward") {
                    Some(_) => parse_reward(c)?,
                    None => RewardSpec::exponential(kappa).map_err(at("kappa"))?,
                };
                let id = c.req("id")?.node().str()?.to_string();
                let mut spec = ExperimentSpec::new(id, service, delay, reward);
                if let Some(m) = c.get("methods") {
                    spec.methods = parse_methods(m.node())?;
                }
                spec.n = c.opt_usize("n", n)?;
                spec.seeds = match c.get("seeds") {
                    Some(o) => o.node().list()?.iter().map(|o| o.node().u64()).collect::<Result<_>>()?,
                    None => seeds.clone(),
                };
                spec.schedule = parse_schedule(c, &service, &delay, spec.n)?;
                Ok(spec)
            })
            .collect::<Result<Vec<_>>>()?,
    };
    for s in &mut specs {
        if root.get("n").is_some() {
            s.n = n;
        }
        s.grid_jobs = grid_jobs;
        s.reporting = reporting;
        s.bayes = bayes;
        if root.get("grid").is_some() {
            s.grid = Some(parse_grid(root, &s.service)?);
        }
    }
    if let Some(o) = root.get("kappas") {
        let ks = o.node().f64_list()?;
        specs = kappa_sweep(&specs, &ks).map_err(at("kappas"))?;
    }
    let rows = run_suite(&specs)?;
    let mut art = Artifacts::default();
    art.add("suite.csv", suite_table(&rows).to_csv());
    Ok(art)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn help_lists_every_key() {
        let help = command().render_long_help().to_string();
        for c in COMMANDS {
            assert!(help.contains(c.name()), "{}", c.name());
            for k in c.keys() {
                assert!(help.contains(k), "{k}");
            }
        }
        for (name, keys) in NESTED_KEYS {
            assert!(help.contains(name));
            for k in keys {
                assert!(help.contains(k), "{k}");
            }
        }
        assert!(help.contains("QLAG_THREADS"));
    }

    #[test]
    fn overrides() {
        let mut v = json!({"service": {"kind": "exponential"}, "seeds": [1, 2]});
        apply_override(&mut v, "service.mean=2").unwrap();
        apply_override(&mut v, "reward.kind=polynomial").unwrap();
        apply_override(&mut v, "seeds.1=7").unwrap();
        assert_eq!(v["service"]["mean"], json!(2));
        assert_eq!(v["reward"]["kind"], json!("polynomial"));
        assert_eq!(v["seeds"], json!([1, 7]));
        assert!(apply_override(&mut v, "service.mean.x=1").is_err());
        assert!(apply_override(&mut v, "noequals").is_err());
        assert!(apply_override(&mut v, "seeds.5=1").is_err());
    }

    #[test]
    fn distribution_errors_name_the_field() {
        let v = json!({"service": {"kind": "exponential"}});
        let root = Node { v: &v, path: "" };
        match required_law(root, "service") {
            Err(Error::InvalidParameter { field, .. }) => assert_eq!(field, "service.mean"),
            other => panic!("{other:?}"),
        }
        let v = json!({"delay": {"kind": "uniform", "lower": 2, "upper": 1}});
        let root = Node { v: &v, path: "" };
        match required_law(root, "delay") {
            Err(Error::InvalidParameter { field, .. }) => assert_eq!(field, "delay.upper"),
            other => panic!("{other:?}"),
        }
        let v = json!({"delay": {"kind": "exponential", "mean": 1, "rate": 2}});
        let root = Node { v: &v, path: "" };
        match required_law(root, "delay") {
            Err(Error::InvalidParameter { field, .. }) => assert_eq!(field, "delay.rate"),
            other => panic!("{other:?}"),
        }
        let v = json!({"service": {"kind": "uniform", "mean": 1}});
        let law = required_law(Node { v: &v, path: "" }, "service").unwrap();
        assert_eq!(law, DistributionSpec::uniform(0.0, 2.0).unwrap());
    }

    #[test]
    fn schedule_parsing() {
        let s = DistributionSpec::exponential(1.0).unwrap();
        let d = DistributionSpec::exponential(0.33).unwrap();
        let v = json!({"schedule": {"kind": "abrupt", "segments": [
            {"jobs": 10, "service_mean": 1, "delay_mean": 0.33},
            {"jobs": 10, "service_mean": 0.5, "delay_mean": 0.1667}]}});
        let root = Node { v: &v, path: "" };
        let sched = parse_schedule(root, &s, &d, 20).unwrap();
        assert_eq!(sched.means_at(15).unwrap(), (0.5, 0.1667));
        match parse_schedule(root, &s, &d, 30) {
            Err(Error::InvalidParameter { field, .. }) => assert_eq!(field, "schedule"),
            other => panic!("{other:?}"),
        }
        let v = json!({"schedule": {"kind": "abrupt", "segments": [{"jobs": 10, "service_mean": 1}]}});
        match parse_schedule(Node { v: &v, path: "" }, &s, &d, 10) {
            Err(Error::InvalidParameter { field, .. }) => assert_eq!(field, "schedule.segments[0].delay_mean"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::invalid("x", "y")), EXIT_INVALID);
        assert_eq!(exit_code(&Error::Io("x".into())), EXIT_RUNTIME);
        let rec = error_record(&Error::invalid("service.mean", "is required"), EXIT_INVALID);
        let v: Value = serde_json::from_str(&rec).unwrap();
        assert_eq!(v["field"], json!("service.mean"));
        assert_eq!(v["exit_code"], json!(2));
    }
}
