//! Experiment configuration, dispatch, and persistence.
//!
//! A run resolves its environment, executes one command inside a worker pool
//! of the requested size, and writes `<command>.json`, one
//! `<command>.<section>.csv` per tabular section, any side outputs, and
//! `<command>.timing.json`. Everything except the timing file depends only
//! on the configuration, never on the worker count or output directory.

mod table;

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tempfile::NamedTempFile;

pub use table::{emit_plot_data, num, Table};

use crate::conditioned::{
    conditioned_empirics, mu_exact, mu_via_htransform, stationarity_check, welldefined_check, zeta_diagnostic,
    CylinderFunction, EmpiricsSettings, Mode,
};
use crate::cramer::{rate_curve, solve_theta, Tilt};
use crate::environment::{EnvDistribution, EnvSpec, SiteKeyedEnv};
use crate::error::{Error, Result};
use crate::htransform::{simulate_tilted, FieldGeometry, HarmonicField, Provenance};
use crate::intersection::{criterion_scan, CollisionMethod};
use crate::rng;
use crate::walk::{simulate_averaged, simulate_quenched, PathEnsemble};

pub const CONFIG_VERSION: u32 = 1;
pub const REPORT_VERSION: u32 = 1;

/// Dimension of the environment used when a configuration names none.
pub const DEFAULT_DIMENSION: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    /// A path to an environment spec file, or the spec inline. The uniform
    /// deterministic law in three dimensions when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub env: Option<EnvRef>,
    pub command: Command,
}

impl ExperimentConfig {
    pub fn new(seed: u64, env: Option<EnvRef>, command: Command) -> Self {
        ExperimentConfig {
            version: CONFIG_VERSION,
            seed,
            workers: None,
            out_dir: None,
            env,
            command,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let config: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| Error::Parse(format!("experiment config: {e}")))?;
        if config.version != CONFIG_VERSION {
            return Err(Error::config(format!(
                "config version {} is not supported (expected {CONFIG_VERSION})",
                config.version
            )));
        }
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("configs always serialize")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Value", into = "Value")]
pub enum EnvRef {
    File(PathBuf),
    Inline(EnvSpec),
}

impl TryFrom<Value> for EnvRef {
    type Error = String;

    fn try_from(v: Value) -> std::result::Result<Self, String> {
        match v {
            Value::String(s) => Ok(EnvRef::File(s.into())),
            other => serde_json::from_value(other)
                .map(EnvRef::Inline)
                .map_err(|e| format!("env: {e}")),
        }
    }
}

impl From<EnvRef> for Value {
    fn from(e: EnvRef) -> Value {
        match e {
            EnvRef::File(p) => Value::String(p.to_string_lossy().into_owned()),
            EnvRef::Inline(spec) => serde_json::to_value(spec).expect("specs always serialize"),
        }
    }
}

impl EnvRef {
    pub fn resolve(&self) -> Result<EnvSpec> {
        match self {
            EnvRef::Inline(s) => Ok(s.clone()),
            EnvRef::File(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| Error::config(format!("cannot read environment spec {}: {e}", p.display())))?;
                EnvSpec::from_json(&text)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum CollisionChoice {
    #[default]
    Exact,
    MonteCarlo,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum MuChoice {
    #[default]
    Exact,
    Htransform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Command {
    Rate {
        xi: Vec<f64>,
    },
    RateCurve {
        /// 1-based coordinate axis.
        #[serde(default = "one")]
        axis: usize,
        #[serde(default = "default_samples")]
        samples: usize,
    },
    Simulate {
        mode: Mode,
        n: usize,
        replicas: usize,
        #[serde(default)]
        out: Option<PathBuf>,
    },
    Htransform {
        theta: Vec<f64>,
        horizon: usize,
        /// Radius of the cone at level 0.
        #[serde(default)]
        r0: i64,
        #[serde(default)]
        out: Option<PathBuf>,
    },
    TiltedSim {
        field: PathBuf,
        n: usize,
        replicas: usize,
        #[serde(default)]
        out: Option<PathBuf>,
    },
    Intersection {
        /// `start:stop:step` or a comma-separated list of radii.
        theta_grid: String,
        /// Direction of the radial grid; `+e1` when absent.
        #[serde(default)]
        direction: Option<Vec<f64>>,
        #[serde(default = "default_k_max")]
        k_max: usize,
        #[serde(default)]
        method: CollisionChoice,
        /// Pairs of walks per grid point under Monte Carlo.
        #[serde(default = "default_mc_replicas")]
        replicas: usize,
    },
    Mu {
        xi: Vec<f64>,
        f: String,
        #[serde(default)]
        nmk: Option<[usize; 3]>,
        #[serde(default)]
        method: MuChoice,
        #[serde(default)]
        horizon: Option<usize>,
        #[serde(default = "default_environments")]
        environments: usize,
        /// Also run the window, shift and cumulant checks (exact method only).
        #[serde(default)]
        checks: bool,
    },
    Condition {
        mode: Mode,
        xi: Vec<f64>,
        #[serde(default = "default_f")]
        f: String,
        eps: f64,
        delta: f64,
        n_grid: Vec<usize>,
        replicas: usize,
        #[serde(default)]
        env_seed: Option<u64>,
        #[serde(default = "default_horizon_extra")]
        horizon_extra: usize,
        #[serde(default = "default_environments")]
        mu_environments: usize,
    },
    Report {
        input: PathBuf,
        selector: String,
        #[serde(default)]
        out: Option<PathBuf>,
    },
}

fn one() -> usize {
    1
}
fn default_samples() -> usize {
    101
}
fn default_k_max() -> usize {
    crate::intersection::DEFAULT_K_MAX
}
fn default_mc_replicas() -> usize {
    100_000
}
fn default_environments() -> usize {
    2000
}
fn default_f() -> String {
    "builtin:step-indicator:+e1".into()
}
fn default_horizon_extra() -> usize {
    16
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Rate { .. } => "rate",
            Command::RateCurve { .. } => "rate-curve",
            Command::Simulate { .. } => "simulate",
            Command::Htransform { .. } => "htransform",
            Command::TiltedSim { .. } => "tilted-sim",
            Command::Intersection { .. } => "intersection",
            Command::Mu { .. } => "mu",
            Command::Condition { .. } => "condition",
            Command::Report { .. } => "report",
        }
    }

    /// Name of the section printed by default, when the command is tabular.
    pub fn primary_section(&self) -> Option<&str> {
        match self {
            Command::RateCurve { .. } => Some("curve"),
            Command::Intersection { .. } => Some("criterion"),
            Command::Report { selector, .. } => Some(selector),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub value: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub format_version: u32,
    pub software_version: String,
    /// The configuration with its environment inlined. Worker count and
    /// output directory live in the timing file.
    pub config: ExperimentConfig,
    pub replicas: Option<usize>,
    pub result: Value,
    pub tables: BTreeMap<String, Table>,
    pub checks: Vec<Check>,
    /// Side outputs, as named in the configuration.
    pub outputs: Vec<String>,
}

impl RunReport {
    pub fn read(path: &Path) -> Result<Self> {
        let file = fs::File::open(path)
            .map_err(|e| Error::config(format!("cannot read report {}: {e}", path.display())))?;
        serde_json::from_reader(BufReader::new(file)).map_err(|e| Error::Parse(format!("run report: {e}")))
    }

    pub fn emit_plot_data<W: Write>(&self, selector: &str, w: W) -> Result<()> {
        emit_plot_data(&self.tables, selector, w)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports always serialize") + "\n"
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTiming {
    pub wall_seconds: f64,
    pub workers: usize,
    pub out_dir: Option<PathBuf>,
}

pub struct RunOutput {
    pub report: RunReport,
    pub timing: RunTiming,
    pub written: Vec<PathBuf>,
}

/// Files written to temporaries beside their targets and renamed into
/// place only once the whole run has succeeded.
#[derive(Default)]
struct Staging {
    files: Vec<(NamedTempFile, PathBuf)>,
}

impl Staging {
    fn write(&mut self, target: PathBuf, fill: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
        let dir = match target.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        fs::create_dir_all(&dir)?;
        let mut tmp = NamedTempFile::new_in(&dir)?;
        {
            let mut w = BufWriter::new(tmp.as_file_mut());
            fill(&mut w)?;
            w.flush()?;
        }
        self.files.push((tmp, target));
        Ok(())
    }

    fn commit(self) -> Result<Vec<PathBuf>> {
        let mut done = Vec::new();
        for (tmp, target) in self.files {
            tmp.persist(&target).map_err(|e| Error::Io(e.error))?;
            done.push(target);
        }
        Ok(done)
    }
}

/// Side outputs of a run, resolved against the output directory.
struct Sink<'a> {
    out_dir: Option<&'a Path>,
    staging: Staging,
    named: Vec<String>,
}

impl Sink<'_> {
    /// Stages `name` (relative to the output directory) when the command
    /// named it or an output directory is set.
    fn side_output(
        &mut self,
        explicit: Option<&Path>,
        default: &str,
        fill: impl FnOnce(&mut dyn Write) -> Result<()>,
    ) -> Result<()> {
        let name = match (explicit, self.out_dir) {
            (Some(p), _) => p.to_path_buf(),
            (None, Some(_)) => PathBuf::from(default),
            (None, None) => return Ok(()),
        };
        let target = match self.out_dir {
            Some(dir) if name.is_relative() => dir.join(&name),
            _ => name.clone(),
        };
        self.named.push(name.to_string_lossy().into_owned());
        self.staging.write(target, fill)
    }
}

fn with_pool<T: Send>(workers: Option<usize>, job: impl FnOnce() -> T + Send) -> Result<T> {
    match workers {
        None => Ok(job()),
        Some(0) => Err(Error::config("workers must be positive")),
        Some(w) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(w)
                .build()
                .map_err(|e| Error::config(format!("worker pool: {e}")))?;
            Ok(pool.install(job))
        }
    }
}

/// Executes the configuration and writes its outputs atomically.
pub fn run(config: &ExperimentConfig) -> Result<RunOutput> {
    if config.version != CONFIG_VERSION {
        return Err(Error::config(format!("config version {} is not supported", config.version)));
    }
    let start = Instant::now();
    let out_dir = config.out_dir.as_deref();
    let mut sink = Sink {
        out_dir,
        staging: Staging::default(),
        named: Vec::new(),
    };
    let (report, workers) = with_pool(config.workers, || {
        execute(config, &mut sink).map(|r| (r, rayon::current_num_threads()))
    })??;
    let mut report = report;
    let name = config.command.name();
    if let Command::Report { selector, out, .. } = &config.command {
        let table = report.tables.get(selector).cloned().unwrap_or_default();
        sink.side_output(out.as_deref(), &format!("{selector}.csv"), |w| table.write_csv(w))?;
    } else if let Some(dir) = out_dir {
        for (section, table) in &report.tables {
            let t = table.clone();
            sink.staging
                .write(dir.join(format!("{name}.{section}.csv")), move |w| t.write_csv(w))?;
        }
    }
    report.outputs = sink.named.clone();
    let timing = RunTiming {
        wall_seconds: start.elapsed().as_secs_f64(),
        workers,
        out_dir: config.out_dir.clone(),
    };
    if let (Some(dir), false) = (out_dir, matches!(config.command, Command::Report { .. })) {
        let text = report.to_json();
        sink.staging
            .write(dir.join(format!("{name}.json")), |w| Ok(w.write_all(text.as_bytes())?))?;
        let t = serde_json::to_string_pretty(&timing)? + "\n";
        sink.staging
            .write(dir.join(format!("{name}.timing.json")), |w| Ok(w.write_all(t.as_bytes())?))?;
    }
    let written = sink.staging.commit()?;
    Ok(RunOutput { report, timing, written })
}

fn resolve_env(config: &ExperimentConfig) -> Result<(EnvSpec, EnvDistribution)> {
    let spec = match &config.env {
        Some(e) => e.resolve()?,
        None => EnvDistribution::uniform(DEFAULT_DIMENSION)?.to_spec(),
    };
    let dist = spec.build()?;
    Ok((spec, dist))
}

fn check_dim(what: &str, v: &[f64], d: usize) -> Result<()> {
    if v.len() != d {
        return Err(Error::config(format!("{what} has {} components, the environment has d={d}", v.len())));
    }
    Ok(())
}

/// Radii from `start:stop:step` or a comma-separated list.
pub fn parse_grid(text: &str) -> Result<Vec<f64>> {
    let bad = || Error::config(format!("cannot parse grid '{text}'"));
    let nums = |s: &str, sep: char| -> Result<Vec<f64>> {
        s.split(sep).map(|t| t.trim().parse::<f64>().map_err(|_| bad())).collect()
    };
    if text.contains(':') {
        let p = nums(text, ':')?;
        let [a, b, h] = p[..] else { return Err(bad()) };
        if !(h > 0.0) || b < a {
            return Err(bad());
        }
        let count = ((b - a) / h + 1e-9).floor() as usize;
        Ok((0..=count).map(|i| a + i as f64 * h).collect())
    } else {
        nums(text, ',')
    }
}

fn estimate_row(axis: usize, e: &crate::stats::Estimate) -> Vec<Value> {
    vec![json!(axis), num(e.mean), num(e.se)]
}

fn velocity_table(ens: &PathEnsemble) -> Table {
    let mut t = Table::new(&["axis", "mean", "se"]);
    for (i, e) in ens.mean_velocity().iter().enumerate() {
        t.push(estimate_row(i + 1, e));
    }
    t
}

fn write_ensemble(ens: &PathEnsemble) -> impl FnOnce(&mut dyn Write) -> Result<()> + '_ {
    move |w| ens.write_jsonl(w)
}

fn execute(config: &ExperimentConfig, sink: &mut Sink<'_>) -> Result<RunReport> {
    let seed = config.seed;
    let mut tables = BTreeMap::new();
    let mut checks = Vec::new();
    let mut replicas = None;
    let mut env_spec = None;
    let result: Value = match &config.command {
        Command::Rate { xi } => {
            let (spec, dist) = resolve_env(config)?;
            env_spec = Some(spec);
            check_dim("xi", xi, dist.dim())?;
            let sol = solve_theta(&dist.mean_kernel(), xi)?;
            let d = xi.len();
            let mut cols: Vec<String> = (1..=d).map(|i| format!("xi_{i}")).collect();
            cols.extend((1..=d).map(|i| format!("theta_{i}")));
            cols.push("rate".into());
            let mut t = Table {
                columns: cols,
                rows: Vec::new(),
            };
            let mut row: Vec<Value> = sol.xi.iter().chain(&sol.theta).map(|v| num(*v)).collect();
            row.push(num(sol.rate));
            t.push(row);
            tables.insert("rate".into(), t);
            checks.push(Check {
                name: "converged".into(),
                passed: sol.converged,
                value: json!(sol.iterations),
            });
            serde_json::to_value(&sol)?
        }
        Command::RateCurve { axis, samples } => {
            let (spec, dist) = resolve_env(config)?;
            env_spec = Some(spec);
            if *axis == 0 || *axis > dist.dim() {
                return Err(Error::config(format!("axis must be in 1..={}", dist.dim())));
            }
            let curve = rate_curve(&dist.mean_kernel(), axis - 1, *samples)?;
            let mut t = Table::new(&["xi", "theta", "rate"]);
            for p in &curve {
                t.push(vec![num(p.xi), num(p.theta), num(p.rate)]);
            }
            tables.insert("curve".into(), t);
            serde_json::to_value(&curve)?
        }
        Command::Simulate { mode, n, replicas: r, out } => {
            let (spec, dist) = resolve_env(config)?;
            env_spec = Some(spec);
            replicas = Some(*r);
            let walk_seed = rng::child_seed(seed, 1);
            let ens = match mode {
                Mode::Averaged => simulate_averaged(&dist, *n, *r, walk_seed)?,
                Mode::Quenched => {
                    let env = SiteKeyedEnv::new(std::sync::Arc::new(dist.clone()), rng::environment_seed(seed, 0));
                    simulate_quenched(&env, 0, &vec![0; dist.dim()], *n, *r, walk_seed)?
                }
            };
            tables.insert("velocity".into(), velocity_table(&ens));
            sink.side_output(out.as_deref(), "paths.jsonl", write_ensemble(&ens))?;
            json!({ "mode": mode, "steps": n, "mean_velocity": ens.mean_velocity() })
        }
        Command::Htransform { theta, horizon, r0, out } => {
            let (spec, dist) = resolve_env(config)?;
            check_dim("theta", theta, dist.dim())?;
            let env_seed = rng::environment_seed(seed, 0);
            let env = SiteKeyedEnv::new(std::sync::Arc::new(dist.clone()), env_seed);
            let tilt = Tilt::new(&dist.mean_kernel(), theta)?;
            let origin = vec![0; dist.dim()];
            let field = HarmonicField::cone(&env, &tilt, *horizon as i64, 0, &origin, *r0)?.with_provenance(Provenance {
                env: spec.clone(),
                seed: env_seed,
            });
            env_spec = Some(spec);
            let residual = field.harmonic_residual(&env)?;
            let min_u = field.min_u();
            checks.push(Check {
                name: "harmonic".into(),
                passed: residual <= 1e-12,
                value: num(residual),
            });
            checks.push(Check {
                name: "positive".into(),
                passed: min_u > 0.0 || field.is_log_scale(),
                value: num(min_u),
            });
            let mut levels: Vec<(f64, f64, usize)> = vec![(f64::INFINITY, f64::NEG_INFINITY, 0); horizon + 1];
            field.for_each(|n, x, _| {
                let lu = field.log_u(n, x).unwrap_or(f64::NAN);
                let e = &mut levels[n as usize];
                e.0 = e.0.min(lu);
                e.1 = e.1.max(lu);
                e.2 += 1;
            });
            let mut t = Table::new(&["level", "sites", "min_log_u", "max_log_u"]);
            for (n, (lo, hi, c)) in levels.iter().enumerate() {
                t.push(vec![json!(n), json!(c), num(*lo), num(*hi)]);
            }
            tables.insert("levels".into(), t);
            sink.side_output(out.as_deref(), "field.bin", |w| field.write_binary(w))?;
            json!({
                "theta": theta,
                "log_phi": tilt.log_phi,
                "horizon": horizon,
                "r0": r0,
                "log_u_origin": num(field.log_u(0, &origin).unwrap_or(f64::NAN)),
                "min_u": num(min_u),
                "log_scale": field.is_log_scale(),
                "sites": field.num_sites(),
                "harmonic_residual": num(residual),
                "environment_seed": env_seed,
            })
        }
        Command::TiltedSim { field: path, n, replicas: r, out } => {
            let file = fs::File::open(path)
                .map_err(|e| Error::config(format!("cannot read field {}: {e}", path.display())))?;
            let field = HarmonicField::read_binary(BufReader::new(file))?;
            let prov = field
                .provenance()
                .ok_or_else(|| Error::config("the field file carries no environment provenance"))?
                .clone();
            let env = prov.environment()?;
            env_spec = Some(prov.env.clone());
            replicas = Some(*r);
            let start = match field.geometry() {
                FieldGeometry::Cone { center, .. } => center.clone(),
                FieldGeometry::Tube { .. } => vec![0; field.dim()],
            };
            let kernel = field.doob_kernel(&env);
            let ens = simulate_tilted(&kernel, field.base(), &start, *n, *r, rng::child_seed(seed, 2))?;
            tables.insert("velocity".into(), velocity_table(&ens));
            sink.side_output(out.as_deref(), "tilted.jsonl", write_ensemble(&ens))?;
            json!({
                "theta": field.theta(),
                "steps": n,
                "mean_velocity": ens.mean_velocity(),
                "environment_seed": prov.seed,
            })
        }
        Command::Intersection {
            theta_grid,
            direction,
            k_max,
            method,
            replicas: r,
        } => {
            let (spec, dist) = resolve_env(config)?;
            env_spec = Some(spec);
            let d = dist.dim();
            let dir = match direction {
                Some(v) => {
                    check_dim("direction", v, d)?;
                    let norm = crate::lattice::euclid(v);
                    if norm == 0.0 {
                        return Err(Error::config("direction must be nonzero"));
                    }
                    v.iter().map(|c| c / norm).collect()
                }
                None => {
                    let mut v = vec![0.0; d];
                    v[0] = 1.0;
                    v
                }
            };
            let radii = parse_grid(theta_grid)?;
            let grid: Vec<Vec<f64>> = radii.iter().map(|t| dir.iter().map(|c| c * t).collect()).collect();
            let m = match method {
                CollisionChoice::Exact => CollisionMethod::ExactDp,
                CollisionChoice::MonteCarlo => {
                    replicas = Some(*r);
                    CollisionMethod::MonteCarlo { replicas: *r }
                }
            };
            let rep = criterion_scan(&dist, &grid, *k_max, m, rng::child_seed(seed, 3))?;
            let mut t = Table::new(&["theta", "B", "tail", "C_inf", "verdict"]);
            for (radius, row) in radii.iter().zip(&rep.rows) {
                t.push(vec![
                    num(*radius),
                    num(row.b_partial),
                    num(row.tail_bound),
                    num(row.c_limit),
                    serde_json::to_value(row.verdict)?,
                ]);
            }
            tables.insert("criterion".into(), t);
            checks.push(Check {
                name: "criterion-holds-on-grid".into(),
                passed: rep.rows.iter().all(|r| r.verdict == crate::intersection::Verdict::Holds),
                value: rep.eta_bar.map(num).unwrap_or(Value::Null),
            });
            serde_json::to_value(&rep)?
        }
        Command::Mu {
            xi,
            f,
            nmk,
            method,
            horizon,
            environments,
            checks: run_checks,
        } => {
            let (spec, dist) = resolve_env(config)?;
            env_spec = Some(spec);
            check_dim("xi", xi, dist.dim())?;
            let mut func = CylinderFunction::parse(dist.dim(), f)?;
            if let Some([n, m, k]) = nmk {
                func = func.with_window(*n, *m, *k)?;
            }
            let mut out = serde_json::Map::new();
            let value = match method {
                MuChoice::Exact => mu_exact(&dist, xi, &func)?,
                MuChoice::Htransform => {
                    replicas = Some(*environments);
                    let rep = mu_via_htransform(&dist, xi, &func, *horizon, *environments, rng::child_seed(seed, 4))?;
                    out.insert("horizon".into(), json!(rep.horizon));
                    rep.value
                }
            };
            let mut t = Table::new(&["method", "value", "error", "bound"]);
            t.push(vec![
                serde_json::to_value(value.method)?,
                num(value.value),
                num(value.error),
                num(value.bound),
            ]);
            tables.insert("value".into(), t);
            out.insert("function".into(), json!(func.describe()));
            out.insert("nmk".into(), json!(func.nmk()));
            out.insert("value".into(), serde_json::to_value(&value)?);
            if *run_checks {
                if *method != MuChoice::Exact {
                    return Err(Error::config("checks need the exact method"));
                }
                let w = welldefined_check(&dist, xi, &func)?;
                let s = stationarity_check(&dist, xi, &func)?;
                let z = zeta_diagnostic(&dist, xi, &func, &[-1.0, -0.5, -0.1, 0.0, 0.1, 0.5, 1.0])?;
                checks.push(Check {
                    name: "window-invariance".into(),
                    passed: w.passed,
                    value: num(w.max_deviation),
                });
                checks.push(Check {
                    name: "shift-invariance".into(),
                    passed: s.passed,
                    value: num(s.deviation),
                });
                checks.push(Check {
                    name: "zeta-flat-at-zero".into(),
                    passed: z.passed,
                    value: num(z.derivative_at_zero),
                });
                out.insert("welldefined".into(), serde_json::to_value(&w)?);
                out.insert("stationarity".into(), serde_json::to_value(&s)?);
                out.insert("zeta".into(), serde_json::to_value(&z)?);
            }
            Value::Object(out)
        }
        Command::Condition {
            mode,
            xi,
            f,
            eps,
            delta,
            n_grid,
            replicas: r,
            env_seed,
            horizon_extra,
            mu_environments,
        } => {
            let (spec, dist) = resolve_env(config)?;
            env_spec = Some(spec);
            replicas = Some(*r);
            let func = CylinderFunction::parse(dist.dim(), f)?;
            let mut settings = EmpiricsSettings::new(*mode, xi.clone(), *eps, *delta, n_grid.clone(), *r, seed);
            settings.env_seed = *env_seed;
            settings.horizon_extra = *horizon_extra;
            settings.mu_environments = *mu_environments;
            let rep = conditioned_empirics(&dist, &func, &settings)?;
            let mut t = Table::new(&[
                "n",
                "p_d",
                "p_d_se",
                "p_ad",
                "p_ad_se",
                "p_a_given_d",
                "p_a_given_d_se",
                "log_rate",
                "d_hits",
                "ad_hits",
                "ess_d",
                "ess_ad",
            ]);
            for row in &rep.rows {
                t.push(vec![
                    json!(row.n),
                    num(row.p_d.mean),
                    num(row.p_d.se),
                    num(row.p_ad.mean),
                    num(row.p_ad.se),
                    num(row.p_a_given_d),
                    num(row.p_a_given_d_se),
                    num(row.log_rate),
                    json!(row.d_hits),
                    json!(row.ad_hits),
                    num(row.ess_d),
                    num(row.ess_ad),
                ]);
            }
            tables.insert("rates".into(), t);
            checks.push(Check {
                name: "rate-negative-nonincreasing".into(),
                passed: rep.rates_negative_and_nonincreasing(),
                value: rep.delta_condition.gamma.map(num).unwrap_or(Value::Null),
            });
            serde_json::to_value(&rep)?
        }
        Command::Report { input, selector, .. } => {
            let source = RunReport::read(input)?;
            let table = source
                .tables
                .get(selector)
                .cloned()
                .ok_or_else(|| {
                    let names: Vec<&str> = source.tables.keys().map(String::as_str).collect();
                    Error::config(format!("unknown section '{selector}'; available: {}", names.join(", ")))
                })?;
            tables.insert(selector.clone(), table);
            json!({ "input": input, "selector": selector })
        }
    };
    let mut echo = config.clone();
    echo.workers = None;
    echo.out_dir = None;
    echo.env = env_spec.map(EnvRef::Inline);
    Ok(RunReport {
        format_version: REPORT_VERSION,
        software_version: env!("CARGO_PKG_VERSION").to_string(),
        config: echo,
        replicas,
        result,
        tables,
        checks,
        outputs: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rate_config(xi: Vec<f64>) -> ExperimentConfig {
        ExperimentConfig::new(1, None, Command::Rate { xi })
    }

    #[test]
    fn rate_at_the_mean_velocity_is_zero() {
        let out = run(&rate_config(vec![0.0; 3])).unwrap();
        assert!(out.report.result["rate"].as_f64().unwrap().abs() <= 1e-12);
        assert!(out.written.is_empty());
    }

    #[test]
    fn config_round_trips() {
        let mut c = ExperimentConfig::new(
            5,
            Some(EnvRef::Inline(EnvDistribution::two_point(3, 0.1, 0.05).unwrap().to_spec())),
            Command::Condition {
                mode: Mode::Quenched,
                xi: vec![0.05, 0.0, 0.0],
                f: default_f(),
                eps: 0.1,
                delta: 0.05,
                n_grid: vec![50, 100],
                replicas: 1000,
                env_seed: Some(3),
                horizon_extra: 16,
                mu_environments: 100,
            },
        );
        c.workers = Some(2);
        c.out_dir = Some("runs/a".into());
        assert_eq!(ExperimentConfig::from_json(&c.to_json()).unwrap(), c);
        let file = ExperimentConfig::new(0, Some(EnvRef::File("env.json".into())), Command::RateCurve { axis: 1, samples: 11 });
        assert_eq!(ExperimentConfig::from_json(&file.to_json()).unwrap(), file);
    }

    #[test]
    fn strict_parsing() {
        let ok = r#"{"version":1,"command":{"name":"rate","xi":[0.1,0,0]}}"#;
        assert!(ExperimentConfig::from_json(ok).is_ok());
        let extra_top = r#"{"version":1,"sede":3,"command":{"name":"rate","xi":[0.1,0,0]}}"#;
        let e = ExperimentConfig::from_json(extra_top).unwrap_err();
        assert!(e.to_string().contains("sede"), "{e}");
        let extra_cmd = r#"{"version":1,"command":{"name":"rate","xi":[0.1,0,0],"eps":1}}"#;
        let e = ExperimentConfig::from_json(extra_cmd).unwrap_err();
        assert!(e.to_string().contains("eps"), "{e}");
        let bad_version = r#"{"version":9,"command":{"name":"rate","xi":[0.1,0,0]}}"#;
        assert_eq!(ExperimentConfig::from_json(bad_version).unwrap_err().exit_code(), 2);
        let malformed = "{\"version\":1,\n\"command\":";
        let e = ExperimentConfig::from_json(malformed).unwrap_err();
        assert!(e.to_string().contains("line 2"), "{e}");
        assert_eq!(e.exit_code(), 2);
    }

    #[test]
    fn grids() {
        assert_eq!(parse_grid("0:0.2:0.05").unwrap().len(), 5);
        assert_eq!(parse_grid("0.1, 0.3").unwrap(), vec![0.1, 0.3]);
        assert!(parse_grid("0:1").is_err());
        assert!(parse_grid("1:0:0.1").is_err());
    }

    #[test]
    fn failed_runs_leave_nothing_behind() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = ExperimentConfig::new(
            1,
            None,
            Command::Mu {
                xi: vec![0.1, 0.0, 0.0],
                f: "step(1,+e1)".into(),
                nmk: None,
                method: MuChoice::Htransform,
                horizon: None,
                environments: 10,
                checks: true,
            },
        );
        c.out_dir = Some(dir.path().to_path_buf());
        assert!(run(&c).is_err());
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);
    }

    #[test]
    fn outputs_are_independent_of_workers_and_directory() {
        let base = tempfile::tempdir().unwrap();
        let mut bytes = Vec::new();
        for (w, sub) in [(1, "a"), (4, "b")] {
            let mut c = ExperimentConfig::new(
                11,
                None,
                Command::Simulate {
                    mode: Mode::Quenched,
                    n: 20,
                    replicas: 200,
                    out: None,
                },
            );
            c.workers = Some(w);
            c.out_dir = Some(base.path().join(sub));
            let out = run(&c).unwrap();
            assert_eq!(out.timing.workers, w);
            let mut files: Vec<(String, Vec<u8>)> = out
                .written
                .iter()
                .filter(|p| !p.to_string_lossy().ends_with(".timing.json"))
                .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(p).unwrap()))
                .collect();
            files.sort();
            bytes.push(files);
        }
        assert_eq!(bytes[0].len(), 3);
        assert_eq!(bytes[0], bytes[1]);
    }
}
