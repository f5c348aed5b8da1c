//! Command line driver: resolve a config file, run one subcommand, write
//! its data files plus a run manifest.
//!
//! Data files are a pure function of the config, the model, the master
//! seed, and the subcommand arguments; worker counts and timestamps never
//! reach them. The manifest is the one place that records wall-clock.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expr::{Arity, KernelExpr};
use crate::grid::GridFunction;
use crate::limit::{observable_curve, solve_rho};
use crate::model::{discretize, grid_point, validate_model, ModelFile, ModelSpec};
use crate::moments::integrate_moments;
use crate::rng::SeedKey;
use crate::sim::{run_trajectory, EventKind, HitTarget, RateTables, TrajectoryConfig};
use crate::stats::{
    clt_experiment, hitting_experiment, lln_experiment, run_ensemble, summarize,
    ExperimentParams, Summary,
};

/// Lattice points per axis when sampling kernels for validation.
const VALIDATION_SAMPLES: usize = 256;

fn default_n_list() -> Vec<usize> {
    vec![25, 50, 100, 200]
}

fn default_grid_size() -> usize {
    64
}

fn default_step() -> f64 {
    1e-3
}

fn default_replicas() -> usize {
    500
}

/// A hitting target: a declared test function name and the level to reach.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetSpec {
    pub f: String,
    pub r: f64,
}

/// Experiment configuration file. The model path is relative to the
/// config file's own directory; output_dir is relative to the working
/// directory and can be overridden with --out.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: String,
    #[serde(default)]
    pub test_functions: BTreeMap<String, String>,
    #[serde(default)]
    pub targets: Vec<TargetSpec>,
    #[serde(default = "default_n_list", rename = "N_list")]
    pub n_list: Vec<usize>,
    #[serde(default = "default_grid_size")]
    pub grid_size: usize,
    #[serde(default = "default_step")]
    pub step: f64,
    #[serde(default = "default_replicas")]
    pub replicas: usize,
    #[serde(default)]
    pub master_seed: u64,
    /// Observation time; defaults to the model horizon.
    #[serde(default)]
    pub t: Option<f64>,
    /// Simulation horizon for hitting runs; defaults to the model horizon.
    #[serde(default)]
    pub horizon: Option<f64>,
    /// Record times for simulate and moments; defaults to five evenly
    /// spaced times over [0, t].
    #[serde(default)]
    pub record_times: Option<Vec<f64>>,
    #[serde(default)]
    pub workers: Option<usize>,
    #[serde(default)]
    pub particle_cap: Option<u64>,
    #[serde(default)]
    pub output_dir: Option<String>,
}

/// A loaded config with its model parsed and every test function compiled.
#[derive(Debug)]
pub struct Workspace {
    pub config_path: PathBuf,
    pub cfg: ExperimentConfig,
    pub model_path: PathBuf,
    pub spec: ModelSpec,
    pub model_file: ModelFile,
    pub functions: BTreeMap<String, KernelExpr>,
}

impl Workspace {
    pub fn load(config_path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(config_path).map_err(|e| {
            Error::Config(format!("cannot read config {}: {e}", config_path.display()))
        })?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)?;
        if !(cfg.step > 0.0 && cfg.step.is_finite()) {
            return Err(Error::Config("step must be positive and finite".into()));
        }
        if cfg.grid_size < 2 {
            return Err(Error::Config("grid_size must be at least 2".into()));
        }
        if cfg.replicas < 2 {
            return Err(Error::Config("replicas must be at least 2".into()));
        }
        if cfg.n_list.is_empty() || cfg.n_list.iter().any(|&n| n == 0) {
            return Err(Error::Config(
                "N_list must be a nonempty list of positive sizes".into(),
            ));
        }
        if let Some(times) = &cfg.record_times {
            let ok = !times.is_empty()
                && times.iter().all(|t| t.is_finite() && *t >= 0.0)
                && times.windows(2).all(|w| w[0] <= w[1]);
            if !ok {
                return Err(Error::Config(
                    "record_times must be nonnegative, finite, and nondecreasing".into(),
                ));
            }
        }
        for (name, knob) in [("t", cfg.t), ("horizon", cfg.horizon)] {
            if let Some(v) = knob {
                if !(v > 0.0 && v.is_finite()) {
                    return Err(Error::Config(format!("{name} must be positive and finite")));
                }
            }
        }
        let mut functions = BTreeMap::new();
        for (name, body) in &cfg.test_functions {
            let safe = !name.is_empty()
                && name
                    .chars()
                    .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-');
            if !safe {
                return Err(Error::Config(format!(
                    "test function name '{name}' must use only letters, digits, '_', '-' \
                     (it names an output file)"
                )));
            }
            let expr = KernelExpr::parse(body, Arity::Univariate).map_err(|e| match e {
                Error::Parse { position, message } => Error::Parse {
                    position,
                    message: format!("test function '{name}': {message}"),
                },
                other => other,
            })?;
            functions.insert(name.clone(), expr);
        }
        for target in &cfg.targets {
            if !functions.contains_key(&target.f) {
                return Err(Error::Config(format!(
                    "target references undeclared test function '{}'",
                    target.f
                )));
            }
            if !target.r.is_finite() {
                return Err(Error::Config(format!(
                    "target level for '{}' must be finite",
                    target.f
                )));
            }
        }
        let base = config_path.parent().unwrap_or(Path::new("."));
        let model_path = base.join(&cfg.model);
        let (spec, model_file) = ModelSpec::load(&model_path)?;
        Ok(Workspace {
            config_path: config_path.to_path_buf(),
            cfg,
            model_path,
            spec,
            model_file,
            functions,
        })
    }

    fn observation_time(&self, flag: Option<f64>) -> Result<f64> {
        let t = flag.or(self.cfg.t).unwrap_or(self.spec.horizon);
        if t >= 0.0 && t.is_finite() {
            Ok(t)
        } else {
            Err(Error::Config("t must be nonnegative and finite".into()))
        }
    }

    fn replicas(&self, flag: Option<usize>) -> Result<usize> {
        let r = flag.unwrap_or(self.cfg.replicas);
        if r >= 2 {
            Ok(r)
        } else {
            Err(Error::TooFewSamples { got: r, need: 2 })
        }
    }

    fn system_size(&self, flag: Option<usize>) -> Result<usize> {
        match flag {
            Some(0) => Err(Error::Config("N must be at least 1".into())),
            Some(n) => Ok(n),
            None => Ok(*self.cfg.n_list.last().expect("validated nonempty")),
        }
    }

    /// Named test function; without a flag, the alphabetically first one.
    fn test_function(&self, flag: Option<&str>) -> Result<(&str, &KernelExpr)> {
        match flag {
            Some(name) => self
                .functions
                .get_key_value(name)
                .map(|(k, v)| (k.as_str(), v))
                .ok_or_else(|| {
                    Error::Config(format!(
                        "unknown test function '{name}'; declared: {}",
                        self.functions
                            .keys()
                            .cloned()
                            .collect::<Vec<_>>()
                            .join(", ")
                    ))
                }),
            None => self
                .functions
                .iter()
                .next()
                .map(|(k, v)| (k.as_str(), v))
                .ok_or_else(|| Error::Config("config declares no test_functions".into())),
        }
    }

    /// Cap on total particle count: 100x the deterministic initial mass
    /// unless the config pins one.
    fn particle_cap(&self, n_urns: usize) -> u64 {
        self.cfg.particle_cap.unwrap_or_else(|| {
            let peak = (0..n_urns)
                .map(|i| self.spec.phi.eval1(grid_point(i, n_urns)))
                .fold(1.0f64, f64::max);
            ((100.0 * n_urns as f64 * peak).ceil() as u64).max(10_000)
        })
    }

    fn record_ladder(&self, t: f64) -> Result<Vec<f64>> {
        if let Some(times) = &self.cfg.record_times {
            if times.last().is_some_and(|&last| last > t) {
                return Err(Error::Config(format!("record_times reach past t = {t}")));
            }
            Ok(times.clone())
        } else if t == 0.0 {
            Ok(vec![0.0])
        } else {
            Ok((0..=4).map(|k| t * k as f64 / 4.0).collect())
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "urnlab",
    version,
    about = "Urn-branching simulator and limit-theorem toolkit"
)]
pub struct Cli {
    /// Experiment configuration file (JSON).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Master seed, overriding the config.
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,
    /// Worker threads; falls back to URNLAB_WORKERS, then the config, then 1.
    #[arg(long, global = true, value_name = "INT")]
    workers: Option<usize>,
    /// Output directory, overriding the config.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Check kernels for nonnegativity and finite moment sums.
    Validate,
    /// Solve the limit density and observable curves into CSV tables.
    Limit {
        /// Restrict to one declared test function.
        #[arg(long)]
        f: Option<String>,
        /// End time; defaults to the model horizon.
        #[arg(long)]
        t: Option<f64>,
    },
    /// Run an ensemble of exact trajectories.
    Simulate {
        /// Number of urns; defaults to the last entry of N_list.
        #[arg(long = "N", value_name = "N")]
        n: Option<usize>,
        /// Horizon; defaults to the model horizon.
        #[arg(long)]
        t: Option<f64>,
        /// Replicas; defaults to the config value.
        #[arg(long)]
        r: Option<usize>,
        /// Replica indices whose full event logs should be written.
        #[arg(long, value_delimiter = ',', value_name = "R,R,...")]
        events: Vec<usize>,
    },
    /// Integrate the exact finite-N moment equations.
    Moments {
        #[arg(long = "N", value_name = "N")]
        n: Option<usize>,
        #[arg(long)]
        t: Option<f64>,
    },
    /// Law-of-large-numbers experiment across the N_list ladder.
    Lln {
        #[arg(long)]
        f: Option<String>,
        #[arg(long)]
        t: Option<f64>,
        #[arg(long)]
        r: Option<usize>,
    },
    /// Central-limit experiment at a single system size.
    Clt {
        #[arg(long = "N", value_name = "N")]
        n: Option<usize>,
        #[arg(long)]
        f: Option<String>,
        #[arg(long)]
        t: Option<f64>,
        #[arg(long)]
        r: Option<usize>,
    },
    /// Hitting-time experiment at a single system size.
    Hitting {
        #[arg(long = "N", value_name = "N")]
        n: Option<usize>,
        #[arg(long)]
        f: Option<String>,
        #[arg(long)]
        r: Option<usize>,
    },
    /// Merge the JSON reports in the output directory into summary.csv.
    Report,
}

/// Entry point for the binary. Parses arguments, runs the subcommand, and
/// maps the outcome to the documented exit codes.
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests print to stdout and succeed.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(err) => {
            eprintln!("error: {err}");
            err.exit_code()
        }
    }
}

struct CmdResult {
    files: Vec<String>,
    /// A failed verdict still writes its report; it only changes the exit.
    verdict: Option<Error>,
}

fn dispatch(cli: &Cli) -> Result<()> {
    let started = Instant::now();
    let config_path = cli
        .config
        .as_deref()
        .ok_or_else(|| Error::Config("--config is required".into()))?;
    let ws = Workspace::load(config_path)?;
    let seed = cli.seed.unwrap_or(ws.cfg.master_seed);
    let workers = resolve_workers(cli.workers, ws.cfg.workers)?;
    let out_dir = cli
        .out
        .clone()
        .or_else(|| ws.cfg.output_dir.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("urnlab-out"));
    std::fs::create_dir_all(&out_dir)?;
    let run = RunContext {
        ws: &ws,
        seed,
        workers,
        out_dir: &out_dir,
    };
    let result = match &cli.cmd {
        Cmd::Validate => run.validate(),
        Cmd::Limit { f, t } => run.limit(f.as_deref(), *t),
        Cmd::Simulate { n, t, r, events } => run.simulate(*n, *t, *r, events),
        Cmd::Moments { n, t } => run.moments(*n, *t),
        Cmd::Lln { f, t, r } => run.lln(f.as_deref(), *t, *r),
        Cmd::Clt { n, f, t, r } => run.clt(*n, f.as_deref(), *t, *r),
        Cmd::Hitting { n, f, r } => run.hitting(*n, f.as_deref(), *r),
        Cmd::Report => run.report(),
    }?;
    write_manifest(&out_dir, cli, &ws, seed, workers, &result.files, started)?;
    match result.verdict {
        Some(err) => Err(err),
        None => Ok(()),
    }
}

fn resolve_workers(flag: Option<usize>, from_config: Option<usize>) -> Result<usize> {
    let chosen = if let Some(w) = flag {
        w
    } else if let Some(text) = std::env::var_os("URNLAB_WORKERS") {
        let text = text.to_string_lossy();
        text.trim().parse().map_err(|_| {
            Error::Config(format!(
                "URNLAB_WORKERS must be a positive integer, got '{text}'"
            ))
        })?
    } else if let Some(w) = from_config {
        w
    } else {
        1
    };
    if chosen == 0 {
        return Err(Error::Config("workers must be at least 1".into()));
    }
    Ok(chosen)
}

fn to_pretty_json<T: Serialize>(value: &T) -> Result<String> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    Ok(text)
}

fn write_text(dir: &Path, name: &str, text: &str, files: &mut Vec<String>) -> Result<()> {
    std::fs::write(dir.join(name), text)?;
    files.push(name.to_string());
    Ok(())
}

/// Resolved experiment parameters echoed into every report file.
#[derive(Serialize)]
struct ParamsEcho<'a> {
    model: &'a ModelFile,
    test_functions: &'a BTreeMap<String, String>,
    targets: &'a [TargetSpec],
    #[serde(rename = "N_list")]
    n_list: &'a [usize],
    grid_size: usize,
    step: f64,
    replicas: usize,
    master_seed: u64,
}

#[derive(Serialize)]
struct ReportFile<'a, T: Serialize> {
    parameters: ParamsEcho<'a>,
    report: T,
}

#[derive(Serialize)]
struct RecordSummary {
    time: f64,
    summaries: Vec<Summary>,
}

#[derive(Serialize)]
struct TargetOutcome {
    f: String,
    level: f64,
    hit: usize,
    not_hit: usize,
    mean_hit_time: Option<f64>,
}

#[derive(Serialize)]
struct SimulateReport {
    experiment: &'static str,
    n_urns: usize,
    t: f64,
    replicas: usize,
    master_seed: u64,
    particle_cap: u64,
    record_times: Vec<f64>,
    observables: Vec<String>,
    records: Vec<RecordSummary>,
    targets: Vec<TargetOutcome>,
    mean_events: f64,
    extinct: usize,
    exploded: Vec<usize>,
    event_logs: Vec<usize>,
}

struct RunContext<'a> {
    ws: &'a Workspace,
    seed: u64,
    workers: usize,
    out_dir: &'a Path,
}

impl<'a> RunContext<'a> {
    fn params_echo(&self) -> ParamsEcho<'a> {
        ParamsEcho {
            model: &self.ws.model_file,
            test_functions: &self.ws.cfg.test_functions,
            targets: &self.ws.cfg.targets,
            n_list: &self.ws.cfg.n_list,
            grid_size: self.ws.cfg.grid_size,
            step: self.ws.cfg.step,
            replicas: self.ws.cfg.replicas,
            master_seed: self.seed,
        }
    }

    fn validate(&self) -> Result<CmdResult> {
        let report = validate_model(&self.ws.spec, VALIDATION_SAMPLES);
        let mut files = Vec::new();
        let payload = ReportFile {
            parameters: self.params_echo(),
            report: &report,
        };
        write_text(
            self.out_dir,
            "validation.json",
            &to_pretty_json(&payload)?,
            &mut files,
        )?;
        let verdict = (!report.pass).then(|| {
            Error::Model(format!(
                "{} kernel violations on a {n} x {n} lattice (see validation.json)",
                report.violation_count,
                n = VALIDATION_SAMPLES
            ))
        });
        Ok(CmdResult { files, verdict })
    }

    fn limit(&self, f_flag: Option<&str>, t_flag: Option<f64>) -> Result<CmdResult> {
        let ws = self.ws;
        let t = ws.observation_time(t_flag)?;
        let m = ws.cfg.grid_size;
        let step = ws.cfg.step;
        let kern = discretize(&ws.spec, m);
        let mut files = Vec::new();

        let rho = solve_rho(&kern, t, step)?;
        let mut csv = String::from("t");
        for a in 1..=m {
            write!(csv, ",rho_{a}").expect("write to string");
        }
        csv.push('\n');
        for (time, state) in rho.times.iter().zip(&rho.states) {
            write!(csv, "{time}").expect("write to string");
            for v in state.values() {
                write!(csv, ",{v}").expect("write to string");
            }
            csv.push('\n');
        }
        write_text(self.out_dir, "rho.csv", &csv, &mut files)?;

        let selected: Vec<(&str, &KernelExpr)> = match f_flag {
            Some(name) => vec![ws.test_function(Some(name))?],
            None => ws.functions.iter().map(|(k, v)| (k.as_str(), v)).collect(),
        };
        for (name, expr) in selected {
            let f = GridFunction::from_expr(expr, m)?;
            let curve = observable_curve(&f, &kern, t, step)?;
            let mut csv = String::from("t,mu_f,theta2_f\n");
            for ((time, mu), th) in curve.times.iter().zip(&curve.mu).zip(&curve.theta) {
                writeln!(csv, "{time},{mu},{}", th.total).expect("write to string");
            }
            write_text(
                self.out_dir,
                &format!("observables_{name}.csv"),
                &csv,
                &mut files,
            )?;
        }
        Ok(CmdResult {
            files,
            verdict: None,
        })
    }

    fn simulate(
        &self,
        n_flag: Option<usize>,
        t_flag: Option<f64>,
        r_flag: Option<usize>,
        event_replicas: &[usize],
    ) -> Result<CmdResult> {
        let ws = self.ws;
        let n = ws.system_size(n_flag)?;
        let t = ws.observation_time(t_flag)?;
        let replicas = ws.replicas(r_flag)?;
        let record_times = ws.record_ladder(t)?;
        let cap = ws.particle_cap(n);
        for &r in event_replicas {
            if r >= replicas {
                return Err(Error::Config(format!(
                    "--events replica {r} out of range (replicas = {replicas})"
                )));
            }
        }
        let kern = discretize(&ws.spec, n);
        let tables = RateTables::build(&kern);
        let names: Vec<&str> = ws.functions.keys().map(String::as_str).collect();
        let functions: Vec<GridFunction> = ws
            .functions
            .values()
            .map(|expr| GridFunction::from_expr(expr, n))
            .collect::<Result<_>>()?;
        let targets: Vec<HitTarget> = ws
            .cfg
            .targets
            .iter()
            .map(|spec| HitTarget {
                function: names
                    .iter()
                    .position(|&name| name == spec.f)
                    .expect("targets validated at load"),
                level: spec.r,
            })
            .collect();
        let base = TrajectoryConfig {
            horizon: t,
            record_times: &record_times,
            functions: &functions,
            targets: &targets,
            particle_cap: cap,
            record_events: false,
            record_snapshots: false,
            stop_when_resolved: false,
            replica: 0,
        };
        let master = SeedKey::new(self.seed);
        let runs = run_ensemble(&kern, &tables, &base, replicas, master, self.workers)?;
        let mut files = Vec::new();

        let mut csv = String::from("replica,t,observable,value\n");
        for (r, traj) in &runs.trajectories {
            for (ri, time) in traj.record_times.iter().enumerate() {
                for (fi, name) in names.iter().enumerate() {
                    writeln!(csv, "{r},{time},{name},{}", traj.mu[ri][fi])
                        .expect("write to string");
                }
            }
        }
        write_text(self.out_dir, "ensemble.csv", &csv, &mut files)?;

        // Event logs come from exact re-runs: the replica key pins the
        // whole path, so recording is free of ensemble-wide memory cost.
        let mut event_logs = Vec::new();
        for &r in event_replicas {
            if runs.exploded.contains(&r) {
                continue;
            }
            let cfg = TrajectoryConfig {
                record_events: true,
                replica: r,
                ..base.clone()
            };
            let traj = run_trajectory(&kern, &tables, &cfg, master.child(r as u64))?;
            let mut csv = String::from("time,source,dest,k,kind\n");
            for ev in traj.events.as_deref().unwrap_or(&[]) {
                let kind = match ev.kind {
                    EventKind::Cross => "cross",
                    EventKind::InPlace => "inplace",
                };
                writeln!(
                    csv,
                    "{},{},{},{},{kind}",
                    ev.time,
                    ev.source + 1,
                    ev.dest + 1,
                    ev.offspring
                )
                .expect("write to string");
            }
            write_text(self.out_dir, &format!("events_{r}.csv"), &csv, &mut files)?;
            event_logs.push(r);
        }

        let mut records = Vec::new();
        for (ri, &time) in record_times.iter().enumerate() {
            let mut summaries = Vec::new();
            for (fi, name) in names.iter().enumerate() {
                summaries.push(summarize(name, &runs.observable_samples(ri, fi))?);
            }
            records.push(RecordSummary { time, summaries });
        }
        let mut target_rows = Vec::new();
        for (ti, tspec) in ws.cfg.targets.iter().enumerate() {
            let (hit_times, not_hit) = runs.hit_samples(ti);
            target_rows.push(TargetOutcome {
                f: tspec.f.clone(),
                level: tspec.r,
                hit: hit_times.len(),
                not_hit,
                mean_hit_time: (!hit_times.is_empty())
                    .then(|| hit_times.iter().sum::<f64>() / hit_times.len() as f64),
            });
        }
        let usable = runs.trajectories.len().max(1) as f64;
        let mean_events = runs
            .trajectories
            .iter()
            .map(|(_, traj)| traj.event_count as f64)
            .sum::<f64>()
            / usable;
        let report = SimulateReport {
            experiment: "simulate",
            n_urns: n,
            t,
            replicas,
            master_seed: self.seed,
            particle_cap: cap,
            record_times: record_times.clone(),
            observables: names.iter().map(|s| s.to_string()).collect(),
            records,
            targets: target_rows,
            mean_events,
            extinct: runs.extinct_count(),
            exploded: runs.exploded.clone(),
            event_logs,
        };
        let payload = ReportFile {
            parameters: self.params_echo(),
            report: &report,
        };
        write_text(
            self.out_dir,
            "simulate.json",
            &to_pretty_json(&payload)?,
            &mut files,
        )?;
        Ok(CmdResult {
            files,
            verdict: None,
        })
    }

    fn moments(&self, n_flag: Option<usize>, t_flag: Option<f64>) -> Result<CmdResult> {
        let ws = self.ws;
        let n = ws.system_size(n_flag)?;
        let t = ws.observation_time(t_flag)?;
        let record_times = ws.record_ladder(t)?;
        let kern = discretize(&ws.spec, n);
        let states = integrate_moments(&kern, &record_times, ws.cfg.step)?;
        let mut files = Vec::new();
        let mut mean_csv = String::from("t,i,mean\n");
        let mut cov_csv = String::from("t,i,j,cov\n");
        for state in &states {
            let time = state.time;
            for i in 0..n {
                writeln!(mean_csv, "{time},{},{}", i + 1, state.mean[i]).expect("write to string");
            }
            let cov = state.covariance();
            for i in 0..n {
                for j in i..n {
                    writeln!(cov_csv, "{time},{},{},{}", i + 1, j + 1, cov[[i, j]])
                        .expect("write to string");
                }
            }
        }
        write_text(self.out_dir, "moments_mean.csv", &mean_csv, &mut files)?;
        write_text(self.out_dir, "moments_cov.csv", &cov_csv, &mut files)?;
        Ok(CmdResult {
            files,
            verdict: None,
        })
    }

    fn lln(
        &self,
        f_flag: Option<&str>,
        t_flag: Option<f64>,
        r_flag: Option<usize>,
    ) -> Result<CmdResult> {
        let ws = self.ws;
        let (f_name, f) = ws.test_function(f_flag)?;
        let t = ws.observation_time(t_flag)?;
        let replicas = ws.replicas(r_flag)?;
        let n_top = *ws.cfg.n_list.iter().max().expect("validated nonempty");
        let params = ExperimentParams {
            spec: &ws.spec,
            f_name,
            f,
            n_urns: n_top,
            t,
            replicas,
            grid_size: ws.cfg.grid_size,
            step: ws.cfg.step,
            master: SeedKey::new(self.seed),
            workers: self.workers,
            particle_cap: ws.particle_cap(n_top),
        };
        let report = lln_experiment(&params, &ws.cfg.n_list)?;
        let mut files = Vec::new();
        let pass = report.pass;
        let payload = ReportFile {
            parameters: self.params_echo(),
            report: &report,
        };
        write_text(self.out_dir, "lln.json", &to_pretty_json(&payload)?, &mut files)?;
        let verdict = (!pass).then(|| Error::StatTestFailed {
            experiment: "lln".into(),
            report: "lln.json".into(),
        });
        Ok(CmdResult { files, verdict })
    }

    fn clt(
        &self,
        n_flag: Option<usize>,
        f_flag: Option<&str>,
        t_flag: Option<f64>,
        r_flag: Option<usize>,
    ) -> Result<CmdResult> {
        let ws = self.ws;
        let n = ws.system_size(n_flag)?;
        let (f_name, f) = ws.test_function(f_flag)?;
        let t = ws.observation_time(t_flag)?;
        let replicas = ws.replicas(r_flag)?;
        let params = ExperimentParams {
            spec: &ws.spec,
            f_name,
            f,
            n_urns: n,
            t,
            replicas,
            grid_size: ws.cfg.grid_size,
            step: ws.cfg.step,
            master: SeedKey::new(self.seed),
            workers: self.workers,
            particle_cap: ws.particle_cap(n),
        };
        let report = clt_experiment(&params)?;
        let mut files = Vec::new();
        let pass = report.pass;
        let payload = ReportFile {
            parameters: self.params_echo(),
            report: &report,
        };
        write_text(self.out_dir, "clt.json", &to_pretty_json(&payload)?, &mut files)?;
        let verdict = (!pass).then(|| Error::StatTestFailed {
            experiment: "clt".into(),
            report: "clt.json".into(),
        });
        Ok(CmdResult { files, verdict })
    }

    fn hitting(
        &self,
        n_flag: Option<usize>,
        f_flag: Option<&str>,
        r_flag: Option<usize>,
    ) -> Result<CmdResult> {
        let ws = self.ws;
        let n = ws.system_size(n_flag)?;
        let (f_name, f) = ws.test_function(f_flag)?;
        let replicas = ws.replicas(r_flag)?;
        let level = ws
            .cfg
            .targets
            .iter()
            .find(|target| target.f == f_name)
            .map(|target| target.r)
            .ok_or_else(|| {
                Error::Config(format!(
                    "no target level declared for test function '{f_name}'"
                ))
            })?;
        let horizon = ws.cfg.horizon.unwrap_or(ws.spec.horizon);
        let params = ExperimentParams {
            spec: &ws.spec,
            f_name,
            f,
            n_urns: n,
            t: horizon,
            replicas,
            grid_size: ws.cfg.grid_size,
            step: ws.cfg.step,
            master: SeedKey::new(self.seed),
            workers: self.workers,
            particle_cap: ws.particle_cap(n),
        };
        let report = hitting_experiment(&params, level, horizon)?;
        let mut files = Vec::new();
        let pass = report.pass;
        let payload = ReportFile {
            parameters: self.params_echo(),
            report: &report,
        };
        write_text(
            self.out_dir,
            "hitting.json",
            &to_pretty_json(&payload)?,
            &mut files,
        )?;
        let verdict = (!pass).then(|| Error::StatTestFailed {
            experiment: "hitting".into(),
            report: "hitting.json".into(),
        });
        Ok(CmdResult { files, verdict })
    }

    fn report(&self) -> Result<CmdResult> {
        let mut names: Vec<String> = std::fs::read_dir(self.out_dir)?
            .filter_map(|entry| entry.ok())
            .map(|entry| entry.file_name().to_string_lossy().into_owned())
            .filter(|name| name.ends_with(".json") && name != "manifest.json")
            .collect();
        names.sort();
        let mut csv = String::from("file,experiment,pass,detail\n");
        for name in &names {
            let text = std::fs::read_to_string(self.out_dir.join(name))?;
            let value: serde_json::Value = serde_json::from_str(&text)?;
            let report = value.get("report").unwrap_or(&value);
            let Some(pass) = report.get("pass").and_then(|p| p.as_bool()) else {
                continue;
            };
            let experiment = report
                .get("experiment")
                .and_then(|e| e.as_str())
                .unwrap_or_else(|| name.trim_end_matches(".json"));
            let detail = if let Some(ks) = report.get("ks") {
                match (
                    ks.get("statistic").and_then(|v| v.as_f64()),
                    ks.get("threshold").and_then(|v| v.as_f64()),
                ) {
                    (Some(d), Some(thr)) => format!("ks_statistic={d:.5};threshold={thr:.5}"),
                    _ => String::new(),
                }
            } else if let Some(count) = report.get("violation_count").and_then(|v| v.as_u64()) {
                format!("violations={count}")
            } else {
                String::new()
            };
            writeln!(csv, "{name},{experiment},{pass},{detail}").expect("write to string");
        }
        let mut files = Vec::new();
        write_text(self.out_dir, "summary.csv", &csv, &mut files)?;
        Ok(CmdResult {
            files,
            verdict: None,
        })
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    subcommand: &'static str,
    config: String,
    model: String,
    master_seed: u64,
    workers: usize,
    outputs: &'a [String],
    created_unix_ms: u64,
    wall_clock_ms: u64,
}

fn subcommand_name(cmd: &Cmd) -> &'static str {
    match cmd {
        Cmd::Validate => "validate",
        Cmd::Limit { .. } => "limit",
        Cmd::Simulate { .. } => "simulate",
        Cmd::Moments { .. } => "moments",
        Cmd::Lln { .. } => "lln",
        Cmd::Clt { .. } => "clt",
        Cmd::Hitting { .. } => "hitting",
        Cmd::Report => "report",
    }
}

fn write_manifest(
    out_dir: &Path,
    cli: &Cli,
    ws: &Workspace,
    seed: u64,
    workers: usize,
    outputs: &[String],
    started: Instant,
) -> Result<()> {
    let created_unix_ms = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0);
    let manifest = Manifest {
        tool: "urnlab",
        version: env!("CARGO_PKG_VERSION"),
        subcommand: subcommand_name(&cli.cmd),
        config: ws.config_path.display().to_string(),
        model: ws.model_path.display().to_string(),
        master_seed: seed,
        workers,
        outputs,
        created_unix_ms,
        wall_clock_ms: started.elapsed().as_millis() as u64,
    };
    std::fs::write(out_dir.join("manifest.json"), to_pretty_json(&manifest)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_fixture(dir: &Path, name: &str, body: &str) -> PathBuf {
        let path = dir.join(name);
        std::fs::write(&path, body).unwrap();
        path
    }

    const MODEL: &str = r#"{"n_urns": 16, "k_max": 2, "lambda": ["0", "1"],
        "psi": ["0", "0", "1"], "phi": "1", "horizon": 1.0, "epsilon0": 1.0}"#;

    #[test]
    fn defaults_fill_unspecified_config_fields() {
        let cfg: ExperimentConfig = serde_json::from_str(r#"{"model": "m.json"}"#).unwrap();
        assert_eq!(cfg.n_list, vec![25, 50, 100, 200]);
        assert_eq!(cfg.grid_size, 64);
        assert_eq!(cfg.step, 1e-3);
        assert_eq!(cfg.replicas, 500);
        assert_eq!(cfg.master_seed, 0);
        assert!(cfg.t.is_none() && cfg.workers.is_none() && cfg.record_times.is_none());
    }

    #[test]
    fn unknown_config_keys_are_rejected() {
        let bad = serde_json::from_str::<ExperimentConfig>(
            r#"{"model": "m.json", "replicass": 10}"#,
        );
        assert!(bad.is_err());
    }

    #[test]
    fn workspace_resolves_model_relative_to_the_config() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(dir.path(), "model.json", MODEL);
        let config = write_fixture(
            dir.path(),
            "config.json",
            r#"{"model": "model.json",
                "test_functions": {"one": "1", "wave": "1+0.5*cos(2*pi*u)"},
                "targets": [{"f": "one", "r": 1.5}],
                "master_seed": 7}"#,
        );
        let ws = Workspace::load(&config).unwrap();
        assert_eq!(ws.spec.n_urns, 16);
        assert_eq!(ws.cfg.master_seed, 7);
        // Alphabetical default: "one" before "wave".
        assert_eq!(ws.test_function(None).unwrap().0, "one");
        assert_eq!(ws.test_function(Some("wave")).unwrap().0, "wave");
        assert!(ws.test_function(Some("missing")).is_err());
        assert_eq!(ws.system_size(None).unwrap(), 200);
        assert_eq!(ws.system_size(Some(32)).unwrap(), 32);
        assert_eq!(
            ws.record_ladder(1.0).unwrap(),
            vec![0.0, 0.25, 0.5, 0.75, 1.0]
        );
        assert_eq!(ws.observation_time(None).unwrap(), 1.0);
        assert_eq!(ws.observation_time(Some(0.25)).unwrap(), 0.25);
        // phi = 1 on 32 urns: floor kicks in.
        assert_eq!(ws.particle_cap(32), 10_000);
        assert_eq!(ws.particle_cap(200), 20_000);
    }

    #[test]
    fn targets_must_reference_declared_functions() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(dir.path(), "model.json", MODEL);
        let config = write_fixture(
            dir.path(),
            "config.json",
            r#"{"model": "model.json", "targets": [{"f": "ghost", "r": 2.0}]}"#,
        );
        let err = Workspace::load(&config).unwrap_err();
        assert!(err.to_string().contains("ghost"), "{err}");
    }

    #[test]
    fn function_names_are_restricted_to_a_filename_safe_charset() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(dir.path(), "model.json", MODEL);
        let config = write_fixture(
            dir.path(),
            "config.json",
            r#"{"model": "model.json", "test_functions": {"bad name": "1"}}"#,
        );
        assert!(Workspace::load(&config).is_err());
    }

    #[test]
    fn worker_resolution_prefers_the_flag_over_the_config() {
        // The env fallback is exercised through the binary, where the
        // variable can be set per process.
        assert_eq!(resolve_workers(Some(3), Some(2)).unwrap(), 3);
        assert_eq!(resolve_workers(None, Some(2)).unwrap(), 2);
        assert_eq!(resolve_workers(None, None).unwrap(), 1);
        assert!(resolve_workers(Some(0), None).is_err());
    }

    #[test]
    fn explicit_record_times_may_not_pass_the_horizon() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(dir.path(), "model.json", MODEL);
        let config = write_fixture(
            dir.path(),
            "config.json",
            r#"{"model": "model.json", "record_times": [0.0, 0.5, 2.0]}"#,
        );
        let ws = Workspace::load(&config).unwrap();
        assert!(ws.record_ladder(1.0).is_err());
        assert_eq!(ws.record_ladder(2.0).unwrap(), vec![0.0, 0.5, 2.0]);
    }
}
