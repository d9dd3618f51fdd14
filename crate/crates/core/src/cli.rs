//! Command-line driver: load a run config, dispatch, write reports.

use std::fs;
use std::path::{Path, PathBuf};

use clap::Parser;
use serde::Serialize;

use crate::config::{Command, RunConfig};
use crate::diagnostics::{apriori_check, comparison_check, stability_compare, NodeBreakdown};
use crate::dominating::{certify, HorizonCertificate, ODESolution, StepSchedule};
use crate::error::{Error, Result};
use crate::global::global_solve;
use crate::local::SolutionTriple;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_REFUSAL: i32 = 3;
pub const EXIT_NON_CONVERGENCE: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "pathfbsde", version, about = "Certified solver for path-dependent FBSDEs")]
pub struct Args {
    /// TOML run configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory (overrides `out` in the config).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub paths: Option<usize>,
}

impl Args {
    /// Loads the config and applies the command-line overrides.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(&self.config)?;
        if let Some(s) = self.seed {
            cfg.ensemble.seed = Some(s);
        }
        if let Some(s) = self.steps {
            cfg.grid.steps = s;
        }
        if let Some(m) = self.paths {
            cfg.ensemble.paths = m;
        }
        if self.out.is_some() {
            cfg.out = self.out.clone();
        }
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Ok,
    Refused,
    NonConvergence,
    Invalid,
    Failed,
}

impl Status {
    pub fn exit_code(self) -> i32 {
        match self {
            Status::Ok => EXIT_OK,
            Status::Refused => EXIT_REFUSAL,
            Status::NonConvergence => EXIT_NON_CONVERGENCE,
            Status::Invalid => EXIT_USAGE,
            Status::Failed => EXIT_FAILURE,
        }
    }

    fn of(e: &Error) -> Status {
        if e.is_refusal() {
            Status::Refused
        } else if e.is_non_convergence() {
            Status::NonConvergence
        } else {
            match e {
                Error::Config(_) | Error::Parameter(_) | Error::Catalog(_) => Status::Invalid,
                _ => Status::Failed,
            }
        }
    }
}

/// Contents of `report.json`.
#[derive(Debug, Clone, Serialize)]
pub struct Report {
    pub command: Command,
    pub status: Status,
    pub exit_code: i32,
    pub config: RunConfig,
    pub error: Option<String>,
    pub certificate: Option<HorizonCertificate>,
    pub result: Option<serde_json::Value>,
}

#[derive(Debug, Clone)]
pub struct Outcome {
    pub report: Report,
    pub files: Vec<PathBuf>,
    /// Human-readable table for the terminal.
    pub summary: Vec<String>,
}

impl Outcome {
    pub fn exit_code(&self) -> i32 {
        self.report.exit_code
    }
}

/// Entry point of the binary.
pub fn main_with(args: Args) -> i32 {
    let cfg = match args.resolve() {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_USAGE;
        }
    };
    let out = cfg.out.clone().unwrap_or_else(|| PathBuf::from("out"));
    match run(&cfg, &out) {
        Ok(o) => {
            for line in &o.summary {
                println!("{line}");
            }
            if let Some(e) = &o.report.error {
                eprintln!("{}: {e}", status_label(o.report.status));
            }
            eprintln!("wrote {}", out.join("report.json").display());
            o.exit_code()
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_FAILURE
        }
    }
}

fn status_label(s: Status) -> &'static str {
    match s {
        Status::Ok => "ok",
        Status::Refused => "refused",
        Status::NonConvergence => "non-convergence",
        Status::Invalid => "invalid configuration",
        Status::Failed => "error",
    }
}

/// Runs one command and writes its files into `out`. Solver outcomes,
/// refusals included, become reports; `Err` is reserved for I/O failures.
pub fn run(cfg: &RunConfig, out: &Path) -> Result<Outcome> {
    fs::create_dir_all(out)?;
    let mut files = Vec::new();
    let mut summary = Vec::new();
    let outcome = cfg
        .validate()
        .and_then(|_| dispatch(cfg, out, &mut files, &mut summary));
    let (status, error, certificate, result) = match outcome {
        Ok((certificate, result)) => (Status::Ok, None, certificate, Some(result)),
        Err(e) => (Status::of(&e), Some(e.to_string()), e.certificate().cloned(), None),
    };
    let report = Report {
        command: cfg.command,
        status,
        exit_code: status.exit_code(),
        config: cfg.clone(),
        error,
        certificate,
        result,
    };
    let path = out.join("report.json");
    let mut text = serde_json::to_string_pretty(&report)?;
    text.push('\n');
    fs::write(&path, text)?;
    files.insert(0, path);
    Ok(Outcome {
        report,
        files,
        summary,
    })
}

type Dispatched = (Option<HorizonCertificate>, serde_json::Value);

fn dispatch(
    cfg: &RunConfig,
    out: &Path,
    files: &mut Vec<PathBuf>,
    text: &mut Vec<String>,
) -> Result<Dispatched> {
    let p = cfg.problem()?;
    let horizon = cfg.grid.horizon;
    let sc = cfg.solve_config();
    match cfg.command {
        Command::Certify => {
            let c = certify(&p, horizon, &sc.certify_options())?;
            files.push(write_ode(out, &c.trajectory)?);
            if let Some(s) = &c.certificate.schedule {
                files.push(write_schedule(out, s)?);
            }
            text.push(certificate_line(&c.certificate));
            let value = serde_json::to_value(&c.trajectory)?;
            Ok((Some(c.certificate), value))
        }
        Command::Solve => {
            let x0 = cfg.x0()?;
            let r = global_solve(&p, horizon, x0, &sc)?;
            files.push(write_solution(out, &r.solution, cfg.dump_paths)?);
            files.push(write_ode(out, &r.trajectory)?);
            if let Some(s) = r.schedule() {
                files.push(write_schedule(out, s)?);
            }
            text.push(format!("problem {}  T = {horizon}  M = {}", p.name, sc.paths));
            text.push(format!("{:>10} {:>14} {:>14} {:>12}", "t", "Y0", "Y0_mc", "stderr"));
            text.push(format!(
                "{:>10} {:>14.6} {:>14.6} {:>12.2e}",
                0.0, r.summary.y0[0], r.summary.y0_mc, r.summary.y0_mc_stderr
            ));
            let cert = r.summary.certificate.clone();
            Ok((Some(cert), serde_json::to_value(&r.summary)?))
        }
        Command::Diagnose => {
            let x0 = cfg.x0()?;
            let apriori = apriori_check(&p, horizon, x0, &sc)?;
            let comparison =
                comparison_check(&p, horizon, x0, cfg.diagnose.pairs, cfg.diagnose.bump, &sc)?;
            files.push(write_nodes(out, "apriori_nodes.csv", &apriori.nodes)?);
            text.push(format!(
                "apriori: lhs = {:.6}  rhs = {:.6}  comparison: {} ({} violations)",
                apriori.lhs,
                apriori.rhs_core,
                if comparison.pass { "pass" } else { "fail" },
                comparison.violations
            ));
            let value = serde_json::json!({ "apriori": apriori, "comparison": comparison });
            Ok((None, value))
        }
        Command::Compare => {
            let c = cfg
                .compare
                .as_ref()
                .ok_or_else(|| Error::Config("compare needs a [compare] section".into()))?;
            let x0 = cfg.x0()?;
            let x1 = c.x0.as_deref().unwrap_or(x0);
            let shifted = p.with_terminal_shift(&c.shift)?;
            let s = stability_compare(&shifted, &p, horizon, (x1, x0), &sc)?;
            files.push(write_nodes(out, "stability_nodes.csv", &s.nodes)?);
            match s.ratio {
                Some(r) => text.push(format!(
                    "stability: delta_lhs = {:.6e}  ratio = {r:.6}",
                    s.delta_lhs
                )),
                None => text.push(format!(
                    "stability: delta_lhs = {:.6e}  (no perturbation)",
                    s.delta_lhs
                )),
            }
            Ok((None, serde_json::to_value(&s)?))
        }
    }
}

fn certificate_line(c: &HorizonCertificate) -> String {
    let fmt = |v: Option<f64>| v.map_or("none".to_string(), |v| format!("{v:.6}"));
    format!(
        "certified {}  T = {}  T_max = {}  K_max = {}",
        c.problem,
        c.horizon,
        fmt(c.t_max),
        fmt(c.k_max)
    )
}

fn num(v: f64) -> String {
    format!("{v}")
}

fn write_ode(out: &Path, sol: &ODESolution) -> Result<PathBuf> {
    let path = out.join("ode.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["t", "y", "K"])?;
    for (t, y) in sol.times.iter().zip(&sol.values) {
        w.write_record([num(*t), num(*y), num(y.max(0.0).sqrt())])?;
    }
    w.flush()?;
    Ok(path)
}

fn write_schedule(out: &Path, s: &StepSchedule) -> Result<PathBuf> {
    let path = out.join("schedule.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["patch", "start", "end", "k_terminal", "delta", "epsilon", "gamma"])?;
    let mut patches: Vec<_> = s.patches.iter().collect();
    patches.reverse();
    for (i, pc) in patches.iter().enumerate() {
        let (eps, gamma) = pc
            .contraction
            .map_or((String::new(), String::new()), |c| (num(c.epsilon), num(c.gamma)));
        w.write_record([
            i.to_string(),
            num(pc.start),
            num(pc.end),
            num(pc.k_terminal),
            num(pc.delta),
            eps,
            gamma,
        ])?;
    }
    w.flush()?;
    Ok(path)
}

fn write_solution(out: &Path, sol: &SolutionTriple, dump: usize) -> Result<PathBuf> {
    let path = out.join("solution.csv");
    let mut w = csv::Writer::from_path(&path)?;
    let (d, n) = (sol.x.dim(), sol.n);
    let mut header = vec!["node".to_string(), "t".into(), "path".into()];
    header.extend((0..d).map(|i| format!("X{i}")));
    header.extend((0..n).map(|i| format!("Y{i}")));
    header.extend((0..n * n).map(|i| format!("Z{}{}", i / n, i % n)));
    w.write_record(&header)?;
    let grid = *sol.grid();
    for m in 0..dump.min(sol.paths()) {
        for k in sol.start..=grid.n_steps() {
            let mut row = vec![k.to_string(), num(grid.time(k)), m.to_string()];
            row.extend(sol.x.value(m, k).iter().map(|v| num(*v)));
            row.extend(sol.y(m, k).iter().map(|v| num(*v)));
            row.extend(sol.z(m, k).iter().map(|v| num(*v)));
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(path)
}

fn write_nodes(out: &Path, name: &str, nodes: &[NodeBreakdown]) -> Result<PathBuf> {
    let path = out.join(name);
    let mut w = csv::Writer::from_path(&path)?;
    for n in nodes {
        w.serialize(n)?;
    }
    w.flush()?;
    Ok(path)
}
