//! Command-line front end.
//!
//! Exit status: 0 on success, 1 when a solver reports an inconsistency (or an
//! example / Monte Carlo expectation fails), 2 on invalid input.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::birthdeath::{calibrate_bd, calibrate_bd_exact_from, BirthDeathChain, PiecewiseLinearValue};
use crate::conventions::{uniform_grid, Tolerances};
use crate::diffusion::{eigen_from_string, eigen_stock, stock_vol_from_eigen, Eigenfunction, SpeedMeasure};
use crate::error::Error;
use crate::forward::{solve_forward, ForwardOptions, Process};
use crate::golden::{run_examples, ExamplesOptions};
use crate::inverse::{invert, load_values, recover_measure, InterpMode, InverseOptions, ThetaEnd, Verdict};
use crate::mc::{estimate_ctmc_laplace, estimate_laplace, estimate_stopped_value, SimConfig};
use crate::payoffs::{FamilyDescriptor, PayoffFamily};
use crate::uconvex::{fmt_ext, Axis, GridFunction};

#[derive(Debug, Parser)]
#[command(name = "stopcal", version, about = "Optimal-stopping value curves and diffusion calibration")]
pub struct Cli {
    /// JSON run configuration; flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Value curve V(θ) from a speed measure or eigenfunction.
    Forward(ForwardArgs),
    /// Consistency check and calibration from a sampled value curve.
    Inverse(InverseArgs),
    /// Birth-death chain from a piecewise-linear call value curve.
    Birthdeath(BirthDeathArgs),
    /// Monte Carlo check of hitting-time Laplace transforms.
    Verify(VerifyArgs),
    /// Rerun the worked examples and print a pass/fail table.
    Examples(ExamplesArgs),
    /// Local volatility from a stock eigenfunction, or the reverse.
    Stockvol(StockArgs),
}

/// `min:max:step`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub min: f64,
    pub max: f64,
    pub step: f64,
}

impl GridSpec {
    pub fn points(&self) -> crate::Result<Vec<f64>> {
        uniform_grid(self.min, self.max, self.step)
    }
}

impl FromStr for GridSpec {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        let p: Vec<&str> = s.split(':').collect();
        if p.len() != 3 {
            return Err(format!("expected min:max:step, got `{s}`"));
        }
        let f = |t: &str| t.trim().parse::<f64>().map_err(|e| format!("`{t}`: {e}"));
        Ok(GridSpec { min: f(p[0])?, max: f(p[1])?, step: f(p[2])? })
    }
}

/// Contents of `--config`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub rho: Option<f64>,
    pub delta: Option<f64>,
    pub x_grid: Option<GridSpec>,
    pub theta_grid: Option<GridSpec>,
    pub tolerances: Option<Tolerances>,
    pub payoff: Option<FamilyDescriptor>,
    pub seed: Option<u64>,
    pub paths: Option<usize>,
    pub dt: Option<f64>,
}

#[derive(Debug, Args)]
pub struct PayoffArgs {
    /// Builtin family name.
    #[arg(long)]
    pub payoff: Option<String>,
    /// Family parameters as a JSON object.
    #[arg(long)]
    pub params: Option<String>,
    /// JSON family descriptor {name, params, domains}.
    #[arg(long, conflicts_with = "payoff")]
    pub payoff_file: Option<PathBuf>,
    /// Tabulated family CSV `x,theta,G`.
    #[arg(long, conflicts_with_all = ["payoff", "payoff_file"])]
    pub payoff_table: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ForwardArgs {
    /// Speed measure JSON.
    #[arg(long, conflicts_with = "phi")]
    pub measure: Option<PathBuf>,
    /// Eigenfunction CSV `x,phi`.
    #[arg(long)]
    pub phi: Option<PathBuf>,
    #[command(flatten)]
    pub payoff: PayoffArgs,
    #[arg(long)]
    pub rho: Option<f64>,
    #[arg(long)]
    pub theta_grid: Option<GridSpec>,
    /// Refine maximizers between grid nodes.
    #[arg(long)]
    pub refine: bool,
    /// Output CSV `theta,V,x_star,attained` (stdout if omitted).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Tidy CSV `curve,coord,value` with v, x*, φ.
    #[arg(long)]
    pub curves: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InverseArgs {
    /// Value curve CSV `theta,V`.
    #[arg(long)]
    pub values: PathBuf,
    #[command(flatten)]
    pub payoff: PayoffArgs,
    #[arg(long)]
    pub rho: Option<f64>,
    #[arg(long)]
    pub x_grid: Option<GridSpec>,
    /// spline | linear-in-v | nodes
    #[arg(long, default_value = "spline")]
    pub interp: InterpMode,
    /// sampled | open:<b> | unbounded
    #[arg(long, default_value = "sampled")]
    pub lower: ThetaEnd,
    /// sampled | open:<b> | unbounded
    #[arg(long, default_value = "sampled")]
    pub upper: ThetaEnd,
    /// Report JSON (stdout if omitted); φ CSV and measure JSON are written next to it.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Tidy CSV `curve,coord,value` with v, v^g, φ, x*, σ².
    #[arg(long)]
    pub curves: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BirthDeathArgs {
    /// Value curve CSV `theta,V`.
    #[arg(long)]
    pub values: PathBuf,
    #[arg(long)]
    pub rho: Option<f64>,
    /// Exact rational arithmetic; numbers are written as `p/q` strings.
    #[arg(long)]
    pub exact: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// Speed measure JSON (density only).
    #[arg(long, conflicts_with = "chain", required_unless_present = "chain")]
    pub measure: Option<PathBuf>,
    /// Chain JSON written by `birthdeath`.
    #[arg(long)]
    pub chain: Option<PathBuf>,
    #[arg(long)]
    pub rho: Option<f64>,
    /// Target level for a measure.
    #[arg(long)]
    pub x: Option<f64>,
    /// Target state index for a chain.
    #[arg(long)]
    pub state: Option<usize>,
    #[arg(long)]
    pub paths: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub dt: Option<f64>,
    #[arg(long)]
    pub t_max: Option<f64>,
    #[arg(long)]
    pub shards: Option<usize>,
    #[arg(long)]
    pub max_jumps: Option<u64>,
    /// Plain Euler hitting without the bridge correction.
    #[arg(long)]
    pub no_bridge: bool,
    /// With a payoff: estimate the value of stopping at `--x`.
    #[arg(long)]
    pub theta: Option<f64>,
    #[command(flatten)]
    pub payoff: PayoffArgs,
    /// Exit 1 unless the estimate is within 3 standard errors of this value.
    #[arg(long)]
    pub expect: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ExamplesArgs {
    /// Fewer Monte Carlo paths.
    #[arg(long)]
    pub quick: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    /// JSON instead of a table.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct StockArgs {
    /// Eigenfunction CSV `x,phi`; writes `x,eta`.
    #[arg(long, conflicts_with = "eta", required_unless_present = "eta")]
    pub phi: Option<PathBuf>,
    /// Volatility CSV `coord,value` on x > 0; writes `x,phi`.
    #[arg(long)]
    pub eta: Option<PathBuf>,
    #[arg(long)]
    pub rho: Option<f64>,
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Why a command did not succeed.
#[derive(Debug)]
pub enum Failure {
    /// Exit 2.
    Invalid(String),
    /// Exit 1; the payload has already been printed.
    Inconsistent,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Invalid(e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Invalid(format!("io: {e}"))
    }
}

type Outcome = Result<(), Failure>;

fn invalid(s: impl Into<String>) -> Failure {
    Failure::Invalid(s.into())
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, Failure> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let s = fs::read_to_string(p).map_err(|e| invalid(format!("config {}: {e}", p.display())))?;
            serde_json::from_str(&s).map_err(|e| invalid(format!("config {}: {e}", p.display())))
        }
    }
}

fn need<T>(flag: Option<T>, cfg: Option<T>, name: &str) -> Result<T, Failure> {
    flag.or(cfg).ok_or_else(|| invalid(format!("missing --{name}")))
}

fn rho_of(flag: Option<f64>, cfg: &RunConfig) -> Result<f64, Failure> {
    let rho = need(flag, cfg.rho, "rho")?;
    if !(rho > 0.0) || !rho.is_finite() {
        return Err(invalid("rho must be positive and finite"));
    }
    Ok(rho)
}

fn payoff_of(a: &PayoffArgs, cfg: &RunConfig) -> Result<PayoffFamily, Failure> {
    if let Some(t) = &a.payoff_table {
        let name = t.file_stem().and_then(|s| s.to_str()).unwrap_or("tabulated");
        return Ok(PayoffFamily::tabulated(name, fs::File::open(t)?)?);
    }
    if let Some(f) = &a.payoff_file {
        let d: FamilyDescriptor =
            serde_json::from_str(&fs::read_to_string(f)?).map_err(|e| invalid(format!("{}: {e}", f.display())))?;
        return Ok(d.build()?);
    }
    if let Some(name) = &a.payoff {
        let params: Value = match &a.params {
            Some(s) => serde_json::from_str(s).map_err(|e| invalid(format!("--params: {e}")))?,
            None => json!({}),
        };
        return Ok(FamilyDescriptor { name: name.clone(), params, domains: None }.build()?);
    }
    match &cfg.payoff {
        Some(d) => Ok(d.build()?),
        None => Err(invalid("missing --payoff")),
    }
}

fn tolerances(cfg: &RunConfig) -> Result<Tolerances, Failure> {
    let t = cfg.tolerances.unwrap_or_default();
    t.validate()?;
    Ok(t)
}

fn emit(out: Option<&Path>, text: &str) -> Outcome {
    match out {
        Some(p) => fs::write(p, text)?,
        None => {
            let mut s = std::io::stdout().lock();
            let r = s.write_all(text.as_bytes()).and_then(|_| match text.ends_with('\n') {
                true => Ok(()),
                false => s.write_all(b"\n"),
            });
            match r {
                Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => return Err(e.into()),
                _ => {}
            }
        }
    }
    Ok(())
}

/// Tidy long-format CSV.
struct Curves(Vec<(&'static str, f64, f64)>);

impl Curves {
    fn add(&mut self, name: &'static str, x: &[f64], y: impl IntoIterator<Item = f64>) {
        self.0.extend(x.iter().zip(y).map(|(a, b)| (name, *a, b)));
    }

    fn save(&self, p: &Path) -> Outcome {
        let mut w = csv::Writer::from_path(p).map_err(|e| invalid(e.to_string()))?;
        let io = |e: csv::Error| invalid(e.to_string());
        w.write_record(["curve", "coord", "value"]).map_err(io)?;
        for (c, x, y) in &self.0 {
            w.write_record([c.to_string(), fmt_ext(*x), fmt_ext(*y)]).map_err(io)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn forward(a: &ForwardArgs, cfg: &RunConfig) -> Outcome {
    let rho = rho_of(a.rho, cfg)?;
    let p = payoff_of(&a.payoff, cfg)?;
    let th = need(a.theta_grid, cfg.theta_grid, "theta-grid")?.points()?;
    let opts = ForwardOptions { tol: tolerances(cfg)?, refine: a.refine, ..Default::default() };
    let eig = match (&a.measure, &a.phi) {
        (Some(m), _) => eigen_from_string(&SpeedMeasure::load(m)?, rho)?,
        (None, Some(f)) => Eigenfunction::load(f)?,
        (None, None) => return Err(invalid("one of --measure or --phi is required")),
    };
    let sol = solve_forward(Process::Eigen(&eig), &p, rho, &th, &opts)?;
    let mut buf = Vec::new();
    sol.write_csv(&mut buf)?;
    emit(a.out.as_deref(), &String::from_utf8_lossy(&buf))?;
    if let Some(c) = &a.curves {
        let mut cv = Curves(Vec::new());
        cv.add("v", &sol.theta, sol.v.iter().copied());
        cv.add("x_star", &sol.theta, sol.x_star.iter().map(|x| x.unwrap_or(f64::INFINITY)));
        cv.add("phi", eig.grid(), eig.phi.values().iter().copied());
        cv.save(c)?;
    }
    Ok(())
}

fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("report");
    out.with_file_name(format!("{stem}.{suffix}"))
}

fn inverse(a: &InverseArgs, cfg: &RunConfig) -> Outcome {
    let rho = rho_of(a.rho, cfg)?;
    let p = payoff_of(&a.payoff, cfg)?;
    let x = need(a.x_grid, cfg.x_grid, "x-grid")?.points()?;
    let v = load_values(&a.values)?;
    let tol = tolerances(cfg)?;
    let opts = InverseOptions { tol, interp: a.interp, lower: a.lower, upper: a.upper, ..Default::default() };
    let report = match invert(&v, &p, rho, &x, &opts) {
        Ok(r) => r,
        Err(e @ Error::NotUConvex { .. }) => {
            println!("{}", json!({"verdict": "inconsistent", "reason": format!("v is not g-convex: {e}")}));
            return Err(Failure::Inconsistent);
        }
        Err(e) => return Err(e.into()),
    };
    let mut doc = serde_json::to_value(&report).map_err(Error::from)?;
    let (mut phi_csv, mut measure_json) = (Value::Null, Value::Null);
    let measure = match (report.verdict, &report.candidate) {
        (Verdict::Consistent, Some(_)) => Some(recover_measure(&report, rho, &tol)?),
        _ => None,
    };
    if let Some(out) = &a.out {
        if let (Some(c), Some(m)) = (&report.candidate, &measure) {
            let (fp, mp) = (sibling(out, "phi.csv"), sibling(out, "measure.json"));
            c.save(&fp)?;
            fs::write(&mp, m.to_json()?)?;
            phi_csv = json!(fp.display().to_string());
            measure_json = json!(mp.display().to_string());
        }
    }
    doc["phi_csv"] = phi_csv;
    doc["measure_json"] = measure_json;
    let text = serde_json::to_string_pretty(&doc).map_err(Error::from)?;
    if let Some(c) = &a.curves {
        let cj = &report.conjugate;
        let mut cv = Curves(Vec::new());
        cv.add("v", &cj.theta, cj.v.iter().copied());
        cv.add("v_g", &cj.x, cj.vg.iter().copied());
        cv.add("x_star", &cj.theta, cj.x_lo.iter().copied());
        if let Some(e) = &report.candidate {
            cv.add("phi", e.grid(), e.phi.values().iter().copied());
        }
        if let Some(m) = &measure {
            cv.add("sigma2", m.density.grid(), m.density.values().iter().map(|d| 1.0 / d));
        }
        cv.save(c)?;
    }
    match &a.out {
        Some(out) => {
            fs::write(out, &text)?;
            println!("{}", json!({"verdict": report.verdict, "reason": report.reason, "report": out.display().to_string()}));
        }
        None => emit(None, &text)?,
    }
    if report.verdict == Verdict::Inconsistent {
        return Err(Failure::Inconsistent);
    }
    Ok(())
}

fn birthdeath(a: &BirthDeathArgs, cfg: &RunConfig) -> Outcome {
    let rho = rho_of(a.rho, cfg)?;
    let v = PiecewiseLinearValue::load(&a.values)?;
    let text = if a.exact {
        let c = calibrate_bd_exact_from(&v, rho)?;
        let s = |xs: &[num_rational::BigRational]| xs.iter().map(|r| r.to_string()).collect::<Vec<_>>();
        serde_json::to_string_pretty(&json!({
            "rho": c.rho.to_string(),
            "states": s(&c.states),
            "p": s(&c.p),
            "lambda": s(&c.lambda),
            "masses": s(&c.masses),
            "phi": s(&c.phi),
            "closed_last": true,
        }))
        .map_err(Error::from)?
    } else {
        calibrate_bd(&v, rho)?.to_json()?
    };
    emit(a.out.as_deref(), &text)
}

fn verify(a: &VerifyArgs, cfg: &RunConfig) -> Outcome {
    let rho = rho_of(a.rho, cfg)?;
    let d = SimConfig::default();
    let sim = SimConfig {
        seed: a.seed.or(cfg.seed).unwrap_or(d.seed),
        paths: a.paths.or(cfg.paths).unwrap_or(d.paths),
        dt: a.dt.or(cfg.dt).unwrap_or(d.dt),
        t_max: a.t_max.unwrap_or(d.t_max),
        shards: a.shards.unwrap_or(d.shards),
        max_jumps: a.max_jumps.unwrap_or(d.max_jumps),
        bridge: !a.no_bridge,
    };
    let (estimate, text) = if let Some(c) = &a.chain {
        let chain: BirthDeathChain = serde_json::from_str(&fs::read_to_string(c)?).map_err(Error::from)?;
        let n = a.state.ok_or_else(|| invalid("missing --state"))?;
        let e = estimate_ctmc_laplace(&chain, rho, n, &sim)?;
        (e, serde_json::to_string_pretty(&e).map_err(Error::from)?)
    } else {
        let m = SpeedMeasure::load(a.measure.as_ref().expect("clap enforces one source"))?;
        let x = a.x.ok_or_else(|| invalid("missing --x"))?;
        match a.theta {
            Some(theta) => {
                let p = payoff_of(&a.payoff, cfg)?;
                let s = estimate_stopped_value(&m, &p, theta, x, rho, &sim)?;
                (s.estimate, serde_json::to_string_pretty(&s).map_err(Error::from)?)
            }
            None => {
                let e = estimate_laplace(&m, rho, x, &sim)?;
                (e, serde_json::to_string_pretty(&e).map_err(Error::from)?)
            }
        }
    };
    emit(None, &text)?;
    match a.expect {
        Some(t) if !estimate.within(t, 3.0) => Err(Failure::Inconsistent),
        _ => Ok(()),
    }
}

fn examples(a: &ExamplesArgs, cfg: &RunConfig) -> Outcome {
    let o = ExamplesOptions { seed: a.seed.or(cfg.seed).unwrap_or(42), quick: a.quick };
    let r = run_examples(&o);
    if a.json {
        emit(None, &serde_json::to_string_pretty(&r).map_err(Error::from)?)?;
    } else {
        let w = r.iter().map(|c| c.name.len()).max().unwrap_or(0);
        for c in &r {
            println!("{:w$}  {}  {:7.2}s  {}", c.name, if c.passed { "PASS" } else { "FAIL" }, c.seconds, c.detail);
        }
    }
    if r.iter().all(|c| c.passed) {
        Ok(())
    } else {
        Err(Failure::Inconsistent)
    }
}

fn stockvol(a: &StockArgs, cfg: &RunConfig) -> Outcome {
    let rho = rho_of(a.rho, cfg)?;
    let delta = need(a.delta, cfg.delta, "delta")?;
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| invalid(e.to_string());
    if let Some(f) = &a.phi {
        let e = Eigenfunction::load(f)?;
        let vc = stock_vol_from_eigen(&e.phi, rho, delta)?;
        w.write_record(["x", "eta"]).map_err(io)?;
        for (x, eta) in vc.x.iter().zip(&vc.eta) {
            w.write_record([fmt_ext(*x), eta.map(fmt_ext).unwrap_or_default()]).map_err(io)?;
        }
    } else if let Some(f) = &a.eta {
        let eta = GridFunction::load(f, Axis::X)?;
        let phi = eigen_stock(&eta, rho, delta)?;
        w.write_record(["x", "phi"]).map_err(io)?;
        for (x, y) in phi.grid().iter().zip(phi.values()) {
            w.write_record([fmt_ext(*x), fmt_ext(*y)]).map_err(io)?;
        }
    }
    let buf = w.into_inner().map_err(|e| invalid(e.to_string()))?;
    emit(a.out.as_deref(), &String::from_utf8_lossy(&buf))
}

/// Dispatches a parsed command line and returns the exit status.
pub fn run(cli: &Cli) -> i32 {
    let res = load_config(cli.config.as_deref()).and_then(|cfg| match &cli.command {
        Command::Forward(a) => forward(a, &cfg),
        Command::Inverse(a) => inverse(a, &cfg),
        Command::Birthdeath(a) => birthdeath(a, &cfg),
        Command::Verify(a) => verify(a, &cfg),
        Command::Examples(a) => examples(a, &cfg),
        Command::Stockvol(a) => stockvol(a, &cfg),
    });
    match res {
        Ok(()) => 0,
        Err(Failure::Inconsistent) => 1,
        Err(Failure::Invalid(msg)) => {
            eprintln!("stopcal: {msg}");
            2
        }
    }
}
