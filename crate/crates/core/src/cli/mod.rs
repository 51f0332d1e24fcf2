//! Command-line front end: `cvarctl <solve|frontier|simulate|converge|gradcheck>`.
//!
//! Exit codes: 0 success, 2 configuration error, 3 solver or I/O error,
//! 4 a reported check failed.

pub mod config;
pub mod csv;
pub mod experiments;

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use self::config::Config;
use self::csv::{Cell, Table};
use self::experiments::{CommandError, FrontierPoint};
use crate::mc;
use crate::par::Execution;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_SOLVER: i32 = 3;
pub const EXIT_CHECK: i32 = 4;

/// Tolerance of the dominance comparison between frontiers.
pub const DOMINANCE_TOL: f64 = 1e-3;

#[derive(Debug, Parser)]
#[command(name = "cvarctl", version, about = "Bilevel HJB solver for CVaR-type stochastic control")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// TOML configuration file; defaults apply to every missing key.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory, created if missing.
    #[arg(long, global = true, default_value = ".")]
    pub out: PathBuf,
    /// Random seed; overrides `mc.seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; results do not depend on this.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Minimise the configured objective; writes solve.csv and policy.csv.
    Solve,
    /// Dynamic and static mean-CVaR frontiers; writes frontier.csv.
    Frontier,
    /// Simulate the dynamic and a static strategy; writes ecdf.csv, paths.csv, simulate.csv.
    Simulate,
    /// Error of the optimal value against the smoothing parameter; writes converge.csv.
    Converge,
    /// Audit the PDE gradient against finite differences; writes gradcheck.csv.
    Gradcheck,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Solve => "solve",
            Command::Frontier => "frontier",
            Command::Simulate => "simulate",
            Command::Converge => "converge",
            Command::Gradcheck => "gradcheck",
        }
    }
}

enum Failure {
    Config(String),
    Solver(String),
    Check(String),
}

impl From<CommandError> for Failure {
    fn from(e: CommandError) -> Self {
        match e {
            CommandError::Config(m) => Failure::Config(m),
            CommandError::Solver(e) => Failure::Solver(e.to_string()),
        }
    }
}

impl From<crate::Error> for Failure {
    fn from(e: crate::Error) -> Self {
        Failure::Solver(e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Solver(format!("i/o: {e}"))
    }
}

/// Parses `args` (including the program name) and runs; returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => run(&cli),
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            code
        }
    }
}

/// Loads the configuration named by `cli` (or the defaults).
pub fn load_config(path: Option<&Path>) -> Result<Config, String> {
    match path {
        None => Ok(Config::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?;
            Config::parse(&text).map_err(|e| format!("{}: {e}", p.display()))
        }
    }
}

pub fn run(cli: &Cli) -> i32 {
    let cfg = match load_config(cli.config.as_deref()) {
        Ok(c) => c,
        Err(m) => {
            eprintln!("config error: {m}");
            return EXIT_CONFIG;
        }
    };
    if cli.threads == Some(0) {
        eprintln!("config error: --threads must be >= 1");
        return EXIT_CONFIG;
    }
    configure_threads(cli.threads);
    let seed = cli.seed.unwrap_or(cfg.mc.seed);
    let outcome = std::fs::create_dir_all(&cli.out)
        .map_err(Failure::from)
        .and_then(|_| dispatch(cli.command, &cfg, seed, &cli.out));
    match outcome {
        Ok(()) => EXIT_OK,
        Err(Failure::Config(m)) => {
            eprintln!("config error: {m}");
            EXIT_CONFIG
        }
        Err(Failure::Solver(m)) => {
            eprintln!("solver error: {m}");
            EXIT_SOLVER
        }
        Err(Failure::Check(m)) => {
            eprintln!("check failed: {m}");
            EXIT_CHECK
        }
    }
}

#[cfg(feature = "parallel")]
fn configure_threads(threads: Option<usize>) {
    if let Some(n) = threads {
        // Only the first call in a process takes effect.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

#[cfg(not(feature = "parallel"))]
fn configure_threads(_threads: Option<usize>) {}

/// Comment lines heading every CSV: command, seed and the resolved config.
pub fn header(cfg: &Config, command: &str, seed: u64) -> Vec<String> {
    vec![
        format!("cvarctl {command}"),
        format!("seed = {seed}"),
        cfg.to_toml().trim_end().to_string(),
    ]
}

fn dispatch(cmd: Command, cfg: &Config, seed: u64, out: &Path) -> Result<(), Failure> {
    let exec = Execution::Parallel;
    let head = header(cfg, cmd.name(), seed);
    match cmd {
        Command::Solve => cmd_solve(cfg, seed, exec, out, &head),
        Command::Frontier => cmd_frontier(cfg, seed, exec, out, &head),
        Command::Simulate => cmd_simulate(cfg, seed, exec, out, &head),
        Command::Converge => cmd_converge(cfg, seed, exec, out, &head),
        Command::Gradcheck => cmd_gradcheck(cfg, seed, exec, out, &head),
    }
}

fn checks(failed: Vec<String>) -> Result<(), Failure> {
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Check(failed.join("; ")))
    }
}

fn cmd_solve(cfg: &Config, seed: u64, exec: Execution, out: &Path, head: &[String]) -> Result<(), Failure> {
    let r = &cfg.risk;
    let s = experiments::solve_weight(cfg, r.lambda, r.epsilon, r.eta, None, None, seed, exec)?;
    let res = &s.result;
    let m = res.y_star.len();
    let mut cols: Vec<String> = (0..m).map(|i| format!("y_star_{i}")).collect();
    cols.extend(
        [
            "V_star",
            "grad_norm",
            "iterations",
            "converged",
            "bound_eps",
            "bound_eta",
            "global_flag",
            "expected_return",
        ]
        .map(String::from),
    );
    let colrefs: Vec<&str> = cols.iter().map(String::as_str).collect();
    let mut t = Table::new(head, &colrefs);
    let mut row: Vec<Cell> = res.y_star.iter().map(|&v| v.into()).collect();
    row.extend([
        res.v_star.into(),
        res.grad_norm.into(),
        res.iterations.into(),
        res.converged.into(),
        res.bound_eps.into(),
        res.bound_eta.into(),
        res.global_flag.into(),
        s.expected_return.into(),
    ]);
    t.push(row);
    t.write(&out.join("solve.csv"))?;

    // Policy snapshot on eleven time levels.
    let policy = res.solution.policy();
    let time = policy.time();
    let mut p = Table::new(head, &["t", "x", "control"]);
    let mut levels: Vec<usize> = (0..=10).map(|j| policy.stride() * ((j * (time.nt - 1)) / (10 * policy.stride()))).collect();
    levels.dedup();
    for level in levels {
        for i in 0..s.grid.nx() {
            p.push(vec![time.time(level).into(), s.grid.node(i).into(), policy.control(level, i)[0].into()]);
        }
    }
    p.write(&out.join("policy.csv"))?;

    println!(
        "y* = {:?}  V* = {}  |DV| = {:.3e}  iterations = {}  converged = {}  E[X_T] = {}  bound = {} + {}",
        res.y_star,
        csv::num(res.v_star),
        res.grad_norm,
        res.iterations,
        res.converged,
        csv::num(s.expected_return),
        csv::num(res.bound_eps),
        csv::num(res.bound_eta)
    );
    let mut failed = Vec::new();
    if !res.converged || !(res.grad_norm <= cfg.descent.grad_tol) {
        failed.push(format!(
            "descent stopped after {} iterations with |DV| = {:e} > {:e}",
            res.iterations, res.grad_norm, cfg.descent.grad_tol
        ));
    }
    checks(failed)
}

/// Failed frontier checks: non-convergence, monotonicity, dominance of the
/// static optimum in the scalarised objective at every weight, and Pareto
/// dominance of every static point whose return lies within the span of the
/// dynamic frontier.
pub fn frontier_failures(points: &[FrontierPoint]) -> Vec<String> {
    let mut failed = Vec::new();
    for p in points {
        if !p.converged {
            failed.push(format!("descent did not converge at lambda = {}", p.lambda));
        }
        if !p.beats_static(DOMINANCE_TOL) {
            failed.push(format!(
                "static optimum beats the dynamic one at lambda = {}: {} < {}",
                p.lambda,
                p.static_objective(),
                p.v_star
            ));
        }
        if experiments::pareto_status(points, p.static_return, p.static_cvar, DOMINANCE_TOL) == Some(false) {
            failed.push(format!("static point at lambda = {} is not Pareto-dominated", p.lambda));
        }
    }
    for w in points.windows(2) {
        if w[1].cvar > w[0].cvar + DOMINANCE_TOL || w[1].expected_return > w[0].expected_return + DOMINANCE_TOL {
            failed.push(format!("frontier not monotone between lambda = {} and {}", w[0].lambda, w[1].lambda));
        }
    }
    failed
}

fn cmd_frontier(cfg: &Config, seed: u64, exec: Execution, out: &Path, head: &[String]) -> Result<(), Failure> {
    let points = experiments::frontier(cfg, seed, exec)?;
    let mut cols = vec![
        "lambda",
        "expected_return",
        "cvar",
        "y_star",
        "V_star",
        "bound",
        "iterations",
        "static_return",
        "static_cvar",
        "static_leverage",
        "static_objective",
        "pareto_dominated",
    ];
    if cfg.mc.cross_check {
        cols.push("mc_cvar");
    }
    let mut t = Table::new(head, &cols);
    for p in &points {
        let mut row: Vec<Cell> = vec![
            p.lambda.into(),
            p.expected_return.into(),
            p.cvar.into(),
            p.y_star.into(),
            p.v_star.into(),
            p.bound.into(),
            p.iterations.into(),
            p.static_return.into(),
            p.static_cvar.into(),
            p.static_leverage.into(),
            p.static_objective().into(),
            match experiments::pareto_status(&points, p.static_return, p.static_cvar, DOMINANCE_TOL) {
                Some(d) => d.into(),
                None => "outside".into(),
            },
        ];
        if let Some(c) = p.mc_cvar {
            row.push(c.into());
        }
        t.push(row);
        println!(
            "lambda = {:<8} return = {:<10} cvar = {:<10} static = ({}, {})",
            csv::num(p.lambda),
            csv::num(p.expected_return),
            csv::num(p.cvar),
            csv::num(p.static_return),
            csv::num(p.static_cvar)
        );
    }
    t.write(&out.join("frontier.csv"))?;
    checks(frontier_failures(&points))
}

fn cmd_converge(cfg: &Config, seed: u64, exec: Execution, out: &Path, head: &[String]) -> Result<(), Failure> {
    let rep = experiments::converge(cfg, seed, exec)?;
    let mut t = Table::new(head, &["epsilon", "eta", "V_eps", "error_vs_reference", "theory_bound", "iterations"]);
    for r in &rep.rows {
        t.push(vec![
            r.epsilon.into(),
            r.eta.into(),
            r.v_eps.into(),
            r.error.into(),
            r.theory_bound.into(),
            r.iterations.into(),
        ]);
        println!(
            "eps = {:<8} V = {:<16} error = {:<16} bound = {}",
            csv::num(r.epsilon),
            csv::num(r.v_eps),
            csv::num(r.error),
            csv::num(r.theory_bound)
        );
    }
    println!("reference = {}  ratios = {:?}", csv::num(rep.reference), rep.ratios);
    t.write(&out.join("converge.csv"))?;
    checks(converge_failures(&rep))
}

/// Failed convergence checks: ratio window, bound validity, monotone error.
pub fn converge_failures(rep: &experiments::ConvergeReport) -> Vec<String> {
    let mut failed = Vec::new();
    for (i, q) in rep.ratios.iter().enumerate() {
        if !(1.5..=2.6).contains(q) {
            failed.push(format!("error ratio {q} between rows {i} and {} outside [1.5, 2.6]", i + 1));
        }
    }
    for r in &rep.rows {
        if !(r.error <= r.theory_bound) {
            failed.push(format!("error {} exceeds the bound {} at eps = {}", r.error, r.theory_bound, r.epsilon));
        }
    }
    if rep.rows.windows(2).any(|w| w[1].error > w[0].error) {
        failed.push("error is not monotone in eps".into());
    }
    failed
}

fn cmd_gradcheck(cfg: &Config, seed: u64, exec: Execution, out: &Path, head: &[String]) -> Result<(), Failure> {
    let rows = experiments::gradcheck(cfg, seed, exec)?;
    let mut t = Table::new(head, &["y", "V", "pde_gradient", "fd_gradient", "rel_deviation"]);
    for r in &rows {
        t.push(vec![
            r.y.into(),
            r.value.into(),
            r.pde_gradient.into(),
            r.fd_gradient.into(),
            r.rel_deviation.into(),
        ]);
    }
    t.write(&out.join("gradcheck.csv"))?;
    let worst = rows.iter().map(|r| r.rel_deviation).fold(0.0, f64::max);
    println!("max relative deviation = {worst:.3e} over {} points", rows.len());
    if worst <= cfg.descent.check_tol {
        Ok(())
    } else {
        Err(Failure::Check(format!(
            "max relative deviation {worst:e} exceeds {}",
            cfg.descent.check_tol
        )))
    }
}

/// Thinned ECDF rows `(value, F_n(value))` with at most `points` entries.
pub fn thinned_ecdf(values: &[f64], points: usize) -> Vec<(f64, f64)> {
    let full = mc::ecdf(values);
    let n = full.len();
    if n <= points {
        return full;
    }
    let mut idx: Vec<usize> = (0..points).map(|j| (j * (n - 1) + (points - 1) / 2) / (points - 1)).collect();
    idx.dedup();
    idx.into_iter().map(|i| full[i]).collect()
}

/// Failed simulation checks: leverage box, static KS band, and at the matched
/// weight equal means and no more dynamic than static mass below the static
/// 5% quantile.
pub fn simulate_failures(cfg: &Config, rep: &experiments::SimulateReport) -> Vec<String> {
    let mut failed = Vec::new();
    let (lo, hi) = (cfg.market.leverage_min, cfg.market.leverage_max);
    for s in &rep.summaries {
        if s.min_leverage < lo || s.max_leverage > hi {
            failed.push(format!("{} leverage left [{lo}, {hi}]", s.name));
        }
    }
    if rep.ks_distance > rep.ks_band {
        failed.push(format!("static KS distance {} exceeds {}", rep.ks_distance, rep.ks_band));
    }
    if cfg.mc.lambda.is_none() {
        let [d, s] = &rep.summaries;
        let se = (d.stderr * d.stderr + s.stderr * s.stderr).sqrt();
        if (d.mean - s.mean).abs() > 3.0 * se {
            failed.push(format!("dynamic mean {} differs from static mean {} by more than 3 stderr", d.mean, s.mean));
        }
        let [dyn_tail, static_tail] = rep.tail_mass;
        if dyn_tail > static_tail {
            failed.push(format!(
                "dynamic CDF {dyn_tail} exceeds static CDF {static_tail} at the static 5% quantile {}",
                rep.tail_point
            ));
        }
    }
    failed
}

fn cmd_simulate(cfg: &Config, seed: u64, exec: Execution, out: &Path, head: &[String]) -> Result<(), Failure> {
    let rep = experiments::simulate(cfg, seed, exec)?;
    let mut head = head.to_vec();
    head.push(format!("dynamic lambda = {}", csv::num(rep.lambda)));
    head.push(format!("dynamic expected return (PDE) = {}", csv::num(rep.pde_expected_return)));

    let mut e = Table::new(&head, &["policy", "value", "cdf"]);
    for (name, batch) in [("dynamic", &rep.dynamic), ("static", &rep.fixed)] {
        for (v, f) in thinned_ecdf(&batch.terminal_values, cfg.mc.ecdf_points) {
            e.push(vec![name.into(), v.into(), f.into()]);
        }
    }
    e.write(&out.join("ecdf.csv"))?;

    let mut p = Table::new(
        &head,
        &["policy", "path", "t", "stock_log_return", "portfolio_log_return", "leverage"],
    );
    for (name, batch) in [("dynamic", &rep.dynamic), ("static", &rep.fixed)] {
        for tr in &batch.paths {
            let steps = tr.controls.len();
            for n in 0..tr.times.len() {
                let lev = tr.controls[n.min(steps - 1)];
                p.push(vec![
                    name.into(),
                    tr.path.into(),
                    tr.times[n].into(),
                    tr.asset_log_return[n].into(),
                    tr.state[n].into(),
                    lev.into(),
                ]);
            }
        }
    }
    p.write(&out.join("paths.csv"))?;

    let mut s = Table::new(
        &head,
        &[
            "policy",
            "mean",
            "stderr",
            "var",
            "cvar",
            "cvar_stderr",
            "cdf_at_static_q05",
            "ks_distance",
            "ks_band",
        ],
    );
    for (i, sm) in rep.summaries.iter().enumerate() {
        let (ks, band) = if i == 1 {
            (Cell::Num(rep.ks_distance), Cell::Num(rep.ks_band))
        } else {
            (Cell::Text(String::new()), Cell::Text(String::new()))
        };
        s.push(vec![
            sm.name.into(),
            sm.mean.into(),
            sm.stderr.into(),
            sm.var.into(),
            sm.cvar.into(),
            sm.cvar_stderr.into(),
            rep.tail_mass[i].into(),
            ks,
            band,
        ]);
        println!(
            "{:<8} mean = {:<16} stderr = {:<10.3e} VaR = {:<16} CVaR = {}",
            sm.name,
            csv::num(sm.mean),
            sm.stderr,
            csv::num(sm.var),
            csv::num(sm.cvar)
        );
    }
    println!(
        "CDF at the static 5% quantile {}: dynamic {}, static {}",
        csv::num(rep.tail_point),
        csv::num(rep.tail_mass[0]),
        csv::num(rep.tail_mass[1])
    );
    s.write(&out.join("simulate.csv"))?;
    checks(simulate_failures(cfg, &rep))
}
