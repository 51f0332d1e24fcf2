//! The computations behind each subcommand, returning plain data so that they
//! can be driven from tests as well as from the command line.

use crate::cli::config::Config;
use crate::dynamics::SdeModel;
use crate::hjb::{ControlMesh, SolverGrid};
use crate::mc::{self, Policy, SimBatch, SimOptions};
use crate::normal;
use crate::outer::{suboptimality_bound, BilevelProblem, BilevelResult};
use crate::par::{self, Execution};
use crate::risk::golden_section_min;
use crate::{Error, Result};

/// One solved outer problem together with its discretisation.
#[derive(Debug, Clone)]
pub struct Solved {
    pub lambda: f64,
    pub epsilon: f64,
    pub eta: f64,
    pub result: BilevelResult,
    /// `E[X_T]` under the optimal feedback, from the statistic equation
    /// carried along the HJB sweep.
    pub expected_return: f64,
    pub model: SdeModel,
    pub grid: SolverGrid,
    pub mesh: ControlMesh,
}

/// Minimises the configured integrand with weight `lambda`, smoothing
/// `epsilon` and noise `eta`. `grid` overrides the configured grid; `y0`
/// overrides the default starting point when the configuration sets none.
pub fn solve_weight(
    cfg: &Config,
    lambda: f64,
    epsilon: f64,
    eta: f64,
    grid: Option<&SolverGrid>,
    y0: Option<Vec<f64>>,
    seed: u64,
    exec: Execution,
) -> Result<Solved> {
    let model = cfg.model(eta)?;
    let grid = match grid {
        Some(g) => g.clone(),
        None => cfg.grid(&model)?,
    };
    let mesh = cfg.mesh(&model)?;
    let spec = cfg.risk_spec(lambda)?.inf_convolve(epsilon)?;
    let problem = BilevelProblem {
        smoothed: &spec,
        model: &model,
        grid: &grid,
        mesh: &mesh,
        exec,
    };
    let mut dc = cfg.descent_config(seed);
    if dc.y0.is_none() {
        dc.y0 = y0;
    }
    let result = problem.minimize(&dc)?;
    let expected_return = result.expected_state;
    Ok(Solved {
        lambda,
        epsilon,
        eta,
        result,
        expected_return,
        model,
        grid,
        mesh,
    })
}

/// Terminal law of a constant-leverage strategy: `(mean, sd)` of `X_T`,
/// without the added noise.
pub fn static_law(cfg: &Config, a: f64) -> (f64, f64) {
    let m = &cfg.market;
    let mean = (m.r + a * (m.mu - m.r) - 0.5 * a * a * m.sigma * m.sigma) * m.horizon;
    (mean, m.sigma * a.abs() * m.horizon.sqrt())
}

/// `(expected log-return, CVaR of the loss)` of a constant leverage `a`.
pub fn static_point(cfg: &Config, a: f64) -> Result<(f64, f64)> {
    let (mean, sd) = static_law(cfg, a);
    Ok((mean, mc::normal_cvar(-mean, sd, cfg.risk.alpha)?))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StaticOptimum {
    pub leverage: f64,
    pub expected_return: f64,
    pub cvar: f64,
}

/// Best constant leverage for `-E[X_T] + lambda CVaR`. The objective is convex
/// in the leverage, so golden-section search on each side of the kink at zero
/// is exact up to its tolerance.
pub fn static_optimum(cfg: &Config, lambda: f64) -> Result<StaticOptimum> {
    let (lo, hi) = (cfg.market.leverage_min, cfg.market.leverage_max);
    let objective = |a: f64| {
        let (ret, cvar) = static_point(cfg, a).expect("alpha validated");
        -ret + lambda * cvar
    };
    let mut candidates = vec![lo, hi];
    if lo < 0.0 && 0.0 < hi {
        candidates.push(0.0);
        candidates.push(golden_section_min(objective, lo, 0.0, 1e-12).0);
        candidates.push(golden_section_min(objective, 0.0, hi, 1e-12).0);
    } else {
        candidates.push(golden_section_min(objective, lo, hi, 1e-12).0);
    }
    let best = candidates
        .into_iter()
        .fold(f64::NAN, |b, a| if b.is_nan() || objective(a) < objective(b) { a } else { b });
    let (expected_return, cvar) = static_point(cfg, best)?;
    Ok(StaticOptimum {
        leverage: best,
        expected_return,
        cvar,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrontierPoint {
    pub lambda: f64,
    pub expected_return: f64,
    /// `(V* - E[-X_T]) / lambda`.
    pub cvar: f64,
    pub y_star: f64,
    pub v_star: f64,
    pub bound: f64,
    pub iterations: usize,
    pub converged: bool,
    pub static_leverage: f64,
    pub static_return: f64,
    pub static_cvar: f64,
    /// Sample CVaR of the simulated dynamic strategy, when requested.
    pub mc_cvar: Option<f64>,
}

impl FrontierPoint {
    /// Scalarised objective `-E + lambda CVaR` of the static optimum.
    pub fn static_objective(&self) -> f64 {
        -self.static_return + self.lambda * self.static_cvar
    }

    /// Whether the dynamic optimum at this weight is at least as good as the
    /// static one, `V* <= -E_static + lambda CVaR_static + tol`.
    pub fn beats_static(&self, tol: f64) -> bool {
        self.v_star <= self.static_objective() + tol
    }
}

fn frontier_point(cfg: &Config, s: &Solved, seed: u64, exec: Execution) -> Result<FrontierPoint> {
    let st = static_optimum(cfg, s.lambda)?;
    let base = cfg.risk_spec(s.lambda)?;
    let mc_cvar = if cfg.mc.cross_check {
        let batch = simulate_policy(cfg, s, seed, 0, exec)?;
        let losses: Vec<f64> = batch.terminal_values.iter().map(|x| -x).collect();
        Some(mc::sample_cvar(&losses, cfg.risk.alpha)?)
    } else {
        None
    };
    Ok(FrontierPoint {
        lambda: s.lambda,
        expected_return: s.expected_return,
        cvar: (s.result.v_star + s.expected_return) / s.lambda,
        y_star: s.result.y_star[0],
        v_star: s.result.v_star,
        bound: suboptimality_bound(&base, &s.model, s.epsilon, s.eta)?,
        iterations: s.result.iterations,
        converged: s.result.converged,
        static_leverage: st.leverage,
        static_return: st.expected_return,
        static_cvar: st.cvar,
        mc_cvar,
    })
}

fn require_mean_cvar(cfg: &Config) -> std::result::Result<(), String> {
    if cfg.risk.kind == "mean_cvar" {
        Ok(())
    } else {
        Err(format!("field `risk.kind`: this command needs mean_cvar, got {}", cfg.risk.kind))
    }
}

/// Dynamic and static frontier over the configured weights, sorted by weight.
pub fn frontier(cfg: &Config, seed: u64, exec: Execution) -> std::result::Result<Vec<FrontierPoint>, CommandError> {
    require_mean_cvar(cfg).map_err(CommandError::Config)?;
    let mut lambdas = cfg.lambdas();
    lambdas.sort_by(f64::total_cmp);
    let (eps, eta) = (cfg.risk.epsilon, cfg.risk.eta);
    let points = par::map_indexed(exec, lambdas.len(), |i| {
        let s = solve_weight(cfg, lambdas[i], eps, eta, None, None, seed, exec)?;
        frontier_point(cfg, &s, seed, exec)
    });
    points.into_iter().collect::<Result<Vec<_>>>().map_err(CommandError::Solver)
}

/// Whether some point on the piecewise-linear dynamic frontier has return at
/// least `ret - tol` and CVaR at most `cvar + tol`.
pub fn dominated(dynamic: &[FrontierPoint], ret: f64, cvar: f64, tol: f64) -> bool {
    let mut pts: Vec<(f64, f64)> = dynamic.iter().map(|p| (p.expected_return, p.cvar)).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    if pts.iter().any(|&(r, c)| r >= ret - tol && c <= cvar + tol) {
        return true;
    }
    pts.windows(2).any(|w| {
        let ((r0, c0), (r1, c1)) = (w[0], w[1]);
        if !(r0 <= ret && ret <= r1) || r1 == r0 {
            return false;
        }
        let c = c0 + (c1 - c0) * (ret - r0) / (r1 - r0);
        c <= cvar + tol
    })
}

/// Pareto status of a static point against the dynamic frontier: `None` when
/// its return lies outside the span of dynamic returns (up to `tol`), where
/// no point of the computed frontier can be compared with it.
pub fn pareto_status(dynamic: &[FrontierPoint], ret: f64, cvar: f64, tol: f64) -> Option<bool> {
    let (lo, hi) = dynamic
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.expected_return), b.max(p.expected_return)));
    (lo - tol <= ret && ret <= hi + tol).then(|| dominated(dynamic, ret, cvar, tol))
}

/// The dynamic solution whose expected return equals `target` within `tol`,
/// by bisection in `log lambda` over `[lo, hi]`. Returns the closest point
/// found after `max_iter` bisections.
pub fn matched_weight(
    cfg: &Config,
    target: f64,
    lo: f64,
    hi: f64,
    tol: f64,
    max_iter: usize,
    seed: u64,
    exec: Execution,
) -> std::result::Result<Solved, CommandError> {
    require_mean_cvar(cfg).map_err(CommandError::Config)?;
    let (eps, eta) = (cfg.risk.epsilon, cfg.risk.eta);
    let solve = |l: f64, y0: Option<Vec<f64>>| {
        solve_weight(cfg, l, eps, eta, None, y0, seed, exec).map_err(CommandError::Solver)
    };
    let mut s_lo = solve(lo, None)?;
    let mut s_hi = solve(hi, None)?;
    // The expected return decreases as the risk weight grows.
    if !(s_lo.expected_return >= target && target >= s_hi.expected_return) {
        return Err(CommandError::Solver(Error::param(
            "target_return",
            format!(
                "{target} is outside the attainable range [{}, {}] for weights in [{lo}, {hi}]",
                s_hi.expected_return, s_lo.expected_return
            ),
        )));
    }
    let closer = |a: &Solved, b: &Solved| {
        if (a.expected_return - target).abs() <= (b.expected_return - target).abs() {
            a.clone()
        } else {
            b.clone()
        }
    };
    let mut best = closer(&s_lo, &s_hi);
    for _ in 0..max_iter {
        if (best.expected_return - target).abs() <= tol {
            break;
        }
        let mid = (s_lo.lambda.ln() * 0.5 + s_hi.lambda.ln() * 0.5).exp();
        let y0 = Some(vec![0.5 * (s_lo.result.y_star[0] + s_hi.result.y_star[0])]);
        let s = solve(mid, y0)?;
        best = closer(&best, &s);
        if s.expected_return >= target {
            s_lo = s;
        } else {
            s_hi = s;
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergeRow {
    pub epsilon: f64,
    pub eta: f64,
    pub v_eps: f64,
    pub error: f64,
    pub theory_bound: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergeReport {
    pub rows: Vec<ConvergeRow>,
    pub reference: f64,
    /// `error(eps_{i}) / error(eps_{i+1})` for consecutive rows.
    pub ratios: Vec<f64>,
}

/// Optimal value for each `epsilon` (with `eta = epsilon`) against a reference
/// obtained by linear extrapolation from the smallest `epsilon` and its half.
/// All solves share the grid of the largest `eta`.
pub fn converge(cfg: &Config, seed: u64, exec: Execution) -> std::result::Result<ConvergeReport, CommandError> {
    let eps = &cfg.risk.epsilons;
    if eps.len() < 3 {
        return Err(CommandError::Config("field `risk.epsilons`: need at least 3 values".into()));
    }
    let lambda = cfg.risk.lambda;
    let base = cfg.risk_spec(lambda).map_err(CommandError::Solver)?;
    let grid = cfg.model(eps[0]).and_then(|m| cfg.grid(&m)).map_err(CommandError::Solver)?;
    let e_min = *eps.last().expect("non-empty");
    let mut all = eps.clone();
    all.push(0.5 * e_min);
    let solved = par::map_indexed(exec, all.len(), |i| {
        solve_weight(cfg, lambda, all[i], all[i], Some(&grid), None, seed, exec)
    });
    let solved: Vec<Solved> = solved.into_iter().collect::<Result<_>>().map_err(CommandError::Solver)?;
    let v: Vec<f64> = solved.iter().map(|s| s.result.v_star).collect();
    let n = eps.len();
    let reference = 2.0 * v[n] - v[n - 1];
    let rows = (0..n)
        .map(|i| {
            Ok(ConvergeRow {
                epsilon: eps[i],
                eta: eps[i],
                v_eps: v[i],
                error: (v[i] - reference).abs(),
                theory_bound: suboptimality_bound(&base, &solved[i].model, eps[i], eps[i])?,
                iterations: solved[i].result.iterations,
            })
        })
        .collect::<Result<Vec<_>>>()
        .map_err(CommandError::Solver)?;
    let ratios = rows.windows(2).map(|w| w[0].error / w[1].error).collect();
    Ok(ConvergeReport {
        rows,
        reference,
        ratios,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckRow {
    pub y: f64,
    pub value: f64,
    pub pde_gradient: f64,
    pub fd_gradient: f64,
    pub rel_deviation: f64,
}

/// Floor on the denominator of the relative deviation, so that points where
/// the gradient vanishes are judged on absolute agreement.
pub const GRADCHECK_ABS_FLOOR: f64 = 1e-6;

/// PDE gradient against central differences of `V` on an equispaced `y` grid
/// around `descent.y0` (or the default starting point).
pub fn gradcheck(cfg: &Config, seed: u64, exec: Execution) -> Result<Vec<GradcheckRow>> {
    let (lambda, eps, eta) = (cfg.risk.lambda, cfg.risk.epsilon, cfg.risk.eta);
    let model = cfg.model(eta)?;
    let grid = cfg.grid(&model)?;
    let mesh = cfg.mesh(&model)?;
    let spec = cfg.risk_spec(lambda)?.inf_convolve(eps)?;
    if spec.m() != 1 {
        return Err(Error::param("risk.kind", "the gradient audit supports one auxiliary variable"));
    }
    let problem = BilevelProblem {
        smoothed: &spec,
        model: &model,
        grid: &grid,
        mesh: &mesh,
        exec,
    };
    let d = &cfg.descent;
    let centre = match d.y0 {
        Some(y) => y,
        None => problem.default_y0(seed)?[0],
    };
    let n = d.check_points;
    let ys: Vec<f64> = (0..n)
        .map(|i| {
            if n == 1 {
                centre
            } else {
                centre - d.check_span + 2.0 * d.check_span * i as f64 / (n - 1) as f64
            }
        })
        .collect();
    let h = d.check_h;
    let rows = par::map_indexed(exec, n, |i| {
        let y = ys[i];
        let e = problem.evaluate(&[y])?;
        let fd = (problem.value(&[y + h])? - problem.value(&[y - h])?) / (2.0 * h);
        let g = e.gradient[0];
        Ok(GradcheckRow {
            y,
            value: e.value,
            pde_gradient: g,
            fd_gradient: fd,
            rel_deviation: (g - fd).abs() / fd.abs().max(g.abs()).max(GRADCHECK_ABS_FLOOR),
        })
    });
    rows.into_iter().collect()
}

fn mc_options(cfg: &Config, seed: u64) -> SimOptions {
    SimOptions::new(cfg.mc.n_paths, cfg.market.horizon / cfg.mc.steps as f64, seed)
        .with_trace((0..cfg.mc.trace_paths).collect())
}

/// Simulates the optimal feedback of `s`.
pub fn simulate_policy(cfg: &Config, s: &Solved, seed: u64, n_trace: usize, exec: Execution) -> Result<SimBatch> {
    let opts = mc_options(cfg, seed).with_trace((0..n_trace).collect());
    mc::simulate(&s.model, Policy::Feedback(s.result.solution.policy()), &opts, exec)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StrategySummary {
    pub name: &'static str,
    pub mean: f64,
    pub stderr: f64,
    pub var: f64,
    pub cvar: f64,
    pub cvar_stderr: f64,
    pub min_leverage: f64,
    pub max_leverage: f64,
}

#[derive(Debug, Clone)]
pub struct SimulateReport {
    pub lambda: f64,
    pub pde_expected_return: f64,
    pub dynamic: SimBatch,
    pub fixed: SimBatch,
    pub summaries: [StrategySummary; 2],
    /// Kolmogorov–Smirnov distance of the static sample from its exact law.
    pub ks_distance: f64,
    /// `3 sqrt(ln(2 / delta) / (2 n))` with `delta = 0.05`.
    pub ks_band: f64,
    /// 5% quantile of the exact static law.
    pub tail_point: f64,
    /// Empirical CDFs of the dynamic and static samples at `tail_point`.
    pub tail_mass: [f64; 2],
}

fn summarise(name: &'static str, batch: &SimBatch, alpha: f64, seed: u64) -> Result<StrategySummary> {
    let losses: Vec<f64> = batch.terminal_values.iter().map(|x| -x).collect();
    let m = mc::mean_estimate(&batch.terminal_values)?;
    let levs = batch.paths.iter().flat_map(|p| p.controls.iter().copied());
    let (lo, hi) = levs.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    Ok(StrategySummary {
        name,
        mean: m.mean,
        stderr: m.stderr,
        var: mc::sample_var(&losses, alpha)?,
        cvar: mc::sample_cvar(&losses, alpha)?,
        cvar_stderr: mc::bootstrap_cvar_stderr(&losses, alpha, 200, seed)?,
        min_leverage: lo,
        max_leverage: hi,
    })
}

/// Kolmogorov–Smirnov distance between a sample and `Normal(mean, sd^2)`.
pub fn ks_normal(values: &[f64], mean: f64, sd: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    v.iter().enumerate().fold(0.0, |d, (i, &x)| {
        let f = normal::cdf((x - mean) / sd);
        d.max((i as f64 + 1.0) / n - f).max(f - i as f64 / n)
    })
}

/// Simulates the dynamic policy at `mc.lambda` (or at the weight matching
/// `risk.target_return`) and the constant leverage `mc.static_leverage`, on
/// the same random numbers.
pub fn simulate(cfg: &Config, seed: u64, exec: Execution) -> std::result::Result<SimulateReport, CommandError> {
    let solved = match cfg.mc.lambda {
        Some(l) => {
            require_mean_cvar(cfg).map_err(CommandError::Config)?;
            solve_weight(cfg, l, cfg.risk.epsilon, cfg.risk.eta, None, None, seed, exec).map_err(CommandError::Solver)?
        }
        None => {
            let lo = cfg.lambdas().into_iter().fold(1.0, f64::min);
            matched_weight(cfg, cfg.risk.target_return, lo, 1.0, 1e-4, 12, seed, exec)?
        }
    };
    let run = || -> Result<SimulateReport> {
        let dynamic = simulate_policy(cfg, &solved, seed, cfg.mc.trace_paths, exec)?;
        let a = [cfg.mc.static_leverage];
        let fixed = mc::simulate(&solved.model, Policy::Constant(&a), &mc_options(cfg, seed), exec)?;
        let alpha = cfg.risk.alpha;
        let summaries = [
            summarise("dynamic", &dynamic, alpha, seed)?,
            summarise("static", &fixed, alpha, seed)?,
        ];
        let (mean, sd) = static_law(cfg, a[0]);
        let sd = (sd * sd + solved.eta * solved.eta * cfg.market.horizon).sqrt();
        let n = fixed.terminal_values.len() as f64;
        let tail_point = mean + sd * normal::quantile(0.05);
        let cdf_at = |b: &SimBatch| {
            let mut v = b.terminal_values.clone();
            v.sort_by(f64::total_cmp);
            mc::ecdf_at(&v, tail_point)
        };
        let tail_mass = [cdf_at(&dynamic), cdf_at(&fixed)];
        Ok(SimulateReport {
            lambda: solved.lambda,
            pde_expected_return: solved.expected_return,
            ks_distance: ks_normal(&fixed.terminal_values, mean, sd),
            ks_band: 3.0 * ((2.0f64 / 0.05).ln() / (2.0 * n)).sqrt(),
            tail_point,
            tail_mass,
            dynamic,
            fixed,
            summaries,
        })
    };
    run().map_err(CommandError::Solver)
}

/// Failure of a subcommand, mapped to an exit code by the caller.
#[derive(Debug)]
pub enum CommandError {
    Config(String),
    Solver(Error),
}

impl From<Error> for CommandError {
    fn from(e: Error) -> Self {
        CommandError::Solver(e)
    }
}
