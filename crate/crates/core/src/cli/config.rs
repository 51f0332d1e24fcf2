//! Run configuration: a TOML file with the sections `[market]`, `[risk]`,
//! `[solver]`, `[descent]` and `[mc]`. Every key is optional; missing keys take
//! the defaults below, and the resolved configuration is echoed into every
//! output file.

use serde::{Deserialize, Serialize};

use crate::dynamics::{MarketParams, SdeModel};
use crate::hjb::{ControlMesh, SolverGrid};
use crate::outer::DescentConfig;
use crate::risk::RiskSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub market: Market,
    pub risk: Risk,
    pub solver: Solver,
    pub descent: Descent,
    pub mc: Mc,
}

/// Single risky asset with log-normal price and a risk-free rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Market {
    pub mu: f64,
    pub sigma: f64,
    pub r: f64,
    pub horizon: f64,
    pub leverage_min: f64,
    pub leverage_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Risk {
    /// One of `pure_cvar`, `mean_cvar`, `mad`, `variance`, `mean_variance`.
    pub kind: String,
    pub alpha: f64,
    pub lambda: f64,
    /// Inf-convolution parameter.
    pub epsilon: f64,
    /// Size of the added independent noise.
    pub eta: f64,
    /// Frontier weights; empty means 12 log-spaced points in (0.02, 1].
    pub lambdas: Vec<f64>,
    /// Convergence study, descending; `eta = epsilon` on each row.
    pub epsilons: Vec<f64>,
    /// Expected log-return at which dynamic and static strategies are compared.
    pub target_return: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Solver {
    pub nx: usize,
    /// Half-width of the state grid around `x0`; `0` derives it from the
    /// extreme coefficients over the whole control box.
    pub x_half_width: f64,
    pub control_nodes: usize,
    /// Append the exact minimiser of the discrete Hamiltonian to the mesh.
    pub exact_candidate: bool,
    pub max_time_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Descent {
    /// Starting point; absent means a sample quantile from a short simulation.
    pub y0: Option<f64>,
    pub grad_tol: f64,
    pub max_iters: usize,
    pub armijo_c: f64,
    /// First step; absent means `epsilon`.
    pub initial_step: Option<f64>,
    /// Gradient audit: number of `y` points, their half-width around the
    /// centre, the difference step and the pass threshold.
    pub check_points: usize,
    pub check_span: f64,
    pub check_h: f64,
    pub check_tol: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Mc {
    pub seed: u64,
    pub n_paths: usize,
    pub steps: usize,
    /// Number of recorded trajectories per strategy.
    pub trace_paths: usize,
    pub static_leverage: f64,
    /// Weight of the simulated dynamic policy; absent means the weight whose
    /// expected return equals `risk.target_return`.
    pub lambda: Option<f64>,
    /// Also estimate the frontier CVaR by simulation.
    pub cross_check: bool,
    /// Maximum number of points in the emitted empirical CDFs.
    pub ecdf_points: usize,
}

impl Default for Market {
    fn default() -> Self {
        Market {
            mu: 0.11,
            sigma: 0.20,
            r: 0.01,
            horizon: 1.0,
            leverage_min: -6.0,
            leverage_max: 6.0,
        }
    }
}

impl Default for Risk {
    fn default() -> Self {
        Risk {
            kind: "mean_cvar".into(),
            alpha: 0.95,
            lambda: 1.0,
            epsilon: 0.01,
            eta: 0.01,
            lambdas: Vec::new(),
            epsilons: vec![0.08, 0.04, 0.02],
            target_return: 0.09,
        }
    }
}

impl Default for Solver {
    fn default() -> Self {
        Solver {
            nx: 1201,
            x_half_width: 3.0,
            control_nodes: 2,
            exact_candidate: true,
            max_time_steps: crate::hjb::DEFAULT_MAX_STEPS,
        }
    }
}

impl Default for Descent {
    fn default() -> Self {
        let d = DescentConfig::default();
        Descent {
            y0: None,
            grad_tol: d.grad_tol,
            max_iters: d.max_iters,
            armijo_c: d.armijo_c,
            initial_step: None,
            check_points: 9,
            check_span: 0.2,
            check_h: 1e-3,
            check_tol: 0.02,
        }
    }
}

impl Default for Mc {
    fn default() -> Self {
        Mc {
            seed: 42,
            n_paths: 100_000,
            steps: 500,
            trace_paths: 3,
            static_leverage: 1.0,
            lambda: None,
            cross_check: false,
            ecdf_points: 2001,
        }
    }
}

impl Default for Config {
    fn default() -> Self {
        Config {
            market: Market::default(),
            risk: Risk::default(),
            solver: Solver::default(),
            descent: Descent::default(),
            mc: Mc::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("{0}")]
pub struct ConfigError(pub String);

fn bad(field: &str, reason: &str) -> ConfigError {
    ConfigError(format!("field `{field}`: {reason}"))
}

/// `k / 12`-th powers of 50 scaled by 0.02, `k = 1..=12`.
pub fn default_lambdas() -> Vec<f64> {
    (1..=12).map(|k| 0.02 * 50f64.powf(k as f64 / 12.0)).collect()
}

impl Config {
    /// Parses TOML text; parse errors carry line and column.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let cfg: Config = toml::from_str(text).map_err(|e| ConfigError(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let m = &self.market;
        for (name, v) in [("market.mu", m.mu), ("market.r", m.r)] {
            if !v.is_finite() {
                return Err(bad(name, "must be finite"));
            }
        }
        if !(m.sigma > 0.0 && m.sigma.is_finite()) {
            return Err(bad("market.sigma", "must be > 0"));
        }
        if !(m.horizon > 0.0 && m.horizon.is_finite()) {
            return Err(bad("market.horizon", "must be > 0"));
        }
        if !(m.leverage_min <= m.leverage_max) || !m.leverage_min.is_finite() || !m.leverage_max.is_finite() {
            return Err(bad("market.leverage_min", "must be finite and <= market.leverage_max"));
        }
        let r = &self.risk;
        if !["pure_cvar", "mean_cvar", "mad", "variance", "mean_variance"].contains(&r.kind.as_str()) {
            return Err(bad(
                "risk.kind",
                "expected one of pure_cvar, mean_cvar, mad, variance, mean_variance",
            ));
        }
        if !(r.alpha > 0.0 && r.alpha < 1.0) {
            return Err(bad("risk.alpha", "must lie in (0, 1)"));
        }
        if !(r.lambda >= 0.0 && r.lambda.is_finite()) {
            return Err(bad("risk.lambda", "must be >= 0"));
        }
        if !(r.epsilon > 0.0 && r.epsilon.is_finite()) {
            return Err(bad("risk.epsilon", "must be > 0"));
        }
        if !(r.eta >= 0.0 && r.eta.is_finite()) {
            return Err(bad("risk.eta", "must be >= 0"));
        }
        if r.lambdas.iter().any(|&l| !(l > 0.0 && l <= 1.0)) {
            return Err(bad("risk.lambdas", "every weight must lie in (0, 1]"));
        }
        if r.epsilons.iter().any(|&e| !(e > 0.0 && e.is_finite())) {
            return Err(bad("risk.epsilons", "every value must be > 0"));
        }
        if r.epsilons.windows(2).any(|w| w[1] >= w[0]) {
            return Err(bad("risk.epsilons", "must be strictly descending"));
        }
        if !r.target_return.is_finite() {
            return Err(bad("risk.target_return", "must be finite"));
        }
        let s = &self.solver;
        if s.nx < 5 {
            return Err(bad("solver.nx", "must be >= 5"));
        }
        if !(s.x_half_width >= 0.0 && s.x_half_width.is_finite()) {
            return Err(bad("solver.x_half_width", "must be >= 0"));
        }
        if s.control_nodes < 2 {
            return Err(bad("solver.control_nodes", "must be >= 2"));
        }
        let d = &self.descent;
        if !(d.grad_tol > 0.0) {
            return Err(bad("descent.grad_tol", "must be > 0"));
        }
        if !(d.armijo_c > 0.0 && d.armijo_c < 1.0) {
            return Err(bad("descent.armijo_c", "must lie in (0, 1)"));
        }
        if d.initial_step.is_some_and(|s| !(s > 0.0)) {
            return Err(bad("descent.initial_step", "must be > 0"));
        }
        if d.y0.is_some_and(|y| !y.is_finite()) {
            return Err(bad("descent.y0", "must be finite"));
        }
        if d.check_points == 0 || !(d.check_span >= 0.0) || !(d.check_h > 0.0) || !(d.check_tol > 0.0) {
            return Err(bad("descent.check_*", "need check_points >= 1, check_span >= 0, check_h > 0, check_tol > 0"));
        }
        let c = &self.mc;
        if c.n_paths < 2 {
            return Err(bad("mc.n_paths", "must be >= 2"));
        }
        if c.steps == 0 {
            return Err(bad("mc.steps", "must be >= 1"));
        }
        if c.trace_paths > c.n_paths {
            return Err(bad("mc.trace_paths", "must not exceed mc.n_paths"));
        }
        if !(m.leverage_min <= c.static_leverage && c.static_leverage <= m.leverage_max) {
            return Err(bad("mc.static_leverage", "must lie in the leverage box"));
        }
        if c.lambda.is_some_and(|l| !(l > 0.0 && l <= 1.0)) {
            return Err(bad("mc.lambda", "must lie in (0, 1]"));
        }
        if c.ecdf_points < 2 {
            return Err(bad("mc.ecdf_points", "must be >= 2"));
        }
        Ok(())
    }

    /// The resolved configuration as TOML.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serialises")
    }

    pub fn lambdas(&self) -> Vec<f64> {
        if self.risk.lambdas.is_empty() {
            default_lambdas()
        } else {
            self.risk.lambdas.clone()
        }
    }

    pub fn market_params(&self) -> crate::Result<MarketParams> {
        let m = &self.market;
        MarketParams::single_asset(m.mu, m.sigma, m.r, m.leverage_min, m.leverage_max)
    }

    pub fn model(&self, eta: f64) -> crate::Result<SdeModel> {
        SdeModel::portfolio(self.market_params()?, self.market.horizon, eta)
    }

    /// The configured integrand with weight `lambda` for the weighted kinds.
    pub fn risk_spec(&self, lambda: f64) -> crate::Result<RiskSpec> {
        let r = &self.risk;
        match r.kind.as_str() {
            "pure_cvar" => RiskSpec::pure_cvar(r.alpha),
            "mean_cvar" => RiskSpec::mean_cvar(r.alpha, lambda),
            "mad" => Ok(RiskSpec::mad()),
            "variance" => Ok(RiskSpec::variance()),
            _ => RiskSpec::mean_variance(lambda),
        }
    }

    pub fn grid(&self, model: &SdeModel) -> crate::Result<SolverGrid> {
        let grid = if self.solver.x_half_width > 0.0 {
            let (x0, h) = (model.x0(), self.solver.x_half_width);
            SolverGrid::new(x0 - h, x0 + h, self.solver.nx)?
        } else {
            SolverGrid::for_model(model, self.solver.nx)?
        };
        Ok(grid.with_step_cap(self.solver.max_time_steps))
    }

    pub fn mesh(&self, model: &SdeModel) -> crate::Result<ControlMesh> {
        Ok(ControlMesh::uniform(model, &[self.solver.control_nodes])?.with_analytic_candidate(self.solver.exact_candidate))
    }

    pub fn descent_config(&self, seed: u64) -> DescentConfig {
        let d = &self.descent;
        DescentConfig {
            y0: d.y0.map(|y| vec![y]),
            grad_tol: d.grad_tol,
            max_iters: d.max_iters,
            armijo_c: d.armijo_c,
            initial_step: d.initial_step,
            seed,
            ..DescentConfig::default()
        }
    }
}
