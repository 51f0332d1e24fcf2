//! Outer minimisation of `V_eps(y) = inf_A E[f_eps(g(X_T), y)]` over `y`.
//!
//! Each evaluation is one backward sweep of the HJB scheme for `V` that also
//! carries the frozen-policy linear equations for `DV` and for `E[X_T]` under
//! the optimal feedback. The descent uses backtracking (Armijo) line search.
//!
//! # Suboptimality bound
//!
//! For an integrand with `L_y`-Lipschitz `y`-dependence the smoothing error is
//! at most `C_f eps` with `C_f = L_y^2 / 2`. For the noise perturbation, two
//! solutions driven by the same control and Brownian paths satisfy
//! `E|X^eta_T - X^eta'_T|^2 <= (eta - eta')^2 G(T)` with
//! `G(T) = (e^{kT} - 1) / k`, `k = 2 L_mu + L_sigma^2` (`G = T` when `k = 0`),
//! by Ito's formula and Gronwall's lemma. Composing with the `x`-Lipschitz
//! constants of `f` and `g` gives `C_model = L_{f,x} L_g sqrt(G(T))`, and the
//! reported bound is `C_f eps + C_model eta`.

use crate::dynamics::SdeModel;
use crate::error::{Error, Result};
use crate::hjb::{solve_hjb_initial_row, solve_hjb_sweep, ControlMesh, HjbSweep, SolverGrid};
use crate::mc::{self, Policy, SimOptions};
use crate::par::Execution;
use crate::risk::{RiskSpec, SmoothedRiskSpec, Term};

#[derive(Debug, Clone, PartialEq)]
pub struct DescentConfig {
    /// Starting point; `None` uses sample quantiles from a short simulation.
    pub y0: Option<Vec<f64>>,
    pub grad_tol: f64,
    pub max_iters: usize,
    pub armijo_c: f64,
    /// First trial step; `None` means `eps`, the inverse semiconcavity constant.
    pub initial_step: Option<f64>,
    /// Whether the caller has verified the joint-convexity conditions, making a
    /// stationary point a global minimiser.
    pub convex_mode: bool,
    pub max_halvings: usize,
    pub seed: u64,
}

impl Default for DescentConfig {
    fn default() -> Self {
        DescentConfig {
            y0: None,
            grad_tol: 1e-4,
            max_iters: 200,
            armijo_c: 1e-4,
            initial_step: None,
            convex_mode: true,
            max_halvings: 40,
            seed: 0x5eed,
        }
    }
}

impl DescentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.grad_tol > 0.0) {
            return Err(Error::param("grad_tol", "must be > 0"));
        }
        if !(self.armijo_c > 0.0 && self.armijo_c < 1.0) {
            return Err(Error::param("armijo_c", "must lie in (0, 1)"));
        }
        if let Some(s) = self.initial_step {
            if !(s > 0.0) {
                return Err(Error::param("initial_step", "must be > 0"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Iterate {
    pub y: Vec<f64>,
    pub value: f64,
    pub grad_norm: f64,
    pub step: f64,
}

#[derive(Debug, Clone)]
pub struct BilevelResult {
    pub y_star: Vec<f64>,
    pub v_star: f64,
    pub gradient: Vec<f64>,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    pub bound_eps: f64,
    pub bound_eta: f64,
    /// True only in convex mode.
    pub global_flag: bool,
    pub history: Vec<Iterate>,
    /// `E[X_T]` under the optimal feedback at `y_star`.
    pub expected_state: f64,
    /// Value row and policy at `y_star`.
    pub solution: HjbSweep,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub value: f64,
    pub gradient: Vec<f64>,
    /// `E[X_T]` under the optimal feedback.
    pub expected_state: f64,
    pub solution: HjbSweep,
}

/// Number of time levels on which evaluations store the optimal policy.
pub const POLICY_LEVELS: usize = 1000;

/// `C_model = L_{f,x} L_g sqrt(G(T))`; see the module docs.
pub fn model_constant(spec: &RiskSpec, model: &SdeModel) -> Result<f64> {
    let lfx = spec
        .lipschitz_x()
        .ok_or(Error::UnboundedLipschitz(spec.kind().name()))?;
    let (lmu, lsig) = model.lipschitz_x();
    let k = 2.0 * lmu + lsig * lsig;
    let t = model.horizon();
    let growth = if k > 0.0 { (k * t).exp_m1() / k } else { t };
    Ok(lfx * model.cost().lipschitz() * growth.sqrt())
}

/// `C_f eps + C_model eta`.
pub fn suboptimality_bound(spec: &RiskSpec, model: &SdeModel, eps: f64, eta: f64) -> Result<f64> {
    if !(eps >= 0.0 && eta >= 0.0) {
        return Err(Error::param("eps/eta", "must be >= 0"));
    }
    let cf = spec.suboptimality_constant()?;
    let cm = model_constant(spec, model)?;
    Ok(cf * eps + cm * eta)
}

/// One outer problem: smoothed integrand, model and discretisation.
#[derive(Debug, Clone, Copy)]
pub struct BilevelProblem<'a> {
    pub smoothed: &'a SmoothedRiskSpec,
    pub model: &'a SdeModel,
    pub grid: &'a SolverGrid,
    pub mesh: &'a ControlMesh,
    pub exec: Execution,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

impl BilevelProblem<'_> {
    fn check_dim(&self, y: &[f64]) -> Result<()> {
        if y.len() != self.smoothed.m() {
            return Err(Error::param("y", format!("expected {} components", self.smoothed.m())));
        }
        Ok(())
    }

    /// `V(y)` only.
    pub fn value(&self, y: &[f64]) -> Result<f64> {
        self.check_dim(y)?;
        let cost = self.model.cost();
        let f = self.smoothed;
        let row = solve_hjb_initial_row(self.model, |x| f.eval(cost.apply(x), y), self.grid, self.mesh, self.exec)?;
        self.grid.interpolate(&row, self.model.x0())
    }

    /// `V(y)`, `DV(y)`, `E[X_T]` and the optimal policy.
    pub fn evaluate(&self, y: &[f64]) -> Result<Evaluation> {
        self.check_dim(y)?;
        let cost = self.model.cost();
        let f = self.smoothed;
        let m = f.m();
        let sweep = solve_hjb_sweep(
            self.model,
            |x| f.eval(cost.apply(x), y),
            |x, out| {
                f.gradient_into(cost.apply(x), y, &mut out[..m]);
                out[m] = x;
            },
            m + 1,
            self.grid,
            self.mesh,
            POLICY_LEVELS,
            self.exec,
        )?;
        let x0 = self.model.x0();
        let mut stats = sweep.statistics_at(x0)?;
        let expected_state = stats.pop().expect("state statistic");
        Ok(Evaluation {
            value: sweep.value_at(x0)?,
            gradient: stats,
            expected_state,
            solution: sweep,
        })
    }

    /// Per-coordinate sample statistic of the cost under the mid-box constant
    /// control: VaR for CVaR terms, mean for squared terms, median for absolute
    /// terms.
    pub fn default_y0(&self, seed: u64) -> Result<Vec<f64>> {
        let mid = self.model.control_box().midpoint();
        let opts = SimOptions::new(10_000, self.model.horizon() / 50.0, seed);
        let batch = mc::simulate(self.model, Policy::Constant(&mid), &opts, self.exec)?;
        let cost = self.model.cost();
        let losses: Vec<f64> = batch.terminal_values.iter().map(|&x| cost.apply(x)).collect();
        let mut y0 = vec![0.0; self.smoothed.m()];
        for t in self.smoothed.base().terms() {
            match *t {
                Term::Cvar { alpha, coord, .. } => y0[coord] = mc::sample_var(&losses, alpha)?,
                Term::Squared { coord, .. } => y0[coord] = mc::mean_estimate(&losses)?.mean,
                Term::Absolute { coord, .. } => y0[coord] = mc::sample_var(&losses, 0.5)?,
                Term::Mean { .. } => {}
            }
        }
        Ok(y0)
    }

    /// Gradient (or, without convexity, proximal supergradient) descent with
    /// Armijo backtracking. Each new iteration first tries the Barzilai–Borwein
    /// step `s.s / s.(g_new - g_old)` of the last move, or twice the last
    /// accepted step when that quotient is not positive.
    pub fn minimize(&self, config: &DescentConfig) -> Result<BilevelResult> {
        config.validate()?;
        let eps = self.smoothed.epsilon();
        let mut y = match &config.y0 {
            Some(y0) => y0.clone(),
            None => self.default_y0(config.seed)?,
        };
        let mut current = self.evaluate(&y)?;
        let mut step = config.initial_step.unwrap_or(eps);
        let mut history = vec![Iterate {
            y: y.clone(),
            value: current.value,
            grad_norm: norm(&current.gradient),
            step: 0.0,
        }];
        let mut iterations = 0;
        let mut converged = norm(&current.gradient) <= config.grad_tol;
        let mut secant: Option<f64> = None;

        while !converged && iterations < config.max_iters {
            let g = current.gradient.clone();
            let gn2: f64 = g.iter().map(|v| v * v).sum();
            let mut trial_step = match secant {
                _ if iterations == 0 => step,
                Some(bb) if bb > 0.0 && bb.is_finite() => bb,
                _ => 2.0 * step,
            };
            let mut accepted = None;
            for _ in 0..=config.max_halvings {
                let y_try: Vec<f64> = y.iter().zip(&g).map(|(yi, gi)| yi - trial_step * gi).collect();
                let e = self.evaluate(&y_try)?;
                if e.value <= current.value - config.armijo_c * trial_step * gn2 {
                    accepted = Some((y_try, e));
                    break;
                }
                trial_step *= 0.5;
            }
            let Some((y_new, e)) = accepted else {
                break;
            };
            iterations += 1;
            step = trial_step;
            let (ss, sd) = y_new.iter().zip(&y).zip(e.gradient.iter().zip(&g)).fold(
                (0.0, 0.0),
                |(ss, sd), ((yn, yo), (gn, go))| (ss + (yn - yo) * (yn - yo), sd + (yn - yo) * (gn - go)),
            );
            secant = Some(ss / sd);
            y = y_new;
            current = e;
            let gn = norm(&current.gradient);
            history.push(Iterate {
                y: y.clone(),
                value: current.value,
                grad_norm: gn,
                step,
            });
            converged = gn <= config.grad_tol;
        }

        let base = self.smoothed.base();
        let bound_eps = base.suboptimality_constant().map(|c| c * eps).unwrap_or(f64::INFINITY);
        let bound_eta = model_constant(base, self.model)
            .map(|c| c * self.model.eta())
            .unwrap_or(f64::INFINITY);
        Ok(BilevelResult {
            grad_norm: norm(&current.gradient),
            y_star: y,
            v_star: current.value,
            gradient: current.gradient,
            iterations,
            converged,
            bound_eps,
            bound_eta,
            global_flag: config.convex_mode,
            history,
            expected_state: current.expected_state,
            solution: current.solution,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{ControlBox, MarketParams};

    fn portfolio(eta: f64) -> SdeModel {
        let p = MarketParams::single_asset(0.11, 0.20, 0.01, -6.0, 6.0).unwrap();
        SdeModel::portfolio(p, 1.0, eta).unwrap()
    }

    #[test]
    fn bound_examples() {
        let m = portfolio(0.0);
        let s = RiskSpec::pure_cvar(0.95).unwrap();
        assert!((suboptimality_bound(&s, &m, 0.01, 0.0).unwrap() - 1.805).abs() < 1e-12);
        assert_eq!(suboptimality_bound(&s, &m, 0.0, 0.0).unwrap(), 0.0);
        let mut prev = f64::INFINITY;
        for e in [0.08, 0.04, 0.02] {
            let b = suboptimality_bound(&s, &m, e, e).unwrap();
            assert!(b <= prev);
            prev = b;
        }
        assert!(suboptimality_bound(&RiskSpec::variance(), &m, 0.01, 0.01).is_err());
        let mc = RiskSpec::mean_cvar(0.95, 1.0).unwrap();
        assert!((model_constant(&mc, &m).unwrap() - 21.0).abs() < 1e-12);
    }

    #[test]
    fn model_constant_grows_with_lipschitz_inputs() {
        use crate::dynamics::CustomCoefficients;
        use crate::risk::CostMap;
        let spec = RiskSpec::mad();
        let make = |lmu: f64, lsig: f64, lg: f64| {
            let c = CustomCoefficients {
                drift: Box::new(move |x, _| lmu * x),
                volatility: Box::new(move |x, _| 0.2 + lsig * x.sin()),
                drift_lipschitz_x: lmu,
                volatility_lipschitz_x: lsig,
                state_independent: false,
            };
            let cost = CostMap::Custom {
                map: std::sync::Arc::new(move |x| lg * x),
                lipschitz: lg,
            };
            let m = SdeModel::custom(c, ControlBox::interval(0.0, 1.0).unwrap(), 0.0, 1.0, 0.1, cost).unwrap();
            model_constant(&spec, &m).unwrap()
        };
        assert!(make(0.5, 0.0, 1.0) > make(0.0, 0.0, 1.0));
        assert!(make(0.0, 0.5, 1.0) > make(0.0, 0.0, 1.0));
        assert!(make(0.0, 0.0, 2.0) > make(0.0, 0.0, 1.0));
        assert_eq!(make(0.0, 0.0, 1.0), 1.0);
    }

    #[test]
    fn evaluate_far_right_tail() {
        let m = portfolio(0.01);
        let spec = RiskSpec::pure_cvar(0.95).unwrap().inf_convolve(0.01).unwrap();
        let grid = SolverGrid::for_model(&m.with_control_box(ControlBox::interval(1.0, 1.0).unwrap()).unwrap(), 400).unwrap();
        let mesh = ControlMesh::singleton(vec![1.0]);
        let p = BilevelProblem {
            smoothed: &spec,
            model: &m,
            grid: &grid,
            mesh: &mesh,
            exec: Execution::Parallel,
        };
        let e = p.evaluate(&[10.0]).unwrap();
        // Far above every loss the smoothed integrand is y - eps/2.
        assert!(e.value >= 10.0 - 0.005 - 1e-9 && e.value <= 10.0 - 0.005 + 1e-3, "{}", e.value);
        assert!((e.gradient[0] - 1.0).abs() < 1e-6);
    }

    fn singleton_problem_y_star(eps: f64, nx: usize) -> BilevelResult {
        let m = portfolio(0.01);
        let spec = RiskSpec::pure_cvar(0.95).unwrap().inf_convolve(eps).unwrap();
        let grid = SolverGrid::for_model(&m.with_control_box(ControlBox::interval(1.0, 1.0).unwrap()).unwrap(), nx).unwrap();
        let mesh = ControlMesh::singleton(vec![1.0]);
        let p = BilevelProblem {
            smoothed: &spec,
            model: &m,
            grid: &grid,
            mesh: &mesh,
            exec: Execution::Parallel,
        };
        let cfg = DescentConfig {
            y0: Some(vec![0.0]),
            ..DescentConfig::default()
        };
        let r = p.minimize(&cfg).unwrap();
        assert!(r.converged);
        assert!(r.grad_norm <= cfg.grad_tol);
        for w in r.history.windows(2) {
            assert!(w[1].value < w[0].value);
        }
        assert!(r.global_flag);
        r
    }

    /// Stationary point of the smoothed objective for a normal loss, found by
    /// bisection on the quadrature of the smoothed gradient.
    fn smoothed_normal_y_star(mean: f64, sd: f64, eps: f64) -> f64 {
        let spec = RiskSpec::pure_cvar(0.95).unwrap().inf_convolve(eps).unwrap();
        let dv = |y: f64| crate::normal::expect_normal(mean, sd, 4000, |l| spec.gradient(l, &[y])[0]);
        let (mut lo, mut hi) = (mean - 2.0, mean + 2.0);
        for _ in 0..80 {
            let mid = 0.5 * (lo + hi);
            if dv(mid) > 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn descent_finds_smoothed_stationary_point() {
        let sd = (0.04f64 + 1e-4).sqrt();
        let r = singleton_problem_y_star(0.01, 400);
        let oracle = smoothed_normal_y_star(-0.09, sd, 0.01);
        assert!((r.y_star[0] - oracle).abs() < 5e-3, "{:?} vs {oracle}", r.y_star);
    }

    #[test]
    fn smoothed_y_star_approaches_var() {
        let sd = (0.04f64 + 1e-4).sqrt();
        let var = -0.09 + sd * crate::normal::quantile(0.95);
        let gaps: Vec<f64> = [0.01, 0.005, 0.0025, 0.00125]
            .iter()
            .map(|&e| (smoothed_normal_y_star(-0.09, sd, e) - var).abs())
            .collect();
        for w in gaps.windows(2) {
            assert!(w[1] < w[0]);
        }
        assert!(gaps[3] < 0.02, "{gaps:?}");
    }
}
