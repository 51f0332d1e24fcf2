//! Linear parabolic equations with a frozen feedback policy:
//! `w_t + mu(x, a*(t,x)) w_x + (sigma^2 + eta^2)(x, a*(t,x)) w_xx / 2 = 0`, `w(T) = h`.
//!
//! With `h = D_y f_eps(g(.), y)` the initial value `w(0, x0)` is the gradient of
//! the outer objective; with `h(x) = x` it is the expected terminal state under
//! the policy. The stencil and time grid are those of the HJB solve that
//! produced the policy, including its moving frame.

use crate::dynamics::SdeModel;
use crate::error::{Error, Result};
use crate::hjb::{PolicyField, SolverGrid, TimeGrid};
use crate::par::{self, Execution};
use crate::stencil::{extrapolate_boundaries, Stencil};

#[derive(Debug, Clone, PartialEq)]
pub struct GradientSolution {
    grid: SolverGrid,
    time: TimeGrid,
    x0: f64,
    /// One `(nt + 1) x nx` array per component, level-major.
    components: Vec<Vec<f64>>,
}

impl GradientSolution {
    pub fn grid(&self) -> &SolverGrid {
        &self.grid
    }

    pub fn time(&self) -> &TimeGrid {
        &self.time
    }

    pub fn m(&self) -> usize {
        self.components.len()
    }

    pub fn row(&self, component: usize, level: usize) -> &[f64] {
        let nx = self.grid.nx();
        &self.components[component][level * nx..(level + 1) * nx]
    }

    /// Every component at `(t = 0, x)`.
    pub fn value_at(&self, x: f64) -> Result<Vec<f64>> {
        (0..self.m()).map(|c| self.grid.interpolate(self.row(c, 0), x)).collect()
    }
}

/// Solves each of the `m` terminal components backwards under `policy`.
/// `terminal(x, out)` fills the `m` terminal values at node `x`.
pub fn solve_linear_pde<F>(
    model: &SdeModel,
    policy: &PolicyField,
    terminal: F,
    m: usize,
    grid: &SolverGrid,
    exec: Execution,
) -> Result<GradientSolution>
where
    F: Fn(f64, &mut [f64]),
{
    if grid != policy.grid() {
        return Err(Error::GridMismatch("policy was computed on a different grid".into()));
    }
    if policy.dim() != model.control_dim() {
        return Err(Error::GridMismatch("policy control dimension differs from the model".into()));
    }
    if m == 0 {
        return Err(Error::Empty("no terminal components"));
    }
    let time = *policy.time();
    let (nx, nt) = (grid.nx(), time.nt);
    let stencil = Stencil::new(grid.dx(), time.dt);

    let mut components = vec![vec![0.0; (nt + 1) * nx]; m];
    let shift = policy.frame_shift();
    let mut buf = vec![0.0; m];
    for i in 0..nx {
        terminal(grid.node(i) + shift * time.horizon, &mut buf);
        for (c, v) in buf.iter().enumerate() {
            components[c][nt * nx + i] = *v;
        }
    }

    for level in (0..nt).rev() {
        for comp in components.iter_mut() {
            let (head, tail) = comp.split_at_mut((level + 1) * nx);
            let prev = &tail[..nx];
            let cur = &mut head[level * nx..];
            par::for_each_mut(exec, cur, |i, v| {
                if i == 0 || i + 1 == nx {
                    return;
                }
                let x = grid.node(i) + shift * time.time(level);
                let a = policy.control(level, i);
                let h = stencil.generator(prev, i, model.drift(x, a) - shift, model.effective_variance(x, a));
                *v = stencil.advance(prev[i], h);
            });
            extrapolate_boundaries(cur);
        }
    }
    Ok(GradientSolution {
        grid: grid.clone(),
        time,
        x0: model.x0(),
        components,
    })
}

/// `w(0, x0)`, interpolated.
pub fn statistic_at_origin(sol: &GradientSolution) -> Result<Vec<f64>> {
    sol.value_at(sol.x0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::MarketParams;
    use crate::hjb::{solve_hjb, ControlMesh};
    use crate::risk::RiskSpec;

    fn portfolio(eta: f64) -> SdeModel {
        let p = MarketParams::single_asset(0.11, 0.20, 0.01, -6.0, 6.0).unwrap();
        SdeModel::portfolio(p, 1.0, eta).unwrap()
    }

    fn optimal_policy(m: &SdeModel, nx: usize) -> (SolverGrid, crate::hjb::ValueSolution) {
        let grid = SolverGrid::for_model(m, nx).unwrap();
        let mesh = ControlMesh::uniform(m, &[25]).unwrap();
        let spec = RiskSpec::mean_cvar(0.95, 0.4).unwrap().inf_convolve(0.02).unwrap();
        let sol = solve_hjb(m, |x| spec.eval(-x, &[0.05]), &grid, &mesh, Execution::Parallel).unwrap();
        (grid, sol)
    }

    #[test]
    fn constant_terminal_stays_constant() {
        let m = portfolio(0.02);
        let (grid, sol) = optimal_policy(&m, 121);
        let w = solve_linear_pde(&m, sol.policy(), |_, o| o[0] = -1.25, 1, &grid, Execution::Parallel).unwrap();
        for level in 0..=w.time().nt {
            assert!(w.row(0, level).iter().all(|v| (v + 1.25).abs() < 1e-12));
        }
        assert!((statistic_at_origin(&w).unwrap()[0] + 1.25).abs() < 1e-12);
    }

    #[test]
    fn expected_log_return_under_buy_and_hold() {
        let m = portfolio(0.02);
        let grid = SolverGrid::new(-2.0, 2.0, 201).unwrap();
        let time = grid.time_grid(1.0, 0.04 + 0.0004, 0.09).unwrap();
        let policy = PolicyField::constant(grid.clone(), time, &[1.0]);
        let w = solve_linear_pde(&m, &policy, |x, o| o[0] = x, 1, &grid, Execution::Parallel).unwrap();
        assert!((statistic_at_origin(&w).unwrap()[0] - 0.09).abs() < 1e-3);
    }

    #[test]
    fn linearity_in_terminal_data() {
        let m = portfolio(0.02);
        let (grid, sol) = optimal_policy(&m, 121);
        let h1 = |x: f64| (x - 0.1).max(0.0);
        let h2 = |x: f64| (2.0 * x).sin();
        let (al, be) = (1.7, -0.6);
        let pair = solve_linear_pde(
            &m,
            sol.policy(),
            |x, o| {
                o[0] = h1(x);
                o[1] = h2(x);
            },
            2,
            &grid,
            Execution::Parallel,
        )
        .unwrap();
        let mix = solve_linear_pde(&m, sol.policy(), |x, o| o[0] = al * h1(x) + be * h2(x), 1, &grid, Execution::Parallel)
            .unwrap();
        for level in [0, pair.time().nt / 3] {
            for i in 0..grid.nx() {
                let lhs = mix.row(0, level)[i];
                let rhs = al * pair.row(0, level)[i] + be * pair.row(1, level)[i];
                assert!((lhs - rhs).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn frozen_optimal_policy_reproduces_hjb_values() {
        let m = portfolio(0.02);
        let (grid, sol) = optimal_policy(&m, 121);
        let spec = RiskSpec::mean_cvar(0.95, 0.4).unwrap().inf_convolve(0.02).unwrap();
        let w = solve_linear_pde(&m, sol.policy(), |x, o| o[0] = spec.eval(-x, &[0.05]), 1, &grid, Execution::Parallel)
            .unwrap();
        for level in 0..=sol.time().nt {
            assert_eq!(w.row(0, level), sol.row(level));
        }
    }

    #[test]
    fn fused_sweep_matches_separate_solves() {
        use crate::hjb::solve_hjb_sweep;
        let m = portfolio(0.02);
        let grid = SolverGrid::for_model(&m, 121).unwrap();
        let mesh = ControlMesh::uniform(&m, &[25]).unwrap();
        let spec = RiskSpec::mean_cvar(0.95, 0.4).unwrap().inf_convolve(0.02).unwrap();
        let y = [0.05];
        let full = solve_hjb(&m, |x| spec.eval(-x, &y), &grid, &mesh, Execution::Parallel).unwrap();
        let stats = |x: f64, o: &mut [f64]| {
            spec.gradient_into(-x, &y, &mut o[..1]);
            o[1] = x;
        };
        let w = solve_linear_pde(&m, full.policy(), stats, 2, &grid, Execution::Parallel).unwrap();
        for (exec, levels) in [(Execution::Parallel, usize::MAX), (Execution::Sequential, 7)] {
            let sweep = solve_hjb_sweep(&m, |x| spec.eval(-x, &y), stats, 2, &grid, &mesh, levels, exec).unwrap();
            assert_eq!(sweep.value_row(), full.row(0));
            assert_eq!(sweep.statistic_row(0), w.row(0, 0));
            assert_eq!(sweep.statistic_row(1), w.row(1, 0));
            let p = sweep.policy();
            let nt = sweep.time().nt;
            assert_eq!(p.stride(), if levels == 7 { nt.div_ceil(7) } else { 1 });
            for level in (0..nt).step_by(p.stride()) {
                for i in 0..grid.nx() {
                    assert_eq!(p.control(level, i), full.policy().control(level, i));
                }
            }
        }
    }

    #[test]
    fn comparison() {
        let m = portfolio(0.02);
        let (grid, sol) = optimal_policy(&m, 121);
        let lo = |x: f64| -x;
        let w = solve_linear_pde(
            &m,
            sol.policy(),
            |x, o| {
                o[0] = lo(x);
                o[1] = lo(x) + 0.2 + (x - 0.3).max(0.0);
            },
            2,
            &grid,
            Execution::Parallel,
        )
        .unwrap();
        for level in 0..=w.time().nt {
            for (a, b) in w.row(0, level).iter().zip(w.row(1, level)) {
                assert!(a <= b);
            }
        }
    }

    #[test]
    fn grid_mismatch() {
        let m = portfolio(0.02);
        let (_, sol) = optimal_policy(&m, 121);
        let other = SolverGrid::new(-1.0, 1.0, 121).unwrap();
        assert!(matches!(
            solve_linear_pde(&m, sol.policy(), |_, o| o[0] = 0.0, 1, &other, Execution::Parallel),
            Err(Error::GridMismatch(_))
        ));
    }
}
