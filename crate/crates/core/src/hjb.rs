//! Backward explicit finite differences for
//! `v_t + min_a [ mu(x,a) v_x + (sigma^2(x,a) + eta^2) v_xx / 2 ] = 0`, `v(T, .) = h`.
//!
//! The scheme is monotone under the step bound
//! `dt <= dx^2 / (max(sigma^2 + eta^2) + dx max|mu|)`, which is enforced when the
//! time grid is built. Controls are minimised over a [`ControlMesh`]; for the
//! single-asset portfolio the exact minimiser of the discrete Hamiltonian over
//! the whole interval is appended as well.

use crate::dynamics::{QuadraticControl, ScalarCoefficients, SdeModel, MAX_CONTROL_DIM};
use crate::error::{Error, Result};
use crate::par::{self, Execution};
use crate::stencil::{extrapolate_boundaries, Stencil};

/// Default cap on the number of time steps.
pub const DEFAULT_MAX_STEPS: usize = 200_000;

#[derive(Debug, Clone, PartialEq)]
pub struct SolverGrid {
    x_min: f64,
    x_max: f64,
    nx: usize,
    nt: Option<usize>,
    max_steps: usize,
}

impl SolverGrid {
    pub fn new(x_min: f64, x_max: f64, nx: usize) -> Result<Self> {
        if !(x_min < x_max) || !x_min.is_finite() || !x_max.is_finite() {
            return Err(Error::param("grid", format!("need x_min < x_max, got [{x_min}, {x_max}]")));
        }
        if nx < 3 {
            return Err(Error::param("nx", format!("{nx} < 3")));
        }
        Ok(SolverGrid {
            x_min,
            x_max,
            nx,
            nt: None,
            max_steps: DEFAULT_MAX_STEPS,
        })
    }

    /// Truncated domain `x0 +- (6 sigma_max sqrt(T) + max|mu| T)`, with the
    /// maxima taken over the control box and the effective volatility.
    pub fn for_model(model: &SdeModel, nx: usize) -> Result<Self> {
        let (sigma, mu) = model.coefficient_bounds(model.x0());
        let t = model.horizon();
        let half = 6.0 * sigma * t.sqrt() + mu * t;
        let half = if half > 0.0 { half } else { 1.0 };
        Self::new(model.x0() - half, model.x0() + half, nx)
    }

    pub fn with_time_steps(mut self, nt: usize) -> Self {
        self.nt = Some(nt);
        self
    }

    pub fn with_step_cap(mut self, max_steps: usize) -> Self {
        self.max_steps = max_steps;
        self
    }

    pub fn x_min(&self) -> f64 {
        self.x_min
    }

    pub fn x_max(&self) -> f64 {
        self.x_max
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn dx(&self) -> f64 {
        (self.x_max - self.x_min) / (self.nx - 1) as f64
    }

    #[inline]
    pub fn node(&self, i: usize) -> f64 {
        if i + 1 == self.nx {
            self.x_max
        } else {
            self.x_min + self.dx() * i as f64
        }
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..self.nx).map(|i| self.node(i)).collect()
    }

    pub fn contains(&self, x: f64) -> bool {
        self.x_min <= x && x <= self.x_max
    }

    /// Cell index `i` and weight `w` with `x = (1 - w) x_i + w x_{i+1}`.
    pub fn locate(&self, x: f64) -> Result<(usize, f64)> {
        if !self.contains(x) {
            return Err(Error::OutsideGrid {
                x,
                min: self.x_min,
                max: self.x_max,
            });
        }
        let s = (x - self.x_min) / self.dx();
        let i = (s.floor() as usize).min(self.nx - 2);
        Ok((i, s - i as f64))
    }

    /// Nearest node, clamped to the grid.
    pub fn nearest(&self, x: f64) -> usize {
        let s = ((x - self.x_min) / self.dx()).round();
        if s <= 0.0 {
            0
        } else {
            (s as usize).min(self.nx - 1)
        }
    }

    pub fn interpolate(&self, row: &[f64], x: f64) -> Result<f64> {
        if row.len() != self.nx {
            return Err(Error::GridMismatch(format!("row has {} entries, grid has {}", row.len(), self.nx)));
        }
        let (i, w) = self.locate(x)?;
        Ok(if w == 0.0 {
            row[i]
        } else {
            (1.0 - w) * row[i] + w * row[i + 1]
        })
    }

    /// Time grid satisfying the monotonicity bound for the given coefficient maxima.
    pub fn time_grid(&self, horizon: f64, max_var: f64, max_drift: f64) -> Result<TimeGrid> {
        let dx = self.dx();
        let dt_max = dx * dx / (max_var + dx * max_drift);
        let required = if dt_max.is_finite() {
            ((horizon / dt_max) * (1.0 - 1e-12)).ceil().max(1.0) as usize
        } else {
            1
        };
        let nt = self.nt.map_or(required, |n| n.max(required));
        if nt > self.max_steps {
            return Err(Error::TimeStepCap {
                required: nt,
                cap: self.max_steps,
            });
        }
        Ok(TimeGrid {
            nt,
            dt: horizon / nt as f64,
            horizon,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    pub nt: usize,
    pub dt: f64,
    pub horizon: f64,
}

impl TimeGrid {
    pub fn time(&self, level: usize) -> f64 {
        self.dt * level as f64
    }

    /// Level whose step `[t_n, t_{n+1})` contains `t`.
    pub fn level_at(&self, t: f64) -> usize {
        let s = (t / self.dt).floor();
        if s <= 0.0 {
            0
        } else {
            (s as usize).min(self.nt - 1)
        }
    }
}

/// Candidate controls, stored in tie-break order (smallest norm first, then
/// construction order).
#[derive(Debug, Clone, PartialEq)]
pub struct ControlMesh {
    k: usize,
    points: Vec<f64>,
    analytic: bool,
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n <= 1 || lo == hi {
        return vec![lo];
    }
    (0..n)
        .map(|i| if i + 1 == n { hi } else { lo + (hi - lo) * i as f64 / (n - 1) as f64 })
        .collect()
}

impl ControlMesh {
    /// Tensor mesh over the box with `per_axis[j]` nodes on axis `j`; always
    /// contains the endpoints, and `0` whenever the box contains it. The exact
    /// single-asset candidate is enabled.
    pub fn uniform(model: &SdeModel, per_axis: &[usize]) -> Result<Self> {
        let b = model.control_box();
        if per_axis.len() != b.dim() {
            return Err(Error::param("control_nodes", "one node count per control axis"));
        }
        let axes: Vec<Vec<f64>> = (0..b.dim())
            .map(|j| {
                let mut ax = linspace(b.lower()[j], b.upper()[j], per_axis[j].max(2));
                if b.lower()[j] <= 0.0 && 0.0 <= b.upper()[j] && !ax.contains(&0.0) {
                    ax.push(0.0);
                }
                ax
            })
            .collect();
        let combos: Vec<Vec<f64>> = match b.dim() {
            1 => axes[0].iter().map(|&v| vec![v]).collect(),
            _ => axes[0]
                .iter()
                .flat_map(|&u| axes[1].iter().map(move |&v| vec![u, v]))
                .collect(),
        };
        Ok(Self::from_points(b.dim(), combos, true))
    }

    /// A single fixed control (a static strategy).
    pub fn singleton(a: Vec<f64>) -> Self {
        let k = a.len();
        Self::from_points(k, vec![a], false)
    }

    pub fn from_points(k: usize, mut points: Vec<Vec<f64>>, analytic: bool) -> Self {
        let norm = |p: &Vec<f64>| p.iter().map(|v| v * v).sum::<f64>();
        points.sort_by(|a, b| norm(a).total_cmp(&norm(b)));
        ControlMesh {
            k,
            points: points.into_iter().flatten().collect(),
            analytic,
        }
    }

    pub fn with_analytic_candidate(mut self, on: bool) -> Self {
        self.analytic = on;
        self
    }

    pub fn analytic(&self) -> bool {
        self.analytic
    }

    pub fn dim(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.points.len() / self.k
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.k..(i + 1) * self.k]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.points.chunks(self.k)
    }
}

/// Feedback control `a(t_n, x_i)` on every node. Controls may be stored on
/// every `stride`-th step only; step `n` then uses the row of step
/// `stride * (n / stride)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyField {
    grid: SolverGrid,
    time: TimeGrid,
    k: usize,
    stride: usize,
    controls: Vec<f64>,
    /// Grid coordinates are `x - shift * t`.
    shift: f64,
}

impl PolicyField {
    pub fn constant(grid: SolverGrid, time: TimeGrid, a: &[f64]) -> Self {
        let k = a.len();
        let mut controls = Vec::with_capacity(grid.nx * k);
        for _ in 0..grid.nx {
            controls.extend_from_slice(a);
        }
        PolicyField {
            grid,
            time,
            k,
            stride: time.nt,
            controls,
            shift: 0.0,
        }
    }

    pub fn grid(&self) -> &SolverGrid {
        &self.grid
    }

    pub fn time(&self) -> &TimeGrid {
        &self.time
    }

    pub fn dim(&self) -> usize {
        self.k
    }

    /// Steps per stored control row.
    pub fn stride(&self) -> usize {
        self.stride
    }

    #[inline]
    pub fn control(&self, level: usize, i: usize) -> &[f64] {
        let at = ((level / self.stride) * self.grid.nx + i) * self.k;
        &self.controls[at..at + self.k]
    }

    /// Drift of the moving frame: node `i` at time `t` sits at
    /// `x = grid.node(i) + frame_shift() * t`.
    pub fn frame_shift(&self) -> f64 {
        self.shift
    }

    /// Same controls, read in the frame moving with drift `shift`.
    pub fn with_frame_shift(mut self, shift: f64) -> Self {
        self.shift = shift;
        self
    }

    /// Nearest-node lookup at state `x`, step containing `t`.
    pub fn lookup(&self, t: f64, x: f64) -> &[f64] {
        self.control(self.time.level_at(t), self.grid.nearest(x - self.shift * t))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValueSolution {
    grid: SolverGrid,
    time: TimeGrid,
    values: Vec<f64>,
    policy: PolicyField,
}

impl ValueSolution {
    pub fn grid(&self) -> &SolverGrid {
        &self.grid
    }

    pub fn time(&self) -> &TimeGrid {
        &self.time
    }

    pub fn policy(&self) -> &PolicyField {
        &self.policy
    }

    /// Values at time level `n` (`0` is `t = 0`, `nt` is the terminal row), on
    /// the grid nodes of the moving frame (see [`PolicyField::frame_shift`]).
    pub fn row(&self, level: usize) -> &[f64] {
        let nx = self.grid.nx;
        &self.values[level * nx..(level + 1) * nx]
    }

    /// Linear interpolation of the `t = 0` row.
    pub fn value_at(&self, x: f64) -> Result<f64> {
        self.grid.interpolate(self.row(0), x)
    }
}

/// Precomputed coefficients for one candidate control.
#[derive(Clone, Copy)]
struct Candidate {
    a: [f64; MAX_CONTROL_DIM],
    mu: f64,
    var: f64,
}

/// Argmin of the discrete generator at one node.
#[derive(Clone, Copy)]
struct Best {
    h: f64,
    a: [f64; MAX_CONTROL_DIM],
    mu: f64,
    var: f64,
}

/// Node-dependent part of the exact single-asset minimiser.
struct Exact {
    q: QuadraticControl,
    coeffs: ScalarCoefficients,
    lo: f64,
    hi: f64,
}

struct Prepared<'a> {
    model: &'a SdeModel,
    grid: &'a SolverGrid,
    mesh: &'a ControlMesh,
    stencil: Stencil,
    time: TimeGrid,
    /// Per-candidate coefficients when they do not depend on `x`: the mesh,
    /// followed by the node-independent exact candidates.
    fixed: Option<Vec<Candidate>>,
    /// Frame drift, subtracted from every drift evaluation.
    shift: f64,
    exact: Option<Exact>,
}

fn pack(a: &[f64]) -> [f64; MAX_CONTROL_DIM] {
    let mut out = [0.0; MAX_CONTROL_DIM];
    out[..a.len()].copy_from_slice(a);
    out
}

/// Box endpoints and the roots of the (frame) drift: the node-independent
/// candidates of the exact minimiser, sorted by magnitude.
fn exact_fixed_candidates(q: &QuadraticControl, lo: f64, hi: f64) -> Vec<f64> {
    let mut out = vec![lo, hi];
    if q.c2 == 0.0 {
        if q.c1 != 0.0 {
            out.push(-q.c0 / q.c1);
        }
    } else {
        let disc = q.c1 * q.c1 - 4.0 * q.c2 * q.c0;
        if disc >= 0.0 {
            let r = disc.sqrt();
            out.push((-q.c1 + r) / (2.0 * q.c2));
            out.push((-q.c1 - r) / (2.0 * q.c2));
        }
    }
    out.retain(|a| a.is_finite() && lo <= *a && *a <= hi);
    out.sort_by(|x, y| x.abs().total_cmp(&y.abs()));
    out.dedup();
    out
}

fn prepare<'a>(model: &'a SdeModel, grid: &'a SolverGrid, mesh: &'a ControlMesh) -> Result<Prepared<'a>> {
    if mesh.is_empty() {
        return Err(Error::Empty("control mesh"));
    }
    if mesh.dim() != model.control_dim() {
        return Err(Error::param("mesh", "control dimension differs from the model"));
    }
    let shift = model.drift_offset();
    let exact = if mesh.analytic {
        model
            .quadratic_control()
            .zip(model.scalar_coefficients())
            .map(|(mut q, coeffs)| {
                q.c0 -= shift;
                let b = model.control_box();
                Exact {
                    q,
                    coeffs,
                    lo: b.lower()[0],
                    hi: b.upper()[0],
                }
            })
    } else {
        None
    };

    let sample_xs: Vec<f64> = if model.state_independent() {
        vec![model.x0()]
    } else {
        grid.nodes()
    };
    let mut controls: Vec<Vec<f64>> = mesh.iter().map(<[f64]>::to_vec).collect();
    if exact.is_some() {
        controls.extend(model.control_samples(201));
    }
    let mut max_var = 0.0f64;
    let mut max_mu = 0.0f64;
    let mut min_var = f64::INFINITY;
    for &x in &sample_xs {
        for a in &controls {
            let v = model.effective_variance(x, a);
            max_var = max_var.max(v);
            min_var = min_var.min(v);
            max_mu = max_mu.max((model.drift(x, a) - shift).abs());
        }
    }
    if !(min_var > 0.0) {
        return Err(Error::NotParabolic);
    }
    let time = grid.time_grid(model.horizon(), max_var, max_mu)?;
    let stencil = Stencil::new(grid.dx(), time.dt);

    let fixed = model.state_independent().then(|| {
        let candidate = |a: &[f64]| Candidate {
            a: pack(a),
            mu: model.drift(model.x0(), a) - shift,
            var: model.effective_variance(model.x0(), a),
        };
        let mut c: Vec<Candidate> = mesh.iter().map(candidate).collect();
        if let Some(e) = &exact {
            c.extend(exact_fixed_candidates(&e.q, e.lo, e.hi).iter().map(|&a| candidate(&[a])));
        }
        c
    });
    Ok(Prepared {
        model,
        grid,
        mesh,
        stencil,
        time,
        fixed,
        shift,
        exact,
    })
}

impl Prepared<'_> {
    /// Minimum of the discrete generator at node `i`, the control attaining it
    /// and that control's coefficients. Ties keep the earlier candidate.
    #[inline]
    fn best(&self, prev: &[f64], i: usize) -> Best {
        let st = &self.stencil;
        let mut best = Best {
            h: f64::INFINITY,
            a: [0.0; MAX_CONTROL_DIM],
            mu: 0.0,
            var: 0.0,
        };
        let mut consider = |a: [f64; MAX_CONTROL_DIM], mu: f64, var: f64| {
            let h = st.generator(prev, i, mu, var);
            if h < best.h {
                best = Best { h, a, mu, var };
            }
        };
        match &self.fixed {
            Some(cands) => {
                for c in cands {
                    consider(c.a, c.mu, c.var);
                }
            }
            None => {
                let x = self.grid.node(i);
                for a in self.mesh.iter() {
                    consider(pack(a), self.model.drift(x, a) - self.shift, self.model.effective_variance(x, a));
                }
            }
        }
        if let Some(e) = &self.exact {
            let mut cands = [0.0f64; 2];
            let n = exact_vertices(&e.q, st, prev, i, e.lo, e.hi, &mut cands);
            for &a in &cands[..n] {
                consider([a, 0.0], e.coeffs.drift(a) - self.shift, e.coeffs.effective_variance(a));
            }
        }
        best
    }
}

/// Node-dependent candidates of the exact minimiser over `[lo, hi]` of the
/// upwinded discrete Hamiltonian. On each region of constant drift sign the
/// Hamiltonian is a quadratic in `a`, so its minimum sits at a vertex or at a
/// region endpoint (a box end or a drift root, see [`exact_fixed_candidates`]).
fn exact_vertices(
    q: &QuadraticControl,
    st: &Stencil,
    prev: &[f64],
    i: usize,
    lo: f64,
    hi: f64,
    out: &mut [f64; 2],
) -> usize {
    let mut n = 0;
    let second = st.half_inv_dx2 * (prev[i + 1] - 2.0 * prev[i] + prev[i - 1]);
    for slope in [prev[i + 1] - prev[i], prev[i] - prev[i - 1]] {
        let p = st.inv_dx * slope;
        let curv = q.c2 * p + q.s2 * second;
        if curv > 0.0 {
            let a = -q.c1 * p / (2.0 * curv);
            if a.is_finite() && lo <= a && a <= hi {
                out[n] = a;
                n += 1;
            }
        }
    }
    n
}

/// Solves the HJB equation backwards from `terminal` and records the argmin
/// policy on every step.
pub fn solve_hjb<F>(
    model: &SdeModel,
    terminal: F,
    grid: &SolverGrid,
    mesh: &ControlMesh,
    exec: Execution,
) -> Result<ValueSolution>
where
    F: Fn(f64) -> f64,
{
    let prep = prepare(model, grid, mesh)?;
    let (nx, nt, k) = (grid.nx, prep.time.nt, mesh.dim());
    let mut values = vec![0.0; (nt + 1) * nx];
    let mut controls = vec![0.0; nt * nx * k];
    for (i, v) in values[nt * nx..].iter_mut().enumerate() {
        *v = terminal(grid.node(i) + prep.shift * model.horizon());
    }
    for level in (0..nt).rev() {
        let (head, tail) = values.split_at_mut((level + 1) * nx);
        let prev = &tail[..nx];
        let cur = &mut head[level * nx..];
        let pol = &mut controls[level * nx * k..(level + 1) * nx * k];
        par::for_each_mut_with_chunks(exec, cur, pol, k, |i, v, a| {
            if i == 0 || i + 1 == nx {
                return;
            }
            let best = prep.best(prev, i);
            *v = prep.stencil.advance(prev[i], best.h);
            a.copy_from_slice(&best.a[..k]);
        });
        extrapolate_boundaries(cur);
        pol.copy_within(k..2 * k, 0);
        pol.copy_within((nx - 2) * k..(nx - 1) * k, (nx - 1) * k);
    }
    Ok(ValueSolution {
        grid: grid.clone(),
        time: prep.time,
        values,
        policy: PolicyField {
            grid: grid.clone(),
            time: prep.time,
            k,
            stride: 1,
            controls,
            shift: prep.shift,
        },
    })
}

/// Same scheme as [`solve_hjb`], keeping only two rows; returns the `t = 0` row.
pub fn solve_hjb_initial_row<F>(
    model: &SdeModel,
    terminal: F,
    grid: &SolverGrid,
    mesh: &ControlMesh,
    exec: Execution,
) -> Result<Vec<f64>>
where
    F: Fn(f64) -> f64,
{
    let prep = prepare(model, grid, mesh)?;
    let nx = grid.nx;
    let end = prep.shift * model.horizon();
    let mut prev: Vec<f64> = (0..nx).map(|i| terminal(grid.node(i) + end)).collect();
    let mut cur = vec![0.0; nx];
    for _ in 0..prep.time.nt {
        par::for_each_mut(exec, &mut cur, |i, v| {
            if i == 0 || i + 1 == nx {
                return;
            }
            *v = prep.stencil.advance(prev[i], prep.best(&prev, i).h);
        });
        extrapolate_boundaries(&mut cur);
        std::mem::swap(&mut prev, &mut cur);
    }
    Ok(prev)
}

/// Outcome of [`solve_hjb_sweep`]: `t = 0` rows of the value and of each
/// statistic, and the (time-subsampled) optimal policy.
#[derive(Debug, Clone, PartialEq)]
pub struct HjbSweep {
    grid: SolverGrid,
    time: TimeGrid,
    value: Vec<f64>,
    statistics: Vec<Vec<f64>>,
    policy: PolicyField,
}

impl HjbSweep {
    pub fn grid(&self) -> &SolverGrid {
        &self.grid
    }

    pub fn time(&self) -> &TimeGrid {
        &self.time
    }

    pub fn policy(&self) -> &PolicyField {
        &self.policy
    }

    /// Value row at `t = 0`.
    pub fn value_row(&self) -> &[f64] {
        &self.value
    }

    /// Row of statistic `c` at `t = 0`.
    pub fn statistic_row(&self, c: usize) -> &[f64] {
        &self.statistics[c]
    }

    pub fn value_at(&self, x: f64) -> Result<f64> {
        self.grid.interpolate(&self.value, x)
    }

    /// Every statistic at `(t = 0, x)`.
    pub fn statistics_at(&self, x: f64) -> Result<Vec<f64>> {
        self.statistics.iter().map(|r| self.grid.interpolate(r, x)).collect()
    }
}

/// The HJB scheme of [`solve_hjb`] with `m` linear statistics carried along:
/// each statistic is advanced by the same stencil with the control frozen to
/// the argmin chosen at that node and step, which is exactly the frozen-policy
/// linear equation of [`crate::linpde`]. Only two rows are kept; the policy is
/// stored on at most `policy_levels` steps.
pub fn solve_hjb_sweep<F, G>(
    model: &SdeModel,
    terminal: F,
    statistics: G,
    m: usize,
    grid: &SolverGrid,
    mesh: &ControlMesh,
    policy_levels: usize,
    exec: Execution,
) -> Result<HjbSweep>
where
    F: Fn(f64) -> f64,
    G: Fn(f64, &mut [f64]),
{
    let prep = prepare(model, grid, mesh)?;
    let (nx, nt, k) = (grid.nx, prep.time.nt, mesh.dim());
    let stride = nt.div_ceil(policy_levels.max(1)).max(1);
    let shift = prep.shift;
    let end = shift * model.horizon();

    let mut prev_v: Vec<f64> = (0..nx).map(|i| terminal(grid.node(i) + end)).collect();
    let mut prev_s = vec![vec![0.0; nx]; m];
    let mut buf = vec![0.0; m];
    for i in 0..nx {
        statistics(grid.node(i) + end, &mut buf);
        for (c, v) in buf.iter().enumerate() {
            prev_s[c][i] = *v;
        }
    }
    let mut cur_v = vec![0.0; nx];
    let mut cur_s = vec![vec![0.0; nx]; m];
    let width = m + k;
    let mut packed = vec![0.0; nx * width];
    let mut controls = vec![0.0; nt.div_ceil(stride) * nx * k];

    for level in (0..nt).rev() {
        {
            let (pv, ps) = (&prev_v, &prev_s);
            par::for_each_mut_with_chunks(exec, &mut cur_v, &mut packed, width, |i, v, slot| {
                if i == 0 || i + 1 == nx {
                    return;
                }
                let best = prep.best(pv, i);
                *v = prep.stencil.advance(pv[i], best.h);
                for c in 0..m {
                    let g = prep.stencil.generator(&ps[c], i, best.mu, best.var);
                    slot[c] = prep.stencil.advance(ps[c][i], g);
                }
                slot[m..].copy_from_slice(&best.a[..k]);
            });
        }
        extrapolate_boundaries(&mut cur_v);
        for (c, row) in cur_s.iter_mut().enumerate() {
            for i in 1..nx - 1 {
                row[i] = packed[i * width + c];
            }
            extrapolate_boundaries(row);
        }
        if level % stride == 0 {
            let pol = &mut controls[(level / stride) * nx * k..(level / stride + 1) * nx * k];
            for i in 1..nx - 1 {
                pol[i * k..(i + 1) * k].copy_from_slice(&packed[i * width + m..(i + 1) * width]);
            }
            pol.copy_within(k..2 * k, 0);
            pol.copy_within((nx - 2) * k..(nx - 1) * k, (nx - 1) * k);
        }
        std::mem::swap(&mut prev_v, &mut cur_v);
        std::mem::swap(&mut prev_s, &mut cur_s);
    }
    Ok(HjbSweep {
        grid: grid.clone(),
        time: prep.time,
        value: prev_v,
        statistics: prev_s,
        policy: PolicyField {
            grid: grid.clone(),
            time: prep.time,
            k,
            stride,
            controls,
            shift,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::MarketParams;
    use crate::normal;
    use crate::risk::RiskSpec;

    fn portfolio(eta: f64) -> SdeModel {
        let p = MarketParams::single_asset(0.11, 0.20, 0.01, -6.0, 6.0).unwrap();
        SdeModel::portfolio(p, 1.0, eta).unwrap()
    }

    #[test]
    fn linear_terminal_singleton_controls() {
        let m = portfolio(0.05);
        for (a, expect) in [(0.0, 0.01), (1.0, 0.09)] {
            let mesh = ControlMesh::singleton(vec![a]);
            let grid = SolverGrid::new(-2.0, 2.0, 201).unwrap();
            let sol = solve_hjb(&m, |x| x, &grid, &mesh, Execution::Parallel).unwrap();
            let v = sol.value_at(0.0).unwrap();
            assert!((v - expect).abs() < 1e-3, "a={a}: {v}");
        }
    }

    #[test]
    fn terminal_row_is_exact_and_policy_in_mesh() {
        let m = portfolio(0.02);
        let grid = SolverGrid::for_model(&m, 101).unwrap();
        let mesh = ControlMesh::uniform(&m, &[13]).unwrap();
        let h = |x: f64| (x - 0.3).max(0.0) - 0.5 * x;
        let sol = solve_hjb(&m, h, &grid, &mesh, Execution::Parallel).unwrap();
        let nt = sol.time().nt;
        let end = m.drift_offset() * m.horizon();
        for (i, v) in sol.row(nt).iter().enumerate() {
            assert_eq!(*v, h(grid.node(i) + end));
        }
        for level in 0..nt {
            for i in 0..grid.nx() {
                let a = sol.policy().control(level, i)[0];
                assert!((-6.0..=6.0).contains(&a));
            }
        }
    }

    #[test]
    fn singleton_matches_quadrature() {
        let eta = 0.05;
        let m = portfolio(eta);
        let spec = RiskSpec::pure_cvar(0.95).unwrap().inf_convolve(0.01).unwrap();
        let y = 0.239;
        let mesh = ControlMesh::singleton(vec![1.0]);
        let grid = SolverGrid::for_model(&m.with_control_box(crate::dynamics::ControlBox::interval(1.0, 1.0).unwrap()).unwrap(), 800).unwrap();
        let sol = solve_hjb(&m, |x| spec.eval(-x, &[y]), &grid, &mesh, Execution::Parallel).unwrap();
        let v = sol.value_at(0.0).unwrap();
        let sd = (0.04f64 + eta * eta).sqrt();
        let oracle = normal::expect_normal(0.09, sd, 20_000, |x| spec.eval(-x, &[y]));
        assert!(((v - oracle) / oracle).abs() < 0.01, "{v} vs {oracle}");
    }

    #[test]
    fn constant_and_translation() {
        let m = portfolio(0.03);
        let grid = SolverGrid::for_model(&m, 81).unwrap();
        let mesh = ControlMesh::uniform(&m, &[9]).unwrap();
        let sol = solve_hjb(&m, |_| 2.5, &grid, &mesh, Execution::Sequential).unwrap();
        for level in 0..=sol.time().nt {
            for v in sol.row(level) {
                assert!((v - 2.5).abs() < 1e-12);
            }
        }
        let h = |x: f64| (0.2 - x).max(0.0) * 3.0;
        let a = solve_hjb(&m, h, &grid, &mesh, Execution::Parallel).unwrap();
        let b = solve_hjb(&m, |x| h(x) + 1.75, &grid, &mesh, Execution::Parallel).unwrap();
        for level in [0, a.time().nt / 2] {
            for (u, v) in a.row(level).iter().zip(b.row(level)) {
                assert!((v - u - 1.75).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn comparison_principle() {
        let m = portfolio(0.03);
        let grid = SolverGrid::for_model(&m, 121).unwrap();
        let mesh = ControlMesh::uniform(&m, &[13]).unwrap();
        let lo = |x: f64| (0.1 - x).max(0.0) * 5.0 - x;
        let bump = |x: f64| 0.3 * (-(x - 0.2) * (x - 0.2) / 0.05).exp() + 0.1;
        let a = solve_hjb(&m, lo, &grid, &mesh, Execution::Parallel).unwrap();
        let b = solve_hjb(&m, |x| lo(x) + bump(x), &grid, &mesh, Execution::Parallel).unwrap();
        for level in 0..=a.time().nt {
            for (u, v) in a.row(level).iter().zip(b.row(level)) {
                assert!(u <= v, "level {level}: {u} > {v}");
            }
        }
    }

    #[test]
    fn initial_row_variant_matches_full_solve() {
        let m = portfolio(0.02);
        let grid = SolverGrid::for_model(&m, 151).unwrap();
        let mesh = ControlMesh::uniform(&m, &[25]).unwrap();
        let spec = RiskSpec::mean_cvar(0.95, 0.5).unwrap().inf_convolve(0.02).unwrap();
        let h = |x: f64| spec.eval(-x, &[0.05]);
        let full = solve_hjb(&m, h, &grid, &mesh, Execution::Parallel).unwrap();
        let row = solve_hjb_initial_row(&m, h, &grid, &mesh, Execution::Sequential).unwrap();
        assert_eq!(full.row(0), &row[..]);
    }

    #[test]
    fn errors() {
        let m = portfolio(0.0);
        let grid = SolverGrid::for_model(&m.perturb(0.01).unwrap(), 101).unwrap();
        let mesh = ControlMesh::uniform(&m, &[13]).unwrap();
        assert_eq!(
            solve_hjb(&m, |x| x, &grid, &mesh, Execution::Parallel).unwrap_err(),
            Error::NotParabolic
        );
        let m = portfolio(0.01);
        let fine = SolverGrid::for_model(&m, 4000).unwrap().with_step_cap(1000);
        assert!(matches!(
            solve_hjb(&m, |x| x, &fine, &mesh, Execution::Parallel),
            Err(Error::TimeStepCap { .. })
        ));
        let grid = SolverGrid::new(-1.0, 1.0, 11).unwrap();
        assert!(matches!(grid.interpolate(&[0.0; 11], 1.5), Err(Error::OutsideGrid { .. })));
        assert!(SolverGrid::new(1.0, -1.0, 11).is_err());
        assert!(SolverGrid::new(-1.0, 1.0, 2).is_err());
    }

    #[test]
    fn interpolation() {
        let grid = SolverGrid::new(0.0, 1.0, 11).unwrap();
        let row: Vec<f64> = grid.nodes().iter().map(|x| 3.0 * x - 1.0).collect();
        assert_eq!(grid.interpolate(&row, grid.node(4)).unwrap(), row[4]);
        let mid = 0.5 * (grid.node(4) + grid.node(5));
        assert!((grid.interpolate(&row, mid).unwrap() - 0.5 * (row[4] + row[5])).abs() < 1e-15);
    }

    #[test]
    fn mesh_contains_endpoints_and_zero() {
        let m = portfolio(0.01);
        let mesh = ControlMesh::uniform(&m, &[4]).unwrap();
        let pts: Vec<f64> = mesh.iter().map(|a| a[0]).collect();
        assert!(pts.contains(&-6.0) && pts.contains(&6.0) && pts.contains(&0.0));
        assert_eq!(pts[0], 0.0);
    }

    #[test]
    fn exact_candidate_beats_mesh() {
        // The continuum minimiser can only lower the discrete Hamiltonian.
        let m = portfolio(0.02);
        let grid = SolverGrid::for_model(&m, 201).unwrap();
        let coarse = ControlMesh::uniform(&m, &[3]).unwrap();
        let spec = RiskSpec::mean_cvar(0.95, 0.3).unwrap().inf_convolve(0.02).unwrap();
        let h = |x: f64| spec.eval(-x, &[0.1]);
        let with = solve_hjb(&m, h, &grid, &coarse, Execution::Parallel).unwrap();
        let without =
            solve_hjb(&m, h, &grid, &coarse.clone().with_analytic_candidate(false), Execution::Parallel).unwrap();
        let fine = ControlMesh::uniform(&m, &[1201]).unwrap().with_analytic_candidate(false);
        let dense = solve_hjb(&m, h, &grid, &fine, Execution::Parallel).unwrap();
        let (a, b, c) = (
            with.value_at(0.0).unwrap(),
            without.value_at(0.0).unwrap(),
            dense.value_at(0.0).unwrap(),
        );
        assert!(a <= b);
        assert!(a <= c + 1e-12);
        assert!((a - c).abs() < 1e-4, "{a} vs {c}");
    }
}
