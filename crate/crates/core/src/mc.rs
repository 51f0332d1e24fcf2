//! Monte Carlo simulation of the controlled SDE and sample estimators.
//!
//! Each path owns a ChaCha stream selected by its index, so a batch is
//! bit-identical for a given seed whatever the number of worker threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::dynamics::{SdeModel, MAX_CONTROL_DIM};
use crate::error::{Error, Result};
use crate::hjb::PolicyField;
use crate::normal;
use crate::par::{self, Execution};
use crate::risk::SmoothedRiskSpec;

#[derive(Debug, Clone, Copy)]
pub enum Policy<'a> {
    Constant(&'a [f64]),
    Feedback(&'a PolicyField),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimOptions {
    pub n_paths: usize,
    pub dt: f64,
    pub seed: u64,
    /// Indices of paths whose full trajectories are recorded.
    pub trace: Vec<usize>,
}

impl SimOptions {
    pub fn new(n_paths: usize, dt: f64, seed: u64) -> Self {
        SimOptions {
            n_paths,
            dt,
            seed,
            trace: Vec::new(),
        }
    }

    pub fn with_trace(mut self, trace: Vec<usize>) -> Self {
        self.trace = trace;
        self
    }
}

/// One recorded trajectory. `asset_log_return` is the log price of the first
/// risky asset when the model is a portfolio, otherwise empty.
#[derive(Debug, Clone, PartialEq)]
pub struct PathTrace {
    pub path: usize,
    pub times: Vec<f64>,
    pub state: Vec<f64>,
    /// Control applied on each step, flattened with stride `k`.
    pub controls: Vec<f64>,
    pub asset_log_return: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimBatch {
    pub terminal_values: Vec<f64>,
    pub paths: Vec<PathTrace>,
    pub n_paths: usize,
    pub dt: f64,
    pub seed: u64,
}

fn path_rng(seed: u64, path: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path as u64);
    rng
}

/// Euler–Maruyama with the `eta` noise as an extra independent factor.
/// Feedback controls are read at the nearest grid node.
pub fn simulate(model: &SdeModel, policy: Policy<'_>, opts: &SimOptions, exec: Execution) -> Result<SimBatch> {
    let horizon = model.horizon();
    if !(opts.dt > 0.0) || opts.dt > horizon * (1.0 + 1e-12) {
        return Err(Error::param("dt", format!("{} must lie in (0, T]", opts.dt)));
    }
    if opts.n_paths == 0 {
        return Err(Error::Empty("n_paths = 0"));
    }
    let k = model.control_dim();
    match policy {
        Policy::Constant(a) if a.len() != k => {
            return Err(Error::param("policy", "constant control has the wrong dimension"))
        }
        Policy::Feedback(p) if p.dim() != k => {
            return Err(Error::param("policy", "feedback control has the wrong dimension"))
        }
        _ => {}
    }
    let steps = ((horizon / opts.dt) - 1e-9).ceil().max(1.0) as usize;
    let dt = horizon / steps as f64;
    let sqrt_dt = dt.sqrt();
    let limit = explosion_limit(model, policy);
    let factors = model.n_factors();
    let asset = model.asset_log_dynamics(0);
    let eta = model.eta();

    let run = |path: usize| -> Result<(f64, Option<PathTrace>)> {
        let mut rng = path_rng(opts.seed, path);
        let tracing = opts.trace.contains(&path);
        let mut trace = tracing.then(|| PathTrace {
            path,
            times: Vec::with_capacity(steps + 1),
            state: Vec::with_capacity(steps + 1),
            controls: Vec::with_capacity(steps * k),
            asset_log_return: Vec::new(),
        });
        let mut x = model.x0();
        let mut s = 0.0;
        let mut load = [0.0f64; MAX_CONTROL_DIM];
        let mut z = [0.0f64; MAX_CONTROL_DIM];
        if let Some(tr) = trace.as_mut() {
            tr.times.push(0.0);
            tr.state.push(x);
            if asset.is_some() {
                tr.asset_log_return.push(0.0);
            }
        }
        for n in 0..steps {
            let t = n as f64 * dt;
            let a = match policy {
                Policy::Constant(a) => a,
                Policy::Feedback(p) => p.lookup(t, x),
            };
            for zj in z.iter_mut().take(factors) {
                *zj = StandardNormal.sample(&mut rng);
            }
            let extra: f64 = StandardNormal.sample(&mut rng);
            model.loadings(x, a, &mut load[..factors]);
            let noise: f64 = load[..factors].iter().zip(&z[..factors]).map(|(l, z)| l * z).sum();
            let drift = model.drift(x, a);
            x += drift * dt + (noise + eta * extra) * sqrt_dt;
            if !(x.abs() <= limit) {
                return Err(Error::PathExplosion {
                    path,
                    time: t + dt,
                    value: x.abs(),
                    limit,
                });
            }
            if let Some(tr) = trace.as_mut() {
                tr.times.push(t + dt);
                tr.state.push(x);
                tr.controls.extend_from_slice(a);
                if let Some((mu_s, ref l)) = asset {
                    let dw: f64 = l.iter().zip(&z[..factors]).map(|(l, z)| l * z).sum();
                    s += mu_s * dt + dw * sqrt_dt;
                    tr.asset_log_return.push(s);
                }
            }
        }
        Ok((x, trace))
    };

    let results = par::map_indexed(exec, opts.n_paths, run);
    let mut terminal_values = Vec::with_capacity(opts.n_paths);
    let mut paths = Vec::new();
    for r in results {
        let (x, tr) = r?;
        terminal_values.push(x);
        paths.extend(tr);
    }
    Ok(SimBatch {
        terminal_values,
        paths,
        n_paths: opts.n_paths,
        dt,
        seed: opts.seed,
    })
}

fn explosion_limit(model: &SdeModel, policy: Policy<'_>) -> f64 {
    match policy {
        Policy::Feedback(p) => 10.0 * p.grid().x_min().abs().max(p.grid().x_max().abs()),
        Policy::Constant(a) => {
            let t = model.horizon();
            let x0 = model.x0();
            let half = 6.0 * model.effective_variance(x0, a).sqrt() * t.sqrt() + model.drift(x0, a).abs() * t;
            10.0 * (x0.abs() + half.max(1.0))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanEstimate {
    pub mean: f64,
    pub stderr: f64,
}

pub fn mean_estimate(values: &[f64]) -> Result<MeanEstimate> {
    if values.is_empty() {
        return Err(Error::Empty("no samples"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    Ok(MeanEstimate {
        mean,
        stderr: (var / n).sqrt(),
    })
}

fn check_level(alpha: f64) -> Result<()> {
    if (0.0..1.0).contains(&alpha) {
        Ok(())
    } else {
        Err(Error::param("alpha", format!("{alpha} is not in [0, 1)")))
    }
}

fn sorted(values: &[f64]) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(Error::Empty("no samples"));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Ok(v)
}

fn cvar_sorted(s: &[f64], alpha: f64) -> f64 {
    let n = s.len();
    let scale = 1.0 / ((1.0 - alpha) * n as f64);
    let mut best = f64::INFINITY;
    // tail = sum of s[j+1..]
    let mut tail = 0.0;
    for j in (0..n).rev() {
        let y = s[j];
        let excess = tail - (n - 1 - j) as f64 * y;
        best = best.min(y + scale * excess);
        tail += y;
    }
    best
}

/// Empirical CVaR: `min_y y + sum (x_i - y)^+ / ((1 - alpha) n)`, minimised
/// exactly over the sample points.
pub fn sample_cvar(values: &[f64], alpha: f64) -> Result<f64> {
    check_level(alpha)?;
    Ok(cvar_sorted(&sorted(values)?, alpha))
}

/// Empirical VaR: `inf { x : F_n(x) >= alpha }`.
pub fn sample_var(values: &[f64], alpha: f64) -> Result<f64> {
    check_level(alpha)?;
    let s = sorted(values)?;
    let n = s.len();
    let k = ((alpha * n as f64) - 1e-9).ceil().max(1.0) as usize;
    Ok(s[k.min(n) - 1])
}

/// Bootstrap standard error of [`sample_cvar`].
pub fn bootstrap_cvar_stderr(values: &[f64], alpha: f64, resamples: usize, seed: u64) -> Result<f64> {
    use rand::Rng;
    check_level(alpha)?;
    if values.is_empty() {
        return Err(Error::Empty("no samples"));
    }
    let n = values.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stats = Vec::with_capacity(resamples);
    let mut buf = vec![0.0; n];
    for _ in 0..resamples {
        for b in buf.iter_mut() {
            *b = values[rng.random_range(0..n)];
        }
        buf.sort_by(f64::total_cmp);
        stats.push(cvar_sorted(&buf, alpha));
    }
    let m = mean_estimate(&stats)?;
    Ok(m.stderr * (resamples as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveEstimate {
    pub objective: MeanEstimate,
    pub gradient: Vec<MeanEstimate>,
}

/// Sample means of `f_eps(g(X_T), y)` and `D_y f_eps(g(X_T), y)`.
pub fn estimate_objective_and_gradient(
    batch: &SimBatch,
    model: &SdeModel,
    smoothed: &SmoothedRiskSpec,
    y: &[f64],
) -> Result<ObjectiveEstimate> {
    let cost = model.cost();
    let m = smoothed.m();
    let xs = &batch.terminal_values;
    let f: Vec<f64> = xs.iter().map(|&x| smoothed.eval(cost.apply(x), y)).collect();
    let mut grads = vec![Vec::with_capacity(xs.len()); m];
    let mut g = vec![0.0; m];
    for &x in xs {
        smoothed.gradient_into(cost.apply(x), y, &mut g);
        for (c, v) in g.iter().enumerate() {
            grads[c].push(*v);
        }
    }
    Ok(ObjectiveEstimate {
        objective: mean_estimate(&f)?,
        gradient: grads.iter().map(|g| mean_estimate(g)).collect::<Result<_>>()?,
    })
}

/// CVaR of a normal loss: `mean + sd phi(z_alpha) / (1 - alpha)`.
pub fn normal_cvar(mean_loss: f64, sd: f64, alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::param("alpha", format!("{alpha} is not in (0, 1)")));
    }
    if !(sd >= 0.0) {
        return Err(Error::param("sd", format!("{sd} < 0")));
    }
    if sd == 0.0 {
        return Ok(mean_loss);
    }
    Ok(mean_loss + sd * normal::pdf(normal::quantile(alpha)) / (1.0 - alpha))
}

/// Sorted `(value, i / n)` pairs.
pub fn ecdf(values: &[f64]) -> Vec<(f64, f64)> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    v.into_iter()
        .enumerate()
        .map(|(i, x)| (x, (i + 1) as f64 / n))
        .collect()
}

/// `F_n(x)`.
pub fn ecdf_at(sorted_values: &[f64], x: f64) -> f64 {
    sorted_values.partition_point(|v| *v <= x) as f64 / sorted_values.len() as f64
}
