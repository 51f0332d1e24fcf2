//! Controlled one-dimensional SDE `dX = mu(X, a) dt + sigma(X, a) dW + eta dW'`
//! and the log-wealth portfolio instance.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::risk::CostMap;

/// Maximum control dimension handled by the solvers.
pub const MAX_CONTROL_DIM: usize = 2;

/// Axis-aligned control box in `R^k`.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlBox {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl ControlBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.is_empty() || lower.len() != upper.len() {
            return Err(Error::param("control_box", "bounds must be non-empty and equal length"));
        }
        if lower.len() > MAX_CONTROL_DIM {
            return Err(Error::param(
                "control_box",
                format!("control dimension {} exceeds {MAX_CONTROL_DIM}", lower.len()),
            ));
        }
        if lower.iter().zip(&upper).any(|(l, u)| !(l <= u) || !l.is_finite() || !u.is_finite()) {
            return Err(Error::param("control_box", "each lower bound must be <= its upper bound"));
        }
        Ok(ControlBox { lower, upper })
    }

    pub fn interval(lo: f64, hi: f64) -> Result<Self> {
        Self::new(vec![lo], vec![hi])
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn contains(&self, a: &[f64]) -> bool {
        a.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .all(|(v, (l, u))| *l <= *v && *v <= *u)
    }

    pub fn midpoint(&self) -> Vec<f64> {
        self.lower.iter().zip(&self.upper).map(|(l, u)| 0.5 * (l + u)).collect()
    }

    /// Corners of the box (2^k points).
    pub fn corners(&self) -> Vec<Vec<f64>> {
        let k = self.dim();
        (0..1usize << k)
            .map(|mask| {
                (0..k)
                    .map(|j| if mask >> j & 1 == 1 { self.upper[j] } else { self.lower[j] })
                    .collect()
            })
            .collect()
    }
}

/// Market data for the portfolio model: `k` risky assets plus a risk-free rate.
#[derive(Debug, Clone, PartialEq)]
pub struct MarketParams {
    pub mu: Vec<f64>,
    /// Row-major `k x k` covariance of returns.
    pub cov: Vec<f64>,
    pub r: f64,
    pub leverage: ControlBox,
}

impl MarketParams {
    pub fn single_asset(mu: f64, sigma: f64, r: f64, min_leverage: f64, max_leverage: f64) -> Result<Self> {
        let p = MarketParams {
            mu: vec![mu],
            cov: vec![sigma * sigma],
            r,
            leverage: ControlBox::interval(min_leverage, max_leverage)?,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn k(&self) -> usize {
        self.mu.len()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.k();
        if k == 0 || self.cov.len() != k * k || self.leverage.dim() != k {
            return Err(Error::param("market", "mu, cov and leverage dimensions disagree"));
        }
        for i in 0..k {
            for j in 0..k {
                if (self.cov[i * k + j] - self.cov[j * k + i]).abs() > 1e-12 {
                    return Err(Error::param("cov", "covariance matrix is not symmetric"));
                }
            }
        }
        cholesky(&self.cov, k).map(|_| ())
    }
}

/// Lower-triangular factor `L` with `cov = L L^T`; semidefinite matrices are
/// accepted (zero pivots give zero columns), indefinite ones rejected.
fn cholesky(cov: &[f64], k: usize) -> Result<Vec<f64>> {
    let mut l = vec![0.0; k * k];
    let scale = cov.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    for j in 0..k {
        let mut d = cov[j * k + j];
        for p in 0..j {
            d -= l[j * k + p] * l[j * k + p];
        }
        if d < -1e-12 * scale {
            return Err(Error::param("cov", "covariance matrix is not positive semidefinite"));
        }
        let djj = d.max(0.0).sqrt();
        l[j * k + j] = djj;
        for i in j + 1..k {
            let mut s = cov[i * k + j];
            for p in 0..j {
                s -= l[i * k + p] * l[j * k + p];
            }
            if djj > 0.0 {
                l[i * k + j] = s / djj;
            } else if s.abs() > 1e-12 * scale {
                return Err(Error::param("cov", "covariance matrix is not positive semidefinite"));
            }
        }
    }
    Ok(l)
}

pub type DriftFn = dyn Fn(f64, &[f64]) -> f64 + Send + Sync;

/// User-supplied coefficients with a single driving Brownian motion.
pub struct CustomCoefficients {
    pub drift: Box<DriftFn>,
    /// Volatility loading `sigma(x, a)`; only its square enters the PDEs.
    pub volatility: Box<DriftFn>,
    pub drift_lipschitz_x: f64,
    pub volatility_lipschitz_x: f64,
    /// True when neither coefficient depends on `x`.
    pub state_independent: bool,
}

#[derive(Clone)]
enum Coefficients {
    Portfolio {
        params: MarketParams,
        chol: Vec<f64>,
    },
    Custom(Arc<CustomCoefficients>),
}

/// `drift(a) = c0 + c1 a + c2 a^2`, `sigma^2(a) = s2 a^2` for a scalar control
/// whose coefficients do not depend on the state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadraticControl {
    pub c0: f64,
    pub c1: f64,
    pub c2: f64,
    pub s2: f64,
}

/// Coefficients of the single-asset portfolio as plain scalars. `drift` and
/// `effective_variance` perform the same floating-point operations as the
/// general [`SdeModel`] methods, so results agree bit for bit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalarCoefficients {
    r: f64,
    excess: f64,
    var: f64,
    eta2: f64,
}

impl ScalarCoefficients {
    #[inline(always)]
    pub fn drift(&self, a: f64) -> f64 {
        (self.r + a * self.excess) - 0.5 * (a * self.var * a)
    }

    #[inline(always)]
    pub fn effective_variance(&self, a: f64) -> f64 {
        (a * self.var * a).max(0.0) + self.eta2
    }
}

#[derive(Clone)]
pub struct SdeModel {
    coeffs: Coefficients,
    control_box: ControlBox,
    x0: f64,
    horizon: f64,
    eta: f64,
    cost: CostMap,
}

impl fmt::Debug for SdeModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match &self.coeffs {
            Coefficients::Portfolio { params, .. } => format!("portfolio {params:?}"),
            Coefficients::Custom(_) => "custom".to_owned(),
        };
        f.debug_struct("SdeModel")
            .field("coefficients", &kind)
            .field("control_box", &self.control_box)
            .field("x0", &self.x0)
            .field("horizon", &self.horizon)
            .field("eta", &self.eta)
            .field("cost", &self.cost)
            .finish()
    }
}

fn check_horizon_eta(horizon: f64, eta: f64) -> Result<()> {
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(Error::param("horizon", format!("{horizon} must be > 0")));
    }
    if !(eta >= 0.0 && eta.is_finite()) {
        return Err(Error::param("eta", format!("{eta} must be >= 0")));
    }
    Ok(())
}

impl SdeModel {
    /// Log-wealth `X = log Z` of a constantly rebalanced portfolio:
    /// `drift = r + a.(mu - r) - a'Sigma a / 2`, `sigma = sqrt(a'Sigma a)`, `X_0 = 0`,
    /// cost `g(x) = -x`.
    pub fn portfolio(params: MarketParams, horizon: f64, eta: f64) -> Result<Self> {
        check_horizon_eta(horizon, eta)?;
        params.validate()?;
        let chol = cholesky(&params.cov, params.k())?;
        Ok(SdeModel {
            control_box: params.leverage.clone(),
            coeffs: Coefficients::Portfolio { params, chol },
            x0: 0.0,
            horizon,
            eta,
            cost: CostMap::Negate,
        })
    }

    pub fn custom(
        coefficients: CustomCoefficients,
        control_box: ControlBox,
        x0: f64,
        horizon: f64,
        eta: f64,
        cost: CostMap,
    ) -> Result<Self> {
        check_horizon_eta(horizon, eta)?;
        Ok(SdeModel {
            coeffs: Coefficients::Custom(Arc::new(coefficients)),
            control_box,
            x0,
            horizon,
            eta,
            cost,
        })
    }

    /// Same model with the extra noise level replaced.
    pub fn perturb(&self, eta: f64) -> Result<Self> {
        check_horizon_eta(self.horizon, eta)?;
        Ok(SdeModel {
            eta,
            ..self.clone()
        })
    }

    /// Same model with a different control box (for static or restricted runs).
    pub fn with_control_box(&self, control_box: ControlBox) -> Result<Self> {
        if control_box.dim() != self.control_box.dim() {
            return Err(Error::param("control_box", "dimension differs from the model"));
        }
        Ok(SdeModel {
            control_box,
            ..self.clone()
        })
    }

    pub fn control_box(&self) -> &ControlBox {
        &self.control_box
    }

    pub fn control_dim(&self) -> usize {
        self.control_box.dim()
    }

    pub fn x0(&self) -> f64 {
        self.x0
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn cost(&self) -> &CostMap {
        &self.cost
    }

    pub fn market(&self) -> Option<&MarketParams> {
        match &self.coeffs {
            Coefficients::Portfolio { params, .. } => Some(params),
            Coefficients::Custom(_) => None,
        }
    }

    #[inline]
    pub fn drift(&self, x: f64, a: &[f64]) -> f64 {
        match &self.coeffs {
            Coefficients::Portfolio { params, .. } => {
                let k = params.k();
                let mut lin = params.r;
                let mut quad = 0.0;
                for i in 0..k {
                    lin += a[i] * (params.mu[i] - params.r);
                    for j in 0..k {
                        quad += a[i] * params.cov[i * k + j] * a[j];
                    }
                }
                lin - 0.5 * quad
            }
            Coefficients::Custom(c) => (c.drift)(x, a),
        }
    }

    /// `sigma(x, a)^2`, without the perturbation.
    #[inline]
    pub fn variance(&self, x: f64, a: &[f64]) -> f64 {
        match &self.coeffs {
            Coefficients::Portfolio { params, .. } => {
                let k = params.k();
                let mut quad = 0.0;
                for i in 0..k {
                    for j in 0..k {
                        quad += a[i] * params.cov[i * k + j] * a[j];
                    }
                }
                quad.max(0.0)
            }
            Coefficients::Custom(c) => {
                let s = (c.volatility)(x, a);
                s * s
            }
        }
    }

    pub fn diffusion(&self, x: f64, a: &[f64]) -> f64 {
        self.variance(x, a).sqrt()
    }

    /// `sigma^2 + eta^2`.
    #[inline]
    pub fn effective_variance(&self, x: f64, a: &[f64]) -> f64 {
        self.variance(x, a) + self.eta * self.eta
    }

    /// Number of Brownian factors driving `sigma` (the `eta` noise is extra).
    pub fn n_factors(&self) -> usize {
        match &self.coeffs {
            Coefficients::Portfolio { params, .. } => params.k(),
            Coefficients::Custom(_) => 1,
        }
    }

    /// Signed loadings of `dX` on each Brownian factor; their squared norm is
    /// `variance(x, a)`.
    pub fn loadings(&self, x: f64, a: &[f64], out: &mut [f64]) {
        match &self.coeffs {
            Coefficients::Portfolio { params, chol } => {
                let k = params.k();
                for (j, o) in out.iter_mut().enumerate().take(k) {
                    *o = (j..k).map(|i| a[i] * chol[i * k + j]).sum();
                }
            }
            Coefficients::Custom(c) => out[0] = (c.volatility)(x, a),
        }
    }

    /// Loadings of asset `i`'s log price on the Brownian factors, and its log drift.
    pub fn asset_log_dynamics(&self, i: usize) -> Option<(f64, Vec<f64>)> {
        let Coefficients::Portfolio { params, chol } = &self.coeffs else {
            return None;
        };
        let k = params.k();
        let drift = params.mu[i] - 0.5 * params.cov[i * k + i];
        Some((drift, (0..k).map(|j| chol[i * k + j]).collect()))
    }

    /// Part of the drift that depends on neither the state nor the control
    /// (the risk-free rate for portfolios, zero otherwise). Solvers work in the
    /// frame `x - offset * t`, where riskless controls do not move the state.
    pub fn drift_offset(&self) -> f64 {
        match &self.coeffs {
            Coefficients::Portfolio { params, .. } => params.r,
            Coefficients::Custom(_) => 0.0,
        }
    }

    pub fn state_independent(&self) -> bool {
        match &self.coeffs {
            Coefficients::Portfolio { .. } => true,
            Coefficients::Custom(c) => c.state_independent,
        }
    }

    /// Lipschitz constants in `x` of drift and volatility, uniform over the box.
    pub fn lipschitz_x(&self) -> (f64, f64) {
        match &self.coeffs {
            Coefficients::Portfolio { .. } => (0.0, 0.0),
            Coefficients::Custom(c) => (c.drift_lipschitz_x, c.volatility_lipschitz_x),
        }
    }

    /// Scalar form of the single-asset portfolio coefficients.
    pub fn scalar_coefficients(&self) -> Option<ScalarCoefficients> {
        match &self.coeffs {
            Coefficients::Portfolio { params, .. } if params.k() == 1 => Some(ScalarCoefficients {
                r: params.r,
                excess: params.mu[0] - params.r,
                var: params.cov[0],
                eta2: self.eta * self.eta,
            }),
            _ => None,
        }
    }

    /// Quadratic structure of the single-asset portfolio coefficients.
    pub fn quadratic_control(&self) -> Option<QuadraticControl> {
        match &self.coeffs {
            Coefficients::Portfolio { params, .. } if params.k() == 1 => Some(QuadraticControl {
                c0: params.r,
                c1: params.mu[0] - params.r,
                c2: -0.5 * params.cov[0],
                s2: params.cov[0],
            }),
            _ => None,
        }
    }

    /// Sample controls used for extremal coefficient estimates: corners, the
    /// midpoint and a per-axis grid of `per_axis` points.
    pub fn control_samples(&self, per_axis: usize) -> Vec<Vec<f64>> {
        let b = &self.control_box;
        let per_axis = per_axis.max(2);
        let axis = |j: usize| -> Vec<f64> {
            (0..per_axis)
                .map(|i| b.lower[j] + (b.upper[j] - b.lower[j]) * i as f64 / (per_axis - 1) as f64)
                .collect()
        };
        let mut out: Vec<Vec<f64>> = match b.dim() {
            1 => axis(0).into_iter().map(|v| vec![v]).collect(),
            _ => {
                let (a0, a1) = (axis(0), axis(1));
                a0.iter().flat_map(|&u| a1.iter().map(move |&v| vec![u, v])).collect()
            }
        };
        if b.contains(&vec![0.0; b.dim()]) {
            out.push(vec![0.0; b.dim()]);
        }
        out.push(b.midpoint());
        out
    }

    /// `(max sigma_eff, max |mu|)` over sampled controls at `x`.
    pub fn coefficient_bounds(&self, x: f64) -> (f64, f64) {
        self.control_samples(101).iter().fold((0.0f64, 0.0f64), |(s, m), a| {
            (s.max(self.effective_variance(x, a).sqrt()), m.max(self.drift(x, a).abs()))
        })
    }

    /// `inf sigma^2 + eta^2` over sampled controls and states.
    pub fn min_effective_variance(&self, xs: &[f64]) -> f64 {
        let controls = self.control_samples(101);
        xs.iter()
            .flat_map(|&x| controls.iter().map(move |a| (x, a)))
            .map(|(x, a)| self.effective_variance(x, a))
            .fold(f64::INFINITY, f64::min)
    }

    /// True when the effective diffusion is bounded below by a positive constant
    /// on the sampled states.
    pub fn is_uniformly_parabolic(&self, xs: &[f64]) -> bool {
        self.eta > 0.0 || self.min_effective_variance(xs) > 0.0
    }
}
