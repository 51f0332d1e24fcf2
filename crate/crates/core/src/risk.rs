//! Extremal risk integrands `f(x, y)` and their inf-convolution smoothing.
//!
//! A risk measure is extremal when `rho(xi) = inf_y E[f(xi, y)]` for a convex
//! integrand `f`. Every built-in integrand here is a non-negative combination of
//! [`Term`]s, each depending on the cost `x` and on at most one coordinate of
//! `y`. Because distinct terms use distinct coordinates, the inf-convolution in
//! `y` splits term by term and every term has a closed-form envelope.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};

/// One separable piece of an integrand. `coord` indexes the auxiliary vector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Term {
    /// `weight * x`
    Mean { weight: f64 },
    /// `weight * (y + (x - y)^+ / (1 - alpha))`
    Cvar { weight: f64, alpha: f64, coord: usize },
    /// `weight * (x - y)^2`
    Squared { weight: f64, coord: usize },
    /// `weight * |x - y|`
    Absolute { weight: f64, coord: usize },
}

impl Term {
    fn coord(&self) -> Option<usize> {
        match *self {
            Term::Mean { .. } => None,
            Term::Cvar { coord, .. } | Term::Squared { coord, .. } | Term::Absolute { coord, .. } => {
                Some(coord)
            }
        }
    }

    fn weight(&self) -> f64 {
        match *self {
            Term::Mean { weight }
            | Term::Cvar { weight, .. }
            | Term::Squared { weight, .. }
            | Term::Absolute { weight, .. } => weight,
        }
    }

    fn lipschitz_y(&self) -> Option<f64> {
        match *self {
            Term::Mean { .. } => Some(0.0),
            Term::Cvar { weight, alpha, .. } => Some(weight * (alpha / (1.0 - alpha)).max(1.0)),
            Term::Squared { .. } => None,
            Term::Absolute { weight, .. } => Some(weight),
        }
    }

    fn lipschitz_x(&self) -> Option<f64> {
        match *self {
            Term::Mean { weight } | Term::Absolute { weight, .. } => Some(weight),
            Term::Cvar { weight, alpha, .. } => Some(weight / (1.0 - alpha)),
            Term::Squared { .. } => None,
        }
    }

    fn value(&self, x: f64, y: f64) -> f64 {
        match *self {
            Term::Mean { weight } => weight * x,
            Term::Cvar { weight, alpha, .. } => weight * (y + (x - y).max(0.0) / (1.0 - alpha)),
            Term::Squared { weight, .. } => weight * (x - y) * (x - y),
            Term::Absolute { weight, .. } => weight * (x - y).abs(),
        }
    }

    /// y-subgradient; at the kink `x == y` the branch with `x < y` is used.
    fn subgradient(&self, x: f64, y: f64) -> f64 {
        match *self {
            Term::Mean { .. } => 0.0,
            Term::Cvar { weight, alpha, .. } => {
                if x > y {
                    weight - weight / (1.0 - alpha)
                } else {
                    weight
                }
            }
            Term::Squared { weight, .. } => 2.0 * weight * (y - x),
            Term::Absolute { weight, .. } => {
                if x > y {
                    -weight
                } else {
                    weight
                }
            }
        }
    }

    /// Moreau envelope `inf_z [term(x, z) + (y - z)^2 / (2 eps)]` and its y-derivative.
    fn envelope(&self, x: f64, y: f64, eps: f64) -> (f64, f64) {
        let d = y - x;
        match *self {
            Term::Mean { weight } => (weight * x, 0.0),
            Term::Cvar { weight, alpha, .. } => {
                let down = weight * alpha / (1.0 - alpha);
                if d > weight * eps {
                    (weight * y - 0.5 * weight * weight * eps, weight)
                } else if d < -down * eps {
                    let linear = weight * y + weight * (x - y) / (1.0 - alpha);
                    (linear - 0.5 * down * down * eps, -down)
                } else {
                    (weight * x + d * d / (2.0 * eps), d / eps)
                }
            }
            Term::Squared { weight, .. } => {
                let s = 1.0 + 2.0 * weight * eps;
                (weight * d * d / s, 2.0 * weight * d / s)
            }
            Term::Absolute { weight, .. } => {
                if d.abs() <= weight * eps {
                    (d * d / (2.0 * eps), d / eps)
                } else {
                    (weight * d.abs() - 0.5 * weight * weight * eps, weight * d.signum())
                }
            }
        }
    }

    /// Same envelope by golden-section search over `z`.
    fn envelope_numeric(&self, x: f64, y: f64, eps: f64) -> (f64, f64) {
        if let Term::Mean { weight } = *self {
            return (weight * x, 0.0);
        }
        let (lo, hi) = match self.lipschitz_y() {
            Some(l) => (y - eps * l - 1.0, y + eps * l + 1.0),
            None => (y.min(x) - 1.0, y.max(x) + 1.0),
        };
        let objective = |z: f64| self.value(x, z) + (y - z) * (y - z) / (2.0 * eps);
        let (z, v) = golden_section_min(objective, lo, hi, 1e-12);
        (v, (y - z) / eps)
    }
}

/// Which built-in family a spec came from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RiskKind {
    PureCvar { alpha: f64 },
    MeanCvar { alpha: f64, lambda: f64 },
    Variance,
    MeanVariance { lambda: f64 },
    Mad,
    WeightedCombination,
}

impl RiskKind {
    pub fn name(&self) -> &'static str {
        match self {
            RiskKind::PureCvar { .. } => "pure_cvar",
            RiskKind::MeanCvar { .. } => "mean_cvar",
            RiskKind::Variance => "variance",
            RiskKind::MeanVariance { .. } => "mean_variance",
            RiskKind::Mad => "mad",
            RiskKind::WeightedCombination => "weighted_combination",
        }
    }
}

/// Convex integrand `f(x, y)` with `x` the scalar cost and `y` in `R^m`.
#[derive(Debug, Clone, PartialEq)]
pub struct RiskSpec {
    kind: RiskKind,
    terms: Vec<Term>,
    m: usize,
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::param("alpha", format!("{alpha} is not in (0, 1)")))
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if lambda >= 0.0 && lambda.is_finite() {
        Ok(())
    } else {
        Err(Error::param("lambda", format!("{lambda} is negative or not finite")))
    }
}

impl RiskSpec {
    pub fn make(kind: RiskKind) -> Result<Self> {
        match kind {
            RiskKind::PureCvar { alpha } => Self::pure_cvar(alpha),
            RiskKind::MeanCvar { alpha, lambda } => Self::mean_cvar(alpha, lambda),
            RiskKind::Variance => Ok(Self::variance()),
            RiskKind::MeanVariance { lambda } => Self::mean_variance(lambda),
            RiskKind::Mad => Ok(Self::mad()),
            RiskKind::WeightedCombination => Err(Error::param(
                "kind",
                "weighted combinations are built with RiskSpec::combination",
            )),
        }
    }

    /// `y + (x - y)^+ / (1 - alpha)`; its infimum over `y` is `CVaR_alpha`.
    pub fn pure_cvar(alpha: f64) -> Result<Self> {
        check_alpha(alpha)?;
        Ok(RiskSpec {
            kind: RiskKind::PureCvar { alpha },
            terms: vec![Term::Cvar { weight: 1.0, alpha, coord: 0 }],
            m: 1,
        })
    }

    /// `x + lambda (y + (x - y)^+ / (1 - alpha))`.
    pub fn mean_cvar(alpha: f64, lambda: f64) -> Result<Self> {
        check_alpha(alpha)?;
        check_lambda(lambda)?;
        Ok(RiskSpec {
            kind: RiskKind::MeanCvar { alpha, lambda },
            terms: vec![
                Term::Mean { weight: 1.0 },
                Term::Cvar { weight: lambda, alpha, coord: 0 },
            ],
            m: 1,
        })
    }

    pub fn variance() -> Self {
        RiskSpec {
            kind: RiskKind::Variance,
            terms: vec![Term::Squared { weight: 1.0, coord: 0 }],
            m: 1,
        }
    }

    pub fn mean_variance(lambda: f64) -> Result<Self> {
        check_lambda(lambda)?;
        Ok(RiskSpec {
            kind: RiskKind::MeanVariance { lambda },
            terms: vec![Term::Mean { weight: 1.0 }, Term::Squared { weight: lambda, coord: 0 }],
            m: 1,
        })
    }

    /// Mean absolute deviation around the median, `|x - y|`.
    pub fn mad() -> Self {
        RiskSpec {
            kind: RiskKind::Mad,
            terms: vec![Term::Absolute { weight: 1.0, coord: 0 }],
            m: 1,
        }
    }

    /// Non-negative sum of terms. Each auxiliary coordinate may be used by at most
    /// one term; `m` is one past the largest coordinate used.
    pub fn combination(terms: Vec<Term>) -> Result<Self> {
        if terms.is_empty() {
            return Err(Error::Empty("combination needs at least one term"));
        }
        let mut used = Vec::new();
        for t in &terms {
            if !(t.weight() >= 0.0 && t.weight().is_finite()) {
                return Err(Error::param("weight", format!("{} must be finite and >= 0", t.weight())));
            }
            if let Term::Cvar { alpha, .. } = *t {
                check_alpha(alpha)?;
            }
            if let Some(c) = t.coord() {
                if used.contains(&c) {
                    return Err(Error::param(
                        "terms",
                        format!("coordinate {c} is shared by two terms"),
                    ));
                }
                used.push(c);
            }
        }
        let m = used.iter().max().map_or(0, |c| c + 1).max(1);
        Ok(RiskSpec {
            kind: RiskKind::WeightedCombination,
            terms,
            m,
        })
    }

    /// `Var + lambda CVaR_alpha` with `y = (y_var, y_cvar)`.
    pub fn variance_cvar(alpha: f64, lambda: f64) -> Result<Self> {
        check_lambda(lambda)?;
        Self::combination(vec![
            Term::Squared { weight: 1.0, coord: 0 },
            Term::Cvar { weight: lambda, alpha, coord: 1 },
        ])
    }

    pub fn kind(&self) -> RiskKind {
        self.kind
    }

    pub fn terms(&self) -> &[Term] {
        &self.terms
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn eval(&self, x: f64, y: &[f64]) -> f64 {
        debug_assert_eq!(y.len(), self.m);
        self.terms
            .iter()
            .map(|t| t.value(x, t.coord().map_or(0.0, |c| y[c])))
            .sum()
    }

    pub fn subgradient_into(&self, x: f64, y: &[f64], out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.m);
        out.iter_mut().for_each(|o| *o = 0.0);
        for t in &self.terms {
            if let Some(c) = t.coord() {
                out[c] += t.subgradient(x, y[c]);
            }
        }
    }

    pub fn eval_dyf(&self, x: f64, y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.m];
        self.subgradient_into(x, y, &mut out);
        out
    }

    /// Uniform Lipschitz constant of `y -> f(x, y)` (Euclidean norm of the
    /// subgradient), or `None` when unbounded.
    pub fn lipschitz_y(&self) -> Option<f64> {
        let mut sq = 0.0;
        for t in &self.terms {
            let l = t.lipschitz_y()?;
            sq += l * l;
        }
        Some(sq.sqrt())
    }

    /// Uniform Lipschitz constant of `x -> f(x, y)`, or `None` when unbounded.
    pub fn lipschitz_x(&self) -> Option<f64> {
        self.terms.iter().map(Term::lipschitz_x).sum()
    }

    /// `C = L^2 / 2`, so that `|V(y*) - V_eps(y*_eps)| <= C eps`.
    pub fn suboptimality_constant(&self) -> Result<f64> {
        let l = self
            .lipschitz_y()
            .ok_or(Error::UnboundedLipschitz(self.kind.name()))?;
        Ok(0.5 * l * l)
    }

    pub fn inf_convolve(&self, epsilon: f64) -> Result<SmoothedRiskSpec> {
        self.smoothed(epsilon, EnvelopeMethod::ClosedForm)
    }

    /// Inf-convolution evaluated by golden-section search on every call.
    pub fn inf_convolve_numeric(&self, epsilon: f64) -> Result<SmoothedRiskSpec> {
        self.smoothed(epsilon, EnvelopeMethod::GoldenSection)
    }

    fn smoothed(&self, epsilon: f64, method: EnvelopeMethod) -> Result<SmoothedRiskSpec> {
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(Error::param("epsilon", format!("{epsilon} must be > 0")));
        }
        Ok(SmoothedRiskSpec {
            base: self.clone(),
            epsilon,
            method,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnvelopeMethod {
    ClosedForm,
    GoldenSection,
}

/// `f_eps(x, y) = inf_z [f(x, z) + |y - z|^2 / (2 eps)]`; `1/eps`-semiconcave
/// and differentiable in `y`.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothedRiskSpec {
    base: RiskSpec,
    epsilon: f64,
    method: EnvelopeMethod,
}

impl SmoothedRiskSpec {
    pub fn base(&self) -> &RiskSpec {
        &self.base
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn method(&self) -> EnvelopeMethod {
        self.method
    }

    pub fn m(&self) -> usize {
        self.base.m
    }

    pub fn semiconcavity_constant(&self) -> f64 {
        1.0 / self.epsilon
    }

    fn term_envelope(&self, t: &Term, x: f64, y: f64) -> (f64, f64) {
        match self.method {
            EnvelopeMethod::ClosedForm => t.envelope(x, y, self.epsilon),
            EnvelopeMethod::GoldenSection => t.envelope_numeric(x, y, self.epsilon),
        }
    }

    pub fn eval(&self, x: f64, y: &[f64]) -> f64 {
        debug_assert_eq!(y.len(), self.base.m);
        self.base
            .terms
            .iter()
            .map(|t| self.term_envelope(t, x, t.coord().map_or(0.0, |c| y[c])).0)
            .sum()
    }

    pub fn gradient_into(&self, x: f64, y: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        for t in &self.base.terms {
            if let Some(c) = t.coord() {
                out[c] += self.term_envelope(t, x, y[c]).1;
            }
        }
    }

    pub fn gradient(&self, x: f64, y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.base.m];
        self.gradient_into(x, y, &mut out);
        out
    }
}

/// Smoothed mean-CVaR integrand composed with `g(x) = -x`, written in the
/// log-return `x` directly (three affine/quadratic branches in `x + y`).
pub fn mean_cvar_negated_closed_form(x: f64, y: f64, alpha: f64, lambda: f64, eps: f64) -> f64 {
    let s = x + y;
    let tail = alpha / (1.0 - alpha) * lambda;
    if s < -tail * eps {
        -x + lambda * (y - s / (1.0 - alpha)) - 0.5 * tail * tail * eps
    } else if s <= lambda * eps {
        s * s / (2.0 * eps) - (1.0 + lambda) * x
    } else {
        -x + lambda * y - 0.5 * lambda * lambda * eps
    }
}

/// Convex cost `g` applied to the terminal state.
#[derive(Clone)]
pub enum CostMap {
    /// `g(x) = -x`: a log-return becomes a loss.
    Negate,
    Identity,
    Custom {
        map: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
        lipschitz: f64,
    },
}

impl fmt::Debug for CostMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CostMap::Negate => f.write_str("Negate"),
            CostMap::Identity => f.write_str("Identity"),
            CostMap::Custom { lipschitz, .. } => {
                f.debug_struct("Custom").field("lipschitz", lipschitz).finish()
            }
        }
    }
}

impl CostMap {
    #[inline]
    pub fn apply(&self, x: f64) -> f64 {
        match self {
            CostMap::Negate => -x,
            CostMap::Identity => x,
            CostMap::Custom { map, .. } => map(x),
        }
    }

    pub fn lipschitz(&self) -> f64 {
        match self {
            CostMap::Negate | CostMap::Identity => 1.0,
            CostMap::Custom { lipschitz, .. } => *lipschitz,
        }
    }
}

/// Minimises a unimodal `f` on `[lo, hi]` until the bracket is narrower than
/// `tol`. Returns the best abscissa seen and its value.
pub fn golden_section_min<F: Fn(f64) -> f64>(f: F, lo: f64, hi: f64, tol: f64) -> (f64, f64) {
    const INV_PHI: f64 = 0.618_033_988_749_894_9;
    let (mut a, mut b) = (lo, hi);
    let mut c = b - INV_PHI * (b - a);
    let mut d = a + INV_PHI * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while (b - a).abs() > tol {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INV_PHI * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INV_PHI * (b - a);
            fd = f(d);
        }
        if c >= d {
            break;
        }
    }
    let mid = 0.5 * (a + b);
    let fm = f(mid);
    [(c, fc), (d, fd), (mid, fm)]
        .into_iter()
        .fold((mid, fm), |best, cand| if cand.1 < best.1 { cand } else { best })
}

/// Empirical `inf_y (1/n) sum f(xi_i, y)`. Each coordinate is minimised on its
/// own (terms are separable) by golden-section search, then polished against the
/// sample points, where piecewise-linear terms attain their minimum.
pub fn rho_hat(spec: &RiskSpec, samples: &[f64]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Empty("distribution has no samples"));
    }
    let n = samples.len() as f64;
    let (lo, hi) = samples
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &s| (a.min(s), b.max(s)));
    let mut total = 0.0;
    for t in &spec.terms {
        let mean_term = |y: f64| samples.iter().map(|&s| t.value(s, y)).sum::<f64>() / n;
        if t.coord().is_none() {
            total += mean_term(0.0);
            continue;
        }
        let (_, mut best) = golden_section_min(mean_term, lo - 1.0, hi + 1.0, 1e-12);
        for &s in samples {
            best = best.min(mean_term(s));
        }
        total += best;
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axiom {
    PositiveHomogeneity,
    Monotonicity,
    Subadditivity,
    Translation,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AxiomOutcome {
    pub axiom: Axiom,
    pub passed: bool,
    /// Largest violation seen (0 when none).
    pub worst_violation: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoherenceReport {
    pub outcomes: Vec<AxiomOutcome>,
}

impl CoherenceReport {
    pub fn passed(&self, axiom: Axiom) -> bool {
        self.outcomes
            .iter()
            .find(|o| o.axiom == axiom)
            .is_some_and(|o| o.passed)
    }

    pub fn all_passed(&self) -> bool {
        self.outcomes.iter().all(|o| o.passed)
    }
}

const EQUALITY_TOL: f64 = 1e-8;
const INEQUALITY_SLACK: f64 = 1e-9;

/// Checks the coherence axioms on `rho_hat` over the supplied empirical
/// distributions. Subadditivity pairs distribution `j` with `j + 1` both
/// index-wise and comonotonically (both sorted).
pub fn coherence_check(spec: &RiskSpec, distributions: &[Vec<f64>]) -> Result<CoherenceReport> {
    if distributions.is_empty() {
        return Err(Error::Empty("no distributions supplied"));
    }
    let rho = |s: &[f64]| rho_hat(spec, s);
    let mut homog = 0.0f64;
    let mut mono = 0.0f64;
    let mut subadd = 0.0f64;
    let mut transl = 0.0f64;

    for (j, xi) in distributions.iter().enumerate() {
        let base = rho(xi)?;
        let scale_tol = EQUALITY_TOL * (1.0 + base.abs());

        for a in [0.5, 2.0] {
            let scaled: Vec<f64> = xi.iter().map(|v| a * v).collect();
            let gap = (rho(&scaled)? - a * base).abs();
            homog = homog.max(if gap > scale_tol { gap } else { 0.0 });
        }

        let larger: Vec<f64> = xi
            .iter()
            .enumerate()
            .map(|(i, v)| v + 0.25 * (1.0 + (i as f64).sin()))
            .collect();
        mono = mono.max(base - rho(&larger)? - INEQUALITY_SLACK);

        for a in [-1.0, 0.5, 3.0] {
            let shifted: Vec<f64> = xi.iter().map(|v| v + a).collect();
            let gap = (rho(&shifted)? - (base + a)).abs();
            transl = transl.max(if gap > scale_tol { gap } else { 0.0 });
        }

        let other = &distributions[(j + 1) % distributions.len()];
        if other.len() == xi.len() {
            let other_rho = rho(other)?;
            let indexwise: Vec<f64> = xi.iter().zip(other).map(|(a, b)| a + b).collect();
            let mut sa = xi.clone();
            let mut sb = other.clone();
            sa.sort_by(f64::total_cmp);
            sb.sort_by(f64::total_cmp);
            let comonotone: Vec<f64> = sa.iter().zip(&sb).map(|(a, b)| a + b).collect();
            for joint in [indexwise, comonotone] {
                subadd = subadd.max(rho(&joint)? - base - other_rho - INEQUALITY_SLACK);
            }
        }
    }

    let outcome = |axiom, worst: f64| AxiomOutcome {
        axiom,
        passed: worst <= 0.0,
        worst_violation: worst.max(0.0),
    };
    Ok(CoherenceReport {
        outcomes: vec![
            outcome(Axiom::PositiveHomogeneity, homog),
            outcome(Axiom::Monotonicity, mono),
            outcome(Axiom::Subadditivity, subadd),
            outcome(Axiom::Translation, transl),
        ],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn builtins() -> Vec<RiskSpec> {
        vec![
            RiskSpec::pure_cvar(0.95).unwrap(),
            RiskSpec::mean_cvar(0.95, 1.0).unwrap(),
            RiskSpec::mean_cvar(0.5, 0.3).unwrap(),
            RiskSpec::variance(),
            RiskSpec::mean_variance(0.7).unwrap(),
            RiskSpec::mad(),
            RiskSpec::variance_cvar(0.9, 0.5).unwrap(),
        ]
    }

    #[test]
    fn make_spec_examples() {
        let s = RiskSpec::pure_cvar(0.95).unwrap();
        assert!((s.eval(1.0, &[0.0]) - 20.0).abs() < 1e-12);
        assert!((s.lipschitz_y().unwrap() - 19.0).abs() < 1e-9);

        let s = RiskSpec::mean_cvar(0.95, 1.0).unwrap();
        assert!((s.lipschitz_y().unwrap() - 19.0).abs() < 1e-9);
        assert_eq!(s.m(), 1);
        assert_eq!(s.eval(0.0, &[0.0]), 0.0);
        assert!((s.eval(1.0, &[0.0]) - 21.0).abs() < 1e-12);
        assert_eq!(s.eval(-1.0, &[0.0]), -1.0);

        let s = RiskSpec::mad();
        assert_eq!(s.eval(-2.0, &[1.5]), 3.5);
        assert_eq!(s.lipschitz_y(), Some(1.0));

        assert_eq!(RiskSpec::variance().lipschitz_y(), None);
        assert_eq!(RiskSpec::variance_cvar(0.9, 1.0).unwrap().m(), 2);
    }

    #[test]
    fn make_spec_rejects_bad_alpha() {
        assert!(RiskSpec::pure_cvar(1.0).is_err());
        assert!(RiskSpec::pure_cvar(0.0).is_err());
        assert!(RiskSpec::mean_cvar(-0.1, 1.0).is_err());
        assert!(RiskSpec::mean_cvar(0.9, -1.0).is_err());
        assert!(RiskSpec::make(RiskKind::PureCvar { alpha: 1.2 }).is_err());
        assert!(RiskSpec::combination(vec![
            Term::Squared { weight: 1.0, coord: 0 },
            Term::Absolute { weight: 1.0, coord: 0 },
        ])
        .is_err());
    }

    #[test]
    fn kink_subgradient_is_left_branch() {
        let s = RiskSpec::pure_cvar(0.95).unwrap();
        assert_eq!(s.eval_dyf(0.3, &[0.3]), vec![1.0]);
        assert!((s.eval_dyf(0.4, &[0.3])[0] + 19.0).abs() < 1e-12);
        assert_eq!(RiskSpec::mad().eval_dyf(1.0, &[1.0]), vec![1.0]);
    }

    #[test]
    fn suboptimality_constants() {
        let c = RiskSpec::pure_cvar(0.95).unwrap().suboptimality_constant().unwrap();
        assert!((c - 180.5).abs() < 1e-9);
        assert_eq!(RiskSpec::mad().suboptimality_constant().unwrap(), 0.5);
        let c = RiskSpec::mean_cvar(0.5, 1.0).unwrap().suboptimality_constant().unwrap();
        assert!((c - 0.5).abs() < 1e-12);
        assert_eq!(
            RiskSpec::variance().suboptimality_constant(),
            Err(Error::UnboundedLipschitz("variance"))
        );
    }

    #[test]
    fn portfolio_closed_form_branches() {
        let f = |x| mean_cvar_negated_closed_form(x, 0.0, 0.95, 1.0, 0.1);
        assert!((f(1.0) + 1.05).abs() < 1e-12);
        assert_eq!(f(0.0), 0.0);
        assert!((f(-3.0) - 44.95).abs() < 1e-9);

        let smoothed = RiskSpec::mean_cvar(0.95, 1.0).unwrap().inf_convolve(0.1).unwrap();
        for x in [1.0, 0.0, -3.0] {
            assert!((smoothed.eval(-x, &[0.0]) - f(x)).abs() < 1e-12);
        }
    }

    #[test]
    fn inf_convolve_rejects_nonpositive_eps() {
        let s = RiskSpec::mad();
        assert!(s.inf_convolve(0.0).is_err());
        assert!(s.inf_convolve(-1.0).is_err());
    }

    #[test]
    fn closed_form_matches_golden_section() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for spec in builtins() {
            for eps in [0.01, 0.1, 0.5] {
                let closed = spec.inf_convolve(eps).unwrap();
                let numeric = spec.inf_convolve_numeric(eps).unwrap();
                for _ in 0..1000 {
                    let x = rng.random_range(-3.0..3.0);
                    let y: Vec<f64> = (0..spec.m()).map(|_| rng.random_range(-3.0..3.0)).collect();
                    let a = closed.eval(x, &y);
                    let b = numeric.eval(x, &y);
                    assert!((a - b).abs() <= 1e-8, "{:?} eps={eps} x={x} y={y:?}: {a} vs {b}", spec.kind());
                }
            }
        }
    }

    #[test]
    fn portfolio_closed_form_matches_numeric_envelope() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (alpha, lambda, eps) in [(0.95, 1.0, 0.1), (0.95, 0.2, 0.01), (0.8, 0.6, 0.05)] {
            let numeric = RiskSpec::mean_cvar(alpha, lambda).unwrap().inf_convolve_numeric(eps).unwrap();
            for _ in 0..1000 {
                let x = rng.random_range(-1.0..1.0);
                let y = rng.random_range(-1.0..1.0);
                let a = mean_cvar_negated_closed_form(x, y, alpha, lambda, eps);
                let b = numeric.eval(-x, &[y]);
                assert!((a - b).abs() <= 1e-8, "x={x} y={y}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn uniform_convergence_is_monotone_in_eps() {
        let spec = RiskSpec::mean_cvar(0.95, 1.0).unwrap();
        let pts: Vec<(f64, f64)> = (0..200)
            .map(|i| (-2.0 + 0.02 * i as f64, 0.5 - 0.007 * i as f64))
            .collect();
        let mut prev = f64::INFINITY;
        for k in 0..8 {
            let eps = 0.2 / f64::powi(2.0, k);
            let s = spec.inf_convolve(eps).unwrap();
            let gap = pts
                .iter()
                .map(|&(x, y)| spec.eval(x, &[y]) - s.eval(x, &[y]))
                .fold(0.0, f64::max);
            assert!(gap <= prev);
            prev = gap;
        }
        // The gap is bounded by L^2 eps / 2 with L = 19.
        assert!(prev <= 0.5 * 361.0 * 0.2 / 128.0 + 1e-12);
    }

    #[test]
    fn coherence_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dists: Vec<Vec<f64>> = (0..20)
            .map(|_| (0..50).map(|_| rng.random_range(-2.0..3.0)).collect())
            .collect();
        let cvar = coherence_check(&RiskSpec::pure_cvar(0.95).unwrap(), &dists).unwrap();
        assert!(cvar.all_passed(), "{cvar:?}");

        let var = coherence_check(&RiskSpec::variance(), &dists).unwrap();
        assert!(!var.passed(Axiom::PositiveHomogeneity));

        let mad = coherence_check(&RiskSpec::mad(), &dists).unwrap();
        assert!(!mad.passed(Axiom::Translation));

        assert!(coherence_check(&RiskSpec::mad(), &[]).is_err());
    }

    #[test]
    fn rho_hat_known_values() {
        let xs: Vec<f64> = (1..=100).map(f64::from).collect();
        let cvar = rho_hat(&RiskSpec::pure_cvar(0.95).unwrap(), &xs).unwrap();
        assert!((cvar - 98.0).abs() < 1e-9);
        let var = rho_hat(&RiskSpec::variance(), &xs).unwrap();
        assert!((var - 833.25).abs() < 1e-6);
    }

    fn spec_strategy() -> impl Strategy<Value = RiskSpec> {
        (0usize..7).prop_map(|i| builtins().swap_remove(i))
    }

    proptest! {
        #[test]
        fn integrand_convex_and_subgradient_valid(
            spec in spec_strategy(),
            x1 in -4.0f64..4.0, x2 in -4.0f64..4.0,
            y1 in prop::collection::vec(-4.0f64..4.0, 2),
            y2 in prop::collection::vec(-4.0f64..4.0, 2),
        ) {
            let m = spec.m();
            let (y1, y2) = (&y1[..m], &y2[..m]);
            let ym: Vec<f64> = y1.iter().zip(y2).map(|(a, b)| 0.5 * (a + b)).collect();
            let mid = spec.eval(0.5 * (x1 + x2), &ym);
            prop_assert!(mid <= 0.5 * (spec.eval(x1, y1) + spec.eval(x2, y2)) + 1e-9);

            let g = spec.eval_dyf(x1, y1);
            let lin: f64 = g.iter().zip(y2.iter().zip(y1)).map(|(gi, (b, a))| gi * (b - a)).sum();
            prop_assert!(spec.eval(x1, y2) >= spec.eval(x1, y1) + lin - 1e-9);

            if let Some(l) = spec.lipschitz_y() {
                let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
                prop_assert!(norm <= l + 1e-12);
            }
        }

        #[test]
        fn smoothing_sandwich_and_semiconcavity(
            spec in spec_strategy(),
            eps in 0.005f64..0.5,
            x in -3.0f64..3.0,
            y in prop::collection::vec(-3.0f64..3.0, 2),
            xi in prop::collection::vec(-0.7f64..0.7, 2),
        ) {
            let m = spec.m();
            let y = &y[..m];
            let xi = &xi[..m];
            let s = spec.inf_convolve(eps).unwrap();
            let gap = spec.eval(x, y) - s.eval(x, y);
            prop_assert!(gap >= -1e-12);
            if let Some(l) = spec.lipschitz_y() {
                prop_assert!(gap <= 0.5 * l * l * eps + 1e-12);
            }

            let shifted: Vec<f64> = y.iter().zip(xi).map(|(a, b)| a + b).collect();
            let g = s.gradient(x, y);
            let lin: f64 = g.iter().zip(xi).map(|(a, b)| a * b).sum();
            let quad: f64 = xi.iter().map(|v| v * v).sum::<f64>() / (2.0 * eps);
            prop_assert!(s.eval(x, &shifted) <= s.eval(x, y) + lin + quad + 1e-9);
        }

        #[test]
        fn smoothed_gradient_matches_central_differences(
            spec in spec_strategy(),
            eps in 0.01f64..0.5,
            x in -3.0f64..3.0,
            y in prop::collection::vec(-3.0f64..3.0, 2),
        ) {
            let m = spec.m();
            let s = spec.inf_convolve(eps).unwrap();
            let g = s.gradient(x, &y[..m]);
            let h = 1e-6;
            for c in 0..m {
                let mut up = y[..m].to_vec();
                let mut dn = y[..m].to_vec();
                up[c] += h;
                dn[c] -= h;
                let fd = (s.eval(x, &up) - s.eval(x, &dn)) / (2.0 * h);
                prop_assert!((fd - g[c]).abs() <= 1e-5, "c={} fd={} g={}", c, fd, g[c]);
            }
        }

        #[test]
        fn smoothing_preserves_joint_convexity(
            spec in spec_strategy(),
            eps in 0.005f64..0.5,
            x1 in -3.0f64..3.0, x2 in -3.0f64..3.0,
            y1 in prop::collection::vec(-3.0f64..3.0, 2),
            y2 in prop::collection::vec(-3.0f64..3.0, 2),
        ) {
            let m = spec.m();
            let s = spec.inf_convolve(eps).unwrap();
            let ym: Vec<f64> = y1[..m].iter().zip(&y2[..m]).map(|(a, b)| 0.5 * (a + b)).collect();
            let mid = s.eval(0.5 * (x1 + x2), &ym);
            prop_assert!(mid <= 0.5 * (s.eval(x1, &y1[..m]) + s.eval(x2, &y2[..m])) + 1e-9);
        }
    }
}
