//! Explicit monotone stencil shared by the HJB and linear solvers. Both solvers
//! call exactly these functions, so a frozen-policy solve reproduces the HJB
//! values bit for bit wherever the policy is the HJB argmin.

#[derive(Debug, Clone, Copy)]
pub(crate) struct Stencil {
    pub dt: f64,
    pub inv_dx: f64,
    pub half_inv_dx2: f64,
}

impl Stencil {
    pub fn new(dx: f64, dt: f64) -> Self {
        Stencil {
            dt,
            inv_dx: 1.0 / dx,
            half_inv_dx2: 0.5 / (dx * dx),
        }
    }

    /// Discrete generator at interior node `i`: centred second difference
    /// weighted by `var / 2`, drift term upwinded on the sign of `mu`.
    #[inline(always)]
    pub fn generator(&self, prev: &[f64], i: usize, mu: f64, var: f64) -> f64 {
        let (vm, v0, vp) = (prev[i - 1], prev[i], prev[i + 1]);
        let first = if mu >= 0.0 { vp - v0 } else { v0 - vm };
        var * self.half_inv_dx2 * (vp - 2.0 * v0 + vm) + mu * self.inv_dx * first
    }

    #[inline(always)]
    pub fn advance(&self, v0: f64, generator: f64) -> f64 {
        v0 + self.dt * generator
    }
}

/// Zero second derivative at both ends (linear extrapolation).
pub(crate) fn extrapolate_boundaries(row: &mut [f64]) {
    let n = row.len();
    row[0] = 2.0 * row[1] - row[2];
    row[n - 1] = 2.0 * row[n - 2] - row[n - 3];
}
