//! Standard normal helpers shared by the closed-form baselines and tests.

use statrs::distribution::{Continuous, ContinuousCDF, Normal};

fn standard() -> Normal {
    Normal::new(0.0, 1.0).expect("unit normal")
}

pub fn pdf(z: f64) -> f64 {
    standard().pdf(z)
}

pub fn cdf(z: f64) -> f64 {
    standard().cdf(z)
}

pub fn quantile(p: f64) -> f64 {
    standard().inverse_cdf(p)
}

/// Expectation of `h(X)` for `X ~ N(mean, sd^2)` by the composite
/// Simpson rule on `[mean - 12 sd, mean + 12 sd]` with `panels` (even) panels.
pub fn expect_normal<F: Fn(f64) -> f64>(mean: f64, sd: f64, panels: usize, h: F) -> f64 {
    if sd == 0.0 {
        return h(mean);
    }
    let panels = panels + panels % 2;
    let a = -12.0;
    let step = 24.0 / panels as f64;
    let mut acc = 0.0;
    for k in 0..=panels {
        let z = a + step * k as f64;
        let w = if k == 0 || k == panels {
            1.0
        } else if k % 2 == 1 {
            4.0
        } else {
            2.0
        };
        acc += w * h(mean + sd * z) * pdf(z);
    }
    acc * step / 3.0
}
