use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("risk integrand `{0}` has no finite Lipschitz constant")]
    UnboundedLipschitz(&'static str),

    #[error("dynamics are not uniformly parabolic (inf sigma^2 = 0 and eta = 0); call perturb() with eta > 0")]
    NotParabolic,

    #[error("stability bound needs {required} time steps but the cap is {cap}; use a coarser x grid")]
    TimeStepCap { required: usize, cap: usize },

    #[error("x = {x} lies outside the grid [{min}, {max}]")]
    OutsideGrid { x: f64, min: f64, max: f64 },

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("path {path} exploded at t = {time}: |X| = {value} exceeds {limit}")]
    PathExplosion {
        path: usize,
        time: f64,
        value: f64,
        limit: f64,
    },
}

impl Error {
    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }
}
