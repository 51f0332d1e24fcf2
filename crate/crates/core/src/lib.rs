//! Bilevel solver for stochastic optimal control problems whose objective is an
//! extremal risk measure such as CVaR.
//!
//! The outer problem minimises `V(y) = inf_A E[f(g(X_T), y)]` over the auxiliary
//! variable `y`. For fixed `y` the inner problem is a standard control problem
//! solved by a monotone finite-difference HJB scheme ([`hjb`]); the gradient
//! `DV(y)` comes from a linear parabolic equation with the optimal feedback
//! frozen into its coefficients ([`linpde`]). Non-smooth integrands are
//! regularised by inf-convolution ([`risk::SmoothedRiskSpec`]) and degenerate
//! dynamics by an independent noise source of size `eta` ([`dynamics`]).

pub mod cli;
pub mod dynamics;
pub mod error;
pub mod hjb;
pub mod linpde;
pub mod mc;
pub mod normal;
pub mod outer;
pub mod par;
pub mod risk;
mod stencil;

pub use error::{Error, Result};
pub use par::Execution;
