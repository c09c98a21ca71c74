//! From raw attack outcomes to the quantitative results: success grids
//! p(a, t, n, f, s), logistic fits for t_max and a_min, the attack
//! multiplier κ, attack resistance χ, and the context-separation fit.

mod grid;
mod kappa;
mod logistic;
mod resistance;
mod separation;

pub use grid::{CellStats, GridKey, SuccessGrid};
pub use kappa::{fit_kappa, ScalingFit};
pub use logistic::{fit_amin, fit_sigmoid, sigmoid_value, AminFit, SigmoidFit};
pub use resistance::{
    attack_resistance, combine_kappa_estimates, kappa_for_resistance, predicted_token_kappa,
    Resistance, TokenKappaCombined,
};
pub use separation::{fit_separation, SeparationFit};

/// The success threshold read off the sigmoid fits. The choice is
/// conventional; everything downstream takes it as a parameter.
pub const SUCCESS_THRESHOLD: f64 = 0.5;
