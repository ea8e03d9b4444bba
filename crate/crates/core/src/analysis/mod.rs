//! Numerical checks of the second-order error theory on small probe
//! networks, and diagnostics on the quantized diffusion model.

pub mod probe;
pub mod stats;
pub mod sweep;

pub use probe::{
    decomposition_check, fit_exponent, hessian, hessian_asymmetry, mean_relative_residual,
    random_delta, taylor_check, DecompositionReport, ProbeNet, Quadratic, SmoothObjective,
    TaylorReport, STANDARD_PROBE,
};
pub use stats::{distribution_stats, stats_of, DistributionStats, LayerStats};
pub use sweep::{
    default_groups, sensitivity_sweep, te_ablation, EvalConfig, LayerGroup, SensitivityReport,
    TeAblationReport,
};
