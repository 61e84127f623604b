//! Distributional metrics, the alignment score, and the sweep harness.

mod classifier;
mod inpaint;
mod metrics;
mod sweep;

pub use classifier::{alignment_score, ReferenceClassifier};
pub use inpaint::{evaluate_inpainting, InpaintEval, InpaintReport};
pub use metrics::{masked_region, median_bandwidth, mmd_rbf, modes_covered, sliced_w2, visible_mse};
pub use sweep::{
    axis_value_of, chi_square_gof, digest, median, run_sweep, run_sweep_in, AxisValue, ExperimentSetup, Metric,
    MetricsRow, Reference, Roles, SweepAxis, SweepSpec, Zoo, EVAL_STEPS,
};
