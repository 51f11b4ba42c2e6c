//! Ablation runner, attention benchmark and the gradient-check battery.

mod ablation;
mod bench;
mod gradients;

pub use ablation::{evaluate_scenes, run_ablation, AblationReport, AblationRow, Arm, AttentionArm};
pub use bench::{bench_attention, loglog_slope, BenchReport, BenchRow};
pub use gradients::{gradient_suite, GradRow, GRAD_TOLERANCE};
