//! The three-stage training procedure, its ablations and the baselines.

mod baseline;
mod common;
mod eval;
mod metrics;
mod report;
mod run;
mod stage1;
mod stage2;
mod stage3;

pub use crate::config::StagePlan;
pub use baseline::{run_baseline, BaselineArtifacts, BaselineKind};
pub use eval::{evaluate, evaluate_rows, Metrics};
pub use metrics::{MetricLine, MetricsLog};
pub use report::{
    cell_dir, compare, mean_std, parse_methods, render, route_stats, CellResult, CompareOptions, Method,
    Report, ReportRow, RouteRow, RouteSummary, RouteTable,
};
pub use run::{
    build_models, build_registry, fresh_student, gatenet_path, masknet_path, metrics_path,
    model_path, registry_info, registry_path, student_path, train, RegistryInfo, RunArtifacts,
    StageSelect, TeacherInfo,
};
pub use stage1::run_stage1;
pub use stage2::run_stage2;
pub use stage3::run_stage3;

/// Thread cap from `MSTD_THREADS`, default 1.
pub fn threads_from_env() -> usize {
    std::env::var("MSTD_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}
