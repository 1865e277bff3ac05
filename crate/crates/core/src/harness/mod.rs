//! Experiment orchestration: configs, stage pipelines, persisted runs and
//! report rendering.

pub mod config;
pub mod pipeline;
pub mod report;
pub mod run;

pub use config::{
    AttackConfig, AttackKind, DatasetConfig, DatasetSource, EvaluationConfig, ExperimentConfig, ScenarioChoice,
    TargetConfig,
};
pub use report::{render_report, ReportSummary};
pub use run::{run_ablation, run_experiment, Run, RunOutcome};
