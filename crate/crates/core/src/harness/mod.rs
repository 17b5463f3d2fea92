//! Configuration, presets, experiment orchestration and self-checks.

mod config;
mod report;
mod run;
pub mod selfcheck;

pub use config::{preset, DataSource, ExperimentConfig, SplitConfig, CIFAR_DIR_ENV, PRESETS};
pub use report::{aggregate_trials, method_table, roc_csv, stage_table, write_reports, MethodSummary, Summary};
pub use run::{cmd_eval, cmd_methods_matrix, cmd_report, cmd_run, trial_dir, EvalReport, EvalSplit, RunOptions, OUT_ENV};
pub use selfcheck::{cmd_selfcheck, SelfcheckOptions};
