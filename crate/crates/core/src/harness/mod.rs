//! Experiment orchestration: configuration, continual runs for every
//! method, sweeps, checkpoints and result files.

pub mod checkpoint;
mod config;
mod export;
mod report;
mod run;

pub use checkpoint::{inspect, Checkpoint, TableEntry, FORMAT_VERSION};
pub use config::{default_output_root, parse_config_text, read_config_file, Method, RunConfig, OUTPUT_ROOT_ENV};
pub use export::export_sequence;
pub use report::{
    format_param_table, load_records, param_efficiency_rows, report, with_thousands, write_results_csv,
    write_summary_csv, write_sweep_csv, ParamRow, NA, RESULTS_COLUMNS,
};
pub use run::{
    generate_sequence, load_backbone, replay, run_continual, run_dir, run_ftseq_baseline, run_joint_upper_bound,
    save_backbone, sweep, Harness, RepeatRecord, RunRecord, RunState, SweepAxis, SweepResult, UpdateMetrics,
};
