//! Split MNIST protocol runner, model persistence and report files.

pub mod config;
pub mod persist;
pub mod protocol;
pub mod report;

pub use config::{resolve_data_dir, Method, ProtocolConfig, DATA_DIR_ENV};
pub use persist::{load_expert, load_model, load_scorer, save_model, Model};
pub use protocol::{
    load_tasks, run_merge_experiment, run_protocol, run_protocol_on, train_task, MergeReport, MethodResult, RunReport, TaskModels,
    TaskNeeds, Timings,
};
pub use report::emit_report;
