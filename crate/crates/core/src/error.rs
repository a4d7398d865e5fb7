use thiserror::Error;

use crate::params::{GroupId, TaskId};

#[derive(Debug, Error)]
pub enum ApdError {
    #[error("dimension mismatch in {op}: left is {left_rows}x{left_cols}, right is {right_rows}x{right_cols}")]
    DimensionMismatch {
        op: &'static str,
        left_rows: usize,
        left_cols: usize,
        right_rows: usize,
        right_cols: usize,
    },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("unknown task {0}")]
    UnknownTask(TaskId),

    #[error("task {0} already exists")]
    DuplicateTask(TaskId),

    #[error("task {task} is assigned to missing group {group}")]
    MissingGroup { task: TaskId, group: GroupId },

    #[error("missing restore target for task {0}")]
    MissingRestoreTarget(TaskId),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("rank-0 data: all trajectory points coincide")]
    RankZero,

    #[error("checkpoint error in section `{section}`: {reason}")]
    Checkpoint { section: String, reason: String },

    #[error("config error at line {line}: {message}")]
    Config { line: usize, message: String },

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, ApdError>;
