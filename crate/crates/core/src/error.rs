use std::path::PathBuf;

use thiserror::Error;

use crate::actions::Condition;
use crate::geometry::FrameId;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("frame not found: {0}")]
    FrameNotFound(FrameId),
    #[error("malformed frame id {0:?} (expected `base` or `object:<id>`)")]
    BadFrameId(String),
    #[error("quaternion norm {0} is not within 1e-6 of 1")]
    NotUnitQuaternion(f64),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WorldError {
    #[error("object not found: {0}")]
    ObjectNotFound(String),
    #[error("primitive rejected: {0}")]
    PrimitiveRejected(String),
    #[error("invalid scene: {0}")]
    InvalidScene(String),
}

/// A document failed to parse; `path` is a JSON pointer into it.
#[derive(Debug, Error, Clone, PartialEq)]
#[error("parse error at {path}: {message}")]
pub struct ParseError {
    pub path: String,
    pub message: String,
}

impl ParseError {
    pub fn new(path: impl Into<String>, message: impl Into<String>) -> Self {
        let path = path.into();
        ParseError { path: if path.is_empty() { "/".into() } else { path }, message: message.into() }
    }

    pub(crate) fn from_path_error(e: serde_path_to_error::Error<serde_json::Error>) -> Self {
        let pointer = pointer_from_serde_path(&e.path().to_string());
        ParseError::new(pointer, e.into_inner().to_string())
    }
}

// serde_path_to_error renders `a.b[3].c`; convert to `/a/b/3/c`.
fn pointer_from_serde_path(path: &str) -> String {
    if path == "." {
        return "/".into();
    }
    let mut out = String::new();
    for part in path.split('.') {
        let mut rest = part;
        while let Some(open) = rest.find('[') {
            let (head, tail) = rest.split_at(open);
            if !head.is_empty() {
                out.push('/');
                out.push_str(head);
            }
            let close = tail.find(']').unwrap_or(tail.len());
            out.push('/');
            out.push_str(&tail[1..close]);
            rest = &tail[(close + 1).min(tail.len())..];
        }
        if !rest.is_empty() {
            out.push('/');
            out.push_str(rest);
        }
    }
    out
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TreeError {
    #[error("tree invalid: {0}")]
    TreeInvalid(String),
    #[error(transparent)]
    Parse(#[from] ParseError),
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("template error: {0}")]
pub struct TemplateError(pub String);

#[derive(Debug, Error)]
pub enum DemoError {
    #[error("demonstration invalid ({rule}@{index}): {message}")]
    DemoInvalid { rule: String, index: String, message: String },
    #[error("unsupported schema version {found} (expected {expected})")]
    Migration { found: u64, expected: u64 },
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error("duplicate demonstration id {0}")]
    DuplicateId(String),
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InferenceError {
    #[error("goal inference produced no conditions for demonstration {0}")]
    GoalEmpty(String),
    #[error("demonstration {demo} references unknown symbolic action {action}")]
    UnknownAction { demo: String, action: String },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlanError {
    #[error("no action achieves {0}")]
    Unachievable(Condition),
    #[error("expansion budget of {0} exceeded")]
    PlanBudgetExceeded(usize),
    #[error("conflict resolution oscillates moving subtree {subtree} to position {to}")]
    PlanConflictLoop { subtree: u32, to: usize },
    #[error("plan problem invalid: {0}")]
    InvalidProblem(String),
    #[error(transparent)]
    Tree(#[from] TreeError),
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("[{stage}] {message}")]
    Stage { stage: &'static str, message: String },
    #[error(transparent)]
    Workspace(#[from] WorkspaceError),
}

impl PipelineError {
    pub fn stage(stage: &'static str, e: impl std::fmt::Display) -> Self {
        PipelineError::Stage { stage, message: e.to_string() }
    }
}

#[derive(Debug, Error)]
pub enum WorkspaceError {
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{kind} not found: {id}")]
    NotFound { kind: &'static str, id: String },
    #[error(transparent)]
    Demo(#[from] DemoError),
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    World(#[from] WorldError),
}

impl WorkspaceError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        WorkspaceError::Io { path: path.into(), source }
    }
}
