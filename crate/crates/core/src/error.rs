use alloc::string::String;
use alloc::vec::Vec;

/// Errors produced anywhere in the engine.
///
/// Shape failures carry enough context (operation, shapes, axis or pipeline
/// stage) to locate the offending call without a debugger.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape error in {op}: {detail} (lhs {lhs:?}, rhs {rhs:?})")]
    Shape { op: &'static str, detail: String, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("shape error at stage `{stage}`: {source}")]
    Stage {
        stage: String,
        #[source]
        source: alloc::boxed::Box<Error>,
    },
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error(
        "gradient check failed at {param}[{index}]: analytic {analytic:e}, numeric {numeric:e}, relative error {rel_err:e} > {tolerance:e}"
    )]
    GradCheck { param: String, index: usize, analytic: f64, numeric: f64, rel_err: f64, tolerance: f64 },
    #[error("divergence: {0}")]
    Divergence(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape { op, detail: detail.into(), lhs: lhs.to_vec(), rhs: rhs.to_vec() }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    /// Wraps a shape error with the pipeline stage that raised it.
    /// Other error kinds pass through untouched.
    pub fn at_stage(self, stage: &str) -> Self {
        match self {
            e @ Error::Shape { .. } => Error::Stage { stage: stage.into(), source: alloc::boxed::Box::new(e) },
            Error::Stage { stage: inner, source } => Error::Stage { stage: alloc::format!("{stage}/{inner}"), source },
            other => other,
        }
    }

    /// True for shape errors, including stage-wrapped ones.
    pub fn is_shape(&self) -> bool {
        matches!(self, Error::Shape { .. } | Error::Stage { .. })
    }
}

pub(crate) trait StageExt<T> {
    fn stage(self, stage: &str) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: &str) -> Result<T> {
        self.map_err(|e| e.at_stage(stage))
    }
}
