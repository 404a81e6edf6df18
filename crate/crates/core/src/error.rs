use std::path::PathBuf;

/// Errors produced anywhere in the quantization pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    DimensionMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("singular Hessian: non-positive pivot at index {pivot}")]
    SingularHessian { pivot: usize },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("layer hook returned {got:?} for timestep {timestep}, layer {layer}; expected {expected:?}")]
    HookShape {
        timestep: usize,
        layer: usize,
        expected: (usize, usize),
        got: (usize, usize),
    },

    #[error("activation traces missing timesteps {missing:?} for layer {layer}")]
    MissingTimesteps { layer: usize, missing: Vec<usize> },

    #[error("layer {layer}: {source}")]
    Layer {
        layer: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("no schedule meets the bit budget {target}; closest feasible average is {closest}")]
    InfeasibleBudget { target: f64, closest: f64 },

    #[error("internal invariant violated: {0}")]
    Invariant(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        Error::Format {
            path: path.into(),
            message: message.to_string(),
        }
    }

    pub(crate) fn in_layer(self, layer: usize) -> Self {
        Error::Layer {
            layer,
            source: Box::new(self),
        }
    }

    /// Process exit code for the CLI: 1 I/O, 2 config, 3 numerical, 4 infeasible budget.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Parameter(_) | Error::Format { .. } => 2,
            Error::InfeasibleBudget { .. } => 4,
            Error::Layer { source, .. } => source.exit_code(),
            Error::Io { .. } => 1,
            _ => 3,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_by_category() {
        assert_eq!(Error::Config("x".into()).exit_code(), 2);
        assert_eq!(Error::param("x").exit_code(), 2);
        assert_eq!(Error::SingularHessian { pivot: 0 }.exit_code(), 3);
        assert_eq!(Error::InfeasibleBudget { target: 3.0, closest: 3.5 }.exit_code(), 4);
        assert_eq!(Error::InfeasibleBudget { target: 3.0, closest: 3.5 }.in_layer(2).exit_code(), 4);
        let io = Error::io("f", std::io::Error::new(std::io::ErrorKind::NotFound, "gone"));
        assert_eq!(io.exit_code(), 1);
    }
}
