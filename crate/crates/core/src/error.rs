use thiserror::Error;

/// Errors raised by the physics and fitting routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("electron quantization axis undefined: g110 + g_m110 = 0")]
    UndefinedAxis,

    #[error("target splitting {target} Hz is unreachable (minimum {minimum} Hz)")]
    UnreachableTarget { target: f64, minimum: f64 },

    #[error("integrator step failure at t = {time} s: {reason}")]
    Integrator { time: f64, reason: String },

    #[error("fit did not converge after {iterations} iterations (best cost {best_cost})")]
    NotConverged {
        iterations: usize,
        best_cost: f64,
        best_params: Vec<f64>,
    },

    #[error("singular normal matrix; parameters are not identifiable")]
    SingularMatrix,

    #[error("degenerate data: {0}")]
    Degenerate(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error in {path}: {message}")]
    Csv { path: String, message: String },

    #[error("schema violation in {path}: {message} (rows {rows:?})")]
    Schema {
        path: String,
        message: String,
        rows: Vec<usize>,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable tag.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidInput(_) => "invalid_input",
            Error::UndefinedAxis => "undefined_axis",
            Error::UnreachableTarget { .. } => "unreachable_target",
            Error::Integrator { .. } => "integrator",
            Error::NotConverged { .. } => "not_converged",
            Error::SingularMatrix => "singular_matrix",
            Error::Degenerate(_) => "degenerate",
            Error::Io { .. } => "io",
            Error::Csv { .. } => "csv",
            Error::Schema { .. } => "schema",
            Error::Json(_) => "json",
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        let mut v = serde_json::json!({ "kind": self.kind(), "message": self.to_string() });
        match self {
            Error::Schema { rows, path, .. } => {
                v["rows"] = serde_json::json!(rows);
                v["path"] = serde_json::json!(path);
            }
            Error::NotConverged { iterations, best_params, .. } => {
                v["iterations"] = serde_json::json!(iterations);
                v["best_params"] = serde_json::json!(best_params);
            }
            Error::Integrator { time, .. } => v["time"] = serde_json::json!(time),
            _ => {}
        }
        serde_json::json!({ "error": v })
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::InvalidInput(msg()))
    }
}
