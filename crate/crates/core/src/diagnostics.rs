use serde::{Deserialize, Serialize};

/// Non-fatal events recorded during estimation. The CLI writes them to the
/// run log next to its outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Warning {
    /// Variable is constant over its observed cells; its scale was clamped to 1.
    ConstantVariable { variable: String },
    /// A covariance matrix was indefinite and had eigenvalues clipped.
    PsdRepair { context: String, magnitude: f64 },
    /// Cross-covariance blocks past `estimated` were zero-filled.
    TruncatedLags { requested: usize, estimated: usize },
    /// A subset could not be evaluated; it is absent from the report.
    SubsetFailed { subset: Vec<String>, reason: String },
    /// Univariate baseline skipped a variable with no spread.
    ConstantBaselineVariable { variable: String },
}
