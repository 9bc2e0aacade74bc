use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ComplexError {
    #[error("complex has no triangles")]
    NoTriangles,
    #[error("edge class {class} is empty")]
    EmptyPartitionClass { class: usize },
    #[error("slot ({triangle}, {side}) does not exist")]
    SlotOutOfRange { triangle: i64, side: i64 },
    #[error("slot ({triangle}, {side}) appears more than once")]
    DuplicateSlot { triangle: usize, side: usize },
    #[error("slot ({triangle}, {side}) is not in any edge class")]
    MissingSlot { triangle: usize, side: usize },
    #[error("slot ({triangle}, {side}) in class {class} has orientation {orientation}, expected +1 or -1")]
    InconsistentOrientation {
        class: usize,
        triangle: usize,
        side: usize,
        orientation: i64,
    },
    #[error("face adjacency graph has {components} components")]
    DisconnectedComplex { components: usize },
    #[error("cannot parse complex: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricError {
    #[error("edge {edge} has degree {degree} but {given} stored shifts were given")]
    WrongShiftCount {
        edge: usize,
        degree: usize,
        given: usize,
    },
    #[error("shift on edge {edge} is not finite")]
    NonFiniteShift { edge: usize },
    #[error("metric is not complete at vertex {vertex}: log-scale mismatch {mismatch:.3e}")]
    IncompleteAtVertex { vertex: usize, mismatch: f64 },
    #[error("cannot parse metric: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MeshError {
    #[error("metric is incomplete: {0}")]
    IncompleteMetric(MetricError),
    #[error("invalid mesh configuration: {0}")]
    InvalidConfig(String),
    #[error("mesh quality check failed on face {face}: {reason}")]
    MeshQualityFailure { face: usize, reason: String },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SolveError {
    #[error("metric is incomplete: {0}")]
    IncompleteMetric(MetricError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error("image of node {node} on face {face} has non-positive height {v}")]
    InvalidTarget { face: usize, node: usize, v: f64 },
    #[error("orientation barrier requires a positively oriented start; face {face} triangle {triangle} has determinant {det:.3e}")]
    BarrierInfeasible {
        face: usize,
        triangle: usize,
        det: f64,
    },
    #[error("invalid solver configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum VerifyError {
    #[error("degree samples disagree: {counts:?}")]
    DegreeInconsistent { counts: Vec<i64> },
}

/// Any error raised by the library, for callers that do not care which stage failed.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error(transparent)]
    Complex(#[from] ComplexError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error(transparent)]
    Verify(#[from] VerifyError),
}

impl Error {
    /// Stable machine-readable name of the error kind.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Complex(e) => match e {
                ComplexError::NoTriangles => "NoTriangles",
                ComplexError::EmptyPartitionClass { .. } => "EmptyPartitionClass",
                ComplexError::SlotOutOfRange { .. } => "SlotOutOfRange",
                ComplexError::DuplicateSlot { .. } => "DuplicateSlot",
                ComplexError::MissingSlot { .. } => "MissingSlot",
                ComplexError::InconsistentOrientation { .. } => "InconsistentOrientation",
                ComplexError::DisconnectedComplex { .. } => "DisconnectedComplex",
                ComplexError::Parse(_) => "ParseError",
            },
            Error::Metric(e) => match e {
                MetricError::WrongShiftCount { .. } => "WrongShiftCount",
                MetricError::NonFiniteShift { .. } => "NonFiniteShift",
                MetricError::IncompleteAtVertex { .. } => "IncompleteAtVertex",
                MetricError::Parse(_) => "ParseError",
            },
            Error::Mesh(e) => match e {
                MeshError::IncompleteMetric(_) => "IncompleteMetric",
                MeshError::InvalidConfig(_) => "InvalidConfig",
                MeshError::MeshQualityFailure { .. } => "MeshQualityFailure",
            },
            Error::Solve(e) => match e {
                SolveError::IncompleteMetric(_) => "IncompleteMetric",
                SolveError::Mesh(m) => Error::Mesh(m.clone()).kind(),
                SolveError::InvalidTarget { .. } => "InvalidTarget",
                SolveError::BarrierInfeasible { .. } => "BarrierInfeasible",
                SolveError::InvalidConfig(_) => "InvalidConfig",
            },
            Error::Verify(_) => "DegreeInconsistent",
        }
    }
}
