use std::path::PathBuf;

use crate::mesh::StructureId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure surfaced by the toolkit.
///
/// Variants are split into input/validation problems and runtime or
/// numerical failures; [`Error::is_validation`] tells them apart so the
/// CLI can map them onto distinct exit codes.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("invalid mesh: {0}")]
    InvalidMesh(String),

    #[error("degenerate geometry at vertex {vertex}: {reason}")]
    DegenerateGeometry { vertex: usize, reason: String },

    #[error("degenerate point configuration: {0}")]
    DegenerateConfiguration(String),

    #[error("isolated vertex {vertex} has no neighbors")]
    IsolatedVertex { vertex: usize },

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("subject {subject}: missing structures {}", join_structures(.structures))]
    MissingStructures {
        subject: String,
        structures: Vec<StructureId>,
    },

    #[error("subject {subject}: vertex-count mismatch for {}", join_structures(.structures))]
    VertexCountMismatch {
        subject: String,
        structures: Vec<StructureId>,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("training diverged at epoch {epoch}: {reason}")]
    Diverged {
        epoch: usize,
        reason: String,
        log: Vec<crate::train::EpochRecord>,
    },

    #[error("missing artifact {path}: {what}")]
    MissingArtifact { path: PathBuf, what: String },

    #[error("invalid input: {0}")]
    Invalid(String),
}

fn join_structures(s: &[StructureId]) -> String {
    s.iter().map(|s| s.key()).collect::<Vec<_>>().join(", ")
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            message: message.into(),
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    /// True for problems with the inputs (bad files, missing data, invalid
    /// configuration); false for failures that happen while computing.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Io { .. }
                | Error::Parse { .. }
                | Error::Format { .. }
                | Error::InvalidMesh(_)
                | Error::MissingStructures { .. }
                | Error::VertexCountMismatch { .. }
                | Error::MissingArtifact { .. }
                | Error::Invalid(_)
        )
    }

    /// Short machine-readable tag for the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Parse { .. } => "parse",
            Error::Format { .. } => "format",
            Error::InvalidMesh(_) => "invalid_mesh",
            Error::DegenerateGeometry { .. } => "degenerate_geometry",
            Error::DegenerateConfiguration(_) => "degenerate_configuration",
            Error::IsolatedVertex { .. } => "isolated_vertex",
            Error::Shape { .. } => "shape_mismatch",
            Error::MissingStructures { .. } => "missing_structures",
            Error::VertexCountMismatch { .. } => "vertex_count_mismatch",
            Error::NonFinite(_) => "non_finite",
            Error::Diverged { .. } => "diverged",
            Error::MissingArtifact { .. } => "missing_artifact",
            Error::Invalid(_) => "invalid_input",
        }
    }
}
