use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    // geometry
    #[error("rotation angle is too close to pi for a stable logarithm")]
    AngleNearPi,
    #[error("degenerate point configuration: {0}")]
    DegenerateConfiguration(&'static str),
    #[error("nearest-neighbor index is empty")]
    EmptyIndex,
    #[error("non-finite coordinate in point {index}")]
    NonFinite { index: usize },
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    // session io
    #[error("directory {0} contains no keyframe scans")]
    EmptyDirectory(PathBuf),
    #[error("missing scan for timestamp {0:.9}")]
    MissingScan(f64),
    #[error("scan timestamp {0:.9} has no matching pose")]
    TimestampMismatch(f64),
    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },
    #[error("no associable timestamp pairs between trajectories")]
    NoAssociations,
    #[error("invalid session: {0}")]
    InvalidSession(String),

    // maps and meshes
    #[error("point cloud is empty")]
    EmptyCloud,
    #[error("occupancy grid has no free space")]
    NoFreeSpace,
    #[error("mesh has no triangles")]
    EmptyMesh,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    // descriptors
    #[error("descriptor dimensions differ: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error("reference descriptor set is empty")]
    EmptyReferenceSet,

    // registration
    #[error("too few points for registration: {have} < {need}")]
    TooFewPoints { have: usize, need: usize },
    #[error("no source points within the exclusion distance of the target")]
    NoPointsInExclusionZone,

    // optimization
    #[error("variable {0} is not part of the problem")]
    MissingVariable(String),
    #[error("normal equations are singular; the graph is under-constrained")]
    SingularNormalEquations,
    #[error("problem has no prior factor; gauge is not fixed")]
    GaugeNotFixed,

    // pipeline
    #[error("no validated inter-session loop closures were found")]
    NoEncounters,
    #[error("reference cloud is empty")]
    EmptyReferenceCloud,

    // change detection
    #[error("occupancy grid has no integrated scans")]
    EmptyGrid,
    #[error("cluster has no points")]
    EmptyCluster,

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl ToString, line: usize, msg: impl ToString) -> Self {
        Error::Parse {
            path: path.to_string(),
            line,
            msg: msg.to_string(),
        }
    }
}
