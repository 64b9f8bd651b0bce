use std::io;
use std::path::{Path, PathBuf};

use panostitch::epipolar::EpipolarError;
use panostitch::icp::IcpError;
use panostitch::metrics::MetricsError;
use panostitch::panorama::PanoramaError;
use panostitch::pipeline::CoarseError;
use panostitch::ply::PlyError;
use panostitch::scale::ScaleError;
use panostitch::scene::SceneError;
use panostitch::testkit::SynthError;
use thiserror::Error;

/// Process exit status classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitKind {
    Input = 2,
    Graph = 3,
    Placement = 4,
    Numerical = 5,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("file not found: {}", .0.display())]
    FileNotFound(PathBuf),
    #[error("{path}: {source}", path = .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Graph(String),
    #[error("{0}")]
    Placement(String),
    #[error("{0}")]
    Numerical(String),
    #[error("pair {room_a} -> {room_b}: {source}")]
    Pair {
        room_a: String,
        room_b: String,
        #[source]
        source: Box<CliError>,
    },
}

impl CliError {
    pub fn kind(&self) -> ExitKind {
        match self {
            CliError::FileNotFound(_) | CliError::Io { .. } | CliError::Input(_) => ExitKind::Input,
            CliError::Graph(_) => ExitKind::Graph,
            CliError::Placement(_) => ExitKind::Placement,
            CliError::Numerical(_) => ExitKind::Numerical,
            CliError::Pair { source, .. } => source.kind(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        self.kind() as i32
    }

    pub fn io(path: &Path, source: io::Error) -> Self {
        if source.kind() == io::ErrorKind::NotFound {
            CliError::FileNotFound(path.to_path_buf())
        } else {
            CliError::Io {
                path: path.to_path_buf(),
                source,
            }
        }
    }

    pub fn in_pair(self, room_a: &str, room_b: &str) -> Self {
        CliError::Pair {
            room_a: room_a.to_string(),
            room_b: room_b.to_string(),
            source: Box::new(self),
        }
    }
}

impl From<PlyError> for CliError {
    fn from(e: PlyError) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<PanoramaError> for CliError {
    fn from(e: PanoramaError) -> Self {
        match e {
            PanoramaError::Io { path, source } => CliError::io(Path::new(&path), source),
            other => CliError::Input(other.to_string()),
        }
    }
}

impl From<EpipolarError> for CliError {
    fn from(e: EpipolarError) -> Self {
        match e {
            EpipolarError::TooFewMatches { .. } => CliError::Input(e.to_string()),
            other => CliError::Numerical(other.to_string()),
        }
    }
}

impl From<ScaleError> for CliError {
    fn from(e: ScaleError) -> Self {
        match e {
            ScaleError::NonPositiveHeight(_) => CliError::Input(e.to_string()),
            other => CliError::Numerical(other.to_string()),
        }
    }
}

impl From<CoarseError> for CliError {
    fn from(e: CoarseError) -> Self {
        match e {
            CoarseError::Epipolar(e) => e.into(),
            CoarseError::Scale(e) => e.into(),
        }
    }
}

impl From<IcpError> for CliError {
    fn from(e: IcpError) -> Self {
        match e {
            IcpError::InvalidConfig(_) | IcpError::MissingNormals => CliError::Input(e.to_string()),
            other => CliError::Numerical(other.to_string()),
        }
    }
}

impl From<SceneError> for CliError {
    fn from(e: SceneError) -> Self {
        use SceneError::*;
        match e {
            DuplicateRoom(_) | UnknownRoom(_) | Disconnected(_) | Cycle(..) | SelfLoop(_) | MissingRoot(_) => {
                CliError::Graph(e.to_string())
            }
            AssetTooLarge { .. } | PlacementFailed { .. } => CliError::Placement(e.to_string()),
            Cloud { .. } | TooFewPoints(_) | UnknownPlane(_) | DuplicateId(_) | InvalidAsset(_) | Json { .. } => {
                CliError::Input(e.to_string())
            }
            Degenerate | NoPlane { .. } => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        match e {
            MetricsError::ZeroVariance(_) | MetricsError::TooFewPairs(_) | MetricsError::NoSimRealPairs => {
                CliError::Numerical(e.to_string())
            }
            other => CliError::Input(other.to_string()),
        }
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        CliError::Input(e.to_string())
    }
}
