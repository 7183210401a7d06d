//! Error classification into process exit codes.

use std::fmt;
use std::io;

use wormloc::baseline::BaselineError;
use wormloc::dataset::DatasetError;
use wormloc::eval::EvalError;
use wormloc::imaging::ImagingError;
use wormloc::render::RenderError;
use wormloc::synthgen::SynthError;
use wormloc::train::{CheckpointError, TrainError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Usage,
    Io,
    Data,
    Numeric,
}

impl Kind {
    pub fn code(self) -> i32 {
        match self {
            Kind::Usage => 2,
            Kind::Io => 3,
            Kind::Data => 4,
            Kind::Numeric => 5,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Kind::Usage => "usage",
            Kind::Io => "io",
            Kind::Data => "data",
            Kind::Numeric => "numeric",
        }
    }
}

#[derive(Debug)]
pub struct Failure {
    pub kind: Kind,
    pub error: anyhow::Error,
}

impl Failure {
    pub fn new(kind: Kind, error: impl Into<anyhow::Error>) -> Self {
        Self {
            kind,
            error: error.into(),
        }
    }

    pub fn usage(message: impl fmt::Display) -> Self {
        Self::new(Kind::Usage, anyhow::anyhow!("{message}"))
    }

    pub fn data(message: impl fmt::Display) -> Self {
        Self::new(Kind::Data, anyhow::anyhow!("{message}"))
    }

    /// `error[kind] code=N: message` with the whole cause chain on one line.
    pub fn one_line(&self) -> String {
        let message = format!("{:#}", self.error).split_whitespace().collect::<Vec<_>>().join(" ");
        format!("error[{}] code={}: {}", self.kind.name(), self.kind.code(), message)
    }
}

pub type CliResult<T> = Result<T, Failure>;

/// Attaches a path or step description, keeping the kind.
pub trait Context<T> {
    fn context(self, what: impl fmt::Display) -> CliResult<T>;
}

impl<T, E: Into<Failure>> Context<T> for Result<T, E> {
    fn context(self, what: impl fmt::Display) -> CliResult<T> {
        self.map_err(|e| {
            let f: Failure = e.into();
            Failure {
                kind: f.kind,
                error: f.error.context(what.to_string()),
            }
        })
    }
}

fn imaging_kind(e: &ImagingError) -> Kind {
    match e {
        ImagingError::Io { .. } => Kind::Io,
        ImagingError::InvalidBlock { .. } | ImagingError::NegativeOffset(_) => Kind::Usage,
        _ => Kind::Data,
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Self::new(Kind::Io, e)
    }
}

impl From<ImagingError> for Failure {
    fn from(e: ImagingError) -> Self {
        Self::new(imaging_kind(&e), e)
    }
}

impl From<DatasetError> for Failure {
    fn from(e: DatasetError) -> Self {
        let kind = match &e {
            DatasetError::Io { .. } | DatasetError::MissingImage { .. } => Kind::Io,
            DatasetError::Imaging(inner) => imaging_kind(inner),
            _ => Kind::Data,
        };
        Self::new(kind, e)
    }
}

impl From<SynthError> for Failure {
    fn from(e: SynthError) -> Self {
        let kind = match &e {
            SynthError::Io { .. } => Kind::Io,
            SynthError::InvalidParams(_) => Kind::Usage,
            SynthError::PlacementFailed(_) => Kind::Data,
        };
        Self::new(kind, e)
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        let kind = match &e {
            TrainError::NonFinite { .. } => Kind::Numeric,
            _ => Kind::Data,
        };
        Self::new(kind, e)
    }
}

impl From<CheckpointError> for Failure {
    fn from(e: CheckpointError) -> Self {
        let kind = match &e {
            CheckpointError::Io { .. } => Kind::Io,
            _ => Kind::Data,
        };
        Self::new(kind, e)
    }
}

impl From<EvalError> for Failure {
    fn from(e: EvalError) -> Self {
        Self::new(Kind::Data, e)
    }
}

impl From<BaselineError> for Failure {
    fn from(e: BaselineError) -> Self {
        let kind = match &e {
            BaselineError::Imaging(inner) => imaging_kind(inner),
            _ => Kind::Data,
        };
        Self::new(kind, e)
    }
}

impl From<RenderError> for Failure {
    fn from(e: RenderError) -> Self {
        Self::new(Kind::Data, e)
    }
}

impl From<toml::de::Error> for Failure {
    fn from(e: toml::de::Error) -> Self {
        Self::new(Kind::Data, e)
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        let kind = if e.is_io() { Kind::Io } else { Kind::Data };
        Self::new(kind, e)
    }
}
