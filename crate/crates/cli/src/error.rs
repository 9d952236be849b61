use srpo_core::config::ConfigError;
use srpo_core::evaluation::EvalError;
use srpo_core::exploration::ExplorationError;
use srpo_core::model::ModelError;
use srpo_core::optimization::TrainError;
use srpo_core::pipeline::PipelineError;

/// Error classes, each with its own exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Config,
    Data,
    Numeric,
    Io,
}

impl Kind {
    pub fn exit_code(self) -> u8 {
        match self {
            Kind::Config => 2,
            Kind::Data => 3,
            Kind::Numeric => 4,
            Kind::Io => 5,
        }
    }
}

#[derive(Debug, thiserror::Error)]
#[error("{message}")]
pub struct CliError {
    pub kind: Kind,
    pub message: String,
}

impl CliError {
    pub fn new(kind: Kind, message: impl Into<String>) -> Self {
        Self {
            kind,
            message: message.into(),
        }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self::new(Kind::Data, message)
    }

    pub fn io(path: &std::path::Path, e: std::io::Error) -> Self {
        Self::new(Kind::Io, format!("{}: {e}", path.display()))
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

fn model_kind(e: &ModelError) -> Kind {
    match e {
        ModelError::NonFinite { .. } => Kind::Numeric,
        ModelError::Temperature(_) => Kind::Config,
        ModelError::Io(_) => Kind::Io,
        _ => Kind::Data,
    }
}

fn pipeline_kind(e: &PipelineError) -> Kind {
    match e {
        PipelineError::InvalidConfig(_) => Kind::Config,
        PipelineError::Io(_) => Kind::Io,
        _ => Kind::Data,
    }
}

fn exploration_kind(e: &ExplorationError) -> Kind {
    match e {
        ExplorationError::InvalidConfig(_) => Kind::Config,
        ExplorationError::Model(m) => model_kind(m),
        ExplorationError::Io(_) => Kind::Io,
        _ => Kind::Data,
    }
}

fn train_kind(e: &TrainError) -> Kind {
    match e {
        TrainError::InvalidConfig(_) => Kind::Config,
        TrainError::Divergence { .. } => Kind::Numeric,
        TrainError::Model(m) => model_kind(m),
        TrainError::Exploration(x) => exploration_kind(x),
        _ => Kind::Data,
    }
}

fn eval_kind(e: &EvalError) -> Kind {
    match e {
        EvalError::InvalidConfig(_) => Kind::Config,
        EvalError::Normalization { .. } => Kind::Numeric,
        EvalError::Model(m) => model_kind(m),
        EvalError::Train(t) => train_kind(t),
        EvalError::Exploration(x) => exploration_kind(x),
        _ => Kind::Data,
    }
}

macro_rules! classify {
    ($($ty:ty => $f:expr),* $(,)?) => {$(
        impl From<$ty> for CliError {
            fn from(e: $ty) -> Self {
                let kind = $f(&e);
                CliError::new(kind, e.to_string())
            }
        }
    )*};
}

classify! {
    ConfigError => |e: &ConfigError| match e {
        ConfigError::Io { .. } => Kind::Io,
        _ => Kind::Config,
    },
    ModelError => model_kind,
    PipelineError => pipeline_kind,
    ExplorationError => exploration_kind,
    TrainError => train_kind,
    EvalError => eval_kind,
}
