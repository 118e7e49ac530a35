use std::fmt;
use std::path::Path;

use cpfactor::evalsuite::EvalError;
use cpfactor::events::EventError;
use cpfactor::inference::InferenceError;
use cpfactor::lik::LikError;
use cpfactor::model::ModelError;
use cpfactor::simulator::SimError;
use cpfactor::stem::FitError;
use cpfactor::covariates::CovariateError;

pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;
pub const EXIT_CONFIG: i32 = 4;

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn validation(message: impl Into<String>) -> Self {
        Self { code: EXIT_VALIDATION, message: message.into() }
    }

    pub fn numerical(message: impl Into<String>) -> Self {
        Self { code: EXIT_NUMERICAL, message: message.into() }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self { code: EXIT_CONFIG, message: message.into() }
    }

    /// Prefixes the message with the file it concerns.
    pub fn at(self, path: &Path) -> Self {
        Self { code: self.code, message: format!("{}: {}", path.display(), self.message) }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::validation(e.to_string())
    }
}

impl From<EventError> for CliError {
    fn from(e: EventError) -> Self {
        Self::validation(e.to_string())
    }
}

impl From<CovariateError> for CliError {
    fn from(e: CovariateError) -> Self {
        Self::validation(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::SigmaNotPD => Self::numerical(e.to_string()),
            _ => Self::validation(e.to_string()),
        }
    }
}

impl From<LikError> for CliError {
    fn from(e: LikError) -> Self {
        match e {
            LikError::Model(m) => m.into(),
            LikError::Covariate(c) => c.into(),
            LikError::EventNotAtRisk { .. } => Self::validation(e.to_string()),
            LikError::InvalidConfig(_) => Self::config(e.to_string()),
            _ => Self::numerical(e.to_string()),
        }
    }
}

impl From<FitError> for CliError {
    fn from(e: FitError) -> Self {
        match e {
            FitError::ConfigInvalid(_) => Self::config(e.to_string()),
            FitError::Covariate(c) => c.into(),
            FitError::Lik(l) => l.into(),
            FitError::Model(m) => m.into(),
            FitError::Mstep(_) => Self::numerical(e.to_string()),
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::ConfigInvalid(_) => Self::config(e.to_string()),
            SimError::Model(m) => m.into(),
            SimError::Covariate(c) => c.into(),
            _ => Self::numerical(e.to_string()),
        }
    }
}

impl From<InferenceError> for CliError {
    fn from(e: InferenceError) -> Self {
        match e {
            InferenceError::ConfigInvalid(_) => Self::config(e.to_string()),
            InferenceError::Lik(l) => l.into(),
            InferenceError::Model(m) => m.into(),
            InferenceError::SingularInfo(_) => Self::numerical(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        Self::validation(e.to_string())
    }
}
