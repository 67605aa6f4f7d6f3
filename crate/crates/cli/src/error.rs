use std::process::ExitCode;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("vocabulary mismatch: {0}")]
    Mismatch(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
            CliError::Mismatch(_) => 4,
            CliError::Other(_) => 1,
        })
    }
}

impl From<radseq::Error> for CliError {
    fn from(e: radseq::Error) -> Self {
        use radseq::Error as E;
        match e {
            E::VocabMismatch { .. } | E::Layout(_) => CliError::Mismatch(e.to_string()),
            E::Data(_) | E::Trajectory(_) | E::Caption(_) | E::Io(_) | E::Json(_) => {
                CliError::Data(e.to_string())
            }
            E::Checkpoint(_) => CliError::Data(e.to_string()),
            E::InvalidArgument(_) => CliError::Usage(e.to_string()),
            E::Shape(_) => CliError::Other(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}
