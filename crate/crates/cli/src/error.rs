use thiserror::Error;

pub type Result<T, E = CliError> = std::result::Result<T, E>;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error(transparent)]
    Core(#[from] voljepa::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        use voljepa::Error as E;
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Data(_) => EXIT_DATA,
            CliError::Core(e) => match e {
                E::InvalidSpec(_) | E::InvalidArgument(_) => EXIT_CONFIG,
                E::Numeric(_) | E::UndefinedMetric(_) | E::UnreliableCi { .. } => EXIT_NUMERIC,
                _ => EXIT_DATA,
            },
        }
    }

    pub fn io(path: &std::path::Path, e: std::io::Error) -> Self {
        CliError::Core(voljepa::Error::io(path, e))
    }
}
