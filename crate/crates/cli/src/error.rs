use std::fmt;

/// Process exit codes.
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_NUMERICAL: u8 = 3;
pub const EXIT_SCHEMA: u8 = 4;

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, config or input files.
    Usage(String),
    /// A library failure with the item it happened on.
    Core { context: String, source: dgpemu::Error },
    /// Some items of a batch failed; `numerical` if any failure was.
    Partial { summary: String, numerical: bool },
}

impl CliError {
    pub fn core(context: impl Into<String>, source: dgpemu::Error) -> Self {
        CliError::Core {
            context: context.into(),
            source,
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Core { source, .. } => match source {
                dgpemu::Error::Schema { .. } => EXIT_SCHEMA,
                e if e.is_numerical() => EXIT_NUMERICAL,
                _ => EXIT_USAGE,
            },
            CliError::Partial { numerical: true, .. } => EXIT_NUMERICAL,
            CliError::Partial { .. } => EXIT_USAGE,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => f.write_str(m),
            CliError::Core { context, source } => write!(f, "{context}: {source}"),
            CliError::Partial { summary, .. } => f.write_str(summary),
        }
    }
}

impl std::error::Error for CliError {}

pub type CliResult<T> = Result<T, CliError>;

/// Attaches context to library errors.
pub trait Context<T> {
    fn ctx(self, context: impl FnOnce() -> String) -> CliResult<T>;
}

impl<T> Context<T> for dgpemu::Result<T> {
    fn ctx(self, context: impl FnOnce() -> String) -> CliResult<T> {
        self.map_err(|e| CliError::core(context(), e))
    }
}

impl<T> Context<T> for std::io::Result<T> {
    fn ctx(self, context: impl FnOnce() -> String) -> CliResult<T> {
        self.map_err(|e| CliError::Usage(format!("{}: {e}", context())))
    }
}
