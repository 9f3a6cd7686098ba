use std::fmt;

/// Machine-greppable prefix of every failure line.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Code {
    Io,
    Parse,
    Config,
    Version,
    Nan,
    Shape,
    Contract,
}

impl Code {
    pub fn as_str(self) -> &'static str {
        match self {
            Code::Io => "E_IO",
            Code::Parse => "E_PARSE",
            Code::Config => "E_CONFIG",
            Code::Version => "E_VERSION",
            Code::Nan => "E_NAN",
            Code::Shape => "E_SHAPE",
            Code::Contract => "E_CONTRACT",
        }
    }

    /// Process exit status for this code.
    pub fn exit_code(self) -> i32 {
        match self {
            Code::Io => 3,
            Code::Parse => 4,
            Code::Config => 2,
            Code::Version => 5,
            Code::Nan => 6,
            Code::Shape => 7,
            Code::Contract => 8,
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub code: Code,
    pub message: String,
}

impl CliError {
    pub fn new(code: Code, message: impl Into<String>) -> Self {
        CliError { code, message: message.into() }
    }
}

impl fmt::Display for CliError {
    /// One line: `E_CODE: message`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.code.as_str(), self.message.replace('\n', " "))
    }
}

impl std::error::Error for CliError {}

impl From<nanocontrol::Error> for CliError {
    fn from(e: nanocontrol::Error) -> Self {
        use nanocontrol::Error as E;
        let code = match &e {
            E::Dimension(_) => Code::Shape,
            E::NonFinite { .. } => Code::Nan,
            E::Contract(_) => Code::Contract,
            E::Config(_) => Code::Config,
            E::Format(_) | E::Json(_) => Code::Parse,
            E::Io(_) => Code::Io,
        };
        CliError::new(code, e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::new(Code::Io, e.to_string())
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

/// Attaches a path to I/O failures.
pub(crate) fn io_at<T>(path: &std::path::Path, r: std::io::Result<T>) -> Result<T> {
    r.map_err(|e| CliError::new(Code::Io, format!("{}: {e}", path.display())))
}

/// A JSON parse failure with file and line.
pub(crate) fn parse_err(path: &std::path::Path, e: serde_json::Error) -> CliError {
    let code = if e.is_io() { Code::Io } else { Code::Parse };
    CliError::new(code, format!("{}: line {} column {}: {e}", path.display(), e.line(), e.column()))
}
