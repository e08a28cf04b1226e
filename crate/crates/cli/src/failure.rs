use std::process::ExitCode;

use melnet_core::Error;

/// Command failure classified by exit status.
#[derive(Debug)]
pub enum Failure {
    /// Exit 1: bad flags or arguments.
    Usage(String),
    /// Exit 2: the run configuration (or what it points at) is unusable.
    Config(String),
    /// Exit 3: the run itself failed.
    Runtime(String),
}

impl Failure {
    fn parts(&self) -> (u8, &'static str, &str) {
        match self {
            Failure::Usage(m) => (1, "usage", m),
            Failure::Config(m) => (2, "config", m),
            Failure::Runtime(m) => (3, "runtime", m),
        }
    }

    /// Prints `melnet: error[<kind>]: <reason>` on one stderr line.
    pub fn report(&self) -> ExitCode {
        let (code, kind, msg) = self.parts();
        let one_line = msg.split_whitespace().collect::<Vec<_>>().join(" ");
        eprintln!("melnet: error[{kind}]: {one_line}");
        ExitCode::from(code)
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::CheckpointMismatch(_) | Error::MissingFile(_) => Failure::Config(e.to_string()),
            Error::UnknownToken(_) | Error::InvalidArgument(_) => Failure::Usage(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}
