use std::fmt;

/// An error tagged with the process exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

pub const USAGE: u8 = 2;
pub const RUNTIME: u8 = 1;

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Self { code: USAGE, message: message.into() }
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        Self { code: RUNTIME, message: message.into() }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

/// Bad input (missing or malformed files, invalid settings) is a usage
/// error; anything that goes wrong while computing is a runtime error.
impl From<l2d_core::Error> for Failure {
    fn from(e: l2d_core::Error) -> Self {
        use l2d_core::Error as E;
        match e {
            E::Parse { .. } | E::EmptyDataset | E::Config(_) | E::Argument(_) | E::Io { .. } => {
                Failure::usage(e.to_string())
            }
            E::Training { .. } | E::Fit(_) | E::NoSamples | E::Json(_) => Failure::runtime(e.to_string()),
        }
    }
}

pub trait ResultExt<T> {
    fn usage(self) -> Result<T, Failure>;
    fn runtime(self) -> Result<T, Failure>;
}

impl<T, E: fmt::Display> ResultExt<T> for Result<T, E> {
    fn usage(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::usage(e.to_string()))
    }

    fn runtime(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::runtime(e.to_string()))
    }
}
