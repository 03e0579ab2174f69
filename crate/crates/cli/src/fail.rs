//! Exit-code classification: 2 for usage or parse problems, 3 for data that
//! parses but breaks an invariant, 4 for failed verification.

use std::fmt;
use std::io;

use east::formats::FormatError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Usage = 2,
    Data = 3,
    Verify = 4,
}

#[derive(Debug)]
pub struct Failure {
    pub kind: Kind,
    pub error: anyhow::Error,
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.error)
    }
}

pub type Outcome<T> = Result<T, Failure>;

pub fn fail(kind: Kind, error: impl Into<anyhow::Error>) -> Failure {
    Failure {
        kind,
        error: error.into(),
    }
}

/// Attaches an exit code (and a context line) to any error.
pub trait Classify<T> {
    fn or_kind(self, kind: Kind, what: impl fmt::Display) -> Outcome<T>;

    fn usage(self, what: impl fmt::Display) -> Outcome<T>
    where
        Self: Sized,
    {
        self.or_kind(Kind::Usage, what)
    }

    fn data(self, what: impl fmt::Display) -> Outcome<T>
    where
        Self: Sized,
    {
        self.or_kind(Kind::Data, what)
    }
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn or_kind(self, kind: Kind, what: impl fmt::Display) -> Outcome<T> {
        self.map_err(|e| fail(kind, e.into().context(what.to_string())))
    }
}

/// Missing files and malformed text are usage errors; anything else wrong
/// with a file's contents is a data error.
pub fn format_kind(e: &FormatError) -> Kind {
    match e {
        FormatError::Parse { .. } => Kind::Usage,
        FormatError::Io(io) if io.kind() == io::ErrorKind::NotFound => Kind::Usage,
        _ => Kind::Data,
    }
}

pub fn read_failure(e: FormatError, path: &std::path::Path) -> Failure {
    let kind = format_kind(&e);
    fail(kind, anyhow::Error::new(e).context(format!("reading {}", path.display())))
}
