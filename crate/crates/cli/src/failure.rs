use std::fmt;

/// A failed command, classified by exit code.
#[derive(Debug)]
pub enum Failure {
    /// Bad flags or inputs: exit code 2.
    Usage(anyhow::Error),
    /// The run itself failed: exit code 1.
    Runtime(anyhow::Error),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Runtime(_) => 1,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let e = match self {
            Failure::Usage(e) | Failure::Runtime(e) => e,
        };
        if f.alternate() {
            write!(f, "{e:#}")
        } else {
            write!(f, "{e}")
        }
    }
}

impl std::error::Error for Failure {}

pub(crate) trait Classify<T> {
    fn usage(self, context: impl FnOnce() -> String) -> Result<T, Failure>;
    fn runtime(self, context: impl FnOnce() -> String) -> Result<T, Failure>;
}

impl<T, E> Classify<T> for Result<T, E>
where
    E: Into<anyhow::Error>,
{
    fn usage(self, context: impl FnOnce() -> String) -> Result<T, Failure> {
        self.map_err(|e| Failure::Usage(e.into().context(context())))
    }

    fn runtime(self, context: impl FnOnce() -> String) -> Result<T, Failure> {
        self.map_err(|e| Failure::Runtime(e.into().context(context())))
    }
}
