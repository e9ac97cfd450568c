use std::fmt;
use std::io;

use v2l_core::codebook::CodebookError;
use v2l_core::eval::EvalError;
use v2l_core::llm::LlmError;
use v2l_core::protocol::ProtocolError;
use v2l_core::tokenizer::TokenizerError;

/// Exit 1 for problems with the user's inputs, 2 for failures at run time.
#[derive(Debug)]
pub enum CliError {
    User(String),
    Internal(String),
}

impl CliError {
    pub fn user(msg: impl Into<String>) -> Self {
        Self::User(msg.into())
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Self::User(_) => 1,
            Self::Internal(_) => 2,
        }
    }

    fn map(self, f: impl FnOnce(String) -> String) -> Self {
        match self {
            Self::User(m) => Self::User(f(m)),
            Self::Internal(m) => Self::Internal(f(m)),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (Self::User(m) | Self::Internal(m)) = self;
        // one line, whatever the source said
        let flat: Vec<&str> = m.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
        f.write_str(&flat.join(" "))
    }
}

fn io_kind(e: &io::Error) -> bool {
    matches!(
        e.kind(),
        io::ErrorKind::NotFound | io::ErrorKind::PermissionDenied | io::ErrorKind::InvalidData
    )
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        if io_kind(&e) {
            Self::User(e.to_string())
        } else {
            Self::Internal(e.to_string())
        }
    }
}

impl From<CodebookError> for CliError {
    fn from(e: CodebookError) -> Self {
        match e {
            CodebookError::Io(io) => io.into(),
            other => Self::User(other.to_string()),
        }
    }
}

impl From<TokenizerError> for CliError {
    fn from(e: TokenizerError) -> Self {
        match e {
            TokenizerError::Io(io) => io.into(),
            TokenizerError::Codebook(c) => c.into(),
            e @ (TokenizerError::Diverged { .. } | TokenizerError::Numerics(_) | TokenizerError::Quantize(_)) => {
                Self::Internal(e.to_string())
            }
            other => Self::User(other.to_string()),
        }
    }
}

impl From<LlmError> for CliError {
    fn from(e: LlmError) -> Self {
        match e {
            LlmError::InvalidRequest(_) => Self::User(e.to_string()),
            LlmError::Status { status, .. } if (400..500).contains(&status) && status != 429 => {
                Self::User(e.to_string())
            }
            LlmError::Io(io) => io.into(),
            other => Self::Internal(other.to_string()),
        }
    }
}

impl From<ProtocolError> for CliError {
    fn from(e: ProtocolError) -> Self {
        match e {
            ProtocolError::Llm(l) => l.into(),
            other => Self::User(other.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        Self::User(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::User(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;

pub trait Context<T> {
    /// Prefixes the error message with `what`.
    fn ctx(self, what: impl fmt::Display) -> CliResult<T>;
}

impl<T, E: Into<CliError>> Context<T> for Result<T, E> {
    fn ctx(self, what: impl fmt::Display) -> CliResult<T> {
        self.map_err(|e| e.into().map(|m| format!("{what}: {m}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn codes_and_context() {
        let e: Result<(), io::Error> = Err(io::Error::new(io::ErrorKind::NotFound, "gone"));
        let e = e.ctx("reading x").unwrap_err();
        assert_eq!(e.exit_code(), 1);
        assert_eq!(e.to_string(), "reading x: gone");
        let e: CliError = LlmError::Transport {
            attempts: 3,
            message: "refused".into(),
        }
        .into();
        assert_eq!(e.exit_code(), 2);
        assert_eq!(CliError::user("a\n  b").to_string(), "a b");
    }
}
