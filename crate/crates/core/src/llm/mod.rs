//! Text-completion backends: scripted oracles for tests, an HTTP client for
//! real inference servers, and a wrapper that records every exchange.

mod http;
mod log;

use std::collections::VecDeque;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use thiserror::Error;

pub use http::{HttpBackend, HttpConfig};
pub use log::{read_log, LogRecord, LoggingBackend};

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("transport failed after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("server returned status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("malformed response ({detail}); raw payload: {raw}")]
    Malformed { detail: String, raw: String },
    #[error("oracle has no answer for call {0}")]
    Exhausted(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub trait LlmBackend: Send + Sync {
    /// Continuation of `prompt`, at most `max_tokens` tokens, cut just after
    /// the first occurrence of `stop`.
    fn complete(&self, prompt: &str, max_tokens: usize, stop: Option<&str>) -> Result<String, LlmError>;
}

impl<B: LlmBackend + ?Sized> LlmBackend for &B {
    fn complete(&self, prompt: &str, max_tokens: usize, stop: Option<&str>) -> Result<String, LlmError> {
        (**self).complete(prompt, max_tokens, stop)
    }
}

impl<B: LlmBackend + ?Sized> LlmBackend for Box<B> {
    fn complete(&self, prompt: &str, max_tokens: usize, stop: Option<&str>) -> Result<String, LlmError> {
        (**self).complete(prompt, max_tokens, stop)
    }
}

pub(crate) fn check_request(prompt: &str, max_tokens: usize) -> Result<(), LlmError> {
    if prompt.is_empty() {
        return Err(LlmError::InvalidRequest("empty prompt".into()));
    }
    if max_tokens == 0 {
        return Err(LlmError::InvalidRequest("max_tokens must be at least 1".into()));
    }
    Ok(())
}

/// `text` up to and including the first `stop`, or all of it.
pub fn truncate_at_stop<'a>(text: &'a str, stop: Option<&str>) -> &'a str {
    match stop {
        Some(s) if !s.is_empty() => match text.find(s) {
            Some(i) => &text[..i + s.len()],
            None => text,
        },
        _ => text,
    }
}

/// At most `max_tokens` whitespace-separated pieces of `text`, with the
/// original spacing between them kept.
pub fn truncate_words(text: &str, max_tokens: usize) -> &str {
    let mut seen = 0;
    let mut in_word = false;
    for (i, ch) in text.char_indices() {
        if ch.is_whitespace() {
            in_word = false;
        } else if !in_word {
            if seen == max_tokens {
                return text[..i].trim_end();
            }
            seen += 1;
            in_word = true;
        }
    }
    text
}

/// Exact-match scoring for generated class names: surrounding whitespace is
/// ignored and the comparison is case-insensitive.
pub fn classify_exact_match(generated: &str, label: &str) -> bool {
    generated.trim().to_lowercase() == label.trim().to_lowercase()
}

type AnswerFn = dyn Fn(&str, usize) -> String + Send + Sync;

enum Script {
    Queue(Mutex<VecDeque<String>>),
    Function(Box<AnswerFn>),
}

/// Deterministic backend that never looks at a model: answers are either
/// a fixed list consumed one per call, or computed from `(prompt, call
/// index)`. Outputs are cut to `max_tokens` whitespace pieces and at the
/// stop string like a real server's would be.
pub struct OracleBackend {
    script: Script,
    calls: AtomicUsize,
}

impl OracleBackend {
    /// The `i`-th call receives `answers[i]`.
    pub fn sequence<I, S>(answers: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            script: Script::Queue(Mutex::new(answers.into_iter().map(Into::into).collect())),
            calls: AtomicUsize::new(0),
        }
    }

    pub fn from_fn(f: impl Fn(&str, usize) -> String + Send + Sync + 'static) -> Self {
        Self {
            script: Script::Function(Box::new(f)),
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    /// Scripted answers not yet consumed.
    pub fn remaining(&self) -> usize {
        match &self.script {
            Script::Queue(q) => q.lock().expect("oracle queue").len(),
            Script::Function(_) => usize::MAX,
        }
    }
}

impl LlmBackend for OracleBackend {
    fn complete(&self, prompt: &str, max_tokens: usize, stop: Option<&str>) -> Result<String, LlmError> {
        check_request(prompt, max_tokens)?;
        let idx = self.calls.fetch_add(1, Ordering::SeqCst);
        let raw = match &self.script {
            Script::Queue(q) => q.lock().expect("oracle queue").pop_front().ok_or(LlmError::Exhausted(idx))?,
            Script::Function(f) => f(prompt, idx),
        };
        Ok(truncate_at_stop(truncate_words(&raw, max_tokens), stop).to_string())
    }
}
