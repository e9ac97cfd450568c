use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{LlmBackend, LlmError};

/// One request/response exchange; a log file holds one JSON object per line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogRecord {
    pub seq: u64,
    pub prompt: String,
    pub max_tokens: usize,
    pub stop: Option<String>,
    pub response: Option<String>,
    pub error: Option<String>,
    pub elapsed_ms: f64,
}

struct Sink {
    file: File,
    next: u64,
}

/// Passes calls through to `inner` and appends each exchange to a JSONL
/// file. Records are written before the result is returned.
pub struct LoggingBackend<B> {
    inner: B,
    sink: Mutex<Sink>,
}

impl<B: LlmBackend> LoggingBackend<B> {
    /// Appends to `path`, creating it if needed.
    pub fn new(inner: B, path: &Path) -> Result<Self, LlmError> {
        let next = if path.exists() { read_log(path)?.len() as u64 } else { 0 };
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            inner,
            sink: Mutex::new(Sink { file, next }),
        })
    }

    pub fn inner(&self) -> &B {
        &self.inner
    }
}

impl<B: LlmBackend> LlmBackend for LoggingBackend<B> {
    fn complete(&self, prompt: &str, max_tokens: usize, stop: Option<&str>) -> Result<String, LlmError> {
        let start = Instant::now();
        let result = self.inner.complete(prompt, max_tokens, stop);
        let mut sink = self.sink.lock().expect("log sink");
        let record = LogRecord {
            seq: sink.next,
            prompt: prompt.to_string(),
            max_tokens,
            stop: stop.map(str::to_string),
            response: result.as_ref().ok().cloned(),
            error: result.as_ref().err().map(ToString::to_string),
            elapsed_ms: start.elapsed().as_secs_f64() * 1e3,
        };
        let mut line = serde_json::to_string(&record).expect("log record serializes");
        line.push('\n');
        sink.file.write_all(line.as_bytes())?;
        sink.file.flush()?;
        sink.next += 1;
        result
    }
}

pub fn read_log(path: &Path) -> Result<Vec<LogRecord>, LlmError> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| LlmError::Malformed {
            detail: format!("{} line {}: {e}", path.display(), i + 1),
            raw: line.clone(),
        })?;
        out.push(rec);
    }
    Ok(out)
}
