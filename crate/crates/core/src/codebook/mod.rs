//! Local and global codebooks: the base LLM vocabulary, its n-gram
//! expansion, and the frozen embedding tables attached to them.

mod expand;
mod filter;
pub mod io;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::Tensor;

pub use expand::{expand_vocabulary, ExpansionConfig, FnPredictor, NextTokenPredictor, PredictionTable};
pub use filter::{cosine_top_k, filter_expanded, FilteredCodebook};

#[derive(Debug, Error)]
pub enum CodebookError {
    #[error("vocabulary is empty")]
    EmptyVocabulary,
    #[error("duplicate vocabulary entry {0:?}")]
    DuplicateEntry(String),
    #[error("next-token predictor failed for context {context:?}: {reason}")]
    Predictor { context: String, reason: String },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("non-finite embedding value at row {row}")]
    NonFinite { row: usize },
    #[error("{0}")]
    Invalid(String),
    #[error("embedding file: {0}")]
    Format(String),
    #[error("checksum mismatch: header says {expected:#018x}, payload hashes to {actual:#018x}")]
    Checksum { expected: u64, actual: u64 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Token strings indexed by id. Entries are unique and non-empty as a set.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    entries: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    pub fn new(entries: Vec<String>) -> Result<Self, CodebookError> {
        if entries.is_empty() {
            return Err(CodebookError::EmptyVocabulary);
        }
        let mut index = HashMap::with_capacity(entries.len());
        for (i, e) in entries.iter().enumerate() {
            if index.insert(e.clone(), i as u32).is_some() {
                return Err(CodebookError::DuplicateEntry(e.clone()));
            }
        }
        Ok(Self { entries, index })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[String] {
        &self.entries
    }

    pub fn get(&self, id: u32) -> Option<&str> {
        self.entries.get(id as usize).map(String::as_str)
    }

    pub fn id_of(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpandedEntry {
    pub text: String,
    /// Ids into the base vocabulary; its length is the arity (1, 2 or 3).
    pub sources: Vec<u32>,
}

impl ExpandedEntry {
    pub fn arity(&self) -> usize {
        self.sources.len()
    }
}

/// Separator used when rendering an n-gram's text from its source tokens.
pub const NGRAM_SEPARATOR: &str = " ";

/// Base vocabulary plus bigrams and trigrams, each entry remembering the
/// base tokens it was built from.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ExpandedVocabulary {
    entries: Vec<ExpandedEntry>,
}

impl ExpandedVocabulary {
    pub fn new(entries: Vec<ExpandedEntry>) -> Result<Self, CodebookError> {
        if let Some(e) = entries.iter().find(|e| !(1..=3).contains(&e.arity())) {
            return Err(CodebookError::Invalid(format!(
                "entry {:?} has arity {}, expected 1..=3",
                e.text,
                e.arity()
            )));
        }
        Ok(Self { entries })
    }

    /// Checks that every entry's text is its sources rendered with
    /// [`NGRAM_SEPARATOR`].
    pub fn validate_against(&self, base: &Vocabulary) -> Result<(), CodebookError> {
        for e in &self.entries {
            let parts: Option<Vec<&str>> = e.sources.iter().map(|&id| base.get(id)).collect();
            let parts =
                parts.ok_or_else(|| CodebookError::Invalid(format!("entry {:?} cites an unknown id", e.text)))?;
            if parts.join(NGRAM_SEPARATOR) != e.text {
                return Err(CodebookError::Invalid(format!(
                    "entry {:?} does not render from its sources {:?}",
                    e.text, parts
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ExpandedEntry] {
        &self.entries
    }

    pub fn get(&self, id: u32) -> Option<&ExpandedEntry> {
        self.entries.get(id as usize)
    }

    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.text.as_str())
    }

    /// Number of entries of each arity, indexed `[unigrams, bigrams, trigrams]`.
    pub fn arity_counts(&self) -> [usize; 3] {
        let mut c = [0; 3];
        for e in &self.entries {
            c[e.arity() - 1] += 1;
        }
        c
    }
}

/// Dense `rows × dim` matrix; row `i` belongs to vocabulary entry `i`.
/// The matrix cannot be modified after construction.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    rows: usize,
    dim: usize,
    data: Vec<f64>,
    frozen: bool,
}

impl EmbeddingTable {
    pub fn new(rows: usize, dim: usize, data: Vec<f64>) -> Result<Self, CodebookError> {
        if rows == 0 || dim == 0 {
            return Err(CodebookError::Dimension(format!(
                "table must be non-empty, got {rows}x{dim}"
            )));
        }
        if data.len() != rows * dim {
            return Err(CodebookError::Dimension(format!(
                "{rows}x{dim} table needs {} values, got {}",
                rows * dim,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(CodebookError::NonFinite { row: pos / dim });
        }
        Ok(Self {
            rows,
            dim,
            data,
            frozen: true,
        })
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self, CodebookError> {
        match *t.shape() {
            [rows, dim] => Self::new(rows, dim, t.data().to_vec()),
            _ => Err(CodebookError::Dimension(format!(
                "expected a 2-d tensor, got {:?}",
                t.shape()
            ))),
        }
    }

    /// Marks a derived table (for example a projected one) as not frozen.
    pub(crate) fn into_derived(mut self) -> Self {
        self.frozen = false;
        self
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..][..self.dim]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.rows, self.dim], self.data.clone()).expect("validated at construction")
    }

    pub fn select_rows(&self, ids: &[usize]) -> Result<Self, CodebookError> {
        let mut data = Vec::with_capacity(ids.len() * self.dim);
        for &i in ids {
            if i >= self.rows {
                return Err(CodebookError::Invalid(format!(
                    "row {i} out of range for {} rows",
                    self.rows
                )));
            }
            data.extend_from_slice(self.row(i));
        }
        Self::new(ids.len(), self.dim, data)
    }
}
