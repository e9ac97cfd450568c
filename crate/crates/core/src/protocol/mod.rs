//! Prompt construction for few-shot understanding tasks and the
//! token-map restoration protocols.
//!
//! Flattening is row-major. Token strings inside prompts are joined with a
//! single space.

mod denoise;
pub mod pollute;

use std::collections::{BTreeSet, HashMap};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codebook::{ExpandedVocabulary, Vocabulary};
use crate::llm::LlmError;
use crate::tokenizer::TokenMap;

pub use denoise::{
    copy_replacements, make_copies, make_paired_copies, mask_positions, masked_input, plan_chunks,
    plan_translation, random_mask, run_map_translation, run_mask_restoration, run_masked_restoration,
    run_restoration, Chunk, DenoiseSpec, DenoiseTask, MaskRect, Restoration, RunReport, Window,
};

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("invalid spec: {0}")]
    Spec(String),
    #[error("expected {expected} samples, got {got}")]
    SampleCount { expected: String, got: usize },
    #[error("label {0:?} is not one of the spec's labels")]
    UnknownLabel(String),
    #[error("{0}")]
    Input(String),
    #[error("token id {id} outside a lexicon of {size}")]
    UnknownId { id: u32, size: usize },
    #[error(transparent)]
    Llm(#[from] LlmError),
}

/// Token strings by id with reverse lookup, used both to render prompts and
/// to read ids back out of completions.
#[derive(Clone, Debug)]
pub struct Lexicon {
    entries: Vec<String>,
    index: HashMap<String, u32>,
}

/// How a completion piece was mapped back to an id.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Snap {
    Exact(u32),
    /// Longest entry that is a prefix of the piece, or failing that the
    /// entry sharing the longest common prefix with it.
    Nearest(u32),
    /// Nothing matched at all.
    Miss,
}

impl Lexicon {
    /// Duplicate strings keep their first id.
    pub fn new(entries: Vec<String>) -> Self {
        let mut index = HashMap::with_capacity(entries.len());
        for (i, e) in entries.iter().enumerate() {
            index.entry(e.clone()).or_insert(i as u32);
        }
        Self { entries, index }
    }

    pub fn from_vocabulary(v: &Vocabulary) -> Self {
        Self::new(v.entries().to_vec())
    }

    pub fn from_expanded(v: &ExpandedVocabulary) -> Self {
        Self::new(v.texts().map(str::to_string).collect())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn text(&self, id: u32) -> Result<&str, ProtocolError> {
        self.entries
            .get(id as usize)
            .map(String::as_str)
            .ok_or(ProtocolError::UnknownId {
                id,
                size: self.entries.len(),
            })
    }

    pub fn id_of(&self, text: &str) -> Option<u32> {
        self.index.get(text).copied()
    }

    pub fn render(&self, ids: &[u32]) -> Result<String, ProtocolError> {
        let parts: Result<Vec<&str>, _> = ids.iter().map(|&id| self.text(id)).collect();
        Ok(parts?.join(" "))
    }

    pub fn snap(&self, piece: &str) -> Snap {
        if let Some(id) = self.id_of(piece) {
            return Snap::Exact(id);
        }
        let mut ends: Vec<usize> = piece.char_indices().map(|(i, _)| i).skip(1).collect();
        ends.reverse();
        for end in ends {
            if let Some(id) = self.id_of(&piece[..end]) {
                return Snap::Nearest(id);
            }
        }
        let mut best: Option<(usize, u32)> = None;
        for (i, e) in self.entries.iter().enumerate() {
            let common = e
                .chars()
                .zip(piece.chars())
                .take_while(|(a, b)| a == b)
                .map(|(a, _)| a.len_utf8())
                .sum::<usize>();
            if common > 0 && best.map_or(true, |(c, _)| common > c) {
                best = Some((common, i as u32));
            }
        }
        best.map_or(Snap::Miss, |(_, id)| Snap::Nearest(id))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Codebook {
    Global,
    Local,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Segment {
    Text(String),
    Tokens { codebook: Codebook, ids: Vec<u32> },
}

/// A prompt as literal text interleaved with token-id runs, plus its
/// rendering.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptDoc {
    pub segments: Vec<Segment>,
    pub rendered: String,
}

struct DocBuilder<'a> {
    lex: &'a Lexicon,
    codebook: Codebook,
    segments: Vec<Segment>,
    rendered: String,
}

impl<'a> DocBuilder<'a> {
    fn new(lex: &'a Lexicon, codebook: Codebook) -> Self {
        Self {
            lex,
            codebook,
            segments: Vec::new(),
            rendered: String::new(),
        }
    }

    fn text(&mut self, s: &str) -> &mut Self {
        if let Some(Segment::Text(last)) = self.segments.last_mut() {
            last.push_str(s);
        } else {
            self.segments.push(Segment::Text(s.to_string()));
        }
        self.rendered.push_str(s);
        self
    }

    fn tokens(&mut self, ids: &[u32]) -> Result<&mut Self, ProtocolError> {
        let s = self.lex.render(ids)?;
        self.segments.push(Segment::Tokens {
            codebook: self.codebook,
            ids: ids.to_vec(),
        });
        self.rendered.push_str(&s);
        Ok(self)
    }

    fn finish(self) -> PromptDoc {
        PromptDoc {
            segments: self.segments,
            rendered: self.rendered,
        }
    }
}

impl PromptDoc {
    /// Re-renders the segments; equals `rendered` for any builder output.
    pub fn render_with(&self, global: &Lexicon, local: &Lexicon) -> Result<String, ProtocolError> {
        let mut out = String::new();
        for s in &self.segments {
            match s {
                Segment::Text(t) => out.push_str(t),
                Segment::Tokens { codebook, ids } => {
                    let lex = match codebook {
                        Codebook::Global => global,
                        Codebook::Local => local,
                    };
                    out.push_str(&lex.render(ids)?);
                }
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FewShotSpec {
    pub ways: usize,
    pub shots: usize,
    pub task_induction: bool,
    pub repetitions: usize,
    pub labels: Vec<String>,
}

impl FewShotSpec {
    pub fn validate(&self) -> Result<(), ProtocolError> {
        if self.labels.len() != self.ways {
            return Err(ProtocolError::Spec(format!(
                "{} labels for a {}-way task",
                self.labels.len(),
                self.ways
            )));
        }
        let unique: BTreeSet<&String> = self.labels.iter().collect();
        if unique.len() != self.labels.len() {
            return Err(ProtocolError::Spec("labels must be distinct".into()));
        }
        Ok(())
    }

    /// Distinct samples in one block, `N·K`.
    pub fn block_len(&self) -> usize {
        self.ways * self.shots
    }
}

pub const CAPTION_HEADER: &str = "Generate a caption sentence based on words describing an image.";
pub const VQA_HEADER: &str = "Answer the question with a single word based on the condition.";

fn induction_line(labels: &[String]) -> String {
    let quoted: Vec<String> = labels.iter().map(|l| format!("\"{l}\"")).collect();
    format!(
        "For each of the following input-output pairs, output is one of [{}].",
        quoted.join(", ")
    )
}

fn end_sentence(s: &str) -> String {
    let t = s.trim_end();
    if t.ends_with(['.', '?', '!']) {
        t.to_string()
    } else {
        format!("{t}.")
    }
}

/// Classification prompt. `samples` holds either one block of `N·K`
/// samples, which is repeated `repetitions + 1` times, or all
/// `N·K·(repetitions + 1)` samples in the order they should appear.
pub fn build_classification_prompt(
    spec: &FewShotSpec,
    samples: &[(TokenMap, String)],
    test: &TokenMap,
    global: &Lexicon,
) -> Result<PromptDoc, ProtocolError> {
    spec.validate()?;
    let block = spec.block_len();
    let full = block * (spec.repetitions + 1);
    let ordered: Vec<&(TokenMap, String)> = if samples.len() == full {
        samples.iter().collect()
    } else if samples.len() == block {
        samples.iter().cycle().take(full).collect()
    } else {
        return Err(ProtocolError::SampleCount {
            expected: format!("{block} or {full}"),
            got: samples.len(),
        });
    };
    if let Some((_, l)) = ordered.iter().find(|(_, l)| !spec.labels.contains(l)) {
        return Err(ProtocolError::UnknownLabel(l.clone()));
    }
    let mut doc = DocBuilder::new(global, Codebook::Global);
    let mut first = true;
    if spec.task_induction {
        doc.text(&induction_line(&spec.labels));
        first = false;
    }
    for (map, label) in ordered {
        doc.text(if first { "Input: " } else { " Input: " });
        doc.tokens(&map.global_ids)?.text(&format!(", output: {label}."));
        first = false;
    }
    doc.text(if first { "Input: " } else { " Input: " });
    doc.tokens(&test.global_ids)?.text(", output:");
    Ok(doc.finish())
}

pub fn build_caption_prompt(
    samples: &[(TokenMap, String)],
    test: &TokenMap,
    global: &Lexicon,
) -> Result<PromptDoc, ProtocolError> {
    let mut doc = DocBuilder::new(global, Codebook::Global);
    doc.text(CAPTION_HEADER);
    for (map, caption) in samples {
        if caption.trim().is_empty() {
            return Err(ProtocolError::Input("empty caption in samples".into()));
        }
        doc.text(" Input: ");
        doc.tokens(&map.global_ids)?
            .text(&format!(", output: {}", end_sentence(caption)));
    }
    doc.text(" Input: ");
    doc.tokens(&test.global_ids)?.text(", output:");
    Ok(doc.finish())
}

/// Sample triples are `(map, question, answer)`.
pub fn build_vqa_prompt(
    samples: &[(TokenMap, String, String)],
    test: &TokenMap,
    question: &str,
    global: &Lexicon,
) -> Result<PromptDoc, ProtocolError> {
    if question.trim().is_empty() {
        return Err(ProtocolError::Input("VQA needs a non-empty question".into()));
    }
    let mut doc = DocBuilder::new(global, Codebook::Global);
    doc.text(VQA_HEADER);
    for (map, q, a) in samples {
        if q.trim().is_empty() || a.trim().is_empty() {
            return Err(ProtocolError::Input("VQA samples need a question and an answer".into()));
        }
        doc.text(" Condition: ");
        doc.tokens(&map.global_ids)?.text(&format!(
            ". Question: {} Answer: {}",
            end_sentence(q),
            end_sentence(a)
        ));
    }
    doc.text(" Condition: ");
    doc.tokens(&test.global_ids)?
        .text(&format!(". Question: {} Answer:", end_sentence(question)));
    Ok(doc.finish())
}

/// Prompt for one restoration call: `examples` are `(input, output)` id
/// runs from the corrupted copies, `query` the input to complete.
pub fn build_denoise_prompt(
    local: &Lexicon,
    predict: usize,
    examples: &[(Vec<u32>, Vec<u32>)],
    query: &[u32],
) -> Result<PromptDoc, ProtocolError> {
    let mut doc = DocBuilder::new(local, Codebook::Local);
    doc.text(&format!(
        "Learn a new language and predict {predict} tokens following the examples."
    ));
    for (input, output) in examples {
        doc.text(" Input: ");
        doc.tokens(input)?.text(", output: ");
        doc.tokens(output)?.text(".");
    }
    doc.text(" Input: ");
    doc.tokens(query)?.text(", output:");
    Ok(doc.finish())
}

/// Completion text reduced to a label or caption: surrounding whitespace and
/// one trailing period removed.
pub fn clean_completion(text: &str) -> String {
    let t = text.trim();
    t.strip_suffix('.').unwrap_or(t).trim_end().to_string()
}

/// Applies `f` to every item with at most `cap` running at once; results
/// keep the input order.
pub fn parallel_map<T, R, F>(items: &[T], cap: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    let workers = cap.max(1).min(items.len());
    if workers <= 1 {
        return items.iter().map(&f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<R>>> = items.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                *slots[i].lock().expect("result slot") = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().expect("result slot").expect("every item processed"))
        .collect()
}
