use std::collections::{HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CodebookError, ExpandedEntry, ExpandedVocabulary, Vocabulary, NGRAM_SEPARATOR};

/// Source of next-token continuations: given a context string, returns the
/// `top_m` most likely next tokens, best first.
pub trait NextTokenPredictor {
    fn predict(&self, context: &str, top_m: usize) -> Result<Vec<String>, CodebookError>;
}

/// Adapts a closure into a predictor.
pub struct FnPredictor<F>(pub F);

impl<F> NextTokenPredictor for FnPredictor<F>
where
    F: Fn(&str, usize) -> Result<Vec<String>, CodebookError>,
{
    fn predict(&self, context: &str, top_m: usize) -> Result<Vec<String>, CodebookError> {
        (self.0)(context, top_m)
    }
}

/// Precomputed continuations keyed by full context string, as written by the
/// offline export tool.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionTable {
    pub prefix: String,
    pub top_m: usize,
    pub predictions: HashMap<String, Vec<String>>,
}

impl PredictionTable {
    pub fn load(path: &Path) -> Result<Self, CodebookError> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| CodebookError::Format(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<(), CodebookError> {
        // sorted keys so the file is reproducible
        let sorted: std::collections::BTreeMap<_, _> = self.predictions.iter().collect();
        let value = serde_json::json!({
            "prefix": self.prefix,
            "top_m": self.top_m,
            "predictions": sorted,
        });
        let text = serde_json::to_string_pretty(&value).map_err(|e| CodebookError::Format(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }
}

impl NextTokenPredictor for PredictionTable {
    fn predict(&self, context: &str, top_m: usize) -> Result<Vec<String>, CodebookError> {
        let fail = |reason: String| CodebookError::Predictor {
            context: context.to_string(),
            reason,
        };
        if top_m > self.top_m {
            return Err(fail(format!(
                "table holds {} predictions, {top_m} requested",
                self.top_m
            )));
        }
        let row = self
            .predictions
            .get(context)
            .ok_or_else(|| fail("no entry in table".into()))?;
        if row.len() < top_m {
            return Err(fail(format!("only {} predictions recorded", row.len())));
        }
        Ok(row[..top_m].to_vec())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpansionConfig {
    pub prefix: String,
    pub top_m: usize,
}

impl Default for ExpansionConfig {
    fn default() -> Self {
        Self {
            prefix: "a photo of".into(),
            top_m: 1,
        }
    }
}

impl ExpansionConfig {
    pub fn context(&self, text: &str) -> String {
        format!("{} {}", self.prefix, text)
    }
}

fn continuations(
    base: &Vocabulary,
    predictor: &dyn NextTokenPredictor,
    cfg: &ExpansionConfig,
    text: &str,
) -> Result<Vec<u32>, CodebookError> {
    let context = cfg.context(text);
    let tokens = predictor.predict(&context, cfg.top_m)?;
    let fail = |reason: String| CodebookError::Predictor {
        context: context.clone(),
        reason,
    };
    if tokens.len() != cfg.top_m {
        return Err(fail(format!(
            "expected {} predictions, got {}",
            cfg.top_m,
            tokens.len()
        )));
    }
    let mut seen = HashSet::new();
    let mut ids = Vec::with_capacity(tokens.len());
    for t in &tokens {
        let id = base
            .id_of(t)
            .ok_or_else(|| fail(format!("predicted {t:?} is not in the vocabulary")))?;
        if !seen.insert(id) {
            return Err(fail(format!("duplicate prediction {t:?}")));
        }
        ids.push(id);
    }
    Ok(ids)
}

/// Builds unigrams, then `N·M` bigrams, then `N·M²` trigrams. A bigram
/// `[t, t*]` uses the continuations of `prefix + t`; a trigram extends a
/// bigram with the continuations of `prefix + bigram`.
pub fn expand_vocabulary(
    base: &Vocabulary,
    predictor: &dyn NextTokenPredictor,
    cfg: &ExpansionConfig,
) -> Result<ExpandedVocabulary, CodebookError> {
    if cfg.top_m == 0 {
        return Err(CodebookError::Invalid("top_m must be at least 1".into()));
    }
    let render = |sources: &[u32]| {
        sources
            .iter()
            .map(|&id| base.get(id).expect("ids come from the vocabulary"))
            .collect::<Vec<_>>()
            .join(NGRAM_SEPARATOR)
    };

    let n = base.len();
    let m = cfg.top_m;
    let mut unigrams = Vec::with_capacity(n);
    let mut bigrams = Vec::with_capacity(n * m);
    for (id, token) in base.entries().iter().enumerate() {
        unigrams.push(ExpandedEntry {
            text: token.clone(),
            sources: vec![id as u32],
        });
        for next in continuations(base, predictor, cfg, token)? {
            let sources = vec![id as u32, next];
            bigrams.push(ExpandedEntry {
                text: render(&sources),
                sources,
            });
        }
    }
    let mut trigrams = Vec::with_capacity(n * m * m);
    for bigram in &bigrams {
        for next in continuations(base, predictor, cfg, &bigram.text)? {
            let mut sources = bigram.sources.clone();
            sources.push(next);
            trigrams.push(ExpandedEntry {
                text: render(&sources),
                sources,
            });
        }
    }

    let mut entries = unigrams;
    entries.append(&mut bigrams);
    entries.append(&mut trigrams);
    ExpandedVocabulary::new(entries)
}
