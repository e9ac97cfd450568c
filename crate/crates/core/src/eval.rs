//! Metrics and the run report.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codebook::EmbeddingTable;
use crate::llm::classify_exact_match;
use crate::numerics::Tensor;
use crate::protocol::{Codebook, RunReport};
use crate::tokenizer::TokenMap;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{0} needs at least one item")]
    Empty(&'static str),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("id {id} outside a codebook of {size}")]
    IdOutOfRange { id: u32, size: usize },
    #[error("invalid report: {0}")]
    Invalid(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Fraction of `(generated, label)` pairs that match exactly.
pub fn accuracy<S: AsRef<str>, L: AsRef<str>>(episodes: &[(S, L)]) -> Result<f64, EvalError> {
    if episodes.is_empty() {
        return Err(EvalError::Empty("accuracy"));
    }
    let hits = episodes
        .iter()
        .filter(|(g, l)| classify_exact_match(g.as_ref(), l.as_ref()))
        .count();
    Ok(hits as f64 / episodes.len() as f64)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Mean cosine similarity between an image embedding and each token's text
/// embedding. Zero vectors count as similarity 0.
pub fn clip_score<T: AsRef<[f64]>>(image: &[f64], tokens: &[T]) -> Result<f64, EvalError> {
    if tokens.is_empty() {
        return Err(EvalError::Empty("clip_score"));
    }
    let mut sum = 0.0;
    for t in tokens {
        let t = t.as_ref();
        if t.len() != image.len() {
            return Err(EvalError::Shape(format!(
                "token embedding of dim {} vs image dim {}",
                t.len(),
                image.len()
            )));
        }
        sum += cosine(image, t);
    }
    Ok(sum / tokens.len() as f64)
}

fn rows<'a>(table: &'a EmbeddingTable, ids: &[u32]) -> Result<Vec<&'a [f64]>, EvalError> {
    ids.iter()
        .map(|&id| {
            if (id as usize) < table.rows() {
                Ok(table.row(id as usize))
            } else {
                Err(EvalError::IdOutOfRange { id, size: table.rows() })
            }
        })
        .collect()
}

/// [`clip_score`] with token embeddings looked up by id.
pub fn clip_score_ids(image: &[f64], table: &EmbeddingTable, ids: &[u32]) -> Result<f64, EvalError> {
    clip_score(image, &rows(table, ids)?)
}

/// Rank-percentile score. This is a stand-in of our own, not a published
/// relative CLIP score: the share of `draws` random id sets of the same size
/// whose [`clip_score`] falls below that of `ids`, ties counting half.
pub fn rank_percentile_score(
    image: &[f64],
    table: &EmbeddingTable,
    ids: &[u32],
    draws: usize,
    seed: u64,
) -> Result<f64, EvalError> {
    if draws == 0 {
        return Err(EvalError::Empty("rank_percentile_score draws"));
    }
    let matched = clip_score_ids(image, table, ids)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut below = 0.0;
    let mut sample = vec![0u32; ids.len()];
    for _ in 0..draws {
        for s in sample.iter_mut() {
            *s = rng.gen_range(0..table.rows() as u32);
        }
        let score = clip_score_ids(image, table, &sample)?;
        if score < matched {
            below += 1.0;
        } else if score == matched {
            below += 0.5;
        }
    }
    Ok(below / draws as f64)
}

fn same_shape(a: &Tensor, b: &Tensor) -> Result<(), EvalError> {
    if a.shape() != b.shape() {
        return Err(EvalError::Shape(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    if a.numel() == 0 {
        return Err(EvalError::Empty("image comparison"));
    }
    Ok(())
}

pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64, EvalError> {
    same_shape(a, b)?;
    let s: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(s / a.numel() as f64)
}

pub fn mean_abs_error(a: &Tensor, b: &Tensor) -> Result<f64, EvalError> {
    same_shape(a, b)?;
    let s: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum();
    Ok(s / a.numel() as f64)
}

/// Peak signal-to-noise ratio in dB for pixels in `[0, 1]`; identical
/// images give `f64::INFINITY`.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64, EvalError> {
    let e = mse(a, b)?;
    Ok(if e == 0.0 { f64::INFINITY } else { -10.0 * e.log10() })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PsnrStats {
    /// Image pairs compared, identical ones included.
    pub count: usize,
    /// Pairs that were identical; left out of the finite statistics.
    pub identical: usize,
    pub mean: Option<f64>,
    pub min: Option<f64>,
    pub max: Option<f64>,
}

impl PsnrStats {
    pub fn from_values(values: &[f64]) -> Self {
        let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
        let (mean, min, max) = if finite.is_empty() {
            (None, None, None)
        } else {
            (
                Some(finite.iter().sum::<f64>() / finite.len() as f64),
                finite.iter().copied().reduce(f64::min),
                finite.iter().copied().reduce(f64::max),
            )
        };
        Self {
            count: values.len(),
            identical: values.len() - finite.len(),
            mean,
            min,
            max,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Utilization {
    pub codebook: Codebook,
    /// Occurrences of each id.
    pub histogram: Vec<u64>,
    pub total: u64,
    pub used: usize,
    /// `used / codebook size`.
    pub fraction: f64,
}

pub fn codebook_utilization(maps: &[TokenMap], codebook: Codebook, size: usize) -> Result<Utilization, EvalError> {
    if size == 0 {
        return Err(EvalError::Empty("codebook_utilization codebook"));
    }
    let mut histogram = vec![0u64; size];
    for map in maps {
        let ids = match codebook {
            Codebook::Global => &map.global_ids,
            Codebook::Local => &map.local_ids,
        };
        for &id in ids {
            *histogram
                .get_mut(id as usize)
                .ok_or(EvalError::IdOutOfRange { id, size })? += 1;
        }
    }
    let used = histogram.iter().filter(|&&c| c > 0).count();
    Ok(Utilization {
        codebook,
        total: histogram.iter().sum(),
        used,
        fraction: used as f64 / size as f64,
        histogram,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipStats {
    pub count: usize,
    pub mean: f64,
    /// Mean rank-percentile score, when computed.
    pub rank_percentile: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunMetadata {
    pub name: String,
    pub seed: u64,
    pub extra: BTreeMap<String, String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub metadata: RunMetadata,
    /// Accuracy per task name.
    pub accuracy: BTreeMap<String, f64>,
    pub clip: Option<ClipStats>,
    pub psnr: Option<PsnrStats>,
    pub utilization: Vec<Utilization>,
    pub runs: Vec<RunReport>,
}

impl EvalReport {
    pub fn validate(&self) -> Result<(), EvalError> {
        if let Some((task, a)) = self.accuracy.iter().find(|(_, a)| !(0.0..=1.0).contains(*a)) {
            return Err(EvalError::Invalid(format!("accuracy {a} for {task} outside [0, 1]")));
        }
        if let Some(p) = &self.psnr {
            if [p.mean, p.min, p.max].iter().flatten().any(|v| !v.is_finite()) {
                return Err(EvalError::Invalid("PSNR statistics must be finite".into()));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String, EvalError> {
        self.validate()?;
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self, EvalError> {
        let r: Self = serde_json::from_str(text)?;
        r.validate()?;
        Ok(r)
    }

    /// Human-readable summary, one `key: value` line per figure.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "run: {} (seed {})", self.metadata.name, self.metadata.seed);
        for (k, v) in &self.metadata.extra {
            let _ = writeln!(s, "  {k}: {v}");
        }
        for (task, a) in &self.accuracy {
            let _ = writeln!(s, "accuracy[{task}]: {a:.4}");
        }
        if let Some(c) = &self.clip {
            let _ = writeln!(s, "clip score: {:.4} over {} images", c.mean, c.count);
            if let Some(r) = c.rank_percentile {
                let _ = writeln!(s, "rank-percentile score (stand-in): {r:.4}");
            }
        }
        if let Some(p) = &self.psnr {
            let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.3} dB"));
            let _ = writeln!(
                s,
                "psnr: mean {} min {} max {} ({} pairs, {} identical)",
                fmt(p.mean),
                fmt(p.min),
                fmt(p.max),
                p.count,
                p.identical
            );
        }
        for u in &self.utilization {
            let _ = writeln!(
                s,
                "utilization[{:?}]: {}/{} ids used ({:.4}), {} tokens",
                u.codebook,
                u.used,
                u.histogram.len(),
                u.fraction,
                u.total
            );
        }
        for r in &self.runs {
            let _ = writeln!(
                s,
                "task {}: {} calls, {} exact, {} snapped, {} fallbacks, {:.1} ms",
                r.task, r.calls, r.exact, r.snapped, r.fallbacks, r.elapsed_ms
            );
        }
        s
    }
}

/// `id,count` rows with a header line.
pub fn histogram_csv(u: &Utilization) -> String {
    let mut s = String::from("id,count\n");
    for (i, c) in u.histogram.iter().enumerate() {
        let _ = writeln!(s, "{i},{c}");
    }
    s
}
