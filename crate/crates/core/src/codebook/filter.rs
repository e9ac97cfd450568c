use std::cmp::Ordering;
use std::collections::HashSet;

use super::{CodebookError, EmbeddingTable, ExpandedVocabulary};

/// The global codebook: filtered entries, their embeddings, and the rows of
/// the unfiltered table they came from.
#[derive(Clone, Debug, PartialEq)]
pub struct FilteredCodebook {
    pub vocab: ExpandedVocabulary,
    pub table: EmbeddingTable,
    pub source_rows: Vec<usize>,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Cosine similarity; a zero vector is treated as dissimilar to everything.
fn cosine(a: &[f64], na: f64, b: &[f64], nb: f64) -> f64 {
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}

/// `true` when `(sa, ia)` ranks ahead of `(sb, ib)`: higher similarity
/// first, lower index on ties.
fn ranks_before(sa: f64, ia: usize, sb: f64, ib: usize) -> bool {
    match sa.partial_cmp(&sb).unwrap_or(Ordering::Equal) {
        Ordering::Greater => true,
        Ordering::Less => false,
        Ordering::Equal => ia < ib,
    }
}

/// Indices of the `k` rows of `table` most cosine-similar to `query`, best
/// first, ties resolved by lower index.
pub fn cosine_top_k(query: &[f64], table: &EmbeddingTable, row_norms: &[f64], k: usize) -> Vec<usize> {
    let nq = norm(query);
    let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
    for i in 0..table.rows() {
        let s = cosine(query, nq, table.row(i), row_norms[i]);
        if best.len() == k {
            let (ws, wi) = best[k - 1];
            if !ranks_before(s, i, ws, wi) {
                continue;
            }
            best.pop();
        }
        let pos = best
            .iter()
            .position(|&(bs, bi)| ranks_before(s, i, bs, bi))
            .unwrap_or(best.len());
        best.insert(pos, (s, i));
    }
    best.into_iter().map(|(_, i)| i).collect()
}

/// Keeps the union over images of each image's `top_k` entries by cosine
/// similarity, in order of first appearance.
pub fn filter_expanded(
    expanded: &ExpandedVocabulary,
    text_embeddings: &EmbeddingTable,
    image_embeddings: &EmbeddingTable,
    top_k: usize,
) -> Result<FilteredCodebook, CodebookError> {
    if text_embeddings.rows() != expanded.len() {
        return Err(CodebookError::Dimension(format!(
            "{} text embeddings for {} expanded entries",
            text_embeddings.rows(),
            expanded.len()
        )));
    }
    if text_embeddings.dim() != image_embeddings.dim() {
        return Err(CodebookError::Dimension(format!(
            "text embeddings have dim {}, image embeddings dim {}",
            text_embeddings.dim(),
            image_embeddings.dim()
        )));
    }
    if top_k == 0 {
        return Err(CodebookError::Invalid("top_k must be at least 1".into()));
    }
    let k = top_k.min(expanded.len());
    let row_norms: Vec<f64> = (0..text_embeddings.rows())
        .map(|i| norm(text_embeddings.row(i)))
        .collect();

    let mut seen = HashSet::new();
    let mut kept = Vec::new();
    for img in 0..image_embeddings.rows() {
        for idx in cosine_top_k(image_embeddings.row(img), text_embeddings, &row_norms, k) {
            if seen.insert(idx) {
                kept.push(idx);
            }
        }
    }

    let entries = kept.iter().map(|&i| expanded.entries()[i].clone()).collect();
    Ok(FilteredCodebook {
        vocab: ExpandedVocabulary::new(entries)?,
        table: text_embeddings.select_rows(&kept)?,
        source_rows: kept,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codebook::ExpandedEntry;

    fn expanded(n: usize) -> ExpandedVocabulary {
        ExpandedVocabulary::new(
            (0..n)
                .map(|i| ExpandedEntry {
                    text: format!("t{i}"),
                    sources: vec![i as u32],
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn exact_match_plus_index_ties() {
        // entry 2 is the image; the rest are orthogonal to it (similarity 0)
        let text = EmbeddingTable::new(
            4,
            3,
            vec![
                0.0, 1.0, 0.0, //
                0.0, 0.0, 1.0, //
                1.0, 0.0, 0.0, //
                0.0, 1.0, 1.0,
            ],
        )
        .unwrap();
        let image = EmbeddingTable::new(1, 3, vec![1.0, 0.0, 0.0]).unwrap();
        let out = filter_expanded(&expanded(4), &text, &image, 3).unwrap();
        assert_eq!(out.source_rows, vec![2, 0, 1]);
        assert_eq!(out.vocab.entries()[0].text, "t2");
        assert_eq!(out.table.row(0), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn dim_mismatch_rejected() {
        let text = EmbeddingTable::new(2, 3, vec![0.0; 6]).unwrap();
        let image = EmbeddingTable::new(1, 2, vec![0.0; 2]).unwrap();
        assert!(matches!(
            filter_expanded(&expanded(2), &text, &image, 1),
            Err(CodebookError::Dimension(_))
        ));
        let rows = EmbeddingTable::new(1, 2, vec![0.0; 2]).unwrap();
        assert!(filter_expanded(&expanded(2), &rows, &image, 1).is_err());
    }
}
