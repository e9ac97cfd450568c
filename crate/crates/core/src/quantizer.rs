//! Quantization against frozen codebooks.
//!
//! Distances are squared Euclidean. The search computes
//! `|e|^2 - 2 q.e` with cached row norms to shortlist rows, then re-scores
//! the shortlist with the direct `sum((q - e)^2)`, so the returned ids and
//! distances are exactly those of a plain exhaustive scan.

use rand::Rng;
use thiserror::Error;

use crate::codebook::{CodebookError, EmbeddingTable};
use crate::numerics::{kernels, Graph, NodeId, NumericsError, Tensor};

#[derive(Debug, Error)]
pub enum QuantizeError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("non-finite feature value at query {0}")]
    NonFinite(usize),
    #[error("K_g = {k} is invalid for a codebook of {rows} rows")]
    InvalidK { k: usize, rows: usize },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Codebook(#[from] CodebookError),
}

/// Trainable linear map from text-embedding space into the encoder's
/// feature space. `weight` is `[d_l, dim_text]`, `bias` is `[d_l]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Projector {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Projector {
    /// Weight uniform in `±1/sqrt(dim_text)`, bias zero.
    pub fn init<R: Rng + ?Sized>(dim_text: usize, d_l: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (dim_text as f64).sqrt();
        Self {
            weight: Tensor::uniform(&[d_l, dim_text], -bound, bound, rng),
            bias: Tensor::zeros(&[d_l]),
        }
    }

    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self, QuantizeError> {
        match *weight.shape() {
            [o, _] if bias.shape() == [o] => Ok(Self { weight, bias }),
            _ => Err(QuantizeError::Dimension(format!(
                "projector weight {:?} with bias {:?}",
                weight.shape(),
                bias.shape()
            ))),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    /// Projects every row of `table`. The result is a derived, non-frozen
    /// table and must be recomputed whenever the weights change.
    pub fn project(&self, table: &EmbeddingTable) -> Result<EmbeddingTable, QuantizeError> {
        if table.dim() != self.in_dim() {
            return Err(QuantizeError::Dimension(format!(
                "table dim {} but projector expects {}",
                table.dim(),
                self.in_dim()
            )));
        }
        let out = kernels::linear(&table.to_tensor(), &self.weight, Some(&self.bias))?;
        Ok(EmbeddingTable::from_tensor(&out)?.into_derived())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantizationResult {
    pub token_ids: Vec<u32>,
    /// `[token_ids.len(), dim]`, row `i` is codebook row `token_ids[i]`.
    pub quantized: Tensor,
    /// Squared Euclidean distances.
    pub distances: Vec<f64>,
}

/// Direct squared distance; the reference every shortlist is scored with.
#[inline]
pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        acc += d * d;
    }
    acc
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// Minimum using independent lanes, which keeps the loop vectorizable.
fn lane_min(v: &[f64]) -> f64 {
    let mut lanes = [f64::INFINITY; 8];
    let chunks = v.chunks_exact(8);
    let rest = chunks.remainder();
    for c in chunks {
        for k in 0..8 {
            lanes[k] = if c[k] < lanes[k] { c[k] } else { lanes[k] };
        }
    }
    rest.iter().chain(&lanes).cloned().fold(f64::INFINITY, f64::min)
}

/// The `k`-th smallest value; a small sorted buffer for the usual small `k`.
fn kth_smallest(v: &[f64], k: usize) -> f64 {
    if k > 64 {
        let mut all = v.to_vec();
        return *all.select_nth_unstable_by(k - 1, |a, b| a.total_cmp(b)).1;
    }
    let mut buf: Vec<f64> = Vec::with_capacity(k + 1);
    for &x in v {
        if buf.len() == k {
            if x >= buf[k - 1] {
                continue;
            }
            buf.pop();
        }
        let pos = buf.partition_point(|&b| b <= x);
        buf.insert(pos, x);
    }
    buf[k - 1]
}

const QUERY_BLOCK: usize = 16;
const ROW_BLOCK: usize = 512;

/// A codebook with cached row norms and a dimension-major copy, ready for
/// repeated searches.
pub struct SearchIndex<'a> {
    table: &'a EmbeddingTable,
    norms: Vec<f64>,
    max_norm: f64,
    /// `columns[k * rows + r]` is component `k` of row `r`.
    columns: Vec<f64>,
}

impl<'a> SearchIndex<'a> {
    pub fn new(table: &'a EmbeddingTable) -> Self {
        let (rows, d) = (table.rows(), table.dim());
        let norms: Vec<f64> = (0..rows).map(|i| dot(table.row(i), table.row(i))).collect();
        let max_norm = norms.iter().cloned().fold(0.0, f64::max);
        let mut columns = vec![0.0; rows * d];
        for r in 0..rows {
            for (k, &v) in table.row(r).iter().enumerate() {
                columns[k * rows + r] = v;
            }
        }
        Self {
            table,
            norms,
            max_norm,
            columns,
        }
    }

    /// `out[j] = |e|^2 - 2 q.e` for rows `r0..r0 + out.len()`. Runs along
    /// rows so the inner loop vectorizes; only used for shortlisting.
    fn scores(&self, q: &[f64], r0: usize, out: &mut [f64]) {
        let rows = self.table.rows();
        let n = out.len();
        out.copy_from_slice(&self.norms[r0..r0 + n]);
        for (k, &qk) in q.iter().enumerate() {
            let m = -2.0 * qk;
            let col = &self.columns[k * rows + r0..][..n];
            for (o, &c) in out.iter_mut().zip(col) {
                *o += m * c;
            }
        }
    }

    pub fn table(&self) -> &EmbeddingTable {
        self.table
    }

    /// Bound on the rounding gap between the expanded and direct distance
    /// forms, with a wide safety margin.
    fn slack(&self, q_norm: f64) -> f64 {
        let d = self.table.dim() as f64;
        64.0 * (d + 2.0) * f64::EPSILON * (q_norm + self.max_norm + 1.0)
    }

    fn check(&self, queries: &[f64]) -> Result<usize, QuantizeError> {
        let d = self.table.dim();
        if queries.len() % d != 0 {
            return Err(QuantizeError::Dimension(format!(
                "{} feature values do not split into rows of codebook dim {d}",
                queries.len()
            )));
        }
        if let Some(pos) = queries.iter().position(|v| !v.is_finite()) {
            return Err(QuantizeError::NonFinite(pos / d));
        }
        Ok(queries.len() / d)
    }

    /// Nearest row for each `dim`-sized chunk of `queries`, with squared
    /// distances. Ties go to the lowest row index.
    pub fn nearest_many(&self, queries: &[f64]) -> Result<(Vec<u32>, Vec<f64>), QuantizeError> {
        let d = self.table.dim();
        let n = self.check(queries)?;
        let rows = self.table.rows();
        let mut ids = vec![0u32; n];
        let mut dists = vec![0.0; n];
        let mut block = vec![0.0; QUERY_BLOCK * ROW_BLOCK];
        let mut best = [f64::INFINITY; QUERY_BLOCK];
        let mut shortlist: Vec<Vec<(f64, usize)>> = vec![Vec::new(); QUERY_BLOCK];

        for q0 in (0..n).step_by(QUERY_BLOCK) {
            let qn = QUERY_BLOCK.min(n - q0);
            let slack: Vec<f64> = (0..qn)
                .map(|qi| {
                    let q = &queries[(q0 + qi) * d..][..d];
                    self.slack(dot(q, q))
                })
                .collect();
            best[..qn].fill(f64::INFINITY);
            shortlist[..qn].iter_mut().for_each(Vec::clear);
            for r0 in (0..rows).step_by(ROW_BLOCK) {
                let rn = ROW_BLOCK.min(rows - r0);
                // scores |e|^2 - 2 q.e for this tile
                for qi in 0..qn {
                    let q = &queries[(q0 + qi) * d..][..d];
                    self.scores(q, r0, &mut block[qi * ROW_BLOCK..][..rn]);
                }
                for qi in 0..qn {
                    let scores = &block[qi * ROW_BLOCK..][..rn];
                    let tile_min = lane_min(scores);
                    if tile_min < best[qi] {
                        best[qi] = tile_min;
                        let cut = tile_min + slack[qi];
                        shortlist[qi].retain(|&(s, _)| s <= cut);
                    }
                    let cut = best[qi] + slack[qi];
                    for (j, &s) in scores.iter().enumerate() {
                        if s <= cut {
                            shortlist[qi].push((s, r0 + j));
                        }
                    }
                }
            }
            for qi in 0..qn {
                let q = &queries[(q0 + qi) * d..][..d];
                let cut = best[qi] + slack[qi];
                // shortlist is in ascending row order, so strict `<` keeps the lowest index
                let mut pick = (f64::INFINITY, 0usize);
                for &(s, r) in &shortlist[qi] {
                    if s <= cut {
                        let exact = squared_distance(q, self.table.row(r));
                        if exact < pick.0 {
                            pick = (exact, r);
                        }
                    }
                }
                ids[q0 + qi] = pick.1 as u32;
                dists[q0 + qi] = pick.0;
            }
        }
        Ok((ids, dists))
    }

    /// The `k` nearest rows to `query`, ascending by distance then index.
    pub fn top_k(&self, query: &[f64], k: usize) -> Result<(Vec<u32>, Vec<f64>), QuantizeError> {
        let rows = self.table.rows();
        if k == 0 || k > rows {
            return Err(QuantizeError::InvalidK { k, rows });
        }
        if query.len() != self.table.dim() {
            return Err(QuantizeError::Dimension(format!(
                "query dim {} but codebook dim {}",
                query.len(),
                self.table.dim()
            )));
        }
        self.check(query)?;
        let mut scores = vec![0.0; rows];
        self.scores(query, 0, &mut scores);
        let cut = kth_smallest(&scores, k) + 2.0 * self.slack(dot(query, query));
        let mut shortlist: Vec<(f64, usize)> = scores
            .iter()
            .enumerate()
            .filter(|(_, &s)| s <= cut)
            .map(|(r, _)| (squared_distance(query, self.table.row(r)), r))
            .collect();
        shortlist.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        shortlist.truncate(k);
        Ok((
            shortlist.iter().map(|&(_, r)| r as u32).collect(),
            shortlist.iter().map(|&(s, _)| s).collect(),
        ))
    }

    fn gather(&self, ids: &[u32]) -> Tensor {
        let d = self.table.dim();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(self.table.row(i as usize));
        }
        Tensor::new(vec![ids.len(), d], out).expect("ids are non-empty and in range")
    }
}

/// Nearest codebook row for every feature vector. `features` may have any
/// shape whose last axis is the codebook dim (for example `[h, w, d_l]`);
/// one assignment is produced per vector, in row-major order.
pub fn quantize_local(features: &Tensor, codebook: &EmbeddingTable) -> Result<QuantizationResult, QuantizeError> {
    if features.shape().last() != Some(&codebook.dim()) {
        return Err(QuantizeError::Dimension(format!(
            "features {:?} vs codebook dim {}",
            features.shape(),
            codebook.dim()
        )));
    }
    let index = SearchIndex::new(codebook);
    let (token_ids, distances) = index.nearest_many(features.data())?;
    Ok(QuantizationResult {
        quantized: index.gather(&token_ids),
        token_ids,
        distances,
    })
}

/// The `k` codebook rows closest to a single feature vector, nearest first.
/// Builds a fresh [`SearchIndex`]; reuse one directly for many queries.
pub fn quantize_global(
    feature: &Tensor,
    codebook: &EmbeddingTable,
    k: usize,
) -> Result<QuantizationResult, QuantizeError> {
    let index = SearchIndex::new(codebook);
    let (token_ids, distances) = index.top_k(feature.data(), k)?;
    Ok(QuantizationResult {
        quantized: index.gather(&token_ids),
        token_ids,
        distances,
    })
}

/// Graph node whose value is the quantized vectors (reshaped to the shape
/// of `features`) and whose gradient flows to `features` unchanged.
pub fn straight_through(
    graph: &mut Graph,
    features: NodeId,
    result: &QuantizationResult,
) -> Result<NodeId, QuantizeError> {
    let shape = graph.value(features).shape().to_vec();
    let replacement = result.quantized.reshape(&shape).map_err(|_| {
        QuantizeError::Dimension(format!(
            "quantized {:?} vs features {:?}",
            result.quantized.shape(),
            shape
        ))
    })?;
    Ok(graph.straight_through(features, replacement)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(rows: usize, dim: usize, data: &[f64]) -> EmbeddingTable {
        EmbeddingTable::new(rows, dim, data.to_vec()).unwrap()
    }

    #[test]
    fn three_row_example() {
        let cb = table(3, 2, &[0.0, 0.0, 1.0, 0.0, 0.0, 1.0]);
        let q = Tensor::new(vec![1, 2], vec![0.9, 0.2]).unwrap();
        let r = quantize_local(&q, &cb).unwrap();
        assert_eq!(r.token_ids, vec![1]);
        assert!((r.distances[0] - 0.05).abs() < 1e-15);
    }

    #[test]
    fn exact_match_has_zero_distance() {
        let cb = table(3, 2, &[0.3, -0.7, 1.5, 2.5, 0.0, 1.0]);
        let q = Tensor::new(vec![2], vec![1.5, 2.5]).unwrap();
        let r = quantize_local(&q, &cb).unwrap();
        assert_eq!((r.token_ids[0], r.distances[0]), (1, 0.0));
        let g = quantize_global(&q, &cb, 1).unwrap();
        assert_eq!(g.token_ids, vec![1]);
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let cb = table(4, 1, &[1.0, -1.0, 1.0, -1.0]);
        let q = Tensor::new(vec![1, 1], vec![0.0]).unwrap();
        assert_eq!(quantize_local(&q, &cb).unwrap().token_ids, vec![0]);
        assert_eq!(quantize_global(&q, &cb, 3).unwrap().token_ids, vec![0, 1, 2]);
    }

    #[test]
    fn global_k_bounds() {
        let cb = table(2, 1, &[0.0, 1.0]);
        let q = Tensor::new(vec![1], vec![0.0]).unwrap();
        assert!(matches!(
            quantize_global(&q, &cb, 0),
            Err(QuantizeError::InvalidK { .. })
        ));
        assert!(matches!(
            quantize_global(&q, &cb, 3),
            Err(QuantizeError::InvalidK { .. })
        ));
    }

    #[test]
    fn non_finite_query_rejected() {
        let cb = table(2, 2, &[0.0; 4]);
        let q = Tensor::new(vec![2, 2], vec![0.0, 0.0, 1.0, 0.0]).unwrap();
        let mut bad = q.clone();
        bad.data_mut()[3] = f64::NAN;
        assert!(quantize_local(&q, &cb).is_ok());
        // Tensor::new accepts NaN; quantization must not
        assert!(matches!(quantize_local(&bad, &cb), Err(QuantizeError::NonFinite(1))));
    }

    #[test]
    fn projector_identity_and_bias_only() {
        let cb = table(2, 3, &[1.0, 2.0, 3.0, -1.0, 0.5, 0.0]);
        let eye = Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
        let p = Projector::new(eye, Tensor::zeros(&[3])).unwrap();
        let out = p.project(&cb).unwrap();
        assert_eq!(out.data(), cb.data());
        assert!(!out.is_frozen());
        let b = Tensor::new(vec![2], vec![0.25, -4.0]).unwrap();
        let p = Projector::new(Tensor::zeros(&[2, 3]), b).unwrap();
        let out = p.project(&cb).unwrap();
        assert_eq!(out.data(), &[0.25, -4.0, 0.25, -4.0]);
        assert!(p.project(&table(1, 2, &[0.0, 0.0])).is_err());
    }
}
