use std::time::Instant;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{build_denoise_prompt, Lexicon, ProtocolError, Snap};
use crate::llm::LlmBackend;
use crate::tokenizer::TokenMap;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DenoiseTask {
    Inpaint,
    Outpaint,
    Deblur,
    Rotate,
    Shift,
}

impl DenoiseTask {
    pub const ALL: [DenoiseTask; 5] = [Self::Inpaint, Self::Outpaint, Self::Deblur, Self::Rotate, Self::Shift];

    pub fn name(self) -> &'static str {
        match self {
            Self::Inpaint => "inpaint",
            Self::Outpaint => "outpaint",
            Self::Deblur => "deblur",
            Self::Rotate => "rotate",
            Self::Shift => "shift",
        }
    }

    /// Inpainting and outpainting fill a mask; the rest translate a whole
    /// polluted map.
    pub fn is_mask(self) -> bool {
        matches!(self, Self::Inpaint | Self::Outpaint)
    }
}

/// Rectangle of grid cells, `rows × cols` starting at `(row, col)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskRect {
    pub row: usize,
    pub col: usize,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiseSpec {
    pub task: DenoiseTask,
    pub height: usize,
    pub width: usize,
    /// Number of corrupted example copies, S.
    pub copies: usize,
    /// Replacement ratio of the first copy, in percent.
    pub start_percent: usize,
    /// Ratio increment per copy, in percent.
    pub step_percent: usize,
    /// Context length.
    pub n: usize,
    /// Tokens predicted per call.
    pub m: usize,
    pub mask: Option<MaskRect>,
    /// Completion budget passed to the backend for each call.
    pub max_new_tokens: usize,
}

impl DenoiseSpec {
    /// Defaults for an `h × w` grid: centered `h/2 × w/2` mask for
    /// inpainting, bottom `h/2` rows for outpainting.
    pub fn for_grid(task: DenoiseTask, height: usize, width: usize) -> Self {
        let mask = match task {
            DenoiseTask::Inpaint => Some(MaskRect {
                row: height / 4,
                col: width / 4,
                rows: height / 2,
                cols: width / 2,
            }),
            DenoiseTask::Outpaint => Some(MaskRect {
                row: height - height / 2,
                col: 0,
                rows: height / 2,
                cols: width,
            }),
            _ => None,
        };
        Self {
            task,
            height,
            width,
            copies: 10,
            start_percent: 23,
            step_percent: 3,
            n: 16,
            m: 2,
            mask,
            max_new_tokens: 8,
        }
    }

    pub fn k_l(&self) -> usize {
        self.height * self.width
    }

    /// Replacement ratio of copy `s` (1-based), in percent.
    pub fn ratio_percent(&self, s: usize) -> usize {
        self.start_percent + self.step_percent * (s - 1)
    }

    /// Positions replaced in copy `s`: `floor(ratio · K_l)`.
    pub fn replaced_count(&self, s: usize) -> usize {
        self.ratio_percent(s) * self.k_l() / 100
    }

    pub fn validate(&self) -> Result<(), ProtocolError> {
        let fail = |m: String| Err(ProtocolError::Spec(m));
        if self.height == 0 || self.width == 0 {
            return fail("grid must be non-empty".into());
        }
        if self.m == 0 {
            return fail("m must be at least 1".into());
        }
        if self.max_new_tokens < self.m {
            return fail(format!(
                "max_new_tokens {} is smaller than m {}",
                self.max_new_tokens, self.m
            ));
        }
        if self.copies > 0 && self.ratio_percent(self.copies) > 100 {
            return fail(format!(
                "last copy would replace {}% of tokens",
                self.ratio_percent(self.copies)
            ));
        }
        match (self.task.is_mask(), self.mask) {
            (true, None) => return fail(format!("{} needs a mask", self.task.name())),
            (false, Some(_)) => return fail(format!("{} takes no mask", self.task.name())),
            (true, Some(r)) if r.row + r.rows > self.height || r.col + r.cols > self.width => {
                return fail(format!(
                    "mask {r:?} does not fit a {}x{} grid",
                    self.height, self.width
                ))
            }
            _ => {}
        }
        Ok(())
    }

    fn check_map(&self, map: &TokenMap) -> Result<(), ProtocolError> {
        if (map.height, map.width) != (self.height, self.width) {
            return Err(ProtocolError::Input(format!(
                "token map is {}x{}, spec expects {}x{}",
                map.height, map.width, self.height, self.width
            )));
        }
        Ok(())
    }
}

impl Default for DenoiseSpec {
    fn default() -> Self {
        Self::for_grid(DenoiseTask::Inpaint, 16, 16)
    }
}

/// `(position, replacement id)` pairs for every copy, drawn from one
/// ChaCha8 stream seeded with `seed`.
pub fn copy_replacements(
    spec: &DenoiseSpec,
    vocab_size: usize,
    seed: u64,
) -> Result<Vec<Vec<(usize, u32)>>, ProtocolError> {
    spec.validate()?;
    if vocab_size == 0 {
        return Err(ProtocolError::Spec("empty local vocabulary".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = spec.k_l();
    Ok((1..=spec.copies)
        .map(|s| {
            let positions = index::sample(&mut rng, k, spec.replaced_count(s)).into_vec();
            positions
                .into_iter()
                .map(|p| (p, rng.gen_range(0..vocab_size as u32)))
                .collect()
        })
        .collect())
}

fn apply(map: &TokenMap, repl: &[(usize, u32)]) -> TokenMap {
    let mut out = map.clone();
    for &(p, id) in repl {
        out.local_ids[p] = id;
    }
    out
}

pub fn make_copies(map: &TokenMap, spec: &DenoiseSpec, vocab_size: usize, seed: u64) -> Result<Vec<TokenMap>, ProtocolError> {
    spec.check_map(map)?;
    Ok(copy_replacements(spec, vocab_size, seed)?
        .iter()
        .map(|r| apply(map, r))
        .collect())
}

/// Copies of `polluted` and `clean` corrupted at identical positions with
/// identical ids.
pub fn make_paired_copies(
    polluted: &TokenMap,
    clean: &TokenMap,
    spec: &DenoiseSpec,
    vocab_size: usize,
    seed: u64,
) -> Result<Vec<(TokenMap, TokenMap)>, ProtocolError> {
    spec.check_map(polluted)?;
    spec.check_map(clean)?;
    Ok(copy_replacements(spec, vocab_size, seed)?
        .iter()
        .map(|r| (apply(polluted, r), apply(clean, r)))
        .collect())
}

/// Flattened positions covered by the spec's mask, ascending.
pub fn mask_positions(spec: &DenoiseSpec) -> Vec<usize> {
    let Some(r) = spec.mask else { return Vec::new() };
    (r.row..r.row + r.rows)
        .flat_map(|i| (r.col..r.col + r.cols).map(move |j| i * spec.width + j))
        .collect()
}

/// `floor(0.3 · k_l)` distinct positions, ascending.
pub fn random_mask(k_l: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = index::sample(&mut rng, k_l, 3 * k_l / 10).into_vec();
    v.sort_unstable();
    v
}

/// The map with every listed position set to id 0.
pub fn masked_input(map: &TokenMap, positions: &[usize]) -> TokenMap {
    let mut out = map.clone();
    for &p in positions {
        out.local_ids[p] = 0;
    }
    out
}

/// A run of contiguous masked positions filled by one call.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub start: usize,
    pub len: usize,
}

/// Splits ascending positions into raster-order runs of at most `m`.
pub fn plan_chunks(positions: &[usize], m: usize) -> Vec<Chunk> {
    let mut out: Vec<Chunk> = Vec::new();
    for &p in positions {
        match out.last_mut() {
            Some(c) if c.start + c.len == p && c.len < m => c.len += 1,
            _ => out.push(Chunk { start: p, len: 1 }),
        }
    }
    out
}

/// One translation call: context `[context_start, start + len)`, output
/// positions `[start, start + len)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub context_start: usize,
    pub start: usize,
    pub len: usize,
}

pub fn plan_translation(k_l: usize, n: usize, m: usize) -> Vec<Window> {
    (0..k_l)
        .step_by(m.max(1))
        .map(|start| Window {
            context_start: start.saturating_sub(n),
            start,
            len: m.min(k_l - start),
        })
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub task: String,
    pub calls: usize,
    /// Completion pieces that named a vocabulary entry exactly.
    pub exact: usize,
    /// Pieces mapped to a vocabulary entry by prefix matching.
    pub snapped: usize,
    /// Pieces missing or unmatched; the previous token was used instead.
    pub fallbacks: usize,
    pub elapsed_ms: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Restoration {
    pub map: TokenMap,
    pub report: RunReport,
}

/// Reads `want` ids from a completion. Unusable pieces repeat the id before
/// them (`prev` for the first).
fn parse_completion(text: &str, want: usize, lex: &Lexicon, prev: u32, report: &mut RunReport) -> Vec<u32> {
    let mut pieces = text.split_whitespace();
    let mut out = Vec::with_capacity(want);
    let mut last = prev;
    for _ in 0..want {
        let snap = match pieces.next() {
            None => Snap::Miss,
            Some(p) => match lex.snap(p) {
                Snap::Exact(id) => Snap::Exact(id),
                other => match p.strip_suffix('.').and_then(|t| lex.id_of(t)) {
                    Some(id) => Snap::Exact(id),
                    None => other,
                },
            },
        };
        let id = match snap {
            Snap::Exact(id) => {
                report.exact += 1;
                id
            }
            Snap::Nearest(id) => {
                report.snapped += 1;
                id
            }
            Snap::Miss => {
                report.fallbacks += 1;
                last
            }
        };
        out.push(id);
        last = id;
    }
    out
}

/// Fills `positions` (ascending, distinct) in raster order, `m` contiguous
/// tokens per call, each call conditioned on the `n` tokens before it with
/// earlier predictions substituted. Other positions are copied through.
pub fn run_restoration(
    map: &TokenMap,
    positions: &[usize],
    llm: &dyn LlmBackend,
    spec: &DenoiseSpec,
    local: &Lexicon,
    seed: u64,
) -> Result<Restoration, ProtocolError> {
    spec.check_map(map)?;
    if positions.windows(2).any(|w| w[0] >= w[1]) || positions.last().is_some_and(|&p| p >= map.k_l()) {
        return Err(ProtocolError::Input(
            "mask positions must be ascending, distinct and inside the grid".into(),
        ));
    }
    let start = Instant::now();
    let copies = make_copies(map, spec, local.len(), seed)?;
    let mut working = masked_input(map, positions).local_ids;
    let mut report = RunReport {
        task: spec.task.name().into(),
        ..Default::default()
    };
    for c in plan_chunks(positions, spec.m) {
        let ctx = c.start.saturating_sub(spec.n);
        let end = c.start + c.len;
        let examples: Vec<(Vec<u32>, Vec<u32>)> = copies
            .iter()
            .map(|s| (s.local_ids[ctx..c.start].to_vec(), s.local_ids[c.start..end].to_vec()))
            .collect();
        let prompt = build_denoise_prompt(local, c.len, &examples, &working[ctx..c.start])?;
        let text = llm.complete(&prompt.rendered, spec.max_new_tokens, None)?;
        report.calls += 1;
        let prev = if c.start > 0 { working[c.start - 1] } else { 0 };
        let ids = parse_completion(&text, c.len, local, prev, &mut report);
        working[c.start..end].copy_from_slice(&ids);
    }
    report.elapsed_ms = start.elapsed().as_secs_f64() * 1e3;
    Ok(Restoration {
        map: TokenMap {
            local_ids: working,
            ..map.clone()
        },
        report,
    })
}

/// Inpainting or outpainting with the spec's mask.
pub fn run_mask_restoration(
    map: &TokenMap,
    llm: &dyn LlmBackend,
    spec: &DenoiseSpec,
    local: &Lexicon,
    seed: u64,
) -> Result<Restoration, ProtocolError> {
    spec.validate()?;
    if !spec.task.is_mask() {
        return Err(ProtocolError::Spec(format!("{} is not a mask task", spec.task.name())));
    }
    run_restoration(map, &mask_positions(spec), llm, spec, local, seed)
}

/// Restores 30% of positions chosen at random by `seed`.
pub fn run_masked_restoration(
    map: &TokenMap,
    llm: &dyn LlmBackend,
    spec: &DenoiseSpec,
    local: &Lexicon,
    seed: u64,
) -> Result<Restoration, ProtocolError> {
    spec.check_map(map)?;
    let positions = random_mask(map.k_l(), seed);
    let mut r = run_restoration(map, &positions, llm, spec, local, seed)?;
    r.report.task = "masked30".into();
    Ok(r)
}

/// Deblurring, rotation or shift restoration. Example pairs come from
/// copies of `polluted` and `clean` corrupted identically; each call shows
/// `n + m` polluted tokens and asks for the clean tokens under the last `m`.
pub fn run_map_translation(
    polluted: &TokenMap,
    clean: &TokenMap,
    llm: &dyn LlmBackend,
    spec: &DenoiseSpec,
    local: &Lexicon,
    seed: u64,
) -> Result<Restoration, ProtocolError> {
    spec.validate()?;
    if spec.task.is_mask() {
        return Err(ProtocolError::Spec(format!("{} is a mask task", spec.task.name())));
    }
    let start = Instant::now();
    let pairs = make_paired_copies(polluted, clean, spec, local.len(), seed)?;
    let mut restored = polluted.local_ids.clone();
    let mut report = RunReport {
        task: spec.task.name().into(),
        ..Default::default()
    };
    for w in plan_translation(polluted.k_l(), spec.n, spec.m) {
        let end = w.start + w.len;
        let examples: Vec<(Vec<u32>, Vec<u32>)> = pairs
            .iter()
            .map(|(p, c)| {
                (
                    p.local_ids[w.context_start..end].to_vec(),
                    c.local_ids[w.start..end].to_vec(),
                )
            })
            .collect();
        let prompt = build_denoise_prompt(local, w.len, &examples, &polluted.local_ids[w.context_start..end])?;
        let text = llm.complete(&prompt.rendered, spec.max_new_tokens, None)?;
        report.calls += 1;
        let prev = if w.start > 0 { restored[w.start - 1] } else { 0 };
        let ids = parse_completion(&text, w.len, local, prev, &mut report);
        restored[w.start..end].copy_from_slice(&ids);
    }
    report.elapsed_ms = start.elapsed().as_secs_f64() * 1e3;
    Ok(Restoration {
        map: TokenMap {
            local_ids: restored,
            ..polluted.clone()
        },
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunk_planning() {
        assert_eq!(
            plan_chunks(&[0, 1, 2, 5, 7, 8], 2),
            [(0, 2), (2, 1), (5, 1), (7, 2)].map(|(start, len)| Chunk { start, len })
        );
        assert!(plan_chunks(&[], 2).is_empty());
    }

    #[test]
    fn window_planning() {
        let w = plan_translation(5, 2, 2);
        assert_eq!(w.len(), 3);
        assert_eq!(w[1], Window { context_start: 0, start: 2, len: 2 });
        assert_eq!(w[2], Window { context_start: 2, start: 4, len: 1 });
    }

    #[test]
    fn default_masks() {
        let s = DenoiseSpec::for_grid(DenoiseTask::Outpaint, 16, 16);
        let p = mask_positions(&s);
        assert_eq!((p.len(), p[0], *p.last().unwrap()), (128, 128, 255));
        let s = DenoiseSpec::for_grid(DenoiseTask::Inpaint, 16, 16);
        let p = mask_positions(&s);
        assert_eq!((p.len(), p[0], *p.last().unwrap()), (64, 4 * 16 + 4, 11 * 16 + 11));
    }

    #[test]
    fn spec_validation() {
        let mut s = DenoiseSpec::default();
        s.validate().unwrap();
        s.copies = 27;
        assert!(s.validate().is_err());
        let mut s = DenoiseSpec::default();
        s.mask = Some(MaskRect { row: 10, col: 0, rows: 8, cols: 1 });
        assert!(s.validate().is_err());
        assert!(DenoiseSpec { mask: None, ..DenoiseSpec::default() }.validate().is_err());
    }
}
