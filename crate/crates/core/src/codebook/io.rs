//! The `V2LE` embedding file.
//!
//! ```text
//! magic      4 bytes  "V2LE"
//! version    u16      1
//! flags      u16      bits 0..8: entry kind (0 base vocabulary, 1 expanded
//!                     vocabulary, 2 feature rows); bit 8: provenance present
//! count      u64      number of entries / rows
//! dim        u32      embedding width
//! provenance u32 length + UTF-8            (only when flag bit 8 is set)
//! entries    per entry: u32 length + UTF-8 text;
//!            expanded entries add u8 arity + arity x u32 source ids
//! payload    count*dim f32, row-major
//! checksum   u64      FNV-1a 64 over the payload bytes
//! ```
//!
//! All integers and floats are little-endian. Values are stored as `f32`, so
//! a table survives a round trip bit-for-bit when its values are
//! `f32`-representable (every table read from disk is).

use std::fs;
use std::hash::Hasher;
use std::io::Write;
use std::path::Path;

use fnv::FnvHasher;

use super::{CodebookError, EmbeddingTable, ExpandedEntry, ExpandedVocabulary, Vocabulary};

pub const MAGIC: &[u8; 4] = b"V2LE";
pub const VERSION: u16 = 1;
const KIND_MASK: u16 = 0x00ff;
const FLAG_PROVENANCE: u16 = 0x0100;

/// What the rows of an embedding file are labelled with.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Entries {
    Base(Vocabulary),
    Expanded(ExpandedVocabulary),
    /// Per-row labels such as image names.
    Features(Vocabulary),
}

impl Entries {
    pub fn len(&self) -> usize {
        match self {
            Entries::Base(v) | Entries::Features(v) => v.len(),
            Entries::Expanded(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn kind(&self) -> u16 {
        match self {
            Entries::Base(_) => 0,
            Entries::Expanded(_) => 1,
            Entries::Features(_) => 2,
        }
    }

    /// Row labels as text.
    pub fn texts(&self) -> Vec<&str> {
        match self {
            Entries::Base(v) | Entries::Features(v) => v.entries().iter().map(String::as_str).collect(),
            Entries::Expanded(v) => v.texts().collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingFile {
    pub entries: Entries,
    pub table: EmbeddingTable,
    pub provenance: Option<String>,
}

pub fn payload_checksum(payload: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(payload);
    h.finish()
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

pub fn encode(entries: &Entries, table: &EmbeddingTable, provenance: Option<&str>) -> Result<Vec<u8>, CodebookError> {
    if entries.len() != table.rows() {
        return Err(CodebookError::Dimension(format!(
            "{} entries but {} embedding rows",
            entries.len(),
            table.rows()
        )));
    }
    let mut buf = Vec::with_capacity(32 + table.data().len() * 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let mut flags = entries.kind();
    if provenance.is_some() {
        flags |= FLAG_PROVENANCE;
    }
    buf.extend_from_slice(&flags.to_le_bytes());
    buf.extend_from_slice(&(table.rows() as u64).to_le_bytes());
    buf.extend_from_slice(&(table.dim() as u32).to_le_bytes());
    if let Some(p) = provenance {
        put_str(&mut buf, p);
    }
    match entries {
        Entries::Base(v) | Entries::Features(v) => {
            for e in v.entries() {
                put_str(&mut buf, e);
            }
        }
        Entries::Expanded(v) => {
            for e in v.entries() {
                put_str(&mut buf, &e.text);
                buf.push(e.arity() as u8);
                for s in &e.sources {
                    buf.extend_from_slice(&s.to_le_bytes());
                }
            }
        }
    }
    let start = buf.len();
    for &v in table.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let sum = payload_checksum(&buf[start..]);
    buf.extend_from_slice(&sum.to_le_bytes());
    Ok(buf)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CodebookError> {
        if self.bytes.len() - self.pos < n {
            return Err(CodebookError::Format(format!("truncated while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8, CodebookError> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16, CodebookError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32, CodebookError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64, CodebookError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn string(&mut self, what: &str) -> Result<String, CodebookError> {
        let len = self.u32(what)? as usize;
        let raw = self.take(len, what)?;
        String::from_utf8(raw.to_vec()).map_err(|_| CodebookError::Format(format!("{what} is not UTF-8")))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

pub fn decode(bytes: &[u8]) -> Result<EmbeddingFile, CodebookError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(CodebookError::Format("bad magic, not a V2LE file".into()));
    }
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(CodebookError::Format(format!("unsupported version {version}")));
    }
    let flags = r.u16("flags")?;
    let count = r.u64("entry count")? as usize;
    let dim = r.u32("dim")? as usize;
    let provenance = if flags & FLAG_PROVENANCE != 0 {
        Some(r.string("provenance")?)
    } else {
        None
    };
    let kind = flags & KIND_MASK;
    if kind > 2 {
        return Err(CodebookError::Format(format!("unknown entry kind {kind}")));
    }
    // every entry needs at least its length prefix
    if count > r.remaining() / 4 {
        return Err(CodebookError::Format(format!(
            "header claims {count} entries, file is too short"
        )));
    }
    let mut texts = Vec::with_capacity(count);
    let mut expanded = Vec::new();
    for i in 0..count {
        let text = r.string(&format!("entry {i}"))?;
        if kind == 1 {
            let arity = r.u8("arity")? as usize;
            let mut sources = Vec::with_capacity(arity);
            for _ in 0..arity {
                sources.push(r.u32("source id")?);
            }
            expanded.push(ExpandedEntry { text, sources });
        } else {
            texts.push(text);
        }
    }
    let payload_len = count
        .checked_mul(dim)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| CodebookError::Format("count x dim overflows".into()))?;
    if r.remaining() != payload_len + 8 {
        return Err(CodebookError::Dimension(format!(
            "header says {count}x{dim} ({payload_len} payload bytes) but {} bytes follow the entries",
            r.remaining().saturating_sub(8)
        )));
    }
    let payload = r.take(payload_len, "payload")?;
    let expected = r.u64("checksum")?;
    let actual = payload_checksum(payload);
    if expected != actual {
        return Err(CodebookError::Checksum { expected, actual });
    }
    let data: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    let table = EmbeddingTable::new(count, dim, data)?;
    let entries = match kind {
        0 => Entries::Base(Vocabulary::new(texts)?),
        1 => Entries::Expanded(ExpandedVocabulary::new(expanded)?),
        _ => Entries::Features(Vocabulary::new(texts)?),
    };
    Ok(EmbeddingFile {
        entries,
        table,
        provenance,
    })
}

/// Writes to a temporary sibling and renames into place.
pub fn save_embeddings(
    path: &Path,
    entries: &Entries,
    table: &EmbeddingTable,
    provenance: Option<&str>,
) -> Result<(), CodebookError> {
    let bytes = encode(entries, table, provenance)?;
    write_atomic(path, &bytes)
}

pub fn load_embeddings(path: &Path) -> Result<EmbeddingFile, CodebookError> {
    let bytes = fs::read(path)?;
    decode(&bytes)
}

/// Writes `bytes` to a temporary sibling of `path`, then renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CodebookError> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> (Entries, EmbeddingTable) {
        let v = Vocabulary::new(vec!["▁the".into(), "cat".into(), "ß".into()]).unwrap();
        let t = EmbeddingTable::new(3, 2, vec![0.5, -1.25, 3.0, 0.0, 1e-3f32 as f64, 7.0]).unwrap();
        (Entries::Base(v), t)
    }

    #[test]
    fn round_trip_with_provenance() {
        let (e, t) = sample();
        let bytes = encode(&e, &t, Some("clip-vit-l14@rev")).unwrap();
        let f = decode(&bytes).unwrap();
        assert_eq!(f.entries, e);
        assert_eq!(f.table, t);
        assert_eq!(f.provenance.as_deref(), Some("clip-vit-l14@rev"));
    }

    #[test]
    fn header_layout() {
        let (e, t) = sample();
        let bytes = encode(&e, &t, None).unwrap();
        assert_eq!(&bytes[..4], b"V2LE");
        assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), 1);
        assert_eq!(u16::from_le_bytes([bytes[6], bytes[7]]), 0);
        assert_eq!(u64::from_le_bytes(bytes[8..16].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(bytes[16..20].try_into().unwrap()), 2);
        assert_eq!(
            u32::from_le_bytes(bytes[20..24].try_into().unwrap()),
            "▁the".len() as u32
        );
    }

    #[test]
    fn corrupt_payload_fails_checksum() {
        let (e, t) = sample();
        let mut bytes = encode(&e, &t, None).unwrap();
        let n = bytes.len();
        bytes[n - 12] ^= 0x40;
        assert!(matches!(decode(&bytes), Err(CodebookError::Checksum { .. })));
    }

    #[test]
    fn truncated_and_mismatched_files() {
        let (e, t) = sample();
        let bytes = encode(&e, &t, None).unwrap();
        assert!(decode(&bytes[..bytes.len() - 3]).is_err());
        assert!(decode(&bytes[..10]).is_err());
        // bump dim in the header: payload no longer matches
        let mut bad = bytes.clone();
        bad[16] = 3;
        assert!(matches!(decode(&bad), Err(CodebookError::Dimension(_))));
        let mut magic = bytes;
        magic[0] = b'X';
        assert!(decode(&magic).is_err());
    }

    #[test]
    fn expanded_entries_keep_sources() {
        let ev = ExpandedVocabulary::new(vec![
            ExpandedEntry {
                text: "a".into(),
                sources: vec![0],
            },
            ExpandedEntry {
                text: "a b c".into(),
                sources: vec![0, 1, 2],
            },
        ])
        .unwrap();
        let t = EmbeddingTable::new(2, 1, vec![1.0, 2.0]).unwrap();
        let f = decode(&encode(&Entries::Expanded(ev.clone()), &t, None).unwrap()).unwrap();
        assert_eq!(f.entries, Entries::Expanded(ev));
    }
}
