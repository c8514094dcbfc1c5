//! Hybrid semantic × kinematic retrieval over the training split.
//!
//! An entry's score against a prompt is its caption cosine similarity damped
//! by the relative length gap, `s = cos · exp(−λ·|l − L| / max(l, L))`.
//! Search is an exhaustive scan; at training-split scale that is cheap and
//! exactly testable.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::motion::{write_atomic, MotionSequence};
use crate::text::TextProvider;

pub const DEFAULT_LAMBDA: f64 = 0.1;
pub const DEFAULT_K: usize = 2;

const MAGIC: &[u8; 4] = b"RMIX";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalEntry {
    pub id: String,
    /// Unit-norm caption embedding, stored at file precision.
    pub text_emb: Vec<f32>,
    pub length: usize,
    pub motion_ref: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalIndex {
    pub entries: Vec<RetrievalEntry>,
    pub lambda: f64,
    pub fingerprint: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hit {
    pub id: String,
    pub motion_ref: String,
    pub length: usize,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalResult {
    pub ranked: Vec<Hit>,
    pub k: usize,
}

/// Length-gap kernel applied to a precomputed cosine.
pub fn hybrid_score(cos: f64, l_i: usize, l: usize, lambda: f64) -> f64 {
    let (a, b) = (l_i as f64, l as f64);
    let gamma = (a - b).abs() / a.max(b);
    cos * (-lambda * gamma).exp()
}

pub fn score(entry: &RetrievalEntry, query: &[f64], l: usize, lambda: f64) -> f64 {
    let cos: f64 = entry
        .text_emb
        .iter()
        .zip(query)
        .map(|(&e, &q)| f64::from(e) * q)
        .sum();
    hybrid_score(cos, entry.length, l, lambda)
}

/// Orders hits by descending score, then ascending id.
pub fn rank_order(a: &Hit, b: &Hit) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.id.cmp(&b.id))
}

/// One entry per (sequence, caption); entry ids are `{sequence id}#{caption index}`.
pub fn build_index(
    train: &[MotionSequence],
    provider: &TextProvider,
    lambda: f64,
) -> Result<RetrievalIndex> {
    if train.is_empty() {
        return Err(Error::Contract("cannot build an index from an empty training split".into()));
    }
    check_lambda(lambda)?;
    let mut entries = Vec::new();
    let mut dim = None;
    for seq in train {
        for (c, caption) in seq.captions.iter().enumerate() {
            let emb = provider.embed_sentence(caption).map_err(|e| Error::Provider {
                caption: caption.clone(),
                source: Box::new(e),
            })?;
            if *dim.get_or_insert(emb.dim()) != emb.dim() {
                return Err(Error::Dimension(format!(
                    "caption {caption:?} embedded to width {}, expected {}",
                    emb.dim(),
                    dim.unwrap()
                )));
            }
            entries.push(RetrievalEntry {
                id: format!("{}#{c}", seq.id),
                text_emb: emb.vector.iter().map(|&v| v as f32).collect(),
                length: seq.len(),
                motion_ref: seq.id.clone(),
            });
        }
    }
    let index = RetrievalIndex {
        entries,
        lambda,
        fingerprint: provider.fingerprint().to_string(),
    };
    index.check_ids()?;
    Ok(index)
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::Contract(format!("lambda must be finite and ≥ 0, got {lambda}")));
    }
    Ok(())
}

impl RetrievalIndex {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.entries.first().map(|e| e.text_emb.len())
    }

    fn check_ids(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.id.as_str()) {
                return Err(Error::Schema(format!("duplicate index entry id {}", e.id)));
            }
        }
        Ok(())
    }

    /// Refuses an index built by a different provider when `strict`.
    pub fn check_provider(&self, provider: &TextProvider, strict: bool) -> Result<()> {
        if strict && self.fingerprint != provider.fingerprint() {
            return Err(Error::FingerprintMismatch {
                expected: provider.fingerprint().to_string(),
                found: self.fingerprint.clone(),
            });
        }
        Ok(())
    }

    /// Top-`k` entries for a query embedding. Entries whose `motion_ref`
    /// equals `exclude` are skipped, and each motion appears at most once
    /// (its best-ranked caption wins).
    pub fn search(
        &self,
        query: &[f64],
        length: usize,
        k: usize,
        exclude: Option<&str>,
    ) -> Result<RetrievalResult> {
        if k == 0 {
            return Err(Error::Contract("k must be at least 1".into()));
        }
        if length == 0 {
            return Err(Error::Contract("expected length must be at least 1".into()));
        }
        if self.is_empty() {
            return Err(Error::EmptyIndex);
        }
        if self.dim() != Some(query.len()) {
            return Err(Error::Dimension(format!(
                "query has width {}, index entries have {}",
                query.len(),
                self.dim().unwrap_or(0)
            )));
        }
        let mut hits: Vec<Hit> = self
            .entries
            .iter()
            .filter(|e| Some(e.motion_ref.as_str()) != exclude)
            .map(|e| Hit {
                id: e.id.clone(),
                motion_ref: e.motion_ref.clone(),
                length: e.length,
                score: score(e, query, length, self.lambda),
            })
            .collect();
        hits.sort_by(rank_order);
        let mut seen = HashSet::new();
        hits.retain(|h| seen.insert(h.motion_ref.clone()));
        hits.truncate(k);
        Ok(RetrievalResult { ranked: hits, k })
    }

    pub fn retrieve(
        &self,
        provider: &TextProvider,
        prompt: &str,
        length: usize,
        k: usize,
    ) -> Result<RetrievalResult> {
        let q = provider.embed_sentence(prompt)?;
        self.search(&q.vector, length, k, None)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.lambda.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        let put_str = |out: &mut Vec<u8>, s: &str| {
            out.extend_from_slice(&(s.len() as u32).to_le_bytes());
            out.extend_from_slice(s.as_bytes());
        };
        for e in &self.entries {
            put_str(&mut out, &e.id);
            out.extend_from_slice(&(e.length as u32).to_le_bytes());
            out.extend_from_slice(&(e.text_emb.len() as u32).to_le_bytes());
            for v in &e.text_emb {
                out.extend_from_slice(&v.to_le_bytes());
            }
            put_str(&mut out, &e.motion_ref);
        }
        put_str(&mut out, &self.fingerprint);
        out
    }

    pub fn from_bytes(bytes: &[u8], file: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, file };
        if r.take(4)? != MAGIC {
            return Err(Error::Format(format!("{}: not a retrieval index (bad magic)", file.display())));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!(
                "{}: unsupported index version {version} (expected {VERSION})",
                file.display()
            )));
        }
        let lambda = f64::from_le_bytes(r.take(8)?.try_into().unwrap());
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(r.err(8, format!("invalid lambda {lambda}")));
        }
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 20));
        let mut dim = None;
        for _ in 0..count {
            let id = r.string()?;
            let length = r.u32()? as usize;
            if length == 0 {
                return Err(r.err(4, format!("entry {id} has zero length")));
            }
            let d = r.u32()? as usize;
            if *dim.get_or_insert(d) != d {
                return Err(r.err(4, format!("entry {id} has width {d}, expected {}", dim.unwrap())));
            }
            let raw = r.take(d.checked_mul(4).ok_or_else(|| r.err(4, "width overflow".into()))?)?;
            let text_emb = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let motion_ref = r.string()?;
            entries.push(RetrievalEntry {
                id,
                text_emb,
                length,
                motion_ref,
            });
        }
        let fingerprint = r.string()?;
        if r.pos != bytes.len() {
            return Err(r.err(0, format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let index = Self {
            entries,
            lambda,
            fingerprint,
        };
        index.check_ids()?;
        Ok(index)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    file: &'a Path,
}

impl<'a> Reader<'a> {
    fn err(&self, back: usize, message: String) -> Error {
        Error::Parse {
            file: self.file.to_path_buf(),
            offset: self.pos.saturating_sub(back) as u64,
            message,
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Parse {
                file: self.file.to_path_buf(),
                offset: self.bytes.len() as u64,
                message: format!("truncated: needed {n} bytes at offset {}", self.pos),
            }),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| self.err(n, "invalid UTF-8 string".into()))
    }
}
