//! Binary token-embedding corpora, label sidecars and pair manifests.
//!
//! Corpus layout (all integers little-endian):
//!
//! ```text
//! "PALT" | version u32 = 1 | modality u8 | D u32 | count u32
//! per sample: sample_id u32 | T u32 | grid_rows u32 | grid_cols u32 | T*D f32 (row-major)
//! ```
//!
//! Label sidecars share the framing under the magic `PALL`, with `D = 1`
//! and `T` signed 32-bit concept ids per sample in place of the float payload.

use std::fmt;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub const CORPUS_MAGIC: &[u8; 4] = b"PALT";
pub const LABELS_MAGIC: &[u8; 4] = b"PALL";
pub const FORMAT_VERSION: u32 = 1;

/// Concept id of background / noise tokens in label sidecars.
pub const BACKGROUND: i32 = -1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Modality {
    /// Patch-structured side (images).
    Vision,
    /// Sequence side (captions, prompts).
    Language,
}

impl Modality {
    pub fn tag(self) -> u8 {
        match self {
            Modality::Vision => 0,
            Modality::Language => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Modality::Vision),
            1 => Ok(Modality::Language),
            other => Err(Error::Format(format!("unknown modality tag {other}"))),
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::Vision => "vision",
            Modality::Language => "language",
        })
    }
}

/// One sample's frozen token embeddings, `T x D`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    tokens: Matrix,
    grid: Option<(usize, usize)>,
    sample_id: u32,
}

impl TokenSequence {
    pub fn new(sample_id: u32, tokens: Matrix, grid: Option<(usize, usize)>) -> Result<Self> {
        if tokens.rows() == 0 {
            return Err(Error::usage(format!("sample {sample_id}: sequence has no tokens")));
        }
        if tokens.cols() == 0 {
            return Err(Error::usage(format!("sample {sample_id}: token dimension is zero")));
        }
        if let Some((r, c)) = grid {
            if r * c != tokens.rows() {
                return Err(Error::usage(format!(
                    "sample {sample_id}: grid {r}x{c} does not cover {} tokens",
                    tokens.rows()
                )));
            }
        }
        if let Some(pos) = tokens.as_slice().iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "sample {sample_id}: non-finite value at token {}",
                pos / tokens.cols()
            )));
        }
        Ok(Self { tokens, grid, sample_id })
    }

    pub fn tokens(&self) -> &Matrix {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.tokens.cols()
    }

    pub fn grid(&self) -> Option<(usize, usize)> {
        self.grid
    }

    pub fn sample_id(&self) -> u32 {
        self.sample_id
    }

    /// Same sample with tokens reordered by `order` (grid dropped unless the order is the identity).
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        if order.len() != self.len() {
            return Err(Error::usage("permutation length does not match token count"));
        }
        let mut data = Vec::with_capacity(self.tokens.as_slice().len());
        for &t in order {
            data.extend_from_slice(self.tokens.row(t));
        }
        let identity = order.iter().enumerate().all(|(i, &t)| i == t);
        Self::new(
            self.sample_id,
            Matrix::from_vec(self.len(), self.dim(), data),
            if identity { self.grid } else { None },
        )
    }

    /// Collapses the sequence to its single mean token.
    pub fn mean_token(&self) -> Result<Self> {
        let d = self.dim();
        let mut mean = vec![0.0; d];
        for row in self.tokens.iter_rows() {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        let t = self.len() as f64;
        mean.iter_mut().for_each(|m| *m /= t);
        Self::new(self.sample_id, Matrix::from_vec(1, d, mean), None)
    }
}

/// An in-memory corpus: one modality, one embedding dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub modality: Modality,
    pub dim: usize,
    pub sequences: Vec<TokenSequence>,
}

impl Corpus {
    pub fn new(modality: Modality, sequences: Vec<TokenSequence>) -> Result<Self> {
        let dim = sequences.first().map_or(0, TokenSequence::dim);
        if let Some(bad) = sequences.iter().find(|s| s.dim() != dim) {
            return Err(Error::usage(format!(
                "mixed dimensions: sample {} has D={} but the corpus has D={dim}",
                bad.sample_id(),
                bad.dim()
            )));
        }
        Ok(Self { modality, dim, sequences })
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize, what: impl FnOnce() -> String) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Corruption(format!("truncated payload while reading {}", what())));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, what: impl FnOnce() -> String) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn is_done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

struct Header {
    modality: Modality,
    dim: usize,
    count: usize,
}

fn read_header(cur: &mut Cursor<'_>, magic: &[u8; 4]) -> Result<Header> {
    let got = cur
        .take(4, || "magic".into())
        .map_err(|_| Error::Format("file too short for magic".into()))?;
    if got != magic {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(got),
            String::from_utf8_lossy(magic)
        )));
    }
    let hdr = |_: Error| Error::Format("truncated header".into());
    let version = cur.u32(String::new).map_err(hdr)?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let tag = cur.take(1, String::new).map_err(hdr)?[0];
    let modality = Modality::from_tag(tag)?;
    let dim = cur.u32(String::new).map_err(hdr)? as usize;
    let count = cur.u32(String::new).map_err(hdr)? as usize;
    Ok(Header { modality, dim, count })
}

fn write_header(out: &mut Vec<u8>, magic: &[u8; 4], modality: Modality, dim: usize, count: usize) {
    out.extend_from_slice(magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(modality.tag());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    out.extend_from_slice(&(count as u32).to_le_bytes());
}

struct SampleFrame {
    sample_id: u32,
    len: usize,
    grid: Option<(usize, usize)>,
}

fn read_frame(cur: &mut Cursor<'_>, index: usize, count: usize) -> Result<SampleFrame> {
    let label = || format!("sample {} of {count}", index + 1);
    let sample_id = cur.u32(label)?;
    let len = cur.u32(label)? as usize;
    let rows = cur.u32(label)? as usize;
    let cols = cur.u32(label)? as usize;
    let grid = match (rows, cols) {
        (0, 0) => None,
        (r, c) if r * c == len => Some((r, c)),
        (r, c) => {
            return Err(Error::Format(format!(
                "{}: grid {r}x{c} does not match T={len}",
                label()
            )))
        }
    };
    if len == 0 {
        return Err(Error::Format(format!("{}: T=0", label())));
    }
    Ok(SampleFrame { sample_id, len, grid })
}

fn write_frame(out: &mut Vec<u8>, sample_id: u32, len: usize, grid: Option<(usize, usize)>) {
    let (r, c) = grid.unwrap_or((0, 0));
    for v in [sample_id, len as u32, r as u32, c as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn decode_corpus(bytes: &[u8]) -> Result<Corpus> {
    let mut cur = Cursor::new(bytes);
    let header = read_header(&mut cur, CORPUS_MAGIC)?;
    if header.dim == 0 && header.count > 0 {
        return Err(Error::Format("D=0 with a non-empty corpus".into()));
    }
    let mut sequences = Vec::with_capacity(header.count.min(1 << 16));
    for i in 0..header.count {
        let frame = read_frame(&mut cur, i, header.count)?;
        let n = frame.len * header.dim;
        let payload = cur.take(n * 4, || format!("sample {} of {}", i + 1, header.count))?;
        let data: Vec<f64> = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "non-finite value in sample index {i} (id {}), token {}",
                frame.sample_id,
                pos / header.dim
            )));
        }
        let tokens = Matrix::from_vec(frame.len, header.dim, data);
        sequences.push(TokenSequence::new(frame.sample_id, tokens, frame.grid)?);
    }
    if !cur.is_done() {
        return Err(Error::Corruption(format!(
            "{} trailing bytes after {} samples",
            bytes.len() - cur.pos,
            header.count
        )));
    }
    Ok(Corpus { modality: header.modality, dim: header.dim, sequences })
}

/// Encodes in the canonical format. Values are narrowed to `f32`.
pub fn encode_corpus(modality: Modality, seqs: &[TokenSequence]) -> Result<Vec<u8>> {
    let corpus = Corpus::new(modality, seqs.to_vec())?;
    let payload: usize = seqs.iter().map(|s| 16 + 4 * s.len() * s.dim()).sum();
    let mut out = Vec::with_capacity(17 + payload);
    write_header(&mut out, CORPUS_MAGIC, modality, corpus.dim, seqs.len());
    for s in seqs {
        write_frame(&mut out, s.sample_id(), s.len(), s.grid());
        for v in s.tokens().as_slice() {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn read_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_corpus(&bytes)
}

pub fn write_corpus(path: impl AsRef<Path>, modality: Modality, seqs: &[TokenSequence]) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_corpus(modality, seqs)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Per-token concept ids for one corpus, aligned sample-by-sample.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSet {
    pub modality: Modality,
    pub samples: Vec<SampleLabels>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleLabels {
    pub sample_id: u32,
    pub grid: Option<(usize, usize)>,
    pub labels: Vec<i32>,
}

pub fn encode_labels(set: &LabelSet) -> Vec<u8> {
    let mut out = Vec::new();
    write_header(&mut out, LABELS_MAGIC, set.modality, 1, set.samples.len());
    for s in &set.samples {
        write_frame(&mut out, s.sample_id, s.labels.len(), s.grid);
        for l in &s.labels {
            out.extend_from_slice(&l.to_le_bytes());
        }
    }
    out
}

pub fn decode_labels(bytes: &[u8]) -> Result<LabelSet> {
    let mut cur = Cursor::new(bytes);
    let header = read_header(&mut cur, LABELS_MAGIC)?;
    if header.dim != 1 {
        return Err(Error::Format(format!("label sidecar must declare D=1, found {}", header.dim)));
    }
    let mut samples = Vec::with_capacity(header.count.min(1 << 16));
    for i in 0..header.count {
        let frame = read_frame(&mut cur, i, header.count)?;
        let payload = cur.take(frame.len * 4, || format!("sample {} of {}", i + 1, header.count))?;
        let labels = payload
            .chunks_exact(4)
            .map(|b| i32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        samples.push(SampleLabels { sample_id: frame.sample_id, grid: frame.grid, labels });
    }
    if !cur.is_done() {
        return Err(Error::Corruption("trailing bytes after label records".into()));
    }
    Ok(LabelSet { modality: header.modality, samples })
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<LabelSet> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_labels(&bytes)
}

pub fn write_labels(path: impl AsRef<Path>, set: &LabelSet) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_labels(set)).map_err(|e| Error::io(path, e))
}

pub fn format_pairs(pairs: &[(usize, usize)]) -> String {
    pairs.iter().map(|(a, b)| format!("{a}\t{b}\n")).collect()
}

pub fn parse_pairs(text: &str) -> Result<Vec<(usize, usize)>> {
    let mut pairs = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split('\t');
        let parse = |p: Option<&str>| -> Result<usize> {
            p.and_then(|s| s.trim().parse().ok()).ok_or_else(|| {
                Error::Format(format!("pair manifest line {}: expected `a<TAB>b`", lineno + 1))
            })
        };
        let a = parse(parts.next())?;
        let b = parse(parts.next())?;
        if parts.next().is_some() {
            return Err(Error::Format(format!("pair manifest line {}: extra fields", lineno + 1)));
        }
        pairs.push((a, b));
    }
    Ok(pairs)
}

pub fn read_pairs(path: impl AsRef<Path>) -> Result<Vec<(usize, usize)>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_pairs(&text)
}

pub fn write_pairs(path: impl AsRef<Path>, pairs: &[(usize, usize)]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, format_pairs(pairs)).map_err(|e| Error::io(path, e))
}

/// Two corpora plus the matching between them.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedDataset {
    pub vision: Vec<TokenSequence>,
    pub language: Vec<TokenSequence>,
    pub pairs: Vec<(usize, usize)>,
    pub vision_labels: Option<Vec<Vec<i32>>>,
    pub language_labels: Option<Vec<Vec<i32>>>,
}

impl PairedDataset {
    pub fn new(
        vision: Vec<TokenSequence>,
        language: Vec<TokenSequence>,
        pairs: Vec<(usize, usize)>,
    ) -> Result<Self> {
        let ds = Self { vision, language, pairs, vision_labels: None, language_labels: None };
        ds.validate()?;
        Ok(ds)
    }

    pub fn with_labels(mut self, vision: Vec<Vec<i32>>, language: Vec<Vec<i32>>) -> Result<Self> {
        self.vision_labels = Some(vision);
        self.language_labels = Some(language);
        self.validate()?;
        Ok(self)
    }

    pub fn vision_dim(&self) -> usize {
        self.vision.first().map_or(0, TokenSequence::dim)
    }

    pub fn language_dim(&self) -> usize {
        self.language.first().map_or(0, TokenSequence::dim)
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// The vision and language sequences of pair `i`.
    pub fn pair(&self, i: usize) -> (&TokenSequence, &TokenSequence) {
        let (a, b) = self.pairs[i];
        (&self.vision[a], &self.language[b])
    }

    pub fn validate(&self) -> Result<()> {
        Corpus::new(Modality::Vision, self.vision.clone()).map(drop)?;
        Corpus::new(Modality::Language, self.language.clone()).map(drop)?;
        let mut seen = std::collections::HashSet::with_capacity(self.pairs.len());
        for &(a, b) in &self.pairs {
            if a >= self.vision.len() || b >= self.language.len() {
                return Err(Error::usage(format!(
                    "pair ({a}, {b}) out of range for {} vision / {} language samples",
                    self.vision.len(),
                    self.language.len()
                )));
            }
            if !seen.insert((a, b)) {
                return Err(Error::usage(format!("duplicate pair ({a}, {b})")));
            }
        }
        for (labels, seqs, name) in [
            (&self.vision_labels, &self.vision, "vision"),
            (&self.language_labels, &self.language, "language"),
        ] {
            if let Some(labels) = labels {
                if labels.len() != seqs.len()
                    || labels.iter().zip(seqs).any(|(l, s)| l.len() != s.len())
                {
                    return Err(Error::usage(format!("{name} labels do not match the corpus shape")));
                }
            }
        }
        Ok(())
    }

    /// Keeps only the listed pairs, dropping samples no pair references.
    pub fn subset(&self, pair_indices: &[usize]) -> Result<Self> {
        let mut vision = Vec::new();
        let mut language = Vec::new();
        let mut vl = self.vision_labels.as_ref().map(|_| Vec::new());
        let mut ll = self.language_labels.as_ref().map(|_| Vec::new());
        let mut pairs = Vec::with_capacity(pair_indices.len());
        for &i in pair_indices {
            let (a, b) = *self
                .pairs
                .get(i)
                .ok_or_else(|| Error::usage(format!("pair index {i} out of range")))?;
            vision.push(self.vision[a].clone());
            language.push(self.language[b].clone());
            if let (Some(out), Some(src)) = (vl.as_mut(), self.vision_labels.as_ref()) {
                out.push(src[a].clone());
            }
            if let (Some(out), Some(src)) = (ll.as_mut(), self.language_labels.as_ref()) {
                out.push(src[b].clone());
            }
            pairs.push((vision.len() - 1, language.len() - 1));
        }
        let ds = Self { vision, language, pairs, vision_labels: vl, language_labels: ll };
        ds.validate()?;
        Ok(ds)
    }
}

pub fn labels_to_set(modality: Modality, seqs: &[TokenSequence], labels: &[Vec<i32>]) -> LabelSet {
    LabelSet {
        modality,
        samples: seqs
            .iter()
            .zip(labels)
            .map(|(s, l)| SampleLabels { sample_id: s.sample_id(), grid: s.grid(), labels: l.clone() })
            .collect(),
    }
}
