//! Binary attention-dump format and its JSON manifest.
//!
//! A dump holds every cross-attention array recorded while generating one
//! image. Layout (all integers little-endian):
//!
//! ```text
//! "DAMX" | version u32 | image_width u32 | image_height u32 | n_tokens u32
//!        | record_count u32 | seed u64 | model_id (u16 length + UTF-8)
//! record_count x { layer_id u32 | timestep u32 | head u32 | height u32 | width u32
//!                  | height*width*n_tokens f32, row-major, token index fastest }
//! ```

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DUMP_MAGIC: [u8; 4] = *b"DAMX";
pub const DUMP_VERSION: u32 = 1;

/// Fixed-size part of the header, before the model id string.
const FIXED_HEADER_LEN: usize = 4 + 4 * 5 + 8;
const RECORD_HEADER_LEN: usize = 4 * 5;

/// One cross-attention array: a single (layer, timestep, head) observation.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord {
    pub layer_id: u32,
    pub timestep: u32,
    pub head: u32,
    pub height: u32,
    pub width: u32,
    pub n_tokens: u32,
    /// `height * width * n_tokens` values, token index fastest-varying.
    pub values: Vec<f32>,
}

impl AttentionRecord {
    pub fn key(&self) -> (u32, u32, u32) {
        (self.layer_id, self.timestep, self.head)
    }

    pub fn value_count(&self) -> usize {
        self.height as usize * self.width as usize * self.n_tokens as usize
    }

    /// Value at spatial position (x, y) for `token`.
    #[inline]
    pub fn at(&self, x: usize, y: usize, token: usize) -> f32 {
        let n = self.n_tokens as usize;
        self.values[(y * self.width as usize + x) * n + token]
    }

    /// Copies the `height x width` plane for one token into a row-major vector.
    pub fn token_plane(&self, token: usize) -> Vec<f64> {
        let n = self.n_tokens as usize;
        self.values.iter().skip(token).step_by(n).map(|&v| v as f64).collect()
    }
}

/// All records captured for one generated image.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionDump {
    pub image_width: u32,
    pub image_height: u32,
    pub model_id: String,
    pub seed: u64,
    pub records: Vec<AttentionRecord>,
}

impl AttentionDump {
    /// Token count shared by every record (0 when there are no records).
    pub fn n_tokens(&self) -> usize {
        self.records.first().map_or(0, |r| r.n_tokens as usize)
    }

    /// Exact encoded size in bytes.
    pub fn encoded_len(&self) -> u64 {
        let header = (FIXED_HEADER_LEN + 2 + self.model_id.len()) as u64;
        header + self.records.iter().map(|r| (RECORD_HEADER_LEN + 4 * r.value_count()) as u64).sum::<u64>()
    }

    /// Checks every structural and value invariant.
    pub fn check(&self) -> Result<(), DumpError> {
        if self.records.is_empty() {
            return Err(DumpError::NoRecords { offset: None });
        }
        if self.image_width == 0 || self.image_height == 0 {
            return Err(DumpError::InvalidHeader {
                offset: None,
                reason: format!("image dims must be positive, got {}x{}", self.image_width, self.image_height),
            });
        }
        if self.model_id.len() > u16::MAX as usize {
            return Err(DumpError::InvalidHeader {
                offset: None,
                reason: format!("model id is {} bytes, limit is {}", self.model_id.len(), u16::MAX),
            });
        }
        let n_tokens = self.records[0].n_tokens;
        let mut seen = HashSet::with_capacity(self.records.len());
        for r in &self.records {
            let (layer, timestep, head) = r.key();
            if r.n_tokens != n_tokens {
                return Err(DumpError::TokenCountMismatch {
                    layer,
                    timestep,
                    head,
                    expected: n_tokens,
                    found: r.n_tokens,
                });
            }
            if r.height == 0 || r.width == 0 || r.n_tokens == 0 {
                return Err(DumpError::InvalidShape {
                    offset: None,
                    layer,
                    timestep,
                    head,
                    height: r.height,
                    width: r.width,
                    n_tokens: r.n_tokens,
                });
            }
            if r.values.len() != r.value_count() {
                return Err(DumpError::PayloadLength {
                    layer,
                    timestep,
                    head,
                    expected: r.value_count(),
                    found: r.values.len(),
                });
            }
            if !seen.insert(r.key()) {
                return Err(DumpError::DuplicateRecord { offset: None, layer, timestep, head });
            }
            for (index, &value) in r.values.iter().enumerate() {
                if !value.is_finite() {
                    return Err(DumpError::NonFinite { offset: None, layer, timestep, head, index });
                }
                if !(0.0..=1.0).contains(&value) {
                    return Err(DumpError::OutOfRange { offset: None, layer, timestep, head, index, value });
                }
            }
        }
        Ok(())
    }
}

/// Coarse classification of [`DumpError`], one variant per failure mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DumpErrorKind {
    BadMagic,
    UnsupportedVersion,
    Truncated,
    TrailingBytes,
    InvalidHeader,
    InvalidUtf8,
    NoRecords,
    InvalidShape,
    DuplicateRecord,
    OutOfRange,
    NonFinite,
    TokenCountMismatch,
    PayloadLength,
    Io,
}

#[derive(Debug, Error)]
pub enum DumpError {
    #[error("bad magic at offset 0: expected \"DAMX\", found {found:?}")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported format version {version} at offset 4 (supported: {DUMP_VERSION})")]
    UnsupportedVersion { version: u32 },
    #[error("truncated at offset {offset}: need at least {expected} bytes, file has {actual}")]
    Truncated { offset: u64, expected: u64, actual: u64 },
    #[error("{extra} unexpected trailing bytes at offset {offset}")]
    TrailingBytes { offset: u64, extra: u64 },
    #[error("invalid header{}: {reason}", fmt_offset(*.offset))]
    InvalidHeader { offset: Option<u64>, reason: String },
    #[error("model id at offset {offset} is not valid UTF-8")]
    InvalidUtf8 { offset: u64 },
    #[error("dump has no records{}", fmt_offset(*.offset))]
    NoRecords { offset: Option<u64> },
    #[error(
        "record (layer {layer}, timestep {timestep}, head {head}){} has invalid shape {height}x{width}x{n_tokens}",
        fmt_offset(*.offset)
    )]
    InvalidShape { offset: Option<u64>, layer: u32, timestep: u32, head: u32, height: u32, width: u32, n_tokens: u32 },
    #[error("duplicate record (layer {layer}, timestep {timestep}, head {head}){}", fmt_offset(*.offset))]
    DuplicateRecord { offset: Option<u64>, layer: u32, timestep: u32, head: u32 },
    #[error(
        "value {value} outside [0, 1] in record (layer {layer}, timestep {timestep}, head {head}) at flat index {index}{}",
        fmt_offset(*.offset)
    )]
    OutOfRange { offset: Option<u64>, layer: u32, timestep: u32, head: u32, index: usize, value: f32 },
    #[error(
        "non-finite value in record (layer {layer}, timestep {timestep}, head {head}) at flat index {index}{}",
        fmt_offset(*.offset)
    )]
    NonFinite { offset: Option<u64>, layer: u32, timestep: u32, head: u32, index: usize },
    #[error("record (layer {layer}, timestep {timestep}, head {head}) has {found} tokens, dump has {expected}")]
    TokenCountMismatch { layer: u32, timestep: u32, head: u32, expected: u32, found: u32 },
    #[error("record (layer {layer}, timestep {timestep}, head {head}) holds {found} values, shape needs {expected}")]
    PayloadLength { layer: u32, timestep: u32, head: u32, expected: usize, found: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn fmt_offset(offset: Option<u64>) -> String {
    offset.map(|o| format!(" at offset {o}")).unwrap_or_default()
}

impl DumpError {
    pub fn kind(&self) -> DumpErrorKind {
        match self {
            DumpError::BadMagic { .. } => DumpErrorKind::BadMagic,
            DumpError::UnsupportedVersion { .. } => DumpErrorKind::UnsupportedVersion,
            DumpError::Truncated { .. } => DumpErrorKind::Truncated,
            DumpError::TrailingBytes { .. } => DumpErrorKind::TrailingBytes,
            DumpError::InvalidHeader { .. } => DumpErrorKind::InvalidHeader,
            DumpError::InvalidUtf8 { .. } => DumpErrorKind::InvalidUtf8,
            DumpError::NoRecords { .. } => DumpErrorKind::NoRecords,
            DumpError::InvalidShape { .. } => DumpErrorKind::InvalidShape,
            DumpError::DuplicateRecord { .. } => DumpErrorKind::DuplicateRecord,
            DumpError::OutOfRange { .. } => DumpErrorKind::OutOfRange,
            DumpError::NonFinite { .. } => DumpErrorKind::NonFinite,
            DumpError::TokenCountMismatch { .. } => DumpErrorKind::TokenCountMismatch,
            DumpError::PayloadLength { .. } => DumpErrorKind::PayloadLength,
            DumpError::Io(_) => DumpErrorKind::Io,
        }
    }
}

/// Serializes `dump` and returns the number of bytes written.
pub fn write_dump<W: Write>(dump: &AttentionDump, mut sink: W) -> Result<u64, DumpError> {
    dump.check()?;
    let n_tokens = dump.n_tokens() as u32;

    let mut header = Vec::with_capacity(FIXED_HEADER_LEN + 2 + dump.model_id.len());
    header.extend_from_slice(&DUMP_MAGIC);
    for v in [DUMP_VERSION, dump.image_width, dump.image_height, n_tokens, dump.records.len() as u32] {
        header.extend_from_slice(&v.to_le_bytes());
    }
    header.extend_from_slice(&dump.seed.to_le_bytes());
    header.extend_from_slice(&(dump.model_id.len() as u16).to_le_bytes());
    header.extend_from_slice(dump.model_id.as_bytes());
    sink.write_all(&header)?;
    let mut written = header.len() as u64;

    let mut buf = Vec::new();
    for r in &dump.records {
        buf.clear();
        buf.reserve(RECORD_HEADER_LEN + 4 * r.values.len());
        for v in [r.layer_id, r.timestep, r.head, r.height, r.width] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for v in &r.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        sink.write_all(&buf)?;
        written += buf.len() as u64;
    }
    sink.flush()?;
    Ok(written)
}

pub fn write_dump_file(dump: &AttentionDump, path: impl AsRef<Path>) -> Result<u64, DumpError> {
    let file = File::create(path)?;
    write_dump(dump, BufWriter::new(file))
}

/// Parses a dump from `source`, validating every invariant.
pub fn read_dump<R: Read>(mut source: R) -> Result<AttentionDump, DumpError> {
    let mut bytes = Vec::new();
    source.read_to_end(&mut bytes)?;
    decode_dump(&bytes)
}

pub fn read_dump_file(path: impl AsRef<Path>) -> Result<AttentionDump, DumpError> {
    let file = File::open(path)?;
    read_dump(BufReader::new(file))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DumpError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let out = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(out)
            }
            None => Err(DumpError::Truncated {
                offset: self.pos as u64,
                expected: self.pos as u64 + n as u64,
                actual: self.bytes.len() as u64,
            }),
        }
    }

    fn u16(&mut self) -> Result<u16, DumpError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, DumpError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, DumpError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Parses an in-memory dump.
pub fn decode_dump(bytes: &[u8]) -> Result<AttentionDump, DumpError> {
    let mut cur = Cursor { bytes, pos: 0 };

    let magic = cur.take(4).map_err(|_| {
        let mut found = [0u8; 4];
        found[..bytes.len().min(4)].copy_from_slice(&bytes[..bytes.len().min(4)]);
        DumpError::BadMagic { found }
    })?;
    if magic != DUMP_MAGIC {
        return Err(DumpError::BadMagic { found: magic.try_into().unwrap() });
    }
    let version = cur.u32()?;
    if version != DUMP_VERSION {
        return Err(DumpError::UnsupportedVersion { version });
    }
    let dims_offset = cur.pos as u64;
    let image_width = cur.u32()?;
    let image_height = cur.u32()?;
    if image_width == 0 || image_height == 0 {
        return Err(DumpError::InvalidHeader {
            offset: Some(dims_offset),
            reason: format!("image dims must be positive, got {image_width}x{image_height}"),
        });
    }
    let tokens_offset = cur.pos as u64;
    let n_tokens = cur.u32()?;
    if n_tokens == 0 {
        return Err(DumpError::InvalidHeader {
            offset: Some(tokens_offset),
            reason: "n_tokens must be positive".into(),
        });
    }
    let count_offset = cur.pos as u64;
    let record_count = cur.u32()?;
    if record_count == 0 {
        return Err(DumpError::NoRecords { offset: Some(count_offset) });
    }
    let seed = cur.u64()?;
    let id_len = cur.u16()? as usize;
    let id_offset = cur.pos as u64;
    let model_id =
        std::str::from_utf8(cur.take(id_len)?).map_err(|_| DumpError::InvalidUtf8 { offset: id_offset })?.to_owned();

    let mut records = Vec::with_capacity(record_count as usize);
    let mut seen = HashSet::with_capacity(record_count as usize);
    for _ in 0..record_count {
        let record_offset = cur.pos as u64;
        let layer_id = cur.u32()?;
        let timestep = cur.u32()?;
        let head = cur.u32()?;
        let height = cur.u32()?;
        let width = cur.u32()?;
        if height == 0 || width == 0 {
            return Err(DumpError::InvalidShape {
                offset: Some(record_offset),
                layer: layer_id,
                timestep,
                head,
                height,
                width,
                n_tokens,
            });
        }
        if !seen.insert((layer_id, timestep, head)) {
            return Err(DumpError::DuplicateRecord { offset: Some(record_offset), layer: layer_id, timestep, head });
        }
        let count = (height as usize)
            .checked_mul(width as usize)
            .and_then(|v| v.checked_mul(n_tokens as usize))
            .filter(|&v| v.checked_mul(4).is_some())
            .ok_or(DumpError::InvalidShape {
                offset: Some(record_offset),
                layer: layer_id,
                timestep,
                head,
                height,
                width,
                n_tokens,
            })?;
        let payload_offset = cur.pos;
        let payload = cur.take(count * 4)?;
        let mut values = Vec::with_capacity(count);
        for (index, chunk) in payload.chunks_exact(4).enumerate() {
            let value = f32::from_le_bytes(chunk.try_into().unwrap());
            if !value.is_finite() {
                return Err(DumpError::NonFinite {
                    offset: Some((payload_offset + 4 * index) as u64),
                    layer: layer_id,
                    timestep,
                    head,
                    index,
                });
            }
            if !(0.0..=1.0).contains(&value) {
                return Err(DumpError::OutOfRange {
                    offset: Some((payload_offset + 4 * index) as u64),
                    layer: layer_id,
                    timestep,
                    head,
                    index,
                    value,
                });
            }
            values.push(value);
        }
        records.push(AttentionRecord { layer_id, timestep, head, height, width, n_tokens, values });
    }
    if cur.pos != bytes.len() {
        return Err(DumpError::TrailingBytes { offset: cur.pos as u64, extra: (bytes.len() - cur.pos) as u64 });
    }
    Ok(AttentionDump { image_width, image_height, model_id, seed, records })
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StyleKind {
    Artist,
    Movement,
}

impl StyleKind {
    pub fn as_str(self) -> &'static str {
        match self {
            StyleKind::Artist => "artist",
            StyleKind::Movement => "movement",
        }
    }
}

impl std::str::FromStr for StyleKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "artist" => Ok(StyleKind::Artist),
            "movement" => Ok(StyleKind::Movement),
            other => Err(format!("unknown style kind {other:?} (expected artist or movement)")),
        }
    }
}

/// Inclusive token-index range, serialized as `[start, end]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[usize; 2]", into = "[usize; 2]")]
pub struct TokenSpan {
    pub start: usize,
    pub end: usize,
}

impl TokenSpan {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn single(index: usize) -> Self {
        Self { start: index, end: index }
    }

    pub fn is_empty(&self) -> bool {
        self.end < self.start
    }

    pub fn len(&self) -> usize {
        if self.is_empty() {
            0
        } else {
            self.end - self.start + 1
        }
    }

    pub fn contains(&self, index: usize) -> bool {
        self.start <= index && index <= self.end
    }

    pub fn indices(&self) -> std::ops::RangeInclusive<usize> {
        self.start..=self.end
    }

    pub fn overlaps(&self, other: &TokenSpan) -> bool {
        !self.is_empty() && !other.is_empty() && self.start <= other.end && other.start <= self.end
    }
}

impl From<[usize; 2]> for TokenSpan {
    fn from([start, end]: [usize; 2]) -> Self {
        Self { start, end }
    }
}

impl From<TokenSpan> for [usize; 2] {
    fn from(span: TokenSpan) -> Self {
        [span.start, span.end]
    }
}

impl std::fmt::Display for TokenSpan {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "[{}, {}]", self.start, self.end)
    }
}

/// A tokenizer output token. `offsets` is a half-open character range into
/// the prompt; special and padding tokens usually carry none.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub text: String,
    #[serde(default)]
    pub special: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub offsets: Option<[usize; 2]>,
}

impl Token {
    pub fn word(text: impl Into<String>, start: usize, end: usize) -> Self {
        Self { text: text.into(), special: false, offsets: Some([start, end]) }
    }

    pub fn special(text: impl Into<String>) -> Self {
        Self { text: text.into(), special: true, offsets: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub steps: u32,
    pub guidance: f64,
    pub model_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub prompt: String,
    pub template_id: u8,
    pub tokens: Vec<Token>,
    pub content_span: TokenSpan,
    pub style_span: TokenSpan,
    pub content_label: String,
    pub style_label: String,
    pub style_kind: StyleKind,
    pub generation: GenerationConfig,
    pub dump_path: String,
    /// What the recorded values are (e.g. post-softmax probabilities).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<String>,
}

impl Manifest {
    pub fn special_flags(&self) -> Vec<bool> {
        self.tokens.iter().map(|t| t.special).collect()
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self, ManifestError> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn to_json_file(&self, path: impl AsRef<Path>) -> Result<(), ManifestError> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n")?;
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("malformed manifest: {0}")]
    Json(#[from] serde_json::Error),
}

// ---------------------------------------------------------------------------
// Pair validation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpanRole {
    Content,
    Style,
}

impl std::fmt::Display for SpanRole {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SpanRole::Content => "content",
            SpanRole::Style => "style",
        })
    }
}

/// One inconsistency between a dump and its manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ValidationIssue {
    TokenCountMismatch { manifest_tokens: usize, dump_tokens: usize },
    InvalidTemplateId { template_id: u8 },
    EmptySpan { role: SpanRole, span: TokenSpan },
    SpanOutOfRange { role: SpanRole, span: TokenSpan, n_tokens: usize },
    OverlappingSpans { content: TokenSpan, style: TokenSpan },
    SpecialTokenInSpan { role: SpanRole, index: usize, token: String },
}

impl std::fmt::Display for ValidationIssue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ValidationIssue::TokenCountMismatch { manifest_tokens, dump_tokens } => {
                write!(f, "manifest lists {manifest_tokens} tokens but dump records {dump_tokens}")
            }
            ValidationIssue::InvalidTemplateId { template_id } => {
                write!(f, "template id {template_id} is not in 1..=4")
            }
            ValidationIssue::EmptySpan { role, span } => write!(f, "{role} span {span} is empty"),
            ValidationIssue::SpanOutOfRange { role, span, n_tokens } => {
                write!(f, "{role} span {span} out of range for {n_tokens} tokens")
            }
            ValidationIssue::OverlappingSpans { content, style } => {
                write!(f, "content span {content} overlaps style span {style}")
            }
            ValidationIssue::SpecialTokenInSpan { role, index, token } => {
                write!(f, "{role} span includes special token {index} ({token:?})")
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub issues: Vec<ValidationIssue>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.issues.is_empty()
    }
}

/// Lists every inconsistency between `dump` and `manifest`. Never fails.
pub fn validate_pair(dump: &AttentionDump, manifest: &Manifest) -> ValidationReport {
    let mut issues = Vec::new();
    let dump_tokens = dump.n_tokens();
    if manifest.tokens.len() != dump_tokens {
        issues.push(ValidationIssue::TokenCountMismatch { manifest_tokens: manifest.tokens.len(), dump_tokens });
    }
    if !(1..=4).contains(&manifest.template_id) {
        issues.push(ValidationIssue::InvalidTemplateId { template_id: manifest.template_id });
    }
    // Spans must fit both the manifest token list and the dump.
    let n_tokens = manifest.tokens.len().min(dump_tokens);
    let mut spans_usable = true;
    for (role, span) in [(SpanRole::Content, manifest.content_span), (SpanRole::Style, manifest.style_span)] {
        if span.is_empty() {
            issues.push(ValidationIssue::EmptySpan { role, span });
            spans_usable = false;
            continue;
        }
        if span.end >= n_tokens {
            issues.push(ValidationIssue::SpanOutOfRange { role, span, n_tokens });
        }
        for index in span.indices().take_while(|&i| i < manifest.tokens.len()) {
            let token = &manifest.tokens[index];
            if token.special {
                issues.push(ValidationIssue::SpecialTokenInSpan { role, index, token: token.text.clone() });
            }
        }
    }
    if spans_usable && manifest.content_span.overlaps(&manifest.style_span) {
        issues.push(ValidationIssue::OverlappingSpans { content: manifest.content_span, style: manifest.style_span });
    }
    ValidationReport { issues }
}
