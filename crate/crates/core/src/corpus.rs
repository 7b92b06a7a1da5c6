//! Prompt corpus: four fixed templates crossed with content and style labels,
//! plus mapping of label character spans onto tokenizer output.

use std::collections::{BTreeSet, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dump::{GenerationConfig, Manifest, StyleKind, Token, TokenSpan};

const COCO80: &str = include_str!("../data/coco80.txt");
const WIKIART50: &str = include_str!("../data/wikiart50.tsv");

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("template id {0} is not one of 1, 2, 3, 4")]
    UnknownTemplate(u8),
    #[error("{role} label is empty")]
    EmptyLabel { role: &'static str },
    #[error("{role} label {label:?} contains a control character")]
    ControlCharacter { role: &'static str, label: String },
    #[error("duplicate {role} labels: {duplicates:?}")]
    DuplicateLabels { role: &'static str, duplicates: Vec<String> },
    #[error("{0} list is empty")]
    EmptyInput(&'static str),
    #[error("rendered prompt {0:?} occurs more than once")]
    DuplicatePrompt(String),
    #[error("line {line}: {message}")]
    ListFormat { line: usize, message: String },
    #[error("tokenization mismatch for {role} {label:?} at chars {start}..{end}: {reason}")]
    TokenizationMismatch { role: &'static str, label: String, start: usize, end: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Piece {
    Text(&'static str),
    Content,
    Style,
}

use Piece::{Content, Style, Text};

/// The four prompt templates, indexed by `template_id - 1`.
const TEMPLATES: [&[Piece]; 4] = [
    &[Text("a painting of a "), Content, Text(" in the "), Style, Text(" style")],
    &[Text("a "), Style, Text(" painting of a "), Content],
    &[Text("a "), Content, Text(" in the "), Style, Text(" style")],
    &[Text("a "), Content, Text(" with "), Style, Text(" style")],
];

pub const TEMPLATE_IDS: [u8; 4] = [1, 2, 3, 4];

/// Template text with `<CONTENT>` and `<STYLE>` placeholders.
pub fn template_text(template_id: u8) -> Result<String, CorpusError> {
    let pieces = template_pieces(template_id)?;
    Ok(pieces
        .iter()
        .map(|p| match p {
            Text(t) => t,
            Content => "<CONTENT>",
            Style => "<STYLE>",
        })
        .collect())
}

fn template_pieces(template_id: u8) -> Result<&'static [Piece], CorpusError> {
    TEMPLATES.get((template_id as usize).wrapping_sub(1)).copied().ok_or(CorpusError::UnknownTemplate(template_id))
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StyleDescriptor {
    pub label: String,
    pub kind: StyleKind,
}

/// Half-open character (Unicode scalar) range, serialized as `[start, end]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[usize; 2]", into = "[usize; 2]")]
pub struct CharSpan {
    pub start: usize,
    pub end: usize,
}

impl From<[usize; 2]> for CharSpan {
    fn from([start, end]: [usize; 2]) -> Self {
        Self { start, end }
    }
}

impl From<CharSpan> for [usize; 2] {
    fn from(s: CharSpan) -> Self {
        [s.start, s.end]
    }
}

/// Characters `span.start..span.end` of `text`.
pub fn char_slice(text: &str, span: CharSpan) -> String {
    text.chars().skip(span.start).take(span.end.saturating_sub(span.start)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub id: u64,
    pub template_id: u8,
    pub content_label: String,
    pub style_label: String,
    pub style_kind: StyleKind,
    pub prompt_text: String,
    pub content_char_span: CharSpan,
    pub style_char_span: CharSpan,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RenderOptions {
    /// Use "an" before labels starting with a vowel letter.
    pub fix_articles: bool,
}

fn check_label(label: &str, role: &'static str) -> Result<(), CorpusError> {
    if label.trim().is_empty() {
        return Err(CorpusError::EmptyLabel { role });
    }
    if label.chars().any(char::is_control) {
        return Err(CorpusError::ControlCharacter { role, label: label.into() });
    }
    Ok(())
}

fn starts_with_vowel(label: &str) -> bool {
    label.chars().next().is_some_and(|c| "aeiouAEIOU".contains(c))
}

/// Renders one prompt; the char spans are recorded during rendering and
/// re-checked by slicing.
pub fn render_prompt(
    template_id: u8,
    content_label: &str,
    style: &StyleDescriptor,
    options: RenderOptions,
) -> Result<PromptSpec, CorpusError> {
    let pieces = template_pieces(template_id)?;
    check_label(content_label, "content")?;
    check_label(&style.label, "style")?;

    let mut text = String::new();
    let mut chars = 0usize;
    let mut content_span = CharSpan { start: 0, end: 0 };
    let mut style_span = CharSpan { start: 0, end: 0 };
    for (i, piece) in pieces.iter().enumerate() {
        match piece {
            Text(t) => {
                let mut literal = (*t).to_owned();
                let next_label = match pieces.get(i + 1) {
                    Some(Content) => Some(content_label),
                    Some(Style) => Some(style.label.as_str()),
                    _ => None,
                };
                if options.fix_articles && next_label.is_some_and(starts_with_vowel) {
                    if literal == "a " {
                        literal = "an ".into();
                    } else if let Some(stem) = literal.strip_suffix(" a ") {
                        literal = format!("{stem} an ");
                    }
                }
                chars += literal.chars().count();
                text.push_str(&literal);
            }
            Content | Style => {
                let label = if *piece == Content { content_label } else { style.label.as_str() };
                let start = chars;
                chars += label.chars().count();
                text.push_str(label);
                let span = CharSpan { start, end: chars };
                if *piece == Content {
                    content_span = span;
                } else {
                    style_span = span;
                }
            }
        }
    }
    debug_assert_eq!(char_slice(&text, content_span), content_label);
    debug_assert_eq!(char_slice(&text, style_span), style.label);
    Ok(PromptSpec {
        id: 0,
        template_id,
        content_label: content_label.into(),
        style_label: style.label.clone(),
        style_kind: style.kind,
        prompt_text: text,
        content_char_span: content_span,
        style_char_span: style_span,
    })
}

fn duplicates<T: ToString>(items: impl IntoIterator<Item = T>) -> Vec<String> {
    let mut seen = HashSet::new();
    let mut dup = BTreeSet::new();
    for item in items {
        let item = item.to_string();
        if !seen.insert(item.clone()) {
            dup.insert(item);
        }
    }
    dup.into_iter().collect()
}

/// Full cross product in (template, content, style) order, ids `0..`.
pub fn generate_corpus(
    contents: &[String],
    styles: &[StyleDescriptor],
    templates: &[u8],
    options: RenderOptions,
) -> Result<Vec<PromptSpec>, CorpusError> {
    if contents.is_empty() {
        return Err(CorpusError::EmptyInput("content"));
    }
    if styles.is_empty() {
        return Err(CorpusError::EmptyInput("style"));
    }
    if templates.is_empty() {
        return Err(CorpusError::EmptyInput("template"));
    }
    for (role, dup) in [
        ("content", duplicates(contents)),
        ("style", duplicates(styles.iter().map(|s| &s.label))),
        ("template", duplicates(templates)),
    ] {
        if !dup.is_empty() {
            return Err(CorpusError::DuplicateLabels { role, duplicates: dup });
        }
    }

    let mut out = Vec::with_capacity(templates.len() * contents.len() * styles.len());
    let mut seen = HashSet::new();
    for &template in templates {
        for content in contents {
            for style in styles {
                let mut spec = render_prompt(template, content, style, options)?;
                spec.id = out.len() as u64;
                if !seen.insert(spec.prompt_text.clone()) {
                    return Err(CorpusError::DuplicatePrompt(spec.prompt_text));
                }
                out.push(spec);
            }
        }
    }
    Ok(out)
}

fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
}

/// One label per line; blank lines and `#` comments are skipped.
pub fn parse_content_list(text: &str) -> Vec<String> {
    content_lines(text).map(|(_, l)| l.trim().to_owned()).collect()
}

/// `label<TAB>kind` per line, kind being `artist` or `movement`.
pub fn parse_style_list(text: &str) -> Result<Vec<StyleDescriptor>, CorpusError> {
    content_lines(text)
        .map(|(line, l)| {
            let (label, kind) = l
                .split_once('\t')
                .ok_or_else(|| CorpusError::ListFormat { line, message: "expected label<TAB>kind".into() })?;
            let kind = kind.parse().map_err(|message| CorpusError::ListFormat { line, message })?;
            Ok(StyleDescriptor { label: label.trim().to_owned(), kind })
        })
        .collect()
}

/// The 80 MS-COCO object categories.
pub fn bundled_contents() -> Vec<String> {
    parse_content_list(COCO80)
}

/// The bundled 50 WikiArt descriptors (23 artists, 27 movements).
pub fn bundled_styles() -> Vec<StyleDescriptor> {
    parse_style_list(WIKIART50).expect("bundled style list is well-formed")
}

pub fn load_contents(path: impl AsRef<Path>) -> Result<Vec<String>, CorpusError> {
    Ok(parse_content_list(&std::fs::read_to_string(path)?))
}

pub fn load_styles(path: impl AsRef<Path>) -> Result<Vec<StyleDescriptor>, CorpusError> {
    parse_style_list(&std::fs::read_to_string(path)?)
}

/// Writes one JSON object per line.
pub fn write_index<W: std::io::Write>(specs: &[PromptSpec], mut sink: W) -> Result<(), CorpusError> {
    for spec in specs {
        serde_json::to_writer(&mut sink, spec)?;
        sink.write_all(b"\n")?;
    }
    sink.flush()?;
    Ok(())
}

pub fn read_index(text: &str) -> Result<Vec<PromptSpec>, CorpusError> {
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
}

// ---------------------------------------------------------------------------
// Token spans
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpanAnnotation {
    pub content_span: TokenSpan,
    pub style_span: TokenSpan,
}

fn locate(
    text: &str,
    tokens: &[Token],
    span: CharSpan,
    role: &'static str,
    label: &str,
) -> Result<TokenSpan, CorpusError> {
    let mismatch = |reason: String| CorpusError::TokenizationMismatch {
        role,
        label: label.into(),
        start: span.start,
        end: span.end,
        reason,
    };
    let mut first = None;
    let mut last = None;
    for (i, token) in tokens.iter().enumerate() {
        let Some([s, e]) = token.offsets else { continue };
        if token.special || e <= span.start || s >= span.end {
            continue;
        }
        if s < span.start || e > span.end {
            return Err(mismatch(format!("token {i} ({:?}) at chars {s}..{e} crosses the label boundary", token.text)));
        }
        first.get_or_insert(i);
        last = Some(i);
    }
    let (Some(first), Some(last)) = (first, last) else {
        return Err(mismatch("no token covers the label".into()));
    };
    let chars: Vec<char> = text.chars().collect();
    let mut covered = vec![false; span.end - span.start];
    for (i, token) in tokens.iter().enumerate().take(last + 1).skip(first) {
        match token.offsets {
            Some([s, e]) if !token.special => covered[s - span.start..e - span.start].fill(true),
            _ => return Err(mismatch(format!("token {i} ({:?}) inside the label has no offsets", token.text))),
        }
    }
    if let Some(gap) = covered
        .iter()
        .enumerate()
        .find(|(k, c)| !**c && !chars[span.start + k].is_whitespace())
        .map(|(k, _)| span.start + k)
    {
        return Err(mismatch(format!("character {gap} is not covered by any token")));
    }
    if !covered[0] || !covered[covered.len() - 1] {
        return Err(mismatch("tokens do not reach the label edges".into()));
    }
    Ok(TokenSpan::new(first, last))
}

/// Minimal token ranges covering the content and style labels exactly.
/// Whitespace between subtokens is allowed; a token straddling a label edge
/// is an error.
pub fn annotate_token_spans(spec: &PromptSpec, tokens: &[Token]) -> Result<SpanAnnotation, CorpusError> {
    Ok(SpanAnnotation {
        content_span: locate(&spec.prompt_text, tokens, spec.content_char_span, "content", &spec.content_label)?,
        style_span: locate(&spec.prompt_text, tokens, spec.style_char_span, "style", &spec.style_label)?,
    })
}

/// Whitespace word tokenizer with begin/end markers and optional padding,
/// used for synthetic fixtures and offline tests.
pub fn word_tokens(text: &str, padding: usize) -> Vec<Token> {
    let mut tokens = vec![Token::special("<|startoftext|>")];
    let mut start = None;
    let chars: Vec<char> = text.chars().collect();
    for (i, c) in chars.iter().chain(std::iter::once(&' ')).enumerate() {
        match (c.is_whitespace(), start) {
            (false, None) => start = Some(i),
            (true, Some(s)) => {
                tokens.push(Token::word(chars[s..i].iter().collect::<String>(), s, i));
                start = None;
            }
            _ => {}
        }
    }
    tokens.push(Token::special("<|endoftext|>"));
    tokens.extend((0..padding).map(|_| Token::special("<|pad|>")));
    tokens
}

/// Assembles a manifest from a rendered prompt and its tokenization.
pub fn build_manifest(
    spec: &PromptSpec,
    tokens: Vec<Token>,
    generation: GenerationConfig,
    dump_path: impl Into<String>,
) -> Result<Manifest, CorpusError> {
    let spans = annotate_token_spans(spec, &tokens)?;
    Ok(Manifest {
        prompt: spec.prompt_text.clone(),
        template_id: spec.template_id,
        tokens,
        content_span: spans.content_span,
        style_span: spans.style_span,
        content_label: spec.content_label.clone(),
        style_label: spec.style_label.clone(),
        style_kind: spec.style_kind,
        generation,
        dump_path: dump_path.into(),
        provenance: None,
    })
}
