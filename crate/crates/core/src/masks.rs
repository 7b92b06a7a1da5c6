//! Binary masks from attribution maps, IoU, the all-pairs baseline and the
//! per-image separation record.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::daam::AttributionMap;
use crate::dump::{Manifest, StyleKind, Token, TokenSpan};

#[derive(Debug, Error, PartialEq)]
pub enum MaskError {
    #[error("fixed threshold must lie in [0, 1], got {0}")]
    FixedOutOfRange(f64),
    #[error("percentile must lie in (0, 1), got {0}")]
    PercentileOutOfRange(f64),
    #[error("cannot parse threshold policy {0:?} (expected fixed:<tau> or percentile:<p>)")]
    Parse(String),
    #[error("mask dims differ: {a_w}x{a_h} vs {b_w}x{b_h}")]
    DimensionMismatch { a_w: usize, a_h: usize, b_w: usize, b_h: usize },
    #[error("no attribution map for token {0}")]
    MissingTokenMap(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ThresholdKind {
    Fixed,
    Percentile,
}

impl ThresholdKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ThresholdKind::Fixed => "fixed",
            ThresholdKind::Percentile => "percentile",
        }
    }
}

/// How a continuous map becomes a mask: an absolute cutoff or a percentile
/// of the map's own value distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdPolicy {
    pub kind: ThresholdKind,
    pub value: f64,
}

impl ThresholdPolicy {
    pub fn fixed(tau: f64) -> Result<Self, MaskError> {
        if (0.0..=1.0).contains(&tau) {
            Ok(Self { kind: ThresholdKind::Fixed, value: tau })
        } else {
            Err(MaskError::FixedOutOfRange(tau))
        }
    }

    pub fn percentile(p: f64) -> Result<Self, MaskError> {
        if p > 0.0 && p < 1.0 {
            Ok(Self { kind: ThresholdKind::Percentile, value: p })
        } else {
            Err(MaskError::PercentileOutOfRange(p))
        }
    }

    pub fn check(&self) -> Result<(), MaskError> {
        match self.kind {
            ThresholdKind::Fixed => Self::fixed(self.value).map(|_| ()),
            ThresholdKind::Percentile => Self::percentile(self.value).map(|_| ()),
        }
    }

    /// Identity key usable for grouping (exact bit equality on the value).
    pub fn key(&self) -> (ThresholdKind, u64) {
        (self.kind, self.value.to_bits())
    }
}

impl fmt::Display for ThresholdPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.kind.as_str(), self.value)
    }
}

impl FromStr for ThresholdPolicy {
    type Err = MaskError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (kind, value) = s.split_once(':').ok_or_else(|| MaskError::Parse(s.into()))?;
        let value: f64 = value.trim().parse().map_err(|_| MaskError::Parse(s.into()))?;
        match kind.trim() {
            "fixed" => Self::fixed(value),
            "percentile" => Self::percentile(value),
            _ => Err(MaskError::Parse(s.into())),
        }
    }
}

/// The nine-point grid `0.1, 0.2, ..., 0.9`.
pub fn decile_grid() -> Vec<f64> {
    (1..=9).map(|k| k as f64 / 10.0).collect()
}

pub fn fixed_grid() -> Vec<ThresholdPolicy> {
    decile_grid().into_iter().map(|t| ThresholdPolicy { kind: ThresholdKind::Fixed, value: t }).collect()
}

pub fn percentile_grid() -> Vec<ThresholdPolicy> {
    decile_grid().into_iter().map(|p| ThresholdPolicy { kind: ThresholdKind::Percentile, value: p }).collect()
}

/// Order-statistic interpolation used to turn a percentile into a cutoff.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PercentileMethod {
    /// Linear interpolation at rank `(n - 1) p` between order statistics.
    Linear,
    /// As `Linear`, with the rank capped at `floor(n p)`. Identical to
    /// `Linear` whenever `n p` is integral; otherwise it keeps the support of
    /// `value >= cutoff` at or above `(1 - p) n`.
    #[default]
    LinearCapped,
}

impl PercentileMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            PercentileMethod::Linear => "linear",
            PercentileMethod::LinearCapped => "linear-capped",
        }
    }
}

/// Percentile `p` of already-sorted `sorted` values.
pub fn percentile_of_sorted(sorted: &[f64], p: f64, method: PercentileMethod) -> f64 {
    let n = sorted.len();
    assert!(n > 0, "percentile of empty sample");
    let mut rank = (n - 1) as f64 * p;
    if method == PercentileMethod::LinearCapped {
        rank = rank.min((n as f64 * p).floor());
    }
    let lo = rank.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = rank - lo as f64;
    let value = sorted[lo] + frac * (sorted[hi] - sorted[lo]);
    value.min(sorted[hi])
}

/// Dense bitset mask, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    pub width: usize,
    pub height: usize,
    words: Vec<u64>,
    pub policy: ThresholdPolicy,
    /// The cutoff actually applied (equals `policy.value` for fixed policies).
    pub cutoff: f64,
    pub support: usize,
    /// The source map was all-zero.
    pub degenerate: bool,
}

impl BinaryMask {
    pub fn from_bits(width: usize, height: usize, bits: &[bool], policy: ThresholdPolicy) -> Self {
        assert_eq!(bits.len(), width * height, "bit count must match dims");
        let mut words = vec![0u64; bits.len().div_ceil(64)];
        for (i, _) in bits.iter().enumerate().filter(|(_, b)| **b) {
            words[i / 64] |= 1 << (i % 64);
        }
        let support = words.iter().map(|w| w.count_ones() as usize).sum();
        Self { width, height, words, policy, cutoff: policy.value, support, degenerate: false }
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        let i = y * self.width + x;
        self.words[i / 64] >> (i % 64) & 1 == 1
    }

    pub fn bits(&self) -> Vec<bool> {
        (0..self.width * self.height).map(|i| self.words[i / 64] >> (i % 64) & 1 == 1).collect()
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.support == 0
    }
}

/// Thresholds `map` with `value >= cutoff`. Percentile cutoffs come from the
/// map's own values; a degenerate map under a percentile policy yields an
/// all-false mask flagged `degenerate`.
pub fn threshold_mask(map: &AttributionMap, policy: ThresholdPolicy, method: PercentileMethod) -> BinaryMask {
    let n = map.values.len();
    let cutoff = match policy.kind {
        ThresholdKind::Fixed => Some(policy.value),
        ThresholdKind::Percentile if map.degenerate => None,
        ThresholdKind::Percentile => {
            let mut sorted = map.values.clone();
            sorted.sort_by(f64::total_cmp);
            Some(percentile_of_sorted(&sorted, policy.value, method))
        }
    };
    let mut words = vec![0u64; n.div_ceil(64)];
    let mut support = 0;
    if let Some(cutoff) = cutoff {
        for (i, &v) in map.values.iter().enumerate() {
            if v >= cutoff {
                words[i / 64] |= 1 << (i % 64);
                support += 1;
            }
        }
    }
    BinaryMask {
        width: map.width,
        height: map.height,
        words,
        policy,
        cutoff: cutoff.unwrap_or(f64::NAN),
        support,
        degenerate: map.degenerate,
    }
}

/// Intersection and union pixel counts of two masks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Overlap {
    pub intersection: usize,
    pub union: usize,
}

impl Overlap {
    /// `None` when the union is empty.
    pub fn iou(&self) -> Option<f64> {
        (self.union > 0).then(|| self.intersection as f64 / self.union as f64)
    }
}

pub fn overlap(a: &BinaryMask, b: &BinaryMask) -> Result<Overlap, MaskError> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(MaskError::DimensionMismatch { a_w: a.width, a_h: a.height, b_w: b.width, b_h: b.height });
    }
    let (mut intersection, mut union) = (0usize, 0usize);
    for (x, y) in a.words.iter().zip(&b.words) {
        intersection += (x & y).count_ones() as usize;
        union += (x | y).count_ones() as usize;
    }
    Ok(Overlap { intersection, union })
}

/// `|a ∩ b| / |a ∪ b|`, or `None` for an empty union.
pub fn iou(a: &BinaryMask, b: &BinaryMask) -> Result<Option<f64>, MaskError> {
    Ok(overlap(a, b)?.iou())
}

/// Token indices paired against the components in the baseline: every
/// non-special token outside both spans. Stopwords stay in.
pub fn baseline_tokens(tokens: &[Token], content_span: TokenSpan, style_span: TokenSpan) -> Vec<usize> {
    tokens
        .iter()
        .enumerate()
        .filter(|(i, t)| !t.special && !content_span.contains(*i) && !style_span.contains(*i))
        .map(|(i, _)| i)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Baseline {
    /// Mean IoU over pairs with a non-empty union.
    pub miou: Option<f64>,
    /// Number of (component, token) pairs considered.
    pub n_pairs: usize,
    /// Pairs skipped because their union was empty.
    pub n_undefined: usize,
}

/// Mean IoU of every `(content, w)` and `(style, w)` pair over `others`.
/// The `(content, style)` pair itself is not part of the baseline.
pub fn baseline_miou(content: &BinaryMask, style: &BinaryMask, others: &[&BinaryMask]) -> Result<Baseline, MaskError> {
    let mut sum = 0.0;
    let mut defined = 0usize;
    let mut n_pairs = 0usize;
    for component in [content, style] {
        for other in others {
            n_pairs += 1;
            if let Some(v) = iou(component, other)? {
                sum += v;
                defined += 1;
            }
        }
    }
    Ok(Baseline { miou: (defined > 0).then(|| sum / defined as f64), n_pairs, n_undefined: n_pairs - defined })
}

/// Per-(image, policy) separation metrics. Field names double as the CSV
/// column names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeparationRecord {
    pub content: String,
    pub style: String,
    pub style_kind: StyleKind,
    pub template: u8,
    pub policy_kind: ThresholdKind,
    pub policy_value: f64,
    pub iou_cs: Option<f64>,
    pub miou_b: Option<f64>,
    pub delta: Option<f64>,
    pub support_c: usize,
    pub support_s: usize,
    pub n_pairs: usize,
    pub degenerate: bool,
}

pub const RECORD_COLUMNS: [&str; 13] = [
    "content",
    "style",
    "style_kind",
    "template",
    "policy_kind",
    "policy_value",
    "iou_cs",
    "miou_b",
    "delta",
    "support_c",
    "support_s",
    "n_pairs",
    "degenerate",
];

impl SeparationRecord {
    pub fn policy(&self) -> ThresholdPolicy {
        ThresholdPolicy { kind: self.policy_kind, value: self.policy_value }
    }

    /// Both metrics present.
    pub fn paired(&self) -> Option<(f64, f64)> {
        Some((self.iou_cs?, self.miou_b?))
    }
}

/// Maps one image contributes to its separation records.
#[derive(Debug, Clone, Copy)]
pub struct ImageMaps<'a> {
    pub content: &'a AttributionMap,
    pub style: &'a AttributionMap,
    /// `(token index, map)` for every baseline token.
    pub tokens: &'a [(usize, AttributionMap)],
}

/// IoU_CS, mIoU_B and Δ for one image under `policy`. Baseline pairs use the
/// component maps for the C and S side and per-token maps for the rest.
pub fn separation_record(
    maps: ImageMaps<'_>,
    manifest: &Manifest,
    policy: ThresholdPolicy,
    method: PercentileMethod,
) -> Result<SeparationRecord, MaskError> {
    let content = threshold_mask(maps.content, policy, method);
    let style = threshold_mask(maps.style, policy, method);
    let iou_cs = iou(&content, &style)?;

    let wanted = baseline_tokens(&manifest.tokens, manifest.content_span, manifest.style_span);
    let mut other_masks = Vec::with_capacity(wanted.len());
    for index in wanted {
        let map =
            maps.tokens.iter().find(|(i, _)| *i == index).map(|(_, m)| m).ok_or(MaskError::MissingTokenMap(index))?;
        other_masks.push(threshold_mask(map, policy, method));
    }
    let refs: Vec<&BinaryMask> = other_masks.iter().collect();
    let baseline = baseline_miou(&content, &style, &refs)?;

    let delta = match (baseline.miou, iou_cs) {
        (Some(b), Some(cs)) => Some(b - cs),
        _ => None,
    };
    Ok(SeparationRecord {
        content: manifest.content_label.clone(),
        style: manifest.style_label.clone(),
        style_kind: manifest.style_kind,
        template: manifest.template_id,
        policy_kind: policy.kind,
        policy_value: policy.value,
        iou_cs,
        miou_b: baseline.miou,
        delta,
        support_c: content.support,
        support_s: style.support,
        n_pairs: baseline.n_pairs,
        degenerate: content.degenerate || style.degenerate || iou_cs.is_none(),
    })
}
