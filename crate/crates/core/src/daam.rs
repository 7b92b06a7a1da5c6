//! Per-token attribution maps built from recorded cross-attention.
//!
//! Every record slice for a token is upsampled to image resolution with a
//! cubic-convolution kernel, clamped at zero, summed over all records in
//! double precision, then max-normalized to `[0, 1]`.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dump::{AttentionDump, Token, TokenSpan};

pub const DMAP_MAGIC: [u8; 4] = *b"DMAP";

#[derive(Debug, Error)]
pub enum DaamError {
    #[error("grid must be at least 1x1, got {width}x{height}")]
    EmptyGrid { width: usize, height: usize },
    #[error("grid data has {found} values, {width}x{height} needs {expected}")]
    GridLength { width: usize, height: usize, expected: usize, found: usize },
    #[error("cannot downsample {src_w}x{src_h} to {target_w}x{target_h}")]
    Downsample { src_w: usize, src_h: usize, target_w: usize, target_h: usize },
    #[error("cubic coefficient must be negative, got {0}")]
    InvalidCoefficient(f64),
    #[error("token index {token} out of range for {n_tokens} tokens")]
    TokenOutOfRange { token: usize, n_tokens: usize },
    #[error("dump contains no records")]
    EmptyDump,
    #[error("span {span} is empty")]
    EmptySpan { span: TokenSpan },
    #[error("span {span} touches special token {index}")]
    SpecialToken { span: TokenSpan, index: usize },
    #[error("raw map value {value} at index {index} is negative or non-finite")]
    InvalidRawValue { index: usize, value: f64 },
    #[error("malformed map file: {0}")]
    MapFormat(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}

/// Dense row-major 2D field of `f64`, indexed `data[y * width + x]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Grid {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self, DaamError> {
        if width == 0 || height == 0 {
            return Err(DaamError::EmptyGrid { width, height });
        }
        if data.len() != width * height {
            return Err(DaamError::GridLength { width, height, expected: width * height, found: data.len() });
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        assert!(width > 0 && height > 0, "grid dims must be positive");
        Self { width, height, data: vec![value; width * height] }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        assert!(width > 0 && height > 0, "grid dims must be positive");
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    fn add_assign(&mut self, other: &Grid) {
        debug_assert_eq!((self.width, self.height), (other.width, other.height));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Alignment {
    /// Sample centers at `(i + 0.5) * scale - 0.5`, the usual deep-learning
    /// convention for non-corner-aligned resizing.
    #[default]
    HalfPixelCenters,
}

/// Interpolation settings for bringing attention arrays to image resolution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UpsampleSpec {
    /// Cubic-convolution coefficient `a`; must be negative.
    pub cubic_coefficient: f64,
    pub alignment: Alignment,
    /// Clamp interpolation overshoot below zero before summation.
    pub clamp_negative: bool,
}

impl Default for UpsampleSpec {
    fn default() -> Self {
        Self { cubic_coefficient: -0.75, alignment: Alignment::HalfPixelCenters, clamp_negative: true }
    }
}

impl UpsampleSpec {
    pub fn check(&self) -> Result<(), DaamError> {
        if self.cubic_coefficient < 0.0 && self.cubic_coefficient.is_finite() {
            Ok(())
        } else {
            Err(DaamError::InvalidCoefficient(self.cubic_coefficient))
        }
    }
}

/// Cubic-convolution kernel weights for the four taps around fractional
/// offset `t`, at distances `1 + t`, `t`, `1 - t`, `2 - t`.
#[inline]
fn cubic_weights(t: f64, a: f64) -> [f64; 4] {
    let near = |x: f64| ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0;
    let far = |x: f64| ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a;
    [far(t + 1.0), near(t), near(1.0 - t), far(2.0 - t)]
}

/// Per-output-index taps along one axis: clamped source indices and weights.
#[derive(Debug, Clone)]
struct AxisTaps {
    index: Vec<[usize; 4]>,
    weight: Vec<[f64; 4]>,
}

impl AxisTaps {
    fn new(src: usize, dst: usize, a: f64) -> Self {
        let scale = src as f64 / dst as f64;
        let last = src as isize - 1;
        let mut index = Vec::with_capacity(dst);
        let mut weight = Vec::with_capacity(dst);
        for i in 0..dst {
            let center = (i as f64 + 0.5) * scale - 0.5;
            let base = center.floor();
            let t = center - base;
            let base = base as isize;
            let idx = [-1isize, 0, 1, 2].map(|o| (base + o).clamp(0, last) as usize);
            index.push(idx);
            weight.push(cubic_weights(t, a));
        }
        Self { index, weight }
    }
}

/// Separable upsampler with precomputed taps for one (source, target) shape.
#[derive(Debug, Clone)]
struct Upsampler {
    src_w: usize,
    src_h: usize,
    cols: AxisTaps,
    rows: AxisTaps,
    clamp_negative: bool,
}

impl Upsampler {
    fn new(
        src_w: usize,
        src_h: usize,
        target_w: usize,
        target_h: usize,
        spec: &UpsampleSpec,
    ) -> Result<Self, DaamError> {
        spec.check()?;
        if src_w == 0 || src_h == 0 {
            return Err(DaamError::EmptyGrid { width: src_w, height: src_h });
        }
        if target_w < src_w || target_h < src_h {
            return Err(DaamError::Downsample { src_w, src_h, target_w, target_h });
        }
        Ok(Self {
            src_w,
            src_h,
            cols: AxisTaps::new(src_w, target_w, spec.cubic_coefficient),
            rows: AxisTaps::new(src_h, target_h, spec.cubic_coefficient),
            clamp_negative: spec.clamp_negative,
        })
    }

    /// Upsamples `src` (row-major `src_w x src_h`) and adds the result into `acc`.
    fn accumulate(&self, src: &[f64], acc: &mut [f64], scratch: &mut Vec<f64>) {
        let target_w = self.cols.index.len();
        // Horizontal pass: src_h rows of target_w values.
        scratch.clear();
        scratch.reserve(self.src_h * target_w);
        for row in src.chunks_exact(self.src_w) {
            for (idx, w) in self.cols.index.iter().zip(&self.cols.weight) {
                scratch.push(w[0] * row[idx[0]] + w[1] * row[idx[1]] + w[2] * row[idx[2]] + w[3] * row[idx[3]]);
            }
        }
        // Vertical pass.
        for (out_row, (idx, w)) in acc.chunks_exact_mut(target_w).zip(self.rows.index.iter().zip(&self.rows.weight)) {
            let r0 = &scratch[idx[0] * target_w..][..target_w];
            let r1 = &scratch[idx[1] * target_w..][..target_w];
            let r2 = &scratch[idx[2] * target_w..][..target_w];
            let r3 = &scratch[idx[3] * target_w..][..target_w];
            for x in 0..target_w {
                let v = w[0] * r0[x] + w[1] * r1[x] + w[2] * r2[x] + w[3] * r3[x];
                out_row[x] += if self.clamp_negative { v.max(0.0) } else { v };
            }
        }
    }
}

/// Upsamples `grid` to `target_w x target_h`.
pub fn bicubic_upsample(grid: &Grid, target_w: usize, target_h: usize, spec: &UpsampleSpec) -> Result<Grid, DaamError> {
    let up = Upsampler::new(grid.width, grid.height, target_w, target_h, spec)?;
    let mut out = vec![0.0; target_w * target_h];
    up.accumulate(&grid.data, &mut out, &mut Vec::new());
    Grid::new(target_w, target_h, out)
}

/// Raw (unnormalized) aggregate for one token: the sum over every record of
/// its upsampled slice.
pub fn aggregate_token_map(dump: &AttentionDump, token_index: usize, spec: &UpsampleSpec) -> Result<Grid, DaamError> {
    Ok(aggregate_tokens(dump, &[token_index], spec)?.remove(0))
}

/// Raw aggregates for several tokens, in the order given.
pub fn aggregate_tokens(dump: &AttentionDump, tokens: &[usize], spec: &UpsampleSpec) -> Result<Vec<Grid>, DaamError> {
    spec.check()?;
    if dump.records.is_empty() {
        return Err(DaamError::EmptyDump);
    }
    let n_tokens = dump.n_tokens();
    if let Some(&token) = tokens.iter().find(|&&t| t >= n_tokens) {
        return Err(DaamError::TokenOutOfRange { token, n_tokens });
    }
    let (target_w, target_h) = (dump.image_width as usize, dump.image_height as usize);

    let mut upsamplers: HashMap<(usize, usize), Upsampler> = HashMap::new();
    for r in &dump.records {
        let shape = (r.width as usize, r.height as usize);
        if let std::collections::hash_map::Entry::Vacant(slot) = upsamplers.entry(shape) {
            slot.insert(Upsampler::new(shape.0, shape.1, target_w, target_h, spec)?);
        }
    }

    tokens
        .par_iter()
        .map(|&token| {
            let mut acc = vec![0.0; target_w * target_h];
            let mut scratch = Vec::new();
            if spec.clamp_negative {
                for r in &dump.records {
                    let up = &upsamplers[&(r.width as usize, r.height as usize)];
                    up.accumulate(&r.token_plane(token), &mut acc, &mut scratch);
                }
            } else {
                // Without clamping the map is linear in the records, so records
                // sharing a shape are summed first and upsampled once.
                let mut groups: Vec<((usize, usize), Vec<f64>)> = Vec::new();
                for r in &dump.records {
                    let shape = (r.width as usize, r.height as usize);
                    let plane = r.token_plane(token);
                    match groups.iter_mut().find(|(s, _)| *s == shape) {
                        Some((_, sum)) => sum.iter_mut().zip(&plane).for_each(|(a, b)| *a += b),
                        None => groups.push((shape, plane)),
                    }
                }
                for (shape, sum) in &groups {
                    upsamplers[shape].accumulate(sum, &mut acc, &mut scratch);
                }
            }
            Grid::new(target_w, target_h, acc)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "lowercase")]
pub enum MapSource {
    Token(usize),
    Span(TokenSpan),
    /// Loaded from a file or built by hand.
    External,
}

/// A max-normalized heatmap at image resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributionMap {
    pub source: MapSource,
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
    /// Set when the raw aggregate was identically zero.
    pub degenerate: bool,
}

impl AttributionMap {
    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    /// Wraps already-normalized values.
    pub fn from_normalized(width: usize, height: usize, values: Vec<f64>) -> Result<Self, DaamError> {
        let grid = Grid::new(width, height, values)?;
        for (index, &value) in grid.data.iter().enumerate() {
            if !(0.0..=1.0).contains(&value) {
                return Err(DaamError::InvalidRawValue { index, value });
            }
        }
        let degenerate = grid.data.iter().all(|&v| v == 0.0);
        Ok(Self { source: MapSource::External, width, height, values: grid.data, degenerate })
    }
}

/// Divides `raw` by its global maximum.
pub fn normalize_map(raw: &Grid) -> Result<AttributionMap, DaamError> {
    let mut max = 0.0f64;
    for (index, &value) in raw.data.iter().enumerate() {
        if !value.is_finite() || value < 0.0 {
            return Err(DaamError::InvalidRawValue { index, value });
        }
        max = max.max(value);
    }
    let (values, degenerate) = if max == 0.0 {
        (vec![0.0; raw.data.len()], true)
    } else {
        (raw.data.iter().map(|v| v / max).collect(), false)
    };
    Ok(AttributionMap { source: MapSource::External, width: raw.width, height: raw.height, values, degenerate })
}

/// Elementwise sum of raw aggregates, in slice order.
pub fn sum_raw(raws: &[&Grid]) -> Grid {
    let mut acc = raws[0].clone();
    for g in &raws[1..] {
        acc.add_assign(g);
    }
    acc
}

pub(crate) fn check_span(span: TokenSpan, tokens: &[Token], n_tokens: usize) -> Result<(), DaamError> {
    if span.is_empty() {
        return Err(DaamError::EmptySpan { span });
    }
    if span.end >= n_tokens {
        return Err(DaamError::TokenOutOfRange { token: span.end, n_tokens });
    }
    if let Some(index) = span.indices().find(|&i| tokens.get(i).is_some_and(|t| t.special)) {
        return Err(DaamError::SpecialToken { span, index });
    }
    Ok(())
}

/// One attribution map for a multi-token component: raw aggregates summed
/// over the span, normalized once.
pub fn fuse_span(
    dump: &AttentionDump,
    tokens: &[Token],
    span: TokenSpan,
    spec: &UpsampleSpec,
) -> Result<AttributionMap, DaamError> {
    check_span(span, tokens, dump.n_tokens())?;
    let indices: Vec<usize> = span.indices().collect();
    let raws = aggregate_tokens(dump, &indices, spec)?;
    let refs: Vec<&Grid> = raws.iter().collect();
    let mut map = normalize_map(&sum_raw(&refs))?;
    map.source = MapSource::Span(span);
    Ok(map)
}

/// Normalized map for one token.
pub fn token_map(dump: &AttentionDump, token: usize, spec: &UpsampleSpec) -> Result<AttributionMap, DaamError> {
    let mut map = normalize_map(&aggregate_token_map(dump, token, spec)?)?;
    map.source = MapSource::Token(token);
    Ok(map)
}

// ---------------------------------------------------------------------------
// Export
// ---------------------------------------------------------------------------

/// Writes `"DMAP" | u32 width | u32 height | width*height f32`, little-endian.
pub fn write_dmap<W: Write>(map: &AttributionMap, mut sink: W) -> Result<(), DaamError> {
    let mut buf = Vec::with_capacity(12 + 4 * map.values.len());
    buf.extend_from_slice(&DMAP_MAGIC);
    buf.extend_from_slice(&(map.width as u32).to_le_bytes());
    buf.extend_from_slice(&(map.height as u32).to_le_bytes());
    for &v in &map.values {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    sink.write_all(&buf)?;
    Ok(())
}

pub fn read_dmap<R: Read>(mut source: R) -> Result<AttributionMap, DaamError> {
    let mut bytes = Vec::new();
    source.read_to_end(&mut bytes)?;
    if bytes.len() < 12 || bytes[..4] != DMAP_MAGIC {
        return Err(DaamError::MapFormat("missing DMAP header".into()));
    }
    let width = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let height = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let payload = &bytes[12..];
    if payload.len() != 4 * width * height {
        return Err(DaamError::MapFormat(format!(
            "expected {} payload bytes for {width}x{height}, found {}",
            4 * width * height,
            payload.len()
        )));
    }
    let values = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
    AttributionMap::from_normalized(width, height, values)
}

pub fn write_dmap_file(map: &AttributionMap, path: impl AsRef<Path>) -> Result<(), DaamError> {
    write_dmap(map, std::io::BufWriter::new(std::fs::File::create(path)?))
}

pub fn read_dmap_file(path: impl AsRef<Path>) -> Result<AttributionMap, DaamError> {
    read_dmap(std::io::BufReader::new(std::fs::File::open(path)?))
}

/// 8-bit grayscale rendering, `round(255 * v)`.
pub fn map_to_gray(map: &AttributionMap) -> image::GrayImage {
    let pixels = map.values.iter().map(|v| (v * 255.0).round() as u8).collect();
    image::GrayImage::from_raw(map.width as u32, map.height as u32, pixels).expect("buffer length matches dims")
}

pub fn save_map_png(map: &AttributionMap, path: impl AsRef<Path>) -> Result<(), DaamError> {
    map_to_gray(map).save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}
