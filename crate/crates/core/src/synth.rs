//! Synthetic (manifest, dump) pairs whose separation metrics are known by
//! construction, for GPU-free end-to-end checks.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{self, CorpusError, RenderOptions, StyleDescriptor};
use crate::dump::{
    self, AttentionDump, AttentionRecord, DumpError, GenerationConfig, Manifest, ManifestError, StyleKind,
};
use crate::masks::{SeparationRecord, ThresholdKind, ThresholdPolicy};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid scene: {0}")]
    InvalidScene(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Dump(#[from] DumpError),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Half-open pixel rectangle at latent resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl Rect {
    pub fn new(x0: u32, y0: u32, x1: u32, y1: u32) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn area(&self) -> u64 {
        (self.x1.saturating_sub(self.x0)) as u64 * (self.y1.saturating_sub(self.y0)) as u64
    }

    pub fn intersect(&self, other: &Rect) -> Rect {
        Rect {
            x0: self.x0.max(other.x0),
            y0: self.y0.max(other.y0),
            x1: self.x1.min(other.x1).max(self.x0.max(other.x0)),
            y1: self.y1.min(other.y1).max(self.y0.max(other.y0)),
        }
    }

    fn contains(&self, x: u32, y: u32) -> bool {
        self.x0 <= x && x < self.x1 && self.y0 <= y && y < self.y1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "lowercase")]
pub enum Region {
    /// Constant `intensity` inside the rectangle.
    Rect { rect: Rect, intensity: f32 },
    /// Isotropic Gaussian bump peaking at `intensity`.
    Blob { cx: f32, cy: f32, sigma: f32, intensity: f32 },
}

impl Region {
    pub fn rect(x0: u32, y0: u32, x1: u32, y1: u32) -> Self {
        Region::Rect { rect: Rect::new(x0, y0, x1, y1), intensity: 1.0 }
    }

    fn intensity(&self) -> f32 {
        match *self {
            Region::Rect { intensity, .. } | Region::Blob { intensity, .. } => intensity,
        }
    }
}

/// Description of one synthetic image. `None` regions are uniform fields,
/// which normalize to a full-frame map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSceneSpec {
    pub image_width: u32,
    pub image_height: u32,
    /// Attention grid resolution; equal to the image dims unless set.
    #[serde(default)]
    pub latent_width: Option<u32>,
    #[serde(default)]
    pub latent_height: Option<u32>,
    pub template_id: u8,
    pub content: String,
    pub style: StyleDescriptor,
    pub content_region: Option<Region>,
    pub style_region: Option<Region>,
    /// Per baseline word, in prompt order; words past the end use `other_default`.
    #[serde(default)]
    pub other_regions: Vec<Option<Region>>,
    #[serde(default)]
    pub other_default: Option<Region>,
    /// Value outside a region.
    #[serde(default)]
    pub background: f32,
    /// Value of uniform fields.
    #[serde(default = "default_uniform")]
    pub uniform_level: f32,
    pub layers: u32,
    pub timesteps: u32,
    pub heads: u32,
    /// Amplitude of uniform noise added to every value before clamping.
    #[serde(default)]
    pub noise: f32,
    #[serde(default)]
    pub seed: u64,
    /// Special padding tokens appended after the end marker.
    #[serde(default = "default_padding")]
    pub padding: usize,
    /// Policy under which the expected record is computed.
    pub policy: ThresholdPolicy,
}

fn default_uniform() -> f32 {
    0.5
}

fn default_padding() -> usize {
    2
}

impl SyntheticSceneSpec {
    /// A scene with every token uniform; regions are filled in by the caller.
    pub fn base(width: u32, height: u32) -> Self {
        Self {
            image_width: width,
            image_height: height,
            latent_width: None,
            latent_height: None,
            template_id: 1,
            content: "giraffe".into(),
            style: StyleDescriptor { label: "Analytical Cubism".into(), kind: StyleKind::Movement },
            content_region: None,
            style_region: None,
            other_regions: Vec::new(),
            other_default: None,
            background: 0.0,
            uniform_level: default_uniform(),
            layers: 2,
            timesteps: 3,
            heads: 2,
            noise: 0.0,
            seed: 0,
            padding: default_padding(),
            policy: ThresholdPolicy { kind: ThresholdKind::Fixed, value: 0.4 },
        }
    }

    /// Content and style in disjoint halves, every other token uniform.
    pub fn disjoint(width: u32, height: u32) -> Self {
        let half = width / 2;
        Self {
            content_region: Some(Region::rect(0, 0, half, height)),
            style_region: Some(Region::rect(half, 0, width, height)),
            ..Self::base(width, height)
        }
    }

    /// Every analyzed token attends to the same rectangle.
    pub fn entangled(width: u32, height: u32) -> Self {
        let r = Region::rect(width / 4, height / 4, width - width / 4, height - height / 4);
        Self { content_region: Some(r), style_region: Some(r), other_default: Some(r), ..Self::base(width, height) }
    }

    /// Equal-size content and style rectangles sharing half their area.
    pub fn half_overlap(width: u32, height: u32) -> Self {
        let w = width / 2;
        let shift = w / 2;
        Self {
            content_region: Some(Region::rect(0, 0, w, height)),
            style_region: Some(Region::rect(shift, 0, shift + w, height)),
            ..Self::base(width, height)
        }
    }

    fn latent_dims(&self) -> (u32, u32) {
        (self.latent_width.unwrap_or(self.image_width), self.latent_height.unwrap_or(self.image_height))
    }

    pub fn check(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidScene(m));
        let (lw, lh) = self.latent_dims();
        if self.image_width == 0 || self.image_height == 0 || lw == 0 || lh == 0 {
            return bad("dims must be positive".into());
        }
        if lw > self.image_width || lh > self.image_height {
            return bad(format!("latent {lw}x{lh} exceeds image {}x{}", self.image_width, self.image_height));
        }
        if self.layers == 0 || self.timesteps == 0 || self.heads == 0 {
            return bad("layers, timesteps and heads must be positive".into());
        }
        if self.noise.is_nan() || self.noise < 0.0 {
            return bad(format!("noise amplitude must be >= 0, got {}", self.noise));
        }
        for v in [self.background, self.uniform_level] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("field level {v} outside [0, 1]"));
            }
        }
        self.policy.check().map_err(|e| SynthError::InvalidScene(e.to_string()))?;
        let regions = [self.content_region, self.style_region, self.other_default]
            .into_iter()
            .chain(self.other_regions.iter().copied())
            .flatten();
        for r in regions {
            match r {
                Region::Rect { rect, .. } => {
                    if rect.area() == 0 || rect.x1 > lw || rect.y1 > lh {
                        return bad(format!("rectangle {rect:?} empty or outside {lw}x{lh}"));
                    }
                }
                Region::Blob { cx, cy, sigma, .. } => {
                    if sigma.is_nan() || sigma <= 0.0 || cx < 0.0 || cy < 0.0 || cx >= lw as f32 || cy >= lh as f32 {
                        return bad(format!("blob centre ({cx}, {cy}) / sigma {sigma} invalid"));
                    }
                }
            }
            if !(r.intensity() > self.background && r.intensity() <= 1.0) {
                return bad(format!("region intensity {} must lie in (background, 1]", r.intensity()));
            }
        }
        Ok(())
    }
}

/// What a token's field looks like.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Field {
    Uniform(f32),
    Region(Region, f32),
}

impl Field {
    fn value(&self, x: u32, y: u32) -> f32 {
        match *self {
            Field::Uniform(v) => v,
            Field::Region(Region::Rect { rect, intensity }, bg) => {
                if rect.contains(x, y) {
                    intensity
                } else {
                    bg
                }
            }
            Field::Region(Region::Blob { cx, cy, sigma, intensity }, bg) => {
                let d2 = (x as f32 - cx).powi(2) + (y as f32 - cy).powi(2);
                bg + (intensity - bg) * (-d2 / (2.0 * sigma * sigma)).exp()
            }
        }
    }
}

/// Mask implied by a field at a fixed threshold, in closed form.
#[derive(Debug, Clone, Copy, PartialEq)]
enum MaskShape {
    Full,
    Rect(Rect),
}

impl MaskShape {
    fn area(&self, n: u64) -> u64 {
        match self {
            MaskShape::Full => n,
            MaskShape::Rect(r) => r.area(),
        }
    }

    fn intersection(&self, other: &MaskShape, n: u64) -> u64 {
        match (self, other) {
            (MaskShape::Full, o) | (o, MaskShape::Full) => o.area(n),
            (MaskShape::Rect(a), MaskShape::Rect(b)) => a.intersect(b).area(),
        }
    }

    fn iou(&self, other: &MaskShape, n: u64) -> f64 {
        let inter = self.intersection(other, n);
        let union = self.area(n) + other.area(n) - inter;
        inter as f64 / union as f64
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticPair {
    pub dump: AttentionDump,
    pub manifest: Manifest,
    /// Known metrics; present for zero-noise rectangle scenes at image
    /// resolution under a fixed policy.
    pub expected: Option<SeparationRecord>,
}

/// Builds the dump, manifest and (when derivable) the expected record.
pub fn synth_fixture(spec: &SyntheticSceneSpec) -> Result<SyntheticPair, SynthError> {
    spec.check()?;
    let prompt = corpus::render_prompt(spec.template_id, &spec.content, &spec.style, RenderOptions::default())?;
    let tokens = corpus::word_tokens(&prompt.prompt_text, spec.padding);
    let generation = GenerationConfig { steps: spec.timesteps, guidance: 0.0, model_id: "synthetic".into() };
    let mut manifest = corpus::build_manifest(&prompt, tokens, generation, "dump.bin")?;
    manifest.provenance = Some("synthetic fixture".into());

    let others = crate::masks::baseline_tokens(&manifest.tokens, manifest.content_span, manifest.style_span);
    let field_of = |region: Option<Region>| match region {
        Some(r) => Field::Region(r, spec.background),
        None => Field::Uniform(spec.uniform_level),
    };
    let n_tokens = manifest.tokens.len();
    let mut fields = vec![Field::Uniform(0.05); n_tokens];
    for i in manifest.content_span.indices() {
        fields[i] = field_of(spec.content_region);
    }
    for i in manifest.style_span.indices() {
        fields[i] = field_of(spec.style_region);
    }
    for (k, &i) in others.iter().enumerate() {
        fields[i] = field_of(spec.other_regions.get(k).copied().unwrap_or(spec.other_default));
    }

    let (lw, lh) = spec.latent_dims();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut records = Vec::new();
    for layer in 0..spec.layers {
        for timestep in 0..spec.timesteps {
            for head in 0..spec.heads {
                // Per-record gain; uniform across tokens, so normalization removes it.
                let gain = 0.5 + 0.5 * ((layer + timestep + head) % 4) as f32 / 3.0;
                let mut values = Vec::with_capacity((lw * lh) as usize * n_tokens);
                for y in 0..lh {
                    for x in 0..lw {
                        for field in &fields {
                            let mut v = gain * field.value(x, y);
                            if spec.noise > 0.0 {
                                v += rng.gen_range(-spec.noise..=spec.noise);
                            }
                            values.push(v.clamp(0.0, 1.0));
                        }
                    }
                }
                records.push(AttentionRecord {
                    layer_id: layer,
                    timestep,
                    head,
                    height: lh,
                    width: lw,
                    n_tokens: n_tokens as u32,
                    values,
                });
            }
        }
    }
    let dump = AttentionDump {
        image_width: spec.image_width,
        image_height: spec.image_height,
        model_id: "synthetic".into(),
        seed: spec.seed,
        records,
    };

    let expected = expected_record(spec, &manifest, &fields, &others);
    Ok(SyntheticPair { dump, manifest, expected })
}

fn expected_record(
    spec: &SyntheticSceneSpec,
    manifest: &Manifest,
    fields: &[Field],
    others: &[usize],
) -> Option<SeparationRecord> {
    let (lw, lh) = spec.latent_dims();
    let exact = spec.noise == 0.0
        && (lw, lh) == (spec.image_width, spec.image_height)
        && spec.policy.kind == ThresholdKind::Fixed;
    if !exact {
        return None;
    }
    let tau = spec.policy.value;
    let shape = |field: Field| -> Option<MaskShape> {
        match field {
            Field::Uniform(_) => Some(MaskShape::Full),
            Field::Region(Region::Rect { rect, intensity }, bg) => {
                if (bg as f64 / intensity as f64) >= tau {
                    Some(MaskShape::Full)
                } else {
                    Some(MaskShape::Rect(rect))
                }
            }
            Field::Region(Region::Blob { .. }, _) => None,
        }
    };
    let n = spec.image_width as u64 * spec.image_height as u64;
    let content = shape(fields[manifest.content_span.start])?;
    let style = shape(fields[manifest.style_span.start])?;
    let other_shapes: Option<Vec<MaskShape>> = others.iter().map(|&i| shape(fields[i])).collect();
    let other_shapes = other_shapes?;

    let iou_cs = content.iou(&style, n);
    let mut sum = 0.0;
    for component in [&content, &style] {
        for o in &other_shapes {
            sum += component.iou(o, n);
        }
    }
    let n_pairs = 2 * other_shapes.len();
    let miou_b = (n_pairs > 0).then(|| sum / n_pairs as f64);
    Some(SeparationRecord {
        content: manifest.content_label.clone(),
        style: manifest.style_label.clone(),
        style_kind: manifest.style_kind,
        template: manifest.template_id,
        policy_kind: spec.policy.kind,
        policy_value: spec.policy.value,
        iou_cs: Some(iou_cs),
        miou_b,
        delta: miou_b.map(|b| b - iou_cs),
        support_c: content.area(n) as usize,
        support_s: style.area(n) as usize,
        n_pairs,
        degenerate: false,
    })
}

/// `count` random scenes where content and style occupy disjoint
/// rectangles and the remaining words are uniform or cover one of them, so
/// mIoU_B exceeds IoU_CS on every image.
pub fn separated_corpus(count: usize, width: u32, height: u32, seed: u64) -> Vec<SyntheticSceneSpec> {
    let contents = corpus::bundled_contents();
    let styles = corpus::bundled_styles();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let split = rng.gen_range(width / 4..=width - width / 4).max(1).min(width - 1);
            let top = rng.gen_range(0..height / 2);
            let bottom = rng.gen_range(height / 2 + 1..=height);
            let content_rect = Rect::new(rng.gen_range(0..split / 2 + 1), top, split, bottom);
            let style_rect = Rect::new(split, rng.gen_range(0..height / 2), width, height);
            let cover = |rng: &mut ChaCha8Rng| match rng.gen_range(0..3) {
                0 => None,
                1 => Some(Region::Rect { rect: content_rect, intensity: 1.0 }),
                _ => Some(Region::Rect { rect: style_rect, intensity: 1.0 }),
            };
            let other_regions = (0..8).map(|_| cover(&mut rng)).collect();
            SyntheticSceneSpec {
                template_id: (i % 4) as u8 + 1,
                content: contents[i % contents.len()].clone(),
                style: styles[(i * 7) % styles.len()].clone(),
                content_region: Some(Region::Rect { rect: content_rect, intensity: 1.0 }),
                style_region: Some(Region::Rect { rect: style_rect, intensity: 0.8 }),
                other_regions,
                layers: 1,
                timesteps: 2,
                heads: 2,
                seed: seed.wrapping_add(i as u64),
                ..SyntheticSceneSpec::base(width, height)
            }
        })
        .collect()
}

/// Writes `manifest.json`, `dump.bin` and, when known, `expected.json` into `dir`.
pub fn write_pair(pair: &SyntheticPair, dir: impl AsRef<Path>) -> Result<(), SynthError> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    pair.manifest.to_json_file(dir.join("manifest.json"))?;
    dump::write_dump_file(&pair.dump, dir.join(&pair.manifest.dump_path))?;
    if let Some(expected) = &pair.expected {
        std::fs::write(dir.join("expected.json"), serde_json::to_string_pretty(expected)? + "\n")?;
    }
    Ok(())
}

/// Writes each pair into `root/pair_NNNN/` plus a JSON-lines `index.jsonl`.
pub fn write_corpus(pairs: &[SyntheticPair], root: impl AsRef<Path>) -> Result<(), SynthError> {
    let root = root.as_ref();
    std::fs::create_dir_all(root)?;
    let mut index = String::new();
    for (i, pair) in pairs.iter().enumerate() {
        let name = format!("pair_{i:04}");
        write_pair(pair, root.join(&name))?;
        index.push_str(&serde_json::to_string(&serde_json::json!({
            "id": i,
            "dir": name,
            "prompt": pair.manifest.prompt,
        }))?);
        index.push('\n');
    }
    std::fs::write(root.join("index.jsonl"), index)?;
    Ok(())
}
