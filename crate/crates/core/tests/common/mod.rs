//! Independent reference implementations shared by the integration tests.
#![allow(dead_code, clippy::excessive_precision)]

use std::path::Path;

use csep_core::dump::{AttentionDump, AttentionRecord, GenerationConfig, Manifest, StyleKind, Token, TokenSpan};
use csep_core::synth::{self, SyntheticPair, SyntheticSceneSpec};
use rand::Rng;

/// Cubic convolution kernel evaluated directly at signed distance `d`.
pub fn cubic_kernel(d: f64, a: f64) -> f64 {
    let x = d.abs();
    if x <= 1.0 {
        (a + 2.0) * x.powi(3) - (a + 3.0) * x.powi(2) + 1.0
    } else if x < 2.0 {
        a * x.powi(3) - 5.0 * a * x.powi(2) + 8.0 * a * x - 4.0 * a
    } else {
        0.0
    }
}

/// Bicubic resize by summing the 16 neighbouring samples per output pixel,
/// with half-pixel centers and edge replication.
pub fn bicubic_oracle(src: &[f64], w: usize, h: usize, tw: usize, th: usize, a: f64) -> Vec<f64> {
    let sample = |x: i64, y: i64| src[y.clamp(0, h as i64 - 1) as usize * w + x.clamp(0, w as i64 - 1) as usize];
    let mut out = vec![0.0; tw * th];
    for oy in 0..th {
        let sy = (oy as f64 + 0.5) * (h as f64 / th as f64) - 0.5;
        for ox in 0..tw {
            let sx = (ox as f64 + 0.5) * (w as f64 / tw as f64) - 0.5;
            let (fx, fy) = (sx.floor() as i64, sy.floor() as i64);
            let mut acc = 0.0;
            for j in fy - 1..=fy + 2 {
                for i in fx - 1..=fx + 2 {
                    acc += cubic_kernel(sx - i as f64, a) * cubic_kernel(sy - j as f64, a) * sample(i, j);
                }
            }
            out[oy * tw + ox] = acc;
        }
    }
    out
}

/// Pixel-counting reference for one image at a fixed cutoff.
#[derive(Debug, Clone, PartialEq)]
pub struct BruteSeparation {
    pub support_c: usize,
    pub support_s: usize,
    pub iou_cs: Option<f64>,
    pub miou_b: Option<f64>,
    pub n_pairs: usize,
}

fn brute_iou(a: &[bool], b: &[bool]) -> Option<f64> {
    let mut inter = 0usize;
    let mut union = 0usize;
    for (x, y) in a.iter().zip(b) {
        inter += (*x && *y) as usize;
        union += (*x || *y) as usize;
    }
    (union > 0).then(|| inter as f64 / union as f64)
}

pub fn brute_separation(content: &[f64], style: &[f64], others: &[Vec<f64>], tau: f64) -> BruteSeparation {
    let mask = |m: &[f64]| m.iter().map(|&v| v >= tau).collect::<Vec<bool>>();
    let c = mask(content);
    let s = mask(style);
    let os: Vec<Vec<bool>> = others.iter().map(|o| mask(o)).collect();
    let mut sum = 0.0;
    let mut defined = 0;
    for comp in [&c, &s] {
        for o in &os {
            if let Some(v) = brute_iou(comp, o) {
                sum += v;
                defined += 1;
            }
        }
    }
    BruteSeparation {
        support_c: c.iter().filter(|b| **b).count(),
        support_s: s.iter().filter(|b| **b).count(),
        iou_cs: brute_iou(&c, &s),
        miou_b: (defined > 0).then(|| sum / defined as f64),
        n_pairs: 2 * os.len(),
    }
}

/// Closed-form two-sided p-value of Student's t with 4 degrees of freedom.
pub fn t_two_sided_df4(t: f64) -> f64 {
    let u = 1.0 + t * t / 4.0;
    let cdf = 0.5 + 0.375 * (t / u.sqrt()) * (1.0 - t * t / (12.0 * u));
    2.0 * (1.0 - cdf)
}

/// Two-sided p for t = sqrt(18) at df = 4, evaluated with mpmath at 50 digits.
pub const P_SQRT18_DF4: f64 = 0.013235599563682690;

/// A valid dump with random shapes, keys and values in [0, 1].
pub fn random_dump(rng: &mut impl Rng) -> AttentionDump {
    let n_tokens = rng.gen_range(1..=9u32);
    let image_width = rng.gen_range(8..=64u32);
    let image_height = rng.gen_range(8..=64u32);
    let n_records = rng.gen_range(1..=6u32);
    let mut records = Vec::new();
    for k in 0..n_records {
        let width = rng.gen_range(1..=image_width.min(16));
        let height = rng.gen_range(1..=image_height.min(16));
        let count = (width * height * n_tokens) as usize;
        let values = (0..count)
            .map(|_| match rng.gen_range(0..10) {
                0 => 0.0,
                1 => 1.0,
                2 => f32::from_bits(rng.gen_range(1..0x0080_0000)),
                _ => rng.gen::<f32>(),
            })
            .collect();
        records.push(AttentionRecord {
            layer_id: k % 3,
            timestep: k / 3,
            head: rng.gen_range(0..4) * 10 + k,
            height,
            width,
            n_tokens,
            values,
        });
    }
    let model_id: String = match rng.gen_range(0..3) {
        0 => String::new(),
        1 => "runwayml/stable-diffusion-v1-5".into(),
        _ => "modèle-ü-✓".into(),
    };
    AttentionDump { image_width, image_height, model_id, seed: rng.gen(), records }
}

/// A hand-built manifest over `n` tokens with BOS/EOS specials at the ends.
pub fn manifest_for(n: usize, content: TokenSpan, style: TokenSpan) -> Manifest {
    let mut tokens = vec![Token::special("<|startoftext|>")];
    let mut prompt = String::new();
    for i in 1..n - 1 {
        if i > 1 {
            prompt.push(' ');
        }
        let word = format!("w{i}");
        tokens.push(Token::word(&word, prompt.len(), prompt.len() + word.len()));
        prompt.push_str(&word);
    }
    tokens.push(Token::special("<|endoftext|>"));
    Manifest {
        prompt,
        template_id: 1,
        tokens,
        content_span: content,
        style_span: style,
        content_label: "content".into(),
        style_label: "style".into(),
        style_kind: StyleKind::Artist,
        generation: GenerationConfig { steps: 1, guidance: 7.5, model_id: "test".into() },
        dump_path: "dump.bin".into(),
        provenance: None,
    }
}

/// Writes `count` separated scenes at `latent_scale` x upsampling with the
/// given noise, as `pair_NNNN` directories under `root`.
pub fn write_separated_corpus(
    root: &Path,
    count: usize,
    latent_scale: u32,
    noise: f32,
    seed: u64,
) -> Vec<SyntheticPair> {
    let pairs: Vec<SyntheticPair> = synth::separated_corpus(count, 16, 12, seed)
        .into_iter()
        .map(|s| {
            let spec = SyntheticSceneSpec {
                latent_width: Some(s.image_width),
                latent_height: Some(s.image_height),
                image_width: s.image_width * latent_scale,
                image_height: s.image_height * latent_scale,
                noise,
                ..s
            };
            synth::synth_fixture(&spec).expect("valid scene")
        })
        .collect();
    synth::write_corpus(&pairs, root).expect("corpus written");
    pairs
}
