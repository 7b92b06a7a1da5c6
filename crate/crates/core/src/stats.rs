//! Paired t-test, effect size, per-component Δ summaries and threshold sweeps.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dump::StyleKind;
use crate::masks::{SeparationRecord, ThresholdKind, ThresholdPolicy};

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("need at least 2 complete pairs, got {0}")]
    TooFewPairs(usize),
    #[error("pair {index} has a value outside [0, 1]: ({iou_cs}, {miou_b})")]
    PairOutOfRange { index: usize, iou_cs: f64, miou_b: f64 },
    #[error("zero standard deviation, effect size undefined")]
    ZeroVariance,
    #[error("records mix threshold policies ({0} and {1})")]
    MixedPolicies(ThresholdPolicy, ThresholdPolicy),
}

// ---------------------------------------------------------------------------
// Special functions
// ---------------------------------------------------------------------------

const LANCZOS_G: f64 = 7.0;
#[allow(clippy::excessive_precision)]
const LANCZOS: [f64; 9] = [
    0.999_999_999_999_809_93,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_13,
    -176.615_029_162_140_59,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_571_6e-6,
    1.505_632_735_149_311_6e-7,
];

/// Natural log of the gamma function for `x > 0`.
pub fn ln_gamma(x: f64) -> f64 {
    if x < 0.5 {
        // Reflection.
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = LANCZOS[0];
    for (i, c) in LANCZOS.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + LANCZOS_G + 0.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

/// Regularized incomplete beta `I_x(a, b)` via Lentz's continued fraction.
pub fn inc_beta(x: f64, a: f64, b: f64) -> f64 {
    assert!(a > 0.0 && b > 0.0, "shape parameters must be positive");
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = a * x.ln() + b * (1.0 - x).ln() - (ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b));
    if x < (a + 1.0) / (a + b + 2.0) {
        ln_front.exp() * beta_cf(x, a, b) / a
    } else {
        1.0 - ln_front.exp() * beta_cf(1.0 - x, b, a) / b
    }
}

fn beta_cf(x: f64, a: f64, b: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-16;
    let fix = |v: f64| if v.abs() < TINY { TINY } else { v };

    let (qab, qap, qam) = (a + b, a + 1.0, a - 1.0);
    let mut c = 1.0;
    let mut d = 1.0 / fix(1.0 - qab * x / qap);
    let mut h = d;
    for m in 1..=20_000 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 / fix(1.0 + aa * d);
        c = fix(1.0 + aa / c);
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 / fix(1.0 + aa * d);
        c = fix(1.0 + aa / c);
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Two-sided tail probability `P(|T| >= |t|)` for Student's t with `df`
/// degrees of freedom.
pub fn student_t_two_sided(t: f64, df: f64) -> f64 {
    if t.is_infinite() {
        return 0.0;
    }
    inc_beta(df / (df + t * t), df / 2.0, 0.5)
}

/// Upper tail `P(T >= t)`.
pub fn student_t_upper(t: f64, df: f64) -> f64 {
    let half = 0.5 * student_t_two_sided(t, df);
    if t >= 0.0 {
        half
    } else {
        1.0 - half
    }
}

// ---------------------------------------------------------------------------
// Running moments
// ---------------------------------------------------------------------------

/// Count, mean and sum of squared deviations; mergeable across partial folds.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Moments {
    pub n: u64,
    pub mean: f64,
    pub m2: f64,
}

impl Moments {
    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let d = x - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (x - self.mean);
    }

    pub fn merge(&self, other: &Moments) -> Moments {
        if self.n == 0 {
            return *other;
        }
        if other.n == 0 {
            return *self;
        }
        let n = self.n + other.n;
        let d = other.mean - self.mean;
        Moments {
            n,
            mean: self.mean + d * other.n as f64 / n as f64,
            m2: self.m2 + other.m2 + d * d * (self.n as f64 * other.n as f64) / n as f64,
        }
    }

    /// Sample (n - 1) variance; zero for fewer than two observations.
    pub fn variance(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            (self.m2 / (self.n - 1) as f64).max(0.0)
        }
    }

    pub fn sd(&self) -> f64 {
        self.variance().sqrt()
    }
}

impl FromIterator<f64> for Moments {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut m = Moments::default();
        iter.into_iter().for_each(|x| m.push(x));
        m
    }
}

// ---------------------------------------------------------------------------
// Paired tests
// ---------------------------------------------------------------------------

/// Complete `(iou_cs, miou_b)` pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedSample {
    pairs: Vec<(f64, f64)>,
}

impl PairedSample {
    pub fn new(pairs: Vec<(f64, f64)>) -> Result<Self, StatsError> {
        for (index, &(iou_cs, miou_b)) in pairs.iter().enumerate() {
            if !(0.0..=1.0).contains(&iou_cs) || !(0.0..=1.0).contains(&miou_b) {
                return Err(StatsError::PairOutOfRange { index, iou_cs, miou_b });
            }
        }
        if pairs.len() < 2 {
            return Err(StatsError::TooFewPairs(pairs.len()));
        }
        Ok(Self { pairs })
    }

    /// Keeps records where both metrics are present.
    pub fn from_records<'a>(records: impl IntoIterator<Item = &'a SeparationRecord>) -> Result<Self, StatsError> {
        Self::new(records.into_iter().filter_map(SeparationRecord::paired).collect())
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn pairs(&self) -> &[(f64, f64)] {
        &self.pairs
    }

    /// `miou_b - iou_cs` per pair.
    pub fn differences(&self) -> impl Iterator<Item = f64> + '_ {
        self.pairs.iter().map(|(cs, b)| b - cs)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Tail {
    #[default]
    TwoSided,
    /// Alternative: mean(miou_b - iou_cs) > 0.
    Greater,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TTest {
    /// Infinite when the differences have zero spread but non-zero mean.
    pub t: f64,
    pub p_value: f64,
    pub df: u64,
    pub tail: Tail,
    pub degenerate: bool,
}

/// Paired t-test on `d = miou_b - iou_cs`.
pub fn paired_t_test(sample: &PairedSample, tail: Tail) -> TTest {
    let m: Moments = sample.differences().collect();
    let df = m.n - 1;
    let se = m.sd() / (m.n as f64).sqrt();
    let (t, degenerate) = if se > 0.0 {
        (m.mean / se, false)
    } else if m.mean == 0.0 {
        (0.0, true)
    } else {
        (m.mean.signum() * f64::INFINITY, true)
    };
    let p_value = match tail {
        Tail::TwoSided => student_t_two_sided(t, df as f64),
        Tail::Greater => student_t_upper(t, df as f64),
    };
    TTest { t, p_value: p_value.clamp(0.0, 1.0), df, tail, degenerate }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EffectSizeConvention {
    /// |mean(miou_b) - mean(iou_cs)| over the pooled SD of the two series.
    #[default]
    PooledSd,
    /// |mean(d)| over the SD of the paired differences.
    DifferenceSd,
}

impl EffectSizeConvention {
    pub fn as_str(self) -> &'static str {
        match self {
            EffectSizeConvention::PooledSd => "pooled-sd",
            EffectSizeConvention::DifferenceSd => "difference-sd",
        }
    }
}

/// Standardized distance between the two series' means.
pub fn effect_size(sample: &PairedSample, convention: EffectSizeConvention) -> Result<f64, StatsError> {
    let (numerator, denominator) = match convention {
        EffectSizeConvention::PooledSd => {
            let cs: Moments = sample.pairs.iter().map(|p| p.0).collect();
            let b: Moments = sample.pairs.iter().map(|p| p.1).collect();
            // Equal group sizes, so the pooled variance is the plain average.
            ((b.mean - cs.mean).abs(), ((cs.variance() + b.variance()) / 2.0).sqrt())
        }
        EffectSizeConvention::DifferenceSd => {
            let d: Moments = sample.differences().collect();
            (d.mean.abs(), d.sd())
        }
    };
    if denominator > 0.0 {
        Ok(numerator / denominator)
    } else {
        Err(StatsError::ZeroVariance)
    }
}

// ---------------------------------------------------------------------------
// Component summaries
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupBy {
    Content,
    Style,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ComponentKind {
    Content,
    Artist,
    Movement,
}

impl From<StyleKind> for ComponentKind {
    fn from(kind: StyleKind) -> Self {
        match kind {
            StyleKind::Artist => ComponentKind::Artist,
            StyleKind::Movement => ComponentKind::Movement,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentSummary {
    pub label: String,
    pub kind: ComponentKind,
    pub mean_delta: f64,
    /// Sample SD; 0 when `n == 1`.
    pub sd_delta: f64,
    pub n: u64,
}

/// Mean and sample SD of Δ per content or style label, sorted by mean Δ
/// descending then label ascending. Records with a missing Δ are skipped.
pub fn component_summaries<'a>(
    records: impl IntoIterator<Item = &'a SeparationRecord>,
    group_by: GroupBy,
) -> Result<Vec<ComponentSummary>, StatsError> {
    let mut groups: BTreeMap<(String, ComponentKind), Moments> = BTreeMap::new();
    let mut policy: Option<ThresholdPolicy> = None;
    for r in records {
        match policy {
            None => policy = Some(r.policy()),
            Some(p) if p.key() != r.policy().key() => return Err(StatsError::MixedPolicies(p, r.policy())),
            _ => {}
        }
        let Some(delta) = r.delta else { continue };
        let key = match group_by {
            GroupBy::Content => (r.content.clone(), ComponentKind::Content),
            GroupBy::Style => (r.style.clone(), r.style_kind.into()),
        };
        groups.entry(key).or_default().push(delta);
    }
    let mut out: Vec<ComponentSummary> = groups
        .into_iter()
        .map(|((label, kind), m)| ComponentSummary { label, kind, mean_delta: m.mean, sd_delta: m.sd(), n: m.n })
        .collect();
    out.sort_by(|a, b| b.mean_delta.total_cmp(&a.mean_delta).then_with(|| a.label.cmp(&b.label)));
    Ok(out)
}

// ---------------------------------------------------------------------------
// Threshold sweep
// ---------------------------------------------------------------------------

/// Aggregate over all images for one threshold policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub policy_kind: ThresholdKind,
    pub policy_value: f64,
    /// No records carried this policy; every statistic below is absent.
    pub absent: bool,
    pub n_images: usize,
    /// Records with Δ missing; excluded from the means.
    pub n_missing: usize,
    pub mean_iou_cs: Option<f64>,
    pub mean_miou_b: Option<f64>,
    pub mean_delta: Option<f64>,
    /// Mean of `(support_c + support_s) / 2` over all records, in pixels.
    pub mean_support: Option<f64>,
    pub t: Option<f64>,
    pub p_value: Option<f64>,
    pub df: Option<u64>,
    pub effect_size: Option<f64>,
}

pub const SWEEP_COLUMNS: [&str; 14] = [
    "policy_kind",
    "policy_value",
    "absent",
    "n_images",
    "n_missing",
    "mean_iou_cs",
    "mean_miou_b",
    "mean_delta",
    "mean_support",
    "t",
    "p_value",
    "df",
    "effect_size",
    "effect_size_convention",
];

/// One sweep point per requested policy, in request order.
pub fn threshold_sweep(
    records: &[SeparationRecord],
    policies: &[ThresholdPolicy],
    tail: Tail,
    convention: EffectSizeConvention,
) -> Vec<SweepPoint> {
    policies
        .iter()
        .map(|policy| {
            let group: Vec<&SeparationRecord> = records.iter().filter(|r| r.policy().key() == policy.key()).collect();
            sweep_point(*policy, &group, tail, convention)
        })
        .collect()
}

fn sweep_point(
    policy: ThresholdPolicy,
    group: &[&SeparationRecord],
    tail: Tail,
    convention: EffectSizeConvention,
) -> SweepPoint {
    let mut point = SweepPoint {
        policy_kind: policy.kind,
        policy_value: policy.value,
        absent: group.is_empty(),
        n_images: group.len(),
        n_missing: 0,
        mean_iou_cs: None,
        mean_miou_b: None,
        mean_delta: None,
        mean_support: None,
        t: None,
        p_value: None,
        df: None,
        effect_size: None,
    };
    if group.is_empty() {
        return point;
    }
    let complete: Vec<(f64, f64)> = group.iter().filter_map(|r| r.paired()).collect();
    point.n_missing = group.len() - complete.len();
    point.mean_support =
        Some(group.iter().map(|r| (r.support_c + r.support_s) as f64 / 2.0).sum::<f64>() / group.len() as f64);
    if !complete.is_empty() {
        let n = complete.len() as f64;
        let cs = complete.iter().map(|p| p.0).sum::<f64>() / n;
        let b = complete.iter().map(|p| p.1).sum::<f64>() / n;
        point.mean_iou_cs = Some(cs);
        point.mean_miou_b = Some(b);
        point.mean_delta = Some(b - cs);
    }
    if let Ok(sample) = PairedSample::new(complete) {
        let test = paired_t_test(&sample, tail);
        point.t = Some(test.t);
        point.p_value = Some(test.p_value);
        point.df = Some(test.df);
        point.effect_size = effect_size(&sample, convention).ok();
    }
    point
}

/// Plain mean of the defined per-point effect sizes.
pub fn mean_effect_size(points: &[SweepPoint]) -> Option<f64> {
    let values: Vec<f64> = points.iter().filter_map(|p| p.effect_size).collect();
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(content: &str, style: &str, kind: StyleKind, delta: Option<f64>) -> SeparationRecord {
        SeparationRecord {
            content: content.into(),
            style: style.into(),
            style_kind: kind,
            template: 1,
            policy_kind: ThresholdKind::Fixed,
            policy_value: 0.4,
            iou_cs: delta.map(|_| 0.1),
            miou_b: delta.map(|d| 0.1 + d),
            delta,
            support_c: 10,
            support_s: 20,
            n_pairs: 4,
            degenerate: delta.is_none(),
        }
    }

    #[test]
    fn ln_gamma_matches_factorials() {
        let mut fact = 1.0f64;
        for n in 1..20 {
            assert!((ln_gamma(n as f64) - fact.ln()).abs() < 1e-12, "n = {n}");
            fact *= n as f64;
        }
        assert!((ln_gamma(0.5) - std::f64::consts::PI.sqrt().ln()).abs() < 1e-14);
    }

    #[test]
    fn inc_beta_closed_forms() {
        // I_x(a, 1) = x^a and I_x(1, b) = 1 - (1 - x)^b.
        for &x in &[0.01, 0.3, 0.5, 0.77, 0.99] {
            assert!((inc_beta(x, 3.5, 1.0) - x.powf(3.5)).abs() < 1e-13);
            assert!((inc_beta(x, 1.0, 2.5) - (1.0 - (1.0 - x).powf(2.5))).abs() < 1e-13);
        }
        assert_eq!(inc_beta(0.0, 2.0, 3.0), 0.0);
        assert_eq!(inc_beta(1.0, 2.0, 3.0), 1.0);
    }

    #[test]
    fn no_effect_gives_unit_p() {
        let s = PairedSample::new(vec![(0.2, 0.2), (0.5, 0.5), (0.7, 0.7)]).unwrap();
        let t = paired_t_test(&s, Tail::TwoSided);
        assert_eq!((t.t, t.p_value, t.df), (0.0, 1.0, 2));
    }

    #[test]
    fn constant_shift_is_infinite_t() {
        let s = PairedSample::new(vec![(0.1, 0.3), (0.2, 0.4), (0.5, 0.7)]).unwrap();
        // Differences are 0.2 up to rounding; force exact equality instead.
        let exact = PairedSample::new(vec![(0.25, 0.5), (0.5, 0.75), (0.0, 0.25)]).unwrap();
        let t = paired_t_test(&exact, Tail::TwoSided);
        assert!(t.degenerate && t.t == f64::INFINITY && t.p_value == 0.0);
        assert!(paired_t_test(&s, Tail::TwoSided).t > 1e6);
    }

    #[test]
    fn one_sided_halves_two_sided() {
        let s = PairedSample::new(vec![(0.1, 0.3), (0.2, 0.25), (0.4, 0.45), (0.3, 0.2)]).unwrap();
        let two = paired_t_test(&s, Tail::TwoSided);
        let one = paired_t_test(&s, Tail::Greater);
        assert!(two.t > 0.0);
        assert!((one.p_value - two.p_value / 2.0).abs() < 1e-15);
    }

    #[test]
    fn sample_requires_two_pairs() {
        assert_eq!(PairedSample::new(vec![(0.1, 0.2)]).unwrap_err(), StatsError::TooFewPairs(1));
        assert!(PairedSample::new(vec![(0.1, 1.2), (0.1, 0.2)]).is_err());
    }

    #[test]
    fn effect_size_edges() {
        let same = PairedSample::new(vec![(0.1, 0.1), (0.4, 0.4), (0.9, 0.9)]).unwrap();
        assert_eq!(effect_size(&same, EffectSizeConvention::PooledSd), Ok(0.0));
        let constant = PairedSample::new(vec![(0.3, 0.5), (0.3, 0.5)]).unwrap();
        assert_eq!(effect_size(&constant, EffectSizeConvention::PooledSd), Err(StatsError::ZeroVariance));
    }

    #[test]
    fn moments_merge_matches_sequential() {
        let xs: Vec<f64> = (0..50).map(|i| ((i * 17) % 23) as f64 * 0.1).collect();
        let whole: Moments = xs.iter().copied().collect();
        let left: Moments = xs[..13].iter().copied().collect();
        let right: Moments = xs[13..].iter().copied().collect();
        let merged = left.merge(&right);
        assert_eq!(merged.n, whole.n);
        assert!((merged.mean - whole.mean).abs() < 1e-12);
        assert!((merged.m2 - whole.m2).abs() < 1e-9);
    }

    #[test]
    fn summaries_hand_arithmetic() {
        let records = vec![
            record("giraffe", "Rococo", StyleKind::Movement, Some(0.4)),
            record("giraffe", "Rembrandt", StyleKind::Artist, Some(0.5)),
            record("person", "Rembrandt", StyleKind::Artist, Some(-0.1)),
            record("person", "Rococo", StyleKind::Movement, None),
        ];
        let by_content = component_summaries(&records, GroupBy::Content).unwrap();
        assert_eq!(by_content[0].label, "giraffe");
        assert!((by_content[0].mean_delta - 0.45).abs() < 1e-12);
        assert!((by_content[0].sd_delta - 0.070_710_678_118_654_76).abs() < 1e-12);
        assert_eq!(by_content[1].n, 1);
        assert_eq!(by_content[1].sd_delta, 0.0);
        assert_eq!(by_content.iter().map(|s| s.n).sum::<u64>(), 3);

        let by_style = component_summaries(&records, GroupBy::Style).unwrap();
        assert_eq!(by_style[0].label, "Rococo");
        assert_eq!(by_style[0].kind, ComponentKind::Movement);
        assert_eq!(by_style[1].kind, ComponentKind::Artist);
    }

    #[test]
    fn summaries_ties_sorted_by_label() {
        let records =
            vec![record("zebra", "A", StyleKind::Artist, Some(0.2)), record("bear", "A", StyleKind::Artist, Some(0.2))];
        let s = component_summaries(&records, GroupBy::Content).unwrap();
        assert_eq!(s[0].label, "bear");
    }

    #[test]
    fn summaries_reject_mixed_policies() {
        let mut other = record("cat", "A", StyleKind::Artist, Some(0.1));
        other.policy_value = 0.5;
        let records = vec![record("dog", "A", StyleKind::Artist, Some(0.2)), other];
        assert!(matches!(component_summaries(&records, GroupBy::Content), Err(StatsError::MixedPolicies(..))));
        assert!(component_summaries(&[], GroupBy::Content).unwrap().is_empty());
    }

    #[test]
    fn sweep_single_record_and_absent_point() {
        let r = record("cat", "Rococo", StyleKind::Movement, Some(0.3));
        let fixed = ThresholdPolicy::fixed(0.4).unwrap();
        let missing = ThresholdPolicy::percentile(0.5).unwrap();
        let points = threshold_sweep(
            std::slice::from_ref(&r),
            &[fixed, missing],
            Tail::TwoSided,
            EffectSizeConvention::PooledSd,
        );
        assert_eq!(points[0].mean_iou_cs, r.iou_cs);
        assert_eq!(points[0].mean_miou_b, r.miou_b);
        assert_eq!(points[0].mean_support, Some(15.0));
        assert_eq!(points[0].t, None);
        assert!(points[1].absent);
        assert_eq!(points[1].mean_delta, None);
    }
}
