#![allow(clippy::excessive_precision)]

mod common;

use csep_core::dump::StyleKind;
use csep_core::masks::{SeparationRecord, ThresholdKind};
use csep_core::stats::{self, ComponentKind, EffectSizeConvention, GroupBy, PairedSample, Tail};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Two-sided Student-t p-values computed with mpmath at 50 significant digits.
const T_REFERENCE: [(f64, f64, f64); 8] = [
    (4.242640687119285146, 4.0, 0.01323559956368268951952),
    (2.0, 10.0, 0.07338803477074036561786),
    (0.5, 3.0, 0.6514479648481509944350),
    (1.96, 1000.0, 0.05027318495574871843489),
    (3.5, 15999.0, 0.0004665240393152878101190957),
    (10.0, 7.0, 0.00002139420289077281186768773),
    (0.1, 1.0, 0.9365489651388928574710857),
    (0.0, 5.0, 1.0),
];

#[test]
fn two_sided_p_matches_high_precision_reference() {
    for (t, df, want) in T_REFERENCE {
        let got = stats::student_t_two_sided(t, df);
        assert!((got - want).abs() <= 1e-10 * want.max(1e-3), "t={t} df={df}: {got} vs {want}");
        assert_eq!(stats::student_t_two_sided(-t, df), got, "p must be symmetric in t");
    }
}

#[test]
fn df4_closed_form_agrees_over_a_range() {
    for i in 0..200 {
        let t = i as f64 * 0.05;
        let got = stats::student_t_two_sided(t, 4.0);
        let want = common::t_two_sided_df4(t);
        assert!((got - want).abs() <= 1e-12, "t={t}: {got} vs {want}");
    }
}

#[test]
fn textbook_paired_fixture() {
    // d = {1..5} scaled into [0, 1]; t is scale invariant.
    let sample = PairedSample::new((1..=5).map(|k| (0.0, k as f64 / 5.0)).collect()).unwrap();
    let test = stats::paired_t_test(&sample, Tail::TwoSided);
    let mean = 3.0 / 5.0;
    let sd = (2.5f64).sqrt() / 5.0;
    assert!((test.t - mean / (sd / 5f64.sqrt())).abs() < 1e-12);
    assert_eq!(test.df, 4);
    assert!((test.p_value - common::P_SQRT18_DF4).abs() < 1e-8);
}

fn two_pass(xs: &[f64]) -> (f64, f64) {
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (xs.len() - 1) as f64;
    (mean, var)
}

#[test]
fn effect_size_matches_two_pass_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..50 {
        let n = rng.gen_range(2..200);
        let pairs: Vec<(f64, f64)> = (0..n).map(|_| (rng.gen_range(0.0..0.6), rng.gen_range(0.2..1.0))).collect();
        let sample = PairedSample::new(pairs.clone()).unwrap();

        let (m_cs, v_cs) = two_pass(&pairs.iter().map(|p| p.0).collect::<Vec<_>>());
        let (m_b, v_b) = two_pass(&pairs.iter().map(|p| p.1).collect::<Vec<_>>());
        let pooled = (m_b - m_cs).abs() / ((v_cs + v_b) / 2.0).sqrt();
        let got = stats::effect_size(&sample, EffectSizeConvention::PooledSd).unwrap();
        assert!((got - pooled).abs() < 1e-9, "{got} vs {pooled}");

        let (m_d, v_d) = two_pass(&pairs.iter().map(|p| p.1 - p.0).collect::<Vec<_>>());
        let got = stats::effect_size(&sample, EffectSizeConvention::DifferenceSd).unwrap();
        assert!((got - m_d.abs() / v_d.sqrt()).abs() < 1e-9);
    }
}

#[test]
fn effect_size_edge_cases() {
    let same = PairedSample::new(vec![(0.2, 0.2), (0.4, 0.4), (0.7, 0.7)]).unwrap();
    assert_eq!(stats::effect_size(&same, EffectSizeConvention::PooledSd).unwrap(), 0.0);
    let constant = PairedSample::new(vec![(0.3, 0.5); 4]).unwrap();
    assert!(stats::effect_size(&constant, EffectSizeConvention::PooledSd).is_err());
}

fn record(content: &str, style: &str, kind: StyleKind, delta: f64) -> SeparationRecord {
    SeparationRecord {
        content: content.into(),
        style: style.into(),
        style_kind: kind,
        template: 1,
        policy_kind: ThresholdKind::Fixed,
        policy_value: 0.4,
        iou_cs: Some(0.1),
        miou_b: Some(0.1 + delta),
        delta: Some(delta),
        support_c: 1,
        support_s: 1,
        n_pairs: 14,
        degenerate: false,
    }
}

#[test]
fn summary_table_covers_bundled_labels() {
    let contents = csep_core::corpus::bundled_contents();
    let styles = csep_core::corpus::bundled_styles();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut records = Vec::new();
    for c in &contents {
        for s in &styles {
            for _ in 0..4 {
                records.push(record(c, &s.label, s.kind, rng.gen_range(-0.2..0.6)));
            }
        }
    }
    let by_content = stats::component_summaries(&records, GroupBy::Content).unwrap();
    let by_style = stats::component_summaries(&records, GroupBy::Style).unwrap();
    assert_eq!(by_content.len(), 80);
    assert!(by_content.iter().all(|s| s.kind == ComponentKind::Content && s.n == 200));
    assert_eq!(by_style.iter().filter(|s| s.kind == ComponentKind::Artist).count(), 23);
    assert_eq!(by_style.iter().filter(|s| s.kind == ComponentKind::Movement).count(), 27);
    assert!(by_style.iter().all(|s| s.n == 320));
    assert!(by_content.windows(2).all(|w| w[0].mean_delta >= w[1].mean_delta));
}

#[test]
fn giraffe_hand_arithmetic() {
    let records = [
        record("giraffe", "Rembrandt", StyleKind::Artist, 0.4),
        record("giraffe", "Pop Art", StyleKind::Movement, 0.5),
    ];
    let s = &stats::component_summaries(&records, GroupBy::Content).unwrap()[0];
    assert!((s.mean_delta - 0.45).abs() < 1e-12);
    assert!((s.sd_delta - 0.5f64.sqrt() / 10.0).abs() < 1e-12);
    assert_eq!(s.n, 2);
}
