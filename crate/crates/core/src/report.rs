//! Tabular and JSON encodings of records, sweep points and summaries.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::masks::{SeparationRecord, ThresholdKind, ThresholdPolicy};
use crate::stats::{ComponentSummary, EffectSizeConvention, SweepPoint};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("line {line}: {source}")]
    JsonLine { line: usize, source: serde_json::Error },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Json,
}

pub fn write_records_csv<W: Write>(records: &[SeparationRecord], sink: W) -> Result<(), ReportError> {
    let mut w = csv::Writer::from_writer(sink);
    for r in records {
        w.serialize(r)?;
    }
    if records.is_empty() {
        w.write_record(crate::masks::RECORD_COLUMNS)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records_csv<R: std::io::Read>(source: R) -> Result<Vec<SeparationRecord>, ReportError> {
    let mut r = csv::Reader::from_reader(source);
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

pub fn write_records_jsonl<W: Write>(records: &[SeparationRecord], mut sink: W) -> Result<(), ReportError> {
    for r in records {
        serde_json::to_writer(&mut sink, r)?;
        sink.write_all(b"\n")?;
    }
    sink.flush()?;
    Ok(())
}

pub fn read_records_jsonl<R: BufRead>(source: R) -> Result<Vec<SeparationRecord>, ReportError> {
    let mut out = Vec::new();
    for (i, line) in source.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| ReportError::JsonLine { line: i + 1, source })?);
    }
    Ok(out)
}

/// Reads records from a `.csv` or JSON-lines file, chosen by extension.
pub fn read_records_file(path: impl AsRef<std::path::Path>) -> Result<Vec<SeparationRecord>, ReportError> {
    let path = path.as_ref();
    let file = std::fs::File::open(path)?;
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
        read_records_csv(file)
    } else {
        read_records_jsonl(std::io::BufReader::new(file))
    }
}

/// Distinct policies in first-appearance order.
pub fn policies_in(records: &[SeparationRecord]) -> Vec<ThresholdPolicy> {
    let mut seen: Vec<ThresholdPolicy> = Vec::new();
    for r in records {
        let p = r.policy();
        if !seen.iter().any(|s| s.key() == p.key()) {
            seen.push(p);
        }
    }
    seen
}

#[derive(Serialize)]
struct SweepRow<'a> {
    policy_kind: ThresholdKind,
    policy_value: f64,
    absent: bool,
    n_images: usize,
    n_missing: usize,
    mean_iou_cs: Option<f64>,
    mean_miou_b: Option<f64>,
    mean_delta: Option<f64>,
    mean_support: Option<f64>,
    t: Option<f64>,
    p_value: Option<f64>,
    df: Option<u64>,
    effect_size: Option<f64>,
    effect_size_convention: &'a str,
}

pub fn write_sweep_csv<W: Write>(
    points: &[SweepPoint],
    convention: EffectSizeConvention,
    sink: W,
) -> Result<(), ReportError> {
    let mut w = csv::Writer::from_writer(sink);
    for p in points {
        w.serialize(SweepRow {
            policy_kind: p.policy_kind,
            policy_value: p.policy_value,
            absent: p.absent,
            n_images: p.n_images,
            n_missing: p.n_missing,
            mean_iou_cs: p.mean_iou_cs,
            mean_miou_b: p.mean_miou_b,
            mean_delta: p.mean_delta,
            mean_support: p.mean_support,
            t: p.t,
            p_value: p.p_value,
            df: p.df,
            effect_size: p.effect_size,
            effect_size_convention: convention.as_str(),
        })?;
    }
    if points.is_empty() {
        w.write_record(crate::stats::SWEEP_COLUMNS)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_summaries_csv<W: Write>(summaries: &[ComponentSummary], sink: W) -> Result<(), ReportError> {
    let mut w = csv::Writer::from_writer(sink);
    for s in summaries {
        w.serialize(s)?;
    }
    if summaries.is_empty() {
        w.write_record(["label", "kind", "mean_delta", "sd_delta", "n"])?;
    }
    w.flush()?;
    Ok(())
}

/// Pretty JSON with a trailing newline.
pub fn to_json_bytes<T: Serialize + ?Sized>(value: &T) -> Result<Vec<u8>, ReportError> {
    let mut out = serde_json::to_vec_pretty(value)?;
    out.push(b'\n');
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dump::StyleKind;
    use crate::masks::RECORD_COLUMNS;

    fn record(delta: Option<f64>) -> SeparationRecord {
        SeparationRecord {
            content: "hot dog".into(),
            style: "Claude Monet".into(),
            style_kind: StyleKind::Artist,
            template: 2,
            policy_kind: ThresholdKind::Percentile,
            policy_value: 0.3,
            iou_cs: delta.map(|_| 0.25),
            miou_b: delta.map(|d| 0.25 + d),
            delta,
            support_c: 10,
            support_s: 12,
            n_pairs: 8,
            degenerate: delta.is_none(),
        }
    }

    #[test]
    fn csv_header_matches_columns() {
        let mut buf = Vec::new();
        write_records_csv(&[record(Some(0.5))], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next().unwrap(), RECORD_COLUMNS.join(","));
    }

    #[test]
    fn csv_and_jsonl_round_trip() {
        let records = vec![record(Some(0.125)), record(None)];
        let mut buf = Vec::new();
        write_records_csv(&records, &mut buf).unwrap();
        assert_eq!(read_records_csv(&buf[..]).unwrap(), records);
        let mut buf = Vec::new();
        write_records_jsonl(&records, &mut buf).unwrap();
        assert_eq!(read_records_jsonl(&buf[..]).unwrap(), records);
    }

    #[test]
    fn empty_tables_still_have_headers() {
        let mut buf = Vec::new();
        write_sweep_csv(&[], EffectSizeConvention::PooledSd, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().trim_end(), crate::stats::SWEEP_COLUMNS.join(","));
    }

    #[test]
    fn distinct_policies_keep_order() {
        let mut a = record(Some(0.1));
        a.policy_kind = ThresholdKind::Fixed;
        a.policy_value = 0.4;
        let b = record(Some(0.1));
        let got = policies_in(&[a.clone(), b.clone(), a]);
        assert_eq!(got.len(), 2);
        assert_eq!(got[0].kind, ThresholdKind::Fixed);
    }
}
