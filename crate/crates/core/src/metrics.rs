//! Per-round records and their CSV form.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::Result;

/// One row per round. Empty cells mark quantities a run does not produce.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub round: usize,
    pub sim_time_s: f64,
    pub cum_bits_up: u64,
    pub cum_bits_down: u64,
    pub train_loss: Option<f64>,
    pub test_loss: Option<f64>,
    pub test_acc: Option<f64>,
    /// Cumulative fork count (blockchain runs).
    pub forks: Option<u64>,
    pub protocol: String,
}

pub const METRICS_COLUMNS: [&str; 9] =
    ["round", "sim_time_s", "cum_bits_up", "cum_bits_down", "train_loss", "test_loss", "test_acc", "forks", "protocol"];

/// Header row, then one row per record.
pub fn write_metrics_csv<W: Write>(out: W, records: &[MetricsRecord]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(METRICS_COLUMNS)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics_csv<R: std::io::Read>(input: R) -> Result<Vec<MetricsRecord>> {
    let mut r = csv::Reader::from_reader(input);
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// First simulated time at which the training loss reaches `target`.
pub fn completion_latency(records: &[MetricsRecord], target: f64) -> Option<f64> {
    records.iter().find(|r| r.train_loss.is_some_and(|l| l <= target)).map(|r| r.sim_time_s)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub param_value: f64,
    pub final_test_acc: Option<f64>,
    pub completion_latency_s: Option<f64>,
    pub cum_bits_up: u64,
}

pub const SUMMARY_COLUMNS: [&str; 4] = ["param_value", "final_test_acc", "completion_latency_s", "cum_bits_up"];

impl SummaryRow {
    pub fn from_run(param_value: f64, records: &[MetricsRecord], target: Option<f64>) -> Self {
        let last = records.last();
        SummaryRow {
            param_value,
            final_test_acc: last.and_then(|r| r.test_acc),
            completion_latency_s: target.and_then(|t| completion_latency(records, t)),
            cum_bits_up: last.map_or(0, |r| r.cum_bits_up),
        }
    }
}

pub fn write_summary_csv<W: Write>(out: W, rows: &[SummaryRow]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(SUMMARY_COLUMNS)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(round: usize, loss: Option<f64>) -> MetricsRecord {
        MetricsRecord {
            round,
            sim_time_s: round as f64 * 0.5,
            cum_bits_up: 10 * round as u64,
            cum_bits_down: 0,
            train_loss: loss,
            test_loss: None,
            test_acc: Some(0.25),
            forks: None,
            protocol: "favg".into(),
        }
    }

    #[test]
    fn header_only_for_empty_runs() {
        let mut buf = Vec::new();
        write_metrics_csv(&mut buf, &[]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), format!("{}\n", METRICS_COLUMNS.join(",")));
    }

    #[test]
    fn csv_round_trip_with_empty_cells() {
        let rows = vec![rec(1, Some(0.9)), rec(2, None), rec(3, Some(0.1 + 0.2))];
        let mut buf = Vec::new();
        write_metrics_csv(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.lines().all(|l| l.split(',').count() == 9));
        assert_eq!(read_metrics_csv(&buf[..]).unwrap(), rows);
    }

    #[test]
    fn completion_time() {
        let rows = vec![rec(1, Some(0.9)), rec(2, Some(0.4)), rec(3, Some(0.2))];
        assert_eq!(completion_latency(&rows, 0.5), Some(1.0));
        assert_eq!(completion_latency(&rows, 0.1), None);
        let s = SummaryRow::from_run(2.0, &rows, Some(0.5));
        assert_eq!(s.cum_bits_up, 30);
        assert_eq!(s.final_test_acc, Some(0.25));
    }
}
