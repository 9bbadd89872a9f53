//! Summaries of a run directory's `metrics.jsonl`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::Serialize;

use super::{MetricsRecord, PipelineError};

/// First, last, minimum and maximum of one numeric metric.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricSummary {
    pub first: f64,
    pub last: f64,
    pub min: f64,
    pub max: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunReport {
    pub steps: usize,
    pub metrics: BTreeMap<String, MetricSummary>,
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>, PipelineError> {
    let f = File::open(path).map_err(|e| PipelineError::Io(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| PipelineError::Io(format!("{}: {e}", path.display())))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| PipelineError::Config(format!("{}:{}: {e}", path.display(), n + 1)))?);
    }
    Ok(out)
}

/// Numeric top-level fields of a record, including `domain_accuracy.<d>`.
fn numeric_fields(r: &MetricsRecord) -> Vec<(String, f64)> {
    let value = serde_json::to_value(r).expect("metrics serialize");
    let mut out = Vec::new();
    if let serde_json::Value::Object(map) = value {
        for (k, v) in map {
            match v {
                serde_json::Value::Number(n) if k != "step" => out.extend(n.as_f64().map(|x| (k.clone(), x))),
                serde_json::Value::Object(inner) => {
                    for (d, x) in inner {
                        out.extend(x.as_f64().map(|x| (format!("{k}.{d}"), x)));
                    }
                }
                _ => {}
            }
        }
    }
    out
}

pub fn summarize(records: &[MetricsRecord]) -> RunReport {
    let mut metrics: BTreeMap<String, MetricSummary> = BTreeMap::new();
    for r in records {
        for (k, x) in numeric_fields(r) {
            metrics
                .entry(k)
                .and_modify(|s| {
                    s.last = x;
                    s.min = s.min.min(x);
                    s.max = s.max.max(x);
                })
                .or_insert(MetricSummary { first: x, last: x, min: x, max: x });
        }
    }
    RunReport { steps: records.len(), metrics }
}

impl RunReport {
    pub fn to_table(&self) -> String {
        let width = self.metrics.keys().map(String::len).max().unwrap_or(6).max(6);
        let mut s = format!("{} steps\n{:<width$}  {:>12} {:>12} {:>12} {:>12}\n", self.steps, "metric", "first", "last", "min", "max");
        for (k, m) in &self.metrics {
            let _ = writeln!(s, "{k:<width$}  {:>12.4} {:>12.4} {:>12.4} {:>12.4}", m.first, m.last, m.min, m.max);
        }
        s
    }
}

/// All numeric metrics as CSV, one row per step.
pub fn to_csv(records: &[MetricsRecord]) -> String {
    let rows: Vec<(u64, BTreeMap<String, f64>)> = records.iter().map(|r| (r.step, numeric_fields(r).into_iter().collect())).collect();
    let mut columns: Vec<String> = rows.iter().flat_map(|(_, m)| m.keys().cloned()).collect();
    columns.sort();
    columns.dedup();
    let mut s = format!("step,{}\n", columns.join(","));
    for (step, m) in rows {
        s.push_str(&step.to_string());
        for c in &columns {
            s.push(',');
            if let Some(x) = m.get(c) {
                s.push_str(&x.to_string());
            }
        }
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn summary_tracks_extremes() {
        let recs: Vec<MetricsRecord> = [0.5, 0.2, 0.9]
            .iter()
            .enumerate()
            .map(|(i, &x)| MetricsRecord { step: i as u64 + 1, loss: x, success_rate: Some(x), ..Default::default() })
            .collect();
        let r = summarize(&recs);
        assert_eq!(r.steps, 3);
        assert_eq!(r.metrics["loss"], MetricSummary { first: 0.5, last: 0.9, min: 0.2, max: 0.9 });
        assert!(r.to_table().contains("success_rate"));
        let csv = to_csv(&recs);
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.starts_with("step,"));
    }
}
