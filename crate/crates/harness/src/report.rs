//! Per-replicate records, summaries with pass/fail checks, provenance.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::config::ExperimentKind;
use crate::HarnessError;

/// One row of `replicates.csv`. Records of one experiment share `fields`
/// names in the same order; non-finite values are not stored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRecord {
    pub index: usize,
    pub group: String,
    pub fields: Vec<(String, f64)>,
    pub error: Option<String>,
}

impl ReplicateRecord {
    pub fn new(index: usize, group: impl Into<String>) -> Self {
        Self {
            index,
            group: group.into(),
            fields: Vec::new(),
            error: None,
        }
    }

    pub fn with(mut self, name: &str, value: f64) -> Self {
        if value.is_finite() {
            self.fields.push((name.to_string(), value));
        }
        self
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.fields.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    /// `None` when the statistic was not finite.
    pub value: Option<f64>,
    /// Human-readable acceptance condition.
    pub condition: String,
    pub passed: bool,
}

impl Check {
    pub fn new(name: impl Into<String>, value: f64, condition: impl Into<String>, passed: bool) -> Self {
        Self {
            name: name.into(),
            value: value.is_finite().then_some(value),
            condition: condition.into(),
            passed: passed && value.is_finite(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub metrics: BTreeMap<String, f64>,
    pub checks: Vec<Check>,
}

impl Summary {
    /// Records a metric; non-finite values are skipped.
    pub fn metric(&mut self, name: impl Into<String>, value: f64) {
        if value.is_finite() {
            self.metrics.insert(name.into(), value);
        }
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    /// Canonical TOML of the configuration that produced the report.
    pub config: String,
    pub seed: u64,
    pub replicates: usize,
    pub core_version: String,
    pub harness_version: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub kind: ExperimentKind,
    pub summary: Summary,
    pub passed: bool,
    pub provenance: Provenance,
    pub records: Vec<ReplicateRecord>,
}

impl ExperimentReport {
    pub fn to_json(&self) -> Result<String, HarnessError> {
        serde_json::to_string_pretty(self).map_err(|e| HarnessError::Output(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        serde_json::from_str(text).map_err(|e| HarnessError::Output(e.to_string()))
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// `index,group,<fields...>,error`; the header follows the first record.
pub fn write_records_csv(mut w: impl Write, records: &[ReplicateRecord]) -> Result<(), HarnessError> {
    let names: Vec<&str> = records
        .iter()
        .find(|r| r.error.is_none())
        .or(records.first())
        .map(|r| r.fields.iter().map(|(n, _)| n.as_str()).collect())
        .unwrap_or_default();
    let io = |e: std::io::Error| HarnessError::Output(e.to_string());
    let mut header = vec!["index", "group"];
    header.extend(&names);
    header.push("error");
    writeln!(w, "{}", header.join(",")).map_err(io)?;
    for r in records {
        let mut cells = vec![r.index.to_string(), csv_field(&r.group)];
        for name in &names {
            cells.push(r.get(name).map_or_else(String::new, |v| v.to_string()));
        }
        cells.push(r.error.as_deref().map(csv_field).unwrap_or_default());
        writeln!(w, "{}", cells.join(",")).map_err(io)?;
    }
    Ok(())
}

/// Inverse of [`write_records_csv`] for records without quoted cells.
pub fn read_records_csv(r: impl BufRead) -> Result<Vec<ReplicateRecord>, HarnessError> {
    let bad = |m: String| HarnessError::Output(m);
    let mut lines = r.lines();
    let header = lines
        .next()
        .ok_or_else(|| bad("empty CSV".into()))?
        .map_err(|e| bad(e.to_string()))?;
    let names: Vec<String> = header.split(',').map(str::to_string).collect();
    if names.len() < 3 {
        return Err(bad("CSV header too short".into()));
    }
    let value_names = &names[2..names.len() - 1];
    let mut out = Vec::new();
    for line in lines {
        let line = line.map_err(|e| bad(e.to_string()))?;
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != names.len() {
            return Err(bad(format!("row has {} cells, header {}", cells.len(), names.len())));
        }
        let mut rec = ReplicateRecord::new(cells[0].parse().map_err(|_| bad(format!("bad index {}", cells[0])))?, cells[1]);
        for (name, cell) in value_names.iter().zip(&cells[2..]) {
            if !cell.is_empty() {
                rec.fields.push((name.clone(), cell.parse().map_err(|_| bad(format!("bad value {cell}")))?));
            }
        }
        let err = cells[names.len() - 1];
        rec.error = (!err.is_empty()).then(|| err.to_string());
        out.push(rec);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn records_round_trip_through_csv() {
        let recs = vec![
            ReplicateRecord::new(0, "n=1024").with("z", 0.125).with("v", -3.5e-7),
            ReplicateRecord::new(1, "n=1024").with("z", f64::MIN_POSITIVE).with("v", 1.0 / 3.0),
            ReplicateRecord {
                error: Some("degenerate path".into()),
                ..ReplicateRecord::new(2, "n=1024")
            },
        ];
        let mut buf = Vec::new();
        write_records_csv(&mut buf, &recs).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("index,group,z,v,error\n0,n=1024,0.125,-0.00000035,\n"));
        assert_eq!(read_records_csv(buf.as_slice()).unwrap(), recs);
    }
}
