use std::path::Path;

use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::config::hex;

/// Exit status of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Ok,
    /// A supremum or norm is infinite. This is a mathematical outcome, not a failure.
    Divergent,
    /// A verification property failed.
    Failed,
}

impl Status {
    pub fn exit_code(self) -> i32 {
        match self {
            Status::Ok => 0,
            Status::Divergent => 2,
            Status::Failed => 1,
        }
    }

    pub fn worst(self, other: Status) -> Status {
        use Status::*;
        match (self, other) {
            (Failed, _) | (_, Failed) => Failed,
            (Divergent, _) | (_, Divergent) => Divergent,
            _ => Ok,
        }
    }
}

/// JSON has no infinities, so non-finite numbers become strings.
pub fn num(x: f64) -> Value {
    if x.is_finite() {
        json!(x)
    } else if x.is_nan() {
        json!("nan")
    } else if x > 0.0 {
        json!("inf")
    } else {
        json!("-inf")
    }
}

pub fn nums(xs: &[f64]) -> Value {
    Value::Array(xs.iter().map(|x| num(*x)).collect())
}

pub fn cell(x: f64) -> String {
    format!("{x}")
}

/// One computed quantity with the call that produced it.
#[derive(Debug, Clone, Serialize)]
pub struct Step {
    pub module: &'static str,
    pub operation: &'static str,
    /// SHA-256 of the canonical JSON of `inputs`.
    pub input_digest: String,
    pub inputs: Value,
    pub values: Value,
}

impl Step {
    pub fn new(module: &'static str, operation: &'static str, inputs: Value, values: Value) -> Self {
        let canonical = serde_json::to_string(&inputs).expect("json values serialize");
        let input_digest = hex(&Sha256::digest(canonical.as_bytes()));
        Self { module, operation, input_digest, inputs, values }
    }
}

/// A CSV artifact.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub name: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(name: &str, header: &[&str]) -> Self {
        Self { name: name.into(), header: header.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> csv::Result<Vec<u8>> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::CRLF).from_writer(Vec::new());
        w.write_record(&self.header)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        Ok(w.into_inner().expect("in-memory writer"))
    }
}

/// What a command produced, before it is stamped and written.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub status: Status,
    pub summary: String,
    pub steps: Vec<Step>,
    pub tables: Vec<Table>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub command: String,
    pub version: &'static str,
    pub seed: u64,
    pub config_digest: Option<String>,
    pub status: Status,
    pub summary: String,
    pub wall_clock_seconds: f64,
    pub steps: Vec<Step>,
    pub tables: Vec<String>,
}

pub fn write_artifacts(dir: &Path, report: &RunReport, tables: &[Table]) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut json = serde_json::to_string_pretty(report).map_err(std::io::Error::other)?;
    json.push('\n');
    std::fs::write(dir.join("report.json"), json)?;
    for t in tables {
        let bytes = t.to_csv().map_err(std::io::Error::other)?;
        std::fs::write(dir.join(format!("{}.csv", t.name)), bytes)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn non_finite_numbers_survive_json() {
        assert_eq!(num(f64::INFINITY), json!("inf"));
        assert_eq!(num(1.5), json!(1.5));
        assert_eq!(serde_json::to_string(&nums(&[f64::NAN, 2.0])).unwrap(), r#"["nan",2.0]"#);
    }

    #[test]
    fn csv_quotes_and_uses_crlf() {
        let mut t = Table::new("t", &["a", "b"]);
        t.push(vec!["x,y".into(), cell(0.1)]);
        assert_eq!(String::from_utf8(t.to_csv().unwrap()).unwrap(), "a,b\r\n\"x,y\",0.1\r\n");
    }

    #[test]
    fn step_digest_ignores_key_order() {
        let a = Step::new("m", "op", json!({"a": 1, "b": 2}), json!(null));
        let b = Step::new("m", "op", serde_json::from_str(r#"{"b": 2, "a": 1}"#).unwrap(), json!(null));
        assert_eq!(a.input_digest, b.input_digest);
    }

    #[test]
    fn status_ordering() {
        assert_eq!(Status::Ok.worst(Status::Divergent), Status::Divergent);
        assert_eq!(Status::Divergent.worst(Status::Failed), Status::Failed);
        assert_eq!(Status::Failed.exit_code(), 1);
        assert_eq!(Status::Divergent.exit_code(), 2);
    }
}
