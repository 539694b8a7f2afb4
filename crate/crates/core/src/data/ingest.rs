use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::{DataError, Dataset, FeatureValue, ScoredExample};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputFormat {
    Jsonl,
    Csv,
}

impl InputFormat {
    /// Guess from the file extension; anything other than `.csv` is JSONL.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => Self::Csv,
            _ => Self::Jsonl,
        }
    }
}

impl FromStr for InputFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "jsonl" | "json" => Ok(Self::Jsonl),
            "csv" => Ok(Self::Csv),
            other => Err(format!("unknown input format `{other}`")),
        }
    }
}

/// Reads a dataset file. Row numbers in errors are 1-based data rows
/// (JSONL: line number; CSV: record number after the header).
pub fn ingest(path: &Path, format: InputFormat) -> Result<Dataset, DataError> {
    let text = std::fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let provenance = path.display().to_string();
    match format {
        InputFormat::Jsonl => ingest_jsonl_str(&text, provenance),
        InputFormat::Csv => ingest_csv_str(&text, provenance),
    }
}

const RESERVED: [&str; 5] = ["member_id", "score", "outcome", "session_id", "features"];

pub fn ingest_jsonl_str(text: &str, provenance: impl Into<String>) -> Result<Dataset, DataError> {
    let mut examples = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let row = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let obj: Map<String, Value> = serde_json::from_str(line).map_err(|e| DataError::Malformed {
            row,
            field: "<line>".into(),
            message: e.to_string(),
        })?;
        examples.push(example_from_json(row, obj)?);
    }
    Ok(Dataset {
        examples,
        provenance: provenance.into(),
    })
}

fn malformed(row: usize, field: &str, message: impl Into<String>) -> DataError {
    DataError::Malformed {
        row,
        field: field.to_string(),
        message: message.into(),
    }
}

fn example_from_json(row: usize, mut obj: Map<String, Value>) -> Result<ScoredExample, DataError> {
    let member_id = match obj.remove("member_id") {
        Some(Value::String(s)) if !s.is_empty() => s,
        Some(Value::String(_)) => return Err(malformed(row, "member_id", "empty")),
        Some(_) => return Err(malformed(row, "member_id", "expected a string")),
        None => return Err(malformed(row, "member_id", "missing")),
    };
    let score = match obj.remove("score") {
        Some(Value::Number(n)) => n.as_f64().ok_or_else(|| malformed(row, "score", "not a finite number"))?,
        Some(_) => return Err(malformed(row, "score", "expected a number")),
        None => return Err(malformed(row, "score", "missing")),
    };
    check_score(row, score)?;
    let outcome = match obj.remove("outcome") {
        None | Some(Value::Null) => None,
        Some(Value::Number(n)) => match n.as_f64() {
            Some(v) if v == 0.0 => Some(false),
            Some(v) if v == 1.0 => Some(true),
            _ => return Err(malformed(row, "outcome", format!("expected 0 or 1, got {n}"))),
        },
        Some(Value::Bool(b)) => Some(b),
        Some(_) => return Err(malformed(row, "outcome", "expected 0 or 1")),
    };
    let session_id = match obj.remove("session_id") {
        None | Some(Value::Null) => None,
        Some(Value::String(s)) => Some(s),
        Some(_) => return Err(malformed(row, "session_id", "expected a string")),
    };
    let mut features = BTreeMap::new();
    match obj.remove("features") {
        None | Some(Value::Null) => {}
        Some(Value::Object(map)) => {
            for (k, v) in map {
                if let Some(fv) = feature_from_json(row, &k, v)? {
                    features.insert(k, fv);
                }
            }
        }
        Some(_) => return Err(malformed(row, "features", "expected an object")),
    }
    // Unknown top-level keys are kept as side features.
    for (k, v) in obj {
        debug_assert!(!RESERVED.contains(&k.as_str()));
        if let Some(fv) = feature_from_json(row, &k, v)? {
            features.insert(k, fv);
        }
    }
    Ok(ScoredExample {
        member_id,
        score,
        outcome,
        session_id,
        features,
    })
}

fn feature_from_json(row: usize, key: &str, v: Value) -> Result<Option<FeatureValue>, DataError> {
    match v {
        Value::Null => Ok(None),
        Value::Number(n) => n
            .as_f64()
            .map(|x| Some(FeatureValue::Num(x)))
            .ok_or_else(|| malformed(row, key, "not a finite number")),
        Value::String(s) => Ok(Some(FeatureValue::Cat(s))),
        Value::Bool(b) => Ok(Some(FeatureValue::Cat(b.to_string()))),
        _ => Err(malformed(row, key, "feature values must be numbers or strings")),
    }
}

fn check_score(row: usize, score: f64) -> Result<(), DataError> {
    if !(0.0..=1.0).contains(&score) {
        return Err(DataError::ScoreOutOfRange { row, score });
    }
    Ok(())
}

pub fn ingest_csv_str(text: &str, provenance: impl Into<String>) -> Result<Dataset, DataError> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| malformed(0, "<header>", e.to_string()))?
        .clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let member_col = col("member_id").ok_or_else(|| malformed(0, "member_id", "missing column"))?;
    let score_col = col("score").ok_or_else(|| malformed(0, "score", "missing column"))?;
    let outcome_col = col("outcome");
    let session_col = col("session_id");

    let mut examples = Vec::new();
    for (idx, record) in reader.records().enumerate() {
        let row = idx + 1;
        let record = record.map_err(|e| malformed(row, "<record>", e.to_string()))?;
        let member_id = record.get(member_col).unwrap_or("").to_string();
        if member_id.is_empty() {
            return Err(malformed(row, "member_id", "empty"));
        }
        let raw_score = record.get(score_col).unwrap_or("");
        let score: f64 = raw_score
            .trim()
            .parse()
            .map_err(|_| malformed(row, "score", format!("`{raw_score}` is not a number")))?;
        check_score(row, score)?;
        let outcome = match outcome_col.and_then(|c| record.get(c)).map(str::trim) {
            None | Some("") => None,
            Some("0") => Some(false),
            Some("1") => Some(true),
            Some(other) => return Err(malformed(row, "outcome", format!("expected 0 or 1, got `{other}`"))),
        };
        let session_id = session_col
            .and_then(|c| record.get(c))
            .filter(|s| !s.is_empty())
            .map(str::to_string);
        let mut features = BTreeMap::new();
        for (i, name) in headers.iter().enumerate() {
            if i == member_col || Some(i) == outcome_col || i == score_col || Some(i) == session_col {
                continue;
            }
            let raw = record.get(i).unwrap_or("");
            if raw.is_empty() {
                continue;
            }
            let value = match raw.parse::<f64>() {
                Ok(v) if v.is_finite() => FeatureValue::Num(v),
                _ => FeatureValue::Cat(raw.to_string()),
            };
            features.insert(name.to_string(), value);
        }
        examples.push(ScoredExample {
            member_id,
            score,
            outcome,
            session_id,
            features,
        });
    }
    Ok(Dataset {
        examples,
        provenance: provenance.into(),
    })
}
