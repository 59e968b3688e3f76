//! Append-only JSONL result records and the CSV report aggregator.
//!
//! Records are fully deterministic for a given config and seed; wall-clock
//! timings go to a separate `timings.jsonl` sidecar so that re-runs produce
//! byte-identical `results.jsonl` lines.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

pub const RESULT_SCHEMA_VERSION: u32 = 1;
pub const RESULTS_FILE: &str = "results.jsonl";
pub const TIMINGS_FILE: &str = "timings.jsonl";

/// One experiment-trial record: a single JSON object per line.
///
/// `psnr` values may be the infinite sentinel in memory; JSON cannot carry
/// infinities, so they serialize as `null` (consumers treat `null` PSNR as
/// an exact match).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResultRecord {
    pub schema_version: u32,
    pub kind: String,
    pub config_hash: String,
    pub master_seed: u64,
    #[serde(skip_serializing_if = "Value::is_null", default)]
    pub metrics: Value,
    #[serde(skip_serializing_if = "BTreeMap::is_empty", default)]
    pub artifacts: BTreeMap<String, String>,
}

impl ResultRecord {
    pub fn new(kind: &str, config_hash: &str, master_seed: u64, metrics: Value) -> Self {
        Self {
            schema_version: RESULT_SCHEMA_VERSION,
            kind: kind.to_string(),
            config_hash: config_hash.to_string(),
            master_seed,
            metrics,
            artifacts: BTreeMap::new(),
        }
    }

    pub fn with_artifact(mut self, name: &str, path: &Path) -> Self {
        self.artifacts.insert(name.to_string(), path.display().to_string());
        self
    }
}

/// Append a record line to `<out_dir>/results.jsonl`.
pub fn append_record(out_dir: &Path, record: &ResultRecord) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    let mut file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(out_dir.join(RESULTS_FILE))?;
    let line = serde_json::to_string(record)?;
    writeln!(file, "{line}")?;
    Ok(())
}

/// Append a wall-clock entry to the (non-deterministic) timing sidecar.
pub fn append_timing(out_dir: &Path, kind: &str, config_hash: &str, wall_ms: u128) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    let mut file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(out_dir.join(TIMINGS_FILE))?;
    writeln!(
        file,
        "{}",
        serde_json::json!({ "kind": kind, "config_hash": config_hash, "wall_ms": wall_ms as u64 })
    )?;
    Ok(())
}

/// Flatten a JSON value into dotted numeric leaves.
fn numeric_leaves(prefix: &str, value: &Value, out: &mut Vec<(String, f64)>) {
    match value {
        Value::Number(n) => {
            if let Some(v) = n.as_f64() {
                out.push((prefix.to_string(), v));
            }
        }
        Value::Bool(b) => out.push((prefix.to_string(), *b as u8 as f64)),
        Value::Object(map) => {
            for (k, v) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                numeric_leaves(&key, v, out);
            }
        }
        Value::Array(items) => {
            for (i, v) in items.iter().enumerate() {
                numeric_leaves(&format!("{prefix}[{i}]"), v, out);
            }
        }
        _ => {}
    }
}

/// Aggregate every `results.jsonl` under `dir` (recursively) into CSV rows
/// keyed by `(config_hash, kind, metric)` with count/mean/median/min/max.
/// An empty directory yields just the header. Mixed record schema versions
/// are an error.
pub fn aggregate_report(dir: &Path) -> Result<String> {
    let mut files = Vec::new();
    collect_result_files(dir, &mut files)?;
    files.sort();

    let mut version_seen: Option<u32> = None;
    let mut groups: BTreeMap<(String, String, String), Vec<f64>> = BTreeMap::new();
    for file in files {
        let text = std::fs::read_to_string(&file)?;
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let record: ResultRecord = serde_json::from_str(line)?;
            match version_seen {
                None => version_seen = Some(record.schema_version),
                Some(v) if v != record.schema_version => {
                    return Err(Error::MixedSchemaVersions(v, record.schema_version));
                }
                _ => {}
            }
            let mut leaves = Vec::new();
            numeric_leaves("", &record.metrics, &mut leaves);
            leaves.push(("master_seed".to_string(), record.master_seed as f64));
            for (metric, value) in leaves {
                groups
                    .entry((record.config_hash.clone(), record.kind.clone(), metric))
                    .or_default()
                    .push(value);
            }
        }
    }

    let mut csv = String::from("config_hash,kind,metric,count,mean,median,min,max\n");
    for ((hash, kind, metric), mut values) in groups {
        values.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let count = values.len();
        let mean: f64 = values.iter().sum::<f64>() / count as f64;
        let median = if count % 2 == 1 {
            values[count / 2]
        } else {
            0.5 * (values[count / 2 - 1] + values[count / 2])
        };
        let (min, max) = (values[0], values[count - 1]);
        csv.push_str(&format!("{hash},{kind},{metric},{count},{mean},{median},{min},{max}\n"));
    }
    Ok(csv)
}

fn collect_result_files(dir: &Path, out: &mut Vec<std::path::PathBuf>) -> Result<()> {
    if !dir.exists() {
        return Ok(());
    }
    for entry in std::fs::read_dir(dir)? {
        let entry = entry?;
        let path = entry.path();
        if path.is_dir() {
            collect_result_files(&path, out)?;
        } else if path.file_name().and_then(|n| n.to_str()) == Some(RESULTS_FILE) {
            out.push(path);
        }
    }
    Ok(())
}

/// Median of a slice (copied and sorted internally).
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
