//! Per-round metric files and small CSV helpers.
//!
//! A metrics file starts with a schema line, then a CSV header, then one row
//! per client per round. Writing to an existing file appends rows after
//! checking the schema line.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::error::{Result, SimError};
use crate::federation::RunRecord;

pub const SCHEMA: &str = "simfed.metrics.v1";
const SCHEMA_PREFIX: &str = "#schema=";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub age: usize,
    pub round: usize,
    pub mode_k: usize,
    pub stratum: usize,
    pub client_id: usize,
    pub local_loss_before: f64,
    pub local_loss_after: f64,
    /// Loss of the client's mode on all training data after aggregation.
    pub global_train_loss: Option<f64>,
    pub wallclock_ms: u64,
}

pub fn rows_from_records(records: &[RunRecord]) -> Vec<MetricRow> {
    records
        .iter()
        .flat_map(|r| {
            r.clients.iter().map(move |c| MetricRow {
                age: r.age,
                round: r.round,
                mode_k: c.mode,
                stratum: c.stratum,
                client_id: c.client_id,
                local_loss_before: c.local_loss_before,
                local_loss_after: c.local_loss_after,
                global_train_loss: r.mode_train_loss.get(c.mode).copied(),
                wallclock_ms: r.wallclock_ms,
            })
        })
        .collect()
}

pub(crate) fn csv_error(path: &Path, e: csv::Error) -> SimError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => SimError::io(path, io),
        other => SimError::Parse {
            path: path.to_path_buf(),
            message: format!("{other:?}"),
        },
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| SimError::io(dir, e))?;
    }
    Ok(())
}

/// Truncating CSV writer that creates parent directories.
pub(crate) fn csv_writer(path: &Path) -> Result<csv::Writer<File>> {
    ensure_parent(path)?;
    let f = File::create(path).map_err(|e| SimError::io(path, e))?;
    Ok(csv::Writer::from_writer(f))
}

/// Writes `rows` as a headed CSV file, replacing any previous content.
pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv_writer(path)?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| SimError::io(path, e))
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_error(path, e))).collect()
}

/// Appends `records` to the metrics file at `path`, creating it with schema
/// line and header if it does not exist yet.
pub fn write_metrics(records: &[RunRecord], path: &Path) -> Result<()> {
    write_metric_rows(&rows_from_records(records), path)
}

pub fn write_metric_rows(rows: &[MetricRow], path: &Path) -> Result<()> {
    ensure_parent(path)?;
    let fresh = match fs::metadata(path) {
        Ok(m) => m.len() == 0,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => true,
        Err(e) => return Err(SimError::io(path, e)),
    };
    if !fresh {
        check_schema(path)?;
    }
    let mut file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| SimError::io(path, e))?;
    // Rows are rendered in memory and written with a single call so that
    // partially written files never contain half a batch header.
    let mut buf = Vec::new();
    if fresh {
        writeln!(buf, "{SCHEMA_PREFIX}{SCHEMA}").expect("in-memory write");
    }
    {
        let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(&mut buf);
        for r in rows {
            w.serialize(r).map_err(|e| csv_error(path, e))?;
        }
        if fresh && rows.is_empty() {
            w.write_record(["age", "round", "mode_k", "stratum", "client_id", "local_loss_before", "local_loss_after", "global_train_loss", "wallclock_ms"])
                .map_err(|e| csv_error(path, e))?;
        }
        w.flush().map_err(|e| SimError::io(path, e))?;
    }
    file.write_all(&buf).map_err(|e| SimError::io(path, e))
}

fn check_schema(path: &Path) -> Result<()> {
    let f = File::open(path).map_err(|e| SimError::io(path, e))?;
    let mut first = String::new();
    BufReader::new(f).read_line(&mut first).map_err(|e| SimError::io(path, e))?;
    let found = first.trim_end();
    if found != format!("{SCHEMA_PREFIX}{SCHEMA}") {
        return Err(SimError::Schema {
            path: path.to_path_buf(),
            expected: SCHEMA.to_string(),
            found: found.strip_prefix(SCHEMA_PREFIX).unwrap_or(found).to_string(),
        });
    }
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRow>> {
    check_schema(path)?;
    let f = File::open(path).map_err(|e| SimError::io(path, e))?;
    let mut reader = BufReader::new(f);
    let mut skip = String::new();
    reader.read_line(&mut skip).map_err(|e| SimError::io(path, e))?;
    let mut r = csv::Reader::from_reader(reader);
    r.deserialize().map(|row| row.map_err(|e| csv_error(path, e))).collect()
}
