//! Per-epoch training metrics and their CSV serialization.
//!
//! Floats are written with Rust's shortest round-trip formatting, so a
//! parse-back reproduces every value bit-exactly.

use std::fs;
use std::path::Path;

use super::TrainError;

pub const METRICS_HEADER: &str = "epoch,aet_loss,lr,probe_error,knn_error,wall_seconds";

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub aet_loss: f64,
    pub lr: f64,
    pub probe_error: Option<f64>,
    pub knn_error: Option<f64>,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsLog {
    pub rows: Vec<MetricsRow>,
}

impl MetricsLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, row: MetricsRow) {
        if let Some(last) = self.rows.last() {
            assert!(last.epoch < row.epoch, "epochs must be strictly increasing");
        }
        assert!(row.aet_loss.is_finite(), "losses must be finite");
        self.rows.push(row);
    }

    /// The CSV text, not yet written to disk.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(METRICS_HEADER);
        out.push('\n');
        for r in &self.rows {
            let opt = |v: &Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.epoch,
                r.aet_loss,
                r.lr,
                opt(&r.probe_error),
                opt(&r.knn_error),
                r.wall_seconds
            ));
        }
        out
    }
}

/// Writes the log as CSV with the fixed header; empty optional metrics
/// serialize as empty cells.
pub fn export_metrics(log: &MetricsLog, path: &Path) -> Result<(), TrainError> {
    if log.rows.is_empty() {
        return Err(TrainError::EmptyLog);
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, log.to_csv())?;
    Ok(())
}

/// Parses a metrics CSV back into a log, losslessly.
pub fn import_metrics(path: &Path) -> Result<MetricsLog, TrainError> {
    let text = fs::read_to_string(path)?;
    parse_metrics(&text)
}

pub fn parse_metrics(text: &str) -> Result<MetricsLog, TrainError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header == METRICS_HEADER => {}
        Some((_, header)) => {
            return Err(TrainError::MalformedCsv {
                line: 1,
                reason: format!("unexpected header {header:?}"),
            })
        }
        None => {
            return Err(TrainError::MalformedCsv {
                line: 1,
                reason: "empty file".into(),
            })
        }
    }
    let mut log = MetricsLog::new();
    for (idx, line) in lines {
        if line.is_empty() {
            continue;
        }
        let lineno = idx + 1;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(TrainError::MalformedCsv {
                line: lineno,
                reason: format!("expected 6 fields, found {}", fields.len()),
            });
        }
        let req = |s: &str, what: &str| -> Result<f64, TrainError> {
            s.parse().map_err(|_| TrainError::MalformedCsv {
                line: lineno,
                reason: format!("bad {what}: {s:?}"),
            })
        };
        let opt = |s: &str, what: &str| -> Result<Option<f64>, TrainError> {
            if s.is_empty() {
                Ok(None)
            } else {
                req(s, what).map(Some)
            }
        };
        log.push(MetricsRow {
            epoch: fields[0].parse().map_err(|_| TrainError::MalformedCsv {
                line: lineno,
                reason: format!("bad epoch: {:?}", fields[0]),
            })?,
            aet_loss: req(fields[1], "aet_loss")?,
            lr: req(fields[2], "lr")?,
            probe_error: opt(fields[3], "probe_error")?,
            knn_error: opt(fields[4], "knn_error")?,
            wall_seconds: req(fields[5], "wall_seconds")?,
        });
    }
    if log.rows.is_empty() {
        return Err(TrainError::MalformedCsv {
            line: 1,
            reason: "no data rows after header".into(),
        });
    }
    Ok(log)
}
