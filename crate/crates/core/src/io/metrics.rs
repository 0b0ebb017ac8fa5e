//! Append-only metrics CSV: `step,stage,loss,lr,wall_time_s,extras_json`.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde_json::Value;

use crate::error::{Error, Result};

pub const HEADER: [&str; 6] = ["step", "stage", "loss", "lr", "wall_time_s", "extras_json"];

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub step: u64,
    pub stage: String,
    pub loss: f64,
    pub lr: f64,
    pub wall_time_s: f64,
    pub extras: BTreeMap<String, Value>,
}

impl MetricsRecord {
    pub fn new(step: u64, stage: &str, loss: f64, lr: f64) -> Self {
        Self {
            step,
            stage: stage.to_string(),
            loss,
            lr,
            wall_time_s: 0.0,
            extras: BTreeMap::new(),
        }
    }

    pub fn with_extra(mut self, key: &str, value: impl Into<Value>) -> Self {
        self.extras.insert(key.to_string(), value.into());
        self
    }

    /// Numeric extra, if present.
    pub fn extra(&self, key: &str) -> Option<f64> {
        self.extras.get(key).and_then(Value::as_f64)
    }
}

/// Appends records to a metrics file, writing the header for a new file.
#[derive(Debug)]
pub struct MetricsWriter {
    path: PathBuf,
    last_step: Option<u64>,
}

impl MetricsWriter {
    /// Opens `path` for appending. An existing file must carry the expected
    /// header; later writes must continue its step sequence.
    pub fn open(path: &Path) -> Result<Self> {
        let last_step = if path.exists() && fs::metadata(path)?.len() > 0 {
            read_metrics(path)?.last().map(|r| r.step)
        } else {
            if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            fs::write(path, format!("{}\n", HEADER.join(",")))?;
            None
        };
        Ok(Self {
            path: path.to_path_buf(),
            last_step,
        })
    }

    /// Starts a fresh file, discarding any previous content.
    pub fn create(path: &Path) -> Result<Self> {
        if path.exists() {
            fs::remove_file(path)?;
        }
        Self::open(path)
    }

    /// Reopens a file for a run resumed after `step`, dropping records
    /// written past it by the interrupted run.
    pub fn resume(path: &Path, step: u64) -> Result<Self> {
        let kept: Vec<MetricsRecord> = match read_metrics(path) {
            Ok(r) => r.into_iter().filter(|r| r.step <= step).collect(),
            Err(Error::MissingFile(_)) => Vec::new(),
            Err(e) => return Err(e),
        };
        let mut w = Self::create(path)?;
        for r in &kept {
            w.write(r)?;
        }
        Ok(w)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn last_step(&self) -> Option<u64> {
        self.last_step
    }

    pub fn write(&mut self, rec: &MetricsRecord) -> Result<()> {
        if let Some(last) = self.last_step {
            if rec.step <= last {
                return Err(Error::Input(format!(
                    "metrics step {} does not follow {last} in {}",
                    rec.step,
                    self.path.display()
                )));
            }
        }
        let extras = serde_json::to_string(&rec.extras).expect("string-keyed map serializes");
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
        w.write_record([
            rec.step.to_string(),
            rec.stage.clone(),
            rec.loss.to_string(),
            rec.lr.to_string(),
            rec.wall_time_s.to_string(),
            extras,
        ])
        .map_err(csv_io)?;
        let line = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        let mut f = OpenOptions::new().append(true).open(&self.path)?;
        f.write_all(&line)?;
        self.last_step = Some(rec.step);
        Ok(())
    }
}

fn csv_io(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

fn parse_f64(field: &str, name: &str, line: usize) -> Result<f64> {
    field.parse::<f64>().map_err(|_| Error::Parse {
        line,
        msg: format!("{name} `{field}` is not a number"),
    })
}

/// Reads and validates a metrics file: exact header, well-formed rows,
/// strictly increasing steps.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let f = fs::File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => e.into(),
    })?;
    parse_metrics(BufReader::new(f))
}

pub fn parse_metrics(reader: impl BufRead) -> Result<Vec<MetricsRecord>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let header = rdr.headers().map_err(|e| Error::Parse {
        line: 1,
        msg: e.to_string(),
    })?;
    if let Some(missing) = HEADER.iter().find(|h| !header.iter().any(|x| x == **h)) {
        return Err(Error::Schema(format!("metrics header lacks column `{missing}`")));
    }
    if header.len() != HEADER.len() || header.iter().zip(HEADER).any(|(a, b)| a != b) {
        return Err(Error::Schema(format!(
            "metrics header must be `{}`, found `{}`",
            HEADER.join(","),
            header.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut out: Vec<MetricsRecord> = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line() as usize),
            msg: e.to_string(),
        })?;
        let line = row.position().map_or(0, |p| p.line() as usize);
        if row.len() != HEADER.len() {
            return Err(Error::Parse {
                line,
                msg: format!("expected {} fields, found {}", HEADER.len(), row.len()),
            });
        }
        let step = row[0].parse::<u64>().map_err(|_| Error::Parse {
            line,
            msg: format!("step `{}` is not a non-negative integer", &row[0]),
        })?;
        let extras: BTreeMap<String, Value> = serde_json::from_str(&row[5]).map_err(|e| Error::Parse {
            line,
            msg: format!("extras_json: {e}"),
        })?;
        let rec = MetricsRecord {
            step,
            stage: row[1].to_string(),
            loss: parse_f64(&row[2], "loss", line)?,
            lr: parse_f64(&row[3], "lr", line)?,
            wall_time_s: parse_f64(&row[4], "wall_time_s", line)?,
            extras,
        };
        if let Some(prev) = out.last() {
            if rec.step <= prev.step {
                return Err(Error::Parse {
                    line,
                    msg: format!("step {} does not increase past {}", rec.step, prev.step),
                });
            }
        }
        out.push(rec);
    }
    Ok(out)
}
