//! Line-delimited training metrics: one record per optimizer step with the
//! schema `stage= step= loss= lr= [accuracy=] wall_ms=`. Numbers use
//! fixed-format decimals so files diff cleanly; `wall_ms` is real elapsed
//! time and is the one field excluded from determinism comparisons (see
//! [`normalize_wall`]).

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRecord {
    pub stage: String,
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub accuracy: Option<f64>,
    pub wall_ms: u64,
}

impl MetricRecord {
    pub fn to_line(&self) -> String {
        let mut s = format!(
            "stage={} step={} loss={:.6} lr={:.6}",
            self.stage, self.step, self.loss, self.lr
        );
        if let Some(acc) = self.accuracy {
            s.push_str(&format!(" accuracy={acc:.6}"));
        }
        s.push_str(&format!(" wall_ms={}", self.wall_ms));
        s
    }

    pub fn parse(line: &str) -> Result<MetricRecord> {
        let err = |detail: String| Error::Parse {
            path: PathBuf::from("<metrics>"),
            line: 0,
            detail,
        };
        let mut stage = None;
        let mut step = None;
        let mut loss = None;
        let mut lr = None;
        let mut accuracy = None;
        let mut wall_ms = None;
        for field in line.split_whitespace() {
            let (key, value) = field
                .split_once('=')
                .ok_or_else(|| err(format!("bad metrics field {field:?}")))?;
            match key {
                "stage" => stage = Some(value.to_string()),
                "step" => step = Some(value.parse().map_err(|e| err(format!("step: {e}")))?),
                "loss" => loss = Some(value.parse().map_err(|e| err(format!("loss: {e}")))?),
                "lr" => lr = Some(value.parse().map_err(|e| err(format!("lr: {e}")))?),
                "accuracy" => {
                    accuracy = Some(value.parse().map_err(|e| err(format!("accuracy: {e}")))?)
                }
                "wall_ms" => {
                    wall_ms = Some(value.parse().map_err(|e| err(format!("wall_ms: {e}")))?)
                }
                other => return Err(err(format!("unknown metrics key {other:?}"))),
            }
        }
        Ok(MetricRecord {
            stage: stage.ok_or_else(|| err("missing stage".into()))?,
            step: step.ok_or_else(|| err("missing step".into()))?,
            loss: loss.ok_or_else(|| err("missing loss".into()))?,
            lr: lr.ok_or_else(|| err("missing lr".into()))?,
            accuracy,
            wall_ms: wall_ms.ok_or_else(|| err("missing wall_ms".into()))?,
        })
    }
}

/// Collects records in memory and optionally appends them to a file as they
/// arrive. `wall_ms` counts from writer creation.
pub struct MetricsWriter {
    out: Option<BufWriter<File>>,
    pub records: Vec<MetricRecord>,
    start: Instant,
}

impl MetricsWriter {
    /// Appending file writer (the file is created if missing, so several
    /// stages can share one metrics path).
    pub fn to_file(path: &Path) -> Result<MetricsWriter> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(MetricsWriter {
            out: Some(BufWriter::new(file)),
            records: Vec::new(),
            start: Instant::now(),
        })
    }

    pub fn in_memory() -> MetricsWriter {
        MetricsWriter {
            out: None,
            records: Vec::new(),
            start: Instant::now(),
        }
    }

    pub fn write(
        &mut self,
        stage: &str,
        step: usize,
        loss: f64,
        lr: f64,
        accuracy: Option<f64>,
    ) -> Result<()> {
        let record = MetricRecord {
            stage: stage.to_string(),
            step,
            loss,
            lr,
            accuracy,
            wall_ms: self.start.elapsed().as_millis() as u64,
        };
        if let Some(out) = &mut self.out {
            writeln!(out, "{}", record.to_line()).map_err(|e| Error::Io {
                path: PathBuf::from("<metrics>"),
                detail: e.to_string(),
            })?;
        }
        self.records.push(record);
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        if let Some(out) = &mut self.out {
            out.flush().map_err(|e| Error::Io {
                path: PathBuf::from("<metrics>"),
                detail: e.to_string(),
            })?;
        }
        Ok(())
    }
}

/// Rewrite every `wall_ms=<n>` as `wall_ms=0`. Two runs of the same seeded
/// configuration must produce byte-identical metrics *after* this pass —
/// wall time is the single intentionally non-deterministic field.
pub fn normalize_wall(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for line in text.lines() {
        let mut first = true;
        for field in line.split(' ') {
            if !first {
                out.push(' ');
            }
            first = false;
            if field.starts_with("wall_ms=") {
                out.push_str("wall_ms=0");
            } else {
                out.push_str(field);
            }
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn record_line_round_trip() {
        let r = MetricRecord {
            stage: "pretrain".into(),
            step: 42,
            loss: 3.465736,
            lr: 0.002,
            accuracy: Some(0.921875),
            wall_ms: 1234,
        };
        let line = r.to_line();
        assert_eq!(
            line,
            "stage=pretrain step=42 loss=3.465736 lr=0.002000 accuracy=0.921875 wall_ms=1234"
        );
        assert_eq!(MetricRecord::parse(&line).unwrap(), r);

        let no_acc = MetricRecord { accuracy: None, ..r };
        assert_eq!(MetricRecord::parse(&no_acc.to_line()).unwrap(), no_acc);
    }

    #[test]
    fn parse_rejects_unknown_keys_and_missing_fields() {
        assert!(MetricRecord::parse("stage=x step=1 loss=0.5 lr=0.1 bogus=2 wall_ms=3").is_err());
        assert!(MetricRecord::parse("stage=x step=1 loss=0.5 lr=0.1").is_err());
    }

    #[test]
    fn writer_appends_to_file_and_keeps_records() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.log");
        {
            let mut w = MetricsWriter::to_file(&path).unwrap();
            w.write("router", 1, 1.0986, 0.01, None).unwrap();
            w.write("router", 2, 0.9, 0.01, Some(0.99)).unwrap();
            w.flush().unwrap();
            assert_eq!(w.records.len(), 2);
        }
        {
            let mut w = MetricsWriter::to_file(&path).unwrap();
            w.write("pretrain", 1, 3.0, 0.002, None).unwrap();
            w.flush().unwrap();
        }
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].starts_with("stage=router step=1"));
        assert!(lines[2].starts_with("stage=pretrain step=1"));
        for line in lines {
            MetricRecord::parse(line).unwrap();
        }
    }

    #[test]
    fn normalize_wall_zeroes_only_the_wall_field() {
        let a = "stage=router step=1 loss=0.5 lr=0.01 wall_ms=17\n";
        let b = "stage=router step=1 loss=0.5 lr=0.01 wall_ms=9001\n";
        assert_eq!(normalize_wall(a), normalize_wall(b));
        assert!(normalize_wall(a).contains("loss=0.5"));
        assert_ne!(normalize_wall("stage=x loss=1.0\n"), normalize_wall("stage=x loss=2.0\n"));
    }
}
