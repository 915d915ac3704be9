//! Line-delimited metrics persistence.
//!
//! `metrics.jsonl` holds only quantities that are deterministic given the
//! config, so reruns are byte-identical. Wall-clock goes to a sibling
//! `timings.jsonl` keyed by step.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objective::{MetricsRecord, MetricsSink};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const TIMINGS_FILE: &str = "timings.jsonl";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingRecord {
    pub step: usize,
    pub elapsed_seconds: f64,
}

/// Appends one JSON line per record, flushing after each so an aborted run
/// leaves every completed line on disk.
pub struct JsonlSink {
    metrics: BufWriter<File>,
    timings: BufWriter<File>,
    last_step: Option<usize>,
}

impl JsonlSink {
    /// Creates `metrics.jsonl` and `timings.jsonl` in `dir`; fails if either exists.
    pub fn create(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let open = |name: &str| -> Result<BufWriter<File>> {
            let f = OpenOptions::new().append(true).create_new(true).open(dir.join(name))?;
            Ok(BufWriter::new(f))
        };
        Ok(Self { metrics: open(METRICS_FILE)?, timings: open(TIMINGS_FILE)?, last_step: None })
    }
}

impl MetricsSink for JsonlSink {
    fn record(&mut self, record: &MetricsRecord, elapsed: Duration) -> Result<()> {
        if !record.all_finite() {
            return Err(Error::Metrics(format!("refusing to write non-finite record at step {}", record.step)));
        }
        if self.last_step.is_some_and(|s| record.step <= s) {
            return Err(Error::Metrics(format!("step {} is not after step {:?}", record.step, self.last_step)));
        }
        self.last_step = Some(record.step);
        writeln!(self.metrics, "{}", serde_json::to_string(record)?)?;
        self.metrics.flush()?;
        let t = TimingRecord { step: record.step, elapsed_seconds: elapsed.as_secs_f64() };
        writeln!(self.timings, "{}", serde_json::to_string(&t)?)?;
        self.timings.flush()?;
        Ok(())
    }
}

/// Reads a metrics stream, rejecting truncated or out-of-order files.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = std::fs::read_to_string(path)?;
    if text.is_empty() {
        return Ok(Vec::new());
    }
    if !text.ends_with('\n') {
        return Err(Error::Metrics(format!("{}: truncated final line", path.display())));
    }
    let mut out: Vec<MetricsRecord> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let rec: MetricsRecord = serde_json::from_str(line)
            .map_err(|e| Error::Metrics(format!("{}:{}: {e}", path.display(), i + 1)))?;
        if out.last().is_some_and(|p| rec.step <= p.step) {
            return Err(Error::Metrics(format!("{}:{}: steps not increasing", path.display(), i + 1)));
        }
        if !rec.all_finite() {
            return Err(Error::Metrics(format!("{}:{}: non-finite value", path.display(), i + 1)));
        }
        out.push(rec);
    }
    Ok(out)
}

/// Every metrics file under `dir`, sorted, relative to `dir`.
pub fn metrics_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d)? {
            let p = entry?.path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().is_some_and(|n| n == METRICS_FILE) {
                out.push(p.strip_prefix(dir).unwrap_or(&p).to_path_buf());
            }
        }
    }
    out.sort();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(step: usize) -> MetricsRecord {
        MetricsRecord {
            step,
            lr: 1e-3,
            total: 0.1 * step as f64,
            kd: 0.1,
            ce: 0.1,
            kl: 0.0,
            intra: 0.0,
            inter: 0.0,
            random: 0.0,
            manifold: 0.0,
            eval_acc: (step == 2).then_some(0.5),
            layers: Vec::new(),
        }
    }

    #[test]
    fn roundtrip_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let mut sink = JsonlSink::create(dir.path()).unwrap();
        sink.record(&rec(1), Duration::from_millis(5)).unwrap();
        sink.record(&rec(2), Duration::from_millis(9)).unwrap();
        assert!(sink.record(&rec(2), Duration::ZERO).is_err());
        drop(sink);
        let path = dir.path().join(METRICS_FILE);
        assert_eq!(read_metrics(&path).unwrap(), vec![rec(1), rec(2)]);

        let text = std::fs::read_to_string(&path).unwrap();
        std::fs::write(&path, &text[..text.len() - 7]).unwrap();
        assert!(matches!(read_metrics(&path), Err(Error::Metrics(_))));
        assert!(JsonlSink::create(dir.path()).is_err(), "existing stream must not be reused");
        assert_eq!(metrics_files(dir.path()).unwrap(), vec![PathBuf::from(METRICS_FILE)]);
    }

    #[test]
    fn non_finite_records_are_refused() {
        let dir = tempfile::tempdir().unwrap();
        let mut sink = JsonlSink::create(dir.path()).unwrap();
        let mut r = rec(1);
        r.inter = f64::NAN;
        assert!(matches!(sink.record(&r, Duration::ZERO), Err(Error::Metrics(_))));
    }
}
