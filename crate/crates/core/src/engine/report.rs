//! Engine output: one CSV row per analyzed partition, a per-record analyzed
//! log used for reconciliation, and a JSON summary.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::pipe::fmt_f64;
use super::{MicroBatch, RowSink, RunInfo};

pub const REPORT_HEADER: &str = "stream_key,trigger_seq,step_lo,step_hi,records,status,\
stability_metric,rank,eigenvalues,analyzed_at_ns,latency_min_ns,latency_max_ns,latency_mean_ns";

/// Columns from `analyzed_at_ns` on carry clock readings.
pub const TIMING_COLUMNS: usize = 4;

pub const ANALYZED_HEADER: &str = "stream_key,step,trigger_seq,analyzed_at_ns";

#[derive(Debug, Clone, PartialEq)]
pub enum RowStatus {
    Ok,
    /// Fewer than two snapshots seen so far.
    WarmingUp,
    Error(String),
}

impl RowStatus {
    fn to_field(&self) -> String {
        match self {
            RowStatus::Ok => "ok".into(),
            RowStatus::WarmingUp => "warming-up".into(),
            RowStatus::Error(e) => format!("error: {}", e.replace([',', '\n', '\r'], ";")),
        }
    }

    fn from_field(s: &str) -> Self {
        match s {
            "ok" => RowStatus::Ok,
            "warming-up" => RowStatus::WarmingUp,
            other => RowStatus::Error(other.strip_prefix("error: ").unwrap_or(other).to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisReportRow {
    pub stream_key: String,
    pub trigger_seq: u64,
    pub step_lo: u64,
    pub step_hi: u64,
    pub records: usize,
    pub status: RowStatus,
    pub stability_metric: Option<f64>,
    pub eigenvalues: Vec<Complex64>,
    pub analyzed_at_ns: u64,
    pub latency_min_ns: u64,
    pub latency_max_ns: u64,
    pub latency_mean_ns: f64,
}

impl AnalysisReportRow {
    /// Eigenvalues are written as `re im` pairs joined by `;`.
    pub fn to_csv(&self) -> String {
        let eig = self
            .eigenvalues
            .iter()
            .map(|l| format!("{} {}", fmt_f64(l.re), fmt_f64(l.im)))
            .collect::<Vec<_>>()
            .join(";");
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{:.1}",
            self.stream_key,
            self.trigger_seq,
            self.step_lo,
            self.step_hi,
            self.records,
            self.status.to_field(),
            self.stability_metric.map(fmt_f64).unwrap_or_default(),
            self.eigenvalues.len(),
            eig,
            self.analyzed_at_ns,
            self.latency_min_ns,
            self.latency_max_ns,
            self.latency_mean_ns
        )
    }

    pub fn from_csv(line: &str) -> Result<Self, String> {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 13 {
            return Err(format!("expected 13 columns, got {}: {line:?}", f.len()));
        }
        let int = |i: usize| f[i].parse::<u64>().map_err(|_| format!("column {i} in {line:?}"));
        let eigenvalues = if f[8].is_empty() {
            Vec::new()
        } else {
            f[8].split(';')
                .map(|pair| {
                    let (re, im) = pair.split_once(' ').ok_or("eigenvalue pair")?;
                    Ok(Complex64::new(
                        re.parse().map_err(|_| "eigenvalue re")?,
                        im.parse().map_err(|_| "eigenvalue im")?,
                    ))
                })
                .collect::<Result<Vec<_>, &str>>()
                .map_err(|e| format!("{e} in {line:?}"))?
        };
        Ok(Self {
            stream_key: f[0].to_string(),
            trigger_seq: int(1)?,
            step_lo: int(2)?,
            step_hi: int(3)?,
            records: int(4)? as usize,
            status: RowStatus::from_field(f[5]),
            stability_metric: if f[6].is_empty() {
                None
            } else {
                Some(f[6].parse().map_err(|_| format!("metric in {line:?}"))?)
            },
            eigenvalues,
            analyzed_at_ns: int(9)?,
            latency_min_ns: int(10)?,
            latency_max_ns: int(11)?,
            latency_mean_ns: f[12].parse().map_err(|_| format!("latency in {line:?}"))?,
        })
    }
}

pub fn read_report(path: &Path) -> io::Result<Vec<AnalysisReportRow>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(|l| AnalysisReportRow::from_csv(l).map_err(io::Error::other))
        .collect()
}

/// One record as consumed by the engine.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnalyzedRecord {
    pub stream_key: String,
    pub step: u64,
    pub trigger_seq: u64,
    pub analyzed_at_ns: u64,
}

pub fn read_analyzed_log(path: &Path) -> io::Result<Vec<AnalyzedRecord>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for line in text.lines().skip(1).filter(|l| !l.is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        let bad = || io::Error::other(format!("malformed analyzed-log line {line:?}"));
        if f.len() != 4 {
            return Err(bad());
        }
        out.push(AnalyzedRecord {
            stream_key: f[0].to_string(),
            step: f[1].parse().map_err(|_| bad())?,
            trigger_seq: f[2].parse().map_err(|_| bad())?,
            analyzed_at_ns: f[3].parse().map_err(|_| bad())?,
        });
    }
    Ok(out)
}

/// Nearest-rank percentile of an ascending slice; `q` in (0, 1].
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let rank = (q * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LatencySummary {
    pub count: usize,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub max_ms: f64,
}

impl LatencySummary {
    pub fn from_ns(values: &mut [f64]) -> Self {
        values.sort_by(f64::total_cmp);
        if values.is_empty() {
            return Self::default();
        }
        Self {
            count: values.len(),
            p50_ms: percentile(values, 0.50) / 1e6,
            p95_ms: percentile(values, 0.95) / 1e6,
            max_ms: values[values.len() - 1] / 1e6,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StreamSummary {
    pub records: u64,
    pub partitions: u64,
    pub analyzed: u64,
    pub warming_up: u64,
    pub errors: u64,
    /// Measured from arrival at the endpoint to analysis.
    pub latency: LatencySummary,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EngineSummary {
    pub cycles: u64,
    pub degraded_cycles: u64,
    pub started_at_ns: u64,
    pub finished_at_ns: u64,
    pub streams: BTreeMap<String, StreamSummary>,
}

/// Writes report rows and the analyzed log as cycles complete.
pub struct ReportWriter {
    report: BufWriter<File>,
    analyzed: Option<BufWriter<File>>,
    streams: BTreeMap<String, (StreamSummary, Vec<f64>)>,
}

impl ReportWriter {
    pub fn create(report: &Path, analyzed: Option<&Path>) -> io::Result<Self> {
        let mut r = BufWriter::new(File::create(report)?);
        writeln!(r, "{REPORT_HEADER}")?;
        let analyzed = match analyzed {
            Some(p) => {
                let mut w = BufWriter::new(File::create(p)?);
                writeln!(w, "{ANALYZED_HEADER}")?;
                Some(w)
            }
            None => None,
        };
        Ok(Self {
            report: r,
            analyzed,
            streams: BTreeMap::new(),
        })
    }

    pub fn summary(&self, info: &RunInfo) -> EngineSummary {
        EngineSummary {
            cycles: info.cycles,
            degraded_cycles: info.degraded_cycles,
            started_at_ns: info.started_at_ns,
            finished_at_ns: info.finished_at_ns,
            streams: self
                .streams
                .iter()
                .map(|(k, (s, lat))| {
                    let mut s = s.clone();
                    s.latency = LatencySummary::from_ns(&mut lat.clone());
                    (k.clone(), s)
                })
                .collect(),
        }
    }
}

impl RowSink for ReportWriter {
    fn cycle_done(&mut self, batches: &[MicroBatch], rows: &[AnalysisReportRow]) -> io::Result<()> {
        for (batch, row) in batches.iter().zip(rows) {
            writeln!(self.report, "{}", row.to_csv())?;
            let (s, lat) = self.streams.entry(row.stream_key.clone()).or_default();
            s.records += batch.records.len() as u64;
            s.partitions += 1;
            match row.status {
                RowStatus::Ok => s.analyzed += 1,
                RowStatus::WarmingUp => s.warming_up += 1,
                RowStatus::Error(_) => s.errors += 1,
            }
            for r in &batch.records {
                lat.push(row.analyzed_at_ns.saturating_sub(r.produced_at) as f64);
                if let Some(w) = &mut self.analyzed {
                    writeln!(
                        w,
                        "{},{},{},{}",
                        row.stream_key, r.step, row.trigger_seq, row.analyzed_at_ns
                    )?;
                }
            }
        }
        self.report.flush()?;
        if let Some(w) = &mut self.analyzed {
            w.flush()?;
        }
        Ok(())
    }
}
