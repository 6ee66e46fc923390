//! Line-oriented text protocol between the engine and an external analyzer
//! process.
//!
//! Request (one per partition):
//!
//! ```text
//! STREAM <stream_key> <n> <m>
//! <step> <v1> … <vn>        (m lines)
//! <blank line>
//! ```
//!
//! Reply (one line):
//!
//! ```text
//! RESULT <stream_key> <step_lo> <step_hi> <metric> <r> <re1> <im1> … <re_r> <im_r>
//! ```
//!
//! An analyzer that cannot produce a result answers `ERROR <stream_key> <text>`.
//! Floats are written in shortest round-trip form, so both sides see
//! bit-identical values.

use std::fmt::Write as _;
use std::io::BufRead;

use num_complex::Complex64;
use thiserror::Error;

use crate::dmd::{dmd_from_snapshots, DmdOptions, SnapshotWindow};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PipeError {
    #[error("analyzer-protocol error: {0}")]
    Protocol(String),
    #[error("analyzer reported: {0}")]
    Remote(String),
}

/// Shortest decimal that parses back to the same bits.
pub fn fmt_f64(x: f64) -> String {
    let a = x.abs();
    if x == 0.0 || !x.is_finite() || (1e-5..1e16).contains(&a) {
        format!("{x}")
    } else {
        format!("{x:e}")
    }
}

fn push_request_header(out: &mut String, stream_key: &str, n: usize, m: usize) {
    let _ = writeln!(out, "STREAM {stream_key} {n} {m}");
}

/// Encodes a window's snapshots as one request block.
pub fn encode_request<'a, I>(stream_key: &str, n: usize, snapshots: I) -> String
where
    I: ExactSizeIterator<Item = (u64, &'a [f64])>,
{
    let mut out = String::new();
    push_request_header(&mut out, stream_key, n, snapshots.len());
    for (step, values) in snapshots {
        let _ = write!(out, "{step}");
        for v in values {
            out.push(' ');
            out.push_str(&fmt_f64(*v));
        }
        out.push('\n');
    }
    out.push('\n');
    out
}

pub fn pipe_encode_partition(stream_key: &str, window: &SnapshotWindow) -> String {
    let snaps: Vec<(u64, &[f64])> = window.snapshots().collect();
    encode_request(stream_key, window.dim(), snaps.into_iter())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipeRequest {
    pub stream_key: String,
    pub n: usize,
    pub snapshots: Vec<(u64, Vec<f64>)>,
}

/// Reads the next request block; `Ok(None)` on clean end of input.
pub fn read_request<R: BufRead>(reader: &mut R) -> Result<Option<PipeRequest>, PipeError> {
    let mut line = String::new();
    let io = |e: std::io::Error| PipeError::Protocol(e.to_string());
    loop {
        line.clear();
        if reader.read_line(&mut line).map_err(io)? == 0 {
            return Ok(None);
        }
        if !line.trim().is_empty() {
            break;
        }
    }
    let header = std::mem::take(&mut line);
    let head: Vec<&str> = header.split_whitespace().collect();
    let [tag, key, n, m] = head[..] else {
        return Err(PipeError::Protocol(format!("bad header {:?}", header.trim_end())));
    };
    if tag != "STREAM" {
        return Err(PipeError::Protocol(format!("expected STREAM, got {tag:?}")));
    }
    let parse_usize =
        |s: &str| s.parse::<usize>().map_err(|_| PipeError::Protocol(format!("bad count {s:?}")));
    let (n, m) = (parse_usize(n)?, parse_usize(m)?);
    let mut snapshots = Vec::with_capacity(m);
    for i in 0..m {
        line.clear();
        if reader.read_line(&mut line).map_err(io)? == 0 {
            return Err(PipeError::Protocol(format!("truncated after {i} of {m} rows")));
        }
        let mut fields = line.split_whitespace();
        let step = fields
            .next()
            .and_then(|s| s.parse::<u64>().ok())
            .ok_or_else(|| PipeError::Protocol(format!("bad step in row {i}")))?;
        let values = fields
            .map(|s| s.parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|_| PipeError::Protocol(format!("bad value in row {i}")))?;
        if values.len() != n {
            return Err(PipeError::Protocol(format!(
                "row {i} has {} values, header says {n}",
                values.len()
            )));
        }
        snapshots.push((step, values));
    }
    line.clear();
    reader.read_line(&mut line).map_err(io)?;
    if !line.trim().is_empty() {
        return Err(PipeError::Protocol("missing blank line after rows".into()));
    }
    Ok(Some(PipeRequest {
        stream_key: key.to_string(),
        n,
        snapshots,
    }))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipeResult {
    pub stream_key: String,
    pub step_lo: u64,
    pub step_hi: u64,
    pub stability_metric: f64,
    pub eigenvalues: Vec<Complex64>,
}

pub fn format_result(r: &PipeResult) -> String {
    let mut out = format!(
        "RESULT {} {} {} {} {}",
        r.stream_key,
        r.step_lo,
        r.step_hi,
        fmt_f64(r.stability_metric),
        r.eigenvalues.len()
    );
    for l in &r.eigenvalues {
        out.push(' ');
        out.push_str(&fmt_f64(l.re));
        out.push(' ');
        out.push_str(&fmt_f64(l.im));
    }
    out
}

pub fn format_error(stream_key: &str, detail: &str) -> String {
    format!("ERROR {stream_key} {}", detail.replace('\n', " "))
}

/// Parses one reply line.
pub fn pipe_decode_result(line: &str) -> Result<PipeResult, PipeError> {
    let line = line.trim_end_matches(['\r', '\n']);
    let bad = || PipeError::Protocol(format!("malformed reply {line:?}"));
    let fields: Vec<&str> = line.split(' ').collect();
    match fields.first() {
        Some(&"RESULT") => {}
        Some(&"ERROR") if fields.len() >= 2 => {
            return Err(PipeError::Remote(fields[2..].join(" ")));
        }
        _ => return Err(bad()),
    }
    if fields.len() < 6 {
        return Err(bad());
    }
    let r: usize = fields[5].parse().map_err(|_| bad())?;
    if fields.len() != 6 + 2 * r {
        return Err(bad());
    }
    let f = |s: &str| s.parse::<f64>().map_err(|_| bad());
    let eigenvalues = fields[6..]
        .chunks_exact(2)
        .map(|c| Ok(Complex64::new(f(c[0])?, f(c[1])?)))
        .collect::<Result<Vec<_>, PipeError>>()?;
    Ok(PipeResult {
        stream_key: fields[1].to_string(),
        step_lo: fields[2].parse().map_err(|_| bad())?,
        step_hi: fields[3].parse().map_err(|_| bad())?,
        stability_metric: f(fields[4])?,
        eigenvalues,
    })
}

/// Runs DMD on one request and formats the reply line.
pub fn answer_request(req: &PipeRequest, opts: &DmdOptions) -> String {
    let cols: Vec<&[f64]> = req.snapshots.iter().map(|(_, v)| v.as_slice()).collect();
    match dmd_from_snapshots(&cols, opts) {
        Ok(res) => format_result(&PipeResult {
            stream_key: req.stream_key.clone(),
            step_lo: req.snapshots.first().map_or(0, |s| s.0),
            step_hi: req.snapshots.last().map_or(0, |s| s.0),
            stability_metric: res.stability_metric,
            eigenvalues: res.eigenvalues,
        }),
        Err(e) => format_error(&req.stream_key, &e.to_string()),
    }
}

/// Parses `step,v1,...,vn` rows; a first line that does not parse is taken
/// as a header.
pub fn read_snapshot_csv(stream_key: &str, text: &str) -> Result<PipeRequest, PipeError> {
    let mut snapshots = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let mut fields = line.split(',').map(str::trim);
        let step = fields.next().and_then(|s| s.parse::<u64>().ok());
        let values = fields.map(str::parse::<f64>).collect::<Result<Vec<_>, _>>();
        match (step, values) {
            (Some(step), Ok(values)) => snapshots.push((step, values)),
            _ if i == 0 => continue,
            _ => return Err(PipeError::Protocol(format!("bad row {}: {line:?}", i + 1))),
        }
    }
    let n = snapshots.first().map_or(0, |s| s.1.len());
    if snapshots.iter().any(|s| s.1.len() != n) {
        return Err(PipeError::Protocol("rows differ in length".into()));
    }
    Ok(PipeRequest {
        stream_key: stream_key.to_string(),
        n,
        snapshots,
    })
}
