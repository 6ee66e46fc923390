//! Micro-batching analysis driver.
//!
//! Every trigger interval the scheduler discovers streams on each endpoint,
//! pulls the records past each stream's cursor, and turns them into one
//! [`MicroBatch`] per stream. Batches are the partitions of the cycle: each
//! goes exactly once to the analyzer, which runs DMD on the stream's sliding
//! [`SnapshotWindow`]. Rows from all partitions funnel into one collector.

pub mod pipe;
pub mod report;

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::process::{Command, Stdio};
use std::sync::mpsc::{Receiver, RecvTimeoutError};
use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant};

use log::{debug, info, warn};
use num_complex::Complex64;
use thiserror::Error;

use crate::clock::monotonic_ns;
use crate::dmd::{DmdOptions, SnapshotWindow, DEFAULT_WINDOW};
use crate::model::{EndpointAddress, StreamKey, StreamRecord};
use crate::wire::{self, FrameDecoder, Message, WireError};
use pipe::PipeError;
pub use report::{AnalysisReportRow, RowStatus};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AnalyzerKind {
    InProcess,
    /// Shell command spawned once per partition, speaking [`pipe`].
    ExternalPipe(String),
}

impl std::str::FromStr for AnalyzerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "inproc" => Ok(Self::InProcess),
            _ => match s.strip_prefix("pipe:") {
                Some(cmd) if !cmd.trim().is_empty() => Ok(Self::ExternalPipe(cmd.to_string())),
                _ => Err(format!("analyzer must be inproc or pipe:CMD, got {s:?}")),
            },
        }
    }
}

#[derive(Debug, Clone)]
pub struct EngineConfig {
    pub endpoints: Vec<EndpointAddress>,
    pub trigger_interval: Duration,
    pub max_records_per_pull: u32,
    pub analyzer: AnalyzerKind,
    /// Concurrent partition dispatches; `None` means one per partition.
    pub parallelism: Option<usize>,
    pub window: usize,
    pub dmd: DmdOptions,
    pub connect_timeout: Duration,
}

impl EngineConfig {
    pub fn new(endpoints: Vec<EndpointAddress>) -> Self {
        Self {
            endpoints,
            trigger_interval: Duration::from_secs(3),
            max_records_per_pull: 1024,
            analyzer: AnalyzerKind::InProcess,
            parallelism: None,
            window: DEFAULT_WINDOW,
            dmd: DmdOptions::default(),
            connect_timeout: Duration::from_secs(5),
        }
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        let bad = |m: &str| Err(EngineError::InvalidConfig(m.to_string()));
        if self.endpoints.is_empty() {
            return bad("no endpoints");
        }
        if self.trigger_interval.is_zero() {
            return bad("trigger interval must be positive");
        }
        if self.max_records_per_pull == 0 {
            return bad("max_records_per_pull must be ≥ 1");
        }
        if self.parallelism == Some(0) {
            return bad("parallelism must be ≥ 1");
        }
        if self.window < 2 {
            return bad("window must hold at least 2 snapshots");
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid engine config: {0}")]
    InvalidConfig(String),
    #[error("endpoint {endpoint}: {source}")]
    Endpoint {
        endpoint: EndpointAddress,
        source: WireError,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Records of one stream gathered in one trigger cycle.
#[derive(Debug, Clone, PartialEq)]
pub struct MicroBatch {
    pub stream_key: StreamKey,
    pub records: Vec<StreamRecord>,
    pub trigger_seq: u64,
}

impl MicroBatch {
    pub fn step_range(&self) -> (u64, u64) {
        (
            self.records.first().map_or(0, |r| r.step),
            self.records.last().map_or(0, |r| r.step),
        )
    }
}

/// What an analyzer returns for one window.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    pub stability_metric: f64,
    pub eigenvalues: Vec<Complex64>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AnalyzerError {
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error(transparent)]
    Pipe(#[from] PipeError),
    #[error("analyzer process: {0}")]
    Process(String),
}

pub trait Analyzer: Send + Sync {
    fn analyze(&self, stream_key: &str, window: &SnapshotWindow) -> Result<Spectrum, AnalyzerError>;
}

pub struct InProcessAnalyzer {
    pub opts: DmdOptions,
}

impl Analyzer for InProcessAnalyzer {
    fn analyze(&self, _stream_key: &str, window: &SnapshotWindow) -> Result<Spectrum, AnalyzerError> {
        let res = window
            .compute(&self.opts)
            .map_err(|e| AnalyzerError::Numerical(e.to_string()))?;
        Ok(Spectrum {
            stability_metric: res.stability_metric,
            eigenvalues: res.eigenvalues,
        })
    }
}

/// Sends each window to a fresh `sh -c <command>` process over stdin and
/// reads one reply line from its stdout.
pub struct PipeAnalyzer {
    pub command: String,
}

impl Analyzer for PipeAnalyzer {
    fn analyze(&self, stream_key: &str, window: &SnapshotWindow) -> Result<Spectrum, AnalyzerError> {
        let request = pipe::pipe_encode_partition(stream_key, window);
        let proc_err = |e: &dyn std::fmt::Display| AnalyzerError::Process(e.to_string());
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(&self.command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| proc_err(&e))?;
        let mut stdin = child.stdin.take().expect("piped stdin");
        let writer = thread::spawn(move || stdin.write_all(request.as_bytes()));
        let mut out = String::new();
        let read = child
            .stdout
            .take()
            .expect("piped stdout")
            .read_to_string(&mut out);
        let status = child.wait().map_err(|e| proc_err(&e))?;
        let written = writer.join().map_err(|_| proc_err(&"stdin writer panicked"))?;
        read.map_err(|e| proc_err(&e))?;
        if !status.success() {
            return Err(proc_err(&format!("exited with {status}")));
        }
        written.map_err(|e| proc_err(&e))?;
        let line = out.lines().find(|l| !l.trim().is_empty()).unwrap_or("");
        let res = pipe::pipe_decode_result(line)?;
        if res.stream_key != stream_key {
            return Err(PipeError::Protocol(format!(
                "reply for {} while analyzing {stream_key}",
                res.stream_key
            ))
            .into());
        }
        Ok(Spectrum {
            stability_metric: res.stability_metric,
            eigenvalues: res.eigenvalues,
        })
    }
}

pub fn make_analyzer(kind: &AnalyzerKind, opts: DmdOptions) -> Box<dyn Analyzer> {
    match kind {
        AnalyzerKind::InProcess => Box::new(InProcessAnalyzer { opts }),
        AnalyzerKind::ExternalPipe(cmd) => Box::new(PipeAnalyzer {
            command: cmd.clone(),
        }),
    }
}

/// Feeds `batch` into `window` and analyzes the result.
///
/// Never fails: problems become rows with an error status.
pub fn dispatch_partition(
    batch: &MicroBatch,
    window: &mut Option<SnapshotWindow>,
    window_capacity: usize,
    analyzer: &dyn Analyzer,
) -> AnalysisReportRow {
    let (step_lo, step_hi) = batch.step_range();
    let mut row = AnalysisReportRow {
        stream_key: batch.stream_key.to_string(),
        trigger_seq: batch.trigger_seq,
        step_lo,
        step_hi,
        records: batch.records.len(),
        status: RowStatus::Ok,
        stability_metric: None,
        eigenvalues: Vec::new(),
        analyzed_at_ns: 0,
        latency_min_ns: 0,
        latency_max_ns: 0,
        latency_mean_ns: 0.0,
    };

    let mut fed = Ok(());
    for rec in &batch.records {
        let w = match window {
            Some(w) => w,
            None => match SnapshotWindow::new(rec.payload.len(), window_capacity) {
                Ok(w) => window.insert(w),
                Err(e) => {
                    fed = Err(e.to_string());
                    break;
                }
            },
        };
        if let Err(e) = w.update(rec) {
            fed = Err(e.to_string());
            break;
        }
    }

    match (fed, window.as_ref()) {
        (Err(e), _) => row.status = RowStatus::Error(e),
        (Ok(()), Some(w)) if w.len() >= 2 => {
            match analyzer.analyze(batch.stream_key.as_str(), w) {
                Ok(res) => {
                    row.stability_metric = Some(res.stability_metric);
                    row.eigenvalues = res.eigenvalues;
                }
                Err(e) => row.status = RowStatus::Error(e.to_string()),
            }
        }
        (Ok(()), _) => row.status = RowStatus::WarmingUp,
    }

    row.analyzed_at_ns = monotonic_ns();
    let lat: Vec<u64> = batch
        .records
        .iter()
        .map(|r| row.analyzed_at_ns.saturating_sub(r.produced_at))
        .collect();
    if !lat.is_empty() {
        row.latency_min_ns = *lat.iter().min().unwrap();
        row.latency_max_ns = *lat.iter().max().unwrap();
        row.latency_mean_ns = lat.iter().sum::<u64>() as f64 / lat.len() as f64;
    }
    row
}

/// Persistent request/response connection to one endpoint.
pub struct EndpointClient {
    address: EndpointAddress,
    conn: Option<(TcpStream, FrameDecoder)>,
    connect_timeout: Duration,
}

impl EndpointClient {
    pub fn new(address: EndpointAddress, connect_timeout: Duration) -> Self {
        Self {
            address,
            conn: None,
            connect_timeout,
        }
    }

    pub fn address(&self) -> &EndpointAddress {
        &self.address
    }

    fn err(&self, source: WireError) -> EngineError {
        EngineError::Endpoint {
            endpoint: self.address.clone(),
            source,
        }
    }

    fn request(&mut self, msg: &Message) -> Result<Message, EngineError> {
        if self.conn.is_none() {
            let addrs = (self.address.host.as_str(), self.address.port)
                .to_socket_addrs()
                .map_err(|e| self.err(e.into()))?;
            let mut last = None;
            for sa in addrs {
                match TcpStream::connect_timeout(&sa, self.connect_timeout) {
                    Ok(s) => {
                        s.set_nodelay(true).map_err(|e| self.err(e.into()))?;
                        s.set_read_timeout(Some(Duration::from_secs(30)))
                            .map_err(|e| self.err(e.into()))?;
                        self.conn = Some((s, FrameDecoder::default()));
                        break;
                    }
                    Err(e) => last = Some(e),
                }
            }
            if self.conn.is_none() {
                let e = last.unwrap_or_else(|| std::io::Error::other("no addresses resolved"));
                return Err(self.err(e.into()));
            }
        }
        let (stream, decoder) = self.conn.as_mut().unwrap();
        let result = wire::write_message(stream, msg).and_then(|_| decoder.read_message(stream));
        match result {
            Ok(reply) => Ok(reply),
            Err(e) => {
                self.conn = None;
                Err(self.err(e))
            }
        }
    }

    pub fn list_streams(&mut self) -> Result<Vec<String>, EngineError> {
        match self.request(&Message::ListStreams)? {
            Message::StreamList { keys } => Ok(keys),
            other => Err(self.unexpected(&other)),
        }
    }

    pub fn read_since(
        &mut self,
        stream_key: &str,
        after_step: u64,
        max_records: u32,
    ) -> Result<Vec<wire::WireRecord>, EngineError> {
        let req = Message::ReadSince {
            stream_key: stream_key.to_string(),
            after_step,
            max_records,
        };
        match self.request(&req)? {
            Message::RecordBatch { records } => Ok(records),
            other => Err(self.unexpected(&other)),
        }
    }

    fn unexpected(&mut self, msg: &Message) -> EngineError {
        self.conn = None;
        self.err(WireError::Protocol(format!(
            "unexpected reply type 0x{:02X}",
            msg.msg_type()
        )))
    }
}

struct StreamState {
    endpoint: usize,
    cursor: u64,
    window: Option<SnapshotWindow>,
}

/// Control messages for [`Engine::run`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Control {
    /// Run exactly one more cycle, then stop.
    Drain,
    /// Stop without another cycle.
    Stop,
}

pub struct Engine {
    config: EngineConfig,
    clients: Vec<EndpointClient>,
    streams: BTreeMap<StreamKey, StreamState>,
    trigger_seq: u64,
    analyzer: Box<dyn Analyzer>,
    degraded_cycles: u64,
}

/// Observer of engine output.
pub trait RowSink {
    fn cycle_done(&mut self, batches: &[MicroBatch], rows: &[AnalysisReportRow]) -> std::io::Result<()>;
}

impl RowSink for Vec<AnalysisReportRow> {
    fn cycle_done(&mut self, _: &[MicroBatch], rows: &[AnalysisReportRow]) -> std::io::Result<()> {
        self.extend_from_slice(rows);
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunInfo {
    pub cycles: u64,
    pub degraded_cycles: u64,
    pub started_at_ns: u64,
    /// When the last cycle (the drain cycle, if drained) completed.
    pub finished_at_ns: u64,
    /// Start time of every cycle, for cadence checks.
    pub cycle_starts_ns: Vec<u64>,
}

impl Engine {
    pub fn new(config: EngineConfig) -> Result<Self, EngineError> {
        config.validate()?;
        let analyzer = make_analyzer(&config.analyzer, config.dmd);
        Ok(Self::with_analyzer(config, analyzer))
    }

    pub fn with_analyzer(config: EngineConfig, analyzer: Box<dyn Analyzer>) -> Self {
        let clients = config
            .endpoints
            .iter()
            .map(|a| EndpointClient::new(a.clone(), config.connect_timeout))
            .collect();
        Self {
            config,
            clients,
            streams: BTreeMap::new(),
            trigger_seq: 0,
            analyzer,
            degraded_cycles: 0,
        }
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn known_streams(&self) -> Vec<StreamKey> {
        self.streams.keys().cloned().collect()
    }

    pub fn cursor(&self, key: &StreamKey) -> Option<u64> {
        self.streams.get(key).map(|s| s.cursor)
    }

    pub fn degraded_cycles(&self) -> u64 {
        self.degraded_cycles
    }

    /// Discovers streams and pulls every record past each cursor.
    ///
    /// Unreachable endpoints are skipped; the cycle is then counted as
    /// degraded.
    pub fn run_trigger_cycle(&mut self) -> Vec<MicroBatch> {
        self.trigger_seq += 1;
        let seq = self.trigger_seq;
        let page = self.config.max_records_per_pull;
        let mut batches = Vec::new();
        let mut degraded = false;
        for (idx, client) in self.clients.iter_mut().enumerate() {
            let keys = match client.list_streams() {
                Ok(k) => k,
                Err(e) => {
                    warn!("degraded cycle {seq}: {e}");
                    degraded = true;
                    continue;
                }
            };
            for k in keys {
                match k.parse::<StreamKey>() {
                    Ok(key) => {
                        self.streams.entry(key).or_insert(StreamState {
                            endpoint: idx,
                            cursor: 0,
                            window: None,
                        });
                    }
                    Err(e) => warn!("ignoring stream: {e}"),
                }
            }
            for (key, state) in self.streams.iter_mut().filter(|(_, s)| s.endpoint == idx) {
                let mut records = Vec::new();
                loop {
                    match client.read_since(key.as_str(), state.cursor, page) {
                        Ok(recs) => {
                            let full = recs.len() as u32 == page;
                            for r in recs {
                                state.cursor = r.step;
                                records.push(StreamRecord {
                                    stream_key: key.clone(),
                                    step: r.step,
                                    payload: r.values,
                                    produced_at: r.produced_at_ns,
                                });
                            }
                            if !full {
                                break;
                            }
                        }
                        Err(e) => {
                            warn!("degraded cycle {seq}: {e}");
                            degraded = true;
                            break;
                        }
                    }
                }
                if !records.is_empty() {
                    batches.push(MicroBatch {
                        stream_key: key.clone(),
                        records,
                        trigger_seq: seq,
                    });
                }
            }
        }
        if degraded {
            self.degraded_cycles += 1;
        }
        batches
    }

    /// Analyzes every batch exactly once, up to `parallelism` at a time.
    /// Rows come back in batch order.
    pub fn dispatch(&mut self, batches: &[MicroBatch]) -> Vec<AnalysisReportRow> {
        if batches.is_empty() {
            return Vec::new();
        }
        let capacity = self.config.window;
        // Lend each stream's window to exactly one worker.
        let mut jobs: Vec<(usize, &MicroBatch, Option<SnapshotWindow>)> = batches
            .iter()
            .enumerate()
            .map(|(i, b)| {
                let w = self.streams.get_mut(&b.stream_key).and_then(|s| s.window.take());
                (i, b, w)
            })
            .collect();
        jobs.reverse();
        let workers = self.config.parallelism.unwrap_or(batches.len()).min(batches.len());
        let queue = Mutex::new(jobs);
        let done = Mutex::new(Vec::with_capacity(batches.len()));
        let analyzer = self.analyzer.as_ref();
        thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let Some((i, batch, mut window)) = queue.lock().unwrap().pop() else {
                        break;
                    };
                    let row = dispatch_partition(batch, &mut window, capacity, analyzer);
                    done.lock().unwrap().push((i, row, window));
                });
            }
        });
        let mut done = done.into_inner().unwrap();
        done.sort_by_key(|(i, _, _)| *i);
        done.into_iter()
            .map(|(i, row, window)| {
                if let Some(state) = self.streams.get_mut(&batches[i].stream_key) {
                    state.window = window;
                }
                row
            })
            .collect()
    }

    /// One full cycle: pull, then dispatch.
    pub fn cycle(&mut self) -> (Vec<MicroBatch>, Vec<AnalysisReportRow>) {
        let batches = self.run_trigger_cycle();
        let rows = self.dispatch(&batches);
        (batches, rows)
    }

    /// Runs cycles on the trigger cadence until told to drain or stop, or
    /// until `control` disconnects (treated as drain).
    pub fn run(&mut self, control: &Receiver<Control>, sink: &mut dyn RowSink) -> std::io::Result<RunInfo> {
        let interval = self.config.trigger_interval;
        let mut info = RunInfo {
            started_at_ns: monotonic_ns(),
            ..Default::default()
        };
        let mut next = Instant::now() + interval;
        let mut last_cycle = false;
        loop {
            let wait = next.saturating_duration_since(Instant::now());
            match control.recv_timeout(wait) {
                Ok(Control::Stop) => break,
                Ok(Control::Drain) | Err(RecvTimeoutError::Disconnected) => last_cycle = true,
                Err(RecvTimeoutError::Timeout) => {}
            }
            info.cycle_starts_ns.push(monotonic_ns());
            let (batches, rows) = self.cycle();
            info.cycles += 1;
            debug!(
                "cycle {}: {} partitions, {} records",
                self.trigger_seq,
                batches.len(),
                batches.iter().map(|b| b.records.len()).sum::<usize>()
            );
            sink.cycle_done(&batches, &rows)?;
            info.finished_at_ns = monotonic_ns();
            if last_cycle {
                info!("drain cycle {} complete", self.trigger_seq);
                break;
            }
            // Cycles never overlap: a late cycle pushes the next one out.
            let now = Instant::now();
            next += interval;
            while next <= now {
                next += interval;
            }
        }
        info.degraded_cycles = self.degraded_cycles;
        Ok(info)
    }
}
