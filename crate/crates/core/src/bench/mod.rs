//! Workflow orchestration and metrics.
//!
//! `run_workflow` starts endpoints, the engine and the generator as child
//! processes of one executable, waits for the generator, drains the engine,
//! and turns the logs they leave behind into `report.csv`, `metrics.json`
//! and SVG plots.

pub mod metrics;
pub mod plot;

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc;
use std::thread;
use std::time::{Duration, Instant};

use log::{info, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::broker::{BackpressurePolicy, ENDPOINTS_ENV};
use crate::endpoint::read_final_stats;
use crate::engine::report::{read_analyzed_log, read_report, AnalysisReportRow, EngineSummary, RowStatus};
use crate::engine::AnalyzerKind;
use crate::sim::{read_emission_log, Dynamics, GeneratorStats, IoMode, SimConfig};
pub use metrics::{measure_latency, FlowMetrics, LatencyMeasurement, MetricsSummary, ReconcileError};
use plot::{panel_grid, Panel};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const EXIT_RECONCILIATION: i32 = 3;

#[derive(Debug, Error)]
pub enum WorkflowError {
    #[error("invalid config: {0}")]
    Validation(String),
    #[error("component failure: {0}")]
    Runtime(String),
    #[error("reconciliation failed: {0}")]
    Reconciliation(String),
}

impl WorkflowError {
    pub fn exit_code(&self) -> i32 {
        match self {
            WorkflowError::Validation(_) => EXIT_VALIDATION,
            WorkflowError::Runtime(_) => EXIT_RUNTIME,
            WorkflowError::Reconciliation(_) => EXIT_RECONCILIATION,
        }
    }
}

fn d_steps() -> u64 {
    2000
}
fn d_interval() -> u64 {
    5
}
fn d_field() -> String {
    "pressure".into()
}
fn d_queue() -> usize {
    64
}
fn d_trigger() -> u64 {
    3000
}
fn d_analyzer() -> String {
    "inproc".into()
}
fn d_window() -> usize {
    crate::dmd::DEFAULT_WINDOW
}
fn d_pull() -> u32 {
    1024
}
fn d_retention() -> usize {
    crate::endpoint::DEFAULT_RETENTION
}
fn d_timeout() -> u64 {
    600
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSection {
    pub ranks: u32,
    /// Same syntax as `simgen --dynamics`.
    pub dynamics: String,
    #[serde(default = "d_steps")]
    pub steps: u64,
    #[serde(default = "d_interval")]
    pub interval: u64,
    #[serde(default)]
    pub delay_ms: f64,
    #[serde(default = "d_field")]
    pub field_name: String,
    #[serde(default = "d_queue")]
    pub queue_capacity: usize,
    #[serde(default)]
    pub backpressure: BackpressurePolicy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineSection {
    #[serde(default = "d_trigger")]
    pub trigger_ms: u64,
    #[serde(default)]
    pub parallelism: Option<usize>,
    /// `inproc` or `pipe:CMD`.
    #[serde(default = "d_analyzer")]
    pub analyzer: String,
    #[serde(default = "d_window")]
    pub window: usize,
    #[serde(default = "d_pull")]
    pub max_records_per_pull: u32,
    #[serde(default)]
    pub r_max: Option<usize>,
    /// Must equal the top-level list when given.
    #[serde(default)]
    pub endpoints: Option<Vec<String>>,
}

impl Default for EngineSection {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields defaulted")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EndpointSection {
    #[serde(default = "d_retention")]
    pub retention: usize,
}

impl Default for EndpointSection {
    fn default() -> Self {
        Self {
            retention: d_retention(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkflowConfig {
    pub output_dir: PathBuf,
    /// Bind addresses, one endpoint each; port 0 picks a free port.
    pub endpoints: Vec<String>,
    pub generator: GeneratorSection,
    #[serde(default)]
    pub engine: EngineSection,
    #[serde(default)]
    pub endpoint: EndpointSection,
    #[serde(default = "d_timeout")]
    pub run_timeout_s: u64,
}

fn check_bind(addr: &str) -> Result<(), String> {
    let (host, port) = addr
        .rsplit_once(':')
        .ok_or_else(|| format!("bind address {addr:?} needs host:port"))?;
    if host.is_empty() || port.parse::<u16>().is_err() {
        return Err(format!("bad bind address {addr:?}"));
    }
    Ok(())
}

impl WorkflowConfig {
    pub fn from_json(text: &str) -> Result<Self, WorkflowError> {
        serde_json::from_str(text).map_err(|e| WorkflowError::Validation(e.to_string()))
    }

    /// Reads, applies the endpoint-list environment override, validates.
    pub fn load(path: &Path) -> Result<Self, WorkflowError> {
        let text = fs::read_to_string(path)
            .map_err(|e| WorkflowError::Validation(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text)?;
        if let Ok(list) = std::env::var(ENDPOINTS_ENV) {
            if !list.trim().is_empty() {
                cfg.endpoints = list.split(',').map(|s| s.trim().to_string()).collect();
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn dynamics(&self) -> Result<Dynamics, WorkflowError> {
        self.generator
            .dynamics
            .parse()
            .map_err(|e: crate::sim::SimError| WorkflowError::Validation(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), WorkflowError> {
        let bad = |m: String| Err(WorkflowError::Validation(m));
        if self.endpoints.is_empty() {
            return bad("at least one endpoint required".into());
        }
        for e in &self.endpoints {
            check_bind(e).map_err(WorkflowError::Validation)?;
        }
        if let Some(eng) = &self.engine.endpoints {
            if eng != &self.endpoints {
                return bad(format!(
                    "engine endpoints {eng:?} differ from generator endpoints {:?}",
                    self.endpoints
                ));
            }
        }
        let g = &self.generator;
        if (g.ranks as usize) < self.endpoints.len() {
            return bad(format!("{} endpoints for {} ranks", self.endpoints.len(), g.ranks));
        }
        if !(g.delay_ms >= 0.0 && g.delay_ms.is_finite()) {
            return bad("delay_ms must be ≥ 0".into());
        }
        let mut sim = SimConfig::new(g.ranks, self.dynamics()?, IoMode::Disabled);
        sim.total_steps = g.steps;
        sim.write_interval = g.interval;
        sim.field_name = g.field_name.clone();
        sim.validate().map_err(|e| WorkflowError::Validation(e.to_string()))?;
        if g.queue_capacity == 0 {
            return bad("queue_capacity must be ≥ 1".into());
        }
        let e = &self.engine;
        e.analyzer.parse::<AnalyzerKind>().map_err(WorkflowError::Validation)?;
        if e.trigger_ms == 0 || e.window < 2 || e.max_records_per_pull == 0 {
            return bad("engine needs trigger_ms ≥ 1, window ≥ 2, max_records_per_pull ≥ 1".into());
        }
        if e.parallelism == Some(0) || e.r_max == Some(0) {
            return bad("parallelism and r_max must be ≥ 1".into());
        }
        if self.endpoint.retention == 0 {
            return bad("retention must be ≥ 1".into());
        }
        if self.run_timeout_s == 0 {
            return bad("run_timeout_s must be ≥ 1".into());
        }
        Ok(())
    }

    /// `P:G:E`, with E shown as `auto` when unbounded.
    pub fn ratio(&self) -> String {
        format!(
            "{}:{}:{}",
            self.generator.ranks,
            self.endpoints.len(),
            self.engine
                .parallelism
                .map(|e| e.to_string())
                .unwrap_or_else(|| "auto".into())
        )
    }
}

#[derive(Debug, Clone)]
pub struct WorkflowOutcome {
    pub out_dir: PathBuf,
    pub summary: MetricsSummary,
}

struct Proc {
    name: String,
    child: Child,
    stdin: Option<ChildStdin>,
}

impl Proc {
    fn spawn(exe: &Path, name: &str, args: &[String], logs: &Path) -> Result<Self, String> {
        let log = fs::File::create(logs.join(format!("{name}.log"))).map_err(|e| e.to_string())?;
        let mut child = Command::new(exe)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(log)
            .env_remove(ENDPOINTS_ENV)
            .spawn()
            .map_err(|e| format!("spawn {name}: {e}"))?;
        let stdin = child.stdin.take();
        Ok(Self {
            name: name.to_string(),
            child,
            stdin,
        })
    }

    /// First stdout line, used as a readiness signal.
    fn first_line(&mut self, timeout: Duration) -> Result<String, String> {
        let out = self.child.stdout.take().ok_or("stdout already taken")?;
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            let mut r = BufReader::new(out);
            let mut line = String::new();
            let _ = tx.send(r.read_line(&mut line).map(|_| line));
            // Keep draining so the child never blocks on a full pipe.
            let _ = std::io::copy(&mut r, &mut std::io::sink());
        });
        match rx.recv_timeout(timeout) {
            Ok(Ok(l)) if !l.is_empty() => Ok(l.trim().to_string()),
            Ok(Ok(_)) => Err(format!("{} exited before becoming ready", self.name)),
            Ok(Err(e)) => Err(format!("{}: {e}", self.name)),
            Err(_) => Err(format!("{} not ready after {timeout:?}", self.name)),
        }
    }

    fn drain_stdout(&mut self) {
        if let Some(mut out) = self.child.stdout.take() {
            thread::spawn(move || {
                let _ = std::io::copy(&mut out, &mut std::io::sink());
            });
        }
    }

    fn close_stdin(&mut self) {
        self.stdin.take();
    }

    fn wait(&mut self, timeout: Duration) -> Result<(), String> {
        let deadline = Instant::now() + timeout;
        loop {
            match self.child.try_wait() {
                Ok(Some(st)) if st.success() => return Ok(()),
                Ok(Some(st)) => return Err(format!("{} exited with {st}", self.name)),
                Ok(None) if Instant::now() >= deadline => {
                    let _ = self.child.kill();
                    let _ = self.child.wait();
                    return Err(format!("{} timed out after {timeout:?}", self.name));
                }
                Ok(None) => thread::sleep(Duration::from_millis(20)),
                Err(e) => return Err(format!("{}: {e}", self.name)),
            }
        }
    }

    fn kill(&mut self) {
        if let Ok(None) = self.child.try_wait() {
            let _ = self.child.kill();
            let _ = self.child.wait();
        }
    }
}

fn write_manifest(out: &Path, cfg: &WorkflowConfig, status: &str, notes: &[String]) {
    let mut text = format!("status: {status}\nratio: {}\n", cfg.ratio());
    for n in notes {
        text.push_str(n);
        text.push('\n');
    }
    text.push_str("files:\n");
    let mut files: Vec<String> = walk(out)
        .into_iter()
        .filter_map(|p| p.strip_prefix(out).ok().map(|r| r.display().to_string()))
        .filter(|p| p != "MANIFEST")
        .collect();
    files.sort();
    for f in files {
        text.push_str(&format!("  {f}\n"));
    }
    if let Err(e) = fs::write(out.join("MANIFEST"), text) {
        warn!("writing MANIFEST: {e}");
    }
}

fn walk(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    if let Ok(rd) = fs::read_dir(dir) {
        for e in rd.flatten() {
            let p = e.path();
            if p.is_dir() {
                out.extend(walk(&p));
            } else {
                out.push(p);
            }
        }
    }
    out
}

const READY_TIMEOUT: Duration = Duration::from_secs(10);

/// Runs one workflow with child processes of `exe`.
pub fn run_workflow(cfg: &WorkflowConfig, exe: &Path) -> Result<WorkflowOutcome, WorkflowError> {
    cfg.validate()?;
    let out = cfg.output_dir.clone();
    let logs = out.join("logs");
    fs::create_dir_all(&logs).map_err(|e| WorkflowError::Runtime(format!("{}: {e}", out.display())))?;
    let cfg_json = serde_json::to_string_pretty(cfg).expect("config serializes");
    fs::write(out.join("config.json"), cfg_json).map_err(|e| WorkflowError::Runtime(e.to_string()))?;

    let mut procs: Vec<Proc> = Vec::new();
    let mut notes = Vec::new();
    let started = run_children(cfg, exe, &out, &logs, &mut procs, &mut notes);
    for p in &mut procs {
        p.kill();
    }
    if let Err(e) = started {
        notes.push(format!("failure: {e}"));
        write_manifest(&out, cfg, "failed", &notes);
        return Err(WorkflowError::Runtime(e));
    }

    match collect_metrics(cfg, &out) {
        Ok((rows, summary)) => {
            emit_report(&rows, &summary, &out).map_err(|e| WorkflowError::Runtime(e.to_string()))?;
            if !summary.conserved() && cfg.generator.backpressure == BackpressurePolicy::Block {
                let a = &summary.aggregate;
                let msg = format!(
                    "emitted {} stored {} analyzed {} lost {} duplicated {}",
                    a.emitted, a.stored, a.analyzed, a.lost, a.duplicated
                );
                notes.push(format!("failure: {msg}"));
                write_manifest(&out, cfg, "reconciliation-failed", &notes);
                return Err(WorkflowError::Reconciliation(msg));
            }
            write_manifest(&out, cfg, "ok", &notes);
            Ok(WorkflowOutcome { out_dir: out, summary })
        }
        Err(e) => {
            notes.push(format!("failure: {e}"));
            write_manifest(&out, cfg, "failed", &notes);
            Err(e)
        }
    }
}

fn run_children(
    cfg: &WorkflowConfig,
    exe: &Path,
    out: &Path,
    logs: &Path,
    procs: &mut Vec<Proc>,
    notes: &mut Vec<String>,
) -> Result<(), String> {
    let mut addrs = Vec::new();
    for (g, bind) in cfg.endpoints.iter().enumerate() {
        let args = vec![
            "endpoint".into(),
            "--bind".into(),
            bind.clone(),
            "--retention".into(),
            cfg.endpoint.retention.to_string(),
            "--stats-file".into(),
            out.join(format!("endpoint{g}.csv")).display().to_string(),
        ];
        let mut p = Proc::spawn(exe, &format!("endpoint{g}"), &args, logs)?;
        let line = p.first_line(READY_TIMEOUT);
        procs.push(p);
        let line = line?;
        let addr = line
            .strip_prefix("listening ")
            .ok_or_else(|| format!("endpoint{g} said {line:?}"))?
            .to_string();
        notes.push(format!("endpoint{g}: {addr}"));
        addrs.push(addr);
    }
    let eplist = addrs.join(",");

    let e = &cfg.engine;
    let mut args = vec![
        "engine".into(),
        "--endpoints".into(),
        eplist.clone(),
        "--trigger-ms".into(),
        e.trigger_ms.to_string(),
        "--analyzer".into(),
        e.analyzer.clone(),
        "--window".into(),
        e.window.to_string(),
        "--max-records".into(),
        e.max_records_per_pull.to_string(),
        "--out".into(),
        out.join("engine").display().to_string(),
    ];
    if let Some(p) = e.parallelism {
        args.extend(["--parallelism".into(), p.to_string()]);
    }
    if let Some(r) = e.r_max {
        args.extend(["--r-max".into(), r.to_string()]);
    }
    let mut engine = Proc::spawn(exe, "engine", &args, logs)?;
    let ready = engine.first_line(READY_TIMEOUT);
    procs.push(engine);
    ready?;

    let g = &cfg.generator;
    let args = vec![
        "simgen".into(),
        "--ranks".into(),
        g.ranks.to_string(),
        "--dynamics".into(),
        g.dynamics.clone(),
        "--steps".into(),
        g.steps.to_string(),
        "--interval".into(),
        g.interval.to_string(),
        "--delay-ms".into(),
        g.delay_ms.to_string(),
        "--field".into(),
        g.field_name.clone(),
        "--queue-capacity".into(),
        g.queue_capacity.to_string(),
        "--backpressure".into(),
        match g.backpressure {
            BackpressurePolicy::Block => "block".into(),
            BackpressurePolicy::DropNewest => "drop-newest".into(),
        },
        "--io".into(),
        format!("broker:{eplist}"),
        "--log".into(),
        out.join("generator").display().to_string(),
    ];
    info!("starting {} ranks against {eplist}", g.ranks);
    let mut gen = Proc::spawn(exe, "simgen", &args, logs)?;
    gen.drain_stdout();
    gen.close_stdin();
    let gen_result = gen.wait(Duration::from_secs(cfg.run_timeout_s));
    procs.push(gen);

    // Drain: closing stdin makes the engine run one last cycle and exit.
    let drain_timeout = Duration::from_millis(cfg.engine.trigger_ms) + Duration::from_secs(120);
    let engine = &mut procs[cfg.endpoints.len()];
    engine.close_stdin();
    let engine_result = engine.wait(drain_timeout);
    let mut endpoint_results = Vec::new();
    for p in procs.iter_mut().take(cfg.endpoints.len()) {
        p.close_stdin();
        endpoint_results.push(p.wait(Duration::from_secs(30)));
    }
    gen_result?;
    engine_result?;
    endpoint_results.into_iter().collect::<Result<Vec<_>, _>>()?;
    Ok(())
}

fn runtime<E: std::fmt::Display>(what: &str) -> impl Fn(E) -> WorkflowError + '_ {
    move |e| WorkflowError::Runtime(format!("{what}: {e}"))
}

/// Reads the logs under `out` and reconciles them.
pub fn collect_metrics(
    cfg: &WorkflowConfig,
    out: &Path,
) -> Result<(Vec<AnalysisReportRow>, MetricsSummary), WorkflowError> {
    let gen: GeneratorStats = serde_json::from_str(
        &fs::read_to_string(out.join("generator/generator.json")).map_err(runtime("generator.json"))?,
    )
    .map_err(runtime("generator.json"))?;
    let emissions = read_emission_log(&out.join("generator/emissions.csv")).map_err(runtime("emissions.csv"))?;
    let engine: EngineSummary = serde_json::from_str(
        &fs::read_to_string(out.join("engine/engine.json")).map_err(runtime("engine.json"))?,
    )
    .map_err(runtime("engine.json"))?;
    let rows = read_report(&out.join("engine/report.csv")).map_err(runtime("report.csv"))?;
    let analyzed = read_analyzed_log(&out.join("engine/analyzed.csv")).map_err(runtime("analyzed.csv"))?;
    let mut stored = BTreeMap::new();
    for g in 0..cfg.endpoints.len() {
        stored.extend(read_final_stats(&out.join(format!("endpoint{g}.csv"))).map_err(runtime("endpoint stats"))?);
    }
    let lat = measure_latency(&emissions, &analyzed).map_err(|e| WorkflowError::Reconciliation(e.to_string()))?;

    let element_count = cfg.dynamics()?.element_count();
    let record_bytes = 8.0 * element_count as f64;
    let window_s = engine.finished_at_ns.saturating_sub(gen.started_at_ns) as f64 / 1e9;
    let rate = |n: u64| if window_s > 0.0 { n as f64 / window_s } else { 0.0 };

    let mut streams: BTreeMap<String, FlowMetrics> = BTreeMap::new();
    for r in &gen.ranks {
        let s = streams.entry(r.stream_key.clone()).or_default();
        s.emitted = r.records_emitted;
        s.dropped = r.records_dropped;
    }
    for (k, n) in &stored {
        streams.entry(k.clone()).or_default().stored = *n;
    }
    for (k, n) in &lat.analyzed {
        streams.entry(k.clone()).or_default().analyzed = *n;
    }
    for (k, _) in &lat.lost {
        streams.entry(k.clone()).or_default().lost += 1;
    }
    for (k, _) in &lat.duplicated {
        streams.entry(k.clone()).or_default().duplicated += 1;
    }
    for (k, s) in streams.iter_mut() {
        s.records_per_s = rate(s.analyzed);
        s.bytes_per_s = s.records_per_s * record_bytes;
        s.latency = lat.per_stream.get(k).cloned().unwrap_or_default();
    }
    let mut agg = FlowMetrics::default();
    for s in streams.values() {
        agg.emitted += s.emitted;
        agg.dropped += s.dropped;
        agg.stored += s.stored;
        agg.analyzed += s.analyzed;
        agg.lost += s.lost;
        agg.duplicated += s.duplicated;
    }
    agg.records_per_s = rate(agg.analyzed);
    agg.bytes_per_s = agg.records_per_s * record_bytes;
    agg.latency = lat.overall.clone();

    let summary = MetricsSummary {
        ratio: cfg.ratio(),
        world_size: cfg.generator.ranks,
        groups: cfg.endpoints.len(),
        parallelism: cfg.engine.parallelism,
        trigger_ms: cfg.engine.trigger_ms,
        element_count,
        generator_elapsed_s: gen.finished_at_ns.saturating_sub(gen.started_at_ns) as f64 / 1e9,
        workflow_elapsed_s: window_s,
        lag_s: (engine.finished_at_ns as f64 - gen.finished_at_ns as f64) / 1e9,
        engine_cycles: engine.cycles,
        degraded_cycles: engine.degraded_cycles,
        aggregate: agg,
        streams,
    };
    Ok((rows, summary))
}

/// Writes `report.csv`, `metrics.json` and `stability.svg` into `out`.
pub fn emit_report(rows: &[AnalysisReportRow], summary: &MetricsSummary, out: &Path) -> std::io::Result<()> {
    if rows.is_empty() {
        return Err(std::io::Error::other("no report rows to emit"));
    }
    fs::create_dir_all(out)?;
    let mut csv = String::from(crate::engine::report::REPORT_HEADER);
    csv.push('\n');
    for r in rows {
        csv.push_str(&r.to_csv());
        csv.push('\n');
    }
    fs::write(out.join("report.csv"), csv)?;
    fs::write(
        out.join("metrics.json"),
        serde_json::to_string_pretty(summary).map_err(std::io::Error::other)?,
    )?;
    fs::write(out.join("stability.svg"), stability_svg(rows))?;
    Ok(())
}

/// One panel per stream: metric against the last step of each window.
pub fn stability_svg(rows: &[AnalysisReportRow]) -> String {
    let mut by_stream: BTreeMap<&str, Vec<(f64, f64)>> = BTreeMap::new();
    for r in rows {
        let e = by_stream.entry(&r.stream_key).or_default();
        if let (RowStatus::Ok, Some(m)) = (&r.status, r.stability_metric) {
            e.push((r.step_hi as f64, m));
        }
    }
    let mut panels: Vec<Panel> = by_stream
        .into_iter()
        .map(|(k, points)| Panel {
            title: k.to_string(),
            points,
        })
        .collect();
    panels.sort_by_key(|p| crate::model::parse_stream_key(&p.title).ok());
    panel_grid("DMD stability metric per stream", "step", "mean (|λ|−1)²", &panels, false)
}

/// Throughput and p95 latency against world size across runs.
pub fn scaling_svg(runs: &[MetricsSummary]) -> String {
    let mut runs: Vec<&MetricsSummary> = runs.iter().collect();
    runs.sort_by_key(|m| m.world_size);
    let tp = runs
        .iter()
        .map(|m| (m.world_size as f64, m.aggregate.bytes_per_s / 1e6))
        .collect();
    let lat = runs
        .iter()
        .map(|m| (m.world_size as f64, m.aggregate.latency.p95_ms / 1e3))
        .collect();
    panel_grid(
        "Scaling",
        "ranks (P)",
        "",
        &[
            Panel {
                title: "aggregate throughput (MB/s)".into(),
                points: tp,
            },
            Panel {
                title: "p95 latency (s)".into(),
                points: lat,
            },
        ],
        true,
    )
}

/// `report DIR…`: loads each run's `metrics.json`, writes the scaling plot,
/// and returns a text table.
pub fn cross_run_report(dirs: &[PathBuf], svg_out: &Path) -> Result<String, WorkflowError> {
    if dirs.is_empty() {
        return Err(WorkflowError::Validation("no run directories given".into()));
    }
    let mut runs = Vec::new();
    for d in dirs {
        let p = d.join("metrics.json");
        let text = fs::read_to_string(&p).map_err(|e| WorkflowError::Validation(format!("{}: {e}", p.display())))?;
        let m: MetricsSummary =
            serde_json::from_str(&text).map_err(|e| WorkflowError::Validation(format!("{}: {e}", p.display())))?;
        runs.push(m);
    }
    fs::write(svg_out, scaling_svg(&runs)).map_err(|e| WorkflowError::Runtime(e.to_string()))?;
    let mut t = String::from("ratio\trecords/s\tMB/s\tp50_s\tp95_s\tlag_s\n");
    for m in &runs {
        let a = &m.aggregate;
        t.push_str(&format!(
            "{}\t{:.1}\t{:.3}\t{:.3}\t{:.3}\t{:.3}\n",
            m.ratio,
            a.records_per_s,
            a.bytes_per_s / 1e6,
            a.latency.p50_ms / 1e3,
            a.latency.p95_ms / 1e3,
            m.lag_s
        ));
    }
    Ok(t)
}

/// Readiness line read by the orchestrator.
pub fn announce(line: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "output_dir": "out",
        "endpoints": ["127.0.0.1:0"],
        "generator": {"ranks": 4, "dynamics": "random:64,1"}
    }"#;

    #[test]
    fn defaults_fill_in() {
        let c = WorkflowConfig::from_json(MINIMAL).unwrap();
        c.validate().unwrap();
        assert_eq!(c.generator.steps, 2000);
        assert_eq!(c.generator.interval, 5);
        assert_eq!(c.engine.trigger_ms, 3000);
        assert_eq!(c.generator.backpressure, BackpressurePolicy::Block);
        assert_eq!(c.ratio(), "4:1:auto");
    }

    #[test]
    fn mismatched_endpoint_lists_rejected() {
        let mut c = WorkflowConfig::from_json(MINIMAL).unwrap();
        c.engine.endpoints = Some(vec!["127.0.0.1:1".into()]);
        let err = c.validate().unwrap_err();
        assert_eq!(err.exit_code(), EXIT_VALIDATION);
    }

    #[test]
    fn invalid_fields_rejected() {
        for patch in [
            r#""generator": {"ranks": 4, "dynamics": "random:64,1", "interval": 0}"#,
            r#""generator": {"ranks": 0, "dynamics": "random:64,1"}"#,
            r#""generator": {"ranks": 4, "dynamics": "diffusion:4,0.9"}"#,
            r#""generator": {"ranks": 4, "dynamics": "random:64,1"}, "engine": {"analyzer": "gpu"}"#,
            r#""generator": {"ranks": 4, "dynamics": "random:64,1", "colour": 1}"#,
        ] {
            let text = format!(r#"{{"output_dir": "o", "endpoints": ["127.0.0.1:0"], {patch}}}"#);
            let res = WorkflowConfig::from_json(&text).and_then(|c| c.validate());
            assert!(res.is_err(), "{patch}");
        }
        let text = r#"{"output_dir": "o", "endpoints": ["nohost"], "generator": {"ranks": 4, "dynamics": "random:8,1"}}"#;
        assert!(WorkflowConfig::from_json(text).unwrap().validate().is_err());
    }

    #[test]
    fn empty_rows_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(emit_report(&[], &MetricsSummary::default(), dir.path()).is_err());
    }
}
