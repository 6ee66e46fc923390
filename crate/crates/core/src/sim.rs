//! Synthetic stand-in for the MPI simulation.
//!
//! Each rank runs an independent instance of the configured dynamics on its
//! own thread, sleeps `step_compute_delay` per step to model compute, and
//! every `write_interval` steps emits its state through the broker, to
//! files, or nowhere.

use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::thread;
use std::time::{Duration, Instant};

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::broker::{broker_init, BackpressurePolicy, BrokerConfig, WriteOutcome};
use crate::clock::monotonic_ns;
use crate::dmd::linalg::Matrix;
use crate::model::{make_stream_key, validate_field_name, EndpointAddress};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("dimension mismatch: state has {state}, operator expects {expected}")]
    Dimension { state: usize, expected: usize },
    #[error("io: {0}")]
    Io(String),
}

impl From<std::io::Error> for SimError {
    fn from(e: std::io::Error) -> Self {
        SimError::Io(e.to_string())
    }
}

/// `A · state`.
pub fn step_linear(state: &[f64], a: &Matrix) -> Result<Vec<f64>, SimError> {
    if a.rows() != a.cols() || a.cols() != state.len() {
        return Err(SimError::Dimension {
            state: state.len(),
            expected: a.cols(),
        });
    }
    Ok(a.mul_vec(state))
}

/// One explicit step of 1-D diffusion with zero Dirichlet boundaries:
/// `u_i + μ (u_{i+1} − 2 u_i + u_{i−1})`.
pub fn step_diffusion(state: &[f64], mu: f64) -> Result<Vec<f64>, SimError> {
    check_mu(mu)?;
    let n = state.len();
    Ok((0..n)
        .map(|i| {
            let left = if i == 0 { 0.0 } else { state[i - 1] };
            let right = if i + 1 == n { 0.0 } else { state[i + 1] };
            state[i] + mu * (right - 2.0 * state[i] + left)
        })
        .collect())
}

fn check_mu(mu: f64) -> Result<(), SimError> {
    if mu > 0.0 && mu <= 0.5 {
        Ok(())
    } else {
        Err(SimError::InvalidArgument(format!(
            "diffusion number {mu} outside (0, 0.5]"
        )))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Dynamics {
    /// Square matrix, rows as given.
    Linear(Vec<Vec<f64>>),
    Diffusion { n: usize, mu: f64 },
    Random { element_count: usize, seed: u64 },
}

impl Dynamics {
    pub fn element_count(&self) -> usize {
        match self {
            Dynamics::Linear(rows) => rows.len(),
            Dynamics::Diffusion { n, .. } => *n,
            Dynamics::Random { element_count, .. } => *element_count,
        }
    }

    fn validate(&self) -> Result<(), SimError> {
        match self {
            Dynamics::Linear(rows) => {
                if rows.is_empty() || rows.iter().any(|r| r.len() != rows.len()) {
                    return Err(SimError::InvalidArgument("linear matrix must be square".into()));
                }
            }
            Dynamics::Diffusion { n, mu } => {
                if *n == 0 {
                    return Err(SimError::InvalidArgument("diffusion needs n ≥ 1".into()));
                }
                check_mu(*mu)?;
            }
            Dynamics::Random { element_count, .. } => {
                if *element_count == 0 {
                    return Err(SimError::InvalidArgument("random needs count ≥ 1".into()));
                }
            }
        }
        Ok(())
    }
}

/// `linear:a,b/c,d` (rows split by `/`), `diffusion:N,MU`, `random:COUNT,SEED`.
impl FromStr for Dynamics {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || SimError::InvalidArgument(format!("bad dynamics spec {s:?}"));
        let (kind, args) = s.split_once(':').ok_or_else(bad)?;
        let d = match kind {
            "linear" => {
                let rows = args
                    .split('/')
                    .map(|r| {
                        r.split(',')
                            .map(|v| v.trim().parse::<f64>())
                            .collect::<Result<Vec<_>, _>>()
                    })
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(|_| bad())?;
                Dynamics::Linear(rows)
            }
            "diffusion" => {
                let (n, mu) = args.split_once(',').ok_or_else(bad)?;
                Dynamics::Diffusion {
                    n: n.trim().parse().map_err(|_| bad())?,
                    mu: mu.trim().parse().map_err(|_| bad())?,
                }
            }
            "random" => {
                let (count, seed) = args.split_once(',').ok_or_else(bad)?;
                Dynamics::Random {
                    element_count: count.trim().parse().map_err(|_| bad())?,
                    seed: seed.trim().parse().map_err(|_| bad())?,
                }
            }
            _ => return Err(bad()),
        };
        d.validate()?;
        Ok(d)
    }
}

impl fmt::Display for Dynamics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Dynamics::Linear(rows) => {
                let rows: Vec<String> = rows
                    .iter()
                    .map(|r| r.iter().map(f64::to_string).collect::<Vec<_>>().join(","))
                    .collect();
                write!(f, "linear:{}", rows.join("/"))
            }
            Dynamics::Diffusion { n, mu } => write!(f, "diffusion:{n},{mu}"),
            Dynamics::Random {
                element_count,
                seed,
            } => write!(f, "random:{element_count},{seed}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum IoMode {
    Broker {
        endpoints: Vec<EndpointAddress>,
        queue_capacity: usize,
        backpressure: BackpressurePolicy,
    },
    File {
        dir: PathBuf,
        /// `sync_all` after every emission.
        fsync: bool,
    },
    Disabled,
}

/// `broker:H:P,H:P`, `file:DIR`, or `off`.
impl FromStr for IoMode {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "off" {
            return Ok(IoMode::Disabled);
        }
        if let Some(list) = s.strip_prefix("broker:") {
            let endpoints = EndpointAddress::parse_list(list)
                .map_err(|e| SimError::InvalidArgument(e.to_string()))?;
            return Ok(IoMode::Broker {
                endpoints,
                queue_capacity: 64,
                backpressure: BackpressurePolicy::Block,
            });
        }
        if let Some(dir) = s.strip_prefix("file:") {
            if !dir.is_empty() {
                return Ok(IoMode::File {
                    dir: dir.into(),
                    fsync: true,
                });
            }
        }
        Err(SimError::InvalidArgument(format!("bad io mode {s:?}")))
    }
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub world_size: u32,
    pub dynamics: Dynamics,
    pub total_steps: u64,
    pub write_interval: u64,
    pub step_compute_delay: Duration,
    pub io_mode: IoMode,
    pub field_name: String,
    /// Where to write `emissions.csv` and `generator.json`.
    pub log_dir: Option<PathBuf>,
}

impl SimConfig {
    pub fn new(world_size: u32, dynamics: Dynamics, io_mode: IoMode) -> Self {
        Self {
            world_size,
            dynamics,
            total_steps: 2000,
            write_interval: 5,
            step_compute_delay: Duration::ZERO,
            io_mode,
            field_name: "pressure".into(),
            log_dir: None,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::InvalidArgument(m));
        if self.world_size == 0 {
            return bad("world_size must be ≥ 1".into());
        }
        if self.total_steps == 0 {
            return bad("total_steps must be ≥ 1".into());
        }
        if self.write_interval == 0 {
            return bad("write_interval must be ≥ 1".into());
        }
        validate_field_name(&self.field_name).map_err(|e| SimError::InvalidArgument(e.to_string()))?;
        self.dynamics.validate()?;
        if let IoMode::Broker {
            endpoints,
            queue_capacity,
            ..
        } = &self.io_mode
        {
            if endpoints.is_empty() || endpoints.len() > self.world_size as usize {
                return bad(format!(
                    "{} endpoints for {} ranks",
                    endpoints.len(),
                    self.world_size
                ));
            }
            if *queue_capacity == 0 {
                return bad("queue_capacity must be ≥ 1".into());
            }
        }
        Ok(())
    }

    /// Emissions each rank makes: `floor(total_steps / write_interval)`.
    pub fn emissions_per_rank(&self) -> u64 {
        self.total_steps / self.write_interval
    }
}

/// Per-rank evolving state.
enum RankState {
    Linear { a: Matrix, x: Vec<f64> },
    Diffusion { mu: f64, u: Vec<f64> },
    Random { rng: ChaCha8Rng, x: Vec<f64> },
}

impl RankState {
    fn new(d: &Dynamics, rank: u32) -> Self {
        let scale = 1.0 + 0.1 * rank as f64;
        match d {
            Dynamics::Linear(rows) => {
                let n = rows.len();
                let flat: Vec<f64> = rows.iter().flatten().copied().collect();
                RankState::Linear {
                    a: Matrix::from_row_major(n, n, &flat),
                    x: vec![scale; n],
                }
            }
            Dynamics::Diffusion { n, mu } => RankState::Diffusion {
                mu: *mu,
                u: (0..*n).map(|i| scale * ((i + 1) as f64).sqrt()).collect(),
            },
            Dynamics::Random {
                element_count,
                seed,
            } => RankState::Random {
                rng: ChaCha8Rng::seed_from_u64(seed.wrapping_add(rank as u64)),
                x: vec![0.0; *element_count],
            },
        }
    }

    /// Advances one step. Random state is only drawn when about to be emitted.
    fn advance(&mut self, emit_next: bool) {
        match self {
            RankState::Linear { a, x } => *x = a.mul_vec(x),
            RankState::Diffusion { mu, u } => {
                *u = step_diffusion(u, *mu).expect("validated diffusion number")
            }
            RankState::Random { rng, x } => {
                if emit_next {
                    x.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
                }
            }
        }
    }

    fn values(&self) -> &[f64] {
        match self {
            RankState::Linear { x, .. } | RankState::Random { x, .. } => x,
            RankState::Diffusion { u, .. } => u,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmissionLogEntry {
    pub stream_key: String,
    pub step: u64,
    pub produced_at_ns: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RankStats {
    pub rank: u32,
    pub stream_key: String,
    pub records_emitted: u64,
    pub records_dropped: u64,
    pub bytes_emitted: u64,
    pub elapsed_s: f64,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GeneratorStats {
    pub ranks: Vec<RankStats>,
    pub started_at_ns: u64,
    pub finished_at_ns: u64,
    pub elapsed_s: f64,
    #[serde(skip)]
    pub emissions: Vec<EmissionLogEntry>,
}

impl GeneratorStats {
    pub fn failed_ranks(&self) -> Vec<u32> {
        self.ranks
            .iter()
            .filter(|r| r.error.is_some())
            .map(|r| r.rank)
            .collect()
    }

    pub fn total_emitted(&self) -> u64 {
        self.ranks.iter().map(|r| r.records_emitted).sum()
    }

    pub fn total_bytes(&self) -> u64 {
        self.ranks.iter().map(|r| r.bytes_emitted).sum()
    }
}

enum Sink {
    Broker(crate::broker::BrokerContext),
    File {
        dir: PathBuf,
        fsync: bool,
        index: BufWriter<File>,
    },
    Disabled,
}

fn open_sink(cfg: &SimConfig, rank: u32, n: usize) -> Result<Sink, String> {
    match &cfg.io_mode {
        IoMode::Broker {
            endpoints,
            queue_capacity,
            backpressure,
        } => {
            let mut bc = BrokerConfig::new(endpoints.clone());
            bc.queue_capacity = *queue_capacity;
            bc.backpressure = *backpressure;
            broker_init(&bc, &cfg.field_name, rank, cfg.world_size, n as u32)
                .map(Sink::Broker)
                .map_err(|e| e.to_string())
        }
        IoMode::File { dir, fsync } => {
            let dir = dir.join(format!("rank{rank}"));
            fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
            let mut index =
                BufWriter::new(File::create(dir.join("index.csv")).map_err(|e| e.to_string())?);
            writeln!(index, "step,path,bytes,produced_at_ns").map_err(|e| e.to_string())?;
            Ok(Sink::File {
                dir,
                fsync: *fsync,
                index,
            })
        }
        IoMode::Disabled => Ok(Sink::Disabled),
    }
}

fn write_snapshot_file(path: &Path, values: &[f64], fsync: bool) -> std::io::Result<()> {
    let mut bytes = Vec::with_capacity(values.len() * 8);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = File::create(path)?;
    f.write_all(&bytes)?;
    if fsync {
        f.sync_all()?;
    }
    Ok(())
}

fn run_rank(cfg: &SimConfig, rank: u32) -> (RankStats, Vec<EmissionLogEntry>) {
    let started = Instant::now();
    let key = make_stream_key(&cfg.field_name, rank).expect("validated field name");
    let n = cfg.dynamics.element_count();
    let mut stats = RankStats {
        rank,
        stream_key: key.to_string(),
        ..Default::default()
    };
    let mut log = Vec::with_capacity(cfg.emissions_per_rank() as usize);
    let mut sink = match open_sink(cfg, rank, n) {
        Ok(s) => s,
        Err(e) => {
            stats.error = Some(e);
            stats.elapsed_s = started.elapsed().as_secs_f64();
            return (stats, log);
        }
    };
    let mut state = RankState::new(&cfg.dynamics, rank);

    let result: Result<(), String> = (|| {
        for step in 1..=cfg.total_steps {
            if !cfg.step_compute_delay.is_zero() {
                thread::sleep(cfg.step_compute_delay);
            }
            let emit = step % cfg.write_interval == 0;
            state.advance(emit);
            if !emit {
                continue;
            }
            let values = state.values();
            let bytes = 8 * values.len() as u64;
            match &mut sink {
                Sink::Broker(ctx) => match ctx.write(step, values).map_err(|e| e.to_string())? {
                    WriteOutcome::Queued => {
                        stats.records_emitted += 1;
                        stats.bytes_emitted += bytes;
                        log.push(EmissionLogEntry {
                            stream_key: stats.stream_key.clone(),
                            step,
                            produced_at_ns: ctx.last_produced_at(),
                        });
                    }
                    WriteOutcome::Dropped => stats.records_dropped += 1,
                },
                Sink::File { dir, fsync, index } => {
                    let produced_at_ns = monotonic_ns();
                    let name = format!("step{step:010}.bin");
                    write_snapshot_file(&dir.join(&name), values, *fsync)
                        .map_err(|e| e.to_string())?;
                    writeln!(index, "{step},{name},{bytes},{produced_at_ns}")
                        .map_err(|e| e.to_string())?;
                    stats.records_emitted += 1;
                    stats.bytes_emitted += bytes;
                    log.push(EmissionLogEntry {
                        stream_key: stats.stream_key.clone(),
                        step,
                        produced_at_ns,
                    });
                }
                Sink::Disabled => {}
            }
        }
        match &mut sink {
            Sink::Broker(ctx) => {
                ctx.finalize().map_err(|e| e.to_string())?;
            }
            Sink::File { index, .. } => index.flush().map_err(|e| e.to_string())?,
            Sink::Disabled => {}
        }
        Ok(())
    })();
    if let Err(e) = result {
        warn!("rank {rank}: {e}");
        stats.error = Some(e);
    }
    stats.elapsed_s = started.elapsed().as_secs_f64();
    (stats, log)
}

pub const EMISSION_HEADER: &str = "stream_key,step,produced_at_ns";

/// Runs every rank to completion and gathers their stats. A rank that
/// fails is reported in its [`RankStats::error`]; the others keep going.
pub fn run_generator(cfg: &SimConfig) -> Result<GeneratorStats, SimError> {
    cfg.validate()?;
    if let Some(dir) = &cfg.log_dir {
        fs::create_dir_all(dir)?;
    }
    let started = Instant::now();
    let started_at_ns = monotonic_ns();
    let results: Vec<(RankStats, Vec<EmissionLogEntry>)> = thread::scope(|s| {
        let handles: Vec<_> = (0..cfg.world_size)
            .map(|rank| {
                thread::Builder::new()
                    .name(format!("rank-{rank}"))
                    .spawn_scoped(s, move || run_rank(cfg, rank))
                    .expect("spawn rank thread")
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("rank thread panicked"))
            .collect()
    });
    let finished_at_ns = monotonic_ns();
    let mut stats = GeneratorStats {
        started_at_ns,
        finished_at_ns,
        elapsed_s: started.elapsed().as_secs_f64(),
        ..Default::default()
    };
    for (r, log) in results {
        stats.ranks.push(r);
        stats.emissions.extend(log);
    }
    if let Some(dir) = &cfg.log_dir {
        write_emission_log(&dir.join("emissions.csv"), &stats.emissions)?;
        let json = serde_json::to_string_pretty(&stats).map_err(|e| SimError::Io(e.to_string()))?;
        fs::write(dir.join("generator.json"), json)?;
    }
    Ok(stats)
}

pub fn write_emission_log(path: &Path, entries: &[EmissionLogEntry]) -> std::io::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{EMISSION_HEADER}")?;
    for e in entries {
        writeln!(w, "{},{},{}", e.stream_key, e.step, e.produced_at_ns)?;
    }
    w.flush()
}

pub fn read_emission_log(path: &Path) -> std::io::Result<Vec<EmissionLogEntry>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for line in text.lines().skip(1).filter(|l| !l.is_empty()) {
        let bad = || std::io::Error::other(format!("malformed emission-log line {line:?}"));
        let mut f = line.split(',');
        let (Some(k), Some(s), Some(t), None) = (f.next(), f.next(), f.next(), f.next()) else {
            return Err(bad());
        };
        out.push(EmissionLogEntry {
            stream_key: k.to_string(),
            step: s.parse().map_err(|_| bad())?,
            produced_at_ns: t.parse().map_err(|_| bad())?,
        });
    }
    Ok(out)
}
