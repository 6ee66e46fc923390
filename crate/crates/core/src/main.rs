use std::io::{Read, Write};
use std::net::TcpListener;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::mpsc;
use std::thread;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use elasticbroker::bench::{self, announce, WorkflowConfig, WorkflowError};
use elasticbroker::broker::BackpressurePolicy;
use elasticbroker::dmd::{DmdOptions, DEFAULT_SVD_TOL, DEFAULT_WINDOW};
use elasticbroker::endpoint::{EndpointServer, ServerOptions, DEFAULT_RETENTION};
use elasticbroker::engine::pipe::{answer_request, read_request, read_snapshot_csv};
use elasticbroker::engine::report::ReportWriter;
use elasticbroker::engine::{AnalyzerKind, Control, Engine, EngineConfig};
use elasticbroker::model::EndpointAddress;
use elasticbroker::sim::{run_generator, IoMode, SimConfig};

#[derive(Parser)]
#[command(name = "elasticbroker", version, about = "In-situ streaming analysis workflow")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a whole workflow from a JSON config.
    Run { config: PathBuf },
    /// Cross-run scaling plot from several run directories.
    Report {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        #[arg(long, default_value = "scaling.svg")]
        out: PathBuf,
    },
    /// Synthetic data generator.
    Simgen {
        #[arg(long)]
        ranks: u32,
        /// linear:ROWS|diffusion:N,MU|random:COUNT,SEED
        #[arg(long)]
        dynamics: String,
        #[arg(long, default_value_t = 2000)]
        steps: u64,
        #[arg(long, default_value_t = 5)]
        interval: u64,
        #[arg(long, default_value_t = 0.0)]
        delay_ms: f64,
        /// broker:EPLIST|file:DIR|off
        #[arg(long)]
        io: String,
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long, default_value = "pressure")]
        field: String,
        #[arg(long, default_value_t = 64)]
        queue_capacity: usize,
        #[arg(long, default_value = "block")]
        backpressure: BackpressurePolicy,
        /// File mode: skip the per-emission fsync.
        #[arg(long)]
        no_fsync: bool,
    },
    /// Stream endpoint; runs until stdin closes.
    Endpoint {
        #[arg(long, default_value = "127.0.0.1:6379")]
        bind: String,
        #[arg(long, default_value_t = DEFAULT_RETENTION)]
        retention: usize,
        #[arg(long)]
        stats_file: Option<PathBuf>,
    },
    /// Analysis engine; drains and exits when stdin closes.
    Engine {
        #[arg(long)]
        endpoints: String,
        #[arg(long, default_value_t = 3000)]
        trigger_ms: u64,
        /// inproc or pipe:CMD
        #[arg(long, default_value = "inproc")]
        analyzer: AnalyzerKind,
        #[arg(long, default_value_t = DEFAULT_WINDOW)]
        window: usize,
        #[arg(long)]
        parallelism: Option<usize>,
        #[arg(long, default_value_t = 1024)]
        max_records: u32,
        #[arg(long)]
        r_max: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// DMD over a snapshot CSV, or over protocol requests on stdin.
    AnalyzeFile {
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long, default_value = "file")]
        key: String,
        #[arg(long)]
        r_max: Option<usize>,
        #[arg(long, default_value_t = DEFAULT_SVD_TOL)]
        svd_tol: f64,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match cli.cmd {
        Cmd::Run { config } => {
            let res = WorkflowConfig::load(&config).and_then(|cfg| {
                let exe = std::env::current_exe().map_err(|e| WorkflowError::Runtime(e.to_string()))?;
                bench::run_workflow(&cfg, &exe)
            });
            match res {
                Ok(o) => {
                    let a = &o.summary.aggregate;
                    println!(
                        "{}: {} records analyzed, {:.3} MB/s, p95 latency {:.3} s, lag {:.3} s",
                        o.out_dir.display(),
                        a.analyzed,
                        a.bytes_per_s / 1e6,
                        a.latency.p95_ms / 1e3,
                        o.summary.lag_s
                    );
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(e.exit_code() as u8)
                }
            }
        }
        Cmd::Report { dirs, out } => match bench::cross_run_report(&dirs, &out) {
            Ok(table) => {
                print!("{table}");
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(e.exit_code() as u8)
            }
        },
        other => match run_component(other) {
            Ok(()) => ExitCode::SUCCESS,
            Err(e) => {
                eprintln!("error: {e:#}");
                ExitCode::from(bench::EXIT_RUNTIME as u8)
            }
        },
    }
}

/// Blocks until stdin reaches EOF.
fn wait_for_stdin_eof() {
    let _ = std::io::copy(&mut std::io::stdin().lock(), &mut std::io::sink());
}

fn run_component(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Simgen {
            ranks,
            dynamics,
            steps,
            interval,
            delay_ms,
            io,
            log,
            field,
            queue_capacity,
            backpressure,
            no_fsync,
        } => {
            let mut io_mode: IoMode = io.parse()?;
            match &mut io_mode {
                IoMode::Broker {
                    queue_capacity: q,
                    backpressure: b,
                    ..
                } => {
                    *q = queue_capacity;
                    *b = backpressure;
                }
                IoMode::File { fsync, .. } => *fsync = !no_fsync,
                IoMode::Disabled => {}
            }
            if !(delay_ms >= 0.0 && delay_ms.is_finite()) {
                bail!("--delay-ms must be ≥ 0");
            }
            let mut cfg = SimConfig::new(ranks, dynamics.parse()?, io_mode);
            cfg.total_steps = steps;
            cfg.write_interval = interval;
            cfg.step_compute_delay = Duration::from_secs_f64(delay_ms / 1e3);
            cfg.field_name = field;
            cfg.log_dir = log;
            let stats = run_generator(&cfg)?;
            println!(
                "{} ranks, {} records, {} bytes, {:.3} s",
                stats.ranks.len(),
                stats.total_emitted(),
                stats.total_bytes(),
                stats.elapsed_s
            );
            let failed = stats.failed_ranks();
            if !failed.is_empty() {
                for r in stats.ranks.iter().filter(|r| r.error.is_some()) {
                    eprintln!("rank {}: {}", r.rank, r.error.as_deref().unwrap_or(""));
                }
                bail!("{} of {} ranks failed", failed.len(), stats.ranks.len());
            }
            Ok(())
        }
        Cmd::Endpoint {
            bind,
            retention,
            stats_file,
        } => {
            let listener = TcpListener::bind(&bind).with_context(|| format!("bind {bind}"))?;
            let mut server = EndpointServer::start(
                listener,
                ServerOptions {
                    retention,
                    stats_file,
                    ..Default::default()
                },
            )?;
            announce(&format!("listening {}", server.address()));
            wait_for_stdin_eof();
            server.shutdown();
            Ok(())
        }
        Cmd::Engine {
            endpoints,
            trigger_ms,
            analyzer,
            window,
            parallelism,
            max_records,
            r_max,
            out,
        } => {
            let mut cfg = EngineConfig::new(EndpointAddress::parse_list(&endpoints)?);
            cfg.trigger_interval = Duration::from_millis(trigger_ms);
            cfg.analyzer = analyzer;
            cfg.window = window;
            cfg.parallelism = parallelism;
            cfg.max_records_per_pull = max_records;
            cfg.dmd.r_max = r_max;
            let mut engine = Engine::new(cfg)?;
            std::fs::create_dir_all(&out)?;
            let mut writer = ReportWriter::create(&out.join("report.csv"), Some(&out.join("analyzed.csv")))?;
            let (tx, rx) = mpsc::channel();
            thread::spawn(move || {
                wait_for_stdin_eof();
                let _ = tx.send(Control::Drain);
            });
            announce("ready");
            let info = engine.run(&rx, &mut writer)?;
            let summary = writer.summary(&info);
            std::fs::write(out.join("engine.json"), serde_json::to_string_pretty(&summary)?)?;
            Ok(())
        }
        Cmd::AnalyzeFile {
            input,
            key,
            r_max,
            svd_tol,
        } => {
            let opts = DmdOptions { svd_tol, r_max };
            let stdout = std::io::stdout();
            let mut out = stdout.lock();
            match input {
                Some(path) => {
                    let mut text = String::new();
                    std::fs::File::open(&path)
                        .with_context(|| path.display().to_string())?
                        .read_to_string(&mut text)?;
                    let req = read_snapshot_csv(&key, &text)?;
                    writeln!(out, "{}", answer_request(&req, &opts))?;
                }
                None => {
                    let stdin = std::io::stdin();
                    let mut rd = stdin.lock();
                    while let Some(req) = read_request(&mut rd)? {
                        writeln!(out, "{}", answer_request(&req, &opts))?;
                        out.flush()?;
                    }
                }
            }
            Ok(())
        }
        Cmd::Run { .. } | Cmd::Report { .. } => unreachable!("handled in main"),
    }
}
