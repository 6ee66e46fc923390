//! Acceptance criteria, one PASS/FAIL line each. Runs without the libtest
//! harness so the criteria execute sequentially and the timing-sensitive
//! ones do not share the CPU with each other.

mod common;

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{Duration, Instant};

use common::oracle::{diffusion_matrix, eig_oracle, multiset_distance, random_diagonalizable, random_vector, trajectory};
use common::refcodec::{random_message, ref_decode, ref_encode, to_ref};
use common::{local_endpoint, StalledEndpoint, STALL_PAYLOAD};
use elasticbroker::bench::{run_workflow, MetricsSummary, WorkflowConfig};
use elasticbroker::broker::{broker_init, BackpressurePolicy, BrokerConfig, BrokerError, WriteOutcome};
use elasticbroker::dmd::{dmd_from_snapshots, DmdOptions, SnapshotWindow};
use elasticbroker::endpoint::ServerOptions;
use elasticbroker::engine::report::read_analyzed_log;
use elasticbroker::engine::{Analyzer, InProcessAnalyzer, PipeAnalyzer};
use elasticbroker::sim::{run_generator, IoMode, SimConfig};
use elasticbroker::wire::{decode_frame, encode_frame, Decoded, FrameDecoder, Message, DEFAULT_MAX_FRAME};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EXE: &str = env!("CARGO_BIN_EXE_elasticbroker");

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn c1_spectrum_recovery() -> Outcome {
    let t = Instant::now();
    let a = vec![vec![0.9, 0.0], vec![0.0, 0.5]];
    let r = dmd_from_snapshots(&trajectory(&a, vec![1.0, 1.0], 8), &DmdOptions::default()).map_err(|e| e.to_string())?;
    let d_diag = multiset_distance(&eig_oracle(&a), &r.eigenvalues);
    ensure!(d_diag <= 1e-8, "diag eigenvalue error {d_diag:e}");
    let metric_err = (r.stability_metric - 0.13).abs();
    ensure!(metric_err <= 1e-8, "metric {} off by {metric_err:e}", r.stability_metric);

    let t3 = diffusion_matrix(3, 0.1);
    let r = dmd_from_snapshots(&trajectory(&t3, vec![1.0, 2.0, 0.5], 8), &DmdOptions::default())
        .map_err(|e| e.to_string())?;
    let d_oracle = multiset_distance(&eig_oracle(&t3), &r.eigenvalues);
    let d_stated = multiset_distance(&[0.94142, 0.8, 0.65858].map(|x| Complex64::new(x, 0.0)), &r.eigenvalues);
    ensure!(d_oracle <= 1e-5 && d_stated <= 1e-5, "diffusion error {d_oracle:e} / {d_stated:e}");
    let el = t.elapsed();
    ensure!(el < Duration::from_secs(1), "took {el:?}");
    Ok(format!(
        "diag err {d_diag:.1e}, metric err {metric_err:.1e}, diffusion err {d_oracle:.1e}, {:.0} ms",
        el.as_secs_f64() * 1e3
    ))
}

fn c2_invariants() -> Outcome {
    let t = Instant::now();
    let opts = DmdOptions::default();
    let constant = dmd_from_snapshots(&vec![vec![2.0, -1.0, 0.5]; 10], &opts).map_err(|e| e.to_string())?;
    ensure!(constant.stability_metric <= 1e-12, "constant metric {:e}", constant.stability_metric);
    let (c, s) = (std::f64::consts::FRAC_PI_4.cos(), std::f64::consts::FRAC_PI_4.sin());
    let rot = dmd_from_snapshots(&trajectory(&[vec![c, -s], vec![s, c]], vec![1.0, 0.0], 8), &opts)
        .map_err(|e| e.to_string())?;
    ensure!(rot.stability_metric <= 1e-10, "rotation metric {:e}", rot.stability_metric);

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut worst_scale, mut worst_oracle) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let n = rng.gen_range(1..=5);
        let a = random_diagonalizable(&mut rng, n);
        let snaps = trajectory(&a, random_vector(&mut rng, n), n + 3);
        let k = 10f64.powf(rng.gen_range(-3.0..3.0));
        let scaled: Vec<Vec<f64>> = snaps.iter().map(|v| v.iter().map(|x| x * k).collect()).collect();
        let r1 = dmd_from_snapshots(&snaps, &opts).map_err(|e| e.to_string())?;
        let r2 = dmd_from_snapshots(&scaled, &opts).map_err(|e| e.to_string())?;
        worst_scale = worst_scale.max(multiset_distance(&r1.eigenvalues, &r2.eigenvalues));
        worst_oracle = worst_oracle.max(multiset_distance(&eig_oracle(&a), &r2.eigenvalues));
    }
    ensure!(worst_scale <= 1e-10, "scale invariance error {worst_scale:e}");
    ensure!(worst_oracle <= 1e-10, "oracle disagreement {worst_oracle:e}");
    let el = t.elapsed();
    ensure!(el < Duration::from_secs(30), "took {el:?}");
    Ok(format!(
        "constant {:.1e}, rotation {:.1e}, scale err {worst_scale:.1e}, oracle err {worst_oracle:.1e}",
        constant.stability_metric, rot.stability_metric
    ))
}

fn c3_wire_round_trip() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let msgs: Vec<Message> = (0..10_000).map(|_| random_message(&mut rng)).collect();
    let mut stream = Vec::new();
    let mut nonfinite = 0usize;
    for (i, m) in msgs.iter().enumerate() {
        let bytes = encode_frame(m).map_err(|e| e.to_string())?;
        ensure!(bytes == ref_encode(&to_ref(m)), "message {i} bytes differ from reference");
        match decode_frame(&bytes).map_err(|e| e.to_string())? {
            Decoded::Message(d, used) => {
                ensure!(used == bytes.len() && to_ref(&d) == to_ref(m), "message {i} did not round-trip")
            }
            Decoded::NeedMoreData => return Err(format!("message {i} reported incomplete")),
        }
        ensure!(ref_decode(&bytes).is_some(), "reference rejects message {i}");
        if let Message::Append { payload, .. } = m {
            nonfinite += payload.iter().filter(|x| !x.is_finite()).count();
        }
        stream.extend(bytes);
    }
    // Feed the concatenation in random-sized pieces.
    let mut dec = FrameDecoder::new(DEFAULT_MAX_FRAME);
    let mut got = Vec::with_capacity(msgs.len());
    let mut pos = 0;
    while pos < stream.len() {
        let n = rng.gen_range(1..=97).min(stream.len() - pos);
        dec.feed(&stream[pos..pos + n]);
        pos += n;
        while let Some(m) = dec.next_message().map_err(|e| e.to_string())? {
            got.push(to_ref(&m));
        }
    }
    ensure!(got == msgs.iter().map(to_ref).collect::<Vec<_>>(), "split-stream decode differs");
    let append = encode_frame(&Message::Append {
        step: 7,
        payload: vec![1.0],
    })
    .map_err(|e| e.to_string())?;
    let want: Vec<u8> = "00 00 00 15 02 00 00 00 00 00 00 00 07 00 00 00 01 00 00 00 00 00 00 F0 3F"
        .split(' ')
        .map(|b| u8::from_str_radix(b, 16).unwrap())
        .collect();
    ensure!(append == want, "APPEND vector mismatch: {append:02X?}");
    let el = t.elapsed();
    ensure!(el < Duration::from_secs(10), "took {el:?}");
    Ok(format!(
        "10000 messages, {nonfinite} non-finite APPEND floats, {} bytes split-fed, {:.2} s",
        stream.len(),
        el.as_secs_f64()
    ))
}

fn workflow(dir: &Path, name: &str, json: String) -> Result<MetricsSummary, String> {
    let out = dir.join(name);
    let json = json.replace("OUT", &out.display().to_string());
    let cfg = WorkflowConfig::from_json(&json).map_err(|e| e.to_string())?;
    run_workflow(&cfg, Path::new(EXE)).map(|o| o.summary).map_err(|e| e.to_string())
}

fn c4_conservation(dir: &Path) -> Outcome {
    let t = Instant::now();
    let json = r#"{"output_dir": "OUT", "endpoints": ["127.0.0.1:0", "127.0.0.1:0"],
        "generator": {"ranks": 8, "dynamics": "random:64,4", "steps": 200, "interval": 5, "delay_ms": 2, "backpressure": "block"},
        "engine": {"trigger_ms": 1000, "parallelism": 8}}"#;
    let m = workflow(dir, "c4", json.to_string())?;
    let a = &m.aggregate;
    ensure!(
        a.emitted == 320 && a.stored == 320 && a.analyzed == 320,
        "emitted {} stored {} analyzed {}",
        a.emitted,
        a.stored,
        a.analyzed
    );
    ensure!(a.lost == 0 && a.duplicated == 0 && a.dropped == 0, "lost {} duplicated {} dropped {}", a.lost, a.duplicated, a.dropped);
    ensure!(m.streams.len() == 8 && m.streams.values().all(|s| s.analyzed == 40), "per-stream counts {:?}", m.streams.keys());
    let analyzed = read_analyzed_log(&dir.join("c4/engine/analyzed.csv")).map_err(|e| e.to_string())?;
    let mut last: BTreeMap<&str, u64> = BTreeMap::new();
    for r in &analyzed {
        let prev = last.insert(&r.stream_key, r.step).unwrap_or(0);
        ensure!(r.step > prev, "{} step {} after {prev}", r.stream_key, r.step);
    }
    let el = t.elapsed();
    ensure!(el < Duration::from_secs(60), "took {el:?}");
    Ok(format!("8 streams x 40 = {} records end to end, {:.1} s", a.analyzed, el.as_secs_f64()))
}

fn scaling_config(p: u32) -> String {
    let g = (p / 4).max(1);
    let eps = vec![r#""127.0.0.1:0""#; g as usize].join(", ");
    format!(
        r#"{{"output_dir": "OUT", "endpoints": [{eps}],
        "generator": {{"ranks": {p}, "dynamics": "random:256,6", "steps": 3000, "interval": 1, "delay_ms": 10}},
        "engine": {{"trigger_ms": 3000, "parallelism": {p}}}}}"#
    )
}

/// Criteria 5 and 6 share the two scaling runs.
fn c5_c6(dir: &Path) -> (Outcome, Outcome) {
    let runs: Result<Vec<MetricsSummary>, String> =
        [4, 8].iter().map(|p| workflow(dir, &format!("scale{p}"), scaling_config(*p))).collect();
    let runs = match runs {
        Ok(r) => r,
        Err(e) => return (Err(e.clone()), Err(e)),
    };
    let c5 = (|| {
        let mut details = Vec::new();
        for m in &runs {
            let trigger = m.trigger_ms as f64 / 1e3;
            let p95 = m.aggregate.latency.p95_ms / 1e3;
            ensure!(m.trigger_ms == 3000, "trigger {} ms", m.trigger_ms);
            ensure!((0.0..=5.0).contains(&m.lag_s), "P={} lag {:.3} s outside [0, 5]", m.world_size, m.lag_s);
            ensure!(p95 <= trigger + 2.0, "P={} p95 {p95:.3} s above {:.1} s", m.world_size, trigger + 2.0);
            details.push(format!("P={}: lag {:.2} s, p95 {p95:.2} s", m.world_size, m.lag_s));
        }
        Ok(details.join("; "))
    })();
    let c6 = (|| {
        for m in &runs {
            ensure!(m.generator_elapsed_s >= 30.0, "P={} ran {:.1} s", m.world_size, m.generator_elapsed_s);
            ensure!(m.conserved(), "P={} lost records", m.world_size);
        }
        let (small, big) = (&runs[0], &runs[1]);
        ensure!(small.ratio == "4:1:4" && big.ratio == "8:2:8", "ratios {} {}", small.ratio, big.ratio);
        let ratio = big.aggregate.bytes_per_s / small.aggregate.bytes_per_s;
        ensure!(ratio >= 1.6, "throughput ratio {ratio:.3}");
        Ok(format!(
            "{:.3} -> {:.3} MB/s, ratio {ratio:.2}",
            small.aggregate.bytes_per_s / 1e6,
            big.aggregate.bytes_per_s / 1e6
        ))
    })();
    (c5, c6)
}

fn c7_overhead_ordering(scratch: &Path) -> Outcome {
    let server = local_endpoint(ServerOptions::default());
    let elapsed = |io: IoMode, field: &str| -> Result<f64, String> {
        let mut cfg = SimConfig::new(4, "random:1024,7".parse().unwrap(), io);
        cfg.total_steps = 500;
        cfg.write_interval = 5;
        cfg.step_compute_delay = Duration::from_millis(10);
        cfg.field_name = field.to_string();
        let s = run_generator(&cfg).map_err(|e| e.to_string())?;
        ensure!(s.failed_ranks().is_empty(), "ranks failed: {:?}", s.ranks);
        Ok(s.elapsed_s)
    };
    let broker = || IoMode::Broker {
        endpoints: vec![server.address()],
        queue_capacity: 64,
        backpressure: BackpressurePolicy::Block,
    };
    // Best of two per mode damps scheduler noise.
    let mut best = [f64::INFINITY; 3];
    for round in 0..2 {
        best[0] = best[0].min(elapsed(IoMode::Disabled, "off")?);
        best[1] = best[1].min(elapsed(broker(), &format!("b{round}"))?);
        let dir = scratch.join(format!("files{round}"));
        best[2] = best[2].min(elapsed(IoMode::File { dir, fsync: true }, "f")?);
    }
    let [off, brk, file] = best;
    ensure!(brk <= 1.15 * off, "broker {brk:.3} s > 1.15 x disabled {off:.3} s");
    ensure!(file > brk, "file {file:.3} s not above broker {brk:.3} s");
    Ok(format!(
        "disabled {off:.3} s, broker {brk:.3} s ({:.3}x), file+fsync {file:.3} s",
        brk / off
    ))
}

fn c8_analyzer_equivalence() -> Outcome {
    let inproc = InProcessAnalyzer {
        opts: DmdOptions::default(),
    };
    let pipe = PipeAnalyzer {
        command: format!("{EXE} analyze-file"),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst = 0.0f64;
    for i in 0..50 {
        let n = rng.gen_range(1..=8);
        let m = rng.gen_range(2..=16);
        let mut w = SnapshotWindow::new(n, 16).unwrap();
        if rng.gen_bool(0.5) {
            let dim = n.min(5);
            let a = random_diagonalizable(&mut rng, dim);
            for (s, x) in trajectory(&a, random_vector(&mut rng, dim), m).into_iter().enumerate() {
                let mut v = x;
                v.resize(n, 0.25);
                w.push(s as u64 + 1, v).unwrap();
            }
        } else {
            for s in 0..m {
                w.push(s as u64 + 1, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
            }
        }
        let key = format!("w:{i}");
        let a = inproc.analyze(&key, &w).map_err(|e| format!("window {i} inproc: {e}"))?;
        let b = pipe.analyze(&key, &w).map_err(|e| format!("window {i} pipe: {e}"))?;
        ensure!(a.eigenvalues.len() == b.eigenvalues.len(), "window {i}: rank differs");
        worst = worst.max((a.stability_metric - b.stability_metric).abs());
        for (x, y) in a.eigenvalues.iter().zip(&b.eigenvalues) {
            worst = worst.max((x - y).norm());
        }
    }
    ensure!(worst <= 1e-9, "max disagreement {worst:e}");
    Ok(format!("50 windows, max disagreement {worst:.1e}"))
}

fn c9_backpressure() -> Outcome {
    // Block: the second write waits on a full queue; finalize gives up with
    // partial stats once the stalled socket stops accepting bytes.
    let stalled = StalledEndpoint::start();
    let mut cfg = BrokerConfig::new(vec![stalled.address.clone()]);
    cfg.queue_capacity = 1;
    cfg.write_timeout = Duration::from_millis(800);
    let mut ctx = broker_init(&cfg, "bp", 0, 1, STALL_PAYLOAD as u32).map_err(|e| e.to_string())?;
    let payload = vec![1.0; STALL_PAYLOAD];
    ensure!(ctx.write(1, &payload) == Ok(WriteOutcome::Queued), "first write not queued");
    let (tx, rx) = std::sync::mpsc::channel();
    let writer = std::thread::spawn(move || {
        let r = ctx.write(2, &payload);
        let _ = tx.send(());
        (ctx, r)
    });
    let blocked = rx.recv_timeout(Duration::from_millis(300)).is_err();
    let (mut ctx, _) = writer.join().map_err(|_| "writer panicked".to_string())?;
    ensure!(blocked, "Block-mode write returned against a full queue");
    let t = Instant::now();
    let block_stats = match ctx.finalize() {
        Err(BrokerError::Finalize { stats, .. }) => stats,
        other => return Err(format!("finalize against stalled endpoint gave {other:?}")),
    };
    ensure!(t.elapsed() < Duration::from_secs(5), "finalize took {:?}", t.elapsed());
    ensure!(block_stats.records_sent < block_stats.records_queued, "{block_stats:?}");
    drop(ctx);
    stalled.join();

    // DropNewest: exact drop counts, and queued = sent + dropped once the
    // endpoint resumes.
    let mut stalled = StalledEndpoint::start();
    let mut cfg = BrokerConfig::new(vec![stalled.address.clone()]);
    cfg.queue_capacity = 2;
    cfg.backpressure = BackpressurePolicy::DropNewest;
    cfg.write_timeout = Duration::from_secs(20);
    let mut ctx = broker_init(&cfg, "bp", 1, 2, STALL_PAYLOAD as u32).map_err(|e| e.to_string())?;
    let payload = vec![2.0; STALL_PAYLOAD];
    let mut dropped = 0;
    for s in 1..=10 {
        if ctx.write(s, &payload).map_err(|e| e.to_string())? == WriteOutcome::Dropped {
            dropped += 1;
        }
    }
    ensure!(dropped == 8 && ctx.stats().records_dropped == 8, "dropped {dropped}, stats {:?}", ctx.stats());
    stalled.release();
    let s = ctx.finalize().map_err(|e| e.to_string())?;
    drop(ctx);
    let received = stalled.appends();
    stalled.join();
    ensure!(
        s.records_queued == s.records_sent + s.records_dropped && s.records_sent == received,
        "queued {} sent {} dropped {} received {received}",
        s.records_queued,
        s.records_sent,
        s.records_dropped
    );
    Ok(format!(
        "block: queued {} sent {} at timeout; drop-newest: 10 = {} sent + {} dropped",
        block_stats.records_queued, block_stats.records_sent, s.records_sent, s.records_dropped
    ))
}

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    std::panic::catch_unwind(std::panic::AssertUnwindSafe(f)).unwrap_or_else(|p| {
        Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into()))
    })
}

fn main() {
    let scratch = tempfile::tempdir_in(env!("CARGO_TARGET_TMPDIR")).expect("scratch dir");
    let dir = scratch.path();
    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();
    let mut record = |n: u32, name: &'static str, r: Outcome| {
        match &r {
            Ok(d) => println!("criterion {n} [{name}]: PASS ({d})"),
            Err(e) => println!("criterion {n} [{name}]: FAIL ({e})"),
        }
        results.push((n, name, r));
    };
    record(1, "dmd spectrum recovery", guarded(c1_spectrum_recovery));
    record(2, "dmd invariants", guarded(c2_invariants));
    record(3, "wire round trip", guarded(c3_wire_round_trip));
    record(4, "pipeline conservation", guarded(|| c4_conservation(dir)));
    let (c5, c6) = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| c5_c6(dir)))
        .unwrap_or_else(|_| (Err("panicked".into()), Err("panicked".into())));
    record(5, "lag and latency", c5);
    record(6, "throughput scaling", c6);
    record(7, "io overhead ordering", guarded(|| c7_overhead_ordering(dir)));
    record(8, "analyzer path equivalence", guarded(c8_analyzer_equivalence));
    record(9, "backpressure contract", guarded(c9_backpressure));
    let failed = results.iter().filter(|r| r.2.is_err()).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
