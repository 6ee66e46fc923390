//! Endpoint service: accepts broker connections, keeps an ordered, bounded
//! in-memory log per stream, and serves ranged reads to the engine.

use std::collections::{BTreeMap, VecDeque};
use std::fs::File;
use std::io::{self, BufWriter, ErrorKind, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use log::{debug, info, warn};
use thiserror::Error;

use crate::broker::FINALIZED_DETAIL;
use crate::clock::monotonic_ns;
use crate::model::{make_stream_key, EndpointAddress};
use crate::wire::{self, FrameDecoder, Message, WireRecord};

pub const DEFAULT_RETENTION: usize = 4096;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StoreError {
    #[error("unregistered")]
    Unregistered,
    #[error("not-found: {0}")]
    NotFound(String),
    #[error("out-of-order: step {step} after {last}")]
    OutOfOrder { step: u64, last: u64 },
    #[error("dimension mismatch: {got} values, registered {expected}")]
    Dimension { got: usize, expected: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoredRecord {
    pub step: u64,
    /// Arrival time at the endpoint on its monotonic clock.
    pub produced_at_ns: u64,
    pub values: Vec<f64>,
}

impl From<StoredRecord> for WireRecord {
    fn from(r: StoredRecord) -> Self {
        WireRecord {
            step: r.step,
            produced_at_ns: r.produced_at_ns,
            values: r.values,
        }
    }
}

#[derive(Debug)]
struct StreamLog {
    element_count: u32,
    records: VecDeque<StoredRecord>,
    last_step: Option<u64>,
    appended: u64,
    bytes: u64,
}

/// Result of a ranged read. `found` is false for an unknown stream.
#[derive(Debug, Clone, PartialEq)]
pub struct ReadResult {
    pub records: Vec<StoredRecord>,
    pub found: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StreamStats {
    pub stream_key: String,
    pub records_total: u64,
    pub bytes_total: u64,
    pub retained: usize,
}

/// Per-stream ordered logs with a retention cap.
///
/// The stream map and each log sit behind their own readers-writer lock, so
/// appends to one stream never block reads of another.
#[derive(Debug)]
pub struct StreamStore {
    retention: usize,
    streams: RwLock<BTreeMap<String, Arc<RwLock<StreamLog>>>>,
}

impl StreamStore {
    pub fn new(retention: usize) -> Result<Self, StoreError> {
        if retention == 0 {
            return Err(StoreError::InvalidArgument("retention must be ≥ 1".into()));
        }
        Ok(Self {
            retention,
            streams: RwLock::new(BTreeMap::new()),
        })
    }

    pub fn retention(&self) -> usize {
        self.retention
    }

    fn log(&self, key: &str) -> Option<Arc<RwLock<StreamLog>>> {
        self.streams.read().unwrap().get(key).cloned()
    }

    /// Creates the stream, or accepts a repeat registration with the same
    /// element count.
    pub fn register(&self, key: &str, element_count: u32) -> Result<(), StoreError> {
        if element_count == 0 {
            return Err(StoreError::InvalidArgument("element_count must be ≥ 1".into()));
        }
        let mut streams = self.streams.write().unwrap();
        if let Some(existing) = streams.get(key) {
            let expected = existing.read().unwrap().element_count;
            if expected != element_count {
                return Err(StoreError::Dimension {
                    got: element_count as usize,
                    expected: expected as usize,
                });
            }
            return Ok(());
        }
        streams.insert(
            key.to_string(),
            Arc::new(RwLock::new(StreamLog {
                element_count,
                records: VecDeque::new(),
                last_step: None,
                appended: 0,
                bytes: 0,
            })),
        );
        Ok(())
    }

    pub fn append(
        &self,
        key: &str,
        step: u64,
        produced_at_ns: u64,
        values: Vec<f64>,
    ) -> Result<(), StoreError> {
        let log = self.log(key).ok_or(StoreError::Unregistered)?;
        let mut log = log.write().unwrap();
        if values.len() != log.element_count as usize {
            return Err(StoreError::Dimension {
                got: values.len(),
                expected: log.element_count as usize,
            });
        }
        if let Some(last) = log.last_step {
            if step <= last {
                return Err(StoreError::OutOfOrder { step, last });
            }
        }
        log.last_step = Some(step);
        log.appended += 1;
        log.bytes += 8 * values.len() as u64;
        log.records.push_back(StoredRecord {
            step,
            produced_at_ns,
            values,
        });
        while log.records.len() > self.retention {
            log.records.pop_front();
        }
        Ok(())
    }

    /// Records with `step > after_step`, ascending, at most `max_records`.
    pub fn read_since(&self, key: &str, after_step: u64, max_records: usize) -> ReadResult {
        let Some(log) = self.log(key) else {
            return ReadResult {
                records: Vec::new(),
                found: false,
            };
        };
        let log = log.read().unwrap();
        let start = log.records.partition_point(|r| r.step <= after_step);
        ReadResult {
            records: log.records.range(start..).take(max_records).cloned().collect(),
            found: true,
        }
    }

    /// Removes every record with `step <= up_to_step`; returns how many.
    pub fn trim(&self, key: &str, up_to_step: u64) -> Result<usize, StoreError> {
        let log = self.log(key).ok_or_else(|| StoreError::NotFound(key.to_string()))?;
        let mut log = log.write().unwrap();
        let n = log.records.partition_point(|r| r.step <= up_to_step);
        log.records.drain(..n);
        Ok(n)
    }

    pub fn list(&self) -> Vec<String> {
        self.streams.read().unwrap().keys().cloned().collect()
    }

    pub fn stats(&self) -> Vec<StreamStats> {
        self.streams
            .read()
            .unwrap()
            .iter()
            .map(|(k, log)| {
                let log = log.read().unwrap();
                StreamStats {
                    stream_key: k.clone(),
                    records_total: log.appended,
                    bytes_total: log.bytes,
                    retained: log.records.len(),
                }
            })
            .collect()
    }
}

#[derive(Debug, Error)]
pub enum ServerError {
    #[error("cannot bind {addr}: {source}")]
    Bind { addr: String, source: io::Error },
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Clone)]
pub struct ServerOptions {
    pub retention: usize,
    pub max_frame: usize,
    /// Append one CSV snapshot of per-stream counters here every second.
    pub stats_file: Option<PathBuf>,
}

impl Default for ServerOptions {
    fn default() -> Self {
        Self {
            retention: DEFAULT_RETENTION,
            max_frame: wire::DEFAULT_MAX_FRAME,
            stats_file: None,
        }
    }
}

/// A running endpoint. Dropping it shuts the server down.
pub struct EndpointServer {
    local_addr: SocketAddr,
    store: Arc<StreamStore>,
    shutdown: Arc<AtomicBool>,
    acceptor: Option<JoinHandle<()>>,
    connections: Arc<Mutex<Vec<JoinHandle<()>>>>,
    stats_writer: Option<JoinHandle<()>>,
}

const POLL: Duration = Duration::from_millis(100);

/// Binds `bind` and starts serving.
pub fn serve(bind: &EndpointAddress, opts: ServerOptions) -> Result<EndpointServer, ServerError> {
    let addr_text = bind.to_string();
    let bind_err = |source| ServerError::Bind {
        addr: addr_text.clone(),
        source,
    };
    let addrs: Vec<SocketAddr> = (bind.host.as_str(), bind.port)
        .to_socket_addrs()
        .map_err(bind_err)?
        .collect();
    let listener = TcpListener::bind(&addrs[..]).map_err(bind_err)?;
    EndpointServer::start(listener, opts)
}

impl EndpointServer {
    /// Starts serving on an already bound listener (port 0 in tests).
    pub fn start(listener: TcpListener, opts: ServerOptions) -> Result<Self, ServerError> {
        let store = Arc::new(StreamStore::new(opts.retention)?);
        let local_addr = listener.local_addr()?;
        let shutdown = Arc::new(AtomicBool::new(false));
        let connections = Arc::new(Mutex::new(Vec::new()));

        let acceptor = {
            let store = Arc::clone(&store);
            let shutdown = Arc::clone(&shutdown);
            let connections = Arc::clone(&connections);
            let max_frame = opts.max_frame;
            thread::Builder::new()
                .name(format!("endpoint-accept-{}", local_addr.port()))
                .spawn(move || {
                    for conn in listener.incoming() {
                        if shutdown.load(Ordering::Acquire) {
                            break;
                        }
                        let stream = match conn {
                            Ok(s) => s,
                            Err(e) => {
                                warn!("accept failed: {e}");
                                continue;
                            }
                        };
                        let store = Arc::clone(&store);
                        let shutdown = Arc::clone(&shutdown);
                        let handle = thread::spawn(move || {
                            let peer = stream.peer_addr().ok();
                            if let Err(e) = handle_connection(stream, &store, &shutdown, max_frame)
                            {
                                debug!("connection {peer:?} ended: {e}");
                            }
                        });
                        let mut conns = connections.lock().unwrap();
                        conns.retain(|h: &JoinHandle<()>| !h.is_finished());
                        conns.push(handle);
                    }
                })?
        };

        let stats_writer = match opts.stats_file {
            Some(path) => {
                let store = Arc::clone(&store);
                let shutdown = Arc::clone(&shutdown);
                let file = File::create(&path)?;
                Some(thread::spawn(move || {
                    if let Err(e) = write_stats_loop(file, &store, &shutdown) {
                        warn!("stats file {}: {e}", path.display());
                    }
                }))
            }
            None => None,
        };
        info!("endpoint listening on {local_addr}");
        Ok(Self {
            local_addr,
            store,
            shutdown,
            acceptor: Some(acceptor),
            connections,
            stats_writer,
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.local_addr
    }

    pub fn address(&self) -> EndpointAddress {
        EndpointAddress::new(self.local_addr.ip().to_string(), self.local_addr.port())
            .expect("bound address is valid")
    }

    pub fn store(&self) -> &Arc<StreamStore> {
        &self.store
    }

    /// Stops accepting, lets every connection process the bytes it has
    /// already received, then joins all threads.
    pub fn shutdown(&mut self) {
        if self.shutdown.swap(true, Ordering::AcqRel) {
            return;
        }
        // Wake the blocking accept.
        let _ = TcpStream::connect_timeout(&self.local_addr, Duration::from_secs(1));
        if let Some(h) = self.acceptor.take() {
            let _ = h.join();
        }
        let handles: Vec<_> = self.connections.lock().unwrap().drain(..).collect();
        for h in handles {
            let _ = h.join();
        }
        if let Some(h) = self.stats_writer.take() {
            let _ = h.join();
        }
    }
}

impl Drop for EndpointServer {
    fn drop(&mut self) {
        self.shutdown();
    }
}

struct Connection<'a> {
    store: &'a StreamStore,
    registered: Option<String>,
}

enum Next {
    Continue,
    Close,
}

impl Connection<'_> {
    fn handle(&mut self, msg: Message, out: &mut Vec<u8>) -> Result<Next, wire::WireError> {
        let reply = match msg {
            Message::Register {
                field_name,
                rank,
                element_count,
                ..
            } => {
                if self.registered.is_some() {
                    Some(Message::ack_err("already registered on this connection"))
                } else {
                    match make_stream_key(&field_name, rank)
                        .map_err(|e| e.to_string())
                        .and_then(|k| {
                            self.store
                                .register(k.as_str(), element_count)
                                .map(|_| k)
                                .map_err(|e| e.to_string())
                        }) {
                        Ok(key) => {
                            debug!("registered {key}");
                            self.registered = Some(key.as_str().to_string());
                            Some(Message::ack_ok())
                        }
                        Err(e) => Some(Message::ack_err(e)),
                    }
                }
            }
            Message::Append { step, payload } => match &self.registered {
                None => Some(Message::ack_err(StoreError::Unregistered.to_string())),
                Some(key) => match self.store.append(key, step, monotonic_ns(), payload) {
                    Ok(()) => None,
                    Err(e) => {
                        warn!("{key}: {e}");
                        Some(Message::ack_err(e.to_string()))
                    }
                },
            },
            Message::Finalize => {
                out.extend(wire::encode_frame(&Message::Ack {
                    ok: true,
                    detail: FINALIZED_DETAIL.into(),
                })?);
                return Ok(Next::Close);
            }
            Message::ListStreams => Some(Message::StreamList {
                keys: self.store.list(),
            }),
            Message::ReadSince {
                stream_key,
                after_step,
                max_records,
            } => {
                let res = self
                    .store
                    .read_since(&stream_key, after_step, max_records as usize);
                Some(Message::RecordBatch {
                    records: res.records.into_iter().map(Into::into).collect(),
                })
            }
            other => Some(Message::ack_err(format!(
                "unexpected message type 0x{:02X}",
                other.msg_type()
            ))),
        };
        if let Some(reply) = reply {
            out.extend(wire::encode_frame(&reply)?);
        }
        Ok(Next::Continue)
    }
}

fn handle_connection(
    mut stream: TcpStream,
    store: &StreamStore,
    shutdown: &AtomicBool,
    max_frame: usize,
) -> Result<(), wire::WireError> {
    stream.set_nodelay(true)?;
    stream.set_read_timeout(Some(POLL))?;
    let mut decoder = FrameDecoder::new(max_frame);
    let mut conn = Connection {
        store,
        registered: None,
    };
    let mut chunk = vec![0u8; 256 * 1024];
    let mut out = Vec::new();
    let mut draining = false;
    loop {
        loop {
            match decoder.next_message() {
                Ok(Some(msg)) => {
                    if let Next::Close = conn.handle(msg, &mut out)? {
                        stream.write_all(&out)?;
                        return Ok(());
                    }
                }
                Ok(None) => break,
                Err(e) => {
                    out.extend(wire::encode_frame(&Message::ack_err(e.to_string()))?);
                    stream.write_all(&out)?;
                    return Err(e);
                }
            }
        }
        if !out.is_empty() {
            stream.write_all(&out)?;
            out.clear();
        }
        if shutdown.load(Ordering::Acquire) && !draining {
            // Finish whatever is already buffered in the socket, then stop.
            draining = true;
            stream.set_nonblocking(true)?;
        }
        match stream.read(&mut chunk) {
            Ok(0) => return Ok(()),
            Ok(n) => decoder.feed(&chunk[..n]),
            Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {
                if draining {
                    return Ok(());
                }
            }
            Err(e) if e.kind() == ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
}

fn write_stats_snapshot(
    out: &mut impl Write,
    store: &StreamStore,
    prev: &mut BTreeMap<String, (u64, u64)>,
) -> io::Result<()> {
    let now = monotonic_ns();
    for s in store.stats() {
        let (prev_t, prev_n) = prev.get(&s.stream_key).copied().unwrap_or((now, 0));
        let dt = (now.saturating_sub(prev_t)) as f64 / 1e9;
        let rate = if dt > 0.0 {
            (s.records_total - prev_n) as f64 / dt
        } else {
            0.0
        };
        writeln!(
            out,
            "{now},{},{},{:.3},{},{}",
            s.stream_key, s.records_total, rate, s.bytes_total, s.retained
        )?;
        prev.insert(s.stream_key, (now, s.records_total));
    }
    out.flush()
}

pub const STATS_HEADER: &str = "timestamp_ns,stream_key,records_total,records_per_s,bytes_total,retained";

fn write_stats_loop(file: File, store: &StreamStore, shutdown: &AtomicBool) -> io::Result<()> {
    let mut out = BufWriter::new(file);
    writeln!(out, "{STATS_HEADER}")?;
    let mut prev = BTreeMap::new();
    let mut ticks = 0u32;
    while !shutdown.load(Ordering::Acquire) {
        thread::sleep(POLL);
        ticks += 1;
        if ticks % 10 == 0 {
            write_stats_snapshot(&mut out, store, &mut prev)?;
        }
    }
    // Final snapshot taken after connections drained.
    write_stats_snapshot(&mut out, store, &mut prev)
}

/// Reads the last snapshot of a stats CSV: per-stream total records.
pub fn read_final_stats(path: &std::path::Path) -> io::Result<BTreeMap<String, u64>> {
    let text = std::fs::read_to_string(path)?;
    let mut latest = BTreeMap::new();
    for line in text.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() < 3 {
            continue;
        }
        if let Ok(n) = cols[2].parse::<u64>() {
            latest.insert(cols[1].to_string(), n);
        }
    }
    Ok(latest)
}
