//! Simulation-side client: registers one field of one rank with its group's
//! endpoint and streams timesteps through a bounded queue drained by a
//! background sender thread.
//!
//! ```text
//! broker_write ──► [bounded queue] ──► sender thread ──► TCP ──► endpoint
//! ```
//!
//! A record keeps its queue slot until its APPEND frame has been fully
//! written, so `queue_capacity` bounds the unsent records held by the client.

use std::collections::VecDeque;
use std::io::Read;
use std::net::{Shutdown, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{self, RecvTimeoutError};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use log::{debug, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::monotonic_ns;
use crate::model::{assign_group, EndpointAddress, FieldDescriptor, ModelError, StreamKey};
use crate::wire::{self, FrameDecoder, Message, WireError};

/// Overrides [`BrokerConfig::endpoints`] with a comma-separated `host:port` list.
pub const ENDPOINTS_ENV: &str = "BROKER_ENDPOINTS";

/// Detail string the endpoint puts in the ACK answering FINALIZE.
pub const FINALIZED_DETAIL: &str = "finalized";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackpressurePolicy {
    /// Writers wait for queue space. Lossless.
    #[default]
    Block,
    /// A write against a full queue is discarded and counted.
    DropNewest,
}

impl std::str::FromStr for BackpressurePolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "block" => Ok(Self::Block),
            "drop-newest" | "drop_newest" | "drop" => Ok(Self::DropNewest),
            _ => Err(format!("unknown backpressure policy {s:?}")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BrokerConfig {
    pub endpoints: Vec<EndpointAddress>,
    pub queue_capacity: usize,
    pub backpressure: BackpressurePolicy,
    pub connect_timeout: Duration,
    pub write_timeout: Duration,
    pub max_frame: usize,
}

impl BrokerConfig {
    pub fn new(endpoints: Vec<EndpointAddress>) -> Self {
        Self {
            endpoints,
            queue_capacity: 64,
            backpressure: BackpressurePolicy::Block,
            connect_timeout: Duration::from_secs(5),
            write_timeout: Duration::from_secs(10),
            max_frame: wire::DEFAULT_MAX_FRAME,
        }
    }

    /// Applies [`ENDPOINTS_ENV`] if it is set and nonempty.
    pub fn with_env_override(mut self) -> Result<Self, BrokerError> {
        if let Ok(list) = std::env::var(ENDPOINTS_ENV) {
            if !list.trim().is_empty() {
                self.endpoints = EndpointAddress::parse_list(&list)?;
            }
        }
        Ok(self)
    }

    fn validate(&self) -> Result<(), BrokerError> {
        if self.endpoints.is_empty() {
            return Err(BrokerError::InvalidArgument("no endpoints configured".into()));
        }
        if self.queue_capacity == 0 {
            return Err(BrokerError::InvalidArgument("queue_capacity must be ≥ 1".into()));
        }
        if self.connect_timeout.is_zero() || self.write_timeout.is_zero() {
            return Err(BrokerError::InvalidArgument("timeouts must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum WriteOutcome {
    Queued,
    Dropped,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BrokerStats {
    pub records_queued: u64,
    pub records_sent: u64,
    pub records_dropped: u64,
    pub records_in_flight: u64,
    pub bytes_sent: u64,
    /// Error ACKs the endpoint returned for individual appends.
    pub server_errors: u64,
    pub wall_time: Duration,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BrokerError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("cannot reach endpoint {endpoint}: {reason}")]
    Init {
        endpoint: EndpointAddress,
        reason: String,
    },
    #[error("endpoint {endpoint} rejected registration: {detail}")]
    Registration {
        endpoint: EndpointAddress,
        detail: String,
    },
    #[error("step {step} is not after last written step {last}")]
    OutOfOrder { step: u64, last: u64 },
    #[error("broken pipe: {0}")]
    BrokenPipe(String),
    #[error("finalize failed: {reason}")]
    Finalize { reason: String, stats: BrokerStats },
}

impl From<ModelError> for BrokerError {
    fn from(e: ModelError) -> Self {
        BrokerError::InvalidArgument(e.to_string())
    }
}

struct Pending {
    step: u64,
    payload: Vec<f64>,
}

struct QueueState {
    items: VecDeque<Pending>,
    /// The sender has taken a record and not finished writing it.
    sending: bool,
    closed: bool,
    failed: Option<String>,
}

struct Shared {
    queue: Mutex<QueueState>,
    not_empty: Condvar,
    not_full: Condvar,
    capacity: usize,
    queued: AtomicU64,
    sent: AtomicU64,
    dropped: AtomicU64,
    bytes: AtomicU64,
    server_errors: AtomicU64,
}

impl Shared {
    fn fail(&self, reason: String) {
        let mut q = self.queue.lock().unwrap();
        if q.failed.is_none() {
            q.failed = Some(reason);
        }
        q.sending = false;
        drop(q);
        self.not_full.notify_all();
        self.not_empty.notify_all();
    }
}

/// One registered stream: a field of one rank bound to its group's endpoint.
pub struct BrokerContext {
    descriptor: FieldDescriptor,
    stream_key: StreamKey,
    endpoint: EndpointAddress,
    group_id: u32,
    policy: BackpressurePolicy,
    write_timeout: Duration,
    shared: Arc<Shared>,
    socket: TcpStream,
    sender: Option<JoinHandle<()>>,
    done_rx: mpsc::Receiver<Result<(), String>>,
    last_step: Option<u64>,
    last_produced_at: u64,
    started: Instant,
    finalized: Option<Result<BrokerStats, BrokerError>>,
}

fn connect(addr: &EndpointAddress, timeout: Duration) -> Result<TcpStream, BrokerError> {
    let init_err = |reason: String| BrokerError::Init {
        endpoint: addr.clone(),
        reason,
    };
    let candidates = (addr.host.as_str(), addr.port)
        .to_socket_addrs()
        .map_err(|e| init_err(e.to_string()))?;
    let mut last = String::from("no addresses resolved");
    for sa in candidates {
        match TcpStream::connect_timeout(&sa, timeout) {
            Ok(s) => return Ok(s),
            Err(e) => last = e.to_string(),
        }
    }
    Err(init_err(last))
}

/// Connects `rank`'s `field_name` stream to the endpoint of its group and
/// registers it. The group is derived from the rank.
pub fn broker_init(
    config: &BrokerConfig,
    field_name: &str,
    rank: u32,
    world_size: u32,
    element_count: u32,
) -> Result<BrokerContext, BrokerError> {
    config.validate()?;
    let descriptor = FieldDescriptor::new(field_name, rank, world_size, element_count)?;
    let group_id = assign_group(rank, world_size, config.endpoints.len() as u32)?;
    let endpoint = config.endpoints[group_id as usize].clone();

    let mut socket = connect(&endpoint, config.connect_timeout)?;
    let io_err = |e: &dyn std::fmt::Display| BrokerError::Init {
        endpoint: endpoint.clone(),
        reason: e.to_string(),
    };
    socket.set_nodelay(true).map_err(|e| io_err(&e))?;
    socket
        .set_read_timeout(Some(config.connect_timeout))
        .map_err(|e| io_err(&e))?;
    socket
        .set_write_timeout(Some(config.write_timeout))
        .map_err(|e| io_err(&e))?;

    let register = Message::Register {
        field_name: descriptor.field_name.clone(),
        rank,
        group_id,
        element_count,
    };
    wire::write_message(&mut socket, &register).map_err(|e| io_err(&e))?;
    let mut decoder = FrameDecoder::new(config.max_frame);
    match decoder.read_message(&mut socket) {
        Ok(Message::Ack { ok: true, .. }) => {}
        Ok(Message::Ack { ok: false, detail }) => {
            return Err(BrokerError::Registration { endpoint, detail })
        }
        Ok(other) => {
            return Err(io_err(&format!(
                "unexpected reply 0x{:02X} to REGISTER",
                other.msg_type()
            )))
        }
        Err(e) => return Err(io_err(&e)),
    }
    socket.set_read_timeout(None).map_err(|e| io_err(&e))?;

    let shared = Arc::new(Shared {
        queue: Mutex::new(QueueState {
            items: VecDeque::with_capacity(config.queue_capacity),
            sending: false,
            closed: false,
            failed: None,
        }),
        not_empty: Condvar::new(),
        not_full: Condvar::new(),
        capacity: config.queue_capacity,
        queued: AtomicU64::new(0),
        sent: AtomicU64::new(0),
        dropped: AtomicU64::new(0),
        bytes: AtomicU64::new(0),
        server_errors: AtomicU64::new(0),
    });

    let (done_tx, done_rx) = mpsc::channel();
    let sender_socket = socket.try_clone().map_err(|e| io_err(&e))?;
    let sender_shared = Arc::clone(&shared);
    let max_frame = config.max_frame;
    let read_timeout = config.write_timeout;
    let stream_key = descriptor.stream_key();
    let sender = thread::Builder::new()
        .name(format!("broker-{stream_key}"))
        .spawn(move || {
            let result = run_sender(sender_socket, decoder, &sender_shared, max_frame, read_timeout);
            if let Err(reason) = &result {
                sender_shared.fail(reason.clone());
            }
            let _ = done_tx.send(result);
        })
        .map_err(|e| io_err(&e))?;
    debug!("registered {stream_key} with {endpoint} (group {group_id})");

    Ok(BrokerContext {
        descriptor,
        stream_key,
        endpoint,
        group_id,
        policy: config.backpressure,
        write_timeout: config.write_timeout,
        shared,
        socket,
        sender: Some(sender),
        done_rx,
        last_step: None,
        last_produced_at: 0,
        started: Instant::now(),
        finalized: None,
    })
}

fn run_sender(
    mut socket: TcpStream,
    mut decoder: FrameDecoder,
    shared: &Shared,
    max_frame: usize,
    read_timeout: Duration,
) -> Result<(), String> {
    loop {
        let next = {
            let mut q = shared.queue.lock().unwrap();
            while q.items.is_empty() && !q.closed {
                q = shared.not_empty.wait(q).unwrap();
            }
            if let Some(f) = &q.failed {
                return Err(f.clone());
            }
            match q.items.pop_front() {
                Some(p) => {
                    q.sending = true;
                    p
                }
                None => break,
            }
        };
        let frame = wire::encode_frame_capped(
            &Message::Append {
                step: next.step,
                payload: next.payload,
            },
            max_frame,
        )
        .map_err(|e| e.to_string())?;
        std::io::Write::write_all(&mut socket, &frame).map_err(|e| format!("write failed: {e}"))?;
        shared.bytes.fetch_add(frame.len() as u64, Ordering::Relaxed);
        shared.sent.fetch_add(1, Ordering::Release);
        shared.queue.lock().unwrap().sending = false;
        shared.not_full.notify_all();
    }

    let frame = wire::encode_frame(&Message::Finalize).map_err(|e| e.to_string())?;
    std::io::Write::write_all(&mut socket, &frame).map_err(|e| format!("write failed: {e}"))?;
    shared.bytes.fetch_add(frame.len() as u64, Ordering::Relaxed);
    socket
        .set_read_timeout(Some(read_timeout))
        .map_err(|e| e.to_string())?;
    // Error ACKs for individual appends may precede the one answering FINALIZE.
    let mut chunk = [0u8; 4096];
    loop {
        match decoder.next_message() {
            Ok(Some(Message::Ack { ok: true, detail })) if detail == FINALIZED_DETAIL => break,
            Ok(Some(Message::Ack { ok: false, detail })) => {
                warn!("endpoint reported: {detail}");
                shared.server_errors.fetch_add(1, Ordering::Relaxed);
                continue;
            }
            Ok(Some(_)) => continue,
            Ok(None) => {}
            Err(e) => return Err(e.to_string()),
        }
        let n = socket.read(&mut chunk).map_err(|e| format!("awaiting FINALIZE ack: {e}"))?;
        if n == 0 {
            return Err(WireError::Closed.to_string());
        }
        decoder.feed(&chunk[..n]);
    }
    let _ = socket.shutdown(Shutdown::Both);
    Ok(())
}

impl BrokerContext {
    pub fn descriptor(&self) -> &FieldDescriptor {
        &self.descriptor
    }

    pub fn stream_key(&self) -> &StreamKey {
        &self.stream_key
    }

    pub fn endpoint(&self) -> &EndpointAddress {
        &self.endpoint
    }

    pub fn group_id(&self) -> u32 {
        self.group_id
    }

    pub fn last_step(&self) -> Option<u64> {
        self.last_step
    }

    /// Monotonic timestamp stamped on the most recent write.
    pub fn last_produced_at(&self) -> u64 {
        self.last_produced_at
    }

    pub fn stats(&self) -> BrokerStats {
        let s = &self.shared;
        let queued = s.queued.load(Ordering::Acquire);
        let sent = s.sent.load(Ordering::Acquire);
        let dropped = s.dropped.load(Ordering::Acquire);
        BrokerStats {
            records_queued: queued,
            records_sent: sent,
            records_dropped: dropped,
            records_in_flight: queued.saturating_sub(sent + dropped),
            bytes_sent: s.bytes.load(Ordering::Relaxed),
            server_errors: s.server_errors.load(Ordering::Relaxed),
            wall_time: self.started.elapsed(),
        }
    }

    /// Copies `data` into a record for `step` and hands it to the sender.
    /// Never waits on the network; under [`BackpressurePolicy::Block`] it
    /// waits only for queue space.
    pub fn write(&mut self, step: u64, data: &[f64]) -> Result<WriteOutcome, BrokerError> {
        if self.finalized.is_some() {
            return Err(BrokerError::BrokenPipe("context already finalized".into()));
        }
        if data.len() != self.descriptor.element_count as usize {
            return Err(BrokerError::InvalidArgument(format!(
                "{} values written, {} registered",
                data.len(),
                self.descriptor.element_count
            )));
        }
        if let Some(last) = self.last_step {
            if step <= last {
                return Err(BrokerError::OutOfOrder { step, last });
            }
        }
        self.last_produced_at = monotonic_ns();
        let record = Pending {
            step,
            payload: data.to_vec(),
        };
        let shared = &self.shared;
        let mut q = shared.queue.lock().unwrap();
        if let Some(f) = &q.failed {
            return Err(BrokerError::BrokenPipe(f.clone()));
        }
        let full = |q: &QueueState| q.items.len() + q.sending as usize >= shared.capacity;
        if full(&q) {
            match self.policy {
                BackpressurePolicy::DropNewest => {
                    shared.queued.fetch_add(1, Ordering::AcqRel);
                    shared.dropped.fetch_add(1, Ordering::AcqRel);
                    self.last_step = Some(step);
                    return Ok(WriteOutcome::Dropped);
                }
                BackpressurePolicy::Block => {
                    while full(&q) && q.failed.is_none() {
                        q = shared.not_full.wait(q).unwrap();
                    }
                    if let Some(f) = &q.failed {
                        return Err(BrokerError::BrokenPipe(f.clone()));
                    }
                }
            }
        }
        q.items.push_back(record);
        shared.queued.fetch_add(1, Ordering::AcqRel);
        drop(q);
        shared.not_empty.notify_one();
        self.last_step = Some(step);
        Ok(WriteOutcome::Queued)
    }

    /// Flushes the queue, sends FINALIZE and closes the connection.
    ///
    /// Fails if the sender makes no progress for `write_timeout`; the error
    /// carries the stats gathered so far. Repeated calls return the first
    /// call's outcome.
    pub fn finalize(&mut self) -> Result<BrokerStats, BrokerError> {
        if let Some(done) = &self.finalized {
            return done.clone();
        }
        {
            let mut q = self.shared.queue.lock().unwrap();
            q.closed = true;
        }
        self.shared.not_empty.notify_all();

        let outcome = loop {
            let progress_before = self.shared.sent.load(Ordering::Acquire);
            match self.done_rx.recv_timeout(self.write_timeout) {
                Ok(result) => break result,
                Err(RecvTimeoutError::Disconnected) => break Err("sender exited".to_string()),
                Err(RecvTimeoutError::Timeout) => {
                    if self.shared.sent.load(Ordering::Acquire) == progress_before {
                        break Err(format!(
                            "no progress flushing to {} within {:?}",
                            self.endpoint, self.write_timeout
                        ));
                    }
                }
            }
        };

        let result = match outcome {
            Ok(()) => {
                if let Some(h) = self.sender.take() {
                    let _ = h.join();
                }
                Ok(self.stats())
            }
            Err(reason) => {
                // Unblock a sender stuck in a socket write; it exits on its own.
                let _ = self.socket.shutdown(Shutdown::Both);
                self.shared.fail(reason.clone());
                Err(BrokerError::Finalize {
                    reason,
                    stats: self.stats(),
                })
            }
        };
        self.finalized = Some(result.clone());
        result
    }
}

impl Drop for BrokerContext {
    fn drop(&mut self) {
        if self.finalized.is_none() {
            if let Err(e) = self.finalize() {
                warn!("{}: {e}", self.stream_key);
            }
        }
    }
}

/// Free-function spelling of [`BrokerContext::write`].
pub fn broker_write(
    ctx: &mut BrokerContext,
    step: u64,
    data: &[f64],
) -> Result<WriteOutcome, BrokerError> {
    ctx.write(step, data)
}

/// Free-function spelling of [`BrokerContext::finalize`].
pub fn broker_finalize(ctx: &mut BrokerContext) -> Result<BrokerStats, BrokerError> {
    ctx.finalize()
}
