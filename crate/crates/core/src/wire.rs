//! Length-prefixed binary framing shared by brokers, endpoints and the engine.
//!
//! Every frame is `length:u32be | msg_type:u8 | body`, where `length` counts
//! the type byte plus the body. Header integers are big-endian; bulk f64
//! payloads are little-endian IEEE-754. See `docs/PROTOCOL.md` for the full
//! layout with hex examples.

use std::io::{self, Read, Write};

use thiserror::Error;

/// Default upper bound on `length` (type byte + body).
pub const DEFAULT_MAX_FRAME: usize = 16 * 1024 * 1024;

pub const MSG_REGISTER: u8 = 0x01;
pub const MSG_APPEND: u8 = 0x02;
pub const MSG_FINALIZE: u8 = 0x03;
pub const MSG_ACK: u8 = 0x10;
pub const MSG_LIST_STREAMS: u8 = 0x20;
pub const MSG_STREAM_LIST: u8 = 0x21;
pub const MSG_READ_SINCE: u8 = 0x22;
pub const MSG_RECORD_BATCH: u8 = 0x23;

#[derive(Debug, Error)]
pub enum WireError {
    #[error("frame of {size} bytes exceeds cap of {cap}")]
    FrameTooLarge { size: usize, cap: usize },
    #[error("string of {0} bytes does not fit a 16-bit length prefix")]
    StringTooLong(usize),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("connection closed")]
    Closed,
    #[error(transparent)]
    Io(#[from] io::Error),
}

fn protocol(msg: impl Into<String>) -> WireError {
    WireError::Protocol(msg.into())
}

/// One stored record as carried by RECORD_BATCH.
#[derive(Debug, Clone, PartialEq)]
pub struct WireRecord {
    pub step: u64,
    pub produced_at_ns: u64,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Register {
        field_name: String,
        rank: u32,
        group_id: u32,
        element_count: u32,
    },
    Append {
        step: u64,
        payload: Vec<f64>,
    },
    Finalize,
    Ack {
        ok: bool,
        detail: String,
    },
    ListStreams,
    StreamList {
        keys: Vec<String>,
    },
    ReadSince {
        stream_key: String,
        after_step: u64,
        max_records: u32,
    },
    RecordBatch {
        records: Vec<WireRecord>,
    },
}

impl Message {
    pub fn ack_ok() -> Self {
        Message::Ack {
            ok: true,
            detail: String::new(),
        }
    }

    pub fn ack_err(detail: impl Into<String>) -> Self {
        Message::Ack {
            ok: false,
            detail: detail.into(),
        }
    }

    pub fn msg_type(&self) -> u8 {
        match self {
            Message::Register { .. } => MSG_REGISTER,
            Message::Append { .. } => MSG_APPEND,
            Message::Finalize => MSG_FINALIZE,
            Message::Ack { .. } => MSG_ACK,
            Message::ListStreams => MSG_LIST_STREAMS,
            Message::StreamList { .. } => MSG_STREAM_LIST,
            Message::ReadSince { .. } => MSG_READ_SINCE,
            Message::RecordBatch { .. } => MSG_RECORD_BATCH,
        }
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) -> Result<(), WireError> {
    let len = u16::try_from(s.len()).map_err(|_| WireError::StringTooLong(s.len()))?;
    out.extend_from_slice(&len.to_be_bytes());
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

fn put_count(out: &mut Vec<u8>, n: usize) -> Result<(), WireError> {
    let n = u32::try_from(n).map_err(|_| protocol(format!("count {n} exceeds u32")))?;
    out.extend_from_slice(&n.to_be_bytes());
    Ok(())
}

fn put_floats(out: &mut Vec<u8>, values: &[f64]) {
    out.reserve(values.len() * 8);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn body_len(msg: &Message) -> usize {
    match msg {
        Message::Register { field_name, .. } => 2 + field_name.len() + 12,
        Message::Append { payload, .. } => 12 + 8 * payload.len(),
        Message::Finalize | Message::ListStreams => 0,
        Message::Ack { detail, .. } => 3 + detail.len(),
        Message::StreamList { keys } => 4 + keys.iter().map(|k| 2 + k.len()).sum::<usize>(),
        Message::ReadSince { stream_key, .. } => 2 + stream_key.len() + 12,
        Message::RecordBatch { records } => {
            4 + records.iter().map(|r| 20 + 8 * r.values.len()).sum::<usize>()
        }
    }
}

/// Encodes `msg` with the default frame cap.
pub fn encode_frame(msg: &Message) -> Result<Vec<u8>, WireError> {
    encode_frame_capped(msg, DEFAULT_MAX_FRAME)
}

pub fn encode_frame_capped(msg: &Message, max_frame: usize) -> Result<Vec<u8>, WireError> {
    let length = 1 + body_len(msg);
    if length > max_frame || length > u32::MAX as usize {
        return Err(WireError::FrameTooLarge {
            size: length,
            cap: max_frame,
        });
    }
    let mut out = Vec::with_capacity(4 + length);
    out.extend_from_slice(&(length as u32).to_be_bytes());
    out.push(msg.msg_type());
    match msg {
        Message::Register {
            field_name,
            rank,
            group_id,
            element_count,
        } => {
            put_str(&mut out, field_name)?;
            out.extend_from_slice(&rank.to_be_bytes());
            out.extend_from_slice(&group_id.to_be_bytes());
            out.extend_from_slice(&element_count.to_be_bytes());
        }
        Message::Append { step, payload } => {
            out.extend_from_slice(&step.to_be_bytes());
            put_count(&mut out, payload.len())?;
            put_floats(&mut out, payload);
        }
        Message::Finalize | Message::ListStreams => {}
        Message::Ack { ok, detail } => {
            out.push(if *ok { 0 } else { 1 });
            put_str(&mut out, detail)?;
        }
        Message::StreamList { keys } => {
            put_count(&mut out, keys.len())?;
            for k in keys {
                put_str(&mut out, k)?;
            }
        }
        Message::ReadSince {
            stream_key,
            after_step,
            max_records,
        } => {
            put_str(&mut out, stream_key)?;
            out.extend_from_slice(&after_step.to_be_bytes());
            out.extend_from_slice(&max_records.to_be_bytes());
        }
        Message::RecordBatch { records } => {
            put_count(&mut out, records.len())?;
            for r in records {
                out.extend_from_slice(&r.step.to_be_bytes());
                out.extend_from_slice(&r.produced_at_ns.to_be_bytes());
                put_count(&mut out, r.values.len())?;
                put_floats(&mut out, &r.values);
            }
        }
    }
    debug_assert_eq!(out.len(), 4 + length);
    Ok(out)
}

/// Cursor over a frame body that fails on truncation instead of panicking.
struct Body<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Body<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        if self.buf.len() - self.pos < n {
            return Err(protocol(format!(
                "truncated body: need {n} bytes at offset {}, have {}",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, WireError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, WireError> {
        Ok(u16::from_be_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, WireError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, WireError> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String, WireError> {
        let n = self.u16()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| protocol("string is not UTF-8"))
    }

    /// Reads a count and checks that `count * min_item` bytes remain.
    fn count(&mut self, min_item: usize) -> Result<usize, WireError> {
        let n = self.u32()? as usize;
        let remaining = self.buf.len() - self.pos;
        if n.saturating_mul(min_item) > remaining {
            return Err(protocol(format!(
                "declared count {n} exceeds remaining body of {remaining} bytes"
            )));
        }
        Ok(n)
    }

    fn floats(&mut self, n: usize) -> Result<Vec<f64>, WireError> {
        let raw = self.take(n * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn finish(self) -> Result<(), WireError> {
        if self.pos != self.buf.len() {
            return Err(protocol(format!(
                "{} trailing bytes after message body",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

fn decode_body(msg_type: u8, body: &[u8]) -> Result<Message, WireError> {
    let mut b = Body { buf: body, pos: 0 };
    let msg = match msg_type {
        MSG_REGISTER => Message::Register {
            field_name: b.string()?,
            rank: b.u32()?,
            group_id: b.u32()?,
            element_count: b.u32()?,
        },
        MSG_APPEND => {
            let step = b.u64()?;
            let n = b.count(8)?;
            Message::Append {
                step,
                payload: b.floats(n)?,
            }
        }
        MSG_FINALIZE => Message::Finalize,
        MSG_ACK => {
            let ok = match b.u8()? {
                0 => true,
                1 => false,
                s => return Err(protocol(format!("unknown ACK status {s}"))),
            };
            Message::Ack {
                ok,
                detail: b.string()?,
            }
        }
        MSG_LIST_STREAMS => Message::ListStreams,
        MSG_STREAM_LIST => {
            let n = b.count(2)?;
            let keys = (0..n).map(|_| b.string()).collect::<Result<_, _>>()?;
            Message::StreamList { keys }
        }
        MSG_READ_SINCE => Message::ReadSince {
            stream_key: b.string()?,
            after_step: b.u64()?,
            max_records: b.u32()?,
        },
        MSG_RECORD_BATCH => {
            let n = b.count(20)?;
            let mut records = Vec::with_capacity(n);
            for _ in 0..n {
                let step = b.u64()?;
                let produced_at_ns = b.u64()?;
                let count = b.count(8)?;
                records.push(WireRecord {
                    step,
                    produced_at_ns,
                    values: b.floats(count)?,
                });
            }
            Message::RecordBatch { records }
        }
        other => return Err(protocol(format!("unknown msg_type 0x{other:02X}"))),
    };
    b.finish()?;
    Ok(msg)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Decoded {
    Message(Message, usize),
    NeedMoreData,
}

/// Decodes the first frame in `buf` with the default cap.
pub fn decode_frame(buf: &[u8]) -> Result<Decoded, WireError> {
    decode_frame_capped(buf, DEFAULT_MAX_FRAME)
}

pub fn decode_frame_capped(buf: &[u8], max_frame: usize) -> Result<Decoded, WireError> {
    if buf.len() < 4 {
        return Ok(Decoded::NeedMoreData);
    }
    let length = u32::from_be_bytes(buf[..4].try_into().unwrap()) as usize;
    if length == 0 {
        return Err(protocol("zero frame length"));
    }
    if length > max_frame {
        return Err(protocol(format!(
            "frame length {length} exceeds cap {max_frame}"
        )));
    }
    if buf.len() < 4 + length {
        return Ok(Decoded::NeedMoreData);
    }
    let msg = decode_body(buf[4], &buf[5..4 + length])?;
    Ok(Decoded::Message(msg, 4 + length))
}

/// Incremental decoder for one connection. Bytes go in with [`feed`],
/// complete messages come out of [`next_message`].
///
/// [`feed`]: FrameDecoder::feed
/// [`next_message`]: FrameDecoder::next_message
#[derive(Debug)]
pub struct FrameDecoder {
    buf: Vec<u8>,
    start: usize,
    max_frame: usize,
}

impl Default for FrameDecoder {
    fn default() -> Self {
        Self::new(DEFAULT_MAX_FRAME)
    }
}

impl FrameDecoder {
    pub fn new(max_frame: usize) -> Self {
        Self {
            buf: Vec::new(),
            start: 0,
            max_frame,
        }
    }

    pub fn feed(&mut self, bytes: &[u8]) {
        if self.start > 0 && self.start == self.buf.len() {
            self.buf.clear();
            self.start = 0;
        }
        self.buf.extend_from_slice(bytes);
    }

    pub fn buffered(&self) -> usize {
        self.buf.len() - self.start
    }

    pub fn next_message(&mut self) -> Result<Option<Message>, WireError> {
        match decode_frame_capped(&self.buf[self.start..], self.max_frame)? {
            Decoded::NeedMoreData => {
                if self.start > 0 {
                    self.buf.drain(..self.start);
                    self.start = 0;
                }
                Ok(None)
            }
            Decoded::Message(msg, used) => {
                self.start += used;
                Ok(Some(msg))
            }
        }
    }

    /// Blocks on `reader` until one full message is available.
    pub fn read_message<R: Read>(&mut self, reader: &mut R) -> Result<Message, WireError> {
        let mut chunk = [0u8; 64 * 1024];
        loop {
            if let Some(msg) = self.next_message()? {
                return Ok(msg);
            }
            let n = reader.read(&mut chunk)?;
            if n == 0 {
                return Err(if self.buffered() == 0 {
                    WireError::Closed
                } else {
                    protocol("connection closed mid-frame")
                });
            }
            self.feed(&chunk[..n]);
        }
    }
}

pub fn write_message<W: Write>(writer: &mut W, msg: &Message) -> Result<usize, WireError> {
    let bytes = encode_frame(msg)?;
    writer.write_all(&bytes)?;
    Ok(bytes.len())
}
