//! Second codec for the frame layout, written against the layout table
//! alone. Floats are carried as raw bits so NaN payloads compare equal.

use elasticbroker::wire::{Message, WireRecord};
use rand::Rng;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RefMsg {
    Register(String, u32, u32, u32),
    Append(u64, Vec<u64>),
    Finalize,
    Ack(bool, String),
    ListStreams,
    StreamList(Vec<String>),
    ReadSince(String, u64, u32),
    RecordBatch(Vec<(u64, u64, Vec<u64>)>),
}

pub fn to_ref(m: &Message) -> RefMsg {
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    match m {
        Message::Register {
            field_name,
            rank,
            group_id,
            element_count,
        } => RefMsg::Register(field_name.clone(), *rank, *group_id, *element_count),
        Message::Append { step, payload } => RefMsg::Append(*step, bits(payload)),
        Message::Finalize => RefMsg::Finalize,
        Message::Ack { ok, detail } => RefMsg::Ack(*ok, detail.clone()),
        Message::ListStreams => RefMsg::ListStreams,
        Message::StreamList { keys } => RefMsg::StreamList(keys.clone()),
        Message::ReadSince {
            stream_key,
            after_step,
            max_records,
        } => RefMsg::ReadSince(stream_key.clone(), *after_step, *max_records),
        Message::RecordBatch { records } => RefMsg::RecordBatch(
            records
                .iter()
                .map(|r| (r.step, r.produced_at_ns, bits(&r.values)))
                .collect(),
        ),
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend((s.len() as u16).to_be_bytes());
    out.extend(s.as_bytes());
}

fn put_floats(out: &mut Vec<u8>, v: &[u64]) {
    for b in v {
        out.extend(f64::from_bits(*b).to_le_bytes());
    }
}

pub fn ref_encode(m: &RefMsg) -> Vec<u8> {
    let mut body = Vec::new();
    let t = match m {
        RefMsg::Register(f, r, g, n) => {
            put_str(&mut body, f);
            body.extend(r.to_be_bytes());
            body.extend(g.to_be_bytes());
            body.extend(n.to_be_bytes());
            0x01
        }
        RefMsg::Append(step, v) => {
            body.extend(step.to_be_bytes());
            body.extend((v.len() as u32).to_be_bytes());
            put_floats(&mut body, v);
            0x02
        }
        RefMsg::Finalize => 0x03,
        RefMsg::Ack(ok, d) => {
            body.push(if *ok { 0 } else { 1 });
            put_str(&mut body, d);
            0x10
        }
        RefMsg::ListStreams => 0x20,
        RefMsg::StreamList(keys) => {
            body.extend((keys.len() as u32).to_be_bytes());
            for k in keys {
                put_str(&mut body, k);
            }
            0x21
        }
        RefMsg::ReadSince(k, after, max) => {
            put_str(&mut body, k);
            body.extend(after.to_be_bytes());
            body.extend(max.to_be_bytes());
            0x22
        }
        RefMsg::RecordBatch(recs) => {
            body.extend((recs.len() as u32).to_be_bytes());
            for (s, t, v) in recs {
                body.extend(s.to_be_bytes());
                body.extend(t.to_be_bytes());
                body.extend((v.len() as u32).to_be_bytes());
                put_floats(&mut body, v);
            }
            0x23
        }
    };
    let mut out = ((body.len() + 1) as u32).to_be_bytes().to_vec();
    out.push(t);
    out.extend(body);
    out
}

struct Cur<'a>(&'a [u8]);

impl Cur<'_> {
    fn take(&mut self, n: usize) -> Option<&[u8]> {
        if self.0.len() < n {
            return None;
        }
        let (a, b) = self.0.split_at(n);
        self.0 = b;
        Some(a)
    }
    fn u16(&mut self) -> Option<u16> {
        Some(u16::from_be_bytes(self.take(2)?.try_into().ok()?))
    }
    fn u32(&mut self) -> Option<u32> {
        Some(u32::from_be_bytes(self.take(4)?.try_into().ok()?))
    }
    fn u64(&mut self) -> Option<u64> {
        Some(u64::from_be_bytes(self.take(8)?.try_into().ok()?))
    }
    fn s(&mut self) -> Option<String> {
        let n = self.u16()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).ok()
    }
    fn floats(&mut self, n: usize) -> Option<Vec<u64>> {
        (0..n)
            .map(|_| Some(f64::from_le_bytes(self.take(8)?.try_into().ok()?).to_bits()))
            .collect()
    }
}

/// `None` for anything malformed or incomplete.
pub fn ref_decode(buf: &[u8]) -> Option<(RefMsg, usize)> {
    let mut head = Cur(buf);
    let len = head.u32()? as usize;
    let frame = head.take(len)?;
    let (&t, body) = frame.split_first()?;
    let mut c = Cur(body);
    let m = match t {
        0x01 => RefMsg::Register(c.s()?, c.u32()?, c.u32()?, c.u32()?),
        0x02 => {
            let step = c.u64()?;
            let n = c.u32()? as usize;
            RefMsg::Append(step, c.floats(n)?)
        }
        0x03 => RefMsg::Finalize,
        0x10 => {
            let ok = match c.take(1)?[0] {
                0 => true,
                1 => false,
                _ => return None,
            };
            RefMsg::Ack(ok, c.s()?)
        }
        0x20 => RefMsg::ListStreams,
        0x21 => {
            let n = c.u32()?;
            RefMsg::StreamList((0..n).map(|_| c.s()).collect::<Option<_>>()?)
        }
        0x22 => RefMsg::ReadSince(c.s()?, c.u64()?, c.u32()?),
        0x23 => {
            let n = c.u32()?;
            let mut recs = Vec::new();
            for _ in 0..n {
                let s = c.u64()?;
                let ts = c.u64()?;
                let k = c.u32()? as usize;
                recs.push((s, ts, c.floats(k)?));
            }
            RefMsg::RecordBatch(recs)
        }
        _ => return None,
    };
    if !c.0.is_empty() {
        return None;
    }
    Some((m, 4 + len))
}

const SPECIAL: [f64; 8] = [
    f64::NAN,
    f64::INFINITY,
    f64::NEG_INFINITY,
    -0.0,
    0.0,
    f64::MIN_POSITIVE,
    5e-324,
    f64::MAX,
];

pub fn random_f64<R: Rng>(rng: &mut R) -> f64 {
    match rng.gen_range(0..4) {
        0 => SPECIAL[rng.gen_range(0..SPECIAL.len())],
        // Arbitrary bits, including signalling and payload-carrying NaNs.
        1 => f64::from_bits(rng.gen()),
        _ => rng.gen_range(-1e6..1e6),
    }
}

pub fn random_string<R: Rng>(rng: &mut R) -> String {
    let n = rng.gen_range(0..12);
    (0..n)
        .map(|_| match rng.gen_range(0..4) {
            0 => char::from_u32(rng.gen_range(0x80..0x2FFF)).unwrap_or('x'),
            _ => rng.gen_range(b'a'..=b'z') as char,
        })
        .collect()
}

fn random_floats<R: Rng>(rng: &mut R) -> Vec<f64> {
    let n = rng.gen_range(0..20);
    (0..n).map(|_| random_f64(rng)).collect()
}

pub fn random_message<R: Rng>(rng: &mut R) -> Message {
    match rng.gen_range(0..8) {
        0 => Message::Register {
            field_name: random_string(rng),
            rank: rng.gen(),
            group_id: rng.gen(),
            element_count: rng.gen(),
        },
        1 => Message::Append {
            step: rng.gen(),
            payload: random_floats(rng),
        },
        2 => Message::Finalize,
        3 => Message::Ack {
            ok: rng.gen(),
            detail: random_string(rng),
        },
        4 => Message::ListStreams,
        5 => Message::StreamList {
            keys: (0..rng.gen_range(0..5)).map(|_| random_string(rng)).collect(),
        },
        6 => Message::ReadSince {
            stream_key: random_string(rng),
            after_step: rng.gen(),
            max_records: rng.gen(),
        },
        _ => Message::RecordBatch {
            records: (0..rng.gen_range(0..4))
                .map(|_| WireRecord {
                    step: rng.gen(),
                    produced_at_ns: rng.gen(),
                    values: random_floats(rng),
                })
                .collect(),
        },
    }
}
