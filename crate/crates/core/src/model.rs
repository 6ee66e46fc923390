//! Domain types shared by every component: stream naming, endpoint
//! addresses, and the rank-to-endpoint group assignment.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Port exported by every endpoint unless configured otherwise.
pub const DEFAULT_PORT: u16 = 6379;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ModelError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("malformed stream key {key:?}: {reason}")]
    BadStreamKey { key: String, reason: &'static str },
    #[error("malformed endpoint address {0:?}")]
    BadAddress(String),
}

/// Validates a field name for use inside a [`StreamKey`].
pub fn validate_field_name(name: &str) -> Result<(), ModelError> {
    if name.is_empty() {
        return Err(ModelError::InvalidArgument("field name is empty".into()));
    }
    if name.contains(':') {
        return Err(ModelError::InvalidArgument(format!(
            "field name {name:?} contains ':'"
        )));
    }
    if name.len() > u16::MAX as usize - 12 {
        return Err(ModelError::InvalidArgument("field name too long".into()));
    }
    Ok(())
}

/// What one process contributes to one stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldDescriptor {
    pub field_name: String,
    pub rank: u32,
    pub world_size: u32,
    /// Number of f64 values per snapshot.
    pub element_count: u32,
}

impl FieldDescriptor {
    pub fn new(
        field_name: impl Into<String>,
        rank: u32,
        world_size: u32,
        element_count: u32,
    ) -> Result<Self, ModelError> {
        let field_name = field_name.into();
        validate_field_name(&field_name)?;
        if world_size == 0 || rank >= world_size {
            return Err(ModelError::InvalidArgument(format!(
                "rank {rank} outside world of size {world_size}"
            )));
        }
        if element_count == 0 {
            return Err(ModelError::InvalidArgument(
                "element_count must be at least 1".into(),
            ));
        }
        Ok(Self {
            field_name,
            rank,
            world_size,
            element_count,
        })
    }

    pub fn stream_key(&self) -> StreamKey {
        StreamKey(format!("{}:{}", self.field_name, self.rank))
    }
}

/// `field_name:rank`, the name of one process's stream of one field.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct StreamKey(String);

impl StreamKey {
    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn field_name(&self) -> &str {
        self.0.rsplit_once(':').map(|(f, _)| f).unwrap_or("")
    }

    pub fn rank(&self) -> u32 {
        self.0
            .rsplit_once(':')
            .and_then(|(_, r)| r.parse().ok())
            .unwrap_or(0)
    }
}

impl fmt::Display for StreamKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl FromStr for StreamKey {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (field, rank) = parse_stream_key(s)?;
        make_stream_key(&field, rank)
    }
}

impl TryFrom<String> for StreamKey {
    type Error = ModelError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<StreamKey> for String {
    fn from(k: StreamKey) -> String {
        k.0
    }
}

pub fn make_stream_key(field_name: &str, rank: u32) -> Result<StreamKey, ModelError> {
    validate_field_name(field_name)?;
    Ok(StreamKey(format!("{field_name}:{rank}")))
}

pub fn parse_stream_key(key: &str) -> Result<(String, u32), ModelError> {
    let bad = |reason| ModelError::BadStreamKey {
        key: key.to_string(),
        reason,
    };
    let mut parts = key.split(':');
    let (Some(field), Some(rank), None) = (parts.next(), parts.next(), parts.next()) else {
        return Err(bad("expected exactly one ':'"));
    };
    if field.is_empty() {
        return Err(bad("empty field name"));
    }
    if rank.is_empty() {
        return Err(bad("missing rank"));
    }
    if !rank.bytes().all(|b| b.is_ascii_digit()) {
        return Err(bad("rank is not a decimal integer"));
    }
    // Leading zeros would break the bijection with make_stream_key.
    if rank.len() > 1 && rank.starts_with('0') {
        return Err(bad("rank has leading zeros"));
    }
    let rank = rank.parse().map_err(|_| bad("rank out of range"))?;
    Ok((field.to_string(), rank))
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct EndpointAddress {
    pub host: String,
    pub port: u16,
}

impl EndpointAddress {
    pub fn new(host: impl Into<String>, port: u16) -> Result<Self, ModelError> {
        let host = host.into();
        if host.is_empty() || port == 0 {
            return Err(ModelError::BadAddress(format!("{host}:{port}")));
        }
        Ok(Self { host, port })
    }

    /// Parses a comma-separated `host[:port]` list.
    pub fn parse_list(s: &str) -> Result<Vec<Self>, ModelError> {
        s.split(',')
            .map(str::trim)
            .filter(|p| !p.is_empty())
            .map(str::parse)
            .collect()
    }
}

impl fmt::Display for EndpointAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.host.contains(':') {
            write!(f, "[{}]:{}", self.host, self.port)
        } else {
            write!(f, "{}:{}", self.host, self.port)
        }
    }
}

impl FromStr for EndpointAddress {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || ModelError::BadAddress(s.to_string());
        let (host, port) = if let Some(rest) = s.strip_prefix('[') {
            let (host, tail) = rest.split_once(']').ok_or_else(bad)?;
            match tail.strip_prefix(':') {
                Some(p) => (host, p.parse().map_err(|_| bad())?),
                None if tail.is_empty() => (host, DEFAULT_PORT),
                None => return Err(bad()),
            }
        } else {
            match s.split_once(':') {
                Some((h, p)) => (h, p.parse().map_err(|_| bad())?),
                None => (s, DEFAULT_PORT),
            }
        };
        Self::new(host, port).map_err(|_| bad())
    }
}

impl TryFrom<String> for EndpointAddress {
    type Error = ModelError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<EndpointAddress> for String {
    fn from(a: EndpointAddress) -> String {
        a.to_string()
    }
}

/// Group of `rank` when `world_size` ranks are split over `num_endpoints`
/// endpoints: `floor(rank * G / P)`, giving contiguous blocks whose sizes
/// differ by at most one.
pub fn assign_group(rank: u32, world_size: u32, num_endpoints: u32) -> Result<u32, ModelError> {
    if world_size == 0 || rank >= world_size {
        return Err(ModelError::InvalidArgument(format!(
            "rank {rank} outside world of size {world_size}"
        )));
    }
    if num_endpoints == 0 || num_endpoints > world_size {
        return Err(ModelError::InvalidArgument(format!(
            "{num_endpoints} endpoints for {world_size} ranks"
        )));
    }
    Ok((rank as u64 * num_endpoints as u64 / world_size as u64) as u32)
}

/// Rank-to-endpoint assignment for a whole world.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupMap {
    world_size: u32,
    endpoints: Vec<EndpointAddress>,
}

impl GroupMap {
    pub fn new(world_size: u32, endpoints: Vec<EndpointAddress>) -> Result<Self, ModelError> {
        if world_size == 0 {
            return Err(ModelError::InvalidArgument("world_size must be ≥ 1".into()));
        }
        if endpoints.is_empty() || endpoints.len() > world_size as usize {
            return Err(ModelError::InvalidArgument(format!(
                "{} endpoints for {world_size} ranks",
                endpoints.len()
            )));
        }
        Ok(Self {
            world_size,
            endpoints,
        })
    }

    pub fn world_size(&self) -> u32 {
        self.world_size
    }

    pub fn endpoints(&self) -> &[EndpointAddress] {
        &self.endpoints
    }

    pub fn group_of(&self, rank: u32) -> Result<u32, ModelError> {
        assign_group(rank, self.world_size, self.endpoints.len() as u32)
    }

    pub fn endpoint_of(&self, rank: u32) -> Result<&EndpointAddress, ModelError> {
        Ok(&self.endpoints[self.group_of(rank)? as usize])
    }

    /// Ranks assigned to `group`, in ascending order.
    pub fn members(&self, group: u32) -> Vec<u32> {
        (0..self.world_size)
            .filter(|&r| self.group_of(r).ok() == Some(group))
            .collect()
    }
}

/// One timestep of one stream.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamRecord {
    pub stream_key: StreamKey,
    pub step: u64,
    pub payload: Vec<f64>,
    /// [`crate::clock::monotonic_ns`] when the producer handed the record over.
    pub produced_at: u64,
}
