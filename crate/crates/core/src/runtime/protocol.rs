//! Length-prefixed binary frames exchanged between master and workers.
//!
//! Frame layout (little-endian): magic `0xD1B3` u16, protocol version u8,
//! tag u8, payload length u64, payload.
//!
//! Delta entries do not carry their dimension on the wire, so decoding needs
//! the family dimension both endpoints were configured with.

use thiserror::Error;

use crate::expfam::{PosteriorParams, SuffStats};
use crate::sampler::{Delta, DeltaEntry, NewComponent, SnapshotComponent};

pub const MAGIC: u16 = 0xD1B3;
pub const PROTOCOL_VERSION: u8 = 1;
pub const HEADER_LEN: usize = 12;
/// Frames above this payload size are rejected before allocation.
pub const MAX_PAYLOAD: u64 = 1 << 32;

const TAG_PULL: u8 = 0;
const TAG_SNAPSHOT: u8 = 1;
const TAG_DELTA: u8 = 2;
const TAG_ACK: u8 = 3;
const TAG_SHUTDOWN: u8 = 4;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ProtocolError {
    #[error("bad magic 0x{0:04x}")]
    BadMagic(u16),
    #[error("unsupported protocol version {0}")]
    UnsupportedVersion(u8),
    #[error("unknown message tag {0}")]
    UnknownTag(u8),
    #[error("truncated frame: needed {needed} bytes, {available} available")]
    Truncated { needed: u64, available: u64 },
    #[error("declared length {0} exceeds the available data")]
    LengthOverflow(u64),
    #[error("{0} unused bytes after the payload")]
    TrailingBytes(usize),
    #[error("invalid field: {0}")]
    Invalid(&'static str),
}

/// The master's state as shipped to a worker.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GlobalSnapshot {
    pub version: u64,
    /// `(old, new)` wire ids the recipient must rewrite before sweeping.
    pub remap: Vec<(u64, u64)>,
    pub components: Vec<SnapshotComponent>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    PullRequest { worker: u32, last_version: u64 },
    Snapshot(GlobalSnapshot),
    DeltaPush(Delta),
    Ack { version: u64 },
    Shutdown,
}

impl Message {
    pub fn tag(&self) -> u8 {
        match self {
            Message::PullRequest { .. } => TAG_PULL,
            Message::Snapshot(_) => TAG_SNAPSHOT,
            Message::DeltaPush(_) => TAG_DELTA,
            Message::Ack { .. } => TAG_ACK,
            Message::Shutdown => TAG_SHUTDOWN,
        }
    }
}

pub fn encode(msg: &Message) -> Vec<u8> {
    let mut buf = Vec::with_capacity(HEADER_LEN + 64);
    buf.extend_from_slice(&MAGIC.to_le_bytes());
    buf.push(PROTOCOL_VERSION);
    buf.push(msg.tag());
    buf.extend_from_slice(&0u64.to_le_bytes());
    match msg {
        Message::PullRequest { worker, last_version } => {
            put_u32(&mut buf, *worker);
            put_u64(&mut buf, *last_version);
        }
        Message::Snapshot(s) => {
            put_u64(&mut buf, s.version);
            put_u32(&mut buf, len_u32(s.remap.len()));
            for &(old, new) in &s.remap {
                put_u64(&mut buf, old);
                put_u64(&mut buf, new);
            }
            put_u32(&mut buf, len_u32(s.components.len()));
            for c in &s.components {
                put_u64(&mut buf, c.id);
                put_f64(&mut buf, c.params.kappa);
                put_u64(&mut buf, c.count as u64);
                buf.push(u8::from(c.atomic));
                put_u32(&mut buf, len_u32(c.params.beta.len()));
                c.params.beta.iter().for_each(|&b| put_f64(&mut buf, b));
            }
        }
        Message::DeltaPush(d) => {
            put_u32(&mut buf, d.worker);
            put_u64(&mut buf, d.based_on);
            put_u32(&mut buf, len_u32(d.entries.len()));
            for e in &d.entries {
                put_u64(&mut buf, e.id);
                put_f64(&mut buf, e.d_kappa);
                put_u64(&mut buf, e.d_n as u64);
                e.d_beta.iter().for_each(|&b| put_f64(&mut buf, b));
            }
            put_u32(&mut buf, len_u32(d.new_components.len()));
            for c in &d.new_components {
                put_u64(&mut buf, c.temp_id as u64);
                put_u64(&mut buf, c.stats.count as u64);
                c.stats.psi.iter().for_each(|&b| put_f64(&mut buf, b));
            }
        }
        Message::Ack { version } => put_u64(&mut buf, *version),
        Message::Shutdown => {}
    }
    let len = (buf.len() - HEADER_LEN) as u64;
    buf[4..HEADER_LEN].copy_from_slice(&len.to_le_bytes());
    buf
}

fn len_u32(n: usize) -> u32 {
    u32::try_from(n).expect("collection fits the u32 wire count")
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_f64(buf: &mut Vec<u8>, v: f64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

/// Parsed frame header.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Header {
    pub tag: u8,
    pub payload_len: u64,
}

/// Validates the fixed 12-byte header.
pub fn decode_header(bytes: &[u8]) -> Result<Header, ProtocolError> {
    if bytes.len() < HEADER_LEN {
        return Err(ProtocolError::Truncated {
            needed: HEADER_LEN as u64,
            available: bytes.len() as u64,
        });
    }
    let magic = u16::from_le_bytes([bytes[0], bytes[1]]);
    if magic != MAGIC {
        return Err(ProtocolError::BadMagic(magic));
    }
    if bytes[2] != PROTOCOL_VERSION {
        return Err(ProtocolError::UnsupportedVersion(bytes[2]));
    }
    let tag = bytes[3];
    if tag > TAG_SHUTDOWN {
        return Err(ProtocolError::UnknownTag(tag));
    }
    let payload_len = u64::from_le_bytes(bytes[4..12].try_into().expect("8 bytes"));
    if payload_len > MAX_PAYLOAD {
        return Err(ProtocolError::LengthOverflow(payload_len));
    }
    Ok(Header { tag, payload_len })
}

/// Decodes one complete frame. `dim` is the family dimension.
pub fn decode(bytes: &[u8], dim: usize) -> Result<Message, ProtocolError> {
    let header = decode_header(bytes)?;
    let available = (bytes.len() - HEADER_LEN) as u64;
    if header.payload_len > available {
        return Err(ProtocolError::Truncated {
            needed: header.payload_len,
            available,
        });
    }
    if header.payload_len < available {
        return Err(ProtocolError::TrailingBytes((available - header.payload_len) as usize));
    }
    let mut r = Reader {
        buf: &bytes[HEADER_LEN..],
        pos: 0,
    };
    let msg = match header.tag {
        TAG_PULL => Message::PullRequest {
            worker: r.u32()?,
            last_version: r.u64()?,
        },
        TAG_SNAPSHOT => {
            let version = r.u64()?;
            let n_remap = r.count(16)?;
            let mut remap = Vec::with_capacity(n_remap);
            for _ in 0..n_remap {
                remap.push((r.u64()?, r.u64()?));
            }
            let k = r.count(29)?;
            let mut components = Vec::with_capacity(k);
            for _ in 0..k {
                let id = r.u64()?;
                let kappa = r.f64()?;
                let count = r.u64()? as i64;
                let atomic = match r.u8()? {
                    0 => false,
                    1 => true,
                    _ => return Err(ProtocolError::Invalid("atomic flag")),
                };
                let d = r.count(8)?;
                let beta = r.f64s(d)?;
                components.push(SnapshotComponent {
                    id,
                    params: PosteriorParams { beta, kappa },
                    count,
                    atomic,
                });
            }
            Message::Snapshot(GlobalSnapshot {
                version,
                remap,
                components,
            })
        }
        TAG_DELTA => {
            let worker = r.u32()?;
            let based_on = r.u64()?;
            let n = r.count(24 + 8 * dim)?;
            let mut entries = Vec::with_capacity(n);
            for _ in 0..n {
                let id = r.u64()?;
                let d_kappa = r.f64()?;
                let d_n = r.u64()? as i64;
                let d_beta = r.f64s(dim)?;
                entries.push(DeltaEntry {
                    id,
                    d_beta,
                    d_kappa,
                    d_n,
                });
            }
            let m = r.count(16 + 8 * dim)?;
            let mut new_components = Vec::with_capacity(m);
            for _ in 0..m {
                let temp_id = r.u64()? as i64;
                let count = r.u64()? as i64;
                let psi = r.f64s(dim)?;
                new_components.push(NewComponent {
                    temp_id,
                    stats: SuffStats { psi, count },
                });
            }
            Message::DeltaPush(Delta {
                worker,
                based_on,
                entries,
                new_components,
            })
        }
        TAG_ACK => Message::Ack { version: r.u64()? },
        _ => Message::Shutdown,
    };
    if r.pos != r.buf.len() {
        return Err(ProtocolError::TrailingBytes(r.buf.len() - r.pos));
    }
    Ok(msg)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ProtocolError> {
        let available = self.buf.len() - self.pos;
        if n > available {
            return Err(ProtocolError::Truncated {
                needed: n as u64,
                available: available as u64,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, ProtocolError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, ProtocolError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, ProtocolError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64, ProtocolError> {
        let v = f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
        if !v.is_finite() {
            return Err(ProtocolError::Invalid("non-finite float"));
        }
        Ok(v)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, ProtocolError> {
        (0..n).map(|_| self.f64()).collect()
    }

    /// Reads a u32 element count and checks that `count * min_size` bytes
    /// can still follow, so corrupt counts never trigger huge allocations.
    fn count(&mut self, min_size: usize) -> Result<usize, ProtocolError> {
        let n = self.u32()? as u64;
        let remaining = (self.buf.len() - self.pos) as u64;
        if n.saturating_mul(min_size as u64) > remaining {
            return Err(ProtocolError::LengthOverflow(n));
        }
        Ok(n as usize)
    }
}

/// Exact frame sizes, used by the communication accounting.
pub fn snapshot_frame_len(remap: usize, components: usize, dim: usize) -> u64 {
    (HEADER_LEN + 8 + 4 + 16 * remap + 4 + components * (29 + 8 * dim)) as u64
}

pub fn delta_frame_len(entries: usize, new: usize, dim: usize) -> u64 {
    (HEADER_LEN + 4 + 8 + 4 + entries * (24 + 8 * dim) + 4 + new * (16 + 8 * dim)) as u64
}
