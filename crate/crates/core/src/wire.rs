//! Wire codec for aggregation packets.
//!
//! Every protocol message — worker update, multicast result, unicast
//! retransmission reply — is one datagram payload in this layout (all
//! multi-byte fields big-endian):
//!
//! ```text
//! offset   size  field
//! 0        2     magic 0x5A 0x4D
//! 2        1     flags: bit 0 = pool version, bits 1..7 zero
//! 3        2     wid   worker id
//! 5        2     idx   slot index
//! 7        4     off   element offset into the flat update stream
//! 11       4*k   vector: k two's-complement 32-bit integers
//! 11+4k    4     CRC-32 over bytes [0, 11+4k)
//! ```
//!
//! Total frame size is `15 + 4k` bytes; 143 bytes with the default `k = 32`.
//! Receivers drop frames with bad magic, bad length, or bad checksum
//! silently and let the retransmission path repair the stream.

use thiserror::Error;

/// First two bytes of every data frame.
pub const MAGIC: [u8; 2] = [0x5A, 0x4D];

/// Elements per packet unless configured otherwise.
pub const DEFAULT_K: usize = 32;

/// Bytes before the element payload.
pub const HEADER_LEN: usize = 11;

/// Frame size for a codec configured with `k` elements per packet.
pub const fn frame_len(k: usize) -> usize {
    HEADER_LEN + 4 * k + 4
}

/// One protocol message: `wid` contributed `vector` for slot `idx` at
/// stream offset `off`, in pool version `ver`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AggregationPacket {
    pub wid: u16,
    /// Pool version bit, 0 or 1.
    pub ver: u8,
    pub idx: u16,
    pub off: u32,
    pub vector: Vec<i32>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WireError {
    #[error("packet invalid: vector has {got} elements, codec expects {expected}")]
    InvalidPacket { got: usize, expected: usize },
    #[error("packet invalid: version {0} is not a single bit")]
    InvalidVersion(u8),
    #[error("bad magic")]
    BadMagic,
    #[error("bad length: got {got} bytes, expected {expected}")]
    BadLength { got: usize, expected: usize },
    #[error("bad checksum")]
    BadChecksum,
}

/// CRC-32 (polynomial 0x04C11DB7 reflected, init and final xor 0xFFFFFFFF).
pub fn compute_checksum(bytes: &[u8]) -> u32 {
    crc32fast::hash(bytes)
}

/// Serialize `p` into a `frame_len(k)`-byte frame.
pub fn encode_packet(p: &AggregationPacket, k: usize) -> Result<Vec<u8>, WireError> {
    if p.vector.len() != k {
        return Err(WireError::InvalidPacket {
            got: p.vector.len(),
            expected: k,
        });
    }
    if p.ver > 1 {
        return Err(WireError::InvalidVersion(p.ver));
    }
    let mut buf = Vec::with_capacity(frame_len(k));
    buf.extend_from_slice(&MAGIC);
    buf.push(p.ver & 1);
    buf.extend_from_slice(&p.wid.to_be_bytes());
    buf.extend_from_slice(&p.idx.to_be_bytes());
    buf.extend_from_slice(&p.off.to_be_bytes());
    for v in &p.vector {
        buf.extend_from_slice(&v.to_be_bytes());
    }
    let crc = compute_checksum(&buf);
    buf.extend_from_slice(&crc.to_be_bytes());
    Ok(buf)
}

/// Parse and validate one frame. Any failure means the caller should drop
/// the datagram.
pub fn decode_packet(buf: &[u8], k: usize) -> Result<AggregationPacket, WireError> {
    let expected = frame_len(k);
    if buf.len() != expected {
        return Err(WireError::BadLength {
            got: buf.len(),
            expected,
        });
    }
    if buf[0..2] != MAGIC {
        return Err(WireError::BadMagic);
    }
    let body = &buf[..expected - 4];
    let crc = u32::from_be_bytes(buf[expected - 4..].try_into().unwrap());
    if compute_checksum(body) != crc {
        return Err(WireError::BadChecksum);
    }
    let flags = buf[2];
    let wid = u16::from_be_bytes(buf[3..5].try_into().unwrap());
    let idx = u16::from_be_bytes(buf[5..7].try_into().unwrap());
    let off = u32::from_be_bytes(buf[7..11].try_into().unwrap());
    let mut vector = Vec::with_capacity(k);
    for chunk in buf[HEADER_LEN..HEADER_LEN + 4 * k].chunks_exact(4) {
        vector.push(i32::from_be_bytes(chunk.try_into().unwrap()));
    }
    Ok(AggregationPacket {
        wid,
        ver: flags & 1,
        idx,
        off,
        vector,
    })
}
