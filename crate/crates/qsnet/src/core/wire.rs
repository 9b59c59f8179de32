//! Canonical binary encoding shared by every wire-visible type.
//!
//! The encoding is deliberately dumb: fields in declaration order,
//! integers big-endian, octet strings prefixed with a 32-bit big-endian
//! count, enums as single octets, 128-bit identifiers as 16 raw bytes.
//! Sets are written in sorted order so the encoding is a pure function
//! of the value. Signed packages hash/sign these bytes, so any two
//! conforming implementations must produce identical output.

use thiserror::Error;

/// Hard cap on a single length-prefixed element. Real values are tiny;
/// this only bounds allocations while decoding hostile input.
pub const MAX_OCTETS: usize = 1 << 20;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum WireError {
    #[error("unexpected end of input")]
    UnexpectedEof,
    #[error("{0} trailing bytes after value")]
    TrailingBytes(usize),
    #[error("invalid {field}: {reason}")]
    Invalid { field: &'static str, reason: String },
    #[error("length {len} for {field} exceeds limit")]
    OverLimit { field: &'static str, len: usize },
}

impl WireError {
    pub fn invalid(field: &'static str, reason: impl Into<String>) -> Self {
        WireError::Invalid {
            field,
            reason: reason.into(),
        }
    }
}

/// Append-only encoder.
#[derive(Default)]
pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.buf
    }

    pub fn put_u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn put_u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_be_bytes());
    }

    pub fn put_u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_be_bytes());
    }

    pub fn put_raw(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    /// Length-prefixed octet string.
    pub fn put_octets(&mut self, bytes: &[u8]) {
        self.put_u32(bytes.len() as u32);
        self.put_raw(bytes);
    }

    pub fn put_str(&mut self, s: &str) {
        self.put_octets(s.as_bytes());
    }
}

/// Zero-copy decoder over a byte slice.
pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        if self.remaining() < n {
            return Err(WireError::UnexpectedEof);
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn u8(&mut self) -> Result<u8, WireError> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32, WireError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64, WireError> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn octets(&mut self, field: &'static str) -> Result<&'a [u8], WireError> {
        let len = self.u32()? as usize;
        if len > MAX_OCTETS {
            return Err(WireError::OverLimit { field, len });
        }
        if len > self.remaining() {
            return Err(WireError::UnexpectedEof);
        }
        self.take(len)
    }

    pub fn string(&mut self, field: &'static str) -> Result<String, WireError> {
        let raw = self.octets(field)?;
        String::from_utf8(raw.to_vec())
            .map_err(|_| WireError::invalid(field, "not valid UTF-8"))
    }

    /// Element count for a following list. Bounded by the bytes left so a
    /// forged count cannot drive a huge allocation.
    pub fn count(&mut self, field: &'static str, min_elem_size: usize) -> Result<usize, WireError> {
        let n = self.u32()? as usize;
        let floor = min_elem_size.max(1);
        if n > self.remaining() / floor {
            return Err(WireError::OverLimit { field, len: n });
        }
        Ok(n)
    }

    pub fn finish(&self) -> Result<(), WireError> {
        match self.remaining() {
            0 => Ok(()),
            n => Err(WireError::TrailingBytes(n)),
        }
    }
}

/// Types with a canonical, deterministic binary form.
pub trait Canonical: Sized {
    fn encode_into(&self, w: &mut Writer);
    fn decode_from(r: &mut Reader) -> Result<Self, WireError>;

    fn canonical_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        self.encode_into(&mut w);
        w.into_bytes()
    }

    /// Decode a complete value; trailing bytes are an error.
    fn decode(bytes: &[u8]) -> Result<Self, WireError> {
        let mut r = Reader::new(bytes);
        let v = Self::decode_from(&mut r)?;
        r.finish()?;
        Ok(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_primitives() {
        let mut w = Writer::new();
        w.put_u8(7);
        w.put_u32(0xdead_beef);
        w.put_u64(42);
        w.put_octets(b"hello");
        w.put_str("world");
        let bytes = w.into_bytes();

        let mut r = Reader::new(&bytes);
        assert_eq!(r.u8().unwrap(), 7);
        assert_eq!(r.u32().unwrap(), 0xdead_beef);
        assert_eq!(r.u64().unwrap(), 42);
        assert_eq!(r.octets("a").unwrap(), b"hello");
        assert_eq!(r.string("b").unwrap(), "world");
        r.finish().unwrap();
    }

    #[test]
    fn short_input_is_eof() {
        let mut r = Reader::new(&[0, 0, 0, 9, 1, 2]);
        assert_eq!(r.octets("x").unwrap_err(), WireError::UnexpectedEof);
    }

    #[test]
    fn trailing_bytes_rejected() {
        let r = Reader::new(&[1]);
        assert_eq!(r.finish().unwrap_err(), WireError::TrailingBytes(1));
    }

    #[test]
    fn forged_count_rejected() {
        let mut w = Writer::new();
        w.put_u32(u32::MAX);
        let bytes = w.into_bytes();
        let mut r = Reader::new(&bytes);
        assert!(matches!(
            r.count("list", 16).unwrap_err(),
            WireError::OverLimit { .. }
        ));
    }
}
