//! Canonical byte encoding.
//!
//! One encoding serves as hash preimage, signature preimage, wire payload and
//! journal record. Layout rules:
//!
//! * fields in declaration order, no tags;
//! * unsigned integers and millisecond timestamps as 8-byte big-endian;
//!   signed integers as 8-byte big-endian two's complement;
//! * fixed-width values (digests, public keys, signatures) as raw bytes;
//! * variable byte strings and UTF-8 text behind a 4-byte big-endian length;
//! * lists behind a 4-byte big-endian element count;
//! * optional values behind a 1-byte presence flag (`0x00` absent, `0x01` present).
//!
//! Decoding is strict: bad flags, short input, oversize lengths and trailing
//! bytes are all errors, so every accepted byte string has exactly one
//! decoded value.

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CodecError {
    #[error("unexpected end of input: needed {needed} bytes, {remaining} left")]
    UnexpectedEof { needed: usize, remaining: usize },
    #[error("invalid presence flag {0:#04x}")]
    BadFlag(u8),
    #[error("text field is not valid UTF-8")]
    BadUtf8,
    #[error("invalid {what} value {value}")]
    BadValue { what: &'static str, value: u64 },
    #[error("declared length {0} exceeds remaining input")]
    TooLong(usize),
    #[error("{0} trailing bytes after value")]
    TrailingBytes(usize),
    #[error("malformed public key")]
    BadKey,
}

/// Types with a canonical encoding.
pub trait Canonical: Sized {
    fn encode(&self, enc: &mut Encoder);
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, CodecError>;
}

/// Encode a value into a fresh buffer.
pub fn encode_canonical<T: Canonical>(value: &T) -> Vec<u8> {
    let mut enc = Encoder::new();
    value.encode(&mut enc);
    enc.finish()
}

/// Decode a value that must span the whole input.
pub fn decode_canonical<T: Canonical>(bytes: &[u8]) -> Result<T, CodecError> {
    let mut dec = Decoder::new(bytes);
    let value = T::decode(&mut dec)?;
    dec.finish()?;
    Ok(value)
}

#[derive(Debug, Default, Clone)]
pub struct Encoder {
    buf: Vec<u8>,
}

impl Encoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(capacity: usize) -> Self {
        Self {
            buf: Vec::with_capacity(capacity),
        }
    }

    pub fn u8(&mut self, v: u8) -> &mut Self {
        self.buf.push(v);
        self
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_be_bytes());
        self
    }

    pub fn i64(&mut self, v: i64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_be_bytes());
        self
    }

    /// 4-byte big-endian length or count prefix.
    pub fn len_prefix(&mut self, len: usize) -> &mut Self {
        let len = u32::try_from(len).expect("canonical lengths are limited to u32");
        self.buf.extend_from_slice(&len.to_be_bytes());
        self
    }

    /// Raw bytes with no prefix; only for fixed-width values.
    pub fn fixed(&mut self, bytes: &[u8]) -> &mut Self {
        self.buf.extend_from_slice(bytes);
        self
    }

    pub fn bytes(&mut self, bytes: &[u8]) -> &mut Self {
        self.len_prefix(bytes.len());
        self.buf.extend_from_slice(bytes);
        self
    }

    pub fn text(&mut self, text: &str) -> &mut Self {
        self.bytes(text.as_bytes())
    }

    pub fn option<T>(&mut self, value: Option<&T>, f: impl FnOnce(&mut Self, &T)) -> &mut Self {
        match value {
            None => {
                self.u8(0);
            }
            Some(v) => {
                self.u8(1);
                f(self, v);
            }
        }
        self
    }

    pub fn value<T: Canonical>(&mut self, value: &T) -> &mut Self {
        value.encode(self);
        self
    }

    pub fn list<T: Canonical>(&mut self, items: &[T]) -> &mut Self {
        self.len_prefix(items.len());
        for item in items {
            item.encode(self);
        }
        self
    }

    pub fn len(&self) -> usize {
        self.buf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

#[derive(Debug, Clone)]
pub struct Decoder<'a> {
    input: &'a [u8],
    pos: usize,
}

impl<'a> Decoder<'a> {
    pub fn new(input: &'a [u8]) -> Self {
        Self { input, pos: 0 }
    }

    pub fn remaining(&self) -> usize {
        self.input.len() - self.pos
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], CodecError> {
        if self.remaining() < n {
            return Err(CodecError::UnexpectedEof {
                needed: n,
                remaining: self.remaining(),
            });
        }
        let out = &self.input[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn u8(&mut self) -> Result<u8, CodecError> {
        Ok(self.take(1)?[0])
    }

    pub fn u64(&mut self) -> Result<u64, CodecError> {
        let raw: [u8; 8] = self.take(8)?.try_into().expect("8 bytes");
        Ok(u64::from_be_bytes(raw))
    }

    pub fn i64(&mut self) -> Result<i64, CodecError> {
        let raw: [u8; 8] = self.take(8)?.try_into().expect("8 bytes");
        Ok(i64::from_be_bytes(raw))
    }

    pub fn len_prefix(&mut self) -> Result<usize, CodecError> {
        let raw: [u8; 4] = self.take(4)?.try_into().expect("4 bytes");
        let len = u32::from_be_bytes(raw) as usize;
        // Every element or byte needs at least one input byte, so a longer
        // declaration can never be satisfied. Refusing early also bounds
        // allocations on hostile input.
        if len > self.remaining() {
            return Err(CodecError::TooLong(len));
        }
        Ok(len)
    }

    pub fn fixed<const N: usize>(&mut self) -> Result<[u8; N], CodecError> {
        Ok(self.take(N)?.try_into().expect("N bytes"))
    }

    pub fn bytes(&mut self) -> Result<&'a [u8], CodecError> {
        let len = self.len_prefix()?;
        self.take(len)
    }

    pub fn text(&mut self) -> Result<String, CodecError> {
        let raw = self.bytes()?;
        String::from_utf8(raw.to_vec()).map_err(|_| CodecError::BadUtf8)
    }

    pub fn flag(&mut self) -> Result<bool, CodecError> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            other => Err(CodecError::BadFlag(other)),
        }
    }

    pub fn option<T>(
        &mut self,
        f: impl FnOnce(&mut Self) -> Result<T, CodecError>,
    ) -> Result<Option<T>, CodecError> {
        if self.flag()? {
            f(self).map(Some)
        } else {
            Ok(None)
        }
    }

    pub fn value<T: Canonical>(&mut self) -> Result<T, CodecError> {
        T::decode(self)
    }

    pub fn list<T: Canonical>(&mut self) -> Result<Vec<T>, CodecError> {
        let count = self.len_prefix()?;
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            out.push(T::decode(self)?);
        }
        Ok(out)
    }

    pub fn finish(&self) -> Result<(), CodecError> {
        match self.remaining() {
            0 => Ok(()),
            n => Err(CodecError::TrailingBytes(n)),
        }
    }
}

impl Canonical for u64 {
    fn encode(&self, enc: &mut Encoder) {
        enc.u64(*self);
    }

    fn decode(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        dec.u64()
    }
}
