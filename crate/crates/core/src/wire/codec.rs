//! Canonical binary encoding: little-endian fixed-width integers and
//! `u32`-length-prefixed byte strings, fields in declaration order.

use thiserror::Error;

use crate::crypto::{AuthTag, Digest, DIGEST_LEN, MAC_LEN, SIGNATURE_LEN};
use crate::ids::{ClientId, Endpoint, ReplicaId, SeqNum, ViewNum};
use crate::mask::NdTypeMask;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("decode error at byte {offset}: {kind}")]
pub struct DecodeError {
    pub offset: usize,
    pub kind: DecodeErrorKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DecodeErrorKind {
    #[error("unexpected end of input (needed {0} more bytes)")]
    Truncated(usize),
    #[error("unknown {what} tag {tag}")]
    UnknownTag { what: &'static str, tag: u8 },
    #[error("invalid nondeterminism mask {0:#04x}")]
    InvalidMask(u8),
    #[error("{0} trailing bytes")]
    TrailingBytes(usize),
    #[error("non-canonical encoding: {0}")]
    NonCanonical(&'static str),
    #[error("length {0} exceeds limit")]
    TooLong(u64),
}

/// Upper bound on any single length prefix; guards allocation on garbage.
pub const MAX_FIELD_LEN: usize = 64 << 20;

#[derive(Default)]
pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new() -> Self {
        Writer { buf: Vec::with_capacity(256) }
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }

    pub fn u8(&mut self, v: u8) -> &mut Self {
        self.buf.push(v);
        self
    }

    pub fn u32(&mut self, v: u32) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn bytes(&mut self, v: &[u8]) -> &mut Self {
        self.u32(v.len() as u32);
        self.buf.extend_from_slice(v);
        self
    }

    pub fn raw(&mut self, v: &[u8]) -> &mut Self {
        self.buf.extend_from_slice(v);
        self
    }

    pub fn put<T: Encode + ?Sized>(&mut self, v: &T) -> &mut Self {
        v.encode(self);
        self
    }

    pub fn seq<T: Encode>(&mut self, items: &[T]) -> &mut Self {
        self.u32(items.len() as u32);
        for i in items {
            i.encode(self);
        }
        self
    }
}

pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    pub fn offset(&self) -> usize {
        self.pos
    }

    pub fn err(&self, kind: DecodeErrorKind) -> DecodeError {
        DecodeError { offset: self.pos, kind }
    }

    pub fn take(&mut self, len: usize) -> Result<&'a [u8], DecodeError> {
        let remaining = self.buf.len() - self.pos;
        if len > remaining {
            return Err(self.err(DecodeErrorKind::Truncated(len - remaining)));
        }
        let s = &self.buf[self.pos..self.pos + len];
        self.pos += len;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8, DecodeError> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32, DecodeError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64, DecodeError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len(&mut self) -> Result<usize, DecodeError> {
        let at = self.pos;
        let len = self.u32()? as usize;
        if len > MAX_FIELD_LEN {
            return Err(DecodeError { offset: at, kind: DecodeErrorKind::TooLong(len as u64) });
        }
        Ok(len)
    }

    pub fn bytes(&mut self) -> Result<Vec<u8>, DecodeError> {
        let len = self.len()?;
        Ok(self.take(len)?.to_vec())
    }

    pub fn get<T: Decode>(&mut self) -> Result<T, DecodeError> {
        T::decode(self)
    }

    pub fn seq<T: Decode>(&mut self) -> Result<Vec<T>, DecodeError> {
        let len = self.len()?;
        // every element occupies at least one byte
        if len > self.buf.len() - self.pos {
            return Err(self.err(DecodeErrorKind::Truncated(len - (self.buf.len() - self.pos))));
        }
        (0..len).map(|_| T::decode(self)).collect()
    }

    pub fn finish(self) -> Result<(), DecodeError> {
        let rest = self.buf.len() - self.pos;
        if rest != 0 {
            return Err(self.err(DecodeErrorKind::TrailingBytes(rest)));
        }
        Ok(())
    }
}

pub trait Encode {
    fn encode(&self, w: &mut Writer);

    fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        self.encode(&mut w);
        w.finish()
    }
}

pub trait Decode: Sized {
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError>;

    /// Decodes a complete buffer; trailing bytes are an error.
    fn from_bytes(buf: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(buf);
        let v = Self::decode(&mut r)?;
        r.finish()?;
        Ok(v)
    }
}

impl Encode for Digest {
    fn encode(&self, w: &mut Writer) {
        w.raw(&self.0);
    }
}

impl Decode for Digest {
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(Digest(r.take(DIGEST_LEN)?.try_into().unwrap()))
    }
}

impl Encode for ReplicaId {
    fn encode(&self, w: &mut Writer) {
        w.u32(self.0);
    }
}

impl Decode for ReplicaId {
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(ReplicaId(r.u32()?))
    }
}

impl Encode for ClientId {
    fn encode(&self, w: &mut Writer) {
        w.u64(self.0);
    }
}

impl Decode for ClientId {
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(ClientId(r.u64()?))
    }
}

impl Encode for SeqNum {
    fn encode(&self, w: &mut Writer) {
        w.u64(self.0);
    }
}

impl Decode for SeqNum {
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(SeqNum(r.u64()?))
    }
}

impl Encode for ViewNum {
    fn encode(&self, w: &mut Writer) {
        w.u64(self.0);
    }
}

impl Decode for ViewNum {
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(ViewNum(r.u64()?))
    }
}

impl Encode for Endpoint {
    fn encode(&self, w: &mut Writer) {
        match self {
            Endpoint::Replica(id) => w.u8(0).u64(id.0 as u64),
            Endpoint::Client(id) => w.u8(1).u64(id.0),
        };
    }
}

impl Decode for Endpoint {
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let at = r.offset();
        match r.u8()? {
            0 => {
                let v = r.u64()?;
                let id = u32::try_from(v).map_err(|_| DecodeError {
                    offset: at,
                    kind: DecodeErrorKind::NonCanonical("replica id out of range"),
                })?;
                Ok(Endpoint::Replica(ReplicaId(id)))
            }
            1 => Ok(Endpoint::Client(ClientId(r.u64()?))),
            tag => Err(DecodeError { offset: at, kind: DecodeErrorKind::UnknownTag { what: "endpoint", tag } }),
        }
    }
}

impl Encode for NdTypeMask {
    fn encode(&self, w: &mut Writer) {
        w.u8(self.bits());
    }
}

impl Decode for NdTypeMask {
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let at = r.offset();
        let b = r.u8()?;
        NdTypeMask::new(b).map_err(|_| DecodeError { offset: at, kind: DecodeErrorKind::InvalidMask(b) })
    }
}

impl Encode for AuthTag {
    fn encode(&self, w: &mut Writer) {
        match self {
            AuthTag::Signature(sig) => {
                w.u8(0).raw(sig);
            }
            AuthTag::Authenticator(tags) => {
                w.u8(1).u32(tags.len() as u32);
                for t in tags {
                    w.raw(t);
                }
            }
        }
    }
}

impl Decode for AuthTag {
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let at = r.offset();
        match r.u8()? {
            0 => Ok(AuthTag::Signature(r.take(SIGNATURE_LEN)?.try_into().unwrap())),
            1 => {
                let n = r.u32()? as usize;
                let bytes = r.take(n.checked_mul(MAC_LEN).ok_or_else(|| r.err(DecodeErrorKind::TooLong(n as u64)))?)?;
                Ok(AuthTag::Authenticator(
                    bytes.chunks(MAC_LEN).map(|c| c.try_into().unwrap()).collect(),
                ))
            }
            tag => Err(DecodeError { offset: at, kind: DecodeErrorKind::UnknownTag { what: "auth", tag } }),
        }
    }
}
