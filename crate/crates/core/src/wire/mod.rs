//! Protocol messages and their canonical wire encoding.
//!
//! Every message starts with a one-byte tag followed by a common header
//! (view, sequence number, sender, run epoch) and a tag-specific body.
//! On the wire a message is wrapped in an [`Envelope`] that appends the
//! sender's [`AuthTag`] over the encoded message.

pub mod codec;

use std::fmt;

use serde::Serialize;

use crate::crypto::{digest, AuthTag, Digest};
use crate::ids::{ClientId, Endpoint, ReplicaId, SeqNum, ViewNum};
use crate::mask::{NdClass, NdTypeMask};
pub use codec::{Decode, DecodeError, DecodeErrorKind, Encode, Reader, Writer};

/// Client id reserved for null requests.
pub const NULL_CLIENT: ClientId = ClientId(u64::MAX);

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MessageKind {
    Request,
    PrePrepare,
    PpuContrib,
    PpuDecision,
    Prepare,
    Commit,
    PostcPrePrepare,
    PostcPrepare,
    PostcCommit,
    Reply,
    FetchNd,
    NdValues,
}

impl MessageKind {
    pub const ALL: [MessageKind; 12] = [
        MessageKind::Request,
        MessageKind::PrePrepare,
        MessageKind::PpuContrib,
        MessageKind::PpuDecision,
        MessageKind::Prepare,
        MessageKind::Commit,
        MessageKind::PostcPrePrepare,
        MessageKind::PostcPrepare,
        MessageKind::PostcCommit,
        MessageKind::Reply,
        MessageKind::FetchNd,
        MessageKind::NdValues,
    ];

    pub fn tag(self) -> u8 {
        self as u8 + 1
    }

    pub fn from_tag(tag: u8) -> Option<MessageKind> {
        MessageKind::ALL.get((tag as usize).checked_sub(1)?).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            MessageKind::Request => "REQUEST",
            MessageKind::PrePrepare => "PRE_PREPARE",
            MessageKind::PpuContrib => "PPU_CONTRIB",
            MessageKind::PpuDecision => "PPU_DECISION",
            MessageKind::Prepare => "PREPARE",
            MessageKind::Commit => "COMMIT",
            MessageKind::PostcPrePrepare => "POSTC_PRE_PREPARE",
            MessageKind::PostcPrepare => "POSTC_PREPARE",
            MessageKind::PostcCommit => "POSTC_COMMIT",
            MessageKind::Reply => "REPLY",
            MessageKind::FetchNd => "FETCH_ND",
            MessageKind::NdValues => "ND_VALUES",
        }
    }
}

impl fmt::Display for MessageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A segment of nondeterministic bytes for one class.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NdSegment {
    pub class: NdClass,
    pub bytes: Vec<u8>,
}

/// Per-class nondeterministic values, at most one segment per class,
/// kept sorted by class bit.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct NdPayload {
    segments: Vec<NdSegment>,
}

impl NdPayload {
    pub fn new() -> Self {
        NdPayload::default()
    }

    pub fn single(class: NdClass, bytes: Vec<u8>) -> Self {
        NdPayload { segments: vec![NdSegment { class, bytes }] }
    }

    /// Sets the segment for `class`, replacing any previous one.
    pub fn set(&mut self, class: NdClass, bytes: Vec<u8>) {
        match self.segments.binary_search_by_key(&class.bit(), |s| s.class.bit()) {
            Ok(i) => self.segments[i].bytes = bytes,
            Err(i) => self.segments.insert(i, NdSegment { class, bytes }),
        }
    }

    pub fn with(mut self, class: NdClass, bytes: Vec<u8>) -> Self {
        self.set(class, bytes);
        self
    }

    pub fn get(&self, class: NdClass) -> Option<&[u8]> {
        self.segments.iter().find(|s| s.class == class).map(|s| s.bytes.as_slice())
    }

    pub fn remove(&mut self, class: NdClass) -> Option<Vec<u8>> {
        let i = self.segments.iter().position(|s| s.class == class)?;
        Some(self.segments.remove(i).bytes)
    }

    pub fn segments(&self) -> &[NdSegment] {
        &self.segments
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    /// Classes present, as a mask.
    pub fn class_mask(&self) -> NdTypeMask {
        NdTypeMask::of(&self.segments.iter().map(|s| s.class).collect::<Vec<_>>())
    }

    /// Segments restricted to classes in `mask`.
    pub fn restrict(&self, mask: NdTypeMask) -> NdPayload {
        NdPayload { segments: self.segments.iter().filter(|s| mask.has(s.class)).cloned().collect() }
    }

    pub fn total_len(&self) -> usize {
        self.segments.iter().map(|s| s.bytes.len()).sum()
    }

    pub fn digest(&self) -> Digest {
        digest(&self.to_bytes())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ShareValue {
    Value(Vec<u8>),
    Digest(Digest),
}

impl ShareValue {
    pub fn share_digest(&self) -> Digest {
        match self {
            ShareValue::Value(v) => digest(v),
            ShareValue::Digest(d) => *d,
        }
    }
}

/// One proposer's NPRE share, authenticated by the proposer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProposerShare {
    pub proposer: ReplicaId,
    pub value: ShareValue,
    pub tag: AuthTag,
}

/// The primary's NPRE decision: 2f+1 shares, sorted by proposer.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DecisionSet {
    pub entries: Vec<ProposerShare>,
}

impl DecisionSet {
    pub fn proposers(&self) -> impl Iterator<Item = ReplicaId> + '_ {
        self.entries.iter().map(|e| e.proposer)
    }

    pub fn digest(&self) -> Digest {
        digest(&self.to_bytes())
    }
}

/// Bytes a proposer authenticates for its share. Binding the share digest
/// (not the share) lets a digest-only decision be checked.
pub fn share_statement(view: ViewNum, seq: SeqNum, request: &Digest, proposer: ReplicaId, share: &Digest) -> Vec<u8> {
    let mut w = Writer::new();
    w.raw(b"ppu-share").put(&view).put(&seq).put(request).put(&proposer).put(share);
    w.finish()
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Request {
    pub client: ClientId,
    pub request_id: u64,
    pub op: Vec<u8>,
}

impl Request {
    pub fn null(seq: SeqNum) -> Self {
        Request { client: NULL_CLIENT, request_id: seq.0, op: Vec::new() }
    }

    pub fn is_null(&self) -> bool {
        self.client == NULL_CLIENT
    }

    pub fn digest(&self) -> Digest {
        digest(&self.to_bytes())
    }
}

/// A request together with the client's authenticator over its encoding.
/// Null requests carry an empty authenticator.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SignedRequest {
    pub request: Request,
    pub auth: AuthTag,
}

impl SignedRequest {
    pub fn null(seq: SeqNum) -> Self {
        SignedRequest { request: Request::null(seq), auth: AuthTag::Authenticator(Vec::new()) }
    }
}

/// Post-determined values plus the digest of the reply they produced.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PostndRecord {
    pub seq: SeqNum,
    pub values: NdPayload,
    pub reply_digest: Digest,
}

impl PostndRecord {
    pub fn digest(&self) -> Digest {
        digest(&self.to_bytes())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PrePrepare {
    pub request: SignedRequest,
    pub mask: NdTypeMask,
    /// Pre-determinable values proposed by the primary (VPRE values, the
    /// primary's own NPRE share).
    pub payload: NdPayload,
    /// Post-determined entries of earlier requests riding on this message.
    pub piggyback: Vec<PostndRecord>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Body {
    Request(SignedRequest),
    PrePrepare(PrePrepare),
    PpuContrib { request_digest: Digest, share: ProposerShare },
    PpuDecision { request_digest: Digest, decision: DecisionSet },
    Prepare { request_digest: Digest, nd_digest: Digest },
    Commit { request_digest: Digest, nd_digest: Digest },
    PostcPrePrepare { record: PostndRecord },
    PostcPrepare { target: SeqNum, postnd_digest: Digest },
    PostcCommit { target: SeqNum, postnd_digest: Digest },
    Reply { client: ClientId, request_id: u64, result: Vec<u8>, result_digest: Digest },
    FetchNd { request_digest: Digest, missing: Vec<ReplicaId> },
    NdValues { request_digest: Digest, shares: Vec<ProposerShare> },
}

impl Body {
    pub fn kind(&self) -> MessageKind {
        match self {
            Body::Request(_) => MessageKind::Request,
            Body::PrePrepare(_) => MessageKind::PrePrepare,
            Body::PpuContrib { .. } => MessageKind::PpuContrib,
            Body::PpuDecision { .. } => MessageKind::PpuDecision,
            Body::Prepare { .. } => MessageKind::Prepare,
            Body::Commit { .. } => MessageKind::Commit,
            Body::PostcPrePrepare { .. } => MessageKind::PostcPrePrepare,
            Body::PostcPrepare { .. } => MessageKind::PostcPrepare,
            Body::PostcCommit { .. } => MessageKind::PostcCommit,
            Body::Reply { .. } => MessageKind::Reply,
            Body::FetchNd { .. } => MessageKind::FetchNd,
            Body::NdValues { .. } => MessageKind::NdValues,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Header {
    pub view: ViewNum,
    pub seq: SeqNum,
    pub sender: Endpoint,
    pub epoch: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProtocolMessage {
    pub header: Header,
    pub body: Body,
}

impl ProtocolMessage {
    pub fn kind(&self) -> MessageKind {
        self.body.kind()
    }
}

/// A message plus its sender's authentication.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Envelope {
    pub message: ProtocolMessage,
    pub auth: AuthTag,
}

impl Envelope {
    /// Decodes an envelope and returns the length of the authenticated
    /// message prefix alongside it.
    pub fn decode_with_span(buf: &[u8]) -> Result<(Envelope, usize), DecodeError> {
        let mut r = Reader::new(buf);
        let message = ProtocolMessage::decode(&mut r)?;
        let span = r.offset();
        let auth = AuthTag::decode(&mut r)?;
        r.finish()?;
        Ok((Envelope { message, auth }, span))
    }
}

// ---- encoding -------------------------------------------------------------

fn non_canonical(r: &Reader<'_>, what: &'static str) -> DecodeError {
    r.err(DecodeErrorKind::NonCanonical(what))
}

impl Encode for NdPayload {
    fn encode(&self, w: &mut Writer) {
        w.u32(self.segments.len() as u32);
        for s in &self.segments {
            w.u8(s.class.bit()).bytes(&s.bytes);
        }
    }
}

impl Decode for NdPayload {
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let n = r.u32()? as usize;
        if n > 4 {
            return Err(non_canonical(r, "more than four nd segments"));
        }
        let mut segments: Vec<NdSegment> = Vec::with_capacity(n);
        for _ in 0..n {
            let at = r.offset();
            let bit = r.u8()?;
            let class = NdClass::from_bit(bit).ok_or(DecodeError {
                offset: at,
                kind: DecodeErrorKind::UnknownTag { what: "nd class", tag: bit },
            })?;
            if segments.last().is_some_and(|p| p.class.bit() >= bit) {
                return Err(non_canonical(r, "nd segments unsorted or duplicated"));
            }
            segments.push(NdSegment { class, bytes: r.bytes()? });
        }
        Ok(NdPayload { segments })
    }
}

impl Encode for ShareValue {
    fn encode(&self, w: &mut Writer) {
        match self {
            ShareValue::Value(v) => w.u8(0).bytes(v),
            ShareValue::Digest(d) => w.u8(1).put(d),
        };
    }
}

impl Decode for ShareValue {
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let at = r.offset();
        match r.u8()? {
            0 => Ok(ShareValue::Value(r.bytes()?)),
            1 => Ok(ShareValue::Digest(r.get()?)),
            tag => Err(DecodeError { offset: at, kind: DecodeErrorKind::UnknownTag { what: "share value", tag } }),
        }
    }
}

impl Encode for ProposerShare {
    fn encode(&self, w: &mut Writer) {
        w.put(&self.proposer).put(&self.value).put(&self.tag);
    }
}

impl Decode for ProposerShare {
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(ProposerShare { proposer: r.get()?, value: r.get()?, tag: r.get()? })
    }
}

impl Encode for DecisionSet {
    fn encode(&self, w: &mut Writer) {
        w.seq(&self.entries);
    }
}

impl Decode for DecisionSet {
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let entries: Vec<ProposerShare> = r.seq()?;
        if entries.windows(2).any(|p| p[0].proposer >= p[1].proposer) {
            return Err(non_canonical(r, "decision entries unsorted or duplicated"));
        }
        Ok(DecisionSet { entries })
    }
}

impl Encode for Request {
    fn encode(&self, w: &mut Writer) {
        w.put(&self.client).u64(self.request_id).bytes(&self.op);
    }
}

impl Decode for Request {
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(Request { client: r.get()?, request_id: r.u64()?, op: r.bytes()? })
    }
}

impl Encode for SignedRequest {
    fn encode(&self, w: &mut Writer) {
        w.put(&self.request).put(&self.auth);
    }
}

impl Decode for SignedRequest {
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(SignedRequest { request: r.get()?, auth: r.get()? })
    }
}

impl Encode for PostndRecord {
    fn encode(&self, w: &mut Writer) {
        w.put(&self.seq).put(&self.values).put(&self.reply_digest);
    }
}

impl Decode for PostndRecord {
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(PostndRecord { seq: r.get()?, values: r.get()?, reply_digest: r.get()? })
    }
}

impl Encode for PrePrepare {
    fn encode(&self, w: &mut Writer) {
        w.put(&self.request).put(&self.mask).put(&self.payload).seq(&self.piggyback);
    }
}

impl Decode for PrePrepare {
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let request = r.get()?;
        let mask = r.get()?;
        let payload = r.get()?;
        let piggyback: Vec<PostndRecord> = r.seq()?;
        if piggyback.windows(2).any(|p| p[0].seq >= p[1].seq) {
            return Err(non_canonical(r, "piggybacked entries unsorted or duplicated"));
        }
        Ok(PrePrepare { request, mask, payload, piggyback })
    }
}

impl Encode for Header {
    fn encode(&self, w: &mut Writer) {
        w.put(&self.view).put(&self.seq).put(&self.sender).u64(self.epoch);
    }
}

impl Decode for Header {
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(Header { view: r.get()?, seq: r.get()?, sender: r.get()?, epoch: r.u64()? })
    }
}

impl Encode for ProtocolMessage {
    fn encode(&self, w: &mut Writer) {
        w.u8(self.kind().tag()).put(&self.header);
        match &self.body {
            Body::Request(req) => {
                w.put(req);
            }
            Body::PrePrepare(pp) => {
                w.put(pp);
            }
            Body::PpuContrib { request_digest, share } => {
                w.put(request_digest).put(share);
            }
            Body::PpuDecision { request_digest, decision } => {
                w.put(request_digest).put(decision);
            }
            Body::Prepare { request_digest, nd_digest } | Body::Commit { request_digest, nd_digest } => {
                w.put(request_digest).put(nd_digest);
            }
            Body::PostcPrePrepare { record } => {
                w.put(record);
            }
            Body::PostcPrepare { target, postnd_digest } | Body::PostcCommit { target, postnd_digest } => {
                w.put(target).put(postnd_digest);
            }
            Body::Reply { client, request_id, result, result_digest } => {
                w.put(client).u64(*request_id).bytes(result).put(result_digest);
            }
            Body::FetchNd { request_digest, missing } => {
                w.put(request_digest).seq(missing);
            }
            Body::NdValues { request_digest, shares } => {
                w.put(request_digest).seq(shares);
            }
        }
    }
}

impl Decode for ProtocolMessage {
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let at = r.offset();
        let tag = r.u8()?;
        let kind = MessageKind::from_tag(tag)
            .ok_or(DecodeError { offset: at, kind: DecodeErrorKind::UnknownTag { what: "message", tag } })?;
        let header = r.get()?;
        let body = match kind {
            MessageKind::Request => Body::Request(r.get()?),
            MessageKind::PrePrepare => Body::PrePrepare(r.get()?),
            MessageKind::PpuContrib => Body::PpuContrib { request_digest: r.get()?, share: r.get()? },
            MessageKind::PpuDecision => Body::PpuDecision { request_digest: r.get()?, decision: r.get()? },
            MessageKind::Prepare => Body::Prepare { request_digest: r.get()?, nd_digest: r.get()? },
            MessageKind::Commit => Body::Commit { request_digest: r.get()?, nd_digest: r.get()? },
            MessageKind::PostcPrePrepare => Body::PostcPrePrepare { record: r.get()? },
            MessageKind::PostcPrepare => Body::PostcPrepare { target: r.get()?, postnd_digest: r.get()? },
            MessageKind::PostcCommit => Body::PostcCommit { target: r.get()?, postnd_digest: r.get()? },
            MessageKind::Reply => Body::Reply {
                client: r.get()?,
                request_id: r.u64()?,
                result: r.bytes()?,
                result_digest: r.get()?,
            },
            MessageKind::FetchNd => {
                let request_digest = r.get()?;
                let missing: Vec<ReplicaId> = r.seq()?;
                if missing.windows(2).any(|p| p[0] >= p[1]) {
                    return Err(non_canonical(r, "fetch list unsorted or duplicated"));
                }
                Body::FetchNd { request_digest, missing }
            }
            MessageKind::NdValues => Body::NdValues { request_digest: r.get()?, shares: r.seq()? },
        };
        Ok(ProtocolMessage { header, body })
    }
}

impl Encode for Envelope {
    fn encode(&self, w: &mut Writer) {
        w.put(&self.message).put(&self.auth);
    }
}

impl Decode for Envelope {
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(Envelope { message: r.get()?, auth: r.get()? })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::{digest, MAC_LEN};

    fn header() -> Header {
        Header { view: ViewNum(0), seq: SeqNum(1), sender: Endpoint::Replica(ReplicaId(0)), epoch: 9 }
    }

    fn sample() -> ProtocolMessage {
        ProtocolMessage {
            header: header(),
            body: Body::PrePrepare(PrePrepare {
                request: SignedRequest {
                    request: Request { client: ClientId(3), request_id: 4, op: vec![1, 2, 3] },
                    auth: AuthTag::Authenticator(vec![[7; MAC_LEN]; 4]),
                },
                mask: NdTypeMask::new(NdTypeMask::VPRE | NdTypeMask::NPOST).unwrap(),
                payload: NdPayload::single(NdClass::Vpre, vec![9; 32]),
                piggyback: vec![PostndRecord {
                    seq: SeqNum(0),
                    values: NdPayload::single(NdClass::Npost, vec![1, 1]),
                    reply_digest: digest(b"r"),
                }],
            }),
        }
    }

    #[test]
    fn round_trip_pre_prepare() {
        let m = sample();
        let bytes = m.to_bytes();
        assert_eq!(ProtocolMessage::from_bytes(&bytes).unwrap(), m);
        assert_eq!(bytes[0], MessageKind::PrePrepare.tag());
    }

    #[test]
    fn every_truncation_is_an_error() {
        let bytes = sample().to_bytes();
        for cut in 0..bytes.len() {
            let err = ProtocolMessage::from_bytes(&bytes[..cut]).unwrap_err();
            assert!(err.offset <= cut, "offset {} past cut {}", err.offset, cut);
        }
    }

    #[test]
    fn trailing_bytes_rejected() {
        let mut bytes = sample().to_bytes();
        bytes.push(0);
        let err = ProtocolMessage::from_bytes(&bytes).unwrap_err();
        assert_eq!(err.kind, DecodeErrorKind::TrailingBytes(1));
    }

    #[test]
    fn unknown_tag_rejected() {
        let mut bytes = sample().to_bytes();
        bytes[0] = 200;
        let err = ProtocolMessage::from_bytes(&bytes).unwrap_err();
        assert_eq!(err.offset, 0);
    }

    #[test]
    fn payload_set_keeps_order() {
        let mut p = NdPayload::new();
        p.set(NdClass::Npost, vec![1]);
        p.set(NdClass::Vpre, vec![2]);
        p.set(NdClass::Npost, vec![3]);
        let classes: Vec<_> = p.segments().iter().map(|s| s.class).collect();
        assert_eq!(classes, vec![NdClass::Vpre, NdClass::Npost]);
        assert_eq!(p.get(NdClass::Npost), Some(&[3u8][..]));
        assert_eq!(NdPayload::from_bytes(&p.to_bytes()).unwrap(), p);
    }

    #[test]
    fn unsorted_payload_is_non_canonical() {
        let mut w = Writer::new();
        w.u32(2).u8(NdTypeMask::NPOST).bytes(&[1]).u8(NdTypeMask::VPRE).bytes(&[2]);
        let err = NdPayload::from_bytes(&w.finish()).unwrap_err();
        assert!(matches!(err.kind, DecodeErrorKind::NonCanonical(_)));
    }

    #[test]
    fn envelope_span_covers_message() {
        let m = sample();
        let env = Envelope { message: m.clone(), auth: AuthTag::Signature([5; 64]) };
        let bytes = env.to_bytes();
        let (back, span) = Envelope::decode_with_span(&bytes).unwrap();
        assert_eq!(back, env);
        assert_eq!(&bytes[..span], m.to_bytes().as_slice());
    }
}
