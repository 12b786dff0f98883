//! Closed-loop client: one outstanding request, f+1 reply voting.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::crypto::{digest, AuthMode, Digest, KeyStore, Receivers};
use crate::engine::{Dest, Outgoing};
use crate::ids::{ClientId, Endpoint, QuorumConfig, ReplicaId, SeqNum, ViewNum};
use crate::wire::{Body, Encode, Envelope, Header, ProtocolMessage, Request, SignedRequest};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClientConfig {
    /// First retransmission delay; doubles on every retry.
    pub retransmit_us: u64,
    /// Total time a call may take before it fails.
    pub deadline_us: u64,
}

impl Default for ClientConfig {
    fn default() -> Self {
        ClientConfig { retransmit_us: 50_000, deadline_us: 5_000_000 }
    }
}

/// The single request a client is waiting on.
#[derive(Clone, Debug)]
pub struct PendingCall {
    pub request_id: u64,
    pub started_us: u64,
    bytes: Arc<[u8]>,
    message: Arc<ProtocolMessage>,
    retry_at: u64,
    backoff: u64,
    /// Result digest reported by each replica.
    pub replies: BTreeMap<ReplicaId, Digest>,
    results: BTreeMap<Digest, Vec<u8>>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ClientEvent {
    Accepted { request_id: u64, result: Vec<u8>, latency_us: u64 },
    Failed { request_id: u64 },
}

#[derive(Debug, Default)]
pub struct ClientEffects {
    pub sends: Vec<Outgoing>,
    /// Absolute time at which `handle_timer` should run next.
    pub timer: Option<u64>,
    pub event: Option<ClientEvent>,
}

pub struct Client {
    id: ClientId,
    quorum: QuorumConfig,
    keys: Arc<KeyStore>,
    cfg: ClientConfig,
    next_request_id: u64,
    pending: Option<PendingCall>,
}

impl std::fmt::Debug for Client {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Client").field("id", &self.id).field("pending", &self.pending.as_ref().map(|p| p.request_id)).finish()
    }
}

impl Client {
    pub fn new(id: ClientId, keys: Arc<KeyStore>, cfg: ClientConfig) -> Self {
        Client { id, quorum: keys.quorum(), keys, cfg, next_request_id: 1, pending: None }
    }

    pub fn id(&self) -> ClientId {
        self.id
    }

    pub fn pending(&self) -> Option<&PendingCall> {
        self.pending.as_ref()
    }

    fn endpoint(&self) -> Endpoint {
        Endpoint::Client(self.id)
    }

    /// Starts a call and sends it to the primary.
    ///
    /// Panics if a call is already outstanding.
    pub fn invoke(&mut self, now: u64, op: Vec<u8>) -> ClientEffects {
        assert!(self.pending.is_none(), "{} already has a call outstanding", self.id);
        let request = Request { client: self.id, request_id: self.next_request_id, op };
        self.next_request_id += 1;
        let auth = self
            .keys
            .authenticate(self.endpoint(), &request.to_bytes(), AuthMode::Authenticator, Receivers::Group)
            .expect("client key material is configured");
        let request_id = request.request_id;
        let header = Header { view: ViewNum(0), seq: SeqNum::NONE, sender: self.endpoint(), epoch: 0 };
        let message = ProtocolMessage { header, body: Body::Request(SignedRequest { request, auth }) };
        // Authenticated for the whole group so retransmissions reuse the bytes.
        let mut bytes = message.to_bytes();
        let tag = self
            .keys
            .authenticate(self.endpoint(), &bytes, AuthMode::Authenticator, Receivers::Group)
            .expect("client key material is configured");
        bytes.extend_from_slice(&tag.to_bytes());
        let call = PendingCall {
            request_id,
            started_us: now,
            bytes: bytes.into(),
            message: Arc::new(message),
            retry_at: now + self.cfg.retransmit_us,
            backoff: self.cfg.retransmit_us,
            replies: BTreeMap::new(),
            results: BTreeMap::new(),
        };
        let primary = self.quorum.primary(ViewNum(0));
        let send = Outgoing { dest: Dest::Replica(primary), message: call.message.clone(), bytes: call.bytes.clone() };
        let timer = Some(call.retry_at);
        self.pending = Some(call);
        ClientEffects { sends: vec![send], timer, event: None }
    }

    pub fn handle_message(&mut self, now: u64, from: Endpoint, bytes: &[u8]) -> ClientEffects {
        let mut fx = ClientEffects::default();
        let Endpoint::Replica(r) = from else { return fx };
        let Some(call) = self.pending.as_mut() else { return fx };
        let Ok((env, span)) = Envelope::decode_with_span(bytes) else { return fx };
        if env.message.header.sender != from || !self.keys.verify(&env.auth, from, &bytes[..span], Endpoint::Client(self.id)) {
            return fx;
        }
        let Body::Reply { client, request_id, result, result_digest } = env.message.body else { return fx };
        if client != self.id || request_id != call.request_id || digest(&result) != result_digest {
            return fx;
        }
        call.replies.insert(r, result_digest);
        call.results.entry(result_digest).or_insert(result);
        let votes = call.replies.values().filter(|d| **d == result_digest).count();
        if votes >= self.quorum.reply_quorum() {
            let call = self.pending.take().unwrap();
            let result = call.results[&result_digest].clone();
            fx.event = Some(ClientEvent::Accepted { request_id, result, latency_us: now - call.started_us });
        }
        fx
    }

    /// Retransmits to every replica or gives up at the deadline. Stale
    /// timer firings are ignored.
    pub fn handle_timer(&mut self, now: u64) -> ClientEffects {
        let mut fx = ClientEffects::default();
        let Some(call) = self.pending.as_mut() else { return fx };
        if now >= call.started_us + self.cfg.deadline_us {
            let request_id = call.request_id;
            self.pending = None;
            fx.event = Some(ClientEvent::Failed { request_id });
            return fx;
        }
        if now < call.retry_at {
            return fx;
        }
        fx.sends.push(Outgoing { dest: Dest::Replicas, message: call.message.clone(), bytes: call.bytes.clone() });
        call.backoff *= 2;
        call.retry_at = (now + call.backoff).min(call.started_us + self.cfg.deadline_us);
        fx.timer = Some(call.retry_at);
        fx
    }
}
