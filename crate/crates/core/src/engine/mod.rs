//! The per-replica ordering state machine.
//!
//! A [`Replica`] consumes one input at a time (an encoded envelope or a
//! timer) and returns [`Effects`]: messages to send, timers to arm, trace
//! records, and the CPU work the step performed. It never reads a clock;
//! the caller passes virtual time in.

mod replica;
mod slot;
pub mod trace;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::crypto::{digest, AuthMode, Digest};
use crate::ids::{ClientId, ReplicaId, SeqNum};
use crate::wire::{MessageKind, NdPayload, ProtocolMessage, Writer};

pub use replica::{Replica, ReplicaStats};
pub use slot::Phase;
pub use trace::{TraceRecord, TRACE_VERSION};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SuspicionReason {
    BadOrder,
    NdTypeMismatch,
    NdValueRejected,
    NdAgreementFailed,
    ReplyDigestMismatch,
    ExecCrashOrDeadlock,
}

impl SuspicionReason {
    pub const ALL: [SuspicionReason; 6] = [
        SuspicionReason::BadOrder,
        SuspicionReason::NdTypeMismatch,
        SuspicionReason::NdValueRejected,
        SuspicionReason::NdAgreementFailed,
        SuspicionReason::ReplyDigestMismatch,
        SuspicionReason::ExecCrashOrDeadlock,
    ];
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuspicionEvent {
    pub replica: ReplicaId,
    pub seq: SeqNum,
    pub reason: SuspicionReason,
    pub detail: String,
}

/// Replica tunables. Times are virtual microseconds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReplicaConfig {
    pub msg_auth: AuthMode,
    /// Mode for NPRE shares, which third parties must be able to check.
    pub share_auth: AuthMode,
    /// Decisions carry share digests; contributions go to every replica.
    pub digest_dissemination: bool,
    /// Post-determined values ride on the next pre-prepare.
    pub piggyback: bool,
    pub flush_timer_us: u64,
    pub exec_budget_us: u64,
    /// How long a backup waits for a decision or a post-commit agreement
    /// before suspecting the primary.
    pub view_timer_us: u64,
    pub retransmit_us: u64,
    pub max_retransmits: u32,
    /// Extra wait for the lowest-id contributions once 2f are in.
    pub ppu_grace_us: u64,
    /// Messages more than this many seqs past the last delivery are dropped.
    pub horizon: u64,
    pub trace_phases: bool,
    /// Offset of this replica's local clock from virtual time.
    pub clock_offset_us: i64,
}

impl Default for ReplicaConfig {
    fn default() -> Self {
        ReplicaConfig {
            msg_auth: AuthMode::Authenticator,
            share_auth: AuthMode::Signature,
            digest_dissemination: true,
            piggyback: true,
            flush_timer_us: 10_000,
            exec_budget_us: 100_000,
            view_timer_us: 200_000,
            retransmit_us: 20_000,
            max_retransmits: 10,
            ppu_grace_us: 2_000,
            horizon: 256,
            trace_phases: false,
            clock_offset_us: 0,
        }
    }
}

impl ReplicaConfig {
    pub fn with_optimizations(mut self, on: bool) -> Self {
        self.digest_dissemination = on;
        self.piggyback = on;
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Dest {
    Replica(ReplicaId),
    /// Every replica except the sender.
    Replicas,
    Client(ClientId),
}

/// An encoded, authenticated envelope ready for the network.
#[derive(Clone, Debug)]
pub struct Outgoing {
    pub dest: Dest,
    pub message: Arc<ProtocolMessage>,
    pub bytes: Arc<[u8]>,
}

impl Outgoing {
    pub fn kind(&self) -> MessageKind {
        self.message.kind()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Timer {
    Tick,
    Flush,
    NdWait(SeqNum),
    PpuGrace(SeqNum),
    /// Backup waiting on post-commit agreement for a committed slot.
    PostWait(SeqNum),
}

/// Work a step performed, for the simulator's CPU model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Work {
    pub signs: u32,
    pub verifies: u32,
    pub exec_us: u64,
}

#[derive(Debug, Default)]
pub struct Effects {
    pub sends: Vec<Outgoing>,
    pub timers: Vec<(u64, Timer)>,
    pub trace: Vec<TraceRecord>,
    pub work: Work,
}

/// Digest of the nondeterministic data an execution used: the VPRE
/// values, the resolved NPRE shares, and the post-determined values.
pub fn nd_data_digest(vpre: &NdPayload, npre: &[(ReplicaId, Vec<u8>)], post: &NdPayload) -> Digest {
    let mut w = Writer::new();
    w.put(vpre).u32(npre.len() as u32);
    for (r, s) in npre {
        w.put(r).bytes(s);
    }
    w.put(post);
    digest(&w.finish())
}
