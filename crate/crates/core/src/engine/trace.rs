//! Structured trace records, one JSON object per line.

use serde::{Deserialize, Serialize};

use crate::crypto::Digest;
use crate::ids::{ClientId, ReplicaId, SeqNum, ViewNum};
use crate::mask::NdTypeMask;

use super::{Phase, SuspicionReason};

pub const TRACE_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TraceRecord {
    Header {
        version: u32,
        scenario: String,
        seed: u64,
        f: u32,
        n: u32,
        faulty: Vec<ReplicaId>,
    },
    Phase {
        t: u64,
        replica: ReplicaId,
        view: ViewNum,
        seq: SeqNum,
        phase: Phase,
    },
    PpuDecided {
        t: u64,
        replica: ReplicaId,
        seq: SeqNum,
        proposers: Vec<ReplicaId>,
        decision: Digest,
    },
    PostndRecorded {
        t: u64,
        replica: ReplicaId,
        seq: SeqNum,
        values: Digest,
        reply: Digest,
    },
    PostndAgreed {
        t: u64,
        replica: ReplicaId,
        seq: SeqNum,
        record: Digest,
    },
    Delivered {
        t: u64,
        replica: ReplicaId,
        view: ViewNum,
        seq: SeqNum,
        client: ClientId,
        request_id: u64,
        null: bool,
        mask: NdTypeMask,
        request: Digest,
        /// Digest of all nondeterministic data the execution used.
        nd: Digest,
        result: Digest,
    },
    Suspect {
        t: u64,
        replica: ReplicaId,
        seq: SeqNum,
        reason: SuspicionReason,
        detail: String,
    },
    Restart {
        t: u64,
        replica: ReplicaId,
        seq: SeqNum,
        pre_state: Digest,
        post_state: Digest,
    },
    /// Injected by the simulator when a faulty replica tampers at `seq`.
    Fault {
        t: u64,
        replica: ReplicaId,
        seq: SeqNum,
        behavior: String,
    },
    ClientAccept {
        t: u64,
        client: ClientId,
        request_id: u64,
        result: Digest,
        latency_us: u64,
    },
    ClientFail {
        t: u64,
        client: ClientId,
        request_id: u64,
    },
    End {
        t: u64,
        events: u64,
    },
}

impl TraceRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("trace records serialize")
    }
}
