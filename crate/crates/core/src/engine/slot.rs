use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::crypto::Digest;
use crate::ids::{ReplicaId, SeqNum};
use crate::mask::NdTypeMask;
use crate::nd::{PhasePlan, PpuState};
use crate::wire::{DecisionSet, PostndRecord, PrePrepare};

use super::Outgoing;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Phase {
    Empty,
    PrePrepared,
    Prepared,
    Committed,
    NdPending,
    Delivered,
}

/// Agreement on the post-determined values of one slot.
#[derive(Debug, Default)]
pub(crate) struct PostState {
    pub record: Option<PostndRecord>,
    pub digest: Option<Digest>,
    /// Seq of the pre-prepare that carries the record, if piggybacked.
    pub carrier: Option<SeqNum>,
    pub prepares: BTreeMap<ReplicaId, Digest>,
    pub commits: BTreeMap<ReplicaId, Digest>,
    pub sent_prepare: bool,
    pub sent_commit: bool,
    pub agreed: bool,
    /// A standalone proposal received before the slot's pre-prepare.
    pub early: Option<PostndRecord>,
}

impl PostState {
    pub fn matching(map: &BTreeMap<ReplicaId, Digest>, d: &Digest) -> usize {
        map.values().filter(|x| *x == d).count()
    }
}

/// Per-(view, seq) ordering state.
#[derive(Debug)]
pub(crate) struct OrderingSlot {
    pub seq: SeqNum,
    pub phase: Phase,
    pub pp: Option<PrePrepare>,
    pub request_digest: Option<Digest>,
    pub mask: NdTypeMask,
    pub plan: PhasePlan,
    pub nd_digest: Option<Digest>,
    pub prepares: BTreeMap<ReplicaId, (Digest, Digest)>,
    pub commits: BTreeMap<ReplicaId, (Digest, Digest)>,
    pub ppu: Option<PpuState>,
    /// A decision that arrived before the pre-prepare.
    pub early_decision: Option<DecisionSet>,
    pub post: PostState,
    /// Targets whose post-determined records ride on this pre-prepare.
    pub carried: Vec<SeqNum>,
    /// Own messages for this slot, kept for retransmission.
    pub sent: Vec<Outgoing>,
    pub retransmits: u32,
    /// Last time each peer was helped with a resend.
    pub helped: BTreeMap<ReplicaId, u64>,
    pub grace_armed: bool,
    pub failed: bool,
}

impl OrderingSlot {
    pub fn new(seq: SeqNum) -> Self {
        OrderingSlot {
            seq,
            phase: Phase::Empty,
            pp: None,
            request_digest: None,
            mask: NdTypeMask::DETERMINISTIC,
            plan: PhasePlan::default(),
            nd_digest: None,
            prepares: BTreeMap::new(),
            commits: BTreeMap::new(),
            ppu: None,
            early_decision: None,
            post: PostState::default(),
            carried: Vec::new(),
            sent: Vec::new(),
            retransmits: 0,
            helped: BTreeMap::new(),
            grace_armed: false,
            failed: false,
        }
    }

    pub fn key(&self) -> Option<(Digest, Digest)> {
        Some((self.request_digest?, self.nd_digest?))
    }

    pub fn matching(map: &BTreeMap<ReplicaId, (Digest, Digest)>, key: &(Digest, Digest)) -> usize {
        map.values().filter(|v| *v == key).count()
    }

    pub fn is_null(&self) -> bool {
        self.pp.as_ref().is_some_and(|p| p.request.request.is_null())
    }

    /// Whether this replica still has protocol work outstanding here.
    pub fn unsettled(&self) -> bool {
        self.phase < Phase::Delivered && !self.failed || (self.plan.needs_post_commit && !self.post.agreed)
    }
}
