//! Identifiers and quorum arithmetic.

use std::fmt;

use serde::{Deserialize, Serialize};

/// Index of a replica in `[0, n)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ReplicaId(pub u32);

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ClientId(pub u64);

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ViewNum(pub u64);

/// Sequence number assigned by the primary. `SeqNum(0)` means "none".
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SeqNum(pub u64);

impl SeqNum {
    pub const NONE: SeqNum = SeqNum(0);

    pub fn next(self) -> SeqNum {
        SeqNum(self.0 + 1)
    }

    pub fn is_none(self) -> bool {
        self.0 == 0
    }
}

impl fmt::Display for ReplicaId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "r{}", self.0)
    }
}

impl fmt::Display for ClientId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "c{}", self.0)
    }
}

impl fmt::Display for SeqNum {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

/// Anything that can send or receive a protocol message.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Endpoint {
    Replica(ReplicaId),
    Client(ClientId),
}

impl Endpoint {
    /// Stable numeric principal used for key derivation. Replicas and
    /// clients live in disjoint halves of the space.
    pub fn principal(self) -> u64 {
        match self {
            Endpoint::Replica(r) => r.0 as u64,
            Endpoint::Client(c) => (1u64 << 63) | c.0,
        }
    }
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Endpoint::Replica(r) => r.fmt(f),
            Endpoint::Client(c) => c.fmt(f),
        }
    }
}

/// Group size for a fault threshold: `n = 3f + 1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuorumConfig {
    f: u32,
}

impl QuorumConfig {
    pub fn new(f: u32) -> Self {
        QuorumConfig { f }
    }

    pub fn f(&self) -> u32 {
        self.f
    }

    pub fn n(&self) -> u32 {
        3 * self.f + 1
    }

    /// Matching messages required from *other* replicas to advance a phase.
    pub fn certificate_size(&self) -> usize {
        2 * self.f as usize
    }

    /// Number of proposer shares in an NPRE decision set.
    pub fn decision_size(&self) -> usize {
        2 * self.f as usize + 1
    }

    /// Matching replies a client needs before accepting a result.
    pub fn reply_quorum(&self) -> usize {
        self.f as usize + 1
    }

    pub fn primary(&self, view: ViewNum) -> ReplicaId {
        ReplicaId((view.0 % self.n() as u64) as u32)
    }

    pub fn replicas(&self) -> impl Iterator<Item = ReplicaId> {
        (0..self.n()).map(ReplicaId)
    }

    pub fn contains(&self, r: ReplicaId) -> bool {
        r.0 < self.n()
    }
}
