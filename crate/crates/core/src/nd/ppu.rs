use std::collections::{BTreeMap, BTreeSet};

use crate::crypto::{AuthMode, ConfigError, Digest, KeyStore, Receivers};
use crate::ids::{Endpoint, QuorumConfig, ReplicaId, SeqNum, ViewNum};
use crate::wire::{share_statement, DecisionSet, ProposerShare, ShareValue};

/// Per-slot state of the NPRE pre-prepare-update exchange.
#[derive(Debug, Clone)]
pub struct PpuState {
    pub request_digest: Digest,
    /// Verified full-value shares by proposer, including the primary's.
    pub shares: BTreeMap<ReplicaId, ProposerShare>,
    pub decision: Option<DecisionSet>,
    pub resolved: Option<Vec<(ReplicaId, Vec<u8>)>>,
    /// Proposers whose values are still needed to resolve the decision.
    pub missing: BTreeSet<ReplicaId>,
}

impl PpuState {
    pub fn new(request_digest: Digest) -> Self {
        PpuState { request_digest, shares: BTreeMap::new(), decision: None, resolved: None, missing: BTreeSet::new() }
    }

    /// Stores a verified share; the first share per proposer wins.
    pub fn add_share(&mut self, share: ProposerShare) -> bool {
        if !matches!(share.value, ShareValue::Value(_)) || self.shares.contains_key(&share.proposer) {
            return false;
        }
        self.shares.insert(share.proposer, share);
        true
    }

    fn backups(&self, primary: ReplicaId) -> impl Iterator<Item = ReplicaId> + '_ {
        self.shares.keys().copied().filter(move |&r| r != primary)
    }

    pub fn backup_count(&self, primary: ReplicaId) -> usize {
        self.backups(primary).count()
    }

    /// True once waiting longer cannot change the decision: the 2f
    /// lowest-id backups have contributed, or every backup has.
    pub fn settled(&self, quorum: QuorumConfig, primary: ReplicaId) -> bool {
        let need = quorum.certificate_size();
        let lowest: Vec<ReplicaId> = quorum.replicas().filter(|&r| r != primary).take(need).collect();
        lowest.iter().all(|r| self.shares.contains_key(r)) || self.backup_count(primary) == quorum.n() as usize - 1
    }

    /// The primary's decision: its own share plus the 2f lowest-id backup
    /// shares it holds. `digests_only` replaces values by their digests.
    pub fn decide(&self, quorum: QuorumConfig, primary: ReplicaId, digests_only: bool) -> Option<DecisionSet> {
        let own = self.shares.get(&primary)?;
        let chosen: Vec<&ProposerShare> = self.backups(primary).take(quorum.certificate_size()).map(|r| &self.shares[&r]).collect();
        if chosen.len() < quorum.certificate_size() {
            return None;
        }
        let mut entries: Vec<ProposerShare> = std::iter::once(own).chain(chosen).cloned().collect();
        entries.sort_by_key(|e| e.proposer);
        if digests_only {
            for e in &mut entries {
                e.value = ShareValue::Digest(e.value.share_digest());
            }
        }
        Some(DecisionSet { entries })
    }

    /// Resolves the accepted decision against known shares, updating
    /// `resolved` or `missing`.
    pub fn resolve(&mut self) -> bool {
        let Some(decision) = &self.decision else { return false };
        match resolve_decision(decision, &self.shares) {
            Ok(v) => {
                self.resolved = Some(v);
                self.missing.clear();
                true
            }
            Err(missing) => {
                self.missing = missing.into_iter().collect();
                false
            }
        }
    }
}

pub fn make_share(
    keys: &KeyStore,
    me: ReplicaId,
    mode: AuthMode,
    view: ViewNum,
    seq: SeqNum,
    request_digest: &Digest,
    bytes: Vec<u8>,
) -> Result<ProposerShare, ConfigError> {
    let value = ShareValue::Value(bytes);
    let statement = share_statement(view, seq, request_digest, me, &value.share_digest());
    let tag = keys.authenticate(Endpoint::Replica(me), &statement, mode, Receivers::Group)?;
    Ok(ProposerShare { proposer: me, value, tag })
}

pub fn verify_share(keys: &KeyStore, share: &ProposerShare, view: ViewNum, seq: SeqNum, request_digest: &Digest, receiver: ReplicaId) -> bool {
    keys.quorum().contains(share.proposer) && {
        let statement = share_statement(view, seq, request_digest, share.proposer, &share.value.share_digest());
        keys.verify(&share.tag, Endpoint::Replica(share.proposer), &statement, Endpoint::Replica(receiver))
    }
}

/// Checks a decision set: exactly 2f+1 distinct proposers in ascending
/// order, the primary among them with the share it pre-prepared, and
/// every entry authenticated by its proposer.
#[allow(clippy::too_many_arguments)]
pub fn verify_decision(
    keys: &KeyStore,
    decision: &DecisionSet,
    primary: ReplicaId,
    view: ViewNum,
    seq: SeqNum,
    request_digest: &Digest,
    primary_share: &Digest,
    receiver: ReplicaId,
) -> Result<(), String> {
    let quorum = keys.quorum();
    if decision.entries.len() != quorum.decision_size() {
        return Err(format!("decision has {} entries, expected {}", decision.entries.len(), quorum.decision_size()));
    }
    if decision.entries.windows(2).any(|w| w[0].proposer >= w[1].proposer) {
        return Err("decision proposers not distinct and ascending".into());
    }
    let own = decision.entries.iter().find(|e| e.proposer == primary).ok_or("decision omits the primary")?;
    if own.value.share_digest() != *primary_share {
        return Err("primary entry differs from the pre-prepared share".into());
    }
    for e in &decision.entries {
        if !verify_share(keys, e, view, seq, request_digest, receiver) {
            return Err(format!("entry of {} fails authentication", e.proposer));
        }
    }
    Ok(())
}

/// Full values for every decision entry, or the proposers whose values
/// are not known locally.
pub fn resolve_decision(decision: &DecisionSet, known: &BTreeMap<ReplicaId, ProposerShare>) -> Result<Vec<(ReplicaId, Vec<u8>)>, Vec<ReplicaId>> {
    let mut out = Vec::with_capacity(decision.entries.len());
    let mut missing = Vec::new();
    for e in &decision.entries {
        match &e.value {
            ShareValue::Value(v) => out.push((e.proposer, v.clone())),
            ShareValue::Digest(d) => match known.get(&e.proposer).map(|s| &s.value) {
                Some(ShareValue::Value(v)) if crate::crypto::digest(v) == *d => out.push((e.proposer, v.clone())),
                _ => missing.push(e.proposer),
            },
        }
    }
    if missing.is_empty() {
        Ok(out)
    } else {
        Err(missing)
    }
}
