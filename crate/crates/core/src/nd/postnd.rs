use std::collections::BTreeMap;

use serde::Serialize;

use crate::crypto::Digest;
use crate::ids::SeqNum;
use crate::wire::{NdPayload, PostndRecord};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PostndStatus {
    Recorded,
    InAgreement,
    Agreed,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PostndEntry {
    pub record: PostndRecord,
    pub status: PostndStatus,
}

/// The primary's log of post-determined values awaiting agreement.
#[derive(Debug, Default)]
pub struct PostndLog {
    entries: BTreeMap<SeqNum, PostndEntry>,
}

impl PostndLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, seq: SeqNum, values: NdPayload, reply_digest: Digest) -> &PostndEntry {
        let entry = PostndEntry { record: PostndRecord { seq, values, reply_digest }, status: PostndStatus::Recorded };
        self.entries.insert(seq, entry);
        &self.entries[&seq]
    }

    pub fn get(&self, seq: SeqNum) -> Option<&PostndEntry> {
        self.entries.get(&seq)
    }

    /// Moves every RECORDED entry into agreement and returns them in seq
    /// order.
    pub fn take_pending(&mut self) -> Vec<PostndRecord> {
        self.entries
            .values_mut()
            .filter(|e| e.status == PostndStatus::Recorded)
            .map(|e| {
                e.status = PostndStatus::InAgreement;
                e.record.clone()
            })
            .collect()
    }

    pub fn mark_in_agreement(&mut self, seq: SeqNum) {
        if let Some(e) = self.entries.get_mut(&seq) {
            e.status = e.status.max(PostndStatus::InAgreement);
        }
    }

    pub fn mark_agreed(&mut self, seq: SeqNum) {
        if let Some(e) = self.entries.get_mut(&seq) {
            e.status = PostndStatus::Agreed;
        }
    }

    pub fn pending_count(&self) -> usize {
        self.entries.values().filter(|e| e.status == PostndStatus::Recorded).count()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::digest;
    use crate::mask::NdClass;

    #[test]
    fn entries_keyed_by_seq_and_taken_once() {
        let mut log = PostndLog::new();
        log.record(SeqNum(1), NdPayload::single(NdClass::Npost, vec![1]), digest(b"a"));
        log.record(SeqNum(2), NdPayload::single(NdClass::Npost, vec![2]), digest(b"b"));
        assert_eq!(log.len(), 2);
        assert_ne!(log.get(SeqNum(1)).unwrap().record, log.get(SeqNum(2)).unwrap().record);
        let taken = log.take_pending();
        assert_eq!(taken.iter().map(|r| r.seq).collect::<Vec<_>>(), vec![SeqNum(1), SeqNum(2)]);
        assert!(log.take_pending().is_empty());
        log.mark_agreed(SeqNum(1));
        assert_eq!(log.get(SeqNum(1)).unwrap().status, PostndStatus::Agreed);
        assert_eq!(log.get(SeqNum(2)).unwrap().status, PostndStatus::InAgreement);
    }
}
