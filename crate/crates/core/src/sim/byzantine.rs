//! Scripted Byzantine behavior: an honest replica whose outputs are
//! intercepted and rewritten before they reach the network.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::app::PostAttack;
use crate::crypto::{digest, digest_parts, AuthTag, Digest};
use crate::engine::{Dest, Outgoing, Replica};
use crate::ids::{ReplicaId, SeqNum};
use crate::mask::{NdClass, NdTypeMask};
use crate::wire::{Body, PostndRecord, PrePrepare, ProtocolMessage, SignedRequest};

use super::scenario::{Behavior, Trigger};

#[derive(Debug)]
pub(crate) struct Adversary {
    behavior: Behavior,
    trigger: Trigger,
    seed: u64,
    crashed: bool,
    /// Seqs tampered with since the last `take_affected`.
    affected: Vec<SeqNum>,
}

fn tamper(d: &Digest) -> Digest {
    digest_parts([b"tampered".as_slice(), &d.0])
}

fn corrupt_tag(tag: &mut AuthTag) {
    match tag {
        AuthTag::Signature(s) => s[0] ^= 0xff,
        AuthTag::Authenticator(v) => v.iter_mut().for_each(|m| m[0] ^= 0xff),
    }
}

impl Adversary {
    pub fn new(behavior: Behavior, trigger: Trigger, seed: u64) -> Self {
        Adversary { behavior, trigger, seed, crashed: false, affected: Vec::new() }
    }

    pub fn crashed(&self) -> bool {
        self.crashed
    }

    pub fn behavior(&self) -> Behavior {
        self.behavior
    }

    pub fn take_affected(&mut self) -> Vec<SeqNum> {
        std::mem::take(&mut self.affected)
    }

    fn mark(&mut self, seq: SeqNum) {
        if !self.affected.contains(&seq) {
            self.affected.push(seq);
        }
    }

    /// Whether the behavior applies at exactly `seq`.
    fn fires(&self, seq: SeqNum) -> bool {
        if seq.is_none() {
            return false;
        }
        match self.trigger {
            Trigger::Always => true,
            Trigger::AtSeq(k) => seq.0 == k,
            Trigger::FromSeq(k) => seq.0 >= k,
            Trigger::Probability(p) => {
                let h = digest_parts([b"trigger".as_slice(), &self.seed.to_le_bytes(), &seq.0.to_le_bytes()]);
                (u64::from_le_bytes(h.0[..8].try_into().unwrap()) as f64 / u64::MAX as f64) < p
            }
        }
    }

    /// Whether the behavior is active at `seq` or any earlier seq.
    fn reached(&self, seq: SeqNum) -> bool {
        match self.trigger {
            Trigger::AtSeq(k) | Trigger::FromSeq(k) => seq.0 >= k,
            _ => self.fires(seq),
        }
    }

    /// Rewrites one step's outputs of the faulty replica.
    pub fn intercept(&mut self, replica: &Replica, sends: Vec<Outgoing>) -> Vec<Outgoing> {
        let mut out = Vec::with_capacity(sends.len());
        for o in sends {
            if self.crashed {
                break;
            }
            let seq = o.message.header.seq;
            let mute = matches!(self.behavior, Behavior::CrashReplica)
                || (!replica.is_primary() && matches!(self.behavior, Behavior::DeadlockOrder | Behavior::CrashOrder));
            if mute && self.reached(seq) {
                self.crashed = true;
                self.mark(seq);
                break;
            }
            self.rewrite(replica, o, &mut out);
        }
        out
    }

    fn rewrite(&mut self, replica: &Replica, o: Outgoing, out: &mut Vec<Outgoing>) {
        let h = o.message.header;
        let seq = h.seq;
        let primary = replica.is_primary();
        let reseal = |body: Body, dest: Dest| replica.seal(ProtocolMessage { header: h, body }, dest);
        use Behavior::*;
        match (&o.message.body, self.behavior) {
            (Body::PrePrepare(pp), _) if primary => {
                let mut pp = pp.clone();
                let mut changed = self.rewrite_records(replica, &mut pp.piggyback);
                if self.fires(seq) && !pp.request.request.is_null() {
                    match self.behavior {
                        WrongVpreValue if pp.mask.has(NdClass::Vpre) => {
                            let mut v = pp.payload.get(NdClass::Vpre).unwrap().to_vec();
                            v.iter_mut().for_each(|b| *b ^= 0xa5);
                            pp.payload.set(NdClass::Vpre, v);
                            changed = true;
                            self.mark(seq);
                        }
                        WrongNdType => {
                            pp.mask = NdTypeMask::new(pp.mask.bits() ^ NdTypeMask::VPRE).unwrap();
                            changed = true;
                            self.mark(seq);
                        }
                        EquivocatePrePrepare => {
                            self.mark(seq);
                            self.equivocate(replica, &o, pp, out);
                            return;
                        }
                        _ => {}
                    }
                }
                if changed {
                    out.push(reseal(Body::PrePrepare(pp), o.dest));
                } else {
                    out.push(o);
                }
            }
            (Body::PostcPrePrepare { record }, _) if primary => {
                let mut records = vec![record.clone()];
                if self.rewrite_records(replica, &mut records) {
                    out.push(reseal(Body::PostcPrePrepare { record: records.pop().unwrap() }, o.dest));
                } else {
                    out.push(o);
                }
            }
            (Body::PpuDecision { request_digest, decision }, ForgePpuEntry) if primary && self.fires(seq) => {
                self.mark(seq);
                let mut decision = decision.clone();
                if let Some(e) = decision.entries.iter_mut().find(|e| e.proposer != replica.id()) {
                    corrupt_tag(&mut e.tag);
                }
                out.push(reseal(Body::PpuDecision { request_digest: *request_digest, decision }, o.dest));
            }
            (Body::PpuDecision { .. }, OmitPpuDecision) if primary && self.fires(seq) => self.mark(seq),
            (Body::PpuContrib { request_digest, share }, ForgePpuEntry) if !primary && self.fires(seq) => {
                self.mark(seq);
                let mut share = share.clone();
                corrupt_tag(&mut share.tag);
                out.push(reseal(Body::PpuContrib { request_digest: *request_digest, share }, o.dest));
            }
            (Body::PpuContrib { .. }, OmitPpuDecision) if !primary && self.fires(seq) => self.mark(seq),
            (Body::Prepare { request_digest, nd_digest }, WrongVpreValue) if !primary && self.fires(seq) => {
                self.mark(seq);
                out.push(reseal(Body::Prepare { request_digest: *request_digest, nd_digest: tamper(nd_digest) }, o.dest));
            }
            (Body::Commit { request_digest, nd_digest }, WrongVpreValue | WrongNdType) if !primary && self.fires(seq) => {
                self.mark(seq);
                out.push(reseal(Body::Commit { request_digest: *request_digest, nd_digest: tamper(nd_digest) }, o.dest));
            }
            (Body::Prepare { request_digest, nd_digest }, EquivocatePrePrepare) if !primary && self.fires(seq) => {
                self.mark(seq);
                for r in replica.quorum().replicas().filter(|r| *r != replica.id()) {
                    let nd = if r.0 % 2 == 0 { *nd_digest } else { tamper(nd_digest) };
                    if o.dest == Dest::Replicas || o.dest == Dest::Replica(r) {
                        out.push(reseal(Body::Prepare { request_digest: *request_digest, nd_digest: nd }, Dest::Replica(r)));
                    }
                }
            }
            (Body::PostcPrepare { target, postnd_digest }, WrongPostndValues) if !primary && self.fires(*target) => {
                self.mark(*target);
                out.push(reseal(Body::PostcPrepare { target: *target, postnd_digest: tamper(postnd_digest) }, o.dest));
            }
            (Body::PostcCommit { target, postnd_digest }, WrongPostndValues) if !primary && self.fires(*target) => {
                self.mark(*target);
                out.push(reseal(Body::PostcCommit { target: *target, postnd_digest: tamper(postnd_digest) }, o.dest));
            }
            (Body::Reply { client, request_id, result, result_digest }, WrongReplyDigest) if !primary && self.fires(seq) => {
                self.mark(seq);
                let body = Body::Reply { client: *client, request_id: *request_id, result: result.clone(), result_digest: tamper(result_digest) };
                out.push(reseal(body, o.dest));
            }
            (Body::Reply { client, request_id, result, .. }, CorruptReply) if self.fires(seq) => {
                self.mark(seq);
                let mut result = result.clone();
                if result.is_empty() {
                    result.push(0);
                }
                result.iter_mut().for_each(|b| *b ^= 0x5a);
                let body = Body::Reply { client: *client, request_id: *request_id, result_digest: digest(&result), result };
                out.push(reseal(body, o.dest));
            }
            _ => out.push(o),
        }
    }

    /// Primary-side tampering with post-determined records.
    fn rewrite_records(&mut self, replica: &Replica, records: &mut [PostndRecord]) -> bool {
        let mut changed = false;
        for rec in records.iter_mut() {
            if !self.fires(rec.seq) {
                continue;
            }
            let attack = match self.behavior {
                Behavior::WrongPostndValues => PostAttack::Corrupt,
                Behavior::DeadlockOrder => PostAttack::Deadlock,
                Behavior::CrashOrder => PostAttack::Crash,
                Behavior::WrongReplyDigest => {
                    rec.reply_digest = tamper(&rec.reply_digest);
                    changed = true;
                    self.mark(rec.seq);
                    continue;
                }
                _ => continue,
            };
            let Some(request) = replica.request_at(rec.seq) else { continue };
            // Seeded per seq so retransmissions carry the same forgery.
            let mut rng = ChaCha12Rng::seed_from_u64(self.seed ^ rec.seq.0.rotate_left(32));
            if let Some(values) = replica.app().forge_post_values(request, &rec.values, attack, &mut rng) {
                rec.values = values;
                changed = true;
                self.mark(rec.seq);
            }
        }
        changed
    }

    /// Sends the real pre-prepare to the lower half of the backups and a
    /// null request at the same seq to the rest.
    fn equivocate(&self, replica: &Replica, o: &Outgoing, pp: PrePrepare, out: &mut Vec<Outgoing>) {
        let h = o.message.header;
        let backups: Vec<ReplicaId> = replica.quorum().replicas().filter(|r| *r != replica.id()).collect();
        let split = backups.len().div_ceil(2);
        let alt = PrePrepare {
            request: SignedRequest::null(h.seq),
            mask: NdTypeMask::DETERMINISTIC,
            payload: Default::default(),
            piggyback: pp.piggyback.clone(),
        };
        for (i, r) in backups.into_iter().enumerate() {
            if o.dest != Dest::Replicas && o.dest != Dest::Replica(r) {
                continue;
            }
            let body = if i < split { Body::PrePrepare(pp.clone()) } else { Body::PrePrepare(alt.clone()) };
            out.push(replica.seal(ProtocolMessage { header: h, body }, Dest::Replica(r)));
        }
    }
}
