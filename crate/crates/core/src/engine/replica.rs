use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::app::{Application, CallContext, CheckFailure, ExecInput, PostInput, ReplayHazard};
use crate::crypto::{digest, digest_parts, AuthMode, Digest, KeyStore, Receivers};
use crate::ids::{ClientId, Endpoint, QuorumConfig, ReplicaId, SeqNum, ViewNum};
use crate::mask::{NdClass, NdTypeMask};
use crate::nd::ppu::{make_share, verify_share};
use crate::nd::{guarded_execute, plan_phases, verify_decision, PostndLog, PpuState, WatchdogFailure};
use crate::wire::{
    Body, DecisionSet, Encode, Envelope, Header, NdPayload, PostndRecord, PrePrepare, ProposerShare, ProtocolMessage, Request,
    ShareValue, SignedRequest, Writer,
};

use super::slot::{OrderingSlot, Phase};
use super::trace::TraceRecord;
use super::{nd_data_digest, Dest, Effects, Outgoing, ReplicaConfig, SuspicionEvent, SuspicionReason, Timer};

const PRE_BITS: u8 = NdTypeMask::VPRE | NdTypeMask::NPRE;
const POST_BITS: u8 = NdTypeMask::VPOST | NdTypeMask::NPOST;
/// Settled slots this far behind the last delivery are discarded.
const KEEP_DELIVERED: u64 = 32;

fn bits(m: NdTypeMask, keep: u8) -> NdTypeMask {
    NdTypeMask::new(m.bits() & keep).expect("subset of a valid mask")
}

/// Counters a run reports about post-determined value dissemination.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ReplicaStats {
    /// Entries carried by a client request's pre-prepare.
    pub piggybacked: u64,
    /// Entries carried by a null request's pre-prepare.
    pub null_carried: u64,
    /// Entries agreed in standalone post-commit rounds.
    pub standalone: u64,
    pub null_requests: u64,
    pub delivered: u64,
}

type Reject = (SeqNum, SuspicionReason, String);

enum PiggybackCheck {
    Ok,
    Defer,
    Reject(Reject),
}

/// One replica's protocol state within a single view.
pub struct Replica {
    id: ReplicaId,
    quorum: QuorumConfig,
    cfg: ReplicaConfig,
    keys: Arc<KeyStore>,
    app: Box<dyn Application>,
    view: ViewNum,
    epoch: u64,
    nd_seed: u64,
    /// Last seq assigned (primary).
    next_seq: SeqNum,
    slots: BTreeMap<SeqNum, OrderingSlot>,
    last_delivered: SeqNum,
    halted: bool,
    ordered: BTreeMap<(ClientId, u64), SeqNum>,
    replies: BTreeMap<ClientId, (u64, Outgoing)>,
    postnd: PostndLog,
    deferred: BTreeMap<SeqNum, PrePrepare>,
    flush_armed: bool,
    tick_armed: bool,
    suspected: BTreeSet<(SeqNum, SuspicionReason)>,
    suspicions: Vec<SuspicionEvent>,
    stats: ReplicaStats,
    now: u64,
    fx: Effects,
}

impl std::fmt::Debug for Replica {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Replica").field("id", &self.id).field("last_delivered", &self.last_delivered).finish()
    }
}

impl Replica {
    pub fn new(id: ReplicaId, cfg: ReplicaConfig, keys: Arc<KeyStore>, app: Box<dyn Application>, nd_seed: u64) -> Self {
        let quorum = keys.quorum();
        assert!(quorum.contains(id), "replica {id} outside the group");
        Replica {
            id,
            quorum,
            cfg,
            keys,
            app,
            view: ViewNum(0),
            epoch: 0,
            nd_seed,
            next_seq: SeqNum::NONE,
            slots: BTreeMap::new(),
            last_delivered: SeqNum::NONE,
            halted: false,
            ordered: BTreeMap::new(),
            replies: BTreeMap::new(),
            postnd: PostndLog::new(),
            deferred: BTreeMap::new(),
            flush_armed: false,
            tick_armed: false,
            suspected: BTreeSet::new(),
            suspicions: Vec::new(),
            stats: ReplicaStats::default(),
            now: 0,
            fx: Effects::default(),
        }
    }

    pub fn id(&self) -> ReplicaId {
        self.id
    }

    pub fn quorum(&self) -> QuorumConfig {
        self.quorum
    }

    pub fn config(&self) -> &ReplicaConfig {
        &self.cfg
    }

    pub fn primary(&self) -> ReplicaId {
        self.quorum.primary(self.view)
    }

    pub fn is_primary(&self) -> bool {
        self.primary() == self.id
    }

    pub fn app(&self) -> &dyn Application {
        self.app.as_ref()
    }

    pub fn keys(&self) -> &KeyStore {
        &self.keys
    }

    pub fn last_delivered(&self) -> SeqNum {
        self.last_delivered
    }

    pub fn suspicions(&self) -> &[SuspicionEvent] {
        &self.suspicions
    }

    pub fn stats(&self) -> ReplicaStats {
        self.stats
    }

    pub fn postnd_log(&self) -> &PostndLog {
        &self.postnd
    }

    pub fn state_digest(&self) -> Digest {
        self.app.state_digest()
    }

    /// Phase of `seq`, if this replica has a slot for it.
    pub fn phase(&self, seq: SeqNum) -> Option<Phase> {
        self.slots.get(&seq).map(|s| s.phase)
    }

    pub fn request_at(&self, seq: SeqNum) -> Option<&Request> {
        self.slots.get(&seq)?.pp.as_ref().map(|p| &p.request.request)
    }

    pub fn mask_at(&self, seq: SeqNum) -> Option<NdTypeMask> {
        self.slots.get(&seq).filter(|s| s.pp.is_some()).map(|s| s.mask)
    }

    /// Encodes and authenticates `message` as coming from this replica.
    pub fn seal(&self, message: ProtocolMessage, dest: Dest) -> Outgoing {
        let receivers = match dest {
            Dest::Replicas => Receivers::Group,
            Dest::Replica(r) => Receivers::Single(Endpoint::Replica(r)),
            Dest::Client(c) => Receivers::Single(Endpoint::Client(c)),
        };
        let mut bytes = message.to_bytes();
        let tag = self
            .keys
            .authenticate(Endpoint::Replica(self.id), &bytes, self.cfg.msg_auth, receivers)
            .expect("replica key material is configured");
        bytes.extend_from_slice(&tag.to_bytes());
        Outgoing { dest, message: Arc::new(message), bytes: bytes.into() }
    }

    fn header(&self, seq: SeqNum) -> Header {
        Header { view: self.view, seq, sender: Endpoint::Replica(self.id), epoch: self.epoch }
    }

    fn send(&mut self, dest: Dest, seq: SeqNum, body: Body) -> Outgoing {
        let out = self.seal(ProtocolMessage { header: self.header(seq), body }, dest);
        if self.cfg.msg_auth == AuthMode::Signature {
            self.fx.work.signs += 1;
        }
        self.fx.sends.push(out.clone());
        out
    }

    /// Sends and remembers the message for retransmission.
    fn send_for_slot(&mut self, dest: Dest, seq: SeqNum, body: Body) {
        let out = self.send(dest, seq, body);
        if let Some(slot) = self.slots.get_mut(&seq) {
            slot.sent.push(out);
        }
        self.arm_tick();
    }

    fn arm_tick(&mut self) {
        if !self.tick_armed {
            self.tick_armed = true;
            self.fx.timers.push((self.now + self.cfg.retransmit_us, Timer::Tick));
        }
    }

    fn take_effects(&mut self) -> Effects {
        std::mem::take(&mut self.fx)
    }

    fn ctx(&self, seq: SeqNum, request_digest: Digest) -> CallContext {
        CallContext {
            replica: self.id,
            view: self.view,
            seq,
            request_digest,
            local_time_us: (self.now as i64 + self.cfg.clock_offset_us).max(0) as u64,
            quorum: self.quorum,
        }
    }

    /// Local randomness for a request, independent of ordering.
    fn nd_rng(&self, request_digest: &Digest, purpose: u8) -> ChaCha12Rng {
        let seed = digest_parts([
            b"nd-rng".as_slice(),
            &self.nd_seed.to_le_bytes(),
            &self.id.0.to_le_bytes(),
            &request_digest.0,
            &[purpose],
        ]);
        ChaCha12Rng::from_seed(seed.0)
    }

    fn suspect(&mut self, seq: SeqNum, reason: SuspicionReason, detail: impl Into<String>) {
        if self.suspected.insert((seq, reason)) {
            let detail = detail.into();
            self.fx.trace.push(TraceRecord::Suspect { t: self.now, replica: self.id, seq, reason, detail: detail.clone() });
            self.suspicions.push(SuspicionEvent { replica: self.id, seq, reason, detail });
        }
    }

    fn set_phase(&mut self, seq: SeqNum, phase: Phase) {
        if let Some(slot) = self.slots.get_mut(&seq) {
            slot.phase = phase;
        }
        if self.cfg.trace_phases {
            self.fx.trace.push(TraceRecord::Phase { t: self.now, replica: self.id, view: self.view, seq, phase });
        }
    }

    /// Existing slot, or a new one if `seq` is inside the window.
    fn slot_for(&mut self, seq: SeqNum) -> Option<&mut OrderingSlot> {
        if seq.is_none() {
            return None;
        }
        if !self.slots.contains_key(&seq) {
            if seq <= self.last_delivered || seq.0 > self.last_delivered.0 + self.cfg.horizon {
                return None;
            }
            self.slots.insert(seq, OrderingSlot::new(seq));
        }
        self.slots.get_mut(&seq)
    }

    /// Resends this slot's messages to a peer that is retransmitting.
    fn help(&mut self, seq: SeqNum, peer: ReplicaId) {
        let now = self.now;
        let period = self.cfg.retransmit_us;
        let Some(slot) = self.slots.get_mut(&seq) else { return };
        if slot.helped.get(&peer).is_some_and(|&t| now < t + period) {
            return;
        }
        slot.helped.insert(peer, now);
        let resend: Vec<Outgoing> = slot
            .sent
            .iter()
            .map(|o| Outgoing { dest: Dest::Replica(peer), message: o.message.clone(), bytes: o.bytes.clone() })
            .collect();
        self.fx.sends.extend(resend);
    }

    // ---- inputs -------------------------------------------------------------

    pub fn handle_message(&mut self, now: u64, from: Endpoint, bytes: &[u8]) -> Effects {
        self.now = now;
        if let Ok((env, span)) = Envelope::decode_with_span(bytes) {
            let h = env.message.header;
            let authentic = h.sender == from
                && h.view == self.view
                && h.epoch == self.epoch
                && self.keys.verify(&env.auth, from, &bytes[..span], Endpoint::Replica(self.id));
            if authentic {
                if env.auth.mode() == AuthMode::Signature {
                    self.fx.work.verifies += 1;
                }
                self.dispatch(h, env.message.body);
                self.try_deliver();
            }
        }
        self.take_effects()
    }

    pub fn handle_timer(&mut self, now: u64, timer: Timer) -> Effects {
        self.now = now;
        match timer {
            Timer::Tick => {
                self.tick_armed = false;
                self.retransmit();
            }
            Timer::Flush => {
                self.flush_armed = false;
                if self.is_primary() && self.postnd.pending_count() > 0 {
                    self.stats.null_requests += 1;
                    self.order(SignedRequest::null(self.next_seq.next()));
                }
            }
            Timer::NdWait(seq) => {
                let waiting = self.slots.get(&seq).is_some_and(|s| {
                    !s.failed && s.phase < Phase::Delivered && s.ppu.as_ref().is_none_or(|p| p.resolved.is_none())
                });
                if waiting {
                    self.suspect(seq, SuspicionReason::NdAgreementFailed, "no NPRE decision before the view timer");
                }
            }
            Timer::PostWait(seq) => {
                let waiting = self.slots.get(&seq).is_some_and(|s| !s.failed && s.phase < Phase::Delivered && !s.post.agreed);
                if waiting {
                    self.suspect(seq, SuspicionReason::NdAgreementFailed, "no post-commit agreement before the view timer");
                }
            }
            Timer::PpuGrace(seq) => {
                if let Some(s) = self.slots.get_mut(&seq) {
                    s.grace_armed = false;
                }
                self.decide_if_ready(seq, true);
            }
        }
        self.try_deliver();
        self.take_effects()
    }

    fn dispatch(&mut self, h: Header, body: Body) {
        let sender = match h.sender {
            Endpoint::Replica(r) => Some(r),
            Endpoint::Client(_) => None,
        };
        match (body, sender) {
            (Body::Request(sr), _) => self.on_request(h.sender, sr),
            (Body::PrePrepare(pp), Some(r)) if r == self.primary() && r != self.id => self.on_pre_prepare(h.seq, pp),
            (Body::PpuContrib { request_digest, share }, Some(r)) if r != self.id && share.proposer == r => {
                self.on_contribution(h.seq, request_digest, share)
            }
            (Body::PpuDecision { request_digest, decision }, Some(r)) if r == self.primary() && r != self.id => {
                self.on_decision(h.seq, request_digest, decision)
            }
            (Body::Prepare { request_digest, nd_digest }, Some(r)) if r != self.id => {
                self.on_vote(r, h.seq, (request_digest, nd_digest), false)
            }
            (Body::Commit { request_digest, nd_digest }, Some(r)) if r != self.id => {
                self.on_vote(r, h.seq, (request_digest, nd_digest), true)
            }
            (Body::PostcPrePrepare { record }, Some(r)) if r == self.primary() && r != self.id => self.on_postc_pre_prepare(h.seq, record),
            (Body::PostcPrepare { target, postnd_digest }, Some(r)) if r != self.id => self.on_postc_vote(r, target, postnd_digest, false),
            (Body::PostcCommit { target, postnd_digest }, Some(r)) if r != self.id => self.on_postc_vote(r, target, postnd_digest, true),
            (Body::FetchNd { request_digest, missing }, Some(r)) if r != self.id => self.on_fetch(r, h.seq, request_digest, missing),
            (Body::NdValues { request_digest, shares }, Some(r)) if r != self.id => self.on_nd_values(h.seq, request_digest, shares),
            _ => {}
        }
    }

    // ---- requests and pre-prepares -------------------------------------------

    fn on_request(&mut self, from: Endpoint, sr: SignedRequest) {
        let req = &sr.request;
        if req.is_null() {
            return;
        }
        if from != Endpoint::Client(req.client) && !matches!(from, Endpoint::Replica(_)) {
            return;
        }
        if !self.keys.verify(&sr.auth, Endpoint::Client(req.client), &req.to_bytes(), Endpoint::Replica(self.id)) {
            return;
        }
        if let Some((rid, reply)) = self.replies.get(&req.client) {
            if *rid == req.request_id {
                let again = Outgoing { dest: reply.dest, message: reply.message.clone(), bytes: reply.bytes.clone() };
                self.fx.sends.push(again);
                return;
            }
            if *rid > req.request_id {
                return;
            }
        }
        if let Some(&seq) = self.ordered.get(&(req.client, req.request_id)) {
            // The client is still waiting: give the slot a fresh budget.
            if let Some(slot) = self.slots.get_mut(&seq) {
                if slot.retransmits > 0 {
                    slot.retransmits = 0;
                    self.arm_tick();
                }
            }
            return;
        }
        if self.is_primary() {
            self.order(sr);
        } else if matches!(from, Endpoint::Client(_)) {
            let primary = self.primary();
            self.send(Dest::Replica(primary), SeqNum::NONE, Body::Request(sr));
        }
    }

    /// Primary: assign the next seq and multicast the pre-prepare.
    fn order(&mut self, sr: SignedRequest) {
        let seq = self.next_seq.next();
        let rd = sr.request.digest();
        let (mask, payload) = if sr.request.is_null() {
            (NdTypeMask::DETERMINISTIC, NdPayload::new())
        } else {
            let ctx = self.ctx(seq, rd);
            let mut rng = self.nd_rng(&rd, 0);
            match self.app.propose_value(&ctx, &sr.request, &mut rng) {
                Ok((m, p)) => (m, p.restrict(bits(m, PRE_BITS))),
                Err(e) => {
                    let result = format!("ERR:app:{}", e.0).into_bytes();
                    self.reply(SeqNum::NONE, &sr.request, result);
                    return;
                }
            }
        };
        self.next_seq = seq;
        let piggyback = if self.cfg.piggyback { self.postnd.take_pending() } else { Vec::new() };
        if sr.request.is_null() {
            self.stats.null_carried += piggyback.len() as u64;
        } else {
            self.stats.piggybacked += piggyback.len() as u64;
        }
        let pp = PrePrepare { request: sr, mask, payload, piggyback };
        self.slot_for(seq).expect("primary assigns inside its window");
        self.send_for_slot(Dest::Replicas, seq, Body::PrePrepare(pp.clone()));
        self.install_pre_prepare(seq, pp, rd);
        let plan = plan_phases(mask);
        if plan.needs_ppu_phase {
            let bytes = self.slots[&seq].pp.as_ref().unwrap().payload.get(NdClass::Npre).unwrap_or(&[]).to_vec();
            let share = self.own_share(seq, rd, bytes);
            self.slots.get_mut(&seq).unwrap().ppu.as_mut().unwrap().add_share(share);
            self.decide_if_ready(seq, false);
        } else {
            self.prepare(seq);
        }
    }

    fn own_share(&mut self, seq: SeqNum, rd: Digest, bytes: Vec<u8>) -> ProposerShare {
        if self.cfg.share_auth == AuthMode::Signature {
            self.fx.work.signs += 1;
        }
        make_share(&self.keys, self.id, self.cfg.share_auth, self.view, seq, &rd, bytes).expect("replica key material is configured")
    }

    fn install_pre_prepare(&mut self, seq: SeqNum, pp: PrePrepare, rd: Digest) {
        let req = &pp.request.request;
        self.ordered.insert((req.client, req.request_id), seq);
        let carried: Vec<PostndRecord> = pp.piggyback.clone();
        let plan = plan_phases(pp.mask);
        let slot = self.slots.get_mut(&seq).expect("slot exists");
        slot.request_digest = Some(rd);
        slot.mask = pp.mask;
        slot.plan = plan;
        if plan.needs_ppu_phase && slot.ppu.as_ref().is_none_or(|p| p.request_digest != rd) {
            slot.ppu = Some(PpuState::new(rd));
        }
        slot.carried = carried.iter().map(|r| r.seq).collect();
        slot.pp = Some(pp);
        for rec in carried {
            if let Some(target) = self.slots.get_mut(&rec.seq) {
                target.post.digest = Some(rec.digest());
                target.post.record = Some(rec);
                target.post.carrier = Some(seq);
            }
        }
        self.set_phase(seq, Phase::PrePrepared);
    }

    fn on_pre_prepare(&mut self, seq: SeqNum, pp: PrePrepare) {
        let primary = self.primary();
        if self.slot_for(seq).is_none() {
            return;
        }
        if let Some(existing) = self.slots[&seq].pp.as_ref().or(self.deferred.get(&seq)) {
            if *existing == pp {
                self.help(seq, primary);
            } else {
                self.suspect(seq, SuspicionReason::BadOrder, "conflicting pre-prepare for one seq");
            }
            return;
        }
        let rd = pp.request.request.digest();
        if let Err((at, reason, detail)) = self.validate_pre_prepare(seq, &pp, &rd) {
            self.suspect(at, reason, detail);
            return;
        }
        match self.check_piggyback(seq, &pp) {
            PiggybackCheck::Ok => {}
            PiggybackCheck::Defer => {
                self.deferred.insert(seq, pp);
                return;
            }
            PiggybackCheck::Reject((at, reason, detail)) => {
                self.suspect(at, reason, detail);
                return;
            }
        }
        self.accept_pre_prepare(seq, pp, rd);
        self.retry_deferred();
    }

    fn retry_deferred(&mut self) {
        while let Some((&seq, _)) = self.deferred.iter().find(|(s, pp)| !matches!(self.check_piggyback(**s, pp), PiggybackCheck::Defer)) {
            let pp = self.deferred.remove(&seq).unwrap();
            match self.check_piggyback(seq, &pp) {
                PiggybackCheck::Reject((at, reason, detail)) => self.suspect(at, reason, detail),
                _ => {
                    let rd = pp.request.request.digest();
                    self.accept_pre_prepare(seq, pp, rd);
                }
            }
        }
    }

    fn validate_pre_prepare(&self, seq: SeqNum, pp: &PrePrepare, rd: &Digest) -> Result<(), Reject> {
        let req = &pp.request.request;
        let bad = |d: &str| Err((seq, SuspicionReason::BadOrder, d.to_string()));
        if req.is_null() {
            if !req.op.is_empty() || req.request_id != seq.0 || !pp.mask.is_deterministic() || !pp.payload.is_empty() {
                return bad("malformed null request");
            }
            return Ok(());
        }
        if !self.keys.verify(&pp.request.auth, Endpoint::Client(req.client), &req.to_bytes(), Endpoint::Replica(self.id)) {
            return bad("client request fails authentication");
        }
        if self.ordered.get(&(req.client, req.request_id)).is_some_and(|&s| s != seq) {
            return bad("request already ordered at another seq");
        }
        let ctx = self.ctx(seq, *rd);
        if let Err(e) = self.app.check_value(&ctx, req, pp.mask, &pp.payload) {
            return Err(match e {
                CheckFailure::TypeMismatch { .. } => (seq, SuspicionReason::NdTypeMismatch, e.to_string()),
                CheckFailure::ValueRejected(_) => (seq, SuspicionReason::NdValueRejected, e.to_string()),
            });
        }
        let allowed = pp.mask.bits() & PRE_BITS;
        if pp.payload.class_mask().bits() & !allowed != 0 {
            return Err((seq, SuspicionReason::NdValueRejected, "values for classes outside the mask".into()));
        }
        if pp.mask.has(NdClass::Npre) && pp.payload.get(NdClass::Npre).is_none() {
            return Err((seq, SuspicionReason::NdValueRejected, "NPRE request without the primary's share".into()));
        }
        Ok(())
    }

    fn check_piggyback(&self, seq: SeqNum, pp: &PrePrepare) -> PiggybackCheck {
        for rec in &pp.piggyback {
            if rec.seq.is_none() || rec.seq >= seq {
                return PiggybackCheck::Reject((seq, SuspicionReason::BadOrder, "piggybacked record for a later seq".into()));
            }
            match self.slots.get(&rec.seq) {
                Some(t) if t.pp.is_some() => {
                    if let Err(r) = self.check_post_record(rec) {
                        return PiggybackCheck::Reject(r);
                    }
                }
                _ if rec.seq > self.last_delivered => return PiggybackCheck::Defer,
                _ => return PiggybackCheck::Reject((seq, SuspicionReason::BadOrder, "record for a delivered seq".into())),
            }
        }
        PiggybackCheck::Ok
    }

    /// Validates a proposed post-determined record against its target
    /// slot, which must hold a pre-prepare.
    fn check_post_record(&self, rec: &PostndRecord) -> Result<(), Reject> {
        let t = &self.slots[&rec.seq];
        let at = rec.seq;
        if !t.plan.needs_post_commit {
            return Err((at, SuspicionReason::BadOrder, "post-determined record for a request without post classes".into()));
        }
        if let Some(d) = t.post.digest {
            if d != rec.digest() {
                return Err((at, SuspicionReason::BadOrder, "conflicting post-determined records".into()));
            }
        }
        if rec.values.class_mask() != bits(t.mask, POST_BITS) {
            return Err((at, SuspicionReason::NdValueRejected, "post-determined classes differ from the mask".into()));
        }
        if t.plan.verify_post_values {
            let req = &t.pp.as_ref().unwrap().request.request;
            let ctx = self.ctx(at, t.request_digest.unwrap());
            if let Err(e) = self.app.check_post_value(&ctx, req, &rec.values) {
                return Err((at, SuspicionReason::NdValueRejected, e.to_string()));
            }
        }
        Ok(())
    }

    /// Backup: log an accepted pre-prepare and take the next step.
    fn accept_pre_prepare(&mut self, seq: SeqNum, pp: PrePrepare, rd: Digest) {
        let request = pp.request.request.clone();
        self.install_pre_prepare(seq, pp, rd);
        if self.slots[&seq].plan.needs_ppu_phase {
            self.contribute(seq, rd, &request);
            let early = self.slots.get_mut(&seq).unwrap().early_decision.take();
            if let Some(d) = early {
                self.on_decision(seq, rd, d);
            }
        } else {
            self.prepare(seq);
        }
        let early = self.slots.get_mut(&seq).unwrap().post.early.take();
        if let Some(rec) = early {
            self.on_postc_pre_prepare(seq, rec);
        }
    }

    // ---- NPRE pre-prepare-update --------------------------------------------

    fn contribute(&mut self, seq: SeqNum, rd: Digest, request: &Request) {
        let ctx = self.ctx(seq, rd);
        let mut rng = self.nd_rng(&rd, 0);
        let bytes = match self.app.propose_value(&ctx, request, &mut rng) {
            Ok((_, p)) => p.get(NdClass::Npre).map(<[u8]>::to_vec),
            Err(_) => None,
        };
        let timeout = self.now + self.cfg.view_timer_us;
        self.fx.timers.push((timeout, Timer::NdWait(seq)));
        let Some(bytes) = bytes else { return };
        let share = self.own_share(seq, rd, bytes);
        self.slots.get_mut(&seq).unwrap().ppu.as_mut().unwrap().add_share(share.clone());
        let dest = if self.cfg.digest_dissemination { Dest::Replicas } else { Dest::Replica(self.primary()) };
        self.send_for_slot(dest, seq, Body::PpuContrib { request_digest: rd, share });
    }

    fn on_contribution(&mut self, seq: SeqNum, rd: Digest, share: ProposerShare) {
        let primary = self.is_primary();
        let Some(slot) = self.slot_for(seq) else { return };
        if slot.request_digest.is_some_and(|d| d != rd) {
            return;
        }
        if !matches!(share.value, ShareValue::Value(_)) {
            return;
        }
        // Backups match shares against authenticated decision digests
        // later; only the primary, which builds decisions, checks tags.
        if primary {
            if self.cfg.share_auth == AuthMode::Signature {
                self.fx.work.verifies += 1;
            }
            if !verify_share(&self.keys, &share, self.view, seq, &rd, self.id) {
                return;
            }
        }
        let proposer = share.proposer;
        let slot = self.slots.get_mut(&seq).unwrap();
        let ppu = slot.ppu.get_or_insert_with(|| PpuState::new(rd));
        if ppu.request_digest != rd {
            return;
        }
        if !ppu.add_share(share) {
            self.help(seq, proposer);
            return;
        }
        if primary {
            self.decide_if_ready(seq, false);
        } else if ppu.decision.is_some() && ppu.resolved.is_none() {
            ppu.resolve();
        }
    }

    fn decide_if_ready(&mut self, seq: SeqNum, grace_over: bool) {
        if !self.is_primary() {
            return;
        }
        let quorum = self.quorum;
        let me = self.id;
        let Some(slot) = self.slots.get_mut(&seq) else { return };
        let Some(ppu) = slot.ppu.as_mut() else { return };
        if ppu.decision.is_some() || slot.pp.is_none() {
            return;
        }
        let enough = ppu.backup_count(me) >= quorum.certificate_size();
        if !enough {
            return;
        }
        if !(grace_over || ppu.settled(quorum, me)) {
            if !slot.grace_armed {
                slot.grace_armed = true;
                self.fx.timers.push((self.now + self.cfg.ppu_grace_us, Timer::PpuGrace(seq)));
            }
            return;
        }
        let decision = ppu.decide(quorum, me, self.cfg.digest_dissemination).expect("enough shares");
        ppu.decision = Some(decision.clone());
        ppu.resolve();
        let rd = ppu.request_digest;
        self.fx.trace.push(TraceRecord::PpuDecided {
            t: self.now,
            replica: me,
            seq,
            proposers: decision.proposers().collect(),
            decision: decision.digest(),
        });
        self.send_for_slot(Dest::Replicas, seq, Body::PpuDecision { request_digest: rd, decision });
        self.prepare(seq);
    }

    fn on_decision(&mut self, seq: SeqNum, rd: Digest, decision: DecisionSet) {
        let primary = self.primary();
        let Some(slot) = self.slot_for(seq) else { return };
        if slot.pp.is_none() {
            slot.early_decision.get_or_insert(decision);
            return;
        }
        if !slot.plan.needs_ppu_phase || slot.request_digest != Some(rd) {
            self.suspect(seq, SuspicionReason::BadOrder, "decision for a different request");
            return;
        }
        let ppu = slot.ppu.as_ref().expect("NPRE slot has ppu state");
        if let Some(d) = &ppu.decision {
            if *d == decision {
                self.help(seq, primary);
            } else {
                self.suspect(seq, SuspicionReason::BadOrder, "conflicting decisions");
            }
            return;
        }
        let own_bytes = slot.pp.as_ref().unwrap().payload.get(NdClass::Npre).unwrap_or(&[]).to_vec();
        if self.cfg.share_auth == AuthMode::Signature {
            self.fx.work.verifies += decision.entries.len() as u32;
        }
        if let Err(e) = verify_decision(&self.keys, &decision, primary, self.view, seq, &rd, &digest(&own_bytes), self.id) {
            self.suspect(seq, SuspicionReason::NdValueRejected, e);
            return;
        }
        let primary_entry = decision.entries.iter().find(|e| e.proposer == primary).unwrap();
        let primary_share = ProposerShare { proposer: primary, value: ShareValue::Value(own_bytes), tag: primary_entry.tag.clone() };
        self.fx.trace.push(TraceRecord::PpuDecided {
            t: self.now,
            replica: self.id,
            seq,
            proposers: decision.proposers().collect(),
            decision: decision.digest(),
        });
        let ppu = self.slots.get_mut(&seq).unwrap().ppu.as_mut().unwrap();
        ppu.shares.insert(primary, primary_share);
        ppu.decision = Some(decision);
        if !ppu.resolve() {
            let missing: Vec<ReplicaId> = ppu.missing.iter().copied().collect();
            self.send(Dest::Replica(primary), seq, Body::FetchNd { request_digest: rd, missing });
        }
        self.prepare(seq);
    }

    fn on_fetch(&mut self, from: ReplicaId, seq: SeqNum, rd: Digest, missing: Vec<ReplicaId>) {
        let Some(ppu) = self.slots.get(&seq).and_then(|s| s.ppu.as_ref()) else { return };
        if ppu.request_digest != rd {
            return;
        }
        let shares: Vec<ProposerShare> = missing.iter().filter_map(|r| ppu.shares.get(r).cloned()).collect();
        if !shares.is_empty() {
            self.send(Dest::Replica(from), seq, Body::NdValues { request_digest: rd, shares });
        }
    }

    fn on_nd_values(&mut self, seq: SeqNum, rd: Digest, shares: Vec<ProposerShare>) {
        let Some(ppu) = self.slots.get(&seq).and_then(|s| s.ppu.as_ref()) else { return };
        let Some(decision) = ppu.decision.as_ref() else { return };
        if ppu.request_digest != rd || ppu.resolved.is_some() {
            return;
        }
        let mut accepted = Vec::new();
        for share in shares {
            let wanted = decision.entries.iter().find(|e| e.proposer == share.proposer).map(|e| e.value.share_digest());
            if wanted != Some(share.value.share_digest()) || !matches!(share.value, ShareValue::Value(_)) {
                continue;
            }
            if self.cfg.share_auth == AuthMode::Signature {
                self.fx.work.verifies += 1;
            }
            if verify_share(&self.keys, &share, self.view, seq, &rd, self.id) {
                accepted.push(share);
            }
        }
        let ppu = self.slots.get_mut(&seq).unwrap().ppu.as_mut().unwrap();
        for share in accepted {
            ppu.shares.insert(share.proposer, share);
        }
        ppu.resolve();
    }

    // ---- prepare and commit ---------------------------------------------------

    /// Fixes the slot's nd digest and multicasts PREPARE.
    fn prepare(&mut self, seq: SeqNum) {
        let slot = self.slots.get_mut(&seq).unwrap();
        let pp = slot.pp.as_ref().unwrap();
        let decision = slot.ppu.as_ref().and_then(|p| p.decision.as_ref());
        let nd = nd_binding(pp, decision);
        slot.nd_digest = Some(nd);
        let rd = slot.request_digest.unwrap();
        self.send_for_slot(Dest::Replicas, seq, Body::Prepare { request_digest: rd, nd_digest: nd });
        self.check_prepared(seq);
    }

    fn on_vote(&mut self, from: ReplicaId, seq: SeqNum, key: (Digest, Digest), commit: bool) {
        let Some(slot) = self.slot_for(seq) else { return };
        let expected = slot.key();
        let votes = if commit { &mut slot.commits } else { &mut slot.prepares };
        // A vote matching the slot supersedes a mismatched one; each sender
        // still counts at most once.
        if let Some(old) = votes.get(&from) {
            if *old == key || expected != Some(key) {
                self.help(seq, from);
                return;
            }
        }
        votes.insert(from, key);
        if commit {
            self.check_committed(seq);
        } else {
            self.check_prepared(seq);
        }
    }

    fn check_prepared(&mut self, seq: SeqNum) {
        let need = self.quorum.certificate_size();
        let slot = &self.slots[&seq];
        let Some(key) = slot.key() else { return };
        if slot.phase != Phase::PrePrepared || OrderingSlot::matching(&slot.prepares, &key) < need {
            return;
        }
        self.set_phase(seq, Phase::Prepared);
        self.send_for_slot(Dest::Replicas, seq, Body::Commit { request_digest: key.0, nd_digest: key.1 });
        self.check_committed(seq);
    }

    fn check_committed(&mut self, seq: SeqNum) {
        let need = self.quorum.certificate_size();
        let slot = &self.slots[&seq];
        let Some(key) = slot.key() else { return };
        if slot.phase != Phase::Prepared || OrderingSlot::matching(&slot.commits, &key) < need {
            return;
        }
        self.set_phase(seq, Phase::Committed);
        let carried = self.slots[&seq].carried.clone();
        for target in carried {
            self.post_agreed(target);
        }
    }

    // ---- post-commit agreement ------------------------------------------------

    fn post_agreed(&mut self, target: SeqNum) {
        let Some(slot) = self.slots.get_mut(&target) else { return };
        if slot.post.agreed || slot.post.record.is_none() {
            return;
        }
        slot.post.agreed = true;
        let record = slot.post.digest.unwrap();
        self.postnd.mark_agreed(target);
        self.fx.trace.push(TraceRecord::PostndAgreed { t: self.now, replica: self.id, seq: target, record });
    }

    fn on_postc_pre_prepare(&mut self, target: SeqNum, record: PostndRecord) {
        let primary = self.primary();
        if record.seq != target {
            self.suspect(target, SuspicionReason::BadOrder, "post-commit proposal for a different seq");
            return;
        }
        let Some(slot) = self.slot_for(target) else { return };
        if slot.pp.is_none() {
            slot.post.early.get_or_insert(record);
            return;
        }
        if slot.post.digest == Some(record.digest()) {
            if slot.post.sent_prepare {
                self.help(target, primary);
                return;
            }
        } else if let Err((at, reason, detail)) = self.check_post_record(&record) {
            self.suspect(at, reason, detail);
            return;
        }
        let d = record.digest();
        let slot = self.slots.get_mut(&target).unwrap();
        slot.post.record = Some(record);
        slot.post.digest = Some(d);
        slot.post.sent_prepare = true;
        self.send_for_slot(Dest::Replicas, target, Body::PostcPrepare { target, postnd_digest: d });
        self.check_post_prepared(target);
    }

    fn on_postc_vote(&mut self, from: ReplicaId, target: SeqNum, d: Digest, commit: bool) {
        let Some(slot) = self.slot_for(target) else { return };
        let votes = if commit { &mut slot.post.commits } else { &mut slot.post.prepares };
        if votes.contains_key(&from) {
            self.help(target, from);
            return;
        }
        votes.insert(from, d);
        self.check_post_prepared(target);
    }

    fn check_post_prepared(&mut self, target: SeqNum) {
        let need = self.quorum.certificate_size();
        let slot = &self.slots[&target];
        let post = &slot.post;
        let Some(d) = post.digest else { return };
        if post.carrier.is_some() || !post.sent_prepare {
            return;
        }
        if !post.sent_commit && super::slot::PostState::matching(&post.prepares, &d) >= need {
            self.slots.get_mut(&target).unwrap().post.sent_commit = true;
            self.send_for_slot(Dest::Replicas, target, Body::PostcCommit { target, postnd_digest: d });
        }
        let post = &self.slots[&target].post;
        if post.sent_commit && super::slot::PostState::matching(&post.commits, &d) >= need {
            self.post_agreed(target);
        }
    }

    // ---- execution and delivery -----------------------------------------------

    fn try_deliver(&mut self) {
        while !self.halted {
            let s = self.last_delivered.next();
            let Some(slot) = self.slots.get(&s) else { break };
            if slot.phase < Phase::Committed || slot.phase == Phase::Delivered || slot.failed {
                break;
            }
            if slot.is_null() {
                let rd = slot.request_digest.unwrap();
                let empty = NdPayload::new();
                let nd = nd_data_digest(&empty, &[], &empty);
                self.deliver(s, rd, nd, Digest::ZERO);
                continue;
            }
            if slot.plan.needs_ppu_phase && slot.ppu.as_ref().is_none_or(|p| p.resolved.is_none()) {
                break;
            }
            let done = if self.is_primary() { self.execute_primary(s) } else { self.execute_backup(s) };
            if !done {
                break;
            }
        }
    }

    fn exec_inputs(&self, s: SeqNum) -> (Request, Digest, NdPayload, Vec<(ReplicaId, Vec<u8>)>) {
        let slot = &self.slots[&s];
        let pp = slot.pp.as_ref().unwrap();
        let vpre = pp.payload.restrict(NdTypeMask::of(&[NdClass::Vpre]));
        let npre = slot.ppu.as_ref().and_then(|p| p.resolved.clone()).unwrap_or_default();
        (pp.request.request.clone(), slot.request_digest.unwrap(), vpre, npre)
    }

    fn execute_primary(&mut self, s: SeqNum) -> bool {
        let (request, rd, vpre, npre) = self.exec_inputs(s);
        let ctx = self.ctx(s, rd);
        let mut rng = self.nd_rng(&rd, 1);
        let input = ExecInput { pre: &vpre, npre_shares: &npre, post: PostInput::Record(&mut rng) };
        let out = match guarded_execute(self.app.as_mut(), &ctx, &request, input, self.cfg.exec_budget_us) {
            Ok((out, used)) => {
                self.fx.work.exec_us += used;
                out
            }
            Err((_, used)) => {
                self.fx.work.exec_us += used;
                self.fail(s);
                return false;
            }
        };
        let result_digest = digest(&out.result);
        if self.slots[&s].plan.needs_post_commit {
            let rec = self.postnd.record(s, out.recorded.clone(), result_digest).record.clone();
            self.fx.trace.push(TraceRecord::PostndRecorded {
                t: self.now,
                replica: self.id,
                seq: s,
                values: rec.values.digest(),
                reply: rec.reply_digest,
            });
            let slot = self.slots.get_mut(&s).unwrap();
            slot.post.digest = Some(rec.digest());
            slot.post.record = Some(rec.clone());
            if self.cfg.piggyback {
                if !self.flush_armed {
                    self.flush_armed = true;
                    self.fx.timers.push((self.now + self.cfg.flush_timer_us, Timer::Flush));
                }
            } else {
                self.postnd.mark_in_agreement(s);
                self.stats.standalone += 1;
                let d = rec.digest();
                self.slots.get_mut(&s).unwrap().post.sent_prepare = true;
                self.send_for_slot(Dest::Replicas, s, Body::PostcPrePrepare { record: rec });
                self.send_for_slot(Dest::Replicas, s, Body::PostcPrepare { target: s, postnd_digest: d });
                self.check_post_prepared(s);
            }
        }
        let nd = nd_data_digest(&vpre, &npre, &out.recorded);
        self.reply(s, &request, out.result);
        self.deliver(s, rd, nd, result_digest);
        true
    }

    fn execute_backup(&mut self, s: SeqNum) -> bool {
        let slot = &self.slots[&s];
        if slot.plan.needs_post_commit && !slot.post.agreed {
            if slot.phase != Phase::NdPending {
                self.set_phase(s, Phase::NdPending);
                self.fx.timers.push((self.now + self.cfg.view_timer_us, Timer::PostWait(s)));
            }
            return false;
        }
        let record = slot.post.record.clone();
        let values = record.as_ref().map(|r| r.values.clone()).unwrap_or_default();
        let (request, rd, vpre, npre) = self.exec_inputs(s);
        let ctx = self.ctx(s, rd);
        let pre_state = record.as_ref().map(|_| self.app.state_digest());
        let input = ExecInput { pre: &vpre, npre_shares: &npre, post: PostInput::Replay(&values) };
        let out = match guarded_execute(self.app.as_mut(), &ctx, &request, input, self.cfg.exec_budget_us) {
            Ok((out, used)) => {
                self.fx.work.exec_us += used;
                out
            }
            Err((failure, used)) => {
                self.fx.work.exec_us += used;
                match failure {
                    WatchdogFailure::Hazard(ReplayHazard::Inconsistent(d)) => {
                        self.suspect(s, SuspicionReason::NdValueRejected, d);
                    }
                    WatchdogFailure::Hazard(h) => {
                        self.suspect(s, SuspicionReason::ExecCrashOrDeadlock, h.to_string());
                    }
                    WatchdogFailure::Exec(e) => {
                        self.suspect(s, SuspicionReason::ExecCrashOrDeadlock, e.to_string());
                        let post_state = self.app.state_digest();
                        self.fx.trace.push(TraceRecord::Restart {
                            t: self.now,
                            replica: self.id,
                            seq: s,
                            pre_state: pre_state.unwrap_or(post_state),
                            post_state,
                        });
                    }
                }
                self.fail(s);
                return false;
            }
        };
        let result_digest = digest(&out.result);
        if let Some(rec) = &record {
            if rec.reply_digest != result_digest {
                self.suspect(s, SuspicionReason::ReplyDigestMismatch, "replayed result differs from the primary's reply digest");
            }
        }
        let nd = nd_data_digest(&vpre, &npre, &values);
        self.reply(s, &request, out.result);
        self.deliver(s, rd, nd, result_digest);
        true
    }

    fn fail(&mut self, s: SeqNum) {
        if let Some(slot) = self.slots.get_mut(&s) {
            slot.failed = true;
        }
        self.halted = true;
    }

    fn reply(&mut self, s: SeqNum, request: &Request, result: Vec<u8>) {
        let result_digest = digest(&result);
        let body = Body::Reply { client: request.client, request_id: request.request_id, result, result_digest };
        let out = self.send(Dest::Client(request.client), s, body);
        self.replies.insert(request.client, (request.request_id, out));
    }

    fn deliver(&mut self, s: SeqNum, rd: Digest, nd: Digest, result: Digest) {
        let slot = &self.slots[&s];
        let req = &slot.pp.as_ref().unwrap().request.request;
        self.fx.trace.push(TraceRecord::Delivered {
            t: self.now,
            replica: self.id,
            view: self.view,
            seq: s,
            client: req.client,
            request_id: req.request_id,
            null: req.is_null(),
            mask: slot.mask,
            request: rd,
            nd,
            result,
        });
        self.set_phase(s, Phase::Delivered);
        self.last_delivered = s;
        self.stats.delivered += 1;
        self.collect_garbage();
    }

    fn collect_garbage(&mut self) {
        while let Some((&s, slot)) = self.slots.first_key_value() {
            if s.0 + KEEP_DELIVERED >= self.last_delivered.0 || slot.unsettled() {
                break;
            }
            self.slots.pop_first();
        }
    }

    fn retransmit(&mut self) {
        let max = self.cfg.max_retransmits;
        let me = self.id;
        let replicas: Vec<ReplicaId> = self.quorum.replicas().filter(|r| *r != me).collect();
        let mut resend = Vec::new();
        let mut fetches = Vec::new();
        let mut more = false;
        for slot in self.slots.values_mut() {
            if slot.retransmits >= max || slot.sent.is_empty() {
                continue;
            }
            if slot.unsettled() {
                resend.extend(slot.sent.iter().cloned());
                if let Some(ppu) = &slot.ppu {
                    if ppu.decision.is_some() && ppu.resolved.is_none() {
                        fetches.push((slot.seq, ppu.request_digest, ppu.missing.iter().copied().collect::<Vec<_>>()));
                    }
                }
            } else {
                // Settled here, but peers whose commit never arrived may have
                // missed the pre-prepare or the votes they need.
                let behind: Vec<ReplicaId> = replicas.iter().copied().filter(|r| !slot.commits.contains_key(r)).collect();
                if behind.is_empty() {
                    continue;
                }
                for r in behind {
                    resend.extend(
                        slot.sent.iter().map(|o| Outgoing { dest: Dest::Replica(r), message: o.message.clone(), bytes: o.bytes.clone() }),
                    );
                }
            }
            slot.retransmits += 1;
            more |= slot.retransmits < max;
        }
        self.fx.sends.extend(resend);
        for (seq, rd, missing) in fetches {
            self.send(Dest::Replicas, seq, Body::FetchNd { request_digest: rd, missing });
        }
        if more {
            self.arm_tick();
        }
    }
}

/// Digest binding everything a pre-prepare fixes besides the request:
/// the pre-determinable values, the NPRE decision, and the piggybacked
/// post-determined records.
fn nd_binding(pp: &PrePrepare, decision: Option<&DecisionSet>) -> Digest {
    let mut w = Writer::new();
    w.put(&pp.payload).put(&decision.map(DecisionSet::digest).unwrap_or(Digest::ZERO)).seq(&pp.piggyback);
    digest(&w.finish())
}
