#![allow(dead_code)]

use std::sync::Arc;

use ndbft::app::AppSpec;
use ndbft::client::{Client, ClientConfig};
use ndbft::crypto::{digest, AuthMode, KeyStore};
use ndbft::engine::{Outgoing, Phase, Replica, ReplicaConfig, TraceRecord};
use ndbft::ids::{ClientId, Endpoint, QuorumConfig, ReplicaId, SeqNum, ViewNum};
use ndbft::mask::NdTypeMask;
use ndbft::nd::ppu::{make_share, verify_decision};
use ndbft::sim::{self, Behavior, FaultSpec, Scenario, Trigger};
use ndbft::wire::{DecisionSet, MessageKind};

pub fn scenario(mask: NdTypeMask, clients: u32, requests: u32, request_size: usize) -> Scenario {
    let text = format!(
        "version = 1\nf = 1\n[app]\nkind = \"for_mask\"\nmask = \"{mask}\"\n\
         [workload]\nclients = {clients}\nrequests_per_client = {requests}\nrequest_size = {request_size}\n"
    );
    Scenario::from_toml(&text).expect("valid scenario")
}

/// First seq at or after `from` that carries a client request in the
/// fault-free run. Runs are identical up to the first tampered message,
/// so an `AtSeq` trigger there is guaranteed to hit a client request.
pub fn request_seq(s: &Scenario, seed: u64, from: u64) -> u64 {
    let mut honest = s.clone();
    honest.faults.clear();
    let out = sim::run(&honest, seed).expect("fault-free run");
    out.trace
        .iter()
        .find_map(|r| match r {
            TraceRecord::Delivered { seq, null: false, .. } if seq.0 >= from => Some(seq.0),
            _ => None,
        })
        .expect("a client request after `from`")
}

pub fn with_fault(mut s: Scenario, replica: u32, behavior: Behavior, trigger: Trigger) -> Scenario {
    s.faults.push(FaultSpec { replica, behavior, trigger });
    s
}

/// Trigger used by the safety suite for `seed`: rotates through every
/// trigger shape so both one-shot and persistent faults are covered.
pub fn suite_trigger(seed: u64) -> Trigger {
    let k = 3 + seed % 20;
    match seed % 4 {
        0 => Trigger::AtSeq(k),
        1 => Trigger::FromSeq(k),
        2 => Trigger::Probability(0.3),
        _ => Trigger::Always,
    }
}

/// A group driven by hand, one message at a time.
pub struct Group {
    pub keys: Arc<KeyStore>,
    pub replicas: Vec<Replica>,
    pub client: Client,
}

impl Group {
    pub fn new(f: u32, mask: NdTypeMask) -> Self {
        let quorum = QuorumConfig::new(f);
        let keys = Arc::new(KeyStore::new(7, quorum, 1));
        let spec = AppSpec::for_mask(mask);
        let replicas = quorum
            .replicas()
            .map(|r| Replica::new(r, ReplicaConfig::default(), keys.clone(), spec.build(), r.0 as u64))
            .collect();
        let client = Client::new(ClientId(0), keys.clone(), ClientConfig::default());
        Group { keys, replicas, client }
    }

    pub fn n(&self) -> usize {
        self.replicas.len()
    }

    /// Feeds one message to `to` and returns its sends.
    pub fn feed(&mut self, to: u32, from: Endpoint, o: &Outgoing) -> Vec<Outgoing> {
        self.replicas[to as usize].handle_message(0, from, &o.bytes).sends
    }

    /// The client's request as handled by the primary.
    pub fn order(&mut self, op: &[u8]) -> Vec<Outgoing> {
        let fx = self.client.invoke(0, op.to_vec());
        let req = fx.sends.into_iter().next().expect("request to the primary");
        self.feed(0, Endpoint::Client(ClientId(0)), &req)
    }

    pub fn phase(&self, r: u32) -> Option<Phase> {
        self.replicas[r as usize].phase(SeqNum(1))
    }
}

pub fn of_kind(sends: &[Outgoing], kind: MessageKind) -> Vec<Outgoing> {
    sends.iter().filter(|o| o.kind() == kind).cloned().collect()
}

fn one(sends: &[Outgoing], kind: MessageKind) -> Result<Outgoing, String> {
    of_kind(sends, kind).into_iter().next().ok_or_else(|| format!("no {kind:?} sent"))
}

fn advanced(p: Option<Phase>) -> bool {
    matches!(p, Some(Phase::Committed | Phase::NdPending | Phase::Delivered))
}

/// PREPARED needs exactly 2f PREPAREs from other replicas and COMMITTED
/// exactly 2f COMMITs; one fewer, or a repeated sender, never advances.
pub fn check_certificates(f: u32) -> Result<(), String> {
    let mut g = Group::new(f, NdTypeMask::DETERMINISTIC);
    let need = 2 * f as usize;
    let sends = g.order(b"op");
    if f == 0 {
        return match g.phase(0) {
            Some(Phase::Delivered) => Ok(()),
            p => Err(format!("f=0: single replica ended in {p:?}")),
        };
    }
    let pp = one(&sends, MessageKind::PrePrepare)?;
    let n = g.n() as u32;
    let target = 1;
    let mut prepares = Vec::new();
    let mut own = None;
    for b in 1..n {
        let out = g.feed(b, Endpoint::Replica(ReplicaId(0)), &pp);
        let p = one(&out, MessageKind::Prepare)?;
        if b == target {
            own = Some((b, p));
        } else {
            prepares.push((b, p));
        }
    }
    if g.phase(target) != Some(Phase::PrePrepared) {
        return Err(format!("target in {:?} after pre-prepare alone", g.phase(target)));
    }
    let mut target_out = Vec::new();
    for (i, (b, p)) in prepares.iter().take(need).enumerate() {
        if i + 1 == need {
            // A repeated sender must not stand in for the missing one.
            g.feed(target, Endpoint::Replica(ReplicaId(prepares[0].0)), &prepares[0].1);
            if g.phase(target) != Some(Phase::PrePrepared) {
                return Err(format!("prepared with {} distinct prepares plus a duplicate", need - 1));
            }
        }
        target_out = g.feed(target, Endpoint::Replica(ReplicaId(*b)), p);
        let expect = if i + 1 == need { Phase::Prepared } else { Phase::PrePrepared };
        if g.phase(target) != Some(expect) {
            return Err(format!("after {} prepares phase is {:?}, expected {expect:?}", i + 1, g.phase(target)));
        }
    }
    one(&target_out, MessageKind::Commit)?;
    // Everyone else gets every prepare and so commits.
    let all_prepares: Vec<(u32, Outgoing)> = prepares.iter().cloned().chain(own).collect();
    let mut commits = Vec::new();
    for r in (0..n).filter(|r| *r != target) {
        let mut out = Vec::new();
        for (b, p) in all_prepares.iter().filter(|(b, _)| *b != r) {
            out.extend(g.feed(r, Endpoint::Replica(ReplicaId(*b)), p));
        }
        commits.push((r, one(&out, MessageKind::Commit)?));
    }
    for (i, (r, c)) in commits.iter().take(need).enumerate() {
        g.feed(target, Endpoint::Replica(ReplicaId(*r)), c);
        let done = advanced(g.phase(target));
        if done != (i + 1 == need) {
            return Err(format!("after {} commits phase is {:?}", i + 1, g.phase(target)));
        }
    }
    Ok(())
}

/// An NPRE decision verifies only with exactly 2f+1 distinct proposers
/// that include the primary.
pub fn check_decision_size(f: u32) -> Result<(), String> {
    let quorum = QuorumConfig::new(f);
    let keys = KeyStore::new(11, quorum, 1);
    let (view, seq, req) = (ViewNum(0), SeqNum(1), digest(b"request"));
    let share = |r: u32| make_share(&keys, ReplicaId(r), AuthMode::Signature, view, seq, &req, vec![r as u8; 8]).unwrap();
    let primary_share = digest(&[0u8; 8]);
    let n = quorum.n();
    let verify = |members: &[u32]| {
        let d = DecisionSet { entries: members.iter().map(|&r| share(r)).collect() };
        let receiver = ReplicaId(if n > 1 { 1 } else { 0 });
        verify_decision(&keys, &d, ReplicaId(0), view, seq, &req, &primary_share, receiver).is_ok()
    };
    let size = 2 * f + 1;
    let exact: Vec<u32> = (0..size).collect();
    if !verify(&exact) {
        return Err(format!("f={f}: {size} proposers with the primary rejected"));
    }
    if size > 1 && verify(&exact[..exact.len() - 1]) {
        return Err(format!("f={f}: {} proposers accepted", size - 1));
    }
    if size < n && verify(&(0..size + 1).collect::<Vec<_>>()) {
        return Err(format!("f={f}: {} proposers accepted", size + 1));
    }
    if size < n && verify(&(1..=size).collect::<Vec<_>>()) {
        return Err(format!("f={f}: decision without the primary accepted"));
    }
    if size > 1 {
        let mut dup = exact.clone();
        dup[size as usize - 1] = dup[size as usize - 2];
        if verify(&dup) {
            return Err(format!("f={f}: repeated proposer accepted"));
        }
    }
    Ok(())
}

/// (client, request id, request, nd, result) of one delivery.
pub type HistoryEntry = (u64, u64, ndbft::crypto::Digest, ndbft::crypto::Digest, ndbft::crypto::Digest);

/// Non-null deliveries of each correct replica in delivery order.
pub fn histories(out: &sim::RunOutput) -> std::collections::BTreeMap<ReplicaId, Vec<HistoryEntry>> {
    let mut h: std::collections::BTreeMap<_, Vec<_>> = Default::default();
    let faulty: Vec<ReplicaId> = match out.trace.first() {
        Some(TraceRecord::Header { faulty, .. }) => faulty.clone(),
        _ => Vec::new(),
    };
    for r in &out.trace {
        if let TraceRecord::Delivered { replica, client, request_id, null: false, request, nd, result, .. } = r {
            if !faulty.contains(replica) {
                h.entry(*replica).or_default().push((client.0, *request_id, *request, *nd, *result));
            }
        }
    }
    h
}

/// Seeds a random application state, records one request at a primary
/// instance, then replays it on a copy of the pre-request state.
pub fn replay_case(kind: ndbft::app::AppKind, seed: u64) -> Result<(), String> {
    use ndbft::app::{CallContext, ExecInput, ExecMeter, PostInput};
    use ndbft::wire::{NdPayload, Request};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    let spec = AppSpec::new(kind);
    let mut primary = spec.build();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let ctx = |seq: u64| CallContext {
        replica: ReplicaId(0),
        view: ViewNum(0),
        seq: SeqNum(seq),
        request_digest: digest(&seq.to_le_bytes()),
        local_time_us: 0,
        quorum: QuorumConfig::new(1),
    };
    let empty = NdPayload::new();
    let warmup = rng.gen_range(0..8);
    for i in 0..warmup {
        let req = Request { client: ClientId(0), request_id: i, op: primary.generate_op(&mut rng, 64) };
        let mut exec_rng = ChaCha12Rng::seed_from_u64(rng.gen());
        let input = ExecInput { pre: &empty, npre_shares: &[], post: PostInput::Record(&mut exec_rng) };
        primary.execute(&ctx(i + 1), &req, input, &mut ExecMeter::unlimited()).map_err(|e| e.to_string())?;
    }
    let mut backup = spec.build();
    backup.restore(&primary.snapshot()).map_err(|e| e.to_string())?;
    let req = Request { client: ClientId(0), request_id: warmup, op: primary.generate_op(&mut rng, 64) };
    let mut exec_rng = ChaCha12Rng::seed_from_u64(rng.gen());
    let c = ctx(warmup + 1);
    let input = ExecInput { pre: &empty, npre_shares: &[], post: PostInput::Record(&mut exec_rng) };
    let out = primary.execute(&c, &req, input, &mut ExecMeter::unlimited()).map_err(|e| e.to_string())?;
    if out.recorded.is_empty() {
        return Err("primary recorded no post-determined values".into());
    }
    let replayed = ndbft::app::app_execute_replay_equivalence(
        backup.as_mut(),
        &c,
        &req,
        &empty,
        &[],
        &out.recorded,
        &out.result,
        &primary.state_digest(),
    );
    if replayed {
        Ok(())
    } else {
        Err(format!("seed {seed}: replay diverged from the recording"))
    }
}

impl Group {
    /// Delivers every queued message in FIFO order until quiet, skipping
    /// any that `drop` rejects. Returns what reached the client.
    pub fn pump(&mut self, start: Vec<(u32, Outgoing)>, drop: impl Fn(u32, u32, &Outgoing) -> bool) -> Vec<(u32, Outgoing)> {
        let mut queue: std::collections::VecDeque<(u32, Outgoing)> = start.into();
        let mut to_client = Vec::new();
        let n = self.n() as u32;
        while let Some((from, o)) = queue.pop_front() {
            let targets: Vec<u32> = match o.dest {
                ndbft::engine::Dest::Replica(r) => vec![r.0],
                ndbft::engine::Dest::Replicas => (0..n).filter(|r| *r != from).collect(),
                ndbft::engine::Dest::Client(_) => {
                    to_client.push((from, o));
                    continue;
                }
            };
            for to in targets {
                if drop(from, to, &o) {
                    continue;
                }
                for out in self.feed(to, Endpoint::Replica(ReplicaId(from)), &o) {
                    queue.push_back((to, out));
                }
            }
        }
        to_client
    }
}
