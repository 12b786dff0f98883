use std::collections::{BTreeMap, VecDeque};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;

use super::{expect_mask, pad_op, AppError, Application, CallContext, CheckFailure, ExecFailure, ExecInput, ExecMeter, ExecOutput, PostAttack, PostInput, ReplayHazard, BAD_OP_RESULT};
use crate::crypto::digest_parts;
use crate::mask::{NdClass, NdTypeMask};
use crate::nd::watchdog::find_cycle;
use crate::wire::{NdPayload, Request};

/// Replay holds a lease on a thread's first lock for at most this many
/// intervening recorded events; beyond that it spins forever. Honest
/// records place both acquisitions of an operation next to each other.
pub const LEASE_WINDOW: usize = 4;

/// Operation layout: `threads: u8`, `ops_per_thread: u16`,
/// `program_seed: u64`, `cells: u8`, then padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CounterOp {
    pub threads: u8,
    pub ops_per_thread: u16,
    pub program_seed: u64,
    pub cells: u8,
}

/// One two-lock transfer: acquire `first`, then `second`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Transfer {
    first: u8,
    second: u8,
    amount: u64,
}

/// One recorded lock acquisition.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Event {
    thread: u8,
    lock: u8,
}

impl CounterOp {
    const LEN: usize = 12;

    pub fn encode(&self) -> Vec<u8> {
        let mut v = vec![self.threads];
        v.extend_from_slice(&self.ops_per_thread.to_le_bytes());
        v.extend_from_slice(&self.program_seed.to_le_bytes());
        v.push(self.cells);
        v
    }

    pub fn parse(op: &[u8]) -> Option<CounterOp> {
        if op.len() < Self::LEN {
            return None;
        }
        let c = CounterOp {
            threads: op[0],
            ops_per_thread: u16::from_le_bytes([op[1], op[2]]),
            program_seed: u64::from_le_bytes(op[3..11].try_into().unwrap()),
            cells: op[11],
        };
        (c.threads > 0 && c.ops_per_thread > 0 && c.cells >= 2).then_some(c)
    }

    /// Per-thread transfer programs. The first two threads open with
    /// opposing transfers on the same pair of cells.
    fn programs(&self) -> Vec<Vec<Transfer>> {
        let mut rng = ChaCha12Rng::seed_from_u64(self.program_seed);
        let mut progs: Vec<Vec<Transfer>> = (0..self.threads)
            .map(|_| {
                (0..self.ops_per_thread)
                    .map(|_| {
                        let first = rng.gen_range(0..self.cells);
                        let mut second = rng.gen_range(0..self.cells - 1);
                        if second >= first {
                            second += 1;
                        }
                        Transfer { first, second, amount: rng.gen_range(1..1000) }
                    })
                    .collect()
            })
            .collect();
        if self.threads >= 2 {
            let t = progs[0][0];
            progs[1][0] = Transfer { first: t.second, second: t.first, ..progs[1][0] };
        }
        progs
    }
}

fn lock_sequence(prog: &[Transfer]) -> Vec<u8> {
    prog.iter().flat_map(|t| [t.first, t.second]).collect()
}

fn encode_events(events: &[Event]) -> Vec<u8> {
    events.iter().flat_map(|e| [e.thread, e.lock]).collect()
}

fn decode_events(bytes: &[u8]) -> Option<Vec<Event>> {
    if !bytes.len().is_multiple_of(2) {
        return None;
    }
    Some(bytes.chunks(2).map(|c| Event { thread: c[0], lock: c[1] }).collect())
}

/// Checks that each thread's events are exactly its program's lock
/// sequence; returns, per thread, the list positions of its events.
fn check_consistency(progs: &[Vec<Transfer>], events: &[Event]) -> Result<Vec<Vec<usize>>, String> {
    let seqs: Vec<Vec<u8>> = progs.iter().map(|p| lock_sequence(p)).collect();
    let mut positions: Vec<Vec<usize>> = vec![Vec::new(); progs.len()];
    for (i, e) in events.iter().enumerate() {
        let t = e.thread as usize;
        let seq = seqs.get(t).ok_or_else(|| format!("event {i} names unknown thread {t}"))?;
        let k = positions[t].len();
        match seq.get(k) {
            Some(&l) if l == e.lock => positions[t].push(i),
            Some(&l) => return Err(format!("event {i}: thread {t} acquires lock {} but its program needs {l}", e.lock)),
            None => return Err(format!("event {i}: thread {t} has no acquisitions left")),
        }
    }
    for (t, p) in positions.iter().enumerate() {
        if p.len() != seqs[t].len() {
            return Err(format!("thread {t} has {} of {} acquisitions", p.len(), seqs[t].len()));
        }
    }
    Ok(positions)
}

enum ReplayEnd {
    Done,
    Deadlock(Vec<u32>),
    LeaseExpired,
}

/// Replays `events` with per-lock FIFO queues, lowest runnable thread
/// first. `on_op` runs when a thread holds both locks of a transfer.
fn replay(
    progs: &[Vec<Transfer>],
    events: &[Event],
    positions: &[Vec<usize>],
    cells: usize,
    mut on_op: impl FnMut(usize, &Transfer) -> Result<(), ExecFailure>,
) -> Result<ReplayEnd, ExecFailure> {
    let mut queues: Vec<VecDeque<u8>> = vec![VecDeque::new(); cells];
    for e in events {
        queues[e.lock as usize].push_back(e.thread);
    }
    let seqs: Vec<Vec<u8>> = progs.iter().map(|p| lock_sequence(p)).collect();
    let mut next = vec![0usize; progs.len()];
    let mut holder: Vec<Option<u8>> = vec![None; cells];
    loop {
        let runnable = (0..progs.len()).find(|&t| {
            seqs[t].get(next[t]).is_some_and(|&l| holder[l as usize].is_none() && queues[l as usize].front() == Some(&(t as u8)))
        });
        let Some(t) = runnable else {
            if (0..progs.len()).all(|t| next[t] == seqs[t].len()) {
                return Ok(ReplayEnd::Done);
            }
            let mut waits: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
            for (t, seq) in seqs.iter().enumerate() {
                if let Some(&l) = seq.get(next[t]) {
                    let on = holder[l as usize].or(queues[l as usize].front().copied());
                    if let Some(h) = on.filter(|&h| h as usize != t) {
                        waits.entry(t as u32).or_default().push(h as u32);
                    }
                }
            }
            let cycle = find_cycle(&waits).unwrap_or_else(|| waits.keys().copied().collect());
            return Ok(ReplayEnd::Deadlock(cycle));
        };
        let l = seqs[t][next[t]];
        queues[l as usize].pop_front();
        holder[l as usize] = Some(t as u8);
        if next[t] % 2 == 1 {
            let (p1, p2) = (positions[t][next[t] - 1], positions[t][next[t]]);
            if p2 - p1 - 1 > LEASE_WINDOW {
                return Ok(ReplayEnd::LeaseExpired);
            }
            let op = &progs[t][next[t] / 2];
            on_op(t, op)?;
            holder[op.first as usize] = None;
            holder[op.second as usize] = None;
        }
        next[t] += 1;
    }
}

/// Static deadlock and consistency analysis of a recorded schedule.
fn analyze(op: &CounterOp, events: &[Event]) -> Result<(), ReplayHazard> {
    let progs = op.programs();
    let positions = check_consistency(&progs, events).map_err(ReplayHazard::Inconsistent)?;
    // lease expiry is a runtime defect, invisible to lock-order analysis
    let pos_nolease: Vec<Vec<usize>> = positions.iter().map(|p| (0..p.len()).collect()).collect();
    match replay(&progs, events, &pos_nolease, op.cells as usize, |_, _| Ok(())) {
        Ok(ReplayEnd::Deadlock(cycle)) => Err(ReplayHazard::Deadlock(cycle)),
        _ => Ok(()),
    }
}

fn mix(x: u64, salt: u64) -> u64 {
    let x = (x ^ salt).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    x ^ (x >> 31)
}

/// Non-verifiable post-determinable service: a multithreaded batch of
/// two-lock transfers over shared counters. The thread interleaving is
/// chosen by the local scheduler; the primary records its lock
/// acquisition order and backups replay it.
#[derive(Debug)]
pub struct NpostCounter {
    threads: u8,
    cells: Vec<u64>,
    nd_size: usize,
}

impl NpostCounter {
    pub fn new(threads: u8, cells: u8, nd_size: usize) -> Self {
        NpostCounter { threads: threads.max(1), cells: vec![0; cells.max(2) as usize], nd_size }
    }

    fn parse(&self, request: &Request) -> Option<CounterOp> {
        CounterOp::parse(&request.op).filter(|c| c.cells as usize == self.cells.len())
    }

    /// Honest scheduler: whole transfers run atomically, in a random
    /// thread order.
    fn honest_schedule(progs: &[Vec<Transfer>], rng: &mut dyn RngCore) -> Vec<Event> {
        let mut next = vec![0usize; progs.len()];
        let total: usize = progs.iter().map(Vec::len).sum();
        let mut events = Vec::with_capacity(2 * total);
        for _ in 0..total {
            let live: Vec<usize> = (0..progs.len()).filter(|&t| next[t] < progs[t].len()).collect();
            let t = live[rng.next_u32() as usize % live.len()];
            let op = progs[t][next[t]];
            events.push(Event { thread: t as u8, lock: op.first });
            events.push(Event { thread: t as u8, lock: op.second });
            next[t] += 1;
        }
        events
    }

    fn run(&mut self, op: &CounterOp, events: &[Event], meter: &mut ExecMeter) -> Result<Vec<u8>, ExecFailure> {
        let progs = op.programs();
        let positions = check_consistency(&progs, events).map_err(ExecFailure::Crash)?;
        let mut cells = self.cells.clone();
        let mut accs = vec![0u64; progs.len()];
        let end = replay(&progs, events, &positions, cells.len(), |t, tr| {
            meter.charge(1)?;
            let (a, b) = (tr.first as usize, tr.second as usize);
            cells[a] = mix(cells[a].wrapping_sub(tr.amount), t as u64);
            cells[b] = mix(cells[b].wrapping_add(tr.amount), t as u64 + 1);
            accs[t] = accs[t].rotate_left(5) ^ cells[a] ^ cells[b].rotate_left(32);
            Ok(())
        })?;
        match end {
            ReplayEnd::Done => {}
            ReplayEnd::Deadlock(cycle) => return Err(ExecFailure::Crash(format!("replay deadlocked on threads {cycle:?}"))),
            ReplayEnd::LeaseExpired => {
                meter.charge(u64::MAX)?;
                return Err(ExecFailure::Crash("lock lease expired".into()));
            }
        }
        self.cells = cells;
        let cell_bytes: Vec<u8> = self.cells.iter().flat_map(|c| c.to_le_bytes()).collect();
        let acc_bytes: Vec<u8> = accs.iter().flat_map(|c| c.to_le_bytes()).collect();
        Ok(digest_parts([cell_bytes.as_slice(), &acc_bytes]).0.to_vec())
    }

    /// Reorders `events` without changing any per-lock or per-thread
    /// order so that one transfer's two acquisitions are as far apart
    /// as possible.
    fn stretch(events: &[Event], positions: &[Vec<usize>]) -> Option<Vec<Event>> {
        let n = events.len();
        let mut preds: Vec<Vec<usize>> = vec![Vec::new(); n];
        let mut last_on_lock: BTreeMap<u8, usize> = BTreeMap::new();
        let mut last_of_thread: BTreeMap<u8, usize> = BTreeMap::new();
        for (i, e) in events.iter().enumerate() {
            if let Some(&p) = last_on_lock.get(&e.lock) {
                preds[i].push(p);
            }
            if let Some(&p) = last_of_thread.get(&e.thread) {
                preds[i].push(p);
            }
            last_on_lock.insert(e.lock, i);
            last_of_thread.insert(e.thread, i);
        }
        // ancestors[i] includes i
        let ancestors: Vec<Vec<bool>> = {
            let mut anc: Vec<Vec<bool>> = Vec::with_capacity(n);
            for i in 0..n {
                let mut a = vec![false; n];
                a[i] = true;
                for &p in &preds[i] {
                    for (j, &x) in anc[p].iter().enumerate() {
                        a[j] |= x;
                    }
                }
                anc.push(a);
            }
            anc
        };
        let mut best: Option<(usize, usize, usize)> = None;
        for pos in positions {
            for pair in pos.chunks(2) {
                let (i1, i2) = (pair[0], pair[1]);
                let gap = (0..n).filter(|&j| j != i1 && j != i2 && !ancestors[i1][j] && !ancestors[j][i2]).count();
                if best.is_none_or(|(g, _, _)| gap > g) {
                    best = Some((gap, i1, i2));
                }
            }
        }
        let (gap, i1, i2) = best?;
        if gap <= LEASE_WINDOW {
            return None;
        }
        let mut order: Vec<usize> = (0..n).filter(|&j| ancestors[i1][j] && j != i1).collect();
        order.push(i1);
        order.extend((0..n).filter(|&j| j != i1 && j != i2 && !ancestors[i1][j] && !ancestors[j][i2]));
        order.push(i2);
        order.extend((0..n).filter(|&j| j != i2 && ancestors[j][i2]));
        Some(order.into_iter().map(|j| events[j]).collect())
    }

    /// A schedule in which the first two threads each take one lock of
    /// their opposing opening transfers and wait for the other.
    fn deadlock_schedule(progs: &[Vec<Transfer>]) -> Option<Vec<Event>> {
        if progs.len() < 2 {
            return None;
        }
        let ev = |t: usize, l: u8| Event { thread: t as u8, lock: l };
        let mut events = vec![ev(0, progs[0][0].first), ev(1, progs[1][0].first), ev(0, progs[0][0].second), ev(1, progs[1][0].second)];
        for (t, p) in progs.iter().enumerate() {
            let skip = if t < 2 { 1 } else { 0 };
            events.extend(p.iter().skip(skip).flat_map(|tr| [ev(t, tr.first), ev(t, tr.second)]));
        }
        Some(events)
    }
}

impl Application for NpostCounter {
    fn name(&self) -> &str {
        "npost_counter"
    }

    fn nd_mask(&self, _request: &Request) -> NdTypeMask {
        NdTypeMask::of(&[NdClass::Npost])
    }

    fn propose_value(&mut self, _ctx: &CallContext, request: &Request, _rng: &mut dyn RngCore) -> Result<(NdTypeMask, NdPayload), AppError> {
        Ok((self.nd_mask(request), NdPayload::new()))
    }

    fn check_value(&self, _ctx: &CallContext, request: &Request, mask: NdTypeMask, payload: &NdPayload) -> Result<(), CheckFailure> {
        expect_mask(self.nd_mask(request), mask)?;
        if payload.get(NdClass::Npost).is_some() {
            return Err(CheckFailure::ValueRejected("post-determined value proposed before execution".into()));
        }
        Ok(())
    }

    fn analyze_replay(&self, request: &Request, values: &NdPayload) -> Result<(), ReplayHazard> {
        let bytes = values.get(NdClass::Npost).ok_or_else(|| ReplayHazard::Inconsistent("missing NPOST schedule".into()))?;
        let events = decode_events(bytes).ok_or_else(|| ReplayHazard::Inconsistent("odd-length schedule".into()))?;
        match self.parse(request) {
            Some(op) => analyze(&op, &events),
            None if events.is_empty() => Ok(()),
            None => Err(ReplayHazard::Inconsistent("schedule for unparseable request".into())),
        }
    }

    fn execute(&mut self, _ctx: &CallContext, request: &Request, input: ExecInput<'_>, meter: &mut ExecMeter) -> Result<ExecOutput, ExecFailure> {
        let op = self.parse(request);
        let (events, record) = match input.post {
            PostInput::Record(rng) => (op.map(|o| Self::honest_schedule(&o.programs(), rng)).unwrap_or_default(), true),
            PostInput::Replay(values) => {
                let bytes = values.get(NdClass::Npost).ok_or_else(|| ExecFailure::Crash("no NPOST schedule".into()))?;
                (decode_events(bytes).ok_or_else(|| ExecFailure::Crash("odd-length schedule".into()))?, false)
            }
        };
        let recorded = if record { NdPayload::single(NdClass::Npost, encode_events(&events)) } else { NdPayload::new() };
        let Some(op) = op else {
            if !events.is_empty() {
                return Err(ExecFailure::Crash("schedule for unparseable request".into()));
            }
            return Ok(ExecOutput { result: BAD_OP_RESULT.to_vec(), recorded });
        };
        let result = self.run(&op, &events, meter)?;
        Ok(ExecOutput { result, recorded })
    }

    fn snapshot(&self) -> Vec<u8> {
        self.cells.iter().flat_map(|c| c.to_le_bytes()).collect()
    }

    fn restore(&mut self, bytes: &[u8]) -> Result<(), AppError> {
        if bytes.len() != 8 * self.cells.len() {
            return Err(AppError(format!("counter snapshot must be {} bytes", 8 * self.cells.len())));
        }
        for (c, b) in self.cells.iter_mut().zip(bytes.chunks(8)) {
            *c = u64::from_le_bytes(b.try_into().unwrap());
        }
        Ok(())
    }

    fn forge_post_values(&self, request: &Request, honest: &NdPayload, attack: PostAttack, rng: &mut dyn RngCore) -> Option<NdPayload> {
        let op = self.parse(request)?;
        let progs = op.programs();
        let events = decode_events(honest.get(NdClass::Npost)?)?;
        let forged = match attack {
            PostAttack::Corrupt => {
                // a valid schedule that orders some cell differently
                let per_lock = |ev: &[Event]| {
                    let mut m: BTreeMap<u8, Vec<u8>> = BTreeMap::new();
                    for e in ev {
                        m.entry(e.lock).or_default().push(e.thread);
                    }
                    m
                };
                let target = per_lock(&events);
                (0..64).map(|_| Self::honest_schedule(&progs, rng)).find(|s| per_lock(s) != target)?
            }
            PostAttack::Deadlock => Self::deadlock_schedule(&progs)?,
            PostAttack::Crash => {
                let positions = check_consistency(&progs, &events).ok()?;
                Self::stretch(&events, &positions)?
            }
        };
        Some(NdPayload::single(NdClass::Npost, encode_events(&forged)))
    }

    fn generate_op(&self, rng: &mut dyn RngCore, size: usize) -> Vec<u8> {
        let k = self.threads as usize;
        let m = (self.nd_size / (4 * k)).clamp(1, u16::MAX as usize) as u16;
        let op = CounterOp { threads: self.threads, ops_per_thread: m, program_seed: rng.next_u64(), cells: self.cells.len() as u8 };
        pad_op(op.encode(), size)
    }
}
