use std::collections::{BTreeMap, VecDeque};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::app::Application;
use crate::client::{Client, ClientEffects, ClientEvent};
use crate::crypto::{digest, KeyStore};
use crate::engine::{Dest, Effects, Outgoing, Replica, Timer, TraceRecord, TRACE_VERSION};
use crate::ids::{ClientId, Endpoint, QuorumConfig, ReplicaId};

use super::byzantine::Adversary;
use super::checker::check_safety;
use super::scenario::{DelayModel, Scenario};
use super::{Metrics, RunOutput};

#[derive(Debug)]
enum Event {
    Arrive { to: Endpoint, from: Endpoint, bytes: Arc<[u8]> },
    ReplicaTimer { r: ReplicaId, timer: Timer },
    CpuFree { r: ReplicaId },
    ClientTimer { c: ClientId },
    ClientStart { c: ClientId },
}

enum Input {
    Msg { from: Endpoint, bytes: Arc<[u8]> },
    Timer(Timer),
}

struct Node {
    replica: Replica,
    adversary: Option<Adversary>,
    busy: bool,
    /// Protocol messages and timers.
    high: VecDeque<Input>,
    /// Client requests, served only when nothing else is queued.
    low: VecDeque<Input>,
}

impl Node {
    fn crashed(&self) -> bool {
        self.adversary.as_ref().is_some_and(Adversary::crashed)
    }
}

struct ClientSlot {
    client: Client,
    remaining: u32,
    rng: ChaCha12Rng,
}

/// One deployment in virtual time.
pub struct Simulation {
    scenario: Scenario,
    seed: u64,
    now: u64,
    counter: u64,
    queue: BTreeMap<(u64, u64), Event>,
    nodes: Vec<Node>,
    clients: Vec<ClientSlot>,
    generator: Box<dyn Application>,
    net_rng: ChaCha12Rng,
    trace: Vec<TraceRecord>,
    metrics: Metrics,
}

impl Simulation {
    pub fn new(scenario: &Scenario, seed: u64) -> Self {
        let quorum = QuorumConfig::new(scenario.f);
        let keys = Arc::new(KeyStore::new(seed, quorum, scenario.workload.clients as u64));
        let nodes = quorum
            .replicas()
            .map(|r| {
                let replica = Replica::new(r, scenario.replica.clone(), keys.clone(), scenario.app.build(), seed ^ (0x9e37_79b9 * (r.0 as u64 + 1)));
                let adversary = scenario.faults.iter().find(|f| f.replica == r.0).map(|f| Adversary::new(f.behavior, f.trigger, seed));
                Node { replica, adversary, busy: false, high: VecDeque::new(), low: VecDeque::new() }
            })
            .collect();
        let clients = (0..scenario.workload.clients as u64)
            .map(|c| ClientSlot {
                client: Client::new(ClientId(c), keys.clone(), scenario.client),
                remaining: scenario.workload.requests_per_client,
                rng: ChaCha12Rng::seed_from_u64(seed.wrapping_mul(31).wrapping_add(c + 1)),
            })
            .collect();
        let mut sim = Simulation {
            scenario: scenario.clone(),
            seed,
            now: 0,
            counter: 0,
            queue: BTreeMap::new(),
            nodes,
            clients,
            generator: scenario.app.build(),
            net_rng: ChaCha12Rng::seed_from_u64(seed ^ 0x006e_6574_776f_726b),
            trace: Vec::new(),
            metrics: Metrics::default(),
        };
        sim.trace.push(TraceRecord::Header {
            version: TRACE_VERSION,
            scenario: scenario.name.clone(),
            seed,
            f: scenario.f,
            n: quorum.n(),
            faulty: scenario.faulty().into_iter().collect(),
        });
        for c in 0..scenario.workload.clients as u64 {
            // Small stagger so clients do not start in lockstep.
            sim.schedule(c * 10, Event::ClientStart { c: ClientId(c) });
        }
        sim
    }

    fn schedule(&mut self, at: u64, ev: Event) {
        self.queue.insert((at, self.counter), ev);
        self.counter += 1;
    }

    pub fn run(mut self) -> RunOutput {
        while let Some(((t, _), ev)) = self.queue.pop_first() {
            if t > self.scenario.max_time_us {
                break;
            }
            self.now = t;
            self.metrics.events += 1;
            self.handle(ev);
        }
        self.metrics.end_us = self.now;
        for node in &self.nodes {
            if node.replica.is_primary() {
                self.metrics.postnd.add(node.replica.stats());
            }
        }
        self.trace.push(TraceRecord::End { t: self.now, events: self.metrics.events });
        let report = check_safety(&self.trace).expect("simulator traces are complete");
        RunOutput { trace: self.trace, report, metrics: self.metrics }
    }

    fn handle(&mut self, ev: Event) {
        match ev {
            Event::Arrive { to: Endpoint::Replica(r), from, bytes } => {
                let node = &mut self.nodes[r.0 as usize];
                if node.crashed() {
                    return;
                }
                let input = Input::Msg { from, bytes };
                if matches!(from, Endpoint::Client(_)) {
                    node.low.push_back(input);
                } else {
                    node.high.push_back(input);
                }
                self.kick(r);
            }
            Event::Arrive { to: Endpoint::Client(c), from, bytes } => {
                let fx = self.clients[c.0 as usize].client.handle_message(self.now, from, &bytes);
                self.client_effects(c, fx);
            }
            Event::ReplicaTimer { r, timer } => {
                self.nodes[r.0 as usize].high.push_back(Input::Timer(timer));
                self.kick(r);
            }
            Event::CpuFree { r } => {
                self.nodes[r.0 as usize].busy = false;
                self.kick(r);
            }
            Event::ClientTimer { c } => {
                let fx = self.clients[c.0 as usize].client.handle_timer(self.now);
                self.client_effects(c, fx);
            }
            Event::ClientStart { c } => self.client_start(c),
        }
    }

    /// Runs the next queued input if the replica's CPU is idle.
    fn kick(&mut self, r: ReplicaId) {
        let now = self.now;
        let costs = self.scenario.costs.clone();
        let node = &mut self.nodes[r.0 as usize];
        if node.busy || node.crashed() {
            return;
        }
        let Some(input) = node.high.pop_front().or_else(|| node.low.pop_front()) else { return };
        let (fx, mut cost) = match input {
            Input::Msg { from, bytes } => (node.replica.handle_message(now, from, &bytes), costs.recv(bytes.len())),
            Input::Timer(t) => (node.replica.handle_timer(now, t), costs.timer_us),
        };
        let Effects { sends, timers, trace, work } = fx;
        cost += work.signs as u64 * costs.sign_us + work.verifies as u64 * costs.verify_us + work.exec_us;
        let sends = match node.adversary.as_mut() {
            Some(a) => {
                let sends = a.intercept(&node.replica, sends);
                let behavior = a.behavior().name().to_string();
                for seq in a.take_affected() {
                    self.trace.push(TraceRecord::Fault { t: now, replica: r, seq, behavior: behavior.clone() });
                }
                sends
            }
            None => sends,
        };
        let n = node.replica.quorum().n();
        let mut wire = Vec::new();
        for o in &sends {
            for to in destinations(o, r, n) {
                cost += costs.send(o.bytes.len());
                wire.push((to, o.clone()));
            }
        }
        node.busy = true;
        let done = now + cost;
        self.trace.extend(trace);
        for (at, timer) in timers {
            self.schedule(at.max(done), Event::ReplicaTimer { r, timer });
        }
        for (to, o) in wire {
            self.transmit(done, Endpoint::Replica(r), to, &o);
        }
        self.schedule(done, Event::CpuFree { r });
    }

    fn transmit(&mut self, at: u64, from: Endpoint, to: Endpoint, o: &Outgoing) {
        let entry = self.metrics.messages.entry(o.kind().name().to_string()).or_default();
        entry.count += 1;
        entry.bytes += o.bytes.len() as u64;
        let (delay, loss) = self.scenario.network.link(from, to);
        if loss > 0.0 && self.net_rng.gen_bool(loss) {
            self.metrics.dropped += 1;
            return;
        }
        let d = match delay {
            DelayModel::Fixed { fixed_us } => fixed_us,
            DelayModel::Uniform { min_us, max_us } => self.net_rng.gen_range(min_us..=max_us),
        };
        self.schedule(at + d, Event::Arrive { to, from, bytes: o.bytes.clone() });
    }

    fn client_start(&mut self, c: ClientId) {
        let size = self.scenario.workload.request_size;
        let slot = &mut self.clients[c.0 as usize];
        if slot.remaining == 0 || slot.client.pending().is_some() {
            return;
        }
        slot.remaining -= 1;
        let op = self.generator.generate_op(&mut slot.rng, size);
        if self.metrics.completed + self.metrics.failed == 0 && self.metrics.first_invoke_us == 0 {
            self.metrics.first_invoke_us = self.now;
        }
        let fx = slot.client.invoke(self.now, op);
        self.client_effects(c, fx);
    }

    fn client_effects(&mut self, c: ClientId, fx: ClientEffects) {
        let n = self.nodes.len() as u32;
        for o in &fx.sends {
            let to: Vec<Endpoint> = match o.dest {
                Dest::Replicas => (0..n).map(|r| Endpoint::Replica(ReplicaId(r))).collect(),
                Dest::Replica(r) => vec![Endpoint::Replica(r)],
                Dest::Client(_) => Vec::new(),
            };
            for to in to {
                self.transmit(self.now, Endpoint::Client(c), to, o);
            }
        }
        if let Some(at) = fx.timer {
            self.schedule(at, Event::ClientTimer { c });
        }
        match fx.event {
            Some(ClientEvent::Accepted { request_id, result, latency_us }) => {
                self.trace.push(TraceRecord::ClientAccept { t: self.now, client: c, request_id, result: digest(&result), latency_us });
                self.metrics.completed += 1;
                self.metrics.latencies_us.push(latency_us);
                self.metrics.last_accept_us = self.now;
                let think = self.scenario.workload.think_us;
                self.schedule(self.now + think, Event::ClientStart { c });
            }
            Some(ClientEvent::Failed { request_id }) => {
                // A failed call ends the client's workload: without view
                // change nothing will make later calls succeed.
                self.trace.push(TraceRecord::ClientFail { t: self.now, client: c, request_id });
                self.metrics.failed += 1;
                self.clients[c.0 as usize].remaining = 0;
            }
            None => {}
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

fn destinations(o: &Outgoing, me: ReplicaId, n: u32) -> Vec<Endpoint> {
    match o.dest {
        Dest::Replicas => (0..n).filter(|r| *r != me.0).map(|r| Endpoint::Replica(ReplicaId(r))).collect(),
        Dest::Replica(r) => vec![Endpoint::Replica(r)],
        Dest::Client(c) => vec![Endpoint::Client(c)],
    }
}
