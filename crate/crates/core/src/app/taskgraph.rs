use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;

use super::{expect_mask, pad_op, AppError, Application, CallContext, CheckFailure, ExecFailure, ExecInput, ExecMeter, ExecOutput, PostAttack, PostInput, BAD_OP_RESULT};
use crate::crypto::digest_parts;
use crate::mask::{NdClass, NdTypeMask};
use crate::wire::{NdPayload, Request};

/// A request-supplied task DAG. Operation layout: `seed: u64`,
/// `tasks: u16`, `max_fanin: u8`, then padding. Edges always point from a
/// lower to a higher task id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskGraph {
    pub preds: Vec<Vec<u16>>,
}

impl TaskGraph {
    pub fn parse(op: &[u8]) -> Option<TaskGraph> {
        if op.len() < 11 {
            return None;
        }
        let seed = u64::from_le_bytes(op[..8].try_into().unwrap());
        let tasks = u16::from_le_bytes(op[8..10].try_into().unwrap());
        let fanin = op[10];
        if tasks == 0 {
            return None;
        }
        Some(TaskGraph::generate(seed, tasks, fanin))
    }

    pub fn generate(seed: u64, tasks: u16, max_fanin: u8) -> TaskGraph {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let preds = (0..tasks)
            .map(|j| {
                let mut p: Vec<u16> = Vec::new();
                if j > 0 {
                    let k = rng.gen_range(0..=max_fanin as u16).min(j);
                    while (p.len() as u16) < k {
                        let i = rng.gen_range(0..j);
                        if !p.contains(&i) {
                            p.push(i);
                        }
                    }
                    p.sort_unstable();
                }
                p
            })
            .collect();
        TaskGraph { preds }
    }

    pub fn encode_op(seed: u64, tasks: u16, max_fanin: u8) -> Vec<u8> {
        let mut op = seed.to_le_bytes().to_vec();
        op.extend_from_slice(&tasks.to_le_bytes());
        op.push(max_fanin);
        op
    }

    pub fn len(&self) -> usize {
        self.preds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.preds.is_empty()
    }

    /// Permutation and topological-consistency check of a completion order.
    pub fn validate_order(&self, order: &[u16]) -> Result<(), String> {
        if order.len() != self.len() {
            return Err(format!("order lists {} tasks, graph has {}", order.len(), self.len()));
        }
        let mut pos = vec![usize::MAX; self.len()];
        for (i, &t) in order.iter().enumerate() {
            let slot = pos.get_mut(t as usize).ok_or_else(|| format!("unknown task {t}"))?;
            if *slot != usize::MAX {
                return Err(format!("task {t} listed twice"));
            }
            *slot = i;
        }
        for (t, ps) in self.preds.iter().enumerate() {
            for &p in ps {
                if pos[p as usize] > pos[t] {
                    return Err(format!("task {t} completes before its predecessor {p}"));
                }
            }
        }
        Ok(())
    }

    /// A random topological order.
    pub fn random_order(&self, rng: &mut dyn RngCore) -> Vec<u16> {
        let n = self.len();
        let mut missing: Vec<usize> = self.preds.iter().map(Vec::len).collect();
        let mut succs = vec![Vec::new(); n];
        for (t, ps) in self.preds.iter().enumerate() {
            for &p in ps {
                succs[p as usize].push(t as u16);
            }
        }
        let mut ready: Vec<u16> = (0..n as u16).filter(|&t| missing[t as usize] == 0).collect();
        let mut order = Vec::with_capacity(n);
        while !ready.is_empty() {
            let i = (rng.next_u32() as usize) % ready.len();
            let t = ready.swap_remove(i);
            order.push(t);
            for &s in &succs[t as usize] {
                missing[s as usize] -= 1;
                if missing[s as usize] == 0 {
                    ready.push(s);
                }
            }
        }
        order
    }
}

fn encode_order(order: &[u16]) -> Vec<u8> {
    order.iter().flat_map(|t| t.to_le_bytes()).collect()
}

fn decode_order(bytes: &[u8]) -> Option<Vec<u16>> {
    if !bytes.len().is_multiple_of(2) {
        return None;
    }
    Some(bytes.chunks(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect())
}

/// Verifiable post-determinable service: runs the tasks of a DAG in some
/// topological order and folds each task into an order-sensitive
/// accumulator. The completion order is recorded; backups verify it is a
/// topological order before agreeing on it, then replay it.
#[derive(Debug)]
pub struct VpostTaskGraph {
    order_bytes: usize,
    runs: u64,
    acc: u64,
}

impl VpostTaskGraph {
    /// `order_bytes` is the size of the recorded order (two bytes per task).
    pub fn new(order_bytes: usize) -> Self {
        VpostTaskGraph { order_bytes, runs: 0, acc: 0 }
    }

    fn mix(acc: u64, task: u16) -> u64 {
        let x = acc ^ (task as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        x.rotate_left(17).wrapping_mul(0xBF58_476D_1CE4_E5B9) ^ (x >> 29)
    }
}

impl Application for VpostTaskGraph {
    fn name(&self) -> &str {
        "vpost_taskgraph"
    }

    fn nd_mask(&self, _request: &Request) -> NdTypeMask {
        NdTypeMask::of(&[NdClass::Vpost])
    }

    fn propose_value(&mut self, _ctx: &CallContext, request: &Request, _rng: &mut dyn RngCore) -> Result<(NdTypeMask, NdPayload), AppError> {
        Ok((self.nd_mask(request), NdPayload::new()))
    }

    fn check_value(&self, _ctx: &CallContext, request: &Request, mask: NdTypeMask, payload: &NdPayload) -> Result<(), CheckFailure> {
        expect_mask(self.nd_mask(request), mask)?;
        if payload.get(NdClass::Vpost).is_some() {
            return Err(CheckFailure::ValueRejected("post-determined value proposed before execution".into()));
        }
        Ok(())
    }

    fn check_post_value(&self, _ctx: &CallContext, request: &Request, values: &NdPayload) -> Result<(), CheckFailure> {
        let bytes = values.get(NdClass::Vpost).ok_or_else(|| CheckFailure::ValueRejected("missing VPOST order".into()))?;
        let order = decode_order(bytes).ok_or_else(|| CheckFailure::ValueRejected("odd-length order".into()))?;
        match TaskGraph::parse(&request.op) {
            Some(g) => g.validate_order(&order).map_err(CheckFailure::ValueRejected),
            None if order.is_empty() => Ok(()),
            None => Err(CheckFailure::ValueRejected("order for unparseable request".into())),
        }
    }

    fn execute(&mut self, _ctx: &CallContext, request: &Request, input: ExecInput<'_>, meter: &mut ExecMeter) -> Result<ExecOutput, ExecFailure> {
        let graph = TaskGraph::parse(&request.op);
        let (order, record) = match input.post {
            PostInput::Record(rng) => {
                let order = graph.as_ref().map(|g| g.random_order(rng)).unwrap_or_default();
                (order, true)
            }
            PostInput::Replay(values) => {
                let bytes = values.get(NdClass::Vpost).ok_or_else(|| ExecFailure::Crash("no VPOST order".into()))?;
                let order = decode_order(bytes).ok_or_else(|| ExecFailure::Crash("odd-length order".into()))?;
                match &graph {
                    Some(g) => g.validate_order(&order).map_err(ExecFailure::Crash)?,
                    None if !order.is_empty() => return Err(ExecFailure::Crash("order for unparseable request".into())),
                    None => {}
                }
                (order, false)
            }
        };
        let recorded = if record {
            NdPayload::single(NdClass::Vpost, encode_order(&order))
        } else {
            NdPayload::new()
        };
        if graph.is_none() {
            return Ok(ExecOutput { result: BAD_OP_RESULT.to_vec(), recorded });
        }
        let mut acc = self.acc;
        for &t in &order {
            meter.charge(1)?;
            acc = Self::mix(acc, t);
        }
        self.acc = acc;
        self.runs += 1;
        let result = digest_parts([acc.to_le_bytes().as_slice(), &self.runs.to_le_bytes()]).0.to_vec();
        Ok(ExecOutput { result, recorded })
    }

    fn snapshot(&self) -> Vec<u8> {
        let mut v = self.runs.to_le_bytes().to_vec();
        v.extend_from_slice(&self.acc.to_le_bytes());
        v
    }

    fn restore(&mut self, bytes: &[u8]) -> Result<(), AppError> {
        if bytes.len() != 16 {
            return Err(AppError("taskgraph snapshot must be 16 bytes".into()));
        }
        self.runs = u64::from_le_bytes(bytes[..8].try_into().unwrap());
        self.acc = u64::from_le_bytes(bytes[8..].try_into().unwrap());
        Ok(())
    }

    fn forge_post_values(&self, request: &Request, honest: &NdPayload, attack: PostAttack, _rng: &mut dyn RngCore) -> Option<NdPayload> {
        if attack != PostAttack::Corrupt {
            return None;
        }
        let graph = TaskGraph::parse(&request.op)?;
        let mut order = decode_order(honest.get(NdClass::Vpost)?)?;
        let pos: Vec<usize> = {
            let mut p = vec![0; order.len()];
            for (i, &t) in order.iter().enumerate() {
                p[t as usize] = i;
            }
            p
        };
        // swap some task with one of its predecessors; without edges, list a task twice
        match graph.preds.iter().enumerate().find(|(_, ps)| !ps.is_empty()) {
            Some((t, ps)) => order.swap(pos[t], pos[ps[0] as usize]),
            None if order.len() >= 2 => order[1] = order[0],
            None => order.push(0),
        }
        Some(NdPayload::single(NdClass::Vpost, encode_order(&order)))
    }

    fn generate_op(&self, rng: &mut dyn RngCore, size: usize) -> Vec<u8> {
        let tasks = (self.order_bytes / 2).clamp(1, u16::MAX as usize) as u16;
        pad_op(TaskGraph::encode_op(rng.next_u64(), tasks, 3), size)
    }
}
