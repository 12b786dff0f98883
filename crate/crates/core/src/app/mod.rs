//! The application upcall contract and the example replicated services.
//!
//! The replication layer talks to a service only through [`Application`]:
//! the primary asks it to `propose_value`, backups ask it to
//! `check_value`, and every replica calls `execute` once the request and
//! its nondeterministic inputs are agreed. Post-determined values are
//! produced by `execute` itself at the primary (record mode) and fed back
//! into `execute` at the backups (replay mode).

mod clock;
mod composite;
mod counter;
mod lottery;
mod register;
mod taskgraph;
mod vrand;

use std::fmt;

use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::Digest;
use crate::ids::{QuorumConfig, ReplicaId, SeqNum, ViewNum};
use crate::mask::{NdClass, NdTypeMask};
use crate::wire::{NdPayload, Request};

pub use clock::ClockApp;
pub use composite::Composite;
pub use counter::{CounterOp, NpostCounter, LEASE_WINDOW};
pub use lottery::{npre_combine, CombineError, NpreLottery};
pub use register::Register;
pub use taskgraph::{TaskGraph, VpostTaskGraph};
pub use vrand::VpreRand;

/// What the replication layer tells the application about the call site.
#[derive(Clone, Copy, Debug)]
pub struct CallContext {
    pub replica: ReplicaId,
    pub view: ViewNum,
    pub seq: SeqNum,
    pub request_digest: Digest,
    /// Local clock reading in microseconds.
    pub local_time_us: u64,
    pub quorum: QuorumConfig,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CheckFailure {
    #[error("nondeterminism type mismatch: expected {expected}, got {got}")]
    TypeMismatch { expected: NdTypeMask, got: NdTypeMask },
    #[error("nondeterministic value rejected: {0}")]
    ValueRejected(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("application error: {0}")]
pub struct AppError(pub String);

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ExecFailure {
    #[error("execution crashed: {0}")]
    Crash(String),
    #[error("execution budget of {budget_us} us exhausted")]
    BudgetExhausted { budget_us: u64 },
}

/// Reasons a post-determined value must not be replayed at all.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ReplayHazard {
    #[error("replay would deadlock: wait-for cycle among threads {0:?}")]
    Deadlock(Vec<u32>),
    #[error("recorded values inconsistent with request: {0}")]
    Inconsistent(String),
}

/// Simulated-time budget for one `execute` call.
#[derive(Debug, Clone)]
pub struct ExecMeter {
    budget_us: u64,
    used_us: u64,
}

impl ExecMeter {
    pub fn new(budget_us: u64) -> Self {
        ExecMeter { budget_us, used_us: 0 }
    }

    pub fn unlimited() -> Self {
        ExecMeter::new(u64::MAX)
    }

    /// Consumes `us` microseconds; fails once the budget is exceeded.
    pub fn charge(&mut self, us: u64) -> Result<(), ExecFailure> {
        self.used_us = self.used_us.saturating_add(us);
        if self.used_us > self.budget_us {
            self.used_us = self.budget_us;
            return Err(ExecFailure::BudgetExhausted { budget_us: self.budget_us });
        }
        Ok(())
    }

    pub fn used_us(&self) -> u64 {
        self.used_us
    }
}

/// Post-determined input to `execute`.
pub enum PostInput<'a> {
    /// Generate and record the values (primary).
    Record(&'a mut dyn RngCore),
    /// Follow previously agreed values (backups, replay checks).
    Replay(&'a NdPayload),
}

impl fmt::Debug for PostInput<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PostInput::Record(_) => f.write_str("Record"),
            PostInput::Replay(p) => f.debug_tuple("Replay").field(p).finish(),
        }
    }
}

/// Agreed nondeterministic input for one execution.
#[derive(Debug)]
pub struct ExecInput<'a> {
    /// Pre-determinable values agreed during ordering (VPRE segment).
    pub pre: &'a NdPayload,
    /// The 2f+1 NPRE shares, sorted by proposer.
    pub npre_shares: &'a [(ReplicaId, Vec<u8>)],
    pub post: PostInput<'a>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExecOutput {
    pub result: Vec<u8>,
    /// Post-determined values recorded in this execution; empty on replay.
    pub recorded: NdPayload,
}

/// Ways a faulty primary can tamper with post-determined values.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PostAttack {
    /// Values the application will reject (verifiable classes) or that
    /// are plausible but differ from what was recorded (non-verifiable).
    Corrupt,
    /// A lock order whose replay deadlocks.
    Deadlock,
    /// An order that passes deadlock analysis but hangs the replay.
    Crash,
}

/// The upcall interface between the replication layer and a service.
pub trait Application: Send {
    fn name(&self) -> &str;

    /// Nondeterminism classes this service exhibits for `request`.
    fn nd_mask(&self, request: &Request) -> NdTypeMask;

    /// Primary side: report the mask and propose pre-determinable values.
    fn propose_value(
        &mut self,
        ctx: &CallContext,
        request: &Request,
        rng: &mut dyn RngCore,
    ) -> Result<(NdTypeMask, NdPayload), AppError>;

    /// Backup side: verify the primary's mask and pre-determinable values.
    fn check_value(
        &self,
        ctx: &CallContext,
        request: &Request,
        mask: NdTypeMask,
        payload: &NdPayload,
    ) -> Result<(), CheckFailure>;

    /// Verify post-determined values before agreeing on them. Only called
    /// for verifiable post-determinable classes.
    fn check_post_value(&self, _ctx: &CallContext, _request: &Request, _values: &NdPayload) -> Result<(), CheckFailure> {
        Ok(())
    }

    /// Static analysis run before replaying post-determined values.
    fn analyze_replay(&self, _request: &Request, _values: &NdPayload) -> Result<(), ReplayHazard> {
        Ok(())
    }

    fn execute(
        &mut self,
        ctx: &CallContext,
        request: &Request,
        input: ExecInput<'_>,
        meter: &mut ExecMeter,
    ) -> Result<ExecOutput, ExecFailure>;

    fn snapshot(&self) -> Vec<u8>;

    fn restore(&mut self, bytes: &[u8]) -> Result<(), AppError>;

    fn state_digest(&self) -> Digest {
        crate::crypto::digest(&self.snapshot())
    }

    /// Adversarial helper used by fault scripts: tamper with recorded
    /// post-determined values. `None` when the attack does not apply.
    fn forge_post_values(
        &self,
        _request: &Request,
        _honest: &NdPayload,
        _attack: PostAttack,
        _rng: &mut dyn RngCore,
    ) -> Option<NdPayload> {
        None
    }

    /// Workload generator: a valid operation of roughly `size` bytes.
    fn generate_op(&self, rng: &mut dyn RngCore, size: usize) -> Vec<u8>;
}

/// Pads a result with zeros up to the fixed reply size.
pub(crate) fn fit_reply(mut result: Vec<u8>, reply_size: usize) -> Vec<u8> {
    if result.len() < reply_size {
        result.resize(reply_size, 0);
    }
    result
}

/// Pads an operation with zeros up to `size`.
pub(crate) fn pad_op(mut op: Vec<u8>, size: usize) -> Vec<u8> {
    if op.len() < size {
        op.resize(size, 0);
    }
    op
}

/// Marker prefix of results for operations the service could not parse.
pub const BAD_OP_RESULT: &[u8] = b"ERR:bad-op";

/// Which example service to run.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum AppKind {
    /// Deterministic register; mask 0.
    Register,
    VpreRand,
    VpreClock { tolerance_us: u64 },
    NpreLottery,
    VpostTaskgraph,
    NpostCounter,
    /// Lottery state update plus counter execution (NPRE|NPOST).
    CompositeDemo,
    /// One example service per class present in the mask.
    ForMask { mask: NdTypeMask },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AppSpec {
    #[serde(flatten)]
    pub kind: AppKind,
    /// Size in bytes of the nondeterministic values per class.
    #[serde(default = "default_nd_size")]
    pub nd_size: usize,
    /// Fixed reply size; 0 keeps natural result sizes.
    #[serde(default)]
    pub reply_size: usize,
    /// Logical threads per counter request.
    #[serde(default = "default_threads")]
    pub threads: u8,
    /// Shared cells in the counter service.
    #[serde(default = "default_cells")]
    pub cells: u8,
}

fn default_nd_size() -> usize {
    32
}
fn default_threads() -> u8 {
    4
}
fn default_cells() -> u8 {
    8
}

impl AppSpec {
    pub fn new(kind: AppKind) -> Self {
        AppSpec { kind, nd_size: default_nd_size(), reply_size: 0, threads: default_threads(), cells: default_cells() }
    }

    pub fn for_mask(mask: NdTypeMask) -> Self {
        AppSpec::new(AppKind::ForMask { mask })
    }

    pub fn with_nd_size(mut self, n: usize) -> Self {
        self.nd_size = n;
        self
    }

    pub fn with_reply_size(mut self, n: usize) -> Self {
        self.reply_size = n;
        self
    }

    pub fn build(&self) -> Box<dyn Application> {
        let nd = self.nd_size.max(1);
        let part = |c: NdClass| -> Box<dyn Application> {
            match c {
                NdClass::Vpre => Box::new(VpreRand::new(nd)),
                NdClass::Npre => Box::new(NpreLottery::new(nd)),
                NdClass::Vpost => Box::new(VpostTaskGraph::new(nd)),
                NdClass::Npost => Box::new(NpostCounter::new(self.threads.max(1), self.cells.max(2), nd)),
            }
        };
        let app: Box<dyn Application> = match &self.kind {
            AppKind::Register => Box::new(Register::new()),
            AppKind::VpreRand => part(NdClass::Vpre),
            AppKind::VpreClock { tolerance_us } => Box::new(ClockApp::new(*tolerance_us)),
            AppKind::NpreLottery => part(NdClass::Npre),
            AppKind::VpostTaskgraph => part(NdClass::Vpost),
            AppKind::NpostCounter => part(NdClass::Npost),
            AppKind::CompositeDemo => Box::new(Composite::new(vec![part(NdClass::Npre), part(NdClass::Npost)])),
            AppKind::ForMask { mask } => {
                let parts: Vec<Box<dyn Application>> = mask.classes().map(part).collect();
                match parts.len() {
                    0 => Box::new(Register::new()),
                    1 => parts.into_iter().next().unwrap(),
                    _ => Box::new(Composite::new(parts)),
                }
            }
        };
        if self.reply_size > 0 {
            Box::new(FixedReply { inner: app, reply_size: self.reply_size })
        } else {
            app
        }
    }
}

/// Wraps a service so every reply has the same size.
struct FixedReply {
    inner: Box<dyn Application>,
    reply_size: usize,
}

impl Application for FixedReply {
    fn name(&self) -> &str {
        self.inner.name()
    }
    fn nd_mask(&self, request: &Request) -> NdTypeMask {
        self.inner.nd_mask(request)
    }
    fn propose_value(&mut self, ctx: &CallContext, request: &Request, rng: &mut dyn RngCore) -> Result<(NdTypeMask, NdPayload), AppError> {
        self.inner.propose_value(ctx, request, rng)
    }
    fn check_value(&self, ctx: &CallContext, request: &Request, mask: NdTypeMask, payload: &NdPayload) -> Result<(), CheckFailure> {
        self.inner.check_value(ctx, request, mask, payload)
    }
    fn check_post_value(&self, ctx: &CallContext, request: &Request, values: &NdPayload) -> Result<(), CheckFailure> {
        self.inner.check_post_value(ctx, request, values)
    }
    fn analyze_replay(&self, request: &Request, values: &NdPayload) -> Result<(), ReplayHazard> {
        self.inner.analyze_replay(request, values)
    }
    fn execute(&mut self, ctx: &CallContext, request: &Request, input: ExecInput<'_>, meter: &mut ExecMeter) -> Result<ExecOutput, ExecFailure> {
        let mut out = self.inner.execute(ctx, request, input, meter)?;
        out.result = fit_reply(out.result, self.reply_size);
        Ok(out)
    }
    fn snapshot(&self) -> Vec<u8> {
        self.inner.snapshot()
    }
    fn restore(&mut self, bytes: &[u8]) -> Result<(), AppError> {
        self.inner.restore(bytes)
    }
    fn forge_post_values(&self, request: &Request, honest: &NdPayload, attack: PostAttack, rng: &mut dyn RngCore) -> Option<NdPayload> {
        self.inner.forge_post_values(request, honest, attack, rng)
    }
    fn generate_op(&self, rng: &mut dyn RngCore, size: usize) -> Vec<u8> {
        self.inner.generate_op(rng, size)
    }
}

/// Checks that the primary's mask equals ours.
pub(crate) fn expect_mask(expected: NdTypeMask, got: NdTypeMask) -> Result<(), CheckFailure> {
    if expected == got {
        Ok(())
    } else {
        Err(CheckFailure::TypeMismatch { expected, got })
    }
}

/// Replays `request` from recorded values and reports whether the result
/// and end state match the original execution bit for bit.
///
/// `app` must be in the pre-execution state; `original_result` and
/// `original_state` come from the recording run.
#[allow(clippy::too_many_arguments)]
pub fn app_execute_replay_equivalence(
    app: &mut dyn Application,
    ctx: &CallContext,
    request: &Request,
    pre: &NdPayload,
    npre_shares: &[(ReplicaId, Vec<u8>)],
    recorded: &NdPayload,
    original_result: &[u8],
    original_state: &Digest,
) -> bool {
    let input = ExecInput { pre, npre_shares, post: PostInput::Replay(recorded) };
    match app.execute(ctx, request, input, &mut ExecMeter::unlimited()) {
        Ok(out) => out.result == original_result && &app.state_digest() == original_state,
        Err(_) => false,
    }
}

#[cfg(test)]
pub(crate) mod testutil {
    use super::*;
    use crate::crypto::digest;

    pub fn ctx(seq: u64) -> CallContext {
        CallContext {
            replica: ReplicaId(0),
            view: ViewNum(0),
            seq: SeqNum(seq),
            request_digest: digest(&seq.to_le_bytes()),
            local_time_us: 1_000_000,
            quorum: QuorumConfig::new(1),
        }
    }

    pub fn request(op: Vec<u8>) -> Request {
        Request { client: crate::ids::ClientId(0), request_id: 1, op }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn mask_stability_across_instances() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        for bits in 0..16u8 {
            let spec = AppSpec::for_mask(NdTypeMask::new(bits).unwrap());
            let a = spec.build();
            let b = spec.build();
            for _ in 0..5 {
                let req = testutil::request(a.generate_op(&mut rng, 64));
                assert_eq!(a.nd_mask(&req), b.nd_mask(&req));
                assert_eq!(a.nd_mask(&req).bits(), bits);
            }
        }
    }

    #[test]
    fn fixed_reply_size() {
        let spec = AppSpec::new(AppKind::Register).with_reply_size(1024);
        let mut app = spec.build();
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let req = testutil::request(app.generate_op(&mut rng, 1024));
        assert_eq!(req.op.len(), 1024);
        let out = app
            .execute(
                &testutil::ctx(1),
                &req,
                ExecInput { pre: &NdPayload::new(), npre_shares: &[], post: PostInput::Replay(&NdPayload::new()) },
                &mut ExecMeter::unlimited(),
            )
            .unwrap();
        assert_eq!(out.result.len(), 1024);
    }

    #[test]
    fn app_spec_toml_shape() {
        let spec: AppSpec = toml::from_str("kind = \"for_mask\"\nmask = \"NPRE|NPOST\"\nnd_size = 256\n").unwrap();
        assert_eq!(spec.kind, AppKind::ForMask { mask: NdTypeMask::parse("NPRE|NPOST").unwrap() });
        assert_eq!(spec.nd_size, 256);
        let clock: AppSpec = toml::from_str("kind = \"vpre_clock\"\ntolerance_us = 500\n").unwrap();
        assert_eq!(clock.kind, AppKind::VpreClock { tolerance_us: 500 });
    }
}
