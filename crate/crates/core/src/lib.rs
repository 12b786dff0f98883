//! A Byzantine-fault-tolerant state-machine-replication engine with
//! explicit control of replica nondeterminism.
//!
//! Requests are ordered by a three-phase protocol (pre-prepare, prepare,
//! commit) over `n = 3f + 1` replicas. Each request carries a type mask
//! naming the nondeterminism classes its execution exhibits, and the
//! engine adds the matching phases: pre-determined values ride in the
//! pre-prepare (verifiable) or are collected from `2f + 1` replicas in a
//! pre-prepare-update round (non-verifiable); post-determined values are
//! recorded by the primary during execution and agreed in a post-commit
//! round before backups replay them.
//!
//! [`sim`] runs whole deployments deterministically in virtual time with
//! scripted Byzantine faults and checks every run for safety; [`bench`]
//! sweeps latency and throughput.

pub mod app;
pub mod bench;
pub mod client;
pub mod crypto;
pub mod engine;
pub mod ids;
pub mod mask;
pub mod nd;
pub mod sim;
pub mod wire;
