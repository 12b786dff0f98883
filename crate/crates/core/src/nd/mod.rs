//! Nondeterminism control: phase planning per type mask, the NPRE
//! pre-prepare-update exchange, the primary's postnd log, and the
//! execution watchdog.

pub mod plan;
pub mod postnd;
pub mod ppu;
pub mod watchdog;

pub use plan::{plan_phases, plan_phases_bits, PhasePlan};
pub use postnd::{PostndEntry, PostndLog, PostndStatus};
pub use ppu::{resolve_decision, verify_decision, PpuState};
pub use watchdog::{find_cycle, guarded_execute, WatchdogFailure};
