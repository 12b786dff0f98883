use rand::RngCore;
use sha2::{Digest as _, Sha256};
use thiserror::Error;

use super::{expect_mask, pad_op, AppError, Application, CallContext, CheckFailure, ExecFailure, ExecInput, ExecMeter, ExecOutput};
use crate::ids::{QuorumConfig, ReplicaId};
use crate::mask::{NdClass, NdTypeMask};
use crate::wire::{NdPayload, Request};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CombineError {
    #[error("decision set has {got} shares, expected {expected}")]
    WrongSize { expected: usize, got: usize },
    #[error("proposer {0} appears twice")]
    DuplicateProposer(ReplicaId),
}

/// Combines a decision set: SHA-256 over the shares concatenated in
/// ascending proposer order. The input order does not matter.
pub fn npre_combine(shares: &[(ReplicaId, Vec<u8>)], quorum: QuorumConfig) -> Result<[u8; 32], CombineError> {
    if shares.len() != quorum.decision_size() {
        return Err(CombineError::WrongSize { expected: quorum.decision_size(), got: shares.len() });
    }
    let mut sorted: Vec<&(ReplicaId, Vec<u8>)> = shares.iter().collect();
    sorted.sort_by_key(|(r, _)| *r);
    if let Some(w) = sorted.windows(2).find(|w| w[0].0 == w[1].0) {
        return Err(CombineError::DuplicateProposer(w[0].0));
    }
    let mut h = Sha256::new();
    for (_, s) in sorted {
        h.update(s);
    }
    Ok(h.finalize().into())
}

/// Lottery draws seeded by collectively determined randomness. Each
/// replica contributes a random share; no single replica, including the
/// primary, controls the combined value.
#[derive(Debug)]
pub struct NpreLottery {
    share_size: usize,
    draws: u64,
    last: [u8; 32],
}

impl NpreLottery {
    pub fn new(share_size: usize) -> Self {
        NpreLottery { share_size, draws: 0, last: [0; 32] }
    }

    fn tickets(op: &[u8]) -> u32 {
        op.get(..4).map(|b| u32::from_le_bytes(b.try_into().unwrap())).unwrap_or(1).max(1)
    }
}

impl Application for NpreLottery {
    fn name(&self) -> &str {
        "npre_lottery"
    }

    fn nd_mask(&self, _request: &Request) -> NdTypeMask {
        NdTypeMask::of(&[NdClass::Npre])
    }

    fn propose_value(&mut self, _ctx: &CallContext, request: &Request, rng: &mut dyn RngCore) -> Result<(NdTypeMask, NdPayload), AppError> {
        let mut share = vec![0u8; self.share_size];
        rng.fill_bytes(&mut share);
        Ok((self.nd_mask(request), NdPayload::single(NdClass::Npre, share)))
    }

    fn check_value(&self, _ctx: &CallContext, request: &Request, mask: NdTypeMask, payload: &NdPayload) -> Result<(), CheckFailure> {
        expect_mask(self.nd_mask(request), mask)?;
        match payload.get(NdClass::Npre) {
            Some(s) if s.len() == self.share_size => Ok(()),
            Some(s) => Err(CheckFailure::ValueRejected(format!("share of {} bytes, expected {}", s.len(), self.share_size))),
            None => Err(CheckFailure::ValueRejected("missing primary share".into())),
        }
    }

    fn execute(&mut self, ctx: &CallContext, request: &Request, input: ExecInput<'_>, meter: &mut ExecMeter) -> Result<ExecOutput, ExecFailure> {
        meter.charge(2)?;
        let combined = npre_combine(input.npre_shares, ctx.quorum).map_err(|e| ExecFailure::Crash(e.to_string()))?;
        let tickets = Self::tickets(&request.op);
        let winner = u32::from_le_bytes(combined[..4].try_into().unwrap()) % tickets;
        self.draws += 1;
        self.last = combined;
        let mut result = combined.to_vec();
        result.extend_from_slice(&winner.to_le_bytes());
        result.extend_from_slice(&self.draws.to_le_bytes());
        Ok(ExecOutput { result, recorded: NdPayload::new() })
    }

    fn snapshot(&self) -> Vec<u8> {
        let mut v = self.draws.to_le_bytes().to_vec();
        v.extend_from_slice(&self.last);
        v
    }

    fn restore(&mut self, bytes: &[u8]) -> Result<(), AppError> {
        if bytes.len() != 40 {
            return Err(AppError("lottery snapshot must be 40 bytes".into()));
        }
        self.draws = u64::from_le_bytes(bytes[..8].try_into().unwrap());
        self.last.copy_from_slice(&bytes[8..]);
        Ok(())
    }

    fn generate_op(&self, rng: &mut dyn RngCore, size: usize) -> Vec<u8> {
        let tickets = 1 + rng.next_u32() % 1000;
        pad_op(tickets.to_le_bytes().to_vec(), size)
    }
}
