use rand::RngCore;

use super::{expect_mask, pad_op, AppError, Application, CallContext, CheckFailure, ExecFailure, ExecInput, ExecMeter, ExecOutput};
use crate::crypto::{digest_parts, Digest};
use crate::mask::NdTypeMask;
use crate::wire::{NdPayload, Request};

/// Deterministic service: folds every operation into a running digest.
#[derive(Debug, Default)]
pub struct Register {
    count: u64,
    acc: Digest,
}

impl Register {
    pub fn new() -> Self {
        Register::default()
    }
}

impl Application for Register {
    fn name(&self) -> &str {
        "register"
    }

    fn nd_mask(&self, _request: &Request) -> NdTypeMask {
        NdTypeMask::DETERMINISTIC
    }

    fn propose_value(&mut self, _ctx: &CallContext, _request: &Request, _rng: &mut dyn RngCore) -> Result<(NdTypeMask, NdPayload), AppError> {
        Ok((NdTypeMask::DETERMINISTIC, NdPayload::new()))
    }

    fn check_value(&self, _ctx: &CallContext, _request: &Request, mask: NdTypeMask, payload: &NdPayload) -> Result<(), CheckFailure> {
        expect_mask(NdTypeMask::DETERMINISTIC, mask)?;
        if !payload.is_empty() {
            return Err(CheckFailure::ValueRejected("deterministic request carries values".into()));
        }
        Ok(())
    }

    fn execute(&mut self, _ctx: &CallContext, request: &Request, _input: ExecInput<'_>, meter: &mut ExecMeter) -> Result<ExecOutput, ExecFailure> {
        meter.charge(1)?;
        self.count += 1;
        self.acc = digest_parts([self.acc.0.as_slice(), &request.op]);
        let mut result = self.acc.0.to_vec();
        result.extend_from_slice(&self.count.to_le_bytes());
        Ok(ExecOutput { result, recorded: NdPayload::new() })
    }

    fn snapshot(&self) -> Vec<u8> {
        let mut v = self.count.to_le_bytes().to_vec();
        v.extend_from_slice(&self.acc.0);
        v
    }

    fn restore(&mut self, bytes: &[u8]) -> Result<(), AppError> {
        if bytes.len() != 40 {
            return Err(AppError("register snapshot must be 40 bytes".into()));
        }
        self.count = u64::from_le_bytes(bytes[..8].try_into().unwrap());
        self.acc = Digest(bytes[8..].try_into().unwrap());
        Ok(())
    }

    fn generate_op(&self, rng: &mut dyn RngCore, size: usize) -> Vec<u8> {
        let mut op = vec![0u8; size.clamp(1, 64)];
        rng.fill_bytes(&mut op);
        pad_op(op, size)
    }
}
