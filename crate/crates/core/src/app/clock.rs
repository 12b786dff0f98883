use rand::RngCore;

use super::{expect_mask, pad_op, AppError, Application, CallContext, CheckFailure, ExecFailure, ExecInput, ExecMeter, ExecOutput};
use crate::mask::{NdClass, NdTypeMask};
use crate::wire::{NdPayload, Request};

/// Clock-reading service. The primary proposes its local time; a backup
/// accepts it if it lies within `tolerance_us` of its own clock.
#[derive(Debug)]
pub struct ClockApp {
    tolerance_us: u64,
    last: u64,
    count: u64,
}

impl ClockApp {
    pub fn new(tolerance_us: u64) -> Self {
        ClockApp { tolerance_us, last: 0, count: 0 }
    }
}

impl Application for ClockApp {
    fn name(&self) -> &str {
        "vpre_clock"
    }

    fn nd_mask(&self, _request: &Request) -> NdTypeMask {
        NdTypeMask::of(&[NdClass::Vpre])
    }

    fn propose_value(&mut self, ctx: &CallContext, request: &Request, _rng: &mut dyn RngCore) -> Result<(NdTypeMask, NdPayload), AppError> {
        Ok((self.nd_mask(request), NdPayload::single(NdClass::Vpre, ctx.local_time_us.to_le_bytes().to_vec())))
    }

    fn check_value(&self, ctx: &CallContext, request: &Request, mask: NdTypeMask, payload: &NdPayload) -> Result<(), CheckFailure> {
        expect_mask(self.nd_mask(request), mask)?;
        let proposed = payload
            .get(NdClass::Vpre)
            .and_then(|b| <[u8; 8]>::try_from(b).ok())
            .map(u64::from_le_bytes)
            .ok_or_else(|| CheckFailure::ValueRejected("malformed clock value".into()))?;
        let skew = proposed.abs_diff(ctx.local_time_us);
        if skew > self.tolerance_us {
            return Err(CheckFailure::ValueRejected(format!("clock skew {skew} us exceeds {} us", self.tolerance_us)));
        }
        Ok(())
    }

    fn execute(&mut self, _ctx: &CallContext, _request: &Request, input: ExecInput<'_>, meter: &mut ExecMeter) -> Result<ExecOutput, ExecFailure> {
        meter.charge(1)?;
        let t = input
            .pre
            .get(NdClass::Vpre)
            .and_then(|b| <[u8; 8]>::try_from(b).ok())
            .map(u64::from_le_bytes)
            .ok_or_else(|| ExecFailure::Crash("no clock value".into()))?;
        // timestamps handed to the service never go backwards
        self.last = self.last.max(t);
        self.count += 1;
        let mut result = self.last.to_le_bytes().to_vec();
        result.extend_from_slice(&self.count.to_le_bytes());
        Ok(ExecOutput { result, recorded: NdPayload::new() })
    }

    fn snapshot(&self) -> Vec<u8> {
        let mut v = self.last.to_le_bytes().to_vec();
        v.extend_from_slice(&self.count.to_le_bytes());
        v
    }

    fn restore(&mut self, bytes: &[u8]) -> Result<(), AppError> {
        if bytes.len() != 16 {
            return Err(AppError("clock snapshot must be 16 bytes".into()));
        }
        self.last = u64::from_le_bytes(bytes[..8].try_into().unwrap());
        self.count = u64::from_le_bytes(bytes[8..].try_into().unwrap());
        Ok(())
    }

    fn generate_op(&self, _rng: &mut dyn RngCore, size: usize) -> Vec<u8> {
        pad_op(b"now".to_vec(), size)
    }
}
