use rand::RngCore;

use super::{expect_mask, pad_op, AppError, Application, CallContext, CheckFailure, ExecFailure, ExecInput, ExecMeter, ExecOutput};
use crate::crypto::{digest_parts, Digest};
use crate::mask::{NdClass, NdTypeMask};
use crate::wire::{Encode, NdPayload, Request};

/// Verifiable pre-determinable randomness.
///
/// The value for a request is `H(view || request digest)`, stretched to
/// `value_size` bytes, so every backup can recompute and compare what the
/// primary proposed. It is bound to the request rather than its seq so
/// null requests that shift seqs do not change it.
#[derive(Debug)]
pub struct VpreRand {
    value_size: usize,
    count: u64,
    acc: Digest,
}

impl VpreRand {
    pub fn new(value_size: usize) -> Self {
        VpreRand { value_size, count: 0, acc: Digest::ZERO }
    }

    pub fn value_for(ctx: &CallContext, size: usize) -> Vec<u8> {
        let seed = digest_parts([ctx.view.to_bytes().as_slice(), &ctx.request_digest.0]);
        expand(&seed, size)
    }
}

/// Counter-mode stretch of a digest; the first block is the seed itself.
pub(crate) fn expand(seed: &Digest, size: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(size + 32);
    out.extend_from_slice(&seed.0);
    let mut i = 1u32;
    while out.len() < size {
        out.extend_from_slice(&digest_parts([seed.0.as_slice(), &i.to_le_bytes()]).0);
        i += 1;
    }
    out.truncate(size);
    out
}

impl Application for VpreRand {
    fn name(&self) -> &str {
        "vpre_rand"
    }

    fn nd_mask(&self, _request: &Request) -> NdTypeMask {
        NdTypeMask::of(&[NdClass::Vpre])
    }

    fn propose_value(&mut self, ctx: &CallContext, _request: &Request, _rng: &mut dyn RngCore) -> Result<(NdTypeMask, NdPayload), AppError> {
        Ok((self.nd_mask(_request), NdPayload::single(NdClass::Vpre, Self::value_for(ctx, self.value_size))))
    }

    fn check_value(&self, ctx: &CallContext, request: &Request, mask: NdTypeMask, payload: &NdPayload) -> Result<(), CheckFailure> {
        expect_mask(self.nd_mask(request), mask)?;
        match payload.get(NdClass::Vpre) {
            Some(v) if v == Self::value_for(ctx, self.value_size).as_slice() => Ok(()),
            Some(_) => Err(CheckFailure::ValueRejected("VPRE value differs from local recomputation".into())),
            None => Err(CheckFailure::ValueRejected("missing VPRE value".into())),
        }
    }

    fn execute(&mut self, _ctx: &CallContext, request: &Request, input: ExecInput<'_>, meter: &mut ExecMeter) -> Result<ExecOutput, ExecFailure> {
        meter.charge(1)?;
        let v = input.pre.get(NdClass::Vpre).ok_or_else(|| ExecFailure::Crash("no VPRE value".into()))?;
        let draw = digest_parts([v, &request.op]);
        self.count += 1;
        self.acc = digest_parts([self.acc.0.as_slice(), &draw.0]);
        let mut result = draw.0.to_vec();
        result.extend_from_slice(&self.acc.0);
        Ok(ExecOutput { result, recorded: NdPayload::new() })
    }

    fn snapshot(&self) -> Vec<u8> {
        let mut v = self.count.to_le_bytes().to_vec();
        v.extend_from_slice(&self.acc.0);
        v
    }

    fn restore(&mut self, bytes: &[u8]) -> Result<(), AppError> {
        if bytes.len() != 40 {
            return Err(AppError("vpre_rand snapshot must be 40 bytes".into()));
        }
        self.count = u64::from_le_bytes(bytes[..8].try_into().unwrap());
        self.acc = Digest(bytes[8..].try_into().unwrap());
        Ok(())
    }

    fn generate_op(&self, rng: &mut dyn RngCore, size: usize) -> Vec<u8> {
        let mut op = vec![0u8; size.clamp(1, 32)];
        rng.fill_bytes(&mut op);
        pad_op(op, size)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::app::testutil::{ctx, request};
    use crate::crypto::digest;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn proposal_is_recomputable() {
        let mut app = VpreRand::new(32);
        let c = ctx(5);
        let req = request(vec![1, 2]);
        let (mask, payload) = app.propose_value(&c, &req, &mut ChaCha12Rng::seed_from_u64(0)).unwrap();
        // independent recomputation: SHA-256 over view || request digest, LE fixed width
        let mut buf = Vec::new();
        buf.extend_from_slice(&c.view.0.to_le_bytes());
        buf.extend_from_slice(&c.request_digest.0);
        assert_eq!(payload.get(NdClass::Vpre).unwrap(), digest(&buf).0.as_slice());
        assert!(app.check_value(&c, &req, mask, &payload).is_ok());
    }

    #[test]
    fn tampered_value_rejected() {
        let app = VpreRand::new(64);
        let c = ctx(2);
        let req = request(vec![]);
        let mut v = VpreRand::value_for(&c, 64);
        assert_eq!(v.len(), 64);
        v[40] ^= 1;
        let res = app.check_value(&c, &req, app.nd_mask(&req), &NdPayload::single(NdClass::Vpre, v));
        assert!(matches!(res, Err(CheckFailure::ValueRejected(_))));
    }

    #[test]
    fn wrong_mask_is_type_mismatch() {
        let app = VpreRand::new(32);
        let c = ctx(2);
        let req = request(vec![]);
        let payload = NdPayload::single(NdClass::Vpre, VpreRand::value_for(&c, 32));
        let res = app.check_value(&c, &req, NdTypeMask::of(&[NdClass::Npre]), &payload);
        assert!(matches!(res, Err(CheckFailure::TypeMismatch { .. })));
    }
}
