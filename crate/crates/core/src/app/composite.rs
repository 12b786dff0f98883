use rand::RngCore;

use super::{expect_mask, pad_op, AppError, Application, CallContext, CheckFailure, ExecFailure, ExecInput, ExecMeter, ExecOutput, PostAttack, PostInput, ReplayHazard};
use crate::mask::NdTypeMask;
use crate::wire::codec::{Reader, Writer};
use crate::wire::{NdPayload, Request};

/// Runs several services side by side on one request. The operation is
/// `u32` part count, then one length-prefixed operation per part, then
/// padding. Each part sees only the nondeterministic values of its own
/// classes; parts must not share a class.
pub struct Composite {
    parts: Vec<Box<dyn Application>>,
    name: String,
}

impl Composite {
    pub fn new(parts: Vec<Box<dyn Application>>) -> Self {
        let name = parts.iter().map(|p| p.name()).collect::<Vec<_>>().join("+");
        Composite { parts, name }
    }

    fn split(&self, request: &Request) -> Vec<Request> {
        let ops = Self::parse_ops(&request.op).filter(|ops| ops.len() == self.parts.len());
        let ops = ops.unwrap_or_else(|| vec![Vec::new(); self.parts.len()]);
        ops.into_iter().map(|op| Request { client: request.client, request_id: request.request_id, op }).collect()
    }

    fn parse_ops(op: &[u8]) -> Option<Vec<Vec<u8>>> {
        let mut r = Reader::new(op);
        let n = r.u32().ok()?;
        if n as usize > op.len() {
            return None;
        }
        (0..n).map(|_| r.bytes().ok()).collect()
    }

    fn part_masks(&self, subs: &[Request]) -> Vec<NdTypeMask> {
        self.parts.iter().zip(subs).map(|(p, r)| p.nd_mask(r)).collect()
    }
}

impl std::fmt::Debug for Composite {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Composite").field("parts", &self.name).finish()
    }
}

impl Application for Composite {
    fn name(&self) -> &str {
        &self.name
    }

    fn nd_mask(&self, request: &Request) -> NdTypeMask {
        let subs = self.split(request);
        self.part_masks(&subs).into_iter().fold(NdTypeMask::DETERMINISTIC, NdTypeMask::union)
    }

    fn propose_value(&mut self, ctx: &CallContext, request: &Request, rng: &mut dyn RngCore) -> Result<(NdTypeMask, NdPayload), AppError> {
        let subs = self.split(request);
        let mut mask = NdTypeMask::DETERMINISTIC;
        let mut payload = NdPayload::new();
        for (p, r) in self.parts.iter_mut().zip(&subs) {
            let (m, v) = p.propose_value(ctx, r, rng)?;
            mask = mask.union(m);
            for s in v.segments() {
                payload.set(s.class, s.bytes.clone());
            }
        }
        Ok((mask, payload))
    }

    fn check_value(&self, ctx: &CallContext, request: &Request, mask: NdTypeMask, payload: &NdPayload) -> Result<(), CheckFailure> {
        expect_mask(self.nd_mask(request), mask)?;
        let subs = self.split(request);
        for ((p, r), m) in self.parts.iter().zip(&subs).zip(self.part_masks(&subs)) {
            p.check_value(ctx, r, m, &payload.restrict(m))?;
        }
        Ok(())
    }

    fn check_post_value(&self, ctx: &CallContext, request: &Request, values: &NdPayload) -> Result<(), CheckFailure> {
        let subs = self.split(request);
        for ((p, r), m) in self.parts.iter().zip(&subs).zip(self.part_masks(&subs)) {
            if m.has_post() {
                p.check_post_value(ctx, r, &values.restrict(m))?;
            }
        }
        Ok(())
    }

    fn analyze_replay(&self, request: &Request, values: &NdPayload) -> Result<(), ReplayHazard> {
        let subs = self.split(request);
        for ((p, r), m) in self.parts.iter().zip(&subs).zip(self.part_masks(&subs)) {
            if m.has_post() {
                p.analyze_replay(r, &values.restrict(m))?;
            }
        }
        Ok(())
    }

    fn execute(&mut self, ctx: &CallContext, request: &Request, input: ExecInput<'_>, meter: &mut ExecMeter) -> Result<ExecOutput, ExecFailure> {
        let subs = self.split(request);
        let masks = self.part_masks(&subs);
        let ExecInput { pre, npre_shares, post } = input;
        let (mut rng, replay) = match post {
            PostInput::Record(rng) => (Some(rng), None),
            PostInput::Replay(v) => (None, Some(v)),
        };
        let mut results = Writer::new();
        results.u32(self.parts.len() as u32);
        let mut recorded = NdPayload::new();
        for ((p, r), m) in self.parts.iter_mut().zip(&subs).zip(masks) {
            let part_pre = pre.restrict(m);
            let part_post_values;
            let post = match (&mut rng, replay) {
                (Some(rng), _) => PostInput::Record(&mut **rng),
                (None, Some(v)) => {
                    part_post_values = v.restrict(m);
                    PostInput::Replay(&part_post_values)
                }
                (None, None) => unreachable!(),
            };
            let out = p.execute(ctx, r, ExecInput { pre: &part_pre, npre_shares, post }, meter)?;
            for s in out.recorded.segments() {
                recorded.set(s.class, s.bytes.clone());
            }
            results.bytes(&out.result);
        }
        Ok(ExecOutput { result: results.finish(), recorded })
    }

    fn snapshot(&self) -> Vec<u8> {
        let mut w = Writer::new();
        for p in &self.parts {
            w.bytes(&p.snapshot());
        }
        w.finish()
    }

    fn restore(&mut self, bytes: &[u8]) -> Result<(), AppError> {
        let mut r = Reader::new(bytes);
        for p in &mut self.parts {
            let b = r.bytes().map_err(|e| AppError(e.to_string()))?;
            p.restore(&b)?;
        }
        r.finish().map_err(|e| AppError(e.to_string()))
    }

    fn forge_post_values(&self, request: &Request, honest: &NdPayload, attack: PostAttack, rng: &mut dyn RngCore) -> Option<NdPayload> {
        let subs = self.split(request);
        let mut out = honest.clone();
        let mut forged_any = false;
        for ((p, r), m) in self.parts.iter().zip(&subs).zip(self.part_masks(&subs)) {
            if let Some(f) = p.forge_post_values(r, &honest.restrict(m), attack, rng) {
                for s in f.segments() {
                    out.set(s.class, s.bytes.clone());
                }
                forged_any = true;
            }
        }
        forged_any.then_some(out)
    }

    fn generate_op(&self, rng: &mut dyn RngCore, size: usize) -> Vec<u8> {
        let share = size / self.parts.len().max(1);
        let mut w = Writer::new();
        w.u32(self.parts.len() as u32);
        for p in &self.parts {
            w.bytes(&p.generate_op(rng, share.saturating_sub(8)));
        }
        pad_op(w.finish(), size)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::app::testutil::{ctx, request};
    use crate::app::{AppSpec, ExecMeter};
    use crate::ids::ReplicaId;
    use crate::mask::NdClass;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn all_classes_record_and_replay() {
        let spec = AppSpec::for_mask(NdTypeMask::new(15).unwrap()).with_nd_size(64);
        let mut primary = spec.build();
        let mut backup = spec.build();
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let req = request(primary.generate_op(&mut rng, 256));
        let c = ctx(3);
        let (mask, payload) = primary.propose_value(&c, &req, &mut rng).unwrap();
        assert_eq!(mask.bits(), 15);
        backup.check_value(&c, &req, mask, &payload).unwrap();
        let shares: Vec<(ReplicaId, Vec<u8>)> = (0..3).map(|i| (ReplicaId(i), vec![i as u8; 64])).collect();
        let pre = payload.restrict(NdTypeMask::of(&[NdClass::Vpre]));
        let out = primary
            .execute(&c, &req, ExecInput { pre: &pre, npre_shares: &shares, post: PostInput::Record(&mut rng) }, &mut ExecMeter::unlimited())
            .unwrap();
        assert!(out.recorded.get(NdClass::Vpost).is_some() && out.recorded.get(NdClass::Npost).is_some());
        backup.check_post_value(&c, &req, &out.recorded).unwrap();
        backup.analyze_replay(&req, &out.recorded).unwrap();
        let again = backup
            .execute(&c, &req, ExecInput { pre: &pre, npre_shares: &shares, post: PostInput::Replay(&out.recorded) }, &mut ExecMeter::unlimited())
            .unwrap();
        assert_eq!(again.result, out.result);
        assert_eq!(backup.state_digest(), primary.state_digest());
    }

    #[test]
    fn snapshot_round_trip() {
        let spec = AppSpec::for_mask(NdTypeMask::new(9).unwrap());
        let a = spec.build();
        let mut b = spec.build();
        b.restore(&a.snapshot()).unwrap();
        assert!(b.restore(&[1, 2, 3]).is_err());
    }
}
