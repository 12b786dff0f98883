use std::collections::BTreeSet;

use ndbft::crypto::{digest, AuthTag, Digest, MAC_LEN, SIGNATURE_LEN};
use ndbft::ids::{ClientId, Endpoint, ReplicaId, SeqNum, ViewNum};
use ndbft::mask::{NdClass, NdTypeMask};
use ndbft::wire::{
    Body, DecisionSet, Decode, Encode, Envelope, Header, NdPayload, PostndRecord, PrePrepare, ProposerShare, ProtocolMessage,
    Request, ShareValue, SignedRequest,
};
use proptest::prelude::*;
use proptest::strategy::ValueTree;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

fn bytes(max: usize) -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(any::<u8>(), 0..max)
}

fn dig() -> impl Strategy<Value = Digest> {
    any::<[u8; 32]>().prop_map(Digest)
}

fn tag() -> impl Strategy<Value = AuthTag> {
    prop_oneof![
        prop::collection::vec(any::<u8>(), SIGNATURE_LEN).prop_map(|v| AuthTag::Signature(v.try_into().unwrap())),
        prop::collection::vec(any::<[u8; MAC_LEN]>(), 0..8).prop_map(AuthTag::Authenticator),
    ]
}

fn endpoint() -> impl Strategy<Value = Endpoint> {
    prop_oneof![(0u32..16).prop_map(|r| Endpoint::Replica(ReplicaId(r))), any::<u64>().prop_map(|c| Endpoint::Client(ClientId(c)))]
}

fn payload() -> impl Strategy<Value = NdPayload> {
    prop::collection::vec((0usize..4, bytes(40)), 0..5).prop_map(|segs| {
        let mut p = NdPayload::new();
        for (c, b) in segs {
            p.set(NdClass::ALL[c], b);
        }
        p
    })
}

fn mask() -> impl Strategy<Value = NdTypeMask> {
    (0u8..16).prop_map(|b| NdTypeMask::new(b).unwrap())
}

fn request() -> impl Strategy<Value = SignedRequest> {
    (any::<u64>(), any::<u64>(), bytes(64), tag())
        .prop_map(|(c, id, op, auth)| SignedRequest { request: Request { client: ClientId(c), request_id: id, op }, auth })
}

fn record() -> impl Strategy<Value = PostndRecord> {
    (any::<u64>(), payload(), dig()).prop_map(|(s, values, reply_digest)| PostndRecord { seq: SeqNum(s), values, reply_digest })
}

fn share() -> impl Strategy<Value = ProposerShare> {
    let value = prop_oneof![bytes(40).prop_map(ShareValue::Value), dig().prop_map(ShareValue::Digest)];
    (0u32..16, value, tag()).prop_map(|(p, value, tag)| ProposerShare { proposer: ReplicaId(p), value, tag })
}

fn shares() -> impl Strategy<Value = Vec<ProposerShare>> {
    prop::collection::vec(share(), 0..6).prop_map(|mut v| {
        v.sort_by_key(|s| s.proposer);
        v.dedup_by_key(|s| s.proposer);
        v
    })
}

fn body() -> impl Strategy<Value = Body> {
    let pp = (request(), mask(), payload(), prop::collection::vec(record(), 0..4)).prop_map(|(request, mask, payload, mut pb)| {
        pb.sort_by_key(|r| r.seq);
        pb.dedup_by_key(|r| r.seq);
        Body::PrePrepare(PrePrepare { request, mask, payload, piggyback: pb })
    });
    prop_oneof![
        request().prop_map(Body::Request),
        pp,
        (dig(), share()).prop_map(|(request_digest, share)| Body::PpuContrib { request_digest, share }),
        (dig(), shares()).prop_map(|(request_digest, entries)| Body::PpuDecision { request_digest, decision: DecisionSet { entries } }),
        (dig(), dig()).prop_map(|(request_digest, nd_digest)| Body::Prepare { request_digest, nd_digest }),
        (dig(), dig()).prop_map(|(request_digest, nd_digest)| Body::Commit { request_digest, nd_digest }),
        record().prop_map(|record| Body::PostcPrePrepare { record }),
        (any::<u64>(), dig()).prop_map(|(t, postnd_digest)| Body::PostcPrepare { target: SeqNum(t), postnd_digest }),
        (any::<u64>(), dig()).prop_map(|(t, postnd_digest)| Body::PostcCommit { target: SeqNum(t), postnd_digest }),
        (any::<u64>(), any::<u64>(), bytes(64), dig()).prop_map(|(c, request_id, result, result_digest)| Body::Reply {
            client: ClientId(c),
            request_id,
            result,
            result_digest
        }),
        (dig(), prop::collection::btree_set(0u32..16, 0..4)).prop_map(|(request_digest, missing)| Body::FetchNd {
            request_digest,
            missing: missing.into_iter().map(ReplicaId).collect()
        }),
        (dig(), shares()).prop_map(|(request_digest, shares)| Body::NdValues { request_digest, shares }),
    ]
}

fn message() -> impl Strategy<Value = ProtocolMessage> {
    (any::<u64>(), any::<u64>(), endpoint(), any::<u64>(), body()).prop_map(|(v, s, sender, epoch, body)| ProtocolMessage {
        header: Header { view: ViewNum(v), seq: SeqNum(s), sender, epoch },
        body,
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn decode_inverts_encode(m in message()) {
        let bytes = m.to_bytes();
        prop_assert_eq!(ProtocolMessage::from_bytes(&bytes).unwrap(), m.clone());
        // Re-encoding a decoded message is byte-identical.
        prop_assert_eq!(ProtocolMessage::from_bytes(&bytes).unwrap().to_bytes(), bytes);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn envelope_round_trip(m in message(), auth in tag()) {
        let env = Envelope { message: m, auth };
        let bytes = env.to_bytes();
        let (back, span) = Envelope::decode_with_span(&bytes).unwrap();
        prop_assert_eq!(&back, &env);
        prop_assert_eq!(bytes[..span].to_vec(), env.message.to_bytes());
    }

    #[test]
    fn truncation_never_yields_a_message(m in message(), frac in 0.0f64..1.0) {
        let bytes = m.to_bytes();
        let cut = (bytes.len() as f64 * frac) as usize;
        prop_assert!(ProtocolMessage::from_bytes(&bytes[..cut]).is_err());
    }

    #[test]
    fn garbage_never_panics(b in bytes(256)) {
        let _ = ProtocolMessage::from_bytes(&b);
        let _ = Envelope::decode_with_span(&b);
    }
}

#[test]
fn empty_digest_matches_reference() {
    assert_eq!(digest(b"").to_hex(), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
}

/// Mutates one field of a message.
fn mutate(m: &ProtocolMessage, rng: &mut ChaCha12Rng) -> ProtocolMessage {
    let mut m = m.clone();
    let bump = |x: &mut u64| *x = x.wrapping_add(1);
    let flip = |d: &mut Digest, i: usize| d.0[i % 32] ^= 1;
    match rng.gen_range(0..4) {
        0 => bump(&mut m.header.view.0),
        1 => bump(&mut m.header.seq.0),
        2 => bump(&mut m.header.epoch),
        _ => match &mut m.body {
            Body::PrePrepare(pp) => match rng.gen_range(0..4) {
                0 => pp.request.request.op.push(rng.gen()),
                1 => pp.mask = NdTypeMask::new((pp.mask.bits() + 1) % 16).unwrap(),
                2 => pp.payload.set(NdClass::Vpost, vec![rng.gen()]),
                _ => bump(&mut pp.request.request.request_id),
            },
            Body::Prepare { nd_digest, .. } | Body::Commit { nd_digest, .. } => flip(nd_digest, rng.gen()),
            Body::Reply { result, .. } => result.push(rng.gen()),
            Body::PostcPrepare { target, .. } => bump(&mut target.0),
            _ => bump(&mut m.header.seq.0),
        },
    }
    m
}

#[test]
fn single_field_mutations_change_the_digest() {
    let mut runner = proptest::test_runner::TestRunner::deterministic();
    let mut rng = ChaCha12Rng::seed_from_u64(3);
    let mut seen = BTreeSet::new();
    for _ in 0..1000 {
        let m = message().new_tree(&mut runner).unwrap().current();
        let mutated = mutate(&m, &mut rng);
        if mutated == m {
            continue;
        }
        let (a, b) = (digest(&m.to_bytes()), digest(&mutated.to_bytes()));
        assert_ne!(a, b, "mutation kept the digest: {m:?}");
        seen.insert(a);
        seen.insert(b);
    }
    assert!(seen.len() > 1000, "digest collisions across the corpus");
}

#[test]
fn equal_messages_encode_identically() {
    let mut runner = proptest::test_runner::TestRunner::deterministic();
    for _ in 0..200 {
        let m = message().new_tree(&mut runner).unwrap().current();
        assert_eq!(m.clone().to_bytes(), m.to_bytes());
    }
}
