use ndbft::app::{npre_combine, AppKind, AppSpec, Application, CallContext, ExecInput, ExecMeter, PostInput};
use ndbft::crypto::digest;
use ndbft::ids::{ClientId, QuorumConfig, ReplicaId, SeqNum, ViewNum};
use ndbft::mask::{NdClass, NdTypeMask};
use ndbft::wire::{NdPayload, Request};
use proptest::prelude::*;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;

fn ctx(seq: u64) -> CallContext {
    CallContext {
        replica: ReplicaId(0),
        view: ViewNum(0),
        seq: SeqNum(seq),
        request_digest: digest(&seq.to_le_bytes()),
        local_time_us: 1_000_000,
        quorum: QuorumConfig::new(1),
    }
}

fn specs() -> Vec<AppSpec> {
    let mut v: Vec<AppSpec> = [
        AppKind::Register,
        AppKind::VpreRand,
        AppKind::VpreClock { tolerance_us: 1000 },
        AppKind::NpreLottery,
        AppKind::VpostTaskgraph,
        AppKind::NpostCounter,
        AppKind::CompositeDemo,
    ]
    .into_iter()
    .map(AppSpec::new)
    .collect();
    v.extend((0..16).map(|b| AppSpec::for_mask(NdTypeMask::new(b).unwrap())));
    v
}

/// Everything a backup needs to execute one request: the agreed
/// pre-determined values, the NPRE shares and the recorded values.
struct Agreed {
    request: Request,
    pre: NdPayload,
    shares: Vec<(ReplicaId, Vec<u8>)>,
}

fn agree(app: &mut dyn Application, seq: u64, rng: &mut ChaCha12Rng) -> Agreed {
    let request = Request { client: ClientId(0), request_id: seq, op: app.generate_op(rng, 64) };
    let (mask, pre) = app.propose_value(&ctx(seq), &request, rng).unwrap();
    let shares = if mask.has(NdClass::Npre) {
        (0..3)
            .map(|r| {
                let mut s = vec![0; 32];
                rng.fill_bytes(&mut s);
                (ReplicaId(r), s)
            })
            .collect()
    } else {
        Vec::new()
    };
    Agreed { request, pre, shares }
}

fn record(app: &mut dyn Application, seq: u64, a: &Agreed, rng: &mut ChaCha12Rng) -> ndbft::app::ExecOutput {
    let mut exec_rng = ChaCha12Rng::seed_from_u64(rng.gen());
    let input = ExecInput { pre: &a.pre, npre_shares: &a.shares, post: PostInput::Record(&mut exec_rng) };
    app.execute(&ctx(seq), &a.request, input, &mut ExecMeter::unlimited()).unwrap()
}

#[test]
fn every_app_replays_identically_100_times() {
    for spec in specs() {
        for seed in 0..3 {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let mut primary = spec.build();
            for seq in 1..4 {
                let a = agree(primary.as_mut(), seq, &mut rng);
                record(primary.as_mut(), seq, &a, &mut rng);
            }
            let snapshot = primary.snapshot();
            let a = agree(primary.as_mut(), 4, &mut rng);
            let out = record(primary.as_mut(), 4, &a, &mut rng);
            for _ in 0..100 {
                let mut backup = spec.build();
                backup.restore(&snapshot).unwrap();
                let input = ExecInput { pre: &a.pre, npre_shares: &a.shares, post: PostInput::Replay(&out.recorded) };
                let replayed = backup.execute(&ctx(4), &a.request, input, &mut ExecMeter::unlimited()).unwrap();
                assert_eq!(replayed.result, out.result, "{:?} seed {seed}", spec.kind);
                assert_eq!(backup.state_digest(), primary.state_digest(), "{:?} seed {seed}", spec.kind);
            }
        }
    }
}

#[test]
fn snapshot_then_restore_preserves_state() {
    for spec in specs() {
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let mut app = spec.build();
        for seq in 1..6 {
            let a = agree(app.as_mut(), seq, &mut rng);
            record(app.as_mut(), seq, &a, &mut rng);
        }
        let mut copy = spec.build();
        copy.restore(&app.snapshot()).unwrap();
        assert_eq!(copy.state_digest(), app.state_digest(), "{:?}", spec.kind);
        assert_eq!(copy.snapshot(), app.snapshot(), "{:?}", spec.kind);
    }
}

fn share_set(f: u32) -> impl Strategy<Value = Vec<(ReplicaId, Vec<u8>)>> {
    let size = (2 * f + 1) as usize;
    (prop::sample::subsequence((0..3 * f + 1).collect::<Vec<_>>(), size), prop::collection::vec(prop::collection::vec(any::<u8>(), 1..48), size))
        .prop_map(|(ids, vals)| ids.into_iter().map(ReplicaId).zip(vals).collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn combine_ignores_arrival_order((f, shares, perm_seed) in (0u32..4).prop_flat_map(|f| (Just(f), share_set(f), any::<u64>()))) {
        let quorum = QuorumConfig::new(f);
        let mut shuffled = shares.clone();
        let mut rng = ChaCha12Rng::seed_from_u64(perm_seed);
        for i in (1..shuffled.len()).rev() {
            shuffled.swap(i, rng.gen_range(0..=i));
        }
        prop_assert_eq!(npre_combine(&shares, quorum).unwrap(), npre_combine(&shuffled, quorum).unwrap());
    }

    #[test]
    fn combine_depends_on_every_share((f, shares, pick, byte, bit) in (0u32..4).prop_flat_map(|f| (Just(f), share_set(f), any::<prop::sample::Index>(), any::<prop::sample::Index>(), 0u8..8))) {
        let quorum = QuorumConfig::new(f);
        let mut changed = shares.clone();
        let i = pick.index(changed.len());
        let j = byte.index(changed[i].1.len());
        changed[i].1[j] ^= 1 << bit;
        prop_assert_ne!(npre_combine(&shares, quorum).unwrap(), npre_combine(&changed, quorum).unwrap());
    }

    #[test]
    fn only_low_four_mask_bits_are_valid(b in any::<u8>()) {
        prop_assert_eq!(NdTypeMask::new(b).is_ok(), b < 16);
    }
}
