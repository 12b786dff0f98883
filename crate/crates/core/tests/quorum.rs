mod support;

use ndbft::ids::QuorumConfig;
use proptest::prelude::*;

#[test]
fn certificates_need_exactly_two_f_others() {
    for f in 0..=3 {
        support::check_certificates(f).unwrap_or_else(|e| panic!("f={f}: {e}"));
    }
}

#[test]
fn decisions_need_exactly_two_f_plus_one() {
    for f in 0..=3 {
        support::check_decision_size(f).unwrap();
    }
}

proptest! {
    #[test]
    fn quorum_sizes(f in 0u32..64) {
        let q = QuorumConfig::new(f);
        prop_assert_eq!(q.n(), 3 * f + 1);
        prop_assert_eq!(q.certificate_size(), 2 * f as usize);
        prop_assert_eq!(q.decision_size(), 2 * f as usize + 1);
        prop_assert_eq!(q.reply_quorum(), f as usize + 1);
        // Two certificates plus their owners overlap in a correct replica.
        prop_assert!(2 * (q.certificate_size() + 1) > q.n() as usize + f as usize);
    }
}
