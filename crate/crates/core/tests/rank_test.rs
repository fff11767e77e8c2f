mod common;

use common::checks::{mw_exact_worst, mw_normal_worst};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use semmac::rng::SeedStream;
use semmac::switch::{mann_whitney_one_sided, SwitchState};

#[test]
fn exact_path_matches_enumeration_for_all_small_sizes() {
    let worst = mw_exact_worst();
    assert!(worst < 1e-12, "worst difference {worst}");
}

#[test]
fn normal_approximation_close_to_exact_for_moderate_sizes() {
    let worst = mw_normal_worst();
    assert!(worst < 0.02, "worst difference {worst}");
}

#[test]
fn large_samples_use_the_approximation() {
    let a: Vec<f64> = (0..21).map(f64::from).collect();
    let b: Vec<f64> = (0..20).map(|i| f64::from(i) + 0.5).collect();
    assert!(!mann_whitney_one_sided(&a, &b).unwrap().exact);
}

proptest! {
    #[test]
    fn p_is_a_probability_and_order_free(
        a in proptest::collection::vec(0.0f64..1.0, 1..15),
        b in proptest::collection::vec(0.0f64..1.0, 1..15),
        seed in 0u64..1000,
    ) {
        let r = mann_whitney_one_sided(&a, &b).unwrap();
        prop_assert!((0.0..=1.0).contains(&r.p));
        let mut rng = SeedStream::new(seed).rng("shuffle");
        let (mut a2, mut b2) = (a.clone(), b.clone());
        a2.shuffle(&mut rng);
        b2.shuffle(&mut rng);
        let r2 = mann_whitney_one_sided(&a2, &b2).unwrap();
        prop_assert_eq!(r.u, r2.u);
        prop_assert!((r.p - r2.p).abs() < 1e-12);
    }

    #[test]
    fn identical_samples_never_reject(a in proptest::collection::vec(0.0f64..1.0, 1..12)) {
        prop_assert!(mann_whitney_one_sided(&a, &a).unwrap().p >= 0.5);
    }

    #[test]
    fn shifting_b_up_never_raises_p(
        a in proptest::collection::vec(0.0f64..1.0, 2..10),
        b in proptest::collection::vec(0.0f64..1.0, 2..10),
    ) {
        let up: Vec<f64> = b.iter().map(|v| v + 2.0).collect();
        prop_assert!(mann_whitney_one_sided(&a, &up).unwrap().p <= mann_whitney_one_sided(&a, &b).unwrap().p + 1e-12);
    }

    #[test]
    fn switch_indicator_rises_at_most_once(ps in proptest::collection::vec(0.0f64..1.0, 1..60)) {
        let mut s = SwitchState::new(5);
        let trace: Vec<bool> = ps.iter().map(|&p| s.observe(p, 0.05)).collect();
        let rises = trace.windows(2).filter(|w| !w[0] && w[1]).count();
        let falls = trace.windows(2).filter(|w| w[0] && !w[1]).count();
        prop_assert!(rises <= 1);
        prop_assert_eq!(falls, 0);
    }

    #[test]
    fn pooled_size_is_twelve_when_tm_divides_144(t_m in prop::sample::select(vec![12usize, 24, 36, 48, 72, 144]), extra in 0usize..5) {
        let cfg = semmac::switch::SwitchConfig { t_m, ..Default::default() };
        let k = cfg.k();
        let mut s = SwitchState::new(k);
        for e in 0..k + 1 + extra {
            s.push(vec![e as f64; t_m / 12]);
        }
        prop_assert_eq!(s.pooled(k).unwrap().len(), 12);
    }
}
