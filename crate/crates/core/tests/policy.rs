mod common;

use std::collections::BTreeMap;
use std::time::Duration;

use accordion::arch::{ArchSpec, DepthConfig, Scheme};
use accordion::nncore::RngState;
use accordion::policy::{DepthPolicy, PolicyKind};
use common::fig2_spec;
use proptest::prelude::*;

#[test]
fn full_else_uniform_statistics() {
    let spec = ArchSpec::default();
    let total = spec.total_units();
    let p = DepthPolicy::full_else_uniform(Scheme::CoML, &spec, 0.5).unwrap();
    let mut rng = RngState::new(2024);
    let draws = 20_000;
    let mut counts = vec![0usize; total + 1];
    for _ in 0..draws {
        counts[p.sample(&mut rng).kept_units] += 1;
    }
    assert_eq!(counts[0], 0);
    let full_rate = counts[total] as f64 / draws as f64;
    assert!((0.48..=0.52).contains(&full_rate), "full rate {full_rate}");
    let q = 0.5 / (total - 1) as f64;
    let mean = draws as f64 * q;
    let sigma = (draws as f64 * q * (1.0 - q)).sqrt();
    for (n, &c) in counts.iter().enumerate().take(total).skip(1) {
        assert!((c as f64 - mean).abs() <= 3.0 * sigma, "n = {n}: {c} vs {mean} ± {sigma}");
    }
}

#[test]
fn full_probability_is_exactly_p_full() {
    let spec = ArchSpec::default();
    let p = DepthPolicy::full_else_uniform(Scheme::BlockCoML, &spec, 0.3).unwrap();
    assert_eq!(p.probability(spec.total_units()), 0.3);
    let sum: f64 = (1..=spec.total_units()).map(|n| p.probability(n)).sum();
    assert!((sum - 1.0).abs() < 1e-12);
}

#[test]
fn fig2_link_selects_sixty_percent() {
    let spec = fig2_spec();
    let size = |n: usize| spec.payload_bits(&DepthConfig::new(Scheme::CoML, n, &spec).unwrap());
    assert_eq!(size(spec.total_units()), 80_000_000);
    assert_eq!(size(4), 48_000_000);
    let p = DepthPolicy::from_throughput(
        &[240_000_000],
        Duration::from_millis(200),
        size,
        Scheme::CoML,
        spec.total_units(),
    )
    .unwrap();
    assert_eq!(p.probability(4), 1.0);
}

#[test]
fn linear_sizes_sixty_percent() {
    // ten units, each a tenth of an 80 Mbit model
    let size = |n: usize| 8_000_000 * n as u64;
    let p = DepthPolicy::from_throughput(&[240_000_000], Duration::from_millis(200), size, Scheme::CoML, 10).unwrap();
    assert_eq!(p.probability(6), 1.0);
}

#[test]
fn two_point_throughput_gives_even_split() {
    let size = |n: usize| 1_000 * n as u64;
    let p = DepthPolicy::from_throughput(&[3_000, 7_000, 3_000, 7_000], Duration::from_secs(1), size, Scheme::BlockCoML, 10)
        .unwrap();
    assert_eq!(p.probability(3), 0.5);
    assert_eq!(p.probability(7), 0.5);
}

fn expected_n(p: &DepthPolicy) -> f64 {
    (1..=p.total_units).map(|n| n as f64 * p.probability(n)).sum()
}

proptest! {
    #[test]
    fn throughput_policy_is_monotone(samples in prop::collection::vec(1u64..20_000, 1..20), bump in prop::collection::vec(0u64..5_000, 20)) {
        let size = |n: usize| 500 + 900 * n as u64;
        let higher: Vec<u64> = samples.iter().zip(&bump).map(|(s, b)| s + b).collect();
        let lo = DepthPolicy::from_throughput(&samples, Duration::from_secs(1), size, Scheme::CoML, 12).unwrap();
        let hi = DepthPolicy::from_throughput(&higher, Duration::from_secs(1), size, Scheme::CoML, 12).unwrap();
        prop_assert!(expected_n(&hi) >= expected_n(&lo) - 1e-12);
    }

    #[test]
    fn constructed_policies_normalize(samples in prop::collection::vec(1u64..50_000, 1..30), reqs in prop::collection::btree_map(0u64..20_000, 1u64..9, 1..10)) {
        let size = |n: usize| 1_000 + 1_000 * n as u64;
        let a = DepthPolicy::from_throughput(&samples, Duration::from_millis(500), size, Scheme::CoML, 15).unwrap();
        let b = DepthPolicy::from_size_requests(&reqs, size, Scheme::CoML, 15).unwrap();
        for p in [a, b] {
            let PolicyKind::Categorical { weights } = &p.kind else { panic!("categorical expected") };
            prop_assert!((weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn samples_stay_in_range(p_full in 0.0f64..=1.0, seed in any::<u64>()) {
        let spec = ArchSpec::default();
        let p = DepthPolicy::full_else_uniform(Scheme::CoML, &spec, p_full).unwrap();
        let mut rng = RngState::new(seed);
        for _ in 0..200 {
            let n = p.sample(&mut rng).kept_units;
            prop_assert!((1..=spec.total_units()).contains(&n));
        }
    }
}

#[test]
fn size_request_weights() {
    let full = 100_000u64;
    let size = |n: usize| full * n as u64 / 10;
    let mut h = BTreeMap::new();
    h.insert(full * 3 / 10, 2);
    h.insert(full * 9 / 10, 1);
    let p = DepthPolicy::from_size_requests(&h, size, Scheme::CoML, 10).unwrap();
    assert!((p.probability(3) - 2.0 / 3.0).abs() < 1e-12);
    assert!((p.probability(9) - 1.0 / 3.0).abs() < 1e-12);
}
