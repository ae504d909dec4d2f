use dvnc::bounds::*;
use proptest::prelude::*;

#[path = "oracles/bounds_values.rs"]
#[allow(clippy::excessive_precision)]
#[allow(dead_code)]
mod oracle;

fn sig_close(a: f64, b: f64, digits: i32) -> bool {
    (a - b).abs() <= b.abs() * 10f64.powi(-digits)
}

fn reference() -> BoundParams {
    serde_json::from_str(r#"{"C_J":1,"tC_J":1,"L":64,"G":4,"m":16,"zeta":100,"delta":0.05,"n":10000,"L_d":1,"tL_d":1,"rho":1}"#).unwrap()
}

#[test]
fn covering_term_matches_high_precision() {
    for (m, want) in oracle::COVERING {
        assert!(sig_close(covering_term(m), want, 12), "m={m}: {} vs {want}", covering_term(m));
    }
}

#[test]
fn reference_comparison_matches_high_precision() {
    let p = reference();
    let c = bound_comparison(&p).unwrap();
    assert!(sig_close(c.with_radicand, oracle::WITH_RADICAND, 12));
    assert!(sig_close(c.without_radicand, oracle::WITHOUT_RADICAND, 12));
    assert!(sig_close(c.ratio_log10, oracle::RATIO_LOG10, 12));
    assert!(sig_close(c.with, oracle::WITH_BOUND, 12));
    assert!(sig_close(c.without, oracle::WITHOUT_BOUND, 12));
    assert!(!c.with_overflow);
}

#[test]
fn overflowing_codebook_power_is_flagged() {
    let p = BoundParams { codebook_size: 1 << 20, segments: 64, ..reference() };
    let v = discretized_bound(&p).unwrap();
    assert!(v.overflow && v.value.is_infinite());
    assert!(continuous_bound(&BoundParams { m: 300, ..reference() }).unwrap().is_finite());
    assert!(continuous_ln_radicand(&BoundParams { m: 10_000, ..reference() }).is_finite());
}

fn params() -> impl Strategy<Value = BoundParams> {
    (0.0..10.0f64, 0.0..10.0f64, 1u64..64, 1u32..4, 1u32..40, 0.0..1e4f64, 0.001..0.999f64, 1.0..1e6f64, 0.0..10.0f64, 1u32..4).prop_map(
        |(cj, tcj, l, g, m, zeta, delta, n, ld, rho)| BoundParams {
            loss_bound: cj,
            loss_bound_continuous: tcj,
            codebook_size: l,
            segments: g,
            m,
            zeta,
            delta,
            n,
            lipschitz: ld,
            lipschitz_continuous: ld,
            rho,
            varsigma: 0.5,
            radius: 2.0,
        },
    )
}

proptest! {
    #[test]
    fn bounds_shrink_with_n_and_grow_with_constants(p in params(), bump in 1.01..4.0f64) {
        let with = |p: &BoundParams| discretized_bound(p).unwrap().value;
        let without = |p: &BoundParams| continuous_bound(p).unwrap();
        let more_n = BoundParams { n: p.n * bump, ..p.clone() };
        prop_assert!(with(&more_n) <= with(&p));
        prop_assert!(without(&more_n) <= without(&p));
        let more_c = BoundParams { loss_bound: p.loss_bound * bump + 0.1, loss_bound_continuous: p.loss_bound_continuous * bump + 0.1, ..p.clone() };
        prop_assert!(with(&more_c) >= with(&p));
        prop_assert!(without(&more_c) >= without(&p));
        let more_l = BoundParams { lipschitz: p.lipschitz * bump + 0.1, lipschitz_continuous: p.lipschitz_continuous * bump + 0.1, ..p.clone() };
        prop_assert!(with(&more_l) >= with(&p));
        prop_assert!(without(&more_l) >= without(&p));
    }

    // Below m = 8 a large L^G can exceed 4(4√m)^m, e.g. m = 4 gives 16384.
    #[test]
    fn discretization_shrinks_the_radicand(
        (m, l) in (8u32..200).prop_flat_map(|m| (Just(m), 1u64..=10_000 / m as u64)),
        g in 1u32..8,
        zeta in 0.0..1e6f64,
        delta in 0.001..0.999f64,
    ) {
        prop_assume!((l as f64).powi(g as i32) <= 1e8);
        let p = BoundParams { codebook_size: l, segments: g, m, zeta, delta, ..reference() };
        prop_assert!(discretized_radicand(&p).ln() < continuous_ln_radicand(&p));
    }
}

#[test]
fn small_messages_are_reported_faithfully() {
    let p = BoundParams { codebook_size: 100, segments: 4, m: 4, zeta: 0.0, delta: 1.0, ..reference() };
    let c = bound_comparison(&p).unwrap();
    assert!(c.ratio_log10 < 0.0);
    assert_eq!(c.without_radicand.round(), 16384.0);
}
