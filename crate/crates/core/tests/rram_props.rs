use bnn_rram_core::rram::{
    analytic_ber, canonical_distributions, condition_catalogue, equal_density_threshold,
    monte_carlo_ber, programming_cost, ResistanceDistribution,
};
use proptest::prelude::*;

fn dist(mu: f64, sigma: f64) -> ResistanceDistribution {
    ResistanceDistribution::new(mu, sigma).unwrap()
}

proptest! {
    #[test]
    fn ber_falls_as_states_separate(d1 in 0.0f64..12.0, extra in 0.01f64..4.0, sigma in 0.2f64..2.0) {
        let ber = |d: f64| {
            let (l, h) = (dist(0.0, sigma), dist(d, sigma));
            analytic_ber(&l, &h, (d / 2.0).exp()).unwrap()
        };
        prop_assert!(ber(d1 + extra) <= ber(d1));
    }

    #[test]
    fn crossing_point_minimizes_ber(d in 0.5f64..8.0, s1 in 0.3f64..1.5, s2 in 0.3f64..1.5) {
        let (l, h) = (dist(0.0, s1), dist(d, s2));
        let t = equal_density_threshold(&l, &h).unwrap();
        let best = analytic_ber(&l, &h, t).unwrap();
        for k in -40..=40 {
            let probe = t.ln() + f64::from(k) * 0.05;
            prop_assert!(analytic_ber(&l, &h, probe.exp()).unwrap() >= best - 1e-15);
        }
    }

    #[test]
    fn cost_is_linear_in_bits_and_affine_in_set_fraction(
        n in 0u64..1_000_000, m in 0u64..1_000_000, f in 0.0f64..=1.0, g in 0.0f64..=1.0, idx in 0usize..3,
    ) {
        let c = condition_catalogue()[idx];
        let e = |bits, frac| programming_cost(bits, frac, &c).unwrap().energy_pj;
        let tol = 1e-9 * (e(n + m, 1.0) + e(n + m, 0.0) + 1.0);
        prop_assert!((e(n + m, f) - e(n, f) - e(m, f)).abs() <= tol);
        let mid = 0.5 * (f + g);
        prop_assert!((e(n, mid) - 0.5 * (e(n, f) + e(n, g))).abs() <= tol);
        prop_assert_eq!(programming_cost(n, f, &c).unwrap().max_reprogram_cycles, c.cyclability);
    }
}

#[test]
fn monte_carlo_converges_within_binomial_envelope() {
    for c in condition_catalogue() {
        let fit = canonical_distributions(&c).unwrap();
        let p = analytic_ber(&fit.lrs, &fit.hrs, fit.threshold).unwrap();
        for n in [1_000usize, 10_000, 100_000, 300_000] {
            let est = monte_carlo_ber(&fit.lrs, &fit.hrs, fit.threshold, n, 17).unwrap();
            let sd = (p * (1.0 - p) / n as f64).sqrt();
            assert!(
                (est - p).abs() <= 4.0 * sd,
                "{:?} n={n}: {est} vs {p}",
                c.name
            );
        }
    }
}
