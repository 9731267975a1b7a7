//! Randomized invariants across modules.

use geoperturb::budget::{location_predictability, verify_w_dp, BudgetLedger};
use geoperturb::grid::{hilbert_orders, LocationGrid, Metric};
use geoperturb::mechanism::{exp_mech_pmf, pf_exact_pmf, pf_pmf, PerturbationChannel};
use geoperturb::mobility::{
    advance_prior, bayes_posterior, check_simplex, delta_location_set, optimal_inference, TransitionMatrix,
};
use geoperturb::pls::{conditional_expected_error, find_pls, GuessDomain};
use proptest::prelude::*;

fn simplex(raw: Vec<f64>) -> Vec<f64> {
    let z: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / z).collect()
}

fn weights(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.01f64..1.0, n)
}

fn stochastic(n: usize) -> impl Strategy<Value = TransitionMatrix> {
    prop::collection::vec(weights(n), n)
        .prop_map(|rows| TransitionMatrix::from_rows(rows.into_iter().map(simplex).collect()).unwrap())
}

fn full_grid() -> LocationGrid {
    LocationGrid::new([8, 8, 8], [10.0, 10.0, 10.0]).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn triangle_inequality(i in 0usize..512, j in 0usize..512, k in 0usize..512) {
        let g = full_grid();
        let (ij, jk, ik) = (g.distance3(i, j).unwrap(), g.distance3(j, k).unwrap(), g.distance3(i, k).unwrap());
        prop_assert!(ik <= ij + jk + 1e-12);
        prop_assert!(g.distance2(i, j).unwrap() <= ij);
    }
}

proptest! {
    #[test]
    fn anisotropic_distances(dims in prop::array::uniform3(prop::sample::select(vec![1usize, 2, 4, 8])), ext in prop::array::uniform3(0.5f64..20.0), seed in any::<u64>()) {
        let g = LocationGrid::new(dims, ext).unwrap();
        let n = g.len();
        let (i, j, k) = ((seed % n as u64) as usize, (seed / 7 % n as u64) as usize, (seed / 131 % n as u64) as usize);
        let d = |a, b| g.distance3(a, b).unwrap();
        prop_assert!(d(i, k) <= d(i, j) + d(j, k) + 1e-12);
        prop_assert!(g.distance2(i, j).unwrap() <= d(i, j));
        prop_assert_eq!(d(i, j), d(j, i));
    }

    #[test]
    fn advance_keeps_simplex(n in 1usize..=16, seed in any::<u64>()) {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        let (prior, m) = random_chain(n, &mut rng);
        let mut p = prior;
        for _ in 0..5 {
            p = advance_prior(&p, &m).unwrap();
            prop_assert!(check_simplex(&p).is_ok());
        }
    }

    #[test]
    fn bayes_matches_joint_table(prior in weights(12).prop_map(simplex), channel in stochastic(12), obs in 0usize..12) {
        // Joint Pr(x, o) = prior(x) f(o|x); condition on the observed column.
        let joint: Vec<f64> = (0..12).map(|x| prior[x] * channel.get(x, obs)).collect();
        let marginal: f64 = joint.iter().sum();
        let lik: Vec<f64> = (0..12).map(|x| channel.get(x, obs)).collect();
        let post = bayes_posterior(&prior, &lik).unwrap();
        for x in 0..12 {
            prop_assert!((post[x] - joint[x] / marginal).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_chain_is_stationary(prior in weights(16).prop_map(simplex)) {
        let m = TransitionMatrix::identity(16);
        let mut p = prior.clone();
        for _ in 0..4 {
            p = advance_prior(&p, &m).unwrap();
        }
        for (a, b) in p.iter().zip(&prior) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn point_mass_is_inferred(k in 0usize..512) {
        let g = full_grid();
        let mut p = vec![0.0; 512];
        p[k] = 1.0;
        prop_assert_eq!(optimal_inference(&p, &g, Metric::Spatial), k);
    }

    #[test]
    fn delta_set_is_minimal(prior in weights(32).prop_map(simplex), delta in 0.01f64..0.99, real in 0usize..32) {
        let g = LocationGrid::new([4, 4, 2], [4.0, 4.0, 2.0]).unwrap();
        let s = delta_location_set(&prior, delta, real, &g, Metric::Spatial).unwrap();
        prop_assert!(s.mass >= 1.0 - delta - 1e-9);
        let smallest = s.members.iter().map(|&i| prior[i]).fold(f64::INFINITY, f64::min);
        prop_assert!(s.members.len() == 1 || s.mass - smallest < 1.0 - delta);
    }

    #[test]
    fn ledger_never_breaks_window(
        eps_w in 0.2f64..8.0,
        w in 1usize..7,
        n in 1usize..60,
        controls in prop::collection::vec(0.0f64..1.0, 1..40),
    ) {
        let floor = (eps_w / n as f64 / w as f64).min(0.01);
        let mut ledger = BudgetLedger::with_window_budget(eps_w, w, n, floor).unwrap();
        for c in controls {
            match ledger.allocate_with_control(c) {
                Ok(e) => {
                    prop_assert!(e >= floor && e <= ledger.eps_window());
                    ledger.commit(e);
                }
                Err(_) => ledger.commit_suppressed(),
            }
            prop_assert!(verify_w_dp(&ledger));
        }
    }

    #[test]
    fn allocation_nonincreasing_in_control(eps_w in 0.5f64..8.0, w in 1usize..6, n in 1usize..20, a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let ledger = BudgetLedger::with_window_budget(eps_w, w, n, 1e-6).unwrap();
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        prop_assert!(ledger.allocate_with_control(lo).unwrap() >= ledger.allocate_with_control(hi).unwrap());
        prop_assert!(ledger.allocate_with_control(lo).unwrap() <= ledger.eps_initial());
    }

    #[test]
    fn predictability_in_unit_interval(prior in weights(32).prop_map(simplex), i in 0usize..32) {
        let g = LocationGrid::new([4, 4, 2], [6.0, 6.0, 3.0]).unwrap();
        let lp = location_predictability(&prior, &g, Metric::Spatial, i);
        prop_assert!(lp > 0.0 && lp <= 1.0);
    }

    #[test]
    fn conditional_error_scale_invariant(prior in weights(32), scale in 0.01f64..100.0, mask in 1u32..u32::MAX) {
        let g = LocationGrid::new([4, 4, 2], [5.0, 5.0, 2.5]).unwrap();
        let members: Vec<usize> = (0..32).filter(|b| mask >> b & 1 == 1).collect();
        let scaled: Vec<f64> = (0..32).map(|i| if members.contains(&i) { prior[i] * scale } else { prior[i] }).collect();
        for domain in [GuessDomain::Map, GuessDomain::Members] {
            let a = conditional_expected_error(&members, &prior, &g, Metric::Spatial, domain).unwrap();
            let b = conditional_expected_error(&members, &scaled, &g, Metric::Spatial, domain).unwrap();
            prop_assert!((a - b).abs() <= 1e-9 * a.max(1.0));
        }
    }

    #[test]
    fn pf_prefers_nearer_candidates(ds in prop::collection::vec(0.1f64..12.0, 1..12), eps in 0.01f64..6.0, sens in 0.5f64..15.0) {
        let candidates: Vec<usize> = (1..=ds.len()).collect();
        let ch = PerturbationChannel::from_distances(0, candidates, ds.clone(), eps, sens).unwrap();
        let pmf = pf_pmf(&ch);
        prop_assert!((pmf.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for a in 0..ds.len() {
            for b in 0..ds.len() {
                if ds[a] < ds[b] {
                    prop_assert!(pmf[a] >= pmf[b] - 1e-12);
                }
            }
        }
        if ds.len() <= 7 {
            let exact = pf_exact_pmf(&ch).unwrap();
            for (x, y) in exact.iter().zip(&pmf) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn exp_mechanism_ratio(seed in any::<u64>(), eps in 0.05f64..5.0) {
        // 3DPIM: anchors x, y over the same output set, sensitivity = diameter of that set.
        let g = LocationGrid::new([4, 4, 4], [5.0, 5.0, 5.0]).unwrap();
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        let set = random_subset(64, 2, 9, &mut rng);
        let sens = geoperturb::pls::diameter(&set, &g, Metric::Spatial);
        let pmf_of = |a: usize| {
            let d: Vec<f64> = set.iter().map(|&c| g.distance3(a, c).unwrap()).collect();
            exp_mech_pmf(&d, eps, sens).unwrap()
        };
        for &x in &set {
            for &y in &set {
                let (fx, fy) = (pmf_of(x), pmf_of(y));
                for o in 0..set.len() {
                    prop_assert!(fx[o] / fy[o] <= eps.exp() * (1.0 + 1e-9));
                }
            }
        }
    }

    #[test]
    fn vanishing_budget_gives_mean_candidate_distance(ds in prop::collection::vec(0.1f64..12.0, 1..30), sens in 0.5f64..15.0) {
        let candidates: Vec<usize> = (1..=ds.len()).collect();
        let ch = PerturbationChannel::from_distances(0, candidates, ds.clone(), 1e-12, sens).unwrap();
        let q: f64 = pf_pmf(&ch).iter().zip(&ds).map(|(p, d)| p * d).sum();
        let mean = ds.iter().sum::<f64>() / ds.len() as f64;
        prop_assert!((q - mean).abs() < 1e-9 * mean.max(1.0));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pls_diameter_monotone(prior in weights(32).prop_map(simplex), anchor in 0usize..32, eps in 0.05f64..1.5, em in 0.05f64..0.8, bump in 1.0f64..2.0) {
        let g = LocationGrid::new([4, 4, 2], [5.0, 5.0, 2.5]).unwrap();
        let orders = hilbert_orders(&g);
        let Ok(base) = find_pls(anchor, &prior, eps, em, &orders, &g) else { return Ok(()) };
        if let Ok(more_em) = find_pls(anchor, &prior, eps, em * bump, &orders, &g) {
            prop_assert!(more_em.diameter >= base.diameter - 1e-12);
        }
        if let Ok(more_eps) = find_pls(anchor, &prior, eps * bump, em, &orders, &g) {
            prop_assert!(more_eps.diameter >= base.diameter - 1e-12);
        }
        // Every emitted set clears the admission threshold in both senses.
        prop_assert!(base.cond_error >= base.threshold() && base.diameter >= base.threshold());
    }
}

fn random_chain(n: usize, rng: &mut impl rand::Rng) -> (Vec<f64>, TransitionMatrix) {
    let prior = simplex((0..n).map(|_| rng.gen_range(0.0..1.0) + 1e-3).collect());
    let rows = (0..n).map(|_| simplex((0..n).map(|_| rng.gen_range(0.0..1.0) + 1e-3).collect())).collect();
    (prior, TransitionMatrix::from_rows(rows).unwrap())
}

fn random_subset(n: usize, lo: usize, hi: usize, rng: &mut impl rand::Rng) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let k = rng.gen_range(lo..=hi);
    let mut all: Vec<usize> = (0..n).collect();
    all.shuffle(rng);
    all.truncate(k);
    all
}
