use blc::blc::{run_blc, Schedule};
use blc::factorization::{factorize, init_model, update_u, update_v, Hyperparams};
use blc::metrics::{association_probability, guessing_probability, rmse, AssociationMode};
use blc::nym::{aggregate, choose_nym, nym_residuals, update_all_nyms};
use blc::ratings::{load_indexed, load_triplets, split, Format, RatingTriplet, SparseRatings, SplitSpec};
use blc::synthetic::{generate, same_partition, SyntheticSpec};
use blc::NymAssignment;
use proptest::prelude::*;

fn ratings_strategy() -> impl Strategy<Value = SparseRatings> {
    (1usize..12, 1usize..9)
        .prop_flat_map(|(n, m)| {
            let cells = proptest::collection::btree_map((0..n, 0..m), -5.0f64..5.0, 0..n * m);
            (Just(n), Just(m), cells)
        })
        .prop_map(|(n, m, cells)| {
            let t = cells
                .into_iter()
                .map(|((u, i), r)| RatingTriplet::new(u, i, r))
                .collect();
            SparseRatings::new(n, m, t).unwrap()
        })
}

fn key(t: &RatingTriplet) -> (u32, u32, u64) {
    (t.user, t.item, t.value.to_bits())
}

fn multiset(r: &SparseRatings) -> Vec<(u32, u32, u64)> {
    let mut v: Vec<_> = r.triplets().iter().map(key).collect();
    v.sort_unstable();
    v
}

fn instance(n: usize, m: usize, p: usize, missing: f64, seed: u64) -> SparseRatings {
    generate(&SyntheticSpec {
        n_users: n,
        m_items: m,
        p_groups: p,
        d: 2,
        cluster_std: 0.3,
        missing_fraction: missing,
        seed,
        ..Default::default()
    })
    .unwrap()
    .ratings
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn index_sizes_agree(r in ratings_strategy()) {
        let by_user: usize = (0..r.n_users()).map(|u| r.user_ratings(u).len()).sum();
        let by_item: usize = (0..r.n_items()).map(|i| r.item_ratings(i).len()).sum();
        prop_assert_eq!(by_user, r.len());
        prop_assert_eq!(by_item, r.len());
    }

    #[test]
    fn csv_round_trip(r in ratings_strategy()) {
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        let back = load_indexed(buf.as_slice(), Format::CsvComma, r.n_users(), r.n_items()).unwrap();
        prop_assert_eq!(multiset(&back), multiset(&r));
        let relabeled = load_triplets(buf.as_slice(), Format::CsvComma).unwrap();
        let a: Vec<u64> = r.triplets().iter().map(|t| t.value.to_bits()).collect();
        let b: Vec<u64> = relabeled.triplets().iter().map(|t| t.value.to_bits()).collect();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn split_is_partition(r in ratings_strategy(), seed in any::<u64>()) {
        let s = split(&r, &SplitSpec::new(0.5, 0.2, 0.3, seed).unwrap()).unwrap();
        let mut all: Vec<_> = [&s.train, &s.valid, &s.test].iter().flat_map(|p| multiset(p)).collect();
        all.sort_unstable();
        prop_assert_eq!(all, multiset(&r));
    }

    #[test]
    fn aggregate_permutation_equivariant(seed in 0u64..1000, p in 2usize..5) {
        let r = instance(15, 6, 3, 0.3, seed);
        let a = NymAssignment::random(15, p, seed).unwrap();
        let perm: Vec<usize> = (0..p).rev().collect();
        let b = NymAssignment::new(a.as_slice().iter().map(|&g| perm[g as usize] as u32).collect(), p).unwrap();
        let (ga, gb) = (aggregate(&r, &a).unwrap(), aggregate(&r, &b).unwrap());
        for g in 0..p {
            for i in 0..6 {
                prop_assert_eq!(ga.count(g, i), gb.count(perm[g], i));
                prop_assert_eq!(ga.mean(g, i), gb.mean(perm[g], i));
            }
        }
    }

    #[test]
    fn chosen_nym_minimizes_residual(seed in 0u64..1000, p in 1usize..6) {
        let r = instance(12, 8, 3, 0.4, seed);
        let model = init_model(p, 8, &Hyperparams { seed, ..Hyperparams::with_dim(2) }).unwrap();
        for u in 0..12 {
            let ratings = r.user_ratings(u);
            let g = choose_nym(ratings, &model, 0);
            let res = nym_residuals(ratings, &model);
            prop_assert!(res.iter().all(|&x| res[g] <= x));
            prop_assert!(res[..g].iter().all(|&x| x > res[g]), "lowest-index tie-break");
        }
    }

    #[test]
    fn switches_strictly_improve(seed in 0u64..1000) {
        let r = instance(20, 8, 3, 0.4, seed);
        let model = init_model(4, 8, &Hyperparams { seed, ..Hyperparams::with_dim(2) }).unwrap();
        let a = NymAssignment::random(20, 4, seed).unwrap();
        let users: Vec<usize> = (0..20).collect();
        let b = update_all_nyms(&r, &model, &a, &users);
        for u in 0..20 {
            let res = nym_residuals(r.user_ratings(u), &model);
            let (from, to) = (a.nym_of(u), b.nym_of(u));
            if from != to {
                prop_assert!(res[to] < res[from]);
            }
        }
    }

    #[test]
    fn updates_scale_invariant(seed in 0u64..1000, c in 0.01f64..100.0) {
        let r = instance(12, 7, 3, 0.3, seed);
        let a = NymAssignment::random(12, 3, seed).unwrap();
        let agg = aggregate(&r, &a).unwrap();
        let h = Hyperparams { seed, sigma2: 0.5, sigma2_u: 2.0, sigma2_v: 3.0, ..Hyperparams::with_dim(2) };
        let hc = Hyperparams { sigma2: 0.5 * c, sigma2_u: 2.0 * c, sigma2_v: 3.0 * c, ..h };
        let m1 = init_model(3, 7, &h).unwrap();
        let m2 = init_model(3, 7, &hc).unwrap();
        prop_assert_eq!(m1.u_tilde(), m2.u_tilde());
        let (u1, u2) = (update_u(&agg, &m1).unwrap(), update_u(&agg, &m2).unwrap());
        let (v1, v2) = (update_v(&agg, &m1).unwrap(), update_v(&agg, &m2).unwrap());
        prop_assert!((u1 - u2).amax() < 1e-9);
        prop_assert!((v1 - v2).amax() < 1e-9);
    }

    #[test]
    fn factorize_trace_descends(seed in 0u64..1000, p in 1usize..5) {
        let r = instance(25, 10, 3, 0.5, seed);
        let a = NymAssignment::random(25, p, seed).unwrap();
        let agg = aggregate(&r, &a).unwrap();
        let h = Hyperparams { seed, epsilon: 1e-10, ..Hyperparams::with_dim(3) };
        let fac = factorize(&agg, init_model(p, 10, &h).unwrap()).unwrap();
        for w in fac.trace.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-10 * w[0].abs().max(1.0), "{} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn blc_runs_descend(seed in 0u64..1000, p in 1usize..6, period in 0.05f64..1.0) {
        let r = instance(40, 12, 3, 0.5, seed);
        let h = Hyperparams { seed, ..Hyperparams::with_dim(2) };
        let s = Schedule { seed, factorization_period: period, ..Default::default() };
        let fit = run_blc(&r, p, &h, &s).unwrap();
        prop_assert!(fit.trace.first_ascent(1e-10).is_none(), "{:?}", fit.trace.first_ascent(1e-10));
    }

    #[test]
    fn guessing_probability_bounds(labels in proptest::collection::vec(0u32..5, 1..40)) {
        let a = NymAssignment::new(labels, 5).unwrap();
        let pg = guessing_probability(&a).unwrap();
        prop_assert!((0.2..=1.0).contains(&pg));
        let sizes = a.nym_sizes();
        let equal = sizes.iter().all(|&s| s == sizes[0]);
        prop_assert_eq!(pg == 0.2, equal);
    }

    #[test]
    fn association_relabel_equivariant(seed in 0u64..1000) {
        let r = instance(18, 6, 3, 0.5, seed);
        let a = NymAssignment::random(18, 3, seed).unwrap();
        let perm = [2usize, 0, 1];
        let b = NymAssignment::new(a.as_slice().iter().map(|&g| perm[g as usize] as u32).collect(), 3).unwrap();
        for mode in [AssociationMode::UserShare, AssociationMode::RatingShare] {
            let pa = association_probability(&aggregate(&r, &a).unwrap(), mode);
            let pb = association_probability(&aggregate(&r, &b).unwrap(), mode);
            for g in 0..3 {
                for i in 0..6 {
                    prop_assert_eq!(pa.get(g, i), pb.get(perm[g], i));
                    if let Some(x) = pa.get(g, i) {
                        prop_assert!((0.0..=1.0).contains(&x));
                    }
                }
            }
        }
    }

    #[test]
    fn rmse_permutation_invariant(r in ratings_strategy(), seed in any::<u64>()) {
        prop_assume!(!r.is_empty());
        use rand::seq::SliceRandom;
        let mut t = r.triplets().to_vec();
        t.shuffle(&mut blc::rng::substream(seed, "test"));
        let shuffled = SparseRatings::new(r.n_users(), r.n_items(), t).unwrap();
        let f = |u: usize, i: usize| (u as f64) * 0.5 - i as f64;
        let (a, b) = (rmse(f, &r).unwrap(), rmse(f, &shuffled).unwrap());
        prop_assert!((a - b).abs() <= 1e-12 * a.max(1.0));
    }

    #[test]
    fn synthetic_matches_oracle(seed in any::<u64>(), n in 1usize..40, p in 1usize..6, missing in 0.0f64..0.9) {
        let inst = generate(&SyntheticSpec { n_users: n, m_items: 7, p_groups: p, missing_fraction: missing, seed, ..Default::default() }).unwrap();
        for t in inst.ratings.triplets().iter().chain(inst.held_out.triplets()) {
            prop_assert_eq!(t.value.to_bits(), inst.oracle(t.user as usize, t.item as usize).to_bits());
        }
        prop_assert_eq!(inst.ratings.len() + inst.held_out.len(), n * 7);
        let sizes = inst.label_assignment().nym_sizes();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    }
}

#[test]
fn labels_recovered_on_separable_data() {
    let mut failures = 0;
    for seed in 0..6 {
        let inst = generate(&SyntheticSpec {
            n_users: 300,
            m_items: 40,
            cluster_std: 0.0,
            missing_fraction: 0.0,
            seed,
            ..Default::default()
        })
        .unwrap();
        let h = Hyperparams { seed, ..Hyperparams::with_dim(4) };
        let fit = run_blc(&inst.ratings, 5, &h, &Schedule { seed, ..Default::default() }).unwrap();
        assert!(fit.trace.first_ascent(1e-10).is_none());
        if !same_partition(fit.assignment.as_slice(), &inst.true_labels) {
            failures += 1;
        }
    }
    assert!(failures <= 1, "{failures} failures");
}

#[test]
fn unrated_nyms_and_items_are_frozen() {
    let r = SparseRatings::new(
        3,
        3,
        vec![RatingTriplet::new(0, 0, 1.0), RatingTriplet::new(1, 1, 2.0)],
    )
    .unwrap();
    let a = NymAssignment::new(vec![0, 0, 0], 2).unwrap();
    let agg = aggregate(&r, &a).unwrap();
    let m = init_model(2, 3, &Hyperparams::with_dim(2)).unwrap();
    let fac = factorize(&agg, m.clone()).unwrap();
    assert_eq!(fac.model.u_tilde().column(1), m.u_tilde().column(1));
    assert_eq!(fac.model.v().column(2), m.v().column(2));
}
