mod common;

use std::collections::HashSet;

use common::{random_tensor_dataset, rng};
use icd::bench::{synthetic_dataset, POSITIVES_PER_CONTEXT};
use icd::data::RawInteraction;
use icd::eval::{ndcg_at_k, rank_items, recall_at_k, split_dataset, user_of, SplitSpec};
use icd::mf::{MfParams, MfSolver};
use icd::oracle::{naive_cd_epoch, naive_implicit_objective, TensorModel};
use icd::separable::compute_gram;
use icd::tensor::{CoreTensor, ParafacParams, TensorSolver, TuckerParams};
use icd::train::ImplicitSolver;
use icd::{Lambdas, Matrix, SolverConfig};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn events_strategy(stamped: bool) -> impl Strategy<Value = Vec<RawInteraction>> {
    prop::collection::vec((0usize..6, 0usize..15, 0.0f64..100.0), 0..60).prop_map(move |rows| {
        let mut seen = HashSet::new();
        rows.into_iter()
            .filter(|(u, i, _)| seen.insert((*u, *i)))
            .map(|(u, i, t)| {
                let e = RawInteraction::new(format!("u{u},s{}", i % 2), format!("i{i}"), 1.0);
                if stamped {
                    e.with_timestamp(t)
                } else {
                    e
                }
            })
            .collect()
    })
}

fn assert_partition(events: &[RawInteraction], spec: &SplitSpec) -> Result<(), TestCaseError> {
    let split = split_dataset(events, spec).unwrap();
    let key = |e: &RawInteraction| (e.context.clone(), e.item.clone());
    let mut all: Vec<_> = events.iter().map(key).collect();
    let mut parts: Vec<_> = split.train.iter().chain(&split.test).map(key).collect();
    all.sort();
    parts.sort();
    prop_assert_eq!(all, parts);
    Ok(())
}

proptest! {
    #[test]
    fn ranking_metrics_ignore_monotone_transforms(
        scores in prop::collection::vec(-5.0f64..5.0, 1..40),
        k in 1usize..50,
        scale in 0.1f64..10.0,
        shift in -3.0f64..3.0,
        relevant_mask in prop::collection::vec(any::<bool>(), 40),
        excluded_mask in prop::collection::vec(prop::bool::weighted(0.2), 40),
    ) {
        let n = scores.len();
        let rel: HashSet<usize> = (0..n).filter(|&i| relevant_mask[i]).collect();
        let excl: HashSet<usize> = (0..n).filter(|&i| excluded_mask[i]).collect();
        let transformed: Vec<f64> = scores.iter().map(|s| (scale * s).tanh() * 4.0 + shift).collect();
        let strictly = scores.iter().zip(&transformed).all(|(a, b)| scores.iter().zip(&transformed).all(|(c, d)| (a < c) == (b < d)));
        prop_assume!(strictly);
        let a = rank_items(&scores, k, &excl).unwrap();
        let b = rank_items(&transformed, k, &excl).unwrap();
        prop_assert_eq!(a.ids(), b.ids());
        prop_assert!(a.items.len() <= k);
        prop_assert!(a.ids().iter().all(|i| !excl.contains(i)));
        if !rel.is_empty() {
            let (ra, na) = (recall_at_k(&a, &rel).unwrap(), ndcg_at_k(&a, &rel, k).unwrap());
            prop_assert_eq!(ra, recall_at_k(&b, &rel).unwrap());
            prop_assert_eq!(na, ndcg_at_k(&b, &rel, k).unwrap());
            prop_assert!((0.0..=1.0).contains(&ra));
            prop_assert!((0.0..=1.0 + 1e-12).contains(&na));
        }
    }

    #[test]
    fn leave_last_out_partitions(events in events_strategy(true)) {
        assert_partition(&events, &SplitSpec::LeaveLastOut)?;
        let split = split_dataset(&events, &SplitSpec::LeaveLastOut).unwrap();
        let test_users: Vec<&str> = split.test.iter().map(|e| user_of(&e.context)).collect();
        let unique: HashSet<&str> = test_users.iter().copied().collect();
        prop_assert_eq!(test_users.len(), unique.len());
    }

    #[test]
    fn file_order_leave_last_out_partitions(events in events_strategy(false)) {
        assert_partition(&events, &SplitSpec::LeaveLastOut)?;
    }

    #[test]
    fn cutoff_partitions_by_time(events in events_strategy(true), t in 0.0f64..100.0) {
        prop_assume!(!events.is_empty());
        assert_partition(&events, &SplitSpec::CutoffTime(t))?;
        let split = split_dataset(&events, &SplitSpec::CutoffTime(t)).unwrap();
        prop_assert!(split.train.iter().all(|e| e.timestamp.unwrap() <= t));
        prop_assert!(split.test.iter().all(|e| e.timestamp.unwrap() > t));
    }

    #[test]
    fn cold_start_holds_out_whole_users(events in events_strategy(false), fraction in 0.0f64..1.0, seed in any::<u64>()) {
        let spec = SplitSpec::ColdStartUsers { fraction, seed };
        assert_partition(&events, &spec)?;
        let split = split_dataset(&events, &spec).unwrap();
        let train: HashSet<&str> = split.train.iter().map(|e| user_of(&e.context)).collect();
        prop_assert!(split.test.iter().all(|e| !train.contains(user_of(&e.context))));
    }

    #[test]
    fn mode_grams_are_symmetric_psd(n in 1usize..10, k in 1usize..5, seed in any::<u64>()) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let u = Matrix::random_normal(n, k, 1.0, &mut r);
        let j = compute_gram(&u);
        for f in 0..k {
            prop_assert!(j.get(f, f) >= 0.0);
            for g in 0..k {
                prop_assert_eq!(j.get(f, g), j.get(g, f));
                prop_assert!(j.get(f, g).powi(2) <= j.get(f, f) * j.get(g, g) * (1.0 + 1e-12) + 1e-300);
            }
        }
    }
}

#[test]
fn icd_epoch_cost_grows_linearly_and_naive_quadratically() {
    let k = 4;
    let cfg = SolverConfig { k, seed: 3, ..Default::default() };
    let mut icd = Vec::new();
    let mut naive = Vec::new();
    for n in [60, 120, 240] {
        let ds = synthetic_dataset(n, POSITIVES_PER_CONTEXT, 1).unwrap();
        let init = MfParams::init(n, n, &cfg);
        let mut s = MfSolver::new(&ds, cfg.clone(), init.clone()).unwrap();
        let before = s.counters().clone();
        s.run_epoch().unwrap();
        let d = s.counters().since(&before);
        icd.push(d.total_flops() as f64);
        let mut m = init;
        naive.push(naive_cd_epoch(&mut m, &ds, &cfg).unwrap().flops as f64);
    }
    for w in icd.windows(2) {
        let r = w[1] / w[0];
        assert!((1.8..=2.2).contains(&r), "icd ratio {r}");
    }
    for w in naive.windows(2) {
        let r = w[1] / w[0];
        assert!((3.6..=4.4).contains(&r), "naive ratio {r}");
    }
}

#[test]
fn sparse_tensor_epochs_visit_observed_tuples_only() {
    let mut r = rng(12);
    let td = random_tensor_dataset(6, 5, 7, 0.3, 1.0, &mut r);
    let tuples = td.contexts().len() as u64;
    assert!(tuples < 30);

    let cfg = SolverConfig { k: 3, core_dims: [2, 3, 2], ..Default::default() };
    let mut s = TensorSolver::new(&td, cfg.clone(), ParafacParams::init([6, 5], 7, &cfg)).unwrap();
    s.run_epoch().unwrap();
    assert_eq!(s.counters().context_visits, 2 * 3 * tuples);

    let mut s = TensorSolver::new(&td, cfg.clone(), TuckerParams::init([6, 5], 7, &cfg)).unwrap();
    s.run_epoch().unwrap();
    assert_eq!(s.counters().context_visits, (2 + 3 + 2 * 3 * 2) * tuples);

    let grid = td.to_dense_grid().unwrap();
    let dense = SolverConfig { dense_context: true, ..cfg.clone() };
    let mut s = TensorSolver::new(&grid, dense, ParafacParams::init([6, 5], 7, &cfg)).unwrap();
    s.run_epoch().unwrap();
    assert_eq!(s.counters().context_visits, 0);
}

#[test]
fn rank_one_tucker_is_scaled_parafac() {
    let mut r = rng(21);
    let td = random_tensor_dataset(4, 3, 5, 0.5, 1.0, &mut r);
    let cfg = SolverConfig { k: 1, core_dims: [1, 1, 1], sigma: 0.5, seed: 2, ..Default::default() };
    let p = ParafacParams::init([4, 3], 5, &cfg);
    let g = -1.7;
    let tucker = TuckerParams::new(CoreTensor::from_vec([1, 1, 1], vec![g]).unwrap(), p.u.clone(), p.v.clone(), p.w.clone()).unwrap();
    let mut scaled = p.clone();
    scaled.u.as_mut_slice().iter_mut().for_each(|x| *x *= g);
    for a in 0..4 {
        for b in 0..3 {
            for i in 0..5 {
                let (x, y) = (tucker.predict(a, b, i), scaled.predict(a, b, i));
                assert!((x - y).abs() <= 1e-14 * x.abs().max(1.0));
            }
        }
    }
    let lam = Lambdas::uniform(0.0);
    let ox = naive_implicit_objective(&TensorModel::tucker(tucker.clone(), &td), td.data(), &lam).unwrap();
    let oy = naive_implicit_objective(&TensorModel::parafac(scaled, &td), td.data(), &lam).unwrap();
    assert!((ox - oy).abs() <= 1e-12 * ox.abs().max(1.0));

    let frozen = SolverConfig { frozen: vec![icd::ParamKind::Core], ..cfg };
    let mut s = TensorSolver::new(&td, frozen, tucker).unwrap();
    let before = s.objective().unwrap();
    s.run_epoch().unwrap();
    assert!(s.objective().unwrap() <= before);
    assert_eq!(s.params().core_tensor().unwrap().get(0, 0, 0), g);
}
