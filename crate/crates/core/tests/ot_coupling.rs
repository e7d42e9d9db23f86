use kflow::datasets::{ot_pair, pairing_cost, Distribution2D};
use kflow::ndcore::Tensor;
use kflow::seeded_rng;
use proptest::prelude::*;
use rand::Rng;

/// Minimum cost over all permutations by Heap's algorithm.
fn brute_force(x0: &Tensor, x1: &Tensor) -> f64 {
    let n = x0.rows();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = pairing_cost(x0, x1, &perm);
    let mut c = vec![0usize; n];
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            best = best.min(pairing_cost(x0, x1, &perm));
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    best
}

fn is_permutation(p: &[usize]) -> bool {
    let mut seen = vec![false; p.len()];
    p.iter().all(|&j| j < seen.len() && !std::mem::replace(&mut seen[j], true))
}

#[test]
fn matches_brute_force_on_small_batches() {
    let mut rng = seeded_rng(2024);
    for case in 0..200 {
        let b = rng.random_range(1..=7);
        let x0 = Distribution2D::Gauss.sample(b, rng.random());
        let x1 = Distribution2D::EIGHT_GAUSS.sample(b, rng.random());
        let plan = ot_pair(&x0, &x1).unwrap();
        assert!(is_permutation(&plan.permutation));
        let best = brute_force(&x0, &x1);
        assert!(
            (plan.cost - best).abs() <= 1e-9 * best.max(1.0),
            "case {case} (b={b}): hungarian {} vs brute force {best}",
            plan.cost
        );
        assert_eq!(plan.cost, pairing_cost(&x0, &x1, &plan.permutation));
    }
}

fn points(n: usize) -> impl Strategy<Value = Tensor> {
    proptest::collection::vec(-10.0f64..10.0, 2 * n).prop_map(move |v| Tensor::new([n, 2], v).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn plan_is_a_bijection_no_worse_than_identity(
        (x0, x1) in (1usize..40).prop_flat_map(|n| (points(n), points(n)))
    ) {
        let plan = ot_pair(&x0, &x1).unwrap();
        prop_assert!(is_permutation(&plan.permutation));
        let id: Vec<usize> = (0..x0.rows()).collect();
        prop_assert!(plan.cost <= pairing_cost(&x0, &x1, &id) + 1e-9);
    }

    #[test]
    fn coupling_self_is_identity(x in points(12)) {
        let plan = ot_pair(&x, &x).unwrap();
        prop_assert!(plan.cost.abs() < 1e-12);
    }
}
