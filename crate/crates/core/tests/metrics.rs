mod common;

use proptest::prelude::*;
use robust_adapt::adapter::{AdapterParams, Mode};
use robust_adapt::metrics::{alignment_loss, cross_group_cosine, evaluate_groups, lipschitz_upper_bound};
use robust_adapt::{Matrix, Rng};

proptest! {
    #[test]
    fn report_matches_counting_oracle(
        rows in prop::collection::vec((0usize..3, 0usize..3, 0usize..3), 1..200)
    ) {
        let pred: Vec<usize> = rows.iter().map(|r| r.0).collect();
        let labels: Vec<usize> = rows.iter().map(|r| r.1).collect();
        let groups: Vec<usize> = rows.iter().map(|r| r.2).collect();
        let r = evaluate_groups(&pred, &labels, &groups).unwrap();
        let (avg, worst) = common::group_accuracy_oracle(&pred, &labels, &groups);
        prop_assert_eq!(r.average_accuracy, avg);
        prop_assert_eq!(r.worst_group_accuracy, worst);
        prop_assert!(r.worst_group_accuracy <= r.average_accuracy + 1e-12);
        prop_assert!(r.gap >= -1e-12);
        prop_assert_eq!(r.per_group.iter().map(|g| g.n).sum::<usize>(), rows.len());
    }

    #[test]
    fn alignment_and_cosine_agree_on_unit_vectors(seed in 0u64..5000) {
        // For unit vectors ‖a − b‖² = 2 − 2 cos, so the mean squared distance
        // and the mean cosine are tied exactly; the mean distance is bounded
        // by its square root.
        let b = common::random_bundle(seed, 24, 5, 2, 2);
        let cos = cross_group_cosine(&b.samples, &b.class_labels, &b.group_labels, 0).unwrap();
        let align = alignment_loss(&b.samples, &b.class_labels, &b.group_labels, 0).unwrap();
        prop_assert!(align <= (2.0 - 2.0 * cos).sqrt() + 1e-6);
        prop_assert!((-1.0..=1.0).contains(&cos));
    }
}

/// Adapter with nontrivial batch-norm statistics.
fn perturbed_adapter(seed: u64, dim: usize, hidden: usize) -> AdapterParams {
    let mut rng = Rng::new(seed);
    let mut p = AdapterParams::init(dim, hidden, true, &mut rng);
    for h in 0..hidden {
        p.bn_gamma[h] = rng.uniform(-2.0, 2.0) as f32;
        p.bn_beta[h] = rng.uniform(-0.5, 0.5) as f32;
        p.bn_running_mean[h] = rng.uniform(-0.3, 0.3) as f32;
        p.bn_running_var[h] = rng.uniform(0.05, 2.0) as f32;
    }
    p
}

#[test]
fn bound_dominates_sampled_slopes() {
    for seed in 0..5 {
        let p = perturbed_adapter(seed, 16, 8);
        let bound = lipschitz_upper_bound(&p) as f64;
        let mut rng = Rng::new(seed + 50);
        for _ in 0..200 {
            let x: Vec<f32> = (0..32).map(|_| rng.normal() as f32).collect();
            let xs = Matrix::from_vec(2, 16, x).unwrap();
            let (out, _) = p.forward(&xs, Mode::Eval).unwrap();
            let dy: f64 = out.row(0).iter().zip(out.row(1)).map(|(a, b)| (*a as f64 - *b as f64).powi(2)).sum();
            let dx: f64 = xs.row(0).iter().zip(xs.row(1)).map(|(a, b)| (*a as f64 - *b as f64).powi(2)).sum();
            assert!(dy.sqrt() / dx.sqrt() <= bound * (1.0 + 1e-5), "seed {seed}");
        }
    }
}

#[test]
fn bound_is_tight_for_a_linear_chain() {
    // One hidden unit with positive pre-activation: the map is linear along
    // w1, so the bound is attained up to rounding.
    let mut p = AdapterParams::init(3, 1, false, &mut Rng::new(0));
    p.w1 = Matrix::from_vec(3, 1, vec![3.0, 0.0, 4.0]).unwrap();
    p.b1 = vec![100.0];
    p.w2 = Matrix::from_vec(1, 3, vec![0.0, 2.0, 0.0]).unwrap();
    let bound = lipschitz_upper_bound(&p) as f64;
    assert!((bound - 10.0).abs() < 1e-4, "{bound}");
    let xs = Matrix::from_vec(2, 3, vec![0.0, 0.0, 0.0, 0.3, 0.0, 0.4]).unwrap();
    let (out, _) = p.forward(&xs, Mode::Eval).unwrap();
    let slope = (out.get(0, 1) - out.get(1, 1)).abs() as f64 / 0.5;
    assert!((slope - 10.0).abs() < 1e-3, "{slope}");
}
