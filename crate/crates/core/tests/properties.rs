mod common;

use care_core::baselines;
use care_core::moments::ThirdOrderTensor;
use care_core::partition::{self, TriViewPartition};
use care_core::pipeline::{SvdModel, SvdOptions};
use care_core::spectral::{self, SymmetryRule, WeightMode};
use care_core::synth::{self, RegimeAConfig};
use care_core::tensor;
use care_core::ScoreMatrix;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;

fn regime_a(seed: u64) -> ScoreMatrix {
    synth::gen_regime_a(&RegimeAConfig { n: 2000, judges_per_view: 3, seed, ..Default::default() }).unwrap().matrix
}

fn permute_columns(x: &DMatrix<f64>, perm: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(x.nrows(), perm.len(), |i, j| x[(i, perm[j])])
}

fn perm_strategy(p: usize) -> impl Strategy<Value = Vec<usize>> {
    Just((0..p).collect::<Vec<_>>()).prop_shuffle()
}

fn random_mixture(seed: u64, p: usize, k: usize) -> (Vec<DVector<f64>>, Vec<f64>, DMatrix<f64>, DMatrix<f64>) {
    let mut r = common::rng(seed);
    let means: Vec<DVector<f64>> = (0..k).map(|_| DVector::from_fn(p, |_, _| r.random_range(-2.0..2.0))).collect();
    let raw: Vec<f64> = (0..k).map(|_| r.random_range(0.1..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let weights = raw.iter().map(|w| w / total).collect();
    let a = DMatrix::from_fn(p, p, |_, _| r.random_range(-1.0..1.0));
    let cov = &a * a.transpose() + DMatrix::identity(p, p) * 0.3;
    let x = DMatrix::from_fn(30, p, |_, _| r.random_range(-3.0..3.0));
    (means, weights, cov, x)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn spectral_scores_follow_judge_permutation(seed in 0u64..1000, perm in perm_strategy(9)) {
        let m = regime_a(seed);
        let opts = SvdOptions::default();
        let base = SvdModel::fit(&m, &opts, None).unwrap();
        let pm = ScoreMatrix::from_values(permute_columns(m.values(), &perm)).unwrap();
        let moved = SvdModel::fit(&pm, &opts, None).unwrap();
        let a = base.score(&m).unwrap().scores;
        let b = moved.score(&pm).unwrap().scores;
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-6 * x.abs().max(1.0), "{x} vs {y}");
        }
        for (j, &src) in perm.iter().enumerate() {
            prop_assert!((moved.weights()[j] - base.weights()[src]).abs() < 1e-6);
        }
    }

    #[test]
    fn spectral_raw_scores_ignore_judge_rescaling(seed in 0u64..1000, scales in prop::collection::vec(0.2f64..5.0, 9)) {
        let m = regime_a(seed);
        let scaled = DMatrix::from_fn(m.n_items(), 9, |i, j| m.values()[(i, j)] * scales[j]);
        let sm = ScoreMatrix::from_values(scaled).unwrap();
        let opts = SvdOptions::default();
        let a = SvdModel::fit(&m, &opts, None).unwrap().score(&m).unwrap().raw;
        let b = SvdModel::fit(&sm, &opts, None).unwrap().score(&sm).unwrap().raw;
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-6 * x.abs().max(1.0));
        }
    }

    #[test]
    fn quality_weights_ignore_sign_flips(seed in 0u64..1000, flips in prop::collection::vec(any::<bool>(), 3)) {
        let mut r = common::rng(seed);
        let u = DMatrix::from_fn(8, 3, |_, _| r.random_range(-1.0..1.0));
        let l = &u * u.transpose();
        let f = spectral::factors_of(&l).unwrap();
        let mut flipped = f.clone();
        for (k, &flip) in flips.iter().enumerate().take(flipped.rank()) {
            if flip {
                flipped.eigvecs.column_mut(k).neg_mut();
            }
        }
        let weights = |f| {
            let f = spectral::break_symmetry(f, SymmetryRule::Leading, None).unwrap();
            spectral::quality_weights(f, WeightMode::Plain).unwrap().weights.unwrap()
        };
        prop_assert!((weights(f) - weights(flipped)).amax() < 1e-12);
    }

    #[test]
    fn responsibilities_sum_to_one_and_follow_permutation(seed in 0u64..10_000, perm in perm_strategy(5)) {
        let (means, weights, cov, x) = random_mixture(seed, 5, 4);
        let m = ScoreMatrix::from_values(x.clone()).unwrap();
        let r = tensor::responsibilities(&m, &means, &weights, &cov).unwrap();
        for i in 0..r.nrows() {
            prop_assert!((r.row(i).sum() - 1.0).abs() < 1e-12);
        }
        let pm = ScoreMatrix::from_values(permute_columns(&x, &perm)).unwrap();
        let pmeans: Vec<DVector<f64>> = means.iter().map(|mu| DVector::from_fn(5, |j, _| mu[perm[j]])).collect();
        let pcov = DMatrix::from_fn(5, 5, |i, j| cov[(perm[i], perm[j])]);
        let rp = tensor::responsibilities(&pm, &pmeans, &weights, &pcov).unwrap();
        prop_assert!((&r - &rp).amax() < 1e-10);
    }

    #[test]
    fn more_cp_restarts_never_fit_worse(seed in 0u64..1000) {
        let mut r = common::rng(seed);
        let a = DMatrix::from_fn(4, 3, |_, _| r.random_range(-1.0..1.0));
        let b = DMatrix::from_fn(4, 3, |_, _| r.random_range(-1.0..1.0));
        let c = DMatrix::from_fn(4, 3, |_, _| r.random_range(-1.0..1.0));
        let noise = ThirdOrderTensor::from_fn([4, 4, 4], |_, _, _| 0.05 * r.random_range(-1.0..1.0));
        let t = ThirdOrderTensor::from_cp(&[1.0, 0.7, 0.4], &a, &b, &c);
        let t = ThirdOrderTensor::from_fn([4, 4, 4], |i, j, k| t.get(i, j, k) + noise.get(i, j, k));
        let few = tensor::cp_decompose(&t, 2, 2, seed).unwrap();
        let many = tensor::cp_decompose(&t, 2, 6, seed).unwrap();
        prop_assert!(many.fit <= few.fit + 1e-12);
    }

    #[test]
    fn average_ignores_judge_order(seed in 0u64..10_000, perm in perm_strategy(6)) {
        let mut r = common::rng(seed);
        let x = DMatrix::from_fn(20, 6, |_, _| r.random_range(1.0..10.0));
        let a = baselines::avg(&ScoreMatrix::from_values(x.clone()).unwrap()).scores;
        let b = baselines::avg(&ScoreMatrix::from_values(permute_columns(&x, &perm)).unwrap()).scores;
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn dawid_skene_likelihood_never_drops(seed in 0u64..10_000, acc in prop::collection::vec(0.2f64..0.95, 5)) {
        let mut r = common::rng(seed);
        let votes = DMatrix::from_fn(200, 5, |_, j| {
            let truth = r.random::<bool>();
            let right = r.random::<f64>() < acc[j];
            if truth == right { 1.0 } else { 0.0 }
        });
        let ds = baselines::dawid_skene(&votes, 200, 1e-8).unwrap();
        for w in ds.log_likelihood.windows(2) {
            prop_assert!(w[1] >= w[0] - 1e-9 * w[0].abs());
        }
    }

    #[test]
    fn searched_partition_beats_random(seed in 0u64..10_000, p in 6usize..14) {
        let s = common::random_symmetric(p, 0.5, seed);
        let found = partition::partition(&s, partition::DEFAULT_EPS, seed, partition::DEFAULT_RESTARTS).unwrap();
        let random = partition::random_partition(p, seed).unwrap();
        let groups = random.groups().map(|g| g.to_vec());
        let random = TriViewPartition::evaluate(groups, &s, partition::DEFAULT_EPS).unwrap();
        prop_assert!(found.cross_mass <= random.cross_mass + 1e-12);
    }

    #[test]
    fn partition_respects_minimum_size(seed in 0u64..10_000, p in 6usize..16, min_size in 1usize..5) {
        prop_assume!(3 * min_size <= p);
        let s = common::random_symmetric(p, 0.4, seed);
        let part = partition::partition_with_min_size(&s, partition::DEFAULT_EPS, seed, 8, min_size).unwrap();
        prop_assert!(part.sizes().iter().all(|&n| n >= min_size));
        let mut all = part.concatenated();
        all.sort_unstable();
        prop_assert_eq!(all, (0..p).collect::<Vec<_>>());
    }
}
