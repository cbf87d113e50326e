mod common;

use common::*;
use fedcomp::metrics::evaluate;
use fedcomp::models::{loss_and_grad, Batch};
use fedcomp::seed;
use fedcomp::{gen_synthetic, Activation, ClientShard, LocalTrainConfig, ModelSpec, ParamVec64};
use fedcomp::models::local_train;
use proptest::prelude::*;

fn whole(n: usize) -> ClientShard {
    ClientShard {
        indices: (0..n).collect(),
        weight: 1.0,
    }
}

#[test]
fn parameter_count_and_zero_biases() {
    let spec = ModelSpec::mlp(vec![4, 8, 3], Activation::Tanh);
    assert_eq!(spec.dim(), 67);
    assert_eq!(ModelSpec::logreg(20, 4).dim(), 84);
    let w: ParamVec64 = spec.init_params(1);
    let s = w.as_slice();
    assert!(s[32..40].iter().all(|b| *b == 0.0));
    assert!(s[64..].iter().all(|b| *b == 0.0));
    assert!(s[..32].iter().all(|x| x.abs() <= 0.5));
    assert!(s[40..64].iter().all(|x| x.abs() <= 1.0 / 8f64.sqrt()));
}

#[test]
fn zero_logreg_has_uniform_loss() {
    let spec = ModelSpec::logreg(3, 2);
    let batch = Batch::from_labels(vec![1.0, 2.0, 3.0, -1.0, 0.5, 0.0], &[0, 1], 2).unwrap();
    let (loss, _) = loss_and_grad(&spec, &ParamVec64::zeros(spec.dim()), &batch).unwrap();
    assert!((loss - 2f64.ln()).abs() < 1e-15);
    assert!(Batch::<f64>::from_labels(vec![0.0; 3], &[2], 2).is_err());
}

#[test]
fn duplicated_samples_leave_loss_and_grad_unchanged() {
    let spec = ModelSpec::mlp(vec![3, 5, 2], Activation::Tanh);
    let mut rng = seed::rng(3);
    let w = random_weights(&spec, &mut rng);
    let x = normal_vec(&mut rng, 9);
    let labels = [0, 1, 1];
    let (l1, g1) = loss_and_grad(&spec, &w, &Batch::from_labels(x.clone(), &labels, 2).unwrap()).unwrap();
    let x2: Vec<f64> = x.iter().chain(&x).copied().collect();
    let l2: Vec<usize> = labels.iter().chain(&labels).copied().collect();
    let (l2, g2) = loss_and_grad(&spec, &w, &Batch::from_labels(x2, &l2, 2).unwrap()).unwrap();
    assert!((l1 - l2).abs() < 1e-14);
    assert!(g1.sub(&g2).unwrap().norm() < 1e-14);
}

#[test]
fn local_train_edge_cases() {
    let data = gen_synthetic::<f64>(3, 4, 20, 0.5, 1).unwrap();
    let spec = ModelSpec::logreg(4, 3);
    let w: ParamVec64 = spec.init_params(2);
    let shard = whole(data.len());
    let frozen = LocalTrainConfig {
        lr: 0.0,
        steps: 1,
        batch_size: 8,
    };
    assert_eq!(local_train(&spec, &w, &data, &shard, &frozen, 0).unwrap(), w);
    let none = LocalTrainConfig { steps: 0, ..frozen };
    let err = local_train(&spec, &w, &data, &shard, &none, 0).unwrap_err();
    assert!(err.to_string().contains("K"));
}

#[test]
fn one_step_is_sgd_on_full_batch() {
    let data = gen_synthetic::<f64>(3, 4, 10, 0.5, 4).unwrap();
    let spec = ModelSpec::mlp(vec![4, 6, 3], Activation::Relu);
    let w: ParamVec64 = spec.init_params(5);
    let cfg = LocalTrainConfig {
        lr: 0.3,
        steps: 1,
        batch_size: data.len(),
    };
    let got = local_train(&spec, &w, &data, &whole(data.len()), &cfg, 9).unwrap();
    // the batch is a permutation of the whole set, so the mean gradient matches
    let (_, g) = loss_and_grad(&spec, &w, &data.all().unwrap()).unwrap();
    let expected = w.sub(&g.scaled(0.3)).unwrap();
    assert!(got.sub(&expected).unwrap().norm() < 1e-12);
}

#[test]
fn training_fits_separable_blobs() {
    let train = gen_synthetic::<f64>(4, 10, 100, 0.1, 11).unwrap();
    let test = gen_synthetic::<f64>(4, 10, 50, 0.1, 12).unwrap();
    let spec = ModelSpec::logreg(10, 4);
    let w0: ParamVec64 = spec.init_params(0);
    let cfg = LocalTrainConfig {
        lr: 0.5,
        steps: 50,
        batch_size: 64,
    };
    let w = local_train(&spec, &w0, &train, &whole(train.len()), &cfg, 1).unwrap();
    let (acc, loss) = evaluate(&spec, &w, &test).unwrap();
    let (_, loss0) = evaluate(&spec, &w0, &test).unwrap();
    assert!(acc >= 0.95, "{acc}");
    assert!(loss < loss0);
}

#[test]
fn batch_order_depends_only_on_seed() {
    let data = gen_synthetic::<f64>(2, 3, 30, 0.5, 2).unwrap();
    let spec = ModelSpec::logreg(3, 2);
    let w: ParamVec64 = spec.init_params(0);
    let cfg = LocalTrainConfig {
        lr: 0.1,
        steps: 7,
        batch_size: 8,
    };
    let shard = whole(data.len());
    let a = local_train(&spec, &w, &data, &shard, &cfg, 3).unwrap();
    let b = local_train(&spec, &w, &data, &shard, &cfg, 3).unwrap();
    let c = local_train(&spec, &w, &data, &shard, &cfg, 4).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn loss_is_invariant_to_sample_order(s in any::<u64>(), rows in 1usize..8) {
        let spec = ModelSpec::mlp(vec![3, 4, 3], Activation::Tanh);
        let mut rng = seed::rng(s);
        let w = random_weights(&spec, &mut rng);
        let x = normal_vec(&mut rng, rows * 3);
        let labels: Vec<usize> = (0..rows).map(|r| r % 3).collect();
        let (l1, g1) = loss_and_grad(&spec, &w, &Batch::from_labels(x.clone(), &labels, 3).unwrap()).unwrap();
        let xr: Vec<f64> = x.chunks(3).rev().flatten().copied().collect();
        let lr: Vec<usize> = labels.iter().rev().copied().collect();
        let (l2, g2) = loss_and_grad(&spec, &w, &Batch::from_labels(xr, &lr, 3).unwrap()).unwrap();
        prop_assert!((l1 - l2).abs() <= 1e-12 * l1.abs().max(1.0));
        prop_assert!(g1.sub(&g2).unwrap().norm() <= 1e-12 * g1.norm().max(1.0));
    }

    #[test]
    fn init_is_seeded(s in any::<u64>()) {
        let spec = ModelSpec::mlp(vec![5, 7, 2], Activation::Relu);
        let a: ParamVec64 = spec.init_params(s);
        let b: ParamVec64 = spec.init_params(s);
        prop_assert_eq!(&a, &b);
        prop_assert!(a.is_finite());
    }
}
