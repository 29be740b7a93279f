use cac_core::nn::{checkpoint, DenseRaUnet, NetConfig};
use cac_core::optim::{toy_dataset, train_toy, LossCurve, TrainConfig};
use cac_core::par::Execution;
use cac_core::tensor::Tensor;

fn short_run(exec: Execution) -> (DenseRaUnet, LossCurve) {
    let data = toy_dataset(3, 16, 11).unwrap();
    let mut net = DenseRaUnet::new(NetConfig::toy(), 11).unwrap();
    let cfg = TrainConfig { epochs: 2, seed: 11, exec, ..Default::default() };
    let curve = train_toy(&mut net, &data, &cfg).unwrap();
    (net, curve)
}

#[test]
fn training_is_deterministic() {
    let (a, ca) = short_run(Execution::default());
    let (b, cb) = short_run(Execution::default());
    assert_eq!(ca, cb);
    assert!(a.store.bit_identical(&b.store));
}

#[test]
fn sequential_and_parallel_agree_bitwise() {
    let (a, ca) = short_run(Execution::Sequential);
    let (b, cb) = short_run(Execution::Parallel);
    assert_eq!(ca, cb);
    assert!(a.store.bit_identical(&b.store));
}

#[test]
fn curve_is_finite_and_well_formed() {
    let (_, curve) = short_run(Execution::default());
    assert_eq!(curve.records.len(), 6);
    assert_eq!(curve.iters_per_epoch, 3);
    assert!(curve.records.iter().all(|r| r.report.total.is_finite() && r.report.total >= 0.0));
    let csv = curve.to_csv();
    assert_eq!(csv.lines().next(), Some(LossCurve::CSV_HEADER));
    assert_eq!(csv.lines().count(), 7);
    assert_eq!(curve.epoch_means().len(), 2);
}

#[test]
fn empty_dataset_is_rejected() {
    let mut net = DenseRaUnet::new(NetConfig::toy(), 0).unwrap();
    assert!(train_toy(&mut net, &[], &TrainConfig::default()).is_err());
    assert!(toy_dataset(0, 16, 0).is_err());
}

#[test]
fn checkpoint_restores_identical_predictions() {
    let (mut net, _) = short_run(Execution::default());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("toy.ckpt");
    checkpoint::save(&net.store, &path).unwrap();

    let mut fresh = DenseRaUnet::new(NetConfig::toy(), 999).unwrap();
    assert!(!fresh.store.bit_identical(&net.store));
    checkpoint::restore_into(&mut fresh.store, &checkpoint::load(&path).unwrap()).unwrap();
    assert!(fresh.store.bit_identical(&net.store));

    let x = toy_dataset(1, 16, 5).unwrap()[0].input_tensor();
    let a: Tensor = net.predict(&x).unwrap();
    let b: Tensor = fresh.predict(&x).unwrap();
    assert_eq!(a.data(), b.data());
}
