mod common;

use spider::checkpoint::{AnyTensor, Checkpoint};
use spider::networks::{ModelConfig, ModelParams};
use spider::Tensor;

#[test]
fn mixed_precision_round_trip_is_bitwise() {
    let mut r = common::rng(1);
    let a: Vec<f64> = common::random_vec(&mut r, 60);
    let mut c = Checkpoint::default();
    c.tensors.push(("double".into(), AnyTensor::F64(Tensor::new([3, 4, 5], a.clone()).unwrap())));
    let single: Vec<f32> = a.iter().map(|&v| v as f32 * 1e-30).collect();
    c.tensors.push(("single".into(), AnyTensor::F32(Tensor::new([60], single.clone()).unwrap())));
    c.tensors.push(("scalar".into(), AnyTensor::F32(Tensor::new(Vec::<usize>::new(), vec![f32::MIN_POSITIVE]).unwrap())));
    c.metadata.insert("note".into(), "ünïcode = ok".into());
    let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
    assert_eq!(back, c);
    match back.get("double").unwrap() {
        AnyTensor::F64(t) => assert!(t.data().iter().zip(&a).all(|(x, y)| x.to_bits() == y.to_bits())),
        AnyTensor::F32(_) => panic!("dtype changed"),
    }
    match back.get("single").unwrap() {
        AnyTensor::F32(t) => assert!(t.data().iter().zip(&single).all(|(x, y)| x.to_bits() == y.to_bits())),
        AnyTensor::F64(_) => panic!("dtype changed"),
    }
}

#[test]
fn model_survives_save_and_load() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.spdr");
    let model = ModelParams::<f32>::new(ModelConfig::micro(), 4).unwrap();
    Checkpoint::from_model(&model).save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap().to_model().unwrap();
    for (p, q) in model.store.entries().iter().zip(back.store.entries()) {
        assert_eq!(p.name, q.name);
        assert_eq!(p.tensor.shape(), q.tensor.shape());
        assert!(p.tensor.data().iter().zip(q.tensor.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    assert_eq!(back.config, model.config);
}

#[test]
fn corrupted_files_are_data_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.spdr");
    std::fs::write(&path, b"garbage").unwrap();
    assert!(matches!(Checkpoint::load(&path), Err(spider::Error::Data(_))));
    assert!(matches!(Checkpoint::load(&dir.path().join("absent")), Err(spider::Error::Io { .. })));
    let model = ModelParams::<f32>::new(ModelConfig::micro(), 4).unwrap();
    let mut c = Checkpoint::from_model(&model);
    c.metadata.remove("model.channels");
    assert!(c.to_model().is_err());
}
