#![allow(dead_code)]

use std::path::Path;

use scnn::data::cifar::CifarVariant;
use scnn::harness::ExperimentConfig;
use scnn::nn::TrainConfig;
use scnn::synthetic::{write_cifar_fixture, write_stl10_fixture, StlFixture};

/// Writes synthetic STL-10 and CIFAR-10 files under `root`.
pub fn write_data(root: &Path, unlabeled: usize, train: usize, test: usize) {
    let stl = StlFixture {
        unlabeled,
        train,
        test,
        folds: 10,
        fold_size: train / 5,
        seed: 11,
    };
    write_stl10_fixture(&root.join("stl10_binary"), &stl).unwrap();
    write_cifar_fixture(&root.join("cifar-10-batches-bin"), CifarVariant::Cifar10, train, test, 12).unwrap();
}

/// Small, fast pipeline settings over the data under `root`.
pub fn config(root: &Path, out: &Path, classes: usize) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.output_dir = out.to_path_buf();
    cfg.data.root = Some(root.to_path_buf());
    cfg.data.folds = Some(vec![0, 1]);
    cfg.surrogate.classes = classes;
    cfg.surrogate.holdout_fraction = 0.1;
    cfg.experiment.classes = vec![classes];
    cfg.train = TrainConfig {
        epochs: 2,
        batch_size: 32,
        ..TrainConfig::default()
    };
    cfg.svm.epochs = 5;
    cfg
}
