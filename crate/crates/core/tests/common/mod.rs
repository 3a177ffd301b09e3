//! Shared fixtures and independent reference implementations.
#![allow(dead_code)]

pub mod gradcheck;
pub mod oracles;
pub mod suites;

use featgen_core::dataset::RawTable;
use featgen_core::pipeline::prepare;
use featgen_core::policy::PolicyConfig;
use featgen_core::synth::{self, SynthKind};
use featgen_core::{TabularDataset, TaskKind};

/// Split and standardized synthetic dataset, as a run would see it.
pub fn synth_dataset(kind: SynthKind, rows: usize, features: usize, seed: u64) -> TabularDataset {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("data.csv");
    let data = synth::generate(kind, rows, features, seed).unwrap();
    synth::write(&data, &path).unwrap();
    let table = RawTable::read(&path).unwrap();
    prepare(&table, "y", TaskKind::Classification, (0.6, 0.2, 0.2), seed).unwrap()
}

/// A policy small enough for finite differences and quick loops.
pub fn tiny_policy_config() -> PolicyConfig {
    PolicyConfig {
        d_model: 8,
        heads: 2,
        d_ff: 8,
        encoder_layers: 1,
        decoder_layers: 1,
        max_len: 12,
        dropout: 0.0,
        ..PolicyConfig::default()
    }
}

/// Surrogate small enough to train in well under a second.
pub fn tiny_surrogate(ds: &TabularDataset, width: usize, seed: u64) -> featgen_core::evaluators::Surrogate {
    use featgen_core::evaluators::mlp::TrainConfig;
    use featgen_core::evaluators::{train_surrogate, SurrogateConfig};
    let config = SurrogateConfig {
        hidden: vec![8],
        train: TrainConfig {
            epochs: 5,
            batch_size: 32,
            lr: 1e-2,
            patience: None,
        },
        random_views: 1,
    };
    train_surrogate(ds, width, &config, seed).unwrap()
}

/// Short pretraining schedule for loops in tests.
pub fn tiny_pretrain_config() -> featgen_core::pretrain::PretrainConfig {
    featgen_core::pretrain::PretrainConfig {
        epochs: 4,
        sequences_per_epoch: 4,
        val_sequences: 3,
        patience: 10,
        lr: 1e-2,
        ..featgen_core::pretrain::PretrainConfig::with_cap(4)
    }
}

/// A 10-tree forest for reward loops in tests.
pub fn small_downstream() -> featgen_core::evaluators::DownstreamConfig {
    let mut d = featgen_core::evaluators::DownstreamConfig::default();
    d.forest.n_trees = 10;
    d.forest.max_depth = 6;
    d
}
