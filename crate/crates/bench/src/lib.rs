//! Fixtures shared by the benchmarks in `benches/`.

use featgen_core::dataset::{split, standardize};
use featgen_core::policy::{PolicyConfig, PolicyModel};
use featgen_core::synth::{self, SynthKind};
use featgen_core::{seed, FeatureColumn, FeatureKind, TabularDataset, TaskKind};

/// Split and standardized `synth product` data.
pub fn product_dataset(rows: usize, features: usize, seed: u64) -> TabularDataset {
    let data = synth::generate(SynthKind::Product, rows, features, seed).expect("valid synth arguments");
    let columns = (0..features)
        .map(|j| {
            let values = data.features.iter().map(|r| r[j]).collect();
            FeatureColumn::new(format!("V{}", j + 1), FeatureKind::Continuous, values)
        })
        .collect();
    let labels = data.labels.iter().map(|&y| y as f64).collect();
    let ds = TabularDataset::from_columns(columns, labels, TaskKind::Classification);
    let ds = split(&ds, (0.6, 0.2, 0.2), seed).expect("both classes present");
    standardize(&ds).expect("train split is non-empty")
}

/// Default-size policy bound to `ds`.
pub fn default_policy(ds: &TabularDataset, master: u64) -> PolicyModel {
    let config = PolicyConfig {
        dropout: 0.0,
        ..PolicyConfig::default()
    };
    PolicyModel::new(&ds.kinds(), config, &mut seed::rng(master, "policy.init")).expect("valid config")
}
