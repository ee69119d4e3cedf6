//! Shared fixtures for the pipeline benchmarks.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use dacsr_core::catalog::{build_catalog, ItemCatalog};
use dacsr_core::dacsr::{DacsrConfig, DacsrModel};
use dacsr_core::encoder::EncoderConfig;
use dacsr_core::tensor::ParamSet;
use dacsr_core::InteractionSequence;

pub struct BenchFixture {
    pub catalog: ItemCatalog,
    pub params: ParamSet<f32>,
    pub model: DacsrModel,
    pub sequences: Vec<InteractionSequence>,
}

/// A mid-sized randomized catalog, an untrained model at the default
/// dimensionality, and a batch of histories to score.
pub fn fixture(items: usize, attributes: usize, sequences: usize, seq_len: usize) -> BenchFixture {
    let mut rng = StdRng::seed_from_u64(0xBE7C);
    let records: Vec<(String, Vec<String>)> = (0..items)
        .map(|i| {
            let m = 1 + i % 3;
            let labels: Vec<String> = (0..m)
                .map(|k| format!("g{}", (i * 3 + k * 7) % attributes))
                .collect();
            let mut labels = labels;
            labels.sort();
            labels.dedup();
            (format!("i{i:04}"), labels)
        })
        .collect();
    let catalog = build_catalog(&records).unwrap();

    let config = DacsrConfig {
        encoder: EncoderConfig {
            hidden_dim: 64,
            num_blocks: 2,
            num_heads: 1,
            dropout_rate: 0.2,
            max_len: 64,
        },
        ..DacsrConfig::default()
    };
    let mut params: ParamSet<f32> = ParamSet::new();
    let model = DacsrModel::new(&mut params, config, items, &mut rng).unwrap();

    let sequences = (0..sequences)
        .map(|s| {
            let picks: Vec<usize> = (0..seq_len).map(|_| rng.random_range(0..items)).collect();
            InteractionSequence::new(format!("u{s}"), picks, None, &catalog).unwrap()
        })
        .collect();

    BenchFixture {
        catalog,
        params,
        model,
        sequences,
    }
}
