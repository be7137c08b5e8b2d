//! Shared fixtures for the benchmark targets.

use attrface_core::data::{generate, AttributeSpec, DatasetConfig, SyntheticDataset};

/// Dataset small enough for per-iteration training benchmarks.
pub fn bench_dataset() -> SyntheticDataset {
    let config = DatasetConfig {
        num_identities: 64,
        images_per_identity: 8,
        latent_dim: 16,
        input_dim: 64,
        attribute_specs: vec![
            AttributeSpec {
                name: "hair_0".into(),
                group: "Hair".into(),
                base_rate: 0.5,
                identity_stability: 0.9,
            },
            AttributeSpec {
                name: "hair_1".into(),
                group: "Hair".into(),
                base_rate: 0.5,
                identity_stability: 0.9,
            },
            AttributeSpec {
                name: "accessories_0".into(),
                group: "Accessories".into(),
                base_rate: 0.5,
                identity_stability: 0.2,
            },
        ],
        noise_sigma: 0.5,
        attribute_signal_beta: 0.5,
        eval_identity_fraction: 0.375,
        seed: 42,
    };
    generate(&config).expect("bench dataset generates")
}
