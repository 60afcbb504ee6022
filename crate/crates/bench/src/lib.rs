//! Shared fixtures for the criterion benchmarks in `benches/`.

use promptseg::{generate, Dataset, Model, ModelConfig};

/// A freshly initialised model with a small generated dataset to feed it.
pub struct Fixture {
    pub model: Model,
    pub data: Dataset,
}

impl Fixture {
    pub fn new(config: &ModelConfig, images: usize) -> Self {
        let data = generate(config, images, config.seed).expect("synthetic data");
        let model = Model::new(config, data.classes()).expect("model");
        Fixture { model, data }
    }

    pub fn desk() -> Self {
        Self::new(&ModelConfig::desk(), 8)
    }
}

/// `n` pseudo-random label masks of `pixels` entries in `0..=classes`, from a
/// fixed linear congruential sequence so runs are comparable.
pub fn label_masks(n: usize, pixels: usize, classes: u8) -> Vec<Vec<u8>> {
    let mut state = 0x2545_f491_4f6c_dd1du64;
    (0..n)
        .map(|_| {
            (0..pixels)
                .map(|_| {
                    state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                    ((state >> 33) % (classes as u64 + 1)) as u8
                })
                .collect()
        })
        .collect()
}
