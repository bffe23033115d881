//! Shared fixtures for the criterion benches.

use mfwb_core::synth::{self, Gap3Params};
use mfwb_core::EmbeddingDataset;

/// A `gap3` instance with `images_per_cluster` images in each of the three clusters.
pub fn gap3(images_per_cluster: usize) -> EmbeddingDataset {
    let params = Gap3Params {
        images_per_cluster,
        ..Gap3Params::default()
    };
    synth::gap3(&params, 0)
}
