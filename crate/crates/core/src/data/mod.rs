//! Dataset manifests, preprocessing, weak labels, few-shot sampling, and
//! synthetic data.

pub mod io;
mod manifest;
mod preprocess;
mod synth;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use manifest::{DatasetManifest, ManifestEntry, Split};
pub use preprocess::{
    percentile_nearest_rank, preprocess_intensity, resize_image, spatial_standardize, to_model_input, PreprocessConfig,
    SpatialTransform, Standardized,
};
pub use synth::{generate_synthetic, generate_synthetic_with, SynthOptions, SyntheticSample};

use crate::error::{Error, Result};

/// Bumped whenever preprocessing output changes; part of backbone
/// fingerprints so stale cached embeddings are never reused.
pub const PREPROCESS_VERSION: &str = "prep-v1";

pub const DEFAULT_MIN_FOREGROUND_PX: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShotSpec {
    pub k: usize,
    pub subset_seed: u64,
    pub init_seed: u64,
}

impl Default for FewShotSpec {
    fn default() -> Self {
        Self {
            k: 10,
            subset_seed: 0,
            init_seed: 0,
        }
    }
}

/// Keeps entries whose foreground size reaches `min_px`, in order.
/// `foreground` reports an entry's size (mask count, else box area).
pub fn filter_min_foreground<F>(manifest: &DatasetManifest, min_px: usize, mut foreground: F) -> Result<DatasetManifest>
where
    F: FnMut(&ManifestEntry) -> Result<usize>,
{
    let mut kept = Vec::with_capacity(manifest.entries.len());
    for e in &manifest.entries {
        if min_px == 0 || foreground(e)? >= min_px {
            kept.push(e.clone());
        }
    }
    Ok(manifest.with_entries(kept))
}

/// Foreground size read from disk: mask pixel count when a mask exists,
/// otherwise box area.
pub fn foreground_from_disk(manifest: &DatasetManifest) -> impl FnMut(&ManifestEntry) -> Result<usize> + '_ {
    move |e| {
        if let Some(mp) = &e.mask_path {
            return Ok(io::read_mask(&manifest.resolve(mp))?.foreground_count());
        }
        e.tight_box()
            .map(|b| b.area())
            .ok_or_else(|| Error::InvalidManifest(format!("entry {:?} has neither mask nor box", e.id)))
    }
}

/// `k` distinct indices out of `0..n`, drawn uniformly without replacement
/// from the `subset_seed` stream, sorted ascending.
pub fn few_shot_indices(n: usize, k: usize, subset_seed: u64) -> Result<Vec<usize>> {
    if k < 1 {
        return Err(Error::InvalidConfig("k must be >= 1".into()));
    }
    if k > n {
        return Err(Error::KTooLarge { k, available: n });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(subset_seed);
    let mut picked = rand::seq::index::sample(&mut rng, n, k).into_vec();
    picked.sort_unstable();
    Ok(picked)
}

/// `k` train entries chosen by [`few_shot_indices`], in manifest order.
pub fn sample_few_shot(manifest: &DatasetManifest, spec: &FewShotSpec) -> Result<DatasetManifest> {
    let train: Vec<&ManifestEntry> = manifest.split(Split::Train);
    let picked = few_shot_indices(train.len(), spec.k, spec.subset_seed)?;
    Ok(manifest.with_entries(picked.into_iter().map(|i| train[i].clone()).collect()))
}
