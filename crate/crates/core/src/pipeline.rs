//! Glue from manifests or in-memory images to training and evaluation
//! samples: preprocessing, box mapping, and cached embedding lookup.

use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use sha2::{Digest, Sha256};

use crate::backbone::{cache_get, cache_put, Backbone, CacheEntry, CacheKey, CacheLookup, ImageEmbedding, PutOutcome};
use crate::data::{
    io, preprocess_intensity, spatial_standardize, to_model_input, DatasetManifest, ManifestEntry, PreprocessConfig,
    SpatialTransform, Standardized, SyntheticSample,
};
use crate::error::{Error, Result};
use crate::eval::EvalSample;
use crate::geometry::{map_box_to_grid, tight_box_from_mask, GroundTruthMask, TightBox};
use crate::train::TrainSample;

/// An image after preprocessing, before encoding.
#[derive(Debug, Clone)]
pub struct PreparedImage {
    pub id: String,
    /// Embedding-cache source id: the image id plus a digest of the
    /// preprocessing settings.
    pub source_id: String,
    pub model_input: Array3<f32>,
    pub transform: SpatialTransform,
    /// Ground truth at original resolution.
    pub mask: Option<GroundTruthMask>,
    /// Tight box at original resolution.
    pub original_box: Option<TightBox>,
    pub model_input_size: (usize, usize),
}

fn preprocess_digest(cfg: &PreprocessConfig) -> String {
    let bytes = serde_json::to_vec(cfg).expect("config serializes");
    hex::encode(&Sha256::digest(bytes)[..8])
}

/// Runs intensity and spatial preprocessing. The box defaults to the mask's
/// tight box.
pub fn prepare_image(
    id: &str,
    image: &Array2<f32>,
    mask: Option<GroundTruthMask>,
    bbox: Option<TightBox>,
    spacing: Option<[f64; 2]>,
    cfg: &PreprocessConfig,
) -> Result<PreparedImage> {
    cfg.validate()?;
    let values: Vec<f32> = image.iter().copied().collect();
    let scaled = preprocess_intensity(&values, cfg)?;
    let scaled = Array2::from_shape_vec(image.dim(), scaled).map_err(|e| Error::Invariant(e.to_string()))?;
    let std = spatial_standardize(&scaled, None, spacing, cfg)?;
    if let Some(m) = &mask {
        if m.shape() != image.dim() {
            return Err(Error::shape(
                &[image.nrows(), image.ncols()],
                &[m.shape().0, m.shape().1],
            ));
        }
    }
    let original_box = match (bbox, &mask) {
        (Some(b), _) => {
            b.check_fits(image.dim())?;
            Some(b)
        }
        (None, Some(m)) => Some(tight_box_from_mask(m)?),
        (None, None) => None,
    };
    Ok(PreparedImage {
        id: id.to_string(),
        source_id: format!("{id}@{}", preprocess_digest(cfg)),
        model_input: to_model_input(&std.image, cfg),
        transform: std.transform,
        mask,
        original_box,
        model_input_size: cfg.model_input,
    })
}

/// Reads a PNG or single-slice NIfTI plane, with the header spacing when
/// the format carries one.
pub fn read_plane(path: &Path) -> Result<(Array2<f32>, Option<[f64; 2]>)> {
    if io::is_nifti(path) {
        let vol = io::read_nifti(path)?;
        if vol.data.dim().0 != 1 {
            return Err(Error::Format {
                path: path.to_path_buf(),
                reason: "expected a single 2-D slice".into(),
            });
        }
        Ok((vol.data.index_axis_move(ndarray::Axis(0), 0), Some(vol.spacing)))
    } else {
        Ok((io::read_gray(path)?, None))
    }
}

/// Reads and preprocesses one manifest entry.
pub fn load_entry(manifest: &DatasetManifest, entry: &ManifestEntry, cfg: &PreprocessConfig) -> Result<PreparedImage> {
    let (image, header_spacing) = read_plane(&manifest.resolve(&entry.image_path))?;
    let mask = match &entry.mask_path {
        Some(p) => {
            let (m, _) = read_plane(&manifest.resolve(p))?;
            Some(GroundTruthMask::new(m.mapv(|v| u8::from(v != 0.0))))
        }
        None => None,
    };
    prepare_image(
        &entry.id,
        &image,
        mask,
        entry.tight_box(),
        entry.spacing.or(header_spacing),
        cfg,
    )
}

/// Intensity and spatial standardization of one entry, stopping short of the
/// backbone resize. The box is carried into the standardized frame.
pub fn standardize_entry(
    manifest: &DatasetManifest,
    entry: &ManifestEntry,
    cfg: &PreprocessConfig,
) -> Result<(Standardized, Option<TightBox>)> {
    cfg.validate()?;
    let (image, header_spacing) = read_plane(&manifest.resolve(&entry.image_path))?;
    let mask = match &entry.mask_path {
        Some(p) => Some(GroundTruthMask::new(
            read_plane(&manifest.resolve(p))?.0.mapv(|v| u8::from(v != 0.0)),
        )),
        None => None,
    };
    let values: Vec<f32> = image.iter().copied().collect();
    let scaled = Array2::from_shape_vec(image.dim(), preprocess_intensity(&values, cfg)?)
        .map_err(|e| Error::Invariant(e.to_string()))?;
    let std = spatial_standardize(&scaled, mask.as_ref(), entry.spacing.or(header_spacing), cfg)?;
    let bbox = match (entry.tight_box(), &mask) {
        (Some(b), _) => {
            b.check_fits(image.dim())?;
            Some(b)
        }
        (None, Some(m)) => Some(tight_box_from_mask(m)?),
        (None, None) => None,
    };
    let mapped = bbox.and_then(|b| std.transform.apply_box(&b));
    Ok((std, mapped))
}

pub fn prepare_synthetic(s: &SyntheticSample, cfg: &PreprocessConfig) -> Result<PreparedImage> {
    prepare_image(&s.id, &s.image, Some(s.mask.clone()), Some(s.tight_box), None, cfg)
}

impl PreparedImage {
    /// The tight box carried into backbone input coordinates, widened
    /// outward on every resize.
    pub fn input_box(&self) -> Option<TightBox> {
        let b = self.transform.apply_box(&self.original_box?)?;
        Some(map_box_to_grid(&b, self.transform.out_shape, self.model_input_size))
    }

    pub fn train_sample(&self, embedding: ImageEmbedding) -> Result<TrainSample> {
        let input_box = self
            .input_box()
            .ok_or_else(|| Error::InvalidManifest(format!("{:?} has no box inside the standardized frame", self.id)))?;
        Ok(TrainSample {
            id: self.id.clone(),
            embedding,
            input_box,
        })
    }

    pub fn eval_sample(&self, embedding: ImageEmbedding) -> EvalSample {
        EvalSample {
            id: self.id.clone(),
            embedding,
            mask: self.mask.clone(),
            transform: self.transform,
            input_box: self.input_box(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CacheEvent {
    Hit,
    Written,
    /// Encoded without touching the cache.
    Computed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize)]
pub struct CacheStats {
    pub hits: usize,
    pub writes: usize,
    pub computed: usize,
}

impl CacheStats {
    pub fn record(&mut self, ev: CacheEvent) {
        match ev {
            CacheEvent::Hit => self.hits += 1,
            CacheEvent::Written => self.writes += 1,
            CacheEvent::Computed => self.computed += 1,
        }
    }
}

/// Embedding lookup keyed by (source id, backbone fingerprint). Without a
/// backbone only cached embeddings are available.
pub struct EmbeddingStore<'a> {
    backbone: Option<&'a dyn Backbone>,
    fingerprint: String,
    dir: Option<PathBuf>,
}

impl<'a> EmbeddingStore<'a> {
    pub fn new(backbone: &'a dyn Backbone, dir: Option<PathBuf>) -> Self {
        Self {
            fingerprint: backbone.fingerprint(),
            backbone: Some(backbone),
            dir,
        }
    }

    /// Cache-only store for a backbone identified by `fingerprint`.
    pub fn cache_only(fingerprint: impl Into<String>, dir: PathBuf) -> Self {
        Self {
            backbone: None,
            fingerprint: fingerprint.into(),
            dir: Some(dir),
        }
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn get(&self, image: &PreparedImage) -> Result<(ImageEmbedding, CacheEvent)> {
        let encode = || match self.backbone {
            Some(b) => b.encode_image(&image.source_id, &image.model_input),
            None => Err(Error::CacheMiss(image.source_id.clone())),
        };
        let Some(dir) = &self.dir else {
            return Ok((encode()?, CacheEvent::Computed));
        };
        let key = CacheKey::new(&image.source_id, &self.fingerprint);
        if let CacheLookup::Hit(entry) = cache_get(dir, &key)? {
            return Ok((entry.payload, CacheEvent::Hit));
        }
        let emb = encode()?;
        let ev = match cache_put(dir, &CacheEntry::new(emb.clone()))? {
            PutOutcome::Written => CacheEvent::Written,
            PutOutcome::AlreadyPresent => CacheEvent::Hit,
        };
        Ok((emb, ev))
    }
}

/// Prepares, embeds, and keeps the images in input order.
pub fn embed_all(
    store: &EmbeddingStore,
    images: &[PreparedImage],
    stats: &mut CacheStats,
) -> Result<Vec<ImageEmbedding>> {
    use rayon::prelude::*;
    let results = images
        .par_iter()
        .map(|img| store.get(img))
        .collect::<Result<Vec<_>>>()?;
    Ok(results
        .into_iter()
        .map(|(emb, ev)| {
            stats.record(ev);
            emb
        })
        .collect())
}
