//! Boundary to the frozen promptable segmenter.
//!
//! A [`Backbone`] encodes images, decodes prompt embeddings into mask logits,
//! and exposes the adjoint of its decoder w.r.t. the prompt so losses can be
//! pushed back into the prompt module. Backbone weights are never updated.

mod cache;
mod medsam;
mod toy;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

pub use cache::{
    cache_get, cache_put, read_embedding_file, write_embedding_file, CacheEntry, CacheKey, CacheLookup, PutOutcome,
};
pub use medsam::MedSamBackbone;
pub use toy::{ToyBackbone, ToyBackboneConfig};

use crate::error::{Error, Result};
use crate::geometry::{ProbabilityMap, TightBox};
use crate::promptnet::PromptEmbedding;
use crate::resize;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneShapeSpec {
    pub embed_channels: usize,
    pub embed_grid: (usize, usize),
    pub dense_prompt_channels: usize,
    pub dense_prompt_grid: (usize, usize),
    pub token_dim: usize,
    pub input_size: (usize, usize),
    pub decoder_output_grid: (usize, usize),
}

impl BackboneShapeSpec {
    /// SAM / MedSAM ViT-B: 256 x 64 x 64 embeddings from 1024 x 1024 input,
    /// 256 x 256 low-resolution mask logits.
    pub fn medsam_vit_b() -> Self {
        Self {
            embed_channels: 256,
            embed_grid: (64, 64),
            dense_prompt_channels: 256,
            dense_prompt_grid: (64, 64),
            token_dim: 256,
            input_size: (1024, 1024),
            decoder_output_grid: (256, 256),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.embed_channels,
            self.embed_grid.0,
            self.embed_grid.1,
            self.dense_prompt_channels,
            self.token_dim,
            self.input_size.0,
            self.input_size.1,
            self.decoder_output_grid.0,
            self.decoder_output_grid.1,
        ];
        if dims.contains(&0) {
            return Err(Error::InvalidConfig("backbone dims must be positive".into()));
        }
        if self.dense_prompt_grid != self.embed_grid {
            return Err(Error::InvalidConfig(
                "dense prompt grid must match the embedding grid".into(),
            ));
        }
        Ok(())
    }
}

/// Frozen encoder output, stored at single precision.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageEmbedding {
    pub data: Array3<f32>,
    pub source_id: String,
    pub backbone_fingerprint: String,
}

pub trait Backbone: Send + Sync {
    fn shape_spec(&self) -> &BackboneShapeSpec;

    /// Identifies weights + preprocessing; part of every cache key.
    fn fingerprint(&self) -> String;

    /// Digest of all backbone weights.
    fn weights_checksum(&self) -> String;

    /// `image` is `3 x input_size`.
    fn encode_image(&self, source_id: &str, image: &Array3<f32>) -> Result<ImageEmbedding>;

    /// Mask logits on `decoder_output_grid`.
    fn decode_logits(&self, emb: &ImageEmbedding, pr: &PromptEmbedding) -> Result<Array2<f64>>;

    /// Gradient w.r.t. the prompt given a gradient on the logits.
    fn decode_logits_backward(
        &self,
        emb: &ImageEmbedding,
        pr: &PromptEmbedding,
        grad_logits: &Array2<f64>,
    ) -> Result<PromptEmbedding>;

    /// Native box-prompt embedding; `bx` is in `input_size` coordinates.
    fn encode_box_prompt(&self, bx: &TightBox) -> Result<PromptEmbedding>;
}

pub(crate) fn check_input(spec: &BackboneShapeSpec, image: &Array3<f32>) -> Result<()> {
    let (c, h, w) = image.dim();
    if c != 3 || (h, w) != spec.input_size {
        return Err(Error::WrongInputSize {
            expected: spec.input_size,
            actual: (h, w),
        });
    }
    Ok(())
}

pub(crate) fn check_prompt(spec: &BackboneShapeSpec, emb: &ImageEmbedding, pr: &PromptEmbedding) -> Result<()> {
    let (eh, ew) = spec.embed_grid;
    let (ph, pw) = spec.dense_prompt_grid;
    let emb_dim = emb.data.dim();
    if emb_dim != (spec.embed_channels, eh, ew) {
        return Err(Error::shape(
            &[spec.embed_channels, eh, ew],
            &[emb_dim.0, emb_dim.1, emb_dim.2],
        ));
    }
    let dd = pr.dense.dim();
    if dd != (spec.dense_prompt_channels, ph, pw) {
        return Err(Error::shape(&[spec.dense_prompt_channels, ph, pw], &[dd.0, dd.1, dd.2]));
    }
    if pr.sparse.ncols() != spec.token_dim {
        return Err(Error::shape(
            &[pr.sparse.nrows(), spec.token_dim],
            &[pr.sparse.nrows(), pr.sparse.ncols()],
        ));
    }
    Ok(())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Decoder logits bilinearly resized to `out_shape`, then squashed.
pub fn decode_mask(
    backbone: &dyn Backbone,
    emb: &ImageEmbedding,
    pr: &PromptEmbedding,
    out_shape: (usize, usize),
) -> Result<ProbabilityMap> {
    let logits = backbone.decode_logits(emb, pr)?;
    let resized = resize::bilinear(&logits, out_shape);
    Ok(ProbabilityMap {
        grid: resized.mapv(sigmoid),
    })
}

/// Chain rule through [`decode_mask`]: gradient w.r.t. the prompt given the
/// gradient w.r.t. the probability map `f` it produced.
pub fn decode_mask_backward(
    backbone: &dyn Backbone,
    emb: &ImageEmbedding,
    pr: &PromptEmbedding,
    f: &ProbabilityMap,
    grad_f: &Array2<f64>,
) -> Result<PromptEmbedding> {
    if grad_f.dim() != f.shape() {
        return Err(Error::shape(
            &[f.shape().0, f.shape().1],
            &[grad_f.dim().0, grad_f.dim().1],
        ));
    }
    let grad_resized = ndarray::Zip::from(grad_f)
        .and(&f.grid)
        .map_collect(|&g, &p| g * p * (1.0 - p));
    let grad_logits = resize::bilinear_adjoint(&grad_resized, backbone.shape_spec().decoder_output_grid);
    backbone.decode_logits_backward(emb, pr, &grad_logits)
}

/// Builds the named backbone. `medsam` needs a weights path.
pub fn load_backbone(
    name: &str,
    toy: &ToyBackboneConfig,
    medsam_weights: Option<&std::path::Path>,
) -> Result<Box<dyn Backbone>> {
    match name {
        "toy" => Ok(Box::new(ToyBackbone::new(toy.clone())?)),
        "medsam" => {
            let path = medsam_weights
                .ok_or_else(|| Error::BackboneUnavailable("medsam backbone needs a weights path".into()))?;
            Ok(Box::new(MedSamBackbone::load(path)?))
        }
        other => Err(Error::InvalidConfig(format!("unknown backbone {other:?}"))),
    }
}
