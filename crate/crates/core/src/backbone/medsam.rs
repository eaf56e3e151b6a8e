//! Gate for the real MedSAM ViT-B backbone.
//!
//! This build ships no ViT runtime. The adapter validates the weights asset
//! and exposes the ViT-B shape spec so prompt modules and checkpoints can be
//! sized for it, but image encoding and mask decoding report
//! [`Error::BackboneUnavailable`]. Embeddings produced elsewhere can still be
//! fed through the cache under this adapter's fingerprint.

use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use sha2::{Digest, Sha256};

use super::{Backbone, BackboneShapeSpec, ImageEmbedding};
use crate::data::PREPROCESS_VERSION;
use crate::error::{Error, Result};
use crate::geometry::TightBox;
use crate::promptnet::PromptEmbedding;

pub struct MedSamBackbone {
    weights: PathBuf,
    spec: BackboneShapeSpec,
    checksum: String,
}

impl MedSamBackbone {
    pub fn load(weights: &Path) -> Result<Self> {
        let bytes = std::fs::read(weights).map_err(|e| {
            Error::BackboneUnavailable(format!("cannot read MedSAM weights {}: {e}", weights.display()))
        })?;
        if bytes.is_empty() {
            return Err(Error::BackboneUnavailable(format!(
                "MedSAM weights {} are empty",
                weights.display()
            )));
        }
        Ok(Self {
            weights: weights.to_path_buf(),
            spec: BackboneShapeSpec::medsam_vit_b(),
            checksum: hex::encode(Sha256::digest(&bytes)),
        })
    }

    fn unavailable(&self, what: &str) -> Error {
        Error::BackboneUnavailable(format!(
            "{what} needs a MedSAM inference runtime, which this build does not include (weights: {})",
            self.weights.display()
        ))
    }
}

impl Backbone for MedSamBackbone {
    fn shape_spec(&self) -> &BackboneShapeSpec {
        &self.spec
    }

    fn fingerprint(&self) -> String {
        format!("medsam-vit-b/{}/{}", &self.checksum[..16], PREPROCESS_VERSION)
    }

    fn weights_checksum(&self) -> String {
        self.checksum.clone()
    }

    fn encode_image(&self, _source_id: &str, _image: &Array3<f32>) -> Result<ImageEmbedding> {
        Err(self.unavailable("image encoding"))
    }

    fn decode_logits(&self, _emb: &ImageEmbedding, _pr: &PromptEmbedding) -> Result<Array2<f64>> {
        Err(self.unavailable("mask decoding"))
    }

    fn decode_logits_backward(
        &self,
        _emb: &ImageEmbedding,
        _pr: &PromptEmbedding,
        _grad_logits: &Array2<f64>,
    ) -> Result<PromptEmbedding> {
        Err(self.unavailable("mask decoding"))
    }

    fn encode_box_prompt(&self, _bx: &TightBox) -> Result<PromptEmbedding> {
        Err(self.unavailable("box prompt encoding"))
    }
}
