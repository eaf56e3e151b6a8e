//! A small fixed-weight stand-in for a promptable segmenter.
//!
//! Encoder: strided linear patch projection `3 x p x p -> embed_channels`.
//! Decoder, per embedding cell `q`:
//!
//! ```text
//! logit(q) = <v, dense(:, q)> + (1/sqrt(dim)) * sum_k <sparse(k, :), M emb(:, q)> + bias
//! ```
//!
//! bilinearly upsampled to the decoder output grid. The image embedding only
//! reaches the logits through the sparse tokens, so a zero prompt with zero
//! bias gives a flat map. Box prompts become two random-Fourier corner
//! tokens plus a constant "no mask" dense embedding.

use ndarray::{Array1, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{check_input, check_prompt, Backbone, BackboneShapeSpec, ImageEmbedding};
use crate::data::PREPROCESS_VERSION;
use crate::error::{Error, Result};
use crate::geometry::TightBox;
use crate::promptnet::PromptEmbedding;
use crate::resize;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyBackboneConfig {
    pub seed: u64,
    pub input_size: (usize, usize),
    pub patch: usize,
    pub embed_channels: usize,
    pub token_dim: usize,
    pub decoder_upsample: usize,
    pub decoder_bias: f64,
    /// Input normalization `(x - pixel_mean) / pixel_std` before projection.
    pub pixel_mean: f64,
    pub pixel_std: f64,
}

impl Default for ToyBackboneConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            input_size: (64, 64),
            patch: 2,
            embed_channels: 16,
            token_dim: 8,
            decoder_upsample: 2,
            decoder_bias: 0.0,
            pixel_mean: 0.5,
            pixel_std: 0.25,
        }
    }
}

impl ToyBackboneConfig {
    pub fn shape_spec(&self) -> BackboneShapeSpec {
        let grid = (self.input_size.0 / self.patch, self.input_size.1 / self.patch);
        BackboneShapeSpec {
            embed_channels: self.embed_channels,
            embed_grid: grid,
            dense_prompt_channels: self.embed_channels,
            dense_prompt_grid: grid,
            token_dim: self.token_dim,
            input_size: self.input_size,
            decoder_output_grid: (grid.0 * self.decoder_upsample, grid.1 * self.decoder_upsample),
        }
    }
}

pub struct ToyBackbone {
    cfg: ToyBackboneConfig,
    spec: BackboneShapeSpec,
    enc_weight: Array2<f64>,
    enc_bias: Array1<f64>,
    dense_proj: Array1<f64>,
    key_proj: Array2<f64>,
    pos_freq: Array2<f64>,
    corner_embed: Array2<f64>,
    no_mask: Array1<f64>,
}

impl ToyBackbone {
    pub fn new(cfg: ToyBackboneConfig) -> Result<Self> {
        if cfg.patch == 0
            || !cfg.input_size.0.is_multiple_of(cfg.patch)
            || !cfg.input_size.1.is_multiple_of(cfg.patch)
            || cfg.decoder_upsample == 0
            || cfg.pixel_std.is_nan()
            || cfg.pixel_std <= 0.0
        {
            return Err(Error::InvalidConfig(format!(
                "toy backbone input {:?} must be a positive multiple of patch {}",
                cfg.input_size, cfg.patch
            )));
        }
        let spec = cfg.shape_spec();
        spec.validate()?;
        let c = cfg.embed_channels;
        let dim = cfg.token_dim;
        let fan_in = 3 * cfg.patch * cfg.patch;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut uniform =
            |shape: (usize, usize), bound: f64| Array2::from_shape_simple_fn(shape, || rng.gen_range(-bound..bound));
        let enc_weight = uniform((c, fan_in), (3.0 / fan_in as f64).sqrt());
        let enc_bias = uniform((1, c), 0.1).row(0).to_owned();
        let dense_proj = uniform((1, c), (3.0 / c as f64).sqrt()).row(0).to_owned();
        let key_proj = uniform((dim, c), (3.0 / c as f64).sqrt());
        let corner_embed = uniform((2, dim), 1.0);
        let no_mask = uniform((1, c), 0.1).row(0).to_owned();
        let pos_freq = Array2::from_shape_simple_fn((2, dim.div_ceil(2)), || rng.sample::<f64, _>(StandardNormal));
        Ok(Self {
            cfg,
            spec,
            enc_weight,
            enc_bias,
            dense_proj,
            key_proj,
            pos_freq,
            corner_embed,
            no_mask,
        })
    }

    pub fn config(&self) -> &ToyBackboneConfig {
        &self.cfg
    }

    /// `M emb` per cell: `(token_dim, h*w)`.
    fn keys(&self, emb: &ImageEmbedding) -> Array2<f64> {
        let (c, h, w) = emb.data.dim();
        let flat = emb
            .data
            .mapv(f64::from)
            .into_shape_with_order((c, h * w))
            .expect("contiguous embedding");
        self.key_proj.dot(&flat)
    }

    fn corner_token(&self, which: usize, row: f64, col: f64) -> Array1<f64> {
        let (h, w) = self.spec.input_size;
        // x, y in [-1, 1]
        let x = 2.0 * col / w as f64 - 1.0;
        let y = 2.0 * row / h as f64 - 1.0;
        let dim = self.cfg.token_dim;
        Array1::from_shape_fn(dim, |j| {
            let f = j / 2;
            let phase = std::f64::consts::TAU * (x * self.pos_freq[[0, f]] + y * self.pos_freq[[1, f]]);
            let pe = if j % 2 == 0 { phase.sin() } else { phase.cos() };
            pe + self.corner_embed[[which, j]]
        })
    }
}

impl Backbone for ToyBackbone {
    fn shape_spec(&self) -> &BackboneShapeSpec {
        &self.spec
    }

    fn fingerprint(&self) -> String {
        let c = &self.cfg;
        format!(
            "toy-v1/seed={}/in={}x{}/patch={}/ch={}/dim={}/up={}/bias={}/norm={},{}/{}",
            c.seed,
            c.input_size.0,
            c.input_size.1,
            c.patch,
            c.embed_channels,
            c.token_dim,
            c.decoder_upsample,
            c.decoder_bias,
            c.pixel_mean,
            c.pixel_std,
            PREPROCESS_VERSION
        )
    }

    fn weights_checksum(&self) -> String {
        let mut h = Sha256::new();
        let arrays = [
            self.enc_weight.as_slice(),
            self.enc_bias.as_slice(),
            self.dense_proj.as_slice(),
            self.key_proj.as_slice(),
            self.pos_freq.as_slice(),
            self.corner_embed.as_slice(),
            self.no_mask.as_slice(),
        ];
        for a in arrays {
            for v in a.expect("owned weights are contiguous") {
                h.update(v.to_le_bytes());
            }
        }
        for v in [self.cfg.decoder_bias, self.cfg.pixel_mean, self.cfg.pixel_std] {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    fn encode_image(&self, source_id: &str, image: &Array3<f32>) -> Result<ImageEmbedding> {
        check_input(&self.spec, image)?;
        let p = self.cfg.patch;
        let (gh, gw) = self.spec.embed_grid;
        let c = self.cfg.embed_channels;
        let mut data = Array3::<f32>::zeros((c, gh, gw));
        let mut patch = vec![0.0f64; 3 * p * p];
        for gy in 0..gh {
            for gx in 0..gw {
                let mut k = 0;
                for ch in 0..3 {
                    for dy in 0..p {
                        for dx in 0..p {
                            let v = f64::from(image[[ch, gy * p + dy, gx * p + dx]]);
                            patch[k] = (v - self.cfg.pixel_mean) / self.cfg.pixel_std;
                            k += 1;
                        }
                    }
                }
                for o in 0..c {
                    let row = self.enc_weight.row(o);
                    let v: f64 = row.iter().zip(&patch).map(|(a, b)| a * b).sum::<f64>() + self.enc_bias[o];
                    data[[o, gy, gx]] = v as f32;
                }
            }
        }
        Ok(ImageEmbedding {
            data,
            source_id: source_id.to_string(),
            backbone_fingerprint: self.fingerprint(),
        })
    }

    fn decode_logits(&self, emb: &ImageEmbedding, pr: &PromptEmbedding) -> Result<Array2<f64>> {
        check_prompt(&self.spec, emb, pr)?;
        let (h, w) = self.spec.embed_grid;
        let dim = self.cfg.token_dim as f64;
        let keys = self.keys(emb);
        let token_sum = pr.sparse.sum_axis(ndarray::Axis(0));
        let attn = token_sum.dot(&keys) / dim.sqrt();
        let mut cells = Array2::from_elem((h, w), self.cfg.decoder_bias);
        for (d, plane) in pr.dense.outer_iter().enumerate() {
            cells.scaled_add(self.dense_proj[d], &plane);
        }
        for (cell, a) in cells.iter_mut().zip(attn.iter()) {
            *cell += a;
        }
        Ok(resize::bilinear(&cells, self.spec.decoder_output_grid))
    }

    fn decode_logits_backward(
        &self,
        emb: &ImageEmbedding,
        pr: &PromptEmbedding,
        grad_logits: &Array2<f64>,
    ) -> Result<PromptEmbedding> {
        check_prompt(&self.spec, emb, pr)?;
        let out = self.spec.decoder_output_grid;
        if grad_logits.dim() != out {
            return Err(Error::shape(
                &[out.0, out.1],
                &[grad_logits.dim().0, grad_logits.dim().1],
            ));
        }
        let (h, w) = self.spec.embed_grid;
        let g_cells = resize::bilinear_adjoint(grad_logits, (h, w));
        let dense = Array3::from_shape_fn(pr.dense.dim(), |(d, y, x)| self.dense_proj[d] * g_cells[[y, x]]);
        let keys = self.keys(emb);
        let g_flat = g_cells.into_shape_with_order(h * w).expect("contiguous");
        let g_token = keys.dot(&g_flat) / (self.cfg.token_dim as f64).sqrt();
        let sparse = Array2::from_shape_fn(pr.sparse.dim(), |(_, j)| g_token[j]);
        Ok(PromptEmbedding { dense, sparse })
    }

    fn encode_box_prompt(&self, bx: &TightBox) -> Result<PromptEmbedding> {
        bx.check_fits(self.spec.input_size)?;
        let tl = self.corner_token(0, bx.rmin as f64, bx.cmin as f64);
        let br = self.corner_token(1, (bx.rmax + 1) as f64, (bx.cmax + 1) as f64);
        let mut sparse = Array2::zeros((2, self.cfg.token_dim));
        sparse.row_mut(0).assign(&tl);
        sparse.row_mut(1).assign(&br);
        let (h, w) = self.spec.dense_prompt_grid;
        let dense = Array3::from_shape_fn((self.cfg.embed_channels, h, w), |(d, _, _)| self.no_mask[d]);
        Ok(PromptEmbedding { dense, sparse })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::decode_mask;

    fn small() -> ToyBackbone {
        ToyBackbone::new(ToyBackboneConfig {
            input_size: (16, 16),
            patch: 4,
            embed_channels: 6,
            token_dim: 4,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn encode_is_deterministic() {
        let bb = small();
        let img = Array3::zeros((3, 16, 16));
        let a = bb.encode_image("z", &img).unwrap();
        let b = bb.encode_image("z", &img).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn one_pixel_changes_embedding() {
        let bb = small();
        let img = Array3::zeros((3, 16, 16));
        let mut img2 = img.clone();
        img2[[0, 5, 9]] = 1.0;
        let a = bb.encode_image("a", &img).unwrap();
        let b = bb.encode_image("b", &img2).unwrap();
        assert_ne!(a.data, b.data);
        // only the cell holding (5, 9) moves
        for ((c, y, x), v) in a.data.indexed_iter() {
            if (y, x) != (1, 2) {
                assert_eq!(*v, b.data[[c, y, x]]);
            }
        }
    }

    #[test]
    fn wrong_input_size() {
        let bb = small();
        assert!(matches!(
            bb.encode_image("x", &Array3::zeros((3, 8, 16))),
            Err(Error::WrongInputSize { .. })
        ));
    }

    #[test]
    fn zero_prompt_gives_half() {
        let bb = small();
        let img = Array3::from_shape_fn((3, 16, 16), |(c, y, x)| ((c + y * x) % 7) as f32 / 7.0);
        let emb = bb.encode_image("x", &img).unwrap();
        let pr = PromptEmbedding::zeros(bb.shape_spec(), 2);
        let f = decode_mask(&bb, &emb, &pr, (16, 16)).unwrap();
        assert!(f.grid.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn box_prompts() {
        let bb = small();
        let a = bb.encode_box_prompt(&TightBox::new(1, 1, 8, 8)).unwrap();
        let a2 = bb.encode_box_prompt(&TightBox::new(1, 1, 8, 8)).unwrap();
        let b = bb.encode_box_prompt(&TightBox::new(2, 1, 8, 12)).unwrap();
        assert_eq!(a, a2);
        assert_ne!(a.sparse, b.sparse);
        let tiny = bb.encode_box_prompt(&TightBox::new(3, 3, 3, 3)).unwrap();
        assert!(tiny.is_finite());
        assert!(bb.encode_box_prompt(&TightBox::new(0, 0, 16, 3)).is_err());
    }

    #[test]
    fn outputs_in_open_unit_interval() {
        let bb = small();
        let img = Array3::from_shape_fn((3, 16, 16), |(_, y, x)| if y > 6 && x > 6 { 1.0 } else { 0.0 });
        let emb = bb.encode_image("x", &img).unwrap();
        let pr = bb.encode_box_prompt(&TightBox::new(6, 6, 15, 15)).unwrap();
        let f = decode_mask(&bb, &emb, &pr, (20, 12)).unwrap();
        assert_eq!(f.shape(), (20, 12));
        assert!(f.grid.iter().all(|&v| v > 0.0 && v < 1.0));
    }
}
