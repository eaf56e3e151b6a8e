//! The trainable prompt module: image embedding in, dense + sparse prompt
//! embedding out.
//!
//! ```text
//! embedding ─ 1x1 conv ─ ReLU ─┬─ 3x3 conv ─ ReLU ─────────────────────────── dense
//!                              └─ 1x1 conv ─ ReLU ─ max pool ─ fully connected ─ sparse
//! ```
//!
//! Gradients are derived by hand; [`PromptModule::backward`] consumes the
//! activations recorded by [`PromptModule::forward_with_tape`].

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{BackboneShapeSpec, ImageEmbedding};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptModuleConfig {
    pub in_channels: usize,
    pub reduced_channels: usize,
    pub dense_out_channels: usize,
    /// Width of the sparse branch's 1x1 conv.
    pub sparse_channels: usize,
    /// Output bins of the sparse branch's max pooling; `(1, 1)` is global.
    pub sparse_pool: (usize, usize),
    pub sparse_tokens: usize,
    pub sparse_dim: usize,
    pub grid: (usize, usize),
    pub init_seed: u64,
}

impl PromptModuleConfig {
    /// Defaults sized against a backbone: reduce to half the embedding
    /// channels, two sparse tokens, global pooling.
    pub fn for_backbone(spec: &BackboneShapeSpec, init_seed: u64) -> Self {
        let reduced = (spec.embed_channels / 2).max(1);
        Self {
            in_channels: spec.embed_channels,
            reduced_channels: reduced,
            dense_out_channels: spec.dense_prompt_channels,
            sparse_channels: reduced,
            sparse_pool: (1, 1),
            sparse_tokens: 2,
            sparse_dim: spec.token_dim,
            grid: spec.embed_grid,
            init_seed,
        }
    }

    /// Widths used with the ViT-B shape spec; lands near 2.46M parameters.
    pub fn medsam_vit_b(init_seed: u64) -> Self {
        Self {
            sparse_channels: 256,
            sparse_pool: (4, 4),
            ..Self::for_backbone(&BackboneShapeSpec::medsam_vit_b(), init_seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.in_channels,
            self.reduced_channels,
            self.dense_out_channels,
            self.sparse_channels,
            self.sparse_pool.0,
            self.sparse_pool.1,
            self.sparse_tokens,
            self.sparse_dim,
            self.grid.0,
            self.grid.1,
        ];
        if dims.contains(&0) {
            return Err(Error::InvalidConfig("prompt module dims must be >= 1".into()));
        }
        if self.sparse_pool.0 > self.grid.0 || self.sparse_pool.1 > self.grid.1 {
            return Err(Error::InvalidConfig("sparse pooling bins exceed the grid".into()));
        }
        Ok(())
    }

    pub fn check_against(&self, spec: &BackboneShapeSpec) -> Result<()> {
        self.validate()?;
        let mut problems = Vec::new();
        if self.in_channels != spec.embed_channels {
            problems.push(format!(
                "in_channels {} != embed_channels {}",
                self.in_channels, spec.embed_channels
            ));
        }
        if self.grid != spec.embed_grid || self.grid != spec.dense_prompt_grid {
            problems.push(format!(
                "grid {:?} != backbone grid {:?}",
                self.grid, spec.dense_prompt_grid
            ));
        }
        if self.dense_out_channels != spec.dense_prompt_channels {
            problems.push(format!(
                "dense_out_channels {} != dense_prompt_channels {}",
                self.dense_out_channels, spec.dense_prompt_channels
            ));
        }
        if self.sparse_dim != spec.token_dim {
            problems.push(format!(
                "sparse_dim {} != token_dim {}",
                self.sparse_dim, spec.token_dim
            ));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::ShapeSpecMismatch(problems.join("; ")))
        }
    }

    /// Closed-form trainable scalar count.
    pub fn parameter_count(&self) -> usize {
        let (c, r, d, s) = (
            self.in_channels,
            self.reduced_channels,
            self.dense_out_channels,
            self.sparse_channels,
        );
        let fc_in = s * self.sparse_pool.0 * self.sparse_pool.1;
        let fc_out = self.sparse_tokens * self.sparse_dim;
        (r * c + r) + (d * r * 9 + d) + (s * r + s) + (fc_out * fc_in + fc_out)
    }
}

/// Learned prompt: `dense` is `channels x H x W`, `sparse` is `tokens x dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptEmbedding {
    pub dense: Array3<f64>,
    pub sparse: Array2<f64>,
}

impl PromptEmbedding {
    pub fn zeros(spec: &BackboneShapeSpec, tokens: usize) -> Self {
        let (h, w) = spec.dense_prompt_grid;
        Self {
            dense: Array3::zeros((spec.dense_prompt_channels, h, w)),
            sparse: Array2::zeros((tokens, spec.token_dim)),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.dense.iter().chain(self.sparse.iter()).all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Param {
    fn zeros(name: &str, shape: &[usize]) -> Self {
        Self {
            name: name.to_string(),
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }
}

/// Named trainable arrays, in a fixed order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterSet {
    pub params: Vec<Param>,
}

impl ParameterSet {
    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            params: self.params.iter().map(|p| Param::zeros(&p.name, &p.shape)).collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.params.iter().flat_map(|p| p.data.iter())
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.params.iter_mut().flat_map(|p| p.data.iter_mut())
    }

    pub fn all_finite(&self) -> bool {
        self.values().all(|v| v.is_finite())
    }

    /// `self += scale * other`, elementwise.
    pub fn add_scaled(&mut self, other: &ParameterSet, scale: f64) {
        for (a, b) in self.values_mut().zip(other.values()) {
            *a += scale * b;
        }
    }

    /// Every value rounded through `f32`, as stored in checkpoints.
    pub fn rounded_to_f32(&self) -> Self {
        let mut out = self.clone();
        for v in out.values_mut() {
            *v = f64::from(*v as f32);
        }
        out
    }

    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.params {
            h.update(p.name.as_bytes());
            for v in &p.data {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

const REDUCE_W: usize = 0;
const REDUCE_B: usize = 1;
const DENSE_W: usize = 2;
const DENSE_B: usize = 3;
const SPARSE_W: usize = 4;
const SPARSE_B: usize = 5;
const FC_W: usize = 6;
const FC_B: usize = 7;

#[derive(Debug, Clone, PartialEq)]
pub struct PromptModule {
    cfg: PromptModuleConfig,
    params: ParameterSet,
}

/// Activations kept from a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardTape {
    input: Vec<f64>,
    reduced: Vec<f64>,
    dense_pre: Vec<f64>,
    sparse_act: Vec<f64>,
    pooled: Vec<f64>,
    pool_argmax: Vec<usize>,
}

impl PromptModule {
    /// Fan-in scaled uniform weights `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`,
    /// zero biases, drawn in parameter order from `init_seed`.
    pub fn init(cfg: PromptModuleConfig, spec: &BackboneShapeSpec) -> Result<Self> {
        cfg.check_against(spec)?;
        Ok(Self::init_unchecked(cfg))
    }

    fn init_unchecked(cfg: PromptModuleConfig) -> Self {
        let (c, r, d, s) = (
            cfg.in_channels,
            cfg.reduced_channels,
            cfg.dense_out_channels,
            cfg.sparse_channels,
        );
        let fc_in = s * cfg.sparse_pool.0 * cfg.sparse_pool.1;
        let fc_out = cfg.sparse_tokens * cfg.sparse_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
        let mut weight = |name: &str, shape: &[usize], fan_in: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let mut p = Param::zeros(name, shape);
            for v in &mut p.data {
                *v = rng.gen_range(-bound..bound);
            }
            p
        };
        let params = vec![
            weight("reduce.weight", &[r, c], c),
            Param::zeros("reduce.bias", &[r]),
            weight("dense.weight", &[d, r, 3, 3], r * 9),
            Param::zeros("dense.bias", &[d]),
            weight("sparse.weight", &[s, r], r),
            Param::zeros("sparse.bias", &[s]),
            weight("fc.weight", &[fc_out, fc_in], fc_in),
            Param::zeros("fc.bias", &[fc_out]),
        ];
        Self {
            cfg,
            params: ParameterSet { params },
        }
    }

    pub fn from_parts(cfg: PromptModuleConfig, params: ParameterSet) -> Result<Self> {
        cfg.validate()?;
        let expected = Self::init_unchecked(PromptModuleConfig {
            init_seed: 0,
            ..cfg.clone()
        });
        let layout_ok = expected.params.params.len() == params.params.len()
            && expected
                .params
                .params
                .iter()
                .zip(&params.params)
                .all(|(a, b)| a.name == b.name && a.shape == b.shape && b.data.len() == a.data.len());
        if !layout_ok {
            return Err(Error::InvalidConfig(
                "parameter arrays do not match the module config".into(),
            ));
        }
        Ok(Self { cfg, params })
    }

    pub fn config(&self) -> &PromptModuleConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParameterSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterSet {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.count()
    }

    pub fn forward(&self, emb: &ImageEmbedding) -> Result<PromptEmbedding> {
        self.forward_with_tape(emb).map(|(out, _)| out)
    }

    pub fn forward_with_tape(&self, emb: &ImageEmbedding) -> Result<(PromptEmbedding, ForwardTape)> {
        let cfg = &self.cfg;
        let (h, w) = cfg.grid;
        let expected = [cfg.in_channels, h, w];
        let (ec, eh, ew) = emb.data.dim();
        if [ec, eh, ew] != expected {
            return Err(Error::shape(&expected, &[ec, eh, ew]));
        }
        let n = h * w;
        let p = &self.params.params;
        let input: Vec<f64> = emb.data.iter().map(|&v| f64::from(v)).collect();

        let mut reduced = pointwise(&p[REDUCE_W].data, &p[REDUCE_B].data, &input, cfg.in_channels, n);
        relu_inplace(&mut reduced);

        let dense_pre = conv3x3(
            &p[DENSE_W].data,
            &p[DENSE_B].data,
            &reduced,
            cfg.reduced_channels,
            cfg.dense_out_channels,
            (h, w),
        );
        let dense: Vec<f64> = dense_pre.iter().map(|&v| v.max(0.0)).collect();

        let mut sparse_act = pointwise(&p[SPARSE_W].data, &p[SPARSE_B].data, &reduced, cfg.reduced_channels, n);
        relu_inplace(&mut sparse_act);
        let (pooled, pool_argmax) = adaptive_max_pool(&sparse_act, cfg.sparse_channels, (h, w), cfg.sparse_pool);

        let fc_out = cfg.sparse_tokens * cfg.sparse_dim;
        let fc_in = pooled.len();
        let mut sparse = p[FC_B].data.clone();
        for (o, out) in sparse.iter_mut().enumerate() {
            let row = &p[FC_W].data[o * fc_in..(o + 1) * fc_in];
            *out += row.iter().zip(&pooled).map(|(a, b)| a * b).sum::<f64>();
        }
        debug_assert_eq!(sparse.len(), fc_out);

        let out = PromptEmbedding {
            dense: Array3::from_shape_vec((cfg.dense_out_channels, h, w), dense).expect("dense shape"),
            sparse: Array2::from_shape_vec((cfg.sparse_tokens, cfg.sparse_dim), sparse).expect("sparse shape"),
        };
        let tape = ForwardTape {
            input,
            reduced,
            dense_pre,
            sparse_act,
            pooled,
            pool_argmax,
        };
        Ok((out, tape))
    }

    /// Parameter gradients given the gradient of a scalar w.r.t. the
    /// module's output.
    pub fn backward(&self, tape: &ForwardTape, grad_out: &PromptEmbedding) -> ParameterSet {
        let cfg = &self.cfg;
        let (h, w) = cfg.grid;
        let n = h * w;
        let (c, r, d, s) = (
            cfg.in_channels,
            cfg.reduced_channels,
            cfg.dense_out_channels,
            cfg.sparse_channels,
        );
        let p = &self.params.params;
        let mut grads = self.params.zeros_like();
        let mut g_reduced = vec![0.0; r * n];

        // dense branch
        let g_dense_pre: Vec<f64> = grad_out
            .dense
            .iter()
            .zip(&tape.dense_pre)
            .map(|(g, &pre)| if pre > 0.0 { *g } else { 0.0 })
            .collect();
        {
            let (gw, rest) = grads.params.split_at_mut(DENSE_B);
            conv3x3_backward(
                &p[DENSE_W].data,
                &tape.reduced,
                &g_dense_pre,
                (r, d),
                (h, w),
                &mut gw[DENSE_W].data,
                &mut rest[0].data,
                &mut g_reduced,
            );
        }

        // sparse branch
        let fc_in = tape.pooled.len();
        let g_sparse = grad_out.sparse.as_slice().expect("standard layout sparse grad");
        let mut g_pooled = vec![0.0; fc_in];
        for (o, &g) in g_sparse.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grads.params[FC_B].data[o] += g;
            let row = &p[FC_W].data[o * fc_in..(o + 1) * fc_in];
            let grow = &mut grads.params[FC_W].data[o * fc_in..(o + 1) * fc_in];
            for i in 0..fc_in {
                grow[i] += g * tape.pooled[i];
                g_pooled[i] += g * row[i];
            }
        }
        let mut g_sparse_pre = vec![0.0; s * n];
        for (i, &g) in g_pooled.iter().enumerate() {
            let idx = tape.pool_argmax[i];
            if tape.sparse_act[idx] > 0.0 {
                g_sparse_pre[idx] += g;
            }
        }
        pointwise_backward(
            &p[SPARSE_W].data,
            &tape.reduced,
            &g_sparse_pre,
            (r, s),
            n,
            &mut grads.params,
            (SPARSE_W, SPARSE_B),
            &mut g_reduced,
        );

        // trunk
        for (g, &act) in g_reduced.iter_mut().zip(&tape.reduced) {
            if act <= 0.0 {
                *g = 0.0;
            }
        }
        let mut g_input = vec![0.0; c * n];
        pointwise_backward(
            &p[REDUCE_W].data,
            &tape.input,
            &g_reduced,
            (c, r),
            n,
            &mut grads.params,
            (REDUCE_W, REDUCE_B),
            &mut g_input,
        );
        grads
    }

    pub fn save_checkpoint(&self, path: &Path, extra: &serde_json::Value) -> Result<()> {
        let header = serde_json::to_vec(&CheckpointHeader {
            prompt: self.cfg.clone(),
            extra: extra.clone(),
        })?;
        let tmp = path.with_extension("tmp");
        let write = || -> std::io::Result<()> {
            let mut out = BufWriter::new(File::create(&tmp)?);
            out.write_all(CHECKPOINT_MAGIC)?;
            out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
            write_u32(&mut out, header.len())?;
            out.write_all(&header)?;
            write_u32(&mut out, self.params.params.len())?;
            for p in &self.params.params {
                write_u32(&mut out, p.name.len())?;
                out.write_all(p.name.as_bytes())?;
                write_u32(&mut out, p.shape.len())?;
                for &dim in &p.shape {
                    write_u32(&mut out, dim)?;
                }
                for &v in &p.data {
                    out.write_all(&(v as f32).to_le_bytes())?;
                }
            }
            out.into_inner().map_err(|e| e.into_error())?.sync_all()?;
            std::fs::rename(&tmp, path)
        };
        write().map_err(|e| Error::io(path, e))
    }

    pub fn load_checkpoint(path: &Path) -> Result<(Self, serde_json::Value)> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut rd = BufReader::new(file);
        let bad = |reason: &str| Error::Format {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        let io = |e| Error::io(path, e);
        let mut magic = [0u8; 4];
        rd.read_exact(&mut magic).map_err(io)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(bad("not a prompt-module checkpoint"));
        }
        let version = read_u32(&mut rd).map_err(io)?;
        if version != CHECKPOINT_VERSION as usize {
            return Err(bad(&format!("unsupported checkpoint version {version}")));
        }
        let header_len = read_u32(&mut rd).map_err(io)?;
        let mut header = vec![0u8; header_len];
        rd.read_exact(&mut header).map_err(io)?;
        let header: CheckpointHeader = serde_json::from_slice(&header)?;
        let count = read_u32(&mut rd).map_err(io)?;
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = read_u32(&mut rd).map_err(io)?;
            let mut name = vec![0u8; name_len];
            rd.read_exact(&mut name).map_err(io)?;
            let name = String::from_utf8(name).map_err(|_| bad("parameter name is not UTF-8"))?;
            let ndim = read_u32(&mut rd).map_err(io)?;
            let shape = (0..ndim)
                .map(|_| read_u32(&mut rd))
                .collect::<std::io::Result<Vec<_>>>()
                .map_err(io)?;
            let len: usize = shape.iter().product();
            let mut raw = vec![0u8; len * 4];
            rd.read_exact(&mut raw).map_err(io)?;
            let data = raw
                .chunks_exact(4)
                .map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])))
                .collect();
            params.push(Param { name, shape, data });
        }
        let module = Self::from_parts(header.prompt, ParameterSet { params })?;
        Ok((module, header.extra))
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"PMCK";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    prompt: PromptModuleConfig,
    extra: serde_json::Value,
}

fn write_u32(out: &mut impl Write, v: usize) -> std::io::Result<()> {
    let v = u32::try_from(v).map_err(|_| std::io::Error::other("length exceeds u32"))?;
    out.write_all(&v.to_le_bytes())
}

fn read_u32(rd: &mut impl Read) -> std::io::Result<usize> {
    let mut b = [0u8; 4];
    rd.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b) as usize)
}

fn relu_inplace(v: &mut [f64]) {
    for x in v {
        *x = x.max(0.0);
    }
}

/// 1x1 conv over a `(in, n)` activation: weight `(out, in)`.
fn pointwise(weight: &[f64], bias: &[f64], input: &[f64], in_ch: usize, n: usize) -> Vec<f64> {
    let out_ch = bias.len();
    let mut out = vec![0.0; out_ch * n];
    for o in 0..out_ch {
        let dst = &mut out[o * n..(o + 1) * n];
        dst.fill(bias[o]);
        for i in 0..in_ch {
            let wv = weight[o * in_ch + i];
            if wv == 0.0 {
                continue;
            }
            for (d, &x) in dst.iter_mut().zip(&input[i * n..(i + 1) * n]) {
                *d += wv * x;
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn pointwise_backward(
    weight: &[f64],
    input: &[f64],
    grad_out: &[f64],
    (in_ch, out_ch): (usize, usize),
    n: usize,
    grads: &mut [Param],
    (w_idx, b_idx): (usize, usize),
    grad_in: &mut [f64],
) {
    for o in 0..out_ch {
        let g = &grad_out[o * n..(o + 1) * n];
        grads[b_idx].data[o] += g.iter().sum::<f64>();
        for i in 0..in_ch {
            let x = &input[i * n..(i + 1) * n];
            grads[w_idx].data[o * in_ch + i] += g.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
            let wv = weight[o * in_ch + i];
            for (gi, &go) in grad_in[i * n..(i + 1) * n].iter_mut().zip(g) {
                *gi += wv * go;
            }
        }
    }
}

/// Valid source range for a kernel offset `k` in `0..3` with zero padding 1.
fn tap_range(k: usize, len: usize) -> std::ops::Range<usize> {
    match k {
        0 => 1..len,
        1 => 0..len,
        _ => 0..len.saturating_sub(1),
    }
}

fn conv3x3(
    weight: &[f64],
    bias: &[f64],
    input: &[f64],
    in_ch: usize,
    out_ch: usize,
    (h, w): (usize, usize),
) -> Vec<f64> {
    let n = h * w;
    let mut out = vec![0.0; out_ch * n];
    for o in 0..out_ch {
        let dst = &mut out[o * n..(o + 1) * n];
        dst.fill(bias[o]);
        for i in 0..in_ch {
            let src = &input[i * n..(i + 1) * n];
            for ky in 0..3 {
                for kx in 0..3 {
                    let wv = weight[((o * in_ch + i) * 3 + ky) * 3 + kx];
                    for y in tap_range(ky, h) {
                        let sy = y + ky - 1;
                        let xs = tap_range(kx, w);
                        let d = &mut dst[y * w + xs.start..y * w + xs.end];
                        let s = &src[sy * w + xs.start + kx - 1..sy * w + xs.end + kx - 1];
                        for (dv, &sv) in d.iter_mut().zip(s) {
                            *dv += wv * sv;
                        }
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv3x3_backward(
    weight: &[f64],
    input: &[f64],
    grad_out: &[f64],
    (in_ch, out_ch): (usize, usize),
    (h, w): (usize, usize),
    grad_w: &mut [f64],
    grad_b: &mut [f64],
    grad_in: &mut [f64],
) {
    let n = h * w;
    for o in 0..out_ch {
        let g = &grad_out[o * n..(o + 1) * n];
        grad_b[o] += g.iter().sum::<f64>();
        for i in 0..in_ch {
            let src = &input[i * n..(i + 1) * n];
            for ky in 0..3 {
                for kx in 0..3 {
                    let widx = ((o * in_ch + i) * 3 + ky) * 3 + kx;
                    let wv = weight[widx];
                    let mut acc = 0.0;
                    let xs = tap_range(kx, w);
                    for y in tap_range(ky, h) {
                        let sy = y + ky - 1;
                        let gr = &g[y * w + xs.start..y * w + xs.end];
                        let srow = sy * w + xs.start + kx - 1..sy * w + xs.end + kx - 1;
                        acc += gr.iter().zip(&src[srow.clone()]).map(|(a, b)| a * b).sum::<f64>();
                        for (gi, &go) in grad_in[i * n..(i + 1) * n][srow].iter_mut().zip(gr) {
                            *gi += wv * go;
                        }
                    }
                    grad_w[widx] += acc;
                }
            }
        }
    }
}

/// Adaptive max pooling of a `(ch, h*w)` activation into `bins` cells per
/// channel. Bin `i` of an axis of length `len` covers
/// `floor(i*len/b) .. ceil((i+1)*len/b)`. Ties keep the first index.
fn adaptive_max_pool(
    input: &[f64],
    ch: usize,
    (h, w): (usize, usize),
    (bh, bw): (usize, usize),
) -> (Vec<f64>, Vec<usize>) {
    let n = h * w;
    let mut vals = Vec::with_capacity(ch * bh * bw);
    let mut idxs = Vec::with_capacity(ch * bh * bw);
    for c in 0..ch {
        for by in 0..bh {
            let ys = (by * h) / bh..((by + 1) * h).div_ceil(bh);
            for bx in 0..bw {
                let xs = (bx * w) / bw..((bx + 1) * w).div_ceil(bw);
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0;
                for y in ys.clone() {
                    for x in xs.clone() {
                        let idx = c * n + y * w + x;
                        if input[idx] > best {
                            best = input[idx];
                            best_idx = idx;
                        }
                    }
                }
                vals.push(best);
                idxs.push(best_idx);
            }
        }
    }
    (vals, idxs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_spec() -> BackboneShapeSpec {
        BackboneShapeSpec {
            embed_channels: 8,
            embed_grid: (16, 16),
            dense_prompt_channels: 8,
            dense_prompt_grid: (16, 16),
            token_dim: 8,
            input_size: (64, 64),
            decoder_output_grid: (32, 32),
        }
    }

    fn toy_cfg(seed: u64) -> PromptModuleConfig {
        PromptModuleConfig {
            in_channels: 8,
            reduced_channels: 4,
            dense_out_channels: 8,
            sparse_channels: 4,
            sparse_pool: (1, 1),
            sparse_tokens: 2,
            sparse_dim: 8,
            grid: (16, 16),
            init_seed: seed,
        }
    }

    fn embedding(spec: &BackboneShapeSpec, f: impl Fn(usize, usize, usize) -> f32) -> ImageEmbedding {
        let (h, w) = spec.embed_grid;
        ImageEmbedding {
            data: Array3::from_shape_fn((spec.embed_channels, h, w), |(c, y, x)| f(c, y, x)),
            source_id: "t".into(),
            backbone_fingerprint: "test".into(),
        }
    }

    #[test]
    fn toy_output_shapes() {
        let spec = toy_spec();
        let m = PromptModule::init(toy_cfg(1), &spec).unwrap();
        let out = m
            .forward(&embedding(&spec, |c, y, x| (c + y + x) as f32 * 0.01))
            .unwrap();
        assert_eq!(out.dense.dim(), (8, 16, 16));
        assert_eq!(out.sparse.dim(), (2, 8));
        assert!(out.is_finite());
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let spec = toy_spec();
        let a = PromptModule::init(toy_cfg(3), &spec).unwrap();
        let b = PromptModule::init(toy_cfg(3), &spec).unwrap();
        let c = PromptModule::init(toy_cfg(4), &spec).unwrap();
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn zero_input_gives_zero_dense() {
        let spec = toy_spec();
        let m = PromptModule::init(toy_cfg(1), &spec).unwrap();
        let out = m.forward(&embedding(&spec, |_, _, _| 0.0)).unwrap();
        assert!(out.dense.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_is_pure() {
        let spec = toy_spec();
        let m = PromptModule::init(toy_cfg(9), &spec).unwrap();
        let e = embedding(&spec, |c, y, x| ((c * 7 + y * 3 + x) % 5) as f32 - 2.0);
        assert_eq!(m.forward(&e).unwrap(), m.forward(&e).unwrap());
    }

    #[test]
    fn parameter_count_matches_enumeration() {
        let spec = toy_spec();
        let cfg = toy_cfg(0);
        let m = PromptModule::init(cfg.clone(), &spec).unwrap();
        // reduce 4*8+4, dense 8*4*9+8, sparse 4*4+4, fc 16*4+16
        assert_eq!(m.parameter_count(), 36 + 296 + 20 + 80);
        assert_eq!(m.parameter_count(), cfg.parameter_count());
        let wider = PromptModuleConfig {
            reduced_channels: 8,
            ..cfg
        };
        assert!(wider.parameter_count() > m.parameter_count());
    }

    #[test]
    fn medsam_count_near_reported() {
        let cfg = PromptModuleConfig::medsam_vit_b(0);
        cfg.check_against(&BackboneShapeSpec::medsam_vit_b()).unwrap();
        let n = cfg.parameter_count();
        assert!((1_000_000..=5_000_000).contains(&n), "{n}");
        assert_eq!(n, 2_458_752);
    }

    #[test]
    fn rejects_spec_mismatch() {
        let spec = toy_spec();
        let cfg = PromptModuleConfig {
            sparse_dim: 4,
            ..toy_cfg(0)
        };
        assert!(matches!(
            PromptModule::init(cfg, &spec),
            Err(Error::ShapeSpecMismatch(_))
        ));
    }

    #[test]
    fn forward_rejects_wrong_embedding() {
        let spec = toy_spec();
        let m = PromptModule::init(toy_cfg(0), &spec).unwrap();
        let bad = ImageEmbedding {
            data: Array3::zeros((8, 8, 8)),
            source_id: "x".into(),
            backbone_fingerprint: "x".into(),
        };
        assert!(matches!(m.forward(&bad), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn adaptive_pool_bins() {
        // 1 channel, 3x3 grid, 2x2 bins -> overlapping middle row/col
        let input: Vec<f64> = (0..9).map(|v| v as f64).collect();
        let (vals, idx) = adaptive_max_pool(&input, 1, (3, 3), (2, 2));
        assert_eq!(vals, vec![4.0, 5.0, 7.0, 8.0]);
        assert_eq!(idx, vec![4, 5, 7, 8]);
    }

    #[test]
    fn checkpoint_round_trip() {
        let spec = toy_spec();
        let m = PromptModule::init(toy_cfg(5), &spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        let extra = serde_json::json!({"backbone": "toy"});
        m.save_checkpoint(&path, &extra).unwrap();
        let (back, extra_back) = PromptModule::load_checkpoint(&path).unwrap();
        assert_eq!(extra_back, extra);
        assert_eq!(back.config(), m.config());
        assert_eq!(back.params(), &m.params().rounded_to_f32());
    }

    #[test]
    fn checkpoint_rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.bin");
        std::fs::write(&path, b"nope").unwrap();
        assert!(matches!(
            PromptModule::load_checkpoint(&path),
            Err(Error::Format { .. })
        ));
    }
}
