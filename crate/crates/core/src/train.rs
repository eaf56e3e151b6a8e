//! Optimization of the prompt module against a frozen backbone, and the
//! repeated few-shot experiment.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{decode_mask, decode_mask_backward, Backbone, ImageEmbedding};
use crate::constraints::{total_loss_grad, LossBreakdown, LossWeights, PenaltyConfig, SizePrior};
use crate::data::few_shot_indices;
use crate::error::{Error, Result};
use crate::eval::{aggregate_runs, evaluate, EvalSample, MetricsReport, RunAggregate};
use crate::geometry::{build_segments, map_box_to_grid, partition_regions, RegionPartition, SegmentSet, TightBox};
use crate::promptnet::{ParameterSet, PromptModule, PromptModuleConfig};

/// Grid the losses are evaluated on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossGrid {
    /// Backbone input resolution; boxes are used as given.
    #[default]
    ModelInput,
    /// The decoder's native output grid; boxes are mapped outward onto it.
    DecoderOutput,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub lr_drop_factor: f64,
    pub lr_drop_at: f64,
    pub weights: LossWeights,
    pub prior: SizePrior,
    pub penalty: PenaltyConfig,
    pub band_width: usize,
    /// Batch order.
    pub seed: u64,
    pub use_cache: bool,
    /// Stop after this many epochs without a validation Dice improvement.
    pub patience: Option<usize>,
    pub loss_grid: LossGrid,
    pub threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 4,
            lr: 1e-3,
            weight_decay: 1e-4,
            epochs: 100,
            lr_drop_factor: 0.1,
            lr_drop_at: 0.5,
            weights: LossWeights::default(),
            prior: SizePrior::default(),
            penalty: PenaltyConfig::default(),
            band_width: 5,
            seed: 0,
            use_cache: true,
            patience: Some(20),
            loss_grid: LossGrid::default(),
            threshold: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.batch_size < 1 {
            return bad("batch_size must be >= 1".into());
        }
        if self.epochs < 1 {
            return bad("epochs must be >= 1".into());
        }
        if !(self.lr_drop_at > 0.0 && self.lr_drop_at < 1.0) {
            return bad(format!("lr_drop_at must be in (0, 1), got {}", self.lr_drop_at));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be >= 0, got {}", self.lr));
        }
        if !(self.weight_decay >= 0.0 && self.lr_drop_factor > 0.0) {
            return bad("weight_decay must be >= 0 and lr_drop_factor > 0".into());
        }
        if self.band_width < 1 {
            return Err(Error::InvalidWidth(self.band_width));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad(format!("threshold must be in (0, 1), got {}", self.threshold));
        }
        self.weights.validate()?;
        self.prior.validate()?;
        self.penalty.validate()
    }
}

/// Learning rate for `epoch`: `lr` before `ceil(epochs * lr_drop_at)`,
/// `lr * lr_drop_factor` from then on.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> Result<f64> {
    if epoch >= cfg.epochs {
        return Err(Error::EpochOutOfRange {
            epoch,
            epochs: cfg.epochs,
        });
    }
    let drop_epoch = (cfg.epochs as f64 * cfg.lr_drop_at).ceil() as usize;
    Ok(if epoch < drop_epoch {
        cfg.lr
    } else {
        cfg.lr * cfg.lr_drop_factor
    })
}

/// Adam with decoupled weight decay (`p -= lr * wd * p` before the moment
/// update), so `lr = 0` leaves parameters untouched.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: ParameterSet,
    v: ParameterSet,
    steps: i32,
}

impl AdamW {
    pub fn new(like: &ParameterSet) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: like.zeros_like(),
            v: like.zeros_like(),
            steps: 0,
        }
    }

    pub fn step(&mut self, params: &mut ParameterSet, grads: &ParameterSet, lr: f64, weight_decay: f64) {
        self.steps += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let bc1 = 1.0 - b1.powi(self.steps);
        let bc2 = 1.0 - b2.powi(self.steps);
        let state = self.m.values_mut().zip(self.v.values_mut());
        for ((p, &g), (m, v)) in params.values_mut().zip(grads.values()).zip(state) {
            *p -= lr * weight_decay * *p;
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + self.eps);
        }
    }
}

/// A weakly labeled training image: its frozen embedding and tight box in
/// backbone input coordinates.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub id: String,
    pub embedding: ImageEmbedding,
    pub input_box: TightBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mean over training samples of the per-sample losses seen this epoch.
    pub train: LossBreakdown,
    pub val_dice: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: TrainConfig,
    pub prompt_config: PromptModuleConfig,
    pub backbone_fingerprint: String,
    pub backbone_checksum: String,
    pub init_seed: u64,
    pub subset_seed: Option<u64>,
    pub subset_ids: Vec<String>,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_dice: Option<f64>,
    pub best_params_checksum: String,
    pub checkpoint: Option<PathBuf>,
    pub wall_clock_secs: f64,
}

impl RunRecord {
    pub fn loss_trajectory(&self) -> Vec<LossBreakdown> {
        self.epochs.iter().map(|e| e.train).collect()
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub record: RunRecord,
    /// Parameters at the best validation epoch (the last epoch without a
    /// validation set), rounded to `f32` exactly as checkpointed.
    pub best: PromptModule,
    pub last: PromptModule,
}

/// Digest of everything that determines a run's predictions.
pub fn config_fingerprint(cfg: &TrainConfig, prompt: &PromptModuleConfig, backbone_fingerprint: &str) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(cfg).expect("config serializes"));
    h.update(serde_json::to_vec(prompt).expect("config serializes"));
    h.update(backbone_fingerprint.as_bytes());
    hex::encode(h.finalize())
}

struct Prepared<'a> {
    sample: &'a TrainSample,
    grid: (usize, usize),
    part: RegionPartition,
    segs: SegmentSet,
}

fn prepare<'a>(s: &'a TrainSample, backbone: &dyn Backbone, cfg: &TrainConfig) -> Result<Prepared<'a>> {
    let spec = backbone.shape_spec();
    let (grid, bx) = match cfg.loss_grid {
        LossGrid::ModelInput => (spec.input_size, s.input_box),
        LossGrid::DecoderOutput => (
            spec.decoder_output_grid,
            map_box_to_grid(&s.input_box, spec.input_size, spec.decoder_output_grid),
        ),
    };
    Ok(Prepared {
        sample: s,
        grid,
        part: partition_regions(&bx, grid)?,
        segs: build_segments(&bx, cfg.band_width)?,
    })
}

/// Loss of one sample and its gradient w.r.t. the prompt-module parameters.
pub fn sample_loss_grad(
    backbone: &dyn Backbone,
    module: &PromptModule,
    sample: &TrainSample,
    cfg: &TrainConfig,
) -> Result<(LossBreakdown, ParameterSet)> {
    loss_grad(backbone, module, &prepare(sample, backbone, cfg)?, cfg)
}

fn loss_grad(
    backbone: &dyn Backbone,
    module: &PromptModule,
    p: &Prepared,
    cfg: &TrainConfig,
) -> Result<(LossBreakdown, ParameterSet)> {
    let emb = &p.sample.embedding;
    let (pr, tape) = module.forward_with_tape(emb)?;
    let f = decode_mask(backbone, emb, &pr, p.grid)?;
    let loss = total_loss_grad(&f, &p.part, &p.segs, &cfg.weights, &cfg.prior, &cfg.penalty)?;
    let grad_pr = decode_mask_backward(backbone, emb, &pr, &f, &loss.grad)?;
    Ok((loss.value, module.backward(&tape, &grad_pr)))
}

struct RunFiles {
    metrics: BufWriter<File>,
    checkpoint: PathBuf,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let bytes = serde_json::to_vec_pretty(value)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Trains `module` on `train` with the backbone frozen.
///
/// Samples are processed in parallel within a batch but gradients are summed
/// in batch order, so results are bit-reproducible. With a `run_dir`, writes
/// `config.json`, `metrics.jsonl`, `best.pmck` and `record.json` there.
pub fn train(
    cfg: &TrainConfig,
    train: &[TrainSample],
    val: &[EvalSample],
    backbone: &dyn Backbone,
    module: PromptModule,
    run_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    let started = Instant::now();
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyTrainSet);
    }
    module.config().check_against(backbone.shape_spec())?;
    let checksum_before = backbone.weights_checksum();
    let fingerprint = backbone.fingerprint();
    let cfg_fp = config_fingerprint(cfg, module.config(), &fingerprint);

    let mut files = match run_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            write_json(
                &dir.join("config.json"),
                &serde_json::json!({
                    "train": cfg,
                    "prompt": module.config(),
                    "backbone_fingerprint": fingerprint,
                }),
            )?;
            let mp = dir.join("metrics.jsonl");
            Some(RunFiles {
                metrics: BufWriter::new(File::create(&mp).map_err(|e| Error::io(&mp, e))?),
                checkpoint: dir.join("best.pmck"),
            })
        }
        None => None,
    };

    let prepared = train
        .iter()
        .map(|s| prepare(s, backbone, cfg))
        .collect::<Result<Vec<_>>>()?;
    let mut module = module;
    let mut opt = AdamW::new(module.params());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, PromptModule)> = None;

    for epoch in 0..cfg.epochs {
        let lr = lr_at(epoch, cfg)?;
        order.shuffle(&mut rng);
        let mut epoch_loss = LossBreakdown::default();
        for batch in order.chunks(cfg.batch_size) {
            let results = batch
                .par_iter()
                .map(|&i| loss_grad(backbone, &module, &prepared[i], cfg))
                .collect::<Result<Vec<_>>>()?;
            let scale = 1.0 / batch.len() as f64;
            let mut grads = module.params().zeros_like();
            for (loss, g) in &results {
                grads.add_scaled(g, scale);
                epoch_loss.add_scaled(loss, 1.0 / prepared.len() as f64);
            }
            opt.step(module.params_mut(), &grads, lr, cfg.weight_decay);
        }
        if !module.params().all_finite() {
            return Err(Error::Invariant(format!("non-finite parameters after epoch {epoch}")));
        }

        let val_dice = if val.is_empty() {
            None
        } else {
            Some(evaluate(backbone, &module, val, cfg.threshold, &cfg_fp)?.mean)
        };
        let record = EpochRecord {
            epoch,
            lr,
            train: epoch_loss,
            val_dice,
        };
        if let Some(f) = files.as_mut() {
            serde_json::to_writer(&mut f.metrics, &record)?;
            f.metrics.write_all(b"\n").map_err(|e| Error::io(&f.checkpoint, e))?;
        }
        epochs.push(record);

        let improved = match (&best, val_dice) {
            (None, _) => true,
            (Some(_), None) => true,
            (Some((_, b, _)), Some(d)) => d > *b,
        };
        if improved {
            let snapshot = PromptModule::from_parts(module.config().clone(), module.params().rounded_to_f32())?;
            best = Some((epoch, val_dice.unwrap_or(f64::NAN), snapshot));
        }
        if let (Some(p), Some((b, _, _)), false) = (cfg.patience, &best, val.is_empty()) {
            if epoch - b >= p {
                break;
            }
        }
    }

    let checksum_after = backbone.weights_checksum();
    if checksum_after != checksum_before {
        return Err(Error::Invariant("backbone weights changed during training".into()));
    }
    let (best_epoch, best_dice, best_module) = best.expect("at least one epoch ran");
    let mut record = RunRecord {
        config: cfg.clone(),
        prompt_config: module.config().clone(),
        backbone_fingerprint: fingerprint.clone(),
        backbone_checksum: checksum_after,
        init_seed: module.config().init_seed,
        subset_seed: None,
        subset_ids: train.iter().map(|s| s.id.clone()).collect(),
        epochs,
        best_epoch,
        best_val_dice: (!val.is_empty()).then_some(best_dice),
        best_params_checksum: best_module.params().checksum(),
        checkpoint: None,
        wall_clock_secs: 0.0,
    };
    if let (Some(f), Some(dir)) = (files.as_mut(), run_dir) {
        f.metrics.flush().map_err(|e| Error::io(dir, e))?;
        let extra = serde_json::json!({
            "backbone_fingerprint": fingerprint,
            "epoch": best_epoch,
            "train": cfg,
        });
        best_module.save_checkpoint(&f.checkpoint, &extra)?;
        record.checkpoint = Some(f.checkpoint.clone());
        record.wall_clock_secs = started.elapsed().as_secs_f64();
        write_json(&dir.join("record.json"), &record)?;
    } else {
        record.wall_clock_secs = started.elapsed().as_secs_f64();
    }
    Ok(TrainOutcome {
        record,
        best: best_module,
        last: module,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    pub k: usize,
    pub subset_seeds: [u64; 3],
    pub init_seeds: [u64; 3],
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            k: 10,
            subset_seeds: [0, 1, 2],
            init_seeds: [0, 1, 2],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRun {
    pub subset_seed: u64,
    pub init_seed: u64,
    pub record: RunRecord,
    /// Test scores of the selected (best validation) parameters.
    pub test: MetricsReport,
    /// Test scores of the parameters after the final epoch.
    pub test_last: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub runs: Vec<ExperimentRun>,
    pub aggregate: RunAggregate,
}

/// One run per (subset seed, init seed) pair: draw `k` samples from `pool`,
/// initialize the prompt module from the init seed (which also seeds batch
/// order), train, and score both the best and the final parameters on `test`.
pub fn repeated_experiment(
    cfg: &ExperimentConfig,
    pool: &[TrainSample],
    val: &[EvalSample],
    test: &[EvalSample],
    backbone: &dyn Backbone,
    prompt: &PromptModuleConfig,
    run_dir: Option<&Path>,
) -> Result<ExperimentReport> {
    cfg.train.validate()?;
    few_shot_indices(pool.len(), cfg.k, 0)?;
    let combos: Vec<(u64, u64)> = cfg
        .subset_seeds
        .iter()
        .flat_map(|&s| cfg.init_seeds.iter().map(move |&i| (s, i)))
        .collect();
    let runs = combos
        .par_iter()
        .map(|&(subset_seed, init_seed)| {
            let picked = few_shot_indices(pool.len(), cfg.k, subset_seed)?;
            let subset: Vec<TrainSample> = picked.iter().map(|&i| pool[i].clone()).collect();
            let pcfg = PromptModuleConfig {
                init_seed,
                ..prompt.clone()
            };
            let module = PromptModule::init(pcfg.clone(), backbone.shape_spec())?;
            let tcfg = TrainConfig {
                seed: init_seed,
                ..cfg.train.clone()
            };
            let dir = run_dir.map(|d| d.join(format!("subset{subset_seed}_init{init_seed}")));
            let out = train(&tcfg, &subset, val, backbone, module, dir.as_deref())?;
            let mut record = out.record;
            record.subset_seed = Some(subset_seed);
            let fp = config_fingerprint(&tcfg, &pcfg, &backbone.fingerprint());
            let test_last = evaluate(backbone, &out.last, test, tcfg.threshold, &fp)?;
            let test = evaluate(backbone, &out.best, test, tcfg.threshold, &fp)?;
            Ok(ExperimentRun {
                subset_seed,
                init_seed,
                record,
                test,
                test_last,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let reports: Vec<MetricsReport> = runs.iter().map(|r| r.test.clone()).collect();
    let aggregate = aggregate_runs(&reports)?;
    let report = ExperimentReport { runs, aggregate };
    if let Some(dir) = run_dir {
        write_json(&dir.join("report.json"), &report)?;
    }
    Ok(report)
}
