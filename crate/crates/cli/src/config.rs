use std::path::{Path, PathBuf};

use boxprompt::backbone::ToyBackboneConfig;
use boxprompt::constraints::PenaltyKind;
use boxprompt::data::{PreprocessConfig, DEFAULT_MIN_FOREGROUND_PX};
use boxprompt::train::{LossGrid, TrainConfig};
use boxprompt::Error;
use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneArg {
    Toy,
    Medsam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PenaltyArg {
    Relu,
    Logbarrier,
}

impl From<PenaltyArg> for PenaltyKind {
    fn from(p: PenaltyArg) -> Self {
        match p {
            PenaltyArg::Relu => PenaltyKind::ScaledRelu,
            PenaltyArg::Logbarrier => PenaltyKind::PseudoLogBarrier,
        }
    }
}

/// Flat TOML config. Every key is optional; flags override the file.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub subset_seed: Option<u64>,
    pub k: Option<usize>,
    pub backbone: Option<BackboneArg>,
    pub medsam_weights: Option<PathBuf>,
    pub cache: Option<PathBuf>,
    pub penalty: Option<PenaltyArg>,
    pub t: Option<f64>,
    pub band_width: Option<usize>,
    pub lambda_tight: Option<f64>,
    pub lambda_size: Option<f64>,
    pub eps_lo: Option<f64>,
    pub eps_hi: Option<f64>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub weight_decay: Option<f64>,
    pub lr_drop_factor: Option<f64>,
    pub lr_drop_at: Option<f64>,
    /// 0 disables early stopping.
    pub patience: Option<usize>,
    pub threshold: Option<f64>,
    pub loss_grid: Option<LossGrid>,
    pub min_foreground_px: Option<usize>,
    pub clip_lo_pct: Option<f64>,
    pub clip_hi_pct: Option<f64>,
    pub crop_size: Option<usize>,
    pub model_input_size: Option<usize>,
    pub resample_spacing: Option<f64>,
    pub toy_seed: Option<u64>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// Flat TOML config file.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub subset_seed: Option<u64>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long, value_enum)]
    pub backbone: Option<BackboneArg>,
    /// MedSAM ViT-B weights, for `--backbone medsam`.
    #[arg(long, value_name = "FILE")]
    pub medsam_weights: Option<PathBuf>,
    /// Embedding cache directory.
    #[arg(long, value_name = "DIR")]
    pub cache: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub penalty: Option<PenaltyArg>,
    #[arg(long)]
    pub t: Option<f64>,
    #[arg(long)]
    pub lambda_tight: Option<f64>,
    #[arg(long)]
    pub lambda_size: Option<f64>,
    #[arg(long)]
    pub eps_lo: Option<f64>,
    #[arg(long)]
    pub eps_hi: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
}

/// Effective configuration after defaults, file and flags. Echoed into every
/// output directory as `settings.json`.
#[derive(Debug, Clone, Serialize)]
pub struct Settings {
    pub backbone: BackboneArg,
    pub medsam_weights: Option<PathBuf>,
    pub cache: Option<PathBuf>,
    pub seed: u64,
    pub subset_seed: u64,
    pub k: usize,
    pub min_foreground_px: usize,
    pub train: TrainConfig,
    pub preprocess: PreprocessConfig,
    pub toy: ToyBackboneConfig,
}

fn read_file(path: &Path) -> Result<FileConfig, Error> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {}", path.display(), e.message())))
}

impl Settings {
    pub fn resolve(o: &Overrides) -> Result<Self, Error> {
        let f = match &o.config {
            Some(p) => read_file(p)?,
            None => FileConfig::default(),
        };
        let backbone = o.backbone.or(f.backbone).unwrap_or(BackboneArg::Toy);
        let mut toy = ToyBackboneConfig::default();
        if let Some(s) = f.toy_seed {
            toy.seed = s;
        }

        let mut preprocess = PreprocessConfig::default();
        if backbone == BackboneArg::Toy {
            preprocess.crop_pad_size = toy.input_size;
            preprocess.model_input = toy.input_size;
        }
        if let Some(n) = f.crop_size {
            preprocess.crop_pad_size = (n, n);
        }
        if let Some(n) = f.model_input_size {
            preprocess.model_input = (n, n);
        }
        if let Some(v) = f.clip_lo_pct {
            preprocess.clip_lo_pct = v;
        }
        if let Some(v) = f.clip_hi_pct {
            preprocess.clip_hi_pct = v;
        }
        preprocess.resample_spacing = f.resample_spacing;
        preprocess.validate()?;

        let seed = o.seed.or(f.seed).unwrap_or(0);
        let mut train = TrainConfig {
            seed,
            ..Default::default()
        };
        let pick = |flag: Option<f64>, file: Option<f64>, slot: &mut f64| {
            if let Some(v) = flag.or(file) {
                *slot = v;
            }
        };
        if let Some(p) = o.penalty.or(f.penalty) {
            train.penalty.kind = p.into();
        }
        pick(o.t, f.t, &mut train.penalty.t);
        pick(o.lambda_tight, f.lambda_tight, &mut train.weights.lambda_tight);
        pick(o.lambda_size, f.lambda_size, &mut train.weights.lambda_size);
        pick(o.eps_lo, f.eps_lo, &mut train.prior.eps_lo);
        pick(o.eps_hi, f.eps_hi, &mut train.prior.eps_hi);
        pick(o.lr, f.lr, &mut train.lr);
        pick(None, f.weight_decay, &mut train.weight_decay);
        pick(None, f.lr_drop_factor, &mut train.lr_drop_factor);
        pick(None, f.lr_drop_at, &mut train.lr_drop_at);
        pick(None, f.threshold, &mut train.threshold);
        if let Some(v) = o.epochs.or(f.epochs) {
            train.epochs = v;
        }
        if let Some(v) = o.batch_size.or(f.batch_size) {
            train.batch_size = v;
        }
        if let Some(v) = f.band_width {
            train.band_width = v;
        }
        if let Some(p) = f.patience {
            train.patience = (p > 0).then_some(p);
        }
        if let Some(g) = f.loss_grid {
            train.loss_grid = g;
        }
        train.validate()?;

        Ok(Self {
            backbone,
            medsam_weights: o.medsam_weights.clone().or(f.medsam_weights),
            cache: o.cache.clone().or(f.cache),
            seed,
            subset_seed: o.subset_seed.or(f.subset_seed).unwrap_or(0),
            k: o.k.or(f.k).unwrap_or(10),
            min_foreground_px: f.min_foreground_px.unwrap_or(DEFAULT_MIN_FOREGROUND_PX),
            train,
            preprocess,
            toy,
        })
    }

    pub fn backbone_name(&self) -> &'static str {
        match self.backbone {
            BackboneArg::Toy => "toy",
            BackboneArg::Medsam => "medsam",
        }
    }
}
