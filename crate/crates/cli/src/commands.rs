use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use boxprompt::backbone::{load_backbone, Backbone, ImageEmbedding};
use boxprompt::data::{
    few_shot_indices, filter_min_foreground, foreground_from_disk, generate_synthetic_with, io, DatasetManifest,
    ManifestEntry, Split, SynthOptions,
};
use boxprompt::eval::{binarize, evaluate, evaluate_prompted_baseline, predict_original, MetricsReport};
use boxprompt::pipeline::{
    embed_all, load_entry, prepare_image, read_plane, standardize_entry, CacheStats, EmbeddingStore, PreparedImage,
};
use boxprompt::promptnet::{PromptModule, PromptModuleConfig};
use boxprompt::train::{config_fingerprint, repeated_experiment, train, ExperimentConfig, TrainConfig};
use boxprompt::Error;
use serde::Serialize;

use crate::config::Settings;

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Creates `out` and echoes the effective settings into it.
fn start(out: &Path, settings: &Settings) -> Result<()> {
    create_dir(out)?;
    write_json(&out.join("settings.json"), settings)
}

fn backbone(settings: &Settings) -> Result<Box<dyn Backbone>> {
    Ok(load_backbone(
        settings.backbone_name(),
        &settings.toy,
        settings.medsam_weights.as_deref(),
    )?)
}

fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    DatasetManifest::load(path).with_context(|| format!("loading manifest {}", path.display()))
}

fn prepare_entries(
    manifest: &DatasetManifest,
    entries: &[&ManifestEntry],
    settings: &Settings,
) -> Result<Vec<PreparedImage>> {
    entries
        .iter()
        .map(|e| load_entry(manifest, e, &settings.preprocess).with_context(|| format!("preparing {:?}", e.id)))
        .collect()
}

fn embed(
    settings: &Settings,
    bb: &dyn Backbone,
    images: &[PreparedImage],
    stats: &mut CacheStats,
) -> Result<Vec<ImageEmbedding>> {
    let store = EmbeddingStore::new(bb, settings.cache.clone());
    Ok(embed_all(&store, images, stats)?)
}

/// Train entries that pass the minimum foreground filter.
fn train_pool<'m>(manifest: &'m DatasetManifest, settings: &Settings) -> Result<Vec<&'m ManifestEntry>> {
    let split = manifest.with_entries(manifest.split(Split::Train).into_iter().cloned().collect());
    let kept = filter_min_foreground(&split, settings.min_foreground_px, foreground_from_disk(&split))?;
    Ok(manifest
        .entries
        .iter()
        .filter(|e| kept.entries.iter().any(|k| k.id == e.id))
        .collect())
}

pub fn parse_split(s: &str) -> Result<Split, String> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        other => Err(format!("unknown split {other:?}, expected train, val or test")),
    }
}

pub fn synth(n: usize, size: usize, out: &Path, settings: &Settings) -> Result<PathBuf> {
    if n == 0 {
        return Err(Error::InvalidConfig("--n must be at least 1".into()).into());
    }
    start(out, settings)?;
    for sub in ["images", "masks"] {
        create_dir(&out.join(sub))?;
    }
    let samples = generate_synthetic_with(n, settings.seed, &SynthOptions::new((size, size)));
    let (n_test, n_val) = (n / 3, n / 6);
    let mut entries = Vec::with_capacity(n);
    for (i, s) in samples.iter().enumerate() {
        let image_path = format!("images/{}.png", s.id);
        let mask_path = format!("masks/{}.png", s.id);
        io::write_gray8(&out.join(&image_path), &s.image)?;
        io::write_mask(&out.join(&mask_path), &s.mask)?;
        let split = if i < n_test {
            Split::Test
        } else if i < n_test + n_val {
            Split::Val
        } else {
            Split::Train
        };
        entries.push(ManifestEntry {
            id: s.id.clone(),
            image_path,
            mask_path: Some(mask_path),
            bbox: Some(s.tight_box.as_array()),
            split,
            spacing: None,
        });
    }
    let path = out.join("manifest.jsonl");
    DatasetManifest::new(entries, out)?.save(&path)?;
    Ok(path)
}

#[derive(Serialize)]
struct PreprocessSummary {
    kept: Vec<String>,
    dropped_small_foreground: Vec<String>,
}

pub fn preprocess(manifest_path: &Path, out: &Path, settings: &Settings) -> Result<PathBuf> {
    let manifest = load_manifest(manifest_path)?;
    start(out, settings)?;
    for sub in ["images", "masks"] {
        create_dir(&out.join(sub))?;
    }
    let pool: Vec<String> = train_pool(&manifest, settings)?.iter().map(|e| e.id.clone()).collect();
    let mut summary = PreprocessSummary {
        kept: Vec::new(),
        dropped_small_foreground: Vec::new(),
    };
    let mut entries = Vec::new();
    let max = settings.preprocess.rescale_max;
    for e in &manifest.entries {
        if e.split == Split::Train && !pool.contains(&e.id) {
            summary.dropped_small_foreground.push(e.id.clone());
            continue;
        }
        let (std, bbox) = standardize_entry(&manifest, e, &settings.preprocess)
            .with_context(|| format!("preprocessing {:?}", e.id))?;
        let image_path = format!("images/{}.png", e.id);
        io::write_unit16(&out.join(&image_path), &std.image.mapv(|v| f64::from(v) / max))?;
        let mask_path = match &std.mask {
            Some(m) => {
                let p = format!("masks/{}.png", e.id);
                io::write_mask(&out.join(&p), m)?;
                Some(p)
            }
            None => None,
        };
        entries.push(ManifestEntry {
            id: e.id.clone(),
            image_path,
            mask_path,
            bbox: bbox.map(|b| b.as_array()),
            split: e.split,
            spacing: settings.preprocess.resample_spacing.map(|s| [s, s]),
        });
        summary.kept.push(e.id.clone());
    }
    write_json(&out.join("preprocess.json"), &summary)?;
    let path = out.join("manifest.jsonl");
    DatasetManifest::new(entries, out)?.save(&path)?;
    Ok(path)
}

pub fn cache_embeddings(manifest_path: &Path, settings: &Settings) -> Result<CacheStats> {
    if settings.cache.is_none() {
        return Err(Error::InvalidConfig("cache-embeddings needs --cache DIR".into()).into());
    }
    let manifest = load_manifest(manifest_path)?;
    let bb = backbone(settings)?;
    let all: Vec<&ManifestEntry> = manifest.entries.iter().collect();
    let images = prepare_entries(&manifest, &all, settings)?;
    let mut stats = CacheStats::default();
    embed(settings, bb.as_ref(), &images, &mut stats)?;
    Ok(stats)
}

pub fn train_cmd(manifest_path: &Path, out: &Path, settings: &Settings) -> Result<PathBuf> {
    let manifest = load_manifest(manifest_path)?;
    let pool = train_pool(&manifest, settings)?;
    let picked = few_shot_indices(pool.len(), settings.k, settings.subset_seed)?;
    start(out, settings)?;
    let bb = backbone(settings)?;
    let subset: Vec<&ManifestEntry> = picked.iter().map(|&i| pool[i]).collect();
    let mut stats = CacheStats::default();
    let train_imgs = prepare_entries(&manifest, &subset, settings)?;
    let train_set = train_imgs
        .iter()
        .zip(embed(settings, bb.as_ref(), &train_imgs, &mut stats)?)
        .map(|(p, e)| p.train_sample(e))
        .collect::<boxprompt::Result<Vec<_>>>()?;
    let val_imgs = prepare_entries(&manifest, &manifest.split(Split::Val), settings)?;
    let val_set: Vec<_> = val_imgs
        .iter()
        .zip(embed(settings, bb.as_ref(), &val_imgs, &mut stats)?)
        .map(|(p, e)| p.eval_sample(e))
        .collect();

    let module = PromptModule::init(
        PromptModuleConfig::for_backbone(bb.shape_spec(), settings.seed),
        bb.shape_spec(),
    )?;
    let outcome = train(&settings.train, &train_set, &val_set, bb.as_ref(), module, Some(out))?;
    let mut record = outcome.record;
    record.subset_seed = Some(settings.subset_seed);
    let path = out.join("record.json");
    write_json(&path, &record)?;
    Ok(path)
}

/// Loads a checkpoint and checks it was trained against this backbone.
fn load_checked(checkpoint: &Path, bb: &dyn Backbone) -> Result<(PromptModule, Option<TrainConfig>)> {
    let (module, extra) = PromptModule::load_checkpoint(checkpoint)?;
    let stored = extra.get("backbone_fingerprint").and_then(|v| v.as_str());
    let current = bb.fingerprint();
    if let Some(stored) = stored {
        if stored != current {
            return Err(Error::InvalidConfig(format!(
                "checkpoint was trained on backbone {stored}, but the configured backbone is {current}"
            ))
            .into());
        }
    }
    let train_cfg = extra.get("train").and_then(|v| serde_json::from_value(v.clone()).ok());
    Ok((module, train_cfg))
}

fn write_report(out: &Path, stem: &str, report: &MetricsReport) -> Result<PathBuf> {
    let path = out.join(format!("{stem}.json"));
    write_json(&path, report)?;
    let csv = out.join(format!("{stem}.csv"));
    fs::write(&csv, report.to_csv()).map_err(|e| Error::io(&csv, e))?;
    Ok(path)
}

pub fn evaluate_cmd(
    checkpoint: &Path,
    manifest_path: &Path,
    split: Split,
    out: &Path,
    settings: &Settings,
) -> Result<(PathBuf, MetricsReport)> {
    let manifest = load_manifest(manifest_path)?;
    start(out, settings)?;
    let bb = backbone(settings)?;
    let (module, train_cfg) = load_checked(checkpoint, bb.as_ref())?;
    let train_cfg = train_cfg.unwrap_or_else(|| settings.train.clone());
    let images = prepare_entries(&manifest, &manifest.split(split), settings)?;
    let mut stats = CacheStats::default();
    let samples: Vec<_> = images
        .iter()
        .zip(embed(settings, bb.as_ref(), &images, &mut stats)?)
        .map(|(p, e)| p.eval_sample(e))
        .collect();
    let fp = config_fingerprint(&train_cfg, module.config(), &bb.fingerprint());
    let report = evaluate(bb.as_ref(), &module, &samples, settings.train.threshold, &fp)?;
    Ok((write_report(out, "metrics", &report)?, report))
}

pub fn baseline(
    manifest_path: &Path,
    split: Split,
    out: &Path,
    settings: &Settings,
) -> Result<(PathBuf, MetricsReport)> {
    let manifest = load_manifest(manifest_path)?;
    start(out, settings)?;
    let bb = backbone(settings)?;
    let images = prepare_entries(&manifest, &manifest.split(split), settings)?;
    let mut stats = CacheStats::default();
    let samples: Vec<_> = images
        .iter()
        .zip(embed(settings, bb.as_ref(), &images, &mut stats)?)
        .map(|(p, e)| p.eval_sample(e))
        .collect();
    let fp = format!("box-prompt/{}", bb.fingerprint());
    let report = evaluate_prompted_baseline(bb.as_ref(), &samples, settings.train.threshold, &fp)?;
    Ok((write_report(out, "baseline_metrics", &report)?, report))
}

pub fn predict(checkpoint: &Path, image: &Path, out: &Path, settings: &Settings) -> Result<(PathBuf, PathBuf)> {
    start(out, settings)?;
    let bb = backbone(settings)?;
    let (module, _) = load_checked(checkpoint, bb.as_ref())?;
    let (plane, spacing) = read_plane(image)?;
    let stem = image
        .file_name()
        .map(|n| {
            n.to_string_lossy()
                .trim_end_matches(".gz")
                .trim_end_matches(".nii")
                .trim_end_matches(".png")
                .to_string()
        })
        .unwrap_or_else(|| "image".into());
    let prepared = prepare_image(&stem, &plane, None, None, spacing, &settings.preprocess)?;
    let mut stats = CacheStats::default();
    let emb = embed(settings, bb.as_ref(), std::slice::from_ref(&prepared), &mut stats)?
        .pop()
        .expect("one embedding per image");
    let sample = prepared.eval_sample(emb);
    let pr = module.forward(&sample.embedding)?;
    let prob = predict_original(bb.as_ref(), &sample, &pr)?;
    let prob_path = out.join(format!("{stem}_prob.png"));
    io::write_unit16(&prob_path, &prob.grid)?;
    let mask_path = out.join(format!("{stem}_mask.png"));
    io::write_mask(&mask_path, &binarize(&prob, settings.train.threshold))?;
    Ok((prob_path, mask_path))
}

pub fn experiment(manifest_path: &Path, out: &Path, settings: &Settings) -> Result<PathBuf> {
    let manifest = load_manifest(manifest_path)?;
    let pool_entries = train_pool(&manifest, settings)?;
    few_shot_indices(pool_entries.len(), settings.k, 0)?;
    start(out, settings)?;
    let bb = backbone(settings)?;
    let mut stats = CacheStats::default();
    let pool_imgs = prepare_entries(&manifest, &pool_entries, settings)?;
    let pool = pool_imgs
        .iter()
        .zip(embed(settings, bb.as_ref(), &pool_imgs, &mut stats)?)
        .map(|(p, e)| p.train_sample(e))
        .collect::<boxprompt::Result<Vec<_>>>()?;
    let mut eval_split = |split: Split| -> Result<Vec<_>> {
        let imgs = prepare_entries(&manifest, &manifest.split(split), settings)?;
        Ok(imgs
            .iter()
            .zip(embed(settings, bb.as_ref(), &imgs, &mut stats)?)
            .map(|(p, e)| p.eval_sample(e))
            .collect())
    };
    let val = eval_split(Split::Val)?;
    let test = eval_split(Split::Test)?;
    let (s, i) = (settings.subset_seed, settings.seed);
    let cfg = ExperimentConfig {
        train: settings.train.clone(),
        k: settings.k,
        subset_seeds: [s, s + 1, s + 2],
        init_seeds: [i, i + 1, i + 2],
    };
    let prompt = PromptModuleConfig::for_backbone(bb.shape_spec(), i);
    repeated_experiment(&cfg, &pool, &val, &test, bb.as_ref(), &prompt, Some(out))?;
    Ok(out.join("report.json"))
}
