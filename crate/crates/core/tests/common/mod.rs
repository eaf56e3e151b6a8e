#![allow(dead_code)]

use boxprompt::backbone::{Backbone, ToyBackbone, ToyBackboneConfig};
use boxprompt::data::{generate_synthetic_with, PreprocessConfig, SynthOptions};
use boxprompt::eval::EvalSample;
use boxprompt::geometry::TightBox;
use boxprompt::pipeline::{embed_all, prepare_synthetic, CacheStats, EmbeddingStore, PreparedImage};
use boxprompt::train::TrainSample;
use ndarray::Array2;
use rand::Rng;

pub mod gradcheck;
pub mod oracle;

pub const CANVAS: (usize, usize) = (64, 64);

pub fn toy_preprocess() -> PreprocessConfig {
    PreprocessConfig {
        crop_pad_size: CANVAS,
        model_input: CANVAS,
        ..Default::default()
    }
}

pub fn toy_backbone() -> ToyBackbone {
    ToyBackbone::new(ToyBackboneConfig::default()).unwrap()
}

pub fn prepared(n: usize, seed: u64, prefix: &str) -> Vec<PreparedImage> {
    let opts = SynthOptions {
        id_prefix: prefix.into(),
        ..SynthOptions::new(CANVAS)
    };
    generate_synthetic_with(n, seed, &opts)
        .iter()
        .map(|s| prepare_synthetic(s, &toy_preprocess()).unwrap())
        .collect()
}

pub struct SynthSplits {
    pub pool: Vec<TrainSample>,
    pub val: Vec<EvalSample>,
    pub test: Vec<EvalSample>,
}

/// Train pool, validation and test sets from disjoint generator seeds.
pub fn synth_splits(bb: &dyn Backbone, n_pool: usize, n_val: usize, n_test: usize, seed: u64) -> SynthSplits {
    let store = EmbeddingStore::new(bb, None);
    let mut stats = CacheStats::default();
    let mut embed = |imgs: &[PreparedImage]| embed_all(&store, imgs, &mut stats).unwrap();
    let pool_img = prepared(n_pool, seed, "train");
    let val_img = prepared(n_val, seed + 1000, "val");
    let test_img = prepared(n_test, seed + 2000, "test");
    let pool = pool_img
        .iter()
        .zip(embed(&pool_img))
        .map(|(p, e)| p.train_sample(e).unwrap())
        .collect();
    let val = val_img
        .iter()
        .zip(embed(&val_img))
        .map(|(p, e)| p.eval_sample(e))
        .collect();
    let test = test_img
        .iter()
        .zip(embed(&test_img))
        .map(|(p, e)| p.eval_sample(e))
        .collect();
    SynthSplits { pool, val, test }
}

pub fn rel_close(a: f64, b: f64, rel: f64, abs: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()) + abs
}

pub fn random_map(rng: &mut impl Rng, shape: (usize, usize), lo: f64, hi: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn(shape, || rng.gen_range(lo..hi))
}

/// Box with corners drawn independently along each axis.
pub fn random_box(rng: &mut impl Rng, shape: (usize, usize)) -> TightBox {
    let (r0, r1) = {
        let a = rng.gen_range(0..shape.0);
        let b = rng.gen_range(0..shape.0);
        (a.min(b), a.max(b))
    };
    let (c0, c1) = {
        let a = rng.gen_range(0..shape.1);
        let b = rng.gen_range(0..shape.1);
        (a.min(b), a.max(b))
    };
    TightBox::new(r0, c0, r1, c1)
}
