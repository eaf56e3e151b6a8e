//! Central finite-difference checks shared by the gradient tests and the
//! acceptance run.

use boxprompt::backbone::{decode_mask, decode_mask_backward, Backbone, ToyBackbone, ToyBackboneConfig};
use boxprompt::constraints::*;
use boxprompt::geometry::*;
use boxprompt::promptnet::{PromptEmbedding, PromptModule, PromptModuleConfig};
use boxprompt::train::{sample_loss_grad, TrainConfig, TrainSample};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{random_box, random_map, rel_close};

pub const H: f64 = 1e-4;

/// Central difference of `loss` w.r.t. every pixel of `f`.
fn fd_map(f: &Array2<f64>, loss: impl Fn(&ProbabilityMap) -> f64) -> Array2<f64> {
    Array2::from_shape_fn(f.dim(), |idx| {
        let mut p = f.clone();
        p[idx] += H;
        let mut m = f.clone();
        m[idx] -= H;
        (loss(&ProbabilityMap::new(p).unwrap()) - loss(&ProbabilityMap::new(m).unwrap())) / (2.0 * H)
    })
}

fn compare_maps(an: &Array2<f64>, fd: &Array2<f64>, rel: f64, what: &str) -> Result<(), String> {
    for ((idx, &a), &n) in an.indexed_iter().zip(fd.iter()) {
        if !rel_close(a, n, rel, 1e-8) {
            return Err(format!("{what} at {idx:?}: analytic {a} vs fd {n}"));
        }
    }
    Ok(())
}

/// All three losses on `cases` random grids with `f` in [0.05, 0.95].
pub fn check_loss_grads(cases: usize, seed: u64, rel: f64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for case in 0..cases {
        let shape = (rng.gen_range(2..=16), rng.gen_range(2..=16));
        let bx = random_box(&mut rng, shape);
        let f = random_map(&mut rng, shape, 0.05, 0.95);
        let cfg = PenaltyConfig {
            kind: if case % 2 == 0 {
                PenaltyKind::PseudoLogBarrier
            } else {
                PenaltyKind::ScaledRelu
            },
            t: 5.0,
        };
        let prior = SizePrior::default();
        let part = partition_regions(&bx, shape).unwrap();
        let segs = build_segments(&bx, rng.gen_range(1..=5)).unwrap();
        let pm = ProbabilityMap::new(f.clone()).unwrap();

        let g = emptiness_loss_grad(&pm, &part).unwrap().grad;
        compare_maps(&g, &fd_map(&f, |p| emptiness_loss(p, &part).unwrap()), rel, "emptiness")?;
        let g = tightness_loss_grad(&pm, &segs, &cfg).unwrap().grad;
        compare_maps(
            &g,
            &fd_map(&f, |p| tightness_loss(p, &segs, &cfg).unwrap()),
            rel,
            "tightness",
        )?;
        let g = size_loss_grad(&pm, &part, &prior, &cfg).unwrap().grad;
        compare_maps(
            &g,
            &fd_map(&f, |p| size_loss(p, &part, &prior, &cfg).unwrap()),
            rel,
            "size",
        )?;
    }
    Ok(())
}

pub fn small_toy(seed: u64) -> ToyBackbone {
    ToyBackbone::new(ToyBackboneConfig {
        seed,
        input_size: (16, 16),
        patch: 2,
        embed_channels: 8,
        token_dim: 8,
        ..Default::default()
    })
    .unwrap()
}

pub fn random_image(rng: &mut impl Rng, size: (usize, usize)) -> Array3<f32> {
    let plane = Array2::from_shape_simple_fn(size, || rng.gen_range(0.0f32..1.0));
    Array3::from_shape_fn((3, size.0, size.1), |(_, r, c)| plane[[r, c]])
}

fn shifted(m: &PromptModule, idx: usize, d: f64) -> PromptModule {
    let mut q = m.clone();
    *q.params_mut().values_mut().nth(idx).unwrap() += d;
    q
}

/// Prompt module alone, on a random weighted sum of its outputs.
pub fn check_prompt_module(seed: u64, rel: f64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bb = small_toy(1);
    let spec = bb.shape_spec().clone();
    let emb = bb.encode_image("x", &random_image(&mut rng, (16, 16))).unwrap();
    let m = PromptModule::init(PromptModuleConfig::for_backbone(&spec, 9), &spec).unwrap();
    let probe = m.forward(&emb).unwrap();
    let wd = Array3::from_shape_simple_fn(probe.dense.dim(), || rng.gen_range(-1.0..1.0));
    let ws = Array2::from_shape_simple_fn(probe.sparse.dim(), || rng.gen_range(-1.0..1.0));
    let objective = |m: &PromptModule| {
        let o = m.forward(&emb).unwrap();
        (&o.dense * &wd).sum() + (&o.sparse * &ws).sum()
    };
    let (_, tape) = m.forward_with_tape(&emb).unwrap();
    let grads = m.backward(
        &tape,
        &PromptEmbedding {
            dense: wd.clone(),
            sparse: ws.clone(),
        },
    );
    for (idx, &an) in grads.values().enumerate() {
        let fd = (objective(&shifted(&m, idx, H)) - objective(&shifted(&m, idx, -H))) / (2.0 * H);
        if !rel_close(an, fd, rel, 1e-8) {
            return Err(format!("param {idx}: {an} vs {fd}"));
        }
    }
    Ok(())
}

/// Mean decoder output w.r.t. the prompt embedding entries.
pub fn check_decoder(seed: u64, rel: f64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bb = small_toy(2);
    let spec = bb.shape_spec().clone();
    let emb = bb.encode_image("x", &random_image(&mut rng, (16, 16))).unwrap();
    let pr = PromptEmbedding {
        dense: Array3::from_shape_simple_fn((spec.dense_prompt_channels, 8, 8), || rng.gen_range(-0.5..0.5)),
        sparse: Array2::from_shape_simple_fn((2, spec.token_dim), || rng.gen_range(-0.5..0.5)),
    };
    let out = (20, 20);
    let mean = |pr: &PromptEmbedding| decode_mask(&bb, &emb, pr, out).unwrap().grid.mean().unwrap();
    let f = decode_mask(&bb, &emb, &pr, out).unwrap();
    let g = decode_mask_backward(&bb, &emb, &pr, &f, &Array2::from_elem(out, 1.0 / 400.0)).unwrap();
    let n_dense = pr.dense.len();
    for idx in (0..n_dense).step_by(7).chain(n_dense..n_dense + pr.sparse.len()) {
        let bump = |d: f64| {
            let mut q = pr.clone();
            let slot = if idx < n_dense {
                q.dense.iter_mut().nth(idx)
            } else {
                q.sparse.iter_mut().nth(idx - n_dense)
            };
            *slot.unwrap() += d;
            q
        };
        let fd = (mean(&bump(H)) - mean(&bump(-H))) / (2.0 * H);
        let an = if idx < n_dense {
            *g.dense.iter().nth(idx).unwrap()
        } else {
            *g.sparse.iter().nth(idx - n_dense).unwrap()
        };
        if !rel_close(an, fd, rel, 1e-10) {
            return Err(format!("prompt entry {idx}: {an} vs {fd}"));
        }
    }
    Ok(())
}

#[derive(Debug, Default)]
pub struct EndToEndStats {
    pub checked: usize,
    pub nonzero: usize,
    /// Points where the one-sided differences disagree at every step size.
    pub kinks: usize,
    /// Points that needed the smaller step to get past a nearby kink.
    pub refined: usize,
}

/// Full toy stack: image embedding through prompt module, decoder and total
/// loss, three random parameters per case.
pub fn check_end_to_end(cases: u64, seed: u64, rel: f64) -> Result<EndToEndStats, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stats = EndToEndStats::default();
    for case in 0..cases {
        let bb = small_toy(case % 4);
        let spec = bb.shape_spec().clone();
        let emb = bb.encode_image("x", &random_image(&mut rng, (16, 16))).unwrap();
        let sample = TrainSample {
            id: "x".into(),
            embedding: emb,
            input_box: random_box(&mut rng, (16, 16)),
        };
        let cfg = TrainConfig {
            band_width: rng.gen_range(1..=5),
            penalty: PenaltyConfig {
                kind: if case % 3 == 0 {
                    PenaltyKind::ScaledRelu
                } else {
                    PenaltyKind::PseudoLogBarrier
                },
                t: 5.0,
            },
            ..Default::default()
        };
        let m = PromptModule::init(PromptModuleConfig::for_backbone(&spec, case), &spec).unwrap();
        let (_, grads) = sample_loss_grad(&bb, &m, &sample, &cfg).map_err(|e| e.to_string())?;
        let loss = |m: &PromptModule| sample_loss_grad(&bb, m, &sample, &cfg).unwrap().0.total;
        let l0 = loss(&m);
        for _ in 0..3 {
            let idx = rng.gen_range(0..m.params().count());
            let an = *grads.values().nth(idx).unwrap();
            // zero-initialised biases can sit on a ReLU or max-pool kink; a
            // kink shows up as disagreeing one-sided differences, so retry
            // with a smaller step before giving up on the point
            let fd = [H, 1e-6].into_iter().enumerate().find_map(|(attempt, h)| {
                let (lp, ln) = (loss(&shifted(&m, idx, h)), loss(&shifted(&m, idx, -h)));
                let (fwd, bwd) = ((lp - l0) / h, (l0 - ln) / h);
                rel_close(fwd, bwd, 1e-3, 1e-6).then(|| (attempt, (lp - ln) / (2.0 * h)))
            });
            let Some((attempt, fd)) = fd else {
                stats.kinks += 1;
                continue;
            };
            stats.refined += attempt;
            stats.checked += 1;
            stats.nonzero += usize::from(an != 0.0);
            if !rel_close(an, fd, rel, 1e-8) {
                return Err(format!("case {case} param {idx}: {an} vs {fd}"));
            }
        }
    }
    Ok(stats)
}
