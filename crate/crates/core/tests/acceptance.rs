//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any
//! failure.

mod common;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use boxprompt::backbone::{Backbone, MedSamBackbone};
use boxprompt::constraints::{penalty, penalty_derivative, PenaltyConfig, PenaltyKind};
use boxprompt::eval::evaluate;
use boxprompt::pipeline::{embed_all, CacheStats, EmbeddingStore};
use boxprompt::promptnet::{PromptModule, PromptModuleConfig};
use boxprompt::train::{
    config_fingerprint, lr_at, repeated_experiment, train, ExperimentConfig, TrainConfig, TrainSample,
};
use common::{gradcheck, oracle, prepared, synth_splits, toy_backbone};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn criterion(id: u32, name: &str, budget: Option<Duration>, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let mut o = f();
    let took = start.elapsed();
    if let Some(b) = budget {
        if took > b {
            o.pass = false;
            o.detail.push_str(&format!("; over the {}s budget", b.as_secs()));
        }
    }
    let tag = if o.pass { "PASS" } else { "FAIL" };
    println!("[{tag}] {id}. {name} ({:.2}s): {}", took.as_secs_f64(), o.detail);
    o.pass
}

fn loss_oracle() -> Outcome {
    match oracle::compare_losses(1000, 2024, 1e-6) {
        Ok(()) => outcome(true, "1000 cases within 1e-6 relative"),
        Err(e) => outcome(false, e),
    }
}

fn gradients() -> Outcome {
    if let Err(e) = gradcheck::check_loss_grads(100, 11, 1e-5) {
        return outcome(false, format!("loss gradients: {e}"));
    }
    match gradcheck::check_end_to_end(100, 21, 1e-5) {
        Ok(s) => outcome(
            s.kinks < 15,
            format!(
                "losses on 100 cases; toy stack {} parameter checks within 1e-5 ({} at a nearby kink retried with step 1e-6, {} skipped on a kink)",
                s.checked, s.refined, s.kinks
            ),
        ),
        Err(e) => outcome(false, format!("toy stack: {e}")),
    }
}

fn barrier() -> Outcome {
    let mut worst_value: f64 = 0.0;
    let mut worst_slope: f64 = 0.0;
    for t in [1.0, 5.0, 50.0] {
        let cfg = PenaltyConfig {
            kind: PenaltyKind::PseudoLogBarrier,
            t,
        };
        let z = -1.0 / (t * t);
        // the breakpoint itself takes the log branch; its upper neighbour the linear one
        let above = f64::from_bits(z.to_bits() - 1);
        worst_value = worst_value.max((penalty(z, &cfg) - penalty(above, &cfg)).abs());
        worst_slope = worst_slope.max((penalty_derivative(z, &cfg) - penalty_derivative(above, &cfg)).abs());
    }
    let cfg = PenaltyConfig::default();
    let at_minus_one = penalty(-1.0, &cfg);
    let at_zero = penalty(0.0, &cfg);
    let closed_form = 25f64.ln() / 5.0 + 0.2;
    let pass =
        worst_value <= 1e-9 && worst_slope <= 1e-6 && at_minus_one == 0.0 && (at_zero - closed_form).abs() <= 1e-5;
    outcome(
        pass,
        format!(
            "value gap {worst_value:.1e}, slope gap {worst_slope:.1e}, psi(-1) = {at_minus_one}, psi(0) = {at_zero:.7} \
             vs ln(25)/5 + 1/5 = {closed_form:.7} (the rounded literal 0.84379 is {:.1e} away)",
            (at_zero - 0.84379).abs()
        ),
    )
}

fn desk_scale(bb: &dyn Backbone) -> Outcome {
    let s = synth_splits(bb, 40, 10, 50, 100);
    let cfg = ExperimentConfig::default();
    let prompt = PromptModuleConfig::for_backbone(bb.shape_spec(), 0);
    let rep = match repeated_experiment(&cfg, &s.pool, &s.val, &s.test, bb, &prompt, None) {
        Ok(r) => r,
        Err(e) => return outcome(false, e.to_string()),
    };
    let untrained: Vec<String> = cfg
        .init_seeds
        .iter()
        .map(|&seed| {
            let m = PromptModule::init(PromptModuleConfig::for_backbone(bb.shape_spec(), seed), bb.shape_spec());
            m.and_then(|m| evaluate(bb, &m, &s.test, 0.5, "untrained"))
                .map_or_else(|e| e.to_string(), |r| format!("i{seed}={:.3}", r.mean))
        })
        .collect();
    let runs: Vec<String> = rep
        .runs
        .iter()
        .map(|r| {
            format!(
                "s{}i{}={:.3}@{}/{:.3}",
                r.subset_seed, r.init_seed, r.test.mean, r.record.best_epoch, r.test_last.mean
            )
        })
        .collect();
    let min_of = |f: fn(&boxprompt::train::ExperimentRun) -> f64| rep.runs.iter().map(f).fold(f64::INFINITY, f64::min);
    let (min_best, min_last) = (min_of(|r| r.test.mean), min_of(|r| r.test_last.mean));
    outcome(
        rep.runs.len() == 9 && min_best >= 0.80 && min_last >= 0.80,
        format!(
            "k=10, 50 test samples, 9 runs; selected parameters: min Dice {min_best:.3}, mean {:.3} (std {:.3}); \
             final-epoch parameters: min Dice {min_last:.3}; untrained: {}; \
             per run Dice selected@epoch/final: {}",
            rep.aggregate.mean,
            rep.aggregate.std,
            untrained.join(" "),
            runs.join(" ")
        ),
    )
}

fn frozen_and_cache(bb: &dyn Backbone) -> Outcome {
    let before = bb.weights_checksum();
    let images = prepared(10, 300, "train");
    let dir = match tempfile::tempdir() {
        Ok(d) => d,
        Err(e) => return outcome(false, e.to_string()),
    };
    let run = || -> boxprompt::Result<(bool, usize)> {
        let mut stats = CacheStats::default();
        let direct = embed_all(&EmbeddingStore::new(bb, None), &images, &mut stats)?;
        embed_all(
            &EmbeddingStore::new(bb, Some(dir.path().to_path_buf())),
            &images,
            &mut stats,
        )?;
        let mut read = CacheStats::default();
        let reader = EmbeddingStore::cache_only(bb.fingerprint(), dir.path().to_path_buf());
        let cached = embed_all(&reader, &images, &mut read)?;
        let samples = |embs: Vec<_>| -> boxprompt::Result<Vec<TrainSample>> {
            images.iter().zip(embs).map(|(p, e)| p.train_sample(e)).collect()
        };
        let cfg = TrainConfig {
            epochs: 30,
            ..Default::default()
        };
        let module = || PromptModule::init(PromptModuleConfig::for_backbone(bb.shape_spec(), 0), bb.shape_spec());
        let a = train(&cfg, &samples(direct)?, &[], bb, module()?, None)?;
        let b = train(&cfg, &samples(cached)?, &[], bb, module()?, None)?;
        Ok((
            a.record.loss_trajectory() == b.record.loss_trajectory() && a.record.backbone_checksum == before,
            read.hits,
        ))
    };
    match run() {
        Ok((same, hits)) => {
            let unchanged = bb.weights_checksum() == before;
            outcome(
                same && unchanged && hits == images.len(),
                format!(
                    "checksum unchanged: {unchanged}; 30-epoch trajectories from {hits}/{} cache hits vs recomputed are bit-identical: {same}",
                    images.len()
                ),
            )
        }
        Err(e) => outcome(false, e.to_string()),
    }
}

fn determinism(bb: &dyn Backbone) -> Outcome {
    let s = synth_splits(bb, 10, 5, 20, 400);
    let cfg = TrainConfig {
        epochs: 20,
        ..Default::default()
    };
    let once = || -> boxprompt::Result<String> {
        let pcfg = PromptModuleConfig::for_backbone(bb.shape_spec(), 3);
        let module = PromptModule::init(pcfg.clone(), bb.shape_spec())?;
        let out = train(&cfg, &s.pool, &s.val, bb, module, None)?;
        let fp = config_fingerprint(&cfg, &pcfg, &bb.fingerprint());
        let report = evaluate(bb, &out.best, &s.test, cfg.threshold, &fp)?;
        Ok(serde_json::to_string(&report)?)
    };
    match (once(), once()) {
        (Ok(a), Ok(b)) => outcome(
            a == b,
            format!("two 20-epoch runs, metrics report JSON identical: {}", a == b),
        ),
        (Err(e), _) | (_, Err(e)) => outcome(false, e.to_string()),
    }
}

fn defaults() -> Outcome {
    let c = TrainConfig::default();
    let mut bad = Vec::new();
    let mut check = |name: &str, got: f64, want: f64| {
        if got != want {
            bad.push(format!("{name} = {got}, expected {want}"));
        }
    };
    check("t", c.penalty.t, 5.0);
    check("w", c.band_width as f64, 5.0);
    check("eps_lo", c.prior.eps_lo, 0.5);
    check("eps_hi", c.prior.eps_hi, 0.9);
    check("lambda_tight", c.weights.lambda_tight, 1e-4);
    check("lambda_size", c.weights.lambda_size, 1e-2);
    check("batch_size", c.batch_size as f64, 4.0);
    check("lr", c.lr, 1e-3);
    check("weight_decay", c.weight_decay, 1e-4);
    let hundred = TrainConfig {
        epochs: 100,
        ..c.clone()
    };
    check("lr@49/100", lr_at(49, &hundred).unwrap_or(f64::NAN), 1e-3);
    check("lr@50/100", lr_at(50, &hundred).unwrap_or(f64::NAN), 1e-3 * 0.1);
    if c.penalty.kind != PenaltyKind::PseudoLogBarrier {
        bad.push("penalty is not the log-barrier extension".into());
    }
    if bad.is_empty() {
        outcome(
            true,
            "t=5, w=5, eps=[0.5,0.9], lambda=(1e-4,1e-2), batch 4, lr 1e-3 dropping x0.1 at epoch 50 of 100, weight decay 1e-4",
        )
    } else {
        outcome(false, bad.join("; "))
    }
}

fn main() -> ExitCode {
    let bb = toy_backbone();
    let results = [
        criterion(1, "loss oracle equivalence", Some(Duration::from_secs(30)), loss_oracle),
        criterion(2, "gradient correctness", Some(Duration::from_secs(60)), gradients),
        criterion(3, "barrier regularity", None, barrier),
        criterion(4, "desk-scale learning", Some(Duration::from_secs(600)), || {
            desk_scale(&bb)
        }),
        criterion(5, "frozen backbone and cache", None, || frozen_and_cache(&bb)),
        criterion(6, "determinism", None, || determinism(&bb)),
        criterion(7, "configuration defaults", None, defaults),
    ];
    let gate = std::env::var_os("BOXPROMPT_MEDSAM_WEIGHTS")
        .map(|p| match MedSamBackbone::load(p.as_ref()) {
            Ok(_) => "weights found, but this build has no ViT runtime to run the protocol".to_string(),
            Err(e) => e.to_string(),
        })
        .unwrap_or_else(|| "BOXPROMPT_MEDSAM_WEIGHTS not set".into());
    println!("[SKIP] 8. full-scale MedSAM protocol (documented in README, not run here): {gate}");

    let failed = results.iter().filter(|p| !**p).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
