//! Acceptance suite: one pass/fail line per criterion, exit status 1 if any fails.
//!
//! Runs as a plain binary so that the report is printed in full under
//! `cargo test`.

use std::process::ExitCode;
use std::time::Instant;

use mbmamba::autodiff::ParamStore;
use mbmamba::data::{generate_pairs, GenConfig, ImagePair, Split};
use mbmamba::diagnostics::{
    channel_activation_report, channel_activations, gradcheck, Component, DEAD_CHANNEL_THRESHOLD,
};
use mbmamba::losses::{ising_loss, ising_loss_oracle, total_loss, LossWeights, Neighborhood};
use mbmamba::memvssm::{
    chunk_split, concat_chunks, decoder_block, fcam_fuse, memvssm_forward, DecoderBlock, DecoderBlockConfig, Fcam,
    MemVssm, MemoryBank,
};
use mbmamba::model::{Model, ModelConfig, ENCODER_PREFIXES};
use mbmamba::nn::Init;
use mbmamba::optim::cosine_lr;
use mbmamba::train::{evaluate, TrainConfig, Trainer};
use mbmamba::Tensor;
use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestRng, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Outcome of one criterion: whether it holds and what was measured.
struct Verdict {
    passed: bool,
    detail: String,
}

impl Verdict {
    fn new(passed: bool, detail: impl Into<String>) -> Self {
        Verdict {
            passed,
            detail: detail.into(),
        }
    }
}

type Criterion = (&'static str, fn() -> Verdict);

const CRITERIA: [Criterion; 10] = [
    ("ising oracle equivalence", ising_oracle),
    ("ising analytic cases", ising_analytic),
    ("loss constants", loss_constants),
    ("gradient checks", gradient_checks),
    ("structural invariants", structural_invariants),
    ("degenerate-weight identities", degenerate_identities),
    ("scheduler endpoints", scheduler_endpoints),
    ("overfit smoke test", overfit_smoke),
    ("two-regime protocol", two_regime),
    ("channel report contract", channel_report),
];

fn main() -> ExitCode {
    // Numeric arguments select criteria; other libtest flags are ignored.
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let selected: Vec<usize> = args.iter().filter_map(|a| a.parse().ok()).collect();
    let mut failures = 0;
    let mut run = 0;
    for (i, (name, check)) in CRITERIA.iter().enumerate() {
        if !selected.is_empty() && !selected.contains(&(i + 1)) {
            continue;
        }
        run += 1;
        let start = Instant::now();
        let v = check();
        failures += usize::from(!v.passed);
        println!(
            "criterion {:>2} {}: {} ({}; {:.1}s)",
            i + 1,
            if v.passed { "PASS" } else { "FAIL" },
            name,
            v.detail,
            start.elapsed().as_secs_f64()
        );
    }
    println!("acceptance: {} of {run} criteria passed", run - failures);
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}

fn ising_oracle() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for i in 0..20 {
        // The first input is the largest allowed; the rest are random shapes.
        let (c, h, w) = if i == 0 {
            (3, 32, 32)
        } else {
            (rng.random_range(1..=3), rng.random_range(1..=32), rng.random_range(1..=32))
        };
        let img = Tensor::uniform([c, h, w], -1.0, 1.0, &mut rng);
        for nb in [Neighborhood::FourConnected, Neighborhood::EightConnected] {
            let fast = ising_loss(&img, nb).unwrap();
            let slow = ising_loss_oracle(&img, nb).unwrap();
            if fast != slow {
                worst = worst.max(rel(fast, slow));
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Verdict::new(
        worst <= 1e-6 && secs < 10.0,
        format!("max relative difference {worst:.2e} over 20 inputs x 2 neighborhoods"),
    )
}

fn ising_analytic() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let constant = Tensor::full([3, 7, 5], rng.random_range(-2.0..2.0));
    let zero4 = ising_loss(&constant, Neighborhood::FourConnected).unwrap();
    let zero8 = ising_loss(&constant, Neighborhood::EightConnected).unwrap();
    let board = Tensor::new([1, 2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
    let cb = ising_loss(&board, Neighborhood::FourConnected).unwrap();
    Verdict::new(
        zero4 == 0.0 && zero8 == 0.0 && (cb - 2.0).abs() <= 1e-9,
        format!("constant image {zero4} / {zero8}, 1x2x2 checkerboard {cb}"),
    )
}

fn loss_constants() -> Verdict {
    let w = LossWeights::default();
    let defaults = (w.lambda_freq, w.delta_edge, w.epsilon) == (0.1, 0.05, 0.001);
    let img = Tensor::full([3, 16, 16], 0.37);
    let r = total_loss(&img, &img, &w).unwrap();
    let err = (r.total - 0.00105).abs();
    Verdict::new(
        defaults && err <= 1e-9,
        format!("lambda {} delta {} epsilon {}, identical images total {:.12}", w.lambda_freq, w.delta_edge, w.epsilon, r.total),
    )
}

fn gradient_checks() -> Verdict {
    let start = Instant::now();
    let mut ok = true;
    let mut parts = Vec::new();
    for c in Component::ALL {
        match gradcheck(c, 0) {
            Ok(r) => {
                ok &= r.passed();
                let skipped = r.entries.iter().filter(|e| e.skipped.is_some()).count();
                let note = if skipped > 0 { format!(", {skipped} skipped") } else { String::new() };
                parts.push(format!("{c} {:.1e} < {:.0e}{note}", r.worst(), r.tolerance));
            }
            Err(e) => {
                ok = false;
                parts.push(format!("{c} error: {e}"));
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Verdict::new(ok && secs < 300.0, parts.join(", "))
}

fn block_config(chunks: usize, bank_depth: usize) -> DecoderBlockConfig {
    DecoderBlockConfig {
        channels: 8,
        chunks,
        bank_depth,
        state_dim: 4,
        ffn_expansion: 2.0,
    }
}

fn structural_invariants() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut pairs = 0;
    let mut round_trip = true;
    for c in 1..=64 {
        let f = Tensor::uniform([c, 3, 2], -1.0, 1.0, &mut rng);
        for n in (1..=c).filter(|n| c % n == 0) {
            round_trip &= concat_chunks(&chunk_split(&f, n).unwrap()).unwrap() == f;
            pairs += 1;
        }
    }

    let config = Config {
        cases: 1000,
        failure_persistence: None,
        ..Config::default()
    };
    let mut runner = TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha));
    let strategy = (1usize..6, prop::collection::vec(any::<u32>(), 0..40));
    let fifo = runner
        .run(&strategy, |(k, items)| {
            let mut bank = MemoryBank::new(k).unwrap();
            for (i, &v) in items.iter().enumerate() {
                let evicted = bank.push(v, &[1]).unwrap();
                prop_assert_eq!(evicted, i.checked_sub(k).map(|j| items[j]));
                let expected = &items[(i + 1).saturating_sub(k)..=i];
                prop_assert_eq!(bank.entries().copied().collect::<Vec<_>>(), expected.to_vec());
            }
            Ok(())
        })
        .is_ok();

    let mut shapes = true;
    for n in [1, 2, 4] {
        for k in [1, 2] {
            let cfg = block_config(n, k);
            let mut store = ParamStore::new();
            let mut init_rng = ChaCha8Rng::seed_from_u64(6);
            let mut init = Init::new(&mut store, &mut init_rng);
            let m = MemVssm::new(&mut init.scope("m"), &cfg).unwrap();
            let b = DecoderBlock::new(&mut init.scope("b"), &cfg).unwrap();
            let x = Tensor::uniform([8, 4, 4], -1.0, 1.0, &mut rng);
            shapes &= memvssm_forward(&x, &m, &store).unwrap().shape() == x.shape();
            shapes &= decoder_block(&x, &b, &store).unwrap().shape() == x.shape();
        }
    }
    Verdict::new(
        round_trip && fifo && shapes,
        format!(
            "round trip on {pairs} (C, N) pairs: {round_trip}, FIFO property over 1000 cases: {fifo}, shapes for N in {{1,2,4}} x K in {{1,2}}: {shapes}"
        ),
    )
}

fn degenerate_identities() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut store = ParamStore::new();
    let fcam = Fcam::new(&mut Init::new(&mut store, &mut rng), 4).unwrap();
    let f = Tensor::uniform([4, 3, 3], -1.0, 1.0, &mut rng);
    let hist: Vec<Tensor> = (0..2).map(|_| Tensor::uniform([4, 3, 3], -1.0, 1.0, &mut rng)).collect();
    let empty = fcam_fuse(&f, &[], &fcam, &store).unwrap() == f;
    for id in fcam.projection_params() {
        store.get_mut(id).data_mut().fill(0.0);
    }
    let expected = hist.iter().fold(f.clone(), |acc, e| acc.add(e).unwrap());
    let zero_err = fcam_fuse(&f, &hist, &fcam, &store).unwrap().max_abs_diff(&expected);

    let mut heads = true;
    for n in [1, 2, 4] {
        let cfg = ModelConfig {
            base_width: 4,
            n_subdecoders: n,
            chunks: 2,
            encoder_blocks_per_scale: 1,
            decoder_blocks_per_stage: 1,
            ..ModelConfig::default()
        };
        let mut store = ParamStore::new();
        let model = Model::new(cfg, &mut store, n as u64).unwrap();
        for id in model.head_params() {
            store.get_mut(id).data_mut().fill(0.0);
        }
        let img = Tensor::uniform([3, 16, 16], 0.0, 1.0, &mut rng);
        let out = model.restore(&store, &img).unwrap();
        heads &= out.restored.len() == n && out.restored.iter().all(|r| *r == img);
    }
    Verdict::new(
        empty && zero_err <= 1e-12 && heads,
        format!("empty history identity: {empty}, zero projections residual error {zero_err:.1e}, zero heads give the input for n in {{1,2,4}}: {heads}"),
    )
}

fn scheduler_endpoints() -> Verdict {
    let cfg = TrainConfig::default();
    let first = cosine_lr(0, cfg.total_iters, cfg.lr_init, cfg.lr_final).unwrap();
    let last = cosine_lr(cfg.total_iters, cfg.total_iters, cfg.lr_init, cfg.lr_final).unwrap();
    Verdict::new(
        first == 5e-4 && last == 1e-7,
        format!("lr(0) = {first:e}, lr(T) = {last:e}"),
    )
}

/// C=16, N=4, K=1, state_dim=8, n=1, one block per encoder scale and decoder stage.
fn toy_model() -> ModelConfig {
    ModelConfig {
        base_width: 16,
        n_subdecoders: 1,
        chunks: 4,
        bank_depth: 1,
        state_dim: 8,
        encoder_blocks_per_scale: 1,
        decoder_blocks_per_stage: 1,
        ..ModelConfig::default()
    }
}

fn synthetic_pairs(train: usize, val: usize, seed: u64) -> (Vec<ImagePair>, Vec<ImagePair>) {
    let cfg = GenConfig {
        train,
        val,
        seed,
        ..GenConfig::default()
    };
    let (mut t, mut v) = (Vec::new(), Vec::new());
    for (split, _, pair) in generate_pairs(&cfg).unwrap() {
        match split {
            Split::Train => t.push(pair),
            Split::Val => v.push(pair),
        }
    }
    (t, v)
}

/// Final training-set metrics after a full desk-scale run on `pairs`.
fn overfit_run(pairs: &[ImagePair], ising_weight: f64) -> mbmamba::train::Metrics {
    let mut cfg = TrainConfig {
        augment: false,
        model: toy_model(),
        ..TrainConfig::default()
    };
    cfg.loss.ising_weight = ising_weight;
    let mut t = Trainer::new(cfg).unwrap();
    t.run(pairs, None, &mut std::io::sink()).unwrap();
    evaluate(&t.model, &t.store, pairs).unwrap()
}

fn overfit_smoke() -> Verdict {
    let start = Instant::now();
    let (pairs, _) = synthetic_pairs(8, 0, 1);
    let with = overfit_run(&pairs, 1.0);
    let without = overfit_run(&pairs, 0.0);
    let secs = start.elapsed().as_secs_f64();
    let gain = with.psnr - with.input_psnr;
    let cost = without.psnr - with.psnr;
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    // The 15 minute budget is stated for a multi-core desktop; the batch is
    // spread over cores, so it is only asserted where at least four exist.
    let timed = cores < 4 || secs < 900.0;
    let timing = if cores < 4 {
        format!("{secs:.0}s for both runs on {cores} core(s), time bound not asserted below 4 cores")
    } else {
        format!("{secs:.0}s for both runs on {cores} cores")
    };
    Verdict::new(
        gain >= 3.0 && cost <= 0.5 && timed,
        format!(
            "input {:.2} dB, restored {:.2} dB with Ising (+{gain:.2} dB), {:.2} dB without (Ising cost {cost:.2} dB); {timing}",
            with.input_psnr, with.psnr, without.psnr
        ),
    )
}

fn two_regime() -> Verdict {
    let (train_pairs, val_pairs) = synthetic_pairs(8, 4, 3);
    let stage1_cfg = TrainConfig {
        total_iters: 100,
        patch_size: 32,
        model: toy_model(),
        ..TrainConfig::default()
    };
    let mut stage1 = Trainer::new(stage1_cfg).unwrap();
    stage1.run(&train_pairs, None, &mut std::io::sink()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let ckpt_path = dir.path().join("stage1.ckpt");
    stage1.checkpoint().save(&ckpt_path).unwrap();

    let mut cfg = TrainConfig {
        total_iters: 200,
        patch_size: 32,
        seed: 1,
        encoder_checkpoint: Some(ckpt_path),
        model: toy_model(),
        ..TrainConfig::default()
    };
    cfg.model.freeze_encoder = true;
    let mut stage2 = Trainer::new(cfg).unwrap();
    let encoder_ids: Vec<_> = stage2
        .store
        .ids()
        .filter(|&id| ENCODER_PREFIXES.iter().any(|p| stage2.store.name(id).starts_with(p)))
        .collect();
    let reference: Vec<Tensor> = encoder_ids
        .iter()
        .map(|&id| stage1.store.get(stage1.store.id(stage2.store.name(id)).unwrap()).clone())
        .collect();
    let initial = evaluate(&stage2.model, &stage2.store, &val_pairs).unwrap();
    let mut identical = true;
    while stage2.step < stage2.config.total_iters {
        stage2.train_step(&train_pairs).unwrap();
        identical &= encoder_ids
            .iter()
            .zip(&reference)
            .all(|(&id, r)| stage2.store.get(id) == r);
    }
    let fin = evaluate(&stage2.model, &stage2.store, &val_pairs).unwrap();
    Verdict::new(
        identical && fin.psnr > initial.psnr,
        format!(
            "{} encoder tensors bit-identical over {} steps: {identical}, validation PSNR {:.3} -> {:.3} dB",
            encoder_ids.len(),
            stage2.step,
            initial.psnr,
            fin.psnr
        ),
    )
}

fn channel_report() -> Verdict {
    let negative = channel_activations(&[Tensor::full([6, 4, 4], -0.5), Tensor::full([6, 4, 4], -3.0)]).unwrap();
    let zeros = negative.len() == 6 && negative.iter().all(|&a| a == 0.0);
    let c = 0.75;
    let constant = channel_activations(&[Tensor::full([6, 4, 4], c)]).unwrap();
    let pooled = constant.iter().all(|&a| (a - c).abs() <= 1e-15);

    let mut store = ParamStore::new();
    let model = Model::new(toy_model(), &mut store, 11).unwrap();
    let (probes, _) = synthetic_pairs(8, 0, 4);
    let probes: Vec<Tensor> = probes.into_iter().map(|p| p.blurred).collect();
    let block = model.num_decoder_blocks() - 1;
    let report = channel_activation_report(&model, &store, block, &probes, DEAD_CHANNEL_THRESHOLD).unwrap();
    let width = model.decoder_block_width(block).unwrap();
    let rows = report.to_csv().lines().count() - 1;
    let counted = report.activations.iter().filter(|&&a| a < DEAD_CHANNEL_THRESHOLD).count();
    Verdict::new(
        zeros && pooled && rows == width && report.dead_channels == counted,
        format!(
            "all-negative probe gives zeros: {zeros}, constant {c} pools to {c}: {pooled}, {} on 8 probes: {rows} CSV rows for {width} channels, {} dead",
            report.block_name, report.dead_channels
        ),
    )
}
