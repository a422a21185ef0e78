//! Training loop, run log and evaluation.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Graph, ParamStore};
use crate::checkpoint::Checkpoint;
use crate::data::{augment_flip, sample_patch, ImagePair};
use crate::error::{Error, Result};
use crate::losses::{total_loss_grad, LossReport, LossWeights};
use crate::metrics::{psnr, psnr_for_log, ssim};
use crate::model::{freeze_encoder_from, Model, ModelConfig, SPATIAL_MULTIPLE};
use crate::optim::{cosine_lr, Adam, AdamConfig, ADAM_EPS};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_init: f64,
    pub lr_final: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub total_iters: u64,
    pub batch_size: usize,
    /// Side of the square training crops; must be a multiple of 16.
    pub patch_size: usize,
    pub seed: u64,
    /// Random horizontal/vertical flips of each crop.
    pub augment: bool,
    /// Steps between checkpoints written to `out_dir` (0 disables them).
    pub checkpoint_every: u64,
    /// Dataset manifest (JSON lines).
    pub manifest: Option<PathBuf>,
    pub out_dir: PathBuf,
    /// Stage-one checkpoint whose encoder is loaded and frozen when
    /// `model.freeze_encoder` is set.
    pub encoder_checkpoint: Option<PathBuf>,
    /// Worker threads for the per-sample passes of a batch (0 = all cores).
    pub threads: usize,
    pub loss: LossWeights,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_init: 5e-4,
            lr_final: 1e-7,
            beta1: 0.9,
            beta2: 0.999,
            total_iters: 2000,
            batch_size: 4,
            patch_size: 64,
            seed: 0,
            augment: true,
            checkpoint_every: 500,
            manifest: None,
            out_dir: PathBuf::from("runs/default"),
            encoder_checkpoint: None,
            threads: 0,
            loss: LossWeights::default(),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.lr_final && self.lr_final <= self.lr_init && self.lr_init.is_finite()) {
            return Err(Error::config(format!(
                "need 0 < lr_final ≤ lr_init, got {} and {}",
                self.lr_final, self.lr_init
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be positive"));
        }
        if self.patch_size == 0 || self.patch_size % SPATIAL_MULTIPLE != 0 {
            return Err(Error::config(format!(
                "patch size must be a positive multiple of {SPATIAL_MULTIPLE}, got {}",
                self.patch_size
            )));
        }
        if self.model.freeze_encoder && self.encoder_checkpoint.is_none() {
            return Err(Error::config("freeze_encoder requires encoder_checkpoint"));
        }
        self.adam().validate()?;
        self.loss.validate()?;
        self.model.validate()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: ADAM_EPS,
        }
    }

    pub fn lr(&self, step: u64) -> Result<f64> {
        cosine_lr(step, self.total_iters.max(1), self.lr_init, self.lr_final)
    }
}

/// One line of the run log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Step {
        /// 1-based count of completed updates.
        step: u64,
        lr: f64,
        loss: LossReport,
        /// Seconds since the run (or resume) started.
        wall_time: f64,
    },
    Eval {
        step: u64,
        split: String,
        metrics: Metrics,
    },
}

/// Quality of restored images and of the degraded inputs themselves.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub count: usize,
    /// Mean PSNR (dB), each image capped at 100 dB.
    pub psnr: f64,
    pub ssim: f64,
    pub input_psnr: f64,
    pub input_ssim: f64,
}

/// Pads on the bottom and right by edge replication up to the next multiple of `m`.
pub fn pad_to_multiple(img: &Tensor, m: usize) -> Result<Tensor> {
    let (c, h, w) = img.dims3()?;
    let (ph, pw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
    if (ph, pw) == (h, w) {
        return Ok(img.clone());
    }
    Ok(Tensor::from_fn([c, ph, pw], |i| {
        let (ch, y, x) = (i / (ph * pw), (i / pw) % ph, i % pw);
        img.get3(ch, y.min(h - 1), x.min(w - 1))
    }))
}

/// Restores an image of any size with the last sub-decoder's output.
pub fn restore_image(model: &Model, store: &ParamStore, img: &Tensor) -> Result<Tensor> {
    let (_, h, w) = img.dims3()?;
    let padded = pad_to_multiple(img, SPATIAL_MULTIPLE)?;
    let out = model.restore(store, &padded)?;
    let full = out.restored.last().expect("at least one sub-decoder");
    crate::data::crop_rect(full, 0, 0, h, w)
}

/// Mean metrics of the restored images over `pairs`.
pub fn evaluate(model: &Model, store: &ParamStore, pairs: &[ImagePair]) -> Result<Metrics> {
    if pairs.is_empty() {
        return Err(Error::config("cannot evaluate on an empty split"));
    }
    let mut m = Metrics {
        count: pairs.len(),
        psnr: 0.0,
        ssim: 0.0,
        input_psnr: 0.0,
        input_ssim: 0.0,
    };
    for p in pairs {
        let restored = restore_image(model, store, &p.blurred)?;
        m.psnr += psnr_for_log(psnr(&restored, &p.sharp)?);
        m.ssim += ssim(&restored, &p.sharp)?;
        m.input_psnr += psnr_for_log(psnr(&p.blurred, &p.sharp)?);
        m.input_ssim += ssim(&p.blurred, &p.sharp)?;
    }
    let n = pairs.len() as f64;
    m.psnr /= n;
    m.ssim /= n;
    m.input_psnr /= n;
    m.input_ssim /= n;
    Ok(m)
}

/// Loss of one sample (averaged over sub-decoder outputs) and its parameter gradients.
pub fn sample_gradients(
    model: &Model,
    store: &ParamStore,
    weights: &LossWeights,
    pair: &ImagePair,
) -> Result<(LossReport, Gradients)> {
    let mut g = Graph::with_params(store);
    let x = g.constant(pair.blurred.clone());
    let out = model.forward(&mut g, x)?;
    let n = out.restored.len() as f64;
    let mut reports = Vec::with_capacity(out.restored.len());
    let mut terms = Vec::with_capacity(out.restored.len());
    for &r in &out.restored {
        let (rep, grad) = total_loss_grad(g.value(r), &pair.sharp, weights)?;
        if !rep.total.is_finite() {
            return Err(Error::numeric("training loss", format!("loss is {}", rep.total)));
        }
        reports.push(rep);
        terms.push(g.scalar_loss(r, rep.total / n, grad.scale(1.0 / n))?);
    }
    let loss = g.add_all(&terms)?;
    let grads = g.backward(loss)?.into_params();
    Ok((LossReport::mean(&reports), grads))
}

fn worker_count(requested: usize, jobs: usize) -> usize {
    let avail = std::thread::available_parallelism().map_or(1, |n| n.get());
    let n = if requested == 0 { avail } else { requested };
    n.clamp(1, jobs.max(1))
}

/// Runs `sample_gradients` over a batch, spreading samples over threads.
/// Gradients are summed in sample order, so results do not depend on the
/// thread count.
pub fn batch_gradients(
    model: &Model,
    store: &ParamStore,
    weights: &LossWeights,
    batch: &[ImagePair],
    threads: usize,
) -> Result<(LossReport, Gradients)> {
    let workers = worker_count(threads, batch.len());
    let results: Vec<Result<(LossReport, Gradients)>> = if workers == 1 {
        batch.iter().map(|p| sample_gradients(model, store, weights, p)).collect()
    } else {
        let mut slots: Vec<Option<Result<(LossReport, Gradients)>>> = (0..batch.len()).map(|_| None).collect();
        std::thread::scope(|s| {
            for (w, chunk) in slots.chunks_mut(batch.len().div_ceil(workers)).enumerate() {
                let start = w * batch.len().div_ceil(workers);
                s.spawn(move || {
                    for (j, slot) in chunk.iter_mut().enumerate() {
                        *slot = Some(sample_gradients(model, store, weights, &batch[start + j]));
                    }
                });
            }
        });
        slots.into_iter().map(|s| s.expect("every slot filled")).collect()
    };
    let mut total = Gradients::empty(store.len());
    let mut reports = Vec::with_capacity(batch.len());
    for r in results {
        let (rep, g) = r?;
        reports.push(rep);
        total.merge(&g);
    }
    total.scale(1.0 / batch.len() as f64);
    Ok((LossReport::mean(&reports), total))
}

/// Model, parameters and optimizer state of a run in progress.
pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    pub store: ParamStore,
    pub adam: Adam,
    /// Completed updates.
    pub step: u64,
}

impl Trainer {
    /// Fresh parameters from `config.seed`; loads and freezes the encoder
    /// when the configuration asks for it.
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let model = Model::new(config.model.clone(), &mut store, config.seed)?;
        if config.model.freeze_encoder {
            let path = config.encoder_checkpoint.as_deref().expect("validated");
            freeze_encoder_from(&mut store, path)?;
        }
        let adam = Adam::new(&store, config.adam())?;
        Ok(Trainer {
            config,
            model,
            store,
            adam,
            step: 0,
        })
    }

    /// Continues from a checkpoint. The model configuration must match.
    pub fn resume(config: TrainConfig, ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.model != config.model {
            return Err(Error::config("checkpoint model configuration differs from the run configuration"));
        }
        if ckpt.step > config.total_iters {
            return Err(Error::config(format!(
                "checkpoint is at step {} but the run has only {} iterations",
                ckpt.step, config.total_iters
            )));
        }
        let mut t = Trainer::new(config)?;
        ckpt.restore_params(&mut t.store)?;
        if let Some(adam) = &ckpt.optimizer {
            if adam.m.len() != t.store.len() {
                return Err(Error::config("checkpoint optimizer state does not match the model"));
            }
            t.adam = adam.clone();
        }
        t.step = ckpt.step;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.config.model.clone(),
            step: self.step,
            params: self.store.clone(),
            optimizer: Some(self.adam.clone()),
            meta: serde_json::to_value(&self.config).unwrap_or_default(),
        }
    }

    /// Random number stream for a given step; independent of how the run
    /// was split by resumes.
    fn step_rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(self.step + 1);
        rng
    }

    /// Draws the training batch of the current step.
    pub fn sample_batch(&self, pairs: &[ImagePair]) -> Result<Vec<ImagePair>> {
        if pairs.is_empty() {
            return Err(Error::config("no training pairs"));
        }
        let mut rng = self.step_rng();
        (0..self.config.batch_size)
            .map(|_| {
                let pair = &pairs[rng.random_range(0..pairs.len())];
                let p = sample_patch(pair, self.config.patch_size, &mut rng)?;
                Ok(if self.config.augment { augment_flip(p, &mut rng) } else { p })
            })
            .collect()
    }

    /// One optimizer update. Parameters are untouched if it fails.
    pub fn train_step(&mut self, pairs: &[ImagePair]) -> Result<(f64, LossReport)> {
        let lr = self.config.lr(self.step)?;
        let batch = self.sample_batch(pairs)?;
        let (report, grads) = batch_gradients(&self.model, &self.store, &self.config.loss, &batch, self.config.threads)?;
        self.adam.step(&mut self.store, &grads, lr)?;
        self.step += 1;
        Ok((lr, report))
    }

    /// Runs the remaining iterations, appending one record per step to `log`.
    /// Checkpoints go to `out_dir` when given.
    pub fn run(&mut self, pairs: &[ImagePair], out_dir: Option<&Path>, log: &mut dyn Write) -> Result<()> {
        let start = Instant::now();
        let write_log = |log: &mut dyn Write, rec: &LogRecord| -> Result<()> {
            serde_json::to_writer(&mut *log, rec).expect("log records serialize");
            log.write_all(b"\n").map_err(|e| Error::io("run log", e))
        };
        while self.step < self.config.total_iters {
            let (lr, loss) = match self.train_step(pairs) {
                Ok(v) => v,
                Err(e) => {
                    if let (Error::Numeric { .. }, Some(dir)) = (&e, out_dir) {
                        // The failed step left the parameters untouched.
                        self.checkpoint().save(&dir.join(LAST_GOOD_CHECKPOINT))?;
                    }
                    return Err(e);
                }
            };
            write_log(
                log,
                &LogRecord::Step {
                    step: self.step,
                    lr,
                    loss,
                    wall_time: start.elapsed().as_secs_f64(),
                },
            )?;
            let every = self.config.checkpoint_every;
            if let Some(dir) = out_dir {
                if every > 0 && self.step % every == 0 && self.step < self.config.total_iters {
                    self.checkpoint().save(&dir.join(LATEST_CHECKPOINT))?;
                }
            }
        }
        if let Some(dir) = out_dir {
            self.checkpoint().save(&dir.join(FINAL_CHECKPOINT))?;
        }
        log.flush().map_err(|e| Error::io("run log", e))
    }
}

pub const LATEST_CHECKPOINT: &str = "latest.ckpt";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const LAST_GOOD_CHECKPOINT: &str = "last_good.ckpt";
pub const RUN_LOG: &str = "run_log.jsonl";

/// Summary of a finished [`train`] call.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub final_step: u64,
    pub train: Metrics,
    pub val: Option<Metrics>,
}

/// Trains on `train_pairs` (resuming from `out_dir/latest.ckpt` when asked),
/// then evaluates on both splits. Writes the run log, checkpoints and final
/// metrics under `config.out_dir`.
pub fn train(config: &TrainConfig, train_pairs: &[ImagePair], val_pairs: &[ImagePair], resume: bool) -> Result<TrainOutcome> {
    let out = config.out_dir.clone();
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let latest = out.join(LATEST_CHECKPOINT);
    let mut trainer = if resume && latest.exists() {
        Trainer::resume(config.clone(), &Checkpoint::load(&latest)?)?
    } else {
        Trainer::new(config.clone())?
    };
    let log_path = out.join(RUN_LOG);
    if trainer.step > 0 && log_path.exists() {
        // Drop records written after the checkpoint so steps stay increasing.
        let kept: Vec<LogRecord> = read_run_log(&log_path)?
            .into_iter()
            .filter(|r| matches!(r, LogRecord::Step { step, .. } if *step <= trainer.step))
            .collect();
        let mut text = String::new();
        for r in &kept {
            text.push_str(&serde_json::to_string(r).expect("log records serialize"));
            text.push('\n');
        }
        fs::write(&log_path, text).map_err(|e| Error::io(&log_path, e))?;
    }
    let resumed = trainer.step > 0;
    let log_file = fs::OpenOptions::new()
        .create(true)
        .append(resumed)
        .write(true)
        .truncate(!resumed)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let mut log = BufWriter::new(log_file);
    trainer.run(train_pairs, Some(&out), &mut log)?;

    let train_metrics = evaluate(&trainer.model, &trainer.store, train_pairs)?;
    let val_metrics = if val_pairs.is_empty() {
        None
    } else {
        Some(evaluate(&trainer.model, &trainer.store, val_pairs)?)
    };
    let mut finals = vec![("train", train_metrics)];
    finals.extend(val_metrics.map(|m| ("val", m)));
    for (split, metrics) in finals {
        let rec = LogRecord::Eval {
            step: trainer.step,
            split: split.into(),
            metrics,
        };
        serde_json::to_writer(&mut log, &rec).expect("log records serialize");
        log.write_all(b"\n").map_err(|e| Error::io(&log_path, e))?;
    }
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    Ok(TrainOutcome {
        final_step: trainer.step,
        train: train_metrics,
        val: val_metrics,
    })
}

/// Parses a run log.
pub fn read_run_log(path: &Path) -> Result<Vec<LogRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::format(path, format!("line {}: {e}", i + 1))))
        .collect()
}

/// Builds the model stored in a checkpoint.
pub fn load_model(ckpt: &Checkpoint) -> Result<(Model, ParamStore)> {
    let mut store = ParamStore::new();
    let model = Model::new(ckpt.model.clone(), &mut store, 0)?;
    ckpt.restore_params(&mut store)?;
    Ok((model, store))
}
