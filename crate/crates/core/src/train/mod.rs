//! Supervised training and evaluation.

pub mod optim;
pub mod schedule;
pub mod split;
pub mod synth;

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::metrics::{self, LossWeights, Scores, SsimConfig};
use crate::model::{Checkpoint, ModelConfig};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor};

pub use optim::{clip_grad_norm, AdamW, AdamWConfig};
pub use schedule::{lr_at, ScheduleConfig};
pub use split::{make_splits, Fold, SplitMode, SplitPlan};
pub use synth::{synth_dataset, synth_raw, RawSpec};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: ScheduleConfig,
    pub optim: AdamWConfig,
    /// Global gradient-norm bound; 0 disables clipping.
    pub grad_clip: f64,
    pub loss: LossWeights,
    pub ssim: SsimConfig,
    pub seed: u64,
    pub workers: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            epochs: 50,
            batch_size: 16,
            schedule: ScheduleConfig::default(),
            optim: AdamWConfig::default(),
            grad_clip: 0.0,
            loss: LossWeights::default(),
            ssim: SsimConfig::default(),
            seed: 0,
            workers: 1,
        }
    }
}

impl TrainOptions {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        self.loss.validate()?;
        self.ssim.validate()?;
        if self.epochs == 0 || self.batch_size == 0 || self.workers == 0 {
            return Err(Error::Config("epochs, batch size and workers must be positive".into()));
        }
        if self.epochs != self.schedule.total_epochs {
            return Err(Error::Config(format!(
                "schedule covers {} epochs but training runs {}",
                self.schedule.total_epochs, self.epochs
            )));
        }
        Ok(())
    }

    pub fn determinism_note(&self) -> &'static str {
        if self.workers == 1 {
            "single worker: results are bit-reproducible for a fixed seed and config"
        } else {
            "multiple workers: per-sample gradients are reduced in a fixed order, but bit-reproducibility is only guaranteed with one worker"
        }
    }
}

/// One optimizer step as recorded in the run log.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    /// Held-out (SSIM, PSNR), filled on the last step of each epoch.
    pub eval: Option<(f64, f64)>,
}

impl StepRecord {
    pub const HEADER: &'static str = "epoch, step, lr, loss, eval_ssim, eval_psnr";

    pub fn line(&self) -> String {
        let (s, p) = match self.eval {
            Some((s, p)) => (format!("{s:.9}"), format!("{p:.6}")),
            None => ("-".into(), "-".into()),
        };
        format!("{}, {}, {:.9e}, {:.12e}, {s}, {p}", self.epoch, self.step, self.lr, self.loss)
    }
}

/// Holds parameters and optimizer state across epochs.
pub struct Trainer<T: Scalar> {
    pub model: ModelConfig,
    pub params: ParamStore<T>,
    pub opts: TrainOptions,
    optimizer: AdamW,
    shuffle_rng: ChaCha8Rng,
    step: usize,
    pool: Option<rayon::ThreadPool>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: ModelConfig, params: ParamStore<T>, opts: TrainOptions) -> Result<Self> {
        opts.validate()?;
        let optimizer = AdamW::new(opts.optim, params.values());
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(opts.seed);
        shuffle_rng.set_stream(1);
        let pool = if opts.workers > 1 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(opts.workers)
                    .build()
                    .map_err(|e| Error::Config(format!("cannot start {} workers: {e}", opts.workers)))?,
            )
        } else {
            None
        };
        Ok(Trainer { model, params, opts, optimizer, shuffle_rng, step: 0, pool })
    }

    pub fn steps(&self) -> usize {
        self.step
    }

    /// Loss and parameter gradients for one sample.
    fn sample_grad(&self, sample: &Sample<T>, stream: u64) -> Result<(f64, Vec<Tensor<T>>)> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape);
        let x = tape.constant(sample.input.clone());
        let y = tape.constant(sample.target.clone());
        let mut drop_rng = (self.model.arch.attention_dropout > 0.0).then(|| {
            let mut r = ChaCha8Rng::seed_from_u64(self.opts.seed);
            r.set_stream(stream);
            r
        });
        let pred = self.model.forward(&mut tape, &p, x, drop_rng.as_mut())?;
        let loss = metrics::hybrid_loss_var(&mut tape, pred, y, &self.opts.loss, &self.opts.ssim)?;
        let value = tape.value(loss).item().to_real();
        if !value.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss on a sample of subject {}", sample.subject)));
        }
        tape.backward(loss)?;
        Ok((value, self.params.gradients(&tape, &p)))
    }

    /// One optimizer step on `batch`; returns the mean loss.
    pub fn train_step(&mut self, batch: &[&Sample<T>], lr: f64) -> Result<f64> {
        let base = (self.step as u64 + 2) << 20;
        let run = |(j, s): (usize, &&Sample<T>)| self.sample_grad(s, base + j as u64);
        let results: Vec<Result<(f64, Vec<Tensor<T>>)>> = match &self.pool {
            Some(pool) => pool.install(|| batch.par_iter().enumerate().map(run).collect()),
            None => batch.iter().enumerate().map(run).collect(),
        };
        let mut loss = 0.0;
        let mut acc: Option<Vec<Vec<T>>> = None;
        for r in results {
            let (l, grads) = r?;
            loss += l;
            match acc.as_mut() {
                None => acc = Some(grads.iter().map(|g| g.to_vec()).collect()),
                Some(a) => {
                    for (dst, g) in a.iter_mut().zip(&grads) {
                        for (d, v) in dst.iter_mut().zip(g.values().iter()) {
                            *d += *v;
                        }
                    }
                }
            }
        }
        let n = batch.len() as f64;
        let inv = T::from_f64(1.0 / n).unwrap();
        let mut grads: Vec<Tensor<T>> = acc
            .unwrap_or_default()
            .into_iter()
            .zip(self.params.values())
            .map(|(g, p)| Tensor::new(p.shape(), g.into_iter().map(|v| v * inv).collect()))
            .collect::<Result<_>>()?;
        if self.opts.grad_clip > 0.0 {
            clip_grad_norm(&mut grads, self.opts.grad_clip);
        }
        let mut values = self.params.values().to_vec();
        self.optimizer.step(&mut values, &grads, lr)?;
        self.params.set_values(values)?;
        self.step += 1;
        Ok(loss / n)
    }

    /// Shuffles `samples` and runs every batch of one epoch.
    pub fn train_epoch(&mut self, epoch: usize, samples: &[&Sample<T>]) -> Result<Vec<StepRecord>> {
        if samples.is_empty() {
            return Err(Error::Empty("training set is empty".into()));
        }
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut self.shuffle_rng);
        let batches: Vec<Vec<&Sample<T>>> = order
            .chunks(self.opts.batch_size)
            .map(|c| c.iter().map(|&i| samples[i]).collect())
            .collect();
        let nb = batches.len();
        let mut records = Vec::with_capacity(nb);
        for (b, batch) in batches.iter().enumerate() {
            let lr = lr_at(epoch, b as f64 / nb as f64, &self.opts.schedule);
            let loss = self.train_step(batch, lr)?;
            records.push(StepRecord { epoch, step: self.step, lr, loss, eval: None });
        }
        Ok(records)
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint { model: self.model.clone(), params: self.params.clone() }
    }
}

/// SSIM and PSNR of the model's prediction for every sample.
pub fn evaluate<T: Scalar>(
    model: &ModelConfig,
    params: &ParamStore<T>,
    samples: &[&Sample<T>],
    ssim: &SsimConfig,
) -> Result<Scores> {
    if samples.is_empty() {
        return Err(Error::Empty("evaluation set is empty".into()));
    }
    let scored: Vec<Result<(f64, f64)>> = samples
        .par_iter()
        .map(|s| {
            let pred = model.predict(params, &s.input)?;
            Ok((metrics::ssim(&pred, &s.target, ssim)?, metrics::psnr(&pred, &s.target, 1.0)?))
        })
        .collect();
    let mut scores = Scores::default();
    for (s, r) in samples.iter().zip(scored) {
        let (a, b) = r?;
        scores.push(&s.subject, a, b);
    }
    Ok(scores)
}

/// Scores precomputed predictions `(subject, prediction, truth)`.
pub fn score_predictions<T: Scalar>(items: &[(String, Tensor<T>, Tensor<T>)], ssim: &SsimConfig) -> Result<Scores> {
    if items.is_empty() {
        return Err(Error::Empty("no predictions to score".into()));
    }
    let mut scores = Scores::default();
    for (subject, pred, truth) in items {
        scores.push(subject, metrics::ssim(pred, truth, ssim)?, metrics::psnr(pred, truth, 1.0)?);
    }
    Ok(scores)
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub records: Vec<StepRecord>,
    pub best_epoch: usize,
    pub best_ssim: f64,
    pub best_dir: PathBuf,
    pub last_dir: PathBuf,
    pub log_path: PathBuf,
}

pub const BEST_DIR: &str = "best.ckpt";
pub const LAST_DIR: &str = "last.ckpt";
pub const LOG_FILE: &str = "train.log";

/// Full training run writing `best.ckpt`, `last.ckpt` and `train.log` under
/// `out`. Extra `header` lines (such as the resolved configuration) go at the
/// top of the log. Held-out scores come from `test`, or from `train` when
/// no test samples are given.
pub fn train<T: Scalar>(
    model: ModelConfig,
    init: ParamStore<T>,
    opts: TrainOptions,
    train: &[&Sample<T>],
    test: &[&Sample<T>],
    out: &Path,
    header: &str,
) -> Result<TrainSummary> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let log_path = out.join(LOG_FILE);
    let mut log = File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut head = String::new();
    writeln!(head, "# training log").unwrap();
    writeln!(head, "# lambda1 = {}", opts.loss.lambda1).unwrap();
    writeln!(head, "# lambda2 = {}", opts.loss.lambda2).unwrap();
    writeln!(head, "# betas = {}, {}", opts.optim.beta1, opts.optim.beta2).unwrap();
    writeln!(head, "# eps = {:e}", opts.optim.eps).unwrap();
    writeln!(head, "# determinism: {}", opts.determinism_note()).unwrap();
    writeln!(head, "# train samples = {}, eval samples = {}", train.len(), test.len()).unwrap();
    if test.is_empty() {
        writeln!(head, "# no held-out samples: eval columns score the training set").unwrap();
    }
    for line in header.lines() {
        writeln!(head, "# {line}").unwrap();
    }
    writeln!(head, "{}", StepRecord::HEADER).unwrap();
    let write_log = |log: &mut File, text: &str| log.write_all(text.as_bytes()).map_err(|e| Error::io(&log_path, e));
    write_log(&mut log, &head)?;

    let eval_set = if test.is_empty() { train } else { test };
    let best_dir = out.join(BEST_DIR);
    let last_dir = out.join(LAST_DIR);
    let mut trainer = Trainer::new(model, init, opts)?;
    let mut all = Vec::new();
    let (mut best_epoch, mut best_ssim) = (0, f64::NEG_INFINITY);
    for epoch in 0..trainer.opts.epochs {
        let mut records = match trainer.train_epoch(epoch, train) {
            Ok(r) => r,
            Err(e) => {
                warn!("epoch {epoch} aborted: {e}; keeping the last good checkpoint");
                trainer.checkpoint().save(&last_dir)?;
                return Err(e);
            }
        };
        let report = evaluate(&trainer.model, &trainer.params, eval_set, &trainer.opts.ssim)?.report()?;
        let (ssim, psnr) = (report.pooled.ssim_mean, report.pooled.psnr_mean);
        if let Some(r) = records.last_mut() {
            r.eval = Some((ssim, psnr));
        }
        let mut text = String::new();
        for r in &records {
            writeln!(text, "{}", r.line()).unwrap();
        }
        write_log(&mut log, &text)?;
        let ckpt = trainer.checkpoint();
        if ssim > best_ssim {
            best_ssim = ssim;
            best_epoch = epoch;
            ckpt.save(&best_dir)?;
        }
        ckpt.save(&last_dir)?;
        info!(
            "epoch {epoch}: loss {:.5} eval ssim {ssim:.4} psnr {psnr:.2}",
            records.iter().map(|r| r.loss).sum::<f64>() / records.len() as f64
        );
        all.extend(records);
    }
    Ok(TrainSummary { records: all, best_epoch, best_ssim, best_dir, last_dir, log_path })
}
