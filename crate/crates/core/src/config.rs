//! Run configuration: a flat `key = value` schema holding every tunable
//! default, loaded from a file and then patched by `key=value` overrides.

use std::fs;
use std::path::{Path, PathBuf};

use crate::dsp::{PairingMode, PreprocessOptions, StftParams};
use crate::error::{cfg_err, Error, Result};
use crate::model::{Geometry, ModelConfig};
use crate::metrics::{LossWeights, SsimConfig, SsimMode};
use crate::model::Architecture;
use crate::train::{AdamWConfig, ScheduleConfig, SplitMode, TrainOptions};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

/// `(key, default, description)` for every configuration key.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("model.embed", "32", "encoder embedding width N"),
    ("model.heads", "4", "attention heads (must divide N)"),
    ("model.encoder_stages", "2", "encoder local/global/down-sample stages"),
    ("model.attention_dropout", "0", "attention dropout probability in [0, 1)"),
    ("model.state_dim", "8", "selective-scan state size S"),
    ("model.unet_depth", "2", "decoder down/up steps"),
    ("model.blocks_per_stage", "2", "VSS blocks per decoder stage"),
    ("model.scan_chunk", "0", "scan chunk length, 0 for the sequential scan"),
    ("preprocess.frame", "0", "STFT frame in samples, 0 for fs/5 rounded to even"),
    ("preprocess.hop", "0", "STFT hop in samples, 0 for half a frame"),
    ("preprocess.cutoff_hz", "250", "highest retained frequency"),
    ("preprocess.pairing", "tr", "tr (one fs*TR window per volume) or lag (span ending lag before it)"),
    ("preprocess.span_s", "20", "lag-mode window length in seconds"),
    ("preprocess.lag_s", "6", "lag-mode gap before each volume in seconds"),
    ("preprocess.volume_target", "none", "DxHxW DCT down-sampling target, or none"),
    ("loss.lambda1", "0.5", "weight of 1 - SSIM"),
    ("loss.lambda2", "0.5", "weight of MSE"),
    ("ssim.window", "7", "odd SSIM window extent"),
    ("ssim.k1", "0.01", "c1 = (k1 * max_val)^2"),
    ("ssim.k2", "0.03", "c2 = (k2 * max_val)^2"),
    ("ssim.max_val", "1", "dynamic range for SSIM constants"),
    ("ssim.mode", "sliding", "sliding, global or volume"),
    ("optim.lr", "0.001", "base learning rate"),
    ("optim.weight_decay", "0.01", "decoupled weight decay"),
    ("optim.beta1", "0.9", "first-moment decay"),
    ("optim.beta2", "0.999", "second-moment decay"),
    ("optim.eps", "1e-8", "denominator epsilon"),
    ("optim.grad_clip", "0", "global gradient-norm bound, 0 disables"),
    ("schedule.restart_period", "10", "epochs per cosine cycle"),
    ("schedule.min_lr", "0", "learning rate at the end of each cycle"),
    ("train.epochs", "50", "training epochs"),
    ("train.batch_size", "16", "samples per optimizer step"),
    ("split.mode", "loso", "loso or fixed"),
    ("split.fold", "0", "held-out fold index for loso"),
    ("split.train", "16", "training subjects in fixed mode"),
    ("split.test", "4", "test subjects in fixed mode"),
    ("data.manifest", "", "paired dataset manifest"),
    ("seed", "0", "random seed"),
    ("workers", "1", "worker threads (1 for bit-reproducible runs)"),
    ("precision", "f32", "f32 or f64"),
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub arch: Architecture,
    pub frame: usize,
    pub hop: usize,
    pub cutoff_hz: f64,
    pub pairing: PairingMode,
    pub span_s: f64,
    pub lag_s: f64,
    pub volume_target: Option<[usize; 3]>,
    pub loss: LossWeights,
    pub ssim_window: usize,
    pub ssim_k1: f64,
    pub ssim_k2: f64,
    pub ssim_max: f64,
    pub ssim_mode: SsimMode,
    pub lr: f64,
    pub optim: AdamWConfig,
    pub grad_clip: f64,
    pub restart_period: usize,
    pub min_lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub split_mode: SplitMode,
    pub fold: usize,
    pub split_train: usize,
    pub split_test: usize,
    pub manifest: Option<PathBuf>,
    pub seed: u64,
    pub workers: usize,
    pub precision: Precision,
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| cfg_err!("`{key}`: cannot parse `{v}`"))
}

fn parse_target(key: &str, v: &str) -> Result<Option<[usize; 3]>> {
    if v == "none" || v.is_empty() {
        return Ok(None);
    }
    let parts: Vec<usize> = v.split('x').map(|p| parse(key, p.trim())).collect::<Result<_>>()?;
    match parts[..] {
        [d, h, w] if d > 0 && h > 0 && w > 0 => Ok(Some([d, h, w])),
        _ => Err(cfg_err!("`{key}`: expected DxHxW, got `{v}`")),
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut cfg = RunConfig {
            arch: Architecture::default(),
            frame: 0,
            hop: 0,
            cutoff_hz: 0.0,
            pairing: PairingMode::TrWindows,
            span_s: 0.0,
            lag_s: 0.0,
            volume_target: None,
            loss: LossWeights::default(),
            ssim_window: 0,
            ssim_k1: 0.0,
            ssim_k2: 0.0,
            ssim_max: 0.0,
            ssim_mode: SsimMode::Sliding,
            lr: 0.0,
            optim: AdamWConfig::default(),
            grad_clip: 0.0,
            restart_period: 0,
            min_lr: 0.0,
            epochs: 0,
            batch_size: 0,
            split_mode: SplitMode::Loso,
            fold: 0,
            split_train: 0,
            split_test: 0,
            manifest: None,
            seed: 0,
            workers: 0,
            precision: Precision::F32,
        };
        for (k, v, _) in KEYS {
            cfg.set(k, v).expect("defaults parse");
        }
        cfg
    }
}

impl RunConfig {
    fn sync_split(&mut self) {
        if let SplitMode::Fixed { .. } = self.split_mode {
            self.split_mode = SplitMode::Fixed {
                train: self.split_train,
                test: self.split_test,
            };
        }
    }

    /// Parses `key = value` lines; `#` starts a comment.
    pub fn parse_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| cfg_err!("line {}: expected `key = value`, got `{line}`", n + 1))?;
            self.set(k.trim(), v).map_err(|e| e.context(format!("line {}", n + 1)))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_text(&text).map_err(|e| e.context(path.display().to_string()))
    }

    /// Applies one `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| cfg_err!("override `{kv}` is not of the form key=value"))?;
        self.set(k.trim(), v)
    }

    pub fn get(&self, key: &str) -> Result<String> {
        let a = &self.arch;
        let target = |t: Option<[usize; 3]>| match t {
            Some([d, h, w]) => format!("{d}x{h}x{w}"),
            None => "none".into(),
        };
        Ok(match key {
            "model.embed" => a.embed.to_string(),
            "model.heads" => a.heads.to_string(),
            "model.encoder_stages" => a.encoder_stages.to_string(),
            "model.attention_dropout" => a.attention_dropout.to_string(),
            "model.state_dim" => a.state_dim.to_string(),
            "model.unet_depth" => a.unet_depth.to_string(),
            "model.blocks_per_stage" => a.blocks_per_stage.to_string(),
            "model.scan_chunk" => a.scan_chunk.to_string(),
            "preprocess.frame" => self.frame.to_string(),
            "preprocess.hop" => self.hop.to_string(),
            "preprocess.cutoff_hz" => self.cutoff_hz.to_string(),
            "preprocess.pairing" => self.pairing.to_string(),
            "preprocess.span_s" => self.span_s.to_string(),
            "preprocess.lag_s" => self.lag_s.to_string(),
            "preprocess.volume_target" => target(self.volume_target),
            "loss.lambda1" => self.loss.lambda1.to_string(),
            "loss.lambda2" => self.loss.lambda2.to_string(),
            "ssim.window" => self.ssim_window.to_string(),
            "ssim.k1" => self.ssim_k1.to_string(),
            "ssim.k2" => self.ssim_k2.to_string(),
            "ssim.max_val" => self.ssim_max.to_string(),
            "ssim.mode" => self.ssim_mode.to_string(),
            "optim.lr" => self.lr.to_string(),
            "optim.weight_decay" => self.optim.weight_decay.to_string(),
            "optim.beta1" => self.optim.beta1.to_string(),
            "optim.beta2" => self.optim.beta2.to_string(),
            "optim.eps" => self.optim.eps.to_string(),
            "optim.grad_clip" => self.grad_clip.to_string(),
            "schedule.restart_period" => self.restart_period.to_string(),
            "schedule.min_lr" => self.min_lr.to_string(),
            "train.epochs" => self.epochs.to_string(),
            "train.batch_size" => self.batch_size.to_string(),
            "split.mode" => match self.split_mode {
                SplitMode::Loso => "loso".into(),
                SplitMode::Fixed { .. } => "fixed".into(),
            },
            "split.fold" => self.fold.to_string(),
            "split.train" => self.split_train.to_string(),
            "split.test" => self.split_test.to_string(),
            "data.manifest" => self.manifest.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            "seed" => self.seed.to_string(),
            "workers" => self.workers.to_string(),
            "precision" => match self.precision {
                Precision::F32 => "f32".into(),
                Precision::F64 => "f64".into(),
            },
            _ => return Err(cfg_err!("unknown configuration key `{key}`; valid keys: {}", Self::valid_keys())),
        })
    }

    /// Every key with its current value, loadable by [`RunConfig::parse_text`].
    pub fn to_text(&self) -> String {
        KEYS.iter()
            .map(|(k, _, _)| format!("{k} = {}\n", self.get(k).expect("known key")))
            .collect()
    }

    /// One line per key: name, default and meaning.
    pub fn help_text() -> String {
        let width = KEYS.iter().map(|k| k.0.len()).max().unwrap_or(0);
        KEYS.iter()
            .map(|(k, d, h)| {
                let d = if d.is_empty() { "\"\"" } else { d };
                format!("  {k:width$}  [default {d}]  {h}\n")
            })
            .collect()
    }

    pub fn ssim(&self) -> SsimConfig {
        SsimConfig {
            window: self.ssim_window,
            c1: (self.ssim_k1 * self.ssim_max).powi(2),
            c2: (self.ssim_k2 * self.ssim_max).powi(2),
            mode: self.ssim_mode,
        }
    }

    pub fn preprocess(&self, fs: f64, tr_s: f64) -> PreprocessOptions {
        PreprocessOptions {
            tr_s,
            stft: StftParams::resolve(self.frame, self.hop, fs),
            cutoff_hz: self.cutoff_hz,
            pairing: self.pairing,
            span_s: self.span_s,
            lag_s: self.lag_s,
            volume_target: self.volume_target,
        }
    }

    pub fn model(&self, geometry: Geometry) -> Result<ModelConfig> {
        ModelConfig::new(geometry, self.arch.clone())
    }

    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            epochs: self.epochs,
            batch_size: self.batch_size,
            schedule: ScheduleConfig {
                base_lr: self.lr,
                restart_period: self.restart_period,
                min_lr: self.min_lr,
                total_epochs: self.epochs,
            },
            optim: self.optim,
            grad_clip: self.grad_clip,
            loss: self.loss,
            ssim: self.ssim(),
            seed: self.seed,
            workers: self.workers,
        }
    }

    pub fn valid_keys() -> String {
        KEYS.iter().map(|k| k.0).collect::<Vec<_>>().join(", ")
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let a = &mut self.arch;
        match key {
            "model.embed" => a.embed = parse(key, v)?,
            "model.heads" => a.heads = parse(key, v)?,
            "model.encoder_stages" => a.encoder_stages = parse(key, v)?,
            "model.attention_dropout" => a.attention_dropout = parse(key, v)?,
            "model.state_dim" => a.state_dim = parse(key, v)?,
            "model.unet_depth" => a.unet_depth = parse(key, v)?,
            "model.blocks_per_stage" => a.blocks_per_stage = parse(key, v)?,
            "model.scan_chunk" => a.scan_chunk = parse(key, v)?,
            "preprocess.frame" => self.frame = parse(key, v)?,
            "preprocess.hop" => self.hop = parse(key, v)?,
            "preprocess.cutoff_hz" => self.cutoff_hz = parse(key, v)?,
            "preprocess.pairing" => self.pairing = v.parse()?,
            "preprocess.span_s" => self.span_s = parse(key, v)?,
            "preprocess.lag_s" => self.lag_s = parse(key, v)?,
            "preprocess.volume_target" => self.volume_target = parse_target(key, v)?,
            "loss.lambda1" => self.loss.lambda1 = parse(key, v)?,
            "loss.lambda2" => self.loss.lambda2 = parse(key, v)?,
            "ssim.window" => self.ssim_window = parse(key, v)?,
            "ssim.k1" => self.ssim_k1 = parse(key, v)?,
            "ssim.k2" => self.ssim_k2 = parse(key, v)?,
            "ssim.max_val" => self.ssim_max = parse(key, v)?,
            "ssim.mode" => self.ssim_mode = v.parse()?,
            "optim.lr" => self.lr = parse(key, v)?,
            "optim.weight_decay" => self.optim.weight_decay = parse(key, v)?,
            "optim.beta1" => self.optim.beta1 = parse(key, v)?,
            "optim.beta2" => self.optim.beta2 = parse(key, v)?,
            "optim.eps" => self.optim.eps = parse(key, v)?,
            "optim.grad_clip" => self.grad_clip = parse(key, v)?,
            "schedule.restart_period" => self.restart_period = parse(key, v)?,
            "schedule.min_lr" => self.min_lr = parse(key, v)?,
            "train.epochs" => self.epochs = parse(key, v)?,
            "train.batch_size" => self.batch_size = parse(key, v)?,
            "split.mode" => {
                self.split_mode = v.parse()?;
                self.sync_split();
            }
            "split.fold" => self.fold = parse(key, v)?,
            "split.train" => {
                self.split_train = parse(key, v)?;
                self.sync_split();
            }
            "split.test" => {
                self.split_test = parse(key, v)?;
                self.sync_split();
            }
            "data.manifest" => self.manifest = (!v.is_empty()).then(|| PathBuf::from(v)),
            "seed" => self.seed = parse(key, v)?,
            "workers" => self.workers = parse(key, v)?,
            "precision" => {
                self.precision = match v {
                    "f32" => Precision::F32,
                    "f64" => Precision::F64,
                    _ => return Err(cfg_err!("`precision` must be f32 or f64, got `{v}`")),
                }
            }
            _ => {
                return Err(cfg_err!(
                    "unknown configuration key `{key}`; valid keys: {}",
                    Self::valid_keys()
                ))
            }
        }
        Ok(())
    }
}
