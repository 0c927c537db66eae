use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use log::info;

use eegfmri::bench;
use eegfmri::config::{Precision, RunConfig};
use eegfmri::dataset::{self, Dataset, Manifest, ManifestKind, Preset};
use eegfmri::io;
use eegfmri::model::{Checkpoint, Geometry, ModelConfig};
use eegfmri::train::{self, make_splits, synth_dataset, synth_raw, RawSpec, SplitMode, BEST_DIR, LAST_DIR};
use eegfmri::{Error, Result, Scalar, Tensor};

#[derive(Parser)]
#[command(name = "eegfmri", version, about = "Synthesize fMRI volumes from EEG spectrograms")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// `key = value` configuration file.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override one configuration key; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file or directory.
    #[arg(long, global = true, value_name = "PATH")]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    workers: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SynthKind {
    Paired,
    Raw,
}

#[derive(Subcommand)]
enum Command {
    /// Turn raw EEG sessions and volume series into spectrogram/volume pairs.
    Preprocess {
        /// Raw manifest.
        #[arg(long)]
        manifest: PathBuf,
        /// Take the volume down-sampling target from a dataset preset.
        #[arg(long)]
        preset: Option<String>,
    },
    /// Write a synthetic dataset with a planted EEG-to-volume dependency.
    SynthData {
        #[arg(long, value_enum, default_value = "paired")]
        kind: SynthKind,
        /// noddi, oddball or cn-epfl; sets geometry, channels, fs and TR.
        #[arg(long)]
        preset: Option<String>,
        /// C,T,F,D,H,W for paired data.
        #[arg(long)]
        geometry: Option<Geometry>,
        #[arg(long, default_value_t = 2)]
        subjects: usize,
        /// Pairs per subject (paired data).
        #[arg(long, default_value_t = 8)]
        pairs: usize,
        /// Volumes per session (raw data).
        #[arg(long, default_value_t = 8)]
        volumes: usize,
    },
    /// Train on one split of a paired dataset.
    Train {
        /// Paired manifest; overrides `data.manifest`.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Score a checkpoint, or precomputed predictions, against ground truth.
    Eval {
        #[arg(long, conflicts_with = "predictions")]
        checkpoint: Option<PathBuf>,
        /// Manifest whose entries list `prediction truth` pairs.
        #[arg(long)]
        predictions: Option<PathBuf>,
        /// Paired manifest; overrides `data.manifest`.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Score every subject instead of the held-out split.
        #[arg(long)]
        all: bool,
    },
    /// Predict volumes from spectrograms.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Single spectrogram file.
        #[arg(long, conflicts_with = "manifest")]
        input: Option<PathBuf>,
        /// Paired manifest; every input is predicted.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Time sequential against chunked scans and full forward passes.
    Bench {
        #[arg(long, value_delimiter = ',', default_value = "256,1024,4096")]
        lengths: Vec<usize>,
        #[arg(long, default_value_t = 16)]
        channels: usize,
        #[arg(long, default_value_t = 64)]
        chunk: usize,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
        /// Skip the forward-latency rows.
        #[arg(long)]
        scan_only: bool,
        /// Print CSV rows instead of the table.
        #[arg(long)]
        csv: bool,
    },
    /// Print the resolved configuration.
    ShowConfig,
}

fn keys_help() -> String {
    format!("Configuration keys (set with --config FILE or --set KEY=VALUE):\n{}", RunConfig::help_text())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let help = keys_help();
    let mut cmd = Cli::command().after_help(help.clone());
    for name in ["train", "eval", "predict", "preprocess", "show-config"] {
        cmd = cmd.mut_subcommand(name, |c| c.after_help(help.clone()));
    }
    let cli = match Cli::from_arg_matches(&cmd.get_matches()) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn resolve_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for kv in &c.set {
        cfg.apply_override(kv)?;
    }
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(w) = c.workers {
        cfg.workers = w;
    }
    if cfg.workers == 0 {
        return Err(Error::Config("`workers` must be at least 1".into()));
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = resolve_config(&cli.common)?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let out = cli.common.out.clone();
    match cli.command {
        Command::ShowConfig => {
            print!("{}", cfg.to_text());
            Ok(())
        }
        Command::Preprocess { manifest, preset } => {
            with_precision(&cfg, Dispatch::Preprocess { manifest: &manifest, preset: preset.as_deref(), out })
        }
        Command::SynthData { kind, preset, geometry, subjects, pairs, volumes } => {
            synth(&cfg, kind, preset.as_deref(), geometry, subjects, pairs, volumes, out)
        }
        Command::Train { manifest } => with_precision(&cfg, Dispatch::Train { manifest, out }),
        Command::Eval { checkpoint, predictions, manifest, all } => {
            with_precision(&cfg, Dispatch::Eval { checkpoint, predictions, manifest, all, out })
        }
        Command::Predict { checkpoint, input, manifest } => {
            with_precision(&cfg, Dispatch::Predict { checkpoint, input, manifest, out })
        }
        Command::Bench { lengths, channels, chunk, repeats, scan_only, csv } => {
            let mut rows = bench::scan_rows(&lengths, channels, cfg.arch.state_dim, chunk, repeats, cfg.seed)?;
            if !scan_only {
                rows.extend(bench::forward_rows(&cfg.arch, repeats, cfg.seed)?);
            }
            let csv_text: String = std::iter::once(bench::BenchRow::CSV_HEADER.to_string())
                .chain(rows.iter().map(|r| r.csv()))
                .map(|l| l + "\n")
                .collect();
            if csv {
                print!("{csv_text}");
            } else {
                print!("{}", bench::table(&rows));
            }
            if let Some(dir) = out {
                fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                let path = dir.join("bench.csv");
                fs::write(&path, csv_text).map_err(|e| Error::io(&path, e))?;
            }
            Ok(())
        }
    }
}

enum Dispatch<'a> {
    Preprocess { manifest: &'a Path, preset: Option<&'a str>, out: Option<PathBuf> },
    Train { manifest: Option<PathBuf>, out: Option<PathBuf> },
    Eval { checkpoint: Option<PathBuf>, predictions: Option<PathBuf>, manifest: Option<PathBuf>, all: bool, out: Option<PathBuf> },
    Predict { checkpoint: PathBuf, input: Option<PathBuf>, manifest: Option<PathBuf>, out: Option<PathBuf> },
}

fn with_precision(cfg: &RunConfig, d: Dispatch<'_>) -> Result<()> {
    match cfg.precision {
        Precision::F32 => dispatch::<f32>(cfg, d),
        Precision::F64 => dispatch::<f64>(cfg, d),
    }
}

fn dispatch<T: Scalar>(cfg: &RunConfig, d: Dispatch<'_>) -> Result<()> {
    match d {
        Dispatch::Preprocess { manifest, preset, out } => cmd_preprocess::<T>(cfg, manifest, preset, &required(out)?),
        Dispatch::Train { manifest, out } => cmd_train::<T>(cfg, manifest, &required(out)?),
        Dispatch::Eval { checkpoint: Some(ckpt), manifest, all, out, .. } => cmd_eval_checkpoint::<T>(cfg, &ckpt, manifest, all, out),
        Dispatch::Eval { predictions: Some(pred), out, .. } => cmd_eval_predictions::<T>(cfg, &pred, out),
        Dispatch::Eval { .. } => Err(Error::Usage("eval needs --checkpoint or --predictions".into())),
        Dispatch::Predict { checkpoint, input, manifest, out } => cmd_predict::<T>(&checkpoint, input, manifest, &required(out)?),
    }
}

fn required(out: Option<PathBuf>) -> Result<PathBuf> {
    out.ok_or_else(|| Error::Usage("--out is required for this command".into()))
}

fn manifest_path(cfg: &RunConfig, flag: Option<PathBuf>) -> Result<PathBuf> {
    flag.or_else(|| cfg.manifest.clone())
        .ok_or_else(|| Error::Usage("no dataset: pass --manifest or set data.manifest".into()))
}

fn cmd_preprocess<T: Scalar>(cfg: &RunConfig, manifest: &Path, preset: Option<&str>, out: &Path) -> Result<()> {
    let raw = Manifest::read(manifest)?;
    let mut opts = cfg.preprocess(raw.fs, raw.tr_s);
    if let Some(name) = preset {
        let p = Preset::find(name)?;
        if opts.volume_target.is_none() {
            opts.volume_target = p.source_volume.map(|_| p.volume);
        }
    }
    let (paired, counts) = dataset::preprocess::<T>(&raw, &opts, out)?;
    for (subject, n) in &counts {
        println!("{subject}: {n} pairs");
    }
    let total: usize = counts.iter().map(|c| c.1).sum();
    println!("total: {total} pairs, geometry {}", paired.geometry.expect("pairs were written"));
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn synth(
    cfg: &RunConfig,
    kind: SynthKind,
    preset: Option<&str>,
    geometry: Option<Geometry>,
    subjects: usize,
    pairs: usize,
    volumes: usize,
    out: Option<PathBuf>,
) -> Result<()> {
    let out = required(out)?;
    let preset = preset.map(Preset::find).transpose()?;
    let manifest = match kind {
        SynthKind::Paired => {
            let g = match (geometry, preset) {
                (Some(g), _) => g,
                (None, Some(p)) => p.geometry(&cfg.preprocess(p.fs, p.tr_s)),
                (None, None) => return Err(Error::Usage("paired synth-data needs --geometry or --preset".into())),
            };
            synth_dataset(&out, g, subjects, pairs, cfg.seed)?
        }
        SynthKind::Raw => {
            let p = preset.ok_or_else(|| Error::Usage("raw synth-data needs --preset".into()))?;
            let spec = RawSpec {
                channels: p.channels,
                fs: p.fs,
                tr_s: p.tr_s,
                volumes,
                volume: p.source_volume.unwrap_or(p.volume),
            };
            synth_raw(&out, spec, subjects, cfg.seed)?
        }
    };
    println!("wrote {} entries to {}", manifest.entries.len(), out.join("manifest.txt").display());
    Ok(())
}

fn split_sets<'a, T: Scalar>(cfg: &RunConfig, data: &'a Dataset<T>) -> Result<(Vec<&'a eegfmri::dataset::Sample<T>>, Vec<&'a eegfmri::dataset::Sample<T>>, String)> {
    let plan = make_splits(&data.subjects(), cfg.split_mode, cfg.seed)?;
    let fold = plan.folds.get(cfg.fold).ok_or_else(|| {
        Error::Config(format!("split.fold = {} but the plan has {} folds", cfg.fold, plan.folds.len()))
    })?;
    let desc = match cfg.split_mode {
        SplitMode::Loso => format!("loso fold {} of {}: test {:?}", cfg.fold, plan.folds.len(), fold.test),
        SplitMode::Fixed { train, test } => format!("fixed {train}/{test}: test {:?}", fold.test),
    };
    Ok((data.select(&fold.train), data.select(&fold.test), desc))
}

fn cmd_train<T: Scalar>(cfg: &RunConfig, manifest: Option<PathBuf>, out: &Path) -> Result<()> {
    let manifest = Manifest::read(&manifest_path(cfg, manifest)?)?;
    let geometry = manifest.geometry()?;
    let model = cfg.model(geometry)?;
    let opts = cfg.train_options();
    opts.validate()?;
    let data: Dataset<T> = Dataset::load(&manifest)?;
    let (train_set, test_set, desc) = split_sets(cfg, &data)?;
    info!("{desc}; {} train / {} test samples", train_set.len(), test_set.len());
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let cfg_path = out.join("config.txt");
    fs::write(&cfg_path, cfg.to_text()).map_err(|e| Error::io(&cfg_path, e))?;
    let header = format!("split: {desc}\n{}", cfg.to_text());
    let init = model.init_params::<T>(cfg.seed);
    let summary = train::train(model, init, opts, &train_set, &test_set, out, &header)?;
    println!(
        "best epoch {} (held-out SSIM {:.4}); checkpoints in {} and {}",
        summary.best_epoch,
        summary.best_ssim,
        summary.best_dir.display(),
        summary.last_dir.display()
    );
    Ok(())
}

fn write_report(report: &eegfmri::metrics::Report, out: Option<PathBuf>) -> Result<()> {
    print!("{}", report.to_text());
    if let Some(dir) = out {
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let path = dir.join("report.csv");
        fs::write(&path, report.to_csv()).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

fn cmd_eval_checkpoint<T: Scalar>(cfg: &RunConfig, ckpt: &Path, manifest: Option<PathBuf>, all: bool, out: Option<PathBuf>) -> Result<()> {
    let manifest = Manifest::read(&manifest_path(cfg, manifest)?)?;
    let geometry = manifest.geometry()?;
    let label = match ckpt.file_name().and_then(|n| n.to_str()) {
        Some(BEST_DIR) => "best-by-SSIM checkpoint",
        Some(LAST_DIR) => "final-epoch checkpoint",
        _ => "checkpoint",
    };
    println!("evaluating {label} {}", ckpt.display());
    let ckpt: Checkpoint<T> = Checkpoint::load(ckpt).map_err(|e| e.context(ckpt.display()))?;
    check_geometry(&ckpt.model, geometry)?;
    let data: Dataset<T> = Dataset::load(&manifest)?;
    let samples = if all {
        println!("scoring all {} samples", data.samples.len());
        data.samples.iter().collect()
    } else {
        let (_, test, desc) = split_sets(cfg, &data)?;
        println!("scoring held-out samples, {desc}");
        test
    };
    let scores = train::evaluate(&ckpt.model, &ckpt.params, &samples, &cfg.ssim())?;
    write_report(&scores.report()?, out)
}

fn check_geometry(model: &ModelConfig, data: Geometry) -> Result<()> {
    if model.geometry != data {
        return Err(Error::Config(format!(
            "checkpoint geometry {} does not match dataset geometry {data}",
            model.geometry
        )));
    }
    Ok(())
}

fn cmd_eval_predictions<T: Scalar>(cfg: &RunConfig, path: &Path, out: Option<PathBuf>) -> Result<()> {
    let manifest = Manifest::read(path)?;
    let mut items = Vec::with_capacity(manifest.entries.len());
    for e in &manifest.entries {
        let (pp, tp) = (manifest.resolve(&e.input), manifest.resolve(&e.target));
        let pred: Tensor<T> = io::read(&pp)?;
        let truth: Tensor<T> = io::read(&tp)?;
        if pred.shape() != truth.shape() {
            return Err(Error::Config(format!(
                "{}: prediction shape {:?} does not match truth shape {:?} ({})",
                pp.display(),
                pred.shape(),
                truth.shape(),
                tp.display()
            )));
        }
        items.push((e.subject.clone(), pred, truth));
    }
    let scores = train::score_predictions(&items, &cfg.ssim())?;
    write_report(&scores.report()?, out)
}

fn cmd_predict<T: Scalar>(ckpt_dir: &Path, input: Option<PathBuf>, manifest: Option<PathBuf>, out: &Path) -> Result<()> {
    let ckpt: Checkpoint<T> = Checkpoint::load(ckpt_dir).map_err(|e| e.context(ckpt_dir.display()))?;
    let model = &ckpt.model;
    match (input, manifest) {
        (Some(input), None) => {
            let x: Tensor<T> = io::read(&input)?;
            if x.shape() != model.geometry.input() {
                return Err(Error::Config(format!(
                    "{}: input shape {:?} does not match checkpoint input {:?}",
                    input.display(),
                    x.shape(),
                    model.geometry.input()
                )));
            }
            let y = model.predict(&ckpt.params, &x)?;
            io::write(out, &y)?;
            println!("{} -> {} {:?}", input.display(), out.display(), y.shape());
            Ok(())
        }
        (None, Some(m)) => {
            let src = Manifest::read(&m)?;
            check_geometry(model, src.geometry()?)?;
            let mut preds = Manifest::new(format!("{}-predictions", src.name), ManifestKind::Paired, src.fs, src.tr_s, Some(model.geometry));
            preds.root = out.to_path_buf();
            for (i, e) in src.entries.iter().enumerate() {
                let path = src.resolve(&e.input);
                let x: Tensor<T> = io::read(&path)?;
                let y = model.predict(&ckpt.params, &x).map_err(|err| err.context(path.display()))?;
                let rel = format!("{}/{i:04}.pred.s2vt", e.subject);
                io::write(&out.join(&rel), &y)?;
                let truth = std::path::absolute(src.resolve(&e.target)).map_err(|err| Error::io(&e.target, err))?;
                preds.push(e.subject.clone(), rel, truth);
            }
            fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
            preds.write(&out.join("predictions.txt"))?;
            println!("wrote {} predictions to {}", preds.entries.len(), out.display());
            Ok(())
        }
        _ => Err(Error::Usage("predict needs exactly one of --input or --manifest".into())),
    }
}
