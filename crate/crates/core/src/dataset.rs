//! Dataset manifests, reference dataset geometries and in-memory datasets.
//!
//! A manifest is a UTF-8 file with a `key = value` header followed by one
//! `subject <id>: <input> <target>` line per entry. Paths are relative to
//! the manifest's directory. Paired manifests list one spectrogram/volume
//! pair per line; raw manifests list one session per line as an EEG array
//! `[C, samples]` and a volume series `[N, D, H, W]`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::dsp::{build_pairs, EegRecording, PreprocessOptions};
use crate::error::{cfg_err, Error, Result};
use crate::io;
use crate::model::Geometry;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ManifestKind {
    Paired,
    Raw,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub subject: String,
    pub input: PathBuf,
    pub target: PathBuf,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub name: String,
    pub kind: ManifestKind,
    pub fs: f64,
    pub tr_s: f64,
    /// Required for paired manifests.
    pub geometry: Option<Geometry>,
    pub entries: Vec<Entry>,
    /// Directory that entry paths are relative to.
    pub root: PathBuf,
}

fn data_err(path: &Path, line: usize, msg: impl std::fmt::Display) -> Error {
    Error::Data(format!("{}:{line}: {msg}", path.display()))
}

impl Manifest {
    pub fn new(name: impl Into<String>, kind: ManifestKind, fs: f64, tr_s: f64, geometry: Option<Geometry>) -> Self {
        Manifest {
            name: name.into(),
            kind,
            fs,
            tr_s,
            geometry,
            entries: Vec::new(),
            root: PathBuf::new(),
        }
    }

    pub fn push(&mut self, subject: impl Into<String>, input: impl Into<PathBuf>, target: impl Into<PathBuf>) {
        self.entries.push(Entry {
            subject: subject.into(),
            input: input.into(),
            target: target.into(),
        });
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut name = None;
        let mut kind = ManifestKind::Paired;
        let (mut fs, mut tr, mut geometry) = (None, None, None);
        let mut entries = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let lineno = i + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(rest) = line.strip_prefix("subject ") {
                let (id, files) = rest
                    .split_once(':')
                    .ok_or_else(|| data_err(path, lineno, "expected `subject <id>: <input> <target>`"))?;
                let files: Vec<&str> = files.split_whitespace().collect();
                let [input, target] = files[..] else {
                    return Err(data_err(path, lineno, "expected two file paths"));
                };
                entries.push(Entry {
                    subject: id.trim().to_string(),
                    input: input.into(),
                    target: target.into(),
                });
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| data_err(path, lineno, format!("unrecognised line `{line}`")))?;
            let (k, v) = (k.trim(), v.trim());
            let real = || {
                v.parse::<f64>()
                    .ok()
                    .filter(|x| *x > 0.0 && x.is_finite())
                    .ok_or_else(|| data_err(path, lineno, format!("`{k}` must be a positive number, got `{v}`")))
            };
            match k {
                "name" => name = Some(v.to_string()),
                "fs" => fs = Some(real()?),
                "tr" => tr = Some(real()?),
                "geometry" => geometry = Some(v.parse::<Geometry>().map_err(|e| data_err(path, lineno, e))?),
                "kind" => {
                    kind = match v {
                        "paired" => ManifestKind::Paired,
                        "raw" => ManifestKind::Raw,
                        _ => return Err(data_err(path, lineno, format!("kind must be paired or raw, got `{v}`"))),
                    }
                }
                _ => return Err(data_err(path, lineno, format!("unknown header key `{k}`"))),
            }
        }
        let missing = |key: &str| Error::Data(format!("{}: header lacks `{key}`", path.display()));
        let m = Manifest {
            name: name.unwrap_or_else(|| "dataset".into()),
            kind,
            fs: fs.ok_or_else(|| missing("fs"))?,
            tr_s: tr.ok_or_else(|| missing("tr"))?,
            geometry,
            entries,
            root: path.parent().map(Path::to_path_buf).unwrap_or_default(),
        };
        if m.kind == ManifestKind::Paired && m.geometry.is_none() {
            return Err(missing("geometry"));
        }
        Ok(m)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Manifest::parse(&text, path)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "name = {}", self.name).unwrap();
        let kind = match self.kind {
            ManifestKind::Paired => "paired",
            ManifestKind::Raw => "raw",
        };
        writeln!(out, "kind = {kind}").unwrap();
        writeln!(out, "fs = {}", self.fs).unwrap();
        writeln!(out, "tr = {}", self.tr_s).unwrap();
        if let Some(g) = self.geometry {
            writeln!(out, "geometry = {g}").unwrap();
        }
        for e in &self.entries {
            writeln!(out, "subject {}: {} {}", e.subject, e.input.display(), e.target.display()).unwrap();
        }
        out
    }

    /// Writes the manifest as `path`, with entry paths taken relative to its
    /// directory.
    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    /// Subject ids in first-seen order.
    pub fn subjects(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for e in &self.entries {
            if !out.contains(&e.subject) {
                out.push(e.subject.clone());
            }
        }
        out
    }

    pub fn geometry(&self) -> Result<Geometry> {
        self.geometry
            .ok_or_else(|| cfg_err!("manifest `{}` does not declare a geometry", self.name))
    }
}

#[derive(Clone, Debug)]
pub struct Sample<T> {
    pub subject: String,
    pub input: Tensor<T>,
    pub target: Tensor<T>,
}

/// Paired samples held in memory, in manifest order.
#[derive(Clone, Debug)]
pub struct Dataset<T> {
    pub geometry: Geometry,
    pub samples: Vec<Sample<T>>,
}

impl<T: Scalar> Dataset<T> {
    pub fn load(manifest: &Manifest) -> Result<Self> {
        if manifest.kind != ManifestKind::Paired {
            return Err(cfg_err!("manifest `{}` holds raw sessions; preprocess it first", manifest.name));
        }
        let geometry = manifest.geometry()?;
        let mut samples = Vec::with_capacity(manifest.entries.len());
        for e in &manifest.entries {
            let load = |p: &Path, want: [usize; 3]| -> Result<Tensor<T>> {
                let path = manifest.resolve(p);
                let t: Tensor<T> = io::read(&path)?;
                if t.shape() != want {
                    return Err(Error::Data(format!(
                        "{}: shape {:?} does not match declared geometry {want:?}",
                        path.display(),
                        t.shape()
                    )));
                }
                if !t.is_finite() {
                    return Err(Error::Data(format!("{}: non-finite values", path.display())));
                }
                Ok(t)
            };
            samples.push(Sample {
                subject: e.subject.clone(),
                input: load(&e.input, geometry.input())?,
                target: load(&e.target, geometry.output())?,
            });
        }
        Ok(Dataset { geometry, samples })
    }

    pub fn subjects(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for s in &self.samples {
            if !out.contains(&s.subject) {
                out.push(s.subject.clone());
            }
        }
        out
    }

    /// Samples whose subject is in `ids`, in dataset order.
    pub fn select(&self, ids: &[String]) -> Vec<&Sample<T>> {
        self.samples.iter().filter(|s| ids.contains(&s.subject)).collect()
    }
}

/// Pair counts per subject from [`preprocess`].
pub type PairCounts = Vec<(String, usize)>;

/// Runs the preprocessing pipeline over every session of a raw manifest and
/// writes `out/<subject>/NNNN.{spec,vol}.s2vt` plus `out/manifest.txt`.
pub fn preprocess<T: Scalar>(raw: &Manifest, opts: &PreprocessOptions, out: &Path) -> Result<(Manifest, PairCounts)> {
    if raw.kind != ManifestKind::Raw {
        return Err(cfg_err!("manifest `{}` is already paired", raw.name));
    }
    if raw.entries.is_empty() {
        return Err(Error::Empty(format!("manifest `{}` lists no sessions", raw.name)));
    }
    let mut paired = Manifest::new(raw.name.clone(), ManifestKind::Paired, raw.fs, raw.tr_s, None);
    paired.root = out.to_path_buf();
    let mut counts: PairCounts = Vec::new();
    for e in &raw.entries {
        let (eeg_path, bold_path) = (raw.resolve(&e.input), raw.resolve(&e.target));
        let ctx = |err: Error| err.context(format!("subject {} ({})", e.subject, eeg_path.display()));
        let eeg: Tensor<T> = io::read(&eeg_path)?;
        let series: Tensor<T> = io::read(&bold_path)?;
        let rec = EegRecording::from_tensor(&eeg, raw.fs, e.subject.clone()).map_err(ctx)?;
        let volumes = split_series(&series).map_err(|err| err.context(bold_path.display()))?;
        let pairs = build_pairs(&rec, &volumes, opts).map_err(ctx)?;
        let start = counts.iter().filter(|(s, _)| *s == e.subject).map(|(_, n)| n).sum::<usize>();
        for (i, pair) in pairs.iter().enumerate() {
            let spec = &pair.spectrogram.data;
            let vol = &pair.volume.data;
            let g = geometry_of(spec.shape(), vol.shape())?;
            match paired.geometry {
                None => paired.geometry = Some(g),
                Some(prev) if prev != g => {
                    return Err(Error::Data(format!(
                        "subject {}: pair geometry {g} differs from earlier pairs ({prev})",
                        e.subject
                    )))
                }
                Some(_) => {}
            }
            let stem = format!("{}/{:04}", e.subject, start + i);
            let (input, target) = (format!("{stem}.spec.s2vt"), format!("{stem}.vol.s2vt"));
            io::write(&out.join(&input), spec)?;
            io::write(&out.join(&target), vol)?;
            paired.push(e.subject.clone(), input, target);
        }
        match counts.iter_mut().find(|(s, _)| *s == e.subject) {
            Some((_, n)) => *n += pairs.len(),
            None => counts.push((e.subject.clone(), pairs.len())),
        }
    }
    paired.write(&out.join("manifest.txt"))?;
    Ok((paired, counts))
}

fn split_series<T: Scalar>(series: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
    let [n, d, h, w] = match *series.shape() {
        [n, d, h, w] => [n, d, h, w],
        ref s => return Err(Error::Data(format!("volume series must be [N, D, H, W], got {s:?}"))),
    };
    let values = series.values();
    values
        .chunks_exact(d * h * w)
        .take(n)
        .map(|c| Tensor::new(&[d, h, w], c.to_vec()))
        .collect()
}

fn geometry_of(spec: &[usize], vol: &[usize]) -> Result<Geometry> {
    match (spec, vol) {
        (&[channels, time, freq], &[depth, height, width]) => Ok(Geometry { channels, time, freq, depth, height, width }),
        _ => Err(Error::Data(format!("unexpected pair shapes {spec:?} / {vol:?}"))),
    }
}

/// Acquisition parameters of the three reference datasets.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Preset {
    pub name: &'static str,
    pub subjects: usize,
    pub channels: usize,
    pub fs: f64,
    pub tr_s: f64,
    /// Volume extents the model predicts.
    pub volume: [usize; 3],
    /// Acquired extents when these are DCT down-sampled to `volume`.
    pub source_volume: Option<[usize; 3]>,
    pub total_pairs: usize,
}

pub const PRESETS: [Preset; 3] = [
    Preset {
        name: "noddi",
        subjects: 15,
        channels: 64,
        fs: 250.0,
        tr_s: 2.16,
        volume: [30, 64, 64],
        source_volume: None,
        total_pairs: 4110,
    },
    Preset {
        name: "oddball",
        subjects: 17,
        channels: 43,
        fs: 1000.0,
        tr_s: 2.0,
        volume: [32, 64, 64],
        source_volume: None,
        total_pairs: 17340,
    },
    Preset {
        name: "cn-epfl",
        subjects: 20,
        channels: 64,
        fs: 5000.0,
        tr_s: 1.28,
        volume: [30, 64, 64],
        source_volume: Some([54, 108, 108]),
        total_pairs: 6880,
    },
];

impl Preset {
    pub fn find(name: &str) -> Result<Preset> {
        PRESETS.iter().copied().find(|p| p.name == name).ok_or_else(|| {
            let names: Vec<&str> = PRESETS.iter().map(|p| p.name).collect();
            cfg_err!("unknown dataset preset `{name}` (known: {})", names.join(", "))
        })
    }

    pub fn pairs_per_subject(&self) -> usize {
        self.total_pairs / self.subjects
    }

    /// Preprocessing options with default STFT settings for this dataset.
    pub fn options(&self) -> PreprocessOptions {
        let mut o = PreprocessOptions::new(self.fs, self.tr_s);
        o.volume_target = self.source_volume.map(|_| self.volume);
        o
    }

    pub fn geometry(&self, opts: &PreprocessOptions) -> Geometry {
        let (time, freq) = opts.spectrogram_extent(self.fs);
        let [depth, height, width] = self.volume;
        Geometry {
            channels: self.channels,
            time,
            freq,
            depth,
            height,
            width,
        }
    }
}
