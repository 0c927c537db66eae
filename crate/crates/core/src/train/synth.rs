//! Deterministic synthetic datasets.
//!
//! Paired data: each pair draws a few latent factors; the spectrogram is a
//! sum of fixed smooth spectral patterns weighted by the factors, and the
//! volume is a fixed linear read-out of the spectrogram onto smooth spatial
//! patterns, plus a little noise. Raw data: multichannel sinusoid mixtures
//! with a volume series, for exercising preprocessing.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::{Manifest, ManifestKind};
use crate::dsp::window_len;
use crate::error::{Error, Result};
use crate::io;
use crate::model::Geometry;
use crate::tensor::Tensor;

const FACTORS: usize = 4;
const SPEC_NOISE: f64 = 0.01;
const VOL_NOISE: f64 = 0.005;

/// Smooth profile `cos(π·m·(j + ½)/n + φ)` with a random low mode.
fn profile(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let m = rng.gen_range(0..3) as f64;
    let phase = rng.gen_range(0.0..2.0 * PI);
    (0..n).map(|j| (PI * m * (j as f64 + 0.5) / n as f64 + phase).cos()).collect()
}

fn separable(dims: [usize; 3], rng: &mut ChaCha8Rng) -> Vec<f64> {
    let [a, b, c] = dims.map(|n| profile(n, rng));
    let mut out = Vec::with_capacity(dims.iter().product());
    for x in &a {
        for y in &b {
            for z in &c {
                out.push(x * y * z);
            }
        }
    }
    out
}

fn subject_id(i: usize) -> String {
    format!("sub{:02}", i + 1)
}

fn mkdir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

/// The fixed ingredients of the planted dependency.
pub struct PlantedMap {
    spectral: Vec<Vec<f64>>,
    spatial: Vec<Vec<f64>>,
    norms: Vec<f64>,
}

impl PlantedMap {
    pub fn new(geometry: &Geometry, rng: &mut ChaCha8Rng) -> Self {
        let spectral: Vec<Vec<f64>> = (0..FACTORS).map(|_| separable(geometry.input(), rng)).collect();
        let spatial: Vec<Vec<f64>> = (0..FACTORS).map(|_| separable(geometry.output(), rng)).collect();
        let norms = spectral.iter().map(|u| u.iter().map(|v| v * v).sum::<f64>().max(1e-12)).collect();
        PlantedMap { spectral, spatial, norms }
    }

    fn amplitude() -> f64 {
        0.4 / FACTORS as f64
    }

    /// Spectrogram for latent factors `z`, before noise.
    pub fn spectrogram(&self, z: &[f64]) -> Vec<f64> {
        let n = self.spectral[0].len();
        (0..n)
            .map(|i| 0.5 + Self::amplitude() * (0..FACTORS).map(|k| z[k] * self.spectral[k][i]).sum::<f64>())
            .collect()
    }

    /// The linear read-out: project the centred spectrogram on each spectral
    /// pattern and paint the coefficients onto the spatial patterns.
    pub fn volume(&self, spec: &[f64]) -> Vec<f64> {
        let w: Vec<f64> = (0..FACTORS)
            .map(|k| {
                let dot: f64 = spec.iter().zip(&self.spectral[k]).map(|(x, u)| (x - 0.5) * u).sum();
                dot / self.norms[k]
            })
            .collect();
        let n = self.spatial[0].len();
        (0..n)
            .map(|i| 0.5 + (0..FACTORS).map(|k| w[k] * self.spatial[k][i]).sum::<f64>())
            .collect()
    }
}

/// Adds uniform noise, then min-max normalizes like the preprocessing does.
fn to_unit(v: Vec<f64>, noise: f64, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let noisy: Vec<f64> = v.into_iter().map(|x| x + rng.gen_range(-noise..=noise)).collect();
    let (lo, hi) = noisy.iter().fold((f64::MAX, f64::MIN), |(l, h), &x| (l.min(x), h.max(x)));
    let span = hi - lo;
    noisy
        .into_iter()
        .map(|x| if span > 0.0 { ((x - lo) / span) as f32 } else { 0.0 })
        .collect()
}

/// Writes `n_subjects × pairs_per_subject` f32 pairs under `dir` plus
/// `dir/manifest.txt`, and returns the manifest.
pub fn synth_dataset(
    dir: &Path,
    geometry: Geometry,
    n_subjects: usize,
    pairs_per_subject: usize,
    seed: u64,
) -> Result<Manifest> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let map = PlantedMap::new(&geometry, &mut rng);
    let mut manifest = Manifest::new("synthetic", ManifestKind::Paired, 250.0, 2.0, Some(geometry));
    manifest.root = dir.to_path_buf();
    for s in 0..n_subjects {
        let id = subject_id(s);
        mkdir(&dir.join(&id))?;
        for i in 0..pairs_per_subject {
            let z: Vec<f64> = (0..FACTORS).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let clean = map.spectrogram(&z);
            let spec = to_unit(clean, SPEC_NOISE, &mut rng);
            let spec_f64: Vec<f64> = spec.iter().map(|&v| v as f64).collect();
            let vol = to_unit(map.volume(&spec_f64), VOL_NOISE, &mut rng);
            let input = format!("{id}/{i:04}.spec.s2vt");
            let target = format!("{id}/{i:04}.vol.s2vt");
            io::write(&dir.join(&input), &Tensor::new(&geometry.input(), spec)?)?;
            io::write(&dir.join(&target), &Tensor::new(&geometry.output(), vol)?)?;
            manifest.push(id.clone(), input, target);
        }
    }
    manifest.write(&dir.join("manifest.txt"))?;
    Ok(manifest)
}

/// Shape of one raw session.
#[derive(Clone, Copy, Debug)]
pub struct RawSpec {
    pub channels: usize,
    pub fs: f64,
    pub tr_s: f64,
    pub volumes: usize,
    pub volume: [usize; 3],
}

/// Writes raw sessions: EEG `[C, volumes·round(fs·TR)]` and a volume series
/// `[volumes, D, H, W]` per subject, plus `dir/manifest.txt`.
pub fn synth_raw(dir: &Path, spec: RawSpec, n_subjects: usize, seed: u64) -> Result<Manifest> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut manifest = Manifest::new("synthetic-raw", ManifestKind::Raw, spec.fs, spec.tr_s, None);
    manifest.root = dir.to_path_buf();
    let samples = spec.volumes * window_len(spec.fs, spec.tr_s);
    let nyquist = spec.fs / 2.0;
    for s in 0..n_subjects {
        let id = subject_id(s);
        mkdir(&dir.join(&id))?;
        let mut eeg = Vec::with_capacity(spec.channels * samples);
        for _ in 0..spec.channels {
            let tones: Vec<(f64, f64, f64)> = (0..3)
                .map(|_| {
                    (
                        rng.gen_range(1.0..nyquist * 0.8),
                        rng.gen_range(5.0..50.0),
                        rng.gen_range(0.0..2.0 * PI),
                    )
                })
                .collect();
            for n in 0..samples {
                let t = n as f64 / spec.fs;
                let v: f64 = tones.iter().map(|(f, a, p)| a * (2.0 * PI * f * t + p).sin()).sum();
                eeg.push((v + rng.gen_range(-5.0..5.0)) as f32);
            }
        }
        let mut series = Vec::new();
        for _ in 0..spec.volumes {
            let pattern = separable(spec.volume, &mut rng);
            series.extend(pattern.into_iter().map(|v| (1000.0 + 50.0 * v + rng.gen_range(-1.0..1.0)) as f32));
        }
        let [d, h, w] = spec.volume;
        let eeg_path = format!("{id}/eeg.s2vt");
        let bold_path = format!("{id}/bold.s2vt");
        io::write(&dir.join(&eeg_path), &Tensor::new(&[spec.channels, samples], eeg)?)?;
        io::write(&dir.join(&bold_path), &Tensor::new(&[spec.volumes, d, h, w], series)?)?;
        manifest.push(id, eeg_path, bold_path);
    }
    manifest.write(&dir.join("manifest.txt"))?;
    Ok(manifest)
}
