//! Raw EEG plus BOLD timing to normalized (spectrogram, volume) pairs.

mod dct;
mod stft;

pub use dct::dct_downsample;
pub use stft::{band_limit, hann, retained_bins, stft, StftParams};

use log::info;

use crate::error::{dim_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Multi-channel EEG with a shared sampling rate.
#[derive(Clone, Debug)]
pub struct EegRecording<T> {
    channels: Vec<Vec<T>>,
    fs: f64,
    subject_id: String,
}

/// One segment of every channel.
pub type Window<T> = Vec<Vec<T>>;

impl<T: Scalar> EegRecording<T> {
    pub fn new(channels: Vec<Vec<T>>, fs: f64, subject_id: impl Into<String>) -> Result<Self> {
        if !(fs > 0.0 && fs.is_finite()) {
            return Err(Error::Data(format!("sampling rate {fs} must be positive")));
        }
        let len = channels.first().map(Vec::len).ok_or_else(|| Error::Data("recording has no channels".into()))?;
        if let Some(c) = channels.iter().position(|c| c.len() != len) {
            return Err(Error::Data(format!(
                "channel {c} has {} samples, channel 0 has {len}",
                channels[c].len()
            )));
        }
        Ok(EegRecording {
            channels,
            fs,
            subject_id: subject_id.into(),
        })
    }

    /// From a `[C, samples]` tensor.
    pub fn from_tensor(t: &Tensor<T>, fs: f64, subject_id: impl Into<String>) -> Result<Self> {
        if t.rank() != 2 {
            return Err(dim_err!("EEG recording must be [channels, samples], got {:?}", t.shape()));
        }
        let vals = t.values();
        let chans = vals.chunks(t.shape()[1]).map(<[T]>::to_vec).collect();
        Self::new(chans, fs, subject_id)
    }

    pub fn channels(&self) -> &[Vec<T>] {
        &self.channels
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn len(&self) -> usize {
        self.channels[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn fs(&self) -> f64 {
        self.fs
    }

    pub fn subject_id(&self) -> &str {
        &self.subject_id
    }

    fn cut(&self, start: usize, end: usize) -> Window<T> {
        self.channels.iter().map(|c| c[start..end].to_vec()).collect()
    }
}

/// Samples per TR-length window.
pub fn window_len(fs: f64, tr_s: f64) -> usize {
    (fs * tr_s).round() as usize
}

/// Consecutive non-overlapping `round(fs * tr_s)`-sample windows; the trailing
/// remainder is dropped.
pub fn segment_windows<T: Scalar>(rec: &EegRecording<T>, tr_s: f64) -> Result<Vec<Window<T>>> {
    let n = window_len(rec.fs, tr_s);
    if n == 0 {
        return Err(Error::Config(format!("TR {tr_s} s gives an empty window at {} Hz", rec.fs)));
    }
    let count = rec.len() / n;
    if count == 0 {
        return Err(Error::Empty(format!(
            "recording of {} samples is shorter than one {n}-sample window",
            rec.len()
        )));
    }
    Ok((0..count).map(|k| rec.cut(k * n, (k + 1) * n)).collect())
}

/// Sample range `[start, end)` covering `[bold - lag - span, bold - lag)`.
pub fn lag_window_range(fs: f64, bold_time_s: f64, span_s: f64, lag_s: f64) -> (f64, f64, isize, isize) {
    let (start_s, end_s) = (bold_time_s - lag_s - span_s, bold_time_s - lag_s);
    (start_s, end_s, (start_s * fs).round() as isize, (end_s * fs).round() as isize)
}

/// The `span_s`-second segment ending `lag_s` seconds before a BOLD volume.
pub fn lag_aligned_window<T: Scalar>(
    rec: &EegRecording<T>,
    bold_index: usize,
    bold_time_s: f64,
    span_s: f64,
    lag_s: f64,
) -> Result<Window<T>> {
    let (start_s, end_s, start, end) = lag_window_range(rec.fs, bold_time_s, span_s, lag_s);
    if start < 0 || end as usize > rec.len() || end <= start {
        return Err(Error::Alignment {
            index: bold_index,
            bold_time_s,
            start_s,
            end_s,
        });
    }
    Ok(rec.cut(start as usize, end as usize))
}

/// Affine map onto [0, 1]; a constant tensor maps to zeros.
pub fn minmax_normalize<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    let (lo, hi) = t.min_max();
    let span = hi - lo;
    if span > T::zero() {
        t.map(|v| (v - lo) / span)
    } else {
        t.map(|_| T::zero())
    }
}

/// `[C, T, F]` band-limited magnitude spectrogram of one window, before
/// normalization.
pub fn window_spectrogram<T: Scalar>(window: &Window<T>, fs: f64, params: StftParams, cutoff_hz: f64) -> Result<Tensor<T>> {
    let mut data = Vec::new();
    let mut tf = (0, 0);
    for chan in window {
        let full = stft(chan, params)?;
        let limited = band_limit(&full, fs, params.frame_len, cutoff_hz)?;
        tf = (limited.shape()[0], limited.shape()[1]);
        data.extend(limited.values().iter().copied());
    }
    Tensor::new(&[window.len(), tf.0, tf.1], data)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PairingMode {
    /// Window `k` of length `fs * TR` pairs with volume `k`.
    TrWindows,
    /// A `span`-second window ending `lag` seconds before each volume.
    LagAligned,
}

impl std::str::FromStr for PairingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tr" => Ok(PairingMode::TrWindows),
            "lag" => Ok(PairingMode::LagAligned),
            other => Err(Error::Config(format!("pairing mode {other:?} is not one of tr, lag"))),
        }
    }
}

impl std::fmt::Display for PairingMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PairingMode::TrWindows => "tr",
            PairingMode::LagAligned => "lag",
        })
    }
}

#[derive(Clone, Debug)]
pub struct PreprocessOptions {
    pub tr_s: f64,
    pub stft: StftParams,
    pub cutoff_hz: f64,
    pub pairing: PairingMode,
    pub span_s: f64,
    pub lag_s: f64,
    /// DCT down-sampling target for volumes, if any.
    pub volume_target: Option<[usize; 3]>,
}

impl PreprocessOptions {
    pub fn new(fs: f64, tr_s: f64) -> Self {
        PreprocessOptions {
            tr_s,
            stft: StftParams::default_for(fs),
            cutoff_hz: 250.0,
            pairing: PairingMode::TrWindows,
            span_s: 20.0,
            lag_s: 6.0,
            volume_target: None,
        }
    }

    /// Samples in one EEG window under the pairing mode.
    pub fn window_samples(&self, fs: f64) -> usize {
        match self.pairing {
            PairingMode::TrWindows => window_len(fs, self.tr_s),
            PairingMode::LagAligned => window_len(fs, self.span_s),
        }
    }

    /// `(T, F)` of the spectrograms these options produce at `fs`.
    pub fn spectrogram_extent(&self, fs: f64) -> (usize, usize) {
        let frames = self.stft.frames(self.window_samples(fs));
        let bins = retained_bins(fs, self.stft.frame_len, self.cutoff_hz);
        (frames, bins.count())
    }
}

#[derive(Clone, Debug)]
pub struct SpectrogramSample<T> {
    /// `[C, T, F]` in [0, 1].
    pub data: Tensor<T>,
    /// BOLD onset minus window end, in seconds.
    pub window_end_offset_s: f64,
}

#[derive(Clone, Debug)]
pub struct VolumeSample<T> {
    /// `[D, H, W]` in [0, 1].
    pub data: Tensor<T>,
    pub tr_s: f64,
}

#[derive(Clone, Debug)]
pub struct Pair<T> {
    pub bold_index: usize,
    pub spectrogram: SpectrogramSample<T>,
    pub volume: VolumeSample<T>,
}

/// Aligns one session's EEG with its volume series (volume `k` has onset
/// `k * TR`) and normalizes both halves of every pair.
pub fn build_pairs<T: Scalar>(rec: &EegRecording<T>, volumes: &[Tensor<T>], opts: &PreprocessOptions) -> Result<Vec<Pair<T>>> {
    let mut pairs = Vec::new();
    let mut skipped = 0;
    let windows = match opts.pairing {
        PairingMode::TrWindows => segment_windows(rec, opts.tr_s)?,
        PairingMode::LagAligned => Vec::new(),
    };
    for (k, vol) in volumes.iter().enumerate() {
        let bold = k as f64 * opts.tr_s;
        let (window, end_s) = match opts.pairing {
            PairingMode::TrWindows => match windows.get(k) {
                Some(w) => (w, (k + 1) as f64 * opts.tr_s),
                None => {
                    skipped += 1;
                    continue;
                }
            },
            PairingMode::LagAligned => match lag_aligned_window(rec, k, bold, opts.span_s, opts.lag_s) {
                Ok(w) => {
                    pairs.push(make_pair(rec, k, &w, bold - opts.lag_s, vol, opts)?);
                    continue;
                }
                Err(Error::Alignment { .. }) => {
                    skipped += 1;
                    continue;
                }
                Err(e) => return Err(e),
            },
        };
        pairs.push(make_pair(rec, k, window, end_s, vol, opts)?);
    }
    info!(
        "subject {}: {} pairs from {} volumes ({} skipped)",
        rec.subject_id,
        pairs.len(),
        volumes.len(),
        skipped
    );
    if pairs.is_empty() {
        return Err(Error::Empty(format!("subject {} produced no viable pairs", rec.subject_id)));
    }
    Ok(pairs)
}

fn make_pair<T: Scalar>(
    rec: &EegRecording<T>,
    k: usize,
    window: &Window<T>,
    window_end_s: f64,
    vol: &Tensor<T>,
    opts: &PreprocessOptions,
) -> Result<Pair<T>> {
    let spec = window_spectrogram(window, rec.fs, opts.stft, opts.cutoff_hz)?;
    let vol = match opts.volume_target {
        Some(target) => dct_downsample(vol, target)?,
        None => vol.clone(),
    };
    Ok(Pair {
        bold_index: k,
        spectrogram: SpectrogramSample {
            data: minmax_normalize(&spec),
            window_end_offset_s: k as f64 * opts.tr_s - window_end_s,
        },
        volume: VolumeSample {
            data: minmax_normalize(&vol),
            tr_s: opts.tr_s,
        },
    })
}
