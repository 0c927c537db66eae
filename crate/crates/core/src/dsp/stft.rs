use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{dim_err, Result};
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

/// Frame and hop lengths in samples.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StftParams {
    pub frame_len: usize,
    pub hop: usize,
}

impl StftParams {
    /// `fs / 5` samples rounded to an even count, hop of half a frame.
    pub fn default_for(fs: f64) -> Self {
        let frame_len = (((fs / 5.0) / 2.0).round() as usize * 2).max(2);
        StftParams {
            frame_len,
            hop: frame_len / 2,
        }
    }

    /// Resolves zero entries (meaning "default") against `fs`.
    pub fn resolve(frame_len: usize, hop: usize, fs: f64) -> Self {
        let d = Self::default_for(fs);
        let frame_len = if frame_len == 0 { d.frame_len } else { frame_len };
        let hop = if hop == 0 { (frame_len / 2).max(1) } else { hop };
        StftParams { frame_len, hop }
    }

    pub fn frames(&self, len: usize) -> usize {
        if len < self.frame_len {
            0
        } else {
            (len - self.frame_len) / self.hop + 1
        }
    }

    pub fn bins(&self) -> usize {
        self.frame_len / 2 + 1
    }
}

/// Periodic Hann window of length `n`.
pub fn hann<T: Scalar>(n: usize) -> Vec<T> {
    (0..n)
        .map(|i| {
            let phase = 2.0 * std::f64::consts::PI * i as f64 / n as f64;
            lit(0.5 - 0.5 * phase.cos())
        })
        .collect()
}

/// One-sided magnitude spectrogram `[frames, frame_len / 2 + 1]` of a
/// Hann-windowed signal.
pub fn stft<T: Scalar>(signal: &[T], params: StftParams) -> Result<Tensor<T>> {
    let StftParams { frame_len, hop } = params;
    if frame_len == 0 || hop == 0 {
        return Err(dim_err!("STFT frame and hop must be positive"));
    }
    if frame_len > signal.len() {
        return Err(dim_err!(
            "STFT frame of {frame_len} samples exceeds segment of {}",
            signal.len()
        ));
    }
    let frames = params.frames(signal.len());
    let bins = params.bins();
    let window = hann::<T>(frame_len);
    let fft = FftPlanner::<T>::new().plan_fft_forward(frame_len);
    let mut buf = vec![Complex::new(T::zero(), T::zero()); frame_len];
    let mut out = Vec::with_capacity(frames * bins);
    for f in 0..frames {
        let seg = &signal[f * hop..f * hop + frame_len];
        for ((b, &s), &w) in buf.iter_mut().zip(seg).zip(&window) {
            *b = Complex::new(s * w, T::zero());
        }
        fft.process(&mut buf);
        out.extend(buf[..bins].iter().map(|c| c.norm()));
    }
    Tensor::new(&[frames, bins], out)
}

/// Indices of the bins kept by [`band_limit`]: DC is dropped and so is
/// every bin centred above `cutoff_hz` (clamped to Nyquist).
pub fn retained_bins(fs: f64, frame_len: usize, cutoff_hz: f64) -> std::ops::RangeInclusive<usize> {
    let nyquist_bin = frame_len / 2;
    let mut last = 0;
    while last < nyquist_bin && ((last + 1) as f64) * fs <= cutoff_hz * frame_len as f64 {
        last += 1;
    }
    1..=last
}

/// Keeps the retained bins of a `[T, F_full]` spectrogram.
pub fn band_limit<T: Scalar>(spec: &Tensor<T>, fs: f64, frame_len: usize, cutoff_hz: f64) -> Result<Tensor<T>> {
    let shape = spec.shape();
    if shape.len() != 2 || shape[1] != frame_len / 2 + 1 {
        return Err(dim_err!(
            "spectrogram {shape:?} does not come from a {frame_len}-sample frame"
        ));
    }
    let keep = retained_bins(fs, frame_len, cutoff_hz);
    if keep.is_empty() {
        return Err(dim_err!("no frequency bins between DC and {cutoff_hz} Hz"));
    }
    let width = keep.end() - keep.start() + 1;
    let vals = spec.values();
    let mut out = Vec::with_capacity(shape[0] * width);
    for row in vals.chunks(shape[1]) {
        out.extend_from_slice(&row[keep.clone()]);
    }
    Tensor::new(&[shape[0], width], out)
}
