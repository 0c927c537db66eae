//! Image-quality metrics and the hybrid training loss.
//!
//! The tape variants (`*_var`) are differentiable and used for training; the
//! plain variants evaluate on tensors and return `f64`.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use crate::error::{cfg_err, dim_err, Error, Result};
use crate::scalar::{lit, Scalar};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda1: 0.5, lambda2: 0.5 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(cfg_err!("loss weights must be non-negative, got {} and {}", self.lambda1, self.lambda2));
        }
        if self.lambda1 == 0.0 && self.lambda2 == 0.0 {
            return Err(cfg_err!("loss weights cannot both be zero"));
        }
        Ok(())
    }
}

/// How local SSIM statistics are gathered on a `[D, H, W]` volume.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SsimMode {
    /// `window × window` boxes sliding over each axial slice.
    Sliding,
    /// One set of statistics per axial slice.
    Global,
    /// Cubic `window³` boxes sliding through the volume.
    Volume,
}

impl FromStr for SsimMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sliding" => Ok(SsimMode::Sliding),
            "global" => Ok(SsimMode::Global),
            "volume" => Ok(SsimMode::Volume),
            _ => Err(cfg_err!("unknown SSIM mode `{s}` (expected sliding, global or volume)")),
        }
    }
}

impl fmt::Display for SsimMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SsimMode::Sliding => "sliding",
            SsimMode::Global => "global",
            SsimMode::Volume => "volume",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsimConfig {
    pub window: usize,
    pub c1: f64,
    pub c2: f64,
    pub mode: SsimMode,
}

impl Default for SsimConfig {
    fn default() -> Self {
        SsimConfig::with_max(1.0)
    }
}

impl SsimConfig {
    /// Conventional constants `(0.01·max)²`, `(0.03·max)²` and a 7-wide window.
    pub fn with_max(max_val: f64) -> Self {
        SsimConfig {
            window: 7,
            c1: (0.01 * max_val).powi(2),
            c2: (0.03 * max_val).powi(2),
            mode: SsimMode::Sliding,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.window % 2 == 0 {
            return Err(cfg_err!("SSIM window must be odd and positive, got {}", self.window));
        }
        if !(self.c1 > 0.0 && self.c2 > 0.0) {
            return Err(cfg_err!("SSIM constants must be positive, got c1={} c2={}", self.c1, self.c2));
        }
        Ok(())
    }

    fn box_for(&self, shape: &[usize]) -> Result<[usize; 3]> {
        self.validate()?;
        let [d, h, w] = match *shape {
            [d, h, w] => [d, h, w],
            ref s => return Err(dim_err!("SSIM expects [D, H, W] volumes, got {s:?}")),
        };
        let win = self.window;
        let b = match self.mode {
            SsimMode::Sliding => [1, win, win],
            SsimMode::Global => [1, h, w],
            SsimMode::Volume => [win, win, win],
        };
        if b[0] > d || b[1] > h || b[2] > w {
            return Err(cfg_err!("SSIM window {b:?} is larger than the {d}x{h}x{w} volume"));
        }
        Ok(b)
    }
}

fn same_shape<T: Scalar>(tape: &Tape<T>, x: Var, y: Var) -> Result<()> {
    if tape.shape(x) != tape.shape(y) {
        return Err(dim_err!("shape mismatch {:?} vs {:?}", tape.shape(x), tape.shape(y)));
    }
    Ok(())
}

pub fn mse_var<T: Scalar>(tape: &mut Tape<T>, x: Var, y: Var) -> Result<Var> {
    same_shape(tape, x, y)?;
    let d = tape.sub(x, y)?;
    let sq = tape.square(d)?;
    tape.mean(sq)
}

/// Mean local SSIM; every window has the same size so this equals the mean
/// over slices of per-slice means.
pub fn ssim_var<T: Scalar>(tape: &mut Tape<T>, x: Var, y: Var, cfg: &SsimConfig) -> Result<Var> {
    same_shape(tape, x, y)?;
    let b = cfg.box_for(tape.shape(x))?;
    let mx = tape.box_filter(x, b)?;
    let my = tape.box_filter(y, b)?;
    let xx = tape.square(x)?;
    let yy = tape.square(y)?;
    let xy = tape.mul(x, y)?;
    let exx = tape.box_filter(xx, b)?;
    let eyy = tape.box_filter(yy, b)?;
    let exy = tape.box_filter(xy, b)?;
    let mx2 = tape.square(mx)?;
    let my2 = tape.square(my)?;
    let mxy = tape.mul(mx, my)?;
    let vx = tape.sub(exx, mx2)?;
    let vy = tape.sub(eyy, my2)?;
    let cxy = tape.sub(exy, mxy)?;

    let (c1, c2) = (lit::<T>(cfg.c1), lit::<T>(cfg.c2));
    let num_l = tape.scale(mxy, lit(2.0))?;
    let num_l = tape.add_scalar(num_l, c1)?;
    let num_c = tape.scale(cxy, lit(2.0))?;
    let num_c = tape.add_scalar(num_c, c2)?;
    let den_l = tape.add(mx2, my2)?;
    let den_l = tape.add_scalar(den_l, c1)?;
    let den_c = tape.add(vx, vy)?;
    let den_c = tape.add_scalar(den_c, c2)?;
    let num = tape.mul(num_l, num_c)?;
    let den = tape.mul(den_l, den_c)?;
    let map = tape.div(num, den)?;
    tape.mean(map)
}

/// `λ1·(1 − SSIM) + λ2·MSE`; a zero weight drops its term entirely.
pub fn hybrid_loss_var<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    y: Var,
    w: &LossWeights,
    cfg: &SsimConfig,
) -> Result<Var> {
    same_shape(tape, x, y)?;
    let mut terms = Vec::with_capacity(2);
    if w.lambda1 != 0.0 {
        let s = ssim_var(tape, x, y, cfg)?;
        let dissim = tape.scale(s, -T::one())?;
        let dissim = tape.add_scalar(dissim, T::one())?;
        terms.push(tape.scale(dissim, lit(w.lambda1))?);
    }
    if w.lambda2 != 0.0 {
        let m = mse_var(tape, x, y)?;
        terms.push(tape.scale(m, lit(w.lambda2))?);
    }
    match terms[..] {
        [a] => Ok(a),
        [a, b] => tape.add(a, b),
        _ => Err(cfg_err!("loss weights cannot both be zero")),
    }
}

fn with_tape<T: Scalar>(
    x: &Tensor<T>,
    y: &Tensor<T>,
    f: impl FnOnce(&mut Tape<T>, Var, Var) -> Result<Var>,
) -> Result<f64> {
    let mut tape = Tape::new();
    let (a, b) = (tape.constant(x.clone()), tape.constant(y.clone()));
    let out = f(&mut tape, a, b)?;
    Ok(tape.value(out).item().to_real())
}

pub fn mse<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>) -> Result<f64> {
    if x.shape() != y.shape() {
        return Err(dim_err!("shape mismatch {:?} vs {:?}", x.shape(), y.shape()));
    }
    let (a, b) = (x.values(), y.values());
    let total: f64 = a.iter().zip(b.iter()).map(|(p, q)| (p.to_real() - q.to_real()).powi(2)).sum();
    Ok(total / a.len() as f64)
}

pub fn ssim<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>, cfg: &SsimConfig) -> Result<f64> {
    with_tape(x, y, |t, a, b| ssim_var(t, a, b, cfg))
}

pub fn hybrid_loss<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>, w: &LossWeights, cfg: &SsimConfig) -> Result<f64> {
    with_tape(x, y, |t, a, b| hybrid_loss_var(t, a, b, w, cfg))
}

/// `10·log10(max²/mse)`, with `+∞` for a perfect match.
pub fn psnr_from_mse(mse: f64, max_val: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (max_val * max_val / mse).log10()
    }
}

pub fn psnr<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>, max_val: f64) -> Result<f64> {
    Ok(psnr_from_mse(mse(x, y)?, max_val))
}

/// Population mean and standard deviation. Infinite entries (perfect PSNR)
/// give an infinite mean; the spread is zero only if every entry is the same
/// infinity.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    if values.iter().any(|v| v.is_infinite()) {
        let first = values[0];
        let same = values.iter().all(|&v| v == first);
        let mean = values.iter().sum::<f64>();
        return (mean, if same { 0.0 } else { f64::INFINITY });
    }
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub subject: String,
    pub n_samples: usize,
    pub ssim_mean: f64,
    pub ssim_std: f64,
    pub psnr_mean: f64,
    pub psnr_std: f64,
}

impl ReportRow {
    pub fn from_scores(subject: impl Into<String>, ssim: &[f64], psnr: &[f64]) -> Self {
        let (ssim_mean, ssim_std) = mean_std(ssim);
        let (psnr_mean, psnr_std) = mean_std(psnr);
        ReportRow {
            subject: subject.into(),
            n_samples: ssim.len(),
            ssim_mean,
            ssim_std,
            psnr_mean,
            psnr_std,
        }
    }
}

/// Per-subject rows plus a pooled row over every sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub rows: Vec<ReportRow>,
    pub pooled: ReportRow,
}

/// Per-sample scores tagged with their subject.
#[derive(Clone, Debug, Default)]
pub struct Scores {
    entries: Vec<(String, f64, f64)>,
}

impl Scores {
    pub fn push(&mut self, subject: &str, ssim: f64, psnr: f64) {
        self.entries.push((subject.to_string(), ssim, psnr));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Subjects appear in first-seen order.
    pub fn report(&self) -> Result<Report> {
        if self.entries.is_empty() {
            return Err(Error::Empty("no samples to evaluate".into()));
        }
        let mut order: Vec<&str> = Vec::new();
        for (s, _, _) in &self.entries {
            if !order.contains(&s.as_str()) {
                order.push(s);
            }
        }
        let pick = |subject: Option<&str>| {
            let sel: Vec<_> = self
                .entries
                .iter()
                .filter(|(s, _, _)| subject.map_or(true, |want| s == want))
                .collect();
            let ssim: Vec<f64> = sel.iter().map(|e| e.1).collect();
            let psnr: Vec<f64> = sel.iter().map(|e| e.2).collect();
            ReportRow::from_scores(subject.unwrap_or("pooled"), &ssim, &psnr)
        };
        Ok(Report {
            rows: order.iter().map(|s| pick(Some(s))).collect(),
            pooled: pick(None),
        })
    }
}

fn num(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v:.6}")
    }
}

impl Report {
    pub const CSV_HEADER: &'static str = "subject,n_samples,ssim_mean,ssim_std,psnr_mean,psnr_std";

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{}", Self::CSV_HEADER).unwrap();
        for r in self.rows.iter().chain(std::iter::once(&self.pooled)) {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                r.subject,
                r.n_samples,
                num(r.ssim_mean),
                num(r.ssim_std),
                num(r.psnr_mean),
                num(r.psnr_std)
            )
            .unwrap();
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{:<12} {:>5} {:>20} {:>22}", "subject", "n", "SSIM", "PSNR (dB)").unwrap();
        for r in self.rows.iter().chain(std::iter::once(&self.pooled)) {
            writeln!(
                out,
                "{:<12} {:>5} {:>9} ± {:<8} {:>10} ± {:<9}",
                r.subject,
                r.n_samples,
                num(r.ssim_mean),
                num(r.ssim_std),
                num(r.psnr_mean),
                num(r.psnr_std)
            )
            .unwrap();
        }
        out
    }
}
