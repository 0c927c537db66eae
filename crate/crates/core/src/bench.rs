//! Timing routines behind the `bench` subcommand.

use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::PRESETS;
use crate::error::Result;
use crate::model::{Architecture, ModelConfig};
use crate::tensor::{scan_chunked, scan_sequential, ScanInputs, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    /// `scan` or `forward`.
    pub kind: &'static str,
    /// Sequence length for scans, dataset preset for forward passes.
    pub case: String,
    pub variant: String,
    /// Mean wall time per repeat.
    pub millis: f64,
    /// Scanned tokens per second, or forward passes per second.
    pub throughput: f64,
    /// Output sum, printed to 8 significant digits.
    pub checksum: String,
}

impl BenchRow {
    pub const CSV_HEADER: &'static str = "kind,case,variant,ms,throughput,checksum";

    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{:.4},{:.2},{}",
            self.kind, self.case, self.variant, self.millis, self.throughput, self.checksum
        )
    }
}

fn checksum(values: impl Iterator<Item = f64>) -> String {
    format!("{:.7e}", values.sum::<f64>())
}

fn timed<R>(repeats: usize, mut f: impl FnMut() -> Result<R>) -> Result<(f64, R)> {
    let mut out = f()?;
    let start = Instant::now();
    for _ in 0..repeats {
        out = f()?;
    }
    Ok((start.elapsed().as_secs_f64() * 1e3 / repeats.max(1) as f64, out))
}

/// Sequential against chunked scans on identical random inputs.
pub fn scan_rows(lengths: &[usize], channels: usize, states: usize, chunk: usize, repeats: usize, seed: u64) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::new();
    for &len in lengths {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ len as u64);
        let mut draw = |n: usize, lo: f64, hi: f64| -> Vec<f64> { (0..n).map(|_| rng.gen_range(lo..hi)).collect() };
        let u = draw(len * channels, -1.0, 1.0);
        let delta = draw(len * channels, 0.001, 0.1);
        let a = draw(channels * states, -2.0, -0.1);
        let b = draw(len * states, -1.0, 1.0);
        let c = draw(len * states, -1.0, 1.0);
        let d = draw(channels, 0.5, 1.5);
        let inp = ScanInputs { u: &u, delta: &delta, a: &a, b: &b, c: &c, d: &d, len, channels, states };
        let (seq_ms, seq) = timed(repeats, || scan_sequential(&inp))?;
        let (chk_ms, chk) = timed(repeats, || scan_chunked(&inp, chunk))?;
        let tokens = (len * channels) as f64;
        rows.push(BenchRow {
            kind: "scan",
            case: len.to_string(),
            variant: "sequential".into(),
            millis: seq_ms,
            throughput: tokens / (seq_ms / 1e3),
            checksum: checksum(seq.y.iter().copied()),
        });
        rows.push(BenchRow {
            kind: "scan",
            case: len.to_string(),
            variant: format!("chunked/{chunk}"),
            millis: chk_ms,
            throughput: tokens / (chk_ms / 1e3),
            checksum: checksum(chk.y.iter().copied()),
        });
    }
    Ok(rows)
}

/// Single-sample forward latency at each reference geometry.
pub fn forward_rows(arch: &Architecture, repeats: usize, seed: u64) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::new();
    for preset in PRESETS {
        let geometry = preset.geometry(&preset.options());
        let model = ModelConfig::new(geometry, arch.clone())?;
        let params = model.init_params::<f32>(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = geometry.input().iter().product();
        let x = Tensor::new(&geometry.input(), (0..n).map(|_| rng.gen_range(0.0f32..1.0)).collect())?;
        let (ms, y) = timed(repeats, || model.predict(&params, &x))?;
        rows.push(BenchRow {
            kind: "forward",
            case: preset.name.into(),
            variant: format!("{geometry}"),
            millis: ms,
            throughput: 1e3 / ms,
            checksum: checksum(y.values().iter().map(|&v| v as f64)),
        });
    }
    Ok(rows)
}

pub fn table(rows: &[BenchRow]) -> String {
    let mut out = String::new();
    writeln!(out, "{:<8} {:<8} {:<22} {:>12} {:>14} {:>16}", "kind", "case", "variant", "ms", "throughput", "checksum").unwrap();
    for r in rows {
        writeln!(
            out,
            "{:<8} {:<8} {:<22} {:>12.3} {:>14.1} {:>16}",
            r.kind, r.case, r.variant, r.millis, r.throughput, r.checksum
        )
        .unwrap();
    }
    out
}
