//! State-space U-Net decoder.
//!
//! The building block is a visual state-space (VSS) block: the feature map is
//! unrolled along four scan directions, each sequence runs through its own
//! selective scan, and the four results are folded back and summed. Stages
//! are joined by 2×2 patch merging on the way down and patch expansion on the
//! way up, with concatenated skips.
//!
//! Inside the network feature maps are kept as row-major token grids
//! `[H·W, C]`; the public block functions accept `[C, H, W]` maps.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::encoder::{linear_params, norm_params, LN_EPS};
use crate::error::{cfg_err, dim_err, Result};
use crate::params::{Bound, ParamStore};
use crate::scalar::{lit, Scalar};
use crate::tensor::{ScanMode, Tape, Tensor, Var};

const DT_MIN: f64 = 1e-3;
const DT_MAX: f64 = 1e-1;

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderConfig {
    /// Input width `N`; stage `k` runs at `N·2^k`.
    pub embed: usize,
    /// Output depth `D`.
    pub out_depth: usize,
    pub state_dim: usize,
    /// Number of 2× down (and up) steps.
    pub depth: usize,
    pub blocks_per_stage: usize,
    pub scan: ScanMode,
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed == 0 || self.out_depth == 0 || self.state_dim == 0 {
            return Err(cfg_err!("decoder widths, depth and state size must be positive"));
        }
        if self.blocks_per_stage == 0 {
            return Err(cfg_err!("decoder needs at least one block per stage"));
        }
        Ok(())
    }

    pub fn check_plane(&self, h: usize, w: usize) -> Result<()> {
        let m = 1usize << self.depth;
        if h % m != 0 || w % m != 0 {
            return Err(cfg_err!(
                "plane {h}x{w} is not divisible by {m} (2^{} down-sampling steps)",
                self.depth
            ));
        }
        Ok(())
    }

    /// Stages in execution order: down stages, bottleneck, up stages. Up stage `depth + 1 + i` mirrors down stage `depth - 1 - i`.
    pub fn stage_count(&self) -> usize {
        2 * self.depth + 1
    }

    fn width_of(&self, stage: usize) -> usize {
        let level = if stage <= self.depth { stage } else { 2 * self.depth - stage };
        self.embed << level
    }

    pub fn init_params<T: Scalar>(&self, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) {
        for stage in 0..self.stage_count() {
            let c = self.width_of(stage);
            for j in 0..self.blocks_per_stage {
                vss_params(store, &format!("dec.stage{stage}.block{j}"), c, self.state_dim, rng);
            }
        }
        for k in 0..self.depth {
            let c = self.embed << k;
            linear_params(store, &format!("dec.merge{k}"), 2 * c, 4 * c, true, rng);
            linear_params(store, &format!("dec.expand{k}"), 4 * c, 2 * c, true, rng);
            linear_params(store, &format!("dec.skip{k}"), c, 2 * c, true, rng);
        }
        linear_params(store, "dec.head", self.out_depth, self.embed, true, rng);
    }
}

pub fn vss_params<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, c: usize, s: usize, rng: &mut ChaCha8Rng) {
    norm_params(store, &format!("{prefix}.norm"), c);
    linear_params(store, &format!("{prefix}.in_proj"), c, c, true, rng);
    linear_params(store, &format!("{prefix}.gate_proj"), c, c, true, rng);
    for d in 0..4 {
        s6_params(store, &format!("{prefix}.scan{d}"), c, s, rng);
    }
    norm_params(store, &format!("{prefix}.out_norm"), c);
    linear_params(store, &format!("{prefix}.out_proj"), c, c, true, rng);
}

pub fn s6_params<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, c: usize, s: usize, rng: &mut ChaCha8Rng) {
    linear_params(store, &format!("{prefix}.delta"), c, c, false, rng);
    // Step sizes start log-uniform in [DT_MIN, DT_MAX] through the inverse
    // of softplus, so early states carry information over many tokens.
    let bias: Vec<f64> = (0..c)
        .map(|_| {
            let dt = (rng.gen_range(DT_MIN.ln()..DT_MAX.ln())).exp();
            dt + (-(-dt).exp_m1()).ln()
        })
        .collect();
    store.insert(format!("{prefix}.delta.bias"), Tensor::from_f64(&[c], &bias).expect("delta bias shape"));
    linear_params(store, &format!("{prefix}.b_proj"), s, c, false, rng);
    linear_params(store, &format!("{prefix}.c_proj"), s, c, false, rng);
    // A = -(1..S) per channel, stored as its log.
    let a_log: Vec<f64> = (0..c).flat_map(|_| (1..=s).map(|k| (k as f64).ln())).collect();
    store.insert(format!("{prefix}.a_log"), Tensor::from_f64(&[c, s], &a_log).expect("a_log shape"));
    store.ones(format!("{prefix}.d_skip"), &[c]);
}

/// Flat row-major indices of the four scan directions over an `h × w` grid:
/// forward, reversed, horizontally flipped, flipped and reversed.
pub fn scan_orders(h: usize, w: usize) -> [Vec<usize>; 4] {
    let d1: Vec<usize> = (0..h * w).collect();
    let d3: Vec<usize> = (0..h).flat_map(|r| (0..w).rev().map(move |c| r * w + c)).collect();
    let d2 = d1.iter().rev().copied().collect();
    let d4 = d3.iter().rev().copied().collect();
    [d1, d2, d3, d4]
}

fn inverse(order: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; order.len()];
    for (pos, &src) in order.iter().enumerate() {
        inv[src] = pos;
    }
    inv
}

struct Orders {
    fwd: [Arc<Vec<usize>>; 4],
    inv: [Arc<Vec<usize>>; 4],
}

impl Orders {
    fn new(h: usize, w: usize) -> Self {
        let fwd = scan_orders(h, w);
        let inv = [0, 1, 2, 3].map(|d| Arc::new(inverse(&fwd[d])));
        Orders { fwd: fwd.map(Arc::new), inv }
    }
}

fn shape3<T: Scalar>(tape: &Tape<T>, x: Var) -> Result<[usize; 3]> {
    match *tape.shape(x) {
        [a, b, c] => Ok([a, b, c]),
        ref s => Err(dim_err!("expected a rank-3 feature map, got {s:?}")),
    }
}

/// Unrolls `[N, H, W]` into four `[N, H·W]` sequences.
pub fn scan_expand<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Result<[Var; 4]> {
    let [n, h, w] = shape3(tape, x)?;
    let flat = tape.reshape(x, &[n, h * w])?;
    let orders = Orders::new(h, w);
    let mut out = [flat; 4];
    for (d, slot) in out.iter_mut().enumerate() {
        *slot = tape.gather(flat, 1, orders.fwd[d].clone())?;
    }
    Ok(out)
}

/// Folds four `[N, H·W]` sequences back onto the grid and sums them.
pub fn scan_merge<T: Scalar>(tape: &mut Tape<T>, ys: [Var; 4], h: usize, w: usize) -> Result<Var> {
    let n = tape.shape(ys[0])[0];
    for y in ys {
        if tape.shape(y) != [n, h * w] {
            return Err(dim_err!(
                "scan merge expects [{n}, {}] sequences, got {:?}",
                h * w,
                tape.shape(y)
            ));
        }
    }
    let orders = Orders::new(h, w);
    let mut acc = tape.gather(ys[0], 1, orders.inv[0].clone())?;
    for d in 1..4 {
        let back = tape.gather(ys[d], 1, orders.inv[d].clone())?;
        acc = tape.add(acc, back)?;
    }
    tape.reshape(acc, &[n, h, w])
}

/// Selective scan over token-major `[L, C]` input with parameters under `prefix`.
pub fn s6_tokens<T: Scalar>(tape: &mut Tape<T>, p: &Bound, prefix: &str, u: Var, mode: ScanMode) -> Result<Var> {
    let pre = |name: &str| format!("{prefix}.{name}");
    let raw = tape.linear(u, p.get(&pre("delta.weight"))?, Some(p.get(&pre("delta.bias"))?))?;
    let delta = tape.softplus(raw)?;
    let b = tape.linear(u, p.get(&pre("b_proj.weight"))?, None)?;
    let c = tape.linear(u, p.get(&pre("c_proj.weight"))?, None)?;
    let a = tape.exp(p.get(&pre("a_log"))?)?;
    let a = tape.neg(a)?;
    tape.selective_scan(u, delta, a, b, c, p.get(&pre("d_skip"))?, mode)
}

/// Selective scan over a channel-major `[N, L]` sequence.
pub fn s6_scan<T: Scalar>(tape: &mut Tape<T>, p: &Bound, prefix: &str, u: Var, mode: ScanMode) -> Result<Var> {
    let tokens = tape.permute(u, &[1, 0])?;
    let y = s6_tokens(tape, p, prefix, tokens, mode)?;
    tape.permute(y, &[1, 0])
}

fn norm<T: Scalar>(tape: &mut Tape<T>, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    tape.layer_norm(
        x,
        p.get(&format!("{prefix}.gain"))?,
        p.get(&format!("{prefix}.shift"))?,
        lit(LN_EPS),
    )
}

fn dense<T: Scalar>(tape: &mut Tape<T>, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    tape.linear(
        x,
        p.get(&format!("{prefix}.weight"))?,
        Some(p.get(&format!("{prefix}.bias"))?),
    )
}

fn vss_tokens<T: Scalar>(
    tape: &mut Tape<T>,
    p: &Bound,
    prefix: &str,
    x: Var,
    orders: &Orders,
    mode: ScanMode,
) -> Result<Var> {
    let z = norm(tape, p, &format!("{prefix}.norm"), x)?;
    let u = dense(tape, p, &format!("{prefix}.in_proj"), z)?;
    let g = dense(tape, p, &format!("{prefix}.gate_proj"), z)?;
    let gate = tape.silu(g)?;
    let mut merged = None;
    for d in 0..4 {
        let seq = tape.gather(u, 0, orders.fwd[d].clone())?;
        let y = s6_tokens(tape, p, &format!("{prefix}.scan{d}"), seq, mode)?;
        let back = tape.gather(y, 0, orders.inv[d].clone())?;
        merged = Some(match merged {
            None => back,
            Some(acc) => tape.add(acc, back)?,
        });
    }
    let merged = merged.expect("four directions");
    let m = norm(tape, p, &format!("{prefix}.out_norm"), merged)?;
    let gated = tape.mul(m, gate)?;
    let out = dense(tape, p, &format!("{prefix}.out_proj"), gated)?;
    tape.add(x, out)
}

/// One VSS block on a `[C, H, W]` map; shape preserving.
pub fn vss_block<T: Scalar>(tape: &mut Tape<T>, p: &Bound, prefix: &str, x: Var, mode: ScanMode) -> Result<Var> {
    let [c, h, w] = shape3(tape, x)?;
    let flat = tape.reshape(x, &[c, h * w])?;
    let tokens = tape.permute(flat, &[1, 0])?;
    let y = vss_tokens(tape, p, prefix, tokens, &Orders::new(h, w), mode)?;
    let y = tape.permute(y, &[1, 0])?;
    tape.reshape(y, &[c, h, w])
}

/// `[h·w, C]` → `[h/2·w/2, 4C]` by gathering each 2×2 neighbourhood.
fn patch_merge<T: Scalar>(tape: &mut Tape<T>, x: Var, h: usize, w: usize) -> Result<Var> {
    let c = tape.shape(x)[1];
    let g = tape.reshape(x, &[h / 2, 2, w / 2, 2, c])?;
    let g = tape.permute(g, &[0, 2, 1, 3, 4])?;
    tape.reshape(g, &[(h / 2) * (w / 2), 4 * c])
}

/// `[h·w, 4C']` → `[2h·2w, C']`, the inverse rearrangement of [`patch_merge`].
fn patch_split<T: Scalar>(tape: &mut Tape<T>, x: Var, h: usize, w: usize) -> Result<Var> {
    let c = tape.shape(x)[1] / 4;
    let g = tape.reshape(x, &[h, w, 2, 2, c])?;
    let g = tape.permute(g, &[0, 2, 1, 3, 4])?;
    tape.reshape(g, &[4 * h * w, c])
}

/// Decoder: `[N, H, W]` feature map to a `[D, H, W]` volume in (0, 1).
pub fn decode<T: Scalar>(tape: &mut Tape<T>, p: &Bound, cfg: &DecoderConfig, x: Var) -> Result<Var> {
    let [n, h, w] = shape3(tape, x)?;
    if n != cfg.embed {
        return Err(dim_err!("decoder expects {} channels, got {n}", cfg.embed));
    }
    cfg.check_plane(h, w)?;
    let flat = tape.reshape(x, &[n, h * w])?;
    let mut t = tape.permute(flat, &[1, 0])?;
    let mut plane = (h, w);
    let run_stage = |tape: &mut Tape<T>, t: Var, stage: usize, plane: (usize, usize)| -> Result<Var> {
        let orders = Orders::new(plane.0, plane.1);
        (0..cfg.blocks_per_stage).try_fold(t, |acc, j| {
            vss_tokens(tape, p, &format!("dec.stage{stage}.block{j}"), acc, &orders, cfg.scan)
        })
    };

    let mut skips = Vec::with_capacity(cfg.depth);
    for k in 0..cfg.depth {
        t = run_stage(tape, t, k, plane)?;
        skips.push(t);
        let merged = patch_merge(tape, t, plane.0, plane.1)?;
        t = dense(tape, p, &format!("dec.merge{k}"), merged)?;
        plane = (plane.0 / 2, plane.1 / 2);
    }
    t = run_stage(tape, t, cfg.depth, plane)?;
    for i in 0..cfg.depth {
        let k = cfg.depth - 1 - i;
        let wide = dense(tape, p, &format!("dec.expand{k}"), t)?;
        t = patch_split(tape, wide, plane.0, plane.1)?;
        plane = (plane.0 * 2, plane.1 * 2);
        let joined = tape.concat(&[t, skips[k]], 1)?;
        t = dense(tape, p, &format!("dec.skip{k}"), joined)?;
        t = run_stage(tape, t, cfg.depth + 1 + i, plane)?;
    }
    let head = dense(tape, p, "dec.head", t)?;
    let vol = tape.sigmoid(head)?;
    let vol = tape.permute(vol, &[1, 0])?;
    tape.reshape(vol, &[cfg.out_depth, h, w])
}
