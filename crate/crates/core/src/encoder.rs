//! Spectrogram encoder: 3×3 projection, then per stage a multi-directional
//! local convolution block, a global self-attention block and a stride-2
//! frequency convolution; finally zero padding onto the volume plane.
//!
//! Feature maps are `[N, T, F]`. Normalization and attention treat the
//! `T·F` positions as tokens with `N`-dimensional embeddings.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{cfg_err, dim_err, Result};
use crate::params::{Bound, ParamStore};
use crate::scalar::{lit, Scalar};
use crate::tensor::{Tape, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub in_channels: usize,
    /// Embedding width `N`.
    pub embed: usize,
    pub heads: usize,
    pub stages: usize,
    /// `(H, W)` plane the output is padded onto; time maps to `H`.
    pub target_plane: (usize, usize),
    pub attention_dropout: f64,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.embed == 0 || self.heads == 0 {
            return Err(cfg_err!("encoder widths and head count must be positive"));
        }
        if self.embed % self.heads != 0 {
            return Err(cfg_err!(
                "embedding width {} is not divisible by {} heads",
                self.embed,
                self.heads
            ));
        }
        if self.stages == 0 {
            return Err(cfg_err!("encoder needs at least one stage"));
        }
        if !(0.0..1.0).contains(&self.attention_dropout) {
            return Err(cfg_err!("attention dropout {} outside [0, 1)", self.attention_dropout));
        }
        Ok(())
    }

    /// Frequency extent after every stride-2 stage, or an error if a stage
    /// would see fewer than two bins.
    pub fn final_freq(&self, freq: usize) -> Result<usize> {
        (0..self.stages).try_fold(freq, |f, s| {
            if f < 2 {
                Err(cfg_err!("stage {s} needs at least 2 frequency bins, has {f}"))
            } else {
                Ok(f.div_ceil(2))
            }
        })
    }

    /// `(top, bottom, left, right)` zero padding for a `T × F` input.
    pub fn padding(&self, time: usize, freq: usize) -> Result<(usize, usize, usize, usize)> {
        let f = self.final_freq(freq)?;
        let (h, w) = self.target_plane;
        if time > h || f > w {
            return Err(cfg_err!(
                "encoded plane {time}x{f} exceeds target {h}x{w} (needs {} extra rows, {} extra columns)",
                time.saturating_sub(h),
                f.saturating_sub(w)
            ));
        }
        let (dh, dw) = (h - time, w - f);
        Ok((dh / 2, dh - dh / 2, dw / 2, dw - dw / 2))
    }

    pub fn init_params<T: Scalar>(&self, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) {
        let (c, n) = (self.in_channels, self.embed);
        conv_params(store, "enc.proj", [n, c, 3, 3], rng);
        for s in 0..self.stages {
            let p = format!("enc.stage{s}");
            conv_params(store, &format!("{p}.temporal"), [n, n, 3, 1], rng);
            conv_params(store, &format!("{p}.frequency"), [n, n, 1, 3], rng);
            conv_params(store, &format!("{p}.joint"), [n, n, 3, 3], rng);
            conv_params(store, &format!("{p}.fusion"), [n, 3 * n, 1, 1], rng);
            norm_params(store, &format!("{p}.norm1"), n);
            for proj in ["q", "k", "v", "out"] {
                linear_params(store, &format!("{p}.attn.{proj}"), n, n, true, rng);
            }
            norm_params(store, &format!("{p}.norm2"), n);
            conv_params(store, &format!("{p}.down"), [n, n, 1, 3], rng);
        }
    }
}

pub(crate) fn conv_params<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, shape: [usize; 4], rng: &mut impl Rng) {
    let fan_in = shape[1] * shape[2] * shape[3];
    store.uniform(format!("{prefix}.kernel"), &shape, fan_in, rng);
    store.uniform(format!("{prefix}.bias"), &[shape[0]], fan_in, rng);
}

pub(crate) fn linear_params<T: Scalar>(
    store: &mut ParamStore<T>,
    prefix: &str,
    dout: usize,
    din: usize,
    bias: bool,
    rng: &mut impl Rng,
) {
    store.uniform(format!("{prefix}.weight"), &[dout, din], din, rng);
    if bias {
        store.uniform(format!("{prefix}.bias"), &[dout], din, rng);
    }
}

pub(crate) fn norm_params<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, width: usize) {
    store.ones(format!("{prefix}.gain"), &[width]);
    store.zeros(format!("{prefix}.shift"), &[width]);
}

fn shape3<T: Scalar>(tape: &Tape<T>, x: Var) -> Result<[usize; 3]> {
    match *tape.shape(x) {
        [a, b, c] => Ok([a, b, c]),
        ref s => Err(dim_err!("expected a rank-3 feature map, got {s:?}")),
    }
}

/// Convolution plus per-channel bias on a `[N, T, F]` map.
fn conv_layer<T: Scalar>(
    tape: &mut Tape<T>,
    p: &Bound,
    prefix: &str,
    x: Var,
    stride: (usize, usize),
    pad: (usize, usize),
) -> Result<Var> {
    let [c, t, f] = shape3(tape, x)?;
    let x4 = tape.reshape(x, &[1, c, t, f])?;
    let y = tape.conv2d(x4, p.get(&format!("{prefix}.kernel"))?, stride, pad)?;
    let y = tape.add_bias(y, p.get(&format!("{prefix}.bias"))?, 1)?;
    let s = tape.shape(y).to_vec();
    tape.reshape(y, &s[1..])
}

/// `[N, T, F]` to `[T·F, N]` tokens.
pub fn to_tokens<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let [n, t, f] = shape3(tape, x)?;
    let flat = tape.reshape(x, &[n, t * f])?;
    tape.permute(flat, &[1, 0])
}

/// `[T·F, N]` tokens back to `[N, T, F]`.
pub fn from_tokens<T: Scalar>(tape: &mut Tape<T>, tokens: Var, t: usize, f: usize) -> Result<Var> {
    let n = tape.shape(tokens)[1];
    let chan = tape.permute(tokens, &[1, 0])?;
    tape.reshape(chan, &[n, t, f])
}

/// LayerNorm over the channel axis at every (t, f) position.
pub fn channel_norm<T: Scalar>(tape: &mut Tape<T>, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let [_, t, f] = shape3(tape, x)?;
    let tokens = to_tokens(tape, x)?;
    let normed = tape.layer_norm(
        tokens,
        p.get(&format!("{prefix}.gain"))?,
        p.get(&format!("{prefix}.shift"))?,
        lit(LN_EPS),
    )?;
    from_tokens(tape, normed, t, f)
}

/// `SiLU(conv3×3(x))` from `[C, T, F]` to `[N, T, F]`.
pub fn project<T: Scalar>(tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
    let [c, _, _] = shape3(tape, x)?;
    let k = p.get("enc.proj.kernel")?;
    if tape.shape(k)[1] != c {
        return Err(dim_err!(
            "projection expects {} input channels, got {c}",
            tape.shape(k)[1]
        ));
    }
    let y = conv_layer(tape, p, "enc.proj", x, (1, 1), (1, 1))?;
    tape.silu(y)
}

/// `LayerNorm(x + fuse([conv3×1 x, conv1×3 x, conv3×3 x]))`.
pub fn mdtf_local_block<T: Scalar>(tape: &mut Tape<T>, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let temporal = conv_layer(tape, p, &format!("{prefix}.temporal"), x, (1, 1), (1, 0))?;
    let frequency = conv_layer(tape, p, &format!("{prefix}.frequency"), x, (1, 1), (0, 1))?;
    let joint = conv_layer(tape, p, &format!("{prefix}.joint"), x, (1, 1), (1, 1))?;
    let paths = tape.concat(&[temporal, frequency, joint], 0)?;
    let fused = conv_layer(tape, p, &format!("{prefix}.fusion"), paths, (1, 1), (0, 0))?;
    let residual = tape.add(x, fused)?;
    channel_norm(tape, p, &format!("{prefix}.norm1"), residual)
}

/// Output of [`mhsa`] with the attention probabilities `[heads, L, L]`.
pub struct Attention {
    pub output: Var,
    pub weights: Var,
}

/// Multi-head scaled dot-product self-attention over `[L, N]` tokens.
/// Without positional encoding the map is permutation-equivariant.
pub fn mhsa<T: Scalar>(
    tape: &mut Tape<T>,
    p: &Bound,
    prefix: &str,
    tokens: Var,
    heads: usize,
    dropout: Option<(f64, &mut ChaCha8Rng)>,
) -> Result<Attention> {
    let (l, n) = match *tape.shape(tokens) {
        [l, n] => (l, n),
        ref s => return Err(dim_err!("attention expects [L, N] tokens, got {s:?}")),
    };
    if heads == 0 || n % heads != 0 {
        return Err(cfg_err!("embedding width {n} is not divisible by {heads} heads"));
    }
    let dh = n / heads;
    let proj = |tape: &mut Tape<T>, name: &str, axes: &[usize]| -> Result<Var> {
        let y = tape.linear(
            tokens,
            p.get(&format!("{prefix}.{name}.weight"))?,
            Some(p.get(&format!("{prefix}.{name}.bias"))?),
        )?;
        let y = tape.reshape(y, &[l, heads, dh])?;
        tape.permute(y, axes)
    };
    let q = proj(tape, "q", &[1, 0, 2])?;
    let k = proj(tape, "k", &[1, 2, 0])?;
    let v = proj(tape, "v", &[1, 0, 2])?;
    let scores = tape.matmul(q, k)?;
    let scores = tape.scale(scores, lit(1.0 / (dh as f64).sqrt()))?;
    let weights = tape.softmax(scores, 2)?;
    let mut probs = weights;
    if let Some((rate, rng)) = dropout {
        if rate > 0.0 {
            let keep = lit::<T>(1.0 / (1.0 - rate));
            let mask: Vec<T> = (0..heads * l * l)
                .map(|_| if rng.gen::<f64>() < rate { T::zero() } else { keep })
                .collect();
            let mask = tape.constant(Tensor::new(&[heads, l, l], mask)?);
            probs = tape.mul(probs, mask)?;
        }
    }
    let ctx = tape.matmul(probs, v)?;
    let ctx = tape.permute(ctx, &[1, 0, 2])?;
    let ctx = tape.reshape(ctx, &[l, n])?;
    let output = tape.linear(
        ctx,
        p.get(&format!("{prefix}.out.weight"))?,
        Some(p.get(&format!("{prefix}.out.bias"))?),
    )?;
    Ok(Attention { output, weights })
}

/// `LayerNorm(x + MHSA(x))` over the `T·F` tokens of a `[N, T, F]` map.
pub fn mhsa_global_block<T: Scalar>(
    tape: &mut Tape<T>,
    p: &Bound,
    prefix: &str,
    x: Var,
    heads: usize,
    dropout: Option<(f64, &mut ChaCha8Rng)>,
) -> Result<Var> {
    let [_, t, f] = shape3(tape, x)?;
    let tokens = to_tokens(tape, x)?;
    let attn = mhsa(tape, p, &format!("{prefix}.attn"), tokens, heads, dropout)?;
    let attended = from_tokens(tape, attn.output, t, f)?;
    let residual = tape.add(x, attended)?;
    channel_norm(tape, p, &format!("{prefix}.norm2"), residual)
}

/// 1×3 convolution with stride 2 along frequency: `[N, T, F] → [N, T, ⌈F/2⌉]`.
pub fn freq_downsample<T: Scalar>(tape: &mut Tape<T>, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let [_, _, f] = shape3(tape, x)?;
    if f < 2 {
        return Err(dim_err!("frequency down-sampling needs at least 2 bins, got {f}"));
    }
    conv_layer(tape, p, prefix, x, (1, 2), (0, 1))
}

/// Full encoder: `[C, T, F] → [N, H, W]`.
pub fn encode<T: Scalar>(
    tape: &mut Tape<T>,
    p: &Bound,
    cfg: &EncoderConfig,
    x: Var,
    mut dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    let [_, t, f] = shape3(tape, x)?;
    let (top, bottom, left, right) = cfg.padding(t, f)?;
    let mut h = project(tape, p, x)?;
    for s in 0..cfg.stages {
        let prefix = format!("enc.stage{s}");
        h = mdtf_local_block(tape, p, &prefix, h)?;
        let drop = dropout_rng.as_deref_mut().map(|r| (cfg.attention_dropout, r));
        h = mhsa_global_block(tape, p, &prefix, h, cfg.heads, drop)?;
        h = freq_downsample(tape, p, &format!("{prefix}.down"), h)?;
    }
    tape.pad(h, &[(0, 0), (top, bottom), (left, right)])
}
