//! The full network: spectrogram encoder followed by the state-space decoder.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::decoder::{self, DecoderConfig};
use crate::encoder::{self, EncoderConfig};
use crate::error::{cfg_err, Error, Result};
use crate::params::{Bound, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{ScanMode, Tape, Tensor, Var};

/// Input `C × T × F` and output `D × H × W` extents.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Geometry {
    pub channels: usize,
    pub time: usize,
    pub freq: usize,
    pub depth: usize,
    pub height: usize,
    pub width: usize,
}

impl Geometry {
    pub fn input(&self) -> [usize; 3] {
        [self.channels, self.time, self.freq]
    }

    pub fn output(&self) -> [usize; 3] {
        [self.depth, self.height, self.width]
    }
}

impl fmt::Display for Geometry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{},{},{},{},{},{}",
            self.channels, self.time, self.freq, self.depth, self.height, self.width
        )
    }
}

impl FromStr for Geometry {
    type Err = Error;

    /// Six comma-separated extents `C,T,F,D,H,W`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<usize> = s
            .split(',')
            .map(|p| p.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| cfg_err!("geometry `{s}` is not six comma-separated integers"))?;
        match parts[..] {
            [c, t, f, d, h, w] if parts.iter().all(|&v| v > 0) => Ok(Geometry {
                channels: c,
                time: t,
                freq: f,
                depth: d,
                height: h,
                width: w,
            }),
            _ => Err(cfg_err!("geometry `{s}` needs six positive extents C,T,F,D,H,W")),
        }
    }
}

/// Architecture hyper-parameters independent of the data geometry.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Architecture {
    pub embed: usize,
    pub heads: usize,
    pub encoder_stages: usize,
    pub attention_dropout: f64,
    pub state_dim: usize,
    pub unet_depth: usize,
    pub blocks_per_stage: usize,
    /// Scan chunk length; 0 runs the plain sequential recurrence.
    pub scan_chunk: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            embed: 32,
            heads: 4,
            encoder_stages: 2,
            attention_dropout: 0.0,
            state_dim: 8,
            unet_depth: 2,
            blocks_per_stage: 2,
            scan_chunk: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub geometry: Geometry,
    pub arch: Architecture,
}

const MODEL_FILE: &str = "model.txt";

impl ModelConfig {
    pub fn new(geometry: Geometry, arch: Architecture) -> Result<Self> {
        let cfg = ModelConfig { geometry, arch };
        cfg.encoder().validate()?;
        cfg.decoder().validate()?;
        cfg.encoder().padding(geometry.time, geometry.freq)?;
        cfg.decoder().check_plane(geometry.height, geometry.width)?;
        Ok(cfg)
    }

    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            in_channels: self.geometry.channels,
            embed: self.arch.embed,
            heads: self.arch.heads,
            stages: self.arch.encoder_stages,
            target_plane: (self.geometry.height, self.geometry.width),
            attention_dropout: self.arch.attention_dropout,
        }
    }

    pub fn decoder(&self) -> DecoderConfig {
        DecoderConfig {
            embed: self.arch.embed,
            out_depth: self.geometry.depth,
            state_dim: self.arch.state_dim,
            depth: self.arch.unet_depth,
            blocks_per_stage: self.arch.blocks_per_stage,
            scan: ScanMode::from_chunk(self.arch.scan_chunk),
        }
    }

    pub fn init_params<T: Scalar>(&self, seed: u64) -> ParamStore<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        self.encoder().init_params(&mut store, &mut rng);
        self.decoder().init_params(&mut store, &mut rng);
        store
    }

    /// `C × T × F` spectrogram to a `D × H × W` volume in (0, 1).
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        x: Var,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        if tape.shape(x) != self.geometry.input() {
            return Err(cfg_err!(
                "input shape {:?} does not match model geometry {:?}",
                tape.shape(x),
                self.geometry.input()
            ));
        }
        let f = encoder::encode(tape, p, &self.encoder(), x, dropout_rng)?;
        decoder::decode(tape, p, &self.decoder(), f)
    }

    /// Inference without gradients.
    pub fn predict<T: Scalar>(&self, params: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let p = params.bind_with(&mut tape, false);
        let xv = tape.constant(x.clone());
        let y = self.forward(&mut tape, &p, xv, None)?;
        Ok(tape.value(y).clone())
    }

    pub fn to_text(&self) -> String {
        let a = &self.arch;
        format!(
            "geometry = {}\nembed = {}\nheads = {}\nencoder_stages = {}\nattention_dropout = {}\n\
             state_dim = {}\nunet_depth = {}\nblocks_per_stage = {}\nscan_chunk = {}\n",
            self.geometry,
            a.embed,
            a.heads,
            a.encoder_stages,
            a.attention_dropout,
            a.state_dim,
            a.unet_depth,
            a.blocks_per_stage,
            a.scan_chunk
        )
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut geometry = None;
        let mut a = Architecture::default();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Data(format!("model description line `{line}` is not `key = value`")))?;
            let (k, v) = (k.trim(), v.trim());
            let int = || v.parse::<usize>().map_err(|_| Error::Data(format!("`{k}` expects an integer, got `{v}`")));
            match k {
                "geometry" => geometry = Some(v.parse()?),
                "embed" => a.embed = int()?,
                "heads" => a.heads = int()?,
                "encoder_stages" => a.encoder_stages = int()?,
                "attention_dropout" => {
                    a.attention_dropout = v.parse().map_err(|_| Error::Data(format!("bad dropout `{v}`")))?
                }
                "state_dim" => a.state_dim = int()?,
                "unet_depth" => a.unet_depth = int()?,
                "blocks_per_stage" => a.blocks_per_stage = int()?,
                "scan_chunk" => a.scan_chunk = int()?,
                _ => return Err(Error::Data(format!("unknown model description key `{k}`"))),
            }
        }
        let geometry = geometry.ok_or_else(|| Error::Data("model description lacks `geometry`".into()))?;
        ModelConfig::new(geometry, a)
    }
}

/// A model description plus its parameters, stored as a directory.
#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub model: ModelConfig,
    pub params: ParamStore<T>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.params.save(dir)?;
        let path = dir.join(MODEL_FILE);
        fs::write(&path, self.model.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MODEL_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let model = ModelConfig::from_text(&text)?;
        let params = ParamStore::load(dir)?;
        let expected = model.init_params::<T>(0);
        for (name, value) in expected.iter() {
            match params.get(name) {
                Some(p) if p.shape() == value.shape() => {}
                Some(p) => {
                    return Err(Error::Data(format!(
                        "checkpoint parameter `{name}` has shape {:?}, model expects {:?}",
                        p.shape(),
                        value.shape()
                    )))
                }
                None => return Err(Error::Data(format!("checkpoint lacks parameter `{name}`"))),
            }
        }
        Ok(Checkpoint { model, params })
    }
}
