//! Transformer speech encoder mapping log-mel frames to linguistic states.
//!
//! Frames are first folded in groups of `subsample_factor` and projected to
//! `d_model` (a strided convolution whose kernel equals its stride), then
//! receive sinusoidal positions and pass through bidirectional pre-norm
//! blocks.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, ParamStore, Var};
use crate::error::{Error, Result};
use crate::nn::{Block, LayerNorm, Linear};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub n_mels: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ff_mult: usize,
    pub subsample_factor: usize,
    pub max_frames: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            n_mels: 80,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            ff_mult: 4,
            subsample_factor: 4,
            max_frames: 3000,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.n_layers == 0 || self.ff_mult == 0 {
            return Err(Error::config("encoder dimensions must be positive"));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::config(format!(
                "encoder d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if ![1, 2, 4].contains(&self.subsample_factor) {
            return Err(Error::config(format!(
                "encoder subsample_factor must be 1, 2 or 4, got {}",
                self.subsample_factor
            )));
        }
        if self.n_mels == 0 || self.max_frames == 0 {
            return Err(Error::config("encoder n_mels and max_frames must be positive"));
        }
        Ok(())
    }

    /// `T′ = ceil(T / subsample_factor)`.
    pub fn output_len(&self, frames: usize) -> usize {
        frames.div_ceil(self.subsample_factor)
    }

    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        let conv = self.subsample_factor * self.n_mels * d + d;
        conv + self.n_layers * Block::param_count(d, self.ff_mult) + 2 * d
    }
}

/// `Z_s` with `T′` rows.
#[derive(Clone, Debug)]
pub struct EncoderOutput<T: Scalar = f32> {
    pub states: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    pub conv: Linear,
    pub blocks: Vec<Block>,
    pub ln_f: LayerNorm,
}

pub fn sinusoidal_positions<T: Scalar>(len: usize, d: usize) -> Tensor<T> {
    Tensor::from_fn(&[len, d], |i| {
        let (pos, j) = ((i / d) as f64, i % d);
        let rate = 1.0 / 10_000f64.powf((2 * (j / 2)) as f64 / d as f64);
        T::of(if j % 2 == 0 {
            (pos * rate).sin()
        } else {
            (pos * rate).cos()
        })
    })
}

impl Encoder {
    pub fn build<T: Scalar>(cfg: &EncoderConfig, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let conv = Linear::new(store, rng, "encoder.conv", cfg.subsample_factor * cfg.n_mels, d)?;
        let blocks = (0..cfg.n_layers)
            .map(|i| Block::new(store, rng, &format!("encoder.block{i}"), d, cfg.n_heads, cfg.ff_mult))
            .collect::<Result<_>>()?;
        let ln_f = LayerNorm::new(store, "encoder.ln_f", d)?;
        Ok(Encoder {
            cfg: cfg.clone(),
            conv,
            blocks,
            ln_f,
        })
    }

    /// Encodes `[T × n_mels]` features (already normalized if requested).
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, features: Var) -> Result<Var> {
        let shape = g.shape(features).to_vec();
        if shape.len() != 2 || shape[1] != self.cfg.n_mels {
            return Err(Error::shape(format!(
                "encoder expects [T × {}] features, got {shape:?}",
                self.cfg.n_mels
            )));
        }
        if shape[0] > self.cfg.max_frames {
            return Err(Error::Length {
                what: "encoder input frames",
                len: shape[0],
                limit: self.cfg.max_frames,
            });
        }
        let stacked = g.stack_frames(features, self.cfg.subsample_factor)?;
        let mut x = self.conv.forward(g, store, stacked)?;
        let t_out = g.shape(x)[0];
        let pos = g.constant(sinusoidal_positions(t_out, self.cfg.d_model));
        x = g.add(x, pos)?;
        for b in &self.blocks {
            x = b.forward(g, store, x, false)?;
        }
        self.ln_f.forward(g, store, x)
    }

    pub fn linears(&self) -> Vec<&Linear> {
        let mut out = vec![&self.conv];
        for b in &self.blocks {
            out.extend(b.linears());
        }
        out
    }

    pub fn linears_mut(&mut self) -> Vec<&mut Linear> {
        let mut out: Vec<&mut Linear> = vec![&mut self.conv];
        for b in &mut self.blocks {
            out.extend(b.linears_mut());
        }
        out
    }
}
