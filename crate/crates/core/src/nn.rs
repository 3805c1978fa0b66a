//! Layers shared by the encoder, adaptor and language model.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::error::Result;
use crate::lora::LoraAdapter;
use crate::tensor::{Scalar, Tensor};

pub(crate) fn gaussian<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape, |_| T::of(dist.sample(rng)))
}

pub(crate) fn uniform<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::of(rng.gen_range(-bound..bound)))
}

/// Affine map `y = x·Wᵀ + b` with `W: [d_out × d_in]`, optionally carrying a
/// LoRA branch.
#[derive(Clone, Debug)]
pub struct Linear {
    pub name: String,
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
    pub lora: Option<LoraAdapter>,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        d_in: usize,
        d_out: usize,
    ) -> Result<Self> {
        let bound = 1.0 / (d_in as f64).sqrt();
        let weight = store.add(name, uniform(rng, &[d_out, d_in], bound))?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[d_out]))?;
        Ok(Linear {
            name: name.to_string(),
            weight,
            bias,
            d_in,
            d_out,
            lora: None,
        })
    }

    pub fn param_count(&self) -> usize {
        self.d_in * self.d_out + self.d_out
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let xw = g.matmul_t(x, w)?;
        let y = g.add(xw, b)?;
        match &self.lora {
            Some(ad) if !ad.merged => {
                let a = g.param(store, ad.a);
                let bb = g.param(store, ad.b);
                let xa = g.matmul_t(x, a)?;
                let delta = g.matmul_t(xa, bb)?;
                let delta = g.scale(delta, T::of(ad.scaling()));
                g.add(y, delta)
            }
            _ => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, d: usize) -> Result<Self> {
        Ok(LayerNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[d], T::one()))?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[d]))?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta)
    }
}

/// Multi-head self-attention with query/key/value/output projections.
#[derive(Clone, Debug)]
pub struct SelfAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub n_heads: usize,
}

impl SelfAttention {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        d: usize,
        n_heads: usize,
    ) -> Result<Self> {
        Ok(SelfAttention {
            wq: Linear::new(store, rng, &format!("{name}.wq"), d, d)?,
            wk: Linear::new(store, rng, &format!("{name}.wk"), d, d)?,
            wv: Linear::new(store, rng, &format!("{name}.wv"), d, d)?,
            wo: Linear::new(store, rng, &format!("{name}.wo"), d, d)?,
            n_heads,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, causal: bool) -> Result<Var> {
        let q = self.wq.forward(g, store, x)?;
        let k = self.wk.forward(g, store, x)?;
        let v = self.wv.forward(g, store, x)?;
        let (len, d) = (g.shape(x)[0], g.shape(x)[1]);
        let dh = d / self.n_heads;
        let inv = T::one() / T::of(dh as f64).sqrt();
        let mask = causal.then(|| g.constant(causal_mask(len)));
        let mut heads = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let qh = g.slice_cols(q, lo, hi)?;
            let kh = g.slice_cols(k, lo, hi)?;
            let vh = g.slice_cols(v, lo, hi)?;
            let scores = g.matmul_t(qh, kh)?;
            let mut scores = g.scale(scores, inv);
            if let Some(m) = mask {
                scores = g.add(scores, m)?;
            }
            let p = g.softmax(scores, 1)?;
            heads.push(g.matmul(p, vh)?);
        }
        let cat = if heads.len() == 1 {
            heads[0]
        } else {
            g.concat_cols(&heads)?
        };
        self.wo.forward(g, store, cat)
    }
}

/// Additive mask hiding future positions.
pub fn causal_mask<T: Scalar>(len: usize) -> Tensor<T> {
    let neg = T::of(-1e9);
    Tensor::from_fn(&[len, len], |i| if i % len > i / len { neg } else { T::zero() })
}

/// Pre-norm transformer block: `x + attn(ln1(x))`, then `x + ff(ln2(x))`.
#[derive(Clone, Debug)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: SelfAttention,
    pub ln2: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
}

impl Block {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        d: usize,
        n_heads: usize,
        ff_mult: usize,
    ) -> Result<Self> {
        Ok(Block {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d)?,
            attn: SelfAttention::new(store, rng, &format!("{name}.attn"), d, n_heads)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d)?,
            ff1: Linear::new(store, rng, &format!("{name}.ff1"), d, d * ff_mult)?,
            ff2: Linear::new(store, rng, &format!("{name}.ff2"), d * ff_mult, d)?,
        })
    }

    /// Closed-form parameter count of one block.
    pub fn param_count(d: usize, ff_mult: usize) -> usize {
        let f = d * ff_mult;
        4 * (d * d + d) + (d * f + f) + (f * d + d) + 2 * 2 * d
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, causal: bool) -> Result<Var> {
        let h = self.ln1.forward(g, store, x)?;
        let a = self.attn.forward(g, store, h, causal)?;
        let x = g.add(x, a)?;
        let h = self.ln2.forward(g, store, x)?;
        let h = self.ff1.forward(g, store, h)?;
        let h = g.gelu(h);
        let h = self.ff2.forward(g, store, h)?;
        g.add(x, h)
    }

    pub fn linears(&self) -> [&Linear; 6] {
        [
            &self.attn.wq,
            &self.attn.wk,
            &self.attn.wv,
            &self.attn.wo,
            &self.ff1,
            &self.ff2,
        ]
    }

    pub fn linears_mut(&mut self) -> [&mut Linear; 6] {
        [
            &mut self.attn.wq,
            &mut self.attn.wk,
            &mut self.attn.wv,
            &mut self.attn.wo,
            &mut self.ff1,
            &mut self.ff2,
        ]
    }
}
