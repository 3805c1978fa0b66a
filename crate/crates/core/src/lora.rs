//! Low-rank adaptation of frozen linear maps.
//!
//! An adapter attached to `y = x·Wᵀ + b` adds `scaling · (x·Aᵀ)·Bᵀ` with
//! `A: [r × d_in]`, `B: [d_out × r]` and `scaling = alpha / r`. `B` starts at
//! zero, so a freshly injected model computes exactly what its base did.
//! Merging folds `scaling · B·A` into `W`; unmerging subtracts it again.
//!
//! Two scopes exist: speech LoRA on the encoder and language LoRA on the LM.
//! Using both at once with frozen bases is the dual-LoRA setup.

use std::fmt;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;
use regex::Regex;

use crate::autodiff::{ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::nn::{gaussian, Linear};
use crate::tensor::Scalar;

/// Standard deviation of the Gaussian initialization of `A`.
pub const LORA_A_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LoraScope {
    /// Speech encoder adapters (S-LoRA).
    Speech,
    /// Language model adapters (L-LoRA).
    Language,
}

impl LoraScope {
    pub fn prefix(self) -> &'static str {
        match self {
            LoraScope::Speech => "encoder.",
            LoraScope::Language => "lm.",
        }
    }
}

impl fmt::Display for LoraScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LoraScope::Speech => "speech",
            LoraScope::Language => "language",
        })
    }
}

impl FromStr for LoraScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "speech" => Ok(LoraScope::Speech),
            "language" => Ok(LoraScope::Language),
            _ => Err(Error::config(format!("unknown LoRA scope {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    /// Parameter-name patterns; `*` matches any run of characters.
    pub targets: Vec<String>,
    pub scope: LoraScope,
}

impl LoraConfig {
    /// Desk-scale speech adapter: rank 8 on encoder query/value maps.
    pub fn speech() -> Self {
        LoraConfig {
            rank: 8,
            alpha: 8.0,
            targets: vec!["encoder.*.attn.wq".into(), "encoder.*.attn.wv".into()],
            scope: LoraScope::Speech,
        }
    }

    /// Desk-scale language adapter: rank 16 on LM query/value maps.
    pub fn language() -> Self {
        LoraConfig {
            rank: 16,
            alpha: 16.0,
            targets: vec!["lm.*.attn.wq".into(), "lm.*.attn.wv".into()],
            scope: LoraScope::Language,
        }
    }

    pub fn with_rank(mut self, rank: usize) -> Self {
        self.rank = rank;
        self.alpha = rank as f64;
        self
    }

    fn patterns(&self) -> Result<Vec<Regex>> {
        self.targets
            .iter()
            .map(|p| {
                let re = format!("^{}$", regex::escape(p).replace(r"\*", ".*"));
                Regex::new(&re).map_err(|e| Error::config(format!("bad LoRA target {p:?}: {e}")))
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    pub a: ParamId,
    pub b: ParamId,
    pub rank: usize,
    pub alpha: f64,
    pub merged: bool,
    pub scope: LoraScope,
}

impl LoraAdapter {
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

/// Attaches an adapter to every linear map whose name matches one of the
/// configured patterns. Returns the number of adapters attached.
pub fn inject<T: Scalar>(
    linears: Vec<&mut Linear>,
    store: &mut ParamStore<T>,
    cfg: &LoraConfig,
    rng: &mut ChaCha8Rng,
) -> Result<usize> {
    if cfg.rank == 0 {
        return Err(Error::config("LoRA rank must be at least 1"));
    }
    if !(cfg.alpha.is_finite() && cfg.alpha > 0.0) {
        return Err(Error::config("LoRA alpha must be positive"));
    }
    let patterns = cfg.patterns()?;
    let mut matched: Vec<&mut Linear> = linears
        .into_iter()
        .filter(|l| patterns.iter().any(|p| p.is_match(&l.name)))
        .collect();
    if matched.is_empty() {
        return Err(Error::config(format!(
            "LoRA targets {:?} match no linear map",
            cfg.targets
        )));
    }
    for l in &matched {
        if !l.name.starts_with(cfg.scope.prefix()) {
            return Err(Error::config(format!(
                "{} lies outside the {} LoRA scope",
                l.name, cfg.scope
            )));
        }
        if l.lora.is_some() {
            return Err(Error::config(format!("{} already carries an adapter", l.name)));
        }
        if cfg.rank > l.d_in.min(l.d_out) {
            return Err(Error::config(format!(
                "LoRA rank {} exceeds min(d_in, d_out) = {} of {}",
                cfg.rank,
                l.d_in.min(l.d_out),
                l.name
            )));
        }
    }
    let count = matched.len();
    for l in matched.iter_mut() {
        let a = store.add(
            format!("{}.lora_a", l.name),
            gaussian(rng, &[cfg.rank, l.d_in], LORA_A_STD),
        )?;
        let b = store.add(
            format!("{}.lora_b", l.name),
            crate::tensor::Tensor::zeros(&[l.d_out, cfg.rank]),
        )?;
        l.lora = Some(LoraAdapter {
            a,
            b,
            rank: cfg.rank,
            alpha: cfg.alpha,
            merged: false,
            scope: cfg.scope,
        });
    }
    Ok(count)
}

/// `scaling · B·A`, shaped like the host weight.
fn delta<T: Scalar>(ad: &LoraAdapter, store: &ParamStore<T>) -> Result<crate::tensor::Tensor<T>> {
    let s = T::of(ad.scaling());
    Ok(store.value(ad.b).matmul(store.value(ad.a))?.map(|v| v * s))
}

/// `W ← W + scaling·B·A`; the forward pass then skips the adapter branch.
pub fn merge<T: Scalar>(l: &mut Linear, store: &mut ParamStore<T>) -> Result<()> {
    let ad = l
        .lora
        .as_mut()
        .ok_or_else(|| Error::State(format!("{} has no adapter", l.name)))?;
    if ad.merged {
        return Err(Error::State(format!("{} is already merged", l.name)));
    }
    let d = delta(ad, store)?;
    for (w, dv) in store.get_mut(l.weight).value.data_mut().iter_mut().zip(d.data()) {
        *w += *dv;
    }
    ad.merged = true;
    Ok(())
}

/// Inverse of [`merge`].
pub fn unmerge<T: Scalar>(l: &mut Linear, store: &mut ParamStore<T>) -> Result<()> {
    let ad = l
        .lora
        .as_mut()
        .ok_or_else(|| Error::State(format!("{} has no adapter", l.name)))?;
    if !ad.merged {
        return Err(Error::State(format!("{} is not merged", l.name)));
    }
    let d = delta(ad, store)?;
    for (w, dv) in store.get_mut(l.weight).value.data_mut().iter_mut().zip(d.data()) {
        *w -= *dv;
    }
    ad.merged = false;
    Ok(())
}

/// Adapter parameter count `r · (d_in + d_out)` for one map.
pub fn adapter_param_count(rank: usize, d_in: usize, d_out: usize) -> usize {
    rank * (d_in + d_out)
}
