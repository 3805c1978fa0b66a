//! The composed speech translator: frontend → encoder → adaptor → LM.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adaptor::{Adaptor, AdaptorConfig};
use crate::audio::{log_mel_spectrogram, resample, AudioWaveform, FrontendConfig, SPEECH_RATE};
use crate::autodiff::{Graph, ParamStore, Var};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::lm::{DecoderLm, LmConfig, PromptSequence};
use crate::lora::{self, LoraAdapter, LoraConfig, LoraScope};
use crate::nn::Linear;
use crate::tensor::{Scalar, Tensor};
use crate::vocab::Vocabulary;

/// Stable 64-bit seed for a named module, derived from the root seed with
/// FNV-1a. Independent of platform and build.
pub fn module_seed(root: u64, name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in root.to_le_bytes().iter().chain(name.as_bytes()) {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn module_rng(root: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(module_seed(root, name))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub frontend: FrontendConfig,
    pub encoder: EncoderConfig,
    pub adaptor_hidden: usize,
    /// `vocab_size` is overwritten by the vocabulary at build time.
    pub lm: LmConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            frontend: FrontendConfig::default(),
            encoder: EncoderConfig::default(),
            adaptor_hidden: 128,
            lm: LmConfig {
                d_model: 64,
                n_layers: 2,
                n_heads: 4,
                ff_mult: 4,
                vocab_size: 0,
                max_seq_len: 256,
            },
        }
    }
}

impl ModelConfig {
    pub fn adaptor(&self) -> AdaptorConfig {
        AdaptorConfig {
            in_dim: self.encoder.d_model,
            hidden_dim: self.adaptor_hidden,
            out_dim: self.lm.d_model,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoder.n_mels != self.frontend.n_mels {
            return Err(Error::config(format!(
                "encoder n_mels {} differs from frontend n_mels {}",
                self.encoder.n_mels, self.frontend.n_mels
            )));
        }
        self.encoder.validate()?;
        self.adaptor().validate()?;
        self.lm.validate()
    }

    /// [`validate`](Self::validate) before the vocabulary is known.
    pub fn validate_dims(&self) -> Result<()> {
        let mut c = self.clone();
        c.lm.vocab_size = c.lm.vocab_size.max(1);
        c.validate()
    }
}

#[derive(Clone, Debug)]
pub struct SpeechTranslator<T: Scalar = f32> {
    pub cfg: ModelConfig,
    pub vocab: Vocabulary,
    pub store: ParamStore<T>,
    pub encoder: Encoder,
    pub adaptor: Adaptor,
    pub lm: DecoderLm,
}

impl<T: Scalar> SpeechTranslator<T> {
    /// Deterministic in `(cfg, vocab, seed)`.
    pub fn build(cfg: &ModelConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        let mut cfg = cfg.clone();
        cfg.lm.vocab_size = vocab.len();
        cfg.validate()?;
        let mut store = ParamStore::new();
        let encoder = Encoder::build(&cfg.encoder, &mut store, &mut module_rng(seed, "encoder"))?;
        let adaptor = Adaptor::build(&cfg.adaptor(), &mut store, &mut module_rng(seed, "adaptor"))?;
        let lm = DecoderLm::build(&cfg.lm, &mut store, &mut module_rng(seed, "lm"))?;
        Ok(SpeechTranslator {
            cfg,
            vocab,
            store,
            encoder,
            adaptor,
            lm,
        })
    }

    /// Same model at another precision.
    pub fn cast<U: Scalar>(&self) -> SpeechTranslator<U> {
        SpeechTranslator {
            cfg: self.cfg.clone(),
            vocab: self.vocab.clone(),
            store: self.store.cast(),
            encoder: self.encoder.clone(),
            adaptor: self.adaptor.clone(),
            lm: self.lm.clone(),
        }
    }

    /// Encoder input for a waveform at 16 kHz or an accepted ingest rate.
    pub fn features(&self, w: &AudioWaveform) -> Result<Tensor<f32>> {
        let w = if w.sample_rate == SPEECH_RATE {
            w.clone()
        } else {
            resample(w, SPEECH_RATE)?
        };
        let f = log_mel_spectrogram(&w, &self.cfg.frontend)?;
        Ok(if self.cfg.frontend.normalize {
            f.normalized()
        } else {
            f.frames
        })
    }

    /// Rows the audio span occupies for `frames` input frames.
    pub fn audio_rows(&self, frames: usize) -> usize {
        self.cfg.encoder.output_len(frames)
    }

    /// `H_s = F_ada(F_se(X_s))` recorded on `g`.
    pub fn speech_embeddings(&self, g: &mut Graph<T>, features: &Tensor<T>) -> Result<Var> {
        self.speech_embeddings_with(&self.store, g, features)
    }

    fn speech_embeddings_with(&self, store: &ParamStore<T>, g: &mut Graph<T>, features: &Tensor<T>) -> Result<Var> {
        let x = g.constant(features.clone());
        let z = self.encoder.forward(g, store, x)?;
        self.adaptor.forward(g, store, z)
    }

    /// Logits over every position of `prompt` with audio from `features`.
    pub fn logits(&self, g: &mut Graph<T>, prompt: &PromptSequence, features: &Tensor<T>) -> Result<Var> {
        self.logits_with(&self.store, g, prompt, features)
    }

    /// [`logits`](Self::logits) with parameter values taken from `store`,
    /// which must share this model's layout.
    pub fn logits_with(
        &self,
        store: &ParamStore<T>,
        g: &mut Graph<T>,
        prompt: &PromptSequence,
        features: &Tensor<T>,
    ) -> Result<Var> {
        let h = self.speech_embeddings_with(store, g, features)?;
        self.lm.forward(g, store, prompt, h)
    }

    /// Masked NLL of one training sequence, summed and divided by `denom`.
    pub fn sequence_loss(
        &self,
        g: &mut Graph<T>,
        prompt: &PromptSequence,
        features: &Tensor<T>,
        denom: f64,
    ) -> Result<Var> {
        let logits = self.logits(g, prompt, features)?;
        g.masked_nll(logits, &prompt.dense_targets(), &prompt.loss_mask, denom)
    }

    pub fn linears(&self) -> Vec<&Linear> {
        let mut out = self.encoder.linears();
        out.extend(self.adaptor.layers.iter());
        out.extend(self.lm.linears());
        out
    }

    pub fn linears_mut(&mut self) -> Vec<&mut Linear> {
        let mut out = self.encoder.linears_mut();
        out.extend(self.adaptor.layers.iter_mut());
        out.extend(self.lm.linears_mut());
        out
    }

    /// `(host name, adapter)` for every attached adapter.
    pub fn adapters(&self) -> Vec<(&str, &LoraAdapter)> {
        self.linears()
            .into_iter()
            .filter_map(|l| l.lora.as_ref().map(|a| (l.name.as_str(), a)))
            .collect()
    }

    pub fn inject_lora(&mut self, cfg: &LoraConfig, seed: u64) -> Result<usize> {
        let mut rng = module_rng(seed, &format!("lora.{}", cfg.scope));
        let SpeechTranslator { store, encoder, lm, .. } = self;
        let linears = match cfg.scope {
            LoraScope::Speech => encoder.linears_mut(),
            LoraScope::Language => lm.linears_mut(),
        };
        lora::inject(linears, store, cfg, &mut rng)
    }

    /// Freezes everything but the adaptor and LoRA factors.
    pub fn freeze_base(&mut self) {
        let keep: Vec<bool> = self
            .store
            .iter()
            .map(|(_, p)| p.name.starts_with("adaptor.") || p.name.ends_with(".lora_a") || p.name.ends_with(".lora_b"))
            .collect();
        let ids: Vec<_> = self.store.iter().map(|(id, _)| id).collect();
        for (id, k) in ids.into_iter().zip(keep) {
            self.store.set_trainable(id, k);
        }
    }

    /// Merges every unmerged adapter; returns how many were merged.
    pub fn merge_lora(&mut self) -> Result<usize> {
        let SpeechTranslator { store, encoder, lm, .. } = self;
        let mut n = 0;
        for l in encoder.linears_mut().into_iter().chain(lm.linears_mut()) {
            if l.lora.as_ref().is_some_and(|a| !a.merged) {
                lora::merge(l, store)?;
                n += 1;
            }
        }
        Ok(n)
    }

    pub fn unmerge_lora(&mut self) -> Result<usize> {
        let SpeechTranslator { store, encoder, lm, .. } = self;
        let mut n = 0;
        for l in encoder.linears_mut().into_iter().chain(lm.linears_mut()) {
            if l.lora.as_ref().is_some_and(|a| a.merged) {
                lora::unmerge(l, store)?;
                n += 1;
            }
        }
        Ok(n)
    }

    /// Merges all adapters and drops their factors, leaving a plain model.
    pub fn strip_lora(&self) -> Result<SpeechTranslator<T>> {
        let mut merged = self.clone();
        merged.merge_lora()?;
        let mut out = SpeechTranslator::build(&self.cfg, self.vocab.clone(), 0)?;
        for (_, p) in out.store.iter_mut() {
            let src = merged
                .store
                .by_name(&p.name)
                .ok_or_else(|| Error::State(format!("missing parameter {}", p.name)))?;
            p.value = src.value.clone();
            p.trainable = src.trainable;
        }
        Ok(out)
    }
}
