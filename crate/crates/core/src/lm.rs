//! Decoder-only causal language model over mixed speech/text sequences.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::nn::{gaussian, Block, LayerNorm, Linear};
use crate::tensor::Scalar;
use crate::vocab::{TokenId, BOS, EOS};

#[derive(Clone, Debug, PartialEq)]
pub struct LmConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ff_mult: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.n_layers == 0 || self.ff_mult == 0 {
            return Err(Error::config("lm dimensions must be positive"));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::config(format!(
                "lm d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size == 0 || self.max_seq_len == 0 {
            return Err(Error::config("lm vocab_size and max_seq_len must be positive"));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        self.vocab_size * d + self.max_seq_len * d + self.n_layers * Block::param_count(d, self.ff_mult) + 2 * d
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Segment {
    Text(Vec<TokenId>),
    /// Placeholder for `rows` spliced audio embeddings.
    Audio(usize),
}

/// A prompt with exactly one audio span, plus the loss mask over its
/// flattened positions. `target_ids[k]` is the token predicted at the `k`-th
/// masked position.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptSequence {
    pub segments: Vec<Segment>,
    pub loss_mask: Vec<bool>,
    pub target_ids: Vec<TokenId>,
}

impl PromptSequence {
    /// Inference layout: `before · audio · after`. `after` should end in BOS.
    pub fn for_inference(before: Vec<TokenId>, audio_rows: usize, after: Vec<TokenId>) -> Self {
        let len = before.len() + audio_rows + after.len();
        PromptSequence {
            segments: vec![Segment::Text(before), Segment::Audio(audio_rows), Segment::Text(after)],
            loss_mask: vec![false; len],
            target_ids: Vec::new(),
        }
    }

    /// Training layout: `before · audio · after · BOS · target`, with the loss
    /// on the positions that predict `target` followed by EOS.
    pub fn for_training(before: Vec<TokenId>, audio_rows: usize, mut after: Vec<TokenId>, target: &[TokenId]) -> Self {
        after.push(BOS);
        let first_masked = before.len() + audio_rows + after.len() - 1;
        after.extend_from_slice(target);
        let len = before.len() + audio_rows + after.len();
        let mut loss_mask = vec![false; len];
        loss_mask[first_masked..].iter_mut().for_each(|m| *m = true);
        let mut target_ids = target.to_vec();
        target_ids.push(EOS);
        PromptSequence {
            segments: vec![Segment::Text(before), Segment::Audio(audio_rows), Segment::Text(after)],
            loss_mask,
            target_ids,
        }
    }

    pub fn len(&self) -> usize {
        self.segments
            .iter()
            .map(|s| match s {
                Segment::Text(t) => t.len(),
                Segment::Audio(n) => *n,
            })
            .sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn audio_rows(&self) -> usize {
        self.segments
            .iter()
            .find_map(|s| match s {
                Segment::Audio(n) => Some(*n),
                _ => None,
            })
            .unwrap_or(0)
    }

    pub fn masked_count(&self) -> usize {
        self.loss_mask.iter().filter(|&&m| m).count()
    }

    /// Per-position targets for the loss (masked-out positions get PAD).
    pub fn dense_targets(&self) -> Vec<usize> {
        let mut it = self.target_ids.iter();
        self.loss_mask
            .iter()
            .map(|&m| if m { *it.next().unwrap() as usize } else { 0 })
            .collect()
    }

    /// Appends a generated token to the trailing text segment.
    pub fn push_token(&mut self, id: TokenId) {
        if let Some(Segment::Text(t)) = self.segments.last_mut() {
            t.push(id);
        } else {
            self.segments.push(Segment::Text(vec![id]));
        }
        self.loss_mask.push(false);
    }

    pub fn validate(&self) -> Result<()> {
        let audio = self.segments.iter().filter(|s| matches!(s, Segment::Audio(_))).count();
        if audio != 1 {
            return Err(Error::shape(format!(
                "prompt must contain exactly one audio segment, found {audio}"
            )));
        }
        if self.loss_mask.len() != self.len() {
            return Err(Error::shape(format!(
                "loss mask covers {} positions, sequence has {}",
                self.loss_mask.len(),
                self.len()
            )));
        }
        if self.masked_count() != self.target_ids.len() {
            return Err(Error::shape(format!(
                "{} masked positions but {} targets",
                self.masked_count(),
                self.target_ids.len()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct DecoderLm {
    pub cfg: LmConfig,
    pub tok_emb: ParamId,
    pub pos_emb: ParamId,
    pub blocks: Vec<Block>,
    pub ln_f: LayerNorm,
}

impl DecoderLm {
    pub fn build<T: Scalar>(cfg: &LmConfig, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let tok_emb = store.add("lm.tok_emb", gaussian(rng, &[cfg.vocab_size, d], 0.02))?;
        let pos_emb = store.add("lm.pos_emb", gaussian(rng, &[cfg.max_seq_len, d], 0.02))?;
        let blocks = (0..cfg.n_layers)
            .map(|i| Block::new(store, rng, &format!("lm.block{i}"), d, cfg.n_heads, cfg.ff_mult))
            .collect::<Result<_>>()?;
        let ln_f = LayerNorm::new(store, "lm.ln_f", d)?;
        Ok(DecoderLm {
            cfg: cfg.clone(),
            tok_emb,
            pos_emb,
            blocks,
            ln_f,
        })
    }

    /// Input embeddings of the flattened prompt, audio rows spliced in place.
    pub fn embed<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        prompt: &PromptSequence,
        audio: Var,
    ) -> Result<Var> {
        prompt.validate()?;
        let len = prompt.len();
        if len > self.cfg.max_seq_len {
            return Err(Error::Length {
                what: "prompt sequence",
                len,
                limit: self.cfg.max_seq_len,
            });
        }
        let audio_shape = g.shape(audio).to_vec();
        if audio_shape != [prompt.audio_rows(), self.cfg.d_model] {
            return Err(Error::shape(format!(
                "audio embeddings {audio_shape:?} do not fit a {}-row slot of width {}",
                prompt.audio_rows(),
                self.cfg.d_model
            )));
        }
        let table = g.param(store, self.tok_emb);
        let mut parts = Vec::with_capacity(prompt.segments.len());
        for seg in &prompt.segments {
            match seg {
                Segment::Text(ids) if ids.is_empty() => {}
                Segment::Text(ids) => {
                    let ids: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
                    parts.push(g.embedding(table, &ids)?);
                }
                Segment::Audio(_) => parts.push(audio),
            }
        }
        let x = if parts.len() == 1 {
            parts[0]
        } else {
            g.concat_rows(&parts)?
        };
        let pos_table = g.param(store, self.pos_emb);
        let pos = g.slice_rows(pos_table, 0, len)?;
        g.add(x, pos)
    }

    /// Logits `[L × vocab]` at every position of an embedded sequence.
    pub fn forward_embedded<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let mut x = x;
        for b in &self.blocks {
            x = b.forward(g, store, x, true)?;
        }
        let h = self.ln_f.forward(g, store, x)?;
        let table = g.param(store, self.tok_emb);
        g.matmul_t(h, table)
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        prompt: &PromptSequence,
        audio: Var,
    ) -> Result<Var> {
        let x = self.embed(g, store, prompt, audio)?;
        self.forward_embedded(g, store, x)
    }

    pub fn linears(&self) -> Vec<&Linear> {
        self.blocks.iter().flat_map(|b| b.linears()).collect()
    }

    pub fn linears_mut(&mut self) -> Vec<&mut Linear> {
        self.blocks.iter_mut().flat_map(|b| b.linears_mut()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::{AUDIO_CLOSE, AUDIO_OPEN};

    #[test]
    fn training_layout_masks_target_and_eos() {
        let p = PromptSequence::for_training(vec![AUDIO_OPEN], 4, vec![AUDIO_CLOSE, 300], &[400, 401]);
        // open, 4 audio, close, 300, BOS, 400, 401
        assert_eq!(p.len(), 10);
        assert_eq!(p.masked_count(), 3);
        assert_eq!(p.target_ids, vec![400, 401, EOS]);
        let dense = p.dense_targets();
        assert_eq!(&dense[7..], &[400, 401, EOS as usize]);
        assert!(p.validate().is_ok());
    }

    #[test]
    fn inference_layout_has_no_mask() {
        let p = PromptSequence::for_inference(vec![AUDIO_OPEN], 5, vec![AUDIO_CLOSE, BOS]);
        assert_eq!(p.len(), 8);
        assert_eq!(p.masked_count(), 0);
    }
}
