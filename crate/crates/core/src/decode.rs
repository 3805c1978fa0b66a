//! Beam-search generation.
//!
//! Every live hypothesis is expanded by every token; the `beam_size` best
//! expansions by cumulative log-probability survive. Expansions ending in
//! EOS retire to a finished pool. Ties are broken by the lexicographically
//! smaller token sequence, which makes the search fully deterministic.

use std::cmp::Ordering;

use crate::audio::AudioWaveform;
use crate::autodiff::Graph;
use crate::data::{build_prompt, encode_prompt, BuiltPrompt, LangRegistry, PromptMode, SampleRecord, Task};
use crate::error::{Error, Result};
use crate::lm::PromptSequence;
use crate::model::SpeechTranslator;
use crate::tensor::Tensor;
use crate::vocab::{TokenId, EOS};

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeConfig {
    pub beam_size: usize,
    pub max_new_tokens: usize,
    /// Final scores are `log_prob / len^alpha`.
    pub length_norm_alpha: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            beam_size: 5,
            max_new_tokens: 32,
            length_norm_alpha: 0.0,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_size == 0 || self.max_new_tokens == 0 {
            return Err(Error::config("beam_size and max_new_tokens must be at least 1"));
        }
        if !self.length_norm_alpha.is_finite() || self.length_norm_alpha < 0.0 {
            return Err(Error::config("length_norm_alpha must be a non-negative number"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Generated tokens; a finished hypothesis ends in EOS.
    pub tokens: Vec<TokenId>,
    pub log_prob: f64,
    pub finished: bool,
}

impl Hypothesis {
    pub fn score(&self, alpha: f64) -> f64 {
        if alpha == 0.0 || self.tokens.is_empty() {
            self.log_prob
        } else {
            self.log_prob / (self.tokens.len() as f64).powf(alpha)
        }
    }

    /// Tokens without the trailing EOS.
    pub fn content(&self) -> &[TokenId] {
        match self.tokens.split_last() {
            Some((&EOS, rest)) if self.finished => rest,
            _ => &self.tokens,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BeamResult {
    /// Best first, at most `beam_size` entries.
    pub hypotheses: Vec<Hypothesis>,
    /// No hypothesis emitted EOS within `max_new_tokens`.
    pub truncated: bool,
}

impl BeamResult {
    pub fn best(&self) -> &Hypothesis {
        &self.hypotheses[0]
    }
}

/// Source of next-token log-probabilities for a generated prefix.
pub trait NextTokenScorer {
    fn vocab_size(&self) -> usize;

    fn eos(&self) -> TokenId {
        EOS
    }

    /// Log-probabilities over the vocabulary after `prefix`.
    fn log_probs(&mut self, prefix: &[TokenId]) -> Result<Vec<f64>>;
}

/// Descending by score, then ascending by tokens.
fn rank(a: (f64, &[TokenId]), b: (f64, &[TokenId])) -> Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1))
}

fn sort_final(hyps: &mut [Hypothesis], alpha: f64) {
    hyps.sort_by(|a, b| rank((a.score(alpha), &a.tokens), (b.score(alpha), &b.tokens)));
}

pub fn beam_search(scorer: &mut dyn NextTokenScorer, cfg: &DecodeConfig) -> Result<BeamResult> {
    cfg.validate()?;
    let eos = scorer.eos();
    let v = scorer.vocab_size();
    let mut live = vec![Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        finished: false,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for _ in 0..cfg.max_new_tokens {
        let mut cand: Vec<(f64, usize, TokenId)> = Vec::with_capacity(live.len() * v);
        for (bi, h) in live.iter().enumerate() {
            let lp = scorer.log_probs(&h.tokens)?;
            if lp.len() != v {
                return Err(Error::shape(format!(
                    "scorer returned {} log-probs for a vocabulary of {v}",
                    lp.len()
                )));
            }
            cand.extend(
                lp.iter()
                    .enumerate()
                    .filter(|(_, l)| **l > f64::NEG_INFINITY)
                    .map(|(t, &l)| (h.log_prob + l, bi, t as TokenId)),
            );
        }
        let key = |c: &(f64, usize, TokenId)| {
            let mut t = live[c.1].tokens.clone();
            t.push(c.2);
            t
        };
        cand.sort_by(|a, b| {
            b.0.total_cmp(&a.0).then_with(|| {
                let (ta, tb) = (&live[a.1].tokens, &live[b.1].tokens);
                ta.cmp(tb).then(a.2.cmp(&b.2))
            })
        });
        if cand.is_empty() {
            break;
        }
        cand.truncate(cfg.beam_size);
        let mut next = Vec::with_capacity(cfg.beam_size);
        for c in &cand {
            let h = Hypothesis {
                tokens: key(c),
                log_prob: c.0,
                finished: c.2 == eos,
            };
            if h.finished {
                finished.push(h);
            } else {
                next.push(h);
            }
        }
        live = next;
        if live.is_empty() {
            break;
        }
        // Without length normalization scores only fall, so once the pool
        // holds beam_size entries at least as good as every live beam the
        // ranking can no longer change.
        if cfg.length_norm_alpha == 0.0 && finished.len() >= cfg.beam_size {
            sort_final(&mut finished, 0.0);
            let worst_kept = finished[cfg.beam_size - 1].log_prob;
            if live.iter().all(|h| h.log_prob < worst_kept) {
                break;
            }
        }
    }
    let truncated = finished.is_empty();
    let mut pool = if truncated { live } else { finished };
    sort_final(&mut pool, cfg.length_norm_alpha);
    pool.truncate(cfg.beam_size);
    Ok(BeamResult {
        hypotheses: pool,
        truncated,
    })
}

/// Repeatedly takes the most likely token (lowest id on ties) until EOS or
/// the token budget runs out.
pub fn greedy(scorer: &mut dyn NextTokenScorer, max_new_tokens: usize) -> Result<Hypothesis> {
    let eos = scorer.eos();
    let mut h = Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        finished: false,
    };
    for _ in 0..max_new_tokens {
        let lp = scorer.log_probs(&h.tokens)?;
        let (t, l) = lp.iter().enumerate().fold(
            (0, f64::NEG_INFINITY),
            |best, (t, &l)| if l > best.1 { (t, l) } else { best },
        );
        h.tokens.push(t as TokenId);
        h.log_prob += l;
        if t as TokenId == eos {
            h.finished = true;
            break;
        }
    }
    Ok(h)
}

/// Scores continuations of an inference prompt with a trained model. The
/// speech embeddings are computed once.
pub struct ModelScorer<'a> {
    model: &'a SpeechTranslator<f32>,
    prompt: PromptSequence,
    speech: Tensor<f32>,
}

impl<'a> ModelScorer<'a> {
    pub fn new(
        model: &'a SpeechTranslator<f32>,
        prompt: PromptSequence,
        features: &Tensor<f32>,
        max_new_tokens: usize,
    ) -> Result<Self> {
        let limit = model.cfg.lm.max_seq_len;
        if prompt.len() + max_new_tokens > limit {
            return Err(Error::Length {
                what: "prompt plus generation budget",
                len: prompt.len() + max_new_tokens,
                limit,
            });
        }
        let mut g = Graph::new();
        let h = model.speech_embeddings(&mut g, features)?;
        Ok(ModelScorer {
            model,
            prompt,
            speech: g.value(h).clone(),
        })
    }
}

impl NextTokenScorer for ModelScorer<'_> {
    fn vocab_size(&self) -> usize {
        self.model.vocab.len()
    }

    fn log_probs(&mut self, prefix: &[TokenId]) -> Result<Vec<f64>> {
        let mut p = self.prompt.clone();
        for &t in prefix {
            p.push_token(t);
        }
        let mut g = Graph::new();
        let h = g.constant(self.speech.clone());
        let logits = self.model.lm.forward(&mut g, &self.model.store, &p, h)?;
        let lv = g.value(logits);
        let row: Vec<f64> = lv.row(lv.rows() - 1).iter().map(|&x| x as f64).collect();
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        Ok(row.into_iter().map(|x| x - lse).collect())
    }
}

/// Decodes one utterance's features under a prepared inference prompt.
pub fn decode_features(
    model: &SpeechTranslator<f32>,
    features: &Tensor<f32>,
    prompt: &BuiltPrompt,
    cfg: &DecodeConfig,
) -> Result<BeamResult> {
    let seq = encode_prompt(
        &model.vocab,
        prompt,
        model.audio_rows(features.rows()),
        PromptMode::Infer,
    )?;
    let mut scorer = ModelScorer::new(model, seq, features, cfg.max_new_tokens)?;
    beam_search(&mut scorer, cfg)
}

/// Full pipeline: waveform → features → prompt → beam search → text.
pub fn translate(
    model: &SpeechTranslator<f32>,
    audio: &AudioWaveform,
    src_lang: &str,
    tgt_lang: &str,
    langs: &LangRegistry,
    cfg: &DecodeConfig,
) -> Result<String> {
    let record = SampleRecord {
        id: String::new(),
        audio: Default::default(),
        src_lang: src_lang.to_string(),
        tgt_lang: tgt_lang.to_string(),
        src_text: String::new(),
        tgt_text: String::new(),
        task: Task::St,
    };
    let prompt = build_prompt(langs, &record, PromptMode::Infer, false)?;
    let features = model.features(audio)?;
    let result = decode_features(model, &features, &prompt, cfg)?;
    Ok(model.vocab.detokenize(result.best().content()))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Next-token distribution depends only on the prefix length.
    struct Table(Vec<Vec<f64>>);

    impl NextTokenScorer for Table {
        fn vocab_size(&self) -> usize {
            self.0[0].len()
        }

        fn log_probs(&mut self, prefix: &[TokenId]) -> Result<Vec<f64>> {
            Ok(self.0[prefix.len().min(self.0.len() - 1)]
                .iter()
                .map(|p| p.ln())
                .collect())
        }
    }

    #[test]
    fn ties_prefer_lower_ids() {
        let mut t = Table(vec![vec![0.4, 0.1, 0.1, 0.4], vec![0.0, 0.0, 1.0, 0.0]]);
        let cfg = DecodeConfig {
            beam_size: 2,
            max_new_tokens: 3,
            length_norm_alpha: 0.0,
        };
        let r = beam_search(&mut t, &cfg).unwrap();
        assert_eq!(r.hypotheses[0].tokens, vec![0, EOS]);
        assert_eq!(r.hypotheses[1].tokens, vec![3, EOS]);
        assert_eq!(greedy(&mut t, 3).unwrap().tokens, vec![0, EOS]);
    }

    #[test]
    fn never_finishing_is_truncated() {
        let mut t = Table(vec![vec![0.5, 0.5, 0.0, 0.0]]);
        let r = beam_search(&mut t, &DecodeConfig::default()).unwrap();
        assert!(r.truncated);
        assert_eq!(r.best().tokens.len(), DecodeConfig::default().max_new_tokens);
        assert!(!r.best().finished);
    }
}
