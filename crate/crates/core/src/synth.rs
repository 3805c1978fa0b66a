//! Synthetic multilingual corpus with tone-coded speech.
//!
//! Sentences come from a tiny shared grammar
//! `det noun [adj] verb det noun [adj] .` rendered in each language from a
//! ten-word lexicon, so translation is a deterministic word-level mapping
//! plus adjective placement. Audio renders each source word (and the final
//! period) as a 100 ms sine at the center frequency of one mel band.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::audio::{mel_center_hz, write_raw, AudioWaveform, FrontendConfig, SPEECH_RATE};
use crate::data::{write_manifest, LangRegistry, SampleRecord, Task};
use crate::error::{Error, Result};
use crate::model::module_rng;

/// Samples per token segment (100 ms at 16 kHz).
pub const SEGMENT_SAMPLES: usize = 1600;
/// Lowest and highest mel band used for tones.
pub const TONE_BANDS: (usize, usize) = (4, 79);
const TONE_AMPLITUDE: f64 = 0.5;
const NOISE_STD: f64 = 1e-3;

struct Lexicon {
    code: &'static str,
    det: &'static str,
    nouns: [&'static str; 5],
    verbs: [&'static str; 2],
    adjs: [&'static str; 2],
    adj_after_noun: bool,
}

const LEXICONS: [Lexicon; 7] = [
    Lexicon {
        code: "fr",
        det: "le",
        nouns: ["chat", "chien", "oiseau", "poisson", "cheval"],
        verbs: ["voit", "mange"],
        adjs: ["grand", "petit"],
        adj_after_noun: true,
    },
    Lexicon {
        code: "en",
        det: "the",
        nouns: ["cat", "dog", "bird", "fish", "horse"],
        verbs: ["sees", "eats"],
        adjs: ["big", "small"],
        adj_after_noun: false,
    },
    Lexicon {
        code: "de",
        det: "der",
        nouns: ["katze", "hund", "vogel", "fisch", "pferd"],
        verbs: ["sieht", "frisst"],
        adjs: ["gross", "klein"],
        adj_after_noun: false,
    },
    Lexicon {
        code: "es",
        det: "el",
        nouns: ["gato", "perro", "pajaro", "pez", "caballo"],
        verbs: ["ve", "come"],
        adjs: ["alto", "bajo"],
        adj_after_noun: true,
    },
    Lexicon {
        code: "it",
        det: "il",
        nouns: ["gatto", "cane", "uccello", "pesce", "cavallo"],
        verbs: ["vede", "mangia"],
        adjs: ["grande", "piccolo"],
        adj_after_noun: true,
    },
    Lexicon {
        code: "zh",
        det: "zhe",
        nouns: ["mao", "gou", "niao", "yu", "ma"],
        verbs: ["kan", "chi"],
        adjs: ["da", "xiao"],
        adj_after_noun: false,
    },
    Lexicon {
        code: "ja",
        det: "sono",
        nouns: ["neko", "inu", "tori", "sakana", "uma"],
        verbs: ["miru", "taberu"],
        adjs: ["ookii", "chiisai"],
        adj_after_noun: false,
    },
];

fn lexicon(code: &str) -> Result<&'static Lexicon> {
    LEXICONS
        .iter()
        .find(|l| l.code == code)
        .ok_or_else(|| Error::Registry(format!("no synthetic lexicon for language {code:?}")))
}

/// Language-neutral sentence: subject, verb, object, optional adjectives.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Meaning {
    pub subj: usize,
    pub subj_adj: Option<usize>,
    pub verb: usize,
    pub obj: usize,
    pub obj_adj: Option<usize>,
}

impl Meaning {
    pub fn sample(rng: &mut impl Rng) -> Self {
        let adj = |rng: &mut dyn rand::RngCore| match rng.gen_range(0..3) {
            0 => None,
            k => Some(k - 1),
        };
        Meaning {
            subj: rng.gen_range(0..5),
            subj_adj: adj(rng),
            verb: rng.gen_range(0..2),
            obj: rng.gen_range(0..5),
            obj_adj: adj(rng),
        }
    }

    /// Words of the sentence in `lang`, the period included.
    pub fn words(&self, lang: &str) -> Result<Vec<&'static str>> {
        let lx = lexicon(lang)?;
        let mut out = Vec::new();
        let np = |noun: usize, adj: Option<usize>, out: &mut Vec<&'static str>| {
            out.push(lx.det);
            match (adj, lx.adj_after_noun) {
                (Some(a), true) => out.extend([lx.nouns[noun], lx.adjs[a]]),
                (Some(a), false) => out.extend([lx.adjs[a], lx.nouns[noun]]),
                (None, _) => out.push(lx.nouns[noun]),
            }
        };
        np(self.subj, self.subj_adj, &mut out);
        out.push(lx.verbs[self.verb]);
        np(self.obj, self.obj_adj, &mut out);
        out.push(".");
        Ok(out)
    }

    pub fn render(&self, lang: &str) -> Result<String> {
        let w = self.words(lang)?;
        Ok(format!("{}.", w[..w.len() - 1].join(" ")))
    }
}

/// Deterministic word-level translation of a synthetic sentence.
pub fn translate_text(text: &str, src: &str, tgt: &str) -> Result<String> {
    let src_lx = lexicon(src)?;
    let body = text
        .strip_suffix('.')
        .ok_or_else(|| Error::config(format!("not a synthetic sentence: {text:?}")))?;
    let words: Vec<&str> = body.split(' ').collect();
    let bad = || Error::config(format!("not a synthetic {src} sentence: {text:?}"));
    let find = |list: &[&str], w: &str| list.iter().position(|x| *x == w);
    let mut pos = 0;
    let np = |pos: &mut usize| -> Result<(usize, Option<usize>)> {
        if words.get(*pos) != Some(&src_lx.det) {
            return Err(bad());
        }
        *pos += 1;
        let a = words.get(*pos).and_then(|w| find(&src_lx.adjs, w));
        let n = words.get(*pos).and_then(|w| find(&src_lx.nouns, w));
        match (n, a) {
            (Some(n), _) => {
                *pos += 1;
                let adj = if src_lx.adj_after_noun {
                    let a = words.get(*pos).and_then(|w| find(&src_lx.adjs, w));
                    if a.is_some() {
                        *pos += 1;
                    }
                    a
                } else {
                    None
                };
                Ok((n, adj))
            }
            (None, Some(a)) if !src_lx.adj_after_noun => {
                *pos += 1;
                let n = words.get(*pos).and_then(|w| find(&src_lx.nouns, w)).ok_or_else(bad)?;
                *pos += 1;
                Ok((n, Some(a)))
            }
            _ => Err(bad()),
        }
    };
    let (subj, subj_adj) = np(&mut pos)?;
    let verb = words.get(pos).and_then(|w| find(&src_lx.verbs, w)).ok_or_else(bad)?;
    pos += 1;
    let (obj, obj_adj) = np(&mut pos)?;
    if pos != words.len() {
        return Err(bad());
    }
    Meaning {
        subj,
        subj_adj,
        verb,
        obj,
        obj_adj,
    }
    .render(tgt)
}

/// Every word of every lexicon plus the period, sorted and deduplicated.
pub fn all_words() -> Vec<&'static str> {
    let mut w: Vec<&'static str> = LEXICONS
        .iter()
        .flat_map(|l| std::iter::once(l.det).chain(l.nouns).chain(l.verbs).chain(l.adjs))
        .chain(["."])
        .collect();
    w.sort_unstable();
    w.dedup();
    w
}

/// Word → mel band, a seeded injection into [`TONE_BANDS`].
pub fn tone_map(voice_seed: u64) -> BTreeMap<&'static str, usize> {
    let mut bands: Vec<usize> = (TONE_BANDS.0..=TONE_BANDS.1).collect();
    bands.shuffle(&mut module_rng(voice_seed, "synth.voice"));
    let words = all_words();
    assert!(words.len() <= bands.len(), "more words than tone bands");
    words.into_iter().zip(bands).collect()
}

/// Renders a word sequence as consecutive tone segments with faint noise.
pub fn render_tones(words: &[&str], tones: &BTreeMap<&'static str, usize>, noise_seed: u64) -> Result<AudioWaveform> {
    let cfg = FrontendConfig::default();
    let noise = Normal::new(0.0, NOISE_STD).expect("finite std");
    let mut rng = module_rng(noise_seed, "synth.noise");
    let mut samples = Vec::with_capacity(words.len() * SEGMENT_SAMPLES);
    for w in words {
        let band = *tones
            .get(w)
            .ok_or_else(|| Error::config(format!("no tone for word {w:?}")))?;
        let f = mel_center_hz(&cfg, band);
        let step = 2.0 * std::f64::consts::PI * f / SPEECH_RATE as f64;
        samples.extend(
            (0..SEGMENT_SAMPLES).map(|i| (TONE_AMPLITUDE * (step * i as f64).sin() + noise.sample(&mut rng)) as f32),
        );
    }
    AudioWaveform::new(samples, SPEECH_RATE)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_items: usize,
    /// `(src, tgt)` pairs; items are assigned round-robin.
    pub pairs: Vec<(String, String)>,
    /// Seed of the word → tone map; corpora meant to be used together must
    /// share it.
    pub voice_seed: u64,
}

/// Writes `manifest.tsv` and `audio/<id>.raw` under `out` and returns the
/// records.
pub fn synth_corpus(out: &Path, cfg: &SynthConfig, langs: &LangRegistry) -> Result<Vec<SampleRecord>> {
    if cfg.n_items == 0 {
        return Err(Error::config("n_items must be at least 1"));
    }
    if cfg.pairs.is_empty() {
        return Err(Error::config("at least one language pair is required"));
    }
    for (s, t) in &cfg.pairs {
        langs.name(s)?;
        langs.name(t)?;
        lexicon(s)?;
        lexicon(t)?;
    }
    let audio_dir = out.join("audio");
    fs::create_dir_all(&audio_dir).map_err(|e| Error::io(&audio_dir, e))?;
    let tones = tone_map(cfg.voice_seed);
    let mut rng = module_rng(cfg.seed, "synth.text");
    let mut records = Vec::with_capacity(cfg.n_items);
    for i in 0..cfg.n_items {
        let (src, tgt) = &cfg.pairs[i % cfg.pairs.len()];
        let m = Meaning::sample(&mut rng);
        let id = format!("{src}-{tgt}-{i:05}");
        let audio = audio_dir.join(format!("{id}.raw"));
        let wave = render_tones(&m.words(src)?, &tones, cfg.seed.wrapping_add(i as u64))?;
        write_raw(&audio, &wave)?;
        records.push(SampleRecord {
            id,
            audio,
            src_lang: src.clone(),
            tgt_lang: tgt.clone(),
            src_text: m.render(src)?,
            tgt_text: m.render(tgt)?,
            task: Task::St,
        });
    }
    write_manifest(&out.join("manifest.tsv"), &records)?;
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn word_order_follows_language() {
        let m = Meaning {
            subj: 0,
            subj_adj: Some(0),
            verb: 0,
            obj: 1,
            obj_adj: None,
        };
        assert_eq!(m.render("fr").unwrap(), "le chat grand voit le chien.");
        assert_eq!(m.render("en").unwrap(), "the big cat sees the dog.");
    }

    #[test]
    fn translation_matches_rendering() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let m = Meaning::sample(&mut rng);
            for (s, t) in [("fr", "en"), ("de", "en"), ("en", "es"), ("it", "ja")] {
                let src = m.render(s).unwrap();
                assert_eq!(translate_text(&src, s, t).unwrap(), m.render(t).unwrap());
            }
        }
    }

    #[test]
    fn tone_map_is_injective() {
        let t = tone_map(0);
        let mut bands: Vec<_> = t.values().copied().collect();
        bands.sort_unstable();
        bands.dedup();
        assert_eq!(bands.len(), t.len());
    }

    #[test]
    fn every_tone_band_is_recoverable() {
        use crate::audio::log_mel_spectrogram;
        let cfg = FrontendConfig::default();
        for band in TONE_BANDS.0..=TONE_BANDS.1 {
            let f = mel_center_hz(&cfg, band);
            let step = 2.0 * std::f64::consts::PI * f / SPEECH_RATE as f64;
            let s = (0..SEGMENT_SAMPLES)
                .map(|i| (0.5 * (step * i as f64).sin()) as f32)
                .collect();
            let feats = log_mel_spectrogram(&AudioWaveform::new(s, SPEECH_RATE).unwrap(), &cfg).unwrap();
            let row = feats.frames.row(feats.num_frames() / 2);
            let arg = (0..cfg.n_mels).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            assert_eq!(arg, band, "tone at {f:.1} Hz");
        }
    }
}
