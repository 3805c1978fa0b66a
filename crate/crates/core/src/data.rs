//! Manifests, language registry, prompt assembly and ASR augmentation.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::lm::PromptSequence;
use crate::model::module_rng;
use crate::vocab::{TokenId, Vocabulary, AUDIO_PLACEHOLDER, BOS};

pub const MANIFEST_HEADER: &str = "id\taudio\tsrc_lang\ttgt_lang\tsrc_text\ttgt_text";

/// The audio span of every prompt.
pub const AUDIO_SPAN: &str = "<audio><AudioInputs></audio>";

const DEFAULT_LANGS: [(&str, &str); 7] = [
    ("fr", "French"),
    ("en", "English"),
    ("de", "German"),
    ("es", "Spanish"),
    ("it", "Italian"),
    ("zh", "Chinese"),
    ("ja", "Japanese"),
];

/// Language code → English name.
#[derive(Clone, Debug, PartialEq)]
pub struct LangRegistry {
    names: BTreeMap<String, String>,
}

impl Default for LangRegistry {
    fn default() -> Self {
        LangRegistry {
            names: DEFAULT_LANGS
                .iter()
                .map(|(c, n)| (c.to_string(), n.to_string()))
                .collect(),
        }
    }
}

impl LangRegistry {
    /// Parses `code\tName` lines; blank lines and `#` comments are skipped.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut names = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: &str| Error::Parse {
                path: path.display().to_string(),
                line: i + 1,
                msg: msg.to_string(),
            };
            let (code, name) = line.split_once('\t').ok_or_else(|| err("expected code<TAB>name"))?;
            if code.is_empty() || name.is_empty() || name.contains('\t') {
                return Err(err("expected code<TAB>name"));
            }
            if names.insert(code.to_string(), name.to_string()).is_some() {
                return Err(err(&format!("duplicate language code {code}")));
            }
        }
        Ok(LangRegistry { names })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?, path)
    }

    pub fn to_tsv(&self) -> String {
        self.names.iter().map(|(c, n)| format!("{c}\t{n}\n")).collect()
    }

    pub fn name(&self, code: &str) -> Result<&str> {
        self.names
            .get(code)
            .map(String::as_str)
            .ok_or_else(|| Error::Registry(format!("unknown language code {code:?}")))
    }

    pub fn contains(&self, code: &str) -> bool {
        self.names.contains_key(code)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Task {
    St,
    Asr,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub id: String,
    pub audio: PathBuf,
    pub src_lang: String,
    pub tgt_lang: String,
    pub src_text: String,
    pub tgt_text: String,
    pub task: Task,
}

impl SampleRecord {
    /// Text the model is trained to emit.
    pub fn target(&self) -> &str {
        match self.task {
            Task::St => &self.tgt_text,
            Task::Asr => &self.src_text,
        }
    }

    /// `src-tgt` language pair key.
    pub fn pair(&self) -> String {
        format!("{}-{}", self.src_lang, self.tgt_lang)
    }

    pub fn as_asr(&self) -> SampleRecord {
        SampleRecord {
            task: Task::Asr,
            ..self.clone()
        }
    }
}

fn check_field(what: &str, s: &str) -> Result<()> {
    if s.contains(['\t', '\n', '\r']) {
        return Err(Error::config(format!("{what} contains a tab or newline: {s:?}")));
    }
    Ok(())
}

/// Parses manifest text. Relative audio paths resolve against `base`.
pub fn parse_manifest(text: &str, path: &Path, base: &Path) -> Result<Vec<SampleRecord>> {
    let err = |line: usize, msg: String| Error::Parse {
        path: path.display().to_string(),
        line,
        msg,
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == MANIFEST_HEADER => {}
        _ => return Err(err(1, format!("expected header {MANIFEST_HEADER:?}"))),
    }
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, line) in lines {
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 6 {
            return Err(err(i + 1, format!("expected 6 columns, found {}", cols.len())));
        }
        if cols[0].is_empty() {
            return Err(err(i + 1, "empty id".into()));
        }
        if !seen.insert(cols[0].to_string()) {
            return Err(err(i + 1, format!("duplicate id {}", cols[0])));
        }
        let audio = Path::new(cols[1]);
        out.push(SampleRecord {
            id: cols[0].to_string(),
            audio: if audio.is_absolute() {
                audio.to_path_buf()
            } else {
                base.join(audio)
            },
            src_lang: cols[2].to_string(),
            tgt_lang: cols[3].to_string(),
            src_text: cols[4].to_string(),
            tgt_text: cols[5].to_string(),
            task: Task::St,
        });
    }
    Ok(out)
}

pub fn load_manifest(path: &Path) -> Result<Vec<SampleRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_manifest(&text, path, base)
}

/// Writes records with audio paths relative to the manifest's directory
/// when possible.
pub fn write_manifest(path: &Path, records: &[SampleRecord]) -> Result<()> {
    let base = path.parent().unwrap_or(Path::new("."));
    let mut s = String::from(MANIFEST_HEADER);
    s.push('\n');
    for r in records {
        let audio = r.audio.strip_prefix(base).unwrap_or(&r.audio);
        let audio = audio.to_string_lossy();
        for (what, v) in [
            ("id", r.id.as_str()),
            ("audio", &audio),
            ("src_lang", &r.src_lang),
            ("tgt_lang", &r.tgt_lang),
            ("src_text", &r.src_text),
            ("tgt_text", &r.tgt_text),
        ] {
            check_field(what, v)?;
        }
        s.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\n",
            r.id, audio, r.src_lang, r.tgt_lang, r.src_text, r.tgt_text
        ));
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PromptMode {
    Train,
    Infer,
}

/// Prompt text split into its parts (joined by single spaces) and the
/// expected output. The target is empty in inference mode.
#[derive(Clone, Debug, PartialEq)]
pub struct BuiltPrompt {
    pub parts: Vec<String>,
    pub target: String,
}

impl BuiltPrompt {
    pub fn text(&self) -> String {
        self.parts.join(" ")
    }
}

impl fmt::Display for BuiltPrompt {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text())
    }
}

pub fn build_prompt(
    langs: &LangRegistry,
    r: &SampleRecord,
    mode: PromptMode,
    include_transcript: bool,
) -> Result<BuiltPrompt> {
    let src = langs.name(&r.src_lang)?;
    let instruction = match r.task {
        Task::St => format!("Translate the {src} sentence to {}.", langs.name(&r.tgt_lang)?),
        Task::Asr => format!("Transcribe the {src} sentence to {src}."),
    };
    let mut parts = vec![AUDIO_SPAN.to_string(), instruction];
    if include_transcript {
        parts.push(format!("Transcripts of AudioInputs is \"{}\"", r.src_text));
    }
    let target = match mode {
        PromptMode::Train => r.target().to_string(),
        PromptMode::Infer => String::new(),
    };
    Ok(BuiltPrompt { parts, target })
}

/// Tokenizes a prompt around its single `<AudioInputs>` placeholder, which
/// becomes an audio segment of `audio_rows` rows.
pub fn encode_prompt(
    vocab: &Vocabulary,
    prompt: &BuiltPrompt,
    audio_rows: usize,
    mode: PromptMode,
) -> Result<PromptSequence> {
    let ids = vocab.tokenize(&prompt.text());
    let at: Vec<usize> = ids
        .iter()
        .enumerate()
        .filter(|(_, &t)| t == AUDIO_PLACEHOLDER)
        .map(|(i, _)| i)
        .collect();
    if at.len() != 1 {
        return Err(Error::shape(format!(
            "prompt must contain exactly one audio placeholder, found {}",
            at.len()
        )));
    }
    let before: Vec<TokenId> = ids[..at[0]].to_vec();
    let mut after: Vec<TokenId> = ids[at[0] + 1..].to_vec();
    Ok(match mode {
        PromptMode::Train => PromptSequence::for_training(before, audio_rows, after, &vocab.tokenize(&prompt.target)),
        PromptMode::Infer => {
            after.push(BOS);
            PromptSequence::for_inference(before, audio_rows, after)
        }
    })
}

/// Vocabulary covering every prompt and target `records` can produce, for
/// both tasks, with and without the transcript hint.
pub fn corpus_vocabulary(records: &[SampleRecord], langs: &LangRegistry) -> Result<Vocabulary> {
    let mut texts = Vec::with_capacity(records.len() * 4);
    for r in records {
        for rec in [r.clone(), r.as_asr()] {
            texts.push(build_prompt(langs, &rec, PromptMode::Train, true)?.text());
            texts.push(rec.target().to_string());
        }
        texts.push(r.tgt_text.clone());
    }
    Ok(Vocabulary::build(texts.iter().map(String::as_str)))
}

/// How ST and ASR samples and language pairs are mixed.
#[derive(Clone, Debug, PartialEq)]
pub struct MixPolicy {
    pub asr_ratio: f64,
    /// Pair key (`fr-en`) → sampling weight; unlisted pairs weigh 1.
    pub language_weights: BTreeMap<String, f64>,
    pub shuffle_seed: u64,
}

impl Default for MixPolicy {
    fn default() -> Self {
        MixPolicy {
            asr_ratio: 0.5,
            language_weights: BTreeMap::new(),
            shuffle_seed: 0,
        }
    }
}

impl MixPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.asr_ratio) {
            return Err(Error::config(format!(
                "asr_ratio must lie in [0, 1], got {}",
                self.asr_ratio
            )));
        }
        if self.language_weights.values().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::config("language weights must be positive"));
        }
        Ok(())
    }

    fn weight(&self, pair: &str) -> f64 {
        self.language_weights.get(pair).copied().unwrap_or(1.0)
    }
}

/// One epoch of training records: all ST records plus ASR clones of a
/// seeded `asr_ratio` fraction of them, in a seeded order. Language pairs
/// are interleaved by weight, each pair's records in a shuffled order.
pub fn asr_augment(records: &[SampleRecord], policy: &MixPolicy, epoch: u64) -> Result<Vec<SampleRecord>> {
    policy.validate()?;
    let mut rng = module_rng(policy.shuffle_seed, &format!("mix.epoch{epoch}"));
    let n_asr = (policy.asr_ratio * records.len() as f64).round() as usize;
    let mut picks: Vec<usize> = (0..records.len()).collect();
    picks.shuffle(&mut rng);
    picks.truncate(n_asr);
    picks.sort_unstable();
    let mut items: Vec<SampleRecord> = records.to_vec();
    items.extend(picks.into_iter().map(|i| records[i].as_asr()));
    interleave(items, policy, &mut rng)
}

/// Groups by language pair, shuffles inside each group and draws groups
/// with probability proportional to weight × remaining presence.
fn interleave(items: Vec<SampleRecord>, policy: &MixPolicy, rng: &mut impl Rng) -> Result<Vec<SampleRecord>> {
    let mut groups: BTreeMap<String, Vec<SampleRecord>> = BTreeMap::new();
    for r in items {
        groups.entry(r.pair()).or_default().push(r);
    }
    let mut queues: Vec<(f64, Vec<SampleRecord>)> = groups
        .into_iter()
        .map(|(pair, mut g)| {
            g.shuffle(rng);
            g.reverse();
            (policy.weight(&pair), g)
        })
        .collect();
    let total: usize = queues.iter().map(|(_, g)| g.len()).sum();
    let mut out = Vec::with_capacity(total);
    while out.len() < total {
        let mass: f64 = queues
            .iter()
            .filter(|(_, g)| !g.is_empty())
            .map(|(w, g)| w * g.len() as f64)
            .sum();
        let mut x = rng.gen::<f64>() * mass;
        let mut chosen = None;
        for (k, (w, g)) in queues.iter().enumerate() {
            if g.is_empty() {
                continue;
            }
            chosen = Some(k);
            x -= w * g.len() as f64;
            if x < 0.0 {
                break;
            }
        }
        let k = chosen.expect("some queue is non-empty");
        out.push(queues[k].1.pop().expect("non-empty"));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(id: &str, src: &str, tgt: &str) -> SampleRecord {
        SampleRecord {
            id: id.into(),
            audio: PathBuf::from(format!("{id}.raw")),
            src_lang: src.into(),
            tgt_lang: tgt.into(),
            src_text: "Bonjour le monde.".into(),
            tgt_text: "Hello world.".into(),
            task: Task::St,
        }
    }

    #[test]
    fn unknown_language_is_a_registry_error() {
        let r = record("a", "xx", "en");
        let e = build_prompt(&LangRegistry::default(), &r, PromptMode::Infer, false).unwrap_err();
        assert!(matches!(e, Error::Registry(_)));
    }

    #[test]
    fn registry_round_trip() {
        let reg = LangRegistry::default();
        let back = LangRegistry::parse(&reg.to_tsv(), Path::new("langs.tsv")).unwrap();
        assert_eq!(back, reg);
        assert_eq!(reg.name("ja").unwrap(), "Japanese");
    }

    #[test]
    fn zero_ratio_keeps_records() {
        let recs: Vec<_> = (0..10).map(|i| record(&i.to_string(), "fr", "en")).collect();
        let policy = MixPolicy {
            asr_ratio: 0.0,
            ..MixPolicy::default()
        };
        let mut out = asr_augment(&recs, &policy, 0).unwrap();
        out.sort_by(|a, b| a.id.cmp(&b.id));
        let mut want = recs.clone();
        want.sort_by(|a, b| a.id.cmp(&b.id));
        assert_eq!(out, want);
    }

    #[test]
    fn bad_ratio_rejected() {
        let policy = MixPolicy {
            asr_ratio: 1.5,
            ..MixPolicy::default()
        };
        assert!(asr_augment(&[], &policy, 0).is_err());
    }
}
