//! INI-style run configuration: `[section]` headers and `key = value` lines.
//!
//! Unknown sections and keys are rejected. [`RunConfig::to_ini`] writes
//! every effective value, defaults included, so a resolved file reproduces
//! the run on its own.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::data::MixPolicy;
use crate::decode::DecodeConfig;
use crate::error::{Error, Result};
use crate::lora::{LoraConfig, LoraScope};
use crate::model::{module_seed, ModelConfig};
use crate::train::{OptimizerConfig, TrainConfig};

/// Ordered sections of ordered key/value pairs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Ini {
    pub sections: Vec<(String, Vec<(String, String)>)>,
}

impl Ini {
    /// `#` and `;` start comment lines. Keys before any header are an error.
    pub fn parse(text: &str, path: &str) -> Result<Self> {
        let mut ini = Ini::default();
        for (i, raw) in text.lines().enumerate() {
            let err = |msg: String| Error::Parse {
                path: path.to_string(),
                line: i + 1,
                msg,
            };
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let name = name.trim();
                if name.is_empty() {
                    return Err(err("empty section name".into()));
                }
                if ini.sections.iter().any(|(s, _)| s == name) {
                    return Err(err(format!("duplicate section [{name}]")));
                }
                ini.sections.push((name.to_string(), Vec::new()));
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected key = value, got {line:?}")))?;
            let (k, v) = (k.trim(), v.trim());
            let (_, entries) = ini
                .sections
                .last_mut()
                .ok_or_else(|| err(format!("key {k:?} outside any section")))?;
            if entries.iter().any(|(e, _)| e == k) {
                return Err(err(format!("duplicate key {k:?}")));
            }
            entries.push((k.to_string(), v.to_string()));
        }
        Ok(ini)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn section(&self, name: &str) -> Option<&[(String, String)]> {
        self.sections.iter().find(|(s, _)| s == name).map(|(_, e)| e.as_slice())
    }

    pub fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.section(section)?
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn push(&mut self, section: &str, key: &str, value: impl fmt::Display) {
        let value = value.to_string();
        match self.sections.iter_mut().find(|(s, _)| s == section) {
            Some((_, e)) => e.push((key.to_string(), value)),
            None => self
                .sections
                .push((section.to_string(), vec![(key.to_string(), value)])),
        }
    }
}

impl fmt::Display for Ini {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, (name, entries)) in self.sections.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            writeln!(f, "[{name}]")?;
            for (k, v) in entries {
                writeln!(f, "{k} = {v}")?;
            }
        }
        Ok(())
    }
}

/// Reads typed values out of one section, remembering which keys were used.
pub(crate) struct SectionReader<'a> {
    name: &'a str,
    entries: BTreeMap<&'a str, &'a str>,
}

impl<'a> SectionReader<'a> {
    pub(crate) fn new(ini: &'a Ini, name: &'a str) -> Self {
        SectionReader {
            name,
            entries: ini
                .section(name)
                .unwrap_or(&[])
                .iter()
                .map(|(k, v)| (k.as_str(), v.as_str()))
                .collect(),
        }
    }

    pub(crate) fn read<T: FromStr>(&mut self, key: &str, slot: &mut T) -> Result<()>
    where
        T::Err: fmt::Display,
    {
        if let Some(v) = self.entries.remove(key) {
            *slot = v
                .parse()
                .map_err(|e| Error::config(format!("[{}] {key} = {v:?}: {e}", self.name)))?;
        }
        Ok(())
    }

    pub(crate) fn take(&mut self, key: &str) -> Option<&'a str> {
        self.entries.remove(key)
    }

    pub(crate) fn finish(self) -> Result<()> {
        match self.entries.keys().next() {
            Some(k) => Err(Error::config(format!("unknown key {k:?} in [{}]", self.name))),
            None => Ok(()),
        }
    }
}

/// Which adapter sets to attach.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LoraMode {
    None,
    Speech,
    Language,
    Dual,
}

impl LoraMode {
    pub fn scopes(self) -> &'static [LoraScope] {
        match self {
            LoraMode::None => &[],
            LoraMode::Speech => &[LoraScope::Speech],
            LoraMode::Language => &[LoraScope::Language],
            LoraMode::Dual => &[LoraScope::Speech, LoraScope::Language],
        }
    }
}

impl fmt::Display for LoraMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LoraMode::None => "none",
            LoraMode::Speech => "speech",
            LoraMode::Language => "language",
            LoraMode::Dual => "dual",
        })
    }
}

impl FromStr for LoraMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(LoraMode::None),
            "speech" => Ok(LoraMode::Speech),
            "language" => Ok(LoraMode::Language),
            "dual" => Ok(LoraMode::Dual),
            _ => Err(Error::config(format!(
                "unknown LoRA mode {s:?} (none, speech, language, dual)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraSettings {
    pub mode: LoraMode,
    /// Freeze encoder and LM bases so only the adaptor and adapters train.
    pub freeze_base: bool,
    pub speech: LoraConfig,
    pub language: LoraConfig,
}

impl Default for LoraSettings {
    fn default() -> Self {
        LoraSettings {
            mode: LoraMode::None,
            freeze_base: false,
            speech: LoraConfig::speech(),
            language: LoraConfig::language(),
        }
    }
}

impl LoraSettings {
    pub fn active(&self) -> Vec<&LoraConfig> {
        self.mode
            .scopes()
            .iter()
            .map(|s| match s {
                LoraScope::Speech => &self.speech,
                LoraScope::Language => &self.language,
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub asr_ratio: f64,
    /// Append the source transcript hint to training prompts.
    pub transcript_in_train: bool,
    /// Append it at inference too (needs the reference transcript).
    pub transcript_in_infer: bool,
    pub language_weights: BTreeMap<String, f64>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            asr_ratio: 0.5,
            transcript_in_train: true,
            transcript_in_infer: false,
            language_weights: BTreeMap::new(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub lora: LoraSettings,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub decode: DecodeConfig,
}

fn join_list(items: &[String]) -> String {
    items.join(",")
}

fn split_list(s: &str) -> Vec<String> {
    s.split(',')
        .map(str::trim)
        .filter(|x| !x.is_empty())
        .map(str::to_string)
        .collect()
}

fn parse_weights(s: &str) -> Result<BTreeMap<String, f64>> {
    split_list(s)
        .into_iter()
        .map(|item| {
            let (pair, w) = item
                .split_once(':')
                .ok_or_else(|| Error::config(format!("language weight {item:?} is not pair:weight")))?;
            let w: f64 = w
                .parse()
                .map_err(|e| Error::config(format!("language weight {item:?}: {e}")))?;
            Ok((pair.to_string(), w))
        })
        .collect()
}

/// Model sections shared by run configs and checkpoints.
pub(crate) fn read_model(ini: &Ini, m: &mut ModelConfig) -> Result<()> {
    let mut r = SectionReader::new(ini, "frontend");
    let f = &mut m.frontend;
    r.read("n_mels", &mut f.n_mels)?;
    r.read("win", &mut f.win)?;
    r.read("hop", &mut f.hop)?;
    r.read("log_floor", &mut f.log_floor)?;
    r.read("f_min", &mut f.f_min)?;
    r.read("f_max", &mut f.f_max)?;
    r.read("normalize", &mut f.normalize)?;
    r.finish()?;

    let mut r = SectionReader::new(ini, "encoder");
    let e = &mut m.encoder;
    r.read("d_model", &mut e.d_model)?;
    r.read("n_layers", &mut e.n_layers)?;
    r.read("n_heads", &mut e.n_heads)?;
    r.read("ff_mult", &mut e.ff_mult)?;
    r.read("subsample_factor", &mut e.subsample_factor)?;
    r.read("max_frames", &mut e.max_frames)?;
    r.finish()?;
    e.n_mels = m.frontend.n_mels;

    let mut r = SectionReader::new(ini, "adaptor");
    r.read("hidden_dim", &mut m.adaptor_hidden)?;
    r.finish()?;

    let mut r = SectionReader::new(ini, "lm");
    let l = &mut m.lm;
    r.read("d_model", &mut l.d_model)?;
    r.read("n_layers", &mut l.n_layers)?;
    r.read("n_heads", &mut l.n_heads)?;
    r.read("ff_mult", &mut l.ff_mult)?;
    r.read("max_seq_len", &mut l.max_seq_len)?;
    r.finish()
}

pub(crate) fn write_model(ini: &mut Ini, m: &ModelConfig) {
    let f = &m.frontend;
    ini.push("frontend", "n_mels", f.n_mels);
    ini.push("frontend", "win", f.win);
    ini.push("frontend", "hop", f.hop);
    ini.push("frontend", "log_floor", f.log_floor);
    ini.push("frontend", "f_min", f.f_min);
    ini.push("frontend", "f_max", f.f_max);
    ini.push("frontend", "normalize", f.normalize);
    let e = &m.encoder;
    ini.push("encoder", "d_model", e.d_model);
    ini.push("encoder", "n_layers", e.n_layers);
    ini.push("encoder", "n_heads", e.n_heads);
    ini.push("encoder", "ff_mult", e.ff_mult);
    ini.push("encoder", "subsample_factor", e.subsample_factor);
    ini.push("encoder", "max_frames", e.max_frames);
    ini.push("adaptor", "hidden_dim", m.adaptor_hidden);
    let l = &m.lm;
    ini.push("lm", "d_model", l.d_model);
    ini.push("lm", "n_layers", l.n_layers);
    ini.push("lm", "n_heads", l.n_heads);
    ini.push("lm", "ff_mult", l.ff_mult);
    ini.push("lm", "max_seq_len", l.max_seq_len);
}

const SECTIONS: [&str; 8] = [
    "frontend", "encoder", "adaptor", "lm", "lora", "train", "data", "decode",
];

impl RunConfig {
    pub fn from_ini(ini: &Ini) -> Result<Self> {
        for (s, _) in &ini.sections {
            if !SECTIONS.contains(&s.as_str()) {
                return Err(Error::config(format!("unknown section [{s}]")));
            }
        }
        let mut c = RunConfig::default();
        read_model(ini, &mut c.model)?;

        let mut r = SectionReader::new(ini, "lora");
        let lo = &mut c.lora;
        r.read("mode", &mut lo.mode)?;
        r.read("freeze_base", &mut lo.freeze_base)?;
        r.read("speech_rank", &mut lo.speech.rank)?;
        r.read("speech_alpha", &mut lo.speech.alpha)?;
        if let Some(t) = r.take("speech_targets") {
            lo.speech.targets = split_list(t);
        }
        r.read("language_rank", &mut lo.language.rank)?;
        r.read("language_alpha", &mut lo.language.alpha)?;
        if let Some(t) = r.take("language_targets") {
            lo.language.targets = split_list(t);
        }
        r.finish()?;

        let mut r = SectionReader::new(ini, "train");
        let t = &mut c.train;
        r.read("seed", &mut t.seed)?;
        r.read("epochs", &mut t.epochs)?;
        r.read("batch_size", &mut t.batch_size)?;
        let mut max_steps = t.max_steps.unwrap_or(0);
        r.read("max_steps", &mut max_steps)?;
        t.max_steps = (max_steps > 0).then_some(max_steps);
        r.read("warmup_fraction", &mut t.warmup_fraction)?;
        r.read("checkpoint_every", &mut t.checkpoint_every)?;
        let o = &mut t.optimizer;
        r.read("peak_lr", &mut o.peak_lr)?;
        r.read("beta1", &mut o.beta1)?;
        r.read("beta2", &mut o.beta2)?;
        r.read("eps", &mut o.eps)?;
        r.read("weight_decay", &mut o.weight_decay)?;
        r.read("clip_norm", &mut o.clip_norm)?;
        r.finish()?;

        let mut r = SectionReader::new(ini, "data");
        let d = &mut c.data;
        r.read("asr_ratio", &mut d.asr_ratio)?;
        r.read("transcript_in_train", &mut d.transcript_in_train)?;
        r.read("transcript_in_infer", &mut d.transcript_in_infer)?;
        if let Some(w) = r.take("language_weights") {
            d.language_weights = parse_weights(w)?;
        }
        r.finish()?;

        let mut r = SectionReader::new(ini, "decode");
        let de = &mut c.decode;
        r.read("beam_size", &mut de.beam_size)?;
        r.read("max_new_tokens", &mut de.max_new_tokens)?;
        r.read("length_norm_alpha", &mut de.length_norm_alpha)?;
        r.finish()?;

        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_ini(&Ini::load(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate_dims()?;
        self.train.optimizer.validate()?;
        if self.train.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if !(0.0 < self.train.warmup_fraction && self.train.warmup_fraction < 1.0) {
            return Err(Error::config("warmup_fraction must lie in (0, 1)"));
        }
        self.mix_policy().validate()?;
        self.decode.validate()?;
        for l in [&self.lora.speech, &self.lora.language] {
            if l.rank == 0 {
                return Err(Error::config("LoRA rank must be at least 1"));
            }
        }
        Ok(())
    }

    /// Mixing policy; its shuffle seed derives from the root seed.
    pub fn mix_policy(&self) -> MixPolicy {
        MixPolicy {
            asr_ratio: self.data.asr_ratio,
            language_weights: self.data.language_weights.clone(),
            shuffle_seed: module_seed(self.train.seed, "data"),
        }
    }

    pub fn to_ini(&self) -> Ini {
        let mut ini = Ini::default();
        write_model(&mut ini, &self.model);
        let lo = &self.lora;
        ini.push("lora", "mode", lo.mode);
        ini.push("lora", "freeze_base", lo.freeze_base);
        ini.push("lora", "speech_rank", lo.speech.rank);
        ini.push("lora", "speech_alpha", lo.speech.alpha);
        ini.push("lora", "speech_targets", join_list(&lo.speech.targets));
        ini.push("lora", "language_rank", lo.language.rank);
        ini.push("lora", "language_alpha", lo.language.alpha);
        ini.push("lora", "language_targets", join_list(&lo.language.targets));
        let t = &self.train;
        let o: &OptimizerConfig = &t.optimizer;
        ini.push("train", "seed", t.seed);
        ini.push("train", "epochs", t.epochs);
        ini.push("train", "batch_size", t.batch_size);
        ini.push("train", "max_steps", t.max_steps.unwrap_or(0));
        ini.push("train", "warmup_fraction", t.warmup_fraction);
        ini.push("train", "checkpoint_every", t.checkpoint_every);
        ini.push("train", "peak_lr", o.peak_lr);
        ini.push("train", "beta1", o.beta1);
        ini.push("train", "beta2", o.beta2);
        ini.push("train", "eps", o.eps);
        ini.push("train", "weight_decay", o.weight_decay);
        ini.push("train", "clip_norm", o.clip_norm);
        let d = &self.data;
        ini.push("data", "asr_ratio", d.asr_ratio);
        ini.push("data", "transcript_in_train", d.transcript_in_train);
        ini.push("data", "transcript_in_infer", d.transcript_in_infer);
        ini.push(
            "data",
            "language_weights",
            d.language_weights
                .iter()
                .map(|(p, w)| format!("{p}:{w}"))
                .collect::<Vec<_>>()
                .join(","),
        );
        let de = &self.decode;
        ini.push("decode", "beam_size", de.beam_size);
        ini.push("decode", "max_new_tokens", de.max_new_tokens);
        ini.push("decode", "length_norm_alpha", de.length_norm_alpha);
        ini
    }
}
