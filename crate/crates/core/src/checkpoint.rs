//! Checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "LLST" | version u32 | crc32(payload) u32 | payload
//! payload = n_tensors u32
//!           { name_len u32 | name | rank u32 | dims u32… | f32 data… }*
//!           config text (UTF-8, INI sections) to the end
//! ```
//!
//! The config text carries the model dimensions, the vocabulary, every
//! adapter with its merge state, frozen parameter names and, when present,
//! the optimizer step counter. Optimizer moments travel as tensors named
//! `optim.m.<param>` and `optim.v.<param>`.

use std::fs;
use std::path::Path;

use crate::config::{read_model, write_model, Ini};
use crate::error::{Error, Result};
use crate::lora::{LoraConfig, LoraScope};
use crate::model::{ModelConfig, SpeechTranslator};
use crate::tensor::Tensor;
use crate::train::{AdamState, Moments, ScheduleConfig, TrainState};
use crate::vocab::Vocabulary;

pub const MAGIC: &[u8; 4] = b"LLST";
pub const VERSION: u32 = 1;

const M_PREFIX: &str = "optim.m.";
const V_PREFIX: &str = "optim.v.";

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor<f32>) {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    put_u32(out, t.rank() as u32);
    for &d in t.shape() {
        put_u32(out, d as u32);
    }
    for &x in t.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Integrity("unexpected end of checkpoint payload".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn tensor(&mut self) -> Result<(String, Tensor<f32>)> {
        let n = self.u32()? as usize;
        let name = std::str::from_utf8(self.take(n)?)
            .map_err(|_| Error::Integrity("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = self.u32()? as usize;
        let shape = (0..rank)
            .map(|_| self.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let len: usize = shape.iter().product();
        let bytes = self.take(
            len.checked_mul(4)
                .ok_or_else(|| Error::Integrity("tensor too large".into()))?,
        )?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(&shape, data).map_err(|e| Error::Integrity(format!("{name}: {e}")))?;
        Ok((name, t))
    }
}

fn config_text<T: crate::tensor::Scalar>(model: &SpeechTranslator<T>, state: Option<&TrainState>) -> String {
    let mut ini = Ini::default();
    write_model(&mut ini, &model.cfg);
    for (host, ad) in model.adapters() {
        let sec = format!("lora {host}");
        ini.push(&sec, "scope", ad.scope);
        ini.push(&sec, "rank", ad.rank);
        ini.push(&sec, "alpha", ad.alpha);
        ini.push(&sec, "merged", ad.merged);
    }
    let frozen: Vec<&str> = model
        .store
        .iter()
        .filter(|(_, p)| !p.trainable)
        .map(|(_, p)| p.name.as_str())
        .collect();
    ini.push("frozen", "names", frozen.join(","));
    if let Some(s) = state {
        ini.push("state", "step", s.step);
        ini.push("state", "seed", s.seed);
        ini.push("state", "warmup_steps", s.schedule.warmup_steps);
        ini.push("state", "total_steps", s.schedule.total_steps);
        ini.push("state", "adam_step", s.optimizer.step);
    }
    for (i, t) in model.vocab.tokens().iter().enumerate() {
        ini.push("vocab", &i.to_string(), t);
    }
    ini.to_string()
}

/// Serializes a model (and optionally its training state).
pub fn to_bytes(model: &SpeechTranslator<f32>, state: Option<&TrainState>) -> Vec<u8> {
    let mut tensors: Vec<(String, &Tensor<f32>)> =
        model.store.iter().map(|(_, p)| (p.name.clone(), &p.value)).collect();
    if let Some(s) = state {
        for (id, p) in model.store.iter() {
            if let Some(Some(mo)) = s.optimizer.moments.get(id.index()) {
                tensors.push((format!("{M_PREFIX}{}", p.name), &mo.m));
                tensors.push((format!("{V_PREFIX}{}", p.name), &mo.v));
            }
        }
    }
    let mut payload = Vec::new();
    put_u32(&mut payload, tensors.len() as u32);
    for (name, t) in &tensors {
        put_tensor(&mut payload, name, t);
    }
    payload.extend_from_slice(config_text(model, state).as_bytes());
    let mut out = Vec::with_capacity(payload.len() + 12);
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_u32(&mut out, crc32fast::hash(&payload));
    out.extend_from_slice(&payload);
    out
}

fn parse_flag<T: std::str::FromStr>(ini: &Ini, sec: &str, key: &str) -> Result<T> {
    ini.get(sec, key)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Integrity(format!("checkpoint config lacks a valid [{sec}] {key}")))
}

pub fn from_bytes(bytes: &[u8]) -> Result<(SpeechTranslator<f32>, Option<TrainState>)> {
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(Error::Integrity("not an LLST checkpoint".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Integrity(format!(
            "checkpoint version {version}, expected {VERSION}"
        )));
    }
    let crc = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    let payload = &bytes[12..];
    if crc32fast::hash(payload) != crc {
        return Err(Error::Integrity("checksum mismatch".into()));
    }
    let mut r = Reader { buf: payload, pos: 0 };
    let n = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(n.min(1 << 16));
    for _ in 0..n {
        tensors.push(r.tensor()?);
    }
    let text =
        std::str::from_utf8(&payload[r.pos..]).map_err(|_| Error::Integrity("config block is not UTF-8".into()))?;
    let ini = Ini::parse(text, "<checkpoint>")?;

    let mut cfg = ModelConfig::default();
    let mut model_ini = Ini::default();
    for s in ["frontend", "encoder", "adaptor", "lm"] {
        if let Some(e) = ini.section(s) {
            model_ini.sections.push((s.to_string(), e.to_vec()));
        }
    }
    read_model(&model_ini, &mut cfg)?;
    let vocab_entries = ini
        .section("vocab")
        .ok_or_else(|| Error::Integrity("checkpoint has no vocabulary".into()))?;
    let mut tokens = Vec::with_capacity(vocab_entries.len());
    for (i, (k, v)) in vocab_entries.iter().enumerate() {
        if k.parse::<usize>().ok() != Some(i) {
            return Err(Error::Integrity(format!("vocabulary id {k} out of order")));
        }
        tokens.push(v.as_str());
    }
    let vocab = Vocabulary::from_text(&tokens.join("\n"))?;
    let mut model = SpeechTranslator::<f32>::build(&cfg, vocab, 0)?;

    let mut merged_hosts = Vec::new();
    for (name, _) in &tensors {
        if name.starts_with(M_PREFIX) || name.starts_with(V_PREFIX) {
            continue;
        }
        let Some(host) = name.strip_suffix(".lora_a") else {
            continue;
        };
        let sec = format!("lora {host}");
        let lc = LoraConfig {
            rank: parse_flag(&ini, &sec, "rank")?,
            alpha: parse_flag(&ini, &sec, "alpha")?,
            targets: vec![host.to_string()],
            scope: parse_flag::<LoraScope>(&ini, &sec, "scope")?,
        };
        model.inject_lora(&lc, 0)?;
        if parse_flag::<bool>(&ini, &sec, "merged")? {
            merged_hosts.push(host.to_string());
        }
    }

    let mut moments: Vec<Option<Moments<f32>>> = vec![None; model.store.len()];
    let mut seen = 0;
    for (name, t) in tensors {
        let (target, slot) = if let Some(p) = name.strip_prefix(M_PREFIX) {
            (p, Some(true))
        } else if let Some(p) = name.strip_prefix(V_PREFIX) {
            (p, Some(false))
        } else {
            (name.as_str(), None)
        };
        let id = model
            .store
            .id(target)
            .ok_or_else(|| Error::Integrity(format!("unexpected tensor {name}")))?;
        if model.store.value(id).shape() != t.shape() {
            return Err(Error::Integrity(format!(
                "{name} has shape {:?}, model expects {:?}",
                t.shape(),
                model.store.value(id).shape()
            )));
        }
        match slot {
            None => {
                model.store.get_mut(id).value = t;
                seen += 1;
            }
            Some(is_m) => {
                let mo = moments[id.index()].get_or_insert_with(|| Moments {
                    m: Tensor::zeros(t.shape()),
                    v: Tensor::zeros(t.shape()),
                });
                if is_m {
                    mo.m = t;
                } else {
                    mo.v = t;
                }
            }
        }
    }
    if seen != model.store.len() {
        return Err(Error::Integrity(format!(
            "checkpoint holds {seen} of {} model tensors",
            model.store.len()
        )));
    }
    for l in model.linears_mut() {
        if let Some(ad) = &mut l.lora {
            ad.merged = merged_hosts.contains(&l.name);
        }
    }
    let frozen: Vec<&str> = ini
        .get("frozen", "names")
        .unwrap_or("")
        .split(',')
        .filter(|s| !s.is_empty())
        .collect();
    for name in frozen {
        let id = model
            .store
            .id(name)
            .ok_or_else(|| Error::Integrity(format!("frozen name {name} matches no tensor")))?;
        model.store.set_trainable(id, false);
    }
    if moments.iter().all(Option::is_none) {
        moments.clear();
    }
    let state = if ini.section("state").is_some() {
        Some(TrainState {
            step: parse_flag(&ini, "state", "step")?,
            seed: parse_flag(&ini, "state", "seed")?,
            schedule: ScheduleConfig {
                warmup_steps: parse_flag(&ini, "state", "warmup_steps")?,
                total_steps: parse_flag(&ini, "state", "total_steps")?,
            },
            optimizer: AdamState {
                step: parse_flag(&ini, "state", "adam_step")?,
                moments,
            },
        })
    } else {
        None
    };
    Ok((model, state))
}

pub fn save_checkpoint(path: &Path, model: &SpeechTranslator<f32>, state: Option<&TrainState>) -> Result<()> {
    let bytes = to_bytes(model, state);
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(SpeechTranslator<f32>, Option<TrainState>)> {
    from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
}
