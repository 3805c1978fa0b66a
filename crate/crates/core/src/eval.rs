//! Corpus evaluation: decode every record, score BLEU per language pair.

use std::collections::BTreeMap;

use crate::audio::load_speech;
use crate::bleu::{corpus_bleu, BleuScore, Smoothing, REPORT_HEADER};
use crate::data::{build_prompt, LangRegistry, PromptMode, SampleRecord};
use crate::decode::{decode_features, DecodeConfig};
use crate::error::{Error, Result};
use crate::model::SpeechTranslator;

/// Pair key of the corpus-wide row in reports.
pub const ALL_PAIRS: &str = "all";

#[derive(Clone, Debug, PartialEq)]
pub struct EvalItem {
    pub id: String,
    pub pair: String,
    pub hypothesis: String,
    pub reference: String,
    pub truncated: bool,
}

pub fn decode_record(
    model: &SpeechTranslator<f32>,
    record: &SampleRecord,
    langs: &LangRegistry,
    cfg: &DecodeConfig,
    include_transcript: bool,
) -> Result<EvalItem> {
    let prompt = build_prompt(langs, record, PromptMode::Infer, include_transcript)?;
    let features = model.features(&load_speech(&record.audio)?)?;
    let result = decode_features(model, &features, &prompt, cfg)?;
    Ok(EvalItem {
        id: record.id.clone(),
        pair: record.pair(),
        hypothesis: model.vocab.detokenize(result.best().content()),
        reference: record.target().to_string(),
        truncated: result.truncated,
    })
}

pub fn decode_records(
    model: &SpeechTranslator<f32>,
    records: &[SampleRecord],
    langs: &LangRegistry,
    cfg: &DecodeConfig,
    include_transcript: bool,
) -> Result<Vec<EvalItem>> {
    records
        .iter()
        .map(|r| decode_record(model, r, langs, cfg, include_transcript))
        .collect()
}

/// BLEU per language pair in sorted order, then [`ALL_PAIRS`].
pub fn score_by_pair(items: &[EvalItem], smoothing: Smoothing) -> Result<Vec<(String, BleuScore)>> {
    if items.is_empty() {
        return Err(Error::config("nothing to evaluate"));
    }
    let mut groups: BTreeMap<&str, (Vec<&str>, Vec<&str>)> = BTreeMap::new();
    for it in items {
        let g = groups.entry(it.pair.as_str()).or_default();
        g.0.push(&it.hypothesis);
        g.1.push(&it.reference);
    }
    let mut out = groups
        .into_iter()
        .map(|(pair, (h, r))| Ok((pair.to_string(), corpus_bleu(&h, &r, smoothing)?)))
        .collect::<Result<Vec<_>>>()?;
    let hyps: Vec<&str> = items.iter().map(|i| i.hypothesis.as_str()).collect();
    let refs: Vec<&str> = items.iter().map(|i| i.reference.as_str()).collect();
    out.push((ALL_PAIRS.to_string(), corpus_bleu(&hyps, &refs, smoothing)?));
    Ok(out)
}

pub fn report_tsv(scores: &[(String, BleuScore)]) -> String {
    let mut s = format!("{REPORT_HEADER}\n");
    for (pair, b) in scores {
        s.push_str(&b.report_row(pair));
        s.push('\n');
    }
    s
}

/// `id\tpair\thypothesis\treference` rows.
pub fn hypotheses_tsv(items: &[EvalItem]) -> String {
    let mut s = String::from("id\tpair\thypothesis\treference\n");
    for it in items {
        let clean = |t: &str| t.replace(['\t', '\n'], " ");
        s.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            it.id,
            it.pair,
            clean(&it.hypothesis),
            clean(&it.reference)
        ));
    }
    s
}

/// Reads [`hypotheses_tsv`] output back.
pub fn parse_hypotheses(text: &str) -> Result<Vec<EvalItem>> {
    text.lines()
        .enumerate()
        .skip(1)
        .map(|(i, line)| {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 4 {
                return Err(Error::Parse {
                    path: "<hypotheses>".into(),
                    line: i + 1,
                    msg: format!("expected 4 columns, got {}", f.len()),
                });
            }
            Ok(EvalItem {
                id: f[0].into(),
                pair: f[1].into(),
                hypothesis: f[2].into(),
                reference: f[3].into(),
                truncated: false,
            })
        })
        .collect()
}
