use std::fs;
use std::path::{Path, PathBuf};

use llast::audio::{load_audio, log_mel_spectrogram, FrontendConfig};
use llast::config::{Ini, RunConfig};
use llast::data::{
    asr_augment, build_prompt, encode_prompt, load_manifest, parse_manifest, write_manifest, LangRegistry, MixPolicy,
    PromptMode, SampleRecord, Task, MANIFEST_HEADER,
};
use llast::lm::Segment;
use llast::synth::{synth_corpus, tone_map, SynthConfig, SEGMENT_SAMPLES};
use llast::vocab::{Vocabulary, AUDIO_CLOSE, AUDIO_OPEN, BOS, EOS};
use llast::Error;
use proptest::prelude::*;

fn golden(name: &str) -> String {
    let p = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name);
    fs::read_to_string(p).unwrap()
}

fn bonjour(task: Task) -> SampleRecord {
    SampleRecord {
        id: "fr-en-0".into(),
        audio: PathBuf::from("a.raw"),
        src_lang: "fr".into(),
        tgt_lang: "en".into(),
        src_text: "Bonjour le monde.".into(),
        tgt_text: "Hello world.".into(),
        task,
    }
}

#[test]
fn prompts_match_golden_files() {
    let langs = LangRegistry::default();
    let st = build_prompt(&langs, &bonjour(Task::St), PromptMode::Train, true).unwrap();
    assert_eq!(format!("{st}\n"), golden("st_train_prompt.txt"));
    assert_eq!(format!("{}\n", st.target), golden("st_train_target.txt"));
    let asr = build_prompt(&langs, &bonjour(Task::Asr), PromptMode::Train, true).unwrap();
    assert_eq!(format!("{asr}\n"), golden("asr_train_prompt.txt"));
    assert_eq!(format!("{}\n", asr.target), golden("asr_train_target.txt"));
    let inf = build_prompt(&langs, &bonjour(Task::St), PromptMode::Infer, false).unwrap();
    assert_eq!(format!("{inf}\n"), golden("st_infer_prompt.txt"));
    assert_eq!(inf.target, "");
}

#[test]
fn encoded_prompt_masks_only_the_target() {
    let langs = LangRegistry::default();
    let p = build_prompt(&langs, &bonjour(Task::St), PromptMode::Train, true).unwrap();
    let vocab = Vocabulary::build([p.text().as_str(), p.target.as_str()]);
    let seq = encode_prompt(&vocab, &p, 7, PromptMode::Train).unwrap();
    assert_eq!(seq.segments[0], Segment::Text(vec![AUDIO_OPEN]));
    assert_eq!(seq.segments[1], Segment::Audio(7));
    let Segment::Text(after) = &seq.segments[2] else {
        panic!()
    };
    assert_eq!(after[0], AUDIO_CLOSE);
    let target = vocab.tokenize("Hello world.");
    assert_eq!(seq.masked_count(), target.len() + 1);
    assert_eq!(*seq.target_ids.last().unwrap(), EOS);
    let first = seq.loss_mask.iter().position(|&m| m).unwrap();
    // The first masked position is the BOS that precedes the target.
    assert_eq!(after[first - 8], BOS);
    assert_eq!(vocab.detokenize(&seq.target_ids[..target.len()]), "Hello world.");

    let inf = build_prompt(&langs, &bonjour(Task::St), PromptMode::Infer, false).unwrap();
    let seq = encode_prompt(&vocab, &inf, 7, PromptMode::Infer).unwrap();
    assert_eq!(seq.masked_count(), 0);
    let Segment::Text(after) = &seq.segments[2] else {
        panic!()
    };
    assert_eq!(*after.last().unwrap(), BOS);
}

#[test]
fn unknown_language_is_rejected() {
    let langs = LangRegistry::default();
    let mut r = bonjour(Task::St);
    r.tgt_lang = "xx".into();
    assert!(matches!(
        build_prompt(&langs, &r, PromptMode::Train, false),
        Err(Error::Registry(_))
    ));
}

#[test]
fn manifest_errors_carry_line_numbers() {
    let base = Path::new("/data");
    let p = Path::new("m.tsv");
    assert!(parse_manifest("nope\n", p, base).is_err());
    let short = format!("{MANIFEST_HEADER}\na\tb.raw\tfr\ten\tx\n");
    match parse_manifest(&short, p, base) {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
        other => panic!("{other:?}"),
    }
    let dup = format!("{MANIFEST_HEADER}\na\tb.raw\tfr\ten\tx\ty\na\tc.raw\tfr\ten\tx\ty\n");
    match parse_manifest(&dup, p, base) {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
        other => panic!("{other:?}"),
    }
    let ok = format!("{MANIFEST_HEADER}\na\tb.raw\tfr\ten\tx\ty\n");
    let recs = parse_manifest(&ok, p, base).unwrap();
    assert_eq!(recs[0].audio, PathBuf::from("/data/b.raw"));
    assert_eq!(recs[0].task, Task::St);
}

#[test]
fn manifest_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let recs = vec![
        SampleRecord {
            audio: dir.path().join("audio/x.raw"),
            ..bonjour(Task::St)
        },
        SampleRecord {
            id: "b".into(),
            audio: dir.path().join("y.raw"),
            ..bonjour(Task::St)
        },
    ];
    let path = dir.path().join("m.tsv");
    write_manifest(&path, &recs).unwrap();
    assert!(fs::read_to_string(&path).unwrap().contains("\taudio/x.raw\t"));
    assert_eq!(load_manifest(&path).unwrap(), recs);
    let bad = vec![SampleRecord {
        src_text: "a\tb".into(),
        ..bonjour(Task::St)
    }];
    assert!(write_manifest(&path, &bad).is_err());
}

fn records(n: usize) -> Vec<SampleRecord> {
    (0..n)
        .map(|i| {
            let (s, t) = [("fr", "en"), ("de", "en"), ("es", "en")][i % 3];
            SampleRecord {
                id: format!("r{i}"),
                src_lang: s.into(),
                tgt_lang: t.into(),
                ..bonjour(Task::St)
            }
        })
        .collect()
}

#[test]
fn full_asr_ratio_doubles_the_epoch() {
    let recs = records(12);
    let policy = MixPolicy {
        asr_ratio: 1.0,
        ..MixPolicy::default()
    };
    let out = asr_augment(&recs, &policy, 0).unwrap();
    assert_eq!(out.len(), 24);
    assert_eq!(out.iter().filter(|r| r.task == Task::Asr).count(), 12);
}

#[test]
fn augmentation_is_seeded_per_epoch() {
    let recs = records(30);
    let policy = MixPolicy {
        shuffle_seed: 4,
        ..MixPolicy::default()
    };
    let a = asr_augment(&recs, &policy, 0).unwrap();
    assert_eq!(a, asr_augment(&recs, &policy, 0).unwrap());
    assert_ne!(a, asr_augment(&recs, &policy, 1).unwrap());
}

#[test]
fn heavier_pairs_come_earlier() {
    let recs = records(300);
    let mut policy = MixPolicy {
        asr_ratio: 0.0,
        ..MixPolicy::default()
    };
    policy.language_weights.insert("fr-en".into(), 8.0);
    let out = asr_augment(&recs, &policy, 0).unwrap();
    let early = out[..60].iter().filter(|r| r.src_lang == "fr").count();
    assert!(early > 40, "{early}");
}

proptest! {
    #[test]
    fn augmentation_counts(n in 1usize..40, ratio in 0.0f64..=1.0, epoch in 0u64..4) {
        let recs = records(n);
        let policy = MixPolicy { asr_ratio: ratio, ..MixPolicy::default() };
        let out = asr_augment(&recs, &policy, epoch).unwrap();
        let n_asr = (ratio * n as f64).round() as usize;
        prop_assert_eq!(out.len(), n + n_asr);
        prop_assert_eq!(out.iter().filter(|r| r.task == Task::Asr).count(), n_asr);
        let mut st: Vec<&str> = out.iter().filter(|r| r.task == Task::St).map(|r| r.id.as_str()).collect();
        st.sort_unstable();
        let mut want: Vec<&str> = recs.iter().map(|r| r.id.as_str()).collect();
        want.sort_unstable();
        prop_assert_eq!(st, want);
    }
}

fn synth(dir: &Path, seed: u64) -> Vec<SampleRecord> {
    let cfg = SynthConfig {
        seed,
        n_items: 6,
        pairs: vec![("fr".into(), "en".into()), ("de".into(), "en".into())],
        voice_seed: 0,
    };
    synth_corpus(dir, &cfg, &LangRegistry::default()).unwrap()
}

#[test]
fn synthetic_corpus_is_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ra = synth(a.path(), 3);
    synth(b.path(), 3);
    assert_eq!(ra.len(), 6);
    assert_eq!(
        fs::read(a.path().join("manifest.tsv")).unwrap(),
        fs::read(b.path().join("manifest.tsv")).unwrap()
    );
    for r in &ra {
        let name = r.audio.file_name().unwrap();
        assert_eq!(
            fs::read(&r.audio).unwrap(),
            fs::read(b.path().join("audio").join(name)).unwrap()
        );
    }
    let c = tempfile::tempdir().unwrap();
    let texts = |rs: &[SampleRecord]| rs.iter().map(|r| r.src_text.clone()).collect::<Vec<_>>();
    assert_ne!(texts(&synth(c.path(), 4)), texts(&ra));
}

#[test]
fn tones_in_generated_audio_spell_the_source_words() {
    let dir = tempfile::tempdir().unwrap();
    let recs = synth(dir.path(), 1);
    let tones = tone_map(0);
    let cfg = FrontendConfig {
        normalize: false,
        ..FrontendConfig::default()
    };
    for r in &recs {
        let w = load_audio(&r.audio).unwrap();
        let f = log_mel_spectrogram(&w, &cfg).unwrap().frames;
        let hop_per_seg = SEGMENT_SAMPLES / cfg.hop;
        let words: Vec<&str> = r.src_text.trim_end_matches('.').split(' ').chain(["."]).collect();
        assert_eq!(w.samples.len(), words.len() * SEGMENT_SAMPLES);
        for (i, word) in words.iter().enumerate() {
            // A frame wholly inside segment i.
            let t = i * hop_per_seg + 2;
            let row: Vec<f32> = f.row(t).to_vec();
            let band = (0..row.len()).fold(0, |b, k| if row[k] > row[b] { k } else { b });
            assert_eq!(band, tones[word], "{} word {i} {word}", r.id);
        }
    }
}

#[test]
fn synth_rejects_unknown_pairs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig {
        seed: 0,
        n_items: 2,
        pairs: vec![("xx".into(), "en".into())],
        voice_seed: 0,
    };
    assert!(matches!(
        synth_corpus(dir.path(), &cfg, &LangRegistry::default()),
        Err(Error::Registry(_))
    ));
}

#[test]
fn guide_config_reference_parses() {
    let md = fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("../../book/src/configuration.md")).unwrap();
    let block = md.split("```ini\n").nth(1).unwrap().split("```").next().unwrap();
    let cfg = RunConfig::from_ini(&Ini::parse(block, "configuration.md").unwrap()).unwrap();
    let mut want = RunConfig::default();
    want.data.language_weights = [("fr-en".to_string(), 2.0), ("de-en".to_string(), 1.0)].into();
    assert_eq!(cfg, want);
}
