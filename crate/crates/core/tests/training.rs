mod common;

use std::path::Path;

use common::{random_features, random_prompt, rng, tiny_config};
use llast::checkpoint::{from_bytes, load_checkpoint, save_checkpoint, to_bytes, VERSION};
use llast::data::{LangRegistry, MixPolicy, SampleRecord};
use llast::lora::LoraConfig;
use llast::model::SpeechTranslator;
use llast::synth::{synth_corpus, SynthConfig};
use llast::train::{
    adamw_step, frozen_fingerprint, loss_and_grad, loss_csv, train, AdamState, OptimizerConfig, TrainConfig, TrainData,
};
use llast::vocab::Vocabulary;
use llast::{Error, Graph, Tensor};

fn corpus(dir: &Path, n: usize) -> (Vec<SampleRecord>, Vocabulary) {
    let cfg = SynthConfig {
        seed: 0,
        n_items: n,
        pairs: vec![("fr".into(), "en".into()), ("de".into(), "en".into())],
        voice_seed: 0,
    };
    let recs = synth_corpus(dir, &cfg, &LangRegistry::default()).unwrap();
    let vocab = Vocabulary::build(
        recs.iter()
            .flat_map(|r| [r.src_text.as_str(), r.tgt_text.as_str()])
            .chain([
                "Translate the French German sentence to English.",
                "Transcribe the French German sentence to French German.",
            ]),
    );
    (recs, vocab)
}

fn run(
    recs: &[SampleRecord],
    vocab: &Vocabulary,
    seed: u64,
    steps: usize,
    dual: bool,
) -> (SpeechTranslator, String, u32, u32) {
    let mut m = SpeechTranslator::<f32>::build(&tiny_config(), vocab.clone(), seed).unwrap();
    if dual {
        m.inject_lora(&LoraConfig::speech().with_rank(2), seed).unwrap();
        m.inject_lora(&LoraConfig::language().with_rank(2), seed).unwrap();
        m.freeze_base();
    }
    let before = frozen_fingerprint(&m.store);
    let policy = MixPolicy {
        shuffle_seed: seed,
        ..MixPolicy::default()
    };
    let data = TrainData::new(&m, recs, &LangRegistry::default(), &policy, false).unwrap();
    let cfg = TrainConfig {
        batch_size: 4,
        max_steps: Some(steps),
        seed,
        optimizer: OptimizerConfig {
            peak_lr: 3e-3,
            ..OptimizerConfig::default()
        },
        ..TrainConfig::default()
    };
    let (_, trace) = train(&mut m, &data, &policy, &cfg, |_, _| Ok(())).unwrap();
    let after = frozen_fingerprint(&m.store);
    (m, loss_csv(&trace), before, after)
}

#[test]
fn same_seed_same_loss_trace() {
    let dir = tempfile::tempdir().unwrap();
    let (recs, vocab) = corpus(dir.path(), 8);
    let (_, a, ..) = run(&recs, &vocab, 5, 12, false);
    let (_, b, ..) = run(&recs, &vocab, 5, 12, false);
    assert_eq!(a, b);
    assert_eq!(a.lines().count(), 13);
    let (_, c, ..) = run(&recs, &vocab, 6, 12, false);
    assert_ne!(a, c);
}

#[test]
fn dual_lora_training_leaves_frozen_weights_alone() {
    let dir = tempfile::tempdir().unwrap();
    let (recs, vocab) = corpus(dir.path(), 8);
    let (m, _, before, after) = run(&recs, &vocab, 1, 20, true);
    assert_eq!(before, after);
    let fresh = SpeechTranslator::<f32>::build(&tiny_config(), vocab, 1).unwrap();
    let mut changed = 0;
    for (_, p) in m.store.iter() {
        match fresh.store.by_name(&p.name) {
            Some(q) if !p.trainable => assert_eq!(p.value, q.value, "{}", p.name),
            Some(q) => changed += (p.value != q.value) as usize,
            None => {}
        }
    }
    assert!(changed > 0);
}

#[test]
fn one_step_only_touches_trainable_parameters() {
    let mut m = common::tiny_model::<f32>(2);
    m.inject_lora(&LoraConfig::language().with_rank(2), 0).unwrap();
    m.freeze_base();
    let mut r = rng(1);
    let f = random_features::<f32>(&mut r, 8);
    let p = random_prompt(&mut r, &m, 8, 3);
    let ex = llast::train::TrainExample {
        id: "x".into(),
        task: llast::data::Task::St,
        features: f,
        prompt: p,
    };
    let before: Vec<Tensor<f32>> = m.store.iter().map(|(_, p)| p.value.clone()).collect();
    m.store.zero_grad();
    loss_and_grad(&mut m, &[&ex]).unwrap();
    let mut state = AdamState::default();
    adamw_step(&mut m.store, &mut state, &OptimizerConfig::default(), 1e-2).unwrap();
    for (b, (_, p)) in before.iter().zip(m.store.iter()) {
        if !p.trainable {
            assert!(
                b.data()
                    .iter()
                    .zip(p.value.data())
                    .all(|(x, y)| x.to_bits() == y.to_bits()),
                "{}",
                p.name
            );
        }
    }
}

#[test]
fn loss_falls_early_for_most_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let (recs, vocab) = corpus(dir.path(), 8);
    let mut falling = 0;
    for seed in 0..5 {
        let (_, csv, ..) = run(&recs, &vocab, seed, 50, false);
        let losses: Vec<f64> = csv
            .lines()
            .skip(1)
            .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
            .collect();
        let head: f64 = losses[..5].iter().sum::<f64>() / 5.0;
        let tail: f64 = losses[45..].iter().sum::<f64>() / 5.0;
        falling += (tail < head) as usize;
    }
    assert!(falling >= 4, "{falling}/5");
}

fn probe_logits(m: &SpeechTranslator) -> Vec<Tensor<f32>> {
    let mut r = rng(77);
    (0..3)
        .map(|_| {
            let f = random_features::<f32>(&mut r, 9);
            let p = random_prompt(&mut r, m, 9, 4);
            let mut g = Graph::new();
            let v = m.logits(&mut g, &p, &f).unwrap();
            g.value(v).clone()
        })
        .collect()
}

fn bits(ts: &[Tensor<f32>]) -> Vec<Vec<u32>> {
    ts.iter()
        .map(|t| t.data().iter().map(|x| x.to_bits()).collect())
        .collect()
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let (recs, vocab) = corpus(dir.path(), 4);
    let (mut m, ..) = run(&recs, &vocab, 3, 4, true);
    // One adapter merged, the rest not.
    {
        let SpeechTranslator { store, lm, .. } = &mut m;
        let host = lm.linears_mut().into_iter().find(|l| l.lora.is_some()).unwrap();
        llast::lora::merge(host, store).unwrap();
    }
    let state = llast::train::TrainState {
        step: 4,
        optimizer: AdamState::default(),
        schedule: llast::train::ScheduleConfig {
            warmup_steps: 1,
            total_steps: 4,
        },
        seed: 3,
    };
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&path, &m, Some(&state)).unwrap();
    let (loaded, st) = load_checkpoint(&path).unwrap();
    assert_eq!(st, Some(state));
    assert_eq!(bits(&probe_logits(&m)), bits(&probe_logits(&loaded)));
    assert_eq!(loaded.adapters().len(), m.adapters().len());
    for ((ha, a), (hb, b)) in m.adapters().iter().zip(loaded.adapters()) {
        assert_eq!((ha, a.merged, a.rank, a.scope), (&hb, b.merged, b.rank, b.scope));
    }
    assert_eq!(loaded.adapters().iter().filter(|(_, a)| a.merged).count(), 1);
    assert_eq!(frozen_fingerprint(&loaded.store), frozen_fingerprint(&m.store));
    assert_eq!(loaded.store.trainable_count(), m.store.trainable_count());
    assert_eq!(to_bytes(&loaded, None), to_bytes(&m, None));
}

#[test]
fn optimizer_moments_survive_a_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (recs, vocab) = corpus(dir.path(), 4);
    let mut m = SpeechTranslator::<f32>::build(&tiny_config(), vocab, 0).unwrap();
    m.inject_lora(&LoraConfig::speech().with_rank(2), 0).unwrap();
    m.inject_lora(&LoraConfig::language().with_rank(2), 0).unwrap();
    let policy = MixPolicy::default();
    let data = TrainData::new(&m, &recs, &LangRegistry::default(), &policy, false).unwrap();
    let cfg = TrainConfig {
        batch_size: 2,
        max_steps: Some(3),
        ..TrainConfig::default()
    };
    let (state, _) = train(&mut m, &data, &policy, &cfg, |_, _| Ok(())).unwrap();
    assert!(state.optimizer.moments.iter().flatten().count() > m.adapters().len());
    let (loaded, back) = from_bytes(&to_bytes(&m, Some(&state))).unwrap();
    assert_eq!(loaded.adapters().len(), m.adapters().len());
    assert_eq!(back, Some(state));
}

#[test]
fn damaged_checkpoints_are_integrity_errors() {
    let m = common::tiny_model::<f32>(0);
    let bytes = to_bytes(&m, None);
    assert!(matches!(
        from_bytes(&bytes[..bytes.len() / 2]),
        Err(Error::Integrity(_))
    ));
    let mut flipped = bytes.clone();
    let mid = flipped.len() / 3;
    flipped[mid] ^= 0x10;
    assert!(matches!(from_bytes(&flipped), Err(Error::Integrity(_))));
    let mut version = bytes.clone();
    version[4..8].copy_from_slice(&(VERSION + 1).to_le_bytes());
    assert!(matches!(from_bytes(&version), Err(Error::Integrity(_))));
    assert!(matches!(from_bytes(b"nope"), Err(Error::Integrity(_))));
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(
        load_checkpoint(&dir.path().join("missing")),
        Err(Error::Io { .. })
    ));
}
