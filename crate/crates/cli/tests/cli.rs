use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use llast::bleu::Smoothing;
use llast::checkpoint::load_checkpoint;
use llast::eval::{parse_hypotheses, report_tsv, score_by_pair};

fn llast(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_llast")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = llast(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    llast(args).status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SMALL: &str = "[encoder]\nd_model = 32\nff_mult = 2\nmax_frames = 400\n\n[adaptor]\nhidden_dim = 32\n\n\
                     [lm]\nd_model = 32\nff_mult = 2\nmax_seq_len = 128\n\n[train]\nbatch_size = 4\nmax_steps = 4\n";

/// Synthesizes 8 items and trains a small model with `flags`.
fn trained(dir: &Path, flags: &[&str]) -> (PathBuf, PathBuf) {
    let data = dir.join("data");
    if !data.exists() {
        ok(&[
            "synth-data",
            "--out",
            s(&data),
            "--n",
            "8",
            "--seed",
            "1",
            "--langs",
            "fr-en,es-en",
        ]);
    }
    let cfg = dir.join("small.ini");
    fs::write(&cfg, SMALL).unwrap();
    let out = dir.join(format!("run{}", flags.join("")));
    let manifest = data.join("manifest.tsv");
    let mut args = vec!["train", "--config", s(&cfg), "--data", s(&manifest), "--out", s(&out)];
    args.extend_from_slice(flags);
    ok(&args);
    (manifest, out)
}

#[test]
fn synth_data_is_reproducible_and_guarded() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        ok(&["synth-data", "--out", s(d), "--n", "32", "--seed", "0"]);
    }
    let manifest = fs::read_to_string(a.join("manifest.tsv")).unwrap();
    assert_eq!(manifest.lines().count(), 33);
    assert_eq!(manifest, fs::read_to_string(b.join("manifest.tsv")).unwrap());
    let rel = manifest.lines().nth(1).unwrap().split('\t').nth(1).unwrap();
    assert_eq!(fs::read(a.join(rel)).unwrap(), fs::read(b.join(rel)).unwrap());

    assert_eq!(code(&["synth-data", "--out", s(&a), "--n", "4", "--seed", "0"]), 3);
    ok(&["synth-data", "--out", s(&a), "--n", "4", "--seed", "0", "--force"]);
    let out = llast(&["synth-data", "--out", s(&dir.path().join("c")), "--langs", "xx-en"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("registry"));
}

#[test]
fn bad_inputs_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let missing = d.join("nope.tsv");
    assert_eq!(code(&["train", "--data", s(&missing), "--out", s(&d.join("o"))]), 3);
    let bad_cfg = d.join("bad.ini");
    fs::write(&bad_cfg, "[train]\npeek_lr = 1\n").unwrap();
    assert_eq!(
        code(&[
            "train",
            "--config",
            s(&bad_cfg),
            "--data",
            s(&missing),
            "--out",
            s(&d.join("o"))
        ]),
        2
    );
    assert_eq!(
        code(&[
            "train",
            "--data",
            s(&missing),
            "--out",
            s(&d.join("o")),
            "--s-lora",
            "--l-lora"
        ]),
        2
    );

    let empty = d.join("empty.tsv");
    fs::write(&empty, "id\taudio\tsrc_lang\ttgt_lang\tsrc_text\ttgt_text\n").unwrap();
    let (_, run) = trained(d, &[]);
    let ckpt = run.join("model.ckpt");
    assert_eq!(
        code(&[
            "eval",
            "--ckpt",
            s(&ckpt),
            "--data",
            s(&empty),
            "--report",
            s(&d.join("r.tsv"))
        ]),
        2
    );

    let mut bytes = fs::read(&ckpt).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0xff;
    let corrupt = d.join("corrupt.ckpt");
    fs::write(&corrupt, bytes).unwrap();
    assert_eq!(
        code(&["merge-lora", "--ckpt", s(&corrupt), "--out", s(&d.join("m.ckpt"))]),
        3
    );
}

#[test]
fn train_writes_run_artifacts_and_honors_seed() {
    let dir = tempfile::tempdir().unwrap();
    let (_, run) = trained(dir.path(), &["--seed", "5", "--asr-ratio", "0"]);
    let resolved = fs::read_to_string(run.join("run_config.resolved")).unwrap();
    assert!(resolved.contains("seed = 5"));
    assert!(resolved.contains("asr_ratio = 0"));
    assert!(resolved.contains("peak_lr = 0.0002"));
    let csv = fs::read_to_string(run.join("loss.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
    assert!(run.join("model.ckpt").exists());
}

#[test]
fn no_lora_trains_only_the_adaptor() {
    let dir = tempfile::tempdir().unwrap();
    let (manifest, base) = trained(dir.path(), &[]);
    let base_ckpt = base.join("model.ckpt");
    let out = dir.path().join("adapted");
    ok(&[
        "train",
        "--data",
        s(&manifest),
        "--out",
        s(&out),
        "--init-from",
        s(&base_ckpt),
        "--no-lora",
        "--max-steps",
        "3",
    ]);
    let (before, _) = load_checkpoint(&base_ckpt).unwrap();
    let (after, _) = load_checkpoint(&out.join("model.ckpt")).unwrap();
    assert!(after.adapters().is_empty());
    for ((_, a), (_, b)) in after.store.iter().zip(before.store.iter()) {
        assert_eq!(a.trainable, a.name.starts_with("adaptor."), "{}", a.name);
        if a.trainable {
            assert_ne!(a.value, b.value, "{}", a.name);
        } else {
            assert_eq!(a.value, b.value, "{}", a.name);
        }
    }
}

#[test]
fn eval_report_matches_recomputation_from_hypotheses() {
    let dir = tempfile::tempdir().unwrap();
    let (manifest, run) = trained(dir.path(), &[]);
    let report = dir.path().join("report.tsv");
    let stdout = ok(&[
        "eval",
        "--ckpt",
        s(&run.join("model.ckpt")),
        "--data",
        s(&manifest),
        "--report",
        s(&report),
        "--beam",
        "2",
        "--max-new-tokens",
        "6",
    ]);
    for pair in ["es-en", "fr-en", "all"] {
        assert!(stdout.contains(pair), "{stdout}");
    }
    let items = parse_hypotheses(&fs::read_to_string(report.with_extension("hyp.tsv")).unwrap()).unwrap();
    assert_eq!(items.len(), 8);
    let again = report_tsv(&score_by_pair(&items, Smoothing::Exp).unwrap());
    assert_eq!(fs::read_to_string(&report).unwrap(), again);
}

#[test]
fn merge_lora_preserves_decoding() {
    let dir = tempfile::tempdir().unwrap();
    let (manifest, run) = trained(dir.path(), &["--dual-lora"]);
    let ckpt = run.join("model.ckpt");
    let merged = dir.path().join("merged.ckpt");
    let stdout = ok(&["merge-lora", "--ckpt", s(&ckpt), "--out", s(&merged)]);
    assert!(stdout.contains("merged 8 adapters"), "{stdout}");
    let (m, _) = load_checkpoint(&merged).unwrap();
    assert!(m.adapters().is_empty());

    let records = llast::data::load_manifest(&manifest).unwrap();
    for r in records.iter().take(5) {
        let args = |c: &Path| {
            ok(&[
                "translate",
                "--ckpt",
                s(c),
                "--audio",
                s(&r.audio),
                "--src",
                &r.src_lang,
                "--tgt",
                &r.tgt_lang,
                "--max-new-tokens",
                "6",
            ])
        };
        assert_eq!(args(&ckpt), args(&merged), "{}", r.id);
    }

    let again = dir.path().join("again.ckpt");
    let stdout = ok(&["merge-lora", "--ckpt", s(&merged), "--out", s(&again)]);
    assert!(stdout.contains("nothing to merge"));
    assert!(!again.exists());
}
