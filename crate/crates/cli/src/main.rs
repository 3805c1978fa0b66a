use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use rayon::prelude::*;

use llast::bleu::Smoothing;
use llast::checkpoint::{load_checkpoint, save_checkpoint};
use llast::config::{LoraMode, RunConfig};
use llast::data::{corpus_vocabulary, load_manifest, LangRegistry};
use llast::decode::{translate, DecodeConfig};
use llast::eval::{decode_record, hypotheses_tsv, report_tsv, score_by_pair};
use llast::lm::PromptSequence;
use llast::model::SpeechTranslator;
use llast::synth::{synth_corpus, SynthConfig};
use llast::train::{train, write_loss_csv, TrainData};
use llast::vocab::{AUDIO_CLOSE, AUDIO_OPEN, BOS};
use llast::{Graph, Tensor};

mod exit;

#[derive(Parser)]
#[command(name = "llast", version, about = "Speech translation with a frozen LM and dual LoRA")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic tone-coded corpus and its manifest.
    SynthData(SynthArgs),
    /// Train a model on a manifest.
    Train(TrainArgs),
    /// Decode a manifest and write a BLEU report.
    Eval(EvalArgs),
    /// Translate one audio file.
    Translate(TranslateArgs),
    /// Fold all LoRA adapters into their base weights.
    MergeLora(MergeArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 32)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Comma-separated `src-tgt` pairs.
    #[arg(long, default_value = "fr-en")]
    langs: String,
    /// Seed of the word-to-tone map; corpora used together must share it.
    #[arg(long, default_value_t = 0)]
    voice_seed: u64,
    /// Write into a non-empty directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, group = "lora")]
    dual_lora: bool,
    #[arg(long, group = "lora")]
    s_lora: bool,
    #[arg(long, group = "lora")]
    l_lora: bool,
    /// Freeze encoder and LM and train only the adaptor.
    #[arg(long, group = "lora")]
    no_lora: bool,
    #[arg(long)]
    asr_ratio: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_steps: Option<usize>,
    /// Start from this checkpoint's weights and vocabulary.
    #[arg(long)]
    init_from: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    report: PathBuf,
    /// Decoded hypotheses; defaults to the report path with `.hyp.tsv`.
    #[arg(long)]
    hyps: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    beam: usize,
    #[arg(long, default_value_t = 32)]
    max_new_tokens: usize,
    #[arg(long, default_value_t = 0.0)]
    length_norm_alpha: f64,
    #[arg(long, default_value = "exp")]
    smoothing: Smoothing,
    /// Put the reference transcript into the prompt.
    #[arg(long)]
    transcript: bool,
}

#[derive(Args)]
struct TranslateArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    audio: PathBuf,
    #[arg(long)]
    src: String,
    #[arg(long)]
    tgt: String,
    #[arg(long, default_value_t = 5)]
    beam: usize,
    #[arg(long, default_value_t = 32)]
    max_new_tokens: usize,
}

#[derive(Args)]
struct MergeArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn parse_pairs(s: &str, langs: &LangRegistry) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    for item in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let Some((src, tgt)) = item.split_once('-') else {
            return Err(exit::usage(format!("language pair {item:?} is not src-tgt")));
        };
        langs.name(src)?;
        langs.name(tgt)?;
        pairs.push((src.to_string(), tgt.to_string()));
    }
    if pairs.is_empty() {
        return Err(exit::usage("no language pairs given"));
    }
    Ok(pairs)
}

fn synth_data(a: SynthArgs) -> Result<()> {
    let langs = LangRegistry::default();
    let pairs = parse_pairs(&a.langs, &langs)?;
    if a.out.exists() {
        let non_empty = fs::read_dir(&a.out)
            .with_context(|| format!("reading {}", a.out.display()))?
            .next()
            .is_some();
        if non_empty && !a.force {
            return Err(exit::io(format!(
                "{} is not empty; pass --force to write into it",
                a.out.display()
            )));
        }
    }
    let cfg = SynthConfig {
        seed: a.seed,
        n_items: a.n,
        pairs,
        voice_seed: a.voice_seed,
    };
    let recs = synth_corpus(&a.out, &cfg, &langs)?;
    println!("wrote {} items to {}", recs.len(), a.out.join("manifest.tsv").display());
    Ok(())
}

fn resolve_train_config(a: &TrainArgs) -> Result<RunConfig> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let mode = if a.dual_lora {
        Some(LoraMode::Dual)
    } else if a.s_lora {
        Some(LoraMode::Speech)
    } else if a.l_lora {
        Some(LoraMode::Language)
    } else if a.no_lora {
        Some(LoraMode::None)
    } else {
        None
    };
    if let Some(m) = mode {
        cfg.lora.mode = m;
        cfg.lora.freeze_base = true;
    }
    if let Some(r) = a.asr_ratio {
        cfg.data.asr_ratio = r;
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    if let Some(n) = a.max_steps {
        cfg.train.max_steps = Some(n);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let cfg = resolve_train_config(&a)?;
    let langs = LangRegistry::default();
    let records = load_manifest(&a.data)?;
    if records.is_empty() {
        return Err(exit::usage(format!("{} has no records", a.data.display())));
    }
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut model = match &a.init_from {
        Some(p) => {
            let (m, _) = load_checkpoint(p)?;
            if a.config.is_some() && m.cfg.encoder != cfg.model.encoder {
                warn!(
                    "model sections of the config are ignored; {} defines the model",
                    p.display()
                );
            }
            m
        }
        None => {
            let vocab = corpus_vocabulary(&records, &langs)?;
            SpeechTranslator::build(&cfg.model, vocab, cfg.train.seed)?
        }
    };
    let resolved = RunConfig {
        model: model.cfg.clone(),
        ..cfg.clone()
    }
    .to_ini();
    fs::write(a.out.join("run_config.resolved"), resolved.to_string())
        .with_context(|| format!("writing {}", a.out.join("run_config.resolved").display()))?;

    for lc in cfg.lora.active() {
        let n = model.inject_lora(lc, cfg.train.seed)?;
        info!("attached {n} {} adapters of rank {}", lc.scope, lc.rank);
    }
    if cfg.lora.freeze_base {
        model.freeze_base();
    }
    info!(
        "{} parameters, {} trainable",
        model.store.total_count(),
        model.store.trainable_count()
    );

    let policy = cfg.mix_policy();
    let data = TrainData::new(&model, &records, &langs, &policy, cfg.data.transcript_in_train)?;
    let out = a.out.clone();
    let (state, trace) = train(&mut model, &data, &policy, &cfg.train, |m, st| {
        let path = out.join(format!("checkpoint-{:06}.ckpt", st.step));
        info!("step {}: writing {}", st.step, path.display());
        save_checkpoint(&path, m, Some(st))
    })?;
    save_checkpoint(&a.out.join("model.ckpt"), &model, Some(&state))?;
    write_loss_csv(&a.out.join("loss.csv"), &trace)?;
    let last = trace.last().map_or(f64::NAN, |p| p.loss);
    println!("trained {} steps, final loss {last:.5}", state.step);
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let (model, _) = load_checkpoint(&a.ckpt)?;
    let records = load_manifest(&a.data)?;
    if records.is_empty() {
        return Err(exit::usage(format!("{} has no records", a.data.display())));
    }
    let langs = LangRegistry::default();
    let cfg = DecodeConfig {
        beam_size: a.beam,
        max_new_tokens: a.max_new_tokens,
        length_norm_alpha: a.length_norm_alpha,
    };
    cfg.validate()?;
    let items = records
        .par_iter()
        .map(|r| decode_record(&model, r, &langs, &cfg, a.transcript))
        .collect::<llast::Result<Vec<_>>>()?;
    let truncated = items.iter().filter(|i| i.truncated).count();
    if truncated > 0 {
        warn!("{truncated} hypotheses hit the token budget without EOS");
    }
    let scores = score_by_pair(&items, a.smoothing)?;
    fs::write(&a.report, report_tsv(&scores)).with_context(|| format!("writing {}", a.report.display()))?;
    let hyps = a.hyps.unwrap_or_else(|| a.report.with_extension("hyp.tsv"));
    fs::write(&hyps, hypotheses_tsv(&items)).with_context(|| format!("writing {}", hyps.display()))?;
    for (pair, s) in &scores {
        println!("{pair}\tBLEU {:.2}", s.score);
    }
    Ok(())
}

fn translate_cmd(a: TranslateArgs) -> Result<()> {
    let (model, _) = load_checkpoint(&a.ckpt)?;
    let audio = llast::audio::load_speech(&a.audio)?;
    let cfg = DecodeConfig {
        beam_size: a.beam,
        max_new_tokens: a.max_new_tokens,
        ..DecodeConfig::default()
    };
    let text = translate(&model, &audio, &a.src, &a.tgt, &LangRegistry::default(), &cfg)?;
    println!("{text}");
    Ok(())
}

/// Logits on a fixed input, for checking weight surgery.
fn probe_logits(model: &SpeechTranslator) -> llast::Result<Tensor<f32>> {
    let frames = 4 * model.cfg.encoder.subsample_factor;
    let n_mels = model.cfg.frontend.n_mels;
    let data = (0..frames * n_mels).map(|i| (i as f32 * 0.37).sin()).collect();
    let features = Tensor::new(&[frames, n_mels], data)?;
    let prompt = PromptSequence::for_inference(vec![AUDIO_OPEN], model.audio_rows(frames), vec![AUDIO_CLOSE, BOS]);
    let mut g = Graph::new();
    let v = model.logits(&mut g, &prompt, &features)?;
    Ok(g.value(v).clone())
}

fn merge_cmd(a: MergeArgs) -> Result<()> {
    let (model, _) = load_checkpoint(&a.ckpt)?;
    if model.adapters().is_empty() {
        println!("{} has no LoRA adapters; nothing to merge", a.ckpt.display());
        return Ok(());
    }
    let merged = model.strip_lora()?;
    let before = probe_logits(&model)?;
    let after = probe_logits(&merged)?;
    let diff = before.max_abs_diff(&after);
    if diff.is_nan() || diff >= 1e-5 {
        return Err(exit::numeric(format!(
            "merged model drifts by {diff:e} on the probe input"
        )));
    }
    save_checkpoint(&a.out, &merged, None)?;
    println!(
        "merged {} adapters into {} (probe max diff {diff:.2e})",
        model.adapters().len(),
        a.out.display()
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::SynthData(a) => synth_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Translate(a) => translate_cmd(a),
        Command::MergeLora(a) => merge_cmd(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("LLAST_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit::code(&e))
        }
    }
}
