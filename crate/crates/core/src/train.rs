//! Masked autoregressive training with AdamW and a warmup/linear-decay
//! schedule.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::audio::load_speech;
use crate::autodiff::{Graph, ParamStore};
use crate::data::{asr_augment, build_prompt, encode_prompt, LangRegistry, MixPolicy, PromptMode, SampleRecord, Task};
use crate::error::{Error, Result};
use crate::lm::PromptSequence;
use crate::model::SpeechTranslator;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub peak_lr: f64,
    /// Global gradient-norm clip; 0 disables.
    pub clip_norm: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            weight_decay: 0.01,
            peak_lr: 2e-4,
            clip_norm: 1.0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.beta1 && self.beta1 < self.beta2 && self.beta2 < 1.0) {
            return Err(Error::config(format!(
                "need 0 < beta1 < beta2 < 1, got {} and {}",
                self.beta1, self.beta2
            )));
        }
        if !(self.eps > 0.0 && self.peak_lr > 0.0 && self.weight_decay >= 0.0 && self.clip_norm >= 0.0) {
            return Err(Error::config(
                "eps and peak_lr must be positive, weight_decay and clip_norm non-negative",
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScheduleConfig {
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl ScheduleConfig {
    /// Warmup covering `frac` of `total` steps, at least one step.
    pub fn with_warmup_fraction(total: usize, frac: f64) -> Result<Self> {
        let warmup = ((total as f64 * frac).round() as usize).max(1);
        let s = ScheduleConfig {
            warmup_steps: warmup,
            total_steps: total,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0 < self.warmup_steps && self.warmup_steps < self.total_steps) {
            return Err(Error::config(format!(
                "need 0 < warmup_steps < total_steps, got {} and {}",
                self.warmup_steps, self.total_steps
            )));
        }
        Ok(())
    }
}

/// Linear 0 → peak over `[0, warmup]`, then linear peak → 0 over
/// `[warmup, total]`.
pub fn lr_at(s: &ScheduleConfig, o: &OptimizerConfig, step: usize) -> Result<f64> {
    s.validate()?;
    if step > s.total_steps {
        return Err(Error::config(format!(
            "step {step} outside schedule of {} steps",
            s.total_steps
        )));
    }
    let (w, t) = (s.warmup_steps as f64, s.total_steps as f64);
    let x = step as f64;
    Ok(if x <= w {
        o.peak_lr * x / w
    } else {
        o.peak_lr * (t - x) / (t - w)
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Moments<T> {
    pub m: Tensor<T>,
    pub v: Tensor<T>,
}

/// AdamW state: step counter and moments per parameter id. Moments exist
/// only for parameters that have been updated while trainable.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub moments: Vec<Option<Moments<T>>>,
}

impl<T: Scalar> Default for AdamState<T> {
    fn default() -> Self {
        AdamState {
            step: 0,
            moments: Vec::new(),
        }
    }
}

/// Scales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(store: &mut ParamStore<T>, max_norm: f64) -> f64 {
    let norm = store
        .iter()
        .filter_map(|(_, p)| p.grad.as_ref())
        .flat_map(|g| g.data().iter())
        .map(|&x| x.as_f64() * x.as_f64())
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = T::of(max_norm / norm);
        for (_, p) in store.iter_mut() {
            if let Some(g) = &mut p.grad {
                g.data_mut().iter_mut().for_each(|x| *x *= s);
            }
        }
    }
    norm
}

/// One decoupled-weight-decay Adam update of every trainable parameter
/// holding a gradient. Frozen parameters are not touched.
pub fn adamw_step<T: Scalar>(
    store: &mut ParamStore<T>,
    state: &mut AdamState<T>,
    o: &OptimizerConfig,
    lr: f64,
) -> Result<()> {
    for (_, p) in store.iter() {
        if let Some(g) = &p.grad {
            if p.trainable && !g.all_finite() {
                return Err(Error::NonFinite(format!("gradient of {}", p.name)));
            }
        }
    }
    state.step += 1;
    if state.moments.len() < store.len() {
        state.moments.resize(store.len(), None);
    }
    let t = state.step as i32;
    let bc1 = 1.0 - o.beta1.powi(t);
    let bc2 = 1.0 - o.beta2.powi(t);
    let (b1, b2) = (T::of(o.beta1), T::of(o.beta2));
    let (one, eps) = (T::one(), T::of(o.eps));
    let (lr_t, decay) = (T::of(lr), T::of(1.0 - lr * o.weight_decay));
    let (inv_bc1, inv_bc2) = (T::of(1.0 / bc1), T::of(1.0 / bc2));
    for (id, p) in store.iter_mut() {
        let Some(g) = p.grad.as_ref().filter(|_| p.trainable) else {
            continue;
        };
        let mo = state.moments[id.index()].get_or_insert_with(|| Moments {
            m: Tensor::zeros(p.value.shape()),
            v: Tensor::zeros(p.value.shape()),
        });
        let w = p.value.data_mut();
        let (m, v) = (mo.m.data_mut(), mo.v.data_mut());
        for i in 0..w.len() {
            let gi = g.data()[i];
            m[i] = b1 * m[i] + (one - b1) * gi;
            v[i] = b2 * v[i] + (one - b2) * gi * gi;
            let m_hat = m[i] * inv_bc1;
            let v_hat = v[i] * inv_bc2;
            w[i] = w[i] * decay - lr_t * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// A record turned into model input: encoder features and prompt layout.
#[derive(Clone, Debug)]
pub struct TrainExample {
    pub id: String,
    pub task: Task,
    pub features: Tensor<f32>,
    pub prompt: PromptSequence,
}

/// Loads audio and assembles training prompts for `records`. Audio shared
/// by several records is decoded once.
pub fn prepare_examples<T: Scalar>(
    model: &SpeechTranslator<T>,
    records: &[SampleRecord],
    langs: &LangRegistry,
    include_transcript: bool,
) -> Result<Vec<TrainExample>> {
    let mut cache: HashMap<PathBuf, Tensor<f32>> = HashMap::new();
    records
        .iter()
        .map(|r| {
            let features = match cache.get(&r.audio) {
                Some(f) => f.clone(),
                None => {
                    let f = model.features(&load_speech(&r.audio)?)?;
                    cache.insert(r.audio.clone(), f.clone());
                    f
                }
            };
            let built = build_prompt(langs, r, PromptMode::Train, include_transcript)?;
            let prompt = encode_prompt(
                &model.vocab,
                &built,
                model.audio_rows(features.rows()),
                PromptMode::Train,
            )?;
            Ok(TrainExample {
                id: r.id.clone(),
                task: r.task,
                features,
                prompt,
            })
        })
        .collect()
}

fn masked_total(batch: &[&TrainExample]) -> Result<usize> {
    if batch.is_empty() {
        return Err(Error::DegenerateBatch("empty batch".into()));
    }
    for ex in batch {
        if ex.prompt.masked_count() == 0 {
            return Err(Error::DegenerateBatch(format!("{} has no target positions", ex.id)));
        }
    }
    Ok(batch.iter().map(|e| e.prompt.masked_count()).sum())
}

/// Mean token NLL over all masked positions of the batch.
pub fn compute_loss<T: Scalar>(model: &SpeechTranslator<T>, batch: &[&TrainExample]) -> Result<f64> {
    let denom = masked_total(batch)? as f64;
    let mut total = 0.0;
    for ex in batch {
        let mut g = Graph::new();
        let loss = model.sequence_loss(&mut g, &ex.prompt, &ex.features.cast(), denom)?;
        total += g.value(loss).item().as_f64();
    }
    Ok(total)
}

/// Like [`compute_loss`], also accumulating gradients into the model's
/// trainable parameters.
pub fn loss_and_grad<T: Scalar>(model: &mut SpeechTranslator<T>, batch: &[&TrainExample]) -> Result<f64> {
    let denom = masked_total(batch)? as f64;
    let mut total = 0.0;
    for ex in batch {
        let mut g = Graph::new();
        let loss = model.sequence_loss(&mut g, &ex.prompt, &ex.features.cast(), denom)?;
        total += g.value(loss).item().as_f64();
        g.backward(loss, &mut model.store)?;
    }
    Ok(total)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    pub batch_size: usize,
    /// Overrides `epochs` when set: train for exactly this many steps.
    pub max_steps: Option<usize>,
    pub warmup_fraction: f64,
    pub seed: u64,
    /// Invoke the checkpoint hook every this many steps; 0 disables.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: OptimizerConfig::default(),
            epochs: 1,
            batch_size: 8,
            max_steps: None,
            warmup_fraction: 0.1,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossPoint {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub step: usize,
    pub optimizer: AdamState<f32>,
    pub schedule: ScheduleConfig,
    pub seed: u64,
}

/// Training data: the base records plus prepared examples for each
/// `(id, task)` the mixing policy can emit.
pub struct TrainData {
    records: Vec<SampleRecord>,
    index: HashMap<(String, Task), usize>,
    examples: Vec<TrainExample>,
}

impl TrainData {
    pub fn new<T: Scalar>(
        model: &SpeechTranslator<T>,
        records: &[SampleRecord],
        langs: &LangRegistry,
        policy: &MixPolicy,
        include_transcript: bool,
    ) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::DegenerateBatch("no training records".into()));
        }
        let mut all: Vec<SampleRecord> = records.to_vec();
        if policy.asr_ratio > 0.0 {
            all.extend(records.iter().map(SampleRecord::as_asr));
        }
        let examples = prepare_examples(model, &all, langs, include_transcript)?;
        let index = all
            .iter()
            .enumerate()
            .map(|(i, r)| ((r.id.clone(), r.task), i))
            .collect();
        Ok(TrainData {
            records: records.to_vec(),
            index,
            examples,
        })
    }

    pub fn examples(&self) -> &[TrainExample] {
        &self.examples
    }

    /// Example order for one epoch under `policy`.
    pub fn epoch(&self, policy: &MixPolicy, epoch: u64) -> Result<Vec<&TrainExample>> {
        asr_augment(&self.records, policy, epoch)?
            .iter()
            .map(|r| {
                self.index
                    .get(&(r.id.clone(), r.task))
                    .map(|&i| &self.examples[i])
                    .ok_or_else(|| Error::State(format!("no prepared example for {}", r.id)))
            })
            .collect()
    }

    pub fn steps_per_epoch(&self, policy: &MixPolicy, batch_size: usize) -> usize {
        let n_asr = (policy.asr_ratio * self.records.len() as f64).round() as usize;
        (self.records.len() + n_asr).div_ceil(batch_size)
    }
}

/// Runs training; `on_checkpoint` is called every `checkpoint_every` steps
/// and once at the end.
pub fn train(
    model: &mut SpeechTranslator<f32>,
    data: &TrainData,
    policy: &MixPolicy,
    cfg: &TrainConfig,
    mut on_checkpoint: impl FnMut(&SpeechTranslator<f32>, &TrainState) -> Result<()>,
) -> Result<(TrainState, Vec<LossPoint>)> {
    cfg.optimizer.validate()?;
    if cfg.batch_size == 0 {
        return Err(Error::config("batch_size must be at least 1"));
    }
    let per_epoch = data.steps_per_epoch(policy, cfg.batch_size);
    let total = cfg.max_steps.unwrap_or(per_epoch * cfg.epochs);
    let schedule = ScheduleConfig::with_warmup_fraction(total, cfg.warmup_fraction)?;
    let mut state = TrainState {
        step: 0,
        optimizer: AdamState::default(),
        schedule,
        seed: cfg.seed,
    };
    let mut trace = Vec::with_capacity(total);
    let mut epoch = 0u64;
    'outer: loop {
        let order = data.epoch(policy, epoch)?;
        for batch in order.chunks(cfg.batch_size) {
            if state.step == total {
                break 'outer;
            }
            let step = state.step + 1;
            let lr = lr_at(&schedule, &cfg.optimizer, step)?;
            model.store.zero_grad();
            let loss = loss_and_grad(model, batch)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("loss at step {step}")));
            }
            clip_grad_norm(&mut model.store, cfg.optimizer.clip_norm);
            adamw_step(&mut model.store, &mut state.optimizer, &cfg.optimizer, lr)?;
            state.step = step;
            trace.push(LossPoint { step, loss, lr });
            log::debug!("step {step} loss {loss:.5} lr {lr:.3e}");
            if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 && step < total {
                on_checkpoint(model, &state)?;
            }
        }
        epoch += 1;
    }
    model.store.zero_grad();
    on_checkpoint(model, &state)?;
    Ok((state, trace))
}

/// `step,loss,lr` CSV.
pub fn loss_csv(trace: &[LossPoint]) -> String {
    let mut s = String::from("step,loss,lr\n");
    for p in trace {
        s.push_str(&format!("{},{},{}\n", p.step, p.loss, p.lr));
    }
    s
}

pub fn write_loss_csv(path: &Path, trace: &[LossPoint]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(loss_csv(trace).as_bytes()).map_err(|e| Error::io(path, e))
}

/// Order-sensitive digest of every frozen parameter's name and bits.
pub fn frozen_fingerprint<T: Scalar>(store: &ParamStore<T>) -> u32 {
    let mut h = crc32fast::Hasher::new();
    for (_, p) in store.iter().filter(|(_, p)| !p.trainable) {
        h.update(p.name.as_bytes());
        for &x in p.value.data() {
            h.update(&x.as_f64().to_bits().to_le_bytes());
        }
    }
    h.finalize()
}
