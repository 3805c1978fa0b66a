#![allow(dead_code)]

use llast::audio::FrontendConfig;
use llast::encoder::EncoderConfig;
use llast::lm::{LmConfig, PromptSequence};
use llast::model::{ModelConfig, SpeechTranslator};
use llast::vocab::{Vocabulary, AUDIO_CLOSE, AUDIO_OPEN};
use llast::{Scalar, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const N_MELS: usize = 8;

/// d = 16, two layers everywhere.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        frontend: FrontendConfig {
            n_mels: N_MELS,
            ..FrontendConfig::default()
        },
        encoder: EncoderConfig {
            n_mels: N_MELS,
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            ff_mult: 2,
            subsample_factor: 2,
            max_frames: 128,
        },
        adaptor_hidden: 16,
        lm: LmConfig {
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            ff_mult: 2,
            vocab_size: 0,
            max_seq_len: 128,
        },
    }
}

pub fn tiny_vocab() -> Vocabulary {
    Vocabulary::build(["le chat voit le chien.", "the cat sees the dog."])
}

pub fn tiny_model<T: Scalar>(seed: u64) -> SpeechTranslator<T> {
    SpeechTranslator::build(&tiny_config(), tiny_vocab(), seed).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_features<T: Scalar>(rng: &mut impl Rng, frames: usize) -> Tensor<T> {
    Tensor::from_fn(&[frames, N_MELS], |_| T::of(rng.gen_range(-1.0..1.0)))
}

/// Training-layout prompt with `n_target` random target tokens.
pub fn random_prompt<T: Scalar>(
    rng: &mut impl Rng,
    model: &SpeechTranslator<T>,
    frames: usize,
    n_target: usize,
) -> PromptSequence {
    let v = model.vocab.len() as u32;
    let target: Vec<u32> = (0..n_target).map(|_| rng.gen_range(6..v)).collect();
    let after = vec![AUDIO_CLOSE, rng.gen_range(6..v)];
    PromptSequence::for_training(vec![AUDIO_OPEN], model.audio_rows(frames), after, &target)
}
