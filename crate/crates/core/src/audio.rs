//! Acoustic frontend: waveform ingestion, integer-factor resampling and
//! log-mel features.
//!
//! Feature configuration follows the usual 16 kHz speech setup: 25 ms Hann
//! windows every 10 ms, an 80-band Slaney-style mel filterbank over 0–8 kHz,
//! and natural-log compression with a floor of `ln(1e-10)`.

use std::fs;
use std::io::Write;
use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SPEECH_RATE: u32 = 16_000;
pub const INGEST_RATES: [u32; 2] = [16_000, 48_000];
const RAW_MAGIC: &[u8; 4] = b"RAWF";

#[derive(Clone, Debug, PartialEq)]
pub struct AudioWaveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl AudioWaveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::TooShort { len: 0, need: 1 });
        }
        if sample_rate == 0 {
            return Err(Error::config("sample rate must be positive"));
        }
        Ok(AudioWaveform { samples, sample_rate })
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrontendConfig {
    pub n_mels: usize,
    pub win: usize,
    pub hop: usize,
    pub log_floor: f32,
    pub f_min: f64,
    pub f_max: f64,
    /// Per-utterance mean/variance normalization before encoding.
    pub normalize: bool,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        FrontendConfig {
            n_mels: 80,
            win: 400,
            hop: 160,
            log_floor: (1e-10f64).ln() as f32,
            f_min: 0.0,
            f_max: 8000.0,
            normalize: true,
        }
    }
}

impl FrontendConfig {
    pub fn n_bins(&self) -> usize {
        self.win / 2 + 1
    }

    /// Number of frames for `len` samples (no padding).
    pub fn frame_count(&self, len: usize) -> Option<usize> {
        (len >= self.win).then(|| 1 + (len - self.win) / self.hop)
    }
}

/// `X_s`: log-mel frames, `[T × n_mels]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AcousticFeatures {
    pub frames: Tensor<f32>,
    pub frame_hop_s: f64,
    pub n_mels: usize,
}

impl AcousticFeatures {
    pub fn num_frames(&self) -> usize {
        self.frames.rows()
    }

    /// Shifts and scales all cells to zero mean and unit variance over the
    /// whole utterance. Constant inputs map to all zeros.
    pub fn normalized(&self) -> Tensor<f32> {
        let d = self.frames.data();
        let n = d.len() as f64;
        let mean = d.iter().map(|&x| x as f64).sum::<f64>() / n;
        let var = d.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt().max(1e-5);
        self.frames.map(|x| ((x as f64 - mean) / std) as f32)
    }
}

fn hz_to_mel(f: f64) -> f64 {
    const F_SP: f64 = 200.0 / 3.0;
    const MIN_LOG_HZ: f64 = 1000.0;
    let min_log_mel = MIN_LOG_HZ / F_SP;
    let logstep = (6.4f64).ln() / 27.0;
    if f >= MIN_LOG_HZ {
        min_log_mel + (f / MIN_LOG_HZ).ln() / logstep
    } else {
        f / F_SP
    }
}

fn mel_to_hz(m: f64) -> f64 {
    const F_SP: f64 = 200.0 / 3.0;
    const MIN_LOG_HZ: f64 = 1000.0;
    let min_log_mel = MIN_LOG_HZ / F_SP;
    let logstep = (6.4f64).ln() / 27.0;
    if m >= min_log_mel {
        MIN_LOG_HZ * (logstep * (m - min_log_mel)).exp()
    } else {
        m * F_SP
    }
}

/// Edge frequencies (Hz) of the triangular filters: `n_mels + 2` points
/// equally spaced on the mel scale.
pub fn mel_edges(cfg: &FrontendConfig) -> Vec<f64> {
    let (lo, hi) = (hz_to_mel(cfg.f_min), hz_to_mel(cfg.f_max));
    (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect()
}

/// Center frequency in Hz of mel band `k`.
pub fn mel_center_hz(cfg: &FrontendConfig, k: usize) -> f64 {
    mel_edges(cfg)[k + 1]
}

/// Triangular, area-normalized mel filterbank, `[n_mels × (win/2 + 1)]`.
pub fn mel_filterbank(cfg: &FrontendConfig, sample_rate: u32) -> Tensor<f32> {
    let edges = mel_edges(cfg);
    let n_bins = cfg.n_bins();
    let bin_hz = |j: usize| j as f64 * sample_rate as f64 / cfg.win as f64;
    let mut w = vec![0f32; cfg.n_mels * n_bins];
    for m in 0..cfg.n_mels {
        let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
        let norm = 2.0 / (r - l);
        for j in 0..n_bins {
            let f = bin_hz(j);
            let up = (f - l) / (c - l);
            let down = (r - f) / (r - c);
            let v = up.min(down).max(0.0);
            w[m * n_bins + j] = (v * norm) as f32;
        }
    }
    Tensor::new(&[cfg.n_mels, n_bins], w).expect("filterbank shape")
}

/// Periodic Hann window.
pub fn hann(n: usize) -> Vec<f32> {
    (0..n)
        .map(|i| (0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos()) as f32)
        .collect()
}

/// Windowed power spectra `|DFT|²`, `[T × (win/2 + 1)]`.
pub fn power_spectrogram(w: &AudioWaveform, cfg: &FrontendConfig) -> Result<Tensor<f32>> {
    let t = cfg.frame_count(w.samples.len()).ok_or(Error::TooShort {
        len: w.samples.len(),
        need: cfg.win,
    })?;
    let window = hann(cfg.win);
    let fft = FftPlanner::<f32>::new().plan_fft_forward(cfg.win);
    let n_bins = cfg.n_bins();
    let mut out = Vec::with_capacity(t * n_bins);
    let mut buf = vec![Complex::new(0f32, 0f32); cfg.win];
    for f in 0..t {
        let start = f * cfg.hop;
        for (i, b) in buf.iter_mut().enumerate() {
            *b = Complex::new(w.samples[start + i] * window[i], 0.0);
        }
        fft.process(&mut buf);
        out.extend(buf[..n_bins].iter().map(|c| c.norm_sqr()));
    }
    Tensor::new(&[t, n_bins], out)
}

/// `F_a`: 16 kHz waveform to log-mel features.
pub fn log_mel_spectrogram(w: &AudioWaveform, cfg: &FrontendConfig) -> Result<AcousticFeatures> {
    if w.sample_rate != SPEECH_RATE {
        return Err(Error::config(format!(
            "log-mel expects {SPEECH_RATE} Hz audio, got {} Hz; resample first",
            w.sample_rate
        )));
    }
    let power = power_spectrogram(w, cfg)?;
    let fb = mel_filterbank(cfg, w.sample_rate);
    let mel = power.matmul_t(&fb)?;
    let floor = cfg.log_floor;
    let frames = mel.map(|e| (e.max(0.0) as f64).ln().max(floor as f64) as f32);
    Ok(AcousticFeatures {
        frames,
        frame_hop_s: cfg.hop as f64 / w.sample_rate as f64,
        n_mels: cfg.n_mels,
    })
}

const SINC_ZEROS: usize = 16;

/// Windowed-sinc low-pass with cutoff `0.5 / factor` cycles/sample,
/// normalized to unit DC gain. Returns taps for offsets `-half..=half`.
fn lowpass(factor: usize) -> Vec<f64> {
    let half = SINC_ZEROS * factor;
    let fc = 0.5 / factor as f64;
    let n = 2 * half + 1;
    let mut h: Vec<f64> = (0..n)
        .map(|i| {
            let k = i as f64 - half as f64;
            let x = 2.0 * fc * k;
            let sinc = if k == 0.0 {
                1.0
            } else {
                (std::f64::consts::PI * x).sin() / (std::f64::consts::PI * x)
            };
            let win = 0.42 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).cos()
                + 0.08 * (4.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).cos();
            2.0 * fc * sinc * win
        })
        .collect();
    let s: f64 = h.iter().sum();
    h.iter_mut().for_each(|v| *v /= s);
    h
}

/// Integer-factor polyphase resampling with an anti-aliasing windowed-sinc
/// filter. Output length is `round(len · target / source)`.
pub fn resample(w: &AudioWaveform, target_rate: u32) -> Result<AudioWaveform> {
    let src = w.sample_rate;
    if target_rate == src {
        return Ok(w.clone());
    }
    let len = w.samples.len();
    let x = &w.samples;
    if target_rate > 0 && src % target_rate == 0 {
        let m = (src / target_rate) as usize;
        let h = lowpass(m);
        let half = (h.len() / 2) as isize;
        let out_len = ((len as f64) / m as f64).round().max(1.0) as usize;
        let out = (0..out_len)
            .map(|i| {
                let c = (i * m) as isize;
                let mut acc = 0.0f64;
                for (t, &hv) in h.iter().enumerate() {
                    let j = c + half - t as isize;
                    if j >= 0 && (j as usize) < len {
                        acc += hv * x[j as usize] as f64;
                    }
                }
                acc as f32
            })
            .collect();
        return AudioWaveform::new(out, target_rate);
    }
    if target_rate > 0 && target_rate % src == 0 {
        let l = (target_rate / src) as usize;
        let h = lowpass(l);
        let half = (h.len() / 2) as isize;
        let out_len = len * l;
        let out = (0..out_len)
            .map(|o| {
                let mut acc = 0.0f64;
                // Only taps landing on non-zero (original) samples contribute.
                for (t, &hv) in h.iter().enumerate() {
                    let k = o as isize + half - t as isize;
                    if k >= 0 && (k as usize) < out_len && k as usize % l == 0 {
                        acc += hv * x[k as usize / l] as f64;
                    }
                }
                (acc * l as f64) as f32
            })
            .collect();
        return AudioWaveform::new(out, target_rate);
    }
    Err(Error::config(format!(
        "unsupported resampling {src} Hz -> {target_rate} Hz (needs an integer factor)"
    )))
}

fn check_ingest_rate(rate: u32) -> Result<()> {
    if INGEST_RATES.contains(&rate) {
        Ok(())
    } else {
        Err(Error::config(format!(
            "sample rate {rate} Hz not accepted (expected one of {INGEST_RATES:?})"
        )))
    }
}

/// Writes the raw-float format: `RAWF`, rate (u32 LE), length (u32 LE),
/// then little-endian f32 samples.
pub fn write_raw(path: &Path, w: &AudioWaveform) -> Result<()> {
    let mut bytes = Vec::with_capacity(12 + 4 * w.samples.len());
    bytes.extend_from_slice(RAW_MAGIC);
    bytes.extend_from_slice(&w.sample_rate.to_le_bytes());
    bytes.extend_from_slice(&(w.samples.len() as u32).to_le_bytes());
    for s in &w.samples {
        bytes.extend_from_slice(&s.to_le_bytes());
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

fn parse_raw(path: &Path, bytes: &[u8]) -> Result<AudioWaveform> {
    let bad = |msg: &str| Error::Integrity(format!("{}: {msg}", path.display()));
    if bytes.len() < 12 || &bytes[..4] != RAW_MAGIC {
        return Err(bad("not a raw-float audio file"));
    }
    let rate = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    let n = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if bytes.len() != 12 + 4 * n {
        return Err(bad(&format!(
            "header announces {n} samples, payload holds {}",
            (bytes.len() - 12) / 4
        )));
    }
    let samples = bytes[12..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    AudioWaveform::new(samples, rate)
}

fn read_wav(path: &Path) -> Result<AudioWaveform> {
    let reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::config(format!(
            "{}: {} channels, only mono audio is supported",
            path.display(),
            spec.channels
        )));
    }
    let samples = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f32 / 32768.0))
            .collect::<Result<Vec<_>, _>>()?,
        (hound::SampleFormat::Float, 32) => reader.into_samples::<f32>().collect::<Result<Vec<_>, _>>()?,
        (fmt, bits) => {
            return Err(Error::config(format!(
                "{}: unsupported WAV encoding {fmt:?}/{bits} bit",
                path.display()
            )))
        }
    };
    AudioWaveform::new(samples, spec.sample_rate)
}

/// Loads a mono WAV (16-bit PCM or 32-bit float) or raw-float file,
/// detected by its magic bytes. Only 16 kHz and 48 kHz are accepted.
pub fn load_audio(path: &Path) -> Result<AudioWaveform> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let w = if bytes.starts_with(RAW_MAGIC) {
        parse_raw(path, &bytes)?
    } else {
        read_wav(path)?
    };
    check_ingest_rate(w.sample_rate)?;
    Ok(w)
}

/// Loads audio and brings it to 16 kHz.
pub fn load_speech(path: &Path) -> Result<AudioWaveform> {
    resample(&load_audio(path)?, SPEECH_RATE)
}
