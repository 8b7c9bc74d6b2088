//! Training/evaluation corpus construction.
//!
//! Mixes clean speech with noise at exact SNRs, applies synthetic room
//! reverberation, and orchestrates BCF augmentation into paired
//! (noisy, vibration, clean) datasets driven by a JSON-lines manifest.
//! Every draw is keyed off `(seed, entry index, purpose)`, so dataset
//! builds are pure functions of their inputs and entries can be produced
//! in any order.

use std::io::BufRead;
use std::path::{Path, PathBuf};

use num_complex::Complex64;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::bcf::{sample_response, BcfModel};
use crate::signal::{read_wav, vib_intensity, write_wav, Waveform};
use crate::synth::derive_seed;
use crate::{Error, Result};

/// Mixing protocol range in dB.
pub const PROTOCOL_SNR_RANGE: (f64, f64) = (-5.0, 15.0);
/// Frames where clean speech RMS exceeds this level count as active
/// speech for SNR gain computation.
pub const ACTIVE_SPEECH_DBFS: f64 = -40.0;
/// Frame length for the active-speech mask.
pub const ACTIVE_FRAME_SECS: f64 = 0.02;

/// What the noise in a mixture is.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    Environmental,
    Speech,
    /// A different utterance of the same speaker.
    SelfNoise,
}

/// How one dataset entry is mixed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MixSpec {
    pub snr_db: f64,
    pub noise_kind: NoiseKind,
    /// Reverberation time of the synthetic room; no reverb when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rt60_s: Option<f64>,
    #[serde(default)]
    pub seed: u64,
}

impl MixSpec {
    pub fn validate(&self) -> Result<()> {
        if !self.snr_db.is_finite() {
            return Err(Error::InvalidInput("snr_db must be finite".into()));
        }
        Ok(())
    }
}

/// One manifest line.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub clean_path: PathBuf,
    /// Real paired vibration; synthesized from the BCF pool when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vib_path: Option<PathBuf>,
    /// Noise recording; required unless `noise_kind` is `selfnoise`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speaker: Option<String>,
    pub mix: MixSpec,
}

/// A loaded dataset manifest (JSON lines, one entry per line; paths are
/// resolved against the manifest's directory).
#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    /// Loads and validates a manifest: every referenced path must exist.
    pub fn load(path: &Path) -> Result<Self> {
        let root = path
            .parent()
            .map(|p| p.to_path_buf())
            .unwrap_or_else(|| PathBuf::from("."));
        let file = std::fs::File::open(path)?;
        let mut entries = Vec::new();
        for (ln, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: ManifestEntry = serde_json::from_str(&line).map_err(|e| {
                Error::InvalidInput(format!("{}:{}: {e}", path.display(), ln + 1))
            })?;
            entry.mix.validate()?;
            for p in [Some(&entry.clean_path), entry.vib_path.as_ref(), entry.noise_path.as_ref()]
                .into_iter()
                .flatten()
            {
                if !root.join(p).exists() {
                    return Err(Error::InvalidInput(format!(
                        "{}: missing file {}",
                        entry.id,
                        root.join(p).display()
                    )));
                }
            }
            entries.push(entry);
        }
        Ok(Self { root, entries })
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        self.root.join(p)
    }
}

/// Per-sample mask of frames whose RMS clears the active-speech floor.
fn active_mask(clean: &[f64], sample_rate: u32) -> Vec<bool> {
    let frame = ((ACTIVE_FRAME_SECS * sample_rate as f64) as usize).max(1);
    let thresh = 10f64.powf(ACTIVE_SPEECH_DBFS / 20.0);
    let mut mask = vec![false; clean.len()];
    for (f, chunk) in clean.chunks(frame).enumerate() {
        let rms = (chunk.iter().map(|x| x * x).sum::<f64>() / chunk.len() as f64).sqrt();
        if rms > thresh {
            let start = f * frame;
            for m in &mut mask[start..(start + chunk.len())] {
                *m = true;
            }
        }
    }
    mask
}

/// Mean power of `x` over the samples where `mask` is true; falls back to
/// the full signal when nothing is active.
fn masked_power(x: &[f64], mask: &[bool]) -> f64 {
    let mut acc = 0.0;
    let mut n = 0usize;
    for (v, &m) in x.iter().zip(mask) {
        if m {
            acc += v * v;
            n += 1;
        }
    }
    if n == 0 {
        x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64
    } else {
        acc / n as f64
    }
}

/// Adds noise to clean speech at an exact SNR.
///
/// The noise is looped or truncated to the clean length, then scaled so
/// that `10 log10(P_clean / P_scaled_noise) == snr_db`, with the clean
/// power taken over active-speech frames only so leading/trailing silence
/// does not skew the gain.
pub fn mix_at_snr(clean: &Waveform, noise: &Waveform, snr_db: f64) -> Result<Waveform> {
    if clean.sample_rate() != noise.sample_rate() {
        return Err(Error::InvalidInput(format!(
            "sample rates differ: clean {} vs noise {}",
            clean.sample_rate(),
            noise.sample_rate()
        )));
    }
    if !snr_db.is_finite() {
        return Err(Error::InvalidInput("snr_db must be finite".into()));
    }
    let c = clean.samples()?;
    let n_src = noise.samples()?;
    if n_src.is_empty() || n_src.iter().all(|&x| x == 0.0) {
        return Err(Error::InvalidInput("noise is silent".into()));
    }

    // loop/truncate the noise to the clean length
    let n: Vec<f64> = (0..c.len()).map(|i| n_src[i % n_src.len()]).collect();

    let mask = active_mask(c, clean.sample_rate());
    let p_clean = masked_power(c, &mask);
    let p_noise = n.iter().map(|v| v * v).sum::<f64>() / n.len().max(1) as f64;
    if p_noise == 0.0 {
        return Err(Error::InvalidInput("noise is silent after looping".into()));
    }
    let gain = (p_clean / (p_noise * 10f64.powf(snr_db / 10.0))).sqrt();
    let out: Vec<f64> = c.iter().zip(&n).map(|(a, b)| a + gain * b).collect();
    Waveform::mono(out, clean.sample_rate())
}

/// Measures the SNR a mixture achieved, using the same active-speech
/// convention as [`mix_at_snr`].
pub fn measure_snr(clean: &Waveform, scaled_noise: &Waveform) -> Result<f64> {
    let c = clean.samples()?;
    let n = scaled_noise.samples()?;
    let mask = active_mask(c, clean.sample_rate());
    let p_clean = masked_power(c, &mask);
    let p_noise = n.iter().map(|v| v * v).sum::<f64>() / n.len().max(1) as f64;
    Ok(10.0 * (p_clean / p_noise).log10())
}

/// Applies a room impulse response by full convolution, truncated to the
/// input length. The direct-path delay in the impulse response is kept.
pub fn reverberate(x: &Waveform, rir: &Waveform) -> Result<Waveform> {
    let xs = x.samples()?;
    let h = rir.samples()?;
    if h.is_empty() {
        return Err(Error::InvalidInput("empty impulse response".into()));
    }
    let out = fft_convolve(xs, h, xs.len());
    Waveform::mono(out, x.sample_rate())
}

fn fft_convolve(x: &[f64], h: &[f64], out_len: usize) -> Vec<f64> {
    let full = x.len() + h.len() - 1;
    let nfft = full.next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(nfft);
    let ifft = planner.plan_fft_inverse(nfft);

    let mut a: Vec<Complex64> = x
        .iter()
        .map(|&v| Complex64::new(v, 0.0))
        .chain(std::iter::repeat(Complex64::new(0.0, 0.0)))
        .take(nfft)
        .collect();
    let mut b: Vec<Complex64> = h
        .iter()
        .map(|&v| Complex64::new(v, 0.0))
        .chain(std::iter::repeat(Complex64::new(0.0, 0.0)))
        .take(nfft)
        .collect();
    fft.process(&mut a);
    fft.process(&mut b);
    for (u, v) in a.iter_mut().zip(&b) {
        *u *= v;
    }
    ifft.process(&mut a);
    a.iter()
        .take(out_len.min(full))
        .map(|c| c.re / nfft as f64)
        .chain(std::iter::repeat(0.0))
        .take(out_len)
        .collect()
}

/// Synthetic room impulse response: a unit direct-path impulse followed
/// by an exponentially decaying Gaussian tail sized for the requested
/// RT60. Peak-normalized.
pub fn synth_rir(rt60_s: f64, sample_rate: u32, seed: u64) -> Result<Waveform> {
    if !(rt60_s > 0.0) {
        return Err(Error::InvalidInput("rt60 must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let direct_delay = (0.003 * sample_rate as f64) as usize; // 3 ms source distance
    let tail_len = (1.5 * rt60_s * sample_rate as f64) as usize;
    let n = direct_delay + 1 + tail_len;
    let mut h = vec![0.0f64; n];
    h[direct_delay] = 1.0;
    // 60 dB amplitude decay over rt60: exp(-6.9078 t / rt60)
    let decay = 3.0 * std::f64::consts::LN_10 / rt60_s;
    for i in 0..tail_len {
        let t = i as f64 / sample_rate as f64;
        let g: f64 = rng.sample(rand_distr::StandardNormal);
        h[direct_delay + 1 + i] = 0.25 * g * (-decay * t).exp();
    }
    let peak = h.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for v in &mut h {
        *v /= peak;
    }
    Waveform::mono(h, sample_rate)
}

/// One produced training example.
#[derive(Debug, Clone)]
pub struct TrainingTriple {
    pub id: String,
    pub noisy: Waveform,
    pub vibration: Waveform,
    pub clean: Waveform,
    pub meta: TripleMeta,
}

/// Provenance recorded next to each triple.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TripleMeta {
    pub snr_db: f64,
    pub noise_kind: NoiseKind,
    /// Index of the BCF pool model used for augmentation, if any.
    pub pool_index: Option<usize>,
    pub seed: u64,
    pub rt60_s: Option<f64>,
}

/// Builds (noisy, vibration, clean) triples from a manifest.
///
/// Entries with a real vibration recording pass it through (tri-axial
/// files are collapsed to intensity). Entries without one pick a pool
/// model by seeded draw, sample a response, and synthesize vibration from
/// the CLEAN audio — the accelerometer never hears the ambient noise, so
/// augmented vibration must not either. The noisy channel is built by
/// reverberating the clean speech, then mixing noise at the prescribed
/// SNR.
pub fn build_training_set(
    manifest: &DatasetManifest,
    bcf_pool: &[BcfModel],
    seed: u64,
) -> Result<Vec<TrainingTriple>> {
    manifest
        .entries
        .iter()
        .enumerate()
        .map(|(idx, entry)| build_entry(manifest, bcf_pool, seed, idx, entry))
        .collect()
}

fn build_entry(
    manifest: &DatasetManifest,
    bcf_pool: &[BcfModel],
    seed: u64,
    idx: usize,
    entry: &ManifestEntry,
) -> Result<TrainingTriple> {
    let clean = read_wav(&manifest.resolve(&entry.clean_path))?;
    let entry_seed = derive_seed(seed, idx as u64, 0);

    // vibration channel
    let (vibration, pool_index) = match &entry.vib_path {
        Some(p) => {
            let v = read_wav(&manifest.resolve(p))?;
            let v = if v.num_channels() == 3 { vib_intensity(&v)? } else { v };
            (v, None)
        }
        None => {
            if bcf_pool.is_empty() {
                return Err(Error::InvalidInput(format!(
                    "{}: no vibration recording and the BCF pool is empty",
                    entry.id
                )));
            }
            let bcf_seed = derive_seed(seed, idx as u64, 1);
            let mut rng = ChaCha8Rng::seed_from_u64(bcf_seed);
            let pick = rng.random_range(0..bcf_pool.len());
            let fr = sample_response(&bcf_pool[pick], derive_seed(seed, idx as u64, 2));
            (crate::bcf::synthesize_vibration(&clean, &fr)?, Some(pick))
        }
    };

    // noise channel
    let noise = match entry.mix.noise_kind {
        NoiseKind::SelfNoise => {
            let speaker = entry.speaker.as_ref().ok_or_else(|| {
                Error::InvalidInput(format!("{}: self-noise needs a speaker id", entry.id))
            })?;
            let candidates: Vec<&ManifestEntry> = manifest
                .entries
                .iter()
                .filter(|e| e.speaker.as_ref() == Some(speaker) && e.id != entry.id)
                .collect();
            if candidates.is_empty() {
                return Err(Error::InvalidInput(format!(
                    "{}: no other utterance of speaker {speaker} for self-noise",
                    entry.id
                )));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, idx as u64, 3));
            let pick = candidates[rng.random_range(0..candidates.len())];
            read_wav(&manifest.resolve(&pick.clean_path))?
        }
        _ => {
            let p = entry.noise_path.as_ref().ok_or_else(|| {
                Error::InvalidInput(format!("{}: noise_path required", entry.id))
            })?;
            read_wav(&manifest.resolve(p))?
        }
    };

    // noisy channel: reverberate, then mix
    let reverberant = match entry.mix.rt60_s {
        Some(rt60) => {
            let rir = synth_rir(rt60, clean.sample_rate(), derive_seed(seed, idx as u64, 4))?;
            reverberate(&clean, &rir)?
        }
        None => clean.clone(),
    };
    let noisy = mix_at_snr(&reverberant, &noise, entry.mix.snr_db)?;

    Ok(TrainingTriple {
        id: entry.id.clone(),
        noisy,
        vibration,
        clean,
        meta: TripleMeta {
            snr_db: entry.mix.snr_db,
            noise_kind: entry.mix.noise_kind,
            pool_index,
            seed: entry_seed,
            rt60_s: entry.mix.rt60_s,
        },
    })
}

/// Writes triples under `out/{id}/noisy.wav, vib.wav, clean.wav,
/// meta.json`.
pub fn write_training_set(out_dir: &Path, triples: &[TrainingTriple]) -> Result<()> {
    for t in triples {
        let dir = out_dir.join(&t.id);
        std::fs::create_dir_all(&dir)?;
        write_wav(&dir.join("noisy.wav"), &t.noisy)?;
        write_wav(&dir.join("vib.wav"), &t.vibration)?;
        write_wav(&dir.join("clean.wav"), &t.clean)?;
        let meta = serde_json::to_string_pretty(&t.meta)?;
        std::fs::write(dir.join("meta.json"), meta)?;
    }
    Ok(())
}
