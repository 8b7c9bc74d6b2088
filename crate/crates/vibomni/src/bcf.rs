//! Bone-conduction transfer function estimation and augmentation.
//!
//! Paired (audio, vibration) recordings are split into 5-second windows;
//! each window yields one frequency-response sample as the square root of
//! the Welch PSD ratio on the vibration STFT bin grid. A pool of windows
//! fits a per-bin Gaussian (mu, sigma) model; sampled responses turn any
//! clean-speech corpus into synthetic vibration channels by magnitude
//! multiplication in the STFT domain. The inverse direction
//! (vibration back to audio) is deliberately not provided: the band above
//! the accelerometer's reach carries almost no energy, so inversion blows
//! up.

use std::path::Path;

use num_complex::Complex64;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::signal::{filter, hann_window, istft, resample, stft, FilterKind, Waveform, VIB_WINDOW};
use crate::{Error, Result};

/// Length of one estimation window in seconds.
pub const ESTIMATION_WINDOW_SECS: f64 = 5.0;
/// Welch segment length in seconds (50% overlap inside each window).
pub const WELCH_SEGMENT_SECS: f64 = 0.5;
/// Audio PSD bins below `floor * max_bin` are marked unreliable; speech is
/// spectrally sparse, so a silent bin says nothing about the transfer.
pub const RELIABILITY_FLOOR: f64 = 1e-8;

/// Per-bin linear magnitude gain between audio and vibration, on the
/// vibration STFT bin grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrequencyResponse {
    pub gains: Vec<f64>,
    pub bin_hz: f64,
    /// Bins whose audio PSD cleared the reliability floor.
    pub reliable: Vec<bool>,
}

impl FrequencyResponse {
    /// Flat unit response on the default vibration grid.
    pub fn identity(bins: usize, bin_hz: f64) -> Self {
        Self {
            gains: vec![1.0; bins],
            bin_hz,
            reliable: vec![true; bins],
        }
    }
}

/// Per-bin Gaussian transfer model fitted over many windows.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BcfModel {
    pub bin_hz: f64,
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub n_windows: usize,
}

impl BcfModel {
    pub fn bins(&self) -> usize {
        self.mu.len()
    }
}

/// Welch PSD with Hann-windowed segments at 50% overlap, averaged
/// modified periodograms. Returns one-sided density over `nfft/2 + 1`
/// bins.
fn welch_psd(x: &[f64], sample_rate: f64, nfft: usize) -> Vec<f64> {
    let hop = nfft / 2;
    let window = hann_window(nfft);
    let u: f64 = window.iter().map(|w| w * w).sum();
    let bins = nfft / 2 + 1;
    let mut psd = vec![0.0f64; bins];
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(nfft);
    let mut buf = vec![Complex64::new(0.0, 0.0); nfft];

    let n_segments = if x.len() >= nfft {
        (x.len() - nfft) / hop + 1
    } else {
        0
    };
    if n_segments == 0 {
        return psd;
    }
    for s in 0..n_segments {
        let seg = &x[s * hop..s * hop + nfft];
        for (i, b) in buf.iter_mut().enumerate() {
            *b = Complex64::new(seg[i] * window[i], 0.0);
        }
        fft.process(&mut buf);
        for (k, p) in psd.iter_mut().enumerate() {
            let scale = if k == 0 || k == nfft / 2 { 1.0 } else { 2.0 };
            *p += scale * buf[k].norm_sqr() / (sample_rate * u);
        }
    }
    for p in &mut psd {
        *p /= n_segments as f64;
    }
    psd
}

/// Averages a fine Welch PSD grid onto the vibration STFT bin grid.
///
/// Target bin `j` covers `[j*bin_hz - bin_hz/2, j*bin_hz + bin_hz/2)`.
fn band_average(psd: &[f64], psd_bin_hz: f64, out_bins: usize, out_bin_hz: f64) -> Vec<f64> {
    let mut out = vec![0.0f64; out_bins];
    for (j, o) in out.iter_mut().enumerate() {
        let lo = j as f64 * out_bin_hz - out_bin_hz / 2.0;
        let hi = j as f64 * out_bin_hz + out_bin_hz / 2.0;
        let mut acc = 0.0;
        let mut count = 0usize;
        for (k, p) in psd.iter().enumerate() {
            let f = k as f64 * psd_bin_hz;
            if f >= lo && f < hi {
                acc += p;
                count += 1;
            }
        }
        *o = if count > 0 { acc / count as f64 } else { 0.0 };
    }
    out
}

/// Estimates the transfer response from one time-aligned window.
///
/// Audio is low-passed and resampled down to the vibration rate before
/// the PSD ratio when its rate is higher. Gains are
/// `sqrt(PSD_vib / PSD_audio)` band-averaged onto the vibration STFT
/// grid; bins whose audio PSD falls below the reliability floor are
/// flagged for later interpolation.
pub fn estimate_response(audio: &Waveform, vib: &Waveform) -> Result<FrequencyResponse> {
    let vib_rate = vib.sample_rate();
    let vib_samples = vib.samples()?;
    if vib_samples.iter().map(|x| x * x).sum::<f64>() == 0.0 {
        return Err(Error::InvalidInput("silent vibration window".into()));
    }

    let audio_at_vib = if audio.sample_rate() > vib_rate {
        let lp = filter(
            audio,
            FilterKind::Lowpass,
            0.45 * vib_rate as f64,
            8,
        )?;
        resample(&lp, vib_rate)?
    } else if audio.sample_rate() == vib_rate {
        audio.clone()
    } else {
        return Err(Error::InvalidInput(format!(
            "audio rate {} below vibration rate {}",
            audio.sample_rate(),
            vib_rate
        )));
    };

    let a = audio_at_vib.samples()?;
    if a.iter().map(|x| x * x).sum::<f64>() == 0.0 {
        return Err(Error::InvalidInput("all-silent audio window".into()));
    }
    // resampling rounds to the nearest sample; anything beyond that is a
    // misaligned pair
    if a.len().abs_diff(vib_samples.len()) > 2 {
        return Err(Error::Shape(format!(
            "audio window {} vs vibration window {} samples at {} Hz",
            a.len(),
            vib_samples.len(),
            vib_rate
        )));
    }
    let n = a.len().min(vib_samples.len());

    let nfft = ((WELCH_SEGMENT_SECS * vib_rate as f64) as usize).next_power_of_two();
    let psd_a = welch_psd(&a[..n], vib_rate as f64, nfft);
    let psd_v = welch_psd(&vib_samples[..n], vib_rate as f64, nfft);
    let psd_bin_hz = vib_rate as f64 / nfft as f64;

    let out_bins = VIB_WINDOW / 2 + 1;
    let out_bin_hz = vib_rate as f64 / VIB_WINDOW as f64;
    let pa = band_average(&psd_a, psd_bin_hz, out_bins, out_bin_hz);
    let pv = band_average(&psd_v, psd_bin_hz, out_bins, out_bin_hz);

    let floor = RELIABILITY_FLOOR * pa.iter().cloned().fold(0.0f64, f64::max);
    let mut gains = Vec::with_capacity(out_bins);
    let mut reliable = Vec::with_capacity(out_bins);
    for j in 0..out_bins {
        if pa[j] > floor && pa[j] > 0.0 {
            gains.push((pv[j] / pa[j]).sqrt());
            reliable.push(true);
        } else {
            gains.push(0.0);
            reliable.push(false);
        }
    }
    Ok(FrequencyResponse {
        gains,
        bin_hz: out_bin_hz,
        reliable,
    })
}

/// Splits a paired recording into aligned windows and estimates one
/// response per window. Windows that fail (for example all-silent audio)
/// are skipped.
pub fn estimate_responses_windowed(
    audio: &Waveform,
    vib: &Waveform,
    window_secs: f64,
) -> Result<Vec<FrequencyResponse>> {
    let a_per = (window_secs * audio.sample_rate() as f64) as usize;
    let v_per = (window_secs * vib.sample_rate() as f64) as usize;
    let n_windows = (audio.len() / a_per).min(vib.len() / v_per);
    let audio_samples = audio.samples()?;
    let vib_samples = vib.samples()?;
    let mut out = Vec::new();
    for w in 0..n_windows {
        let aw = Waveform::mono(
            audio_samples[w * a_per..(w + 1) * a_per].to_vec(),
            audio.sample_rate(),
        )?;
        let vw = Waveform::mono(
            vib_samples[w * v_per..(w + 1) * v_per].to_vec(),
            vib.sample_rate(),
        )?;
        if let Ok(fr) = estimate_response(&aw, &vw) {
            out.push(fr);
        }
    }
    Ok(out)
}

/// Natural cubic spline through `(xs, ys)`, evaluated at `x`.
///
/// Clamps outside the knot range.
fn cubic_spline_eval(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    let n = xs.len();
    if n == 0 {
        return 0.0;
    }
    if n == 1 {
        return ys[0];
    }
    if x <= xs[0] {
        return ys[0];
    }
    if x >= xs[n - 1] {
        return ys[n - 1];
    }
    // second derivatives by the tridiagonal algorithm, natural ends
    let mut m = vec![0.0f64; n];
    let mut u = vec![0.0f64; n];
    for i in 1..n - 1 {
        let sig = (xs[i] - xs[i - 1]) / (xs[i + 1] - xs[i - 1]);
        let p = sig * m[i - 1] + 2.0;
        m[i] = (sig - 1.0) / p;
        let d = (ys[i + 1] - ys[i]) / (xs[i + 1] - xs[i])
            - (ys[i] - ys[i - 1]) / (xs[i] - xs[i - 1]);
        u[i] = (6.0 * d / (xs[i + 1] - xs[i - 1]) - sig * u[i - 1]) / p;
    }
    for i in (0..n - 1).rev() {
        m[i] = m[i] * m[i + 1] + u[i];
    }
    let j = match xs.binary_search_by(|v| v.partial_cmp(&x).unwrap()) {
        Ok(j) => j,
        Err(j) => j - 1,
    };
    let h = xs[j + 1] - xs[j];
    let a = (xs[j + 1] - x) / h;
    let b = (x - xs[j]) / h;
    a * ys[j]
        + b * ys[j + 1]
        + ((a * a * a - a) * m[j] + (b * b * b - b) * m[j + 1]) * h * h / 6.0
}

/// Fits a per-bin Gaussian model over the responses of many windows.
///
/// Each bin uses the windows in which it was reliable; bins that were
/// unreliable everywhere get their mean and deviation filled by cubic
/// interpolation across frequency.
pub fn fit_bcf(responses: &[FrequencyResponse]) -> Result<BcfModel> {
    if responses.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "need at least 2 responses to fit, got {}",
            responses.len()
        )));
    }
    let bins = responses[0].gains.len();
    let bin_hz = responses[0].bin_hz;
    if responses
        .iter()
        .any(|r| r.gains.len() != bins || r.bin_hz != bin_hz)
    {
        return Err(Error::Shape("responses differ in bin layout".into()));
    }

    let mut mu = vec![0.0f64; bins];
    let mut sigma = vec![0.0f64; bins];
    let mut filled = vec![false; bins];
    for j in 0..bins {
        let samples: Vec<f64> = responses
            .iter()
            .filter(|r| r.reliable[j])
            .map(|r| r.gains[j])
            .collect();
        if samples.is_empty() {
            continue;
        }
        let all_equal = samples.windows(2).all(|w| w[0] == w[1]);
        let mean = samples.iter().sum::<f64>() / samples.len() as f64;
        mu[j] = if all_equal { samples[0] } else { mean };
        sigma[j] = if samples.len() >= 2 && !all_equal {
            let var = samples.iter().map(|g| (g - mean) * (g - mean)).sum::<f64>()
                / (samples.len() - 1) as f64;
            var.sqrt()
        } else {
            0.0
        };
        filled[j] = true;
    }

    let known: Vec<usize> = (0..bins).filter(|&j| filled[j]).collect();
    if known.is_empty() {
        return Err(Error::InvalidInput(
            "no reliable bins in any response".into(),
        ));
    }
    if known.len() < bins {
        let xs: Vec<f64> = known.iter().map(|&j| j as f64).collect();
        let mu_ys: Vec<f64> = known.iter().map(|&j| mu[j]).collect();
        let sg_ys: Vec<f64> = known.iter().map(|&j| sigma[j]).collect();
        for j in 0..bins {
            if !filled[j] {
                mu[j] = cubic_spline_eval(&xs, &mu_ys, j as f64).max(0.0);
                sigma[j] = cubic_spline_eval(&xs, &sg_ys, j as f64).max(0.0);
            }
        }
    }

    Ok(BcfModel {
        bin_hz,
        mu,
        sigma,
        n_windows: responses.len(),
    })
}

/// Draws one response from the Gaussian model, clipping negative gains
/// at zero. Bit-identical for equal seeds.
pub fn sample_response(model: &BcfModel, seed: u64) -> FrequencyResponse {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gains: Vec<f64> = model
        .mu
        .iter()
        .zip(&model.sigma)
        .map(|(&m, &s)| {
            if s > 0.0 {
                let normal = Normal::new(m, s).expect("sigma validated non-negative");
                normal.sample(&mut rng).max(0.0)
            } else {
                m.max(0.0)
            }
        })
        .collect();
    let bins = gains.len();
    FrequencyResponse {
        gains,
        bin_hz: model.bin_hz,
        reliable: vec![true; bins],
    }
}

/// Synthesizes a vibration channel from clean audio.
///
/// Resamples the clean signal down to the vibration rate implied by the
/// response's bin layout, multiplies each STFT magnitude bin by the
/// response gain while keeping the original phase, and inverts.
pub fn synthesize_vibration(clean: &Waveform, fr: &FrequencyResponse) -> Result<Waveform> {
    let bins = fr.gains.len();
    if bins < 2 || fr.reliable.len() != bins {
        return Err(Error::Shape(format!(
            "response bin layout: {} gains, {} reliability flags",
            bins,
            fr.reliable.len()
        )));
    }
    if fr.gains.iter().any(|g| !g.is_finite() || *g < 0.0) {
        return Err(Error::InvalidInput("response gains must be finite and >= 0".into()));
    }
    let window = 2 * (bins - 1);
    let vib_rate = (fr.bin_hz * window as f64).round() as u32;
    if vib_rate == 0 {
        return Err(Error::Shape(format!(
            "response implies a zero sample rate (bin_hz {})",
            fr.bin_hz
        )));
    }
    let hop = window / 2;

    let at_vib = if clean.sample_rate() != vib_rate {
        let lp = filter(clean, FilterKind::Lowpass, 0.45 * vib_rate as f64, 8)?;
        resample(&lp, vib_rate)?
    } else {
        clean.clone()
    };

    let spec = stft(&at_vib, window, hop)?;
    if spec.bins() != bins {
        return Err(Error::Shape(format!(
            "response has {bins} bins, spectrogram {}",
            spec.bins()
        )));
    }
    let mut shaped = spec.clone();
    for t in 0..shaped.num_frames() {
        for k in 0..bins {
            shaped.frames[(t, k)] *= fr.gains[k];
        }
    }
    istft(&shaped)
}

/// Loads a JSON pool of fitted models (one per contributing user/session).
pub fn load_pool(path: &Path) -> Result<Vec<BcfModel>> {
    let text = std::fs::read_to_string(path)?;
    let pool: Vec<BcfModel> = serde_json::from_str(&text)?;
    Ok(pool)
}

/// Saves a model pool as a JSON array.
pub fn save_pool(path: &Path, pool: &[BcfModel]) -> Result<()> {
    let text = serde_json::to_string_pretty(pool)?;
    std::fs::write(path, text)?;
    Ok(())
}
