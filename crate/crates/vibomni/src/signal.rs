//! Deterministic DSP primitives shared by every other module.
//!
//! STFT analysis/synthesis with exact overlap-add reconstruction,
//! zero-phase Butterworth filtering, band-limited resampling, tri-axial
//! vibration intensity extraction, and 16-bit PCM WAV I/O.

use std::path::Path;

use ndarray::Array2;
use num_complex::Complex64;
use rustfft::FftPlanner;

use crate::{Error, Result};

/// Microphone sample rate in Hz.
pub const AUDIO_RATE: u32 = 16_000;
/// Accelerometer sample rate in Hz.
pub const VIB_RATE: u32 = 1_600;
/// STFT window for audio at 16 kHz.
pub const AUDIO_WINDOW: usize = 640;
/// STFT window for vibration at 1.6 kHz. One tenth of the audio window so
/// both spectrograms share a time dimension.
pub const VIB_WINDOW: usize = 64;
/// Audio STFT hop (half the window; Hann is exactly overlap-add complete
/// at 50% overlap).
pub const AUDIO_HOP: usize = AUDIO_WINDOW / 2;
/// Vibration STFT hop.
pub const VIB_HOP: usize = VIB_WINDOW / 2;
/// Body-motion artifacts in the accelerometer live below this frequency.
pub const MOTION_CUTOFF_HZ: f64 = 85.0;
/// Upper edge of the useful vibration band in Hz.
pub const VIB_BAND_HZ: f64 = 800.0;

/// A sampled signal: mono audio or tri-axial acceleration.
///
/// Channels are stored planar and are always the same length. Samples are
/// dimensionless amplitudes, nominally in [-1, 1], held as 64-bit reals;
/// the 16-bit PCM conversion happens only at the WAV boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    channels: Vec<Vec<f64>>,
    sample_rate: u32,
}

impl Waveform {
    /// Builds a mono waveform.
    pub fn mono(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        Self::new(vec![samples], sample_rate)
    }

    /// Builds a waveform from planar channels (1 = audio, 3 = acceleration).
    pub fn new(channels: Vec<Vec<f64>>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidInput("sample_rate must be > 0".into()));
        }
        if channels.len() != 1 && channels.len() != 3 {
            return Err(Error::InvalidInput(format!(
                "expected 1 or 3 channels, got {}",
                channels.len()
            )));
        }
        let len = channels[0].len();
        if channels.iter().any(|c| c.len() != len) {
            return Err(Error::Shape("channels differ in length".into()));
        }
        if channels.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("waveform sample".into()));
        }
        Ok(Self {
            channels,
            sample_rate,
        })
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn len(&self) -> usize {
        self.channels[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn duration_secs(&self) -> f64 {
        self.len() as f64 / self.sample_rate as f64
    }

    /// The single channel of a mono waveform.
    pub fn samples(&self) -> Result<&[f64]> {
        if self.channels.len() != 1 {
            return Err(Error::InvalidInput(format!(
                "expected mono waveform, got {} channels",
                self.channels.len()
            )));
        }
        Ok(&self.channels[0])
    }

    pub fn channel(&self, idx: usize) -> &[f64] {
        &self.channels[idx]
    }

    /// Root-mean-square amplitude over all channels.
    pub fn rms(&self) -> f64 {
        let n: usize = self.channels.iter().map(|c| c.len()).sum();
        if n == 0 {
            return 0.0;
        }
        let e: f64 = self
            .channels
            .iter()
            .flatten()
            .map(|x| x * x)
            .sum::<f64>();
        (e / n as f64).sqrt()
    }
}

/// Complex STFT frames with the metadata needed to invert them.
///
/// `frames` is laid out `[time, freq_bins]` with `freq_bins =
/// window_size / 2 + 1`. `signal_len` records how many signal samples the
/// analysis covered so the inverse transform can trim its padding.
#[derive(Debug, Clone)]
pub struct Spectrogram {
    pub frames: Array2<Complex64>,
    pub window_size: usize,
    pub hop: usize,
    pub sample_rate: u32,
    pub signal_len: usize,
}

impl Spectrogram {
    pub fn num_frames(&self) -> usize {
        self.frames.nrows()
    }

    pub fn bins(&self) -> usize {
        self.frames.ncols()
    }

    /// Width of one frequency bin in Hz.
    pub fn bin_hz(&self) -> f64 {
        self.sample_rate as f64 / self.window_size as f64
    }

    pub fn magnitude(&self) -> Array2<f64> {
        self.frames.mapv(|c| c.norm())
    }

    pub fn phase(&self) -> Array2<f64> {
        self.frames.mapv(|c| c.arg())
    }

    /// Replaces magnitudes while keeping this spectrogram's phase.
    pub fn with_magnitude(&self, mag: &Array2<f64>) -> Result<Spectrogram> {
        if mag.dim() != self.frames.dim() {
            return Err(Error::Shape(format!(
                "magnitude {:?} vs frames {:?}",
                mag.dim(),
                self.frames.dim()
            )));
        }
        let mut frames = self.frames.clone();
        for ((t, k), f) in frames.indexed_iter_mut() {
            let m = f.norm();
            *f = if m > 0.0 {
                *f * (mag[(t, k)] / m)
            } else {
                Complex64::new(mag[(t, k)], 0.0)
            };
        }
        Ok(Spectrogram {
            frames,
            ..self.clone()
        })
    }
}

/// Periodic Hann window of length `n`.
pub fn hann_window(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos()))
        .collect()
}

/// Left padding used by [`stft`]: one hop of zeros so the first sample
/// still gets a full overlap-add weight.
fn stft_left_pad(window_size: usize, hop: usize) -> usize {
    window_size - hop
}

/// Number of STFT frames for a signal of `len` samples.
///
/// One extra frame past `ceil(len / hop)` gives the final samples their
/// overlap partner, so every input sample sits in the constant
/// overlap-add region.
pub fn stft_num_frames(len: usize, hop: usize) -> usize {
    len.div_ceil(hop) + 1
}

/// Short-time Fourier transform of a mono waveform.
///
/// Hann analysis window. The signal is zero-padded by `window - hop` on
/// the left and up to the last frame on the right so every sample is
/// covered with unit overlap-add weight; a 16 kHz/640 signal and its
/// time-aligned 1.6 kHz/64 counterpart produce the same number of frames.
pub fn stft(w: &Waveform, window_size: usize, hop: usize) -> Result<Spectrogram> {
    let samples = w.samples()?;
    if window_size == 0 || window_size % 2 != 0 {
        return Err(Error::InvalidInput(format!(
            "window_size must be even and non-zero, got {window_size}"
        )));
    }
    if hop == 0 || hop > window_size {
        return Err(Error::InvalidInput(format!(
            "hop {hop} must be in 1..={window_size}"
        )));
    }

    let len = samples.len();
    let left = stft_left_pad(window_size, hop);
    let num_frames = stft_num_frames(len, hop);
    let bins = window_size / 2 + 1;
    let window = hann_window(window_size);

    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(window_size);
    let mut buf = vec![Complex64::new(0.0, 0.0); window_size];

    let mut frames = Array2::zeros((num_frames, bins));
    for t in 0..num_frames {
        let start = t * hop; // position in the padded signal
        for (i, b) in buf.iter_mut().enumerate() {
            let p = start + i;
            // padded[p] = samples[p - left] when in range, else 0
            let x = if p >= left && p - left < len {
                samples[p - left]
            } else {
                0.0
            };
            *b = Complex64::new(x * window[i], 0.0);
        }
        fft.process(&mut buf);
        for k in 0..bins {
            frames[(t, k)] = buf[k];
        }
    }

    Ok(Spectrogram {
        frames,
        window_size,
        hop,
        sample_rate: w.sample_rate(),
        signal_len: len,
    })
}

/// Inverse STFT by plain overlap-add.
///
/// The Hann analysis window sums to one at 50% overlap, so summing the
/// inverse FFTs of the frames reconstructs the signal exactly; the
/// synthesis trims the analysis padding back off.
pub fn istft(spec: &Spectrogram) -> Result<Waveform> {
    let window_size = spec.window_size;
    let hop = spec.hop;
    let bins = window_size / 2 + 1;
    if spec.bins() != bins {
        return Err(Error::Shape(format!(
            "expected {bins} bins for window {window_size}, got {}",
            spec.bins()
        )));
    }

    let num_frames = spec.num_frames();
    let left = stft_left_pad(window_size, hop);
    let padded_len = (num_frames.max(1) - 1) * hop + window_size;

    let mut planner = FftPlanner::<f64>::new();
    let ifft = planner.plan_fft_inverse(window_size);
    let mut buf = vec![Complex64::new(0.0, 0.0); window_size];
    let mut out = vec![0.0f64; padded_len];

    for t in 0..num_frames {
        // rebuild the full hermitian spectrum from the half-spectrum
        for k in 0..bins {
            buf[k] = spec.frames[(t, k)];
        }
        for k in bins..window_size {
            buf[k] = spec.frames[(t, window_size - k)].conj();
        }
        ifft.process(&mut buf);
        let start = t * hop;
        for (i, b) in buf.iter().enumerate() {
            out[start + i] += b.re / window_size as f64;
        }
    }

    let end = (left + spec.signal_len).min(padded_len);
    let trimmed = out[left..end].to_vec();
    Waveform::mono(trimmed, spec.sample_rate)
}

/// Inverse STFT from separate magnitude and phase matrices.
pub fn istft_mag_phase(
    mag: &Array2<f64>,
    phase: &Array2<f64>,
    window_size: usize,
    hop: usize,
    sample_rate: u32,
    signal_len: usize,
) -> Result<Waveform> {
    if mag.dim() != phase.dim() {
        return Err(Error::Shape(format!(
            "magnitude {:?} vs phase {:?}",
            mag.dim(),
            phase.dim()
        )));
    }
    let frames = Array2::from_shape_fn(mag.dim(), |(t, k)| {
        Complex64::from_polar(mag[(t, k)], phase[(t, k)])
    });
    istft(&Spectrogram {
        frames,
        window_size,
        hop,
        sample_rate,
        signal_len,
    })
}

/// Filter pass kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FilterKind {
    Lowpass,
    Highpass,
}

/// One second-order IIR section (direct form I).
#[derive(Debug, Clone, Copy)]
struct Biquad {
    b0: f64,
    b1: f64,
    b2: f64,
    a1: f64,
    a2: f64,
}

impl Biquad {
    /// Butterworth section with quality factor `q`, cookbook bilinear design.
    fn design(kind: FilterKind, cutoff: f64, sample_rate: f64, q: f64) -> Biquad {
        let w0 = 2.0 * std::f64::consts::PI * cutoff / sample_rate;
        let (sw, cw) = (w0.sin(), w0.cos());
        let alpha = sw / (2.0 * q);
        let a0 = 1.0 + alpha;
        match kind {
            FilterKind::Lowpass => Biquad {
                b0: (1.0 - cw) / 2.0 / a0,
                b1: (1.0 - cw) / a0,
                b2: (1.0 - cw) / 2.0 / a0,
                a1: -2.0 * cw / a0,
                a2: (1.0 - alpha) / a0,
            },
            FilterKind::Highpass => Biquad {
                b0: (1.0 + cw) / 2.0 / a0,
                b1: -(1.0 + cw) / a0,
                b2: (1.0 + cw) / 2.0 / a0,
                a1: -2.0 * cw / a0,
                a2: (1.0 - alpha) / a0,
            },
        }
    }

    /// First-order section for odd filter orders.
    fn design_first_order(kind: FilterKind, cutoff: f64, sample_rate: f64) -> Biquad {
        let k = (std::f64::consts::PI * cutoff / sample_rate).tan();
        let a0 = k + 1.0;
        match kind {
            FilterKind::Lowpass => Biquad {
                b0: k / a0,
                b1: k / a0,
                b2: 0.0,
                a1: (k - 1.0) / a0,
                a2: 0.0,
            },
            FilterKind::Highpass => Biquad {
                b0: 1.0 / a0,
                b1: -1.0 / a0,
                b2: 0.0,
                a1: (k - 1.0) / a0,
                a2: 0.0,
            },
        }
    }

    fn run(&self, x: &[f64]) -> Vec<f64> {
        let mut y = Vec::with_capacity(x.len());
        let (mut x1, mut x2, mut y1, mut y2) = (0.0, 0.0, 0.0, 0.0);
        for &x0 in x {
            let y0 = self.b0 * x0 + self.b1 * x1 + self.b2 * x2 - self.a1 * y1 - self.a2 * y2;
            x2 = x1;
            x1 = x0;
            y2 = y1;
            y1 = y0;
            y.push(y0);
        }
        y
    }
}

/// Butterworth cascade of the requested order.
fn butterworth(kind: FilterKind, cutoff: f64, sample_rate: f64, order: usize) -> Vec<Biquad> {
    let mut sections = Vec::new();
    let pairs = order / 2;
    for k in 0..pairs {
        // pole angle from the negative real axis; Q = 1 / (2 sin phi)
        let phi = std::f64::consts::PI * (2 * k + 1) as f64 / (2.0 * order as f64);
        let q = 1.0 / (2.0 * phi.sin());
        sections.push(Biquad::design(kind, cutoff, sample_rate, q));
    }
    if order % 2 == 1 {
        sections.push(Biquad::design_first_order(kind, cutoff, sample_rate));
    }
    sections
}

/// Zero-phase (forward-backward) Butterworth filtering.
///
/// Output length equals input length. Edges are extended by odd
/// reflection before filtering to suppress the startup transient.
pub fn filter(w: &Waveform, kind: FilterKind, cutoff: f64, order: usize) -> Result<Waveform> {
    let rate = w.sample_rate() as f64;
    if !(cutoff > 0.0 && cutoff < rate / 2.0) {
        return Err(Error::InvalidInput(format!(
            "cutoff {cutoff} Hz out of range (0, {})",
            rate / 2.0
        )));
    }
    if order == 0 {
        return Err(Error::InvalidInput("filter order must be >= 1".into()));
    }
    let sections = butterworth(kind, cutoff, rate, order);
    let channels = w
        .channels
        .iter()
        .map(|c| filtfilt(&sections, c))
        .collect();
    Waveform::new(channels, w.sample_rate())
}

fn filtfilt(sections: &[Biquad], x: &[f64]) -> Vec<f64> {
    if x.is_empty() {
        return Vec::new();
    }
    // odd reflection padding around both ends
    let pad = (3 * 2 * (sections.len() * 2 + 1)).min(x.len().saturating_sub(1));
    let mut ext = Vec::with_capacity(x.len() + 2 * pad);
    for i in (1..=pad).rev() {
        ext.push(2.0 * x[0] - x[i]);
    }
    ext.extend_from_slice(x);
    for i in (1..=pad).rev() {
        ext.push(2.0 * x[x.len() - 1] - x[x.len() - 1 - i]);
    }

    let mut y = ext;
    for s in sections {
        y = s.run(&y);
    }
    y.reverse();
    for s in sections {
        y = s.run(&y);
    }
    y.reverse();
    y[pad..pad + x.len()].to_vec()
}

/// Band-limited sample-rate conversion via a windowed-sinc kernel.
///
/// Downsampling applies the anti-alias lowpass implicitly through the
/// kernel cutoff. `target_rate == source rate` returns the input
/// unchanged.
pub fn resample(w: &Waveform, target_rate: u32) -> Result<Waveform> {
    if target_rate == 0 {
        return Err(Error::InvalidInput("target_rate must be > 0".into()));
    }
    if target_rate == w.sample_rate() {
        return Ok(w.clone());
    }
    let src = w.sample_rate() as f64;
    let dst = target_rate as f64;
    let ratio = dst / src;
    // cutoff as a fraction of the source Nyquist
    let nu = 0.92 * ratio.min(1.0);
    // keep ~32 sinc lobes inside the kernel regardless of the ratio
    let half_width = (32.0 / nu).ceil() as isize;

    let out_len = (w.len() as f64 * ratio).ceil() as usize;
    let channels = w
        .channels
        .iter()
        .map(|c| resample_channel(c, ratio, nu, half_width, out_len))
        .collect();
    Waveform::new(channels, target_rate)
}

fn resample_channel(x: &[f64], ratio: f64, nu: f64, half_width: isize, out_len: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(out_len);
    let sinc = |t: f64| {
        if t.abs() < 1e-12 {
            1.0
        } else {
            let pt = std::f64::consts::PI * t;
            pt.sin() / pt
        }
    };
    for n in 0..out_len {
        let center = n as f64 / ratio; // position in source samples
        let k0 = (center.floor() as isize - half_width).max(0);
        let k1 = ((center.floor() as isize) + half_width).min(x.len() as isize - 1);
        let mut acc = 0.0;
        let mut wsum = 0.0;
        for k in k0..=k1 {
            let t = center - k as f64;
            // Hann-windowed sinc at the anti-alias cutoff
            let win = 0.5 * (1.0 + (std::f64::consts::PI * t / half_width as f64).cos());
            let h = nu * sinc(nu * t) * win;
            acc += x[k as usize] * h;
            wsum += h;
        }
        // normalize so a constant signal stays constant
        out.push(if wsum.abs() > 1e-12 { acc / wsum * 1.0 } else { 0.0 });
    }
    out
}

/// Collapses tri-axial acceleration to a mono intensity signal.
///
/// Per-sample L2 norm over the axes, mean removal, then a zero-phase
/// high-pass at the motion cutoff so walking/head-motion energy below
/// ~85 Hz is rejected.
pub fn vib_intensity(w: &Waveform) -> Result<Waveform> {
    vib_intensity_with_cutoff(w, MOTION_CUTOFF_HZ)
}

/// [`vib_intensity`] with an explicit motion cutoff in Hz.
pub fn vib_intensity_with_cutoff(w: &Waveform, cutoff_hz: f64) -> Result<Waveform> {
    if w.num_channels() != 3 {
        return Err(Error::InvalidInput(format!(
            "vibration intensity needs 3 channels, got {}",
            w.num_channels()
        )));
    }
    let n = w.len();
    let mut norm = Vec::with_capacity(n);
    for i in 0..n {
        let (x, y, z) = (w.channels[0][i], w.channels[1][i], w.channels[2][i]);
        norm.push((x * x + y * y + z * z).sqrt());
    }
    let mean = norm.iter().sum::<f64>() / n.max(1) as f64;
    for v in &mut norm {
        *v -= mean;
    }
    let centered = Waveform::mono(norm, w.sample_rate())?;
    filter(&centered, FilterKind::Highpass, cutoff_hz, 4)
}

/// Reads a PCM 16-bit little-endian WAV file (mono or 3-channel).
pub fn read_wav(path: &Path) -> Result<Waveform> {
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::InvalidInput(format!(
            "{}: expected 16-bit PCM",
            path.display()
        )));
    }
    let nch = spec.channels as usize;
    if nch != 1 && nch != 3 {
        return Err(Error::InvalidInput(format!(
            "{}: expected 1 or 3 channels, got {nch}",
            path.display()
        )));
    }
    let mut channels = vec![Vec::new(); nch];
    for (i, s) in reader.samples::<i16>().enumerate() {
        channels[i % nch].push(s? as f64 / 32768.0);
    }
    Waveform::new(channels, spec.sample_rate)
}

/// Writes a waveform as PCM 16-bit little-endian WAV.
pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: w.num_channels() as u16,
        sample_rate: w.sample_rate(),
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec)?;
    for i in 0..w.len() {
        for c in 0..w.num_channels() {
            let v = (w.channels[c][i] * 32768.0).round().clamp(-32768.0, 32767.0);
            writer.write_sample(v as i16)?;
        }
    }
    writer.finalize()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_wave(len: usize, rate: u32, seed: u64) -> Waveform {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s: Vec<f64> = (0..len).map(|_| rng.random_range(-0.8..0.8)).collect();
        Waveform::mono(s, rate).unwrap()
    }

    fn sine(freq: f64, len: usize, rate: u32, amp: f64) -> Vec<f64> {
        (0..len)
            .map(|i| amp * (2.0 * std::f64::consts::PI * freq * i as f64 / rate as f64).sin())
            .collect()
    }

    #[test]
    fn stft_time_dims_match_across_rates() {
        for secs in [1.0f64, 1.7, 3.2] {
            let a = random_wave((16_000.0 * secs) as usize, AUDIO_RATE, 1);
            let v = random_wave((1_600.0 * secs) as usize, VIB_RATE, 2);
            let sa = stft(&a, AUDIO_WINDOW, AUDIO_HOP).unwrap();
            let sv = stft(&v, VIB_WINDOW, VIB_HOP).unwrap();
            assert_eq!(sa.num_frames(), sv.num_frames());
            assert_eq!(sa.bins(), 321);
            assert_eq!(sv.bins(), 33);
        }
    }

    #[test]
    fn stft_zero_input_is_zero() {
        let w = Waveform::mono(vec![0.0; 4000], AUDIO_RATE).unwrap();
        let s = stft(&w, AUDIO_WINDOW, AUDIO_HOP).unwrap();
        assert!(s.frames.iter().all(|c| c.norm() == 0.0));
    }

    #[test]
    fn stft_sine_peak_bin_matches_dft_oracle() {
        // 1 kHz unit sine at 16 kHz, window 640 -> bin 1000 * 640 / 16000 = 40
        let w = Waveform::mono(sine(1000.0, 16_000, AUDIO_RATE, 1.0), AUDIO_RATE).unwrap();
        let s = stft(&w, AUDIO_WINDOW, AUDIO_HOP).unwrap();
        // pick an interior frame and find its magnitude peak
        let t = s.num_frames() / 2;
        let mag: Vec<f64> = (0..s.bins()).map(|k| s.frames[(t, k)].norm()).collect();
        let peak = mag
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert_eq!(peak, 40);

        // brute-force DFT of the same windowed frame agrees bin by bin
        let window = hann_window(AUDIO_WINDOW);
        let left = AUDIO_WINDOW - AUDIO_HOP;
        let samples = w.samples().unwrap();
        for k in [0usize, 13, 40, 160, 320] {
            let mut re = 0.0;
            let mut im = 0.0;
            for i in 0..AUDIO_WINDOW {
                let p = t * AUDIO_HOP + i;
                let x = if p >= left && p - left < samples.len() {
                    samples[p - left]
                } else {
                    0.0
                };
                let ang = -2.0 * std::f64::consts::PI * (k * i) as f64 / AUDIO_WINDOW as f64;
                re += x * window[i] * ang.cos();
                im += x * window[i] * ang.sin();
            }
            let oracle = (re * re + im * im).sqrt();
            assert_abs_diff_eq!(s.frames[(t, k)].norm(), oracle, epsilon = 1e-8);
        }
    }

    #[test]
    fn stft_rejects_bad_args() {
        let w = random_wave(1000, AUDIO_RATE, 3);
        assert!(stft(&w, 640, 641).is_err());
        assert!(stft(&w, 641, 320).is_err());
        let tri = Waveform::new(vec![vec![0.0; 10]; 3], VIB_RATE).unwrap();
        assert!(stft(&tri, 64, 32).is_err());
    }

    #[test]
    fn istft_round_trip_identity() {
        for (len, rate, win, hop) in [
            (16_000usize, AUDIO_RATE, AUDIO_WINDOW, AUDIO_HOP),
            (1_601, VIB_RATE, VIB_WINDOW, VIB_HOP),
            (777, VIB_RATE, VIB_WINDOW, VIB_HOP),
        ] {
            let w = random_wave(len, rate, len as u64);
            let rt = istft(&stft(&w, win, hop).unwrap()).unwrap();
            assert_eq!(rt.len(), w.len());
            let err = w
                .samples()
                .unwrap()
                .iter()
                .zip(rt.samples().unwrap())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            assert!(err < 1e-6, "round trip error {err}");
        }
    }

    #[test]
    fn istft_zero_magnitude_gives_silence() {
        let w = random_wave(3200, AUDIO_RATE, 7);
        let s = stft(&w, AUDIO_WINDOW, AUDIO_HOP).unwrap();
        let mag = Array2::zeros((s.num_frames(), s.bins()));
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let phase = Array2::from_shape_fn((s.num_frames(), s.bins()), |_| {
            rng.random_range(-3.14..3.14)
        });
        let out = istft_mag_phase(&mag, &phase, AUDIO_WINDOW, AUDIO_HOP, AUDIO_RATE, w.len())
            .unwrap();
        assert!(out.samples().unwrap().iter().all(|&x| x.abs() < 1e-12));
    }

    #[test]
    fn istft_identity_mask_reconstructs_noisy() {
        let w = random_wave(8000, AUDIO_RATE, 11);
        let s = stft(&w, AUDIO_WINDOW, AUDIO_HOP).unwrap();
        let out = istft_mag_phase(
            &s.magnitude(),
            &s.phase(),
            AUDIO_WINDOW,
            AUDIO_HOP,
            AUDIO_RATE,
            w.len(),
        )
        .unwrap();
        let err = w
            .samples()
            .unwrap()
            .iter()
            .zip(out.samples().unwrap())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(err < 1e-6, "identity mask error {err}");
    }

    #[test]
    fn istft_rejects_shape_mismatch() {
        let mag = Array2::zeros((10, 33));
        let phase = Array2::zeros((10, 32));
        assert!(istft_mag_phase(&mag, &phase, 64, 32, VIB_RATE, 320).is_err());
    }

    #[test]
    fn parseval_frame_energy() {
        let w = random_wave(3200, VIB_RATE, 21);
        let s = stft(&w, VIB_WINDOW, VIB_HOP).unwrap();
        let window = hann_window(VIB_WINDOW);
        let left = VIB_WINDOW - VIB_HOP;
        let samples = w.samples().unwrap();
        for t in 0..s.num_frames() {
            let mut time_energy = 0.0;
            for i in 0..VIB_WINDOW {
                let p = t * VIB_HOP + i;
                let x = if p >= left && p - left < samples.len() {
                    samples[p - left]
                } else {
                    0.0
                };
                time_energy += (x * window[i]).powi(2);
            }
            let mut freq_energy = s.frames[(t, 0)].norm_sqr();
            freq_energy += s.frames[(t, VIB_WINDOW / 2)].norm_sqr();
            for k in 1..VIB_WINDOW / 2 {
                freq_energy += 2.0 * s.frames[(t, k)].norm_sqr();
            }
            freq_energy /= VIB_WINDOW as f64;
            if time_energy > 1e-12 {
                assert!((freq_energy / time_energy - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn vib_intensity_rejects_dc() {
        // constant axes (3, 4, 0): norm 5 before mean removal, ~0 after
        let n = 3200;
        let w = Waveform::new(
            vec![vec![3.0; n], vec![4.0; n], vec![0.0; n]],
            VIB_RATE,
        )
        .unwrap();
        let out = vib_intensity(&w).unwrap();
        assert_eq!(out.len(), n);
        assert!(out.rms() < 1e-9);
    }

    #[test]
    fn vib_intensity_passes_speech_band() {
        // single-axis 200 Hz sine: rectified intensity is all above the
        // motion cutoff once the mean is removed
        let n = 3200;
        let w = Waveform::new(
            vec![sine(200.0, n, VIB_RATE, 0.5), vec![0.0; n], vec![0.0; n]],
            VIB_RATE,
        )
        .unwrap();
        let out = vib_intensity(&w).unwrap();
        // analytic |sin| with its mean removed
        let expect: Vec<f64> = {
            let rect: Vec<f64> = sine(200.0, n, VIB_RATE, 0.5).iter().map(|x| x.abs()).collect();
            let m = rect.iter().sum::<f64>() / n as f64;
            rect.iter().map(|x| x - m).collect()
        };
        let expect_rms = (expect.iter().map(|x| x * x).sum::<f64>() / n as f64).sqrt();
        // interior comparison to stay clear of filter edge transients
        let a = &out.samples().unwrap()[200..n - 200];
        let b = &expect[200..n - 200];
        let diff_rms =
            (a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64).sqrt();
        assert!(diff_rms / expect_rms < 0.05, "relative diff {}", diff_rms / expect_rms);
    }

    #[test]
    fn vib_intensity_rejects_walking_band() {
        // 10 Hz sway on one axis on top of a static gravity vector
        let n = 6400;
        let sway = sine(10.0, n, VIB_RATE, 0.2);
        let ax: Vec<f64> = sway.iter().map(|s| 0.9 + s).collect();
        let w = Waveform::new(vec![ax, vec![0.3; n], vec![0.2; n]], VIB_RATE).unwrap();
        let out = vib_intensity(&w).unwrap();

        // pre-filter intensity (mean-removed norm) for the reference RMS
        let mut norm: Vec<f64> = (0..n)
            .map(|i| {
                let x = 0.9 + sway[i];
                (x * x + 0.3f64 * 0.3 + 0.2f64 * 0.2).sqrt()
            })
            .collect();
        let m = norm.iter().sum::<f64>() / n as f64;
        for v in &mut norm {
            *v -= m;
        }
        let pre_rms = (norm[320..n - 320].iter().map(|x| x * x).sum::<f64>()
            / (n - 640) as f64)
            .sqrt();
        let post_rms = (out.samples().unwrap()[320..n - 320]
            .iter()
            .map(|x| x * x)
            .sum::<f64>()
            / (n - 640) as f64)
            .sqrt();
        let atten_db = 20.0 * (pre_rms / post_rms.max(1e-30)).log10();
        assert!(atten_db >= 40.0, "attenuation {atten_db} dB");
    }

    #[test]
    fn vib_intensity_axis_permutation_invariant() {
        let n = 1600;
        let a = sine(200.0, n, VIB_RATE, 0.4);
        let b = sine(300.0, n, VIB_RATE, 0.2);
        let c = sine(450.0, n, VIB_RATE, 0.1);
        let w1 = Waveform::new(vec![a.clone(), b.clone(), c.clone()], VIB_RATE).unwrap();
        let w2 = Waveform::new(vec![c, a, b], VIB_RATE).unwrap();
        let o1 = vib_intensity(&w1).unwrap();
        let o2 = vib_intensity(&w2).unwrap();
        for (x, y) in o1.samples().unwrap().iter().zip(o2.samples().unwrap()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }
    }

    #[test]
    fn vib_intensity_needs_three_channels() {
        let w = random_wave(100, VIB_RATE, 1);
        assert!(vib_intensity(&w).is_err());
    }

    #[test]
    fn filter_passband_identity_near_nyquist() {
        let w = random_wave(16_000, AUDIO_RATE, 31);
        let cutoff = 0.499 * AUDIO_RATE as f64;
        let out = filter(&w, FilterKind::Lowpass, cutoff, 4).unwrap();
        assert_eq!(out.len(), w.len());
        let e_in: f64 = w.samples().unwrap().iter().map(|x| x * x).sum();
        let e_out: f64 = out.samples().unwrap().iter().map(|x| x * x).sum();
        assert!((e_out / e_in - 1.0).abs() < 0.01, "energy ratio {}", e_out / e_in);
    }

    #[test]
    fn filter_highpass_attenuates_infra() {
        // 10 Hz sine through the 85 Hz motion high-pass: >= 40 dB down
        let n = 6400;
        let w = Waveform::mono(sine(10.0, n, VIB_RATE, 1.0), VIB_RATE).unwrap();
        let out = filter(&w, FilterKind::Highpass, MOTION_CUTOFF_HZ, 4).unwrap();
        let pre = (sine(10.0, n, VIB_RATE, 1.0)[320..n - 320]
            .iter()
            .map(|x| x * x)
            .sum::<f64>()
            / (n - 640) as f64)
            .sqrt();
        let post = (out.samples().unwrap()[320..n - 320]
            .iter()
            .map(|x| x * x)
            .sum::<f64>()
            / (n - 640) as f64)
            .sqrt();
        let atten = 20.0 * (pre / post.max(1e-30)).log10();
        assert!(atten >= 40.0, "attenuation {atten} dB");
    }

    #[test]
    fn filter_lowpass_isolates_vibration_band() {
        // 800 Hz lowpass keeps a 300 Hz tone, kills a 1300 Hz tone
        let n = 6400;
        let low = sine(300.0, n, AUDIO_RATE, 0.5);
        let high = sine(1300.0, n, AUDIO_RATE, 0.5);
        let mixed: Vec<f64> = low.iter().zip(&high).map(|(a, b)| a + b).collect();
        let w = Waveform::mono(mixed, AUDIO_RATE).unwrap();
        let out = filter(&w, FilterKind::Lowpass, VIB_BAND_HZ, 6).unwrap();
        let os = out.samples().unwrap();
        let err_low: f64 = os[500..n - 500]
            .iter()
            .zip(&low[500..n - 500])
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / (n - 1000) as f64;
        // residual should be far below the high tone's power (0.125)
        assert!(err_low < 0.01, "residual power {err_low}");
    }

    #[test]
    fn filter_is_linear() {
        let x = random_wave(2000, VIB_RATE, 41);
        let y = random_wave(2000, VIB_RATE, 42);
        let (a, b) = (0.7, -1.3);
        let combo: Vec<f64> = x
            .samples()
            .unwrap()
            .iter()
            .zip(y.samples().unwrap())
            .map(|(p, q)| a * p + b * q)
            .collect();
        let f_combo = filter(
            &Waveform::mono(combo, VIB_RATE).unwrap(),
            FilterKind::Highpass,
            85.0,
            4,
        )
        .unwrap();
        let fx = filter(&x, FilterKind::Highpass, 85.0, 4).unwrap();
        let fy = filter(&y, FilterKind::Highpass, 85.0, 4).unwrap();
        for i in 0..2000 {
            let lhs = f_combo.samples().unwrap()[i];
            let rhs = a * fx.samples().unwrap()[i] + b * fy.samples().unwrap()[i];
            assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-9);
        }
    }

    #[test]
    fn filter_rejects_cutoff_out_of_range() {
        let w = random_wave(100, VIB_RATE, 1);
        assert!(filter(&w, FilterKind::Lowpass, 0.0, 4).is_err());
        assert!(filter(&w, FilterKind::Lowpass, 800.0, 4).is_err());
        assert!(filter(&w, FilterKind::Lowpass, 900.0, 4).is_err());
    }

    #[test]
    fn resample_sine_preserves_frequency_and_amplitude() {
        // 1.6 kHz -> 800 Hz on a 100 Hz sine; fit the sine at the new rate
        let n = 6400;
        let w = Waveform::mono(sine(100.0, n, VIB_RATE, 0.7), VIB_RATE).unwrap();
        let out = resample(&w, 800).unwrap();
        assert_eq!(out.sample_rate(), 800);
        assert_eq!(out.len(), 3200);
        // least-squares fit of A sin + B cos at 100 Hz over the interior
        let s = out.samples().unwrap();
        let (mut ss, mut sc, mut cc, mut xs, mut xc) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for i in 400..s.len() - 400 {
            let ph = 2.0 * std::f64::consts::PI * 100.0 * i as f64 / 800.0;
            let (sn, cs) = (ph.sin(), ph.cos());
            ss += sn * sn;
            cc += cs * cs;
            sc += sn * cs;
            xs += s[i] * sn;
            xc += s[i] * cs;
        }
        let det = ss * cc - sc * sc;
        let a = (xs * cc - xc * sc) / det;
        let b = (xc * ss - xs * sc) / det;
        let amp = (a * a + b * b).sqrt();
        assert!((amp / 0.7 - 1.0).abs() < 0.01, "amplitude {amp}");
    }

    #[test]
    fn resample_identity_when_rates_match() {
        let w = random_wave(512, VIB_RATE, 51);
        let out = resample(&w, VIB_RATE).unwrap();
        assert_eq!(out.samples().unwrap(), w.samples().unwrap());
    }

    #[test]
    fn resample_low_rates_for_ablation() {
        let w = random_wave(1600, VIB_RATE, 52);
        for rate in [1200u32, 800, 400] {
            let out = resample(&w, rate).unwrap();
            assert_eq!(out.sample_rate(), rate);
            assert_eq!(out.len(), (1600 * rate as usize) / 1600);
        }
    }

    #[test]
    fn wav_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.wav");
        let w = random_wave(1234, AUDIO_RATE, 61);
        write_wav(&path, &w).unwrap();
        let r = read_wav(&path).unwrap();
        assert_eq!(r.sample_rate(), AUDIO_RATE);
        assert_eq!(r.len(), w.len());
        for (a, b) in w.samples().unwrap().iter().zip(r.samples().unwrap()) {
            assert!((a - b).abs() <= 1.0 / 32768.0 + 1e-9);
        }
        // tri-axial round trip
        let tri = Waveform::new(
            vec![
                sine(100.0, 500, VIB_RATE, 0.4),
                sine(150.0, 500, VIB_RATE, 0.3),
                sine(200.0, 500, VIB_RATE, 0.2),
            ],
            VIB_RATE,
        )
        .unwrap();
        let p2 = dir.path().join("tri.wav");
        write_wav(&p2, &tri).unwrap();
        let r2 = read_wav(&p2).unwrap();
        assert_eq!(r2.num_channels(), 3);
        assert_eq!(r2.len(), 500);
    }

    #[test]
    fn waveform_validation() {
        assert!(Waveform::mono(vec![f64::NAN], VIB_RATE).is_err());
        assert!(Waveform::new(vec![vec![0.0]; 2], VIB_RATE).is_err());
        assert!(Waveform::new(vec![vec![0.0], vec![0.0, 1.0], vec![0.0]], VIB_RATE).is_err());
        assert!(Waveform::mono(vec![0.0], 0).is_err());
    }
}
