//! Evaluation metrics: SNR, scale-invariant SNR, log-spectral distance,
//! and spectrogram similarity error.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::signal::{stft, Waveform};
use crate::training::si_snr;
use crate::{Error, Result};

/// dB cap returned when the estimate matches the reference.
pub const SNR_CAP_DB: f64 = 60.0;
/// Power floor inside the log to keep silent bins finite.
pub const LSD_POWER_FLOOR: f64 = 1e-10;

/// Log-spectral distance between two equal-length waveforms.
///
/// `(1/L) Σ_l sqrt((1/K) Σ_k (X - X̂)²)` over log power spectrograms,
/// natural log, with the power floored at 1e-10.
pub fn lsd(x: &Waveform, y: &Waveform, window_size: usize, hop: usize) -> Result<f64> {
    if x.len() != y.len() || x.sample_rate() != y.sample_rate() {
        return Err(Error::Shape(format!(
            "length/rate mismatch: {}@{} vs {}@{}",
            x.len(),
            x.sample_rate(),
            y.len(),
            y.sample_rate()
        )));
    }
    let sx = stft(x, window_size, hop)?;
    let sy = stft(y, window_size, hop)?;
    let (frames, bins) = (sx.num_frames(), sx.bins());
    let mut acc = 0.0;
    for t in 0..frames {
        let mut inner = 0.0;
        for k in 0..bins {
            let px = sx.frames[(t, k)].norm_sqr().max(LSD_POWER_FLOOR).ln();
            let py = sy.frames[(t, k)].norm_sqr().max(LSD_POWER_FLOOR).ln();
            inner += (px - py) * (px - py);
        }
        acc += (inner / bins as f64).sqrt();
    }
    Ok(acc / frames as f64)
}

/// Plain (scale-sensitive) SNR: `10 log10(||ref||² / ||est - ref||²)`,
/// capped at +60 dB when the estimate equals the reference.
pub fn snr_metric(est: &Waveform, reference: &Waveform) -> Result<f64> {
    let e = est.samples()?;
    let r = reference.samples()?;
    if e.len() != r.len() {
        return Err(Error::Shape(format!(
            "length mismatch: {} vs {}",
            e.len(),
            r.len()
        )));
    }
    let p_ref: f64 = r.iter().map(|v| v * v).sum();
    let p_err: f64 = e.iter().zip(r).map(|(a, b)| (a - b) * (a - b)).sum();
    if p_err == 0.0 || p_ref / p_err > 1e6 {
        return Ok(SNR_CAP_DB);
    }
    Ok(10.0 * (p_ref / p_err).log10())
}

/// Spectrogram similarity error between a real signal and its synthetic
/// counterpart: mean absolute magnitude difference over all pixels,
/// normalized by the largest real magnitude. 0 is identical.
pub fn spec_similarity_error(
    real: &Waveform,
    synth: &Waveform,
    window_size: usize,
    hop: usize,
) -> Result<f64> {
    if real.len() != synth.len() || real.sample_rate() != synth.sample_rate() {
        return Err(Error::Shape(format!(
            "length/rate mismatch: {}@{} vs {}@{}",
            real.len(),
            real.sample_rate(),
            synth.len(),
            synth.sample_rate()
        )));
    }
    let sr = stft(real, window_size, hop)?;
    let ss = stft(synth, window_size, hop)?;
    let mr = sr.magnitude();
    let ms = ss.magnitude();
    let max_real = mr.iter().cloned().fold(0.0f64, f64::max);
    if max_real == 0.0 {
        return Err(Error::InvalidInput("silent reference signal".into()));
    }
    let mean_abs = mr
        .iter()
        .zip(ms.iter())
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / mr.len() as f64;
    Ok(mean_abs / max_real)
}

/// Per-clip metric row in an evaluation report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClipMetrics {
    pub id: String,
    pub si_snr_db: f64,
    pub snr_db: f64,
    pub lsd: f64,
    pub similarity_error: f64,
}

/// Aggregated evaluation results.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub clips: Vec<ClipMetrics>,
    pub mean_si_snr_db: f64,
    pub mean_snr_db: f64,
    pub mean_lsd: f64,
    pub mean_similarity_error: f64,
    pub p50_si_snr_db: f64,
    pub p90_si_snr_db: f64,
    /// Metrics that need external systems (PESQ reference code, an ASR
    /// stack) and are therefore not computed here.
    pub external: Vec<String>,
}

impl EvalReport {
    /// Builds a report from per-clip (enhanced, clean) pairs.
    pub fn from_pairs(pairs: &[(String, Waveform, Waveform)], window: usize, hop: usize) -> Result<Self> {
        let mut clips = Vec::with_capacity(pairs.len());
        for (id, est, reference) in pairs {
            clips.push(ClipMetrics {
                id: id.clone(),
                si_snr_db: si_snr(est, reference)?,
                snr_db: snr_metric(est, reference)?,
                lsd: lsd(est, reference, window, hop)?,
                similarity_error: spec_similarity_error(reference, est, window, hop)?,
            });
        }
        let mean = |f: fn(&ClipMetrics) -> f64| {
            clips.iter().map(f).sum::<f64>() / clips.len().max(1) as f64
        };
        let mut si: Vec<f64> = clips.iter().map(|c| c.si_snr_db).collect();
        si.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let pct = |p: f64| {
            if si.is_empty() {
                return 0.0;
            }
            si[((p * (si.len() - 1) as f64).round() as usize).min(si.len() - 1)]
        };
        Ok(Self {
            mean_si_snr_db: mean(|c| c.si_snr_db),
            mean_snr_db: mean(|c| c.snr_db),
            mean_lsd: mean(|c| c.lsd),
            mean_similarity_error: mean(|c| c.similarity_error),
            p50_si_snr_db: pct(0.5),
            p90_si_snr_db: pct(0.9),
            external: vec!["pesq".into(), "wer".into()],
            clips,
        })
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("id,si_snr_db,snr_db,lsd,similarity_error\n");
        for c in &self.clips {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                c.id, c.si_snr_db, c.snr_db, c.lsd, c.similarity_error
            ));
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::{AUDIO_HOP, AUDIO_WINDOW};
    use crate::synth;

    #[test]
    fn lsd_zero_on_identity_and_symmetric() {
        let x = synth::speech_like(0.5, 16_000, 1);
        let y = synth::white_noise(0.5, 16_000, 2, 0.3);
        assert_eq!(lsd(&x, &x, AUDIO_WINDOW, AUDIO_HOP).unwrap(), 0.0);
        let ab = lsd(&x, &y, AUDIO_WINDOW, AUDIO_HOP).unwrap();
        let ba = lsd(&y, &x, AUDIO_WINDOW, AUDIO_HOP).unwrap();
        assert!((ab - ba).abs() < 1e-12);
        assert!(ab > 0.0);
    }

    #[test]
    fn lsd_closed_form_for_scaled_copy() {
        // y = 2x: per-bin log-power gap is ln 4 everywhere, so lsd = ln 4
        let x = synth::white_noise(1.0, 16_000, 3, 0.4);
        let y = Waveform::mono(
            x.samples().unwrap().iter().map(|v| 2.0 * v).collect(),
            16_000,
        )
        .unwrap();
        let d = lsd(&x, &y, AUDIO_WINDOW, AUDIO_HOP).unwrap();
        let expect = 4f64.ln();
        assert!((d - expect).abs() < 1e-9, "lsd {d} expected {expect}");
    }

    #[test]
    fn lsd_rejects_length_mismatch() {
        let x = synth::white_noise(1.0, 16_000, 3, 0.4);
        let y = synth::white_noise(0.5, 16_000, 3, 0.4);
        assert!(lsd(&x, &y, AUDIO_WINDOW, AUDIO_HOP).is_err());
    }

    #[test]
    fn snr_closed_form_and_cap() {
        let r = synth::speech_like(0.5, 16_000, 5);
        // est = ref + noise with ||noise|| = ||ref|| / 10  ->  20 dB
        let p_ref: f64 = r.samples().unwrap().iter().map(|v| v * v).sum();
        let n = r.len();
        let noise_amp = (p_ref / (100.0 * n as f64)).sqrt();
        let est = Waveform::mono(
            r.samples()
                .unwrap()
                .iter()
                .enumerate()
                .map(|(i, v)| v + if i % 2 == 0 { noise_amp } else { -noise_amp })
                .collect(),
            16_000,
        )
        .unwrap();
        let snr = snr_metric(&est, &r).unwrap();
        assert!((snr - 20.0).abs() < 1e-9, "snr {snr}");
        assert_eq!(snr_metric(&r, &r).unwrap(), SNR_CAP_DB);
    }

    #[test]
    fn snr_is_not_scale_invariant_but_si_snr_is() {
        let r = synth::speech_like(0.5, 16_000, 6);
        let est = Waveform::mono(
            r.samples().unwrap().iter().map(|v| 1.1 * v).collect(),
            16_000,
        )
        .unwrap();
        let plain = snr_metric(&est, &r).unwrap();
        // 10% amplitude error -> 10 log10(1/0.01) = 20 dB, far below cap
        assert!((plain - 20.0 * (0.1f64).log10().abs() / 0.1 * 0.1).abs() < 1.0);
        let si = si_snr(&est, &r).unwrap();
        assert_eq!(si, SNR_CAP_DB);
    }

    #[test]
    fn similarity_identity_and_silent_synth() {
        let x = synth::speech_like(0.5, 16_000, 7);
        assert_eq!(
            spec_similarity_error(&x, &x, AUDIO_WINDOW, AUDIO_HOP).unwrap(),
            0.0
        );
        let zero = Waveform::mono(vec![0.0; x.len()], 16_000).unwrap();
        // synth = 0 -> mean(|real|) / max(|real|)
        let e = spec_similarity_error(&x, &zero, AUDIO_WINDOW, AUDIO_HOP).unwrap();
        let s = stft(&x, AUDIO_WINDOW, AUDIO_HOP).unwrap().magnitude();
        let expect =
            s.iter().sum::<f64>() / s.len() as f64 / s.iter().cloned().fold(0.0f64, f64::max);
        assert!((e - expect).abs() < 1e-12);
        // silent reference errors
        assert!(spec_similarity_error(&zero, &x, AUDIO_WINDOW, AUDIO_HOP).is_err());
    }

    #[test]
    fn similarity_invariant_to_common_scaling() {
        let x = synth::speech_like(0.5, 16_000, 8);
        let y = synth::speech_like(0.5, 16_000, 9);
        let e1 = spec_similarity_error(&x, &y, AUDIO_WINDOW, AUDIO_HOP).unwrap();
        let sx = Waveform::mono(
            x.samples().unwrap().iter().map(|v| 3.0 * v).collect(),
            16_000,
        )
        .unwrap();
        let sy = Waveform::mono(
            y.samples().unwrap().iter().map(|v| 3.0 * v).collect(),
            16_000,
        )
        .unwrap();
        let e2 = spec_similarity_error(&sx, &sy, AUDIO_WINDOW, AUDIO_HOP).unwrap();
        assert!((e1 - e2).abs() < 1e-9);
        assert!(e1 <= 1.0 && e1 >= 0.0);
    }

    #[test]
    fn report_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let clean = synth::speech_like(0.5, 16_000, 10);
        let noisy = crate::mixer::mix_at_snr(
            &clean,
            &synth::white_noise(0.5, 16_000, 11, 0.3),
            5.0,
        )
        .unwrap();
        let report = EvalReport::from_pairs(
            &[("clip0".into(), noisy, clean)],
            AUDIO_WINDOW,
            AUDIO_HOP,
        )
        .unwrap();
        report.write_json(&dir.path().join("r.json")).unwrap();
        report.write_csv(&dir.path().join("r.csv")).unwrap();
        let text = std::fs::read_to_string(dir.path().join("r.csv")).unwrap();
        assert!(text.lines().count() == 2);
        assert!(report.external.contains(&"pesq".to_string()));
    }
}
