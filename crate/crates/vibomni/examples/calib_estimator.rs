// Calibration harness for the multi-modal SNR estimator.
use std::time::Instant;

use vibomni::adapt::{
    estimate_snr, init_estimator, train_estimator, EstimatorConfig, EstimatorSample,
    EstimatorTrainOpts,
};
use vibomni::bcf::FrequencyResponse;
use vibomni::mixer::mix_at_snr;
use vibomni::synth;

fn known_bcf() -> FrequencyResponse {
    FrequencyResponse {
        gains: (0..33).map(|j| 0.9 * (-0.06 * j as f64).exp() + 0.02).collect(),
        bin_hz: 25.0,
        reliable: vec![true; 33],
    }
}

fn make_sample(seed: u64, snr_db: f64, speech_noise: bool) -> EstimatorSample {
    let clean = synth::speech_like(1.0, 16_000, seed);
    let noise = if speech_noise {
        synth::speech_noise(1.0, 16_000, seed + 7000)
    } else {
        synth::white_noise(1.0, 16_000, seed + 7000, 0.3)
    };
    let noisy = mix_at_snr(&clean, &noise, snr_db).unwrap();
    let vib = vibomni::bcf::synthesize_vibration(&clean, &known_bcf()).unwrap();
    EstimatorSample::from_waves(&noisy, &vib, snr_db).unwrap()
}

fn sweep(n: usize, seed0: u64) -> Vec<EstimatorSample> {
    (0..n)
        .map(|i| {
            let snr = -18.0 + 36.0 * (i as f64 / (n - 1) as f64);
            make_sample(seed0 + i as u64, snr, i % 2 == 1)
        })
        .collect()
}

fn mae(est: &vibomni::adapt::SnrEstimatorParams, set: &[EstimatorSample]) -> (f64, f64, f64) {
    let mut all = Vec::new();
    let mut high = Vec::new();
    for s in set {
        let e = estimate_snr(est, &s.audio_mag, &s.vib_mag).unwrap().value_db;
        let err = (e - s.true_snr_db).abs();
        all.push(err);
        if s.true_snr_db > 10.0 {
            high.push(err);
        }
    }
    let m = all.iter().sum::<f64>() / all.len() as f64;
    let h = if high.is_empty() { 0.0 } else { high.iter().sum::<f64>() / high.len() as f64 };
    (m, h, high.len() as f64)
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(300);
    let lr: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(2e-3);
    let n_train: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(160);

    println!("building {} train + 48 eval samples...", n_train);
    let t0 = Instant::now();
    let train_set = sweep(n_train, 1000);
    let eval_set = sweep(48, 9000);
    println!("  data in {:.1}s", t0.elapsed().as_secs_f64());

    let cfg = EstimatorConfig::default();
    let opts = EstimatorTrainOpts { lr, steps, seed: 3, batch_size: 8 };

    // multi-modal
    let t0 = Instant::now();
    let mm = train_estimator(&init_estimator(&cfg, 1), &train_set, &opts).unwrap();
    println!("multimodal trained in {:.1}s", t0.elapsed().as_secs_f64());
    let (m_all, m_high, nh) = mae(&mm, &eval_set);
    println!("  MM  eval MAE {:.2} dB, high(>10dB, n={}) MAE {:.2} dB", m_all, nh, m_high);

    // audio-only ablation: vibration zeroed in train and eval
    let train_zero: Vec<EstimatorSample> = train_set.iter().map(|s| s.zero_vibration()).collect();
    let eval_zero: Vec<EstimatorSample> = eval_set.iter().map(|s| s.zero_vibration()).collect();
    let t0 = Instant::now();
    let ao = train_estimator(&init_estimator(&cfg, 1), &train_zero, &opts).unwrap();
    println!("audio-only trained in {:.1}s", t0.elapsed().as_secs_f64());
    let (a_all, a_high, _) = mae(&ao, &eval_zero);
    println!("  AO  eval MAE {:.2} dB, high MAE {:.2} dB", a_all, a_high);
    println!("high-bucket margin (AO - MM): {:.2} dB", a_high - m_high);
}
