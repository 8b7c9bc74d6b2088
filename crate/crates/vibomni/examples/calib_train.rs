// Calibration harness for the desk-scale training task.
use std::time::Instant;

use vibomni::bcf::FrequencyResponse;
use vibomni::mixer::{mix_at_snr, NoiseKind, TrainingTriple, TripleMeta};
use vibomni::model::{forward_offline, init_params, ModelConfig};
use vibomni::signal::Waveform;
use vibomni::synth;
use vibomni::training::{prepare_item, si_snr, train, LossConfig, TrainItem, TrainOpts};

fn known_bcf() -> FrequencyResponse {
    FrequencyResponse {
        gains: (0..33).map(|j| 0.9 * (-0.06 * j as f64).exp() + 0.02).collect(),
        bin_hz: 25.0,
        reliable: vec![true; 33],
    }
}

fn make_clip(seed: u64, snr_db: f64, speech_noise: bool) -> (TrainItem, Waveform, Waveform) {
    let clean = synth::speech_like(1.0, 16_000, seed);
    let noise = if speech_noise {
        synth::speech_noise(1.0, 16_000, seed + 3000)
    } else {
        synth::white_noise(1.0, 16_000, seed + 3000, 0.3)
    };
    let noisy = mix_at_snr(&clean, &noise, snr_db).unwrap();
    let vib = vibomni::bcf::synthesize_vibration(&clean, &known_bcf()).unwrap();
    let triple = TrainingTriple {
        id: format!("clip{seed}"),
        noisy: noisy.clone(),
        vibration: vib,
        clean: clean.clone(),
        meta: TripleMeta {
            snr_db,
            noise_kind: NoiseKind::Environmental,
            pool_index: None,
            seed,
            rt60_s: None,
        },
    };
    (prepare_item(&triple).unwrap(), noisy, clean)
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(100);
    let lr: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(1e-3);
    let batch: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(4);

    let mut train_items = Vec::new();
    for i in 0..20u64 {
        let snr = 0.0 + 10.0 * (i as f64 / 19.0);
        let (item, _, _) = make_clip(100 + i, snr, i % 2 == 1);
        train_items.push(item);
    }
    let held: Vec<(TrainItem, Waveform, Waveform)> = (0..6u64)
        .map(|i| {
            let snr = 1.0 + 8.0 * (i as f64 / 5.0);
            make_clip(900 + i, snr, i % 2 == 1)
        })
        .collect();

    let cfg = ModelConfig::default();
    let p = init_params(&cfg, 7).unwrap();
    println!("params: {}", p.params.len());

    let t0 = Instant::now();
    let opts = TrainOpts { lr, steps, seed: 11, batch_size: batch };
    let (trained, log) = train(&p, &train_items, &LossConfig::default(), &opts).unwrap();
    let dt = t0.elapsed().as_secs_f64();
    println!("trained {} steps in {:.1}s ({:.2} s/step)", steps, dt, dt / steps as f64);
    for r in log.iter().step_by((steps / 20).max(1)) {
        println!("  step {:4}  loss {:8.3}  si {:7.3}", r.step, r.loss, r.si_snr_train);
    }

    let mut gains = Vec::new();
    for (item, noisy, clean) in &held {
        let out = forward_offline(&trained, &item.audio_mag, &item.vib_mag).unwrap();
        let enh = vibomni::model::apply_mask_and_reconstruct(
            out.masks.last().unwrap(),
            &item.noisy_spec,
        )
        .unwrap();
        let before = si_snr(noisy, clean).unwrap();
        let after = si_snr(&enh, clean).unwrap();
        println!("  held {}  in {:6.2} dB  out {:6.2} dB  gain {:6.2}", item.id, before, after, after - before);
        gains.push(after - before);
    }
    let mean = gains.iter().sum::<f64>() / gains.len() as f64;
    println!("mean held-out SI-SNR improvement: {mean:.2} dB");
}
