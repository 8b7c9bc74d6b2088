// Calibration harness for continual learning on a domain-shifted noise task.
use std::time::Instant;

use vibomni::adapt::{curate, RemixConfig, SnrSource};
use vibomni::bcf::FrequencyResponse;
use vibomni::mixer::{mix_at_snr, NoiseKind, TrainingTriple, TripleMeta};
use vibomni::model::{apply_mask_and_reconstruct, forward_offline, init_params, ModelConfig};
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

// domain A: broadband white noise. domain B: low-frequency rumble.
fn noise_b(seed: u64) -> Waveform {
    synth::colored_noise(1.0, 16_000, seed, 0.5, 400.0).unwrap()
}

fn clip(seed: u64, snr_db: f64, domain_b: bool) -> (TrainItem, Waveform, Waveform) {
    let clean = synth::speech_like(1.0, 16_000, seed);
    let noise = if domain_b {
        noise_b(seed + 4000)
    } else if seed % 2 == 0 {
        synth::white_noise(1.0, 16_000, seed + 4000, 0.3)
    } else {
        synth::speech_noise(1.0, 16_000, seed + 4000)
    };
    let noisy = mix_at_snr(&clean, &noise, snr_db).unwrap();
    let vib = vibomni::bcf::synthesize_vibration(&clean, &known_bcf()).unwrap();
    let triple = TrainingTriple {
        id: format!("c{seed}"),
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

fn ood_eval(model: &vibomni::model::ModelParameters, eval: &[(TrainItem, Waveform, Waveform)]) -> f64 {
    let mut gains = Vec::new();
    for (item, noisy, clean) in eval {
        let out = forward_offline(model, &item.audio_mag, &item.vib_mag).unwrap();
        let enh = apply_mask_and_reconstruct(out.masks.last().unwrap(), &item.noisy_spec).unwrap();
        gains.push(si_snr(&enh, clean).unwrap() - si_snr(noisy, clean).unwrap());
    }
    gains.iter().sum::<f64>() / gains.len() as f64
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let pre_steps: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(150);
    let ft_epochs: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(2);
    let ft_steps: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(40);
    let ft_lr: f64 = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(1e-3);

    // pretrain on domain A
    let train_a: Vec<TrainItem> = (0..16u64)
        .map(|i| clip(200 + i, 10.0 * (i as f64 / 15.0), false).0)
        .collect();
    let p0 = init_params(&ModelConfig::default(), 7).unwrap();
    let t0 = Instant::now();
    let (pre, _) = train(
        &p0,
        &train_a,
        &LossConfig::default(),
        &TrainOpts { lr: 2e-3, steps: pre_steps, seed: 11, batch_size: 4 },
    )
    .unwrap();
    println!("pretrained {} steps in {:.0}s", pre_steps, t0.elapsed().as_secs_f64());

    // out-of-domain eval set (domain B noise)
    let eval_b: Vec<(TrainItem, Waveform, Waveform)> = (0..8u64)
        .map(|i| clip(700 + i, 2.0 + 6.0 * (i as f64 / 7.0), true))
        .collect();
    let before = ood_eval(&pre, &eval_b);
    println!("OOD SI-SNRi before fine-tune: {:.2} dB", before);

    // in-the-wild stream: half near-clean speech, half noise-dominated
    let mut clips = Vec::new();
    let mut labels = std::collections::HashMap::new();
    for i in 0..24u64 {
        let speech = synth::speech_like(1.0, 16_000, 800 + i);
        let vib = vibomni::bcf::synthesize_vibration(&speech, &known_bcf()).unwrap();
        let (audio, label) = if i % 2 == 0 {
            // near-clean: faint domain-B noise at 19 dB
            (mix_at_snr(&speech, &noise_b(850 + i), 19.0).unwrap(), 19.0)
        } else {
            // noise-dominated: speech buried at -19 dB
            (mix_at_snr(&speech, &noise_b(850 + i), -19.0).unwrap(), -19.0)
        };
        let id = format!("w{i}");
        labels.insert(id.clone(), label);
        clips.push((id, audio, vib));
    }
    let oracle = move |id: &str| labels[id];
    let pools = curate(
        &clips,
        &SnrSource::Oracle(&oracle),
        17.5,
        &RemixConfig { pool_trigger: usize::MAX, ..RemixConfig::default() },
    )
    .unwrap();
    println!("pools: {} clean, {} noise", pools.clean.len(), pools.noise.len());

    let t0 = Instant::now();
    let tuned = vibomni::adapt::continual_finetune(&pre, &pools, ft_epochs, ft_steps, ft_lr, 31).unwrap();
    println!(
        "fine-tuned {} epochs x {} steps in {:.0}s",
        ft_epochs, ft_steps, t0.elapsed().as_secs_f64()
    );
    let after = ood_eval(&tuned, &eval_b);
    println!("OOD SI-SNRi after fine-tune: {:.2} dB", after);
    println!("improvement: {:.2} dB (window 1.5..4.5)", after - before);
}
