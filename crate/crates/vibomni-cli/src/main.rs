//! Command-line entry point for the bone-conduction enhancement toolkit.
//!
//! Exit codes: 0 success, 1 validation error (bad arguments, missing or
//! malformed files), 2 runtime failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use vibomni::adapt::{
    adaptive_enhance, curate, estimate_snr_waves, init_estimator, train_estimator,
    EstimatorConfig, EstimatorSample, EstimatorTrainOpts, RemixConfig, SnrEstimatorParams,
    SnrSource,
};
use vibomni::bcf::{estimate_responses_windowed, fit_bcf, load_pool, sample_response, save_pool};
use vibomni::metrics::EvalReport;
use vibomni::mixer::{build_training_set, write_training_set, DatasetManifest};
use vibomni::model::{
    apply_mask_and_reconstruct, forward_streaming_step, forward_up_to, init_params, ModelConfig,
    ModelParameters, StreamState,
};
use vibomni::signal::{
    read_wav, stft, vib_intensity, write_wav, Waveform, AUDIO_HOP, AUDIO_WINDOW, VIB_HOP,
    VIB_WINDOW,
};
use vibomni::training::{prepare_item, train, write_loss_log, LossConfig, TrainItem, TrainOpts};

#[derive(Parser)]
#[command(name = "vibomni", version, about = "Bone-conduction speech enhancement toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Seed for every random draw; equal seeds give byte-identical runs.
    #[arg(long, global = true, default_value_t = 0, env = "VIBOMNI_SEED")]
    seed: u64,

    /// Audio STFT window in samples.
    #[arg(long, global = true, default_value_t = AUDIO_WINDOW, env = "VIBOMNI_WINDOW_AUDIO")]
    window_audio: usize,

    /// Vibration STFT window in samples.
    #[arg(long, global = true, default_value_t = VIB_WINDOW, env = "VIBOMNI_WINDOW_VIB")]
    window_vib: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Fit bone-conduction transfer models from paired recordings.
    FitBcf(FitBcfArgs),
    /// Synthesize vibration channels for a clean corpus from a BCF pool.
    Augment(AugmentArgs),
    /// Build mixed (noisy, vibration, clean) triples from a manifest.
    Mix(MixArgs),
    /// Train the enhancement model on a triple directory.
    Train(TrainArgs),
    /// Train the multi-modal SNR estimator on a triple directory.
    TrainEstimator(TrainEstimatorArgs),
    /// Enhance a noisy clip using its vibration channel.
    Enhance(EnhanceArgs),
    /// Estimate the SNR of a clip from audio and vibration.
    EstimateSnr(EstimateSnrArgs),
    /// Sort in-the-wild clips into clean/noise pools and remix them.
    Curate(CurateArgs),
    /// Score enhanced clips against clean references.
    Eval(EvalArgs),
    /// Measure streaming latency and real-time factor.
    Bench(BenchArgs),
}

#[derive(Args)]
struct FitBcfArgs {
    /// Paired audio recording (16 kHz mono WAV). Repeatable; each pair
    /// contributes one pool entry.
    #[arg(long, required = true)]
    audio: Vec<PathBuf>,
    /// Paired vibration recording (mono intensity or 3-axis WAV), one per
    /// --audio.
    #[arg(long, required = true)]
    vib: Vec<PathBuf>,
    /// Estimation window length in seconds.
    #[arg(long, default_value_t = 5.0)]
    window_secs: f64,
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Args)]
struct AugmentArgs {
    /// Directory of clean 16 kHz mono WAVs.
    #[arg(long)]
    clean_dir: PathBuf,
    /// BCF pool JSON produced by fit-bcf.
    #[arg(long)]
    pool: PathBuf,
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Args)]
struct MixArgs {
    /// JSON-lines dataset manifest.
    #[arg(long)]
    manifest: PathBuf,
    /// BCF pool for entries without real vibration.
    #[arg(long)]
    pool: Option<PathBuf>,
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Directory of triples as written by `mix` (out/{id}/noisy.wav...).
    #[arg(long)]
    data: PathBuf,
    /// Warm-start checkpoint; a fresh seeded init when absent.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long, default_value_t = 500)]
    steps: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 4)]
    batch: usize,
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainEstimatorArgs {
    /// Directory of triples with meta.json SNR labels.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 400)]
    steps: usize,
    #[arg(long, default_value_t = 2e-3)]
    lr: f64,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Args)]
struct EnhanceArgs {
    #[arg(long)]
    noisy: PathBuf,
    #[arg(long)]
    vib: PathBuf,
    #[arg(long)]
    model: PathBuf,
    /// Frame-by-frame causal inference instead of the offline pass.
    #[arg(long)]
    stream: bool,
    /// Adaptive-depth inference driven by the SNR estimator.
    #[arg(long)]
    adaptive: bool,
    /// Estimator checkpoint (required with --adaptive).
    #[arg(long)]
    estimator: Option<PathBuf>,
    /// Adaptive stopping threshold in dB.
    #[arg(long, default_value_t = 15.0, env = "VIBOMNI_THRESHOLD")]
    threshold: f64,
    /// Run only the first N separator blocks.
    #[arg(long, env = "VIBOMNI_BLOCKS")]
    blocks: Option<usize>,
    /// Vibration-energy VAD threshold (RMS); frames below it bypass
    /// enhancement.
    #[arg(long)]
    vad_threshold: Option<f64>,
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Args)]
struct EstimateSnrArgs {
    #[arg(long)]
    audio: PathBuf,
    #[arg(long)]
    vib: PathBuf,
    #[arg(long)]
    estimator: PathBuf,
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Args)]
struct CurateArgs {
    /// Directory of paired clips named {id}.audio.wav / {id}.vib.wav.
    #[arg(long)]
    dir: PathBuf,
    #[arg(long)]
    estimator: PathBuf,
    /// Pool threshold in dB: estimate > beta is clean, < -beta is noise.
    #[arg(long, default_value_t = 17.5, env = "VIBOMNI_BETA")]
    beta: f64,
    /// Teacher checkpoint for pseudo-labels in remix rounds.
    #[arg(long)]
    teacher: Option<PathBuf>,
    /// Clips per pool before a remix round fires.
    #[arg(long, default_value_t = vibomni::adapt::POOL_TRIGGER)]
    pool_trigger: usize,
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory of clips: {id}/enhanced.wav scored against
    /// {id}/clean.wav.
    #[arg(long)]
    dir: PathBuf,
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    /// Model checkpoint; a fresh desk-scale init when absent.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    iters: usize,
    /// Clip length in seconds.
    #[arg(long, default_value_t = 5.0)]
    secs: f64,
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Serialize)]
struct RunConfig<'a> {
    tool: &'a str,
    version: &'a str,
    subcommand: &'a str,
    seed: u64,
    window_audio: usize,
    window_vib: usize,
    args: serde_json::Value,
}

fn write_run_config(
    out_dir: &Path,
    cli: &Cli,
    subcommand: &str,
    args: serde_json::Value,
) -> vibomni::Result<()> {
    std::fs::create_dir_all(out_dir)?;
    let cfg = RunConfig {
        tool: "vibomni",
        version: env!("CARGO_PKG_VERSION"),
        subcommand,
        seed: cli.seed,
        window_audio: cli.window_audio,
        window_vib: cli.window_vib,
        args,
    };
    std::fs::write(
        out_dir.join("run_config.json"),
        serde_json::to_string_pretty(&cfg)?,
    )?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help/version requests are successes, everything else is a
            // validation failure
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

fn exit_code_for(e: &vibomni::Error) -> u8 {
    use vibomni::Error::*;
    match e {
        InvalidInput(_) | Shape(_) => 1,
        Io(err) if err.kind() == std::io::ErrorKind::NotFound => 1,
        Wav(_) | Serde(_) => 1,
        _ => 2,
    }
}

fn run(cli: &Cli) -> vibomni::Result<()> {
    match &cli.command {
        Command::FitBcf(a) => cmd_fit_bcf(cli, a),
        Command::Augment(a) => cmd_augment(cli, a),
        Command::Mix(a) => cmd_mix(cli, a),
        Command::Train(a) => cmd_train(cli, a),
        Command::TrainEstimator(a) => cmd_train_estimator(cli, a),
        Command::Enhance(a) => cmd_enhance(cli, a),
        Command::EstimateSnr(a) => cmd_estimate_snr(cli, a),
        Command::Curate(a) => cmd_curate(cli, a),
        Command::Eval(a) => cmd_eval(cli, a),
        Command::Bench(a) => cmd_bench(cli, a),
    }
}

/// Reads a vibration WAV, collapsing 3-axis recordings to intensity.
fn read_vib(path: &Path) -> vibomni::Result<Waveform> {
    let w = read_wav(path)?;
    if w.num_channels() == 3 {
        vib_intensity(&w)
    } else {
        Ok(w)
    }
}

fn cmd_fit_bcf(cli: &Cli, a: &FitBcfArgs) -> vibomni::Result<()> {
    if a.audio.len() != a.vib.len() {
        return Err(vibomni::Error::InvalidInput(format!(
            "{} --audio but {} --vib arguments",
            a.audio.len(),
            a.vib.len()
        )));
    }
    write_run_config(
        &a.out,
        cli,
        "fit-bcf",
        serde_json::json!({
            "audio": a.audio, "vib": a.vib, "window_secs": a.window_secs
        }),
    )?;
    let mut pool = Vec::new();
    for (ap, vp) in a.audio.iter().zip(&a.vib) {
        let audio = read_wav(ap)?;
        let vib = read_vib(vp)?;
        let responses = estimate_responses_windowed(&audio, &vib, a.window_secs)?;
        let model = fit_bcf(&responses)?;
        println!(
            "{}: {} windows, {} bins",
            ap.display(),
            model.n_windows,
            model.bins()
        );
        pool.push(model);
    }
    save_pool(&a.out.join("bcf_pool.json"), &pool)?;
    println!("wrote {}", a.out.join("bcf_pool.json").display());
    Ok(())
}

fn cmd_augment(cli: &Cli, a: &AugmentArgs) -> vibomni::Result<()> {
    write_run_config(
        &a.out,
        cli,
        "augment",
        serde_json::json!({"clean_dir": a.clean_dir, "pool": a.pool}),
    )?;
    let pool = load_pool(&a.pool)?;
    if pool.is_empty() {
        return Err(vibomni::Error::InvalidInput("empty BCF pool".into()));
    }
    let mut entries: Vec<PathBuf> = std::fs::read_dir(&a.clean_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "wav"))
        .collect();
    entries.sort();
    if entries.is_empty() {
        return Err(vibomni::Error::InvalidInput(format!(
            "no .wav files in {}",
            a.clean_dir.display()
        )));
    }
    use rand::prelude::*;
    for (idx, path) in entries.iter().enumerate() {
        let clean = read_wav(path)?;
        let pick_seed = vibomni::synth::derive_seed(cli.seed, idx as u64, 1);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(pick_seed);
        let pick = rng.random_range(0..pool.len());
        let fr = sample_response(
            &pool[pick],
            vibomni::synth::derive_seed(cli.seed, idx as u64, 2),
        );
        let vib = vibomni::bcf::synthesize_vibration(&clean, &fr)?;
        let stem = path.file_stem().unwrap().to_string_lossy().to_string();
        let dir = a.out.join(&stem);
        std::fs::create_dir_all(&dir)?;
        write_wav(&dir.join("clean.wav"), &clean)?;
        write_wav(&dir.join("vib.wav"), &vib)?;
        std::fs::write(
            dir.join("meta.json"),
            serde_json::to_string_pretty(&serde_json::json!({
                "pool_index": pick, "seed": pick_seed
            }))?,
        )?;
    }
    println!("augmented {} clips into {}", entries.len(), a.out.display());
    Ok(())
}

fn cmd_mix(cli: &Cli, a: &MixArgs) -> vibomni::Result<()> {
    write_run_config(
        &a.out,
        cli,
        "mix",
        serde_json::json!({"manifest": a.manifest, "pool": a.pool}),
    )?;
    let manifest = DatasetManifest::load(&a.manifest)?;
    let pool = match &a.pool {
        Some(p) => load_pool(p)?,
        None => Vec::new(),
    };
    let triples = build_training_set(&manifest, &pool, cli.seed)?;
    write_training_set(&a.out, &triples)?;
    println!("wrote {} triples to {}", triples.len(), a.out.display());
    Ok(())
}

/// Loads a triple directory produced by `mix` into training items.
fn load_triples(dir: &Path) -> vibomni::Result<Vec<(TrainItem, f64)>> {
    let mut subdirs: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && p.join("noisy.wav").exists())
        .collect();
    subdirs.sort();
    if subdirs.is_empty() {
        return Err(vibomni::Error::InvalidInput(format!(
            "no triple directories under {}",
            dir.display()
        )));
    }
    let mut out = Vec::new();
    for d in subdirs {
        let id = d.file_name().unwrap().to_string_lossy().to_string();
        let noisy = read_wav(&d.join("noisy.wav"))?;
        let vib = read_vib(&d.join("vib.wav"))?;
        let clean = read_wav(&d.join("clean.wav"))?;
        let snr_db: f64 = match std::fs::read_to_string(d.join("meta.json")) {
            Ok(text) => serde_json::from_str::<serde_json::Value>(&text)?
                .get("snr_db")
                .and_then(|v| v.as_f64())
                .unwrap_or(0.0),
            Err(_) => 0.0,
        };
        let triple = vibomni::mixer::TrainingTriple {
            id,
            noisy,
            vibration: vib,
            clean,
            meta: vibomni::mixer::TripleMeta {
                snr_db,
                noise_kind: vibomni::mixer::NoiseKind::Environmental,
                pool_index: None,
                seed: 0,
                rt60_s: None,
            },
        };
        out.push((prepare_item(&triple)?, snr_db));
    }
    Ok(out)
}

fn cmd_train(cli: &Cli, a: &TrainArgs) -> vibomni::Result<()> {
    write_run_config(
        &a.out,
        cli,
        "train",
        serde_json::json!({
            "data": a.data, "init": a.init, "steps": a.steps, "lr": a.lr, "batch": a.batch
        }),
    )?;
    let items: Vec<TrainItem> = load_triples(&a.data)?.into_iter().map(|(i, _)| i).collect();
    let p = match &a.init {
        Some(path) => ModelParameters::load(path)?,
        None => init_params(&ModelConfig::default(), cli.seed)?,
    };
    let opts = TrainOpts {
        lr: a.lr,
        steps: a.steps,
        seed: cli.seed,
        batch_size: a.batch,
    };
    let (trained, log) = train(&p, &items, &LossConfig::default(), &opts)?;
    trained.save(&a.out.join("model.bin"))?;
    write_loss_log(&a.out.join("loss_log.csv"), &log)?;
    let final_loss = log.last().map(|r| r.loss).unwrap_or(f64::NAN);
    println!(
        "trained {} steps on {} clips; final loss {final_loss:.3}; wrote {}",
        a.steps,
        items.len(),
        a.out.join("model.bin").display()
    );
    Ok(())
}

fn cmd_train_estimator(cli: &Cli, a: &TrainEstimatorArgs) -> vibomni::Result<()> {
    write_run_config(
        &a.out,
        cli,
        "train-estimator",
        serde_json::json!({"data": a.data, "steps": a.steps, "lr": a.lr, "batch": a.batch}),
    )?;
    let samples: Vec<EstimatorSample> = load_triples(&a.data)?
        .into_iter()
        .map(|(item, snr)| EstimatorSample {
            audio_mag: item.audio_mag,
            vib_mag: item.vib_mag,
            true_snr_db: snr,
        })
        .collect();
    let init = init_estimator(&EstimatorConfig::default(), cli.seed);
    let opts = EstimatorTrainOpts {
        lr: a.lr,
        steps: a.steps,
        seed: cli.seed,
        batch_size: a.batch,
    };
    let trained = train_estimator(&init, &samples, &opts)?;
    trained.save(&a.out.join("estimator.bin"))?;
    println!(
        "trained estimator on {} clips; wrote {}",
        samples.len(),
        a.out.join("estimator.bin").display()
    );
    Ok(())
}

#[derive(Serialize)]
struct EnhanceReport {
    mode: String,
    blocks_used: usize,
    frames: usize,
    vad_active_frames: Option<usize>,
}

fn cmd_enhance(cli: &Cli, a: &EnhanceArgs) -> vibomni::Result<()> {
    write_run_config(
        &a.out,
        cli,
        "enhance",
        serde_json::json!({
            "noisy": a.noisy, "vib": a.vib, "model": a.model,
            "stream": a.stream, "adaptive": a.adaptive,
            "threshold": a.threshold, "blocks": a.blocks,
            "vad_threshold": a.vad_threshold
        }),
    )?;
    let model = ModelParameters::load(&a.model)?;
    let noisy = read_wav(&a.noisy)?;
    let vib = read_vib(&a.vib)?;
    let spec_noisy = stft(&noisy, cli.window_audio, cli.window_audio / 2)?;
    let spec_vib = stft(&vib, cli.window_vib, cli.window_vib / 2)?;
    let audio_mag = spec_noisy.magnitude();
    let vib_mag = spec_vib.magnitude();
    let frames = spec_noisy.num_frames();

    // vibration-energy gate: frames below the threshold bypass the model
    let vad_active = match a.vad_threshold {
        Some(th) => Some(vibomni::adapt::vad(
            &vib,
            vibomni::adapt::VAD_FRAME_SECS,
            th,
            vibomni::adapt::VAD_HANGOVER,
        )?),
        None => None,
    };

    let (enhanced, blocks_used, mode) = if a.adaptive {
        let est_path = a.estimator.as_ref().ok_or_else(|| {
            vibomni::Error::InvalidInput("--adaptive requires --estimator".into())
        })?;
        let estimator = SnrEstimatorParams::load(est_path)?;
        let (wave, k) = adaptive_enhance(&model, &estimator, &spec_noisy, &spec_vib, a.threshold)?;
        (wave, k, "adaptive".to_string())
    } else if a.stream {
        let mut state = StreamState::reset(&model.config);
        let mut mask = ndarray::Array2::zeros((frames, model.config.audio_bins));
        for t in 0..frames {
            let active = vad_active
                .as_ref()
                .map(|v| v.get(t).copied().unwrap_or(false))
                .unwrap_or(true);
            if active {
                let af: Vec<f64> = audio_mag.row(t).iter().cloned().collect();
                let vf: Vec<f64> = vib_mag.row(t).iter().cloned().collect();
                let (m, _low) = forward_streaming_step(&model, &mut state, &af, &vf)?;
                for k in 0..model.config.audio_bins {
                    mask[(t, k)] = m[k];
                }
            } else {
                for k in 0..model.config.audio_bins {
                    mask[(t, k)] = 1.0;
                }
            }
        }
        (
            apply_mask_and_reconstruct(&mask, &spec_noisy)?,
            model.config.n_blocks,
            "stream".to_string(),
        )
    } else {
        let k = a.blocks.unwrap_or(model.config.n_blocks);
        if k == 0 || k > model.config.n_blocks {
            return Err(vibomni::Error::InvalidInput(format!(
                "--blocks must be in 1..={}",
                model.config.n_blocks
            )));
        }
        let out = forward_up_to(&model, &audio_mag, &vib_mag, k)?;
        let mut mask = out.masks.last().expect("depth k mask").clone();
        if let Some(v) = &vad_active {
            for t in 0..frames {
                if !v.get(t).copied().unwrap_or(false) {
                    for kk in 0..model.config.audio_bins {
                        mask[(t, kk)] = 1.0;
                    }
                }
            }
        }
        (apply_mask_and_reconstruct(&mask, &spec_noisy)?, k, "offline".to_string())
    };

    write_wav(&a.out.join("enhanced.wav"), &enhanced)?;
    let report = EnhanceReport {
        mode,
        blocks_used,
        frames,
        vad_active_frames: vad_active.map(|v| v.iter().filter(|&&x| x).count()),
    };
    std::fs::write(
        a.out.join("report.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    println!(
        "enhanced {} frames with {} blocks -> {}",
        frames,
        blocks_used,
        a.out.join("enhanced.wav").display()
    );
    Ok(())
}

fn cmd_estimate_snr(cli: &Cli, a: &EstimateSnrArgs) -> vibomni::Result<()> {
    write_run_config(
        &a.out,
        cli,
        "estimate-snr",
        serde_json::json!({"audio": a.audio, "vib": a.vib, "estimator": a.estimator}),
    )?;
    let estimator = SnrEstimatorParams::load(&a.estimator)?;
    let audio = read_wav(&a.audio)?;
    let vib = read_vib(&a.vib)?;
    let est = estimate_snr_waves(&estimator, &audio, &vib)?;
    std::fs::write(
        a.out.join("estimate.json"),
        serde_json::to_string_pretty(&est)?,
    )?;
    println!("estimated SNR: {:.2} dB", est.value_db);
    Ok(())
}

fn cmd_curate(cli: &Cli, a: &CurateArgs) -> vibomni::Result<()> {
    write_run_config(
        &a.out,
        cli,
        "curate",
        serde_json::json!({
            "dir": a.dir, "estimator": a.estimator, "beta": a.beta,
            "teacher": a.teacher, "pool_trigger": a.pool_trigger
        }),
    )?;
    let estimator = SnrEstimatorParams::load(&a.estimator)?;
    let teacher = match &a.teacher {
        Some(p) => Some(ModelParameters::load(p)?),
        None => None,
    };
    let mut ids: Vec<String> = std::fs::read_dir(&a.dir)?
        .filter_map(|e| e.ok().map(|e| e.file_name().to_string_lossy().to_string()))
        .filter_map(|n| n.strip_suffix(".audio.wav").map(|s| s.to_string()))
        .collect();
    ids.sort();
    if ids.is_empty() {
        return Err(vibomni::Error::InvalidInput(format!(
            "no *.audio.wav clips in {}",
            a.dir.display()
        )));
    }
    let mut clips = Vec::new();
    for id in &ids {
        let audio = read_wav(&a.dir.join(format!("{id}.audio.wav")))?;
        let vib = read_vib(&a.dir.join(format!("{id}.vib.wav")))?;
        clips.push((id.clone(), audio, vib));
    }
    let remix_cfg = RemixConfig {
        teacher: teacher.as_ref(),
        snr_range_db: (0.0, 10.0),
        seed: cli.seed,
        pool_trigger: a.pool_trigger,
    };
    let pools = curate(&clips, &SnrSource::Estimator(&estimator), a.beta, &remix_cfg)?;
    std::fs::write(
        a.out.join("curation_report.json"),
        serde_json::to_string_pretty(&pools.report())?,
    )?;
    let remix_dir = a.out.join("remixed");
    for t in &pools.remixed {
        let dir = remix_dir.join(&t.id);
        std::fs::create_dir_all(&dir)?;
        write_wav(&dir.join("noisy.wav"), &t.mixture)?;
        write_wav(&dir.join("vib.wav"), &t.vib)?;
        write_wav(&dir.join("clean.wav"), &t.pseudo_clean)?;
        std::fs::write(
            dir.join("meta.json"),
            serde_json::to_string_pretty(&serde_json::json!({"snr_db": t.snr_db}))?,
        )?;
    }
    println!(
        "curated {} clips: {} clean, {} noise, {} discarded, {} remixed",
        clips.len(),
        pools.clean.len(),
        pools.noise.len(),
        pools.discarded,
        pools.remixed.len()
    );
    Ok(())
}

fn cmd_eval(cli: &Cli, a: &EvalArgs) -> vibomni::Result<()> {
    write_run_config(&a.out, cli, "eval", serde_json::json!({"dir": a.dir}))?;
    let mut subdirs: Vec<PathBuf> = std::fs::read_dir(&a.dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && p.join("enhanced.wav").exists() && p.join("clean.wav").exists())
        .collect();
    subdirs.sort();
    if subdirs.is_empty() {
        return Err(vibomni::Error::InvalidInput(format!(
            "no {{id}}/enhanced.wav + clean.wav pairs under {}",
            a.dir.display()
        )));
    }
    let mut pairs = Vec::new();
    for d in subdirs {
        let id = d.file_name().unwrap().to_string_lossy().to_string();
        let enhanced = read_wav(&d.join("enhanced.wav"))?;
        let clean = read_wav(&d.join("clean.wav"))?;
        pairs.push((id, enhanced, clean));
    }
    let report = EvalReport::from_pairs(&pairs, cli.window_audio, cli.window_audio / 2)?;
    report.write_json(&a.out.join("eval.json"))?;
    report.write_csv(&a.out.join("eval.csv"))?;
    println!(
        "evaluated {} clips: mean SI-SNR {:.2} dB, mean LSD {:.3}",
        report.clips.len(),
        report.mean_si_snr_db,
        report.mean_lsd
    );
    Ok(())
}

#[derive(Serialize)]
struct BenchReport {
    iters: usize,
    clip_secs: f64,
    frames: usize,
    mean_latency_s: f64,
    min_latency_s: f64,
    real_time_factor: f64,
}

fn cmd_bench(cli: &Cli, a: &BenchArgs) -> vibomni::Result<()> {
    write_run_config(
        &a.out,
        cli,
        "bench",
        serde_json::json!({"model": a.model, "iters": a.iters, "secs": a.secs}),
    )?;
    let model = match &a.model {
        Some(p) => ModelParameters::load(p)?,
        None => init_params(&ModelConfig::default(), cli.seed)?,
    };
    // synthetic clip pair at the configured length
    let clean = vibomni::synth::speech_like(a.secs, 16_000, cli.seed);
    let noise = vibomni::synth::white_noise(a.secs, 16_000, cli.seed + 1, 0.3);
    let noisy = vibomni::mixer::mix_at_snr(&clean, &noise, 5.0)?;
    let fr = vibomni::bcf::FrequencyResponse::identity(33, 25.0);
    let vib = vibomni::bcf::synthesize_vibration(&clean, &fr)?;
    let sa = stft(&noisy, AUDIO_WINDOW, AUDIO_HOP)?;
    let sv = stft(&vib, VIB_WINDOW, VIB_HOP)?;
    let audio_mag = sa.magnitude();
    let vib_mag = sv.magnitude();
    let frames = sa.num_frames();

    let mut times = Vec::with_capacity(a.iters);
    for _ in 0..a.iters {
        let mut state = StreamState::reset(&model.config);
        let t0 = Instant::now();
        for t in 0..frames {
            let af: Vec<f64> = audio_mag.row(t).iter().cloned().collect();
            let vf: Vec<f64> = vib_mag.row(t).iter().cloned().collect();
            let _ = forward_streaming_step(&model, &mut state, &af, &vf)?;
        }
        times.push(t0.elapsed().as_secs_f64());
    }
    let mean = times.iter().sum::<f64>() / times.len() as f64;
    let min = times.iter().cloned().fold(f64::INFINITY, f64::min);
    let report = BenchReport {
        iters: a.iters,
        clip_secs: a.secs,
        frames,
        mean_latency_s: mean,
        min_latency_s: min,
        real_time_factor: mean / a.secs,
    };
    std::fs::write(
        a.out.join("bench.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    println!(
        "{} iters of a {:.1}s clip: mean latency {:.3}s, RTF {:.3}",
        a.iters, a.secs, mean, report.real_time_factor
    );
    Ok(())
}

