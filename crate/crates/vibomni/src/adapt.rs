//! Noise-aware adaptation: multi-modal SNR estimation, continual-learning
//! curation with teacher remixing, adaptive-depth inference, and
//! vibration-energy voice activity detection.
//!
//! The SNR estimator concatenates the audio magnitude spectrogram with the
//! zero-padded vibration spectrogram along the feature axis, runs five
//! causal temporal convolutions, pools mean and standard deviation over
//! time, and maps two fully connected layers through a sigmoid onto
//! [-20, 20] dB. Curation sorts in-the-wild clips into clean/noise pools
//! by thresholded estimate and remixes them into pseudo-labeled training
//! triples, with the teacher model refreshed from the student each epoch.

use std::path::Path;

use ndarray::Array2;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ad::{Graph, Tensor, Var};
use crate::mixer::mix_at_snr;
use crate::model::{apply_mask_and_reconstruct, forward_up_to, ModelParameters};
use crate::params::ParamSet;
use crate::signal::{stft, Spectrogram, Waveform, AUDIO_HOP, AUDIO_WINDOW, VIB_HOP, VIB_WINDOW};
use crate::training::TrainItem;
use crate::{Error, Result};

/// Estimates are sigmoid-bounded to this range in dB.
pub const SNR_RANGE_DB: (f64, f64) = (-20.0, 20.0);
/// Default adaptive-inference stopping threshold in dB.
pub const ADAPTIVE_THRESHOLD_DB: f64 = 15.0;
/// Default clip count per pool before a remix round triggers.
pub const POOL_TRIGGER: usize = 32;

/// Fixed estimator architecture.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EstimatorConfig {
    pub audio_bins: usize,
    pub vib_bins: usize,
    pub conv_layers: usize,
    pub conv_channels: usize,
    pub conv_kernel: usize,
    pub fc_units: usize,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            audio_bins: 321,
            vib_bins: 33,
            conv_layers: 5,
            conv_channels: 128,
            conv_kernel: 4,
            fc_units: 256,
        }
    }
}

impl EstimatorConfig {
    /// Feature width after zero-padding the vibration spectrogram to the
    /// audio bin count and concatenating.
    pub fn input_features(&self) -> usize {
        2 * self.audio_bins
    }
}

/// Estimator weights in the shared flat container.
#[derive(Debug, Clone)]
pub struct SnrEstimatorParams {
    pub config: EstimatorConfig,
    pub params: ParamSet,
}

/// A bounded SNR estimate.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SnrEstimate {
    pub value_db: f64,
}

fn estimator_specs(cfg: &EstimatorConfig) -> Vec<(String, Vec<usize>)> {
    let mut specs = Vec::new();
    let mut d_in = cfg.input_features();
    for i in 0..cfg.conv_layers {
        specs.push((
            format!("conv{i}.w"),
            vec![cfg.conv_channels, d_in, cfg.conv_kernel],
        ));
        specs.push((format!("conv{i}.b"), vec![cfg.conv_channels]));
        d_in = cfg.conv_channels;
    }
    // statistical pooling doubles the feature size (mean ++ std)
    let mut fc_in = 2 * cfg.conv_channels;
    for i in 0..2 {
        specs.push((format!("fc{i}.w"), vec![fc_in, cfg.fc_units]));
        specs.push((format!("fc{i}.b"), vec![cfg.fc_units]));
        fc_in = cfg.fc_units;
    }
    specs.push(("head.w".into(), vec![fc_in, 1]));
    specs.push(("head.b".into(), vec![1]));
    specs
}

/// Seeded estimator initialization (fan-in uniform, zero biases).
pub fn init_estimator(config: &EstimatorConfig, seed: u64) -> SnrEstimatorParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    for (name, shape) in estimator_specs(config) {
        let n: usize = shape.iter().product();
        let values = if name.ends_with(".b") {
            vec![0.0; n]
        } else {
            // conv weights are [out, in, k] so fan-in is in*k; fc weights
            // are [in, out] so fan-in is the first dim
            let fan_in = if shape.len() == 3 {
                shape[1] * shape[2]
            } else {
                shape[0]
            };
            let bound = 1.0 / (fan_in as f64).sqrt();
            (0..n).map(|_| rng.random_range(-bound..bound)).collect()
        };
        params.push(&name, &shape, values);
    }
    SnrEstimatorParams {
        config: config.clone(),
        params,
    }
}

impl SnrEstimatorParams {
    pub fn save(&self, path: &Path) -> Result<()> {
        self.params.save(path, "estimator", &self.config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (params, config) = ParamSet::load::<EstimatorConfig>(path, "estimator")?;
        Ok(Self { config, params })
    }
}

/// Builds the estimator on a graph; returns the sigmoid output (0..1).
fn estimator_graph(
    g: &Graph,
    pv: &[Var],
    cfg: &EstimatorConfig,
    audio_mag: &Array2<f64>,
    vib_mag: &Array2<f64>,
) -> Result<Var> {
    let t = audio_mag.nrows();
    if vib_mag.nrows() != t {
        return Err(Error::Shape(format!(
            "time dimensions differ: audio {} vs vibration {}",
            t,
            vib_mag.nrows()
        )));
    }
    if audio_mag.ncols() != cfg.audio_bins || vib_mag.ncols() != cfg.vib_bins {
        return Err(Error::Shape(format!(
            "bins {}/{} vs configured {}/{}",
            audio_mag.ncols(),
            vib_mag.ncols(),
            cfg.audio_bins,
            cfg.vib_bins
        )));
    }
    // zero-pad vibration bins to the audio width, concatenate features
    let feat_width = cfg.input_features();
    let mut feat = vec![0.0; t * feat_width];
    for tt in 0..t {
        for k in 0..cfg.audio_bins {
            feat[tt * feat_width + k] = audio_mag[(tt, k)];
        }
        for k in 0..cfg.vib_bins {
            feat[tt * feat_width + cfg.audio_bins + k] = vib_mag[(tt, k)];
        }
    }
    let mut x = g.leaf(Tensor::new(vec![t, feat_width], feat));
    let mut i = 0usize;
    let next = |i: &mut usize| {
        let v = pv[*i];
        *i += 1;
        v
    };
    for _ in 0..cfg.conv_layers {
        let w = next(&mut i);
        let b = next(&mut i);
        x = g.relu(g.conv1d_time(x, w, b));
    }
    let mean = g.mean_rows(x); // [C]
    // std over time with a small floor for differentiability
    let mean_mat = g.reshape(mean, vec![1, cfg.conv_channels]);
    let t_ones = g.leaf(Tensor::new(vec![t, 1], vec![1.0; t]));
    let mean_bcast = g.matmul(t_ones, mean_mat);
    let centered = g.sub(x, mean_bcast);
    let var = g.mean_rows(g.mul(centered, centered));
    let std = g.sqrt(g.add_const(var, 1e-8));
    let pooled = g.concat_cols(
        g.reshape(mean, vec![1, cfg.conv_channels]),
        g.reshape(std, vec![1, cfg.conv_channels]),
    );
    let mut h = pooled;
    for _ in 0..2 {
        let w = next(&mut i);
        let b = next(&mut i);
        h = g.relu(g.add_bias_rows(g.matmul(h, w), b));
    }
    let w = next(&mut i);
    let b = next(&mut i);
    let logit = g.add_bias_rows(g.matmul(h, w), b);
    Ok(g.sigmoid(g.reshape(logit, vec![1])))
}

fn sigmoid_to_db(s: f64) -> f64 {
    SNR_RANGE_DB.0 + (SNR_RANGE_DB.1 - SNR_RANGE_DB.0) * s
}

fn db_to_unit(db: f64) -> f64 {
    ((db - SNR_RANGE_DB.0) / (SNR_RANGE_DB.1 - SNR_RANGE_DB.0)).clamp(0.0, 1.0)
}

/// Runs the estimator on magnitude spectrograms.
pub fn estimate_snr(
    p: &SnrEstimatorParams,
    audio_mag: &Array2<f64>,
    vib_mag: &Array2<f64>,
) -> Result<SnrEstimate> {
    let g = Graph::new();
    let pv = crate::model::register_params(&g, &p.params);
    let out = estimator_graph(&g, &pv, &p.config, audio_mag, vib_mag)?;
    Ok(SnrEstimate {
        value_db: sigmoid_to_db(g.item(out)),
    })
}

/// Runs the estimator on waveforms (STFT magnitudes computed here).
pub fn estimate_snr_waves(
    p: &SnrEstimatorParams,
    audio: &Waveform,
    vib: &Waveform,
) -> Result<SnrEstimate> {
    let sa = stft(audio, AUDIO_WINDOW, AUDIO_HOP)?;
    let sv = stft(vib, VIB_WINDOW, VIB_HOP)?;
    estimate_snr(p, &sa.magnitude(), &sv.magnitude())
}

/// One labeled example for estimator training.
#[derive(Debug, Clone)]
pub struct EstimatorSample {
    pub audio_mag: Array2<f64>,
    pub vib_mag: Array2<f64>,
    pub true_snr_db: f64,
}

impl EstimatorSample {
    pub fn from_waves(audio: &Waveform, vib: &Waveform, true_snr_db: f64) -> Result<Self> {
        let sa = stft(audio, AUDIO_WINDOW, AUDIO_HOP)?;
        let sv = stft(vib, VIB_WINDOW, VIB_HOP)?;
        Ok(Self {
            audio_mag: sa.magnitude(),
            vib_mag: sv.magnitude(),
            true_snr_db,
        })
    }

    /// Audio-only ablation: the vibration features zeroed out.
    pub fn zero_vibration(&self) -> Self {
        Self {
            audio_mag: self.audio_mag.clone(),
            vib_mag: Array2::zeros(self.vib_mag.dim()),
            true_snr_db: self.true_snr_db,
        }
    }
}

/// Estimator training settings.
#[derive(Debug, Clone)]
pub struct EstimatorTrainOpts {
    pub lr: f64,
    pub steps: usize,
    pub seed: u64,
    pub batch_size: usize,
}

impl Default for EstimatorTrainOpts {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            steps: 400,
            seed: 0,
            batch_size: 8,
        }
    }
}

fn estimator_clip_loss(
    p: &SnrEstimatorParams,
    sample: &EstimatorSample,
    with_grad: bool,
) -> Result<(f64, Option<Vec<f64>>)> {
    let g = Graph::new();
    let pv = crate::model::register_params(&g, &p.params);
    let out = estimator_graph(&g, &pv, &p.config, &sample.audio_mag, &sample.vib_mag)?;
    // squared error on the normalized (0..1) target
    let target = db_to_unit(sample.true_snr_db);
    let diff = g.add_const(out, -target);
    let loss = g.mul(diff, diff);
    let value = g.item(loss);
    if !with_grad {
        return Ok((value, None));
    }
    let grads = g.backward(loss);
    let mut flat = Vec::with_capacity(p.params.len());
    for &v in &pv {
        flat.extend_from_slice(grads.get(v));
    }
    Ok((value, Some(flat)))
}

fn estimator_batch(
    p: &SnrEstimatorParams,
    batch: &[&EstimatorSample],
    with_grad: bool,
) -> Result<(f64, Option<Vec<f64>>)> {
    let results: Vec<Result<(f64, Option<Vec<f64>>)>> = batch
        .par_iter()
        .map(|s| estimator_clip_loss(p, s, with_grad))
        .collect();
    let mut loss = 0.0;
    let mut grad = if with_grad {
        Some(vec![0.0; p.params.len()])
    } else {
        None
    };
    let n = batch.len() as f64;
    for r in results {
        let (l, gr) = r?;
        loss += l / n;
        if let (Some(acc), Some(gr)) = (grad.as_mut(), gr) {
            for (a, b) in acc.iter_mut().zip(&gr) {
                *a += b / n;
            }
        }
    }
    Ok((loss, grad))
}

/// Seeded squared-error regression on the normalized SNR target.
pub fn train_estimator(
    init: &SnrEstimatorParams,
    dataset: &[EstimatorSample],
    opts: &EstimatorTrainOpts,
) -> Result<SnrEstimatorParams> {
    if dataset.is_empty() {
        return Err(Error::InvalidInput("empty estimator dataset".into()));
    }
    let mut model = init.clone();
    let n = model.params.len();
    let mut m = vec![0.0f64; n];
    let mut v = vec![0.0f64; n];
    let (beta1, beta2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    for step in 0..opts.steps {
        let batch: Vec<&EstimatorSample> = (0..opts.batch_size.min(dataset.len()))
            .map(|_| &dataset[rng.random_range(0..dataset.len())])
            .collect();
        let (loss, grad) = estimator_batch(&model, &batch, true)?;
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        let grad = grad.expect("grad requested");
        let bc1 = 1.0 - beta1.powi(step as i32 + 1);
        let bc2 = 1.0 - beta2.powi(step as i32 + 1);
        let values = model.params.values_mut();
        for i in 0..n {
            m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i];
            values[i] -= opts.lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + eps);
        }
    }
    Ok(model)
}

/// Verifies estimator gradients against central finite differences.
pub fn estimator_grad_check(
    p: &SnrEstimatorParams,
    sample: &EstimatorSample,
    n_probes: usize,
    seed: u64,
) -> Result<f64> {
    let (loss0, grad) = estimator_clip_loss(p, sample, true)?;
    let grad = grad.expect("grad requested");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 1e-4;
    let mut max_rel: f64 = 0.0;
    let mut probed = 0usize;
    let mut attempts = 0usize;
    while probed < n_probes && attempts < 60 * n_probes {
        attempts += 1;
        let idx = rng.random_range(0..p.params.len());
        let mut plus = p.clone();
        plus.params.values_mut()[idx] += h;
        let mut minus = p.clone();
        minus.params.values_mut()[idx] -= h;
        let (lp, _) = estimator_clip_loss(&plus, sample, false)?;
        let (lm, _) = estimator_clip_loss(&minus, sample, false)?;
        let slope_p = (lp - loss0) / h;
        let slope_m = (loss0 - lm) / h;
        if (slope_p - slope_m).abs() > 2e-4 * slope_p.abs().max(slope_m.abs()) + 1e-9 {
            continue;
        }
        let fd = (lp - lm) / (2.0 * h);
        let an = grad[idx];
        let rel = (an - fd).abs() / (an.abs() + fd.abs()).max(1e-5);
        max_rel = max_rel.max(rel);
        probed += 1;
    }
    Ok(max_rel)
}

/// Which pool a curated clip landed in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pool {
    Clean,
    Noise,
    Discarded,
}

/// One clip scored during curation.
#[derive(Debug, Clone)]
pub struct CuratedClip {
    pub id: String,
    pub audio: Waveform,
    pub vib: Waveform,
    pub estimate_db: f64,
    pub pool: Pool,
}

/// Disjoint curation pools plus the remixed pseudo-labeled triples.
#[derive(Debug, Clone, Default)]
pub struct CurationPools {
    pub clean: Vec<CuratedClip>,
    pub noise: Vec<CuratedClip>,
    pub discarded: usize,
    /// (mixture, vibration, pseudo-clean) triples produced by remix
    /// rounds triggered while the stream was consumed.
    pub remixed: Vec<RemixTriple>,
}

/// JSON row of the curation report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CurationReportRow {
    pub clip_id: String,
    pub estimate_db: f64,
    pub pool: Pool,
}

impl CurationPools {
    pub fn report(&self) -> Vec<CurationReportRow> {
        let mut rows: Vec<CurationReportRow> = self
            .clean
            .iter()
            .map(|c| (c, Pool::Clean))
            .chain(self.noise.iter().map(|c| (c, Pool::Noise)))
            .map(|(c, p)| CurationReportRow {
                clip_id: c.id.clone(),
                estimate_db: c.estimate_db,
                pool: p,
            })
            .collect();
        rows.sort_by(|a, b| a.clip_id.cmp(&b.clip_id));
        rows
    }
}

/// Where the SNR score for curation comes from: the trained estimator, or
/// an oracle (ground-truth labels) for controlled evaluation.
pub enum SnrSource<'a> {
    Estimator(&'a SnrEstimatorParams),
    Oracle(&'a dyn Fn(&str) -> f64),
}

/// Settings for the remix rounds triggered during curation.
#[derive(Clone)]
pub struct RemixConfig<'a> {
    /// Pseudo-labels come from enhancing clean-pool clips with this
    /// teacher; `None` passes them through unenhanced.
    pub teacher: Option<&'a ModelParameters>,
    pub snr_range_db: (f64, f64),
    pub seed: u64,
    /// Clips per pool required before a remix round fires.
    pub pool_trigger: usize,
}

impl<'a> Default for RemixConfig<'a> {
    fn default() -> Self {
        Self {
            teacher: None,
            snr_range_db: (0.0, 10.0),
            seed: 0,
            pool_trigger: POOL_TRIGGER,
        }
    }
}

/// One remixed pseudo-labeled example.
#[derive(Debug, Clone)]
pub struct RemixTriple {
    pub id: String,
    pub mixture: Waveform,
    pub vib: Waveform,
    pub pseudo_clean: Waveform,
    pub snr_db: f64,
}

/// Sorts a stream of (audio, vibration) clips into pools: estimate above
/// `beta` goes to the clean pool, below `-beta` to the noise pool,
/// anything in between is discarded. When both pools reach the configured
/// size a remix round fires and the pools are drained into pseudo-labeled
/// triples.
pub fn curate(
    clips: &[(String, Waveform, Waveform)],
    source: &SnrSource,
    beta_db: f64,
    remix_cfg: &RemixConfig,
) -> Result<CurationPools> {
    if beta_db <= 0.0 {
        return Err(Error::InvalidInput("beta must be positive".into()));
    }
    let mut pools = CurationPools::default();
    let mut remix_round = 0u64;
    // clips waiting for the next remix round (suffix of each pool)
    let mut pending_clean = 0usize;
    let mut pending_noise = 0usize;
    for (id, audio, vib) in clips {
        let est = match source {
            SnrSource::Estimator(p) => estimate_snr_waves(p, audio, vib)?.value_db,
            SnrSource::Oracle(f) => f(id),
        };
        let clip = CuratedClip {
            id: id.clone(),
            audio: audio.clone(),
            vib: vib.clone(),
            estimate_db: est,
            pool: if est > beta_db {
                Pool::Clean
            } else if est < -beta_db {
                Pool::Noise
            } else {
                Pool::Discarded
            },
        };
        match clip.pool {
            Pool::Clean => {
                pools.clean.push(clip);
                pending_clean += 1;
            }
            Pool::Noise => {
                pools.noise.push(clip);
                pending_noise += 1;
            }
            Pool::Discarded => pools.discarded += 1,
        }
        if pending_clean >= remix_cfg.pool_trigger && pending_noise >= remix_cfg.pool_trigger {
            let clean = &pools.clean[pools.clean.len() - pending_clean..];
            let noise = &pools.noise[pools.noise.len() - pending_noise..];
            let mut triples = remix_dataset(
                clean,
                noise,
                remix_cfg.teacher,
                remix_cfg.snr_range_db,
                crate::synth::derive_seed(remix_cfg.seed, remix_round, 17),
            )?;
            pools.remixed.append(&mut triples);
            remix_round += 1;
            pending_clean = 0;
            pending_noise = 0;
        }
    }
    Ok(pools)
}

/// Enhances a clip with the teacher model (deepest tap) to produce its
/// pseudo-clean version.
fn teacher_enhance(teacher: &ModelParameters, audio: &Waveform, vib: &Waveform) -> Result<Waveform> {
    let sa = stft(audio, AUDIO_WINDOW, AUDIO_HOP)?;
    let sv = stft(vib, VIB_WINDOW, VIB_HOP)?;
    let out = forward_up_to(teacher, &sa.magnitude(), &sv.magnitude(), teacher.config.n_blocks)?;
    apply_mask_and_reconstruct(out.masks.last().expect("at least one tap"), &sa)
}

/// Mixes teacher-enhanced clean-pool clips with noise-pool clips at
/// seeded SNRs drawn from `snr_range_db`.
pub fn remix_dataset(
    d_clean: &[CuratedClip],
    d_noise: &[CuratedClip],
    teacher: Option<&ModelParameters>,
    snr_range_db: (f64, f64),
    seed: u64,
) -> Result<Vec<RemixTriple>> {
    if d_clean.is_empty() || d_noise.is_empty() {
        return Err(Error::InvalidInput(
            "remix needs non-empty clean and noise pools".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(d_clean.len());
    for clip in d_clean {
        let pseudo = match teacher {
            Some(t) => teacher_enhance(t, &clip.audio, &clip.vib)?,
            None => clip.audio.clone(),
        };
        let noise = &d_noise[rng.random_range(0..d_noise.len())];
        let snr = rng.random_range(snr_range_db.0..=snr_range_db.1);
        let mixture = mix_at_snr(&pseudo, &noise.audio, snr)?;
        out.push(RemixTriple {
            id: format!("remix-{}", clip.id),
            mixture,
            vib: clip.vib.clone(),
            pseudo_clean: pseudo,
            snr_db: snr,
        });
    }
    Ok(out)
}

/// Converts remix triples into model training items.
pub fn remix_to_train_items(triples: &[RemixTriple]) -> Result<Vec<TrainItem>> {
    triples
        .iter()
        .map(|r| {
            crate::training::prepare_item(&crate::mixer::TrainingTriple {
                id: r.id.clone(),
                noisy: r.mixture.clone(),
                vibration: r.vib.clone(),
                clean: r.pseudo_clean.clone(),
                meta: crate::mixer::TripleMeta {
                    snr_db: r.snr_db,
                    noise_kind: crate::mixer::NoiseKind::Environmental,
                    pool_index: None,
                    seed: 0,
                    rt60_s: None,
                },
            })
        })
        .collect()
}

/// Continual fine-tuning: each epoch the teacher becomes a copy of the
/// current student, the pools are remixed against it, and the student
/// trains on the fresh pseudo-labels.
pub fn continual_finetune(
    student: &ModelParameters,
    pools: &CurationPools,
    epochs: usize,
    steps_per_epoch: usize,
    lr: f64,
    seed: u64,
) -> Result<ModelParameters> {
    let mut student = student.clone();
    for epoch in 0..epochs {
        let teacher = student.clone();
        let triples = remix_dataset(
            &pools.clean,
            &pools.noise,
            Some(&teacher),
            (0.0, 10.0),
            crate::synth::derive_seed(seed, epoch as u64, 23),
        )?;
        let items = remix_to_train_items(&triples)?;
        let opts = crate::training::TrainOpts {
            lr,
            steps: steps_per_epoch,
            seed: crate::synth::derive_seed(seed, epoch as u64, 29),
            batch_size: 4,
        };
        let (next, _) = crate::training::train(&student, &items, &Default::default(), &opts)?;
        student = next;
    }
    Ok(student)
}

/// Adaptive-depth enhancement: runs separator blocks one at a time,
/// reconstructs from each tap, and stops as soon as the estimated output
/// SNR clears the threshold. Returns the reconstruction and the depth
/// used.
///
/// The controller estimates SNR over 1-second hops of the reconstruction
/// and averages, bounding its overhead on long clips.
pub fn adaptive_enhance(
    model: &ModelParameters,
    estimator: &SnrEstimatorParams,
    noisy: &Spectrogram,
    vib: &Spectrogram,
    threshold_db: f64,
) -> Result<(Waveform, usize)> {
    let audio_mag = noisy.magnitude();
    let vib_mag = vib.magnitude();
    let n = model.config.n_blocks;
    for k in 1..=n {
        let out = forward_up_to(model, &audio_mag, &vib_mag, k)?;
        let mask = out.masks.last().expect("depth k mask");
        let wave = apply_mask_and_reconstruct(mask, noisy)?;
        if k == n {
            return Ok((wave, n));
        }
        let est = controller_estimate(estimator, &wave, &vib_mag)?;
        if est >= threshold_db {
            return Ok((wave, k));
        }
    }
    unreachable!("loop returns at k == n")
}

/// Mean estimator output over 1-second hops of the reconstruction.
fn controller_estimate(
    estimator: &SnrEstimatorParams,
    wave: &Waveform,
    vib_mag: &Array2<f64>,
) -> Result<f64> {
    let spec = stft(wave, AUDIO_WINDOW, AUDIO_HOP)?;
    let mag = spec.magnitude();
    let frames = mag.nrows().min(vib_mag.nrows());
    let frames_per_sec = (wave.sample_rate() as usize).div_ceil(AUDIO_HOP);
    let mut acc = 0.0;
    let mut count = 0usize;
    let mut start = 0usize;
    while start < frames {
        let len = frames_per_sec.min(frames - start);
        if len < 2 {
            break;
        }
        let a = mag.slice(ndarray::s![start..start + len, ..]).to_owned();
        let v = vib_mag.slice(ndarray::s![start..start + len, ..]).to_owned();
        acc += estimate_snr(estimator, &a, &v)?.value_db;
        count += 1;
        start += frames_per_sec;
    }
    if count == 0 {
        let a = mag.slice(ndarray::s![..frames, ..]).to_owned();
        let v = vib_mag.slice(ndarray::s![..frames, ..]).to_owned();
        return Ok(estimate_snr(estimator, &a, &v)?.value_db);
    }
    Ok(acc / count as f64)
}

/// Vibration-energy voice activity detection: frame RMS against a
/// threshold with a fixed hangover so short dips inside speech stay
/// active.
pub fn vad(
    vib_intensity: &Waveform,
    frame_secs: f64,
    energy_threshold: f64,
    hangover_frames: usize,
) -> Result<Vec<bool>> {
    let samples = vib_intensity.samples()?;
    let frame = ((frame_secs * vib_intensity.sample_rate() as f64) as usize).max(1);
    let mut active = Vec::with_capacity(samples.len().div_ceil(frame));
    let mut hang = 0usize;
    for chunk in samples.chunks(frame) {
        let rms = (chunk.iter().map(|x| x * x).sum::<f64>() / chunk.len() as f64).sqrt();
        if rms > energy_threshold {
            active.push(true);
            hang = hangover_frames;
        } else if hang > 0 {
            active.push(true);
            hang -= 1;
        } else {
            active.push(false);
        }
    }
    Ok(active)
}

/// Default VAD frame length in seconds.
pub const VAD_FRAME_SECS: f64 = 0.02;
/// Default VAD hangover in frames.
pub const VAD_HANGOVER: usize = 3;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth;

    fn small_estimator() -> EstimatorConfig {
        EstimatorConfig {
            conv_channels: 16,
            fc_units: 32,
            ..EstimatorConfig::default()
        }
    }

    fn sample(seed: u64, snr: f64) -> EstimatorSample {
        let clean = synth::speech_like(0.4, 16_000, seed);
        let noise = synth::white_noise(0.4, 16_000, seed + 500, 0.3);
        let noisy = mix_at_snr(&clean, &noise, snr).unwrap();
        let fr = crate::bcf::FrequencyResponse {
            gains: (0..33).map(|j| 0.9 * (-0.05 * j as f64).exp()).collect(),
            bin_hz: 25.0,
            reliable: vec![true; 33],
        };
        let vib = crate::bcf::synthesize_vibration(&clean, &fr).unwrap();
        EstimatorSample::from_waves(&noisy, &vib, snr).unwrap()
    }

    #[test]
    fn estimate_is_bounded_and_deterministic() {
        let p = init_estimator(&small_estimator(), 1);
        for seed in 0..5 {
            let s = sample(seed, -30.0 + 15.0 * seed as f64);
            let e = estimate_snr(&p, &s.audio_mag, &s.vib_mag).unwrap();
            assert!(e.value_db >= SNR_RANGE_DB.0 && e.value_db <= SNR_RANGE_DB.1);
            let e2 = estimate_snr(&p, &s.audio_mag, &s.vib_mag).unwrap();
            assert_eq!(e.value_db, e2.value_db);
        }
    }

    #[test]
    fn estimator_rejects_shape_mismatch() {
        let p = init_estimator(&small_estimator(), 1);
        let a = Array2::zeros((10, 321));
        let v = Array2::zeros((9, 33));
        assert!(estimate_snr(&p, &a, &v).is_err());
        let v = Array2::zeros((10, 32));
        assert!(estimate_snr(&p, &a, &v).is_err());
    }

    #[test]
    fn estimator_gradients_match_fd() {
        let p = init_estimator(&small_estimator(), 2);
        let s = sample(3, 5.0);
        let err = estimator_grad_check(&p, &s, 30, 4).unwrap();
        assert!(err < 1e-4, "estimator grad error {err}");
    }

    #[test]
    fn estimator_converges_on_constant_target() {
        let p = init_estimator(&small_estimator(), 5);
        let samples: Vec<EstimatorSample> = (0..6)
            .map(|i| {
                let mut s = sample(10 + i, 0.0);
                s.true_snr_db = 7.0;
                s
            })
            .collect();
        let opts = EstimatorTrainOpts {
            lr: 3e-3,
            steps: 150,
            seed: 6,
            batch_size: 4,
        };
        let trained = train_estimator(&p, &samples, &opts).unwrap();
        for s in &samples {
            let e = estimate_snr(&trained, &s.audio_mag, &s.vib_mag).unwrap();
            assert!(
                (e.value_db - 7.0).abs() < 0.5,
                "estimate {} vs constant target 7",
                e.value_db
            );
        }
    }

    #[test]
    fn train_estimator_is_deterministic() {
        let p = init_estimator(&small_estimator(), 7);
        let samples: Vec<EstimatorSample> = (0..4).map(|i| sample(20 + i, i as f64)).collect();
        let opts = EstimatorTrainOpts {
            lr: 1e-3,
            steps: 10,
            seed: 8,
            batch_size: 2,
        };
        let a = train_estimator(&p, &samples, &opts).unwrap();
        let b = train_estimator(&p, &samples, &opts).unwrap();
        assert_eq!(a.params.values(), b.params.values());
        assert!(train_estimator(&p, &[], &opts).is_err());
    }

    #[test]
    fn curate_matches_threshold_rule_exactly() {
        let clips: Vec<(String, Waveform, Waveform)> = (0..7)
            .map(|i| {
                let w = synth::speech_like(0.2, 16_000, 40 + i);
                let v = synth::white_noise(0.2, 1_600, 50 + i, 0.1);
                (format!("c{i}"), w, v)
            })
            .collect();
        let labels = [19.0, 18.0, 5.0, -19.0, 17.5, -17.5, -18.5];
        let oracle = |id: &str| {
            let idx: usize = id[1..].parse().unwrap();
            labels[idx]
        };
        let pools = curate(
            &clips,
            &SnrSource::Oracle(&oracle),
            17.5,
            &RemixConfig::default(),
        )
        .unwrap();
        let clean_ids: Vec<&str> = pools.clean.iter().map(|c| c.id.as_str()).collect();
        let noise_ids: Vec<&str> = pools.noise.iter().map(|c| c.id.as_str()).collect();
        assert_eq!(clean_ids, vec!["c0", "c1"]); // > 17.5 only
        assert_eq!(noise_ids, vec!["c3", "c6"]); // < -17.5 only
        assert_eq!(pools.discarded, 3); // 5.0, 17.5, -17.5 (boundaries drop)
        assert!(curate(&clips, &SnrSource::Oracle(&oracle), -1.0, &RemixConfig::default()).is_err());
    }

    #[test]
    fn curate_triggers_remix_on_pool_fill() {
        let clips: Vec<(String, Waveform, Waveform)> = (0..8)
            .map(|i| {
                let w = synth::speech_like(0.2, 16_000, 60 + i);
                let v = synth::white_noise(0.2, 1_600, 70 + i, 0.1);
                (format!("c{i}"), w, v)
            })
            .collect();
        // alternate clean/noise labels
        let oracle = |id: &str| {
            let idx: usize = id[1..].parse().unwrap();
            if idx % 2 == 0 {
                19.0
            } else {
                -19.0
            }
        };
        let cfg = RemixConfig {
            pool_trigger: 2,
            ..RemixConfig::default()
        };
        let pools = curate(&clips, &SnrSource::Oracle(&oracle), 17.5, &cfg).unwrap();
        // two fills of 2+2 -> two remix rounds of 2 triples each
        assert_eq!(pools.remixed.len(), 4);
        for t in &pools.remixed {
            // identity teacher: pseudo-clean equals the original audio
            assert!(t.id.starts_with("remix-"));
        }
    }

    #[test]
    fn remix_hits_requested_snr() {
        let mk = |i: u64, label: f64| CuratedClip {
            id: format!("k{i}"),
            audio: synth::speech_like(0.3, 16_000, 80 + i),
            vib: synth::white_noise(0.3, 1_600, 90 + i, 0.1),
            estimate_db: label,
            pool: if label > 0.0 { Pool::Clean } else { Pool::Noise },
        };
        let clean: Vec<CuratedClip> = (0..3).map(|i| mk(i, 19.0)).collect();
        let noise: Vec<CuratedClip> = (0..3).map(|i| mk(10 + i, -19.0)).collect();
        let triples = remix_dataset(&clean, &noise, None, (2.0, 8.0), 42).unwrap();
        assert_eq!(triples.len(), 3);
        for t in &triples {
            assert!(t.snr_db >= 2.0 && t.snr_db <= 8.0);
            // measure the achieved SNR from the known decomposition
            let scaled: Vec<f64> = t
                .mixture
                .samples()
                .unwrap()
                .iter()
                .zip(t.pseudo_clean.samples().unwrap())
                .map(|(m, c)| m - c)
                .collect();
            let achieved = crate::mixer::measure_snr(
                &t.pseudo_clean,
                &Waveform::mono(scaled, 16_000).unwrap(),
            )
            .unwrap();
            assert!(
                (achieved - t.snr_db).abs() < 0.1,
                "requested {} achieved {achieved}",
                t.snr_db
            );
        }
        // determinism
        let again = remix_dataset(&clean, &noise, None, (2.0, 8.0), 42).unwrap();
        for (a, b) in triples.iter().zip(&again) {
            assert_eq!(a.mixture.samples().unwrap(), b.mixture.samples().unwrap());
        }
        assert!(remix_dataset(&[], &noise, None, (2.0, 8.0), 1).is_err());
    }

    #[test]
    fn adaptive_threshold_extremes() {
        let cfg = crate::model::ModelConfig {
            audio_channels: vec![4, 4, 8, 8, 8],
            vib_channels: vec![4, 8],
            n_blocks: 3,
            rnn_hidden: 8,
            ..crate::model::ModelConfig::default()
        };
        let model = crate::model::init_params(&cfg, 9).unwrap();
        let est = init_estimator(&small_estimator(), 10);
        let clean = synth::speech_like(0.5, 16_000, 100);
        let noisy = mix_at_snr(&clean, &synth::white_noise(0.5, 16_000, 101, 0.3), 5.0).unwrap();
        let fr = crate::bcf::FrequencyResponse::identity(33, 25.0);
        let vibw = crate::bcf::synthesize_vibration(&clean, &fr).unwrap();
        let sn = stft(&noisy, AUDIO_WINDOW, AUDIO_HOP).unwrap();
        let sv = stft(&vibw, VIB_WINDOW, VIB_HOP).unwrap();
        let (_, k_lo) = adaptive_enhance(&model, &est, &sn, &sv, f64::NEG_INFINITY).unwrap();
        assert_eq!(k_lo, 1);
        let (_, k_hi) = adaptive_enhance(&model, &est, &sn, &sv, f64::INFINITY).unwrap();
        assert_eq!(k_hi, cfg.n_blocks);
    }

    #[test]
    fn vad_basics() {
        let rate = 1600u32;
        // silence -> all inactive
        let silent = Waveform::mono(vec![0.0; 1600], rate).unwrap();
        let v = vad(&silent, VAD_FRAME_SECS, 0.01, VAD_HANGOVER).unwrap();
        assert!(v.iter().all(|a| !a));

        // -60 dBFS noise stays below a -40 dB threshold
        let tiny = synth::white_noise(1.0, rate, 1, 0.001);
        let v = vad(&tiny, VAD_FRAME_SECS, 0.01, VAD_HANGOVER).unwrap();
        assert!(v.iter().all(|a| !a));

        // a burst activates exactly its frames plus the hangover
        let frame = (VAD_FRAME_SECS * rate as f64) as usize; // 32 samples
        let mut s = vec![0.0; 50 * frame];
        for (i, v) in s[10 * frame..20 * frame].iter_mut().enumerate() {
            *v = 0.5 * (std::f64::consts::TAU * 200.0 * i as f64 / rate as f64).sin();
        }
        let w = Waveform::mono(s, rate).unwrap();
        let v = vad(&w, VAD_FRAME_SECS, 0.01, 3).unwrap();
        for (f, &a) in v.iter().enumerate() {
            let expect = (10..20 + 3).contains(&f);
            assert_eq!(a, expect, "frame {f}");
        }
    }

    #[test]
    fn estimator_container_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = init_estimator(&small_estimator(), 11);
        let path = dir.path().join("est.bin");
        p.save(&path).unwrap();
        let q = SnrEstimatorParams::load(&path).unwrap();
        assert_eq!(q.config, p.config);
        assert_eq!(q.params.num_entries(), p.params.num_entries());
        // wrong kind rejected
        assert!(ModelParameters::load(&path).is_err());
    }
}
