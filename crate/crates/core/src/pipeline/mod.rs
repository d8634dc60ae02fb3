//! Co-training of the three networks, checkpoints, closed-loop rollouts in
//! the push world and the decision-latency benchmark.

mod bench;
mod checkpoint;
mod config;
mod rollout;

use std::io::Write;
use std::path::Path;

use crate::diffmatcher::{noise_clips, DiffMatcher};
use crate::error::{ensure, Result};
use crate::hidiff::{normalize_action, HiDiff, ACTION_DIM, CHUNK};
use crate::lodiff::{LoDiff, CLIP_FRAMES};
use crate::numerics::{adamw_step, cosine_lr, AdamWConfig, Graph, OptimState, ParamStore, Rng, Tensor};
use crate::pushworld::{read_episodes, Action, EpisodeRecord, FRAME_PIXELS, HORIZON};
use crate::schedulers::{Slow, Step};

pub use bench::{bench_latency, write_bench_csv, BenchReport, BenchRow};
pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use config::{MindConfig, CONFIG_KEYS};
pub use rollout::{
    decode_records, encode_records, read_records, rollout, rollout_expert, rollout_many, write_records, Intervention,
    InterventionKind, Mode, RolloutRecord, EXECUTE_PER_PLAN,
};

/// Frame offsets of a training clip relative to its start.
pub const CLIP_STRIDE: usize = 4;

/// Pixel intensities in `[0, 1]` mapped to the model range `[-1, 1]`.
pub fn normalize_frame(pixels: &[f32]) -> Vec<f64> {
    pixels.iter().map(|&p| 2.0 * p as f64 - 1.0).collect()
}

/// The three networks sharing one parameter store, plus the run config.
#[derive(Debug)]
pub struct Mind {
    pub config: MindConfig,
    pub params: ParamStore,
    pub lodiff: LoDiff,
    pub matcher: DiffMatcher,
    pub hidiff: HiDiff,
    /// Optimizer steps taken so far.
    pub step: u64,
}

impl Mind {
    /// Freshly initialized networks; initialization depends only on
    /// `config.seed`. Values start at checkpoint precision.
    pub fn new(config: MindConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let init = Rng::new(config.seed).split(0x1417);
        let lodiff = LoDiff::new(&mut params, "lodiff", config.lodiff(), &mut init.split(1))?;
        let matcher = DiffMatcher::new(&mut params, "matcher", config.matcher(), config.tprime, &mut init.split(2))?;
        let hidiff = HiDiff::new(&mut params, "hidiff", config.hidiff(), &mut init.split(3))?;
        let mut mind = Self { config, params, lodiff, matcher, hidiff, step: 0 };
        mind.round_to_checkpoint_precision();
        Ok(mind)
    }

    pub fn is_lodiff_param(name: &str) -> bool {
        name.starts_with("lodiff.")
    }

    /// Narrows every parameter to f32 precision, the precision checkpoints store.
    pub fn round_to_checkpoint_precision(&mut self) {
        let ids: Vec<_> = self.params.ids().collect();
        for id in ids {
            for v in self.params.get_mut(id).data_mut() {
                *v = *v as f32 as f64;
            }
        }
    }
}

/// Clean clips, aligned action chunks and task ids for one training step.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `[B, 4, 256]`, normalized.
    pub clips: Tensor,
    /// `[B, 8, 3]`, normalized.
    pub chunks: Tensor,
    pub tasks: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }
}

/// Clip and chunk starting at step `t` of an episode. Clip frames are
/// `t, t+4, t+8, t+12` clamped to the last frame; actions past the end of the
/// episode are padded with zero moves that keep the last gripper command.
pub fn sample_at(episode: &EpisodeRecord, t: usize) -> (Vec<f64>, Vec<f64>) {
    let last = episode.num_frames() - 1;
    let mut clip = Vec::with_capacity(CLIP_FRAMES * FRAME_PIXELS);
    for k in 0..CLIP_FRAMES {
        clip.extend(normalize_frame(episode.frame((t + k * CLIP_STRIDE).min(last))));
    }
    let hold = episode.actions.last().map_or(0.0, |a| a.g);
    let mut chunk = Vec::with_capacity(CHUNK * ACTION_DIM);
    for k in 0..CHUNK {
        let a = episode.actions.get(t + k).copied().unwrap_or(Action::new(0.0, 0.0, hold));
        chunk.extend(normalize_action(&a));
    }
    (clip, chunk)
}

/// Draws `size` (episode, start step) pairs uniformly.
pub fn sample_batch(episodes: &[EpisodeRecord], size: usize, rng: &mut Rng) -> Result<Batch> {
    ensure!(!episodes.is_empty(), "no episodes to sample from");
    ensure!(size >= 1, "empty batch");
    let mut clips = Vec::with_capacity(size * CLIP_FRAMES * FRAME_PIXELS);
    let mut chunks = Vec::with_capacity(size * CHUNK * ACTION_DIM);
    let mut tasks = Vec::with_capacity(size);
    for _ in 0..size {
        let ep = &episodes[rng.below(episodes.len())];
        ensure!(ep.num_frames() >= 2, "episode without transitions");
        let t = rng.below(ep.actions.len().min(HORIZON));
        let (c, a) = sample_at(ep, t);
        clips.extend(c);
        chunks.extend(a);
        tasks.push(ep.task);
    }
    Ok(Batch {
        clips: Tensor::new(&[size, CLIP_FRAMES, FRAME_PIXELS], clips)?,
        chunks: Tensor::new(&[size, CHUNK, ACTION_DIM], chunks)?,
        tasks,
    })
}

/// Loss values of one co-training step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossReport {
    pub video: f64,
    pub action: f64,
    pub align: f64,
    /// Weighted sum of the enabled terms.
    pub total: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

impl LossReport {
    pub fn weighted_total(config: &MindConfig, video: f64, action: f64, align: f64) -> f64 {
        let mut total = 0.0;
        if config.use_video_loss {
            total += config.lambda_v * video;
        }
        if config.use_action_loss {
            total += config.lambda_a * action;
        }
        if config.use_align_loss {
            total += config.lambda_align * align;
        }
        total
    }
}

/// One AdamW step on the weighted sum of the enabled losses. Disabled losses
/// are still evaluated for reporting but contribute no gradient.
pub fn cotrain_step(mind: &mut Mind, batch: &Batch, opt: &mut OptimState, rng: &mut Rng) -> Result<LossReport> {
    let b = batch.len();
    ensure!(b >= 1, "empty batch");
    ensure!(
        batch.clips.shape() == [b, CLIP_FRAMES, FRAME_PIXELS] && batch.chunks.shape() == [b, CHUNK, ACTION_DIM],
        "batch tensors do not match {b} samples"
    );
    let cfg = mind.config.clone();
    let mut g = Graph::new(&mind.params);

    let video = mind.lodiff.video_loss(&mut g, &batch.clips, &batch.tasks, &mut rng.split(1))?;
    let align = mind.matcher.align_loss(&mut g, &batch.clips, &mind.lodiff.schedule, &mut rng.split(2))?;

    // the policy sees features of the clip noised at a fresh timestep
    let mut zr = rng.split(3);
    let steps: Vec<Step<Slow>> = (0..b).map(|_| mind.lodiff.schedule.sample_step(&mut zr)).collect();
    let eps = zr.normal_tensor(batch.clips.shape());
    let noisy = noise_clips(&batch.clips, &eps, &steps, &mind.lodiff.schedule)?;
    let noisy = g.constant(noisy);
    let z = mind.matcher.forward(&mut g, noisy, &steps)?;
    let action = mind.hidiff.action_loss(&mut g, &batch.chunks, z, &batch.tasks, &mut rng.split(4))?;

    let mut terms = Vec::new();
    if cfg.use_video_loss {
        terms.push(g.scale(video, cfg.lambda_v));
    }
    if cfg.use_action_loss {
        terms.push(g.scale(action, cfg.lambda_a));
    }
    if cfg.use_align_loss {
        terms.push(g.scale(align, cfg.lambda_align));
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    let (video, action, align) = (g.value(video).item(), g.value(action).item(), g.value(align).item());

    let mut grads = g.backward(total)?;
    drop(g);
    if cfg.freeze_lodiff {
        let params = &mind.params;
        grads.retain(|id| !Mind::is_lodiff_param(params.name(id)));
    }
    let grad_norm = grads.clip_global_norm(cfg.grad_clip);
    let lr = cosine_lr(mind.step, cfg.lr, cfg.warmup as u64, cfg.steps.max(1) as u64);
    let adamw = AdamWConfig { weight_decay: cfg.weight_decay, ..AdamWConfig::default() };
    adamw_step(&mut mind.params, &grads, opt, lr, &adamw)?;
    mind.step += 1;
    Ok(LossReport { video, action, align, total: LossReport::weighted_total(&cfg, video, action, align), lr, grad_norm })
}

/// Random stream for training step `step` under `seed`.
fn step_rng(seed: u64, step: u64) -> Rng {
    Rng::new(seed).split(0x7a1).split(step)
}

/// Trains for `config.steps` steps. Parameters end at checkpoint precision so
/// the returned model equals what a saved checkpoint reloads to.
pub fn train_on(config: &MindConfig, episodes: &[EpisodeRecord], mut log: impl FnMut(&LossReport)) -> Result<(Mind, Vec<LossReport>)> {
    let mut mind = Mind::new(config.clone())?;
    let mut opt = OptimState::new(&mind.params);
    let mut history = Vec::with_capacity(config.steps);
    for step in 0..config.steps as u64 {
        let mut rng = step_rng(config.seed, step);
        let batch = sample_batch(episodes, config.batch, &mut rng.split(0))?;
        let report = cotrain_step(&mut mind, &batch, &mut opt, &mut rng)?;
        log(&report);
        history.push(report);
    }
    mind.round_to_checkpoint_precision();
    Ok((mind, history))
}

/// [`train_on`] over an episode file.
pub fn train(config: &MindConfig, dataset: &Path, log: impl FnMut(&LossReport)) -> Result<(Mind, Vec<LossReport>)> {
    let episodes = read_episodes(dataset)?;
    train_on(config, &episodes, log)
}

/// Loss curve as CSV with header `step,L_video,L_action,L_align,lr`.
pub fn write_loss_csv(mut out: impl Write, history: &[LossReport]) -> Result<()> {
    writeln!(out, "step,L_video,L_action,L_align,lr")?;
    for (i, r) in history.iter().enumerate() {
        writeln!(out, "{},{},{},{},{}", i, r.video, r.action, r.align, r.lr)?;
    }
    Ok(())
}

/// Mean squared distance between matcher features of noisy clips and of their
/// clean versions, on fixed held-out clips, noise and timesteps.
pub fn feature_alignment_distance(mind: &Mind, clips: &Tensor, seed: u64) -> Result<f64> {
    let b = clips.shape()[0];
    let mut rng = Rng::new(seed).split(0xa11);
    let schedule = &mind.lodiff.schedule;
    let steps: Vec<Step<Slow>> = (0..b).map(|_| schedule.sample_step(&mut rng)).collect();
    let eps = rng.normal_tensor(clips.shape());
    let mut g = Graph::inference(&mind.params);
    let d = mind.matcher.align_loss_at(&mut g, clips, &eps, &steps, schedule)?;
    Ok(g.value(d).item())
}
