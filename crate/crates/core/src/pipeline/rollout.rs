//! Closed-loop receding-horizon control in the push world.
//!
//! Each replan observes the current frame, produces a video latent (one
//! reverse step in single-step mode, a full DDIM chain in full-video mode),
//! turns it into matcher features, samples an 8-action chunk and executes the
//! first four. Optional intervention hooks corrupt named sites of that chain.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use super::{normalize_frame, Mind};
use crate::error::{contract, ensure, MindError, Result};
use crate::hidiff::CHUNK;
use crate::lodiff::{VideoLatent, CLIP_FRAMES};
use crate::numerics::{Rng, Tensor};
use crate::pushworld::{render, scripted_expert, step_env, Action, EnvState, FRAME_PIXELS, NUM_TASKS};

/// Actions executed from each sampled chunk before replanning.
pub const EXECUTE_PER_PLAN: usize = 4;

const ENV_STREAM: u64 = 0xe1;
const MODEL_STREAM: u64 = 0x30d;
const HOOK_STREAM: u64 = 0x400c;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    SingleStep,
    FullVideo,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::SingleStep => "singlestep",
            Mode::FullVideo => "fullvideo",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = MindError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "singlestep" => Ok(Mode::SingleStep),
            "fullvideo" => Ok(Mode::FullVideo),
            _ => contract!("unknown mode {s:?}; expected singlestep or fullvideo"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InterventionKind {
    /// Gaussian noise of std `magnitude` added to the latent before the matcher.
    VisualPerturbation,
    /// A `magnitude` fraction of the feature entries set to zero.
    LatentMasking,
    /// Features replaced by unit Gaussian noise.
    RandomLatentInjection,
    /// The latent replaced by zeros; the video model is not run.
    FrozenLodiff,
    /// Features taken from another episode's cache.
    CrossEpisodeInjection,
    /// Task id rotated by one before it reaches either generator.
    SwappedInstruction,
}

impl InterventionKind {
    pub const ALL: [InterventionKind; 6] = [
        InterventionKind::VisualPerturbation,
        InterventionKind::LatentMasking,
        InterventionKind::RandomLatentInjection,
        InterventionKind::FrozenLodiff,
        InterventionKind::CrossEpisodeInjection,
        InterventionKind::SwappedInstruction,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            InterventionKind::VisualPerturbation => "visual_perturbation",
            InterventionKind::LatentMasking => "latent_masking",
            InterventionKind::RandomLatentInjection => "random_latent_injection",
            InterventionKind::FrozenLodiff => "frozen_lodiff",
            InterventionKind::CrossEpisodeInjection => "cross_episode_injection",
            InterventionKind::SwappedInstruction => "swapped_instruction",
        }
    }

    /// Default magnitude: σ = 0.5 for perturbation, fraction 0.5 for masking.
    pub fn default_magnitude(self) -> f64 {
        match self {
            InterventionKind::VisualPerturbation | InterventionKind::LatentMasking => 0.5,
            _ => 0.0,
        }
    }
}

impl fmt::Display for InterventionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for InterventionKind {
    type Err = MindError;

    fn from_str(s: &str) -> Result<Self> {
        match Self::ALL.into_iter().find(|k| k.as_str() == s) {
            Some(k) => Ok(k),
            None => {
                let names: Vec<&str> = Self::ALL.iter().map(|k| k.as_str()).collect();
                contract!("unknown intervention {s:?}; expected one of {}", names.join(", "))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Intervention {
    pub kind: InterventionKind,
    pub magnitude: f64,
    pub seed: u64,
    /// Feature cache of another episode, required by cross-episode injection.
    pub donor: Option<Vec<Tensor>>,
}

impl Intervention {
    pub fn new(kind: InterventionKind, magnitude: f64, seed: u64) -> Result<Self> {
        ensure!(magnitude >= 0.0 && magnitude.is_finite(), "intervention magnitude must be finite and non-negative");
        if kind == InterventionKind::LatentMasking {
            ensure!(magnitude <= 1.0, "mask fraction must be at most 1");
        }
        Ok(Self { kind, magnitude, seed, donor: None })
    }
}

/// One closed-loop episode.
#[derive(Clone, Debug, PartialEq)]
pub struct RolloutRecord {
    pub task: usize,
    pub seed: u64,
    pub mode: Mode,
    pub success: bool,
    /// Diffusion timestep the latents sit at.
    pub latent_step: usize,
    /// `[4, 256]` latent of every replan cycle.
    pub latents: Vec<Tensor>,
    /// `[4, proj]` matcher tokens of every replan cycle.
    pub features: Vec<Tensor>,
    pub actions: Vec<Action>,
    /// Observed frames, `actions.len() + 1` rasters of 256 pixels.
    pub frames: Vec<f32>,
    pub replans: usize,
}

impl RolloutRecord {
    /// Mean and standard deviation of each replan's latent.
    pub fn latent_stats(&self) -> Vec<(f64, f64)> {
        self.latents
            .iter()
            .map(|l| {
                let n = l.numel() as f64;
                let mean = l.sum() / n;
                let var = l.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
                (mean, var.sqrt())
            })
            .collect()
    }

    /// Matcher tokens of each replan averaged over the four frame tokens.
    pub fn pooled_features(&self) -> Vec<Vec<f64>> {
        self.features
            .iter()
            .map(|f| {
                let d = f.shape()[1];
                let mut out = vec![0.0; d];
                for row in f.data().chunks_exact(d) {
                    out.iter_mut().zip(row).for_each(|(o, x)| *o += x / CLIP_FRAMES as f64);
                }
                out
            })
            .collect()
    }
}

/// What one replan produced: the actions to execute and, for model policies,
/// the latent and features behind them.
struct Plan {
    actions: Vec<Action>,
    latent: Option<(Tensor, Tensor)>,
}

fn closed_loop(
    task: usize,
    seed: u64,
    mode: Mode,
    latent_step: usize,
    mut plan: impl FnMut(usize, &EnvState) -> Result<Plan>,
) -> Result<RolloutRecord> {
    ensure!(task < NUM_TASKS, "task {task} outside 0..{NUM_TASKS}");
    let mut state = EnvState::random(task, &mut Rng::new(seed).split(ENV_STREAM));
    let mut rec = RolloutRecord {
        task,
        seed,
        mode,
        success: false,
        latent_step,
        latents: Vec::new(),
        features: Vec::new(),
        actions: Vec::new(),
        frames: render(&state),
        replans: 0,
    };
    while !state.success && !state.done() {
        let p = plan(rec.replans, &state)?;
        rec.replans += 1;
        if let Some((latent, z)) = p.latent {
            rec.latents.push(latent);
            rec.features.push(z);
        }
        for &a in p.actions.iter().take(EXECUTE_PER_PLAN) {
            state = step_env(&state, a);
            rec.actions.push(a);
            rec.frames.extend(render(&state));
            if state.success || state.done() {
                break;
            }
        }
    }
    rec.success = state.success;
    Ok(rec)
}

/// The scripted expert driven through the same receding-horizon loop: each
/// replan simulates the expert for a full chunk and executes its prefix.
pub fn rollout_expert(task: usize, seed: u64) -> Result<RolloutRecord> {
    closed_loop(task, seed, Mode::SingleStep, 0, |_, state| {
        let mut sim = *state;
        let mut actions = Vec::with_capacity(CHUNK);
        for _ in 0..CHUNK {
            let a = scripted_expert(&sim);
            sim = step_env(&sim, a);
            actions.push(a);
        }
        Ok(Plan { actions, latent: None })
    })
}

/// Runs the trained pipeline on one seeded episode of `task`.
pub fn rollout(mind: &Mind, task: usize, seed: u64, mode: Mode, intervention: Option<&Intervention>) -> Result<RolloutRecord> {
    let kind = intervention.map(|i| i.kind);
    if let Some(i) = intervention {
        if i.kind == InterventionKind::CrossEpisodeInjection {
            ensure!(i.donor.as_ref().is_some_and(|d| !d.is_empty()), "cross-episode injection needs a donor feature cache");
        }
    }
    let cfg = &mind.config;
    let schedule = &mind.lodiff.schedule;
    let latent_step = match mode {
        Mode::SingleStep => schedule.last().get() - 1,
        Mode::FullVideo => 0,
    };
    let model = Rng::new(seed).split(MODEL_STREAM);
    let mut hook = Rng::new(seed).split(HOOK_STREAM).split(intervention.map_or(0, |i| i.seed));
    let proj = mind.matcher.config.proj;
    let cond_task = if kind == Some(InterventionKind::SwappedInstruction) { (task + 1) % NUM_TASKS } else { task };

    closed_loop(task, seed, mode, latent_step, |i, state| {
        let v0 = Tensor::new(&[FRAME_PIXELS], normalize_frame(&render(state)))?;
        let i64 = i as u64;
        let mut latent = if kind == Some(InterventionKind::FrozenLodiff) {
            VideoLatent { frames: Tensor::zeros(&[CLIP_FRAMES, FRAME_PIXELS]), step: schedule.step(latent_step)? }
        } else {
            let mut rng = model.split(2 * i64);
            match mode {
                Mode::SingleStep => mind.lodiff.single_step_latent(&mind.params, &v0, cond_task, &mut rng)?,
                Mode::FullVideo => mind.lodiff.sample_video(
                    &mind.params,
                    &v0,
                    cond_task,
                    cfg.video_steps,
                    cfg.video_cfg_scale,
                    &mut rng,
                )?,
            }
        };
        if kind == Some(InterventionKind::VisualPerturbation) {
            let sigma = intervention.map_or(0.0, |i| i.magnitude);
            let noise = hook.normal_tensor(latent.frames.shape());
            latent.frames = latent.frames.zip_map(&noise, |x, n| x + sigma * n)?;
        }
        let mut z = mind.matcher.features(&mind.params, &latent.frames, latent.step)?.tokens;
        match (kind, intervention) {
            (Some(InterventionKind::LatentMasking), Some(iv)) => {
                let n = z.numel();
                let count = ((iv.magnitude * n as f64).round() as usize).min(n);
                let mut idx: Vec<usize> = (0..n).collect();
                hook.shuffle(&mut idx);
                for &j in &idx[..count] {
                    z.data_mut()[j] = 0.0;
                }
            }
            (Some(InterventionKind::RandomLatentInjection), _) => z = hook.normal_tensor(&[CLIP_FRAMES, proj]),
            (Some(InterventionKind::CrossEpisodeInjection), Some(iv)) => {
                let donor = iv.donor.as_ref().expect("checked above");
                z = donor[i % donor.len()].clone();
                ensure!(z.shape() == [CLIP_FRAMES, proj], "donor features have shape {:?}", z.shape());
            }
            _ => {}
        }
        let actions = mind.hidiff.sample_actions(
            &mind.params,
            &z,
            cond_task,
            cfg.action_steps,
            cfg.cfg_scale,
            &mut model.split(2 * i64 + 1),
        )?;
        Ok(Plan { actions, latent: Some((latent.frames, z)) })
    })
}

/// Runs `jobs` (task, seed) on `workers` threads sharing the read-only model.
/// Records come back in job order whatever the worker count.
pub fn rollout_many(
    mind: &Mind,
    jobs: &[(usize, u64)],
    mode: Mode,
    intervention: Option<&Intervention>,
    workers: usize,
) -> Result<Vec<RolloutRecord>> {
    let workers = workers.clamp(1, jobs.len().max(1));
    if workers == 1 {
        return jobs.iter().map(|&(t, s)| rollout(mind, t, s, mode, intervention)).collect();
    }
    let mut results: Vec<Option<Result<RolloutRecord>>> = (0..jobs.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                scope.spawn(move || {
                    (w..jobs.len())
                        .step_by(workers)
                        .map(|j| (j, rollout(mind, jobs[j].0, jobs[j].1, mode, intervention)))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (j, r) in h.join().expect("rollout worker panicked") {
                results[j] = Some(r);
            }
        }
    });
    results.into_iter().map(|r| r.expect("every job assigned")).collect()
}

const RECORD_MAGIC: &[u8; 4] = b"MNDR";
const RECORD_VERSION: u32 = 1;

fn put_f32s(out: &mut Vec<u8>, xs: impl IntoIterator<Item = f64>) {
    for x in xs {
        out.extend((x as f32).to_le_bytes());
    }
}

/// Rollout file: magic `MNDR`, u32 version, u32 count, then per record
/// u8 task, u64 seed, u8 mode, u8 success, u32 latent step, u32 replans,
/// u32 latent count, u32 feature count, u16 feature width, u32 action count,
/// followed by f32 latents, features, actions (dx, dy, g) and frames.
pub fn encode_records(records: &[RolloutRecord]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend(RECORD_MAGIC);
    out.extend(RECORD_VERSION.to_le_bytes());
    out.extend((records.len() as u32).to_le_bytes());
    for r in records {
        let width = r.features.first().map_or(0, |f| f.shape()[1]);
        ensure!(r.features.iter().all(|f| f.shape() == [CLIP_FRAMES, width]), "ragged feature shapes");
        ensure!(r.latents.iter().all(|l| l.shape() == [CLIP_FRAMES, FRAME_PIXELS]), "latents must be [4, 256]");
        ensure!(r.frames.len() == (r.actions.len() + 1) * FRAME_PIXELS, "frame count does not match actions");
        out.push(r.task as u8);
        out.extend(r.seed.to_le_bytes());
        out.push(match r.mode {
            Mode::SingleStep => 0,
            Mode::FullVideo => 1,
        });
        out.push(r.success as u8);
        for n in [r.latent_step, r.replans, r.latents.len(), r.features.len()] {
            out.extend((n as u32).to_le_bytes());
        }
        out.extend((width as u16).to_le_bytes());
        out.extend((r.actions.len() as u32).to_le_bytes());
        for l in &r.latents {
            put_f32s(&mut out, l.data().iter().copied());
        }
        for f in &r.features {
            put_f32s(&mut out, f.data().iter().copied());
        }
        put_f32s(&mut out, r.actions.iter().flat_map(|a| [a.dx, a.dy, a.g]));
        out.extend(r.frames.iter().flat_map(|p| p.to_le_bytes()));
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        match self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()) {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(MindError::Format(format!("rollout file truncated at byte {}", self.pos))),
        }
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| MindError::Format("length overflow".into()))?)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn tensor(&mut self, shape: &[usize]) -> Result<Tensor> {
        let data = self.f32s(shape.iter().product())?.into_iter().map(f64::from).collect();
        Tensor::new(shape, data).map_err(|e| MindError::Format(e.to_string()))
    }
}

pub fn decode_records(bytes: &[u8]) -> Result<Vec<RolloutRecord>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != RECORD_MAGIC {
        return Err(MindError::Format("not a rollout file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != RECORD_VERSION as usize {
        return Err(MindError::Format(format!("unsupported rollout file version {version}")));
    }
    let count = r.u32()?;
    let mut out = Vec::new();
    for _ in 0..count {
        let task = r.take(1)?[0] as usize;
        let seed = u64::from_le_bytes(r.take(8)?.try_into().unwrap());
        let mode = match r.take(1)?[0] {
            0 => Mode::SingleStep,
            1 => Mode::FullVideo,
            m => return Err(MindError::Format(format!("unknown mode byte {m}"))),
        };
        let success = r.take(1)?[0] != 0;
        let (latent_step, replans, n_lat, n_feat) = (r.u32()?, r.u32()?, r.u32()?, r.u32()?);
        let width = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
        let n_act = r.u32()?;
        let latents = (0..n_lat).map(|_| r.tensor(&[CLIP_FRAMES, FRAME_PIXELS])).collect::<Result<Vec<_>>>()?;
        let features = (0..n_feat).map(|_| r.tensor(&[CLIP_FRAMES, width])).collect::<Result<Vec<_>>>()?;
        let actions = r
            .f32s(n_act * 3)?
            .chunks_exact(3)
            .map(|c| Action { dx: c[0] as f64, dy: c[1] as f64, g: c[2] as f64 })
            .collect();
        let frames = r.f32s((n_act + 1) * FRAME_PIXELS)?;
        out.push(RolloutRecord { task, seed, mode, success, latent_step, latents, features, actions, frames, replans });
    }
    if r.pos != bytes.len() {
        return Err(MindError::Format("trailing bytes after the last record".into()));
    }
    Ok(out)
}

pub fn write_records(path: &Path, records: &[RolloutRecord]) -> Result<()> {
    std::fs::write(path, encode_records(records)?)?;
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<RolloutRecord>> {
    decode_records(&std::fs::read(path)?)
}
