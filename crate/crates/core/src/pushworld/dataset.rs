//! Recorded demonstrations and the `MND1` episode file.
//!
//! Layout (little-endian): magic `MND1`, u32 version (1), u32 episode count,
//! then per episode: u16 task, u8 success, u16 frame count F, u16 action
//! count A = F − 1, F·256 f32 pixels, A·3 f32 action components (Δx, Δy, g).

use std::fs;
use std::path::Path;

use super::{render, scripted_expert, step_env, Action, EnvState, FRAME_PIXELS, HORIZON, NUM_TASKS};
use crate::error::{ensure, MindError, Result};
use crate::numerics::Rng;

const MAGIC: &[u8; 4] = b"MND1";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeRecord {
    pub task: usize,
    /// Row-major frames, `FRAME_PIXELS` values each.
    pub frames: Vec<f32>,
    pub actions: Vec<Action>,
    pub success: bool,
}

impl EpisodeRecord {
    pub fn num_frames(&self) -> usize {
        self.frames.len() / FRAME_PIXELS
    }

    pub fn frame(&self, i: usize) -> &[f32] {
        &self.frames[i * FRAME_PIXELS..(i + 1) * FRAME_PIXELS]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DatasetSummary {
    pub episodes: usize,
    pub successes: usize,
    pub failures: usize,
}

impl DatasetSummary {
    pub fn of(episodes: &[EpisodeRecord]) -> Self {
        let successes = episodes.iter().filter(|e| e.success).count();
        Self { episodes: episodes.len(), successes, failures: episodes.len() - successes }
    }

    pub fn success_rate(&self) -> f64 {
        self.successes as f64 / self.episodes.max(1) as f64
    }
}

/// Task and starting state of episode `index` of a dataset generated with `seed`.
pub fn initial_state(seed: u64, index: usize) -> EnvState {
    let mut rng = Rng::new(seed).split(index as u64).split(0);
    let task = rng.below(NUM_TASKS);
    EnvState::random(task, &mut rng)
}

/// Runs actions from `initial` and returns the resulting frames and final state.
pub fn replay(initial: &EnvState, actions: &[Action]) -> (Vec<f32>, EnvState) {
    let mut state = *initial;
    let mut frames = render(&state);
    for &a in actions {
        state = step_env(&state, a);
        frames.extend(render(&state));
    }
    (frames, state)
}

/// Expert demonstrations with Gaussian noise of standard deviation
/// `noise_level` added to every action component. An episode ends at the
/// first step the block reaches the goal, or at the horizon.
pub fn generate_episodes(n: usize, seed: u64, noise_level: f64) -> Result<Vec<EpisodeRecord>> {
    ensure!(n >= 1, "dataset needs at least one episode");
    ensure!(noise_level >= 0.0 && noise_level.is_finite(), "noise level must be finite and non-negative");
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut noise = Rng::new(seed).split(i as u64).split(1);
        let mut state = initial_state(seed, i);
        let mut frames = render(&state);
        let mut actions = Vec::with_capacity(HORIZON);
        while !state.done() && !state.success {
            let e = scripted_expert(&state);
            let a = if noise_level > 0.0 {
                Action::new(
                    e.dx + noise_level * noise.normal(),
                    e.dy + noise_level * noise.normal(),
                    e.g + noise_level * noise.normal(),
                )
            } else {
                e
            };
            let a = a.to_f32_precision();
            state = step_env(&state, a);
            frames.extend(render(&state));
            actions.push(a);
        }
        out.push(EpisodeRecord { task: state.task, frames, actions, success: state.success });
    }
    Ok(out)
}

/// Generates episodes and writes them to `path`.
pub fn generate_dataset(n: usize, seed: u64, noise_level: f64, path: &Path) -> Result<DatasetSummary> {
    let episodes = generate_episodes(n, seed, noise_level)?;
    write_episodes(path, &episodes)?;
    Ok(DatasetSummary::of(&episodes))
}

pub fn encode_episodes(episodes: &[EpisodeRecord]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(episodes.len() as u32).to_le_bytes());
    for ep in episodes {
        let f = ep.num_frames();
        ensure!(ep.frames.len() == f * FRAME_PIXELS && f >= 1, "episode frames are not whole 16x16 images");
        ensure!(ep.actions.len() + 1 == f, "episode has {f} frames but {} actions", ep.actions.len());
        ensure!(f <= u16::MAX as usize && ep.task <= u16::MAX as usize, "episode too long for the file format");
        buf.extend_from_slice(&(ep.task as u16).to_le_bytes());
        buf.push(ep.success as u8);
        buf.extend_from_slice(&(f as u16).to_le_bytes());
        buf.extend_from_slice(&(ep.actions.len() as u16).to_le_bytes());
        for &p in &ep.frames {
            buf.extend_from_slice(&p.to_le_bytes());
        }
        for a in &ep.actions {
            for v in [a.dx, a.dy, a.g] {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
    }
    Ok(buf)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(MindError::Format(format!("file truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode_episodes(bytes: &[u8]) -> Result<Vec<EpisodeRecord>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(MindError::Format("not an episode file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(MindError::Format(format!("unsupported episode file version {version}")));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let task = r.u16()? as usize;
        let success = match r.u8()? {
            0 => false,
            1 => true,
            b => return Err(MindError::Format(format!("invalid success flag {b}"))),
        };
        let f = r.u16()? as usize;
        let a = r.u16()? as usize;
        if f == 0 || a + 1 != f {
            return Err(MindError::Format(format!("episode with {f} frames and {a} actions")));
        }
        let frames = (0..f * FRAME_PIXELS).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
        let mut actions = Vec::with_capacity(a);
        for _ in 0..a {
            let (dx, dy, g) = (r.f32()? as f64, r.f32()? as f64, r.f32()? as f64);
            actions.push(Action { dx, dy, g });
        }
        out.push(EpisodeRecord { task, frames, actions, success });
    }
    if r.pos != bytes.len() {
        return Err(MindError::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(out)
}

pub fn write_episodes(path: &Path, episodes: &[EpisodeRecord]) -> Result<()> {
    fs::write(path, encode_episodes(episodes)?)?;
    Ok(())
}

pub fn read_episodes(path: &Path) -> Result<Vec<EpisodeRecord>> {
    decode_episodes(&fs::read(path)?)
}
