//! Slow video generator: a transformer denoiser over 4-frame clips with
//! factorized spatial and temporal attention.
//!
//! Clips are `[B, 4, 256]` tensors in data range `[-1, 1]` (pixel·2 − 1).
//! Slot 0 always holds the observed frame `v_0`: it is written back clean
//! after every noising and every reverse step, and the loss ignores it, so the
//! network only ever denoises the three future frames. The same observation is
//! also fed as conditioning tokens, together with a task token and a timestep
//! token.

use std::sync::atomic::{AtomicUsize, Ordering};

use crate::error::{ensure, Result};
use crate::nn::{Activation, Attention, LayerNorm, Linear, Mlp, TimeEmbedding};
use crate::numerics::{Graph, ParamId, ParamStore, Rng, Tensor, Var};
use crate::pushworld::{FRAME_PIXELS, FRAME_SIDE};
use crate::schedulers::{cfg_combine, Schedule, ScheduleConfig, Slow, Step};

pub const CLIP_FRAMES: usize = 4;
pub const NUM_TASK_TOKENS: usize = 5;
/// Task id of the learned null condition.
pub const NULL_TASK: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct LoDiffConfig {
    pub patch: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub guidance: f64,
    pub cond_drop: f64,
    pub sample_steps: usize,
    pub schedule: ScheduleConfig,
}

impl Default for LoDiffConfig {
    fn default() -> Self {
        Self {
            patch: 4,
            dim: 64,
            layers: 4,
            heads: 4,
            mlp_hidden: 128,
            guidance: 7.5,
            cond_drop: 0.1,
            sample_steps: 50,
            schedule: ScheduleConfig::slow(),
        }
    }
}

impl LoDiffConfig {
    fn patches_per_side(&self) -> usize {
        FRAME_SIDE / self.patch
    }

    fn num_patches(&self) -> usize {
        self.patches_per_side().pow(2)
    }

    fn patch_len(&self) -> usize {
        self.patch * self.patch
    }
}

/// A clip and the diffusion timestep it sits at.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoLatent {
    /// `[4, 256]`.
    pub frames: Tensor,
    pub step: Step<Slow>,
}

impl VideoLatent {
    pub fn is_clean(&self) -> bool {
        self.step.get() == 0
    }
}

#[derive(Clone, Debug)]
struct Layer {
    ln_s: LayerNorm,
    spatial: Attention,
    ln_t: LayerNorm,
    temporal: Attention,
    ln_m: LayerNorm,
    mlp: Mlp,
}

#[derive(Debug)]
pub struct LoDiff {
    pub config: LoDiffConfig,
    pub schedule: Schedule<Slow>,
    patch_in: Linear,
    cond_in: Linear,
    spatial_pos: ParamId,
    temporal_pos: ParamId,
    tasks: ParamId,
    time: TimeEmbedding,
    layers: Vec<Layer>,
    ln_out: LayerNorm,
    head: Linear,
    evaluations: AtomicUsize,
}

/// Splits `[B, F, 256]` frames into `[B, F, patches, patch_len]`.
fn patchify(frames: &[f64], batch: usize, nframes: usize, patch: usize) -> Tensor {
    let per_side = FRAME_SIDE / patch;
    let mut out = Vec::with_capacity(frames.len());
    for f in 0..batch * nframes {
        let img = &frames[f * FRAME_PIXELS..(f + 1) * FRAME_PIXELS];
        for py in 0..per_side {
            for px in 0..per_side {
                for ry in 0..patch {
                    let row = (py * patch + ry) * FRAME_SIDE + px * patch;
                    out.extend_from_slice(&img[row..row + patch]);
                }
            }
        }
    }
    Tensor::from_parts(vec![batch, nframes, per_side * per_side, patch * patch], out)
}

/// Replaces frame 0 of every clip in `[B, 4, 256]` with the matching row of `v0`.
pub fn write_known_frame(clips: &mut Tensor, v0: &Tensor) {
    let per_clip = CLIP_FRAMES * FRAME_PIXELS;
    let v0 = v0.data().to_vec();
    for (clip, obs) in clips.data_mut().chunks_exact_mut(per_clip).zip(v0.chunks_exact(FRAME_PIXELS)) {
        clip[..FRAME_PIXELS].copy_from_slice(obs);
    }
}

/// Frame 0 of each clip, `[B, 256]`.
pub fn known_frames(clips: &Tensor) -> Tensor {
    let b = clips.shape()[0];
    let per_clip = CLIP_FRAMES * FRAME_PIXELS;
    let data = clips.data().chunks_exact(per_clip).flat_map(|c| c[..FRAME_PIXELS].iter().copied()).collect();
    Tensor::from_parts(vec![b, FRAME_PIXELS], data)
}

/// Task id after classifier-free condition dropout.
pub fn drop_condition(task: usize, p: f64, rng: &mut Rng) -> usize {
    if rng.bernoulli(p) {
        NULL_TASK
    } else {
        task
    }
}

impl LoDiff {
    pub fn new(store: &mut ParamStore, name: &str, config: LoDiffConfig, rng: &mut Rng) -> Result<Self> {
        ensure!(FRAME_SIDE % config.patch == 0, "patch size {} does not tile a {FRAME_SIDE}-pixel frame", config.patch);
        ensure!(config.dim % config.heads == 0, "token dim {} not divisible by {} heads", config.dim, config.heads);
        ensure!((0.0..=1.0).contains(&config.cond_drop), "condition drop probability must be in [0, 1]");
        let schedule = Schedule::new(config.schedule)?;
        let (d, np, pl) = (config.dim, config.num_patches(), config.patch_len());
        let mut small = |shape: &[usize]| Tensor::from_fn(shape, |_| 0.02 * rng.normal());
        let spatial_pos = store.add(format!("{name}.spatial_pos"), small(&[np, d]))?;
        let temporal_pos = store.add(format!("{name}.temporal_pos"), small(&[CLIP_FRAMES, d]))?;
        let tasks = store.add(format!("{name}.task_table"), small(&[NUM_TASK_TOKENS, d]))?;
        let patch_in = Linear::new(store, &format!("{name}.patch_in"), pl, d, rng)?;
        let cond_in = Linear::new(store, &format!("{name}.cond_in"), pl, d, rng)?;
        let time = TimeEmbedding::new(store, &format!("{name}.time"), d, d, config.schedule.steps, rng)?;
        let mut layers = Vec::with_capacity(config.layers);
        for i in 0..config.layers {
            let p = format!("{name}.layer{i}");
            layers.push(Layer {
                ln_s: LayerNorm::new(store, &format!("{p}.ln_s"), d)?,
                spatial: Attention::new(store, &format!("{p}.spatial"), d, d, d, config.heads, rng)?,
                ln_t: LayerNorm::new(store, &format!("{p}.ln_t"), d)?,
                temporal: Attention::new(store, &format!("{p}.temporal"), d, d, d, config.heads, rng)?,
                ln_m: LayerNorm::new(store, &format!("{p}.ln_m"), d)?,
                mlp: Mlp::new(store, &format!("{p}.mlp"), (d, config.mlp_hidden, d), Activation::Silu, rng)?,
            });
        }
        let ln_out = LayerNorm::new(store, &format!("{name}.ln_out"), d)?;
        let head = Linear::new(store, &format!("{name}.head"), d, pl, rng)?;
        Ok(Self {
            config,
            schedule,
            patch_in,
            cond_in,
            spatial_pos,
            temporal_pos,
            tasks,
            time,
            layers,
            ln_out,
            head,
            evaluations: AtomicUsize::new(0),
        })
    }

    /// Network evaluations since construction (or the last reset).
    pub fn evaluations(&self) -> usize {
        self.evaluations.load(Ordering::Relaxed)
    }

    pub fn reset_evaluations(&self) {
        self.evaluations.store(0, Ordering::Relaxed);
    }

    /// Predicts the velocity for noisy clips `x_t` (`[B, 4, 256]`) at per-sample
    /// timesteps, conditioned on observations `v0` (`[B, 256]`) and task ids
    /// (`NULL_TASK` for the unconditional branch).
    pub fn forward(&self, g: &mut Graph, x_t: &Tensor, steps: &[Step<Slow>], v0: &Tensor, tasks: &[usize]) -> Result<Var> {
        let b = steps.len();
        ensure!(b >= 1, "empty batch");
        ensure!(
            x_t.shape() == [b, CLIP_FRAMES, FRAME_PIXELS],
            "noisy clip must be [{b}, {CLIP_FRAMES}, {FRAME_PIXELS}], got {:?}",
            x_t.shape()
        );
        ensure!(v0.shape() == [b, FRAME_PIXELS], "observation must be [{b}, {FRAME_PIXELS}], got {:?}", v0.shape());
        ensure!(tasks.len() == b, "{} task ids for batch of {b}", tasks.len());
        ensure!(steps.iter().all(|s| s.get() >= 1), "denoiser timesteps start at 1");
        self.evaluations.fetch_add(1, Ordering::Relaxed);

        let c = &self.config;
        let (d, np, pl, nf) = (c.dim, c.num_patches(), c.patch_len(), CLIP_FRAMES);
        let ts: Vec<usize> = steps.iter().map(|s| s.get()).collect();
        let temb = self.time.forward(g, &ts)?; // [B, d]

        // video tokens [B, F, P, d]
        let patches = g.constant(patchify(x_t.data(), b, nf, c.patch));
        let h = self.patch_in.forward(g, patches)?;
        let sp = g.param(self.spatial_pos);
        let h = g.add(h, sp)?;
        let tp = g.param(self.temporal_pos);
        let tp = g.reshape(tp, &[nf, 1, d])?;
        let tp = g.broadcast(tp, 1, np)?;
        let h = g.add(h, tp)?;
        let tv = g.reshape(temb, &[b, 1, d])?;
        let tv = g.broadcast(tv, 1, nf * np)?;
        let tv = g.reshape(tv, &[b, nf, np, d])?;
        let mut h = g.add(h, tv)?;

        // conditioning tokens [B, P + 2, d]
        let cond_patches = g.constant(patchify(v0.data(), b, 1, c.patch).reshape(&[b, np, pl])?);
        let cp = self.cond_in.forward(g, cond_patches)?;
        let cp = g.add(cp, sp)?;
        let table = g.param(self.tasks);
        let task_tok = g.gather(table, tasks)?;
        let task_tok = g.reshape(task_tok, &[b, 1, d])?;
        let time_tok = g.reshape(temb, &[b, 1, d])?;
        let cond = g.concat(&[cp, task_tok, time_tok], 1)?;
        let nc = np + 2;
        let cond = g.reshape(cond, &[b, 1, nc, d])?;
        let cond = g.broadcast(cond, 1, nf)?;
        let cond = g.reshape(cond, &[b * nf, nc, d])?;

        for layer in &self.layers {
            // spatial: each frame's patches attend to themselves and the conditioning
            let x = g.reshape(h, &[b * nf, np, d])?;
            let q = layer.ln_s.forward(g, x)?;
            let kv = g.concat(&[q, cond], 1)?;
            let a = layer.spatial.forward(g, q, kv)?;
            let x = g.add(x, a)?;
            // temporal: each patch position attends across frames
            let x = g.reshape(x, &[b, nf, np, d])?;
            let x = g.permute(x, &[0, 2, 1, 3])?;
            let x = g.reshape(x, &[b * np, nf, d])?;
            let q = layer.ln_t.forward(g, x)?;
            let a = layer.temporal.forward(g, q, q)?;
            let x = g.add(x, a)?;
            let x = g.reshape(x, &[b, np, nf, d])?;
            let x = g.permute(x, &[0, 2, 1, 3])?;
            let q = layer.ln_m.forward(g, x)?;
            let m = layer.mlp.forward(g, q)?;
            h = g.add(x, m)?;
        }

        let h = self.ln_out.forward(g, h)?;
        let out = self.head.forward(g, h)?; // [B, F, P, pl]
        let ps = c.patches_per_side();
        let out = g.reshape(out, &[b, nf, ps, ps, c.patch, c.patch])?;
        let out = g.permute(out, &[0, 1, 2, 4, 3, 5])?;
        g.reshape(out, &[b, nf, FRAME_PIXELS])
    }

    /// Velocity-prediction loss on clean clips `[B, 4, 256]`, future frames only.
    pub fn video_loss(&self, g: &mut Graph, clips: &Tensor, tasks: &[usize], rng: &mut Rng) -> Result<Var> {
        let b = tasks.len();
        ensure!(b >= 1, "empty batch");
        ensure!(clips.shape() == [b, CLIP_FRAMES, FRAME_PIXELS], "clips must be [{b}, 4, 256], got {:?}", clips.shape());
        let steps: Vec<Step<Slow>> = (0..b).map(|_| self.schedule.sample_step(rng)).collect();
        let eps = rng.normal_tensor(clips.shape());
        let conds: Vec<usize> = tasks.iter().map(|&t| drop_condition(t, self.config.cond_drop, rng)).collect();
        let (noisy, target) = self.noised_with_target(clips, &eps, &steps)?;
        let v0 = known_frames(clips);
        let pred = self.forward(g, &noisy, &steps, &v0, &conds)?;
        let pred = g.slice(pred, 1, 1, CLIP_FRAMES - 1)?;
        let target = g.constant(target);
        g.mse(pred, target)
    }

    /// Noisy clips (known frame restored) and velocity targets for the future
    /// frames, `[B, 3, 256]`.
    pub fn noised_with_target(&self, clips: &Tensor, eps: &Tensor, steps: &[Step<Slow>]) -> Result<(Tensor, Tensor)> {
        let per_clip = CLIP_FRAMES * FRAME_PIXELS;
        let mut noisy = Vec::with_capacity(clips.numel());
        let mut target = Vec::with_capacity(steps.len() * (CLIP_FRAMES - 1) * FRAME_PIXELS);
        for (i, &s) in steps.iter().enumerate() {
            let x0 = Tensor::from_parts(vec![per_clip], clips.data()[i * per_clip..(i + 1) * per_clip].to_vec());
            let e = Tensor::from_parts(vec![per_clip], eps.data()[i * per_clip..(i + 1) * per_clip].to_vec());
            let mut x = self.schedule.add_noise(&x0, &e, s)?.into_data();
            x[..FRAME_PIXELS].copy_from_slice(&x0.data()[..FRAME_PIXELS]);
            noisy.extend(x);
            target.extend_from_slice(&self.schedule.velocity_target(&x0, &e, s)?.data()[FRAME_PIXELS..]);
        }
        Ok((
            Tensor::from_parts(clips.shape().to_vec(), noisy),
            Tensor::from_parts(vec![steps.len(), CLIP_FRAMES - 1, FRAME_PIXELS], target),
        ))
    }

    /// Guided prediction for one clip: a single batched evaluation of the
    /// conditional and null branches, or only the conditional branch at `s = 1`.
    fn guided_prediction(&self, params: &ParamStore, x: &Tensor, step: Step<Slow>, v0: &Tensor, task: usize, s: f64) -> Result<Tensor> {
        let mut g = Graph::inference(params);
        let x1 = x.clone().reshape(&[1, CLIP_FRAMES, FRAME_PIXELS])?;
        let v1 = v0.clone().reshape(&[1, FRAME_PIXELS])?;
        if s == 1.0 {
            let out = self.forward(&mut g, &x1, &[step], &v1, &[task])?;
            return g.value(out).clone().reshape(&[CLIP_FRAMES, FRAME_PIXELS]);
        }
        let xx = Tensor::stack(&[x1.clone(), x1])?.reshape(&[2, CLIP_FRAMES, FRAME_PIXELS])?;
        let vv = Tensor::stack(&[v1.clone(), v1])?.reshape(&[2, FRAME_PIXELS])?;
        let out = self.forward(&mut g, &xx, &[step, step], &vv, &[task, NULL_TASK])?;
        let out = g.value(out);
        cfg_combine(&out.index0(1), &out.index0(0), s)
    }

    /// Full DDIM chain from pure noise to a clean clip, with guidance scale `s`.
    pub fn sample_video(&self, params: &ParamStore, v0: &Tensor, task: usize, n_steps: usize, s: f64, rng: &mut Rng) -> Result<VideoLatent> {
        ensure!(v0.numel() == FRAME_PIXELS, "observation must have {FRAME_PIXELS} pixels");
        let grid = self.schedule.ddim_timesteps(n_steps)?;
        let mut x = self.initial_noise(v0, rng);
        for (i, &t) in grid.iter().enumerate() {
            let next = grid.get(i + 1).copied().unwrap_or_else(|| self.schedule.clean());
            let pred = self.guided_prediction(params, &x, t, v0, task, s)?;
            x = self.schedule.reverse_step(&x, &pred, t, next, 0.0, None)?;
            write_known_frame(&mut x, v0);
        }
        Ok(VideoLatent { frames: x, step: self.schedule.clean() })
    }

    /// One reverse step from pure noise at `T′` to `T′ − 1`, conditional branch
    /// only: exactly one network evaluation.
    pub fn single_step_latent(&self, params: &ParamStore, v0: &Tensor, task: usize, rng: &mut Rng) -> Result<VideoLatent> {
        ensure!(v0.numel() == FRAME_PIXELS, "observation must have {FRAME_PIXELS} pixels");
        let t = self.schedule.last();
        let next = self.schedule.step(t.get() - 1)?;
        let x = self.initial_noise(v0, rng);
        let pred = self.guided_prediction(params, &x, t, v0, task, 1.0)?;
        let mut x = self.schedule.reverse_step(&x, &pred, t, next, 0.0, None)?;
        write_known_frame(&mut x, v0);
        Ok(VideoLatent { frames: x, step: next })
    }

    fn initial_noise(&self, v0: &Tensor, rng: &mut Rng) -> Tensor {
        let mut x = rng.normal_tensor(&[1, CLIP_FRAMES, FRAME_PIXELS]);
        write_known_frame(&mut x, v0);
        x.reshape(&[CLIP_FRAMES, FRAME_PIXELS]).expect("clip shape")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patchify_layout() {
        let frames: Vec<f64> = (0..FRAME_PIXELS).map(|i| i as f64).collect();
        let p = patchify(&frames, 1, 1, 4);
        assert_eq!(p.shape(), &[1, 1, 16, 16]);
        // patch 5 is row-block 1, col-block 1; its first row starts at pixel (4, 4)
        assert_eq!(p.data()[5 * 16], (4 * 16 + 4) as f64);
        assert_eq!(p.data()[5 * 16 + 4], (5 * 16 + 4) as f64);
    }

    #[test]
    fn forward_shape_and_known_frame_helpers() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(3);
        let cfg = LoDiffConfig { layers: 1, ..Default::default() };
        let m = LoDiff::new(&mut store, "lodiff", cfg, &mut rng).unwrap();
        let x = rng.normal_tensor(&[2, CLIP_FRAMES, FRAME_PIXELS]);
        let v0 = rng.normal_tensor(&[2, FRAME_PIXELS]);
        let s = m.schedule.step(500).unwrap();
        let mut g = Graph::inference(&store);
        let y = m.forward(&mut g, &x, &[s, s], &v0, &[0, NULL_TASK]).unwrap();
        assert_eq!(g.shape(y), &[2, CLIP_FRAMES, FRAME_PIXELS]);
        let mut c = x.clone();
        write_known_frame(&mut c, &v0);
        assert_eq!(known_frames(&c), v0);
    }
}
