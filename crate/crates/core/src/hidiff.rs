//! Fast action policy: a DiT-style transformer that denoises an 8-step action
//! chunk, conditioned on matcher tokens through gated cross-attention and on
//! a task token.
//!
//! Chunks live in a normalized space: deltas are scaled by 10 so they span
//! `[-1, 1]`, and the gripper command `g ∈ [0, 1]` maps to `2g − 1`.

use std::sync::atomic::{AtomicUsize, Ordering};

use crate::error::{ensure, Result};
use crate::lodiff::{drop_condition, CLIP_FRAMES, NULL_TASK, NUM_TASK_TOKENS};
use crate::nn::{Activation, Attention, LayerNorm, Linear, Mlp, TimeEmbedding};
use crate::numerics::{Graph, ParamId, ParamStore, Rng, Tensor, Var};
use crate::pushworld::{Action, MAX_DELTA};
use crate::schedulers::{cfg_combine, Fast, Schedule, ScheduleConfig, Step};

pub const CHUNK: usize = 8;
pub const ACTION_DIM: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct HiDiffConfig {
    pub depth: usize,
    pub hidden: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub cond_drop: f64,
    pub cfg_scale: f64,
    pub sample_steps: usize,
    /// Width of the matcher tokens the policy attends to.
    pub cond_dim: usize,
    pub schedule: ScheduleConfig,
}

impl Default for HiDiffConfig {
    fn default() -> Self {
        Self {
            depth: 4,
            hidden: 128,
            heads: 4,
            mlp_ratio: 2,
            cond_drop: 0.1,
            cfg_scale: 1.5,
            sample_steps: 10,
            cond_dim: 32,
            schedule: ScheduleConfig::fast(),
        }
    }
}

impl HiDiffConfig {
    /// 6 layers, width 384, 4 heads.
    pub fn small() -> Self {
        Self { depth: 6, hidden: 384, heads: 4, ..Self::default() }
    }

    /// 12 layers, width 768, 12 heads.
    pub fn base() -> Self {
        Self { depth: 12, hidden: 768, heads: 12, ..Self::default() }
    }
}

pub fn normalize_action(a: &Action) -> [f64; 3] {
    [a.dx / MAX_DELTA, a.dy / MAX_DELTA, 2.0 * a.g - 1.0]
}

/// Inverse of [`normalize_action`] followed by clamping the deltas and
/// thresholding the gripper.
pub fn decode_action(x: &[f64]) -> Action {
    let g = if (x[2] + 1.0) / 2.0 >= 0.5 { 1.0 } else { 0.0 };
    Action::new(x[0] * MAX_DELTA, x[1] * MAX_DELTA, g)
}

#[derive(Clone, Debug)]
struct Block {
    ln1: LayerNorm,
    attn: Attention,
    ln2: LayerNorm,
    cross: Attention,
    gate: ParamId,
    ln3: LayerNorm,
    mlp: Mlp,
}

#[derive(Debug)]
pub struct HiDiff {
    pub config: HiDiffConfig,
    pub schedule: Schedule<Fast>,
    action_in: Linear,
    pos: ParamId,
    tasks: ParamId,
    null_z: ParamId,
    time: TimeEmbedding,
    blocks: Vec<Block>,
    ln_out: LayerNorm,
    action_head: Linear,
    gripper_head: Linear,
    evaluations: AtomicUsize,
}

impl HiDiff {
    pub fn new(store: &mut ParamStore, name: &str, config: HiDiffConfig, rng: &mut Rng) -> Result<Self> {
        ensure!(config.hidden % config.heads == 0, "hidden {} not divisible by {} heads", config.hidden, config.heads);
        ensure!((0.0..=1.0).contains(&config.cond_drop), "condition drop probability must be in [0, 1]");
        ensure!(config.cfg_scale.is_finite() && config.cfg_scale >= 0.0, "guidance scale must be finite and non-negative");
        let schedule = Schedule::new(config.schedule)?;
        let (h, c) = (config.hidden, config.cond_dim);
        let action_in = Linear::new(store, &format!("{name}.action_in"), ACTION_DIM, h, rng)?;
        let pos = store.add(format!("{name}.pos"), Tensor::from_fn(&[CHUNK, h], |_| 0.02 * rng.normal()))?;
        let tasks = store.add(format!("{name}.task_table"), Tensor::from_fn(&[NUM_TASK_TOKENS, h], |_| 0.02 * rng.normal()))?;
        let null_z = store.add(format!("{name}.null_z"), Tensor::from_fn(&[CLIP_FRAMES, c], |_| rng.normal()))?;
        let time = TimeEmbedding::new(store, &format!("{name}.time"), h, h, config.schedule.steps, rng)?;
        let mut blocks = Vec::with_capacity(config.depth);
        for i in 0..config.depth {
            let p = format!("{name}.block{i}");
            blocks.push(Block {
                ln1: LayerNorm::new(store, &format!("{p}.ln1"), h)?,
                attn: Attention::new(store, &format!("{p}.attn"), h, h, h, config.heads, rng)?,
                ln2: LayerNorm::new(store, &format!("{p}.ln2"), h)?,
                cross: Attention::new(store, &format!("{p}.cross"), h, c, h, config.heads, rng)?,
                gate: store.add(format!("{p}.gate"), Tensor::full(&[1], 1.0))?,
                ln3: LayerNorm::new(store, &format!("{p}.ln3"), h)?,
                mlp: Mlp::new(store, &format!("{p}.mlp"), (h, config.mlp_ratio * h, h), Activation::Silu, rng)?,
            });
        }
        let ln_out = LayerNorm::new(store, &format!("{name}.ln_out"), h)?;
        let action_head = Linear::new(store, &format!("{name}.action_head"), h, 2, rng)?;
        let gripper_head = Linear::new(store, &format!("{name}.gripper_head"), h, 1, rng)?;
        Ok(Self {
            config,
            schedule,
            action_in,
            pos,
            tasks,
            null_z,
            time,
            blocks,
            ln_out,
            action_head,
            gripper_head,
            evaluations: AtomicUsize::new(0),
        })
    }

    /// Counts one evaluation per chunk row processed by the denoiser.
    pub fn evaluations(&self) -> usize {
        self.evaluations.load(Ordering::Relaxed)
    }

    pub fn reset_evaluations(&self) {
        self.evaluations.store(0, Ordering::Relaxed);
    }

    pub fn gate_ids(&self) -> Vec<ParamId> {
        self.blocks.iter().map(|b| b.gate).collect()
    }

    /// Ids of the two output heads' parameters: `(action, gripper)`.
    pub fn head_ids(&self) -> ([ParamId; 2], [ParamId; 2]) {
        ([self.action_head.w, self.action_head.b], [self.gripper_head.w, self.gripper_head.b])
    }

    /// Predicted noise `[B, 8, 3]` for noisy chunks at per-sample timesteps.
    /// Rows whose task id is `NULL_TASK` use the learned null tokens in place
    /// of both the task embedding and `z`.
    pub fn forward(&self, g: &mut Graph, noisy: &Tensor, steps: &[Step<Fast>], z: Var, tasks: &[usize]) -> Result<Var> {
        self.forward_impl(g, noisy, steps, z, tasks, true)
    }

    /// The same network with every cross-attention sublayer removed.
    pub fn forward_without_cross(&self, g: &mut Graph, noisy: &Tensor, steps: &[Step<Fast>], z: Var, tasks: &[usize]) -> Result<Var> {
        self.forward_impl(g, noisy, steps, z, tasks, false)
    }

    fn forward_impl(
        &self,
        g: &mut Graph,
        noisy: &Tensor,
        steps: &[Step<Fast>],
        z: Var,
        tasks: &[usize],
        cross: bool,
    ) -> Result<Var> {
        let b = steps.len();
        let (h, c) = (self.config.hidden, self.config.cond_dim);
        ensure!(b >= 1, "empty batch");
        ensure!(noisy.shape() == [b, CHUNK, ACTION_DIM], "chunk must be [{b}, {CHUNK}, {ACTION_DIM}], got {:?}", noisy.shape());
        ensure!(g.shape(z) == [b, CLIP_FRAMES, c], "conditioning must be [{b}, {CLIP_FRAMES}, {c}], got {:?}", g.shape(z));
        ensure!(tasks.len() == b, "{} task ids for batch of {b}", tasks.len());
        ensure!(tasks.iter().all(|&t| t < NUM_TASK_TOKENS), "task id out of range");
        ensure!(steps.iter().all(|s| s.get() >= 1), "denoiser timesteps start at 1");
        self.evaluations.fetch_add(b, Ordering::Relaxed);

        let ts: Vec<usize> = steps.iter().map(|s| s.get()).collect();
        let temb = self.time.forward(g, &ts)?;
        let temb = g.reshape(temb, &[b, 1, h])?;
        let table = g.param(self.tasks);
        let task_tok = g.gather(table, tasks)?;
        let task_tok = g.reshape(task_tok, &[b, 1, h])?;
        let a = g.constant(noisy.clone());
        let a = self.action_in.forward(g, a)?;
        let pos = g.param(self.pos);
        let a = g.add(a, pos)?;
        let mut x = g.concat(&[temb, task_tok, a], 1)?;

        // swap in the null tokens for rows without conditioning
        let z = if tasks.contains(&NULL_TASK) {
            let keep: Vec<f64> = tasks
                .iter()
                .flat_map(|&t| std::iter::repeat(if t == NULL_TASK { 0.0 } else { 1.0 }).take(CLIP_FRAMES * c))
                .collect();
            let drop: Vec<f64> = keep.iter().map(|k| 1.0 - k).collect();
            let keep = g.constant(Tensor::new(&[b, CLIP_FRAMES, c], keep)?);
            let drop = g.constant(Tensor::new(&[b, CLIP_FRAMES, c], drop)?);
            let kept = g.mul(z, keep)?;
            let null = g.param(self.null_z);
            let nulls = g.mul(drop, null)?;
            g.add(kept, nulls)?
        } else {
            z
        };

        for blk in &self.blocks {
            let n = blk.ln1.forward(g, x)?;
            let s = blk.attn.forward(g, n, n)?;
            x = g.add(x, s)?;
            if cross {
                let n = blk.ln2.forward(g, x)?;
                let ca = blk.cross.forward(g, n, z)?;
                let gate = g.param(blk.gate);
                let gate = g.tanh(gate);
                let ca = g.scale_by(ca, gate)?;
                x = g.add(x, ca)?;
            }
            let n = blk.ln3.forward(g, x)?;
            let m = blk.mlp.forward(g, n)?;
            x = g.add(x, m)?;
        }
        let x = g.slice(x, 1, 2, CHUNK)?;
        let x = self.ln_out.forward(g, x)?;
        let act = self.action_head.forward(g, x)?;
        let grip = self.gripper_head.forward(g, x)?;
        g.concat(&[act, grip], 2)
    }

    /// Noise-prediction loss on normalized chunks `[B, 8, 3]` with
    /// conditioning tokens `z` (`[B, 4, cond_dim]`, may carry gradients).
    pub fn action_loss(&self, g: &mut Graph, chunks: &Tensor, z: Var, tasks: &[usize], rng: &mut Rng) -> Result<Var> {
        let b = tasks.len();
        ensure!(b >= 1, "empty batch");
        let steps: Vec<Step<Fast>> = (0..b).map(|_| self.schedule.sample_step(rng)).collect();
        let eps = rng.normal_tensor(&[b, CHUNK, ACTION_DIM]);
        let conds: Vec<usize> = tasks.iter().map(|&t| drop_condition(t, self.config.cond_drop, rng)).collect();
        self.action_loss_at(g, chunks, z, &conds, &steps, &eps)
    }

    /// [`HiDiff::action_loss`] with explicit timesteps, noise and (already
    /// dropped) task ids.
    pub fn action_loss_at(
        &self,
        g: &mut Graph,
        chunks: &Tensor,
        z: Var,
        tasks: &[usize],
        steps: &[Step<Fast>],
        eps: &Tensor,
    ) -> Result<Var> {
        let b = steps.len();
        ensure!(chunks.shape() == [b, CHUNK, ACTION_DIM], "chunks must be [{b}, {CHUNK}, {ACTION_DIM}], got {:?}", chunks.shape());
        let per = CHUNK * ACTION_DIM;
        let mut noisy = Vec::with_capacity(chunks.numel());
        for (i, &s) in steps.iter().enumerate() {
            let ab = self.schedule.alpha_bar(s);
            let (a, n) = (ab.sqrt(), (1.0 - ab).sqrt());
            let x0 = &chunks.data()[i * per..(i + 1) * per];
            let e = &eps.data()[i * per..(i + 1) * per];
            noisy.extend(x0.iter().zip(e).map(|(x, e)| a * x + n * e));
        }
        let noisy = Tensor::new(chunks.shape(), noisy)?;
        let pred = self.forward(g, &noisy, steps, z, tasks)?;
        let target = g.constant(eps.clone());
        g.mse(pred, target)
    }

    /// Denoises a chunk from pure noise with guidance scale `s` and returns it
    /// in normalized space (undecoded).
    pub fn sample_chunk(&self, params: &ParamStore, z: &Tensor, task: usize, n_steps: usize, s: f64, rng: &mut Rng) -> Result<Tensor> {
        let c = self.config.cond_dim;
        ensure!(z.shape() == [CLIP_FRAMES, c], "conditioning must be [{CLIP_FRAMES}, {c}], got {:?}", z.shape());
        let grid = self.schedule.ddim_timesteps(n_steps)?;
        let mut x = rng.normal_tensor(&[CHUNK, ACTION_DIM]);
        for (i, &t) in grid.iter().enumerate() {
            let next = grid.get(i + 1).copied().unwrap_or_else(|| self.schedule.clean());
            let mut g = Graph::inference(params);
            let pred = if s == 1.0 {
                let zv = g.constant(z.clone().reshape(&[1, CLIP_FRAMES, c])?);
                let xin = x.clone().reshape(&[1, CHUNK, ACTION_DIM])?;
                let out = self.forward(&mut g, &xin, &[t], zv, &[task])?;
                g.value(out).clone().reshape(&[CHUNK, ACTION_DIM])?
            } else {
                let zz = Tensor::stack(&[z.clone(), z.clone()])?;
                let zv = g.constant(zz);
                let xin = Tensor::stack(&[x.clone(), x.clone()])?;
                let out = self.forward(&mut g, &xin, &[t, t], zv, &[task, NULL_TASK])?;
                let out = g.value(out);
                cfg_combine(&out.index0(1), &out.index0(0), s)?
            };
            x = self.schedule.reverse_step(&x, &pred, t, next, 0.0, None)?;
        }
        Ok(x)
    }

    /// Samples and decodes a chunk of executable actions.
    pub fn sample_actions(&self, params: &ParamStore, z: &Tensor, task: usize, n_steps: usize, s: f64, rng: &mut Rng) -> Result<Vec<Action>> {
        let x = self.sample_chunk(params, z, task, n_steps, s, rng)?;
        Ok(x.data().chunks_exact(ACTION_DIM).map(decode_action).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn action_normalization_round_trip() {
        let a = Action::new(0.05, -0.1, 1.0);
        let n = normalize_action(&a);
        assert_eq!(n, [0.5, -1.0, 1.0]);
        assert_eq!(decode_action(&n), a);
        let d = decode_action(&[3.0, -7.0, -0.2]);
        assert_eq!((d.dx, d.dy, d.g), (0.1, -0.1, 0.0));
    }

    #[test]
    fn forward_shape_and_gates() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(9);
        let cfg = HiDiffConfig { depth: 2, hidden: 32, ..Default::default() };
        let m = HiDiff::new(&mut store, "hidiff", cfg, &mut rng).unwrap();
        for id in m.gate_ids() {
            assert_eq!(store.get(id).data(), &[1.0]);
        }
        let mut g = Graph::inference(&store);
        let x = rng.normal_tensor(&[3, CHUNK, ACTION_DIM]);
        let z = g.constant(rng.normal_tensor(&[3, CLIP_FRAMES, 32]));
        let s = m.schedule.step(40).unwrap();
        let y = m.forward(&mut g, &x, &[s, s, s], z, &[0, 1, NULL_TASK]).unwrap();
        assert_eq!(g.shape(y), &[3, CHUNK, ACTION_DIM]);
    }
}
