//! Bridge from (noisy) video clips to compact conditioning tokens for the
//! action policy, and the alignment loss that pulls features of noisy clips
//! toward the features of their clean versions.

use crate::error::{ensure, Result};
use crate::lodiff::{write_known_frame, CLIP_FRAMES};
use crate::nn::{tile_batch, Activation, Attention, EncoderLayer, Linear, Mlp, TimeEmbedding};
use crate::numerics::{Graph, ParamId, ParamStore, Rng, Tensor, Var};
use crate::pushworld::FRAME_PIXELS;
use crate::schedulers::{Schedule, Slow, Step};

#[derive(Clone, Debug, PartialEq)]
pub struct MatcherConfig {
    /// Channels each pixel is lifted to before the frame projection.
    pub pixel_channels: usize,
    pub embed: usize,
    pub hidden: usize,
    pub proj: usize,
    pub layers: usize,
    pub heads: usize,
}

impl Default for MatcherConfig {
    fn default() -> Self {
        Self { pixel_channels: 8, embed: 64, hidden: 64, proj: 32, layers: 2, heads: 4 }
    }
}

/// Conditioning tokens `[B, 4, proj]` and the timestep of the clip they came from.
#[derive(Clone, Debug, PartialEq)]
pub struct MatcherFeature {
    pub tokens: Tensor,
    pub step: Step<Slow>,
}

#[derive(Debug)]
pub struct DiffMatcher {
    pub config: MatcherConfig,
    pixel: Linear,
    frame_embed: Mlp,
    pos: ParamId,
    time: TimeEmbedding,
    encoder: Vec<EncoderLayer>,
    queries: ParamId,
    cross: Attention,
    max_t: usize,
}

impl DiffMatcher {
    /// `max_t` is the largest timestep the time-embedding table covers.
    pub fn new(store: &mut ParamStore, name: &str, config: MatcherConfig, max_t: usize, rng: &mut Rng) -> Result<Self> {
        ensure!(config.hidden % config.heads == 0, "hidden {} not divisible by {} heads", config.hidden, config.heads);
        ensure!(config.proj % config.heads == 0, "projection {} not divisible by {} heads", config.proj, config.heads);
        ensure!(config.pixel_channels >= 1, "need at least one pixel channel");
        let (h, p, k) = (config.hidden, config.proj, config.pixel_channels);
        // spread the ReLU kinks over the pixel range so the channels start out
        // separating the few intensity levels of a frame
        let pixel = Linear::new(store, &format!("{name}.pixel"), 1, k, rng)?;
        *store.get_mut(pixel.w) = Tensor::from_fn(&[1, k], |_| rng.normal());
        *store.get_mut(pixel.b) = Tensor::from_fn(&[k], |_| rng.uniform_range(-1.0, 1.0));
        let frame_embed =
            Mlp::new(store, &format!("{name}.frame_embed"), (FRAME_PIXELS * k, config.embed, h), Activation::Relu, rng)?;
        let pos = store.add(format!("{name}.pos"), Tensor::from_fn(&[CLIP_FRAMES, h], |_| 0.02 * rng.normal()))?;
        let time = TimeEmbedding::new(store, &format!("{name}.time"), h, h, max_t, rng)?;
        let encoder = (0..config.layers)
            .map(|i| EncoderLayer::new(store, &format!("{name}.encoder{i}"), h, config.heads, 2 * h, rng))
            .collect::<Result<Vec<_>>>()?;
        let queries = store.add(format!("{name}.queries"), Tensor::from_fn(&[CLIP_FRAMES, p], |_| rng.normal()))?;
        let cross = Attention::new(store, &format!("{name}.cross"), p, h, p, config.heads, rng)?;
        Ok(Self { config, pixel, frame_embed, pos, time, encoder, queries, cross, max_t })
    }

    /// Tokens `[B, 4, proj]` for clips `[B, 4, 256]` at per-sample timesteps,
    /// each normalized to zero mean and unit variance over its width.
    pub fn forward(&self, g: &mut Graph, clips: Var, steps: &[Step<Slow>]) -> Result<Var> {
        let b = steps.len();
        ensure!(b >= 1, "empty batch");
        ensure!(
            g.shape(clips) == [b, CLIP_FRAMES, FRAME_PIXELS],
            "clips must be [{b}, {CLIP_FRAMES}, {FRAME_PIXELS}], got {:?}",
            g.shape(clips)
        );
        let ts: Vec<usize> = steps.iter().map(|s| s.get()).collect();
        ensure!(ts.iter().all(|&t| t <= self.max_t), "timestep outside the embedding table 0..={}", self.max_t);
        let (h, k) = (self.config.hidden, self.config.pixel_channels);
        let x = g.reshape(clips, &[b, CLIP_FRAMES, FRAME_PIXELS, 1])?;
        let x = self.pixel.forward(g, x)?;
        let x = g.relu(x);
        let x = g.reshape(x, &[b, CLIP_FRAMES, FRAME_PIXELS * k])?;
        let x = self.frame_embed.forward(g, x)?;
        let pos = g.param(self.pos);
        let x = g.add(x, pos)?;
        let temb = self.time.forward(g, &ts)?;
        let temb = g.reshape(temb, &[b, 1, h])?;
        let temb = g.broadcast(temb, 1, CLIP_FRAMES)?;
        let mut x = g.add(x, temb)?;
        for layer in &self.encoder {
            x = layer.forward(g, x)?;
        }
        let q = g.param(self.queries);
        let q = tile_batch(g, q, b)?;
        let z = self.cross.forward(g, q, x)?;
        // fixed unit-gain normalization keeps the token scale bounded; with a
        // moving stop-gradient target the features could otherwise grow freely
        let p = self.config.proj;
        let ones = g.constant(Tensor::full(&[p], 1.0));
        let zeros = g.constant(Tensor::zeros(&[p]));
        g.layer_norm(z, ones, zeros)
    }

    /// Inference helper: tokens for a single clip `[4, 256]`.
    pub fn features(&self, params: &ParamStore, clip: &Tensor, step: Step<Slow>) -> Result<MatcherFeature> {
        let mut g = Graph::inference(params);
        let x = g.constant(clip.clone().reshape(&[1, CLIP_FRAMES, FRAME_PIXELS])?);
        let z = self.forward(&mut g, x, &[step])?;
        let tokens = g.value(z).clone().reshape(&[CLIP_FRAMES, self.config.proj])?;
        Ok(MatcherFeature { tokens, step })
    }

    /// Mean squared distance between `φ(v_τ, τ)` and `sg(φ(v_0, 0))` with `τ` drawn
    /// uniformly per sample. The known frame of each clip stays clean.
    pub fn align_loss(&self, g: &mut Graph, clean: &Tensor, schedule: &Schedule<Slow>, rng: &mut Rng) -> Result<Var> {
        let b = clean.shape()[0];
        let steps: Vec<Step<Slow>> = (0..b).map(|_| schedule.sample_step(rng)).collect();
        let eps = rng.normal_tensor(clean.shape());
        self.align_loss_at(g, clean, &eps, &steps, schedule)
    }

    /// [`DiffMatcher::align_loss`] with explicit noise and timesteps.
    pub fn align_loss_at(
        &self,
        g: &mut Graph,
        clean: &Tensor,
        eps: &Tensor,
        steps: &[Step<Slow>],
        schedule: &Schedule<Slow>,
    ) -> Result<Var> {
        let b = steps.len();
        ensure!(
            clean.shape() == [b, CLIP_FRAMES, FRAME_PIXELS],
            "clean clips must be [{b}, {CLIP_FRAMES}, {FRAME_PIXELS}], got {:?}",
            clean.shape()
        );
        let noisy = noise_clips(clean, eps, steps, schedule)?;
        let zero = vec![schedule.clean(); b];
        let cx = g.constant(clean.clone());
        let target = self.forward(g, cx, &zero)?;
        let target = g.stop_grad(target);
        self.align_to_target(g, &noisy, steps, target)
    }

    /// `‖φ(noisy, τ) − target‖²` averaged over every token entry, against a
    /// target that is already detached from the parameters. Averaging (rather
    /// than summing over the `4 × proj` entries) puts the term on the same
    /// scale as the other two mean-squared losses.
    pub fn align_to_target(&self, g: &mut Graph, noisy: &Tensor, steps: &[Step<Slow>], target: Var) -> Result<Var> {
        let nx = g.constant(noisy.clone());
        let z = self.forward(g, nx, steps)?;
        g.mse(z, target)
    }
}

/// Noises each clip at its own timestep and restores the known frame.
pub fn noise_clips(clean: &Tensor, eps: &Tensor, steps: &[Step<Slow>], schedule: &Schedule<Slow>) -> Result<Tensor> {
    ensure!(clean.shape() == eps.shape(), "noise shape {:?} differs from clips {:?}", eps.shape(), clean.shape());
    let per = clean.numel() / steps.len();
    let mut out = Vec::with_capacity(clean.numel());
    for (i, &s) in steps.iter().enumerate() {
        let ab = schedule.alpha_bar(s);
        let (a, n) = (ab.sqrt(), (1.0 - ab).sqrt());
        let x0 = &clean.data()[i * per..(i + 1) * per];
        let e = &eps.data()[i * per..(i + 1) * per];
        out.extend(x0.iter().zip(e).map(|(x, e)| a * x + n * e));
    }
    let mut out = Tensor::new(clean.shape(), out)?;
    let v0 = crate::lodiff::known_frames(clean);
    write_known_frame(&mut out, &v0);
    Ok(out)
}
