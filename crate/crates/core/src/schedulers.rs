//! Linear noise schedules, forward noising, DDIM reverse steps and the
//! classifier-free guidance combiner.
//!
//! Timesteps are 1-based: `alpha_bar(0) == 1` is the clean endpoint and
//! `alpha_bar(T)` the noisiest. A [`Schedule`] is tagged with a process marker
//! ([`Slow`] or [`Fast`]) and only accepts [`Step`]s carrying the same tag, so
//! timesteps of the video and action processes cannot be mixed up.

use std::fmt;
use std::marker::PhantomData;

use crate::error::{contract, ensure, Result};
use crate::numerics::{Rng, Tensor};

/// Marker for the long video process.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Slow;

/// Marker for the short action process.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Fast;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Parameterization {
    Epsilon,
    Velocity,
}

/// Timestep of a process `P`, range-checked against its schedule.
pub struct Step<P> {
    t: usize,
    _process: PhantomData<fn() -> P>,
}

impl<P> Step<P> {
    pub fn get(self) -> usize {
        self.t
    }
}

impl<P> Clone for Step<P> {
    fn clone(&self) -> Self {
        *self
    }
}
impl<P> Copy for Step<P> {}
impl<P> PartialEq for Step<P> {
    fn eq(&self, other: &Self) -> bool {
        self.t == other.t
    }
}
impl<P> Eq for Step<P> {}
impl<P> fmt::Debug for Step<P> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Step({})", self.t)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub zero_snr: bool,
    pub parameterization: Parameterization,
}

impl ScheduleConfig {
    /// Video process: 1000 steps, β from 0.00085 to 0.012, zero terminal SNR,
    /// velocity targets.
    pub fn slow() -> Self {
        Self { steps: 1000, beta_start: 0.00085, beta_end: 0.012, zero_snr: true, parameterization: Parameterization::Velocity }
    }

    /// Action process: 100 steps with ε targets. The β range is the usual
    /// 1000-step range scaled by 1000/100 so the last step is close to pure
    /// noise (ᾱ_T ≈ 4e-5).
    pub fn fast() -> Self {
        Self { steps: 100, beta_start: 1e-3, beta_end: 0.2, zero_snr: false, parameterization: Parameterization::Epsilon }
    }
}

#[derive(Clone, Debug)]
pub struct Schedule<P> {
    config: ScheduleConfig,
    betas: Vec<f64>,
    alphas_bar: Vec<f64>,
    _process: PhantomData<fn() -> P>,
}

impl<P> PartialEq for Schedule<P> {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.alphas_bar == other.alphas_bar
    }
}

impl<P> Schedule<P> {
    pub fn new(config: ScheduleConfig) -> Result<Self> {
        let ScheduleConfig { steps, beta_start, beta_end, zero_snr, .. } = config;
        ensure!(steps >= 1, "schedule needs at least one step");
        ensure!(
            beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0,
            "invalid beta range [{beta_start}, {beta_end}]"
        );
        let mut betas = vec![0.0; steps + 1];
        for (i, b) in betas.iter_mut().enumerate().skip(1) {
            let frac = if steps == 1 { 0.0 } else { (i - 1) as f64 / (steps - 1) as f64 };
            *b = beta_start + frac * (beta_end - beta_start);
        }
        let mut alphas_bar = vec![1.0; steps + 1];
        for i in 1..=steps {
            alphas_bar[i] = alphas_bar[i - 1] * (1.0 - betas[i]);
        }
        if zero_snr {
            ensure!(steps >= 2, "zero terminal SNR needs at least two steps");
            // shift and scale sqrt(alpha_bar) so the first step keeps its value
            // and the last lands on zero
            let first = alphas_bar[1].sqrt();
            let last = alphas_bar[steps].sqrt();
            let k = first / (first - last);
            for ab in alphas_bar.iter_mut().skip(1) {
                let s = (ab.sqrt() - last) * k;
                *ab = s * s;
            }
            alphas_bar[steps] = 0.0;
            for i in 1..=steps {
                betas[i] = 1.0 - alphas_bar[i] / alphas_bar[i - 1];
            }
        }
        Ok(Self { config, betas, alphas_bar, _process: PhantomData })
    }

    pub fn config(&self) -> &ScheduleConfig {
        &self.config
    }

    pub fn steps(&self) -> usize {
        self.config.steps
    }

    pub fn parameterization(&self) -> Parameterization {
        self.config.parameterization
    }

    pub fn step(&self, t: usize) -> Result<Step<P>> {
        ensure!(t <= self.config.steps, "timestep {t} outside 0..={}", self.config.steps);
        Ok(Step { t, _process: PhantomData })
    }

    /// The noisiest timestep `T`.
    pub fn last(&self) -> Step<P> {
        Step { t: self.config.steps, _process: PhantomData }
    }

    pub fn clean(&self) -> Step<P> {
        Step { t: 0, _process: PhantomData }
    }

    pub fn sample_step(&self, rng: &mut Rng) -> Step<P> {
        Step { t: rng.inclusive(1, self.config.steps), _process: PhantomData }
    }

    pub fn beta(&self, t: Step<P>) -> f64 {
        self.betas[t.t]
    }

    pub fn alpha_bar(&self, t: Step<P>) -> f64 {
        self.alphas_bar[t.t]
    }

    pub fn alphas_bar(&self) -> &[f64] {
        &self.alphas_bar
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas[1..]
    }

    /// `√ᾱ·x0 + √(1−ᾱ)·ε`.
    pub fn add_noise(&self, x0: &Tensor, eps: &Tensor, t: Step<P>) -> Result<Tensor> {
        let ab = self.alpha_bar(t);
        let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
        x0.zip_map(eps, |x, e| a * x + s * e)
    }

    /// `√ᾱ·ε − √(1−ᾱ)·x0`.
    pub fn velocity_target(&self, x0: &Tensor, eps: &Tensor, t: Step<P>) -> Result<Tensor> {
        let ab = self.alpha_bar(t);
        let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
        x0.zip_map(eps, |x, e| a * e - s * x)
    }

    /// Regression target of the denoiser under this schedule's parameterization.
    pub fn target(&self, x0: &Tensor, eps: &Tensor, t: Step<P>) -> Result<Tensor> {
        match self.config.parameterization {
            Parameterization::Epsilon => {
                ensure!(x0.shape() == eps.shape(), "shape mismatch {:?} vs {:?}", x0.shape(), eps.shape());
                Ok(eps.clone())
            }
            Parameterization::Velocity => self.velocity_target(x0, eps, t),
        }
    }

    /// Converts a network prediction at `x_t` into `(x̂0, ε̂)` without clamping.
    pub fn split_prediction(&self, x_t: &Tensor, pred: &Tensor, t: Step<P>) -> Result<(Tensor, Tensor)> {
        ensure!(x_t.shape() == pred.shape(), "shape mismatch {:?} vs {:?}", x_t.shape(), pred.shape());
        let ab = self.alpha_bar(t);
        let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
        match self.config.parameterization {
            Parameterization::Velocity => {
                let x0 = x_t.zip_map(pred, |x, v| a * x - s * v)?;
                let eps = x_t.zip_map(pred, |x, v| s * x + a * v)?;
                Ok((x0, eps))
            }
            Parameterization::Epsilon => {
                if a == 0.0 {
                    contract!("epsilon prediction carries no signal estimate at zero alpha_bar");
                }
                let x0 = x_t.zip_map(pred, |x, e| (x - s * e) / a)?;
                Ok((x0, pred.clone()))
            }
        }
    }

    /// One DDIM update from `t` to `t_next < t`. `x̂0` is clamped to `[-1, 1]`
    /// and `ε̂` recomputed to match it. `noise` is required when `eta > 0`.
    pub fn reverse_step(
        &self,
        x_t: &Tensor,
        pred: &Tensor,
        t: Step<P>,
        t_next: Step<P>,
        eta: f64,
        noise: Option<&Tensor>,
    ) -> Result<Tensor> {
        ensure!(t_next.t < t.t, "reverse step must decrease the timestep ({} -> {})", t.t, t_next.t);
        ensure!(eta >= 0.0, "eta must be non-negative");
        let (x0, mut eps) = self.split_prediction(x_t, pred, t)?;
        let x0 = x0.map(|v| v.clamp(-1.0, 1.0));
        let ab = self.alpha_bar(t);
        if ab < 1.0 {
            let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
            eps = x_t.zip_map(&x0, |x, x0| (x - a * x0) / s)?;
        }
        let ab_next = self.alpha_bar(t_next);
        let sigma = if eta > 0.0 && ab < 1.0 {
            eta * ((1.0 - ab_next) / (1.0 - ab)).sqrt() * (1.0 - ab / ab_next).max(0.0).sqrt()
        } else {
            0.0
        };
        let dir = (1.0 - ab_next - sigma * sigma).max(0.0).sqrt();
        let a_next = ab_next.sqrt();
        let mut out = x0.zip_map(&eps, |x0, e| a_next * x0 + dir * e)?;
        if sigma > 0.0 {
            let Some(noise) = noise else {
                contract!("stochastic reverse step (eta = {eta}) needs a noise tensor");
            };
            out = out.zip_map(noise, |x, z| x + sigma * z)?;
        }
        Ok(out)
    }

    /// Evenly spaced descending timesteps for an `n`-step DDIM chain; the chain
    /// ends at 0 after the last entry.
    pub fn ddim_timesteps(&self, n: usize) -> Result<Vec<Step<P>>> {
        let total = self.config.steps;
        ensure!(n >= 1 && n <= total, "DDIM step count {n} outside 1..={total}");
        Ok((0..n).map(|i| Step { t: total * (n - i) / n, _process: PhantomData }).collect())
    }
}

/// `ε_u + s·(ε_c − ε_u)`, evaluated as `(1 − s)·ε_u + s·ε_c` so that `s = 0`
/// and `s = 1` return the unconditional and conditional inputs exactly.
pub fn cfg_combine(uncond: &Tensor, cond: &Tensor, s: f64) -> Result<Tensor> {
    uncond.zip_map(cond, |u, c| (1.0 - s) * u + s * c)
}
